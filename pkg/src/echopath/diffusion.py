"""Core diffusion mechanics shared by the image and video stages.

Implements the discrete forward process

    x_t = sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps,   abar_t = prod_{i<=t}(1 - beta_i)

together with the v parameterization used as the training target,

    v = sqrt(abar_t) * eps - sqrt(1 - abar_t) * x0,

its inverse algebra, classifier-free guidance combination, the ancestral
reverse step, and a generic seeded sampling loop. Everything here is a pure
function of its explicit inputs (including seeds), independent of any network
architecture.

Timesteps are 1-indexed: t ranges over ``1..T`` and ``t=0`` denotes a finished
sample. Schedule tables are kept in float64 so the cumulative-product identity
holds to ~1e-16; coefficients are cast to the tensor dtype on use.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np
import torch

__all__ = [
    "NoiseSchedule",
    "GuidanceConfig",
    "DiffusionSampleState",
    "make_schedule",
    "forward_diffuse",
    "v_target",
    "x0_eps_from_v",
    "cfg_combine",
    "reverse_step",
    "sample",
    "sample_batch",
    "training_loss",
]

SCHEDULE_SHAPES = ("linear", "cosine", "cosine-like")


class ParameterError(ValueError):
    """Raised when an operation is called with out-of-contract parameters."""


@dataclass(frozen=True)
class NoiseSchedule:
    """Beta / cumulative-alpha tables governing forward and reverse diffusion.

    ``betas[i]`` and ``alpha_bars[i]`` hold the values for timestep ``t=i+1``.
    ``timestep_map[i]`` is the timestep the denoiser should be conditioned on;
    it is the identity for a full schedule and carries the original training
    timesteps for a strided sampling schedule.
    """

    num_steps: int
    betas: np.ndarray
    alpha_bars: np.ndarray
    shape: str = "linear"
    beta_start: float = 1e-4
    beta_end: float = 0.02
    timestep_map: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        abars = np.asarray(self.alpha_bars, dtype=np.float64)
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alpha_bars", abars)
        if self.timestep_map is None:
            object.__setattr__(
                self, "timestep_map", np.arange(1, self.num_steps + 1, dtype=np.int64)
            )
        else:
            object.__setattr__(
                self, "timestep_map", np.asarray(self.timestep_map, dtype=np.int64)
            )
        if betas.shape != (self.num_steps,) or abars.shape != (self.num_steps,):
            raise ParameterError("schedule tables must have length num_steps")
        if not (np.all(betas > 0.0) and np.all(betas < 1.0)):
            raise ParameterError("betas must lie in (0, 1)")
        if not (np.all(abars > 0.0) and np.all(abars < 1.0)):
            raise ParameterError("alpha_bars must lie in (0, 1)")
        if np.any(np.diff(abars) >= 0.0):
            raise ParameterError("alpha_bars must be strictly decreasing")

    def alpha_bar(self, t: int) -> float:
        """Cumulative product abar_t for a 1-indexed timestep; abar_0 = 1."""
        if t == 0:
            return 1.0
        self._check_t(t)
        return float(self.alpha_bars[t - 1])

    def beta(self, t: int) -> float:
        self._check_t(t)
        return float(self.betas[t - 1])

    def model_timestep(self, t: int) -> int:
        """Timestep value to feed the denoiser when sampling at step t."""
        self._check_t(t)
        return int(self.timestep_map[t - 1])

    def _check_t(self, t: int) -> None:
        if not 1 <= t <= self.num_steps:
            raise ParameterError(f"timestep {t} outside [1, {self.num_steps}]")

    def strided(self, stride: int) -> "NoiseSchedule":
        """Sub-schedule visiting every ``stride``-th timestep, last step included.

        The sub-schedule's cumulative products equal the parent's at the kept
        timesteps exactly (the per-step betas are recomputed from ratios), so a
        reverse pass over it is an ancestral pass over the kept timesteps.
        """
        if stride < 1:
            raise ParameterError("stride must be >= 1")
        kept = list(range(self.num_steps, 0, -stride))[::-1]
        abars = self.alpha_bars[[t - 1 for t in kept]]
        prev = np.concatenate([[1.0], abars[:-1]])
        betas = 1.0 - abars / prev
        return NoiseSchedule(
            num_steps=len(kept),
            betas=betas,
            alpha_bars=abars,
            shape=self.shape,
            beta_start=self.beta_start,
            beta_end=self.beta_end,
            timestep_map=np.asarray([self.timestep_map[t - 1] for t in kept]),
        )

    def to_config_items(self) -> dict:
        """Plain-text key/value form used inside experiment configs."""
        return {
            "T": str(self.num_steps),
            "shape": self.shape,
            "beta_start": repr(self.beta_start),
            "beta_end": repr(self.beta_end),
        }

    @staticmethod
    def from_config_items(items: dict) -> "NoiseSchedule":
        return make_schedule(
            int(items["T"]),
            float(items["beta_start"]),
            float(items["beta_end"]),
            shape=items.get("shape", "linear"),
        )


@dataclass(frozen=True)
class GuidanceConfig:
    """Classifier-free guidance settings.

    ``scale`` is the inference-time guidance weight w; ``conditional_dropout_p``
    is the probability of replacing the class condition with the unconditional
    token during training.
    """

    scale: float = 1.0
    conditional_dropout_p: float = 0.1

    def __post_init__(self):
        if self.scale < 0.0:
            raise ParameterError("guidance scale must be >= 0")
        if not 0.0 <= self.conditional_dropout_p < 1.0:
            raise ParameterError("conditional_dropout_p must lie in [0, 1)")


@dataclass
class DiffusionSampleState:
    """Current tensor and (1-indexed) timestep of one reverse trajectory."""

    x: torch.Tensor
    t: int
    rng_seed: int = 0

    @property
    def finished(self) -> bool:
        return self.t == 0


def make_schedule(
    T: int, beta_start: float, beta_end: float, shape: str = "linear"
) -> NoiseSchedule:
    """Build a noise schedule of ``T`` steps.

    ``linear`` interpolates beta evenly from ``beta_start`` to ``beta_end``;
    ``cosine`` derives betas from the squared-cosine cumulative-alpha curve and
    rescales them into [beta_start, beta_end]. In both cases ``alpha_bars`` is
    the running product of ``1 - beta``, so the product identity holds by
    construction.
    """
    if T < 1:
        raise ParameterError("T must be >= 1")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ParameterError("need 0 < beta_start <= beta_end < 1")
    if shape not in SCHEDULE_SHAPES:
        raise ParameterError(f"unknown schedule shape {shape!r}")
    if shape == "cosine-like":
        shape = "cosine"
    if shape == "linear":
        betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    else:
        s = 0.008
        steps = np.arange(T + 1, dtype=np.float64)
        f = np.cos((steps / T + s) / (1 + s) * math.pi / 2) ** 2
        betas = 1.0 - f[1:] / f[:-1]
        lo, hi = betas.min(), betas.max()
        if hi > lo:
            betas = beta_start + (betas - lo) * (beta_end - beta_start) / (hi - lo)
        else:
            betas = np.full(T, beta_start)
    alpha_bars = np.cumprod(1.0 - betas)
    return NoiseSchedule(
        num_steps=T,
        betas=betas,
        alpha_bars=alpha_bars,
        shape=shape,
        beta_start=beta_start,
        beta_end=beta_end,
    )


def _coeffs(schedule: NoiseSchedule, t, like: torch.Tensor):
    """sqrt(abar_t), sqrt(1-abar_t) shaped to broadcast against ``like``.

    ``t`` may be an int (shared timestep) or a 1-D int tensor/sequence giving a
    per-sample timestep along the leading batch dimension.
    """
    if isinstance(t, int):
        schedule._check_t(t)
        ab = schedule.alpha_bar(t)
        return (
            torch.as_tensor(math.sqrt(ab), dtype=like.dtype),
            torch.as_tensor(math.sqrt(1.0 - ab), dtype=like.dtype),
        )
    ts = [int(v) for v in t]
    for v in ts:
        schedule._check_t(v)
    ab = np.asarray([schedule.alpha_bar(v) for v in ts])
    shape = (len(ts),) + (1,) * (like.ndim - 1)
    return (
        torch.as_tensor(np.sqrt(ab), dtype=like.dtype).reshape(shape),
        torch.as_tensor(np.sqrt(1.0 - ab), dtype=like.dtype).reshape(shape),
    )


def _check_shapes(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ParameterError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def forward_diffuse(
    x0: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule
) -> torch.Tensor:
    """Closed-form forward process: sqrt(abar_t)*x0 + sqrt(1-abar_t)*eps."""
    _check_shapes(x0, eps, "forward_diffuse")
    sa, sb = _coeffs(schedule, t, x0)
    return sa * x0 + sb * eps


def v_target(
    x0: torch.Tensor, eps: torch.Tensor, t, schedule: NoiseSchedule
) -> torch.Tensor:
    """Regression target of the v parameterization: sqrt(abar)*eps - sqrt(1-abar)*x0."""
    _check_shapes(x0, eps, "v_target")
    sa, sb = _coeffs(schedule, t, x0)
    return sa * eps - sb * x0


def x0_eps_from_v(
    x_t: torch.Tensor, v: torch.Tensor, t, schedule: NoiseSchedule
) -> tuple[torch.Tensor, torch.Tensor]:
    """Invert the v parameterization at timestep t.

    Returns ``(x0_hat, eps_hat)`` with ``x0_hat = sqrt(abar)*x_t - sqrt(1-abar)*v``
    and ``eps_hat = sqrt(1-abar)*x_t + sqrt(abar)*v``, so that
    ``forward_diffuse(x0_hat, t, eps_hat)`` reproduces ``x_t`` up to float error.
    """
    _check_shapes(x_t, v, "x0_eps_from_v")
    sa, sb = _coeffs(schedule, t, x_t)
    return sa * x_t - sb * v, sb * x_t + sa * v


def cfg_combine(
    pred_cond: torch.Tensor, pred_uncond: torch.Tensor, w: float
) -> torch.Tensor:
    """Guided prediction ``uncond + w * (cond - uncond)``.

    w=1 returns the conditional prediction and w=0 the unconditional one
    bit-exactly (short-circuited rather than recomputed through the formula).
    """
    _check_shapes(pred_cond, pred_uncond, "cfg_combine")
    if w < 0.0:
        raise ParameterError("guidance scale must be >= 0")
    if w == 1.0:
        return pred_cond
    if w == 0.0:
        return pred_uncond
    return pred_uncond + w * (pred_cond - pred_uncond)


def reverse_step(
    state: DiffusionSampleState,
    model_v: torch.Tensor,
    schedule: NoiseSchedule,
    step_noise: Optional[torch.Tensor] = None,
) -> DiffusionSampleState:
    """One ancestral reverse update from timestep t to t-1.

    Uses the posterior of the forward process evaluated at the (x0, eps)
    implied by ``model_v``. The noise coefficient vanishes at t=1, so the final
    step is deterministic and equals the posterior mean.
    """
    t = state.t
    if t < 1:
        raise ParameterError("reverse_step called on a finished sample (t=0)")
    _check_shapes(state.x, model_v, "reverse_step")
    x0_hat, _ = x0_eps_from_v(state.x, model_v, t, schedule)

    ab_t = schedule.alpha_bar(t)
    ab_prev = schedule.alpha_bar(t - 1)
    beta_t = schedule.beta(t)
    alpha_t = 1.0 - beta_t

    coef_x0 = math.sqrt(ab_prev) * beta_t / (1.0 - ab_t)
    coef_xt = math.sqrt(alpha_t) * (1.0 - ab_prev) / (1.0 - ab_t)
    mean = coef_x0 * x0_hat + coef_xt * state.x

    if t > 1:
        if step_noise is None:
            raise ParameterError("step_noise required for t > 1")
        _check_shapes(state.x, step_noise, "reverse_step noise")
        sigma = math.sqrt(beta_t * (1.0 - ab_prev) / (1.0 - ab_t))
        mean = mean + sigma * step_noise
    return DiffusionSampleState(x=mean, t=t - 1, rng_seed=state.rng_seed)


Denoiser = Callable[[torch.Tensor, int, object], torch.Tensor]


def _guided_v(
    denoiser: Denoiser,
    x: torch.Tensor,
    t_model: int,
    condition,
    guidance: GuidanceConfig,
) -> torch.Tensor:
    """CFG-combined prediction; skips the branch the weight makes irrelevant."""
    w = guidance.scale
    if w == 0.0:
        v = denoiser(x, t_model, None)
    elif w == 1.0:
        v = denoiser(x, t_model, condition)
    else:
        v = cfg_combine(
            denoiser(x, t_model, condition), denoiser(x, t_model, None), w
        )
    if v.shape != x.shape:
        raise ParameterError(
            f"denoiser returned shape {tuple(v.shape)}, expected {tuple(x.shape)}"
        )
    return v


def sample(
    denoiser: Denoiser,
    shape: Sequence[int],
    condition,
    guidance: GuidanceConfig,
    schedule: NoiseSchedule,
    seed: int,
    callback: Optional[Callable[[DiffusionSampleState], DiffusionSampleState]] = None,
) -> torch.Tensor:
    """Generic reverse-sampling loop, deterministic in ``seed``.

    The denoiser is called as ``denoiser(x_t, timestep, condition)`` with
    ``condition=None`` meaning the unconditional token. ``callback``, when
    given, may rewrite the state after every step (used for anchor clamping in
    the video stage).
    """
    gen = torch.Generator().manual_seed(int(seed))
    x = torch.randn(*shape, generator=gen)
    state = DiffusionSampleState(x=x, t=schedule.num_steps, rng_seed=int(seed))
    while state.t > 0:
        t = state.t
        v = _guided_v(denoiser, state.x, schedule.model_timestep(t), condition, guidance)
        noise = torch.randn(*shape, generator=gen) if t > 1 else None
        state = reverse_step(state, v, schedule, noise)
        if callback is not None:
            state = callback(state)
    return state.x


def sample_batch(
    denoiser: Denoiser,
    shape: Sequence[int],
    conditions: Sequence,
    guidance: GuidanceConfig,
    schedule: NoiseSchedule,
    seeds: Sequence[int],
    callback=None,
) -> torch.Tensor:
    """Batched variant of :func:`sample` for throughput.

    Per-sample noise streams come from per-seed generators, so the draws match
    the single-sample loop; network outputs may differ from single calls at
    float precision because of batched kernels. The denoiser receives a tensor
    with a leading batch dimension and a list of per-sample conditions.
    """
    if len(conditions) != len(seeds):
        raise ParameterError("need one condition per seed")
    gens = [torch.Generator().manual_seed(int(s)) for s in seeds]
    x = torch.stack([torch.randn(*shape, generator=g) for g in gens])
    t = schedule.num_steps
    while t > 0:
        t_model = schedule.model_timestep(t)
        w = guidance.scale
        if w == 0.0:
            v = denoiser(x, t_model, [None] * len(seeds))
        elif w == 1.0:
            v = denoiser(x, t_model, list(conditions))
        else:
            v = cfg_combine(
                denoiser(x, t_model, list(conditions)),
                denoiser(x, t_model, [None] * len(seeds)),
                w,
            )
        if v.shape != x.shape:
            raise ParameterError("denoiser returned a wrong-shaped batch")
        state = DiffusionSampleState(x=x, t=t)
        noise = (
            torch.stack([torch.randn(*shape, generator=g) for g in gens])
            if t > 1
            else None
        )
        state = reverse_step(state, v, schedule, noise)
        if callback is not None:
            state = callback(state)
        x, t = state.x, state.t
    return x


def training_loss(
    denoiser: Denoiser,
    batch: tuple[torch.Tensor, Sequence],
    schedule: NoiseSchedule,
    dropout_p: float,
    rng_seed: int,
) -> torch.Tensor:
    """Mean-squared v-prediction loss on one batch.

    Draws a uniform timestep and a Gaussian eps per sample, forms the noisy
    input and the v target, replaces each condition with the unconditional
    token with probability ``dropout_p``, and returns the scalar MSE. The
    returned tensor carries gradients when the denoiser does.
    """
    x0, conditions = batch
    if x0.shape[0] == 0:
        raise ParameterError("empty batch")
    if len(conditions) != x0.shape[0]:
        raise ParameterError("need one condition per sample")
    if not 0.0 <= dropout_p < 1.0:
        raise ParameterError("dropout_p must lie in [0, 1)")
    gen = torch.Generator().manual_seed(int(rng_seed))
    n = x0.shape[0]
    ts = torch.randint(1, schedule.num_steps + 1, (n,), generator=gen).tolist()
    eps = torch.randn(x0.shape, generator=gen, dtype=x0.dtype)
    drop = torch.rand(n, generator=gen) < dropout_p
    conds = [None if bool(drop[i]) else conditions[i] for i in range(n)]
    x_t = forward_diffuse(x0, ts, eps, schedule)
    target = v_target(x0, eps, ts, schedule)
    pred = denoiser(x_t, ts, conds)
    if pred.shape != target.shape:
        raise ParameterError("denoiser returned a wrong-shaped batch")
    return torch.mean((pred - target) ** 2)
