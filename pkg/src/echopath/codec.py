"""Latent codec: a small convolutional VAE mapping 112x112 frames to latents.

The codec compresses (3, 112, 112) pixel frames into (d, 28, 28) latents with
a stride-4 encoder and decodes them back with values clamped to [0, 1].
Encoding is deterministic (posterior mean) so repeated calls agree bit for
bit, and latents are rescaled by per-channel factors measured once on the
training data so diffusion operates at unit scale. An identity codec is
provided for tests: it passes frames through unchanged.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import torch
import torch.nn.functional as F
from torch import nn

from .nets import norm_for
from .util import atomic_save, psnr, state_dict_hash

logger = logging.getLogger(__name__)

FRAME_SHAPE = (3, 112, 112)
MIN_TRAIN_FRAMES = 1000


class CodecError(ValueError):
    """Raised for shape violations, codec mismatches, or bad training data."""


class TrainingDiverged(RuntimeError):
    """Raised when a training loop stops improving or produces non-finite loss."""

    def __init__(self, message: str, diagnostics: Optional[dict] = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass(frozen=True)
class LatentFrame:
    """One frame's latent tensor bound to the codec that produced it."""

    data: torch.Tensor  # (d, s, s)
    codec_id: str

    @property
    def channels(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True)
class LatentVideo:
    """Ordered latent frames (F, d, s, s) with generation metadata."""

    frames: torch.Tensor
    codec_id: str
    fps: int = 32
    label: Optional[str] = None

    def __len__(self) -> int:
        return self.frames.shape[0]

    def frame(self, i: int) -> LatentFrame:
        return LatentFrame(self.frames[i], self.codec_id)


@dataclass(frozen=True)
class CodecConfig:
    latent_channels: int = 4
    base_channels: int = 32
    kl_weight: float = 1e-5
    lr: float = 2e-3
    batch_size: int = 16
    steps: int = 700
    seed: int = 0
    patience: int = 5
    eval_every: int = 100


class SmallVae(nn.Module):
    """Stride-4 convolutional VAE with diagonal-Gaussian posterior heads."""

    def __init__(self, latent_channels: int = 4, base: int = 32):
        super().__init__()
        self.enc = nn.Sequential(
            nn.Conv2d(3, base, 3, stride=2, padding=1),
            norm_for(base),
            nn.SiLU(),
            nn.Conv2d(base, 2 * base, 3, stride=2, padding=1),
            norm_for(2 * base),
            nn.SiLU(),
            nn.Conv2d(2 * base, 2 * base, 3, padding=1),
            norm_for(2 * base),
            nn.SiLU(),
        )
        self.to_mu = nn.Conv2d(2 * base, latent_channels, 1)
        self.to_logvar = nn.Conv2d(2 * base, latent_channels, 1)
        self.dec = nn.Sequential(
            nn.Conv2d(latent_channels, 2 * base, 3, padding=1),
            norm_for(2 * base),
            nn.SiLU(),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(2 * base, base, 3, padding=1),
            norm_for(base),
            nn.SiLU(),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(base, base, 3, padding=1),
            norm_for(base),
            nn.SiLU(),
            nn.Conv2d(base, 3, 3, padding=1),
        )

    def posterior(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h = self.enc(x)
        return self.to_mu(h), self.to_logvar(h).clamp(-12.0, 6.0)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.dec(z))


class Codec:
    """Encoder/decoder pair with per-channel latent rescaling and an identity hash."""

    def __init__(self, vae: SmallVae, scale: torch.Tensor, config: CodecConfig):
        self.vae = vae.eval()
        self.scale = scale.reshape(-1)
        self.config = config
        self.latent_channels = config.latent_channels
        self.latent_size = 28
        self.codec_id = "vae-" + state_dict_hash(
            {**vae.state_dict(), "scale": self.scale}
        )

    def _check_frame(self, frame: torch.Tensor) -> None:
        if frame.shape[-3:] != FRAME_SHAPE:
            raise CodecError(f"expected frame shape {FRAME_SHAPE}, got {tuple(frame.shape)}")

    @torch.no_grad()
    def encode_frames(self, frames: torch.Tensor) -> torch.Tensor:
        """Posterior means of a (B, 3, 112, 112) batch, rescaled to unit spread."""
        self._check_frame(frames)
        if frames.ndim == 3:
            frames = frames[None]
        mu, _ = self.vae.posterior(frames)
        return mu / self.scale[None, :, None, None]

    @torch.no_grad()
    def decode_latents(self, latents: torch.Tensor) -> torch.Tensor:
        if latents.ndim == 3:
            latents = latents[None]
        if latents.shape[1] != self.latent_channels:
            raise CodecError(
                f"latent has {latents.shape[1]} channels, codec expects {self.latent_channels}"
            )
        z = latents * self.scale[None, :, None, None]
        return self.vae.decode(z).clamp(0.0, 1.0)

    def encode(self, frame: torch.Tensor) -> LatentFrame:
        return LatentFrame(self.encode_frames(frame[None])[0], self.codec_id)

    def decode(self, latent: LatentFrame | torch.Tensor) -> torch.Tensor:
        if isinstance(latent, LatentFrame):
            if latent.codec_id != self.codec_id:
                raise CodecError(
                    f"latent from codec {latent.codec_id} fed to codec {self.codec_id}"
                )
            latent = latent.data
        return self.decode_latents(latent[None])[0]

    def save(self, path: Path | str) -> None:
        atomic_save(
            {
                "kind": "vae",
                "state_dict": self.vae.state_dict(),
                "scale": self.scale,
                "config": asdict(self.config),
                "codec_id": self.codec_id,
            },
            path,
        )

    @staticmethod
    def load(path: Path | str) -> "Codec":
        blob = torch.load(path, weights_only=False)
        if blob.get("kind") == "identity":
            return IdentityCodec()
        config = CodecConfig(**blob["config"])
        vae = SmallVae(config.latent_channels, config.base_channels)
        vae.load_state_dict(blob["state_dict"])
        codec = Codec(vae, blob["scale"], config)
        if codec.codec_id != blob["codec_id"]:
            raise CodecError("codec checkpoint content hash mismatch")
        return codec


class IdentityCodec(Codec):
    """Pass-through codec used in tests; latents equal pixel frames exactly."""

    def __init__(self):
        self.config = CodecConfig(latent_channels=3)
        self.latent_channels = 3
        self.latent_size = 112
        self.scale = torch.ones(3)
        self.codec_id = "identity"

    def encode_frames(self, frames: torch.Tensor) -> torch.Tensor:
        self._check_frame(frames)
        if frames.ndim == 3:
            frames = frames[None]
        return frames.clone()

    def decode_latents(self, latents: torch.Tensor) -> torch.Tensor:
        if latents.ndim == 3:
            latents = latents[None]
        return latents.clamp(0.0, 1.0)

    def save(self, path: Path | str) -> None:
        atomic_save({"kind": "identity"}, path)


def train_codec(
    frames: torch.Tensor,
    config: CodecConfig = CodecConfig(),
    val_frames: Optional[torch.Tensor] = None,
    min_frames: int = MIN_TRAIN_FRAMES,
) -> tuple[Codec, list[float]]:
    """Train the small VAE on a (N, 3, 112, 112) stack of frames.

    Returns the wrapped codec and the loss trace. Raises ``CodecError`` for
    insufficient data and ``TrainingDiverged`` when the reconstruction loss
    stops improving over the patience window or goes non-finite.
    """
    if frames.ndim != 4 or frames.shape[0] < min_frames:
        raise CodecError(
            f"need at least {min_frames} training frames, got {tuple(frames.shape)}"
        )
    torch.manual_seed(config.seed)
    vae = SmallVae(config.latent_channels, config.base_channels)
    opt = torch.optim.Adam(vae.parameters(), lr=config.lr)
    gen = torch.Generator().manual_seed(config.seed)
    trace: list[float] = []
    best_eval = float("inf")
    stale = 0
    for step in range(config.steps):
        idx = torch.randint(0, frames.shape[0], (config.batch_size,), generator=gen)
        x = frames[idx]
        mu, logvar = vae.posterior(x)
        noise = torch.randn(mu.shape, generator=gen)
        z = mu + torch.exp(0.5 * logvar) * noise
        recon = vae.decode(z)
        recon_loss = F.mse_loss(recon, x)
        kl = -0.5 * torch.mean(1 + logvar - mu.pow(2) - logvar.exp())
        loss = recon_loss + config.kl_weight * kl
        if not torch.isfinite(loss):
            raise TrainingDiverged(
                "codec loss went non-finite", {"step": step, "loss": float("nan")}
            )
        opt.zero_grad()
        loss.backward()
        opt.step()
        trace.append(loss.item())
        if (step + 1) % config.eval_every == 0:
            window = sum(trace[-config.eval_every :]) / config.eval_every
            if window < best_eval * 0.995:
                best_eval = window
                stale = 0
            else:
                stale += 1
                if stale >= config.patience:
                    raise TrainingDiverged(
                        "codec loss stopped improving",
                        {"step": step, "window": window, "best": best_eval},
                    )
            logger.info("codec step %d loss %.5f", step + 1, window)

    with torch.no_grad():
        sample = frames[:: max(1, frames.shape[0] // 256)]
        mu, _ = vae.posterior(sample)
        scale = mu.permute(1, 0, 2, 3).reshape(mu.shape[1], -1).std(dim=1)
        scale = torch.clamp(scale, min=1e-3)
    codec = Codec(vae, scale, config)
    if val_frames is not None:
        val_psnr = roundtrip_psnr(codec, val_frames)
        logger.info("codec held-out roundtrip PSNR %.2f dB", val_psnr)
    return codec, trace


@torch.no_grad()
def roundtrip_psnr(codec: Codec, frames: torch.Tensor) -> float:
    """Mean PSNR of decode(encode(x)) over a stack of frames."""
    outs = []
    for i in range(0, frames.shape[0], 32):
        batch = frames[i : i + 32]
        outs.append(codec.decode_latents(codec.encode_frames(batch)))
    recon = torch.cat(outs)
    return psnr(recon, frames)
