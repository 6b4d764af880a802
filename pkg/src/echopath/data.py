"""Dataset ingestion, manifest-driven splits, and the procedural toy generator.

Frames are torch float32 tensors of shape (3, 112, 112) with values in [0, 1];
videos are (F, 3, 112, 112). Grayscale sources are duplicated across the three
channels at ingestion and sequences are resampled to 32 fps by nearest-frame
selection.

The toy generator renders a beating elliptical "chamber" with a vertical
septum wall. Two classes with known signatures:

* ``defect``  - a structural gap of configurable height in the middle of the
  septum, baseline septal motion,
* ``hyper``   - intact septum, strong sinusoidal septal bowing.

Every video carries its generating parameters, and hand-written geometric
measurements (gap score, bowing amplitude) recover them, which is what makes
the conditional-fidelity checks elsewhere well-founded.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import torch
from PIL import Image

from .util import derive_seed

FRAME_SIZE = 112
DEFAULT_FPS = 32
SPLITS = ("train", "val", "test")

CLASS_DEFECT = "defect"
CLASS_HYPER = "hyper"
TOY_CLASSES = (CLASS_DEFECT, CLASS_HYPER)

# geometry constants shared with the structural oracle
CENTER_Y = 56.0
SEPTUM_SEARCH_HALF_WIDTH = 17
GAP_BAND_HALF_HEIGHT = 5


class DataError(ValueError):
    """Raised for unreadable sources, bad manifests, or invalid configs."""


# ---------------------------------------------------------------------------
# manifest


@dataclass(frozen=True)
class ManifestRow:
    path: str
    label: str
    split: str
    fps: int
    frames: int


@dataclass
class DatasetManifest:
    """Table of (video path, label, split, fps, frame count) rows.

    ``root`` anchors relative paths. ``access_log`` records every video read
    through a split view, so tests can assert training never touched test rows.
    """

    rows: list[ManifestRow]
    root: Path
    access_log: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        self.root = Path(self.root)
        seen: dict[str, str] = {}
        for row in self.rows:
            if row.split not in SPLITS:
                raise DataError(f"unknown split {row.split!r} in manifest")
            if row.path in seen and seen[row.path] != row.split:
                raise DataError(f"video {row.path} appears in two splits")
            seen[row.path] = row.split

    @property
    def labels(self) -> list[str]:
        return sorted({r.label for r in self.rows})

    def save(self, path: Path | str) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["path", "label", "split", "fps", "frames"])
            for r in self.rows:
                writer.writerow([r.path, r.label, r.split, r.fps, r.frames])

    @staticmethod
    def load(path: Path | str) -> "DatasetManifest":
        path = Path(path)
        rows = []
        with open(path, newline="") as f:
            reader = csv.DictReader(f)
            if reader.fieldnames != ["path", "label", "split", "fps", "frames"]:
                raise DataError(f"bad manifest header in {path}")
            for rec in reader:
                rows.append(
                    ManifestRow(
                        path=rec["path"],
                        label=rec["label"],
                        split=rec["split"],
                        fps=int(rec["fps"]),
                        frames=int(rec["frames"]),
                    )
                )
        return DatasetManifest(rows=rows, root=path.parent)


class SplitView:
    """Stable-order view over one split of a manifest; reads are logged."""

    def __init__(self, manifest: DatasetManifest, split: str):
        self.manifest = manifest
        self.split = split
        self.rows = [r for r in manifest.rows if r.split == split]

    def __len__(self) -> int:
        return len(self.rows)

    def video_path(self, i: int) -> Path:
        return self.manifest.root / self.rows[i].path

    def load_video(self, i: int) -> torch.Tensor:
        row = self.rows[i]
        self.manifest.access_log.append((row.path, self.split))
        return ingest_video(self.manifest.root / row.path, src_fps=row.fps)

    def load_all(self) -> list[torch.Tensor]:
        return [self.load_video(i) for i in range(len(self))]


def load_split(manifest: DatasetManifest, split: str) -> SplitView:
    if split not in SPLITS:
        raise DataError(f"unknown split {split!r}")
    return SplitView(manifest, split)


# ---------------------------------------------------------------------------
# ingestion


def _to_float_frames(arr: np.ndarray) -> np.ndarray:
    if arr.dtype == np.uint8:
        return arr.astype(np.float32) / 255.0
    return np.clip(arr.astype(np.float32), 0.0, 1.0)


def resample_fps_indices(n_src: int, src_fps: float, target_fps: float) -> np.ndarray:
    """Nearest-frame indices mapping a source sequence onto the target rate."""
    if n_src < 1:
        raise DataError("zero frames")
    n_out = max(1, int(math.floor(n_src * target_fps / src_fps)))
    idx = np.round(np.arange(n_out) * src_fps / target_fps).astype(np.int64)
    return np.clip(idx, 0, n_src - 1)


def ingest_frames(
    frames: np.ndarray,
    src_fps: float = DEFAULT_FPS,
    target_fps: float = DEFAULT_FPS,
    target_size: int = FRAME_SIZE,
) -> torch.Tensor:
    """Normalize an array of frames to (F, 3, size, size) float32 in [0, 1].

    Accepts (F, H, W) grayscale or (F, H, W, C); grayscale is duplicated to
    three channels, sizes are resized bilinearly only when they differ, and
    the frame rate is resampled by nearest-frame selection only when it
    differs, so the whole transform is idempotent.
    """
    arr = np.asarray(frames)
    if arr.ndim == 3:
        arr = arr[..., None]
    if arr.ndim != 4:
        raise DataError(f"expected (F,H,W[,C]) frames, got shape {arr.shape}")
    if arr.shape[0] < 1:
        raise DataError("zero frames")
    arr = _to_float_frames(arr)
    if src_fps != target_fps:
        arr = arr[resample_fps_indices(arr.shape[0], src_fps, target_fps)]
    if arr.shape[3] == 1:
        arr = np.repeat(arr, 3, axis=3)
    elif arr.shape[3] != 3:
        raise DataError(f"expected 1 or 3 channels, got {arr.shape[3]}")
    if arr.shape[1] != target_size or arr.shape[2] != target_size:
        resized = np.empty((arr.shape[0], target_size, target_size, 3), np.float32)
        for i in range(arr.shape[0]):
            im = Image.fromarray((arr[i] * 255.0 + 0.5).astype(np.uint8))
            im = im.resize((target_size, target_size), Image.BILINEAR)
            resized[i] = np.asarray(im, dtype=np.float32) / 255.0
        arr = resized
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))


def ingest_video(
    source: Path | str,
    src_fps: float = DEFAULT_FPS,
    target_fps: float = DEFAULT_FPS,
    target_size: int = FRAME_SIZE,
) -> torch.Tensor:
    """Read a video stored as a directory of numbered images or a .npy stack."""
    source = Path(source)
    if source.is_dir():
        files = sorted(source.glob("frame_*.png"))
        if not files:
            raise DataError(f"no frames found under {source}")
        arr = np.stack([np.asarray(Image.open(f)) for f in files])
    elif source.suffix == ".npy" and source.exists():
        arr = np.load(source)
    else:
        raise DataError(f"unreadable video source {source}")
    return ingest_frames(arr, src_fps, target_fps, target_size)


def write_video_frames(video: np.ndarray, out_dir: Path) -> None:
    """Store a (F, H, W) float video as 8-bit grayscale PNGs, losslessly."""
    out_dir.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(video):
        img = Image.fromarray((np.clip(frame, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8))
        img.save(out_dir / f"frame_{i:03d}.png")


# ---------------------------------------------------------------------------
# toy generator


@dataclass(frozen=True)
class ToyGeneratorConfig:
    """Class signatures and rendering knobs of the procedural toy dataset.

    ``gap_size`` rows of the septum are erased for the defect class (0 keeps
    the wall intact); ``bow_defect`` / ``bow_hyper`` are the septal-bowing
    amplitudes in pixels for the two classes. The two classes must differ in
    at least one signature parameter by ``min_margin``.
    """

    frames_per_video: int = 64
    fps: int = DEFAULT_FPS
    seed: int = 0
    gap_size: float = 16.0
    bow_defect: float = 2.0
    bow_hyper: float = 9.0
    noise_low: float = 0.02
    noise_high: float = 0.05
    pulse_amplitude: float = 0.04
    min_margin: float = 1.0

    def __post_init__(self):
        structural = abs(self.gap_size - 0.0)
        motion = abs(self.bow_hyper - self.bow_defect)
        if max(structural, motion) < self.min_margin:
            raise DataError(
                "toy classes must differ by at least min_margin in gap size or bowing"
            )

    def class_params(self, label: str) -> dict:
        if label == CLASS_DEFECT:
            return {"gap": self.gap_size, "bow": self.bow_defect}
        if label == CLASS_HYPER:
            return {"gap": 0.0, "bow": self.bow_hyper}
        raise DataError(f"unknown toy class {label!r}")


@dataclass(frozen=True)
class ToyVideoParams:
    """Per-video draw of the generator; the ground truth for oracle checks."""

    label: str
    cx: float
    a: float
    b: float
    brightness: float
    noise: float
    period: float
    phase_bow: float
    phase_pulse: float
    bow: float
    gap: float
    pulse: float
    frames: int
    fps: int

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in self.__dict__.items())


def draw_video_params(
    config: ToyGeneratorConfig, label: str, video_seed: int
) -> ToyVideoParams:
    rng = np.random.default_rng(video_seed)
    sig = config.class_params(label)
    gap = sig["gap"]
    if gap > 0:
        gap = gap + rng.uniform(-2.0, 2.0)
    return ToyVideoParams(
        label=label,
        cx=56.0 + rng.uniform(-4.0, 4.0),
        a=rng.uniform(40.0, 48.0),
        b=rng.uniform(34.0, 42.0),
        brightness=rng.uniform(0.80, 1.0),
        noise=rng.uniform(config.noise_low, config.noise_high),
        period=rng.uniform(24.0, 40.0),
        phase_bow=rng.uniform(0.0, 2.0 * math.pi),
        phase_pulse=rng.uniform(0.0, 2.0 * math.pi),
        bow=max(0.0, sig["bow"] + rng.uniform(-0.5, 0.5)),
        gap=gap,
        pulse=config.pulse_amplitude + rng.uniform(-0.01, 0.01),
        frames=config.frames_per_video,
        fps=config.fps,
    )


def render_toy_video(params: ToyVideoParams, noise_seed: int) -> np.ndarray:
    """Render one toy video as (F, 112, 112) float32 grayscale in [0, 1]."""
    rng = np.random.default_rng(noise_seed)
    yy, xx = np.mgrid[0:FRAME_SIZE, 0:FRAME_SIZE].astype(np.float32)
    cy = CENTER_Y
    out = np.empty((params.frames, FRAME_SIZE, FRAME_SIZE), np.float32)
    for f in range(params.frames):
        pulse = 1.0 + params.pulse * math.sin(
            2.0 * math.pi * f / params.period + params.phase_pulse
        )
        a_f, b_f = params.a * pulse, params.b * pulse
        r2 = ((xx - params.cx) / a_f) ** 2 + ((yy - cy) / b_f) ** 2
        ring = np.exp(-(((r2 - 1.0) / 0.10) ** 2))
        interior = 1.0 / (1.0 + np.exp(np.clip((r2 - 1.0) / 0.02, -60.0, 60.0)))

        bow_f = params.bow * math.sin(2.0 * math.pi * f / params.period + params.phase_bow)
        rel = (yy - (cy - b_f)) / (2.0 * b_f)
        septum_x = params.cx + bow_f * np.sin(math.pi * np.clip(rel, 0.0, 1.0))
        dx = xx - septum_x
        sept = np.exp(-((dx / 2.0) ** 2))
        inside_wall = np.abs(yy - cy) <= 0.97 * b_f
        sept = np.where(inside_wall, sept, 0.0)
        if params.gap > 0:
            in_gap = np.abs(yy - cy) < params.gap / 2.0
            sept = np.where(in_gap, 0.0, sept)

        img = 0.08 + 0.10 * interior
        img = img + params.brightness * 0.85 * np.maximum(ring, sept)
        img = img + rng.normal(0.0, params.noise, img.shape).astype(np.float32)
        out[f] = np.clip(img, 0.0, 1.0)
    return out


def generate_toy_dataset(
    config: ToyGeneratorConfig,
    n_per_class: int,
    root: Path | str,
    split_counts: Optional[tuple[int, int, int]] = None,
) -> DatasetManifest:
    """Render the two-class toy dataset under ``root`` and write its manifest.

    Deterministic in ``config.seed``: per-video parameter and noise streams are
    derived from it, so the same call reproduces identical files. Each video
    directory carries a ``params.txt`` with its generating parameters.
    """
    if n_per_class < 1:
        raise DataError("n_per_class must be >= 1")
    if split_counts is None:
        n_train = max(1, int(round(n_per_class * 0.5)))
        n_test = max(1, int(round(n_per_class * 0.3)))
        n_val = n_per_class - n_train - n_test
    else:
        n_train, n_val, n_test = split_counts
        if n_train + n_val + n_test != n_per_class:
            raise DataError("split_counts must sum to n_per_class")
    root = Path(root)
    videos_dir = root / "videos"
    rows = []
    for label in TOY_CLASSES:
        for i in range(n_per_class):
            if i < n_train:
                split = "train"
            elif i < n_train + n_val:
                split = "val"
            else:
                split = "test"
            params = draw_video_params(config, label, derive_seed(config.seed, label, i, "params"))
            video = render_toy_video(params, derive_seed(config.seed, label, i, "noise"))
            rel = f"videos/{label}_{i:04d}"
            out_dir = root / rel
            write_video_frames(video, out_dir)
            (out_dir / "params.txt").write_text(params.to_text())
            rows.append(
                ManifestRow(rel, label, split, config.fps, config.frames_per_video)
            )
    manifest = DatasetManifest(rows=rows, root=root)
    manifest.save(root / "manifest.csv")
    return manifest


# ---------------------------------------------------------------------------
# geometric oracles


def _gray(frame: torch.Tensor | np.ndarray) -> np.ndarray:
    arr = frame.detach().cpu().numpy() if isinstance(frame, torch.Tensor) else np.asarray(frame)
    if arr.ndim == 3:  # (C, H, W)
        arr = arr[0]
    return arr.astype(np.float32)


def structural_gap_score(frame) -> float:
    """Septum-wall brightness inside the central band; low means gap.

    For each row within GAP_BAND_HALF_HEIGHT of the chamber center, take the
    maximum intensity over the septum search window; return the band mean. An
    intact wall scores near the wall brightness, an erased one near the
    interior level.
    """
    arr = _gray(frame)
    cy, cx = int(CENTER_Y), FRAME_SIZE // 2
    band = arr[
        cy - GAP_BAND_HALF_HEIGHT : cy + GAP_BAND_HALF_HEIGHT + 1,
        cx - SEPTUM_SEARCH_HALF_WIDTH : cx + SEPTUM_SEARCH_HALF_WIDTH + 1,
    ]
    return float(band.max(axis=1).mean())


STRUCTURAL_THRESHOLD = 0.45


def classify_structure(frame) -> str:
    """Oracle class assignment from the structural gap score alone."""
    return CLASS_DEFECT if structural_gap_score(frame) < STRUCTURAL_THRESHOLD else CLASS_HYPER


def septum_motion_amplitude(video, row_offset: int = 18) -> float:
    """Estimate the septal bowing amplitude (pixels) from a toy video.

    Tracks the septum's horizontal position at a row above the gap band by an
    intensity centroid, and rescales the half range of the trajectory by the
    bowing shape factor at that row (mid-range chamber geometry).
    """
    frames = video if isinstance(video, np.ndarray) else video.detach().cpu().numpy()
    if frames.ndim == 4:  # (F, C, H, W)
        frames = frames[:, 0]
    cy, cx = int(CENTER_Y), FRAME_SIZE // 2
    row = cy - row_offset
    lo, hi = cx - SEPTUM_SEARCH_HALF_WIDTH, cx + SEPTUM_SEARCH_HALF_WIDTH + 1
    xs = np.arange(lo, hi, dtype=np.float32)
    positions = []
    for f in frames:
        strip = np.clip(f[row - 1 : row + 2, lo:hi].mean(axis=0) - 0.2, 0.0, None)
        if strip.sum() < 1e-6:
            continue
        positions.append(float((strip * xs).sum() / strip.sum()))
    if len(positions) < 2:
        return 0.0
    # shape factor sin(pi * (b - row_offset) / (2b)) at the mid-range b = 38
    b = 38.0
    shape = math.sin(math.pi * (b - row_offset) / (2.0 * b))
    return float((max(positions) - min(positions)) / 2.0 / shape)
