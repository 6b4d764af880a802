"""Small shared helpers: stable seed derivation, hashing, PSNR, atomic writes."""

from __future__ import annotations

import hashlib
import math
import os
from pathlib import Path

import torch


def derive_seed(base: int, *parts) -> int:
    """Stable 63-bit seed derived from a base seed and context labels.

    Used wherever one configured seed must fan out into independent streams
    (per block, per video, per attempt) reproducibly across runs and platforms.
    """
    h = hashlib.sha256()
    h.update(str(int(base)).encode())
    for p in parts:
        h.update(b"/")
        h.update(str(p).encode())
    return int.from_bytes(h.digest()[:8], "big") % (2**63)


def state_dict_hash(state_dict: dict) -> str:
    """Content hash over parameter names and values, order-independent."""
    h = hashlib.sha256()
    for name in sorted(state_dict):
        h.update(name.encode())
        t = state_dict[name]
        if isinstance(t, torch.Tensor):
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
        else:
            h.update(repr(t).encode())
    return h.hexdigest()[:16]


def file_hash(path: Path | str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()[:16]


def psnr(a: torch.Tensor, b: torch.Tensor, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; infinite for identical inputs."""
    mse = torch.mean((a.float() - b.float()) ** 2).item()
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak**2 / mse)


def atomic_save(obj: dict, path: Path | str) -> None:
    """torch.save through a temp file + rename so failures never leave partials."""
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(obj, tmp)
    os.replace(tmp, path)
