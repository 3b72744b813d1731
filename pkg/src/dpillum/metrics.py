"""Reconstruction, image-quality, diversity and seam metrics."""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d

from .render import MaterialMaps


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def mse(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(a, b, peak: float = 1.0) -> float:
    """``inf`` for identical inputs."""
    err = mse(a, b)
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / err)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    w = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return w / w.sum()


def ssim(a, b, peak: float = 1.0, size: int = 11, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean SSIM over valid window positions, averaged over channels."""
    a, b = _pair(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    H, W = a.shape[:2]
    if H < size or W < size:
        raise ValueError(f"images must be at least {size}x{size} for SSIM")
    w = gaussian_window(size, sigma)
    half = size // 2

    def filt(x):
        y = correlate1d(correlate1d(x, w, axis=0, mode="constant"), w, axis=1, mode="constant")
        return y[half:H - half, half:W - half]

    c1 = (k1 * peak) ** 2
    c2 = (k2 * peak) ** 2
    vals = []
    for c in range(a.shape[2]):
        x, y = a[..., c], b[..., c]
        mx, my = filt(x), filt(y)
        sxx = filt(x * x) - mx * mx
        syy = filt(y * y) - my * my
        sxy = filt(x * y) - mx * my
        m = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
        vals.append(m.mean())
    return float(np.clip(np.mean(vals), -1.0, 1.0))


def _as_array(s) -> np.ndarray:
    if isinstance(s, MaterialMaps):
        return s.stacked()
    return np.asarray(s, dtype=np.float64)


def sample_variance(samples, where: np.ndarray | None = None) -> float:
    """Mean over texels/channels of the unbiased per-texel variance across
    samples; ``where`` optionally restricts the mean to a texel mask."""
    arrs = [_as_array(s) for s in samples]
    if len(arrs) < 2:
        raise ValueError("sample_variance needs at least two samples")
    if any(a.shape != arrs[0].shape for a in arrs):
        raise ValueError("all samples must share one shape")
    stack = np.stack(arrs)
    var = np.var(stack - stack[0], axis=0, ddof=1)  # shift: identical samples give exactly 0
    if where is not None:
        where = np.asarray(where, dtype=bool)
        var = var[where]
    return float(np.mean(var))


def seam_gap(env) -> float:
    """Wrap-column jump relative to the typical horizontal neighbor step."""
    env = np.asarray(env, dtype=np.float64)
    if env.shape[1] < 2:
        raise ValueError("seam_gap needs at least two columns")
    seam = np.abs(env[:, 0] - env[:, -1]).mean()
    interior = np.abs(np.diff(env, axis=1)).mean()
    return float(seam / (interior + 1e-9))


@dataclass
class MetricReport:
    values: dict[str, float] = field(default_factory=dict)

    def __setitem__(self, key: str, value: float) -> None:
        self.values[key] = float(value)

    def __getitem__(self, key: str) -> float:
        return self.values[key]

    def _fmt(self, v: float):
        return "identical" if v == math.inf else v

    def to_json(self, path: str | os.PathLike) -> None:
        with open(path, "w") as fh:
            json.dump({k: self._fmt(v) for k, v in self.values.items()}, fh, indent=1, sort_keys=True)
            fh.write("\n")

    def to_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["metric", "value"])
            for k in sorted(self.values):
                v = self._fmt(self.values[k])
                w.writerow([k, v if isinstance(v, str) else repr(v)])
