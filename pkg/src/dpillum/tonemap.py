from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Tonemap:
    """Global power-law compression ``f(x) = scale * x**(1/exponent)``."""

    scale: float
    exponent: float

    def __post_init__(self):
        if self.scale <= 0 or self.exponent <= 0:
            raise ValueError("tonemap scale and exponent must be positive")

    @classmethod
    def preset(cls, name: str) -> "Tonemap":
        try:
            return PRESETS[name]
        except KeyError:
            raise ValueError(f"unknown tonemap preset {name!r}") from None

    def forward(self, x: np.ndarray) -> np.ndarray:
        return self.scale * np.power(np.maximum(x, 0.0), 1.0 / self.exponent)

    def inverse(self, y: np.ndarray) -> np.ndarray:
        return np.power(np.maximum(y, 0.0) / self.scale, self.exponent)

    def inverse_derivative(self, y: np.ndarray) -> np.ndarray:
        """d f^-1 / dy, zero where the input is clamped."""
        y = np.asarray(y, dtype=np.float64)
        pos = y > 0
        out = np.zeros_like(y)
        out[pos] = self.exponent / self.scale * np.power(y[pos] / self.scale, self.exponent - 1.0)
        return out


PRESETS = {
    "outdoor": Tonemap(0.5, 2.4),
    "indoor": Tonemap(0.9, 6.0),
    "identity": Tonemap(1.0, 1.0),
}


def tonemap_forward(tm: Tonemap, x: np.ndarray) -> np.ndarray:
    return tm.forward(x)


def tonemap_inverse(tm: Tonemap, y: np.ndarray) -> np.ndarray:
    return tm.inverse(y)
