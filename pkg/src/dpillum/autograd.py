"""Minimal reverse-mode differentiation over dense rank-3 float64 tensors.

Only the primitives the denoiser needs exist. Every value is an ``(H, W, C)``
array; parameters use the same rank (a conv kernel is ``(k*k, Cin, Cout)``,
a dense weight ``(1, Cin, Cout)``, a bias ``(1, 1, C)``, a scalar loss
``(1, 1, 1)``).

Convolutions wrap horizontally (azimuth) and clamp vertically; a zero
horizontal padding variant exists for models that should *not* be
rotation-equivariant.
"""

from __future__ import annotations

from functools import lru_cache
from typing import Callable

import numpy as np
import scipy.sparse as sp


class TapeStateError(RuntimeError):
    """Backward requested on a tape that has not recorded the loss."""


class Tensor3:
    __slots__ = ("value", "requires_grad", "__weakref__")

    def __init__(self, value, requires_grad: bool = False):
        v = np.array(value, dtype=np.float64)  # private copy; frozen below
        if v.ndim != 3:
            raise ValueError(f"Tensor3 needs rank 3, got shape {v.shape}")
        if not np.isfinite(v).all():
            raise ValueError("Tensor3 values must be finite")
        v.flags.writeable = False
        self.value = v
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Tensor3(shape={self.shape}, requires_grad={self.requires_grad})"


def _wrap(value: np.ndarray) -> Tensor3:
    # outputs are produced by primitives from finite inputs; skip the scan
    t = Tensor3.__new__(Tensor3)
    value.flags.writeable = False
    t.value = value
    t.requires_grad = False
    return t


@lru_cache(maxsize=32)
def _conv_index(H: int, W: int, k: int, horizontal: str):
    """Gather indices for im2col plus the sparse adjoint (scatter) matrix.

    Index ``H*W`` refers to an appended zero pixel (zero horizontal padding).
    """
    r = k // 2
    rows = np.arange(H)[:, None]
    cols = np.arange(W)[None, :]
    idx = np.empty((H, W, k * k), dtype=np.int64)
    o = 0
    for dy in range(-r, r + 1):
        rr = np.clip(rows + dy, 0, H - 1)
        for dx in range(-r, r + 1):
            cc = cols + dx
            if horizontal == "circular":
                flat = rr * W + (cc % W)
            elif horizontal == "zero":
                inside = (cc >= 0) & (cc < W)
                flat = np.where(inside, rr * W + np.clip(cc, 0, W - 1), H * W)
            else:
                raise ValueError(f"unknown horizontal padding {horizontal!r}")
            idx[:, :, o] = np.broadcast_to(flat, (H, W))
            o += 1
    idx = idx.reshape(H * W * k * k)
    n = idx.size
    scatter = sp.csr_matrix(
        (np.ones(n), (idx, np.arange(n))), shape=(H * W + 1, n)
    )
    idx.flags.writeable = False
    return idx, scatter


class Tape:
    """Records primitive applications; ``backward`` replays them in reverse."""

    def __init__(self):
        self._records: list[tuple[Tensor3, tuple[Tensor3, ...], Callable]] = []

    def __len__(self) -> int:
        return len(self._records)

    def _record(self, out: np.ndarray, inputs: tuple[Tensor3, ...], backward: Callable) -> Tensor3:
        t = _wrap(out)
        t.requires_grad = any(i.requires_grad for i in inputs)
        self._records.append((t, inputs, backward))
        return t

    # -- primitives -------------------------------------------------------

    def conv2d_circular(
        self, x: Tensor3, kernel: Tensor3, bias: Tensor3, horizontal: str = "circular"
    ) -> Tensor3:
        H, W, cin = x.shape
        kk, kcin, cout = kernel.shape
        k = int(round(kk ** 0.5))
        if k * k != kk or k % 2 == 0:
            raise ValueError(f"kernel must be odd-sized square, got {kk} taps")
        if kcin != cin:
            raise ValueError(f"kernel expects {kcin} input channels, input has {cin}")
        if bias.shape != (1, 1, cout):
            raise ValueError(f"bias shape {bias.shape} != (1, 1, {cout})")
        idx, scatter = _conv_index(H, W, k, horizontal)
        xf = np.concatenate([x.value.reshape(H * W, cin), np.zeros((1, cin))])
        cols = xf[idx].reshape(H * W, kk * cin)
        kmat = kernel.value.reshape(kk * cin, cout)
        out = cols @ kmat + bias.value.reshape(1, cout)

        def backward(g: np.ndarray):
            g2 = g.reshape(H * W, cout)
            gk = (cols.T @ g2).reshape(kk, cin, cout)
            gb = g2.sum(axis=0).reshape(1, 1, cout)
            gcols = (g2 @ kmat.T).reshape(H * W * kk, cin)
            gx = (scatter @ gcols)[: H * W].reshape(H, W, cin)
            return gx, gk, gb

        return self._record(out.reshape(H, W, cout), (x, kernel, bias), backward)

    def dense(self, x: Tensor3, weights: Tensor3, bias: Tensor3) -> Tensor3:
        H, W, n = x.shape
        _, wn, m = weights.shape
        if weights.shape[0] != 1 or wn != n:
            raise ValueError(f"weights {weights.shape} incompatible with input {x.shape}")
        if bias.shape != (1, 1, m):
            raise ValueError(f"bias shape {bias.shape} != (1, 1, {m})")
        xm = x.value.reshape(H * W, n)
        wm = weights.value.reshape(n, m)
        out = xm @ wm + bias.value.reshape(1, m)

        def backward(g: np.ndarray):
            g2 = g.reshape(H * W, m)
            return (
                (g2 @ wm.T).reshape(H, W, n),
                (xm.T @ g2).reshape(1, n, m),
                g2.sum(axis=0).reshape(1, 1, m),
            )

        return self._record(out.reshape(H, W, m), (x, weights, bias), backward)

    def silu(self, x: Tensor3) -> Tensor3:
        v = x.value
        sig = 1.0 / (1.0 + np.exp(-v))
        out = v * sig

        def backward(g: np.ndarray):
            return (g * sig * (1.0 + v * (1.0 - sig)),)

        return self._record(out, (x,), backward)

    def add(self, a: Tensor3, b: Tensor3) -> Tensor3:
        if a.shape != b.shape:
            raise ValueError(f"add: shape {a.shape} != {b.shape}")
        return self._record(a.value + b.value, (a, b), lambda g: (g, g))

    def scale(self, a: Tensor3, c: float) -> Tensor3:
        c = float(c)
        return self._record(a.value * c, (a,), lambda g: (g * c,))

    def concat_channels(self, a: Tensor3, b: Tensor3) -> Tensor3:
        if a.shape[:2] != b.shape[:2]:
            raise ValueError(f"concat: spatial shape {a.shape[:2]} != {b.shape[:2]}")
        ca = a.shape[2]
        out = np.concatenate([a.value, b.value], axis=2)
        return self._record(out, (a, b), lambda g: (g[:, :, :ca], g[:, :, ca:]))

    def mse(self, a: Tensor3, b: Tensor3) -> Tensor3:
        if a.shape != b.shape:
            raise ValueError(f"mse: shape {a.shape} != {b.shape}")
        diff = a.value - b.value
        n = diff.size
        out = np.array(np.sum(diff * diff) / n).reshape(1, 1, 1)

        def backward(g: np.ndarray):
            ga = (2.0 * float(g.reshape(())) / n) * diff
            return ga, -ga

        return self._record(out, (a, b), backward)

    # -- reverse pass -----------------------------------------------------

    def backward(self, loss: Tensor3, seed_gradient=1.0) -> dict[Tensor3, np.ndarray]:
        """Gradients of ``seed_gradient * loss`` for every leaf with
        ``requires_grad``; accumulation follows reverse recording order.

        ``seed_gradient`` may also be an array shaped like ``loss``, which
        yields a vector-Jacobian product.
        """
        if not self._records:
            raise TapeStateError("backward called before any forward pass was recorded")
        if not any(rec[0] is loss for rec in self._records):
            raise TapeStateError("loss tensor was not produced on this tape")
        if np.ndim(seed_gradient) == 0:
            seed = np.full(loss.shape, float(seed_gradient))
        else:
            seed = np.array(seed_gradient, dtype=np.float64)
            if seed.shape != loss.shape:
                raise ValueError(f"seed shape {seed.shape} != output shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): seed}
        leaves: dict[int, Tensor3] = {}
        produced = {id(rec[0]) for rec in self._records}
        for out, inputs, bw in reversed(self._records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            in_grads = bw(g)
            for inp, ig in zip(inputs, in_grads):
                if not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig
                if key not in produced:
                    leaves[key] = inp
        return {leaves[k]: grads[k] for k in leaves if k in grads}
