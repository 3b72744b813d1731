"""Noise predictors behind one interface: a small rotation-equivariant CNN
trained as a DDPM prior, and an analytic Gaussian model used as an oracle."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .autograd import Tape, Tensor3
from .dataio import rng_stream
from .diffusion import NoiseSchedule, forward_marginal, make_schedule
from .optim import Adam


class ScoreModel(Protocol):
    shape: tuple[int, int, int]

    def eps_predict(self, x_t: np.ndarray, t: int) -> np.ndarray: ...


def _check_input(model: ScoreModel, x_t: np.ndarray) -> None:
    if tuple(np.shape(x_t)) != tuple(model.shape):
        raise ValueError(f"model expects shape {model.shape}, got {np.shape(x_t)}")


def eps_predict(model: ScoreModel, x_t: np.ndarray, t: int) -> np.ndarray:
    return model.eps_predict(x_t, t)


def rotated_eps(model: ScoreModel, x_t: np.ndarray, t: int, shift: int) -> np.ndarray:
    """Noise prediction evaluated on a column-rotated copy of ``x_t`` and
    rotated back; ``shift`` is taken modulo the width."""
    width = np.shape(x_t)[1]
    shift = int(shift) % width
    if shift == 0:
        return model.eps_predict(x_t, t)
    rolled = np.roll(x_t, shift, axis=1)
    return np.roll(model.eps_predict(rolled, t), -shift, axis=1)


def rotated_eps_with_vjp(model, x_t: np.ndarray, t: int, shift: int):
    """Like :func:`rotated_eps`, also returning the transpose-Jacobian
    product ``c -> J^T c`` of the rotated prediction w.r.t. ``x_t``."""
    width = np.shape(x_t)[1]
    shift = int(shift) % width
    if shift == 0:
        return model.eps_with_vjp(x_t, t)
    eps, vjp = model.eps_with_vjp(np.roll(x_t, shift, axis=1), t)

    def rolled_vjp(c):
        return np.roll(vjp(np.roll(c, shift, axis=1)), -shift, axis=1)

    return np.roll(eps, -shift, axis=1), rolled_vjp


class GaussianAnalyticModel:
    """Exact noise predictor for the prior ``x0 ~ N(mu, v I)``."""

    def __init__(self, mu: np.ndarray, v: float, schedule: NoiseSchedule):
        if v <= 0:
            raise ValueError("prior variance must be positive")
        self.mu = np.asarray(mu, dtype=np.float64)
        self.v = float(v)
        self.schedule = schedule
        self.shape = self.mu.shape

    def score(self, x_t: np.ndarray, t: int) -> np.ndarray:
        ab = self.schedule.alpha_bar(t)
        return -(x_t - np.sqrt(ab) * self.mu) / (ab * self.v + 1.0 - ab)

    def eps_predict(self, x_t: np.ndarray, t: int) -> np.ndarray:
        _check_input(self, x_t)
        self.schedule.check_t(t)
        ab = self.schedule.alpha_bar(t)
        return -np.sqrt(1.0 - ab) * self.score(x_t, t)

    def eps_with_vjp(self, x_t: np.ndarray, t: int):
        ab = self.schedule.alpha_bar(t)
        d = np.sqrt(1.0 - ab) / (ab * self.v + 1.0 - ab)  # Jacobian is d * I
        return self.eps_predict(x_t, t), lambda c: d * np.asarray(c)


def time_embedding(t: int, T: int, pairs: int = 16) -> np.ndarray:
    tau = t / T
    freqs = np.power(1000.0, np.arange(pairs) / (pairs - 1))
    ang = tau * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)]).reshape(1, 1, 2 * pairs)


class CnnDenoiser:
    """Four conv+SiLU blocks (residual after the first) with per-block
    channel biases driven by a sinusoidal time embedding, and a zero-init
    output conv.

    With ``horizontal="circular"`` every layer commutes with column
    rotation, so the network is exactly rotation-equivariant.

    ``head="eps"`` returns the network output as the noise prediction.
    ``head="v"`` reads it as the velocity ``v = sqrt(ab)*eps - sqrt(1-ab)*x0``
    and returns ``sqrt(1-ab)*x_t + sqrt(ab)*v``; the implied clean estimate
    is then not amplified by ``1/sqrt(ab)`` at high noise. This head needs
    the noise schedule (``beta_start``/``beta_end``).
    """

    def __init__(
        self,
        shape: tuple[int, int, int],
        T: int,
        channels: int = 32,
        blocks: int = 4,
        ksize: int = 3,
        horizontal: str = "circular",
        seed: int = 0,
        head: str = "eps",
        beta_start: float = 1e-4,
        beta_end: float = 0.02,
    ):
        if head not in ("eps", "v"):
            raise ValueError(f"unknown output head {head!r}")
        if horizontal not in ("circular", "zero"):
            raise ValueError(f"unknown horizontal padding {horizontal!r}")
        self.head = head
        self.beta_start = float(beta_start)
        self.beta_end = float(beta_end)
        self._alpha_bars = make_schedule(T, beta_start, beta_end).alpha_bars if head == "v" else None
        self.shape = tuple(int(s) for s in shape)
        self.T = int(T)
        self.channels = channels
        self.blocks = blocks
        self.ksize = ksize
        self.horizontal = horizontal
        rng = rng_stream(seed, "prior/init")
        kk = ksize * ksize
        emb = 32
        cin = self.shape[2]
        params: dict[str, Tensor3] = {}
        for b in range(blocks):
            fan_in = kk * (cin if b == 0 else channels)
            w = rng.standard_normal((kk, cin if b == 0 else channels, channels))
            w *= math.sqrt(2.0 / fan_in) * (1.0 if b == 0 else 0.5)
            params[f"block{b}.conv"] = Tensor3(w, True)
            params[f"block{b}.time_w"] = Tensor3(
                rng.standard_normal((1, emb, channels)) * math.sqrt(1.0 / emb), True
            )
            params[f"block{b}.time_b"] = Tensor3(np.zeros((1, 1, channels)), True)
        params["out.conv"] = Tensor3(np.zeros((kk, channels, cin)), True)
        params["out.bias"] = Tensor3(np.zeros((1, 1, cin)), True)
        self.params = params

    @property
    def names(self) -> list[str]:
        return list(self.params)

    def forward(self, tape: Tape, x: Tensor3, t: int) -> Tensor3:
        emb = Tensor3(time_embedding(t, self.T))
        p = self.params
        h = x
        for b in range(self.blocks):
            bias = tape.dense(emb, p[f"block{b}.time_w"], p[f"block{b}.time_b"])
            y = tape.silu(tape.conv2d_circular(h, p[f"block{b}.conv"], bias, self.horizontal))
            h = y if b == 0 else tape.add(h, y)
        out = tape.conv2d_circular(h, p["out.conv"], p["out.bias"], self.horizontal)
        if self.head == "v":
            ab = float(self._alpha_bars[t - 1])
            out = tape.add(tape.scale(x, math.sqrt(1.0 - ab)), tape.scale(out, math.sqrt(ab)))
        return out

    def eps_predict(self, x_t: np.ndarray, t: int) -> np.ndarray:
        _check_input(self, x_t)
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} outside [1, {self.T}]")
        tape = Tape()
        return np.array(self.forward(tape, Tensor3(x_t), t).value)

    def eps_with_vjp(self, x_t: np.ndarray, t: int):
        _check_input(self, x_t)
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} outside [1, {self.T}]")
        tape = Tape()
        x = Tensor3(x_t, True)
        out = self.forward(tape, x, t)

        def vjp(c):
            return tape.backward(out, c)[x]

        return np.array(out.value), vjp

    def get_arrays(self) -> dict[str, np.ndarray]:
        return {k: np.array(v.value) for k, v in self.params.items()}

    def set_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, v in arrays.items():
            if k not in self.params:
                raise KeyError(k)
            if v.shape != self.params[k].shape:
                raise ValueError(f"{k}: shape {v.shape} != {self.params[k].shape}")
            self.params[k] = Tensor3(v, True)


@dataclass
class TrainConfig:
    epochs: int = 40
    batch_size: int = 8
    learning_rate: float = 2e-3
    seed: int = 0
    augment: bool = True
    flip_probability: float = 0.5
    max_steps: int | None = None

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")


@dataclass
class TrainTrace:
    epoch_loss: list[float] = field(default_factory=list)
    steps: list[tuple[int, int, float]] = field(default_factory=list)


class NonFiniteLoss(FloatingPointError):
    def __init__(self, step: int):
        super().__init__(f"non-finite training loss at step {step}")
        self.step = step


def train_prior(
    model: CnnDenoiser,
    dataset: Sequence[np.ndarray],
    s: NoiseSchedule,
    cfg: TrainConfig,
    *,
    optimizer: Adam | None = None,
    start_step: int = 0,
    trace: TrainTrace | None = None,
) -> tuple[CnnDenoiser, TrainTrace]:
    """Minimize the noise-prediction loss with random column rotations and
    flips of the training maps. ``dataset`` holds maps already in the
    compressed (tonemapped) domain."""
    if len(dataset) == 0:
        raise ValueError("empty training dataset")
    data = [np.asarray(d, dtype=np.float64) for d in dataset]
    for d in data:
        if d.shape != model.shape:
            raise ValueError(f"dataset map shape {d.shape} != model shape {model.shape}")
    if model.T != s.T:
        raise ValueError("model and schedule disagree on T")
    if model.head == "v" and not np.allclose(model._alpha_bars, s.alpha_bars, rtol=1e-12, atol=0.0):
        raise ValueError("v-head model was built for a different noise schedule")
    rng = rng_stream(cfg.seed, f"train/noise/{start_step}")
    aug_rng = rng_stream(cfg.seed, f"train/augment/{start_step}")
    opt = optimizer or Adam(cfg.learning_rate)
    trace = trace or TrainTrace()
    names = model.names
    H, W, C = model.shape
    n = len(data)
    per_epoch = max(1, math.ceil(n / cfg.batch_size))
    step = start_step
    first_epoch = len(trace.epoch_loss)
    for epoch in range(first_epoch, first_epoch + cfg.epochs):
        order = rng.permutation(n)
        losses = []
        for b in range(per_epoch):
            if cfg.max_steps is not None and step - start_step >= cfg.max_steps:
                break
            batch = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            grads = {k: np.zeros(model.params[k].shape) for k in names}
            batch_loss = 0.0
            for i in batch:
                x0 = data[i]
                shift = int(aug_rng.integers(W))
                flip = aug_rng.random() < cfg.flip_probability
                if cfg.augment:
                    x0 = np.roll(x0, shift, axis=1)
                    if flip:
                        x0 = x0[:, ::-1]
                t = int(rng.integers(1, s.T + 1))
                eps = rng.standard_normal(model.shape)
                x_t = forward_marginal(s, x0, t, eps)
                tape = Tape()
                pred = model.forward(tape, Tensor3(x_t), t)
                loss = tape.mse(pred, Tensor3(eps))
                g = tape.backward(loss)
                for k in names:
                    grads[k] += g[model.params[k]]
                batch_loss += float(loss.value.reshape(()))
            m = len(batch)
            batch_loss /= m
            if not np.isfinite(batch_loss):
                raise NonFiniteLoss(step)
            arrays = {k: np.array(model.params[k].value) for k in names}
            opt.step(arrays, {k: g / m for k, g in grads.items()})
            if not all(np.isfinite(a).all() for a in arrays.values()):
                raise NonFiniteLoss(step)
            model.set_arrays(arrays)
            trace.steps.append((epoch, step, batch_loss))
            losses.append(batch_loss)
            step += 1
        if not losses:
            break
        trace.epoch_loss.append(float(np.mean(losses)))
    return model, trace


# -- checkpoint I/O ------------------------------------------------------------

MAGIC = b"DIFP"
VERSION = 1
_FLAG_ZERO_PAD = 1
_FLAG_V_HEAD = 2


def save_checkpoint(path, model: CnnDenoiser) -> None:
    """Little-endian layout: magic, version, H, W, C, flags, T, [beta_start,
    beta_end as float64 when the v head flag is set], layer count, then per
    layer: name length + utf-8 name, ndim, dims, float64 payload."""
    H, W, C = model.shape
    flags = _FLAG_ZERO_PAD if model.horizontal == "zero" else 0
    if model.head == "v":
        flags |= _FLAG_V_HEAD
    out = [MAGIC, struct.pack("<6I", VERSION, H, W, C, flags, model.T)]
    if model.head == "v":
        out.append(struct.pack("<2d", model.beta_start, model.beta_end))
    out.append(struct.pack("<I", len(model.params)))
    for name, tensor in model.params.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(tensor.value, dtype="<f8")
        out.append(struct.pack("<I", len(raw)) + raw)
        out.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        out.append(arr.tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(out))


class CheckpointError(ValueError):
    pass


BUNDLED_PRIOR = Path(__file__).resolve().parent / "data" / "prior.difp"


def load_checkpoint(path) -> CnnDenoiser:
    """``path`` may be the string ``"bundled"`` for the packaged 16x32 sky prior."""
    if str(path) == "bundled":
        path = BUNDLED_PRIOR
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:4] != MAGIC:
        raise CheckpointError("not a DIFP checkpoint")
    pos = 4

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(buf):
            raise CheckpointError(f"truncated checkpoint at byte {pos}")
        vals = struct.unpack_from(fmt, buf, pos)
        pos += size
        return vals

    version, H, W, C, flags, T = take("<6I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    head_kw = {}
    if flags & _FLAG_V_HEAD:
        b0, b1 = take("<2d")
        head_kw = {"head": "v", "beta_start": b0, "beta_end": b1}
    (count,) = take("<I")
    arrays = {}
    for _ in range(count):
        (nlen,) = take("<I")
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = take("<I")
        dims = take(f"<{ndim}I")
        n = int(np.prod(dims))
        if pos + 8 * n > len(buf):
            raise CheckpointError(f"truncated payload for {name} at byte {pos}")
        arrays[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).reshape(dims).astype(np.float64)
        pos += 8 * n
    channels = arrays["block0.conv"].shape[2]
    ksize = int(round(arrays["block0.conv"].shape[0] ** 0.5))
    blocks = sum(1 for k in arrays if k.endswith(".conv") and k.startswith("block"))
    model = CnnDenoiser(
        (H, W, C), T, channels=channels, blocks=blocks, ksize=ksize,
        horizontal="zero" if flags & _FLAG_ZERO_PAD else "circular", **head_kw,
    )
    model.set_arrays(arrays)
    return model
