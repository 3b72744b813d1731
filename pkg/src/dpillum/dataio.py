"""PFM image I/O and seeded random streams."""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass

import numpy as np


class PfmParseError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class PfmEndiannessError(PfmParseError):
    pass


@dataclass
class PfmImage:
    """A float32 image stored top-to-bottom as ``(height, width, channels)``."""

    data: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.data)
        if d.ndim == 2:
            d = d[:, :, None]
        if d.ndim != 3 or d.shape[2] not in (1, 3):
            raise ValueError(f"PFM images need 1 or 3 channels, got shape {d.shape}")
        self.data = np.ascontiguousarray(d, dtype=np.float32)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


def pfm_header(width: int, height: int, channels: int) -> bytes:
    tag = b"PF" if channels == 3 else b"Pf"
    return tag + b"\n" + f"{width} {height}".encode("ascii") + b"\n-1.0\n"


def save_pfm(path: str | os.PathLike, image) -> None:
    img = image if isinstance(image, PfmImage) else PfmImage(np.asarray(image))
    body = np.ascontiguousarray(img.data[::-1], dtype="<f4")
    with open(path, "wb") as f:
        f.write(pfm_header(img.width, img.height, img.channels))
        f.write(body.tobytes())


def _read_token_line(buf: bytes, pos: int) -> tuple[str, int]:
    end = buf.find(b"\n", pos)
    if end < 0:
        raise PfmParseError("unterminated header line", pos)
    try:
        return buf[pos:end].decode("ascii").strip(), end + 1
    except UnicodeDecodeError:
        raise PfmParseError("non-ASCII header", pos) from None


def parse_pfm(buf: bytes) -> PfmImage:
    tag, pos = _read_token_line(buf, 0)
    if tag == "PF":
        channels = 3
    elif tag == "Pf":
        channels = 1
    else:
        raise PfmParseError(f"bad magic {tag!r}", 0)
    dims_at = pos
    dims, pos = _read_token_line(buf, pos)
    parts = dims.split()
    try:
        width, height = (int(p) for p in parts)
    except ValueError:
        raise PfmParseError(f"bad dimensions line {dims!r}", dims_at) from None
    if width <= 0 or height <= 0:
        raise PfmParseError(f"non-positive dimensions {width}x{height}", dims_at)
    scale_at = pos
    scale_txt, pos = _read_token_line(buf, pos)
    try:
        scale = float(scale_txt)
    except ValueError:
        raise PfmParseError(f"bad scale {scale_txt!r}", scale_at) from None
    if scale > 0:
        raise PfmEndiannessError("big-endian PFM (positive scale) is not supported", scale_at)
    if scale == 0:
        raise PfmParseError("zero scale", scale_at)
    need = width * height * channels * 4
    if len(buf) - pos < need:
        raise PfmParseError(
            f"truncated payload: need {need} bytes, have {len(buf) - pos}", len(buf)
        )
    data = np.frombuffer(buf, dtype="<f4", count=width * height * channels, offset=pos)
    data = data.reshape(height, width, channels)[::-1].astype(np.float32)
    return PfmImage(data)


def load_pfm(path: str | os.PathLike) -> PfmImage:
    with open(path, "rb") as f:
        return parse_pfm(f.read())


def read_image(path: str | os.PathLike) -> np.ndarray:
    """Load a PFM as float64 ``(H, W, C)``."""
    return load_pfm(path).data.astype(np.float64)


def tag_key(tag: str) -> int:
    return int.from_bytes(hashlib.blake2b(tag.encode("utf-8"), digest_size=8).digest(), "little")


def rng_stream(seed: int, tag: str) -> np.random.Generator:
    """Independent generator for ``(seed, tag)``; equal keys give equal streams."""
    if seed < 0:
        raise ValueError("seeds must be non-negative")
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, tag_key(tag)])
    return np.random.Generator(np.random.PCG64(ss))
