"""Binary PGM (P5) reading/writing and byte <-> unit-range conversions."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

_WHITESPACE = b" \t\n\r\x0b\x0c"


class PgmFormatError(ValueError):
    """Raised for files that are not plain binary 8-bit PGM."""


@dataclass
class GrayImage:
    width: int
    height: int
    pixels: np.ndarray  # uint8, shape (height, width)

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("image dimensions must be positive")
        self.pixels = np.asarray(self.pixels, dtype=np.uint8)
        if self.pixels.shape != (self.height, self.width):
            raise ValueError(
                f"pixels shape {self.pixels.shape} does not match "
                f"{self.height}x{self.width}")


def _next_token(data: bytes, pos: int) -> tuple[bytes, int]:
    n = len(data)
    while pos < n:
        c = data[pos:pos + 1]
        if c in _WHITESPACE:
            pos += 1
        elif c == b"#":
            while pos < n and data[pos:pos + 1] != b"\n":
                pos += 1
        else:
            break
    start = pos
    while pos < n and data[pos:pos + 1] not in _WHITESPACE:
        pos += 1
    if start == pos:
        raise PgmFormatError("unexpected end of header")
    return data[start:pos], pos


def _int_token(data: bytes, pos: int, what: str) -> tuple[int, int]:
    token, pos = _next_token(data, pos)
    try:
        return int(token), pos
    except ValueError:
        raise PgmFormatError(f"invalid {what} {token!r}") from None


def read_pgm(path) -> GrayImage:
    """Parse a binary PGM with maxval 255; header comments are allowed."""
    data = Path(path).read_bytes()
    magic, pos = _next_token(data, 0)
    if magic != b"P5":
        raise PgmFormatError(
            f"unsupported format: magic {magic!r}, only binary P5 is supported")
    width, pos = _int_token(data, pos, "width")
    height, pos = _int_token(data, pos, "height")
    maxval, pos = _int_token(data, pos, "maxval")
    if width < 1 or height < 1:
        raise PgmFormatError(f"invalid dimensions {width}x{height}")
    if maxval != 255:
        raise PgmFormatError(f"unsupported maxval {maxval}, only 255 is supported")
    # exactly one whitespace byte separates the header from the raster
    if pos >= len(data) or data[pos:pos + 1] not in _WHITESPACE:
        raise PgmFormatError("missing whitespace before pixel data")
    pos += 1
    need = width * height
    if len(data) - pos < need:
        raise PgmFormatError(
            f"truncated pixel data: need {need} bytes, found {len(data) - pos}")
    pixels = np.frombuffer(data, dtype=np.uint8, count=need, offset=pos)
    return GrayImage(width, height, pixels.reshape(height, width).copy())


def write_pgm(img: GrayImage, path) -> None:
    header = f"P5\n{img.width} {img.height}\n255\n".encode("ascii")
    Path(path).write_bytes(header + img.pixels.tobytes())


def to_unit(img: GrayImage, dtype=np.float32) -> np.ndarray:
    """Image bytes as a (1, 1, h, w) tensor scaled into [0, 1]."""
    x = img.pixels.astype(dtype) / np.asarray(255.0, dtype=dtype)
    return x[None, None]


def _round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def from_unit(t: np.ndarray, clip: bool = True) -> GrayImage:
    """Back to bytes: scale by 255, clip, round half away from zero."""
    t = np.asarray(t)
    if t.ndim != 4 or t.shape[0] != 1 or t.shape[1] != 1:
        raise ValueError(f"expected shape (1, 1, h, w), got {t.shape}")
    x = t[0, 0].astype(np.float64) * 255.0
    if clip:
        x = np.clip(x, 0.0, 255.0)
    rounded = _round_half_away(x)
    if not clip and (rounded.min() < 0 or rounded.max() > 255):
        raise ValueError("values outside [0, 255] with clipping disabled")
    h, w = x.shape
    return GrayImage(w, h, rounded.astype(np.uint8))


def rgb_to_luma(r, g, b):
    """BT.601 luma of 8-bit channels, rounded half away from zero."""
    y = 0.299 * np.asarray(r, dtype=np.float64) \
        + 0.587 * np.asarray(g, dtype=np.float64) \
        + 0.114 * np.asarray(b, dtype=np.float64)
    out = _round_half_away(y).astype(np.uint8)
    return out if out.ndim else int(out)
