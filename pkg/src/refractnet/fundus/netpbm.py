"""Binary PPM (P6) and PGM (P5) codecs for 8-bit rasters."""

from __future__ import annotations

from pathlib import Path

import numpy as np


class DecodeError(ValueError):
    """The file is not a readable 8-bit binary PPM/PGM."""


def _encode(magic: bytes, pixels: np.ndarray, comment: str | None) -> bytes:
    h, w = pixels.shape[:2]
    head = magic + b"\n"
    if comment:
        for line in comment.splitlines():
            head += b"# " + line.encode("ascii", "replace") + b"\n"
    head += f"{w} {h}\n255\n".encode("ascii")
    return head + np.ascontiguousarray(pixels, dtype=np.uint8).tobytes()


def encode_ppm(rgb: np.ndarray, comment: str | None = None) -> bytes:
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
        raise ValueError(f"PPM needs a uint8 [H,W,3] array, got {rgb.dtype} {rgb.shape}")
    return _encode(b"P6", rgb, comment)


def encode_pgm(gray: np.ndarray, comment: str | None = None) -> bytes:
    if gray.ndim != 2 or gray.dtype != np.uint8:
        raise ValueError(f"PGM needs a uint8 [H,W] array, got {gray.dtype} {gray.shape}")
    return _encode(b"P5", gray, comment)


def _tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    out, pos = [], 0
    while len(out) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise DecodeError("truncated header")
        out.append(data[start:pos])
    # exactly one whitespace byte separates the header from the raster
    return out, pos + 1


def decode(data: bytes) -> np.ndarray:
    """Decode P6 to uint8 [H,W,3] or P5 to uint8 [H,W]."""
    try:
        (magic, w, h, maxval), pos = _tokens(data, 4)
        width, height, maxv = int(w), int(h), int(maxval)
    except (DecodeError, ValueError) as exc:
        raise DecodeError(f"bad PPM/PGM header: {exc}") from None
    if magic not in (b"P5", b"P6"):
        raise DecodeError(f"unsupported magic {magic!r}")
    if maxv != 255 or width <= 0 or height <= 0:
        raise DecodeError(f"only 8-bit rasters are supported (maxval={maxv}, size={width}x{height})")
    channels = 3 if magic == b"P6" else 1
    n = width * height * channels
    raster = data[pos:pos + n]
    if len(raster) != n:
        raise DecodeError(f"raster truncated: expected {n} bytes, got {len(raster)}")
    arr = np.frombuffer(raster, dtype=np.uint8).reshape(height, width, channels)
    return arr[:, :, 0].copy() if channels == 1 else arr.copy()


def read_image(path: str | Path) -> np.ndarray:
    return decode(Path(path).read_bytes())


def write_ppm(path: str | Path, rgb: np.ndarray, comment: str | None = None) -> None:
    Path(path).write_bytes(encode_ppm(rgb, comment))


def write_pgm(path: str | Path, gray: np.ndarray, comment: str | None = None) -> None:
    Path(path).write_bytes(encode_pgm(gray, comment))
