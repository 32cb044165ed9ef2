"""Binary PPM (P6) / PGM (P5) reading and writing, maxval 255."""

from __future__ import annotations

import os

import numpy as np


class NetpbmError(ValueError):
    pass


def write_pgm(path, image: np.ndarray) -> None:
    """Write a 2-D uint8 array as P5."""
    image = np.asarray(image)
    if image.ndim != 2 or image.dtype != np.uint8:
        raise ValueError("write_pgm expects a 2-D uint8 array")
    h, w = image.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(image).tobytes())


def write_ppm(path, image: np.ndarray) -> None:
    """Write an H x W x 3 uint8 array as P6."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise ValueError("write_ppm expects an H x W x 3 uint8 array")
    h, w, _ = image.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(image).tobytes())


def _header(buf: bytes, path) -> tuple[bytes, int, int, int, int]:
    tokens: list[bytes] = []
    pos = 0
    n = len(buf)
    while len(tokens) < 4:
        while pos < n and buf[pos:pos + 1].isspace():
            pos += 1
        if pos >= n:
            raise NetpbmError(f"{path}: truncated header")
        if buf[pos:pos + 1] == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
            pos += 1
        tokens.append(buf[start:pos])
    if pos >= n or not buf[pos:pos + 1].isspace():
        raise NetpbmError(f"{path}: missing whitespace after header")
    pos += 1
    magic = tokens[0]
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise NetpbmError(f"{path}: malformed header {tokens!r}") from exc
    if w < 1 or h < 1:
        raise NetpbmError(f"{path}: bad dimensions {w}x{h}")
    if maxval != 255:
        raise NetpbmError(f"{path}: only maxval 255 is supported, got {maxval}")
    return magic, w, h, maxval, pos


def read_netpbm(path) -> np.ndarray:
    """Read P5 (-> H x W) or P6 (-> H x W x 3) as uint8."""
    with open(path, "rb") as f:
        buf = f.read()
    magic, w, h, _, pos = _header(buf, path)
    if magic == b"P5":
        shape, count = (h, w), h * w
    elif magic == b"P6":
        shape, count = (h, w, 3), h * w * 3
    else:
        raise NetpbmError(f"{path}: unsupported magic {magic!r}")
    payload = buf[pos:pos + count]
    if len(payload) != count:
        raise NetpbmError(f"{path}: truncated payload ({len(payload)} of {count} bytes)")
    return np.frombuffer(payload, dtype=np.uint8).reshape(shape).copy()


def to_uint8(x: np.ndarray) -> np.ndarray:
    """Quantise floats in [0, 1] to 0..255 by rounding."""
    return np.clip(np.rint(np.asarray(x, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def ensure_dir(path) -> None:
    os.makedirs(path, exist_ok=True)
