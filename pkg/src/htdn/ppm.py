"""Binary PPM (P6, maxval 255) reading and writing."""

from __future__ import annotations

import numpy as np

from .errors import ContractError, DataError


def write_ppm(path, pixels: np.ndarray) -> None:
    """pixels: (H, W, 3) uint8."""
    if pixels.ndim != 3 or pixels.shape[2] != 3 or pixels.dtype != np.uint8:
        raise ContractError(f"write_ppm expects (H,W,3) uint8, got {pixels.shape} {pixels.dtype}")
    h, w = pixels.shape[:2]
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(pixels.tobytes())


def _read_header_token(buf: bytes, pos: int, path) -> tuple[bytes, int]:
    # skip whitespace and '#' comments, then read one token
    n = len(buf)
    while pos < n:
        c = buf[pos:pos + 1]
        if c.isspace():
            pos += 1
        elif c == b"#":
            while pos < n and buf[pos:pos + 1] != b"\n":
                pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace():
        pos += 1
    if start == pos:
        raise DataError(f"{path}: truncated PPM header")
    return buf[start:pos], pos


def read_ppm(path) -> np.ndarray:
    """Returns (H, W, 3) uint8.  Raises DataError naming the file on any defect."""
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:2] != b"P6":
        raise DataError(f"{path}: not a P6 PPM file")
    pos = 2
    fields = []
    for _ in range(3):
        tok, pos = _read_header_token(buf, pos, path)
        try:
            fields.append(int(tok))
        except ValueError:
            raise DataError(f"{path}: non-numeric PPM header field {tok!r}") from None
    w, h, maxval = fields
    if w <= 0 or h <= 0:
        raise DataError(f"{path}: invalid PPM dimensions {w}x{h}")
    if maxval != 255:
        raise DataError(f"{path}: unsupported PPM maxval {maxval}")
    pos += 1  # single whitespace byte after maxval
    need = w * h * 3
    payload = buf[pos:pos + need]
    if len(payload) != need:
        raise DataError(f"{path}: PPM payload has {len(payload)} bytes, expected {need}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3).copy()
