"""Binary PNM images and raw float maps.

Colour images are ``(H, W, 3)`` uint8 arrays (P6), grey images ``(H, W)``
uint8 arrays (P5). Float maps in [0, 1] go to disk either as lossy P5
(scaled by 255, round half up) or losslessly as ``F32W<w>H<h>`` raw files.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .exceptions import ParseError

F32_HEADER_LEN = 16


def _read_token(data: bytes, pos: int):
    n = len(data)
    while pos < n:
        c = data[pos:pos + 1]
        if c == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not data[pos:pos + 1].isspace():
        pos += 1
    if start == pos:
        raise ParseError("truncated PNM header")
    return data[start:pos], pos


def read_pnm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    magic, pos = _read_token(data, 0)
    if magic not in (b"P5", b"P6"):
        raise ParseError(f"unsupported PNM magic {magic!r}")
    fields = []
    for _ in range(3):
        tok, pos = _read_token(data, pos)
        try:
            fields.append(int(tok))
        except ValueError:
            raise ParseError(f"bad PNM header field {tok!r}") from None
    width, height, maxval = fields
    if maxval != 255:
        raise ParseError(f"only maxval 255 is supported, got {maxval}")
    pos += 1  # single whitespace byte after maxval
    channels = 3 if magic == b"P6" else 1
    size = width * height * channels
    raw = data[pos:pos + size]
    if len(raw) != size:
        raise ParseError("PNM pixel data is truncated")
    arr = np.frombuffer(raw, dtype=np.uint8)
    shape = (height, width, 3) if channels == 3 else (height, width)
    return arr.reshape(shape).copy()


def write_ppm(path, image) -> None:
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("P6 images must be (H, W, 3)")
    img = np.ascontiguousarray(img, dtype=np.uint8)
    h, w = img.shape[:2]
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + img.tobytes())


def write_pgm(path, image) -> None:
    img = np.asarray(image)
    if img.ndim != 2:
        raise ValueError("P5 images must be (H, W)")
    img = np.ascontiguousarray(img, dtype=np.uint8)
    h, w = img.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + img.tobytes())


def float_to_gray(values) -> np.ndarray:
    """Scale a [0, 1] map to 8 bits, rounding half up."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    return np.floor(v * 255.0 + 0.5).astype(np.uint8)


def write_f32(path, values) -> None:
    arr = np.asarray(values, dtype="<f4")
    if arr.ndim != 2:
        raise ValueError("float maps must be 2-D")
    h, w = arr.shape
    header = f"F32W{w}H{h}".encode("ascii")
    if len(header) > F32_HEADER_LEN:
        raise ValueError("image too large for the 16-byte header")
    header = header.ljust(F32_HEADER_LEN, b"\0")
    Path(path).write_bytes(header + np.ascontiguousarray(arr).tobytes())


def read_f32(path) -> np.ndarray:
    data = Path(path).read_bytes()
    header = data[:F32_HEADER_LEN].rstrip(b"\0").decode("ascii", errors="replace")
    if not header.startswith("F32W") or "H" not in header[4:]:
        raise ParseError(f"bad float map header {header!r}")
    try:
        w_s, h_s = header[4:].split("H", 1)
        w, h = int(w_s), int(h_s)
    except ValueError:
        raise ParseError(f"bad float map header {header!r}") from None
    body = data[F32_HEADER_LEN:]
    if len(body) != 4 * w * h:
        raise ParseError("float map payload size does not match header")
    return np.frombuffer(body, dtype="<f4").reshape(h, w).astype(np.float32)
