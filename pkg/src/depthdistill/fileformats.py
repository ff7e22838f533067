"""Binary image I/O: 8-bit PPM (P6) for color, float32 PFM (Pf) for depth maps.

Both readers validate the full byte stream and report the offset of the
first violation; writers always produce the canonical header layout that
the readers accept, so write->read is an exact round trip.
"""

from __future__ import annotations

import struct

import numpy as np


class FormatError(ValueError):
    """Malformed or truncated image file."""


def _read_token(buf: bytes, pos: int, what: str) -> tuple[bytes, int]:
    """Next whitespace-delimited token, skipping comment lines starting '#'."""
    n = len(buf)
    while pos < n and buf[pos:pos + 1].isspace():
        pos += 1
    while pos < n and buf[pos:pos + 1] == b"#":
        while pos < n and buf[pos] != 0x0A:
            pos += 1
        while pos < n and buf[pos:pos + 1].isspace():
            pos += 1
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace():
        pos += 1
    if start == pos:
        raise FormatError(f"missing {what} at byte {start}")
    return buf[start:pos], pos


def write_ppm(path, image: np.ndarray) -> None:
    """Write an (H, W, 3) uint8 array as binary PPM with maxval 255."""
    img = np.asarray(image)
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
        raise FormatError(f"write_ppm needs (H, W, 3) uint8, got {img.dtype} {img.shape}")
    h, w = img.shape[:2]
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(np.ascontiguousarray(img).tobytes())


def read_ppm(path) -> np.ndarray:
    """Read a binary PPM into an (H, W, 3) uint8 array."""
    with open(path, "rb") as f:
        buf = f.read()
    magic, pos = _read_token(buf, 0, "magic")
    if magic != b"P6":
        raise FormatError(f"bad magic {magic!r} at byte 0, expected b'P6'")
    fields = []
    for what in ("width", "height", "maxval"):
        tok, pos = _read_token(buf, pos, what)
        try:
            fields.append(int(tok))
        except ValueError:
            raise FormatError(f"non-numeric {what} {tok!r} before byte {pos}") from None
    w, h, maxval = fields
    if w < 1 or h < 1:
        raise FormatError(f"non-positive dimensions {w}x{h} before byte {pos}")
    if maxval != 255:
        raise FormatError(f"unsupported maxval {maxval} before byte {pos}, expected 255")
    if pos >= len(buf):
        raise FormatError(f"file ends at byte {pos}, raster missing")
    pos += 1  # single whitespace byte separates header from raster
    need = w * h * 3
    if len(buf) - pos != need:
        raise FormatError(
            f"raster at byte {pos} holds {len(buf) - pos} bytes, expected exactly {need}"
        )
    return np.frombuffer(buf, dtype=np.uint8, offset=pos).reshape(h, w, 3).copy()


def write_pfm(path, data: np.ndarray) -> None:
    """Write an (H, W) float array as grayscale PFM.

    Scale is -1.0 (little-endian), rows stored bottom-up, values float32.
    """
    arr = np.asarray(data, dtype=np.float32)
    if arr.ndim != 2:
        raise FormatError(f"write_pfm needs an (H, W) array, got shape {arr.shape}")
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(b"Pf\n%d %d\n-1.0\n" % (w, h))
        f.write(np.ascontiguousarray(arr[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    """Read a grayscale PFM into an (H, W) float64 array (top-down rows)."""
    with open(path, "rb") as f:
        buf = f.read()
    magic, pos = _read_token(buf, 0, "magic")
    if magic == b"PF":
        raise FormatError("color PFM (magic b'PF') unsupported, expected grayscale b'Pf'")
    if magic != b"Pf":
        raise FormatError(f"bad magic {magic!r} at byte 0, expected b'Pf'")
    tok_w, pos = _read_token(buf, pos, "width")
    tok_h, pos = _read_token(buf, pos, "height")
    tok_s, pos = _read_token(buf, pos, "scale")
    try:
        w, h = int(tok_w), int(tok_h)
        scale = float(tok_s)
    except ValueError:
        raise FormatError(f"non-numeric header field before byte {pos}") from None
    if w < 1 or h < 1:
        raise FormatError(f"non-positive dimensions {w}x{h} before byte {pos}")
    if scale == 0.0:
        raise FormatError(f"zero scale before byte {pos}")
    if pos >= len(buf):
        raise FormatError(f"file ends at byte {pos}, raster missing")
    pos += 1  # single whitespace byte separates header from raster
    need = w * h * 4
    if len(buf) - pos != need:
        raise FormatError(
            f"raster at byte {pos} holds {len(buf) - pos} bytes, expected exactly {need}"
        )
    endian = "<" if scale < 0.0 else ">"
    flat = struct.unpack(f"{endian}{w * h}f", buf[pos:pos + need])
    arr = np.array(flat, dtype=np.float64).reshape(h, w)
    arr *= abs(scale)
    return arr[::-1].copy()
