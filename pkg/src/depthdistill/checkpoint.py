"""Checkpoint container: magic, length-prefixed JSON header, float32 payload.

Layout: b"ADUCKPT1" | u32 LE header length | canonical JSON header |
contiguous little-endian float32 parameter data in header-table order.
The header carries the role tag, a config echo, the step count, and the
ordered name/shape table; the payload length must equal the table exactly.
Training math is 64-bit; storage rounds to 32-bit on save.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .nets import ModelParams

MAGIC = b"ADUCKPT1"


class CheckpointError(ValueError):
    """Malformed checkpoint file."""


def _canonical_header(header: dict) -> bytes:
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode()


def save_checkpoint(params: ModelParams, config: dict, path, step: int = 0) -> None:
    table = [[name, list(t.data.shape)] for name, t in params.items()]
    header = {"role": params.role, "config": config, "step": int(step), "params": table}
    blob = _canonical_header(header)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for _, t in params.items():
            f.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())


def _read_header(raw: bytes, path) -> tuple[dict, int]:
    if len(raw) < len(MAGIC) + 4:
        raise CheckpointError(f"{path}: file shorter than magic and header length")
    if raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:8]!r}, expected {MAGIC!r}")
    (hlen,) = struct.unpack_from("<I", raw, len(MAGIC))
    start = len(MAGIC) + 4
    if len(raw) < start + hlen:
        raise CheckpointError(f"{path}: truncated header ({len(raw) - start} of {hlen} bytes)")
    try:
        header = json.loads(raw[start:start + hlen])
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: header is not valid JSON: {e}") from None
    for key in ("role", "config", "step", "params"):
        if key not in header:
            raise CheckpointError(f"{path}: header missing {key!r}")
    return header, start + hlen


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    """Read a checkpoint; returns (params, header). Nothing is returned on error."""
    raw = Path(path).read_bytes()
    header, offset = _read_header(raw, path)
    expected = sum(int(np.prod(shape)) for _, shape in header["params"])
    payload = raw[offset:]
    if len(payload) != 4 * expected:
        raise CheckpointError(
            f"{path}: payload holds {len(payload)} bytes, header declares {4 * expected}")
    mp = ModelParams(role=header["role"])
    pos = 0
    for name, shape in header["params"]:
        n = int(np.prod(shape))
        arr = np.frombuffer(payload, dtype="<f4", count=n, offset=pos).astype(np.float64)
        mp.add(name, arr.reshape([int(s) for s in shape]))
        pos += 4 * n
    return mp, header


def verify_checkpoint(path) -> dict:
    """Length-consistency check without materializing parameters."""
    raw = Path(path).read_bytes()
    header, offset = _read_header(raw, path)
    expected = 4 * sum(int(np.prod(shape)) for _, shape in header["params"])
    actual = len(raw) - offset
    if actual != expected:
        raise CheckpointError(
            f"{path}: payload holds {actual} bytes, header declares {expected}")
    return {"role": header["role"], "step": header["step"],
            "n_params": len(header["params"]), "payload_bytes": actual}
