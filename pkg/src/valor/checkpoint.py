"""Binary checkpoint format.

Layout (little-endian)::

    b"VALORCKPT" | u32 version | u32 record count
    record := u32 name length | name (utf-8) | u32 rank | u32 extents[rank] | f64 payload

Non-tensor state travels as float64 records under ``meta/``: the config
snapshot as byte values, the step counter, and the numpy PCG64 state split
into 16-bit limbs (exact in float64).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (CheckpointFormatError, CheckpointShapeError, CheckpointTruncatedError,
                     CheckpointVersionError)

MAGIC = b"VALORCKPT"
VERSION = 1
_LIMBS = 8   # 8 x 16 bits = 128-bit PCG64 integers


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    config_text: str = ""
    rng_state: dict | None = None


def _int_to_limbs(value: int) -> list[float]:
    return [float((value >> (16 * i)) & 0xFFFF) for i in range(_LIMBS)]


def _limbs_to_int(limbs) -> int:
    return sum(int(v) << (16 * i) for i, v in enumerate(limbs))


def encode_rng_state(state: dict) -> np.ndarray:
    if state.get("bit_generator") != "PCG64":
        raise ValueError("only PCG64 generator state is supported")
    s = state["state"]
    return np.array(_int_to_limbs(s["state"]) + _int_to_limbs(s["inc"])
                    + [float(state["has_uint32"]), float(state["uinteger"])])


def decode_rng_state(arr: np.ndarray) -> dict:
    arr = np.asarray(arr)
    return {
        "bit_generator": "PCG64",
        "state": {"state": _limbs_to_int(arr[:_LIMBS]), "inc": _limbs_to_int(arr[_LIMBS:2 * _LIMBS])},
        "has_uint32": int(arr[2 * _LIMBS]),
        "uinteger": int(arr[2 * _LIMBS + 1]),
    }


def _records(ckpt: Checkpoint) -> list[tuple[str, np.ndarray]]:
    recs = [(f"param/{k}", v) for k, v in ckpt.params.items()]
    recs += [(f"optim/{k}", v) for k, v in ckpt.optimizer.items()]
    recs.append(("meta/step", np.array([float(ckpt.step)])))
    recs.append(("meta/config", np.frombuffer(ckpt.config_text.encode("utf-8"), dtype=np.uint8).astype(np.float64)))
    if ckpt.rng_state is not None:
        recs.append(("meta/rng", encode_rng_state(ckpt.rng_state)))
    return recs


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    recs = _records(ckpt)
    out = bytearray(MAGIC)
    out += struct.pack("<II", VERSION, len(recs))
    for name, arr in recs:
        a = np.asarray(arr, dtype="<f8")
        nb = name.encode("utf-8")
        out += struct.pack("<I", len(nb)) + nb
        out += struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
        out += a.tobytes(order="C")
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(bytes(out))
    tmp.replace(path)


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointTruncatedError(f"checkpoint truncated at byte {len(self.raw)} (needed {self.pos + n})")
        chunk = self.raw[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path: str | Path, expected_shapes: dict[str, tuple] | None = None) -> Checkpoint:
    """Parse and validate the whole file before returning anything."""
    r = _Reader(Path(path).read_bytes())
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic bytes")
    version = r.u32()
    if version != VERSION:
        raise CheckpointVersionError(f"{path}: checkpoint version {version}, expected {VERSION}")
    count = r.u32()
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        shape = struct.unpack(f"<{rank}I", r.take(4 * rank))
        n = int(np.prod(shape)) if rank else 1
        arrays[name] = np.frombuffer(r.take(8 * n), dtype="<f8").reshape(shape).astype(np.float64)
    if r.pos != len(r.raw):
        raise CheckpointFormatError(f"{path}: {len(r.raw) - r.pos} trailing bytes")
    if "meta/step" not in arrays or "meta/config" not in arrays:
        raise CheckpointFormatError(f"{path}: missing metadata records")

    params = {k[6:]: v for k, v in arrays.items() if k.startswith("param/")}
    if expected_shapes is not None:
        if set(expected_shapes) != set(params):
            raise CheckpointShapeError(
                f"parameter names differ: missing {sorted(set(expected_shapes) - set(params))}, "
                f"unexpected {sorted(set(params) - set(expected_shapes))}")
        for k, shape in expected_shapes.items():
            if tuple(params[k].shape) != tuple(shape):
                raise CheckpointShapeError(f"{k}: checkpoint shape {params[k].shape} vs model {tuple(shape)}")
    return Checkpoint(
        params=params,
        optimizer={k[6:]: v for k, v in arrays.items() if k.startswith("optim/")},
        step=int(arrays["meta/step"][0]),
        config_text=arrays["meta/config"].astype(np.uint8).tobytes().decode("utf-8"),
        rng_state=decode_rng_state(arrays["meta/rng"]) if "meta/rng" in arrays else None,
    )
