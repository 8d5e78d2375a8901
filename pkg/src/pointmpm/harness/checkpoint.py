"""Versioned binary checkpoints.

Layout (all integers little-endian):
    magic   8 bytes  b"PMPMCKPT"
    version u32
    count   u32                      number of sections
    section name: u16 length + utf-8 bytes
    section payload: u64 length + bytes

Sections: "config" (key=value text), "epoch" (u64), one "params/<group>"
array table per parameter group, and optionally "optim/<group>" tables
(u64 step count + array table). Array table: u32 count, then per array a
name (u16 + utf-8), dtype code u8 (0=float32, 1=float64), ndim u8, dims
u32 each, raw little-endian data. Serialization is order-preserving, so
save -> load -> save is byte-identical.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import Config

__all__ = ["Checkpoint", "CheckpointError", "save_checkpoint", "load_checkpoint",
           "check_compatible", "ARCHITECTURE_KEYS"]

MAGIC = b"PMPMCKPT"
VERSION = 1

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}

ARCHITECTURE_KEYS = ("num_patches", "patch_size", "vocab_size", "model_dim",
                     "depth", "num_heads", "ff_dim", "feat_knn", "precision")


class CheckpointError(ValueError):
    """Malformed checkpoint or incompatible configuration."""


@dataclass
class Checkpoint:
    config: Config
    epoch: int
    params: dict                      # group -> {name: ndarray}
    optim: dict = field(default_factory=dict)  # group -> (step, {name: ndarray})


def _write_str(buf: io.BytesIO, s: str) -> None:
    raw = s.encode("utf-8")
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)


def _read_str(buf: io.BytesIO) -> str:
    (n,) = struct.unpack("<H", buf.read(2))
    return buf.read(n).decode("utf-8")


def _write_array_table(buf: io.BytesIO, arrays: dict) -> None:
    buf.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        if arr.dtype not in _DTYPE_CODES:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name}")
        _write_str(buf, name)
        buf.write(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
        for dim in arr.shape:
            buf.write(struct.pack("<I", dim))
        buf.write(np.ascontiguousarray(arr, dtype=_DTYPES[_DTYPE_CODES[arr.dtype]]).tobytes())


def _read_array_table(buf: io.BytesIO) -> dict:
    (count,) = struct.unpack("<I", buf.read(4))
    arrays = {}
    for _ in range(count):
        name = _read_str(buf)
        code, ndim = struct.unpack("<BB", buf.read(2))
        if code not in _DTYPES:
            raise CheckpointError(f"unknown dtype code {code}")
        shape = tuple(struct.unpack("<I", buf.read(4))[0] for _ in range(ndim))
        dtype = _DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        arr = np.frombuffer(buf.read(nbytes), dtype=dtype).reshape(shape)
        arrays[name] = arr.astype(arr.dtype.newbyteorder("="), copy=True)
    return arrays


def serialize(ckpt: Checkpoint) -> bytes:
    sections = [("config", ckpt.config.to_text().encode("utf-8")),
                ("epoch", struct.pack("<Q", ckpt.epoch))]
    for group, arrays in ckpt.params.items():
        buf = io.BytesIO()
        _write_array_table(buf, arrays)
        sections.append((f"params/{group}", buf.getvalue()))
    for group, (step, arrays) in ckpt.optim.items():
        buf = io.BytesIO()
        buf.write(struct.pack("<Q", step))
        _write_array_table(buf, arrays)
        sections.append((f"optim/{group}", buf.getvalue()))

    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<I", VERSION))
    out.write(struct.pack("<I", len(sections)))
    for name, payload in sections:
        _write_str(out, name)
        out.write(struct.pack("<Q", len(payload)))
        out.write(payload)
    return out.getvalue()


def deserialize(raw: bytes) -> Checkpoint:
    buf = io.BytesIO(raw)
    if buf.read(8) != MAGIC:
        raise CheckpointError("bad magic: not a checkpoint file")
    (version,) = struct.unpack("<I", buf.read(4))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (count,) = struct.unpack("<I", buf.read(4))
    config = None
    epoch = None
    params: dict = {}
    optim: dict = {}
    for _ in range(count):
        name = _read_str(buf)
        (plen,) = struct.unpack("<Q", buf.read(8))
        payload = buf.read(plen)
        if len(payload) != plen:
            raise CheckpointError(f"truncated section {name!r}")
        if name == "config":
            config = Config.from_text(payload.decode("utf-8"))
        elif name == "epoch":
            (epoch,) = struct.unpack("<Q", payload)
        elif name.startswith("params/"):
            params[name[len("params/"):]] = _read_array_table(io.BytesIO(payload))
        elif name.startswith("optim/"):
            pbuf = io.BytesIO(payload)
            (step,) = struct.unpack("<Q", pbuf.read(8))
            optim[name[len("optim/"):]] = (step, _read_array_table(pbuf))
        else:
            raise CheckpointError(f"unknown section {name!r}")
    if config is None or epoch is None:
        raise CheckpointError("checkpoint missing config or epoch section")
    return Checkpoint(config=config, epoch=int(epoch), params=params, optim=optim)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(serialize(ckpt))


def load_checkpoint(path) -> Checkpoint:
    try:
        raw = Path(path).read_bytes()
    except OSError as err:
        raise CheckpointError(f"cannot read checkpoint {path}: {err}") from err
    return deserialize(raw)


def check_compatible(ckpt_config: Config, config: Config, keys=ARCHITECTURE_KEYS) -> None:
    """Fail loudly when architecture-determining keys differ."""
    bad = [(k, getattr(ckpt_config, k), getattr(config, k))
           for k in keys if getattr(ckpt_config, k) != getattr(config, k)]
    if bad:
        detail = "; ".join(f"{k}: checkpoint={a} config={b}" for k, a, b in bad)
        raise CheckpointError(f"checkpoint/config mismatch: {detail}")
