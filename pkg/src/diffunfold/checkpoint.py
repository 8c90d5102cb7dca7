"""DUCK checkpoint container.

Layout (little-endian)::

    b"DUCK" | u16 version | 32-byte config fingerprint | u64 step | u32 flags
    | u32 n_tensors | n_tensors x tensor record | u32 CRC32 of everything before

    tensor record: u16 name_len | name | u8 dtype | u8 ndim | ndim x u32 dims
                   | u64 nbytes | raw bytes

Tensors are stored in sorted-name order so re-saving a loaded checkpoint is
byte-identical.  Names are prefixed ``param/``, ``ema/``, ``adam.m/``,
``adam.v/`` or ``meta/``; ``flags`` records which optional groups exist.
"""

from __future__ import annotations

import struct
import warnings
import zlib
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"DUCK"
VERSION = 1
FLAG_OPTIMIZER = 1
FLAG_EMA = 2

_DTYPES = {0: "<f4", 1: "<f8", 2: "<i8", 3: "<u8", 4: "<u1"}
_CODES = {np.dtype(v): k for k, v in _DTYPES.items()}


class CheckpointError(Exception):
    pass


class CheckpointFormatError(CheckpointError):
    """Not a DUCK file."""


class CheckpointVersionError(CheckpointFormatError):
    """A DUCK file written by a different format version."""


class CheckpointIntegrityError(CheckpointError):
    """Truncated or corrupted payload."""


class FingerprintMismatchWarning(UserWarning):
    pass


@dataclass
class Checkpoint:
    fingerprint: str
    step: int
    params: dict[str, np.ndarray]
    ema: dict[str, np.ndarray] | None = None
    optimizer: dict[str, np.ndarray] | None = None
    meta: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def flags(self) -> int:
        return (FLAG_OPTIMIZER if self.optimizer is not None else 0) | (FLAG_EMA if self.ema is not None else 0)

    def tensors(self) -> dict[str, np.ndarray]:
        out = {f"param/{k}": v for k, v in self.params.items()}
        out.update({f"meta/{k}": v for k, v in self.meta.items()})
        if self.ema is not None:
            out.update({f"ema/{k}": v for k, v in self.ema.items()})
        if self.optimizer is not None:
            out.update({k: v for k, v in self.optimizer.items()})
        return out


def _fp_bytes(fp: str) -> bytes:
    raw = bytes.fromhex(fp) if fp else b""
    if len(raw) > 32:
        raise ValueError("fingerprint must be at most 32 bytes (64 hex digits)")
    return raw.ljust(32, b"\0")


def to_bytes(ckpt: Checkpoint) -> bytes:
    parts = [MAGIC, struct.pack("<H", VERSION), _fp_bytes(ckpt.fingerprint),
             struct.pack("<QI", int(ckpt.step), ckpt.flags)]
    tensors = ckpt.tensors()
    parts.append(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        if np.dtype(dt) not in _CODES:
            raise CheckpointError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        nb = name.encode()
        raw = np.ascontiguousarray(arr, dtype=np.dtype(dt).newbyteorder("<")).tobytes()
        parts += [struct.pack("<H", len(nb)), nb, struct.pack("<BB", _CODES[np.dtype(dt)], arr.ndim),
                  struct.pack(f"<{arr.ndim}I", *arr.shape), struct.pack("<Q", len(raw)), raw]
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def _read(body: bytes, pos: int, fmt: str):
    size = struct.calcsize(fmt)
    if pos + size > len(body):
        raise CheckpointIntegrityError("checkpoint truncated")
    return struct.unpack_from(fmt, body, pos), pos + size


def from_bytes(blob: bytes, expected_fingerprint: str | None = None) -> Checkpoint:
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise CheckpointFormatError("not a DUCK checkpoint (bad magic)")
    (version,), _ = _read(blob, 4, "<H")
    if version != VERSION:
        raise CheckpointVersionError(f"checkpoint format version {version}; this build reads {VERSION}")
    if len(blob) < 4 + 2 + 32 + 12 + 4 + 4:
        raise CheckpointIntegrityError("checkpoint truncated")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    pos = 6
    fp = body[pos:pos + 32].rstrip(b"\0").hex()
    pos += 32
    (step, flags), pos = _read(body, pos, "<QI")
    (n,), pos = _read(body, pos, "<I")
    tensors = {}
    for _ in range(n):
        (nl,), pos = _read(body, pos, "<H")
        if pos + nl > len(body):
            raise CheckpointIntegrityError("checkpoint truncated in a tensor name")
        name = body[pos:pos + nl].decode("utf-8", errors="replace")
        pos += nl
        (code, ndim), pos = _read(body, pos, "<BB")
        if code not in _DTYPES:
            raise CheckpointIntegrityError(f"tensor {name!r}: unknown dtype code {code}")
        shape, pos = _read(body, pos, f"<{ndim}I")
        (nbytes,), pos = _read(body, pos, "<Q")
        dt = np.dtype(_DTYPES[code])
        if nbytes != int(np.prod(shape)) * dt.itemsize:
            raise CheckpointIntegrityError(f"tensor {name!r}: length {nbytes} does not match shape {shape}")
        if pos + nbytes > len(body):
            raise CheckpointIntegrityError(f"tensor {name!r} truncated")
        tensors[name] = np.frombuffer(body, dtype=dt, count=int(np.prod(shape)), offset=pos).reshape(shape).copy()
        pos += nbytes
    if pos != len(body):
        raise CheckpointIntegrityError("trailing bytes after the tensor table")
    if zlib.crc32(body) != crc:
        raise CheckpointIntegrityError("checkpoint CRC32 mismatch")
    if expected_fingerprint is not None and fp != expected_fingerprint:
        warnings.warn(f"checkpoint fingerprint {fp[:12]} differs from config {expected_fingerprint[:12]}",
                      FingerprintMismatchWarning, stacklevel=2)

    def group(prefix):
        return {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}

    optimizer = {k: v for k, v in tensors.items() if k.startswith("adam.")} if flags & FLAG_OPTIMIZER else None
    return Checkpoint(fingerprint=fp, step=int(step), params=group("param/"),
                      ema=group("ema/") if flags & FLAG_EMA else None, optimizer=optimizer,
                      meta=group("meta/"))


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    data = to_bytes(ckpt)
    with open(path, "wb") as f:
        f.write(data)


def load_checkpoint(path, expected_fingerprint: str | None = None) -> Checkpoint:
    with open(path, "rb") as f:
        blob = f.read()
    return from_bytes(blob, expected_fingerprint)


# -- bridging to live training objects ----------------------------------------

def capture(fingerprint: str, modules, state=None) -> Checkpoint:
    """Snapshot parameters of ``modules`` and, if given, a TrainState."""
    params = {}
    for m in modules:
        params.update({n: p.value.copy() for n, p in m.named_parameters().items()})
    if state is None:
        return Checkpoint(fingerprint, 0, params)
    opt = {f"adam.m/{k}": v.copy() for k, v in state.adam.m.items()}
    opt.update({f"adam.v/{k}": v.copy() for k, v in state.adam.v.items()})
    meta = {"adam_t": np.array([state.adam.t], dtype=np.int64), "rng": state.rng.get_state()}
    return Checkpoint(fingerprint, state.step, params, ema={k: v.copy() for k, v in state.ema.items()},
                      optimizer=opt, meta=meta)


def restore_params(ckpt: Checkpoint, modules, use_ema: bool = False) -> None:
    source = ckpt.ema if use_ema and ckpt.ema is not None else ckpt.params
    for m in modules:
        for name, p in m.named_parameters().items():
            if name not in source:
                raise CheckpointError(f"checkpoint lacks parameter {name!r}")
            if source[name].shape != p.value.shape:
                raise CheckpointError(f"parameter {name!r}: shape {source[name].shape} != {p.value.shape}")
            p.value = source[name].astype(p.value.dtype, copy=True)


def restore_state(ckpt: Checkpoint, state) -> None:
    """Load optimizer moments, EMA, rng and step into a fresh TrainState."""
    if ckpt.optimizer is None or ckpt.ema is None:
        raise CheckpointError("checkpoint has no optimizer state to resume from")
    for k in state.adam.m:
        state.adam.m[k] = ckpt.optimizer[f"adam.m/{k}"].copy()
        state.adam.v[k] = ckpt.optimizer[f"adam.v/{k}"].copy()
    state.adam.t = int(ckpt.meta["adam_t"][0])
    state.ema = {k: v.copy() for k, v in ckpt.ema.items()}
    state.rng.set_state(ckpt.meta["rng"])
    state.step = ckpt.step
