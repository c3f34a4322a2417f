"""Binary checkpoints for Q-networks and feedback simulators.

Layout (little endian)::

    b"DEERSCKPT"  magic
    u32           format version
    u16 + bytes   variant tag (utf-8)
    u32 + bytes   JSON header: kind, architecture, hyperparameters, extras
    u32           number of arrays
    per array:    u16 + name, u8 rank, rank x u64 dims, row-major float64 payload
    32 bytes      sha256 of everything above
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from deers.qnetwork import Architecture, ConfigError, Hyperparameters, NetworkParameters, QVariant, layout

MAGIC = b"DEERSCKPT"
VERSION = 1
_DIGEST = 32


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


class CheckpointIntegrityError(CheckpointError):
    pass


class VariantMismatchError(CheckpointError, ConfigError):
    pass


def _hyper_dict(hyper: Hyperparameters) -> dict:
    d = asdict(hyper)
    # JSON has no infinity literal
    d["gradient_clip"] = repr(hyper.gradient_clip) if math.isinf(hyper.gradient_clip) else hyper.gradient_clip
    return d


def _hyper_from(d: dict) -> Hyperparameters:
    d = dict(d)
    if isinstance(d.get("gradient_clip"), str):
        d["gradient_clip"] = float(d["gradient_clip"])
    return Hyperparameters(**d)


def encode_checkpoint(params: NetworkParameters, hyper: Hyperparameters, kind: str = "qnetwork", extra: dict | None = None) -> bytes:
    header = {
        "kind": kind,
        "architecture": params.arch.to_dict(),
        "hyperparameters": _hyper_dict(hyper),
        "extra": extra or {},
    }
    tag = params.variant.value.encode("utf-8")
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    out = bytearray(MAGIC)
    out += struct.pack("<I", VERSION)
    out += struct.pack("<H", len(tag)) + tag
    out += struct.pack("<I", len(blob)) + blob
    names = params.names()
    out += struct.pack("<I", len(names))
    for name in names:
        arr = np.ascontiguousarray(params[name], dtype="<f8")
        raw = name.encode("utf-8")
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<B", arr.ndim)
        out += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        out += arr.tobytes(order="C")
    out += hashlib.sha256(out).digest()
    return bytes(out)


class _Reader:
    def __init__(self, data: bytes, end: int):
        self.data = data
        self.end = end
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > self.end:
            raise CheckpointTruncatedError(f"checkpoint truncated: needed {n} bytes at offset {self.pos}")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(data: bytes):
    """Parse checkpoint bytes into (params, hyper, kind, extra)."""
    if not data.startswith(MAGIC):
        if MAGIC.startswith(data):
            raise CheckpointTruncatedError("checkpoint truncated inside the magic string")
        raise CheckpointError("not a DEERS checkpoint (bad magic)")
    if len(data) < len(MAGIC) + 4:
        raise CheckpointTruncatedError("checkpoint truncated before the version field")
    (version,) = struct.unpack_from("<I", data, len(MAGIC))
    if version != VERSION:
        raise CheckpointVersionError(f"checkpoint format version {version}, this build reads {VERSION}")
    r = _Reader(data, max(len(data) - _DIGEST, 0))
    r.take(len(MAGIC) + 4)
    (n,) = r.unpack("<H")
    try:
        variant = QVariant(r.take(n).decode("utf-8"))
        (n,) = r.unpack("<I")
        header = json.loads(r.take(n).decode("utf-8"))
    except CheckpointTruncatedError:
        raise
    except (ValueError, UnicodeDecodeError) as exc:
        raise CheckpointIntegrityError(f"corrupt checkpoint header: {exc}") from None
    (count,) = r.unpack("<I")
    arrays = {}
    for _ in range(count):
        (n,) = r.unpack("<H")
        name = r.take(n).decode("utf-8", errors="replace")
        (rank,) = r.unpack("<B")
        dims = r.unpack(f"<{rank}Q")
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        if size * 8 > r.end - r.pos:
            raise CheckpointTruncatedError(f"checkpoint truncated inside array {name!r}")
        arrays[name] = np.frombuffer(r.take(size * 8), dtype="<f8").reshape(dims).astype(np.float64)
    if len(data) < r.pos + _DIGEST:
        raise CheckpointTruncatedError("checkpoint truncated before the integrity trailer")
    if r.pos != len(data) - _DIGEST:
        raise CheckpointIntegrityError("trailing bytes after the array directory")
    if hashlib.sha256(data[: r.pos]).digest() != data[r.pos :]:
        raise CheckpointIntegrityError("checkpoint digest mismatch (file corrupted)")

    try:
        arch = Architecture.from_dict(header["architecture"])
        hyper = _hyper_from(header["hyperparameters"])
    except (KeyError, TypeError, ConfigError) as exc:
        raise CheckpointIntegrityError(f"bad checkpoint header: {exc}") from None
    expected = layout(arch, variant)
    if set(expected) != set(arrays):
        raise CheckpointShapeError(f"array names do not match the {variant.value} layout")
    for name, shape in expected.items():
        if arrays[name].shape != shape:
            raise CheckpointShapeError(f"{name}: stored shape {arrays[name].shape}, architecture implies {shape}")
    return NetworkParameters(arch, variant, arrays), hyper, header.get("kind", "qnetwork"), header.get("extra", {})


def save_checkpoint(params: NetworkParameters, variant, hyper: Hyperparameters, path, kind: str = "qnetwork", extra: dict | None = None) -> None:
    if QVariant(variant) is not params.variant:
        raise VariantMismatchError(f"parameters are for {params.variant.value}, not {QVariant(variant).value}")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(encode_checkpoint(params, hyper, kind, extra))


def load_checkpoint(path, expected_variant=None, kind: str | None = "qnetwork"):
    """Return (params, variant, hyper); nothing is returned unless the whole file checks out."""
    params, hyper, stored_kind, _ = decode_checkpoint(Path(path).read_bytes())
    if kind is not None and stored_kind != kind:
        raise CheckpointError(f"{path} holds a {stored_kind}, expected a {kind}")
    if expected_variant is not None and QVariant(expected_variant) is not params.variant:
        raise VariantMismatchError(
            f"checkpoint is for {params.variant.value}, refusing to load as {QVariant(expected_variant).value}"
        )
    return params, params.variant, hyper


def save_simulator(model, path, seed: int = 0) -> None:
    extra = {
        "rewards": asdict(model.rewards),
        "accuracy": model.accuracy,
        "majority_rate": model.majority_rate,
        "per_class_precision": model.per_class_precision,
        "holdout_size": model.holdout_size,
    }
    save_checkpoint(model.params, model.params.variant, Hyperparameters(seed=seed), path, kind="simulator", extra=extra)


def load_simulator(path):
    from deers.session import RewardMapping
    from deers.simulator import SimulatorModel

    params, _, kind, extra = decode_checkpoint(Path(path).read_bytes())
    if kind != "simulator":
        raise CheckpointError(f"{path} holds a {kind}, expected a simulator")
    return SimulatorModel(
        params,
        RewardMapping(**extra.get("rewards", {})),
        float(extra.get("accuracy", "nan")),
        float(extra.get("majority_rate", "nan")),
        {k: float(v) for k, v in extra.get("per_class_precision", {}).items()},
        int(extra.get("holdout_size", 0)),
    )
