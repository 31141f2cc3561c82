"""Shared/personalized parameter roles and the FVT1 checkpoint format."""
from __future__ import annotations

import enum
import math
import re
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from .tensor import DTYPE, Tensor

MAGIC = b"FVT1"
VERSION = 1

_HEAD_RE = re.compile(r"^block(\d+)\.head(\d+)\.(qkv|proj)$")
_SHARED_RES = [
    re.compile(r"^block\d+\.(ln0|ln1)\.(gain|bias)$"),
    re.compile(r"^block\d+\.mlp\.(W1|b1|W2|b2)$"),
    re.compile(r"^embed\.(W|pos|cls)$"),
    re.compile(r"^norm\.(gain|bias)$"),
    re.compile(r"^head\.(W|b)$"),
]


class SchemaError(ValueError):
    pass


class MergeError(ValueError):
    pass


class CheckpointFormatError(ValueError):
    pass


class ParamRole(enum.IntEnum):
    SHARED = 0
    PERSONALIZED = 1


def personalized_head_count(ratio: float, num_heads: int) -> int:
    """round_half_up(ratio * num_heads)."""
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"personalization ratio must be in [0, 1], got {ratio}")
    # tolerance absorbs binary representation error, e.g. 0.5 * 3
    return min(num_heads, int(math.floor(ratio * num_heads + 0.5 + 1e-9)))


@dataclass(frozen=True)
class PartitionSpec:
    ratio: float
    heads_per_layer: tuple[int, ...]

    @classmethod
    def from_ratio(cls, ratio: float, num_heads: int, num_layers: int) -> "PartitionSpec":
        p = personalized_head_count(ratio, num_heads)
        return cls(ratio, (p,) * num_layers)

    def personalized(self, layer: int) -> int:
        return self.heads_per_layer[layer]


class ParamStore:
    """Name-ordered parameter registry; each entry carries a role."""

    def __init__(self, params: Mapping[str, Tensor] | Iterable[tuple[str, Tensor]] = (),
                 roles: Mapping[str, ParamRole] | None = None):
        items = params.items() if isinstance(params, Mapping) else params
        self._tensors: dict[str, Tensor] = {}
        for name, t in items:
            if name in self._tensors:
                raise SchemaError(f"duplicate parameter name {name!r}")
            self._tensors[name] = t
        self._tensors = dict(sorted(self._tensors.items()))
        roles = roles or {}
        self._roles = {n: ParamRole(roles.get(n, ParamRole.SHARED)) for n in self._tensors}
        self.checksum_failures: list[str] = []

    def __len__(self) -> int:
        return len(self._tensors)

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def names(self) -> list[str]:
        return list(self._tensors)

    def tensors(self) -> dict[str, Tensor]:
        return self._tensors

    def role(self, name: str) -> ParamRole:
        return self._roles[name]

    def items(self):
        for n, t in self._tensors.items():
            yield n, t, self._roles[n]

    def count(self, role: ParamRole | None = None) -> int:
        """Number of scalar parameters, optionally restricted to one role."""
        return sum(t.size for n, t in self._tensors.items() if role is None or self._roles[n] is role)

    def equals(self, other: "ParamStore") -> bool:
        if self.names() != other.names():
            return False
        for n, t, r in self.items():
            o = other[n]
            if r is not other.role(n) or t.shape != o.shape or t.data.tobytes() != o.data.tobytes():
                return False
        return True


def assign_roles(store: ParamStore, spec: PartitionSpec) -> ParamStore:
    roles = {}
    for name in store:
        m = _HEAD_RE.match(name)
        if m:
            layer, head = int(m.group(1)), int(m.group(2))
            if layer >= len(spec.heads_per_layer):
                raise SchemaError(f"{name}: layer {layer} not covered by partition spec")
            roles[name] = ParamRole.PERSONALIZED if head < spec.personalized(layer) else ParamRole.SHARED
        elif any(r.match(name) for r in _SHARED_RES):
            roles[name] = ParamRole.SHARED
        else:
            raise SchemaError(f"unknown parameter name pattern: {name!r}")
    store._roles = roles
    return store


def extract(store: ParamStore, role: ParamRole) -> list[tuple[str, Tensor]]:
    """Detached copies of every parameter with ``role``, in name order."""
    return [(n, Tensor(t.data.copy(), name=n)) for n, t, r in store.items() if r is role]


def merge(store: ParamStore, updates: Sequence[tuple[str, Tensor | np.ndarray]], role: ParamRole) -> None:
    """Overwrite ``role`` parameters in place; validates everything before writing."""
    staged = []
    for name, value in updates:
        arr = value.data if isinstance(value, Tensor) else np.asarray(value)
        if name not in store:
            raise MergeError(f"unknown parameter {name!r}")
        if store.role(name) is not role:
            raise MergeError(f"{name!r} has role {store.role(name).name}, expected {role.name}")
        if arr.shape != store[name].shape:
            raise MergeError(f"{name!r} shape {arr.shape} does not match {store[name].shape}")
        staged.append((store[name], arr))
    for t, arr in staged:
        np.copyto(t.data, arr)


# ---------------------------------------------------------------------------
# checkpoints


def checkpoint_bytes(store: ParamStore) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(store))]
    for name, t, role in store.items():
        raw_name = name.encode("utf-8")
        payload = np.ascontiguousarray(t.data, dtype="<f4").tobytes()
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<BB", int(role), t.ndim))
        parts.append(struct.pack(f"<{t.ndim}I", *t.shape))
        parts.append(payload)
        parts.append(struct.pack("<I", zlib.crc32(payload)))
    return b"".join(parts)


def save_checkpoint(store: ParamStore, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(store))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointFormatError(f"truncated while reading {what} at byte {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def parse_checkpoint(buf: bytes) -> ParamStore:
    """Decode an FVT1 buffer.

    Structural problems raise CheckpointFormatError. Payload CRC mismatches do
    not; the offending names are listed in ``checksum_failures``.
    """
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise CheckpointFormatError("bad magic, not an FVT1 checkpoint")
    version, count = r.unpack("<II", "header")
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    entries, roles, failures = [], {}, []
    prev = None
    for _ in range(count):
        (nlen,) = r.unpack("<H", "name length")
        try:
            name = r.take(nlen, "name").decode("utf-8")
        except UnicodeDecodeError as e:
            raise CheckpointFormatError(f"tensor name is not UTF-8 at byte {r.pos}") from e
        if name in roles:
            raise CheckpointFormatError(f"duplicate tensor name {name!r}")
        if prev is not None and name < prev:
            raise CheckpointFormatError(f"tensor {name!r} out of lexicographic order")
        prev = name
        role_byte, rank = r.unpack("<BB", "role/rank")
        if role_byte not in (0, 1):
            raise CheckpointFormatError(f"{name!r}: invalid role byte {role_byte}")
        dims = r.unpack(f"<{rank}I", "dims")
        n = int(np.prod(dims)) if rank else 1
        payload = r.take(4 * n, f"payload of {name!r}")
        (crc,) = r.unpack("<I", "crc")
        if zlib.crc32(payload) != crc:
            failures.append(name)
        arr = np.frombuffer(payload, dtype="<f4").astype(DTYPE).reshape(dims)
        entries.append((name, Tensor(arr, requires_grad=True, name=name)))
        roles[name] = ParamRole(role_byte)
    if r.pos != len(buf):
        raise CheckpointFormatError(f"{len(buf) - r.pos} trailing bytes after last tensor")
    store = ParamStore(entries, roles)
    store.checksum_failures = failures
    return store


def load_checkpoint(path) -> ParamStore:
    return parse_checkpoint(Path(path).read_bytes())
