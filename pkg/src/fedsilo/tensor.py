"""Dense tensors, ordered model states and the ``.apfl`` binary codec.

Layout (all integers little-endian)::

    b"APFL" | version:u8 | count:u32
    per entry: name_len:u16 | name:utf8 | dtype:u8 | rank:u8 | dims:u32*rank | data
    crc32(all preceding bytes):u32
"""

from __future__ import annotations

import struct
import zlib
from collections.abc import Iterator, Mapping
from dataclasses import dataclass

import numpy as np

from .errors import BadMagic, CorruptPayload, NameNotFound, Truncated, UnsupportedVersion

MAGIC = b"APFL"
VERSION = 1
FILE_SUFFIX = ".apfl"

F32 = "F32"
F64 = "F64"
_DTYPE_CODES = {F32: 0, F64: 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}
_NUMPY = {F32: np.dtype("<f4"), F64: np.dtype("<f8")}


def dtype_code(dtype: np.dtype) -> str:
    dtype = np.dtype(dtype)
    if dtype == np.float32:
        return F32
    if dtype == np.float64:
        return F64
    raise TypeError(f"unsupported element type {dtype}")


@dataclass(frozen=True, eq=False)
class Tensor:
    """Immutable dense tensor backed by a read-only numpy array.

    ``dtype`` is F32 unless the source array is already float64 or F64 is
    requested explicitly.
    """

    array: np.ndarray

    def __init__(self, data, dtype: str | None = None):
        if dtype is None:
            from_f64 = isinstance(data, (np.ndarray, np.floating)) and data.dtype == np.float64
            dtype = F64 if from_f64 else F32
        if dtype not in _NUMPY:
            raise TypeError(f"unknown dtype code {dtype!r}")
        arr = np.array(data, dtype=_NUMPY[dtype], copy=True)
        if arr.ndim == 0:
            raise ValueError("tensors need at least one dimension")
        if arr.ndim > 255:
            raise ValueError("rank exceeds 255")
        if any(d < 1 for d in arr.shape):
            raise ValueError(f"all extents must be >= 1, got {arr.shape}")
        arr.flags.writeable = False
        object.__setattr__(self, "array", arr)

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(self.array.shape)

    @property
    def dtype(self) -> str:
        return dtype_code(self.array.dtype)

    @property
    def data(self) -> np.ndarray:
        return self.array.reshape(-1)

    @property
    def nbytes(self) -> int:
        return self.array.nbytes

    def __eq__(self, other):
        if not isinstance(other, Tensor):
            return NotImplemented
        return (
            self.dims == other.dims
            and self.dtype == other.dtype
            and self.array.tobytes() == other.array.tobytes()
        )

    def __hash__(self):
        return hash((self.dims, self.dtype, self.array.tobytes()))

    def __repr__(self):
        return f"Tensor(dims={self.dims}, dtype={self.dtype})"


class ModelState(Mapping):
    """Ordered, immutable mapping of parameter name to :class:`Tensor`.

    Equality is bit-exact and order-sensitive.
    """

    __slots__ = ("_entries",)

    def __init__(self, entries=()):
        items = entries.items() if isinstance(entries, Mapping) else entries
        built: dict[str, Tensor] = {}
        for name, tensor in items:
            if not isinstance(name, str):
                raise TypeError(f"parameter names must be str, got {type(name).__name__}")
            if name in built:
                raise ValueError(f"duplicate parameter name {name!r}")
            if len(name.encode("utf-8")) > 0xFFFF:
                raise ValueError("parameter name longer than 65535 bytes")
            built[name] = tensor if isinstance(tensor, Tensor) else Tensor(tensor)
        self._entries = built

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray], dtype: str | None = None) -> "ModelState":
        return cls((k, Tensor(v, dtype)) for k, v in arrays.items())

    def to_arrays(self) -> dict[str, np.ndarray]:
        """Writable float copies keyed by name, in order."""
        return {k: np.array(t.array) for k, t in self._entries.items()}

    def __getitem__(self, name):
        try:
            return self._entries[name]
        except KeyError:
            raise NameNotFound(name) from None

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self):
        return len(self._entries)

    def __eq__(self, other):
        if not isinstance(other, ModelState):
            return NotImplemented
        return list(self._entries.items()) == list(other._entries.items())

    def __hash__(self):
        return hash(tuple(self._entries.items()))

    def __repr__(self):
        inner = ", ".join(f"{k}: {t.dims}/{t.dtype}" for k, t in self._entries.items())
        return f"ModelState({{{inner}}})"

    def signature(self) -> tuple[tuple[str, tuple[int, ...], str], ...]:
        return tuple((k, t.dims, t.dtype) for k, t in self._entries.items())

    @property
    def nbytes(self) -> int:
        return sum(t.nbytes for t in self._entries.values())


def state_get(state: ModelState, name: str) -> Tensor:
    return state[name]


def encode_state(state: ModelState) -> bytes:
    parts = [MAGIC, struct.pack("<BI", VERSION, len(state))]
    for name, tensor in state.items():
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<BB", _DTYPE_CODES[tensor.dtype], len(tensor.dims)))
        parts.append(struct.pack(f"<{len(tensor.dims)}I", *tensor.dims))
        parts.append(tensor.array.tobytes(order="C"))
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, buf: memoryview):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> memoryview:
        end = self.pos + n
        if end > len(self.buf):
            raise Truncated(f"needed {n} bytes at offset {self.pos}, only {len(self.buf) - self.pos} left")
        out = self.buf[self.pos:end]
        self.pos = end
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_state(data: bytes) -> ModelState:
    data = bytes(data)
    if len(data) >= 4 and data[:4] != MAGIC:
        raise BadMagic(f"expected {MAGIC!r}, got {data[:4]!r}")
    if len(data) < 13:
        raise Truncated(f"{len(data)} bytes is shorter than the minimal 13-byte encoding")
    if data[4] != VERSION:
        raise UnsupportedVersion(f"format version {data[4]} is not supported")

    body = memoryview(data)[:-4]
    reader = _Reader(body)
    reader.take(5)
    (count,) = reader.unpack("<I")
    entries = []
    seen = set()
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        try:
            name = bytes(reader.take(name_len)).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CorruptPayload(f"parameter name is not UTF-8: {exc}") from None
        if name in seen:
            raise CorruptPayload(f"duplicate parameter name {name!r}")
        seen.add(name)
        code, rank = reader.unpack("<BB")
        if code not in _CODE_DTYPES:
            raise CorruptPayload(f"unknown dtype code {code}")
        if rank == 0:
            raise CorruptPayload(f"entry {name!r} has rank 0")
        dims = reader.unpack(f"<{rank}I")
        if any(d == 0 for d in dims):
            raise CorruptPayload(f"entry {name!r} has a zero extent")
        dtype = _NUMPY[_CODE_DTYPES[code]]
        nbytes = dtype.itemsize
        for d in dims:
            nbytes *= d
            if nbytes > len(body):
                raise Truncated(f"entry {name!r} declares more data than the buffer holds")
        arr = np.frombuffer(reader.take(nbytes), dtype=dtype).reshape(dims)
        entries.append((name, arr))
    if reader.pos != len(body):
        raise CorruptPayload(f"{len(body) - reader.pos} trailing bytes after last entry")
    (crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise CorruptPayload("CRC-32 mismatch")
    return ModelState((name, Tensor(arr, dtype_code(arr.dtype))) for name, arr in entries)


def save_state(state: ModelState, path) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_state(state))


def load_state(path) -> ModelState:
    with open(path, "rb") as fh:
        return decode_state(fh.read())
