"""The SQCK tensor container.

    magic "SQCK" | version u32 | tensor count u32
    per tensor: name length u16 | name UTF-8 | dtype u8 | rank u8 |
                dims u64 × rank | payload (row-major)
    metadata length u16 | metadata UTF-8 key=value lines

Everything is little-endian. dtype 4 is a boolean mask packed eight
elements per byte, least significant bit first."""

from math import prod
from pathlib import Path
from struct import Struct, error as StructError
from typing import Mapping, Optional, Union

import numpy as np

from .errors import FormatError
from .formats import Metadata
from .utils import Initializer

MAGIC = b'SQCK'
VERSION = 1

header_struct = Struct('<4sII')
name_length_struct = Struct('<H')
tensor_struct = Struct('<BB')
dim_struct = Struct('<Q')
metadata_length_struct = Struct('<H')

F32, F64, U8, I32, MASK = range(5)

dtypes = {
    F32: np.dtype('<f4'),
    F64: np.dtype('<f8'),
    U8: np.dtype('u1'),
    I32: np.dtype('<i4'),
}

_codes = {np.dtype(dtype).newbyteorder('<'): code for code, dtype in dtypes.items()}


def dtype_code(array: np.ndarray) -> int:
    if array.dtype == np.bool_:
        return MASK
    try:
        return _codes[array.dtype.newbyteorder('<')]
    except KeyError:
        raise FormatError(f"cannot store dtype {array.dtype}") from None


class Container(Initializer):
    """Named tensors in insertion order plus string metadata."""

    tensors: dict[str, np.ndarray]
    metadata: Metadata

    def __init__(self, tensors: Optional[Mapping] = None, metadata: Optional[Mapping] = None):
        super().__init__(tensors=dict(tensors or {}), metadata=Metadata(metadata or {}))

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self.tensors[name]
        except KeyError:
            raise FormatError("missing tensor", tensor=name) from None

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __eq__(self, other):
        return (
            isinstance(other, Container)
            and list(self.tensors) == list(other.tensors)
            and all(
                a.dtype == b.dtype and a.shape == b.shape and np.array_equal(a, b)
                for a, b in zip(self.tensors.values(), other.tensors.values())
            )
            and {k: self.metadata.text(k) for k in self.metadata}
            == {k: other.metadata.text(k) for k in other.metadata}
        )

    def __repr__(self):
        return f"Container({list(self.tensors)}, metadata={dict(self.metadata)})"


def encode_checkpoint(tensors: Mapping[str, np.ndarray], metadata: Optional[Mapping] = None) -> bytes:
    chunks = [header_struct.pack(MAGIC, VERSION, len(tensors))]
    for name, array in tensors.items():
        array = np.asarray(array)
        encoded_name = name.encode('UTF-8')
        if len(encoded_name) > 0xFFFF:
            raise FormatError("tensor name too long", tensor=name)
        if array.ndim > 0xFF:
            raise FormatError(f"rank {array.ndim} too large", tensor=name)
        code = dtype_code(array)
        chunks.append(name_length_struct.pack(len(encoded_name)))
        chunks.append(encoded_name)
        chunks.append(tensor_struct.pack(code, array.ndim))
        chunks.extend(dim_struct.pack(dim) for dim in array.shape)
        if code == MASK:
            chunks.append(np.packbits(array.ravel(), bitorder='little').tobytes())
        else:
            chunks.append(np.ascontiguousarray(array, dtype=dtypes[code]).tobytes())

    text = str(Metadata(metadata or {})).encode('UTF-8')
    if len(text) > 0xFFFF:
        raise FormatError("metadata block too large")
    chunks.append(metadata_length_struct.pack(len(text)))
    chunks.append(text)
    return b''.join(chunks)


class _Reader:
    def __init__(self, data: bytes):
        self.data = memoryview(data)
        self.offset = 0
        self.tensor = None

    def fail(self, message: str):
        raise FormatError(message, offset=self.offset, tensor=self.tensor)

    def take(self, size: int, what: str) -> memoryview:
        end = self.offset + size
        if end > len(self.data):
            self.fail(f"truncated {what}: need {size} bytes, {len(self.data) - self.offset} left")
        chunk = self.data[self.offset : end]
        self.offset = end
        return chunk

    def unpack(self, struct: Struct, what: str) -> tuple:
        try:
            return struct.unpack(self.take(struct.size, what))
        except StructError as e:
            self.fail(f"bad {what}: {e}")


def decode_checkpoint(data: bytes) -> Container:
    reader = _Reader(data)
    magic, version, count = reader.unpack(header_struct, "header")
    if magic != MAGIC:
        reader.offset = 0
        reader.fail(f"bad magic {bytes(magic)!r}")
    if version != VERSION:
        reader.offset = 4
        reader.fail(f"unsupported version {version}")

    tensors = {}
    for _ in range(count):
        (length,) = reader.unpack(name_length_struct, "tensor name length")
        try:
            name = str(reader.take(length, "tensor name"), 'UTF-8')
        except UnicodeDecodeError as e:
            reader.fail(f"tensor name is not UTF-8: {e}")
        reader.tensor = name
        if name in tensors:
            reader.fail("duplicate tensor name")
        code, rank = reader.unpack(tensor_struct, "tensor header")
        if code != MASK and code not in dtypes:
            reader.fail(f"unknown dtype code {code}")
        shape = tuple(reader.unpack(dim_struct, "dimension")[0] for _ in range(rank))
        elements = prod(shape)
        if code == MASK:
            payload = reader.take((elements + 7) // 8, "mask payload")
            bits = np.unpackbits(np.frombuffer(payload, dtype=np.uint8), count=elements, bitorder='little')
            array = bits.astype(bool).reshape(shape)
        else:
            dtype = dtypes[code]
            payload = reader.take(elements * dtype.itemsize, "payload")
            array = np.frombuffer(payload, dtype=dtype).reshape(shape).copy()
        tensors[name] = array
        reader.tensor = None

    (length,) = reader.unpack(metadata_length_struct, "metadata length")
    try:
        text = str(reader.take(length, "metadata"), 'UTF-8')
        metadata = Metadata.parse(text)
    except (UnicodeDecodeError, ValueError) as e:
        reader.fail(f"bad metadata: {e}")
    if reader.offset != len(reader.data):
        reader.fail(f"{len(reader.data) - reader.offset} trailing bytes")
    return Container(tensors, metadata)


def save_checkpoint(
    path: Union[Path, str], tensors: Mapping[str, np.ndarray], metadata: Optional[Mapping] = None
) -> int:
    """Write the container; returns the number of bytes written."""
    data = encode_checkpoint(tensors, metadata)
    Path(path).write_bytes(data)
    return len(data)


def load_checkpoint(path: Union[Path, str]) -> Container:
    return decode_checkpoint(Path(path).read_bytes())


__all__ = (
    'Container',
    'MAGIC',
    'VERSION',
    'decode_checkpoint',
    'dtype_code',
    'encode_checkpoint',
    'load_checkpoint',
    'save_checkpoint',
)
