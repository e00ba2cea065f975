"""Per-image attribute storage: fixed-width numeric columns, an append-only
url buffer, and the validity bitmap.

One writer thread mutates; any number of reader threads read without locks.
Every mutation writes its payload first and publishes afterwards (entry count,
url reference, buffer length), so a reader never sees an unwritten region.
Growth copies into a larger array and installs it only after the copy, so a
reader holding the old array still sees consistent data.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .core import ProductAttributes
from .errors import SnapshotFormatError

FORWARD_MAGIC = b"JVSF"
FORWARD_VERSION = 1
NUMERIC_COLUMNS = ("product_id", "sales", "praise", "price")

_LEN_BITS = 24
_LEN_MASK = (1 << _LEN_BITS) - 1
MAX_URL_BYTES = _LEN_MASK
_U64_MAX = (1 << 64) - 1


def _pack_ref(offset: int, length: int) -> int:
    return (offset << _LEN_BITS) | length


def _unpack_ref(ref: int) -> tuple[int, int]:
    return ref >> _LEN_BITS, ref & _LEN_MASK


class AttributeBuffer:
    """Append-only byte buffer with a published length."""

    def __init__(self, capacity: int = 64 * 1024):
        self._data = bytearray(max(1, capacity))
        self._len = 0

    def __len__(self) -> int:
        return self._len

    @property
    def capacity(self) -> int:
        return len(self._data)

    def append(self, payload: bytes) -> int:
        """Write ``payload`` at the end and return its offset."""
        off = self._len
        end = off + len(payload)
        data = self._data
        if end > len(data):
            cap = len(data)
            while cap < end:
                cap *= 2
            grown = bytearray(cap)
            grown[:off] = data[:off]
            self._data = data = grown
        data[off:end] = payload
        self._len = end
        return off

    def read(self, offset: int, length: int) -> bytes:
        if offset + length > self._len:
            raise IndexError("reference beyond published buffer length")
        return bytes(self._data[offset:offset + length])


class ValidityBitmap:
    """One bit per image index, little-endian bit order within each byte."""

    def __init__(self, capacity_bits: int = 4096):
        self._bytes = np.zeros(max(1, (capacity_bits + 7) // 8), dtype=np.uint8)

    @property
    def capacity(self) -> int:
        return self._bytes.size * 8

    def ensure(self, n_bits: int) -> None:
        data = self._bytes
        if n_bits > data.size * 8:
            size = data.size
            while size * 8 < n_bits:
                size *= 2
            grown = np.zeros(size, dtype=np.uint8)
            grown[:data.size] = data
            self._bytes = grown

    def set(self, index: int, valid: bool) -> None:
        data = self._bytes
        byte, bit = divmod(index, 8)
        if valid:
            data[byte] |= np.uint8(1 << bit)
        else:
            data[byte] &= np.uint8(~(1 << bit) & 0xFF)

    def get(self, index: int) -> bool:
        byte, bit = divmod(index, 8)
        return bool((int(self._bytes[byte]) >> bit) & 1)

    def mask(self, indexes: np.ndarray) -> np.ndarray:
        """Vectorized validity lookup for an array of indexes."""
        data = self._bytes
        return ((data[indexes >> 3] >> (indexes & 7).astype(np.uint8)) & 1).astype(bool)

    def packed(self, n_bits: int) -> bytes:
        n_bytes = (n_bits + 7) // 8
        out = self._bytes[:n_bytes].copy()
        if n_bits % 8:
            out[-1] &= np.uint8((1 << (n_bits % 8)) - 1)
        return out.tobytes()


class ForwardIndex:
    """Sequentially numbered image records."""

    def __init__(self, capacity: int = 4096, buffer_capacity: int = 64 * 1024):
        capacity = max(1, capacity)
        self._cols = np.zeros((len(NUMERIC_COLUMNS), capacity), dtype=np.uint64)
        self._refs = np.zeros(capacity, dtype=np.uint64)
        self._count = 0
        self.buffer = AttributeBuffer(buffer_capacity)
        self.bitmap = ValidityBitmap(capacity)

    def __len__(self) -> int:
        return self._count

    @property
    def capacity(self) -> int:
        return self._refs.size

    def _check(self, index: int) -> None:
        if not 0 <= index < self._count:
            raise IndexError(f"image index {index} out of range [0, {self._count})")

    @staticmethod
    def _encode_url(url: str) -> bytes:
        raw = url.encode("utf-8")
        if not raw:
            raise ValueError("url must be non-empty")
        if len(raw) > MAX_URL_BYTES:
            raise ValueError("url too long")
        return raw

    def _grow(self) -> None:
        n = self._count
        cap = self._refs.size * 2
        cols = np.zeros((len(NUMERIC_COLUMNS), cap), dtype=np.uint64)
        cols[:, :n] = self._cols[:, :n]
        refs = np.zeros(cap, dtype=np.uint64)
        refs[:n] = self._refs[:n]
        self._cols, self._refs = cols, refs

    def append_entry(self, attrs: ProductAttributes) -> int:
        values = [attrs.product_id, attrs.sales, attrs.praise, attrs.price]
        if any(not 0 <= v <= _U64_MAX for v in values):
            raise ValueError("numeric attributes must fit in an unsigned 64-bit field")
        raw = self._encode_url(attrs.url)
        index = self._count
        if index == self._refs.size:
            self._grow()
        self.bitmap.ensure(index + 1)
        offset = self.buffer.append(raw)
        self._cols[:, index] = values
        self._refs[index] = _pack_ref(offset, len(raw))
        self.bitmap.set(index, True)
        self._count = index + 1
        return index

    def update_numeric(self, index: int, field: str, value: int) -> None:
        self._check(index)
        try:
            row = NUMERIC_COLUMNS.index(field)
        except ValueError:
            raise ValueError(f"unknown numeric field {field!r}") from None
        if not 0 <= value <= _U64_MAX:
            raise ValueError("value must fit in an unsigned 64-bit field")
        self._cols[row, index] = value

    def update_varlen(self, index: int, new_url: str) -> None:
        self._check(index)
        raw = self._encode_url(new_url)
        offset = self.buffer.append(raw)
        # single-word store: readers see either the old or the new reference
        self._refs[index] = _pack_ref(offset, len(raw))

    def set_validity(self, index: int, valid: bool) -> None:
        self._check(index)
        self.bitmap.set(index, valid)

    def is_valid(self, index: int) -> bool:
        self._check(index)
        return self.bitmap.get(index)

    def valid_mask(self, indexes: np.ndarray) -> np.ndarray:
        return self.bitmap.mask(indexes)

    def url(self, index: int) -> str:
        self._check(index)
        off, length = _unpack_ref(int(self._refs[index]))
        return self.buffer.read(off, length).decode("utf-8")

    def get_entry(self, index: int) -> ProductAttributes:
        self._check(index)
        cols = self._cols
        off, length = _unpack_ref(int(self._refs[index]))
        return ProductAttributes(
            product_id=int(cols[0, index]),
            sales=int(cols[1, index]),
            praise=int(cols[2, index]),
            price=int(cols[3, index]),
            url=self.buffer.read(off, length).decode("utf-8"),
        )

    def compacted(self) -> "ForwardIndex":
        """Copy holding only the live url bytes; stale url versions are dropped."""
        out = ForwardIndex(capacity=max(1, self._count), buffer_capacity=max(1, len(self.buffer)))
        for i in range(self._count):
            out.append_entry(self.get_entry(i))
            if not self.bitmap.get(i):
                out.bitmap.set(i, False)
        return out

    def save(self, path) -> None:
        n = self._count
        with open(path, "wb") as fh:
            fh.write(FORWARD_MAGIC + bytes([FORWARD_VERSION]) + struct.pack(">Q", n))
            for i in range(n):
                e = self.get_entry(i)
                raw = e.url.encode("utf-8")
                fh.write(struct.pack(">QQQQI", e.product_id, e.sales, e.praise, e.price, len(raw)))
                fh.write(raw)
            fh.write(self.bitmap.packed(n))

    @classmethod
    def load(cls, path) -> "ForwardIndex":
        data = Path(path).read_bytes()
        if data[:4] != FORWARD_MAGIC:
            raise SnapshotFormatError("bad forward-index magic", 0)
        if len(data) < 13:
            raise SnapshotFormatError("truncated forward-index header", len(data))
        if data[4] != FORWARD_VERSION:
            raise SnapshotFormatError(f"unsupported forward-index version {data[4]}", 4)
        (n,) = struct.unpack_from(">Q", data, 5)
        pos = 13
        fwd = cls(capacity=max(1, n))
        for _ in range(n):
            if pos + 36 > len(data):
                raise SnapshotFormatError("truncated forward entry", pos)
            pid, sales, praise, price, ulen = struct.unpack_from(">QQQQI", data, pos)
            pos += 36
            if pos + ulen > len(data):
                raise SnapshotFormatError("truncated url bytes", pos)
            try:
                url = data[pos:pos + ulen].decode("utf-8")
            except UnicodeDecodeError:
                raise SnapshotFormatError("url is not valid UTF-8", pos) from None
            pos += ulen
            try:
                fwd.append_entry(ProductAttributes(pid, sales, praise, price, url))
            except ValueError as exc:
                raise SnapshotFormatError(str(exc), pos - ulen) from None
        n_bytes = (n + 7) // 8
        if len(data) - pos != n_bytes:
            raise SnapshotFormatError(
                f"bitmap is {len(data) - pos} bytes, expected {n_bytes}", pos)
        bits = np.unpackbits(np.frombuffer(data, np.uint8, n_bytes, pos), bitorder="little")
        for i in np.flatnonzero(bits[:n] == 0):
            fwd.bitmap.set(int(i), False)
        return fwd
