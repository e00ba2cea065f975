"""Append-only inverted lists with a published-count array and doubling
expansion by background copy.

Protocol (single writer per list, lock-free readers):

* append: write the slot, then bump the published count.
* scan: read the count first, then the current slot array, and slice.
* expand: when a list is full, allocate a 2x array and copy the old contents
  on the copier thread.  Until the new array is installed, readers keep
  scanning the old one and new appends for that list are buffered.  After
  installation the buffered ids are written to the new array in order.

A reader that read the count before an installation and the array after it
still sees a valid prefix, because the new array holds a full copy of the old
one before it becomes reachable.  Old arrays are released when the last
reader drops its reference, which is the reclamation guarantee.
"""

from __future__ import annotations

import struct
import threading
from concurrent.futures import Future, ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .errors import SnapshotFormatError

INVERTED_MAGIC = b"JVSI"
INVERTED_VERSION = 1
DEFAULT_LIST_CAPACITY = 1024


class _Expansion:
    __slots__ = ("old", "new", "pending", "future")

    def __init__(self, old: np.ndarray, first: int):
        self.old = old
        self.new = np.empty(old.size * 2, dtype=np.int64)
        self.pending = [first]
        self.future: Future | None = None


class InvertedIndex:
    """``n_lists`` inverted lists of image indexes.

    ``background_copy=False`` performs expansions inline on the writer thread
    (useful for deterministic single-threaded tools).
    """

    def __init__(self, n_lists: int, initial_capacity: int = DEFAULT_LIST_CAPACITY,
                 background_copy: bool = True):
        if n_lists < 1:
            raise ValueError("n_lists must be positive")
        if initial_capacity < 1:
            raise ValueError("initial_capacity must be positive")
        self.n_lists = n_lists
        self.initial_capacity = initial_capacity
        self.background_copy = background_copy
        self._slots = [np.empty(initial_capacity, dtype=np.int64) for _ in range(n_lists)]
        # auxiliary position array: published element count per list
        self._counts = np.zeros(n_lists, dtype=np.int64)
        self._locks = [threading.Lock() for _ in range(n_lists)]
        self._expanding: dict[int, _Expansion] = {}
        self._copier: ThreadPoolExecutor | None = None
        self._copier_lock = threading.Lock()
        self.expansions = 0

    def _check(self, list_id: int) -> None:
        if not 0 <= list_id < self.n_lists:
            raise IndexError(f"list id {list_id} out of range [0, {self.n_lists})")

    def capacity(self, list_id: int) -> int:
        self._check(list_id)
        return self._slots[list_id].size

    def published(self, list_id: int) -> int:
        self._check(list_id)
        return int(self._counts[list_id])

    def __len__(self) -> int:
        return self.total_len()

    def total_len(self) -> int:
        return int(self._counts.sum())

    def append(self, list_id: int, image: int) -> None:
        self._check(list_id)
        with self._locks[list_id]:
            exp = self._expanding.get(list_id)
            if exp is not None:
                exp.pending.append(image)
                return
            arr = self._slots[list_id]
            count = int(self._counts[list_id])
            if count < arr.size:
                arr[count] = image
                self._counts[list_id] = count + 1
                return
            exp = _Expansion(arr, image)
            self._expanding[list_id] = exp
        if self.background_copy:
            exp.future = self._executor().submit(self._finish_expansion, list_id, exp)
        else:
            self._finish_expansion(list_id, exp)

    def _executor(self) -> ThreadPoolExecutor:
        with self._copier_lock:
            if self._copier is None:
                self._copier = ThreadPoolExecutor(1, thread_name_prefix="invlist-copy")
            return self._copier

    def _finish_expansion(self, list_id: int, exp: _Expansion) -> None:
        # the old array is full, so nothing writes to it while we copy
        exp.new[:exp.old.size] = exp.old
        with self._locks[list_id]:
            self._slots[list_id] = exp.new
            self.expansions += 1
            count = int(self._counts[list_id])
            for image in exp.pending:
                arr = self._slots[list_id]
                if count == arr.size:
                    grown = np.empty(arr.size * 2, dtype=np.int64)
                    grown[:count] = arr
                    self._slots[list_id] = arr = grown
                    self.expansions += 1
                arr[count] = image
                count += 1
                self._counts[list_id] = count
            del self._expanding[list_id]

    def sync(self, list_id: int | None = None) -> None:
        """Block until pending expansions (of one list, or all) are installed."""
        while True:
            if list_id is None:
                futures = [e.future for e in list(self._expanding.values())]
            else:
                e = self._expanding.get(list_id)
                futures = [e.future] if e is not None else []
            futures = [f for f in futures if f is not None]
            if not futures:
                return
            for f in futures:
                f.result()

    def scan(self, list_id: int) -> np.ndarray:
        """Snapshot of the published prefix of a list."""
        self._check(list_id)
        count = int(self._counts[list_id])
        arr = self._slots[list_id]
        return arr[:count].copy()

    def scan_many(self, list_ids) -> np.ndarray:
        parts = [self.scan(l) for l in list_ids]
        if len(parts) == 1:
            return parts[0]
        return np.concatenate(parts) if parts else np.empty(0, dtype=np.int64)

    def close(self) -> None:
        self.sync()
        with self._copier_lock:
            if self._copier is not None:
                self._copier.shutdown(wait=True)
                self._copier = None

    def save(self, path) -> None:
        self.sync()
        with open(path, "wb") as fh:
            fh.write(INVERTED_MAGIC + bytes([INVERTED_VERSION]) + struct.pack(">I", self.n_lists))
            for l in range(self.n_lists):
                ids = self.scan(l)
                fh.write(struct.pack(">Q", ids.size))
                fh.write(ids.astype(">u8").tobytes())

    @classmethod
    def load(cls, path, initial_capacity: int = DEFAULT_LIST_CAPACITY,
             background_copy: bool = True) -> "InvertedIndex":
        data = Path(path).read_bytes()
        if data[:4] != INVERTED_MAGIC:
            raise SnapshotFormatError("bad inverted-index magic", 0)
        if len(data) < 9:
            raise SnapshotFormatError("truncated inverted-index header", len(data))
        if data[4] != INVERTED_VERSION:
            raise SnapshotFormatError(f"unsupported inverted-index version {data[4]}", 4)
        (n,) = struct.unpack_from(">I", data, 5)
        if n < 1:
            raise SnapshotFormatError("inverted index must have at least one list", 5)
        inv = cls(n, initial_capacity, background_copy)
        pos = 9
        for l in range(n):
            if pos + 8 > len(data):
                raise SnapshotFormatError("truncated list header", pos)
            (count,) = struct.unpack_from(">Q", data, pos)
            pos += 8
            if pos + 8 * count > len(data):
                raise SnapshotFormatError("truncated list body", pos)
            ids = np.frombuffer(data, dtype=">u8", count=count, offset=pos).astype(np.int64)
            pos += 8 * count
            cap = initial_capacity
            while cap < count:
                cap *= 2
            arr = np.empty(cap, dtype=np.int64)
            arr[:count] = ids
            inv._slots[l] = arr
            inv._counts[l] = count
        if pos != len(data):
            raise SnapshotFormatError("trailing bytes after last list", pos)
        return inv
