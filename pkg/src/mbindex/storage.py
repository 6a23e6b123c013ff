"""Fixed-size page files, the LRU buffer pool and page-I/O counters.

Every cost figure reported by the package is a count of page reads and page
writes that went through a :class:`BufferPool`. A read is counted on a buffer
miss; a write is counted when a dirty page is evicted or explicitly flushed.

File formats (all integers little-endian):

* dataset file -- 28-byte header ``"MBID", version u32, d u32, N u64,
  page_size u32, flags u32`` (flag bit 0: ids present), followed by the data
  pages.
* data page -- ``count u32`` then ``count`` packed records (``d`` float64
  coordinates, then a uint64 id when ids are present), zero padded.
* index file -- 28-byte header ``"MBIX", version u32, d u32, page_size u32,
  flags u32, C_L u32, C_B u32``, then pages (data pages and node pages), then
  a 32-byte trailer ``"MBIT", root page u64, root slot u32, height u32,
  N u64, method u32``.
* node page -- ``nslots u32, nentries u32``, ``nentries`` branch entries
  (``lo`` and ``hi`` as ``d`` float64 each, then a u64 child reference) and
  finally one u16 entry count per slot. Several index nodes may share a page
  (one slot each).
"""
from __future__ import annotations

import itertools
import os
import struct
from collections import OrderedDict
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import check_dim, record_dtype

VERSION = 1
DEFAULT_PAGE_SIZE = 4096

DATA_HEADER = 4
NODE_HEADER = 8
SLOT_BYTES = 2
REF_BYTES = 8

DATASET_MAGIC = b"MBID"
INDEX_MAGIC = b"MBIX"
TRAILER_MAGIC = b"MBIT"
_DATASET_HDR = struct.Struct("<4sIIQII")
_INDEX_HDR = struct.Struct("<4sIIIIII")
_TRAILER = struct.Struct("<4sQIIQI")

FLAG_IDS = 1


class StorageError(IOError):
    pass


class BufferFullError(RuntimeError):
    """Raised when a page must be pinned but every frame is already pinned."""


def point_bytes(d: int, with_ids: bool = True) -> int:
    return 8 * d + (8 if with_ids else 0)


def branch_entry_bytes(d: int) -> int:
    # MBB (2*d floats) + child reference + that entry's share of the slot directory
    return 16 * d + REF_BYTES + SLOT_BYTES


def leaf_capacity(page_size: int, d: int, with_ids: bool = True) -> int:
    return (page_size - DATA_HEADER) // point_bytes(d, with_ids)


def branch_capacity(page_size: int, d: int) -> int:
    return (page_size - NODE_HEADER) // branch_entry_bytes(d)


def resolve_capacities(page_size: int, d: int, leaf_cap=None, branch_cap=None):
    """Derived ``(C_L, C_B)``; explicit overrides must still fit in one page."""
    cl_max = leaf_capacity(page_size, d)
    cb_max = branch_capacity(page_size, d)
    cl = cl_max if leaf_cap is None else int(leaf_cap)
    cb = cb_max if branch_cap is None else int(branch_cap)
    if not 1 <= cl <= cl_max:
        raise ValueError(f"leaf capacity {cl} does not fit a {page_size}-byte page (max {cl_max})")
    if not 2 <= cb <= cb_max:
        raise ValueError(f"branch capacity {cb} must be in [2, {cb_max}] for {page_size}-byte pages")
    return cl, cb


@dataclass(frozen=True)
class IoStats:
    page_reads: int = 0
    page_writes: int = 0

    @property
    def total(self) -> int:
        return self.page_reads + self.page_writes

    def __sub__(self, other: "IoStats") -> "IoStats":
        return IoStats(self.page_reads - other.page_reads, self.page_writes - other.page_writes)

    def __add__(self, other: "IoStats") -> "IoStats":
        return IoStats(self.page_reads + other.page_reads, self.page_writes + other.page_writes)


class PageFile:
    """Array of equally sized pages behind an optional fixed header.

    With ``path=None`` the pages live in memory, which keeps tests fast; the
    byte layout is the same either way. Physical reads and writes here are
    *not* counted -- only :class:`BufferPool` counts I/O.
    """

    _uids = itertools.count()

    def __init__(self, path=None, page_size: int = DEFAULT_PAGE_SIZE, header_size: int = 0,
                 trailer_size: int = 0, mode: str = "w"):
        if page_size < 64:
            raise ValueError("page_size must be at least 64 bytes")
        self.uid = next(PageFile._uids)
        self.path = None if path is None else os.fspath(path)
        self.page_size = int(page_size)
        self.header_size = int(header_size)
        self._free: list[int] = []
        self._fh = None
        self._mem: Optional[bytearray] = None
        if self.path is None:
            self._mem = bytearray(self.header_size)
            self.num_pages = 0
        elif mode == "w":
            self._fh = open(self.path, "w+b")
            # unbuffered: all page I/O goes through pread/pwrite on the fd
            os.ftruncate(self._fh.fileno(), self.header_size)
            self.num_pages = 0
        elif mode in ("r", "r+"):
            self._fh = open(self.path, "rb" if mode == "r" else "r+b")
            size = os.fstat(self._fh.fileno()).st_size
            body = size - self.header_size - trailer_size
            if body < 0 or body % self.page_size:
                raise StorageError(f"{self.path}: size {size} is not header + whole pages")
            self.num_pages = body // self.page_size
        else:
            raise ValueError(f"unknown mode {mode!r}")

    def _offset(self, pid: int) -> int:
        return self.header_size + pid * self.page_size

    def _check(self, pid: int):
        if not 0 <= pid < self.num_pages:
            raise IndexError(f"page id {pid} out of range [0, {self.num_pages})")

    def read(self, pid: int) -> bytes:
        self._check(pid)
        off = self._offset(pid)
        if self._mem is not None:
            return bytes(self._mem[off:off + self.page_size])
        data = os.pread(self._fh.fileno(), self.page_size, off)
        if len(data) != self.page_size:
            raise StorageError(f"short read on page {pid}")
        return data

    def write(self, pid: int, data) -> None:
        self._check(pid)
        if len(data) != self.page_size:
            raise ValueError(f"page payload must be exactly {self.page_size} bytes")
        off = self._offset(pid)
        if self._mem is not None:
            self._mem[off:off + self.page_size] = data
        else:
            os.pwrite(self._fh.fileno(), data, off)

    def allocate(self) -> int:
        """Materialize a zeroed page; freed ids are reused first."""
        if self._free:
            pid = self._free.pop()
            self.write(pid, bytes(self.page_size))
            return pid
        pid = self.num_pages
        self.num_pages += 1
        if self._mem is not None:
            self._mem.extend(bytes(self.page_size))
        else:
            os.ftruncate(self._fh.fileno(), self._offset(self.num_pages))
        return pid

    def free(self, pid: int) -> None:
        self._check(pid)
        self._free.append(pid)

    @property
    def live_pages(self) -> int:
        return self.num_pages - len(self._free)

    def read_header(self) -> bytes:
        if self._mem is not None:
            return bytes(self._mem[:self.header_size])
        return os.pread(self._fh.fileno(), self.header_size, 0)

    def write_header(self, data: bytes) -> None:
        if len(data) != self.header_size:
            raise ValueError("header size mismatch")
        if self._mem is not None:
            self._mem[:self.header_size] = data
        else:
            os.pwrite(self._fh.fileno(), data, 0)

    def write_trailer(self, data: bytes) -> None:
        off = self._offset(self.num_pages)
        if self._mem is not None:
            del self._mem[off:]
            self._mem.extend(data)
        else:
            os.pwrite(self._fh.fileno(), data, off)
            os.ftruncate(self._fh.fileno(), off + len(data))

    def read_trailer(self, size: int) -> bytes:
        off = self._offset(self.num_pages)
        if self._mem is not None:
            return bytes(self._mem[off:off + size])
        return os.pread(self._fh.fileno(), size, off)

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def __repr__(self):
        return f"PageFile({self.path or '<memory>'}, pages={self.num_pages}, page_size={self.page_size})"


class _Frame:
    __slots__ = ("file", "pid", "data", "dirty", "pins")

    def __init__(self, file, pid, data, dirty):
        self.file = file
        self.pid = pid
        self.data = data
        self.dirty = dirty
        self.pins = 0


class BufferPool:
    """LRU page cache of ``capacity`` frames shared by any number of files.

    Pinned frames are never evicted. When every frame is pinned, unpinned
    reads and writes bypass the cache (and are still counted); pinning in that
    state raises :class:`BufferFullError`.
    """

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("buffer capacity must be at least one page")
        self.capacity = int(capacity)
        self._lru: OrderedDict = OrderedDict()  # unpinned frames, LRU first
        self._pinned: dict = {}
        self.reads = 0
        self.writes = 0
        self.hits = 0

    # -- bookkeeping -----------------------------------------------------
    @property
    def pinned_count(self) -> int:
        return len(self._pinned)

    @property
    def resident_count(self) -> int:
        return len(self._lru) + len(self._pinned)

    @property
    def free_frames(self) -> int:
        """Frames that can be claimed without evicting a pinned page."""
        return self.capacity - len(self._pinned)

    def is_resident(self, file: PageFile, pid: int) -> bool:
        key = (file.uid, pid)
        return key in self._lru or key in self._pinned

    def io_stats(self) -> IoStats:
        return IoStats(self.reads, self.writes)

    def _lookup(self, key):
        fr = self._pinned.get(key)
        if fr is not None:
            return fr
        fr = self._lru.get(key)
        if fr is not None:
            self._lru.move_to_end(key)
        return fr

    def _evict_one(self) -> bool:
        if not self._lru:
            return False
        _, fr = self._lru.popitem(last=False)
        if fr.dirty:
            fr.file.write(fr.pid, fr.data)
            self.writes += 1
        return True

    def _make_room(self) -> bool:
        while self.resident_count >= self.capacity:
            if not self._evict_one():
                return False
        return True

    def _install(self, key, fr, pin: bool):
        if pin:
            fr.pins = 1
            self._pinned[key] = fr
        else:
            self._lru[key] = fr

    # -- page operations -------------------------------------------------
    def read_page(self, file: PageFile, pid: int, pin: bool = False) -> bytes:
        key = (file.uid, pid)
        fr = self._lookup(key)
        if fr is not None:
            self.hits += 1
            if pin:
                self.pin(file, pid)
            return fr.data
        data = file.read(pid)
        self.reads += 1
        if not self._make_room():
            if pin:
                raise BufferFullError("all buffer frames are pinned")
            return data
        self._install(key, _Frame(file, pid, data, False), pin)
        return data

    def write_page(self, file: PageFile, pid: int, data, pin: bool = False) -> None:
        """Replace a page's content in the buffer (write-back; no read is counted)."""
        if len(data) != file.page_size:
            raise ValueError("page payload size mismatch")
        key = (file.uid, pid)
        fr = self._lookup(key)
        if fr is not None:
            fr.data = bytes(data)
            fr.dirty = True
            if pin:
                self.pin(file, pid)
            return
        if not self._make_room():
            if pin:
                raise BufferFullError("all buffer frames are pinned")
            file.write(pid, data)
            self.writes += 1
            return
        self._install(key, _Frame(file, pid, bytes(data), True), pin)

    def allocate_page(self, file: PageFile, pin: bool = False) -> int:
        """Append (or recycle) a zeroed page and make it resident."""
        if pin and self.free_frames <= 0:
            raise BufferFullError("all buffer frames are pinned")
        pid = file.allocate()
        if self._make_room():
            self._install((file.uid, pid), _Frame(file, pid, bytes(file.page_size), False), pin)
        return pid

    def pin(self, file: PageFile, pid: int) -> None:
        key = (file.uid, pid)
        fr = self._pinned.get(key)
        if fr is not None:
            fr.pins += 1
            return
        fr = self._lru.pop(key, None)
        if fr is None:
            raise KeyError(f"page {pid} is not resident")
        fr.pins = 1
        self._pinned[key] = fr

    def unpin(self, file: PageFile, pid: int) -> None:
        key = (file.uid, pid)
        fr = self._pinned.get(key)
        if fr is None:
            raise KeyError(f"page {pid} is not pinned")
        fr.pins -= 1
        if fr.pins == 0:
            del self._pinned[key]
            self._lru[key] = fr

    def flush_page(self, file: PageFile, pid: int) -> None:
        fr = self._lookup((file.uid, pid))
        if fr is not None and fr.dirty:
            file.write(pid, fr.data)
            fr.dirty = False
            self.writes += 1

    def discard(self, file: PageFile, pid: int) -> None:
        """Drop a page from the buffer without writing it back."""
        key = (file.uid, pid)
        if self._pinned.pop(key, None) is None:
            self._lru.pop(key, None)

    def flush_all(self, file: Optional[PageFile] = None) -> None:
        for fr in list(self._pinned.values()) + list(self._lru.values()):
            if fr.dirty and (file is None or fr.file is file):
                fr.file.write(fr.pid, fr.data)
                fr.dirty = False
                self.writes += 1

    def clear(self) -> None:
        """Flush and drop every unpinned frame (counters are kept)."""
        self.flush_all()
        self._lru.clear()

    def drop_file(self, file: PageFile) -> None:
        """Forget every frame of ``file`` without writing (for scratch files)."""
        for store in (self._lru, self._pinned):
            for key in [k for k in store if k[0] == file.uid]:
                del store[key]

    def __repr__(self):
        return (f"BufferPool(capacity={self.capacity}, resident={self.resident_count}, "
                f"pinned={self.pinned_count}, reads={self.reads}, writes={self.writes})")


# -- data pages ------------------------------------------------------------

def encode_data_page(block: np.ndarray, page_size: int) -> bytes:
    raw = block.tobytes()
    if DATA_HEADER + len(raw) > page_size:
        raise ValueError("block does not fit in one page")
    return struct.pack("<I", len(block)) + raw + bytes(page_size - DATA_HEADER - len(raw))


def decode_data_page(data, dtype: np.dtype) -> np.ndarray:
    (n,) = struct.unpack_from("<I", data, 0)
    return np.frombuffer(data, dtype=dtype, count=n, offset=DATA_HEADER)


class Dataset:
    """An opened dataset file: header fields plus page decoding."""

    def __init__(self, file: PageFile, d: int, n: int, with_ids: bool):
        self.file = file
        self.d = d
        self.n = n
        self.with_ids = with_ids
        self.page_size = file.page_size
        self.dtype = record_dtype(d, with_ids)
        self.capacity = leaf_capacity(self.page_size, d, with_ids)

    @property
    def num_pages(self) -> int:
        return self.file.num_pages

    def decode(self, pid: int, data) -> np.ndarray:
        """Records of page ``pid`` as an id-carrying block.

        Files without ids get synthetic ones, ``pid * C_L + slot``, which are
        unique and stable for the file.
        """
        raw = decode_data_page(data, self.dtype)
        if self.with_ids:
            return raw
        blk = np.empty(len(raw), dtype=record_dtype(self.d))
        blk["c"] = raw["c"]
        blk["id"] = np.arange(len(raw), dtype=np.uint64) + np.uint64(pid * self.capacity)
        return blk

    def read_block(self, pool: BufferPool, pid: int, pin: bool = False) -> np.ndarray:
        return self.decode(pid, pool.read_page(self.file, pid, pin=pin))

    def close(self):
        self.file.close()


def create_dataset(path, coords: np.ndarray, ids=None, page_size: int = DEFAULT_PAGE_SIZE,
                   leaf_cap: Optional[int] = None, pool: Optional[BufferPool] = None) -> Dataset:
    """Write points into a new dataset file, ``C_L`` points per page.

    When ``pool`` is given the page writes go through it (and are counted).
    """
    coords = np.ascontiguousarray(coords, dtype=np.float64)
    if coords.ndim != 2:
        raise ValueError("coords must be (n, d)")
    n, d = coords.shape
    check_dim(d)
    if n < 1:
        raise ValueError("a dataset needs at least one point")
    if not np.all(np.isfinite(coords)):
        raise ValueError("coordinates must be finite")
    with_ids = ids is not None
    cap = leaf_capacity(page_size, d, with_ids)
    if leaf_cap is not None:
        if not 1 <= leaf_cap <= cap:
            raise ValueError(f"leaf capacity {leaf_cap} does not fit the page")
        cap = int(leaf_cap)
    f = PageFile(path, page_size, header_size=_DATASET_HDR.size)
    f.write_header(_DATASET_HDR.pack(DATASET_MAGIC, VERSION, d, n, page_size, FLAG_IDS if with_ids else 0))
    rec = np.empty(n, dtype=record_dtype(d, with_ids))
    rec["c"] = coords
    if with_ids:
        rec["id"] = np.asarray(ids, dtype=np.uint64)
    for start in range(0, n, cap):
        page = encode_data_page(rec[start:start + cap], page_size)
        if pool is None:
            pid = f.allocate()
            f.write(pid, page)
        else:
            pid = pool.allocate_page(f)
            pool.write_page(f, pid, page)
    if pool is not None:
        pool.flush_all(f)
    return Dataset(f, d, n, with_ids)


class DatasetWriter:
    """Appends records to a new dataset file page by page through a pool.

    The header (which records ``N``) is written by :meth:`close`.
    """

    def __init__(self, path, d: int, page_size: int, pool: BufferPool, with_ids: bool = True):
        self.file = PageFile(path, page_size, header_size=_DATASET_HDR.size)
        self.d = d
        self.pool = pool
        self.with_ids = with_ids
        self.dtype = record_dtype(d, with_ids)
        self.cap = leaf_capacity(page_size, d, with_ids)
        self.buf = np.empty(self.cap, dtype=self.dtype)
        self.fill = 0
        self.n = 0

    def append(self, blk: np.ndarray) -> None:
        pos = 0
        while pos < len(blk):
            take = min(self.cap - self.fill, len(blk) - pos)
            part = blk[pos:pos + take]
            self.buf["c"][self.fill:self.fill + take] = part["c"]
            if self.with_ids:
                self.buf["id"][self.fill:self.fill + take] = part["id"]
            self.fill += take
            pos += take
            if self.fill == self.cap:
                self._emit()

    def _emit(self) -> None:
        pid = self.pool.allocate_page(self.file)
        self.pool.write_page(self.file, pid, encode_data_page(self.buf[:self.fill], self.file.page_size))
        self.n += self.fill
        self.fill = 0

    def close(self) -> Dataset:
        if self.fill:
            self._emit()
        self.pool.flush_all(self.file)
        self.file.write_header(_DATASET_HDR.pack(DATASET_MAGIC, VERSION, self.d, self.n, self.file.page_size,
                                                 FLAG_IDS if self.with_ids else 0))
        return Dataset(self.file, self.d, self.n, self.with_ids)


def open_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        hdr = fh.read(_DATASET_HDR.size)
    if len(hdr) != _DATASET_HDR.size:
        raise StorageError(f"{path}: truncated header")
    magic, version, d, n, page_size, flags = _DATASET_HDR.unpack(hdr)
    if magic != DATASET_MAGIC:
        raise StorageError(f"{path}: not a dataset file (bad magic {magic!r})")
    if version != VERSION:
        raise StorageError(f"{path}: unsupported version {version}")
    f = PageFile(path, page_size, header_size=_DATASET_HDR.size, mode="r")
    return Dataset(f, d, n, bool(flags & FLAG_IDS))


def dataset_from_arrays(coords, ids=None, page_size: int = DEFAULT_PAGE_SIZE,
                        leaf_cap: Optional[int] = None) -> Dataset:
    """In-memory dataset (same byte layout as a file, no path)."""
    return create_dataset(None, coords, ids, page_size=page_size, leaf_cap=leaf_cap)


def read_all(dataset: Dataset) -> np.ndarray:
    """Every record of a dataset without touching any pool (test/oracle helper)."""
    blocks = [dataset.decode(pid, dataset.file.read(pid)) for pid in range(dataset.num_pages)]
    return np.concatenate(blocks) if blocks else np.empty(0, dtype=record_dtype(dataset.d))


# -- index file header / trailer ------------------------------------------

def index_header(d: int, page_size: int, with_ids: bool, cl: int, cb: int) -> bytes:
    return _INDEX_HDR.pack(INDEX_MAGIC, VERSION, d, page_size, FLAG_IDS if with_ids else 0, cl, cb)


def parse_index_header(data: bytes):
    magic, version, d, page_size, flags, cl, cb = _INDEX_HDR.unpack(data)
    if magic != INDEX_MAGIC:
        raise StorageError(f"not an index file (bad magic {magic!r})")
    if version != VERSION:
        raise StorageError(f"unsupported index version {version}")
    return d, page_size, bool(flags & FLAG_IDS), cl, cb


INDEX_HEADER_SIZE = _INDEX_HDR.size
TRAILER_SIZE = _TRAILER.size


def pack_trailer(root_pid: int, root_slot: int, height: int, n: int, method: int) -> bytes:
    return _TRAILER.pack(TRAILER_MAGIC, root_pid, root_slot, height, n, method)


def unpack_trailer(data: bytes):
    magic, root_pid, root_slot, height, n, method = _TRAILER.unpack(data)
    if magic != TRAILER_MAGIC:
        raise StorageError("index file has no trailer (build not finalized?)")
    return root_pid, root_slot, height, n, method


def new_index_file(path, d: int, page_size: int, with_ids: bool, cl: int, cb: int) -> PageFile:
    f = PageFile(path, page_size, header_size=INDEX_HEADER_SIZE)
    f.write_header(index_header(d, page_size, with_ids, cl, cb))
    return f


def read_index_file_header(path):
    with open(path, "rb") as fh:
        return parse_index_header(fh.read(INDEX_HEADER_SIZE))
