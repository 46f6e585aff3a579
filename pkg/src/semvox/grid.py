"""Sparse voxel grid: payload wiring, point access, snapshots.

A SparseGrid binds a backend GridCore to one payload kind:

* tsdf   -- distance (f64, background +truncation) and weight (f64, 0)
* closed -- per-class observation counts (num_classes,)
* open   -- feature mean and per-dimension scale (feature_dim,) each

Reads outside allocated space return backgrounds and never allocate.
Concurrent reads are safe; writes require external exclusion.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from . import backend as backend_mod
from .config import ClosedSetConfig, OpenSetConfig, TreeConfig
from .coords import check_coords
from .errors import ConfigError, FormatError, PayloadMismatchError

KIND_TSDF = 0
KIND_CLOSED = 1
KIND_OPEN = 2
KIND_NAMES = {KIND_TSDF: "tsdf", KIND_CLOSED: "closed", KIND_OPEN: "open"}

MAGIC = b"SLVG"
FORMAT_VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


@dataclass
class TsdfPayload:
    truncation: float

    @property
    def kind(self):
        return KIND_TSDF

    def field_spec(self):
        f8 = np.dtype(np.float64)
        return (0, 0), (f8, f8), (self.truncation, 0.0)


@dataclass
class ClosedPayload:
    cfg: ClosedSetConfig

    @property
    def kind(self):
        return KIND_CLOSED

    def field_spec(self):
        self.cfg.validate()
        dt = np.dtype(self.cfg.count_dtype)
        k = self.cfg.num_classes
        return (k,), (dt,), (np.zeros(k, dt),)


@dataclass
class OpenPayload:
    cfg: OpenSetConfig

    @property
    def kind(self):
        return KIND_OPEN

    def field_spec(self):
        self.cfg.validate()
        dt = np.dtype(self.cfg.state_dtype)
        l = self.cfg.feature_dim
        return (l, l), (dt, dt), (np.zeros(l, dt), np.full(l, self.cfg.prior_beta, dt))


@dataclass
class MemoryStats:
    leaf_count: int
    internal_count: int
    root_entries: int
    active_voxels: int
    resident_bytes: int


class SparseGrid:
    def __init__(self, voxel_size, payload, tree=None, backend=None):
        if voxel_size <= 0:
            raise ConfigError(f"voxel_size must be positive, got {voxel_size}")
        self.voxel_size = float(voxel_size)
        self.payload = payload
        self.tree = tree if tree is not None else TreeConfig()
        self.tree.validate()
        mod = backend if hasattr(backend, "GridCore") else backend_mod.get_backend(backend)
        self.backend = mod
        dims, dtypes, bgs = payload.field_spec()
        self.core = mod.GridCore(self.tree.leaf_log2, self.tree.internal_log2, dims, dtypes, bgs)

    # -- point access -------------------------------------------------------

    @property
    def kind(self):
        return self.payload.kind

    @property
    def kind_name(self):
        return KIND_NAMES[self.payload.kind]

    def _background_values(self):
        _, _, bgs = self.payload.field_spec()
        return tuple(np.copy(b) if isinstance(b, np.ndarray) else b for b in bgs)

    def get(self, coord):
        """Field values at one voxel; backgrounds if unobserved.  Never
        allocates."""
        i, j, k = (int(v) for v in coord)
        leaf, slot, active = self.core.probe_one(i, j, k)
        if not active:
            return self._background_values()
        return tuple(np.copy(f[leaf, slot]) for f in self.core.fields)

    def set(self, coord, values):
        """Overwrite one voxel's fields, allocating and activating it."""
        i, j, k = (int(v) for v in coord)
        leaf, slot = self.core.ensure_one(i, j, k)
        for f, v in zip(self.core.fields, values):
            f[leaf, slot] = v

    def get_or_insert(self, coord):
        """Like get, but allocates the voxel (background-filled) if absent."""
        i, j, k = (int(v) for v in coord)
        leaf, slot = self.core.ensure_one(i, j, k)
        return tuple(np.copy(f[leaf, slot]) for f in self.core.fields)

    def accessor(self):
        return Accessor(self)

    # -- bulk access ----------------------------------------------------------

    def set_many(self, coords, values):
        """Overwrite many voxels at once, allocating as needed.

        ``values`` is one array per field, leading dimension matching
        ``coords``.  Duplicate coords resolve to the last row given.
        """
        coords = check_coords(np.atleast_2d(coords))
        if len(values) != len(self.core.fields):
            raise PayloadMismatchError(
                "expected %d field arrays, got %d" % (len(self.core.fields), len(values)))
        leaf, slot = self.core.ensure_coords(coords)
        for f, v in zip(self.core.fields, values):
            f[leaf, slot] = v

    def active_coords(self):
        """(N, 3) int64 coords of active voxels, in deterministic
        leaf-allocation-then-slot order."""
        leaf, slot = self.core.active_slots()
        return self.core.slots_to_coords(leaf, slot)

    def active_values(self):
        """(coords (N,3), [field arrays (N, ...)]) in the same order as
        active_coords."""
        leaf, slot = self.core.active_slots()
        coords = self.core.slots_to_coords(leaf, slot)
        return coords, [np.copy(f[leaf, slot]) for f in self.core.fields]

    def iterate_active(self):
        """Yield (coord tuple, field value tuple) in deterministic order."""
        coords, vals = self.active_values()
        for r in range(coords.shape[0]):
            yield tuple(int(c) for c in coords[r]), tuple(v[r] for v in vals)

    def probe_many(self, coords):
        """Vectorized read.  Returns (values list, active mask); inactive rows
        hold backgrounds."""
        coords = check_coords(np.atleast_2d(coords))
        leaf, slot, active = self.core.probe_coords(coords)
        out = []
        _, _, bgs = self.payload.field_spec()
        for f, bg in zip(self.core.fields, bgs):
            trailing = f.shape[2:]
            vals = np.empty((coords.shape[0],) + trailing, f.dtype)
            vals[:] = bg
            if active.any():
                vals[active] = f[leaf[active], slot[active]]
            out.append(vals)
        return out, active

    # -- accounting -----------------------------------------------------------

    def memory_stats(self):
        c = self.core
        return MemoryStats(
            leaf_count=int(c.n_leaves),
            internal_count=int(c.n_internal),
            root_entries=len(c._root) if hasattr(c, "_root") else int(c.root_count()),
            active_voxels=int(c.active_count),
            resident_bytes=int(c.memory_bytes()),
        )

    def content_hash(self):
        """Order-independent digest of configuration plus voxel contents."""
        coords, vals = self.active_values()
        order = np.lexsort((coords[:, 2], coords[:, 1], coords[:, 0]))
        hs = hashlib.sha256()
        hs.update(MAGIC)
        hs.update(_params_block(self))
        hs.update(struct.pack("<dBB", self.voxel_size, self.tree.leaf_log2, self.tree.internal_log2))
        hs.update(np.ascontiguousarray(coords[order]).tobytes())
        for v in vals:
            hs.update(np.ascontiguousarray(v[order]).tobytes())
        return hs.hexdigest()


class Accessor:
    """Read/write cursor that caches leaf lookups.

    Repeated access within one leaf touches the root hash at most once, so a
    coherent scan of n voxels costs O(n / leaf_volume) root probes.  One
    accessor must not be shared between concurrent writers.
    """

    def __init__(self, grid: SparseGrid):
        self.grid = grid
        self._cache: dict[tuple[int, int, int], int] = {}

    def _leaf_key(self, i, j, k):
        ll = self.grid.tree.leaf_log2
        return (i >> ll, j >> ll, k >> ll)

    def _slot(self, i, j, k):
        ll = self.grid.tree.leaf_log2
        m = (1 << ll) - 1
        return ((i & m) << (2 * ll)) | ((j & m) << ll) | (k & m)

    def get(self, coord):
        i, j, k = (int(v) for v in coord)
        core = self.grid.core
        key = self._leaf_key(i, j, k)
        leaf = self._cache.get(key, -2)
        if leaf == -2:
            leaf, slot, active = core.probe_one(i, j, k)
            self._cache[key] = leaf
            if leaf < 0 or not active:
                return self.grid._background_values()
            return tuple(np.copy(f[leaf, slot]) for f in core.fields)
        if leaf < 0:
            return self.grid._background_values()
        slot = self._slot(i, j, k)
        word = int(core.leaf_mask[leaf, slot >> 6])
        if not (word >> (slot & 63)) & 1:
            return self.grid._background_values()
        return tuple(np.copy(f[leaf, slot]) for f in core.fields)

    def set(self, coord, values):
        i, j, k = (int(v) for v in coord)
        core = self.grid.core
        key = self._leaf_key(i, j, k)
        leaf = self._cache.get(key, -2)
        if leaf is None or leaf < 0:
            leaf, slot = core.ensure_one(i, j, k)
            self._cache[key] = leaf
        else:
            slot = self._slot(i, j, k)
            core.activate_slot(leaf, slot)
        for f, v in zip(core.fields, values):
            f[leaf, slot] = v


# -- snapshots ----------------------------------------------------------------


def _params_block(grid: SparseGrid) -> bytes:
    p = grid.payload
    if p.kind == KIND_TSDF:
        return struct.pack("<d", p.truncation)
    if p.kind == KIND_CLOSED:
        cfg = p.cfg
        mode = 0 if cfg.fusion == "bayes" else 1
        code = _DTYPE_CODES[np.dtype(cfg.count_dtype)]
        return struct.pack("<IdBB", cfg.num_classes, cfg.prior_alpha, mode, code)
    cfg = p.cfg
    code = _DTYPE_CODES[np.dtype(cfg.state_dtype)]
    return struct.pack(
        "<IddddB",
        cfg.feature_dim,
        cfg.prior_beta,
        cfg.lambda_floor,
        cfg.confidence_threshold,
        cfg.temperature,
        code,
    )


def _payload_from_block(kind, buf, offset):
    if kind == KIND_TSDF:
        (trunc,) = struct.unpack_from("<d", buf, offset)
        return TsdfPayload(trunc), offset + 8
    if kind == KIND_CLOSED:
        k, alpha, mode, code = struct.unpack_from("<IdBB", buf, offset)
        cfg = ClosedSetConfig(
            num_classes=k,
            prior_alpha=alpha,
            fusion="bayes" if mode == 0 else "last_wins",
            count_dtype=_CODE_DTYPES[code].name,
        )
        return ClosedPayload(cfg), offset + struct.calcsize("<IdBB")
    if kind == KIND_OPEN:
        l, beta, floor, conf, temp, code = struct.unpack_from("<IddddB", buf, offset)
        cfg = OpenSetConfig(
            feature_dim=l,
            prior_beta=beta,
            lambda_floor=floor,
            confidence_threshold=conf,
            temperature=temp,
            state_dtype=_CODE_DTYPES[code].name,
        )
        return OpenPayload(cfg), offset + struct.calcsize("<IddddB")
    raise FormatError(f"unknown payload kind {kind}")


def write_grid_block(fh, grid: SparseGrid) -> None:
    core = grid.core
    fh.write(MAGIC)
    fh.write(
        struct.pack(
            "<IdBBBQ",
            FORMAT_VERSION,
            grid.voxel_size,
            grid.tree.leaf_log2,
            grid.tree.internal_log2,
            grid.kind,
            int(core.active_count),
        )
    )
    fh.write(_params_block(grid))
    nl = int(core.n_leaves)
    fh.write(struct.pack("<Q", nl))
    if nl == 0:
        return
    leaf_all, slot_all = core.active_slots()
    counts = np.bincount(leaf_all, minlength=nl)
    offsets = np.zeros(nl + 1, np.int64)
    np.cumsum(counts, out=offsets[1:])
    ll = grid.tree.leaf_log2
    for leaf in range(nl):
        origin = core.leaf_coord[leaf].astype(np.int64) << ll
        fh.write(struct.pack("<iii", int(origin[0]), int(origin[1]), int(origin[2])))
        fh.write(np.ascontiguousarray(core.leaf_mask[leaf]).tobytes())
        sl = slot_all[offsets[leaf] : offsets[leaf + 1]]
        for f in core.fields:
            fh.write(np.ascontiguousarray(f[leaf, sl]).tobytes())


def read_grid_block(fh, backend=None):
    head = fh.read(4)
    if head == b"":
        return None
    if head != MAGIC:
        raise FormatError(f"bad grid magic {head!r}")
    fixed = fh.read(struct.calcsize("<IdBBBQ"))
    version, voxel_size, ll, il, kind, active_count = struct.unpack("<IdBBBQ", fixed)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported grid format version {version}")
    sizes = {KIND_TSDF: 8, KIND_CLOSED: struct.calcsize("<IdBB"), KIND_OPEN: struct.calcsize("<IddddB")}
    if kind not in sizes:
        raise FormatError(f"unknown payload kind {kind}")
    pbuf = fh.read(sizes[kind])
    payload, _ = _payload_from_block(kind, pbuf, 0)
    (nl,) = struct.unpack("<Q", fh.read(8))

    grid = SparseGrid(voxel_size, payload, TreeConfig(ll, il), backend=backend)
    core = grid.core
    mask_bytes = core.mask_words * 8
    leaf_side = 1 << ll
    leaf_volume = leaf_side ** 3

    all_coords = []
    all_values = [[] for _ in core.fields]
    for _ in range(nl):
        ox, oy, oz = struct.unpack("<iii", fh.read(12))
        mask = np.frombuffer(fh.read(mask_bytes), np.uint64)
        bits = np.unpackbits(mask.view(np.uint8), bitorder="little")[:leaf_volume]
        slots = np.flatnonzero(bits).astype(np.int64)
        local = np.stack(
            [(slots >> (2 * ll)) & (leaf_side - 1), (slots >> ll) & (leaf_side - 1), slots & (leaf_side - 1)],
            axis=1,
        )
        all_coords.append(local + np.array([ox, oy, oz], np.int64))
        for fi, f in enumerate(core.fields):
            trailing = f.shape[2:]
            count = slots.shape[0] * int(np.prod(trailing, dtype=np.int64)) if trailing else slots.shape[0]
            raw = np.frombuffer(fh.read(count * f.dtype.itemsize), f.dtype)
            all_values[fi].append(raw.reshape((slots.shape[0],) + trailing))
    if all_coords:
        coords = np.concatenate(all_coords)
        leaf, slot = core.ensure_coords(coords)
        for fi, f in enumerate(core.fields):
            f[leaf, slot] = np.concatenate(all_values[fi])
    if int(core.active_count) != active_count:
        raise FormatError(
            f"grid block active count mismatch: header {active_count}, decoded {core.active_count}"
        )
    return grid


def save_grids(path, grids) -> None:
    with open(path, "wb") as fh:
        for g in grids:
            write_grid_block(fh, g)


def load_grids(path, backend=None):
    out = []
    with open(path, "rb") as fh:
        while True:
            g = read_grid_block(fh, backend=backend)
            if g is None:
                break
            out.append(g)
    if not out:
        raise FormatError(f"{path}: no grid blocks found")
    return out


def grids_equal(a: SparseGrid, b: SparseGrid, exact=True, rtol=0.0, atol=0.0) -> bool:
    if a.kind != b.kind or a.voxel_size != b.voxel_size:
        return False
    ca, va = a.active_values()
    cb, vb = b.active_values()
    if ca.shape != cb.shape:
        return False
    oa = np.lexsort((ca[:, 2], ca[:, 1], ca[:, 0]))
    ob = np.lexsort((cb[:, 2], cb[:, 1], cb[:, 0]))
    if not np.array_equal(ca[oa], cb[ob]):
        return False
    for fa, fb in zip(va, vb):
        if exact:
            if not np.array_equal(fa[oa], fb[ob]):
                return False
        else:
            if not np.allclose(fa[oa], fb[ob], rtol=rtol, atol=atol):
                return False
    return True
