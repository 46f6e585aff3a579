# distutils: language = c++
# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled grid core.

Same contract and arithmetic as _pycore: band emission order, the
(voxel, point, step) sort, sequential in-order per-voxel reduction, and
first-occurrence node allocation.  The final apply stage is literally shared
with the python backend (imported from _pycore), so fused values are
bit-identical across backends and across thread counts.  Built with
-ffp-contract=off to keep per-row float expressions equal to numpy's.
"""

import time

import numpy as np

cimport numpy as cnp
from cython.parallel cimport prange
from libc.math cimport INFINITY, fabs
from libc.math cimport floor as c_floor
from libc.math cimport fmax as c_fmax
from libc.stdint cimport int32_t, int64_t, uint8_t, uint64_t
from libc.stdlib cimport free, malloc
from libc.string cimport memset

from . import _pycore as _shared
from .errors import OutOfRangeError, SemvoxError

cnp.import_array()

BACKEND_NAME = "native"

COORD_LIMIT = 1 << 30
PACK_BITS = 21
STEP_BUDGET = 1 << 20

cdef enum:
    C_PACK_BITS = 21
    C_STEP_BUDGET = 1048576

cdef extern from *:
    """
    #include <stdint.h>
    #if defined(_OPENMP)
    #include <omp.h>
    #include <parallel/algorithm>
    static void svx_set_threads(int n) { omp_set_num_threads(n); }
    static void svx_sort_u128(unsigned __int128* p, long long n) { __gnu_parallel::sort(p, p + n); }
    #else
    #include <algorithm>
    static void svx_set_threads(int n) { (void)n; }
    static void svx_sort_u128(unsigned __int128* p, long long n) { std::sort(p, p + n); }
    #endif
    typedef unsigned __int128 svx_u128;
    static inline svx_u128 svx_pack128(uint64_t hi, uint64_t lo) {
        return (((unsigned __int128)hi) << 64) | lo;
    }
    static inline uint64_t svx_hi64(svx_u128 v) { return (uint64_t)(v >> 64); }
    static inline uint64_t svx_lo64(svx_u128 v) { return (uint64_t)v; }
    static inline uint64_t svx_mix3(int32_t a, int32_t b, int32_t c) {
        uint64_t h = (uint64_t)(uint32_t)a * 0x9E3779B185EBCA87ULL;
        h ^= ((uint64_t)(uint32_t)b + 0x165667B19E3779F9ULL) * 0xC2B2AE3D27D4EB4FULL;
        h ^= ((uint64_t)(uint32_t)c + 0xFF51AFD7ED558CCDULL) * 0x2545F4914F6CDD1DULL;
        h ^= h >> 29; h *= 0xBF58476D1CE4E5B9ULL; h ^= h >> 32;
        return h;
    }
    static inline int svx_ctz(uint64_t x) { return __builtin_ctzll(x); }
    """
    ctypedef unsigned long long svx_u128
    void svx_set_threads(int n) nogil
    void svx_sort_u128(svx_u128* p, long long n) nogil
    svx_u128 svx_pack128(uint64_t hi, uint64_t lo) nogil
    uint64_t svx_hi64(svx_u128 v) nogil
    uint64_t svx_lo64(svx_u128 v) nogil
    uint64_t svx_mix3(int32_t a, int32_t b, int32_t c) nogil
    int svx_ctz(uint64_t x) nogil


cdef class GridCore:
    """Sparse three-level voxel tree with struct-of-arrays payload pools.

    Root is an open-addressing hash table keyed by full int32 internal-node
    coords (a packed 64-bit key could not cover the +/-2^30 voxel range).
    """

    cdef public int leaf_log2, internal_log2, leaf_side, internal_side, mask_words
    cdef public long long leaf_volume, internal_volume
    cdef public tuple field_dims, field_dtypes
    cdef public list backgrounds, fields
    cdef public long long n_leaves, n_internal, active_count, root_probes

    cdef public object leaf_coord, leaf_mask, internal_coord, internal_children
    cdef object rt_keys, rt_vals, rt_used
    cdef long long rt_cap, rt_count

    cdef int32_t* p_leaf_coord
    cdef uint64_t* p_leaf_mask
    cdef int32_t* p_internal_coord
    cdef int32_t* p_internal_children
    cdef int32_t* p_rt_keys
    cdef int32_t* p_rt_vals
    cdef uint8_t* p_rt_used

    def __init__(self, leaf_log2, internal_log2, field_dims, field_dtypes, backgrounds):
        self.leaf_log2 = int(leaf_log2)
        self.internal_log2 = int(internal_log2)
        self.leaf_side = 1 << self.leaf_log2
        self.leaf_volume = self.leaf_side ** 3
        self.internal_side = 1 << self.internal_log2
        self.internal_volume = self.internal_side ** 3
        self.mask_words = <int>((self.leaf_volume + 63) // 64)

        self.field_dims = tuple(int(d) for d in field_dims)
        self.field_dtypes = tuple(np.dtype(d) for d in field_dtypes)
        self.backgrounds = [np.asarray(b) for b in backgrounds]
        if len(self.field_dims) != len(self.field_dtypes) or len(self.field_dims) != len(
            self.backgrounds
        ):
            raise SemvoxError("field spec lists must have equal length")

        cdef long long cap = 16
        self.leaf_coord = np.zeros((cap, 3), np.int32)
        self.leaf_mask = np.zeros((cap, self.mask_words), np.uint64)
        self.fields = []
        for dim, dt in zip(self.field_dims, self.field_dtypes):
            shape = (cap, self.leaf_volume) if dim == 0 else (cap, self.leaf_volume, dim)
            self.fields.append(np.zeros(shape, dt))
        self.internal_coord = np.zeros((8, 3), np.int32)
        self.internal_children = np.full((8, self.internal_volume), -1, np.int32)

        self.rt_cap = 64
        self.rt_count = 0
        self.rt_keys = np.zeros((self.rt_cap, 3), np.int32)
        self.rt_vals = np.zeros(self.rt_cap, np.int32)
        self.rt_used = np.zeros(self.rt_cap, np.uint8)

        self.n_leaves = 0
        self.n_internal = 0
        self.active_count = 0
        self.root_probes = 0
        self._refresh()

    cdef void _refresh(self):
        self.p_leaf_coord = <int32_t*> cnp.PyArray_DATA(<cnp.ndarray> self.leaf_coord)
        self.p_leaf_mask = <uint64_t*> cnp.PyArray_DATA(<cnp.ndarray> self.leaf_mask)
        self.p_internal_coord = <int32_t*> cnp.PyArray_DATA(<cnp.ndarray> self.internal_coord)
        self.p_internal_children = <int32_t*> cnp.PyArray_DATA(<cnp.ndarray> self.internal_children)
        self.p_rt_keys = <int32_t*> cnp.PyArray_DATA(<cnp.ndarray> self.rt_keys)
        self.p_rt_vals = <int32_t*> cnp.PyArray_DATA(<cnp.ndarray> self.rt_vals)
        self.p_rt_used = <uint8_t*> cnp.PyArray_DATA(<cnp.ndarray> self.rt_used)

    # -- capacity ---------------------------------------------------------

    cdef void _grow_leaves(self, long long need):
        cdef long long cap = (<object> self.leaf_coord).shape[0]
        if need <= cap:
            return
        cdef long long new = max(cap * 2, need)
        grown_coord = np.zeros((new, 3), np.int32)
        grown_coord[:cap] = self.leaf_coord
        self.leaf_coord = grown_coord
        grown_mask = np.zeros((new, self.mask_words), np.uint64)
        grown_mask[:cap] = self.leaf_mask
        self.leaf_mask = grown_mask
        for idx, (dim, dt) in enumerate(zip(self.field_dims, self.field_dtypes)):
            shape = (new, self.leaf_volume) if dim == 0 else (new, self.leaf_volume, dim)
            arr = np.zeros(shape, dt)
            arr[:cap] = self.fields[idx]
            self.fields[idx] = arr
        self._refresh()

    cdef void _grow_internal(self, long long need):
        cdef long long cap = (<object> self.internal_coord).shape[0]
        if need <= cap:
            return
        cdef long long new = max(cap * 2, need)
        grown_coord = np.zeros((new, 3), np.int32)
        grown_coord[:cap] = self.internal_coord
        self.internal_coord = grown_coord
        grown = np.full((new, self.internal_volume), -1, np.int32)
        grown[:cap] = self.internal_children
        self.internal_children = grown
        self._refresh()

    # -- root table -------------------------------------------------------

    cdef long long _root_find(self, int32_t a, int32_t b, int32_t c) nogil:
        self.root_probes += 1
        cdef uint64_t h = svx_mix3(a, b, c)
        cdef long long mask = self.rt_cap - 1
        cdef long long pos = <long long> (h & <uint64_t> mask)
        while True:
            if self.p_rt_used[pos] == 0:
                return -1
            if (self.p_rt_keys[3 * pos] == a and self.p_rt_keys[3 * pos + 1] == b
                    and self.p_rt_keys[3 * pos + 2] == c):
                return self.p_rt_vals[pos]
            pos = (pos + 1) & mask

    cdef void _root_grow(self):
        old_keys = np.array(self.rt_keys, copy=True)
        old_vals = np.array(self.rt_vals, copy=True)
        old_used = np.array(self.rt_used, copy=True)
        cdef long long old_cap = self.rt_cap
        self.rt_cap = old_cap * 2
        self.rt_keys = np.zeros((self.rt_cap, 3), np.int32)
        self.rt_vals = np.zeros(self.rt_cap, np.int32)
        self.rt_used = np.zeros(self.rt_cap, np.uint8)
        self._refresh()
        cdef const int32_t[:, ::1] kv = old_keys
        cdef const int32_t[::1] vv = old_vals
        cdef const uint8_t[::1] uv = old_used
        cdef long long i, pos, mask
        cdef uint64_t h
        mask = self.rt_cap - 1
        for i in range(old_cap):
            if uv[i]:
                h = svx_mix3(kv[i, 0], kv[i, 1], kv[i, 2])
                pos = <long long> (h & <uint64_t> mask)
                while self.p_rt_used[pos]:
                    pos = (pos + 1) & mask
                self.p_rt_keys[3 * pos] = kv[i, 0]
                self.p_rt_keys[3 * pos + 1] = kv[i, 1]
                self.p_rt_keys[3 * pos + 2] = kv[i, 2]
                self.p_rt_vals[pos] = vv[i]
                self.p_rt_used[pos] = 1

    cdef void _root_insert(self, int32_t a, int32_t b, int32_t c, int32_t val):
        if (self.rt_count + 1) * 10 >= self.rt_cap * 7:
            self._root_grow()
        cdef uint64_t h = svx_mix3(a, b, c)
        cdef long long mask = self.rt_cap - 1
        cdef long long pos = <long long> (h & <uint64_t> mask)
        while self.p_rt_used[pos]:
            pos = (pos + 1) & mask
        self.p_rt_keys[3 * pos] = a
        self.p_rt_keys[3 * pos + 1] = b
        self.p_rt_keys[3 * pos + 2] = c
        self.p_rt_vals[pos] = val
        self.p_rt_used[pos] = 1
        self.rt_count += 1

    def root_count(self):
        return self.rt_count

    # -- addressing -------------------------------------------------------

    cdef long long _resolve_leaf_alloc(self, int64_t lci, int64_t lcj, int64_t lck):
        cdef int il = self.internal_log2
        cdef int64_t im = self.internal_side - 1
        cdef int32_t ia = <int32_t> (lci >> il)
        cdef int32_t ib = <int32_t> (lcj >> il)
        cdef int32_t ic = <int32_t> (lck >> il)
        cdef long long node = self._root_find(ia, ib, ic)
        cdef long long child, leaf, w
        if node < 0:
            self._grow_internal(self.n_internal + 1)
            node = self.n_internal
            self.n_internal += 1
            self.p_internal_coord[3 * node] = ia
            self.p_internal_coord[3 * node + 1] = ib
            self.p_internal_coord[3 * node + 2] = ic
            memset(self.p_internal_children + node * self.internal_volume, 0xFF,
                   self.internal_volume * sizeof(int32_t))
            self._root_insert(ia, ib, ic, <int32_t> node)
        child = ((lci & im) << (2 * il)) | ((lcj & im) << il) | (lck & im)
        leaf = self.p_internal_children[node * self.internal_volume + child]
        if leaf < 0:
            self._grow_leaves(self.n_leaves + 1)
            leaf = self.n_leaves
            self.n_leaves += 1
            self.p_leaf_coord[3 * leaf] = <int32_t> lci
            self.p_leaf_coord[3 * leaf + 1] = <int32_t> lcj
            self.p_leaf_coord[3 * leaf + 2] = <int32_t> lck
            for w in range(self.mask_words):
                self.p_leaf_mask[leaf * self.mask_words + w] = 0
            for arr, bg in zip(self.fields, self.backgrounds):
                arr[leaf] = bg
            self.p_internal_children[node * self.internal_volume + child] = <int32_t> leaf
        return leaf

    def probe_one(self, i, j, k):
        """(leaf_idx, slot, active) for one voxel; never allocates."""
        cdef int64_t ci = i, cj = j, ck = k
        cdef int ll = self.leaf_log2, il = self.internal_log2
        cdef int64_t lm = self.leaf_side - 1, im = self.internal_side - 1
        cdef int64_t lci = ci >> ll, lcj = cj >> ll, lck = ck >> ll
        cdef int64_t slot = ((ci & lm) << (2 * ll)) | ((cj & lm) << ll) | (ck & lm)
        cdef long long node = self._root_find(
            <int32_t> (lci >> il), <int32_t> (lcj >> il), <int32_t> (lck >> il))
        if node < 0:
            return -1, slot, False
        cdef int64_t child = ((lci & im) << (2 * il)) | ((lcj & im) << il) | (lck & im)
        cdef long long leaf = self.p_internal_children[node * self.internal_volume + child]
        if leaf < 0:
            return -1, slot, False
        cdef uint64_t word = self.p_leaf_mask[leaf * self.mask_words + (slot >> 6)]
        return leaf, slot, bool((word >> (slot & 63)) & 1)

    def ensure_one(self, i, j, k):
        """(leaf, slot) for one voxel, allocating and activating as needed."""
        cdef int64_t ci = i, cj = j, ck = k
        if max(abs(i), abs(j), abs(k)) >= COORD_LIMIT:
            raise OutOfRangeError("voxel coordinate beyond +/-2^30 addressable range")
        cdef int ll = self.leaf_log2
        cdef int64_t lm = self.leaf_side - 1
        cdef long long leaf = self._resolve_leaf_alloc(ci >> ll, cj >> ll, ck >> ll)
        cdef int64_t slot = ((ci & lm) << (2 * ll)) | ((cj & lm) << ll) | (ck & lm)
        self.activate_slot(leaf, slot)
        return leaf, slot

    def activate_slot(self, leaf, slot):
        """Set a slot's active bit; returns True when newly activated."""
        cdef long long lf = leaf
        cdef int64_t sl = slot
        cdef uint64_t bit = (<uint64_t> 1) << (sl & 63)
        cdef long long idx = lf * self.mask_words + (sl >> 6)
        if self.p_leaf_mask[idx] & bit:
            return False
        self.p_leaf_mask[idx] = self.p_leaf_mask[idx] | bit
        self.active_count += 1
        return True

    def probe_coords(self, coords):
        """Vectorized probe: (leaf (N,), slot (N,), active (N,)).  leaf=-1
        where unallocated.  Never allocates."""
        coords = np.ascontiguousarray(coords, dtype=np.int64)
        cdef long long n = coords.shape[0]
        leaf_out = np.full(n, -1, np.int64)
        slot_out = np.empty(n, np.int64)
        active_out = np.zeros(n, np.uint8)
        if n == 0:
            return leaf_out, slot_out, active_out.view(np.bool_)
        cdef const int64_t[:, ::1] cv = coords
        cdef int64_t[::1] lv = leaf_out
        cdef int64_t[::1] sv = slot_out
        cdef uint8_t[::1] av = active_out
        cdef int ll = self.leaf_log2, il = self.internal_log2
        cdef int64_t lm = self.leaf_side - 1, im = self.internal_side - 1
        cdef int64_t lci, lcj, lck, slot, child
        cdef int32_t ia, ib, ic
        cdef int32_t ca = 0, cb = 0, cc = 0
        cdef bint have_cache = 0
        cdef long long node = -1, cnode = -1, leaf, i
        cdef uint64_t word
        with nogil:
            for i in range(n):
                lci = cv[i, 0] >> ll
                lcj = cv[i, 1] >> ll
                lck = cv[i, 2] >> ll
                slot = (((cv[i, 0] & lm) << (2 * ll)) | ((cv[i, 1] & lm) << ll)
                        | (cv[i, 2] & lm))
                sv[i] = slot
                ia = <int32_t> (lci >> il)
                ib = <int32_t> (lcj >> il)
                ic = <int32_t> (lck >> il)
                if have_cache and ia == ca and ib == cb and ic == cc:
                    node = cnode
                else:
                    node = self._root_find(ia, ib, ic)
                    ca = ia
                    cb = ib
                    cc = ic
                    cnode = node
                    have_cache = 1
                if node < 0:
                    continue
                child = ((lci & im) << (2 * il)) | ((lcj & im) << il) | (lck & im)
                leaf = self.p_internal_children[node * self.internal_volume + child]
                if leaf < 0:
                    continue
                lv[i] = leaf
                word = self.p_leaf_mask[leaf * self.mask_words + (slot >> 6)]
                av[i] = <uint8_t> ((word >> (slot & 63)) & 1)
        return leaf_out, slot_out, active_out.view(np.bool_)

    def ensure_coords(self, coords):
        """Vectorized ensure; allocates nodes in first-occurrence order of
        the input, matching the python backend."""
        coords = np.ascontiguousarray(coords, dtype=np.int64)
        cdef long long n = coords.shape[0]
        leaf_out = np.empty(n, np.int64)
        slot_out = np.empty(n, np.int64)
        if n == 0:
            return leaf_out, slot_out
        if np.abs(coords).max() >= COORD_LIMIT:
            raise OutOfRangeError("voxel coordinate beyond +/-2^30 addressable range")
        cdef const int64_t[:, ::1] cv = coords
        cdef int64_t[::1] lv = leaf_out
        cdef int64_t[::1] sv = slot_out
        cdef int ll = self.leaf_log2
        cdef int64_t lm = self.leaf_side - 1
        cdef int64_t lci, lcj, lck, slot
        cdef int64_t ca = 0, cb = 0, cc = 0
        cdef bint have_cache = 0
        cdef long long leaf = -1, cleaf = -1, i, idx
        cdef uint64_t bit
        for i in range(n):
            lci = cv[i, 0] >> ll
            lcj = cv[i, 1] >> ll
            lck = cv[i, 2] >> ll
            if have_cache and lci == ca and lcj == cb and lck == cc:
                leaf = cleaf
            else:
                leaf = self._resolve_leaf_alloc(lci, lcj, lck)
                ca = lci
                cb = lcj
                cc = lck
                cleaf = leaf
                have_cache = 1
            slot = (((cv[i, 0] & lm) << (2 * ll)) | ((cv[i, 1] & lm) << ll)
                    | (cv[i, 2] & lm))
            lv[i] = leaf
            sv[i] = slot
            bit = (<uint64_t> 1) << (slot & 63)
            idx = leaf * self.mask_words + (slot >> 6)
            if not (self.p_leaf_mask[idx] & bit):
                self.p_leaf_mask[idx] = self.p_leaf_mask[idx] | bit
                self.active_count += 1
        return leaf_out, slot_out

    # -- bulk views -------------------------------------------------------

    def active_slots(self):
        """(leaf_idx (N,), slot (N,)) of all active voxels, in leaf-allocation
        then slot order."""
        cdef long long total = self.active_count
        leaf_out = np.empty(total, np.int64)
        slot_out = np.empty(total, np.int64)
        cdef int64_t[::1] lv = leaf_out
        cdef int64_t[::1] sv = slot_out
        cdef long long lf, pos = 0
        cdef int w
        cdef uint64_t bits
        with nogil:
            for lf in range(self.n_leaves):
                for w in range(self.mask_words):
                    bits = self.p_leaf_mask[lf * self.mask_words + w]
                    while bits:
                        lv[pos] = lf
                        sv[pos] = (<int64_t> w << 6) + svx_ctz(bits)
                        pos += 1
                        bits &= bits - 1
        return leaf_out, slot_out

    def slots_to_coords(self, leaf, slot):
        leaf = np.ascontiguousarray(leaf, np.int64)
        slot = np.ascontiguousarray(slot, np.int64)
        cdef long long n = leaf.shape[0]
        out = np.empty((n, 3), np.int64)
        cdef const int64_t[::1] lv = leaf
        cdef const int64_t[::1] sv = slot
        cdef int64_t[:, ::1] ov = out
        cdef int ll = self.leaf_log2
        cdef int64_t lm = self.leaf_side - 1
        cdef long long i, lf
        with nogil:
            for i in range(n):
                lf = lv[i]
                ov[i, 0] = ((<int64_t> self.p_leaf_coord[3 * lf]) << ll) + ((sv[i] >> (2 * ll)) & lm)
                ov[i, 1] = ((<int64_t> self.p_leaf_coord[3 * lf + 1]) << ll) + ((sv[i] >> ll) & lm)
                ov[i, 2] = ((<int64_t> self.p_leaf_coord[3 * lf + 2]) << ll) + (sv[i] & lm)
        return out

    def memory_bytes(self):
        """Actual payload/topology bytes held by allocated nodes."""
        per_leaf = 12 + 8 * self.mask_words
        for dim, dt in zip(self.field_dims, self.field_dtypes):
            per_leaf += dt.itemsize * self.leaf_volume * max(dim, 1)
        per_internal = 12 + 4 * self.internal_volume
        root_bytes = self.rt_cap * (12 + 4 + 1)
        return self.n_leaves * per_leaf + self.n_internal * per_internal + root_bytes


# -- band traversal ---------------------------------------------------------


cdef inline long long _dda_ray(double ox, double oy, double oz,
                               double ux, double uy, double uz,
                               double ts, double h, double trunc, bint carving,
                               int wfn,
                               int32_t* out_coords, int32_t* out_rid,
                               double* out_d, double* out_w,
                               int32_t ray_id) nogil:
    """Traverse one ray's truncation band.  With out_coords NULL only counts
    emissions.  Returns emitted count, or -1 past the step budget."""
    cdef double t_lo, t_hi, px, py, pz
    cdef double tmx, tmy, tmz, tdx, tdy, tdz, tmin
    cdef double cx, cy, cz, proj, dd, ww
    cdef int64_t ci, cj, ck
    cdef int sx, sy, sz, axis
    cdef long long cnt = 0, k = 0
    if carving:
        t_lo = 0.0
    else:
        t_lo = c_fmax(ts - trunc, 0.0)
    t_hi = ts + trunc
    px = ox + ux * t_lo
    py = oy + uy * t_lo
    pz = oz + uz * t_lo
    ci = <int64_t> c_floor(px / h)
    cj = <int64_t> c_floor(py / h)
    ck = <int64_t> c_floor(pz / h)
    sx = 0 if ux == 0 else (1 if ux > 0 else -1)
    sy = 0 if uy == 0 else (1 if uy > 0 else -1)
    sz = 0 if uz == 0 else (1 if uz > 0 else -1)
    if sx > 0:
        tmx = t_lo + ((ci + 1) * h - px) / ux
        tdx = h / fabs(ux)
    elif sx < 0:
        tmx = t_lo + (ci * h - px) / ux
        tdx = h / fabs(ux)
    else:
        tmx = INFINITY
        tdx = INFINITY
    if sy > 0:
        tmy = t_lo + ((cj + 1) * h - py) / uy
        tdy = h / fabs(uy)
    elif sy < 0:
        tmy = t_lo + (cj * h - py) / uy
        tdy = h / fabs(uy)
    else:
        tmy = INFINITY
        tdy = INFINITY
    if sz > 0:
        tmz = t_lo + ((ck + 1) * h - pz) / uz
        tdz = h / fabs(uz)
    elif sz < 0:
        tmz = t_lo + (ck * h - pz) / uz
        tdz = h / fabs(uz)
    else:
        tmz = INFINITY
        tdz = INFINITY

    cdef double t_enter = t_lo
    while t_enter < t_hi:
        if k >= C_STEP_BUDGET:
            return -1
        axis = 0
        tmin = tmx
        if tmy < tmin:
            axis = 1
            tmin = tmy
        if tmz < tmin:
            axis = 2
            tmin = tmz
        if tmin > t_lo:
            if out_coords != NULL:
                out_coords[3 * cnt] = <int32_t> ci
                out_coords[3 * cnt + 1] = <int32_t> cj
                out_coords[3 * cnt + 2] = <int32_t> ck
                out_rid[cnt] = ray_id
                cx = (ci + 0.5) * h - ox
                cy = (cj + 0.5) * h - oy
                cz = (ck + 0.5) * h - oz
                proj = cx * ux + cy * uy + cz * uz
                dd = ts - proj
                if dd < -trunc:
                    dd = -trunc
                if dd > trunc:
                    dd = trunc
                out_d[cnt] = dd
                if wfn == 1:
                    out_w[cnt] = 1.0 if dd >= 0.0 else (trunc + dd) / trunc
                else:
                    out_w[cnt] = 1.0
            cnt += 1
        if axis == 0:
            ci += sx
            tmx += tdx
        elif axis == 1:
            cj += sy
            tmy += tdy
        else:
            ck += sz
            tmz += tdz
        t_enter = tmin
        k += 1
    return cnt


def raycast_band(origin, endpoint, voxel_size, truncation, space_carving, max_steps=None):
    """Amanatides-Woo traversal of one ray's truncation band; same inclusion
    rule as the python backend (half-open interval overlap)."""
    origin = np.asarray(origin, np.float64)
    endpoint = np.asarray(endpoint, np.float64)
    delta = endpoint - origin
    cdef double ts = float(np.sqrt((delta * delta).sum()))
    if ts == 0.0:
        return np.empty((0, 3), np.int64)
    u = delta / ts
    cdef double ux = u[0], uy = u[1], uz = u[2]
    cdef double ox = origin[0], oy = origin[1], oz = origin[2]
    cdef double h = float(voxel_size), trunc = float(truncation)
    cdef bint carving = bool(space_carving)
    cdef long long cnt
    with nogil:
        cnt = _dda_ray(ox, oy, oz, ux, uy, uz, ts, h, trunc, carving, 0,
                       NULL, NULL, NULL, NULL, 0)
    if cnt < 0:
        raise SemvoxError("ray band exceeds step budget; shrink max_range or grow voxels")
    coords32 = np.empty((max(cnt, 1), 3), np.int32)
    rid = np.empty(max(cnt, 1), np.int32)
    dbuf = np.empty(max(cnt, 1), np.float64)
    wbuf = np.empty(max(cnt, 1), np.float64)
    cdef int32_t[:, ::1] cm = coords32
    cdef int32_t[::1] rm = rid
    cdef double[::1] dm = dbuf
    cdef double[::1] wm = wbuf
    if cnt > 0:
        with nogil:
            _dda_ray(ox, oy, oz, ux, uy, uz, ts, h, trunc, carving, 0,
                     &cm[0, 0], &rm[0], &dm[0], &wm[0], 0)
        return coords32[:cnt].astype(np.int64)
    return np.empty((0, 3), np.int64)


# -- frame integration --------------------------------------------------------


def integrate_points(GridCore tsdf_core, sem_core_obj, sem_kind, origin, u, t_surf,
                     labels, feats, params, threads=1):
    """Fuse one frame; see _pycore.integrate_points for the contract.

    Pipeline: parallel two-pass band emission, parallel (voxel, point, step)
    sort, first-occurrence ensure, parallel per-voxel aggregation with
    sequential in-order reduction inside each voxel group, then the shared
    numpy apply stage.
    """
    cdef GridCore sem_core = None
    if sem_core_obj is not None:
        sem_core = <GridCore?> sem_core_obj

    cdef double h = float(params["voxel_size"])
    cdef double trunc = float(params["truncation"])
    cdef bint carving = bool(params["space_carving"])
    cdef int wfn = int(params["weight_fn"])
    cdef int nthreads = max(int(threads), 1)
    svx_set_threads(nthreads)

    origin_arr = np.ascontiguousarray(origin, np.float64)
    u = np.ascontiguousarray(u, np.float64)
    t_surf = np.ascontiguousarray(t_surf, np.float64)
    cdef double ox = origin_arr[0], oy = origin_arr[1], oz = origin_arr[2]
    cdef const double[:, ::1] uv = u
    cdef const double[::1] tv = t_surf
    cdef long long n = t_surf.shape[0]
    report = {"band_hits": 0, "touched_voxels": 0}
    if n == 0:
        return report
    t0 = time.perf_counter()

    # pass 1: per-ray emission counts
    counts = np.zeros(n, np.int64)
    cdef int64_t[::1] cntv = counts
    cdef long long i
    with nogil:
        for i in prange(n, num_threads=nthreads, schedule="static"):
            cntv[i] = _dda_ray(ox, oy, oz, uv[i, 0], uv[i, 1], uv[i, 2], tv[i],
                               h, trunc, carving, wfn, NULL, NULL, NULL, NULL, 0)
    if counts.min() < 0:
        raise SemvoxError("ray band exceeds step budget; shrink max_range or grow voxels")
    offsets = np.zeros(n + 1, np.int64)
    np.cumsum(counts, out=offsets[1:])
    cdef long long m = int(offsets[n])
    report["band_hits"] = m
    if m == 0:
        return report

    # pass 2: fill rows
    coords = np.empty((m, 3), np.int32)
    rid = np.empty(m, np.int32)
    dvals = np.empty(m, np.float64)
    wvals = np.empty(m, np.float64)
    cdef int32_t[:, ::1] coordv = coords
    cdef int32_t[::1] ridv = rid
    cdef double[::1] dv = dvals
    cdef double[::1] wv = wvals
    cdef const int64_t[::1] offv = offsets
    with nogil:
        for i in prange(n, num_threads=nthreads, schedule="static"):
            if cntv[i] > 0:
                _dda_ray(ox, oy, oz, uv[i, 0], uv[i, 1], uv[i, 2], tv[i],
                         h, trunc, carving, wfn,
                         &coordv[offv[i], 0], &ridv[offv[i]],
                         &dv[offv[i]], &wv[offv[i]], <int32_t> i)

    # drop zero-weight touches (possible only under linear dropoff)
    if wfn == 1:
        keepmask = wvals > 0.0
        if not keepmask.all():
            coords = np.ascontiguousarray(coords[keepmask])
            rid = np.ascontiguousarray(rid[keepmask])
            dvals = np.ascontiguousarray(dvals[keepmask])
            wvals = np.ascontiguousarray(wvals[keepmask])
            m = coords.shape[0]
            if m == 0:
                return report
            coordv = coords
            ridv = rid
            dv = dvals
            wv = wvals

    t1 = time.perf_counter()
    report["t_emit_ms"] = (t1 - t0) * 1e3

    mn = coords.min(axis=0).astype(np.int64)
    mx = coords.max(axis=0).astype(np.int64)
    if int((mx - mn).max()) >= (1 << C_PACK_BITS):
        raise SemvoxError(
            "frame voxel extent exceeds 2^21 per axis; shrink max_range or grow voxels"
        )
    cdef int64_t mnx = mn[0], mny = mn[1], mnz = mn[2]

    # sort rows by (voxel key, row); rows are already (point, step)-ordered
    cdef svx_u128* keys = <svx_u128*> malloc(m * sizeof(svx_u128))
    if keys == NULL:
        raise MemoryError("integration sort buffer")
    srow = np.empty(m, np.int64)
    skey = np.empty(m, np.uint64)
    cdef int64_t[::1] srv = srow
    cdef uint64_t[::1] skv = skey
    cdef uint64_t kk
    try:
        with nogil:
            for i in prange(m, num_threads=nthreads, schedule="static"):
                keys[i] = svx_pack128(
                    ((<uint64_t> (coordv[i, 0] - mnx)) << (2 * C_PACK_BITS))
                    | ((<uint64_t> (coordv[i, 1] - mny)) << C_PACK_BITS)
                    | (<uint64_t> (coordv[i, 2] - mnz)),
                    <uint64_t> i,
                )
            svx_sort_u128(keys, m)
            for i in prange(m, num_threads=nthreads, schedule="static"):
                srv[i] = <int64_t> svx_lo64(keys[i])
                skv[i] = svx_hi64(keys[i])
    finally:
        free(keys)
    t2 = time.perf_counter()
    report["t_sort_ms"] = (t2 - t1) * 1e3

    newgrp = np.empty(m, bool)
    newgrp[0] = True
    np.not_equal(skey[1:], skey[:-1], out=newgrp[1:])
    starts = np.flatnonzero(newgrp)
    cdef long long ngroups = starts.shape[0]
    report["touched_voxels"] = int(ngroups)
    starts_ext = np.empty(ngroups + 1, np.int64)
    starts_ext[:ngroups] = starts
    starts_ext[ngroups] = m
    ucoords = coords[srow[starts]]
    t3 = time.perf_counter()
    report["t_group_ms"] = (t3 - t2) * 1e3

    leaf, slot = tsdf_core.ensure_coords(ucoords)
    t4 = time.perf_counter()
    report["t_ensure_ms"] = (t4 - t3) * 1e3

    # per-voxel aggregation: sequential in sorted-row order within each group
    sum_w = np.zeros(ngroups)
    sum_wd = np.zeros(ngroups)
    cdef double[::1] swv = sum_w
    cdef double[::1] swdv = sum_wd
    cdef const int64_t[::1] stv = starts_ext
    cdef long long g, s, r
    cdef int kind_code = 0
    cdef bint last_wins = bool(params.get("last_wins"))
    if sem_core is not None and sem_kind == "closed":
        kind_code = 1
    elif sem_core is not None and sem_kind == "open":
        kind_code = 2

    cdef long long kcls = int(params["num_classes"]) if kind_code == 1 else 0
    cdef long long ell = 0
    cnt_buf = None
    last_idx = None
    nobs = None
    sum_z = None
    sum_z2 = None
    cdef double[:, ::1] cntv2
    cdef int64_t[::1] lastv
    cdef double[::1] nobsv
    cdef double[:, ::1] szv
    cdef double[:, ::1] sz2v
    cdef const int32_t[::1] labv
    cdef const double[:, ::1] featv
    cdef double zval

    if kind_code == 0:
        with nogil:
            for g in prange(ngroups, num_threads=nthreads, schedule="static"):
                for s in range(stv[g], stv[g + 1]):
                    r = srv[s]
                    swv[g] += wv[r]
                    swdv[g] += wv[r] * dv[r]
    elif kind_code == 1:
        labv = np.ascontiguousarray(labels, np.int32)
        if last_wins:
            last_idx = np.empty(ngroups, np.int64)
            lastv = last_idx
            with nogil:
                for g in prange(ngroups, num_threads=nthreads, schedule="static"):
                    for s in range(stv[g], stv[g + 1]):
                        r = srv[s]
                        swv[g] += wv[r]
                        swdv[g] += wv[r] * dv[r]
                    lastv[g] = labv[ridv[srv[stv[g + 1] - 1]]] - 1
        else:
            cnt_buf = np.zeros((ngroups, kcls))
            cntv2 = cnt_buf
            with nogil:
                for g in prange(ngroups, num_threads=nthreads, schedule="static"):
                    for s in range(stv[g], stv[g + 1]):
                        r = srv[s]
                        swv[g] += wv[r]
                        swdv[g] += wv[r] * dv[r]
                        cntv2[g, labv[ridv[r]] - 1] += 1.0
    else:
        featv = np.ascontiguousarray(feats, np.float64)
        ell = featv.shape[1]
        nobs = np.zeros(ngroups)
        sum_z = np.zeros((ngroups, ell))
        sum_z2 = np.zeros((ngroups, ell))
        nobsv = nobs
        szv = sum_z
        sz2v = sum_z2
        with nogil:
            for g in prange(ngroups, num_threads=nthreads, schedule="static"):
                for s in range(stv[g], stv[g + 1]):
                    r = srv[s]
                    swv[g] += wv[r]
                    swdv[g] += wv[r] * dv[r]
                    nobsv[g] += 1.0
                    for i in range(ell):
                        zval = featv[ridv[r], i]
                        szv[g, i] += zval
                        sz2v[g, i] += zval * zval

    t5 = time.perf_counter()
    report["t_reduce_ms"] = (t5 - t4) * 1e3
    d_sorted = dvals[srow]
    min_d = np.minimum.reduceat(d_sorted, starts)
    max_d = np.maximum.reduceat(d_sorted, starts)
    w_old = _shared.apply_tsdf(tsdf_core, leaf, slot, sum_w, sum_wd, min_d, max_d)
    if kind_code == 0:
        report["t_apply_ms"] = (time.perf_counter() - t5) * 1e3
        return report
    sleaf, sslot = sem_core.ensure_coords(ucoords)
    if kind_code == 1:
        if last_wins:
            _shared.apply_closed(sem_core, sleaf, sslot, None, last_idx)
        else:
            _shared.apply_closed(sem_core, sleaf, sslot, cnt_buf, None)
    else:
        _shared.apply_open(sem_core, sleaf, sslot, w_old, nobs, sum_z, sum_z2,
                           params["lambda_floor"])
    report["t_apply_ms"] = (time.perf_counter() - t5) * 1e3
    return report
