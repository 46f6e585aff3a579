"""Pure-numpy grid core.

This is the reference backend.  The compiled backend (_core.pyx) mirrors the
exact arithmetic and ordering used here: band emission order, the
(voxel, point, step) sort, and sequential in-order accumulation per voxel.
Keeping those identical is what makes results reproducible bit-for-bit across
backends and thread counts.
"""

from __future__ import annotations

import numpy as np

from .errors import OutOfRangeError, SemvoxError

BACKEND_NAME = "python"

COORD_LIMIT = 1 << 30
_PACK_BITS = 21  # per-axis local key width; frame extent must stay below 2**21 voxels
_STEP_BITS = 20


class GridCore:
    """Sparse three-level voxel tree with struct-of-arrays payload pools.

    Levels: python-dict root keyed by internal-node coords, dense child
    tables in internal nodes, bitmask-tracked slots in leaves.  Leaf and
    internal node pools grow by doubling; indices are stable for the life of
    the grid.
    """

    def __init__(self, leaf_log2, internal_log2, field_dims, field_dtypes, backgrounds):
        self.leaf_log2 = int(leaf_log2)
        self.internal_log2 = int(internal_log2)
        self.leaf_side = 1 << self.leaf_log2
        self.leaf_volume = self.leaf_side ** 3
        self.internal_side = 1 << self.internal_log2
        self.internal_volume = self.internal_side ** 3
        self.mask_words = (self.leaf_volume + 63) // 64

        self.field_dims = tuple(int(d) for d in field_dims)
        self.field_dtypes = tuple(np.dtype(d) for d in field_dtypes)
        self.backgrounds = [np.asarray(b) for b in backgrounds]
        if len(self.field_dims) != len(self.field_dtypes) or len(self.field_dims) != len(
            self.backgrounds
        ):
            raise SemvoxError("field spec lists must have equal length")

        cap = 16
        self.leaf_coord = np.zeros((cap, 3), np.int32)  # leaf-grid coords (voxel >> leaf_log2)
        self.leaf_mask = np.zeros((cap, self.mask_words), np.uint64)
        self.fields = []
        for dim, dt in zip(self.field_dims, self.field_dtypes):
            shape = (cap, self.leaf_volume) if dim == 0 else (cap, self.leaf_volume, dim)
            self.fields.append(np.zeros(shape, dt))
        icap = 8
        self.internal_coord = np.zeros((icap, 3), np.int32)
        self.internal_children = np.full((icap, self.internal_volume), -1, np.int32)

        self._root: dict[tuple[int, int, int], int] = {}
        self.n_leaves = 0
        self.n_internal = 0
        self.active_count = 0
        self.root_probes = 0  # root hash lookups, for access-locality instrumentation

    # -- capacity ---------------------------------------------------------

    def _grow_leaves(self, need):
        cap = self.leaf_coord.shape[0]
        if need <= cap:
            return
        new = max(cap * 2, need)
        grown_coord = np.zeros((new, 3), np.int32)
        grown_coord[:cap] = self.leaf_coord[:cap]
        self.leaf_coord = grown_coord
        grown_mask = np.zeros((new, self.mask_words), np.uint64)
        grown_mask[:cap] = self.leaf_mask[:cap]
        self.leaf_mask = grown_mask
        for idx, (dim, dt) in enumerate(zip(self.field_dims, self.field_dtypes)):
            shape = (new, self.leaf_volume) if dim == 0 else (new, self.leaf_volume, dim)
            arr = np.zeros(shape, dt)
            arr[:cap] = self.fields[idx][:cap]
            self.fields[idx] = arr

    def _grow_internal(self, need):
        cap = self.internal_coord.shape[0]
        if need <= cap:
            return
        new = max(cap * 2, need)
        grown_coord = np.zeros((new, 3), np.int32)
        grown_coord[:cap] = self.internal_coord[:cap]
        self.internal_coord = grown_coord
        grown = np.full((new, self.internal_volume), -1, np.int32)
        grown[:cap] = self.internal_children[:cap]
        self.internal_children = grown

    # -- addressing -------------------------------------------------------

    def _split(self, coords):
        ll, il = self.leaf_log2, self.internal_log2
        lm, im = self.leaf_side - 1, self.internal_side - 1
        lc = coords >> ll
        slot = ((coords[:, 0] & lm) << (2 * ll)) | ((coords[:, 1] & lm) << ll) | (
            coords[:, 2] & lm
        )
        child = ((lc[:, 0] & im) << (2 * il)) | ((lc[:, 1] & im) << il) | (lc[:, 2] & im)
        return lc, slot, child

    def probe_one(self, i, j, k):
        """(leaf_idx, slot, active) for one voxel; never allocates."""
        ll, il = self.leaf_log2, self.internal_log2
        lm, im = self.leaf_side - 1, self.internal_side - 1
        lci, lcj, lck = i >> ll, j >> ll, k >> ll
        slot = ((i & lm) << (2 * ll)) | ((j & lm) << ll) | (k & lm)
        self.root_probes += 1
        node = self._root.get((lci >> il, lcj >> il, lck >> il), -1)
        if node < 0:
            return -1, slot, False
        child = ((lci & im) << (2 * il)) | ((lcj & im) << il) | (lck & im)
        leaf = int(self.internal_children[node, child])
        if leaf < 0:
            return -1, slot, False
        word = int(self.leaf_mask[leaf, slot >> 6])
        return leaf, slot, bool((word >> (slot & 63)) & 1)

    def probe_coords(self, coords):
        """Vectorized probe: (leaf (N,), slot (N,), active (N,)).  leaf=-1
        where unallocated.  Never allocates."""
        coords = np.ascontiguousarray(coords, np.int64)
        n = coords.shape[0]
        if n == 0:
            z = np.empty(0, np.int64)
            return z, z.copy(), np.empty(0, bool)
        lc, slot, child = self._split(coords)
        ic = (lc >> self.internal_log2).astype(np.int32)
        uniq, inv = np.unique(ic, axis=0, return_inverse=True)
        node_of = np.empty(uniq.shape[0], np.int64)
        root = self._root
        for r in range(uniq.shape[0]):
            self.root_probes += 1
            node_of[r] = root.get((int(uniq[r, 0]), int(uniq[r, 1]), int(uniq[r, 2])), -1)
        node = node_of[inv.ravel()]
        leaf = np.full(n, -1, np.int64)
        ok = node >= 0
        if ok.any():
            leaf[ok] = self.internal_children[node[ok], child[ok]]
        active = np.zeros(n, bool)
        has = leaf >= 0
        if has.any():
            w = (slot[has] >> 6).astype(np.int64)
            b = (slot[has] & 63).astype(np.uint64)
            bits = (self.leaf_mask[leaf[has], w] >> b) & np.uint64(1)
            active[has] = bits == 1
        return leaf, slot, active

    def _resolve_leaf(self, lci, lcj, lck, alloc):
        """Root+internal walk for one leaf coordinate, optionally allocating."""
        il = self.internal_log2
        im = self.internal_side - 1
        key = (lci >> il, lcj >> il, lck >> il)
        self.root_probes += 1
        node = self._root.get(key, -1)
        if node < 0:
            if not alloc:
                return -1
            self._grow_internal(self.n_internal + 1)
            node = self.n_internal
            self.n_internal += 1
            self.internal_coord[node] = key
            self.internal_children[node].fill(-1)
            self._root[key] = node
        child = ((lci & im) << (2 * il)) | ((lcj & im) << il) | (lck & im)
        leaf = int(self.internal_children[node, child])
        if leaf < 0 and alloc:
            self._grow_leaves(self.n_leaves + 1)
            leaf = self.n_leaves
            self.n_leaves += 1
            self.leaf_coord[leaf] = (lci, lcj, lck)
            self.leaf_mask[leaf].fill(0)
            for arr, bg in zip(self.fields, self.backgrounds):
                arr[leaf] = bg
            self.internal_children[node, child] = leaf
        return leaf

    def activate_slot(self, leaf, slot):
        """Set a slot's active bit; returns True when newly activated."""
        word, bit = slot >> 6, np.uint64(1) << np.uint64(slot & 63)
        if self.leaf_mask[leaf, word] & bit:
            return False
        self.leaf_mask[leaf, word] |= bit
        self.active_count += 1
        return True

    def ensure_one(self, i, j, k):
        """(leaf, slot) for one voxel, allocating and activating as needed."""
        if max(abs(i), abs(j), abs(k)) >= COORD_LIMIT:
            raise OutOfRangeError("voxel coordinate beyond +/-2^30 addressable range")
        ll = self.leaf_log2
        lm = self.leaf_side - 1
        leaf = self._resolve_leaf(i >> ll, j >> ll, k >> ll, alloc=True)
        slot = ((i & lm) << (2 * ll)) | ((j & lm) << ll) | (k & lm)
        self.activate_slot(leaf, slot)
        return leaf, slot

    def ensure_coords(self, coords):
        """Vectorized ensure; allocates nodes in first-occurrence order of
        the input (the compiled backend does the same, which keeps allocation
        order, iteration order, and snapshots identical across backends)."""
        coords = np.ascontiguousarray(coords, np.int64)
        n = coords.shape[0]
        if n == 0:
            z = np.empty(0, np.int64)
            return z, z.copy()
        if np.abs(coords).max() >= COORD_LIMIT:
            raise OutOfRangeError("voxel coordinate beyond +/-2^30 addressable range")
        lc, slot, _ = self._split(coords)
        lc32 = lc.astype(np.int32)
        uniq, first, inv = np.unique(lc32, axis=0, return_index=True, return_inverse=True)
        inv = inv.ravel()
        order = np.argsort(first, kind="stable")  # first-occurrence order
        leaf_of = np.empty(uniq.shape[0], np.int64)
        for r in order:
            leaf_of[r] = self._resolve_leaf(int(uniq[r, 0]), int(uniq[r, 1]), int(uniq[r, 2]), True)
        leaf = leaf_of[inv]

        flat = leaf * self.leaf_volume + slot
        uflat = np.unique(flat)
        uleaf = uflat // self.leaf_volume
        uslot = uflat % self.leaf_volume
        word = uslot >> 6
        bit = np.uint64(1) << (uslot & 63).astype(np.uint64)
        old = (self.leaf_mask[uleaf, word] & bit) != 0
        self.active_count += int((~old).sum())
        np.bitwise_or.at(self.leaf_mask, (uleaf, word), bit)
        return leaf, slot

    # -- bulk views -------------------------------------------------------

    def active_slots(self):
        """(leaf_idx (N,), slot (N,)) of all active voxels, in leaf-allocation
        then slot order."""
        nl = self.n_leaves
        if nl == 0:
            z = np.empty(0, np.int64)
            return z, z.copy()
        bits = np.unpackbits(
            self.leaf_mask[:nl].view(np.uint8), axis=1, bitorder="little"
        )[:, : self.leaf_volume]
        leaf, slot = np.nonzero(bits)
        return leaf.astype(np.int64), slot.astype(np.int64)

    def slots_to_coords(self, leaf, slot):
        ll = self.leaf_log2
        base = self.leaf_coord[leaf].astype(np.int64) << ll
        local = np.stack(
            [(slot >> (2 * ll)) & (self.leaf_side - 1),
             (slot >> ll) & (self.leaf_side - 1),
             slot & (self.leaf_side - 1)],
            axis=1,
        )
        return base + local

    def memory_bytes(self):
        """Actual payload/topology bytes held by allocated nodes."""
        per_leaf = self.leaf_coord.itemsize * 3 + self.leaf_mask.itemsize * self.mask_words
        for dim, dt in zip(self.field_dims, self.field_dtypes):
            per_leaf += dt.itemsize * self.leaf_volume * max(dim, 1)
        per_internal = self.internal_coord.itemsize * 3 + 4 * self.internal_volume
        return self.n_leaves * per_leaf + self.n_internal * per_internal + 64 * len(self._root)


# -- band traversal --------------------------------------------------------


def raycast_band(origin, endpoint, voxel_size, truncation, space_carving, max_steps=1 << 20):
    """Amanatides-Woo traversal of one ray's truncation band.

    Returns voxel coords (M, 3) int64 in near-to-far order.  A voxel is
    included iff its [t_enter, t_exit) overlaps [t_lo, t_hi), with
    t_hi = t_surf + truncation and t_lo = 0 under space carving, else
    max(0, t_surf - truncation).  Zero-measure touches are excluded.
    """
    origin = np.asarray(origin, np.float64)
    endpoint = np.asarray(endpoint, np.float64)
    delta = endpoint - origin
    t_surf = float(np.sqrt(delta @ delta))
    if t_surf == 0.0:
        return np.empty((0, 3), np.int64)
    u = delta / t_surf
    h = float(voxel_size)
    t_lo = 0.0 if space_carving else max(0.0, t_surf - truncation)
    t_hi = t_surf + truncation

    p0 = origin + u * t_lo
    cur = np.floor(p0 / h).astype(np.int64)
    step = np.sign(u).astype(np.int64)
    out = []
    tmax = np.empty(3)
    tdelta = np.empty(3)
    for a in range(3):
        if step[a] > 0:
            tmax[a] = t_lo + ((cur[a] + 1) * h - p0[a]) / u[a]
            tdelta[a] = h / u[a]
        elif step[a] < 0:
            tmax[a] = t_lo + (cur[a] * h - p0[a]) / u[a]
            tdelta[a] = -h / u[a]
        else:
            tmax[a] = np.inf
            tdelta[a] = np.inf
    t_enter = t_lo
    k = 0
    while t_enter < t_hi and k < max_steps:
        axis = int(np.argmin(tmax))  # ties resolve to the lowest axis index
        t_exit = tmax[axis]
        if t_exit > t_lo:
            out.append(cur.copy())
        cur[axis] += step[axis]
        tmax[axis] += tdelta[axis]
        t_enter = t_exit
        k += 1
    if not out:
        return np.empty((0, 3), np.int64)
    return np.stack(out).astype(np.int64)


def _emit_bands(origin, u, t_surf, voxel_size, truncation, space_carving):
    """Synchronized vectorized traversal of all rays' bands.

    Returns (ray_id (M,), coords (M,3) int64, step (M,) int32), grouped by
    traversal iteration.  Per-ray ordering matches raycast_band exactly.
    """
    n = t_surf.shape[0]
    h = float(voxel_size)
    if space_carving:
        t_lo = np.zeros(n)
    else:
        t_lo = np.maximum(t_surf - truncation, 0.0)
    t_hi = t_surf + truncation

    p0 = origin[None, :] + u * t_lo[:, None]
    cur = np.floor(p0 / h).astype(np.int64)
    step = np.sign(u).astype(np.int64)
    nonzero = step != 0
    safe_u = np.where(nonzero, u, 1.0)
    nxt = np.where(step > 0, (cur + 1) * h, cur * h)
    tmax = np.where(nonzero, t_lo[:, None] + (nxt - p0) / safe_u, np.inf)
    tdelta = np.where(nonzero, h / np.abs(safe_u), np.inf)

    out_rid, out_coord, out_step = [], [], []
    t_enter = t_lo.copy()
    alive = np.flatnonzero(t_enter < t_hi)
    k = 0
    while alive.size:
        if k >= (1 << _STEP_BITS):
            raise SemvoxError("ray band exceeds step budget; shrink max_range or grow voxels")
        sub_tmax = tmax[alive]
        axis = np.argmin(sub_tmax, axis=1)  # ties resolve to the lowest axis index
        t_exit = sub_tmax[np.arange(alive.size), axis]
        emit = t_exit > t_lo[alive]
        if emit.any():
            rows = alive[emit]
            out_rid.append(rows.astype(np.int64))
            out_coord.append(cur[rows].copy())
            out_step.append(np.full(rows.size, k, np.int32))
        cur[alive, axis] += step[alive, axis]
        tmax[alive, axis] += tdelta[alive, axis]
        keep = t_exit < t_hi[alive]
        alive = alive[keep]
        k += 1
    if not out_rid:
        return (np.empty(0, np.int64), np.empty((0, 3), np.int64), np.empty(0, np.int32))
    return np.concatenate(out_rid), np.concatenate(out_coord), np.concatenate(out_step)


def _pack_keys(coords, mn):
    d = (coords - mn[None, :]).astype(np.uint64)
    if d.size and int(d.max()) >= (1 << _PACK_BITS):
        raise SemvoxError(
            "frame voxel extent exceeds 2^21 per axis; shrink max_range or grow voxels"
        )
    return (d[:, 0] << np.uint64(2 * _PACK_BITS)) | (d[:, 1] << np.uint64(_PACK_BITS)) | d[:, 2]


def row_distances_weights(coords, rid, u, t_surf, origin, h, trunc, weight_fn):
    """Per-row clamped projective distance and update weight.  Shared by both
    backends so the arithmetic (and its rounding) is identical."""
    cx = (coords[:, 0].astype(np.float64) + 0.5) * h - origin[0]
    cy = (coords[:, 1].astype(np.float64) + 0.5) * h - origin[1]
    cz = (coords[:, 2].astype(np.float64) + 0.5) * h - origin[2]
    proj = cx * u[rid, 0] + cy * u[rid, 1] + cz * u[rid, 2]
    d = np.clip(t_surf[rid] - proj, -trunc, trunc)
    if int(weight_fn) == 1:
        w = np.where(d >= 0.0, 1.0, (trunc + d) / trunc)
    else:
        w = np.ones(d.shape[0])
    return d, w


def apply_tsdf(core, leaf, slot, sum_w, sum_wd, min_d, max_d):
    """Weighted running-mean update for pre-aggregated per-voxel sums.
    Returns the pre-update weights (the open-set update needs them).

    min_d/max_d are the per-voxel extremes of the incoming distances.  When
    a voxel's contributions are all one constant matching its stored value
    (or the voxel is fresh), the exact mean is that constant and it is
    written directly; repeated identical measurements never drift."""
    dist_arr, weight_arr = core.fields[0], core.fields[1]
    w_old = weight_arr[leaf, slot].astype(np.float64)
    d_old = dist_arr[leaf, slot].astype(np.float64)
    w_new = w_old + sum_w
    denom = np.where(w_new > 0.0, w_new, 1.0)
    d_new = np.where(w_new > 0.0, (w_old * d_old + sum_wd) / denom, d_old)
    const = (min_d == max_d) & ((w_old == 0.0) | (d_old == min_d))
    d_new = np.where(const, min_d, d_new)
    dist_arr[leaf, slot] = d_new
    weight_arr[leaf, slot] = w_new
    return w_old


def apply_closed(core, leaf, slot, cnt, last_idx):
    """Add per-voxel class-count increments, or overwrite with a one-hot of
    the most recent observation when last_idx is given (last-wins mode)."""
    counts_arr = core.fields[0]
    if last_idx is not None:
        onehot = np.zeros((leaf.shape[0], counts_arr.shape[2]), counts_arr.dtype)
        onehot[np.arange(leaf.shape[0]), last_idx] = 1
        counts_arr[leaf, slot] = onehot
    else:
        counts_arr[leaf, slot] = counts_arr[leaf, slot] + cnt.astype(counts_arr.dtype)


def apply_open(core, leaf, slot, w_old, nobs, sum_z, sum_z2, lambda_floor):
    """Conjugate batch update of per-voxel (mean, scale) from per-frame
    per-voxel feature sums; lambda rides on the pre-frame weight."""
    mean_arr, scale_arr = core.fields[0], core.fields[1]
    m_old = mean_arr[leaf, slot].astype(np.float64)
    b_old = scale_arr[leaf, slot].astype(np.float64)
    lam = np.maximum(w_old, float(lambda_floor))
    lam_post = lam + nobs
    m_new = (lam[:, None] * m_old + sum_z) / lam_post[:, None]
    zbar = sum_z / nobs[:, None]
    ss = np.maximum(sum_z2 - sum_z * zbar, 0.0)
    gap = (lam * nobs / lam_post)[:, None] * (zbar - m_old) ** 2 * 0.5
    b_new = b_old + 0.5 * ss + gap
    mean_arr[leaf, slot] = m_new
    scale_arr[leaf, slot] = b_new


def integrate_points(tsdf_core, sem_core, sem_kind, origin, u, t_surf, labels, feats, params, threads=1):
    """Fuse one frame of range measurements into the TSDF (+ optional
    semantic) grid.

    Inputs are pre-validated unit directions and ranges (see fusion module).
    `params` is a dict: voxel_size, truncation, weight_fn (0 const, 1 linear
    dropoff), space_carving, num_classes, lambda_floor, last_wins.
    The python backend ignores `threads`.

    Band rows are sorted by (voxel, point, step) and reduced sequentially in
    that order, making the result independent of parallel scheduling and
    identical across backends.
    """
    h = float(params["voxel_size"])
    trunc = float(params["truncation"])
    origin = np.asarray(origin, np.float64)

    rid, coords, kstep = _emit_bands(
        origin, u, t_surf, h, trunc, bool(params["space_carving"])
    )
    report = {"band_hits": int(rid.shape[0]), "touched_voxels": 0}
    if rid.shape[0] == 0:
        return report

    d, w = row_distances_weights(
        coords, rid, u, t_surf, origin, h, trunc, params["weight_fn"]
    )

    # drop zero-weight touches so weight stays the "was observed" indicator
    keep = w > 0.0
    if not keep.all():
        rid, coords, kstep, d, w = rid[keep], coords[keep], kstep[keep], d[keep], w[keep]
        if rid.shape[0] == 0:
            return report

    mn = coords.min(axis=0)
    key = _pack_keys(coords, mn)
    order = np.lexsort((kstep, rid, key))
    key = key[order]
    rid = rid[order]
    coords = coords[order]
    d = d[order]
    w = w[order]

    newgrp = np.empty(key.shape[0], bool)
    newgrp[0] = True
    np.not_equal(key[1:], key[:-1], out=newgrp[1:])
    starts = np.flatnonzero(newgrp)
    gidx = np.cumsum(newgrp) - 1
    ngroups = starts.shape[0]
    ucoords = coords[starts]
    report["touched_voxels"] = int(ngroups)

    leaf, slot = tsdf_core.ensure_coords(ucoords)
    sum_w = np.zeros(ngroups)
    np.add.at(sum_w, gidx, w)
    sum_wd = np.zeros(ngroups)
    np.add.at(sum_wd, gidx, w * d)
    min_d = np.minimum.reduceat(d, starts)
    max_d = np.maximum.reduceat(d, starts)
    w_old = apply_tsdf(tsdf_core, leaf, slot, sum_w, sum_wd, min_d, max_d)

    if sem_core is None:
        return report

    sleaf, sslot = sem_core.ensure_coords(ucoords)
    if sem_kind == "closed":
        k = int(params["num_classes"])
        li = labels[rid].astype(np.int64) - 1
        if params.get("last_wins"):
            ends = np.empty(ngroups, np.int64)
            ends[:-1] = starts[1:] - 1
            ends[-1] = key.shape[0] - 1
            apply_closed(sem_core, sleaf, sslot, None, li[ends])
        else:
            cnt = np.zeros((ngroups, k))
            np.add.at(cnt, (gidx, li), 1.0)
            apply_closed(sem_core, sleaf, sslot, cnt, None)
    elif sem_kind == "open":
        z = feats[rid]
        ell = z.shape[1]
        nobs = np.zeros(ngroups)
        np.add.at(nobs, gidx, 1.0)
        sum_z = np.zeros((ngroups, ell))
        np.add.at(sum_z, gidx, z)
        sum_z2 = np.zeros((ngroups, ell))
        np.add.at(sum_z2, gidx, z * z)
        apply_open(sem_core, sleaf, sslot, w_old, nobs, sum_z, sum_z2, params["lambda_floor"])
    else:
        raise SemvoxError(f"unknown semantic payload kind {sem_kind!r}")
    return report
