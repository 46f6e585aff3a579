"""Map quality metrics and throughput benchmarks.

Segmentation quality is scored voxel-by-voxel against an analytic truth
grid on the same lattice; geometry is scored with a symmetric chamfer
between point sets.  Nearest-neighbor queries use an exact grid-bucket
search (expanding cell rings with a distance bound), so results carry no
approximation error.  The benchmark half times the standard pipeline
stages per frame and reports memory actually committed by the map.
"""

from __future__ import annotations

import csv
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import PayloadMismatchError, UserInputError
from .fusion import Frame, integrate_frame, make_grids
from .gaussian import cosine_to_embeddings
from .grid import KIND_CLOSED, KIND_OPEN, SparseGrid
from .ingest import load_frame
from .mesh import extract_mesh


# -- labels and segmentation scores -------------------------------------------

def grid_labels(grid: SparseGrid, embeddings=None):
    """Per-active-voxel class ids of a semantic grid.

    Closed-set: argmax of observation counts.  Open-set: argmax over the
    embedding table by cosine similarity, or over raw mean dimensions when
    no table is given (features that are one-hot class indicators).
    Voxels with no information map to 0.  Returns (coords, labels).
    """
    coords, vals = grid.active_values()
    n = coords.shape[0]
    if grid.kind == KIND_CLOSED:
        counts = vals[0]
        labels = np.where(counts.sum(axis=1) > 0,
                          np.argmax(counts, axis=1) + 1, 0)
    elif grid.kind == KIND_OPEN:
        mean = vals[0].astype(np.float64)
        live = np.linalg.norm(mean, axis=1) > 0
        if embeddings is not None:
            sims = cosine_to_embeddings(mean, embeddings)
            sims = np.where(np.isnan(sims), -np.inf, sims)
            labels = np.where(live, np.argmax(sims, axis=1) + 1, 0)
        else:
            labels = np.where(live, np.argmax(mean, axis=1) + 1, 0)
    else:
        raise PayloadMismatchError("label readout needs a semantic grid")
    return coords, labels.astype(np.int32)


@dataclass
class SegmentationScores:
    miou: float
    per_class: np.ndarray  # (num_classes,) IoU, NaN where class absent
    confusion: np.ndarray  # (num_classes + 1, num_classes + 1), row=truth

    def summary(self) -> str:
        parts = ["miou=%.4f" % self.miou]
        for c, v in enumerate(self.per_class, start=1):
            if np.isfinite(v):
                parts.append("iou[%d]=%.4f" % (c, v))
        return " ".join(parts)


def miou(pred_grid: SparseGrid, truth_grid: SparseGrid, num_classes=None,
         embeddings=None) -> SegmentationScores:
    """Mean IoU of predicted labels against a truth grid on the same lattice.

    Voxels active in either grid are scored; absence counts as class 0, so
    missed surface hurts recall and hallucinated surface hurts precision.
    Classes absent from both sides are left out of the mean.
    """
    if pred_grid.voxel_size != truth_grid.voxel_size:
        raise PayloadMismatchError(
            f"lattice mismatch: pred voxel {pred_grid.voxel_size} "
            f"vs truth {truth_grid.voxel_size}")
    cp, lp = grid_labels(pred_grid, embeddings=embeddings)
    ct, lt = grid_labels(truth_grid)
    if num_classes is None:
        num_classes = int(max(lp.max(initial=0), lt.max(initial=0)))
    both = np.concatenate([cp, ct], axis=0)
    uniq, inv = np.unique(both, axis=0, return_inverse=True)
    pred = np.zeros(uniq.shape[0], np.int64)
    truth = np.zeros(uniq.shape[0], np.int64)
    pred[inv[:cp.shape[0]]] = lp
    truth[inv[cp.shape[0]:]] = lt
    k = num_classes
    conf = np.zeros((k + 1, k + 1), np.int64)
    np.add.at(conf, (truth, pred), 1)
    per = np.full(k, np.nan)
    for c in range(1, k + 1):
        tp = conf[c, c]
        fp = conf[:, c].sum() - tp
        fn = conf[c, :].sum() - tp
        denom = tp + fp + fn
        if denom > 0:
            per[c - 1] = tp / denom
    mean = float(np.nanmean(per)) if np.isfinite(per).any() else float("nan")
    return SegmentationScores(miou=mean, per_class=per, confusion=conf)


# -- chamfer distance ----------------------------------------------------------

def _cell_keys(cells: np.ndarray) -> np.ndarray:
    mask = np.uint64((1 << 21) - 1)
    cu = cells.astype(np.int64).view(np.uint64)
    return ((cu[:, 0] & mask) << np.uint64(42)
            | (cu[:, 1] & mask) << np.uint64(21)
            | (cu[:, 2] & mask))


_SHELL_CACHE: dict[int, np.ndarray] = {}

# Shells grow as 24 r^2; keep only the small ones resident.
_SHELL_CACHE_MAX_R = 8


def _shell_offsets(r: int) -> np.ndarray:
    """(m, 3) integer offsets at exactly Chebyshev distance r."""
    if r in _SHELL_CACHE:
        return _SHELL_CACHE[r]
    rng = np.arange(-r, r + 1)
    g = np.stack(np.meshgrid(rng, rng, rng, indexing="ij"), axis=-1).reshape(-1, 3)
    shell = g[np.abs(g).max(axis=1) == r]
    if r <= _SHELL_CACHE_MAX_R:
        _SHELL_CACHE[r] = shell
    return shell


def _nn_sq(query: np.ndarray, ref: np.ndarray, cell: float) -> np.ndarray:
    """Exact squared distance from each query point to the nearest ref point.

    Reference points are bucketed into cells of side `cell`; each query
    group scans outward ring by ring and stops once the next ring cannot
    beat the best distance found (points in a ring at Chebyshev cell
    distance r are at least (r-1)*cell away).
    """
    rcell = np.floor(ref / cell).astype(np.int64)
    buckets: dict[int, list[int]] = {}
    for i, key in enumerate(_cell_keys(rcell).tolist()):
        buckets.setdefault(key, []).append(i)
    buckets = {k: np.array(v, np.int64) for k, v in buckets.items()}

    qcell = np.floor(query / cell).astype(np.int64)
    qkeys = _cell_keys(qcell)
    out = np.empty(query.shape[0])
    order = np.argsort(qkeys, kind="stable")
    groups = np.split(order, np.nonzero(np.diff(qkeys[order]))[0] + 1)
    # Any query's nearest point lies within the joint extent, so rings past
    # twice that (Chebyshev underestimates Euclidean by at most sqrt(3))
    # cannot improve the answer.
    lo = np.minimum(query.min(axis=0), ref.min(axis=0))
    hi = np.maximum(query.max(axis=0), ref.max(axis=0))
    max_ring = 2 * (int(np.ceil((hi - lo).max() / cell)) + 2) + 3
    for grp in groups:
        if grp.size == 0:
            continue
        base = qcell[grp[0]]
        q = query[grp]
        best = np.full(grp.size, np.inf)
        for r in range(max_ring):
            if r > 1 and (r - 1) ** 2 * cell * cell >= best.max():
                break
            keys = _cell_keys(base[None, :] + _shell_offsets(r))
            idx = [buckets[int(k)] for k in keys if int(k) in buckets]
            if idx:
                cand = ref[np.concatenate(idx)]
                d2 = ((q[:, None, :] - cand[None, :, :]) ** 2).sum(axis=2)
                best = np.minimum(best, d2.min(axis=1))
        out[grp] = best
    return out


def chamfer_l2(points_a: np.ndarray, points_b: np.ndarray, cell=None) -> float:
    """Symmetric chamfer: half the sum of mean squared nearest distances."""
    a = np.ascontiguousarray(points_a, np.float64)
    b = np.ascontiguousarray(points_b, np.float64)
    if a.ndim != 2 or a.shape[1] != 3 or b.ndim != 2 or b.shape[1] != 3:
        raise UserInputError("chamfer inputs must be (n, 3) point arrays")
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise UserInputError("chamfer of an empty point set is undefined")
    if cell is None:
        lo = np.minimum(a.min(axis=0), b.min(axis=0))
        hi = np.maximum(a.max(axis=0), b.max(axis=0))
        vol = float(np.prod(np.maximum(hi - lo, 1e-9)))
        # Flat or tiny sets collapse the volume estimate; the extent floor
        # keeps the ring scan bounded at a few dozen rings regardless.
        floor_cell = max(float((hi - lo).max()) / 16.0, 1e-6)
        cell = max((vol / (a.shape[0] + b.shape[0]) * 8.0) ** (1.0 / 3.0),
                   floor_cell)
        # points concentrated on surfaces pack cells much denser than the
        # volume estimate assumes; shrink until occupancy is small
        both = np.concatenate([a, b], axis=0)
        for _ in range(8):
            occ = np.unique(_cell_keys(np.floor(both / cell).astype(np.int64)),
                            return_counts=True)[1].mean()
            if occ <= 16.0 or cell <= floor_cell:
                break
            cell = max(cell * 0.5, floor_cell)
    ab = _nn_sq(a, b, cell).mean()
    ba = _nn_sq(b, a, cell).mean()
    return 0.5 * (ab + ba)


# -- ground-truth grids ----------------------------------------------------------

def truth_grid_analytic(scene, backend=None) -> SparseGrid:
    """Rasterize an analytic scene into a labeled truth grid.

    Exact (unquantized) surface intersections are cast along the scene's
    own camera rays and the truncation-band voxels each ray traverses are
    collected with the shared traversal rule; every touched voxel is
    labeled with the class of its nearest surface.  This is independent
    truth: no fusion math, no sensor quantization, labels by geometry.
    """
    from . import backend as backend_mod
    from ._pycore import _emit_bands
    from .config import ClosedSetConfig
    from .grid import ClosedPayload
    from .synthetic import scene_distance, scene_raycast

    cam = scene.camera
    h = scene.voxel_size
    u_px = np.arange(cam.width, dtype=np.float64)
    v_px = np.arange(cam.height, dtype=np.float64)
    uu, vv = np.meshgrid(u_px, v_px)
    d_cam = np.stack([(uu - cam.cx) / cam.fx, (vv - cam.cy) / cam.fy,
                      np.ones_like(uu)], axis=-1).reshape(-1, 3)
    seen = set()
    for pose in scene.poses:
        d_world = d_cam @ pose[:3, :3].T
        o = np.broadcast_to(pose[:3, 3], d_world.shape)
        t, _ = scene_raycast(scene, o, d_world)
        norms = np.linalg.norm(d_world, axis=1)
        t_surf = t * norms
        hit = np.isfinite(t) & (t_surf <= scene.max_range)
        if not hit.any():
            continue
        u = d_world[hit] / norms[hit, None]
        _, coords, _ = _emit_bands(pose[:3, 3], u, t_surf[hit], h,
                                   scene.truncation, False)
        mask = np.uint64((1 << 21) - 1)
        cu = coords.view(np.uint64)
        keys = ((cu[:, 0] & mask) << np.uint64(42)
                | (cu[:, 1] & mask) << np.uint64(21) | (cu[:, 2] & mask))
        seen.update(np.unique(keys).tolist())

    keys = np.array(sorted(seen), np.uint64)
    mask = np.uint64((1 << 21) - 1)
    coords = np.stack([(keys >> np.uint64(42)) & mask,
                       (keys >> np.uint64(21)) & mask,
                       keys & mask], axis=1)
    # undo the 21-bit two's-complement fold for negative coords
    coords = coords.astype(np.int64)
    coords[coords >= (1 << 20)] -= (1 << 21)
    centers = (coords.astype(np.float64) + 0.5) * h
    _, labels = scene_distance(scene, centers)
    mod = backend if hasattr(backend, "GridCore") else backend_mod.get_backend(backend)
    k = scene.num_classes
    grid = SparseGrid(h, ClosedPayload(ClosedSetConfig(num_classes=k)), backend=mod)
    counts = np.zeros((coords.shape[0], k), np.float32)
    counts[np.arange(coords.shape[0]), labels - 1] = 1.0
    grid.set_many(coords, [counts])
    return grid


def truth_grid_fused(man, backend=None) -> SparseGrid:
    """Self-consistency truth: fuse the sequence's own (noiseless) labels
    through the standard pipeline and return the semantic grid."""
    tsdf, sem = make_grids(man.fusion, closed=man.closed, open_set=man.open,
                           backend=backend)
    if sem is None:
        raise UserInputError("sequence has no semantic payload to fuse")
    for i in range(man.n_frames):
        integrate_frame(tsdf, sem, load_frame(man, i), man.fusion)
    return sem


# -- sparsity ------------------------------------------------------------------

def payload_bytes_per_voxel(grid: SparseGrid) -> int:
    dims, dtypes, _ = grid.payload.field_spec()
    total = 0
    for dim, dt in zip(dims, dtypes):
        n = int(np.prod(dim)) if isinstance(dim, tuple) else (dim if dim else 1)
        total += max(n, 1) * np.dtype(dt).itemsize
    return total


def sparsity_report(grid: SparseGrid, map_bounds=None) -> dict:
    """Resident memory against dense arrays over two reference volumes.

    `dense_bounds_bytes` spans the declared map bounds (what a dense
    implementation must allocate up front); `dense_bbox_bytes` spans the
    tight bounding box of the voxels actually touched.
    """
    stats = grid.memory_stats()
    per_voxel = payload_bytes_per_voxel(grid)
    h = grid.voxel_size
    out = {
        "active_voxels": stats.active_voxels,
        "leaf_count": stats.leaf_count,
        "internal_count": stats.internal_count,
        "resident_bytes": stats.resident_bytes,
        "payload_bytes_per_voxel": per_voxel,
    }
    coords = grid.active_coords()
    if coords.shape[0]:
        ext = coords.max(axis=0) - coords.min(axis=0) + 1
        dense_bbox = int(np.prod(ext.astype(np.float64)) * per_voxel)
        out["dense_bbox_bytes"] = dense_bbox
        out["ratio_bbox"] = stats.resident_bytes / dense_bbox if dense_bbox else np.inf
    if map_bounds is not None:
        lo, hi = np.asarray(map_bounds, np.float64)
        nvox = np.prod(np.ceil((hi - lo) / h))
        dense_bounds = int(nvox * per_voxel)
        out["dense_bounds_bytes"] = dense_bounds
        out["ratio_bounds"] = (stats.resident_bytes / dense_bounds
                               if dense_bounds else np.inf)
    return out


# -- pipeline benchmark ----------------------------------------------------------

@dataclass
class BenchReport:
    backend: str
    threads: int
    frames: list = field(default_factory=list)  # per-frame stage ms dicts
    memory: dict = field(default_factory=dict)
    sparsity: dict = field(default_factory=dict)

    @property
    def mean_ms(self) -> dict:
        if not self.frames:
            return {"preprocess": 0.0, "integrate": 0.0, "visualize": 0.0,
                    "total": 0.0}
        keys = ("preprocess", "integrate", "visualize")
        means = {k: float(np.mean([f[k] for f in self.frames])) for k in keys}
        means["total"] = float(np.mean([sum(f[k] for k in keys)
                                        for f in self.frames]))
        return means

    @property
    def fps(self) -> float:
        total = self.mean_ms["total"]
        return 1000.0 / total if total > 0 else float("inf")

    def lines(self):
        out = ["backend=%s" % self.backend, "threads=%d" % self.threads,
               "frames=%d" % len(self.frames)]
        for key, val in self.mean_ms.items():
            out.append("mean_%s_ms=%.3f" % (key, val))
        out.append("fps=%.2f" % self.fps)
        for key in sorted(self.memory):
            out.append("%s=%s" % (key, self.memory[key]))
        for key in sorted(self.sparsity):
            val = self.sparsity[key]
            out.append("%s=%.6g" % (key, val) if isinstance(val, float)
                       else "%s=%s" % (key, val))
        return out

    def write_csv(self, path: str) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["frame", "preprocess_ms", "integrate_ms",
                        "visualize_ms", "total_ms"])
            for i, f in enumerate(self.frames):
                total = f["preprocess"] + f["integrate"] + f["visualize"]
                w.writerow([i, "%.3f" % f["preprocess"], "%.3f" % f["integrate"],
                            "%.3f" % f["visualize"], "%.3f" % total])


def _rss_bytes():
    try:
        import resource
        rss_kb = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss
        return int(rss_kb) * 1024
    except Exception:
        return None


def run_benchmark(man, backend=None, threads: int = 1, mesh_every: int = 0,
                  limit=None, frame_hook=None):
    """Time the ingest -> integrate (-> extract) pipeline over a sequence.

    `mesh_every` > 0 extracts a mesh every that many frames and books the
    time under the visualize stage.  `frame_hook(i, tsdf, sem)`, if given,
    runs after each frame's integration and is booked the same way.
    Returns (report, tsdf_grid, semantic_grid) so callers can score the
    map that was just built.
    """
    from . import backend as backend_mod

    mod = backend if hasattr(backend, "GridCore") else backend_mod.get_backend(backend)
    tsdf, sem = make_grids(man.fusion, closed=man.closed, open_set=man.open,
                           backend=mod)
    rep = BenchReport(backend=getattr(mod, "BACKEND_NAME", str(mod)),
                      threads=threads)
    n = man.n_frames if limit is None else min(limit, man.n_frames)
    for i in range(n):
        t0 = time.perf_counter()
        frame = load_frame(man, i)
        t1 = time.perf_counter()
        integrate_frame(tsdf, sem, frame, man.fusion, threads=threads)
        t2 = time.perf_counter()
        vis_ms = 0.0
        if mesh_every and (i + 1) % mesh_every == 0:
            tv = time.perf_counter()
            extract_mesh(tsdf, sem)
            vis_ms = (time.perf_counter() - tv) * 1e3
        if frame_hook is not None:
            tv = time.perf_counter()
            frame_hook(i, tsdf, sem)
            vis_ms += (time.perf_counter() - tv) * 1e3
        rep.frames.append({"preprocess": (t1 - t0) * 1e3,
                           "integrate": (t2 - t1) * 1e3,
                           "visualize": vis_ms})
    stats = tsdf.memory_stats()
    sem_bytes = sem.memory_stats().resident_bytes if sem is not None else 0
    rep.memory = {"map_bytes": stats.resident_bytes + sem_bytes}
    rss = _rss_bytes()
    if rss is not None:
        rep.memory["peak_rss_bytes"] = rss
    rep.sparsity = sparsity_report(tsdf, map_bounds=man.map_bounds)
    return rep, tsdf, sem
