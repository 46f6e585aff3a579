"""CPU ray-march rendering of TSDF grids.

Each pixel's ray is stepped at half a voxel through observed space;
unallocated leaves are skipped in one jump to their AABB exit, so empty
sky costs a handful of iterations rather than a dense march.  A sign
change of the trilinearly interpolated distance brackets the surface and
a secant iteration polishes the crossing.

Pixels are independent: the march is vectorized over the whole live ray
set and imposes no cross-pixel ordering, so a tiled parallel backend can
replace the loop without changing results.  Rendering never allocates
grid nodes; the content hash is identical before and after.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import CameraConfig
from .errors import ConfigError, SemvoxError
from .fusion import validate_rotation
from .grid import KIND_TSDF, SparseGrid
from .mesh import default_palette, palette_colors, voxel_labels

_MODES = ("depth", "semantic", "normal")

# Secant refinement: stop when |D| < _REFINE_TOL_FRAC * truncation.
_REFINE_TOL_FRAC = 1e-4
_MAX_REFINE_ITERS = 32


@dataclass
class RenderCamera:
    """Pinhole camera: x right, y down, z forward (optical axis)."""

    pose: np.ndarray  # (4, 4) camera-to-world
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float = 0.05
    far: float = 10.0

    @classmethod
    def from_config(cls, cfg: CameraConfig, pose, near: float = 0.05,
                    far: float = 10.0) -> "RenderCamera":
        return cls(pose=np.asarray(pose, np.float64), fx=cfg.fx, fy=cfg.fy,
                   cx=cfg.cx, cy=cfg.cy, width=cfg.width, height=cfg.height,
                   near=near, far=far)

    def validate(self) -> None:
        if self.near <= 0.0:
            raise ConfigError(f"near plane must be positive, got {self.near}")
        if self.far <= self.near:
            raise ConfigError(f"far plane {self.far} must exceed near {self.near}")
        if self.width <= 0 or self.height <= 0:
            raise ConfigError("image dimensions must be positive")
        if self.fx == 0.0 or self.fy == 0.0:
            raise ConfigError("focal lengths must be nonzero")
        pose = np.asarray(self.pose, np.float64)
        if pose.shape != (4, 4):
            raise ConfigError(f"camera pose must be 4x4, got {pose.shape}")
        if not np.allclose(pose[3], (0.0, 0.0, 0.0, 1.0), atol=1e-9):
            raise ConfigError("camera pose bottom row must be (0, 0, 0, 1)")
        self.pose = pose.copy()
        self.pose[:3, :3] = validate_rotation(pose[:3, :3])

    def rays(self):
        """World-space (origins (N, 3), unit directions (N, 3)), row-major
        pixel order."""
        u = np.arange(self.width, dtype=np.float64) + 0.5
        v = np.arange(self.height, dtype=np.float64) + 0.5
        uu, vv = np.meshgrid(u, v)
        d_cam = np.stack([(uu - self.cx) / self.fx,
                          (vv - self.cy) / self.fy,
                          np.ones_like(uu)], axis=-1).reshape(-1, 3)
        d_cam /= np.linalg.norm(d_cam, axis=1, keepdims=True)
        d_world = d_cam @ np.asarray(self.pose, np.float64)[:3, :3].T
        origin = np.broadcast_to(np.asarray(self.pose, np.float64)[:3, 3],
                                 d_world.shape)
        return origin, d_world


def sample_distance(tsdf_grid: SparseGrid, points: np.ndarray):
    """Trilinear D at world points; valid only where all 8 surrounding
    voxel centers are observed.  Returns (values (N,), valid (N,))."""
    core = tsdf_grid.core
    h = tsdf_grid.voxel_size
    q = np.asarray(points, np.float64) / h - 0.5
    base = np.floor(q).astype(np.int64)
    frac = q - base
    vals = np.zeros(q.shape[0], np.float64)
    valid = np.ones(q.shape[0], bool)
    dist_field = core.fields[0]
    for c in range(8):
        off = np.array([(c >> 2) & 1, (c >> 1) & 1, c & 1], np.int64)
        leaf, slot, active = core.probe_coords(base + off)
        valid &= active
        w = np.ones(q.shape[0], np.float64)
        for ax in range(3):
            w *= frac[:, ax] if off[ax] else 1.0 - frac[:, ax]
        d_c = np.zeros(q.shape[0], np.float64)
        if active.any():
            d_c[active] = dist_field[leaf[active], slot[active]]
        vals += w * d_c
    vals[~valid] = np.nan
    return vals, valid


def _skip_empty_leaves(core, h, origin, dirs, t, rows, step):
    """Advance rays sitting in unallocated leaves to their leaf AABB exit."""
    side = 1 << core.leaf_log2
    p = origin[rows] + t[rows, None] * dirs[rows]
    lc = np.floor(p / h).astype(np.int64) >> core.leaf_log2
    d = dirs[rows]
    lo = (lc << core.leaf_log2).astype(np.float64) * h
    hi = ((lc + 1) << core.leaf_log2).astype(np.float64) * h
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lo - origin[rows]) / d
        t2 = (hi - origin[rows]) / d
    t_far = np.where(d != 0.0, np.maximum(t1, t2), np.inf)
    t_exit = t_far.min(axis=1)
    # Nudge past the boundary so the next probe lands in the next leaf.
    t[rows] += np.maximum(step, t_exit - t[rows] + 1e-3 * h)


def _march(tsdf_grid: SparseGrid, origin, dirs, near, far):
    """March all rays; returns (hit mask (N,), crossing parameter (N,))."""
    core = tsdf_grid.core
    h = tsdf_grid.voxel_size
    step = 0.5 * h
    n = dirs.shape[0]
    t = np.full(n, float(near))
    live = np.ones(n, bool)
    prev_d = np.zeros(n, np.float64)
    prev_ok = np.zeros(n, bool)
    hit = np.zeros(n, bool)
    t0 = np.zeros(n, np.float64)
    d0 = np.zeros(n, np.float64)
    t1 = np.zeros(n, np.float64)
    d1 = np.zeros(n, np.float64)

    while live.any():
        rows = np.nonzero(live)[0]
        p = origin[rows] + t[rows, None] * dirs[rows]
        vox = np.floor(p / h).astype(np.int64)
        leaf, _, _ = core.probe_coords(vox)
        absent = leaf < 0
        if absent.any():
            _skip_empty_leaves(core, h, origin, dirs, t, rows[absent], step)
            prev_ok[rows[absent]] = False
        present = rows[~absent]
        if present.size:
            d, ok = sample_distance(tsdf_grid, origin[present] + t[present, None] * dirs[present])
            cross = ok & prev_ok[present] & (prev_d[present] > 0.0) & (d <= 0.0)
            if cross.any():
                rc = present[cross]
                hit[rc] = True
                live[rc] = False
                t0[rc] = t[rc] - step
                d0[rc] = prev_d[rc]
                t1[rc] = t[rc]
                d1[rc] = d[cross]
            keep = present[~cross]
            prev_ok[keep] = ok[~cross]
            prev_d[keep] = d[~cross]
            t[keep] += step
        live &= t <= far
    return hit, _refine(tsdf_grid, origin, dirs, hit, t0, d0, t1, d1)


def _refine(tsdf_grid, origin, dirs, hit, t0, d0, t1, d1):
    """Secant-polish bracketed crossings to |D| < 1e-4 * truncation."""
    tol = _REFINE_TOL_FRAC * tsdf_grid.payload.truncation
    rows = np.nonzero(hit)[0]
    t_hit = np.zeros(hit.shape[0], np.float64)
    if rows.size == 0:
        return t_hit
    a_t, a_d = t0[rows].copy(), d0[rows].copy()
    b_t, b_d = t1[rows].copy(), d1[rows].copy()
    best = b_t.copy()
    open_rows = np.arange(rows.size)
    for _ in range(_MAX_REFINE_ITERS):
        if open_rows.size == 0:
            break
        at, ad = a_t[open_rows], a_d[open_rows]
        bt, bd = b_t[open_rows], b_d[open_rows]
        tm = bt - bd * (bt - at) / (bd - ad)
        dm, ok = sample_distance(
            tsdf_grid, origin[rows[open_rows]] + tm[:, None] * dirs[rows[open_rows]])
        # A sample straying out of observed space ends refinement there.
        dm = np.where(ok, dm, 0.0)
        best[open_rows] = tm
        done = ~ok | (np.abs(dm) < tol)
        pos = dm > 0.0
        sel = open_rows[pos & ~done]
        a_t[sel], a_d[sel] = tm[pos & ~done], dm[pos & ~done]
        sel = open_rows[~pos & ~done]
        b_t[sel], b_d[sel] = tm[~pos & ~done], dm[~pos & ~done]
        open_rows = open_rows[~done]
    t_hit[rows] = best
    return t_hit


def render(tsdf_grid: SparseGrid, semantic_grid: SparseGrid | None,
           camera: RenderCamera, mode: str = "depth",
           embeddings: np.ndarray | None = None,
           palette: np.ndarray | None = None) -> np.ndarray:
    """Render the grid from a camera viewpoint.

    mode "depth"    -> (H, W) float64, distance along the ray in meters
    mode "semantic" -> (H, W, 3) uint8, palette color of the surface voxel
    mode "normal"   -> (H, W, 3) float64, unit outward surface normal

    Background pixels are 0 in every mode; semantic surfaces whose class
    is unknown or rejected render as the palette's gray row.
    """
    if mode not in _MODES:
        raise ConfigError(f"render mode must be one of {_MODES}, got {mode!r}")
    if tsdf_grid.kind != KIND_TSDF:
        raise SemvoxError("render needs a TSDF grid, got kind %d" % tsdf_grid.kind)
    if mode == "semantic" and semantic_grid is None:
        raise ConfigError("semantic mode needs a semantic grid")
    camera.validate()

    origin, dirs = camera.rays()
    hit, t_hit = _march(tsdf_grid, origin, dirs, camera.near, camera.far)
    shape = (camera.height, camera.width)

    if mode == "depth":
        return (hit * t_hit).reshape(shape)

    if mode == "normal":
        out = np.zeros((dirs.shape[0], 3), np.float64)
        rows = np.nonzero(hit)[0]
        if rows.size:
            h = tsdf_grid.voxel_size
            p = origin[rows] + t_hit[rows, None] * dirs[rows]
            grad = np.zeros((rows.size, 3), np.float64)
            ok = np.ones(rows.size, bool)
            for ax in range(3):
                e = np.zeros(3)
                e[ax] = 0.5 * h
                dp, okp = sample_distance(tsdf_grid, p + e)
                dn, okn = sample_distance(tsdf_grid, p - e)
                ok &= okp & okn
                grad[:, ax] = np.where(okp & okn, dp - dn, 0.0)
            norm = np.linalg.norm(grad, axis=1)
            ok &= norm > 0.0
            grad[ok] /= norm[ok, None]
            grad[~ok] = 0.0
            out[rows] = grad
        return out.reshape(shape + (3,))

    # semantic
    out = np.zeros((dirs.shape[0], 3), np.uint8)
    rows = np.nonzero(hit)[0]
    if rows.size:
        h = tsdf_grid.voxel_size
        p = origin[rows] + t_hit[rows, None] * dirs[rows]
        nearest = np.rint(p / h - 0.5).astype(np.int64)
        (_, w_vals), _ = tsdf_grid.probe_many(nearest)
        labels = voxel_labels(semantic_grid, nearest, w_vals, embeddings)
        if palette is None:
            from .mesh import _palette_size
            palette = default_palette(_palette_size(semantic_grid, embeddings))
        out[rows] = palette_colors(labels, palette)
    return out.reshape(shape + (3,))
