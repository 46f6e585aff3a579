"""TSDF fusion: frames, projective distances, and frame integration.

A frame is a set of range measurements (points in the sensor frame plus a
rigid pose).  For every measurement the voxels whose ray interval overlaps
the truncation band are updated with a running weighted mean of projective
signed distance; semantic payloads ride along on the same band voxels.

Integration is deterministic by construction: band rows are sorted by
(voxel, point, step) and reduced sequentially in that order, so results are
bit-identical for any thread count and for both backends.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from . import backend as backend_mod
from .config import FusionConfig
from .errors import PayloadMismatchError, SemvoxError, UserInputError
from .grid import KIND_CLOSED, KIND_OPEN, KIND_TSDF, SparseGrid

ROTATION_PASS_TOL = 1e-4
ROTATION_FIX_TOL = 1e-3


def validate_rotation(R: NDArray, context: str = "pose") -> NDArray[np.float64]:
    """Check a 3x3 rotation block: accept within 1e-4 of orthonormal,
    re-orthonormalize (polar factor) within 1e-3, reject beyond or when the
    block mirrors."""
    R = np.asarray(R, np.float64)
    if R.shape != (3, 3) or not np.isfinite(R).all():
        raise UserInputError(f"{context}: rotation block must be finite 3x3")
    err = float(np.abs(R @ R.T - np.eye(3)).max())
    if np.linalg.det(R) <= 0:
        raise UserInputError(f"{context}: rotation determinant not positive (mirrored)")
    if err <= ROTATION_PASS_TOL:
        return R
    if err <= ROTATION_FIX_TOL:
        u, _, vt = np.linalg.svd(R)
        fixed = u @ vt
        if np.linalg.det(fixed) <= 0:
            raise UserInputError(f"{context}: rotation not fixable by polar projection")
        return fixed
    raise UserInputError(f"{context}: rotation block off orthonormal by {err:.2e} (> 1e-3)")


@dataclass
class Frame:
    """One sensor observation: points (n, 3) in the sensor frame, an
    optional semantic payload (labels (n,) for closed-set, features (n, l)
    for open-set), and a sensor-to-world pose."""

    points: NDArray
    pose: NDArray
    labels: NDArray | None = None
    features: NDArray | None = None
    frame_id: int = 0

    def __post_init__(self):
        self.points = np.ascontiguousarray(self.points, np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise UserInputError(f"points must be (n, 3), got {self.points.shape}")
        pose = np.asarray(self.pose, np.float64)
        if pose.shape != (4, 4):
            raise UserInputError(f"pose must be 4x4, got {pose.shape}")
        if not np.isfinite(pose).all():
            raise UserInputError("pose contains non-finite values")
        if not np.allclose(pose[3], (0, 0, 0, 1), atol=1e-9):
            raise UserInputError("pose bottom row must be [0 0 0 1]")
        fixed = pose.copy()
        fixed[:3, :3] = validate_rotation(pose[:3, :3], f"frame {self.frame_id} pose")
        self.pose = fixed
        n = self.points.shape[0]
        if self.labels is not None and self.features is not None:
            raise PayloadMismatchError("frame carries both labels and features")
        if self.labels is not None:
            self.labels = np.ascontiguousarray(self.labels, np.int32)
            if self.labels.shape != (n,):
                raise PayloadMismatchError(
                    f"labels shape {self.labels.shape} != point count {n}"
                )
        if self.features is not None:
            self.features = np.ascontiguousarray(self.features, np.float64)
            if self.features.ndim != 2 or self.features.shape[0] != n:
                raise PayloadMismatchError(
                    f"features shape {self.features.shape} incompatible with {n} points"
                )

    @property
    def origin(self) -> NDArray[np.float64]:
        return self.pose[:3, 3].copy()

    def points_world(self) -> NDArray[np.float64]:
        R = self.pose[:3, :3]
        return self.points @ R.T + self.pose[:3, 3]


@dataclass
class IntegrationReport:
    points_in: int = 0
    points_used: int = 0
    skipped_nonfinite: int = 0
    skipped_range: int = 0
    skipped_degenerate: int = 0
    skipped_bad_label: int = 0
    band_hits: int = 0
    touched_voxels: int = 0
    prep_ms: float = 0.0
    kernel_ms: float = 0.0

    def as_dict(self):
        return dict(self.__dict__)


def truncate_distance(t_surf, t_voxel, truncation) -> float:
    """Projective signed distance clamped to the truncation band: positive in
    front of the surface, negative behind."""
    return float(np.clip(t_surf - t_voxel, -truncation, truncation))


def update_voxel(d_old, w_old, d, w):
    """One weighted running-mean TSDF update; zero total weight leaves the
    voxel unchanged.

    When the incoming distance equals the stored one (or the voxel is
    fresh) the true mean is exactly d, so it is written directly; repeated
    identical measurements therefore never drift by rounding.
    """
    w_new = w_old + w
    if w_new <= 0:
        return d_old, w_old
    if w_old == 0.0 or d == d_old:
        return d, w_new
    return (w_old * d_old + w * d) / w_new, w_new


def measurement_weight(d, truncation, weight_fn: str):
    """Per-update weight: constant one, or a linear ramp behind the surface
    falling from 1 at d=0 to 0 at d=-truncation."""
    if weight_fn == "constant_one":
        return 1.0
    if weight_fn == "linear_dropoff":
        return 1.0 if d >= 0 else (truncation + d) / truncation
    raise UserInputError(f"unknown weight_fn {weight_fn!r}")


def raycast_band(origin, endpoint, cfg: FusionConfig, backend=None) -> NDArray[np.int64]:
    """Ordered voxel indices whose ray interval overlaps the truncation band
    around the endpoint.  Degenerate zero-length rays warn and return an
    empty list."""
    cfg.validate()
    origin = np.asarray(origin, np.float64)
    endpoint = np.asarray(endpoint, np.float64)
    if origin.shape != (3,) or endpoint.shape != (3,):
        raise UserInputError("origin and endpoint must be 3-vectors")
    if not (np.isfinite(origin).all() and np.isfinite(endpoint).all()):
        raise UserInputError("raycast endpoints must be finite")
    dist = float(np.linalg.norm(endpoint - origin))
    if dist == 0.0:
        warnings.warn("degenerate zero-length ray", RuntimeWarning, stacklevel=2)
        return np.empty((0, 3), np.int64)
    if dist > cfg.max_range:
        raise UserInputError(f"ray length {dist:.3f} exceeds max_range {cfg.max_range}")
    mod = backend if hasattr(backend, "raycast_band") else backend_mod.get_backend(backend)
    return mod.raycast_band(origin, endpoint, cfg.voxel_size, cfg.truncation, cfg.space_carving)


def _check_grids(tsdf: SparseGrid, sem: SparseGrid | None, frame: Frame):
    if tsdf.kind != KIND_TSDF:
        raise PayloadMismatchError("geometry grid must carry a tsdf payload")
    if sem is None:
        return None
    if tsdf.voxel_size != sem.voxel_size:
        raise PayloadMismatchError(
            f"voxel size mismatch: tsdf {tsdf.voxel_size} vs semantic {sem.voxel_size}"
        )
    if sem.backend is not tsdf.backend:
        raise PayloadMismatchError("geometry and semantic grids must share a backend")
    if sem.kind == KIND_CLOSED:
        if frame.labels is None:
            raise PayloadMismatchError("closed-set grid requires per-point labels")
        return "closed"
    if sem.kind == KIND_OPEN:
        if frame.features is None:
            raise PayloadMismatchError("open-set grid requires per-point features")
        if frame.features.shape[1] != sem.payload.cfg.feature_dim:
            raise PayloadMismatchError(
                f"feature dim {frame.features.shape[1]} != grid dim "
                f"{sem.payload.cfg.feature_dim}"
            )
        return "open"
    raise PayloadMismatchError("semantic grid must carry a closed or open payload")


def integrate_frame(
    tsdf: SparseGrid,
    sem: SparseGrid | None,
    frame: Frame,
    cfg: FusionConfig,
    threads: int = 1,
) -> IntegrationReport:
    """Fuse one frame into the TSDF grid and optionally a semantic grid.

    Measurements that are non-finite, out of range, degenerate (zero length),
    or carrying an out-of-range class id are skipped and counted.
    """
    cfg.validate()
    if cfg.voxel_size != tsdf.voxel_size:
        raise PayloadMismatchError(
            f"fusion voxel_size {cfg.voxel_size} != grid voxel_size {tsdf.voxel_size}"
        )
    if tsdf.payload.truncation != cfg.truncation:
        raise PayloadMismatchError(
            f"fusion truncation {cfg.truncation} != grid truncation "
            f"{tsdf.payload.truncation}"
        )
    sem_kind = _check_grids(tsdf, sem, frame)
    if threads < 1:
        raise UserInputError(f"threads must be >= 1, got {threads}")

    t0 = time.perf_counter()
    rep = IntegrationReport(points_in=frame.points.shape[0])
    with np.errstate(invalid="ignore"):
        pw = frame.points_world()
    origin = frame.origin

    finite = np.isfinite(pw).all(axis=1)
    rep.skipped_nonfinite = int((~finite).sum())
    delta = pw - origin
    with np.errstate(invalid="ignore"):
        t_surf = np.sqrt((delta * delta).sum(axis=1))
    t_surf = np.where(np.isfinite(t_surf), t_surf, np.inf)
    degenerate = finite & (t_surf == 0.0)
    rep.skipped_degenerate = int(degenerate.sum())
    in_range = t_surf <= cfg.max_range
    rep.skipped_range = int((finite & ~degenerate & ~in_range).sum())
    keep = finite & ~degenerate & in_range

    labels = frame.labels
    feats = frame.features
    if sem_kind == "closed":
        k = sem.payload.cfg.num_classes
        good = (labels >= 1) & (labels <= k)
        rep.skipped_bad_label = int((keep & ~good).sum())
        keep &= good
    elif sem_kind == "open":
        good = np.isfinite(feats).all(axis=1)
        rep.skipped_bad_label = int((keep & ~good).sum())
        keep &= good

    idx = np.flatnonzero(keep)
    rep.points_used = int(idx.shape[0])
    if idx.shape[0] == 0:
        rep.prep_ms = (time.perf_counter() - t0) * 1e3
        return rep

    t_kept = t_surf[idx]
    u = delta[idx] / t_kept[:, None]
    lab_kept = labels[idx] if sem_kind == "closed" else None
    feat_kept = feats[idx] if sem_kind == "open" else None

    params = {
        "voxel_size": cfg.voxel_size,
        "truncation": cfg.truncation,
        "weight_fn": 0 if cfg.weight_fn == "constant_one" else 1,
        "space_carving": cfg.space_carving,
        "num_classes": sem.payload.cfg.num_classes if sem_kind == "closed" else 0,
        "lambda_floor": sem.payload.cfg.lambda_floor if sem_kind == "open" else 1e-3,
        "last_wins": sem_kind == "closed" and sem.payload.cfg.fusion == "last_wins",
    }
    t1 = time.perf_counter()
    rep.prep_ms = (t1 - t0) * 1e3
    kernel_report = tsdf.backend.integrate_points(
        tsdf.core,
        sem.core if sem is not None else None,
        sem_kind,
        origin,
        u,
        t_kept,
        lab_kept,
        feat_kept,
        params,
        threads,
    )
    rep.kernel_ms = (time.perf_counter() - t1) * 1e3
    rep.band_hits = kernel_report["band_hits"]
    rep.touched_voxels = kernel_report["touched_voxels"]
    return rep


def make_grids(cfg: FusionConfig, closed=None, open_set=None, backend=None):
    """Construct a matched (tsdf, semantic) grid pair for one run.

    Exactly one of `closed`/`open_set` may be given; with neither the
    semantic grid is None and fusion is geometry-only.
    """
    from .grid import ClosedPayload, OpenPayload, TsdfPayload

    cfg.validate()
    if closed is not None and open_set is not None:
        raise UserInputError("a run is closed-set or open-set, not both")
    mod = backend if hasattr(backend, "GridCore") else backend_mod.get_backend(backend)
    tsdf = SparseGrid(cfg.voxel_size, TsdfPayload(cfg.truncation), backend=mod)
    sem = None
    if closed is not None:
        sem = SparseGrid(cfg.voxel_size, ClosedPayload(closed), backend=mod)
    elif open_set is not None:
        sem = SparseGrid(cfg.voxel_size, OpenPayload(open_set), backend=mod)
    return tsdf, sem
