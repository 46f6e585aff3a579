"""Thin scripting layer over the semvox mapping engine.

Construct a :class:`Mapper` from a flat config mapping, feed it frames as
plain arrays, and pull out meshes, per-voxel similarities, and occupancy
statistics, the shape of workflow a notebook evaluation wants.  This
package adds no numerics of its own: every operation delegates to the
engine, arrays cross the boundary as views where the engine's layout
permits (one copy at the boundary otherwise, performed by the engine's
own input conversion), and every returned value is bit-identical to what
the engine's deterministic pipeline produces for the same inputs.
Failures surface as the engine's error classes carrying the engine's
messages.

A Mapper instance is single-threaded from the scripting side; the engine
may parallelize internally via the ``threads`` config key, which does not
change results.
"""

import dataclasses

import numpy as np

from semvox import (
    ClosedPayload,
    ClosedSetConfig,
    ConfigError,
    Frame,
    FusionConfig,
    OpenPayload,
    OpenSetConfig,
    PayloadMismatchError,
    TsdfPayload,
    chamfer_l2,
    cosine_to_embeddings,
    extract_mesh,
    integrate_frame,
    load_grids,
    make_grids,
    miou,
    save_grids,
    sparsity_report,
)

__version__ = "0.1.0"

__all__ = ["Mapper", "load_grid", "chamfer", "miou"]

# Metric entry points are the engine's own functions, re-exported under
# the names scripts expect; no wrapper layer to drift out of sync.
chamfer = chamfer_l2

_FUSION_KEYS = {f.name for f in dataclasses.fields(FusionConfig)}
_CLOSED_KEYS = {f.name for f in dataclasses.fields(ClosedSetConfig)}
_OPEN_KEYS = {f.name for f in dataclasses.fields(OpenSetConfig)}
_MAPPER_KEYS = {"threads", "backend", "map_bounds"}


class Mapper:
    """One mapping run: a TSDF grid plus an optional semantic grid.

    Configuration is a single flat mapping (or keyword arguments, which
    override the mapping).  Keys are routed to the engine's config
    dataclasses by field name: fusion geometry (``voxel_size``,
    ``truncation``, ``weight_fn``, ``space_carving``, ``max_range``),
    closed-set semantics (``num_classes``, ``prior_alpha``, ``fusion``,
    ``count_dtype``), open-set semantics (``feature_dim``, ``prior_beta``,
    ``lambda_floor``, ``confidence_threshold``, ``temperature``,
    ``state_dtype``), plus ``threads`` (engine-internal parallelism),
    ``backend`` (engine backend name), and ``map_bounds`` (declared scene
    bounds reported by :meth:`stats`).

    ``num_classes`` >= 1 selects a closed-set run, ``feature_dim`` >= 1 an
    open-set run, neither a geometry-only run; the engine rejects both at
    once.
    """

    def __init__(self, config=None, /, **overrides):
        merged = {}
        if config is not None:
            merged.update(config)
        merged.update(overrides)
        unknown = set(merged) - _FUSION_KEYS - _CLOSED_KEYS - _OPEN_KEYS - _MAPPER_KEYS
        if unknown:
            raise ConfigError("unknown config keys: " + ", ".join(sorted(unknown)))

        threads = merged.pop("threads", 1)
        if not isinstance(threads, (int, np.integer)) or threads < 1:
            raise ConfigError(f"threads must be an integer >= 1, got {threads!r}")
        self._threads = int(threads)
        backend = merged.pop("backend", None)
        self._map_bounds = merged.pop("map_bounds", None)

        fusion_kw = {k: v for k, v in merged.items() if k in _FUSION_KEYS}
        closed_kw = {k: v for k, v in merged.items() if k in _CLOSED_KEYS}
        open_kw = {k: v for k, v in merged.items() if k in _OPEN_KEYS}

        closed = open_set = None
        if closed_kw.get("num_classes", 0):
            closed = ClosedSetConfig(**closed_kw)
        elif closed_kw:
            raise ConfigError(
                "closed-set keys %s need num_classes >= 1"
                % ", ".join(sorted(closed_kw))
            )
        if open_kw.get("feature_dim", 0):
            open_set = OpenSetConfig(**open_kw)
        elif open_kw:
            raise ConfigError(
                "open-set keys %s need feature_dim >= 1" % ", ".join(sorted(open_kw))
            )

        self._cfg = FusionConfig(**fusion_kw)
        self._tsdf, self._sem = make_grids(
            self._cfg, closed=closed, open_set=open_set, backend=backend
        )
        self._frames = 0

    @property
    def config(self) -> FusionConfig:
        """The engine fusion config this run was built with."""
        return self._cfg

    @property
    def grids(self):
        """Live (tsdf, semantic) engine grids; semantic is None for a
        geometry-only run.  These are the working grids, not copies, so
        they can be handed straight to the engine's evaluation functions.
        """
        return self._tsdf, self._sem

    def integrate(self, points, pose, labels=None, features=None):
        """Fuse one frame given sensor-frame points (n, 3), a 4x4
        sensor-to-world pose, and at most one semantic payload: integer
        ``labels`` (n,) for a closed-set run or float ``features`` (n, l)
        for an open-set run.  Returns the engine's integration report.
        """
        frame = Frame(points=points, pose=pose, labels=labels,
                      features=features, frame_id=self._frames)
        report = integrate_frame(self._tsdf, self._sem, frame, self._cfg,
                                 threads=self._threads)
        self._frames += 1
        return report

    def extract(self, min_weight: float = 0.5, embeddings=None, palette=None):
        """Triangulate the current zero level set; returns the engine's
        labeled mesh (``vertices``, ``triangles``, ``labels``, ``colors``).
        An empty map yields a zero-length vertex array.  ``embeddings``
        (k, l) assigns open-set labels by best match.
        """
        return extract_mesh(self._tsdf, self._sem, min_weight=min_weight,
                            embeddings=embeddings, palette=palette)

    def query(self, embedding):
        """Score every active voxel's feature mean against one embedding.

        Returns (coords (n, 3) int, similarity (n,) float64), the engine's
        cosine similarities unmodified; a voxel whose stored mean is all
        zero scores NaN.  Open-set runs only.
        """
        if self._sem is None or not isinstance(self._sem.payload, OpenPayload):
            raise PayloadMismatchError("embedding query needs an open-set map")
        q = np.ascontiguousarray(embedding, np.float64).reshape(-1)
        dim = self._sem.payload.cfg.feature_dim
        if q.shape[0] != dim:
            raise PayloadMismatchError(
                f"query vector has dim {q.shape[0]}, map stores {dim}")
        coords, (means, _beta) = self._sem.active_values()
        sims = cosine_to_embeddings(means, q[None, :])[:, 0]
        return np.asarray(coords), sims

    def stats(self) -> dict:
        """Occupancy and memory report for the TSDF grid (measured against
        ``map_bounds`` when configured), plus ``frames_integrated`` and,
        for semantic runs, ``semantic_active_voxels``.
        """
        report = dict(sparsity_report(self._tsdf, self._map_bounds))
        report["frames_integrated"] = self._frames
        if self._sem is not None:
            report["semantic_active_voxels"] = sparsity_report(
                self._sem)["active_voxels"]
        return report

    def save(self, path) -> None:
        """Write the current grids as a snapshot the CLI and
        :func:`load_grid` both read."""
        save_grids(path, [g for g in (self._tsdf, self._sem) if g is not None])


def load_grid(path, backend=None):
    """Read a snapshot written by :meth:`Mapper.save` or the CLI.

    Returns (tsdf, semantic) engine grids; semantic is None when the
    snapshot holds geometry only.
    """
    tsdf = sem = None
    for g in load_grids(path, backend=backend):
        if isinstance(g.payload, TsdfPayload) and tsdf is None:
            tsdf = g
        elif isinstance(g.payload, (ClosedPayload, OpenPayload)) and sem is None:
            sem = g
    return tsdf, sem
