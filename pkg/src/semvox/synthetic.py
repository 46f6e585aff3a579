"""Analytic scenes: exact geometry for generating and judging test data.

Each scene is a handful of primitives with closed-form distance and
ray-intersection functions, a camera trajectory, and fusion defaults.
`write_sequence` rasterizes the scene into depth/label (or feature)
images plus poses, palette, embeddings, and a manifest, so the full
ingest -> fusion -> eval pipeline can run against ground truth that is
known exactly rather than recorded.

Depth rasters store z-depth (not ray length) so that the pinhole
back-projection recovers points exactly on the analytic surfaces.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .config import CameraConfig
from .errors import ConfigError
from .ingest import save_embeddings, save_palette, save_poses, write_slim
from .mesh import default_palette

_EPS = 1e-12


# -- primitives ---------------------------------------------------------------

@dataclass
class Rect:
    """Finite one-sided-thin rectangle; u/v are unit in-plane axes."""

    center: np.ndarray
    axis_u: np.ndarray
    axis_v: np.ndarray
    half_u: float
    half_v: float
    class_id: int

    @property
    def normal(self) -> np.ndarray:
        return np.cross(self.axis_u, self.axis_v)

    def bbox(self):
        ext = (np.abs(self.axis_u) * self.half_u
               + np.abs(self.axis_v) * self.half_v)
        return self.center - ext, self.center + ext

    def area(self) -> float:
        return 4.0 * self.half_u * self.half_v

    def sample(self, n: int, rng) -> np.ndarray:
        lu = rng.uniform(-self.half_u, self.half_u, n)
        lv = rng.uniform(-self.half_v, self.half_v, n)
        return self.center + lu[:, None] * self.axis_u + lv[:, None] * self.axis_v

    def distance(self, p: np.ndarray) -> np.ndarray:
        q = p - self.center
        lu = q @ self.axis_u
        lv = q @ self.axis_v
        ln = q @ self.normal
        du = np.maximum(np.abs(lu) - self.half_u, 0.0)
        dv = np.maximum(np.abs(lv) - self.half_v, 0.0)
        return np.sqrt(du * du + dv * dv + ln * ln)

    def raycast(self, o: np.ndarray, d: np.ndarray):
        n = self.normal
        denom = d @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((self.center - o) @ n) / denom
        t = np.where(np.abs(denom) > _EPS, t, np.inf)
        q = o + np.where(np.isfinite(t), t, 0.0)[:, None] * d - self.center
        ok = (np.isfinite(t) & (t > _EPS)
              & (np.abs(q @ self.axis_u) <= self.half_u)
              & (np.abs(q @ self.axis_v) <= self.half_v))
        return np.where(ok, t, np.inf)


@dataclass
class Sphere:
    center: np.ndarray
    radius: float
    class_id: int

    def bbox(self):
        r = np.full(3, self.radius)
        return self.center - r, self.center + r

    def area(self) -> float:
        return 4.0 * np.pi * self.radius ** 2

    def sample(self, n: int, rng) -> np.ndarray:
        v = rng.normal(size=(n, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        return self.center + self.radius * v

    def distance(self, p: np.ndarray) -> np.ndarray:
        return np.abs(np.linalg.norm(p - self.center, axis=1) - self.radius)

    def signed(self, p: np.ndarray) -> np.ndarray:
        return np.linalg.norm(p - self.center, axis=1) - self.radius

    def raycast(self, o: np.ndarray, d: np.ndarray):
        oc = o - self.center
        a = (d * d).sum(axis=1)
        b = (oc * d).sum(axis=1)
        c = (oc * oc).sum(axis=1) - self.radius ** 2
        disc = b * b - a * c
        sq = np.sqrt(np.maximum(disc, 0.0))
        t_near = (-b - sq) / a
        t_far = (-b + sq) / a
        t = np.where(t_near > _EPS, t_near, t_far)
        return np.where((disc > 0.0) & (t > _EPS), t, np.inf)


@dataclass
class Box:
    center: np.ndarray
    half: np.ndarray
    class_id: int

    def bbox(self):
        return self.center - self.half, self.center + self.half

    def area(self) -> float:
        a, b, c = self.half
        return 8.0 * (a * b + b * c + c * a)

    def sample(self, n: int, rng) -> np.ndarray:
        a, b, c = self.half
        face_area = np.array([b * c, b * c, a * c, a * c, a * b, a * b])
        face = rng.choice(6, n, p=face_area / face_area.sum())
        pts = rng.uniform(-1.0, 1.0, (n, 3)) * self.half
        axis = face // 2
        sign = np.where(face % 2 == 0, -1.0, 1.0)
        pts[np.arange(n), axis] = sign * self.half[axis]
        return self.center + pts

    def distance(self, p: np.ndarray) -> np.ndarray:
        q = np.abs(p - self.center) - self.half
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
        inside = np.minimum(q.max(axis=1), 0.0)
        return np.abs(outside + inside)

    def raycast(self, o: np.ndarray, d: np.ndarray):
        lo = self.center - self.half
        hi = self.center + self.half
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (lo - o) / d
            t2 = (hi - o) / d
        tmin = np.minimum(t1, t2)
        tmax = np.maximum(t1, t2)
        # rays parallel to an axis never cross its slab: empty unless inside
        par = np.abs(d) <= _EPS
        between = (o > lo) & (o < hi)
        tmin = np.where(par, np.where(between, -np.inf, np.inf), tmin)
        tmax = np.where(par, np.where(between, np.inf, -np.inf), tmax)
        tn = tmin.max(axis=1)
        tf = tmax.min(axis=1)
        t = np.where(tn > _EPS, tn, tf)
        return np.where((tn <= tf) & (t > _EPS), t, np.inf)


@dataclass
class Cylinder:
    """Capped cylinder along the z axis."""

    center: np.ndarray
    radius: float
    half_height: float
    class_id: int

    def bbox(self):
        ext = np.array([self.radius, self.radius, self.half_height])
        return self.center - ext, self.center + ext

    def area(self) -> float:
        side = 2.0 * np.pi * self.radius * 2.0 * self.half_height
        return side + 2.0 * np.pi * self.radius ** 2

    def sample(self, n: int, rng) -> np.ndarray:
        side = 2.0 * np.pi * self.radius * 2.0 * self.half_height
        cap = np.pi * self.radius ** 2
        which = rng.choice(3, n, p=np.array([side, cap, cap]) / (side + 2 * cap))
        ang = rng.uniform(0.0, 2.0 * np.pi, n)
        r = self.radius * np.sqrt(rng.uniform(0.0, 1.0, n))
        rr = np.where(which == 0, self.radius, r)
        z = np.where(which == 0, rng.uniform(-1.0, 1.0, n) * self.half_height,
                     np.where(which == 1, -self.half_height, self.half_height))
        pts = np.stack([rr * np.cos(ang), rr * np.sin(ang), z], axis=1)
        return self.center + pts

    def distance(self, p: np.ndarray) -> np.ndarray:
        q = p - self.center
        dr = np.linalg.norm(q[:, :2], axis=1) - self.radius
        dz = np.abs(q[:, 2]) - self.half_height
        outside = np.sqrt(np.maximum(dr, 0.0) ** 2 + np.maximum(dz, 0.0) ** 2)
        inside = np.minimum(np.maximum(dr, dz), 0.0)
        return np.abs(outside + inside)

    def raycast(self, o: np.ndarray, d: np.ndarray):
        q = o - self.center
        best = np.full(o.shape[0], np.inf)
        # side wall
        a = d[:, 0] ** 2 + d[:, 1] ** 2
        b = q[:, 0] * d[:, 0] + q[:, 1] * d[:, 1]
        c = q[:, 0] ** 2 + q[:, 1] ** 2 - self.radius ** 2
        disc = b * b - a * c
        ok = (disc > 0.0) & (a > _EPS)
        sq = np.sqrt(np.maximum(disc, 0.0))
        with np.errstate(divide="ignore", invalid="ignore"):
            for sign in (-1.0, 1.0):
                t = (-b + sign * sq) / a
                z = q[:, 2] + t * d[:, 2]
                hit = ok & (t > _EPS) & (np.abs(z) <= self.half_height)
                best = np.where(hit & (t < best), t, best)
        # caps
        with np.errstate(divide="ignore", invalid="ignore"):
            for zc in (-self.half_height, self.half_height):
                t = (zc - q[:, 2]) / d[:, 2]
                xy = q[:, :2] + t[:, None] * d[:, :2]
                hit = ((np.abs(d[:, 2]) > _EPS) & (t > _EPS)
                       & ((xy ** 2).sum(axis=1) <= self.radius ** 2))
                best = np.where(hit & (t < best), t, best)
        return best


# -- scenes --------------------------------------------------------------------

@dataclass
class Scene:
    name: str
    primitives: list
    num_classes: int
    class_names: dict
    poses: list
    camera: CameraConfig
    voxel_size: float
    truncation: float
    max_range: float
    map_bounds: np.ndarray  # (2, 3) meters
    feature_dim: int = 0  # defaults to num_classes

    def __post_init__(self):
        if self.feature_dim == 0:
            self.feature_dim = self.num_classes


def scene_distance(scene: Scene, points: np.ndarray):
    """Unsigned distance to the nearest surface and its class id."""
    points = np.asarray(points, np.float64)
    dists = np.stack([prim.distance(points) for prim in scene.primitives], axis=1)
    nearest = np.argmin(dists, axis=1)
    labels = np.array([prim.class_id for prim in scene.primitives], np.int32)[nearest]
    return dists[np.arange(points.shape[0]), nearest], labels


def scene_raycast(scene: Scene, origins: np.ndarray, dirs: np.ndarray):
    """First-hit parameter and class along each ray; miss -> t inf, label 0."""
    origins = np.asarray(origins, np.float64)
    dirs = np.asarray(dirs, np.float64)
    t_all = np.stack([prim.raycast(origins, dirs) for prim in scene.primitives], axis=1)
    nearest = np.argmin(t_all, axis=1)
    t = t_all[np.arange(origins.shape[0]), nearest]
    labels = np.array([prim.class_id for prim in scene.primitives], np.int32)[nearest]
    labels = np.where(np.isfinite(t), labels, 0).astype(np.int32)
    return t, labels


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-to-world pose with +z toward target and image y pointing
    world-down (right-handed; columns are the camera axes)."""
    eye = np.asarray(eye, np.float64)
    fwd = np.asarray(target, np.float64) - eye
    fwd = fwd / np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, np.float64))
    nr = np.linalg.norm(right)
    if nr < 1e-9:
        right = np.array([1.0, 0.0, 0.0])
    else:
        right = right / nr
    down = np.cross(fwd, right)
    pose = np.eye(4)
    pose[:3, 0] = right
    pose[:3, 1] = down
    pose[:3, 2] = fwd
    pose[:3, 3] = eye
    return pose


def _orbit_poses(rings):
    """Concentric circular orbits: (radius, height, target, count) each."""
    poses = []
    for r_idx, (radius, height, target, count) in enumerate(rings):
        for i in range(count):
            ang = 2.0 * np.pi * (i + r_idx / len(rings)) / count
            eye = (radius * np.cos(ang), radius * np.sin(ang), height)
            poses.append(look_at(eye, target))
    return poses


def _sphere_poses(n, radius, target):
    """Viewpoints spread evenly over the full view sphere (golden spiral)."""
    target = np.asarray(target, np.float64)
    poses = []
    golden = np.pi * (3.0 - np.sqrt(5.0))
    for i in range(n):
        z = 1.0 - 2.0 * (i + 0.5) / n
        r = np.sqrt(max(1.0 - z * z, 0.0))
        ang = golden * i
        eye = target + radius * np.array([r * np.cos(ang), r * np.sin(ang), z])
        poses.append(look_at(eye, target))
    return poses


def _object_views(center, orbit_radius, below_z, n_side=8, extra_below=()):
    """Side orbit plus straight-down and straight-up views of one object."""
    cx, cy, cz = center
    poses = []
    for i in range(n_side):
        ang = 2.0 * np.pi * (i + 0.31) / n_side
        eye = (cx + orbit_radius * np.cos(ang), cy + orbit_radius * np.sin(ang), cz)
        poses.append(look_at(eye, center))
    poses.append(look_at((cx, cy, cz + 1.7), center))
    poses.append(look_at((cx, cy, below_z), center))
    for dx, dy in extra_below:
        poses.append(look_at((cx + dx, cy + dy, below_z), (cx + dx, cy + dy, cz)))
    return poses


def _room_poses():
    """100 views engineered to see every band voxel near-perpendicularly.

    Projective fusion only reaches truncation * cos(incidence) behind a
    surface, so each face needs at least one close-to-normal observation
    or the analytic truth band stays partly unexplained.
    """
    poses = []
    # general rings: context, undersides, floor under the objects
    poses += _orbit_poses([
        (2.2, 1.4, (0.0, 0.0, 1.0), 24),
        (2.6, 0.35, (0.0, 0.0, 1.1), 23),
    ])
    # straight-down floor sweep
    for x in (-2.0, -0.67, 0.67, 2.0):
        for y in (-2.0, -0.67, 0.67, 2.0):
            poses.append(look_at((x, y, 2.9), (x, y, 0.0)))
    # head-on wall views
    for x in (-2.0, 0.0, 2.0):
        for z in (0.8, 2.2):
            poses.append(look_at((x, 0.0, z), (x, 3.0, z)))
    # per-object inspection orbits
    poses += _object_views((-1.2, -0.5, 1.0), 1.1, 0.12)
    poses += _object_views((1.325, 0.825, 0.925), 1.3, 0.08,
                           extra_below=((0.12, 0.0),))
    poses += _object_views((0.2, -1.6, 1.125), 1.1, 0.10)
    return poses


def scene_sphere() -> Scene:
    cam = CameraConfig(fx=120.0, fy=120.0, cx=80.0, cy=60.0, width=160, height=120,
                       depth_scale=1e-3)
    return Scene(
        name="sphere",
        primitives=[Sphere(np.zeros(3), 1.0, 1)],
        num_classes=2,
        class_names={0: "void", 1: "sphere", 2: "unused"},
        poses=_sphere_poses(64, 3.0, (0.0, 0.0, 0.0)),
        camera=cam,
        voxel_size=0.02,
        truncation=0.06,
        max_range=6.0,
        map_bounds=np.array([[-4.0, -4.0, -2.0], [4.0, 4.0, 2.0]]),
    )


def scene_room() -> Scene:
    """Floor, one wall, and three floating primitives; five classes.

    Objects float clear of the floor by more than twice the truncation
    band so every band voxel is observable and no two bands overlap.
    Planar faces sit on voxel-center planes (odd multiples of h/2), so
    the truncation band ends mid-voxel instead of straddling a lattice
    boundary where sub-millimeter depth rounding could flip membership.
    """
    prims = [
        Rect(np.array([0.0, 0.0, 0.025]), np.array([1.0, 0.0, 0.0]),
             np.array([0.0, 1.0, 0.0]), 3.0, 3.0, 1),
        Rect(np.array([0.0, 2.975, 1.5]), np.array([1.0, 0.0, 0.0]),
             np.array([0.0, 0.0, 1.0]), 3.0, 1.475, 2),
        Sphere(np.array([-1.2, -0.5, 1.0]), 0.5, 3),
        Box(np.array([1.325, 0.825, 0.925]), np.array([0.4, 0.3, 0.35]), 4),
        Cylinder(np.array([0.2, -1.6, 1.125]), 0.3, 0.5, 5),
    ]
    cam = CameraConfig(fx=50.0, fy=50.0, cx=40.0, cy=30.0, width=80, height=60,
                       depth_scale=2e-4)
    return Scene(
        name="room",
        primitives=prims,
        num_classes=5,
        class_names={0: "void", 1: "floor", 2: "wall", 3: "ball",
                     4: "crate", 5: "drum"},
        poses=_room_poses(),
        camera=cam,
        voxel_size=0.05,
        truncation=0.15,
        max_range=9.0,
        map_bounds=np.array([[-9.0, -9.0, -5.0], [9.0, 9.0, 7.0]]),
    )


def scene_plane() -> Scene:
    cam = CameraConfig(fx=60.0, fy=60.0, cx=40.0, cy=30.0, width=80, height=60,
                       depth_scale=1e-3)
    prims = [Rect(np.array([0.0, 0.0, 0.5]), np.array([1.0, 0.0, 0.0]),
                  np.array([0.0, 1.0, 0.0]), 1.0, 1.0, 1)]
    poses = [look_at((0.8 * np.cos(a), 0.8 * np.sin(a), 2.2), (0.0, 0.0, 0.5))
             for a in np.linspace(0.0, 2.0 * np.pi, 10, endpoint=False)]
    return Scene(
        name="plane",
        primitives=prims,
        num_classes=2,
        class_names={0: "void", 1: "slab", 2: "unused"},
        poses=poses,
        camera=cam,
        voxel_size=0.05,
        truncation=0.15,
        max_range=6.0,
        map_bounds=np.array([[-4.0, -4.0, -2.0], [4.0, 4.0, 4.0]]),
    )


_SCENES = {"sphere": scene_sphere, "room": scene_room, "plane": scene_plane}


def make_scene(name: str) -> Scene:
    if name not in _SCENES:
        raise ConfigError(f"unknown scene {name!r}; available: "
                          + ", ".join(sorted(_SCENES)))
    return _SCENES[name]()


def scene_names():
    return sorted(_SCENES)


# -- sequence generation --------------------------------------------------------

def render_scene_frame(scene: Scene, pose: np.ndarray):
    """Exact z-depth and class rasters for one camera pose."""
    cam = scene.camera
    u = np.arange(cam.width, dtype=np.float64)
    v = np.arange(cam.height, dtype=np.float64)
    uu, vv = np.meshgrid(u, v)
    d_cam = np.stack([(uu - cam.cx) / cam.fx, (vv - cam.cy) / cam.fy,
                      np.ones_like(uu)], axis=-1).reshape(-1, 3)
    R = pose[:3, :3]
    d_world = d_cam @ R.T
    o = np.broadcast_to(pose[:3, 3], d_world.shape)
    t, labels = scene_raycast(scene, o, d_world)
    # d_cam has unit z, so the ray parameter is the z-depth in meters.
    depth = np.where(np.isfinite(t) & (t <= scene.max_range), t, 0.0)
    labels = np.where(depth > 0.0, labels, 0)
    return depth.reshape(cam.height, cam.width), labels.reshape(cam.height, cam.width)


def _flip_labels(labels, num_classes, flip_prob, rng):
    """Resample a fraction of the labels uniformly over the wrong classes."""
    flat = labels.ravel()
    valid = np.nonzero(flat > 0)[0]
    flip = valid[rng.random(valid.shape[0]) < flip_prob]
    if flip.size:
        draw = rng.integers(0, num_classes - 1, flip.size)
        wrong = draw + 1 + (draw + 1 >= flat[flip])
        flat[flip] = wrong
    return flat.reshape(labels.shape)


def write_sequence(scene: Scene, outdir: str, mode: str = "closed",
                   noise: float = 0.0, seed: int = 0) -> str:
    """Write a full synthetic sequence; returns the manifest path."""
    if mode not in ("closed", "open"):
        raise ConfigError(f"mode must be closed or open, got {mode!r}")
    frames_dir = os.path.join(outdir, "frames")
    os.makedirs(frames_dir, exist_ok=True)
    k = scene.num_classes

    for i, pose in enumerate(scene.poses):
        depth, labels = render_scene_frame(scene, pose)
        if noise > 0.0:
            rng = np.random.default_rng(100003 * seed + i)
            labels = _flip_labels(labels.copy(), k, noise, rng)
        depth_q = np.clip(np.round(depth / scene.camera.depth_scale), 0, 65535)
        write_slim(os.path.join(frames_dir, "depth_%04d.slim" % i),
                   depth_q.astype(np.uint16))
        if mode == "closed":
            write_slim(os.path.join(frames_dir, "labels_%04d.slim" % i),
                       labels.astype(np.uint16))
        else:
            onehot = np.zeros(labels.shape + (k,), np.float32)
            ii, jj = np.nonzero(labels > 0)
            onehot[ii, jj, labels[ii, jj] - 1] = 1.0
            write_slim(os.path.join(frames_dir, "feat_%04d.slim" % i), onehot)

    save_poses(os.path.join(outdir, "poses.txt"), scene.poses)
    palette = default_palette(k)
    save_palette(os.path.join(outdir, "palette.csv"), palette, scene.class_names)
    basis = np.eye(k, dtype=np.float64)
    names = [scene.class_names.get(c, "class_%d" % c) for c in range(1, k + 1)]
    save_embeddings(os.path.join(outdir, "labels.slem"), names, basis)

    cam = scene.camera
    manifest = os.path.join(outdir, "manifest.ini")
    with open(manifest, "w", encoding="ascii") as fh:
        fh.write("[sequence]\n")
        fh.write("name = %s\n" % scene.name)
        fh.write("depth = frames/depth_*.slim\n")
        if mode == "closed":
            fh.write("labels = frames/labels_*.slim\n")
        else:
            fh.write("features = frames/feat_*.slim\n")
        fh.write("poses = poses.txt\n")
        lo, hi = scene.map_bounds
        fh.write("map_bounds = %g %g %g %g %g %g\n\n" % (*lo, *hi))
        fh.write("[camera]\n")
        for key in ("fx", "fy", "cx", "cy"):
            fh.write("%s = %g\n" % (key, getattr(cam, key)))
        fh.write("width = %d\nheight = %d\n" % (cam.width, cam.height))
        fh.write("depth_scale = %g\nstride = %d\n\n" % (cam.depth_scale, cam.stride))
        fh.write("[fusion]\n")
        fh.write("voxel_size = %g\n" % scene.voxel_size)
        fh.write("truncation = %g\n" % scene.truncation)
        fh.write("max_range = %g\n\n" % scene.max_range)
        fh.write("[semantics]\n")
        fh.write("mode = %s\n" % mode)
        if mode == "closed":
            fh.write("num_classes = %d\n" % k)
            fh.write("palette = palette.csv\n")
        else:
            fh.write("feature_dim = %d\n" % k)
            fh.write("embeddings = labels.slem\n")
            fh.write("palette = palette.csv\n")
    return manifest


def sample_surface(scene: Scene, n: int, seed: int = 0):
    """Area-weighted uniform samples of the whole scene surface."""
    rng = np.random.default_rng(seed)
    areas = np.array([prim.area() for prim in scene.primitives], np.float64)
    counts = rng.multinomial(n, areas / areas.sum())
    pts = [prim.sample(c, rng) for prim, c in zip(scene.primitives, counts) if c]
    labels = [np.full(c, prim.class_id, np.int32)
              for prim, c in zip(scene.primitives, counts) if c]
    return np.concatenate(pts, axis=0), np.concatenate(labels)


def truth_band_coords(scene: Scene, voxel_size: float, truncation: float,
                      chunk: int = 262144):
    """Voxels whose center sits within the observable truncation band.

    A voxel belongs to the band when its center lies within
    truncation + (h/2) * ||n||_1 of the surface (n the unit surface
    normal), which is exactly the set a head-on sensor pass can brush.
    Returns (coords (N, 3) int64, labels (N,), distances (N,)).
    """
    h = float(voxel_size)
    pad = truncation + h
    boxes = []
    for prim in scene.primitives:
        lo, hi = prim.bbox()
        ilo = np.floor((lo - pad) / h).astype(np.int64)
        ihi = np.ceil((hi + pad) / h).astype(np.int64)
        boxes.append((ilo, ihi))
    # dedupe voxels shared between overlapping primitive boxes
    seen = set()
    out_c, out_l, out_d = [], [], []
    for ilo, ihi in boxes:
        ext = ihi - ilo
        total = int(np.prod(ext))
        for start in range(0, total, chunk):
            stop = min(start + chunk, total)
            flat = np.arange(start, stop, dtype=np.int64)
            ij = flat // ext[2]
            coords = np.stack([ilo[0] + ij // ext[1],
                               ilo[1] + ij % ext[1],
                               ilo[2] + flat % ext[2]], axis=1)
            mask = np.uint64((1 << 21) - 1)
            cu = coords.view(np.uint64)
            key = ((cu[:, 0] & mask) << np.uint64(42)
                   | (cu[:, 1] & mask) << np.uint64(21)
                   | (cu[:, 2] & mask))
            fresh = np.array([k not in seen for k in key.tolist()], bool)
            seen.update(key[fresh].tolist())
            coords = coords[fresh]
            if not coords.shape[0]:
                continue
            centers = (coords.astype(np.float64) + 0.5) * h
            d, lab = scene_distance(scene, centers)
            near = d <= truncation + h  # coarse cut before gradient work
            coords, centers, d, lab = coords[near], centers[near], d[near], lab[near]
            if not coords.shape[0]:
                continue
            grad = np.empty((coords.shape[0], 3))
            for ax in range(3):
                step = np.zeros(3)
                step[ax] = 0.5 * h
                dp, _ = scene_distance(scene, centers + step)
                dm, _ = scene_distance(scene, centers - step)
                grad[:, ax] = (dp - dm) / h
            norm = np.linalg.norm(grad, axis=1)
            l1 = np.where(norm > 1e-9, np.abs(grad).sum(axis=1) / np.maximum(norm, 1e-9),
                          np.sqrt(3.0))
            keep = d <= truncation + 0.5 * h * l1
            out_c.append(coords[keep])
            out_l.append(lab[keep])
            out_d.append(d[keep])
    coords = np.concatenate(out_c, axis=0)
    return coords, np.concatenate(out_l), np.concatenate(out_d)
