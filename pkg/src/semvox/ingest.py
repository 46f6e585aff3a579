"""Sequence loading: rasters, point frames, poses, palettes, manifests.

All formats are little-endian, uncompressed, and bit-exact on round
trip.  Loaders are stateless and safe to call concurrently.

SLIM raster   magic "SLIM", width u32, height u32, dtype u8, channels
              u8, then row-major samples.
SLFR frame    magic "SLFR", mode u8 (1 closed / 2 open), feature_dim
              u16, count u64; closed records are {x, y, z f32, class
              u16}, open records {x, y, z f32, feature_dim x f32}.
SLEM table    magic "SLEM", count u32, dim u32; per row a u16 length,
              that many UTF-8 name bytes, and dim f64 components.
poses         text, one frame per line: 12 reals, the row-major top
              3x4 of the camera-to-world transform.
palette       text CSV "id,name,r,g,b", '#' comments allowed.
manifest      INI sections [sequence], [camera], [fusion], [semantics];
              every fusion/semantics config field is addressable by its
              flat key inside its section.
"""

from __future__ import annotations

import configparser
import glob
import os
import struct
from dataclasses import dataclass, field, fields as dc_fields

import numpy as np

from .config import (CameraConfig, ClosedSetConfig, FusionConfig,
                     OpenSetConfig, coerce_field)
from .errors import ConfigError, FormatError, PayloadMismatchError
from .fusion import Frame, validate_rotation

_SLIM_MAGIC = b"SLIM"
_SLFR_MAGIC = b"SLFR"
_SLEM_MAGIC = b"SLEM"

_SLIM_DTYPES = {0: np.uint8, 1: np.uint16, 2: np.uint32, 3: np.float32, 4: np.float64}
_SLIM_CODES = {np.dtype(v): k for k, v in _SLIM_DTYPES.items()}

MODE_CLOSED = 1
MODE_OPEN = 2


# -- rasters ---------------------------------------------------------------

def write_slim(path: str, image: np.ndarray) -> None:
    image = np.ascontiguousarray(image)
    if image.ndim == 2:
        channels = 1
    elif image.ndim == 3:
        channels = image.shape[2]
    else:
        raise FormatError(f"raster must be (H, W) or (H, W, C), got shape {image.shape}")
    if channels < 1 or channels > 255:
        raise FormatError(f"channel count {channels} out of range")
    dt = np.dtype(image.dtype).newbyteorder("<")
    if np.dtype(image.dtype) not in _SLIM_CODES:
        raise FormatError(f"unsupported raster dtype {image.dtype}")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sIIBB", _SLIM_MAGIC, image.shape[1], image.shape[0],
                             _SLIM_CODES[np.dtype(image.dtype)], channels))
        fh.write(image.astype(dt, copy=False).tobytes())


def read_slim(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        head = fh.read(14)
        if len(head) != 14:
            raise FormatError(f"{path}: truncated raster header")
        magic, width, height, code, channels = struct.unpack("<4sIIBB", head)
        if magic != _SLIM_MAGIC:
            raise FormatError(f"{path}: bad raster magic {magic!r}")
        if code not in _SLIM_DTYPES:
            raise FormatError(f"{path}: unknown dtype code {code}")
        dt = np.dtype(_SLIM_DTYPES[code]).newbyteorder("<")
        count = width * height * channels
        data = fh.read(count * dt.itemsize)
        if len(data) != count * dt.itemsize:
            raise FormatError(f"{path}: raster payload truncated")
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes after raster payload")
    arr = np.frombuffer(data, dt).astype(_SLIM_DTYPES[code])
    shape = (height, width) if channels == 1 else (height, width, channels)
    return arr.reshape(shape)


def write_ppm(path: str, image: np.ndarray) -> None:
    """P5 (gray) or P6 (RGB) binary PPM for quick viewing; uint8 only."""
    image = np.ascontiguousarray(image)
    if image.dtype != np.uint8:
        raise FormatError(f"PPM wants uint8, got {image.dtype}")
    if image.ndim == 2:
        header = b"P5"
    elif image.ndim == 3 and image.shape[2] == 3:
        header = b"P6"
    else:
        raise FormatError(f"PPM wants (H, W) or (H, W, 3), got shape {image.shape}")
    with open(path, "wb") as fh:
        fh.write(header + b"\n%d %d\n255\n" % (image.shape[1], image.shape[0]))
        fh.write(image.tobytes())


# -- point-cloud frames ----------------------------------------------------

def write_frame(path: str, points: np.ndarray, labels=None, features=None) -> None:
    """Write a sensor-frame point file; exactly one payload kind."""
    points = np.ascontiguousarray(points, np.float32)
    if points.ndim != 2 or points.shape[1] != 3:
        raise FormatError(f"points must be (n, 3), got {points.shape}")
    n = points.shape[0]
    if (labels is None) == (features is None):
        raise FormatError("exactly one of labels/features must be given")
    with open(path, "wb") as fh:
        if labels is not None:
            labels = np.ascontiguousarray(labels, np.uint16)
            if labels.shape != (n,):
                raise FormatError("labels must be (n,)")
            fh.write(struct.pack("<4sBHQ", _SLFR_MAGIC, MODE_CLOSED, 0, n))
            rec = np.zeros(n, dtype=[("xyz", "<f4", 3), ("cls", "<u2")])
            rec["xyz"] = points
            rec["cls"] = labels
            fh.write(rec.tobytes())
        else:
            features = np.ascontiguousarray(features, np.float32)
            if features.ndim != 2 or features.shape[0] != n:
                raise FormatError("features must be (n, l)")
            l = features.shape[1]
            fh.write(struct.pack("<4sBHQ", _SLFR_MAGIC, MODE_OPEN, l, n))
            rec = np.zeros(n, dtype=[("xyz", "<f4", 3), ("feat", "<f4", l)])
            rec["xyz"] = points
            rec["feat"] = features
            fh.write(rec.tobytes())


def load_pointcloud_frame(path: str, mode: int | None = None):
    """Read a SLFR file -> (points (n,3) f64, labels or None, features or
    None).  `mode` asserts the expected payload kind."""
    with open(path, "rb") as fh:
        head = fh.read(15)
        if len(head) != 15:
            raise FormatError(f"{path}: truncated frame header")
        magic, fmode, dim, n = struct.unpack("<4sBHQ", head)
        if magic != _SLFR_MAGIC:
            raise FormatError(f"{path}: bad frame magic {magic!r}")
        if fmode not in (MODE_CLOSED, MODE_OPEN):
            raise FormatError(f"{path}: unknown payload mode {fmode}")
        if mode is not None and fmode != mode:
            raise PayloadMismatchError(
                f"{path}: payload kind mismatch, file holds "
                f"{'closed-set labels' if fmode == MODE_CLOSED else 'open-set features'}")
        if fmode == MODE_CLOSED:
            rec_dt = np.dtype([("xyz", "<f4", 3), ("cls", "<u2")])
        else:
            if dim == 0:
                raise FormatError(f"{path}: open-set frame with feature_dim 0")
            rec_dt = np.dtype([("xyz", "<f4", 3), ("feat", "<f4", dim)])
        body = fh.read()
    if len(body) != n * rec_dt.itemsize:
        raise FormatError(f"{path}: header says {n} records, body holds "
                          f"{len(body) // rec_dt.itemsize}")
    rec = np.frombuffer(body, rec_dt)
    points = rec["xyz"].astype(np.float64)
    if fmode == MODE_CLOSED:
        return points, rec["cls"].astype(np.int32), None
    return points, None, rec["feat"].astype(np.float64)


# -- poses, palettes, embeddings --------------------------------------------

def load_poses(path: str) -> list[np.ndarray]:
    """Parse 12-number rows into 4x4 camera-to-world transforms.

    Rotations orthonormal within 1e-4 pass; within 1e-3 they are polar
    re-orthonormalized; anything worse (or a reflection) is rejected.
    """
    out = []
    with open(path, "r", encoding="ascii") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 12:
                raise FormatError(f"{path}:{lineno}: expected 12 values, got {len(parts)}")
            try:
                vals = np.array([float(p) for p in parts], np.float64)
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
            pose = np.eye(4)
            pose[:3, :4] = vals.reshape(3, 4)
            try:
                pose[:3, :3] = validate_rotation(pose[:3, :3])
            except Exception as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
            out.append(pose)
    return out


def save_poses(path: str, poses) -> None:
    with open(path, "w", encoding="ascii") as fh:
        for pose in poses:
            row = np.asarray(pose, np.float64)[:3, :4].reshape(-1)
            fh.write(" ".join("%.17g" % v for v in row) + "\n")


def load_palette(path: str):
    """CSV "id,name,r,g,b" -> (colors (max_id + 1, 3) uint8, names dict).
    Row 0 defaults to gray unless the file overrides it."""
    entries = {}
    names = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = [p.strip() for p in line.split(",")]
            if len(parts) != 5:
                raise FormatError(f"{path}:{lineno}: expected id,name,r,g,b")
            try:
                cid = int(parts[0])
                rgb = tuple(int(p) for p in parts[2:5])
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
            if cid < 0 or any(c < 0 or c > 255 for c in rgb):
                raise FormatError(f"{path}:{lineno}: id/color out of range")
            entries[cid] = rgb
            names[cid] = parts[1]
    if not entries:
        raise FormatError(f"{path}: empty palette")
    colors = np.full((max(entries) + 1, 3), 128, np.uint8)
    for cid, rgb in entries.items():
        colors[cid] = rgb
    return colors, names


def save_palette(path: str, colors: np.ndarray, names=None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for cid in range(colors.shape[0]):
            name = names.get(cid, f"class_{cid}") if names else f"class_{cid}"
            fh.write("%d,%s,%d,%d,%d\n" % (cid, name, *colors[cid]))


def load_embeddings(path: str):
    """SLEM table -> (names list, vectors (k, l) float64)."""
    with open(path, "rb") as fh:
        head = fh.read(12)
        if len(head) != 12:
            raise FormatError(f"{path}: truncated embedding header")
        magic, count, dim = struct.unpack("<4sII", head)
        if magic != _SLEM_MAGIC:
            raise FormatError(f"{path}: bad embedding magic {magic!r}")
        names = []
        vecs = np.empty((count, dim), np.float64)
        for i in range(count):
            raw = fh.read(2)
            if len(raw) != 2:
                raise FormatError(f"{path}: truncated at record {i}")
            (nlen,) = struct.unpack("<H", raw)
            name = fh.read(nlen)
            data = fh.read(8 * dim)
            if len(name) != nlen or len(data) != 8 * dim:
                raise FormatError(f"{path}: truncated at record {i}")
            names.append(name.decode("utf-8"))
            vecs[i] = np.frombuffer(data, "<f8")
    return names, vecs


def save_embeddings(path: str, names, vectors: np.ndarray) -> None:
    vectors = np.ascontiguousarray(vectors, np.float64)
    if len(names) != vectors.shape[0]:
        raise FormatError("one name per embedding row required")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sII", _SLEM_MAGIC, vectors.shape[0], vectors.shape[1]))
        for name, row in zip(names, vectors):
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)) + raw)
            fh.write(row.astype("<f8").tobytes())


# -- depth projection --------------------------------------------------------

def project_depth(depth: np.ndarray, payload: np.ndarray, intr: CameraConfig,
                  pose=None, frame_id: int = 0) -> Frame:
    """Back-project a depth raster into a sensor-frame point cloud.

    Pixel (u, v) with raw depth d > 0 maps to
    ((u - cx) d / fx, (v - cy) d / fy, d) * depth_scale.  The payload
    raster supplies per-point class ids (integer, (H, W)) or features
    (float, (H, W, l)).  Zero or non-finite depth is skipped.  Sampling
    steps by `intr.stride` in both directions, anchored at pixel (0, 0).
    """
    intr.validate()
    depth = np.asarray(depth)
    if depth.shape != (intr.height, intr.width):
        raise ConfigError(f"depth raster {depth.shape} does not match camera "
                          f"({intr.height}, {intr.width})")
    if payload.shape[:2] != depth.shape:
        raise ConfigError(f"payload raster {payload.shape[:2]} does not match depth "
                          f"{depth.shape}")
    s = intr.stride
    d = depth[::s, ::s].astype(np.float64)
    us = np.arange(0, intr.width, s, dtype=np.float64)
    vs = np.arange(0, intr.height, s, dtype=np.float64)
    uu, vv = np.meshgrid(us, vs)
    ok = (d > 0) & np.isfinite(d)
    d, uu, vv = d[ok], uu[ok], vv[ok]
    pts = np.stack([(uu - intr.cx) * d / intr.fx,
                    (vv - intr.cy) * d / intr.fy,
                    d], axis=1) * intr.depth_scale
    if pose is None:
        pose = np.eye(4)
    pay = payload[::s, ::s]
    if np.issubdtype(pay.dtype, np.floating):
        feats = pay[ok].astype(np.float64)
        if feats.ndim == 1:
            feats = feats[:, None]
        return Frame(points=pts, pose=pose, features=feats, frame_id=frame_id)
    return Frame(points=pts, pose=pose, labels=pay[ok].astype(np.int32),
                 frame_id=frame_id)


# -- manifests ----------------------------------------------------------------

@dataclass
class SequenceManifest:
    """Parsed run configuration plus resolved frame file lists."""

    root: str
    name: str
    mode: str  # "closed" | "open"
    poses: list
    camera: CameraConfig | None
    fusion: FusionConfig
    closed: ClosedSetConfig | None
    open: OpenSetConfig | None
    depth_files: list = field(default_factory=list)
    payload_files: list = field(default_factory=list)
    frame_files: list = field(default_factory=list)
    palette_path: str | None = None
    embeddings_path: str | None = None
    map_bounds: np.ndarray | None = None  # (2, 3) meters, lo/hi

    @property
    def n_frames(self) -> int:
        return len(self.frame_files) if self.frame_files else len(self.depth_files)


def _apply_section(cfg, section) -> None:
    known = {f.name for f in dc_fields(cfg)}
    for key, raw in section.items():
        if key in known:
            coerce_field(cfg, key, raw)


def _resolve_glob(root: str, pattern: str, what: str) -> list[str]:
    hits = sorted(glob.glob(os.path.join(root, pattern)))
    if not hits:
        raise ConfigError(f"manifest {what} pattern {pattern!r} matches no files")
    return hits


def load_manifest(path: str) -> SequenceManifest:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",))
    read = cp.read(path)
    if not read:
        raise ConfigError(f"manifest {path} not found")
    if "sequence" not in cp:
        raise ConfigError(f"manifest {path} has no [sequence] section")
    root = os.path.dirname(os.path.abspath(path))
    seq = cp["sequence"]
    sem = cp["semantics"] if "semantics" in cp else {}

    mode = sem.get("mode", "closed")
    if mode not in ("closed", "open"):
        raise ConfigError(f"semantics.mode must be closed or open, got {mode!r}")

    fusion = FusionConfig()
    if "fusion" in cp:
        _apply_section(fusion, cp["fusion"])
    fusion.validate()

    camera = None
    if "camera" in cp:
        camera = CameraConfig()
        _apply_section(camera, cp["camera"])
        camera.validate()

    closed_cfg = open_cfg = None
    if mode == "closed":
        closed_cfg = ClosedSetConfig()
        _apply_section(closed_cfg, sem)
        closed_cfg.validate()
    else:
        open_cfg = OpenSetConfig()
        _apply_section(open_cfg, sem)
        open_cfg.validate()

    pose_path = seq.get("poses")
    if not pose_path:
        raise ConfigError("manifest [sequence] needs a poses entry")
    poses = load_poses(os.path.join(root, pose_path))

    man = SequenceManifest(root=root, name=seq.get("name", "sequence"), mode=mode,
                           poses=poses, camera=camera, fusion=fusion,
                           closed=closed_cfg, open=open_cfg)

    if "frames" in seq:
        man.frame_files = _resolve_glob(root, seq["frames"], "frames")
    elif "depth" in seq:
        if camera is None:
            raise ConfigError("raster sequences need a [camera] section")
        man.depth_files = _resolve_glob(root, seq["depth"], "depth")
        payload_key = "labels" if mode == "closed" else "features"
        if payload_key not in seq:
            raise ConfigError(f"manifest [sequence] needs a {payload_key} entry")
        man.payload_files = _resolve_glob(root, seq[payload_key], payload_key)
        if len(man.payload_files) != len(man.depth_files):
            raise ConfigError(
                "depth and payload file counts differ (%d vs %d)"
                % (len(man.depth_files), len(man.payload_files)))
    else:
        raise ConfigError("manifest [sequence] needs frames or depth entries")

    if len(poses) < man.n_frames:
        raise ConfigError(f"{len(poses)} poses for {man.n_frames} frames")

    if "palette" in sem:
        man.palette_path = os.path.join(root, sem["palette"])
        if not os.path.exists(man.palette_path):
            raise ConfigError(f"palette file {man.palette_path} missing")
    if "embeddings" in sem:
        man.embeddings_path = os.path.join(root, sem["embeddings"])
        if not os.path.exists(man.embeddings_path):
            raise ConfigError(f"embedding file {man.embeddings_path} missing")

    if "map_bounds" in seq:
        vals = [float(v) for v in seq["map_bounds"].split()]
        if len(vals) != 6:
            raise ConfigError("map_bounds wants 6 numbers: lo xyz, hi xyz")
        man.map_bounds = np.array(vals, np.float64).reshape(2, 3)
        if (man.map_bounds[1] <= man.map_bounds[0]).any():
            raise ConfigError("map_bounds hi must exceed lo per axis")
    return man


def load_frame(man: SequenceManifest, index: int) -> Frame:
    """Materialize frame `index` of a sequence in sensor coordinates."""
    pose = man.poses[index]
    mode = MODE_CLOSED if man.mode == "closed" else MODE_OPEN
    if man.frame_files:
        pts, labels, feats = load_pointcloud_frame(man.frame_files[index], mode)
        return Frame(points=pts, pose=pose, labels=labels, features=feats,
                     frame_id=index)
    depth = read_slim(man.depth_files[index])
    payload = read_slim(man.payload_files[index])
    if man.mode == "open" and not np.issubdtype(payload.dtype, np.floating):
        raise PayloadMismatchError(
            f"{man.payload_files[index]}: open-set run needs float feature "
            f"rasters, got {payload.dtype}")
    if man.mode == "closed" and np.issubdtype(payload.dtype, np.floating):
        raise PayloadMismatchError(
            f"{man.payload_files[index]}: closed-set run needs integer label "
            f"rasters, got {payload.dtype}")
    return project_depth(depth, payload, man.camera, pose=pose, frame_id=index)


def iter_frames(man: SequenceManifest):
    for i in range(man.n_frames):
        yield load_frame(man, i)
