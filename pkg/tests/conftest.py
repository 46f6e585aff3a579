"""Shared fixtures: synthetic sequences are written to disk once per
session and fused on demand."""

import pytest

from semvox.fusion import integrate_frame, make_grids
from semvox.ingest import load_frame, load_manifest
from semvox.synthetic import make_scene, write_sequence


@pytest.fixture(scope="session")
def seq_root(tmp_path_factory):
    return tmp_path_factory.mktemp("sequences")


def _sequence(root, scene, mode, noise=0.0, seed=0):
    out = root / ("%s_%s_%g_%d" % (scene, mode, noise, seed))
    if not (out / "manifest.ini").exists():
        write_sequence(make_scene(scene), str(out), mode=mode,
                       noise=noise, seed=seed)
    return str(out / "manifest.ini")


@pytest.fixture(scope="session")
def plane_closed(seq_root):
    return _sequence(seq_root, "plane", "closed")


@pytest.fixture(scope="session")
def plane_open(seq_root):
    return _sequence(seq_root, "plane", "open")


@pytest.fixture(scope="session")
def sphere_closed(seq_root):
    return _sequence(seq_root, "sphere", "closed")


@pytest.fixture(scope="session")
def room_closed(seq_root):
    return _sequence(seq_root, "room", "closed")


@pytest.fixture(scope="session")
def room_open(seq_root):
    return _sequence(seq_root, "room", "open")


@pytest.fixture(scope="session")
def room_closed_noisy10(seq_root):
    return _sequence(seq_root, "room", "closed", noise=0.1, seed=3)


@pytest.fixture(scope="session")
def room_open_noisy10(seq_root):
    return _sequence(seq_root, "room", "open", noise=0.1, seed=3)


@pytest.fixture(scope="session")
def room_closed_noisy20(seq_root):
    return _sequence(seq_root, "room", "closed", noise=0.2, seed=11)


def fuse_manifest(manifest_path, threads=1, backend=None, limit=None,
                  fusion_flavor=None):
    """Fuse a written sequence; returns (tsdf, semantic) grids."""
    man = load_manifest(manifest_path)
    if fusion_flavor is not None:
        man.closed.fusion = fusion_flavor
    tsdf, sem = make_grids(man.fusion, closed=man.closed, open_set=man.open,
                           backend=backend)
    n = man.n_frames if limit is None else min(limit, man.n_frames)
    for i in range(n):
        integrate_frame(tsdf, sem, load_frame(man, i), man.fusion,
                        threads=threads)
    return tsdf, sem


@pytest.fixture(scope="session")
def fuse():
    return fuse_manifest
