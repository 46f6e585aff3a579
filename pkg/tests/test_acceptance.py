"""Quantitative acceptance gate.

Each test checks one end-to-end guarantee at its stated tolerance and
prints a single PASS/FAIL line (visible with -s, and on any failure).
Thresholds here are contractual; loosening one is a product change, not a
test fix.
"""

import dataclasses
import os
import time

import numpy as np
import pytest

from bayes_oracles import dirichlet_posterior_mean_quad, nig_posterior_mean_quad
from conftest import fuse_manifest
from raycast_oracle import interval_band

from semvox import FusionConfig, cli, integrate_frame, load_frame, load_manifest, make_grids
from semvox.dirichlet import predictive
from semvox.evalbench import chamfer_l2, miou, sparsity_report, truth_grid_analytic
from semvox.fusion import Frame, raycast_band
from semvox.gaussian import absorb_batch, one_hot_bridge_ratio
from semvox.mesh import extract_mesh
from semvox.render import RenderCamera, render
from semvox.synthetic import make_scene


LAMBDA_FLOOR = 1e-3  # OpenSetConfig.lambda_floor default


def verdict(ok: bool, name: str, detail: str) -> None:
    print("%s %s  [%s]" % ("PASS" if ok else "FAIL", name, detail))
    assert ok, "%s: %s" % (name, detail)


@pytest.fixture(scope="module")
def room_maps(room_closed):
    return fuse_manifest(room_closed)


@pytest.fixture(scope="module")
def room_maps_open(room_open):
    return fuse_manifest(room_open)


@pytest.fixture(scope="module")
def sphere_maps(sphere_closed):
    return fuse_manifest(sphere_closed)


@pytest.fixture(scope="module")
def room_truth():
    return truth_grid_analytic(make_scene("room"))


def test_closed_predictive_matches_simplex_quadrature():
    """Closed-set posterior predictive == Bayesian posterior mean, 2e-3."""
    rng = np.random.default_rng(1)
    prior = 0.001
    t0 = time.perf_counter()
    worst = 0.0
    for trial in range(20):
        k = 2 + trial % 2
        counts = rng.integers(1, 12, k).astype(np.float64)
        got = predictive(counts + prior)
        want = dirichlet_posterior_mean_quad(counts, prior,
                                             n=20000 if k == 2 else 900)
        worst = max(worst, float(np.abs(got - want).max()))
    elapsed = time.perf_counter() - t0
    verdict(worst < 2e-3 and elapsed < 10.0,
            "closed-set conjugacy",
            "max err %.2e over 20 sets, %.1fs" % (worst, elapsed))


def test_open_posterior_mean_matches_grid_quadrature():
    """One-dim feature posterior mean == 2D-grid quadrature, 1e-2."""
    rng = np.random.default_rng(2)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(5):
        n = int(rng.integers(4, 12))
        z = rng.normal(rng.uniform(-1, 1), rng.uniform(0.05, 0.5), n)
        m, _beta = absorb_batch(np.zeros(1), np.full(1, 1e-3), LAMBDA_FLOOR,
                                z[:, None])
        want = nig_posterior_mean_quad(z, 0.0, LAMBDA_FLOOR, 5e-4, 1e-3)
        worst = max(worst, abs(float(m[0]) - want))
    elapsed = time.perf_counter() - t0
    verdict(worst < 1e-2 and elapsed < 10.0,
            "open-set conjugacy",
            "max err %.2e over 5 datasets, %.1fs" % (worst, elapsed))


def test_fused_sphere_geometry(sphere_closed):
    """64-view unit-sphere fusion at 2 cm: radius RMS < 1 cm, chamfer < 1e-4."""
    t0 = time.perf_counter()
    tsdf, _sem = fuse_manifest(sphere_closed)
    mesh = extract_mesh(tsdf)
    radii = np.linalg.norm(mesh.vertices, axis=1)
    rms = float(np.sqrt(np.mean((radii - 1.0) ** 2)))

    n = 20000  # evenly spread analytic surface samples
    i = np.arange(n) + 0.5
    phi = np.arccos(1.0 - 2.0 * i / n)
    theta = np.pi * (1.0 + 5.0 ** 0.5) * i
    samples = np.stack([np.sin(phi) * np.cos(theta),
                        np.sin(phi) * np.sin(theta),
                        np.cos(phi)], axis=1)
    ch = chamfer_l2(mesh.vertices, samples)
    elapsed = time.perf_counter() - t0
    verdict(len(mesh.vertices) > 1000 and rms < 0.01 and ch < 1e-4
            and elapsed < 60.0,
            "sphere reconstruction",
            "radius rms %.4f m, chamfer %.3g m^2, %d verts, %.1fs"
            % (rms, ch, len(mesh.vertices), elapsed))


def test_room_miou_noiseless(room_maps, room_maps_open, room_truth):
    """Noiseless 5-class room: voxel mIoU >= 0.95 in both semantic modes."""
    m_closed = miou(room_maps[1], room_truth).miou
    m_open = miou(room_maps_open[1], room_truth, embeddings=np.eye(5)).miou
    verdict(m_closed >= 0.95 and m_open >= 0.95,
            "room mIoU",
            "closed %.4f, open %.4f" % (m_closed, m_open))


def test_bayes_fusion_beats_last_wins_under_noise(room_closed_noisy20,
                                                  room_truth):
    """20% label flips: Bayesian fusion >= last-wins + 0.05 mIoU."""
    bayes = miou(fuse_manifest(room_closed_noisy20)[1], room_truth).miou
    last = miou(fuse_manifest(room_closed_noisy20,
                              fusion_flavor="last_wins")[1], room_truth).miou
    verdict(bayes >= last + 0.05,
            "fusion benefit under noise",
            "bayes %.4f vs last-wins %.4f" % (bayes, last))


def test_open_closed_bridge_agreement(room_maps, room_maps_open,
                                      room_closed_noisy10, room_open_noisy10):
    """One-hot features through the open-set path reproduce closed-set
    label maps: exactly on clean input, >= 0.98 at 10% flips."""
    clean = one_hot_bridge_ratio(room_maps_open[1], room_maps[1])
    noisy = one_hot_bridge_ratio(fuse_manifest(room_open_noisy10)[1],
                                 fuse_manifest(room_closed_noisy10)[1])
    verdict(clean == 1.0 and noisy >= 0.98,
            "one-hot bridge",
            "clean %.4f, 10%% noise %.4f" % (clean, noisy))


def test_sparse_allocation(room_maps, room_closed):
    """Room at 5 cm stays under 5% of the dense grid spanning the declared
    map volume; an untouched volume allocates zero nodes."""
    bounds = load_manifest(room_closed).map_bounds
    rt = sparsity_report(room_maps[0], map_bounds=bounds)
    rs = sparsity_report(room_maps[1], map_bounds=bounds)
    fresh, _ = make_grids(FusionConfig(voxel_size=0.05, truncation=0.15))
    fresh.probe_many(np.array([[0, 0, 0], [128, 128, 128], [255, 255, 255]]))
    st = fresh.memory_stats()
    empty_ok = (st.leaf_count, st.internal_count, st.active_voxels) == (0, 0, 0)
    verdict(rt["ratio_bounds"] < 0.05 and rs["ratio_bounds"] < 0.05 and empty_ok,
            "sparse allocation",
            "tsdf %.2f%%, semantic %.2f%% of the dense map volume; "
            "empty grid %d nodes"
            % (100 * rt["ratio_bounds"], 100 * rs["ratio_bounds"],
               st.leaf_count + st.internal_count))


def test_frame_order_permutation_invariance(room_closed):
    """Shuffling frame order: distances drift < 1e-9 relative, label
    counts do not change at all."""
    man = load_manifest(room_closed)

    def fuse_in(order):
        tsdf, sem = make_grids(man.fusion, closed=man.closed, open_set=man.open)
        for i in order:
            integrate_frame(tsdf, sem, load_frame(man, i), man.fusion)
        return tsdf, sem

    t_a, s_a = fuse_in(range(man.n_frames))
    t_b, s_b = fuse_in(np.random.default_rng(5).permutation(man.n_frames))

    ca, (da, wa) = t_a.active_values()
    cb, (db, wb) = t_b.active_values()
    oa, ob = np.lexsort(ca.T), np.lexsort(cb.T)
    same_cells = np.array_equal(ca[oa], cb[ob])
    floor = 1e-3 * man.fusion.truncation
    rel = np.abs(da[oa] - db[ob]) / np.maximum(np.abs(da[oa]), floor)
    max_rel = float(rel.max())

    ka, (counts_a,) = s_a.active_values()
    kb, (counts_b,) = s_b.active_values()
    alpha_same = (np.array_equal(ka[np.lexsort(ka.T)], kb[np.lexsort(kb.T)])
                  and np.array_equal(counts_a[np.lexsort(ka.T)],
                                     counts_b[np.lexsort(kb.T)]))
    verdict(same_cells and max_rel < 1e-9 and alpha_same,
            "order robustness",
            "max relative dD %.2e over %d voxels, counts identical: %s"
            % (max_rel, len(da), alpha_same))


def test_raycast_band_matches_sampling_oracle():
    """DDA band == reference interval-walk oracle on 1000 random rays."""
    rng = np.random.default_rng(9)
    plain = FusionConfig(voxel_size=0.05, truncation=0.15)
    carve = FusionConfig(voxel_size=0.05, truncation=0.15, space_carving=True)
    t0 = time.perf_counter()
    mismatched = 0
    for i in range(1000):
        o = rng.uniform(-2.0, 2.0, 3)
        e = o + rng.uniform(-3.0, 3.0, 3)
        cfg = carve if i % 2 else plain
        got = raycast_band(o, e, cfg)
        want = interval_band(o, e, cfg.voxel_size, cfg.truncation,
                             cfg.space_carving)
        mismatched += int(not np.array_equal(got, want))
    elapsed = time.perf_counter() - t0
    verdict(mismatched == 0,
            "raycast oracle",
            "%d/1000 rays disagree, %.1fs" % (mismatched, elapsed))


def test_large_frame_throughput():
    """A 100k-point frame at 10 cm voxels fuses in < 1 s on one thread;
    thread count must not change the result bits."""
    rng = np.random.default_rng(7)
    n = 100_000
    dirs = rng.normal(size=(n, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    dirs[:, 2] = np.abs(dirs[:, 2]) + 0.3
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    pts = dirs * rng.uniform(2.0, 5.0, n)[:, None]
    cfg = FusionConfig(voxel_size=0.1, truncation=0.3, max_range=20.0)
    frame = Frame(points=pts, pose=np.eye(4))

    tsdf1, _ = make_grids(cfg)
    t0 = time.perf_counter()
    integrate_frame(tsdf1, None, frame, cfg, threads=1)
    single = time.perf_counter() - t0

    tsdf4, _ = make_grids(cfg)
    t0 = time.perf_counter()
    integrate_frame(tsdf4, None, frame, cfg, threads=4)
    quad = time.perf_counter() - t0
    bits_same = tsdf4.content_hash() == tsdf1.content_hash()

    cores = os.cpu_count() or 1
    if cores >= 4:
        speed_ok = single / quad >= 2.0
        note = "4-thread speedup %.2fx" % (single / quad)
    else:
        speed_ok = True  # cannot observe parallel speedup without the cores
        note = ("parallel speedup unmeasurable on a %d-core machine, "
                "checked bit-equality across thread counts instead" % cores)
    verdict(single < 1.0 and bits_same and speed_ok,
            "throughput",
            "%.3fs single-thread for %d points; %s" % (single, n, note))


def test_depth_render_tracks_analytic_sphere(sphere_maps, sphere_closed):
    """Rendered sphere depth within 1.5 voxels of the exact ray-sphere
    intersection for >= 99% of hit pixels."""
    tsdf, _sem = sphere_maps
    man = load_manifest(sphere_closed)
    cam = RenderCamera.from_config(man.camera, man.poses[0],
                                   far=man.fusion.max_range)
    depth = render(tsdf, None, cam, mode="depth")

    o, d = cam.rays()
    b = (o * d).sum(axis=1)
    disc = b * b - ((o * o).sum(axis=1) - 1.0)
    t_hit = np.where(disc >= 0.0, -b - np.sqrt(np.maximum(disc, 0.0)), np.inf)
    t_hit = np.where(t_hit > 0.0, t_hit, np.inf).reshape(depth.shape)

    hit = depth > 0.0
    err = np.abs(depth - t_hit)[hit]
    frac = float(np.mean(err <= 1.5 * tsdf.voxel_size))
    verdict(hit.sum() > 100 and frac >= 0.99,
            "render consistency",
            "%.2f%% of %d hit pixels within 1.5 voxels"
            % (100 * frac, int(hit.sum())))


def test_scripted_and_cli_runs_agree(plane_closed, tmp_path):
    """Scripted mapper run and the CLI deterministic run emit snapshots
    with identical content hashes."""
    sb = pytest.importorskip("semvox_bindings")
    man = load_manifest(plane_closed)
    mapper = sb.Mapper(**dataclasses.asdict(man.fusion),
                       num_classes=man.closed.num_classes)
    for i in range(min(10, man.n_frames)):
        f = load_frame(man, i)
        mapper.integrate(f.points, f.pose, labels=f.labels)
    script_path = tmp_path / "script.slvg"
    mapper.save(str(script_path))

    cli_path = tmp_path / "cli.slvg"
    rc = cli.main(["integrate", plane_closed, "--out", str(cli_path),
                   "--deterministic", "--limit", "10"])
    st, ss = sb.load_grid(str(script_path))
    ct, cs = sb.load_grid(str(cli_path))
    same = (st.content_hash() == ct.content_hash()
            and ss.content_hash() == cs.content_hash())
    verdict(rc == 0 and same,
            "scripting parity",
            "tsdf %s, semantic %s" % (st.content_hash()[:12],
                                      ss.content_hash()[:12]))
