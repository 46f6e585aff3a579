"""End-to-end CLI coverage: every subcommand's happy path plus the exit-code
contract (0 ok, 2 bad input, nonzero otherwise)."""

import os

import numpy as np
import pytest

from semvox import cli
from semvox.grid import load_grids
from semvox.mesh import extract_mesh, read_ply, write_ply


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def snap_closed(tmp_path_factory, plane_closed):
    out = tmp_path_factory.mktemp("snap") / "plane.slvg"
    assert run("integrate", plane_closed, "--out", out) == 0
    return str(out)


@pytest.fixture(scope="module")
def snap_open(tmp_path_factory, plane_open):
    out = tmp_path_factory.mktemp("snap") / "plane_open.slvg"
    assert run("integrate", plane_open, "--out", out, "--limit", 4) == 0
    return str(out)


class TestParser:
    def test_help_exits_zero(self):
        with pytest.raises(SystemExit) as exc:
            run("--help")
        assert exc.value.code == 0

    def test_no_subcommand_is_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            run()
        assert exc.value.code == 2

    def test_unknown_subcommand_is_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            run("frobnicate")
        assert exc.value.code == 2

    def test_unknown_flag_is_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            run("make-synthetic", "plane", "--out", "x", "--frobnicate")
        assert exc.value.code == 2


class TestMakeSynthetic:
    def test_writes_sequence(self, tmp_path, capsys):
        out = tmp_path / "seq"
        assert run("make-synthetic", "plane", "--out", out) == 0
        assert (out / "manifest.ini").exists()
        assert "wrote" in capsys.readouterr().out

    def test_unknown_scene(self, tmp_path, capsys):
        assert run("make-synthetic", "nowhere", "--out", tmp_path / "s") == 2
        assert "error:" in capsys.readouterr().err

    def test_noise_out_of_range(self, tmp_path):
        assert run("make-synthetic", "plane", "--out", tmp_path / "s",
                   "--noise", "1.0") == 2

    def test_same_seed_same_bytes(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            assert run("make-synthetic", "plane", "--out", out,
                       "--noise", "0.1", "--seed", 5) == 0
        fa = (a / "frames" / "labels_0000.slim").read_bytes()
        fb = (b / "frames" / "labels_0000.slim").read_bytes()
        assert fa == fb


class TestIntegrate:
    def test_snapshot_report_and_csv(self, snap_closed, capsys):
        assert os.path.exists(snap_closed)
        assert os.path.exists(snap_closed + ".report.txt")
        assert os.path.exists(snap_closed + ".frames.csv")
        tsdf, sem = cli._split_snapshot(load_grids(snap_closed))
        assert tsdf is not None and sem is not None
        assert tsdf.memory_stats().active_voxels > 0

    def test_mode_mismatch(self, plane_closed, tmp_path):
        assert run("integrate", plane_closed, "--out", tmp_path / "x.slvg",
                   "--mode", "open") == 2

    def test_missing_manifest(self, tmp_path):
        assert run("integrate", tmp_path / "no.ini",
                   "--out", tmp_path / "x.slvg") == 2

    def test_set_override_applies(self, plane_closed, tmp_path):
        out = tmp_path / "coarse.slvg"
        assert run("integrate", plane_closed, "--out", out, "--limit", 2,
                   "--set", "fusion.voxel_size=0.1") == 0
        tsdf, _ = cli._split_snapshot(load_grids(str(out)))
        assert tsdf.voxel_size == pytest.approx(0.1)

    def test_set_without_equals(self, plane_closed, tmp_path):
        assert run("integrate", plane_closed, "--out", tmp_path / "x.slvg",
                   "--set", "fusion.voxel_size") == 2

    def test_set_unknown_field(self, plane_closed, tmp_path):
        assert run("integrate", plane_closed, "--out", tmp_path / "x.slvg",
                   "--set", "fusion.nonsense=3") == 2

    def test_render_every_dumps_frames(self, plane_closed, tmp_path):
        out = tmp_path / "r.slvg"
        assert run("integrate", plane_closed, "--out", out, "--limit", 4,
                   "--render-every", 2, "--render-dir", tmp_path) == 0
        assert (tmp_path / "render_0001.ppm").exists()
        assert (tmp_path / "render_0003.ppm").exists()
        assert not (tmp_path / "render_0000.ppm").exists()

    def test_limit_zero_empty_grid(self, plane_closed, tmp_path, capsys):
        out = tmp_path / "empty.slvg"
        assert run("integrate", plane_closed, "--out", out, "--limit", 0) == 0
        tsdf, _ = cli._split_snapshot(load_grids(str(out)))
        assert tsdf.memory_stats().active_voxels == 0


class TestRender:
    def test_depth_from_pose_file(self, snap_closed, plane_closed, tmp_path):
        poses = os.path.join(os.path.dirname(plane_closed), "poses.txt")
        out = tmp_path / "d.ppm"
        npy = tmp_path / "d.npy"
        assert run("render", snap_closed, "--out", out, "--poses", poses,
                   "--pose-row", 0, "--width", 64, "--height", 48,
                   "--fx", 48, "--fy", 48, "--npy", npy) == 0
        assert out.read_bytes().startswith(b"P5")
        depth = np.load(npy)
        assert depth.shape == (48, 64)
        assert depth[24, 32] > 0  # plane fills the view from above

    def test_semantic_with_palette(self, snap_closed, plane_closed, tmp_path):
        seq = os.path.dirname(plane_closed)
        out = tmp_path / "s.ppm"
        assert run("render", snap_closed, "--out", out, "--mode", "semantic",
                   "--palette", os.path.join(seq, "palette.csv"),
                   "--poses", os.path.join(seq, "poses.txt"), "--pose-row", 1,
                   "--width", 48, "--height", 36, "--fx", 36, "--fy", 36) == 0
        assert out.read_bytes().startswith(b"P6")

    def test_explicit_camera_quaternion(self, snap_closed, tmp_path):
        out = tmp_path / "c.ppm"
        # identity orientation looks along +z from below the slab
        assert run("render", snap_closed, "--out", out,
                   "--camera", 0, 0, -1.0, 1, 0, 0, 0,
                   "--width", 32, "--height", 32, "--fx", 32, "--fy", 32) == 0
        assert out.exists()

    def test_zero_quaternion(self, snap_closed, tmp_path):
        assert run("render", snap_closed, "--out", tmp_path / "x.ppm",
                   "--camera", 0, 0, 2, 0, 0, 0, 0) == 2

    def test_needs_some_camera(self, snap_closed, tmp_path):
        assert run("render", snap_closed, "--out", tmp_path / "x.ppm") == 2

    def test_pose_row_out_of_range(self, snap_closed, plane_closed, tmp_path):
        poses = os.path.join(os.path.dirname(plane_closed), "poses.txt")
        assert run("render", snap_closed, "--out", tmp_path / "x.ppm",
                   "--poses", poses, "--pose-row", 99) == 2


class TestQuery:
    def emb_path(self, manifest):
        return os.path.join(os.path.dirname(manifest), "labels.slem")

    def test_label_query(self, snap_open, plane_open, tmp_path, capsys):
        csv = tmp_path / "q.csv"
        assert run("query", snap_open, "--embeddings", self.emb_path(plane_open),
                   "--label", "slab", "--csv", csv) == 0
        out = capsys.readouterr().out
        assert "max similarity" in out
        lines = csv.read_text().splitlines()
        assert lines[0] == "i,j,k,similarity"
        sims = [float(l.rsplit(",", 1)[1]) for l in lines[1:]]
        assert len(sims) > 100
        assert max(sims) > 0.99  # every surface voxel saw the slab label

    def test_unknown_label(self, snap_open, plane_open, tmp_path):
        assert run("query", snap_open, "--embeddings", self.emb_path(plane_open),
                   "--label", "ghost", "--csv", tmp_path / "q.csv") == 2

    def test_vector_dim_mismatch(self, snap_open, plane_open, tmp_path):
        vec = tmp_path / "v.npy"
        np.save(vec, np.ones(7))
        assert run("query", snap_open, "--embeddings", self.emb_path(plane_open),
                   "--vector", vec, "--csv", tmp_path / "q.csv") == 2

    def test_closed_snapshot_rejected(self, snap_closed, plane_open, tmp_path):
        assert run("query", snap_closed, "--embeddings", self.emb_path(plane_open),
                   "--label", "slab", "--csv", tmp_path / "q.csv") == 2

    def test_highlight_mesh(self, snap_open, plane_open, tmp_path):
        ply = tmp_path / "hot.ply"
        assert run("query", snap_open, "--embeddings", self.emb_path(plane_open),
                   "--label", "slab", "--csv", tmp_path / "q.csv",
                   "--mesh", ply, "--threshold", 0.5) == 0
        mesh = read_ply(str(ply))
        assert len(mesh.vertices) > 0
        assert (mesh.colors == (220, 40, 40)).all(axis=1).any()


class TestEval:
    def test_self_miou_is_one(self, snap_closed, tmp_path, capsys):
        out = tmp_path / "m.txt"
        assert run("eval", "--pred", snap_closed, "--truth", snap_closed,
                   "--out", out) == 0
        text = out.read_text()
        assert "miou=1.000000" in text
        assert "miou=1.000000" in capsys.readouterr().out

    def test_against_analytic_scene(self, snap_closed, capsys):
        assert run("eval", "--pred", snap_closed, "--scene", "plane") == 0
        line = [l for l in capsys.readouterr().out.splitlines()
                if l.startswith("miou=")][0]
        assert 0.5 < float(line.split("=")[1]) <= 1.0

    def test_chamfer_of_identical_meshes(self, snap_closed, tmp_path, capsys):
        tsdf, _ = cli._split_snapshot(load_grids(snap_closed))
        ply = tmp_path / "m.ply"
        write_ply(extract_mesh(tsdf), str(ply))
        assert run("eval", "--pred-mesh", ply, "--truth-mesh", ply) == 0
        out = capsys.readouterr().out
        line = [l for l in out.splitlines() if l.startswith("chamfer")][0]
        assert float(line.split("=")[1]) == 0.0

    def test_mesh_pair_required(self, tmp_path):
        assert run("eval", "--pred-mesh", tmp_path / "only.ply") == 2

    def test_nothing_to_evaluate(self):
        assert run("eval") == 2

    def test_truth_needed_with_pred(self, snap_closed):
        assert run("eval", "--pred", snap_closed) == 2


class TestBenchCommands:
    def test_bench_backends(self, plane_closed, tmp_path, capsys):
        assert run("bench-backends", plane_closed, "--limit", 2,
                   "--csv-dir", tmp_path) == 0
        out = capsys.readouterr().out
        assert "fps" in out
        assert (tmp_path / "bench_python.csv").exists()
        from semvox.backend import NATIVE_AVAILABLE

        if NATIVE_AVAILABLE:
            assert "content hashes match" in out
            assert (tmp_path / "bench_native.csv").exists()

    def test_plot_bench(self, snap_closed, tmp_path):
        png = tmp_path / "stages.png"
        assert run("plot-bench", snap_closed + ".frames.csv",
                   "--out", png) == 0
        assert png.stat().st_size > 1000

    def test_plot_bench_empty_csv(self, tmp_path):
        empty = tmp_path / "empty.csv"
        empty.write_text("frame,preprocess_ms,integrate_ms,visualize_ms,total_ms\n")
        assert run("plot-bench", empty, "--out", tmp_path / "x.png") == 2
