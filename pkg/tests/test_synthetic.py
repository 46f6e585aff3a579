"""Analytic scenes: primitive geometry, pose generation, sequence export."""

import os

import numpy as np
import pytest

from semvox import ConfigError, load_frame, load_manifest, make_scene, scene_names
from semvox.ingest import read_slim
from semvox.synthetic import (
    look_at,
    render_scene_frame,
    sample_surface,
    scene_distance,
    scene_raycast,
    truth_band_coords,
    write_sequence,
)


def cast_one(scene, origin, direction):
    t, lab = scene_raycast(scene, np.array([origin], float), np.array([direction], float))
    return t[0], lab[0]


class TestRaycastHandValues:
    """First-hit parameters worked out from the primitive definitions."""

    def setup_method(self):
        self.room = make_scene("room")

    def test_crate_top_from_above(self):
        # box top face is at z = 0.925 + 0.35 = 1.275
        t, lab = cast_one(self.room, (1.325, 0.825, 5.025), (0, 0, -1))
        assert abs(t - 3.75) < 1e-12
        assert lab == 4

    def test_floor_from_above(self):
        t, lab = cast_one(self.room, (0.0, 0.0, 5.025), (0, 0, -1))
        assert abs(t - 5.0) < 1e-12
        assert lab == 1

    def test_drum_cap_from_above(self):
        # cylinder top cap is at z = 1.125 + 0.5 = 1.625
        t, lab = cast_one(self.room, (0.2, -1.6, 5.025), (0, 0, -1))
        assert abs(t - 3.4) < 1e-12
        assert lab == 5

    def test_drum_side_wall(self):
        t, lab = cast_one(self.room, (2.2, -1.6, 1.125), (-1, 0, 0))
        assert abs(t - 1.7) < 1e-12
        assert lab == 5

    def test_exit_through_crate_wall_from_inside(self):
        t, lab = cast_one(self.room, (1.325, 0.825, 0.925), (1, 0, 0))
        assert abs(t - 0.4) < 1e-12
        assert lab == 4

    def test_sphere_from_inside(self):
        sph = make_scene("sphere")
        t, lab = cast_one(sph, (0.0, 0.0, 0.0), (0, 1, 0))
        assert abs(t - 1.0) < 1e-12
        assert lab == 1

    def test_miss_is_labeled_void(self):
        t, lab = cast_one(self.room, (0.0, 0.0, 5.025), (0, 0, 1))
        assert np.isinf(t)
        assert lab == 0

    def test_ray_parallel_to_wall_misses_it(self):
        # the wall rect at y = 2.975 is invisible to rays with no y motion
        t, lab = cast_one(self.room, (0.0, 2.975, 5.025), (0, 0, -1))
        assert lab == 1  # falls through to the floor


class TestSceneDistance:
    def test_origin_is_nearest_the_floor(self):
        room = make_scene("room")
        d, lab = scene_distance(room, np.array([[0.0, 0.0, 0.0]]))
        assert abs(d[0] - 0.025) < 1e-12
        assert lab[0] == 1

    def test_surface_points_have_zero_distance(self):
        room = make_scene("room")
        pts, labels = sample_surface(room, 4000, seed=3)
        d, near = scene_distance(room, pts)
        assert d.max() < 1e-9
        assert np.array_equal(near, labels)

    def test_sample_counts_follow_area(self):
        room = make_scene("room")
        _, labels = sample_surface(room, 20000, seed=5)
        areas = np.array([p.area() for p in room.primitives])
        want = areas / areas.sum()
        got = np.bincount(labels, minlength=6)[1:] / labels.shape[0]
        assert np.abs(got - want).max() < 0.02


class TestPoses:
    @pytest.mark.parametrize("name", ["plane", "room", "sphere"])
    def test_trajectories_are_rigid_motions(self, name):
        for pose in make_scene(name).poses:
            R = pose[:3, :3]
            assert np.abs(R @ R.T - np.eye(3)).max() < 1e-12
            assert abs(np.linalg.det(R) - 1.0) < 1e-12
            assert np.array_equal(pose[3], [0, 0, 0, 1])

    def test_look_at_points_at_target(self):
        eye, target = (2.0, 0.0, 1.0), (0.0, 0.0, 1.0)
        pose = look_at(eye, target)
        fwd = pose[:3, 2]
        assert np.allclose(fwd, [-1, 0, 0], atol=1e-12)
        assert np.allclose(pose[:3, 3], eye)

    def test_look_at_straight_down_is_valid(self):
        pose = look_at((0, 0, 5), (0, 0, 0.5))
        R = pose[:3, :3]
        assert np.abs(R @ R.T - np.eye(3)).max() < 1e-12
        assert abs(np.linalg.det(R) - 1.0) < 1e-12


class TestFrameRaster:
    def test_center_pixel_depth_is_euclidean_along_axis(self):
        scene = make_scene("plane")
        depth, labels = render_scene_frame(scene, scene.poses[0])
        # pose 0: eye (0.8, 0, 2.2) aimed at (0, 0, 0.5)
        assert abs(depth[30, 40] - np.sqrt(0.8**2 + 1.7**2)) < 1e-12
        assert labels[30, 40] == 1

    def test_misses_write_zero(self):
        scene = make_scene("plane")
        depth, labels = render_scene_frame(scene, scene.poses[0])
        assert np.all((depth > 0) == (labels > 0))
        assert (depth == 0).any()


class TestWriteSequence:
    def test_closed_inventory(self, tmp_path):
        scene = make_scene("plane")
        man_path = write_sequence(scene, str(tmp_path), mode="closed")
        for i in range(len(scene.poses)):
            assert os.path.exists(tmp_path / "frames" / ("depth_%04d.slim" % i))
            assert os.path.exists(tmp_path / "frames" / ("labels_%04d.slim" % i))
        man = load_manifest(man_path)
        assert man.mode == "closed"
        assert man.n_frames == len(scene.poses)
        assert man.closed.num_classes == scene.num_classes
        assert man.camera.fx == scene.camera.fx
        assert man.fusion.voxel_size == scene.voxel_size
        assert man.palette_path is not None

    def test_open_features_are_one_hot_of_labels(self, tmp_path):
        scene = make_scene("plane")
        write_sequence(scene, str(tmp_path / "c"), mode="closed")
        write_sequence(scene, str(tmp_path / "o"), mode="open")
        labels = read_slim(str(tmp_path / "c" / "frames" / "labels_0000.slim"))
        feats = read_slim(str(tmp_path / "o" / "frames" / "feat_0000.slim"))
        assert feats.shape == labels.shape + (scene.num_classes,)
        hit = labels > 0
        assert np.array_equal(np.argmax(feats[hit], axis=1) + 1, labels[hit])
        assert np.all(feats[~hit] == 0)
        assert np.all(feats[hit].sum(axis=1) == 1.0)

    def test_bad_mode_rejected(self, tmp_path):
        with pytest.raises(ConfigError, match="mode"):
            write_sequence(make_scene("plane"), str(tmp_path), mode="both")

    def test_back_projection_lands_on_the_surface(self, tmp_path):
        scene = make_scene("plane")
        man = load_manifest(write_sequence(scene, str(tmp_path)))
        fr = load_frame(man, 0)
        world = fr.points_world()
        d, lab = scene_distance(scene, world)
        # depth rasters quantize to depth_scale steps; obliquity factor
        # sqrt(1 + (cx/fx)^2 + (cy/fy)^2) < 1.31 at the image corner
        assert d.max() < 0.7 * scene.camera.depth_scale * 1.31 + 1e-9
        assert np.array_equal(lab, fr.labels)

    def test_label_noise_flips_requested_fraction(self, tmp_path):
        scene = make_scene("plane")
        write_sequence(scene, str(tmp_path / "clean"), mode="closed", noise=0.0)
        write_sequence(scene, str(tmp_path / "noisy"), mode="closed", noise=0.2, seed=1)
        changed = valid = 0
        for i in range(len(scene.poses)):
            a = read_slim(str(tmp_path / "clean" / "frames" / ("labels_%04d.slim" % i)))
            b = read_slim(str(tmp_path / "noisy" / "frames" / ("labels_%04d.slim" % i)))
            hit = a > 0
            assert np.array_equal(hit, b > 0)  # noise never adds or removes hits
            assert np.all(b[hit] >= 1) and np.all(b[hit] <= scene.num_classes)
            changed += (a[hit] != b[hit]).sum()
            valid += hit.sum()
        assert abs(changed / valid - 0.2) < 0.02

    def test_noise_zero_is_deterministic(self, tmp_path):
        scene = make_scene("plane")
        write_sequence(scene, str(tmp_path / "a"))
        write_sequence(scene, str(tmp_path / "b"))
        fa = open(tmp_path / "a" / "frames" / "labels_0003.slim", "rb").read()
        fb = open(tmp_path / "b" / "frames" / "labels_0003.slim", "rb").read()
        assert fa == fb


class TestTruthBand:
    def test_band_voxels_are_near_the_surface(self):
        scene = make_scene("plane")
        coords, labels, dists = truth_band_coords(scene, 0.05, 0.15)
        assert len(np.unique(coords, axis=0)) == len(coords)
        assert np.all(labels == 1)
        assert dists.max() <= 0.15 + 0.5 * 0.05 * np.sqrt(3.0) + 1e-12
        centers = (coords + 0.5) * 0.05
        d, _ = scene_distance(scene, centers)
        assert np.array_equal(d, dists)

    def test_flat_band_thickness(self):
        # rect normal is +z with l1 norm 1: the band is trunc + h/2 thick.
        # Layers 7..12 sit strictly inside it; 6 and 13 sit exactly on the
        # 0.175 m cutoff, where float rounding decides membership.
        scene = make_scene("plane")
        coords, _, _ = truth_band_coords(scene, 0.05, 0.15)
        inner = coords[(np.abs(coords[:, 0]) < 15) & (np.abs(coords[:, 1]) < 15)]
        zs = set(np.unique(inner[:, 2]).tolist())
        assert zs >= {7, 8, 9, 10, 11, 12}
        assert zs <= {6, 7, 8, 9, 10, 11, 12, 13}


class TestRegistry:
    def test_names_sorted(self):
        assert scene_names() == ["plane", "room", "sphere"]

    def test_unknown_scene_rejected(self):
        with pytest.raises(ConfigError, match="unknown scene"):
            make_scene("garage")

    def test_feature_dim_defaults_to_class_count(self):
        assert make_scene("room").feature_dim == 5
