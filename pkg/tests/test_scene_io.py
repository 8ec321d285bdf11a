import json

import numpy as np
import pytest

from pointstyle.errors import BehindCameraError, InvalidDepthError, PoseValidationError, SceneLoadError, SpecError
from pointstyle.scene_io import (
    CameraIntrinsics,
    CameraPose,
    CameraView,
    Scene,
    SyntheticWorld,
    backproject_pixel,
    backproject_pixels,
    look_at,
    load_scene,
    make_synthetic_scene,
    pixel_grid,
    project_point,
    project_points,
    read_depth,
    save_scene,
    write_depth,
)


def _view(fx=1.0, cx=0.0, size=1):
    K = CameraIntrinsics(fx, fx, cx, cx, size, size)
    return CameraView(K, CameraPose(np.eye(3), np.zeros(3)))


def test_project_optical_axis():
    pix, z = project_point([0, 0, 1], _view())
    assert np.allclose(pix, [0, 0]) and z == 1.0


def test_project_hand_arithmetic():
    pix, z = project_point([1, 2, 2], _view(100.0, 50.0, 200))
    assert np.allclose(pix, [100.0, 150.0]) and z == 2.0


def test_project_behind_camera():
    with pytest.raises(BehindCameraError):
        project_point([0, 0, -1], _view())


def test_backproject_examples():
    assert np.allclose(backproject_pixel([0, 0], 1.0, _view()), [0, 0, 1])
    assert np.allclose(backproject_pixel([100, 150], 2.0, _view(100.0, 50.0, 200)), [1, 2, 2])
    with pytest.raises(InvalidDepthError):
        backproject_pixel([0, 0], 0.0, _view())


def test_round_trip_random_pose():
    rng = np.random.default_rng(0)
    pose = look_at([1.0, -0.5, -3.0], [0.2, 0.1, 0.0])
    view = CameraView(CameraIntrinsics(80, 90, 31.5, 30.0, 64, 61), pose)
    pix = rng.uniform(0, 60, size=(1000, 2))
    depth = rng.uniform(0.1, 20, size=1000)
    back, z = project_points(backproject_pixels(pix, depth, view), view)
    assert np.abs(back - pix).max() < 1e-6
    assert np.allclose(z, depth)


def test_pose_validation():
    with pytest.raises(PoseValidationError):
        CameraPose(np.diag([1.0, 1.0, -1.0]), np.zeros(3))
    with pytest.raises(PoseValidationError):
        CameraPose(np.eye(3) * 2, np.zeros(3))
    with pytest.raises(PoseValidationError):
        CameraIntrinsics(-1, 1, 0, 0, 2, 2)


def test_scene_needs_two_views():
    with pytest.raises(SpecError):
        Scene("x", [_view()])


def test_pixel_grid_row_major():
    g = pixel_grid(2, 3)
    assert g.tolist() == [[0, 0], [1, 0], [2, 0], [0, 1], [1, 1], [2, 1]]


def test_depth_file_round_trip(tmp_path):
    d = np.random.default_rng(1).uniform(0, 5, size=(7, 5)).astype(np.float32)
    write_depth(tmp_path / "a.depth", d)
    assert np.array_equal(read_depth(tmp_path / "a.depth"), d)


def test_save_load_round_trip(tmp_path):
    scene = make_synthetic_scene(dict(n_views=3, n_points=500), 3)
    save_scene(scene, tmp_path)
    loaded = load_scene(tmp_path)
    assert len(loaded.views) == 3
    for a, b in zip(scene.views, loaded.views):
        assert np.array_equal(a.image, b.image)
        assert np.array_equal(a.depth, b.depth)
        assert np.allclose(a.pose.rotation, b.pose.rotation)


def test_load_missing_depth_names_file(tmp_path):
    save_scene(make_synthetic_scene(dict(n_views=3, n_points=500), 3), tmp_path)
    (tmp_path / "depth" / "0002.depth").unlink()
    with pytest.raises(SceneLoadError, match="0002"):
        load_scene(tmp_path)


def test_load_rejects_reflection(tmp_path):
    save_scene(make_synthetic_scene(dict(n_views=3, n_points=500), 3), tmp_path)
    meta = json.loads((tmp_path / "cameras.json").read_text())
    meta["views"][1]["rotation"] = [1, 0, 0, 0, 1, 0, 0, 0, -1]
    (tmp_path / "cameras.json").write_text(json.dumps(meta))
    with pytest.raises(PoseValidationError):
        load_scene(tmp_path)


def test_synthetic_deterministic_and_seeded():
    spec = dict(n_views=4, n_points=5000, texture="checker")
    a, b = make_synthetic_scene(spec, 7), make_synthetic_scene(spec, 7)
    for va, vb in zip(a.views, b.views):
        assert np.array_equal(va.image, vb.image) and np.array_equal(va.depth, vb.depth)
    c = make_synthetic_scene(spec, 8)
    assert not np.array_equal(a.views[0].image, c.views[0].image)


def test_synthetic_backprojection_on_surface():
    scene = make_synthetic_scene(dict(n_views=2, n_points=1000), 5)
    world = SyntheticWorld(1000, "checker", 5)
    for view in scene.views:
        d = view.depth.reshape(-1)
        ok = d > 0
        pts = backproject_pixels(pixel_grid(*view.shape)[ok], d[ok], view)
        assert world.surface_distance(pts).max() < 1e-5
