import dataclasses
import itertools

import numpy as np
import pytest
import torch

from oracles import hash_grid_dedup
from pointstyle.errors import EmptyCloudError, FormatError, ParameterError, SizeError
from pointstyle.feature_cloud import (
    FeaturePointCloud,
    build_feature_cloud,
    encode_image,
    load_cloud,
    load_encoder,
    random_encoder,
    save_cloud,
    voxel_dedup,
)
from pointstyle.scene_io import Scene, project_points


@pytest.fixture(scope="module")
def encoder():
    return random_encoder(0)


def test_encode_shape(encoder):
    img = np.random.default_rng(0).random((64, 64, 3))
    assert tuple(encode_image(img, encoder).shape) == (16, 16, 256)
    with pytest.raises(SizeError):
        encode_image(np.zeros((3, 8, 3)), encoder)


def test_constant_image_constant_interior(encoder):
    fmap = encode_image(np.full((32, 32, 3), 0.3), encoder).numpy()
    interior = fmap[1:-1, 1:-1]
    assert np.abs(interior - interior[0, 0]).max() < 1e-5


def test_translation_covariance(encoder):
    rng = np.random.default_rng(1)
    img = rng.random((64, 68, 3)).astype(np.float32)
    a = encode_image(img[:, 4:], encoder).numpy()
    b = encode_image(img[:, :-4], encoder).numpy()
    # a's cell j sees the same pixels as b's cell j + 1
    assert np.abs(a[2:-2, 2:-3] - b[2:-2, 3:-2]).max() < 1e-5


def test_encoder_spec_round_trip(tmp_path, encoder):
    torch.save(encoder.state_dict(), tmp_path / "enc.pt")
    loaded = load_encoder(str(tmp_path / "enc.pt"))
    x = torch.rand(1, 3, 16, 16)
    assert torch.equal(loaded(x), encoder(x))


def test_cloud_counts_without_dedup(scene4, encoder):
    full = Scene("full", [dataclasses.replace(v, depth=np.ones_like(v.depth)) for v in scene4.views])
    cloud = build_feature_cloud(full, encoder, dedup=False)
    assert len(cloud) == 4 * 256
    assert cloud.dim == encoder.channels


def test_half_depth_zeroed_contributes_half(scene4, encoder):
    views = [dataclasses.replace(v, depth=np.ones_like(v.depth)) for v in scene4.views]
    d = views[1].depth.copy()
    d[:32] = 0.0
    views[1] = dataclasses.replace(views[1], depth=d)
    cloud = build_feature_cloud(Scene("half", views), encoder, dedup=False)
    assert (cloud.source_view == 1).sum() == 128


def test_all_invalid_depth(scene4, encoder):
    views = [dataclasses.replace(v, depth=np.zeros_like(v.depth)) for v in scene4.views]
    with pytest.raises(EmptyCloudError):
        build_feature_cloud(Scene("empty", views), encoder)


def test_cloud_reprojects_into_source_view(scene4, encoder):
    cloud = build_feature_cloud(scene4, encoder, dedup=False)
    for idx, view in enumerate(scene4.views):
        pts = cloud.positions[cloud.source_view == idx]
        pix, _ = project_points(pts, view)
        cell = pix / encoder.stride
        assert np.abs(cell - np.rint(cell)).max() < 0.5
    assert np.isfinite(cloud.features).all()


def test_dedup_on_overlapping_views(scene4, encoder):
    concat = build_feature_cloud(scene4, encoder, dedup=False)
    merged = build_feature_cloud(scene4, encoder, voxel=0.01)
    assert len(merged) < len(concat)
    diff = merged.positions[:, None, :] - concat.positions[None, :, :]
    nearest = np.sqrt((diff ** 2).sum(-1)).min(axis=1)
    assert nearest.max() <= 0.01 * np.sqrt(3)


def test_cloud_is_deterministic(scene4, encoder):
    a = build_feature_cloud(scene4, encoder)
    b = build_feature_cloud(scene4, random_encoder(0))
    assert np.array_equal(a.positions, b.positions) and np.array_equal(a.features, b.features)


def test_dedup_single_voxel():
    rng = np.random.default_rng(2)
    pos = rng.uniform(0.1, 0.9, size=(10, 3))
    feat = rng.normal(size=(10, 4))
    out = voxel_dedup(FeaturePointCloud(pos, feat, np.arange(10)), 1.0)
    assert len(out) == 1
    assert np.allclose(out.positions[0], pos.mean(0))
    assert np.allclose(out.features[0], feat.mean(0), atol=1e-6)


def test_dedup_far_points_identity():
    pos = np.array(list(itertools.product([0.0, 1.0, 2.0], repeat=3))) + 0.05
    feat = np.arange(len(pos) * 2, dtype=np.float32).reshape(-1, 2)
    out = voxel_dedup(FeaturePointCloud(pos, feat, np.zeros(len(pos))), 0.5)
    assert len(out) == len(pos)
    order = np.lexsort(pos.T[::-1])
    assert np.allclose(out.positions, pos[order]) and np.array_equal(out.features, feat[order])


def test_dedup_matches_hash_grid_oracle():
    rng = np.random.default_rng(3)
    pos = rng.uniform(-1, 1, size=(400, 3))
    feat = rng.normal(size=(400, 5)).astype(np.float32)
    tags = rng.integers(0, 4, size=400)
    out = voxel_dedup(FeaturePointCloud(pos, feat, tags), 0.3)
    ref_pos, ref_feat, ref_tag = hash_grid_dedup(pos, feat, tags, 0.3)
    assert np.allclose(out.positions, ref_pos, rtol=0, atol=1e-12)
    assert np.allclose(out.features, ref_feat.astype(np.float32), rtol=0, atol=1e-6)
    assert np.array_equal(out.source_view, ref_tag)
    with pytest.raises(ParameterError):
        voxel_dedup(FeaturePointCloud(pos, feat, tags), 0.0)


def test_cloud_file_round_trip(tmp_path, scene4, encoder):
    cloud = build_feature_cloud(scene4, encoder)
    save_cloud(cloud, tmp_path / "c.fpcl")
    back = load_cloud(tmp_path / "c.fpcl")
    assert np.allclose(back.positions, cloud.positions, atol=1e-6)
    assert np.array_equal(back.features, cloud.features)
    assert np.array_equal(back.source_view, cloud.source_view)
    (tmp_path / "bad").write_bytes(b"XXXX" + bytes(12))
    with pytest.raises(FormatError):
        load_cloud(tmp_path / "bad")
