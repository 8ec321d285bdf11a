import numpy as np
import pytest
import torch

from pointstyle.errors import ConfigError
from pointstyle.scene_io import make_synthetic_scene
from pointstyle.text_style import StubEmbedder
from pointstyle.training import (
    Checkpoint,
    Model,
    TrainConfig,
    load_config,
    parameter_digest,
    recombine,
    stylize_scene,
    train_decoder,
    train_style,
)

STYLES = ["oil painting", "pencil sketch"]


def _config(**kw):
    base = dict(seed=3, steps_stage1=4, steps_stage2=3, embed_input_size=32, compress_dim=8, global_width=64,
                decoder_widths=[16, 16, 16], patch={"n_patches": 4, "patch_size": 16}, lr=1e-3)
    base.update(kw)
    return TrainConfig.from_dict(base)


@pytest.fixture(scope="module")
def small_scene():
    return make_synthetic_scene(dict(n_views=4, n_points=800, texture="noise", image_size=32), 5)


@pytest.fixture(scope="module")
def embedder():
    return StubEmbedder(0, 64, input_size=32)


@pytest.fixture(scope="module")
def stage1(small_scene):
    return train_decoder([small_scene], _config())


def _same_state(a: dict, b: dict) -> bool:
    return a.keys() == b.keys() and all(torch.equal(a[k], b[k]) for k in a)


def test_config_validation(tmp_path):
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"learning_rate": 1})
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"patch": {"size": 3}})
    with pytest.raises(ConfigError):
        TrainConfig(lambda_s=-1)
    (tmp_path / "c.yaml").write_text("lr: 0.01\nstyles: [a, b]\nsplat: {K: 4}\n")
    cfg = load_config(tmp_path / "c.yaml")
    assert cfg.lr == 0.01 and cfg.splat.K == 4 and cfg.styles == ["a", "b"]
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_zero_steps_is_initialisation(small_scene):
    cfg = _config()
    ck = train_decoder([small_scene], cfg, steps=0)
    assert ck.step == 0
    assert _same_state(ck.decoder, Model(cfg).decoder.state_dict())


def test_empty_scene_list():
    with pytest.raises(ConfigError):
        train_decoder([], _config())


def test_stage1_deterministic(small_scene, stage1):
    again = train_decoder([small_scene], _config())
    assert _same_state(stage1.decoder, again.decoder)


def test_stage1_resume_matches_uninterrupted(small_scene, stage1, tmp_path):
    half = train_decoder([small_scene], _config(), steps=2)
    half.save(tmp_path / "half.pt")
    resumed = train_decoder([small_scene], _config(), Checkpoint.load(tmp_path / "half.pt"), steps=2)
    assert resumed.step == 4
    assert _same_state(resumed.decoder, stage1.decoder)


def test_stage2_requires_two_styles(small_scene, stage1, embedder):
    with pytest.raises(ConfigError):
        train_style([small_scene], ["oil", "oil"], stage1, _config(), embedder=embedder)
    with pytest.raises(ConfigError):
        train_style([small_scene], STYLES, stage1, _config(batch_size=1), embedder=embedder)


def test_stage2_report_totals_and_frozen_decoder(small_scene, stage1, embedder, tmp_path):
    cfg = _config()
    hist = []
    ck = train_style([small_scene], STYLES, stage1, cfg, embedder=embedder, history=hist,
                     log_path=tmp_path / "log.jsonl")
    assert len(hist) == 3
    for r in hist:
        assert abs(r.total - recombine(r, cfg)) <= 1e-6 * max(1.0, abs(r.total))
        assert len(set(r.extra["styles"])) >= 2
        assert 0 <= r.patch <= 2 and 0 <= r.dir <= 2 and 0 <= r.gs <= 2
    lines = (tmp_path / "log.jsonl").read_text().splitlines()
    assert len(lines) == 3 and "wall_clock" in lines[0]
    dec_before = Model(cfg, stage1).decoder
    dec_after = Model(cfg, ck, embed_dim=64).decoder
    assert parameter_digest(dec_before) == parameter_digest(dec_after)


def test_zero_weights_leave_transform_unchanged(small_scene, stage1, embedder):
    cfg = _config(lambda_s=0, lambda_gs=0, lambda_feat=0, lambda_rgb=0, lambda_tv=0)
    init = Model(cfg, stage1, embed_dim=64).transform.state_dict()
    ck = train_style([small_scene], STYLES, stage1, cfg, embedder=embedder, steps=2)
    assert _same_state(ck.transform, init)


def test_stage2_resume_matches_uninterrupted(small_scene, stage1, embedder):
    cfg = _config()
    full = train_style([small_scene], STYLES, stage1, cfg, embedder=embedder, steps=2)
    part = train_style([small_scene], STYLES, stage1, cfg, embedder=embedder, steps=1)
    rest = train_style([small_scene], STYLES, part, cfg, embedder=embedder, steps=1)
    assert rest.step == 2
    assert _same_state(full.transform, rest.transform)


def test_stylize_scene_contract(small_scene, stage1, embedder):
    cfg = _config()
    ck = train_style([small_scene], STYLES, stage1, cfg, embedder=embedder, steps=2)
    a = stylize_scene(small_scene, "oil painting", ck, embedder)
    b = stylize_scene(small_scene, "oil painting", ck, embedder)
    assert torch.equal(a.features, b.features)
    c = stylize_scene(small_scene, "pencil sketch", ck, embedder)
    assert (a.features - c.features).abs().max() > 1e-6
    held_out = make_synthetic_scene(dict(n_views=3, n_points=600, texture="checker", image_size=32), 99)
    d = stylize_scene(held_out, "oil painting", ck, embedder)
    from pointstyle.feature_cloud import build_feature_cloud

    cloud = build_feature_cloud(held_out, Model(cfg, ck).encoder)
    assert np.array_equal(d.positions, cloud.positions)
    assert torch.isfinite(d.features).all()


def test_stage1_loss_trend(small_scene):
    hist = []
    train_decoder([small_scene], _config(steps_stage1=200), history=hist)
    first = np.mean([r.total for r in hist[:50]])
    last = np.mean([r.total for r in hist[-50:]])
    assert last < 0.5 * first
