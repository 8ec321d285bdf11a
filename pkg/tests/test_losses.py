import numpy as np
import pytest
import torch

from oracles import mse_stages_loop
from pointstyle.errors import ConfigError, ShapeError
from pointstyle.feature_cloud import random_encoder
from pointstyle.losses import (
    LossReport,
    PatchConfig,
    content_disparity,
    content_loss,
    cosine_direction_loss,
    directional_loss,
    divergence_loss,
    gs_loss,
    patch_loss,
    reject_below,
    sample_patches,
    sample_style_pairs,
    style_total,
    text_mean,
    tv_loss,
)
from pointstyle.text_style import StubEmbedder, embed_images

D = torch.float64


def _solid(rgb, size=8):
    return torch.tensor(rgb, dtype=D)[:, None, None].expand(3, size, size).clone()


def _set_text(embedder, text, vector):
    """Pin the template-mean text embedding of ``text`` (bypasses the hash)."""
    text_mean(embedder, text)
    embedder.__dict__["_text_mean_cache"][text] = torch.as_tensor(vector, dtype=D)


@pytest.fixture
def onehot():
    """Stub whose image map is the identity, so pure colors embed to orthogonal axes."""
    e = StubEmbedder(0, 64, input_size=8)
    e.image_map = torch.eye(64, dtype=D)
    return e


def test_cosine_direction_examples():
    e = torch.zeros(5, dtype=D)
    e[0] = 1
    f = torch.zeros(5, dtype=D)
    f[1] = 1
    assert cosine_direction_loss(e, e).item() == 0
    assert cosine_direction_loss(-e, e).item() == 2
    assert cosine_direction_loss(e, f).item() == 1
    assert cosine_direction_loss(torch.zeros(5, dtype=D), e).item() == 1


def test_directional_degenerate_and_crafted(stub):
    img = torch.rand(3, 8, 8, dtype=D)
    assert directional_loss(img, img, "oil painting", "a Photo", stub).item() == 1
    other = torch.rand(3, 8, 8, dtype=D)
    ea, eb = embed_images(stub, img[None])[0], embed_images(stub, other[None])[0]
    _set_text(stub, "crafted", ea)
    _set_text(stub, "base", eb)
    assert abs(directional_loss(img, other, "crafted", "base", stub).item()) < 1e-6


def test_directional_swap_antisymmetry(stub):
    a, b = torch.rand(3, 8, 8, dtype=D), torch.rand(3, 8, 8, dtype=D)
    l1 = directional_loss(a, b, "oil painting", "a Photo", stub).item()
    l2 = directional_loss(a, b, "a Photo", "oil painting", stub).item()
    assert abs(l1 + l2 - 2) < 1e-12


def test_gs_degenerate(stub):
    img = torch.rand(3, 8, 8, dtype=D)
    assert gs_loss(img, img, "oil painting", stub).item() == 1


def test_reject_below():
    v = torch.tensor([0.1, 0.7, 0.71, 1.5], dtype=D)
    assert reject_below(v, 0.7).tolist() == [0, 0, 0.71, 1.5]


def test_patch_loss_rejection_limits(stub):
    a, b = torch.rand(3, 16, 16, dtype=D), torch.rand(3, 16, 16, dtype=D)
    assert patch_loss(a, b, "oil painting", embedder=stub, cfg=PatchConfig(8, 8, tau=2.0)).item() == 0
    cfg = PatchConfig(4, 8, tau=0.0, seed=3)
    patches = sample_patches(a, cfg)
    delta_t = text_mean(stub, "oil painting") - text_mean(stub, "a Photo")
    ref = embed_images(stub, b[None])[0]
    per = [cosine_direction_loss(embed_images(stub, p[None])[0] - ref, delta_t).item() for p in patches]
    assert abs(patch_loss(a, b, "oil painting", embedder=stub, cfg=cfg).item() - np.mean(per)) < 1e-12
    tau = float(np.median(per))
    cfg = PatchConfig(4, 8, tau=tau, seed=3)
    expected = np.mean([p if p > tau else 0.0 for p in per])
    assert abs(patch_loss(a, b, "oil painting", embedder=stub, cfg=cfg).item() - expected) < 1e-12


def test_patch_loss_seeded_and_validated(stub):
    a, b = torch.rand(3, 16, 16, dtype=D), torch.rand(3, 16, 16, dtype=D)
    cfg = PatchConfig(6, 8, seed=11)
    assert patch_loss(a, b, "x", embedder=stub, cfg=cfg).item() == patch_loss(a, b, "x", embedder=stub, cfg=cfg).item()
    with pytest.raises(ConfigError):
        patch_loss(a, b, "x", embedder=stub, cfg=PatchConfig(2, 32))
    with pytest.raises(ConfigError):
        PatchConfig(tau=3.0)


def test_divergence_examples(stub):
    img = torch.rand(3, 8, 8, dtype=D)
    assert divergence_loss([(img, "a"), (img, "b")], stub, 1.0).item() == 1
    other = torch.rand(3, 8, 8, dtype=D)
    _set_text(stub, "a", embed_images(stub, img[None])[0])
    _set_text(stub, "b", embed_images(stub, other[None])[0])
    assert abs(divergence_loss([(img, "a"), (other, "b")], stub, 1.0).item()) < 1e-6
    # swapping the members of every pair leaves the loss unchanged
    x = [(torch.rand(3, 8, 8, dtype=D), s) for s in ("oil", "ink", "oil", "neon")]
    pairs = [(0, 1), (1, 2), (2, 3)]
    swapped = [(j, i) for i, j in pairs]
    assert abs(divergence_loss(x, stub, pairs=pairs).item() - divergence_loss(x, stub, pairs=swapped).item()) < 1e-12
    with pytest.raises(ConfigError):
        divergence_loss([(img, "a"), (other, "a")], stub)


def test_pair_sampling_counts():
    rng = np.random.default_rng(0)
    assert len(sample_style_pairs(["a", "b", "c"], 1.0, rng)) == 3
    pairs = sample_style_pairs(["a", "b", "a", "b"], 0.8, rng)
    assert len(pairs) == 3 and all(i < j for i, j in pairs)


def test_content_disparity(onehot):
    a, b = torch.rand(3, 8, 8, dtype=D), torch.rand(3, 8, 8, dtype=D)
    assert abs(content_disparity(a, a, onehot).item()) < 1e-12
    assert content_disparity(a, b, onehot).item() == content_disparity(b, a, onehot).item()
    assert abs(content_disparity(_solid([1, 0, 0]), _solid([0, 0, 1]), onehot).item() - 1) < 1e-12


def test_style_total():
    assert abs(style_total(0.5, 0.3, 0.1) - 0.7) < 1e-15
    assert style_total(0, 0, 0) == 0


def test_content_loss_examples():
    enc = random_encoder(0, channels=(8, 8, 8))
    gt = torch.rand(3, 16, 16) * 0.8
    feat, rgb = content_loss(gt, gt, enc)
    assert feat.item() == 0 and rgb.item() == 0
    _, rgb = content_loss(gt + 0.1, gt, enc)
    assert abs(rgb.item() - 0.1) < 1e-6
    other = torch.rand(3, 16, 16)
    feat, _ = content_loss(other, gt, enc)
    ref = mse_stages_loop(enc.stages(other[None]), enc.stages(gt[None]))
    assert abs(feat.item() - ref) < 1e-6
    with pytest.raises(ShapeError):
        content_loss(gt, gt[:, :8], enc)


def test_tv_loss():
    assert tv_loss(torch.full((3, 4, 4), 0.3)).item() == 0
    h = 0.5
    img = torch.zeros(3, 4, 4, dtype=D)
    img[:, :, 2:] = h
    # one step column out of three horizontal differences per row; no vertical change
    assert abs(tv_loss(img).item() - h * h / 3) < 1e-15


def test_loss_report_json():
    r = LossReport(patch=0.5, step=3)
    assert '"patch": 0.5' in r.to_json() and '"step": 3' in r.to_json()


def _fd_check(fn, x, n_probe=6, eps=1e-6, seed=0):
    x = x.clone().requires_grad_(True)
    (grad,) = torch.autograd.grad(fn(x), x)
    rng = np.random.default_rng(seed)
    flat = x.detach().reshape(-1)
    for k in rng.choice(flat.numel(), size=n_probe, replace=False):
        up, down = flat.clone(), flat.clone()
        up[k] += eps
        down[k] -= eps
        fd = (fn(up.reshape(x.shape)) - fn(down.reshape(x.shape))).item() / (2 * eps)
        g = grad.reshape(-1)[k].item()
        assert abs(fd - g) <= 1e-3 * max(abs(fd), abs(g)) + 1e-9, (k, fd, g)


def test_gradients_match_finite_differences(stub):
    torch.manual_seed(4)
    x = torch.rand(3, 8, 8, dtype=D) * 0.8 + 0.1
    content = torch.rand(3, 8, 8, dtype=D) * 0.8 + 0.1
    other = torch.rand(3, 8, 8, dtype=D) * 0.8 + 0.1
    enc = random_encoder(1, channels=(4, 4, 4)).double()
    cfg = PatchConfig(4, 6, tau=0.0, seed=5)
    _fd_check(lambda r: directional_loss(r, content, "oil painting", "a Photo", stub), x)
    _fd_check(lambda r: gs_loss(r, content, "oil painting", stub), x)
    _fd_check(lambda r: patch_loss(r, content, "oil painting", embedder=stub, cfg=cfg), x)
    _fd_check(lambda r: divergence_loss([(r, "oil"), (other, "ink")], stub, 1.0), x)
    _fd_check(lambda r: content_disparity(r, other, stub), x)
    _fd_check(lambda r: content_loss(r, content, enc)[0], x)
    _fd_check(lambda r: content_loss(r, content, enc)[1], x)
    _fd_check(tv_loss, x)
