"""Training objectives: directional, patch, divergence, content disparity,
content (perceptual + L1) and total variation.

Images are (3, H, W) or (B, 3, H, W) tensors in [0, 1].  Text embeddings are
template means (``text_direction``), cached per embedder.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torchvision.transforms.functional as TF

from .errors import ConfigError, ShapeError
from .text_style import SOURCE_TEXT, embed_images, text_direction

EPS_NORM = 1e-8


def _batched(img: torch.Tensor) -> torch.Tensor:
    return img if img.ndim == 4 else img.unsqueeze(0)


def text_mean(embedder, text: str) -> torch.Tensor:
    cache = embedder.__dict__.setdefault("_text_mean_cache", {})
    if text not in cache:
        cache[text] = torch.from_numpy(text_direction(embedder, text))
    return cache[text]


def cosine_direction_loss(delta_i: torch.Tensor, delta_t: torch.Tensor) -> torch.Tensor:
    """``1 - cos(delta_i, delta_t)`` along the last axis; 1 where either norm < 1e-8."""
    delta_t = delta_t.to(delta_i.dtype)
    ni = delta_i.norm(dim=-1)
    nt = delta_t.norm(dim=-1)
    ok = (ni >= EPS_NORM) & (nt >= EPS_NORM)
    denom = torch.where(ok, ni * nt, torch.ones_like(ni))
    cos = (delta_i * delta_t).sum(dim=-1) / denom
    return torch.where(ok, 1.0 - cos, torch.ones_like(cos))


def directional_loss(rendered, content_image, style_text, source_text=SOURCE_TEXT, embedder=None):
    delta_t = text_mean(embedder, style_text) - text_mean(embedder, source_text)
    emb = embed_images(embedder, _batched(rendered))[0]
    ref = embed_images(embedder, _batched(content_image).to(rendered.dtype))[0]
    return cosine_direction_loss(emb - ref, delta_t)


def gs_loss(rendered, content_image, style_text, embedder, source_text=SOURCE_TEXT):
    """Whole-image directional term (no patches)."""
    return directional_loss(rendered, content_image, style_text, source_text, embedder)


@dataclass(frozen=True)
class PatchConfig:
    n_patches: int = 64
    patch_size: int = 96
    tau: float = 0.7
    distortion: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.n_patches < 1:
            raise ConfigError("n_patches must be >= 1")
        if self.patch_size < 1:
            raise ConfigError("patch_size must be positive")
        if not 0.0 <= self.tau <= 2.0:
            raise ConfigError(f"tau must lie in [0, 2], got {self.tau}")


def _randint(gen, low, high) -> int:
    return int(torch.randint(low, high, (1,), generator=gen).item())


def random_perspective(patch: torch.Tensor, distortion: float, gen: torch.Generator) -> torch.Tensor:
    """Random corner-jitter homography of a (3, h, w) patch, torchvision's recipe."""
    _, h, w = patch.shape
    dw, dh = int(distortion * (w // 2)), int(distortion * (h // 2))
    tl = [_randint(gen, 0, dw + 1), _randint(gen, 0, dh + 1)]
    tr = [_randint(gen, w - dw - 1, w), _randint(gen, 0, dh + 1)]
    br = [_randint(gen, w - dw - 1, w), _randint(gen, h - dh - 1, h)]
    bl = [_randint(gen, 0, dw + 1), _randint(gen, h - dh - 1, h)]
    start = [[0, 0], [w - 1, 0], [w - 1, h - 1], [0, h - 1]]
    return TF.perspective(patch, start, [tl, tr, br, bl], interpolation=TF.InterpolationMode.BILINEAR)


def sample_patches(image: torch.Tensor, cfg: PatchConfig, gen: torch.Generator | None = None) -> torch.Tensor:
    """Crop ``n_patches`` random squares and warp each; returns (n, 3, s, s)."""
    _, h, w = image.shape
    s = cfg.patch_size
    if s > min(h, w):
        raise ConfigError(f"patch size {s} exceeds image {h}x{w}")
    gen = gen if gen is not None else torch.Generator().manual_seed(cfg.seed)
    out = []
    for _ in range(cfg.n_patches):
        top, left = _randint(gen, 0, h - s + 1), _randint(gen, 0, w - s + 1)
        crop = image[:, top: top + s, left: left + s]
        out.append(random_perspective(crop, cfg.distortion, gen) if cfg.distortion > 0 else crop)
    return torch.stack(out)


def reject_below(values: torch.Tensor, tau: float) -> torch.Tensor:
    """R(s, tau): 0 where s <= tau, s otherwise."""
    return torch.where(values <= tau, torch.zeros_like(values), values)


def patch_loss(rendered, content_image, style_text, source_text=SOURCE_TEXT, embedder=None,
               cfg: PatchConfig = PatchConfig(), gen: torch.Generator | None = None):
    patches = sample_patches(rendered, cfg, gen)
    delta_t = text_mean(embedder, style_text) - text_mean(embedder, source_text)
    emb = embed_images(embedder, patches)
    ref = embed_images(embedder, _batched(content_image).to(patches.dtype))
    per_patch = cosine_direction_loss(emb - ref, delta_t)
    return reject_below(per_patch, cfg.tau).mean()


def sample_style_pairs(styles, fraction: float, rng: np.random.Generator) -> list[tuple[int, int]]:
    """Unordered index pairs with different styles; ``round(fraction * n)`` drawn without replacement."""
    pairs = [(i, j) for i, j in itertools.combinations(range(len(styles)), 2) if styles[i] != styles[j]]
    if not pairs:
        raise ConfigError("divergence loss needs at least two distinct styles")
    n = max(1, int(round(fraction * len(pairs))))
    pick = np.sort(rng.choice(len(pairs), size=n, replace=False))
    return [pairs[k] for k in pick]


def divergence_loss(renders, embedder, pair_fraction: float = 0.8, seed: int = 0, pairs=None):
    """Cross-style directional loss over sampled pairs of (image, style_text)."""
    styles = [s for _, s in renders]
    if len(set(styles)) < 2:
        raise ConfigError("divergence loss needs at least two distinct styles")
    if pairs is None:
        pairs = sample_style_pairs(styles, pair_fraction, np.random.default_rng(seed))
    emb = embed_images(embedder, torch.cat([_batched(img) for img, _ in renders]))
    ii = [i for i, _ in pairs]
    jj = [j for _, j in pairs]
    delta_i = emb[ii] - emb[jj]
    delta_t = torch.stack([text_mean(embedder, styles[i]) - text_mean(embedder, styles[j]) for i, j in pairs])
    return cosine_direction_loss(delta_i, delta_t).mean()


def content_disparity(content_i, content_j, embedder) -> torch.Tensor:
    a = embed_images(embedder, _batched(content_i))[0]
    b = embed_images(embedder, _batched(content_j).to(content_i.dtype))[0]
    return 1.0 - (a * b).sum() / (a.norm() * b.norm())


def style_total(patch, direction, cd):
    return patch + direction - cd


def content_loss(rendered, ground_truth, perceptual_encoder):
    """(feat, rgb): mean of per-stage feature MSEs, and mean absolute pixel error."""
    a, b = _batched(rendered), _batched(ground_truth).to(rendered.dtype)
    if a.shape != b.shape:
        raise ShapeError(f"rendered {tuple(a.shape)} vs ground truth {tuple(b.shape)}")
    enc_dtype = next(perceptual_encoder.parameters()).dtype
    fa = perceptual_encoder.stages(a.to(enc_dtype))
    fb = perceptual_encoder.stages(b.to(enc_dtype))
    feat = sum(((x - y) ** 2).mean() for x, y in zip(fa, fb)) / len(fa)
    rgb = (a - b).abs().mean()
    return feat, rgb


def tv_loss(image) -> torch.Tensor:
    """Mean squared horizontal forward difference plus mean squared vertical one."""
    x = _batched(image)
    dx = x[..., :, 1:] - x[..., :, :-1]
    dy = x[..., 1:, :] - x[..., :-1, :]
    return (dx ** 2).mean() + (dy ** 2).mean()


@dataclass
class LossReport:
    patch: float = 0.0
    dir: float = 0.0
    cd: float = 0.0
    feat: float = 0.0
    rgb: float = 0.0
    tv: float = 0.0
    gs: float = 0.0
    total_style: float = 0.0
    total_content: float = 0.0
    total: float = 0.0
    step: int = 0
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)
