"""Covariance-matched linear stylization of feature clouds with a global branch.

All per-point work happens in a compressed ``d``-channel space::

    stylized = T @ (compress(f) - content_mean) + style_mean,   T = T_s @ T_c

where ``T_c``/``T_s`` are predicted from the content and style covariances.
The cloud's global descriptor goes through the same ``T`` and is fused back
into every point after decompression.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import DegenerateInputError, EmptyCloudError, NumericError, ShapeError

EIG_CLAMP = 1e-8


def _as_tensor(x, dtype=None) -> torch.Tensor:
    t = x if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(x))
    return t if dtype is None else t.to(dtype)


def content_stats(features) -> tuple[torch.Tensor, torch.Tensor]:
    """Column mean and biased covariance ``Xc^T Xc / N`` of an (N, d) matrix."""
    x = _as_tensor(features)
    if x.ndim != 2 or x.shape[0] < 2:
        raise DegenerateInputError(f"need at least 2 samples for statistics, got shape {tuple(x.shape)}")
    mean = x.mean(dim=0)
    xc = x - mean
    return mean, xc.T @ xc / x.shape[0]


class CovPredictor(nn.Module):
    """Dense map from a flattened d x d covariance to a d x d factor.

    Residual around the identity with a zero-initialised output layer, so a
    fresh predictor returns I.
    """

    def __init__(self, d: int, hidden: int | None = None):
        super().__init__()
        self.d = d
        hidden = hidden or min(4 * d * d, 512)
        self.fc1 = nn.Linear(d * d, hidden)
        self.fc2 = nn.Linear(hidden, d * d)
        nn.init.zeros_(self.fc2.weight)
        nn.init.zeros_(self.fc2.bias)

    def forward(self, cov: torch.Tensor) -> torch.Tensor:
        d = self.d
        eye = torch.eye(d, dtype=cov.dtype)
        return eye + self.fc2(torch.relu(self.fc1(cov.reshape(-1)))).reshape(d, d)


class TransformState(nn.Module):
    def __init__(self, feat_dim: int = 256, embed_dim: int = 512, d: int = 64,
                 global_width: int = 1024, predictor_hidden: int | None = None,
                 use_global: bool = True, oracle: bool = False, seed: int = 0):
        super().__init__()
        self.feat_dim, self.embed_dim, self.d = feat_dim, embed_dim, d
        self.use_global = use_global
        self.oracle = oracle
        gen = torch.Generator().manual_seed(int(seed))
        self.compress_c = nn.Linear(feat_dim, d)
        self.compress_s = nn.Linear(embed_dim, d)
        self.decompress = nn.Linear(d, feat_dim)
        self.cov_predictor_c = CovPredictor(d, predictor_hidden)
        self.cov_predictor_s = CovPredictor(d, predictor_hidden)
        self.global_extractor = nn.Sequential(
            nn.Linear(feat_dim, global_width // 2), nn.ReLU(),
            nn.Linear(global_width // 2, global_width), nn.ReLU(),
        )
        self.global_out = nn.Linear(global_width, feat_dim)
        self.fuse = nn.Linear(2 * feat_dim, feat_dim)
        self._init_weights(gen)

    def _init_weights(self, gen):
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name.startswith("cov_predictor") and "fc2" in name:
                    continue
                if p.ndim == 2:
                    p.copy_(torch.randn(p.shape, generator=gen) / np.sqrt(p.shape[1]))
                else:
                    p.zero_()
            # content compression starts as an orthonormal projection, decompression its transpose
            q, _ = torch.linalg.qr(torch.randn(self.feat_dim, self.d, generator=gen, dtype=torch.float64))
            self.compress_c.weight.copy_(q.T)
            self.decompress.weight.copy_(q)
            self.fuse.weight.zero_()
            self.fuse.weight[:, : self.feat_dim] = torch.eye(self.feat_dim)


def oracle_factors(content_cov: torch.Tensor, style_cov: torch.Tensor):
    """Closed-form whitening (C_c^-1/2) and coloring (C_s^1/2) factors."""
    ec, vc = torch.linalg.eigh(content_cov)
    es, vs = torch.linalg.eigh(style_cov)
    ec = ec.clamp_min(EIG_CLAMP)
    es = es.clamp_min(EIG_CLAMP)
    t_c = vc @ torch.diag(ec.rsqrt()) @ vc.T
    t_s = vs @ torch.diag(es.sqrt()) @ vs.T
    return t_c, t_s


def predict_transform(content_cov, style_cov, state: TransformState) -> torch.Tensor:
    content_cov = _as_tensor(content_cov)
    style_cov = _as_tensor(style_cov)
    if torch.isnan(content_cov).any() or torch.isnan(style_cov).any():
        raise NumericError("covariance input contains NaN")
    if state.oracle:
        t_c, t_s = oracle_factors(content_cov, style_cov)
    else:
        t_c = state.cov_predictor_c(content_cov)
        t_s = state.cov_predictor_s(style_cov)
    return t_s @ t_c


def global_feature(features, state: TransformState) -> torch.Tensor:
    """Max-pooled pointwise features mapped back to D channels; order-invariant."""
    x = _as_tensor(features)
    if x.ndim != 2 or x.shape[0] < 1:
        raise EmptyCloudError("global feature of an empty cloud")
    pooled = state.global_extractor(x).max(dim=0).values
    return state.global_out(pooled)


def stylize_global(g, T, content_mean, style_mean, state: TransformState) -> torch.Tensor:
    """Compressed global feature pushed through the same affine map as the points.

    The content mean subtracted here is the per-point one, as in the method.
    """
    g_c = state.compress_c(_as_tensor(g))
    return T @ (g_c - content_mean) + style_mean


def fuse_features(per_point, global_vec, state: TransformState) -> torch.Tensor:
    per_point = _as_tensor(per_point)
    global_vec = _as_tensor(global_vec)
    if global_vec.shape[-1] != per_point.shape[-1]:
        raise ShapeError(f"global vector {tuple(global_vec.shape)} vs per-point {tuple(per_point.shape)}")
    stacked = torch.cat([per_point, global_vec.expand(per_point.shape[0], -1)], dim=1)
    return state.fuse(stacked)


@dataclass(frozen=True, eq=False)
class StylizedCloud:
    positions: np.ndarray
    features: torch.Tensor  # (N, D), fused if the global branch is on
    style_text: str
    compressed: torch.Tensor  # (N, d) stylized features before decompression
    per_point: torch.Tensor  # (N, D) decompressed, before fusion
    transform: torch.Tensor
    source_view: np.ndarray | None = None
    colors: np.ndarray | None = None

    def __len__(self):
        return len(self.positions)


def style_statistics(style_vectors, state: TransformState):
    s = state.compress_s(_as_tensor(style_vectors, state.compress_s.weight.dtype))
    return content_stats(s)


def apply_style(cloud, style, state: TransformState, style_stats=None, global_raw=None) -> StylizedCloud:
    """Stylize a FeaturePointCloud with a StyleEmbedding.

    ``style_stats`` may carry precomputed ``(mean, cov)`` of the compressed
    template embeddings, ``global_raw`` the unstylized global feature (it does
    not depend on the style, so callers stylizing one cloud several times can
    share it).
    """
    if len(cloud) == 0:
        raise EmptyCloudError("cannot stylize an empty cloud")
    dtype = state.compress_c.weight.dtype
    f = _as_tensor(cloud.features, dtype)
    x = state.compress_c(f)
    c_mean, c_cov = content_stats(x)
    s_mean, s_cov = style_stats if style_stats is not None else style_statistics(style.vectors, state)
    T = predict_transform(c_cov, s_cov, state)
    compressed = (x - c_mean) @ T.T + s_mean
    per_point = state.decompress(compressed)
    if state.use_global:
        g_raw = global_feature(f, state) if global_raw is None else global_raw
        g = stylize_global(g_raw, T, c_mean, s_mean, state)
        features = fuse_features(per_point, state.decompress(g), state)
    else:
        features = per_point
    return StylizedCloud(cloud.positions, features, style.style_text, compressed, per_point, T,
                         cloud.source_view, cloud.colors)
