"""Soft z-buffer point splatting and the U-Net style decoder."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import EmptyRenderError, ParameterError, ShapeError
from .scene_io import EPS_DEPTH, CameraView, project_points


@dataclass(frozen=True)
class SplatConfig:
    K: int = 8
    radius: float = 2.0
    feature_hw: tuple | None = None  # None: derived from the view and stride
    blend: float = 1.0
    stride: int = 4

    def __post_init__(self):
        if self.K < 1:
            raise ParameterError(f"K must be >= 1, got {self.K}")
        if self.radius < 0.5:
            raise ParameterError(f"radius must be >= 0.5, got {self.radius}")


@dataclass(frozen=True, eq=False)
class SplatPlan:
    """Which points land on which pixels, with normalised blend weights.

    Depends only on positions and camera, so it is reusable across feature
    sets (styles, training steps).
    """

    pixel: torch.Tensor  # (C,) flat pixel index
    point: torch.Tensor  # (C,) point index
    weight: torch.Tensor  # (C,) float64, sums to 1 per covered pixel
    mask: torch.Tensor  # (h, w) float coverage
    hw: tuple


def splat_plan(positions: np.ndarray, view: CameraView, cfg: SplatConfig) -> SplatPlan:
    grid = view.intrinsics.scaled(cfg.stride)
    h, w = cfg.feature_hw or (grid.height, grid.width)
    grid_view = view.with_intrinsics(grid)
    pix, z = project_points(positions, grid_view)
    front = np.nonzero(z > EPS_DEPTH)[0]
    if len(front) == 0:
        raise EmptyRenderError("no point lies in front of the camera")
    u, v, z = pix[front, 0], pix[front, 1], z[front]

    reach = int(np.ceil(cfg.radius))
    offsets = np.arange(-reach, reach + 2)
    ox, oy = np.meshgrid(offsets, offsets)
    cols = np.floor(u)[:, None] + ox.ravel()[None, :]
    rows = np.floor(v)[:, None] + oy.ravel()[None, :]
    dist = np.hypot(cols - u[:, None], rows - v[:, None])
    wgt = 1.0 - dist / cfg.radius
    keep = (wgt > 0) & (cols >= 0) & (cols < w) & (rows >= 0) & (rows < h)
    pt_local = np.broadcast_to(np.arange(len(front))[:, None], keep.shape)[keep]
    flat = (rows[keep] * w + cols[keep]).astype(np.int64)
    wgt = wgt[keep]
    zc = z[pt_local]
    point = front[pt_local]

    # per pixel: nearest first, ties by lower point index; keep K
    order = np.lexsort((point, zc, flat))
    flat, point, wgt, zc = flat[order], point[order], wgt[order], zc[order]
    starts = np.r_[0, np.nonzero(np.diff(flat))[0] + 1] if len(flat) else np.zeros(0, dtype=np.int64)
    counts = np.diff(np.r_[starts, len(flat)])
    rank = np.arange(len(flat)) - np.repeat(starts, counts)
    top = rank < cfg.K
    flat, point, wgt, zc = flat[top], point[top], wgt[top], zc[top]

    blend = wgt * (1.0 / zc) ** cfg.blend
    total = np.bincount(flat, weights=blend, minlength=h * w)
    blend = blend / total[flat]
    mask = np.zeros(h * w)
    mask[flat] = 1.0
    return SplatPlan(torch.from_numpy(flat), torch.from_numpy(point), torch.from_numpy(blend),
                     torch.from_numpy(mask.reshape(h, w)), (h, w))


def apply_plan(features: torch.Tensor, plan: SplatPlan) -> torch.Tensor:
    """Blend point features into an (h, w, D) map; differentiable in ``features``."""
    h, w = plan.hw
    contrib = features[plan.point] * plan.weight.to(features.dtype)[:, None]
    out = torch.zeros(h * w, features.shape[1], dtype=features.dtype)
    out = out.index_add(0, plan.pixel, contrib)
    return out.reshape(h, w, -1)


def _features_of(cloud) -> torch.Tensor:
    f = cloud.features
    return f if isinstance(f, torch.Tensor) else torch.from_numpy(np.asarray(f))


def splat(cloud, view: CameraView, cfg: SplatConfig, plan: SplatPlan | None = None):
    """Returns ``(feature_map (h, w, D), coverage mask (h, w))``."""
    if len(cloud) == 0:
        raise EmptyRenderError("cannot splat an empty cloud")
    plan = plan or splat_plan(cloud.positions, view, cfg)
    feats = _features_of(cloud)
    return apply_plan(feats, plan), plan.mask.to(feats.dtype)


def _conv(cin, cout):
    return nn.Conv2d(cin, cout, 3, padding=1)


def _up(cin, cout):
    return nn.ConvTranspose2d(cin, cout, 3, stride=2, padding=1, output_padding=1)


class Decoder(nn.Module):
    """Two average-pool downsampling levels, bottleneck, two transposed-conv
    upsampling levels with skips, then ``log2(stride)`` further 2x upsamplings
    to image resolution.  The coverage mask is fed as an extra input channel.
    """

    def __init__(self, in_channels: int = 256, widths=(64, 128, 128), stride: int = 4,
                 up_width: int = 32, seed: int = 0):
        super().__init__()
        c1, c2, c3 = widths
        self.in_channels = in_channels
        self.stride = stride
        self.inc = _conv(in_channels + 1, c1)
        self.down1 = _conv(c1, c2)
        self.down2 = _conv(c2, c3)
        self.bottleneck = _conv(c3, c3)
        self.up1 = _up(c3, c2)
        self.dec1 = _conv(2 * c2, c2)
        self.up2 = _up(c2, c1)
        self.dec2 = _conv(2 * c1, c1)
        n_final = int(round(np.log2(stride)))
        if 2 ** n_final != stride:
            raise ParameterError(f"decoder stride must be a power of two, got {stride}")
        chans = [c1] + [up_width] * n_final
        self.final = nn.ModuleList(_up(a, b) for a, b in zip(chans[:-1], chans[1:]))
        self.out = nn.Conv2d(chans[-1], 3, 1)
        gen = torch.Generator().manual_seed(int(seed))
        with torch.no_grad():
            for p in self.parameters():
                if p.ndim > 1:
                    fan_in = p[0].numel()
                    p.copy_(torch.randn(p.shape, generator=gen) * np.sqrt(2.0 / fan_in))
                else:
                    p.zero_()

    @staticmethod
    def _match(x, ref):
        if x.shape[-2:] != ref.shape[-2:]:
            x = F.interpolate(x, size=ref.shape[-2:], mode="bilinear", align_corners=False)
        return x

    def forward(self, fmap: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """(B, D, h, w) features and (B, 1, h, w) mask -> (B, 3, h*stride, w*stride)."""
        x0 = torch.relu(self.inc(torch.cat([fmap, mask], dim=1)))
        x1 = torch.relu(self.down1(F.avg_pool2d(x0, 2, ceil_mode=True)))
        x2 = torch.relu(self.down2(F.avg_pool2d(x1, 2, ceil_mode=True)))
        x2 = torch.relu(self.bottleneck(x2))
        y1 = self._match(torch.relu(self.up1(x2)), x1)
        y1 = torch.relu(self.dec1(torch.cat([y1, x1], dim=1)))
        y0 = self._match(torch.relu(self.up2(y1)), x0)
        y = torch.relu(self.dec2(torch.cat([y0, x0], dim=1)))
        for up in self.final:
            y = torch.relu(up(y))
        return torch.sigmoid(self.out(y))


def decode(fmap: torch.Tensor, mask: torch.Tensor, decoder: Decoder) -> torch.Tensor:
    """(h, w, D) map + (h, w) mask -> (3, h*stride, w*stride) image in [0, 1]."""
    if fmap.ndim != 3 or fmap.shape[-1] != decoder.in_channels:
        raise ShapeError(f"decoder expects (h, w, {decoder.in_channels}) features, got {tuple(fmap.shape)}")
    if mask.shape != fmap.shape[:2]:
        raise ShapeError(f"mask {tuple(mask.shape)} does not match feature map {tuple(fmap.shape[:2])}")
    dtype = decoder.out.weight.dtype
    x = fmap.permute(2, 0, 1).unsqueeze(0).to(dtype)
    return decoder(x, mask.to(dtype)[None, None])[0]


def render_view(cloud, view: CameraView, cfg: SplatConfig, decoder: Decoder,
                plan: SplatPlan | None = None) -> torch.Tensor:
    """Splat then decode; returns a (3, H, W) image cropped to the view size."""
    fmap, mask = splat(cloud, view, cfg, plan)
    img = decode(fmap, mask, decoder)
    return img[:, : view.intrinsics.height, : view.intrinsics.width]


def to_hwc(image: torch.Tensor) -> np.ndarray:
    return image.detach().permute(1, 2, 0).cpu().numpy()
