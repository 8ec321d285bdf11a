"""Lift posed images into a merged feature point cloud."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import EmptyCloudError, FormatError, ParameterError, SizeError
from .scene_io import Scene, backproject_pixels

CLOUD_MAGIC = b"FPCL"
FLAG_COLORS = 1


class ImageEncoder(nn.Module):
    """Three conv blocks (strides 1, 2, 2), ReLU after each.

    Padding 1 with 3x3 kernels puts feature cell ``j`` over pixel ``j*stride``.
    """

    def __init__(self, channels=(64, 128, 256)):
        super().__init__()
        c1, c2, c3 = channels
        self.blocks = nn.ModuleList([
            nn.Conv2d(3, c1, 3, stride=1, padding=1),
            nn.Conv2d(c1, c2, 3, stride=2, padding=1),
            nn.Conv2d(c2, c3, 3, stride=2, padding=1),
        ])
        self.stride = 4
        self.channels = c3
        self.widths = tuple(channels)

    def stages(self, x: torch.Tensor) -> list[torch.Tensor]:
        """Activations after every block for a (B, 3, H, W) batch."""
        out = []
        for conv in self.blocks:
            x = torch.relu(conv(x))
            out.append(x)
        return out

    def forward(self, x):
        return self.stages(x)[-1]


def random_encoder(seed: int, channels=(64, 128, 256)) -> ImageEncoder:
    gen = torch.Generator().manual_seed(int(seed))
    enc = ImageEncoder(channels)
    with torch.no_grad():
        for conv in enc.blocks:
            fan_in = conv.in_channels * 9
            conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * np.sqrt(2.0 / fan_in))
            conv.bias.zero_()
    enc.requires_grad_(False)
    return enc.eval()


def load_encoder(spec: str) -> ImageEncoder:
    """``random:SEED`` or a path to a saved state dict."""
    if spec.startswith("random:"):
        return random_encoder(int(spec.split(":", 1)[1]))
    state = torch.load(spec, map_location="cpu", weights_only=True)
    widths = tuple(state[f"blocks.{i}.weight"].shape[0] for i in range(3))
    enc = ImageEncoder(widths)
    enc.load_state_dict(state)
    enc.requires_grad_(False)
    return enc.eval()


def image_to_tensor(image) -> torch.Tensor:
    """H x W x 3 array -> 1 x 3 x H x W float tensor."""
    t = torch.as_tensor(np.asarray(image, dtype=np.float32))
    return t.permute(2, 0, 1).unsqueeze(0).contiguous()


def encode_image(image, encoder: ImageEncoder) -> torch.Tensor:
    """Encode one H x W x 3 image into an (H/stride) x (W/stride) x C feature map."""
    h, w = np.shape(image)[:2]
    if h < encoder.stride or w < encoder.stride:
        raise SizeError(f"image {h}x{w} smaller than encoder stride {encoder.stride}")
    with torch.no_grad():
        fmap = encoder(image_to_tensor(image))
    return fmap[0].permute(1, 2, 0)


@dataclass(frozen=True, eq=False)
class FeaturePointCloud:
    positions: np.ndarray  # (N, 3) float64
    features: np.ndarray  # (N, D) float32
    source_view: np.ndarray  # (N,) int64
    colors: np.ndarray | None = None

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        feat = np.asarray(self.features, dtype=np.float32)
        if len(pos) == 0:
            raise EmptyCloudError("feature cloud is empty")
        if feat.ndim != 2 or len(feat) != len(pos):
            raise ParameterError(f"features {feat.shape} do not match {len(pos)} positions")
        if not np.all(np.isfinite(pos)) or not np.all(np.isfinite(feat)):
            raise ParameterError("feature cloud contains NaN/Inf")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "features", feat)
        object.__setattr__(self, "source_view", np.asarray(self.source_view, dtype=np.int64).reshape(-1))
        if self.colors is not None:
            object.__setattr__(self, "colors", np.asarray(self.colors, dtype=np.float32).reshape(-1, 3))

    def __len__(self):
        return len(self.positions)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def extent(self) -> float:
        return float((self.positions.max(axis=0) - self.positions.min(axis=0)).max())


def voxel_dedup(cloud: FeaturePointCloud, voxel: float) -> FeaturePointCloud:
    """Merge points sharing a voxel: centroid position, mean feature and color.

    Output is ordered by voxel index; the surviving tag is that of the
    lowest-index member.
    """
    if not voxel > 0:
        raise ParameterError(f"voxel size must be positive, got {voxel}")
    keys = np.floor(cloud.positions / voxel).astype(np.int64)
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    counts = np.bincount(inverse).astype(np.float64)[:, None]

    def mean(values):
        acc = np.zeros((len(uniq), values.shape[1]), dtype=np.float64)
        np.add.at(acc, inverse, values)
        return acc / counts

    first = np.full(len(uniq), len(cloud), dtype=np.int64)
    np.minimum.at(first, inverse, np.arange(len(cloud)))
    colors = None if cloud.colors is None else mean(cloud.colors)
    return FeaturePointCloud(mean(cloud.positions), mean(cloud.features), cloud.source_view[first], colors)


def default_voxel(cloud: FeaturePointCloud) -> float:
    return cloud.extent() / 256.0


def build_feature_cloud(scene: Scene, encoder: ImageEncoder, voxel: float | None = None,
                        dedup: bool = True) -> FeaturePointCloud:
    """One point per valid feature cell per view, merged across views.

    ``voxel=None`` uses extent/256; ``dedup=False`` keeps the plain concatenation.
    """
    stride = encoder.stride
    positions, features, tags, colors = [], [], [], []
    for idx, view in enumerate(scene.views):
        fmap = encode_image(view.image, encoder).numpy()
        gh, gw = fmap.shape[:2]
        rows, cols = np.mgrid[0:gh, 0:gw]
        px_u, px_v = cols.ravel() * stride, rows.ravel() * stride
        depth = view.depth[px_v, px_u]
        valid = depth > 0
        if not valid.any():
            continue
        pix = np.stack([px_u[valid], px_v[valid]], axis=1).astype(np.float64)
        positions.append(backproject_pixels(pix, depth[valid], view))
        features.append(fmap.reshape(-1, fmap.shape[2])[valid])
        tags.append(np.full(int(valid.sum()), idx, dtype=np.int64))
        colors.append(view.image[px_v[valid], px_u[valid]])
    if not positions:
        raise EmptyCloudError(f"scene {scene.name!r}: every depth sample is invalid")
    cloud = FeaturePointCloud(np.concatenate(positions), np.concatenate(features),
                              np.concatenate(tags), np.concatenate(colors))
    if not dedup:
        return cloud
    return voxel_dedup(cloud, default_voxel(cloud) if voxel is None else voxel)


def save_cloud(cloud: FeaturePointCloud, path) -> None:
    flags = FLAG_COLORS if cloud.colors is not None else 0
    n, d = cloud.features.shape
    with open(path, "wb") as fh:
        fh.write(CLOUD_MAGIC + struct.pack("<III", n, d, flags))
        fh.write(np.ascontiguousarray(cloud.positions, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(cloud.features, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(cloud.source_view, dtype="<u4").tobytes())
        if flags & FLAG_COLORS:
            fh.write(np.ascontiguousarray(cloud.colors, dtype="<f4").tobytes())


def load_cloud(path) -> FeaturePointCloud:
    data = Path(path).read_bytes()
    if data[:4] != CLOUD_MAGIC:
        raise FormatError(f"{path}: not a feature cloud (bad magic)")
    n, d, flags = struct.unpack("<III", data[4:16])
    sizes = [n * 3 * 4, n * d * 4, n * 4] + ([n * 3 * 4] if flags & FLAG_COLORS else [])
    if len(data) != 16 + sum(sizes):
        raise FormatError(f"{path}: truncated or oversized ({len(data)} bytes)")
    off = 16
    chunks = []
    for size, dtype in zip(sizes, ["<f4", "<f4", "<u4", "<f4"]):
        chunks.append(np.frombuffer(data, dtype=dtype, count=size // 4, offset=off))
        off += size
    colors = chunks[3].reshape(n, 3).copy() if flags & FLAG_COLORS else None
    return FeaturePointCloud(chunks[0].reshape(n, 3).astype(np.float64), chunks[1].reshape(n, d).copy(),
                             chunks[2].astype(np.int64), colors)
