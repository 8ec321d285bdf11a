"""Stylization and view-consistency metrics.

RMSE values are in [0, 1] color units.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigError, InvalidDepthError, ParameterError
from .losses import text_mean
from .scene_io import EPS_DEPTH, CameraView, backproject_pixels, pixel_grid, project_points
from .text_style import embed_images

SHORT_RANGE = 1
LONG_RANGE = 7


def _as_chw(image) -> torch.Tensor:
    if isinstance(image, torch.Tensor):
        return image.detach()
    return torch.from_numpy(np.asarray(image, dtype=np.float32)).permute(2, 0, 1)


def clip_score(images, style_text: str, embedder, n_crops: int = 64, seed: int = 0,
               patch_size: int | None = None) -> float:
    """Mean cosine similarity between random-crop image embeddings and the style text.

    ``patch_size=None`` uses 96 or the smaller image side, whichever is less.
    """
    if len(images) == 0:
        raise ParameterError("clip_score needs at least one image")
    gen = torch.Generator().manual_seed(int(seed))
    target = text_mean(embedder, style_text)
    scores = []
    for image in images:
        img = _as_chw(image)
        _, h, w = img.shape
        s = patch_size or min(96, h, w)
        if s > min(h, w):
            raise ConfigError(f"crop size {s} exceeds image {h}x{w}")
        crops = []
        for _ in range(n_crops):
            top = int(torch.randint(0, h - s + 1, (1,), generator=gen))
            left = int(torch.randint(0, w - s + 1, (1,), generator=gen))
            crops.append(img[:, top: top + s, left: left + s])
        with torch.no_grad():
            emb = embed_images(embedder, torch.stack(crops)).double()
        t = target.to(emb.dtype)
        cos = emb @ t / (emb.norm(dim=1) * t.norm())
        scores.append(cos.mean().item())
    return float(np.mean(scores))


@dataclass(frozen=True, eq=False)
class ConsistencyPair:
    view_i: CameraView
    view_j: CameraView
    pixels_i: np.ndarray  # (M, 2) int (u, v)
    pixels_j: np.ndarray  # (M, 2) int (u, v)
    valid: np.ndarray  # (H_i, W_i) bool: which view_i pixels have a correspondence

    def __len__(self):
        return len(self.pixels_i)


def build_correspondence(view_i: CameraView, view_j: CameraView, rel_tol: float = 0.01) -> ConsistencyPair:
    """Warp every valid pixel of view i into view j through its depth.

    Kept when it lands in frame and view j's depth at the landing pixel agrees
    with the warped depth to ``rel_tol`` (relative); otherwise masked.
    """
    if view_i.depth is None or view_j.depth is None:
        raise InvalidDepthError("both views need depth maps to build correspondences")
    hi, wi = view_i.shape
    hj, wj = view_j.shape
    pix = pixel_grid(hi, wi)
    d = view_i.depth.reshape(-1).astype(np.float64)
    src = np.nonzero(d > 0)[0]
    world = backproject_pixels(pix[src], d[src], view_i)
    proj, z = project_points(world, view_j)
    ok = z > EPS_DEPTH
    uv = np.full((len(src), 2), -1, dtype=np.int64)
    uv[ok] = np.rint(proj[ok]).astype(np.int64)
    ok &= (uv[:, 0] >= 0) & (uv[:, 0] < wj) & (uv[:, 1] >= 0) & (uv[:, 1] < hj)
    dj = np.zeros(len(src))
    dj[ok] = view_j.depth[uv[ok, 1], uv[ok, 0]]
    ok &= (dj > 0) & (np.abs(z - dj) <= rel_tol * np.maximum(dj, EPS_DEPTH))
    valid = np.zeros(hi * wi, dtype=bool)
    valid[src[ok]] = True
    return ConsistencyPair(view_i, view_j, pix[src[ok]].astype(np.int64), uv[ok], valid.reshape(hi, wi))


def pair_rmse(frame_i: np.ndarray, frame_j: np.ndarray, pair: ConsistencyPair) -> float:
    a = np.asarray(frame_i, dtype=np.float64)[pair.pixels_i[:, 1], pair.pixels_i[:, 0]]
    b = np.asarray(frame_j, dtype=np.float64)[pair.pixels_j[:, 1], pair.pixels_j[:, 0]]
    return float(np.sqrt(np.mean((a - b) ** 2)))


def sequence_correspondences(views, stride: int) -> dict:
    return {(t - stride, t): build_correspondence(views[t - stride], views[t])
            for t in range(stride, len(views))}


def consistency_details(frames, stride: int, pairs) -> list[dict]:
    """Per-pair RMSE between frame t-stride and frame t.

    ``pairs`` maps ``(t - stride, t)`` to a ConsistencyPair, or is the list of
    camera views to build them from.  Pairs without correspondences are skipped.
    """
    frames = [np.asarray(f, dtype=np.float64) for f in frames]
    if len(frames) < stride + 1:
        raise ParameterError(f"need at least {stride + 1} frames for stride {stride}, got {len(frames)}")
    if not isinstance(pairs, dict):
        pairs = sequence_correspondences(pairs, stride)
    out = []
    for t in range(stride, len(frames)):
        pair = pairs[(t - stride, t)]
        if len(pair) == 0:
            continue
        out.append({"i": t - stride, "j": t, "n": len(pair), "rmse": pair_rmse(frames[t - stride], frames[t], pair)})
    return out


def consistency_rmse(frames, stride: int, pairs) -> float:
    details = consistency_details(frames, stride, pairs)
    if not details:
        raise ParameterError("no frame pair has any valid correspondence")
    return float(np.mean([d["rmse"] for d in details]))


def evaluate_sequence(frames, views, style_text: str, embedder, seed: int = 0, n_crops: int = 64) -> dict:
    """Report dict with ``clip_score``, ``rmse_short``, ``rmse_long`` and per-pair details."""
    report = {"style": style_text, "n_frames": len(frames),
              "clip_score": clip_score(frames, style_text, embedder, n_crops, seed)}
    for key, stride in (("short", SHORT_RANGE), ("long", LONG_RANGE)):
        if len(frames) > stride:
            details = consistency_details(frames, stride, views)
            report[f"rmse_{key}"] = float(np.mean([d["rmse"] for d in details])) if details else None
            report[f"pairs_{key}"] = details
        else:
            report[f"rmse_{key}"] = None
            report[f"pairs_{key}"] = []
    return report
