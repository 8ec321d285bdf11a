"""Two-stage training: decoder reconstruction first, then the style transform."""

from __future__ import annotations

import dataclasses
import io
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .errors import ConfigError
from .feature_cloud import FeaturePointCloud, ImageEncoder, build_feature_cloud, image_to_tensor, load_encoder
from .losses import (
    LossReport,
    PatchConfig,
    content_disparity,
    content_loss,
    divergence_loss,
    gs_loss,
    patch_loss,
    sample_style_pairs,
    style_total,
    tv_loss,
)
from .renderer import Decoder, SplatConfig, apply_plan, splat_plan
from .scene_io import Scene
from .style_transform import (
    StylizedCloud,
    TransformState,
    apply_style,
    global_feature,
    style_statistics,
)
from .text_style import SOURCE_TEXT, embed_style, load_embedder

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    """Every knob of both stages.  Loaded from YAML/JSON; unknown keys are rejected."""

    batch_size: int = 4
    lr: float = 1e-4
    betas: tuple = (0.9, 0.9999)
    eps: float = 1e-8
    lambda_rgb: float = 5e-3
    lambda_feat: float = 1.0
    lambda_s: float = 15.0
    lambda_gs: float = 15.0
    lambda_tv: float = 1.3e-6
    steps_stage1: int = 500
    steps_stage2: int = 300
    seed: int = 0
    styles: list = field(default_factory=list)
    scenes: list = field(default_factory=list)
    source_text: str = SOURCE_TEXT
    use_divergence: bool = True
    use_global: bool = True
    freeze_decoder: bool = True
    own_view_dropout: float = 0.0
    pair_fraction: float = 0.8
    encoder: str = "random:0"
    embedder: str = "stub:0"
    embed_input_size: int = 224
    compress_dim: int = 64
    global_width: int = 1024
    predictor_hidden: int | None = None
    voxel: float | None = None
    decoder_widths: tuple = (64, 128, 128)
    patch: PatchConfig = field(default_factory=PatchConfig)
    splat: SplatConfig = field(default_factory=SplatConfig)
    version: int = CHECKPOINT_VERSION

    def __post_init__(self):
        if isinstance(self.patch, dict):
            self.patch = _dataclass_from_dict(PatchConfig, self.patch, "patch")
        if isinstance(self.splat, dict):
            self.splat = _dataclass_from_dict(SplatConfig, self.splat, "splat")
        self.betas = tuple(self.betas)
        self.decoder_widths = tuple(self.decoder_widths)
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        for name in ("lambda_rgb", "lambda_feat", "lambda_s", "lambda_gs", "lambda_tv", "lr"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        return _dataclass_from_dict(cls, data, "config")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["betas"] = list(self.betas)
        d["decoder_widths"] = list(self.decoder_widths)
        return d


def _dataclass_from_dict(cls, data, where):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown {where} keys: {', '.join(unknown)}")
    data = dict(data)
    if cls is SplatConfig and data.get("feature_hw") is not None:
        data["feature_hw"] = tuple(data["feature_hw"])
    return cls(**data)


def load_config(path) -> TrainConfig:
    import yaml

    text = Path(path).read_text()
    data = yaml.safe_load(text) or {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: config must be a mapping")
    return TrainConfig.from_dict(data)


@dataclass
class Checkpoint:
    config: dict
    encoder: dict
    decoder: dict
    transform: dict | None = None
    stage: int = 1
    step: int = 0
    optimizer: dict | None = None
    rng: dict | None = None
    dims: dict = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION

    def save(self, path) -> None:
        buf = io.BytesIO()
        torch.save(dataclasses.asdict(self), buf)
        Path(path).write_bytes(buf.getvalue())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        data = torch.load(path, map_location="cpu", weights_only=False)
        if data.get("version") != CHECKPOINT_VERSION:
            raise ConfigError(f"{path}: unsupported checkpoint version {data.get('version')}")
        return cls(**data)


def _clone_state(module) -> dict:
    return {k: v.detach().clone() for k, v in module.state_dict().items()}


def embedder_dim(embedder) -> int:
    if hasattr(embedder, "dim"):
        return int(embedder.dim)
    return int(np.asarray(embedder.embed_text("probe")).shape[-1])


class Model:
    """Encoder, decoder and style transform restored from (or for) a checkpoint."""

    def __init__(self, config: TrainConfig, checkpoint: Checkpoint | None = None, embed_dim: int | None = None):
        self.config = config
        if checkpoint is not None and checkpoint.encoder:
            widths = tuple(checkpoint.encoder[f"blocks.{i}.weight"].shape[0] for i in range(3))
            self.encoder = ImageEncoder(widths)
            self.encoder.load_state_dict(checkpoint.encoder)
            self.encoder.requires_grad_(False).eval()
        else:
            self.encoder = load_encoder(config.encoder)
        self.decoder = Decoder(self.encoder.channels, config.decoder_widths, self.encoder.stride, seed=config.seed)
        if checkpoint is not None:
            self.decoder.load_state_dict(checkpoint.decoder)
        self.splat_cfg = dataclasses.replace(config.splat, stride=self.encoder.stride)
        self.transform = None
        if checkpoint is not None and checkpoint.transform is not None:
            dims = checkpoint.dims
            self.transform = self._new_transform(dims["embed_dim"])
            self.transform.load_state_dict(checkpoint.transform)
        elif embed_dim is not None:
            self.transform = self._new_transform(embed_dim)
        if self.transform is not None:
            self.transform.use_global = config.use_global

    def _new_transform(self, embed_dim):
        c = self.config
        return TransformState(self.encoder.channels, embed_dim, c.compress_dim, c.global_width,
                              c.predictor_hidden, use_global=c.use_global, seed=c.seed + 17)

    def checkpoint(self, stage, step, optimizer=None, rng=None) -> Checkpoint:
        dims = {"embed_dim": self.transform.embed_dim} if self.transform is not None else {}
        return Checkpoint(
            config=self.config.to_dict(),
            encoder=_clone_state(self.encoder),
            decoder=_clone_state(self.decoder),
            transform=_clone_state(self.transform) if self.transform is not None else None,
            stage=stage, step=step,
            optimizer=optimizer.state_dict() if optimizer is not None else None,
            rng=rng, dims=dims,
        )


class _SceneCache:
    """Feature clouds, splat plans and ground-truth tensors, computed once per scene."""

    def __init__(self, scenes, model: Model):
        self.scenes = list(scenes)
        self.model = model
        self.clouds = [build_feature_cloud(s, model.encoder, model.config.voxel) for s in self.scenes]
        self.targets = [[image_to_tensor(v.image)[0] for v in s.views] for s in self.scenes]
        self._plans = {}

    def plan(self, si, vi, exclude_own=False):
        """Splat plan of view ``vi``; ``exclude_own`` drops points lifted from that view."""
        key = (si, vi, exclude_own)
        if key not in self._plans:
            cloud = self.clouds[si]
            view = self.scenes[si].views[vi]
            if exclude_own:
                keep = np.nonzero(cloud.source_view != vi)[0]
                plan = splat_plan(cloud.positions[keep], view, self.model.splat_cfg)
                plan = dataclasses.replace(plan, point=torch.from_numpy(keep)[plan.point])
            else:
                plan = splat_plan(cloud.positions, view, self.model.splat_cfg)
            self._plans[key] = plan
        return self._plans[key]

    def render(self, si, vis, features, exclude_own=None):
        """Decode a batch of views of scene ``si`` from per-view feature tensors."""
        maps, masks = [], []
        exclude_own = exclude_own or [False] * len(vis)
        for vi, feats, ex in zip(vis, features, exclude_own):
            plan = self.plan(si, vi, ex)
            maps.append(apply_plan(feats, plan).permute(2, 0, 1))
            masks.append(plan.mask.to(feats.dtype)[None])
        out = self.model.decoder(torch.stack(maps), torch.stack(masks))
        h, w = self.scenes[si].views[0].shape
        return out[:, :, :h, :w]


def _pick_views(rng, n_views, batch):
    order = rng.permutation(n_views)
    return [int(order[k % n_views]) for k in range(batch)]


def _rng_state(np_rng, torch_gen):
    return {"numpy": np_rng.bit_generator.state, "torch": torch_gen.get_state()}


def _restore_rng(state, seed, stage):
    np_rng = np.random.default_rng([seed, stage])
    gen = torch.Generator().manual_seed(seed * 1000 + stage)
    if state is not None:
        np_rng.bit_generator.state = state["numpy"]
        gen.set_state(state["torch"])
    return np_rng, gen


class JsonlLog:
    def __init__(self, path=None):
        self.fh = open(path, "a") if path else None
        self.records = []

    def write(self, report: LossReport):
        self.records.append(report)
        if self.fh:
            rec = json.loads(report.to_json())
            rec["wall_clock"] = time.time()
            self.fh.write(json.dumps(rec) + "\n")
            self.fh.flush()

    def close(self):
        if self.fh:
            self.fh.close()


def _check_scenes(scenes):
    if not scenes:
        raise ConfigError("no training scenes given")
    for s in scenes:
        if len(s.views) < 2:
            raise ConfigError(f"scene {s.name!r} needs at least 2 views")


def train_decoder(scenes, config: TrainConfig, checkpoint: Checkpoint | None = None,
                  steps: int | None = None, log_path=None, history: list | None = None) -> Checkpoint:
    """Stage 1: fit the decoder to reconstruct ground-truth views from raw features.

    Passing a stage-1 ``checkpoint`` resumes it (optimizer and RNG included).
    """
    _check_scenes(scenes)
    resume = checkpoint if checkpoint is not None and checkpoint.stage == 1 else None
    model = Model(config, resume)
    cache = _SceneCache(scenes, model)
    opt = torch.optim.Adam(model.decoder.parameters(), lr=config.lr, betas=config.betas, eps=config.eps)
    if resume is not None and resume.optimizer is not None:
        opt.load_state_dict(resume.optimizer)
    np_rng, gen = _restore_rng(resume.rng if resume else None, config.seed, 1)
    start = resume.step if resume else 0
    total = config.steps_stage1 if steps is None else start + steps
    logger = JsonlLog(log_path)
    for step in range(start, total):
        si = step % len(scenes)
        vis = _pick_views(np_rng, len(scenes[si].views), config.batch_size)
        feats = torch.from_numpy(cache.clouds[si].features)
        exclude = list(np.random.default_rng([config.seed, step]).random(len(vis)) < config.own_view_dropout)
        renders = cache.render(si, vis, [feats] * len(vis), exclude)
        target = torch.stack([cache.targets[si][v] for v in vis])
        feat, rgb = content_loss(renders, target, model.encoder)
        loss = config.lambda_feat * feat + config.lambda_rgb * rgb
        opt.zero_grad()
        loss.backward()
        opt.step()
        report = LossReport(feat=feat.item(), rgb=rgb.item(), total_content=loss.item(), total=loss.item(), step=step)
        logger.write(report)
        if history is not None:
            history.append(report)
    logger.close()
    return model.checkpoint(1, total, opt, _rng_state(np_rng, gen))


def train_style(scenes, styles, checkpoint: Checkpoint, config: TrainConfig, steps: int | None = None,
                log_path=None, history: list | None = None, embedder=None, callback=None) -> Checkpoint:
    """Stage 2: train the style transform against the full objective.

    ``checkpoint`` is a stage-1 result (fresh start) or a stage-2 one (resume).
    ``callback(step, model, cache)`` runs before each step, for probes.
    """
    _check_scenes(scenes)
    styles = list(styles)
    if len(set(styles)) < 2:
        raise ConfigError("stage 2 needs at least two distinct styles")
    if config.batch_size < 2:
        raise ConfigError("stage 2 needs batch_size >= 2")
    embedder = embedder or load_embedder(config.embedder, config.embed_input_size)
    resume = checkpoint.stage == 2
    model = Model(config, checkpoint, embed_dim=embedder_dim(embedder))
    cache = _SceneCache(scenes, model)
    style_emb = {s: embed_style(s, embedder) for s in styles}
    params = list(model.transform.parameters())
    if config.freeze_decoder:
        model.decoder.requires_grad_(False)
    else:
        params += list(model.decoder.parameters())
    opt = torch.optim.Adam(params, lr=config.lr, betas=config.betas, eps=config.eps)
    if resume and checkpoint.optimizer is not None:
        opt.load_state_dict(checkpoint.optimizer)
    np_rng, gen = _restore_rng(checkpoint.rng if resume else None, config.seed, 2)
    start = checkpoint.step if resume else 0
    total = config.steps_stage2 if steps is None else start + steps
    logger = JsonlLog(log_path)
    for step in range(start, total):
        if callback is not None:
            callback(step, model, cache)
        report = _style_step(step, model, cache, style_emb, embedder, config, np_rng, gen, opt)
        logger.write(report)
        if history is not None:
            history.append(report)
    logger.close()
    return model.checkpoint(2, total, opt, _rng_state(np_rng, gen))


def batch_styles(rng, styles, batch):
    order = rng.permutation(len(styles))
    return [styles[int(order[k % len(styles)])] for k in range(batch)]


def stylize_batch(model: Model, cloud: FeaturePointCloud, style_emb: dict, styles) -> dict:
    f = torch.from_numpy(cloud.features)
    g = global_feature(f, model.transform) if model.transform.use_global else None
    out = {}
    for s in dict.fromkeys(styles):
        stats = style_statistics(style_emb[s].vectors, model.transform)
        out[s] = apply_style(cloud, style_emb[s], model.transform, stats, global_raw=g)
    return out


def _style_step(step, model, cache, style_emb, embedder, config, np_rng, gen, opt) -> LossReport:
    si = step % len(cache.scenes)
    n_views = len(cache.scenes[si].views)
    vis = _pick_views(np_rng, n_views, config.batch_size)
    item_styles = batch_styles(np_rng, sorted(style_emb), config.batch_size)
    stylized = stylize_batch(model, cache.clouds[si], style_emb, item_styles)
    renders = cache.render(si, vis, [stylized[s].features for s in item_styles])
    targets = [cache.targets[si][v] for v in vis]

    patch = torch.stack([
        patch_loss(r, t, s, config.source_text, embedder, config.patch, gen)
        for r, t, s in zip(renders, targets, item_styles)
    ]).mean()
    gs = torch.stack([gs_loss(r, t, s, embedder, config.source_text)
                      for r, t, s in zip(renders, targets, item_styles)]).mean()
    feat, rgb = content_loss(renders, torch.stack(targets), model.encoder)
    tv = tv_loss(renders)
    pairs = sample_style_pairs(item_styles, config.pair_fraction, np_rng)
    if config.use_divergence:
        direction = divergence_loss(list(zip(renders, item_styles)), embedder, pairs=pairs)
        cd = torch.stack([content_disparity(targets[i], targets[j], embedder) for i, j in pairs]).mean()
    else:
        direction = torch.zeros((), dtype=renders.dtype)
        cd = torch.zeros((), dtype=renders.dtype)
    styl = style_total(patch, direction, cd)
    content = config.lambda_feat * feat + config.lambda_rgb * rgb
    loss = config.lambda_s * styl + config.lambda_gs * gs + content + config.lambda_tv * tv
    opt.zero_grad()
    loss.backward()
    opt.step()
    return LossReport(
        patch=patch.item(), dir=direction.item(), cd=cd.item(), feat=feat.item(), rgb=rgb.item(),
        tv=tv.item(), gs=gs.item(), total_style=styl.item(), total_content=content.item(),
        total=loss.item(), step=step, extra={"views": vis, "styles": item_styles, "pairs": pairs},
    )


def recombine(report: LossReport, config: TrainConfig) -> float:
    """Weighted total rebuilt from a report's parts."""
    return (config.lambda_s * (report.patch + report.dir - report.cd) + config.lambda_gs * report.gs
            + config.lambda_feat * report.feat + config.lambda_rgb * report.rgb + config.lambda_tv * report.tv)


def stylize_scene(scene_or_cloud, style_text: str, checkpoint: Checkpoint, embedder=None,
                  config: TrainConfig | None = None) -> StylizedCloud:
    """Inference: feature cloud -> style embedding -> stylized cloud."""
    config = config or TrainConfig.from_dict(checkpoint.config)
    embedder = embedder or load_embedder(config.embedder, config.embed_input_size)
    model = Model(config, checkpoint, embed_dim=embedder_dim(embedder))
    if isinstance(scene_or_cloud, Scene):
        cloud = build_feature_cloud(scene_or_cloud, model.encoder, config.voxel)
    else:
        cloud = scene_or_cloud
    with torch.no_grad():
        return apply_style(cloud, embed_style(style_text, embedder), model.transform)


def parameter_digest(module) -> str:
    import hashlib

    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().numpy().tobytes())
    return h.hexdigest()


__all__ = [
    "TrainConfig", "Checkpoint", "Model", "train_decoder", "train_style", "stylize_scene",
    "load_config", "recombine", "parameter_digest", "__version__",
]
