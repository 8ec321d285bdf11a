"""``pointstyle`` command line: one entry point, one subcommand per pipeline stage.

Every subcommand writes ``manifest_<command>.json`` (arguments, resolved
config, seed, library versions) into its output directory.  Exit codes: 0 on
success, 1 on a runtime or input error (message on stderr), 2 on usage errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import __version__
from .errors import PointStyleError, SceneLoadError

log = logging.getLogger("pointstyle")


def _versions() -> dict:
    return {"pointstyle": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "torch": torch.__version__}


def _write_manifest(out_dir, command: str, args, config: dict | None = None, seed=None) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    arg_dict = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"}
    manifest = {"command": command, "args": arg_dict, "config": config or {}, "seed": seed,
                "versions": _versions()}
    path = out_dir / f"manifest_{command}.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True, default=str))
    return path


def _require_file(path) -> Path:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    return path


def _out_parent(path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path.parent


def _load_scene(path):
    from .scene_io import load_scene

    return load_scene(_require_file(path))


def _save_png(image_hwc: np.ndarray, path) -> None:
    rgb = np.clip(np.rint(np.asarray(image_hwc) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(rgb, mode="RGB").save(path)


def _read_png(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0


# -- subcommands -------------------------------------------------------------

def cmd_make_synthetic(args) -> int:
    from .scene_io import SyntheticSpec, make_synthetic_scene, save_scene

    spec = SyntheticSpec(n_views=args.views, n_points=args.points, texture=args.texture,
                         image_size=args.size, arc_step=args.arc_step)
    scene = make_synthetic_scene(spec, args.seed)
    save_scene(scene, args.out)
    _write_manifest(args.out, "make-synthetic", args, vars(spec), args.seed)
    print(json.dumps({"scene": str(args.out), "views": len(scene.views)}))
    return 0


def cmd_build_cloud(args) -> int:
    from .feature_cloud import build_feature_cloud, load_encoder, save_cloud

    scene = _load_scene(args.scene)
    if not args.encoder.startswith("random:"):
        _require_file(args.encoder)
    encoder = load_encoder(args.encoder)
    cloud = build_feature_cloud(scene, encoder, args.voxel, dedup=not args.no_dedup)
    save_cloud(cloud, args.out)
    _write_manifest(_out_parent(args.out), "build-cloud", args)
    print(json.dumps({"cloud": str(args.out), "points": len(cloud), "dim": cloud.dim}))
    return 0


def _templates(path):
    from .text_style import default_templates, read_templates

    return default_templates() if path is None else read_templates(_require_file(path))


def cmd_embed_style(args) -> int:
    from .text_style import embed_style, load_embedder

    embedder = load_embedder(args.embedder)
    emb = embed_style(args.text, embedder, _templates(args.templates))
    out_dir = _out_parent(args.out)
    Path(args.out).write_text(json.dumps(emb.to_json()))
    _write_manifest(out_dir, "embed-style", args)
    print(json.dumps({"style": args.text, "prompts": len(emb.prompts), "dim": int(emb.mean.shape[0])}))
    return 0


def _train_config(args):
    """Defaults, overridden by flags, overridden by the config file."""
    import yaml

    from .training import TrainConfig

    data = {}
    if args.seed is not None:
        data["seed"] = args.seed
    if args.config is not None:
        cfg_path = _require_file(args.config)
        file_cfg = yaml.safe_load(cfg_path.read_text()) or {}
        if not isinstance(file_cfg, dict):
            raise PointStyleError(f"{cfg_path}: config must be a mapping")
        data.update(file_cfg)
        data["scenes"] = [str(cfg_path.parent / s) for s in data.get("scenes", [])]
    return TrainConfig.from_dict(data)


def cmd_train(args) -> int:
    from .plotting import plot_loss_curves
    from .training import Checkpoint, train_decoder, train_style

    config = _train_config(args)
    scenes = [_load_scene(p) for p in config.scenes]
    if args.steps is not None:
        key = "steps_stage1" if args.stage == 1 else "steps_stage2"
        config = type(config).from_dict({**config.to_dict(), key: args.steps})
    out = Path(args.out)
    out_dir = _out_parent(out)
    log_path = out.with_suffix(".jsonl")
    log_path.unlink(missing_ok=True)
    history = []
    start = Checkpoint.load(_require_file(args.checkpoint)) if args.checkpoint else None
    if args.stage == 1:
        ckpt = train_decoder(scenes, config, start, log_path=log_path, history=history)
    else:
        if start is None:
            raise PointStyleError("stage 2 needs --checkpoint from stage 1")
        ckpt = train_style(scenes, config.styles, start, config, log_path=log_path, history=history)
    ckpt.save(out)
    if history:
        plot_loss_curves(history, out.with_suffix(".losses.png"))
    _write_manifest(out_dir, f"train-stage{args.stage}", args, config.to_dict(), config.seed)
    last = history[-1].total if history else None
    print(json.dumps({"checkpoint": str(out), "stage": args.stage, "step": ckpt.step, "last_loss": last}))
    return 0


def cmd_stylize(args) -> int:
    from .feature_cloud import FeaturePointCloud, load_cloud, save_cloud
    from .training import Checkpoint, stylize_scene

    ckpt = Checkpoint.load(_require_file(args.checkpoint))
    if (args.scene is None) == (args.cloud is None):
        raise PointStyleError("give exactly one of --scene or --cloud")
    source = _load_scene(args.scene) if args.scene else load_cloud(_require_file(args.cloud))
    styled = stylize_scene(source, args.style, ckpt)
    cloud = FeaturePointCloud(styled.positions, styled.features.detach().float().numpy(),
                              styled.source_view, styled.colors)
    save_cloud(cloud, args.out)
    _write_manifest(_out_parent(args.out), "stylize", args, ckpt.config, ckpt.config.get("seed"))
    print(json.dumps({"cloud": str(args.out), "style": args.style, "points": len(cloud)}))
    return 0


def _cameras(args):
    """(index, CameraView) pairs named by ``--camera``: an index, ``all`` or a pose JSON."""
    from .scene_io import camera_from_json

    spec = args.camera
    if spec.endswith(".json"):
        return [(0, camera_from_json(json.loads(_require_file(spec).read_text())))]
    if args.scene is None:
        raise PointStyleError("--camera INDEX|all needs --scene")
    scene = _load_scene(args.scene)
    if spec == "all":
        return list(enumerate(scene.views))
    try:
        index = int(spec)
    except ValueError:
        raise PointStyleError(f"--camera must be an index, 'all' or a .json pose, got {spec!r}") from None
    if not 0 <= index < len(scene.views):
        raise PointStyleError(f"camera index {index} out of range (scene has {len(scene.views)} views)")
    return [(index, scene.views[index])]


def cmd_render(args) -> int:
    from .feature_cloud import load_cloud
    from .renderer import render_view, to_hwc
    from .training import Checkpoint, Model, TrainConfig

    cloud = load_cloud(_require_file(args.cloud))
    ckpt = Checkpoint.load(_require_file(args.checkpoint))
    model = Model(TrainConfig.from_dict(ckpt.config), ckpt)
    cameras = _cameras(args)
    out = Path(args.out)
    written = []
    with torch.no_grad():
        for index, view in cameras:
            img = to_hwc(render_view(cloud, view, model.splat_cfg, model.decoder))
            if args.camera == "all":
                out.mkdir(parents=True, exist_ok=True)
                path = out / f"{index:04d}.png"
            else:
                out.parent.mkdir(parents=True, exist_ok=True)
                path = out
            _save_png(img, path)
            written.append(str(path))
    _write_manifest(out if args.camera == "all" else out.parent, "render", args, ckpt.config,
                    ckpt.config.get("seed"))
    print(json.dumps({"frames": written}))
    return 0


def cmd_evaluate(args) -> int:
    from .evaluation import evaluate_sequence
    from .plotting import plot_consistency, plot_frames
    from .text_style import load_embedder

    scene = _load_scene(args.scene)
    frames_dir = _require_file(args.frames)
    frames = []
    for i in range(len(scene.views)):
        path = frames_dir / f"{i:04d}.png"
        if not path.is_file():
            raise SceneLoadError(f"missing frame {path}", path)
        frames.append(_read_png(path))
    embedder = load_embedder(args.embedder, args.input_size)
    report = evaluate_sequence(frames, list(scene.views), args.style, embedder, args.seed, args.n_crops)
    report_path = Path(args.report)
    out_dir = _out_parent(report_path)
    report_path.write_text(json.dumps(report, indent=1))
    stem = report_path.with_suffix("")
    plot_consistency(report, f"{stem}.consistency.png")
    plot_frames(frames, f"{stem}.frames.png", titles=list(range(len(frames))))
    _write_manifest(out_dir, "evaluate", args, seed=args.seed)
    print(json.dumps({k: report[k] for k in ("clip_score", "rmse_short", "rmse_long")}))
    return 0


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pointstyle", description="Text-driven point-cloud stylization pipeline.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", required=True)

    s = sub.add_parser("make-synthetic", help="generate a synthetic posed scene")
    s.add_argument("--views", type=int, default=4)
    s.add_argument("--points", type=int, default=5000, help="number of surface mosaic seeds")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--texture", default="checker", choices=("checker", "stripes", "noise"))
    s.add_argument("--size", type=int, default=64, help="image side in pixels")
    s.add_argument("--arc-step", type=float, default=8.0, help="degrees between consecutive cameras")
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_make_synthetic)

    s = sub.add_parser("build-cloud", help="lift encoder features of a scene into a point cloud")
    s.add_argument("--scene", type=Path, required=True)
    s.add_argument("--encoder", default="random:0", help="random:SEED or a state_dict path")
    s.add_argument("--voxel", type=float, default=None, help="merge voxel size (default: extent/256)")
    s.add_argument("--no-dedup", action="store_true")
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_build_cloud)

    s = sub.add_parser("embed-style", help="template-ensemble embedding of a style text")
    s.add_argument("--text", required=True)
    s.add_argument("--embedder", default="stub:0", help="stub:SEED[:DIM] or export:PATH")
    s.add_argument("--templates", type=Path, default=None, help="one template per line with {}")
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_embed_style)

    s = sub.add_parser("train", help="stage 1 (decoder) or stage 2 (style transform) training")
    s.add_argument("--config", type=Path, default=None, help="YAML file with TrainConfig fields")
    s.add_argument("--stage", type=int, choices=(1, 2), required=True)
    s.add_argument("--checkpoint", type=Path, default=None, help="stage-1 result for stage 2, or a run to resume")
    s.add_argument("--steps", type=int, default=None, help="override the stage's step count")
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("stylize", help="stylize a scene or feature cloud with a text style")
    s.add_argument("--checkpoint", type=Path, required=True)
    s.add_argument("--scene", type=Path, default=None)
    s.add_argument("--cloud", type=Path, default=None)
    s.add_argument("--style", required=True)
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_stylize)

    s = sub.add_parser("render", help="render a (stylized) feature cloud to PNG")
    s.add_argument("--cloud", type=Path, required=True)
    s.add_argument("--camera", required=True, help="view INDEX, 'all', or a pose .json")
    s.add_argument("--scene", type=Path, default=None, help="scene holding the cameras")
    s.add_argument("--checkpoint", type=Path, required=True)
    s.add_argument("--out", type=Path, required=True, help="PNG file, or a directory with --camera all")
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("evaluate", help="clip score and view-consistency RMSE of rendered frames")
    s.add_argument("--frames", type=Path, required=True, help="directory of NNNN.png frames, one per view")
    s.add_argument("--scene", type=Path, required=True)
    s.add_argument("--style", required=True)
    s.add_argument("--embedder", default="stub:0")
    s.add_argument("--input-size", type=int, default=None, help="embedder input resolution")
    s.add_argument("--n-crops", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--report", type=Path, required=True)
    s.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        path = exc.filename if exc.filename is not None else exc.args[0]
        print(f"error: file not found: {path}", file=sys.stderr)
        return 1
    except PointStyleError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
