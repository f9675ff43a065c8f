"""Command-line entry point: ``pef synth|train|eval|predict|gradcheck|bench|inspect``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .autodiff import ShapeError
from .bench import bench_attention_scaling
from .config import OUT_ENV, RunConfig, defaults, format_value, load_config
from .data import (DataError, KeypointInstance, coco_crops, coco_document, crop_and_normalize,
                   crop_box, ensure_dir, from_crop_coords, load_coco_keypoints, read_image,
                   synthetic_dataset, write_ppm)
from .evaluate import EvaluationError, OracleModel, evaluate, matched_fit, predict_joints
from .gradcheck import SCOPES, run_suite
from .model import CheckpointError, ConfigError, load_checkpoint
from .skeleton import skeleton_for
from .train import NumericError, thread_limit, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _HelpFormatter(argparse.ArgumentDefaultsHelpFormatter):
    """Append defaults unless the help text already states one."""

    def _get_help_string(self, action):
        text = action.help or ""
        if "default" in text or action.default in (None, argparse.SUPPRESS):
            return text
        return super()._get_help_string(action)


class _Parser(argparse.ArgumentParser):
    """argparse with usage errors mapped to exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_common(p: argparse.ArgumentParser, out_default: str, config: bool = False) -> None:
    """--seed/--deterministic/--jobs/--out; on config commands they default to the config keys."""
    g = p.add_argument_group("common")
    if config:
        g.add_argument("--seed", type=int, default=None,
                       help="random seed for data order, augmentation and init; sets run.seed "
                            "and model.seed (default: 0)")
        g.add_argument("--deterministic", action="store_const", const=True, default=None,
                       help="single-threaded unless --jobs is given; bit-reproducible outputs "
                            "(default: run.deterministic = false)")
        g.add_argument("--jobs", type=int, default=None,
                       help="cap on BLAS worker threads, 0 = library default (default: 0)")
    else:
        g.add_argument("--seed", type=int, default=0, help="random seed")
        g.add_argument("--deterministic", action="store_true",
                       help="single-threaded unless --jobs is given")
        g.add_argument("--jobs", type=int, default=0,
                       help="cap on BLAS worker threads (0 = library default)")
    g.add_argument("--out", default=None,
                   help=f"output directory (default: ${OUT_ENV} or {out_default})")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="key = value config file (default: none)")
    g = p.add_argument_group("config keys (override the config file)")
    for key, value in defaults().items():
        if key in ("run.seed", "run.deterministic", "run.jobs", "run.out_dir"):
            continue   # covered by the common flags
        g.add_argument(f"--{key}", dest=key, default=argparse.SUPPRESS, metavar="V",
                       help=f"(default: {format_value(value) or repr('')})")


def build_parser() -> argparse.ArgumentParser:
    fmt = _HelpFormatter
    parser = _Parser(prog="pef", description="Transformer keypoint regression on numpy.",
                     formatter_class=fmt)
    parser.add_argument("--version", action="version", version=f"pef {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("synth", help="write synthetic stick figures + COCO annotations",
                       formatter_class=fmt)
    p.add_argument("--count", type=int, default=None,
                   help="number of figures (default: data.synthetic_count)")
    _add_config_flags(p)
    _add_common(p, "run.out_dir = runs/default", config=True)

    p = sub.add_parser("train", help="train from random init; writes loss log + checkpoint",
                       formatter_class=fmt)
    _add_config_flags(p)
    _add_common(p, "run.out_dir = runs/default", config=True)

    p = sub.add_parser("eval", help="AP/AR/L1 of a checkpoint on the configured data",
                       formatter_class=fmt)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint", default=None, help="checkpoint file")
    src.add_argument("--oracle", action="store_true", help="score a ground-truth stub predictor")
    _add_config_flags(p)
    _add_common(p, "run.out_dir = runs/default", config=True)

    p = sub.add_parser("predict", help="joints for one image, plus a PPM overlay",
                       formatter_class=fmt)
    p.add_argument("--checkpoint", required=True, help="checkpoint file")
    p.add_argument("--image", required=True, help="PPM (or any Pillow-readable) image")
    p.add_argument("--bbox", default=None, help="person box x,y,w,h in pixels (default: whole image)")
    p.add_argument("--overlay", default=None, help="overlay path (default: OUT/overlay.ppm)")
    p.add_argument("--no-overlay", action="store_true", help="skip the overlay image")
    _add_config_flags(p)
    _add_common(p, "run.out_dir = runs/default", config=True)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks", formatter_class=fmt)
    scope = p.add_mutually_exclusive_group(required=True)
    scope.add_argument("--all", action="store_true", help="primitives, blocks and the micro model")
    scope.add_argument("--scope", choices=SCOPES, default=None, help="one group of checks")
    _add_common(p, "runs/gradcheck")

    p = sub.add_parser("bench", help="self-attention vs xca wall-clock scaling", formatter_class=fmt)
    p.add_argument("--sizes", default="256,512,1024,2048,4096", help="token counts, ascending")
    p.add_argument("--dim", type=int, default=64, help="model width d")
    p.add_argument("--heads", type=int, default=1, help="attention heads")
    p.add_argument("--repetitions", type=int, default=5, help="timed forwards per point")
    p.add_argument("--warmup", type=int, default=1, help="untimed forwards per point")
    _add_common(p, "runs/bench")

    p = sub.add_parser("inspect", help="config and parameter summary of a checkpoint",
                       formatter_class=fmt)
    p.add_argument("--checkpoint", required=True, help="checkpoint file")
    _add_common(p, "runs/inspect")
    return parser


# --- helpers ----------------------------------------------------------------------

def resolve_config(args) -> RunConfig:
    overrides = {k: v for k, v in vars(args).items() if "." in k}
    if args.seed is not None:
        overrides["run.seed"] = args.seed
        overrides["model.seed"] = args.seed
    if args.deterministic:
        overrides["run.deterministic"] = True
    if args.jobs is not None:
        overrides["run.jobs"] = args.jobs
    if args.out:
        overrides["run.out_dir"] = args.out
    return load_config(args.config, overrides)


def out_dir(args, fallback: str) -> Path:
    return ensure_dir(args.out or os.environ.get(OUT_ENV) or fallback)


def _jobs(args) -> int | None:
    return args.jobs or (1 if args.deterministic else None)


def load_samples(cfg: RunConfig, num_joints: int | None = None, size=None):
    """``(image, instance)`` pairs from the annotation file, else synthetic figures."""
    k = num_joints or cfg.model.num_joints
    size = size or (cfg.model.width, cfg.model.height)
    if cfg.data.annotations:
        ds = load_coco_keypoints(cfg.data.annotations)
        samples = coco_crops(ds, size, cfg.data.image_dir or None)
        if samples and samples[0][1].num_joints != k:
            raise DataError(f"annotations have {samples[0][1].num_joints} joints, model expects {k}")
        return samples
    return synthetic_dataset(cfg.data.synthetic_count, cfg.data.synthetic_seed, k, size)


def _sigmas(cfg: RunConfig, k: int) -> np.ndarray:
    return skeleton_for(k, synthetic=not cfg.data.annotations).sigmas


def _draw_line(img: np.ndarray, a, b, color) -> None:
    n = int(max(abs(b[0] - a[0]), abs(b[1] - a[1]))) + 1
    xs = np.clip(np.round(np.linspace(a[0], b[0], n)).astype(int), 0, img.shape[1] - 1)
    ys = np.clip(np.round(np.linspace(a[1], b[1], n)).astype(int), 0, img.shape[0] - 1)
    img[ys, xs] = color


def render_overlay(image: np.ndarray, xy: np.ndarray, limbs) -> np.ndarray:
    """Joints (pixel coordinates) as red crosses, limbs as green lines."""
    img = np.asarray(image)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=2)
    img = img[..., :3].astype(np.uint8, copy=True)
    arm = max(2, min(img.shape[:2]) // 32)
    for a, b in limbs:
        _draw_line(img, xy[a] - 0.5, xy[b] - 0.5, (0, 220, 0))
    for x, y in xy - 0.5:
        _draw_line(img, (x - arm, y), (x + arm, y), (255, 0, 0))
        _draw_line(img, (x, y - arm), (x, y + arm), (255, 0, 0))
    return img


# --- commands ---------------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = resolve_config(args)
    count = cfg.data.synthetic_count if args.count is None else args.count
    if count < 0:
        raise UsageError("--count must be >= 0")
    cfg.data.synthetic_count = count
    size = (cfg.model.width, cfg.model.height)
    root = ensure_dir(cfg.out_dir)
    image_dir = ensure_dir(root / "images")
    samples = synthetic_dataset(count, cfg.data.synthetic_seed, cfg.model.num_joints, size)
    names = [f"images/{i:05d}.ppm" for i in range(count)]
    for (image, _), name in zip(samples, names):
        write_ppm(root / name, image)
    doc = coco_document(samples, skeleton_for(cfg.model.num_joints), names, size)
    (root / "annotations.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    print(f"wrote {count} figures to {image_dir} and {root / 'annotations.json'}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    root = ensure_dir(cfg.out_dir)
    (root / "config.cfg").write_text(cfg.dumps())
    samples = load_samples(cfg)
    result = train(samples, cfg.model, cfg.schedule, cfg.loss,
                   cfg.augment.spec((cfg.model.width, cfg.model.height)), seed=cfg.run.seed,
                   dtype=np.dtype(cfg.run.dtype), out_dir=root, jobs=cfg.jobs,
                   log_every=cfg.run.log_every)
    last = result.losses[-1]
    print(f"trained {len(result.losses)} steps; final loss {last.total:.6g} "
          f"(class {last.class_term:.6g}, coord {last.coord_term:.6g})")
    print(f"checkpoint: {root / 'checkpoint.pef'}")
    print(f"loss log: {root / 'loss_log.csv'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    root = ensure_dir(cfg.out_dir)
    with thread_limit(cfg.jobs):
        if args.oracle:
            samples = load_samples(cfg)
            model = OracleModel(samples, cfg.model.num_queries)
            k, label = cfg.model.num_joints, "oracle"
        else:
            ckpt = load_checkpoint(args.checkpoint)
            model = ckpt.build_model()
            mc = ckpt.config
            samples = load_samples(cfg, mc.num_joints, (mc.width, mc.height))
            k, label = mc.num_joints, str(args.checkpoint)
        if not samples:
            raise DataError("no evaluation samples")
        metrics = evaluate(model, samples, cfg.eval.flip_test, _sigmas(cfg, k),
                           rule=cfg.eval.rule, batch_size=cfg.eval.batch_size)
        fit = matched_fit(model, samples, cfg.loss.l1_weight, cfg.eval.batch_size)
    report = (f"model = {label}\nflip_test = {format_value(cfg.eval.flip_test)}\n"
              + metrics.report() + fit.report())
    (root / "metrics.txt").write_text(report)
    sys.stdout.write(report)
    return EXIT_OK


def cmd_predict(args) -> int:
    cfg = resolve_config(args)
    root = ensure_dir(cfg.out_dir)
    ckpt = load_checkpoint(args.checkpoint)
    mc = ckpt.config
    model = ckpt.build_model()
    image = read_image(args.image)
    h, w = image.shape[:2]
    if args.bbox:
        try:
            bbox = tuple(float(v) for v in args.bbox.split(","))
        except ValueError:
            raise UsageError(f"--bbox expects x,y,w,h, got {args.bbox!r}") from None
        if len(bbox) != 4:
            raise UsageError(f"--bbox expects x,y,w,h, got {args.bbox!r}")
    else:
        bbox = (0.0, 0.0, float(w), float(h))
    k = mc.num_joints
    dummy = KeypointInstance(np.zeros((k, 2)), np.zeros(k, dtype=int), bbox, 1.0)
    crop, _ = crop_and_normalize(image, dummy, (mc.width, mc.height))
    with thread_limit(cfg.jobs):
        uv, conf = predict_joints(model, crop.astype(model.dtype), cfg.eval.flip_test, rule=cfg.eval.rule)
    xy = from_crop_coords(uv, crop_box(bbox, (w, h), (mc.width, mc.height)))
    skeleton = skeleton_for(k)
    lines = ["joint\tx\ty\tconfidence"]
    lines += [f"{name}\t{x:.2f}\t{y:.2f}\t{c:.4f}"
              for name, (x, y), c in zip(skeleton.joint_names, xy, conf)]
    text = "\n".join(lines) + "\n"
    (root / "joints.tsv").write_text(text)
    sys.stdout.write(text)
    if not args.no_overlay:
        path = Path(args.overlay) if args.overlay else root / "overlay.ppm"
        write_ppm(path, render_overlay(image, xy, skeleton.limbs))
        print(f"overlay: {path}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    root = out_dir(args, "runs/gradcheck")
    scope = "all" if args.all else args.scope
    with thread_limit(_jobs(args)):
        reports = run_suite(scope, args.seed)
    lines = [str(r) for r in reports]
    failed = sum(not r.passed for r in reports)
    lines.append(f"{len(reports) - failed}/{len(reports)} checks passed")
    text = "\n".join(lines) + "\n"
    (root / "gradcheck.txt").write_text(text)
    sys.stdout.write(text)
    if failed:
        print(f"pef gradcheck: {failed} check(s) failed", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_bench(args) -> int:
    root = out_dir(args, "runs/bench")
    try:
        sizes = [int(s) for s in args.sizes.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"--sizes expects comma-separated integers, got {args.sizes!r}") from None
    if not sizes or sizes != sorted(sizes):
        raise UsageError("--sizes must be non-empty and ascending")
    if args.heads < 1 or args.dim % args.heads:
        raise UsageError("--heads must divide --dim")
    with thread_limit(_jobs(args)):
        result = bench_attention_scaling(sizes, args.dim, args.repetitions, args.heads,
                                         args.warmup, args.seed)
    (root / "bench.tsv").write_text(result.table())
    (root / "bench_summary.txt").write_text(result.summary())
    sys.stdout.write(result.table() + result.summary())
    return EXIT_OK


def cmd_inspect(args) -> int:
    root = out_dir(args, "runs/inspect")
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.build_model()
    lines = [f"epoch = {ckpt.epoch}"]
    lines += [f"model.{k} = {v}" for k, v in ckpt.config.to_items().items()]
    for k, v in ckpt.extra.items():
        lines.append(f"extra.{k} = {v}")
    if ckpt.optimizer:
        lines.append(f"optimizer.step = {int(ckpt.optimizer['step'][0])}")
    for group, params in model.parameter_groups().items():
        lines.append(f"params.{group} = {sum(p.size for _, p in params)}")
    lines.append(f"params.total = {model.num_parameters()}")
    lines.append("")
    lines.append("name\tshape\tdtype\tmean\tstd")
    for name, arr in ckpt.params.items():
        shape = "x".join(str(s) for s in arr.shape) or "scalar"
        lines.append(f"{name}\t{shape}\t{arr.dtype}\t{arr.mean():.4g}\t{arr.std():.4g}")
    text = "\n".join(lines) + "\n"
    (root / "inspect.txt").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "predict": cmd_predict,
    "gradcheck": cmd_gradcheck, "bench": cmd_bench, "inspect": cmd_inspect,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(name)s: %(message)s", stream=sys.stderr)
    prog = f"pef {args.command}"
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"{prog}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"{prog}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, CheckpointError, EvaluationError, ShapeError, OSError) as exc:
        print(f"{prog}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
