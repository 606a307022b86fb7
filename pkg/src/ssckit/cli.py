"""ssckit command line: synth, pipeline, eval, split, model."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .formats import (FormatError, read_manifest, read_ply, split_manifest, write_manifest,
                      write_ply, write_report)
from .metrics import evaluate, table_row

log = logging.getLogger("ssckit")

LOG_LEVELS = ("debug", "info", "warning", "error")


class UsageError(Exception):
    pass


def _positive_int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}")
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be at least 1, got {v}")
    return v


def _nonneg_float(text):
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}")
    if not v >= 0:
        raise argparse.ArgumentTypeError(f"must be non-negative, got {v}")
    return v


def _common(parser, suppress):
    d = argparse.SUPPRESS
    parser.add_argument("--seed", type=int, default=d if suppress else 0)
    parser.add_argument("--threads", type=_positive_int, default=d if suppress else (os.cpu_count() or 1))
    parser.add_argument("--log-level", choices=LOG_LEVELS, default=d if suppress else "warning")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ssckit", description=__doc__)
    _common(ap, suppress=False)
    common = argparse.ArgumentParser(add_help=False)
    _common(common, suppress=True)
    sub = ap.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic cooperative dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--frames", type=_positive_int, default=6)
    s.add_argument("--objects", type=_positive_int, default=4)
    s.add_argument("--noise", type=_nonneg_float, default=0.0)
    s.add_argument("--scenes", type=_positive_int, default=1)

    s = sub.add_parser("pipeline", parents=[common], help="build labeled ground truth from a manifest")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--min-points", type=_positive_int, default=1)

    s = sub.add_parser("eval", parents=[common], help="score a prediction against ground truth")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--threshold", type=float, default=0.3)
    s.add_argument("--out", required=True)

    s = sub.add_parser("split", parents=[common], help="time or scene split of a manifest")
    s.add_argument("--manifest", required=True)
    s.add_argument("--mode", required=True, choices=("time", "scene"))
    s.add_argument("--ratio", type=float)
    s.add_argument("--test-scenes", nargs="+")
    s.add_argument("--out", required=True)

    s = sub.add_parser("model", parents=[common], help="model harness")
    msub = s.add_subparsers(dest="model_command", required=True)
    g = msub.add_parser("gradcheck", parents=[common])
    g.add_argument("--coords", type=_positive_int, default=200)
    g = msub.add_parser("train-toy", parents=[common])
    g.add_argument("--steps", type=_positive_int, default=300)
    g.add_argument("--lr", type=float)
    g.add_argument("--mode", choices=("global", "local", "local+global"), default="local+global")
    g.add_argument("--out", required=True)
    msub.add_parser("forward-shapes", parents=[common])
    return ap


def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise UsageError(f"cannot create output directory {out}: {e.strerror}")
    if not os.access(out, os.W_OK):
        raise UsageError(f"output directory {out} is not writable")
    return out


def cmd_synth(args) -> int:
    from .synthetic import SceneParams, gen_synthetic_dataset, write_synthetic
    out = _out_dir(args.out)
    params = SceneParams(n_frames=args.frames, n_objects=args.objects, noise=args.noise)
    scenes = gen_synthetic_dataset(args.seed, params, args.scenes)
    path = write_synthetic(scenes, out)
    print(f"wrote {len(scenes)} scene(s), {sum(len(s.frames) for s in scenes)} frames -> {path}")
    return 0


def cmd_pipeline(args) -> int:
    from .pipeline import run_scene
    manifest = read_manifest(args.manifest)
    out = _out_dir(args.out)
    summaries = []
    for scene in manifest.scenes:
        cloud, summary = run_scene(scene, threads=args.threads, min_points=args.min_points)
        write_ply(cloud, out / f"{scene.scene_id}.ply")
        summaries.append(summary)
        st = summary["stages"]
        print(f"{scene.scene_id}: {st['input_points']} input -> {st['output_points']} output points, "
              f"{st['completed_objects']} completed objects")
    (out / "summary.json").write_text(json.dumps({"scenes": summaries}, indent=2, sort_keys=True) + "\n")
    return 0


def cmd_eval(args) -> int:
    pred, gt = read_ply(args.pred), read_ply(args.gt)
    for name, c in (("prediction", pred), ("ground truth", gt)):
        if not c.has_labels:
            raise FormatError(f"{name} cloud carries no labels")
    report = evaluate(pred, gt, threshold=args.threshold, workers=args.threads)
    print(table_row(report))
    out = Path(args.out)
    if out.parent != Path(""):
        _out_dir(out.parent)
    write_report(report, out)
    return 0


def cmd_split(args) -> int:
    manifest = read_manifest(args.manifest)
    if args.mode == "time":
        if args.ratio is None:
            raise UsageError("--mode time needs --ratio")
        ratio = args.ratio
        if not 0 < ratio < 1:
            raise UsageError("--ratio must lie strictly between 0 and 1")
        train, test = split_manifest(manifest, "time", ratio=ratio)
    else:
        if not args.test_scenes:
            raise UsageError("--mode scene needs --test-scenes")
        train, test = split_manifest(manifest, "scene", test_scenes=args.test_scenes)
    out = _out_dir(args.out)
    write_manifest(train, out / "train.json")
    write_manifest(test, out / "test.json")
    print(f"train: {train.frame_count()} frames, test: {test.frame_count()} frames")
    return 0


def cmd_forward_shapes(args) -> int:
    from .model.config import ModelConfig, shape_chain
    cfg = ModelConfig()
    chain = shape_chain(cfg)
    for name, n in chain:
        print(f"{name:>18}: {n:,}")
    keep = [chain[0][1], cfg.proxy_count, cfg.coarse_count, cfg.output_count]
    print(" → ".join(f"{n:,}" for n in keep))
    return 0


def cmd_gradcheck(args) -> int:
    from .model.gradcheck import KERNELS, TOLERANCE, grad_check
    checks = [(k, {}) for k in KERNELS] + [("set_abstraction", {})]
    checks += [("spatial_aware_block", {"mode": m}) for m in ("local", "global")]
    failed = []
    for kernel, kw in checks:
        r = grad_check(kernel, seed=args.seed, n_coords=args.coords, **kw)
        label = kernel + (f"[{kw['mode']}]" if kw else "")
        print(f"{label:<30} max rel err {r.max_rel_error:.3e} over {r.n_checked} coords "
              f"{'ok' if r.passed else 'FAIL'}")
        if not r.passed:
            failed.append(label)
    if failed:
        print(f"gradient check failed (tolerance {TOLERANCE:g}): {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


def toy_scene(seed: int):
    from .synthetic import SceneParams, gen_synthetic_scene
    return gen_synthetic_scene(seed, SceneParams(image_size=(160, 120), lidar_stride=1))


def cmd_train_toy(args) -> int:
    from .model.checkpoint import save_checkpoint, write_loss_csv
    from .model.config import ModelConfig
    from .model.train import train_toy
    over = {"mode": args.mode, "seed": args.seed}
    if args.lr is not None:
        over["lr"] = args.lr
    cfg = ModelConfig.toy(**over)
    out = _out_dir(args.out)
    run = train_toy(toy_scene(args.seed), cfg, args.steps)
    write_loss_csv(run.curve, out / "loss.csv")
    save_checkpoint(run.params, out / "checkpoint.bin")
    first, last = run.curve[0], run.curve[-1]
    print(f"{cfg.proxy_count} proxies -> {cfg.output_count} points, {args.steps} steps")
    print(f"loss {first.total:.6f} -> {last.total:.6f} (ratio {run.ratio:.4f})")
    return 0


def resolved_config(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items())}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    level = os.environ.get("SSC_LOG", args.log_level).lower()
    if level not in LOG_LEVELS:
        print(f"ssckit: invalid SSC_LOG level {level!r}", file=sys.stderr)
        return 2
    args.log_level = level
    logging.basicConfig(level=level.upper(), format="%(levelname)s %(name)s: %(message)s")
    print("config: " + json.dumps(resolved_config(args), sort_keys=True))
    handlers = {
        "synth": cmd_synth,
        "pipeline": cmd_pipeline,
        "eval": cmd_eval,
        "split": cmd_split,
    }
    models = {"gradcheck": cmd_gradcheck, "train-toy": cmd_train_toy, "forward-shapes": cmd_forward_shapes}
    handler = handlers.get(args.command) or models[args.model_command]
    try:
        return handler(args)
    except UsageError as e:
        print(f"ssckit: usage error: {e}", file=sys.stderr)
        return 2
    except (FormatError, ValueError, FloatingPointError, AssertionError, OSError) as e:
        print(f"ssckit: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
