"""Command-line entry point: ``constrictae {gen-data,train,score,eval,sweep}``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import data as D
from .experiment import (
    DEFAULT_ALPHA,
    RunConfig,
    best_by_cell,
    evaluate_model,
    run_sweep,
    load_test_split,
    train_run,
    write_json,
    write_sweep_csv,
)
from .losses import LossConfig, Mode
from .model import Autoencoder, CheckpointError
from .scoring import error_heatmap, scored_reconstructions
from .training import TrainingAborted

RUN_MANIFEST = "run_manifest.json"
MODE_CHOICES = ("none", "inside", "surface")


class UsageError(Exception):
    pass


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from exc


def _echo(resolved: dict, out_dir: Path) -> None:
    text = json.dumps(resolved, indent=2, sort_keys=True)
    print("resolved config:")
    print(text)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_json(out_dir / RUN_MANIFEST, resolved)


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    base = _load_config(args.config).get("synth", {})
    overrides = {
        "seed": args.seed,
        "frames_per_video": args.frames,
        "train_videos": args.train_videos,
        "test_videos": args.test_videos,
        "height": args.size,
        "width": args.size,
    }
    fields = {**base, **{k: v for k, v in overrides.items() if v is not None}}
    try:
        cfg = D.SynthConfig(**fields)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    out = Path(args.out)
    if cfg.frames_per_video < args.clip_len:
        print(
            f"warning: videos shorter than clip length ({cfg.frames_per_video} < {args.clip_len}); "
            "they will yield no clips",
            file=sys.stderr,
        )
    D.generate_synthetic(cfg, out)
    manifest = D.read_manifest(out)
    frames = sum(v.n_frames for v in manifest.videos)
    anomalous = int(sum(int(v.labels.sum()) for v in manifest.videos))
    _echo({"command": "gen-data", "clip_len": args.clip_len, "synth": cfg.to_dict()}, out)
    print(
        f"dataset {out}: {len(manifest.split('train'))} train videos, {len(manifest.split('test'))} test videos, "
        f"{frames} frames, {anomalous} anomalous frames"
    )
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def _run_config_from_args(args) -> RunConfig:
    saved = _load_config(args.config)
    if "run" in saved:
        saved = saved["run"]
    if saved:
        cfg = RunConfig.from_dict({**saved, "data": args.data or saved.get("data")})
    else:
        if not args.data:
            raise UsageError("--data is required")
        cfg = RunConfig(args.data)
    train = cfg.train
    loss = train.loss
    mode = Mode.parse(args.mode) if args.mode else loss.mode
    alpha = args.alpha if args.alpha is not None else (loss.alpha if saved else DEFAULT_ALPHA[mode])
    lam = args.lam if args.lam is not None else loss.lam
    try:
        loss = LossConfig(lam=lam, alpha=alpha, mode=mode)
        updates = {"loss": loss}
        for flag, name in (("epochs", "epochs"), ("seed", "seed"), ("batch_size", "batch_size"), ("lr", "learning_rate")):
            v = getattr(args, flag)
            if v is not None:
                updates[name] = v
        train = replace(train, **updates)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if not saved:
        cfg = replace(cfg, clip_len=args.clip_len, train=train)
        return cfg.resolve()
    model = cfg.model
    if model is not None and args.seed is not None:
        model = replace(model, seed=args.seed)
    return replace(cfg, train=train, model=model).resolve()


def cmd_train(args) -> int:
    cfg = _run_config_from_args(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "model.cae"
    cfg = replace(cfg, train=replace(cfg.train, checkpoint_path=str(ckpt)))
    _echo({"command": "train", "run": cfg.to_dict()}, out)
    try:
        model, tlog = train_run(cfg)
    except TrainingAborted as exc:
        print(f"error: {exc}; last good checkpoint kept at {ckpt}", file=sys.stderr)
        return 1
    model.save(ckpt)
    tlog.to_csv(out / "train_log.csv")
    last = tlog.records[-1] if tlog.records else None
    if last is not None:
        print(f"trained {tlog.epochs_completed} epochs, {len(tlog)} steps; final l_r={last.l_r:.6f} l_c={last.l_c:.6f}")
    else:
        print("trained 0 epochs; model left at initialization")
    print(f"checkpoint: {ckpt}")
    return 0


# ---------------------------------------------------------------------------
# score / eval
# ---------------------------------------------------------------------------


def _load_model(path: str) -> Autoencoder:
    try:
        return Autoencoder.load(path)
    except (OSError, CheckpointError) as exc:
        raise RuntimeError(f"cannot load checkpoint {path}: {exc}") from exc


def cmd_score(args) -> int:
    model = _load_model(args.checkpoint)
    out = Path(args.out)
    _echo({"command": "score", "checkpoint": args.checkpoint, "data": args.data, "heatmaps": bool(args.heatmaps)}, out)
    report = evaluate_model(model, args.data, {"checkpoint": args.checkpoint})
    report.to_csv(out / "scores.csv")
    if args.heatmaps:
        ds = load_test_split(args.data, model.config.input_shape[0])
        for vid in ds.videos:
            frames = ds.video_frames(vid)
            off, recon = scored_reconstructions(model, frames)
            vdir = out / "heatmaps" / vid
            vdir.mkdir(parents=True, exist_ok=True)
            for i, r in enumerate(recon):
                hm = error_heatmap(frames[off + i, 0], r[0])
                D.write_pgm(vdir / f"{off + i:06d}.pgm", np.rint(hm * 255).astype(np.uint8))
    print(f"scored {report.total_frames} frames of {len(report.series)} videos -> {out / 'scores.csv'}")
    return 0


def cmd_eval(args) -> int:
    model = _load_model(args.checkpoint)
    out = Path(args.out)
    _echo({"command": "eval", "checkpoint": args.checkpoint, "data": args.data, "model": model.config.to_dict()}, out)
    report = evaluate_model(model, args.data, {"checkpoint": args.checkpoint})
    report.to_csv(out / "eval.csv")
    if args.plot:
        from .plots import write_report_plots

        write_report_plots(report, out / "plots")
    print(f"per-frame report: {out / 'eval.csv'} ({report.total_frames} frames)")
    print(f"AUC: {report.auc:.4f}")
    return 0


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------


def cmd_sweep(args) -> int:
    if not args.data:
        raise UsageError("--data is required")
    modes = [Mode.parse(m) for m in args.modes.split(",")]
    if Mode.NONE in modes:
        raise UsageError("--modes lists constriction modes; the baseline row is always included")
    out = Path(args.out)
    resolved = {
        "command": "sweep",
        "data": args.data,
        "lambdas": args.lambdas,
        "alphas": args.alphas,
        "modes": [m.value for m in modes],
        "seeds": args.seeds,
        "epochs": args.epochs,
    }
    _echo(resolved, out)
    rows = run_sweep(args.data, args.lambdas, args.alphas, modes, args.seeds, epochs=args.epochs, jobs=args.jobs)
    write_sweep_csv(out / "sweep.csv", rows)
    best = best_by_cell(rows)
    base = best.get(("none", 0.0, 0.0))
    print("mode,lambda,alpha,best_auc,baseline_auc")
    for (mode, lam, alpha), auc in sorted(best.items()):
        if mode == "none":
            continue
        print(f"{mode},{lam:g},{alpha:g},{auc:.4f},{'' if base is None else f'{base:.4f}'}")
    failed = sum(r.status != "ok" for r in rows)
    print(f"sweep: {len(rows)} rows ({failed} failed) -> {out / 'sweep.csv'}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="constrictae", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write the synthetic benchmark")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--frames", type=int, help="frames per video")
    g.add_argument("--train-videos", type=int)
    g.add_argument("--test-videos", type=int)
    g.add_argument("--size", type=int, help="frame height and width")
    g.add_argument("--clip-len", type=int, default=8, help="clip length used downstream (for warnings)")
    g.add_argument("--config", help="JSON file with a 'synth' section")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train an autoencoder on the normal training split")
    t.add_argument("--data")
    t.add_argument("--mode", choices=MODE_CHOICES)
    t.add_argument("--lambda", dest="lam", type=float, help="constriction weight (default 0.0001)")
    t.add_argument("--alpha", type=float, help="sphere radius (default 1 inside, 10 surface)")
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--clip-len", type=int, default=8)
    t.add_argument("--out", required=True)
    t.add_argument("--config", help="JSON run manifest to reproduce")
    t.set_defaults(func=cmd_train)

    for name, func, helptext in (
        ("score", cmd_score, "write per-frame scores (and optional error heatmaps)"),
        ("eval", cmd_eval, "score the test split and report frame-level AUC"),
    ):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--checkpoint", required=True)
        s.add_argument("--data", required=True)
        s.add_argument("--out", required=True)
        if name == "score":
            s.add_argument("--heatmaps", action="store_true", help="export per-frame error heatmaps as PGM")
        else:
            s.add_argument("--plot", action="store_true", help="also write SVG timelines and ROC curve")
        s.set_defaults(func=func)

    w = sub.add_parser("sweep", help="grid over lambda and alpha, with a baseline reference")
    w.add_argument("--data")
    w.add_argument("--lambdas", type=_floats, default=[1e-5, 1e-4, 1e-3])
    w.add_argument("--alphas", type=_floats, default=[0.5, 1.0, 2.0])
    w.add_argument("--modes", default="inside")
    w.add_argument("--seeds", type=_ints, default=[0])
    w.add_argument("--epochs", type=int, default=40)
    w.add_argument("--jobs", type=int, default=1)
    w.add_argument("--out", required=True)
    w.set_defaults(func=cmd_sweep)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("always")
            return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"{parser.prog}: error: {exc}", file=sys.stderr)
        return 2
    except (RuntimeError, D.DatasetError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
