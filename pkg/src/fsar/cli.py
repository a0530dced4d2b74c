"""Command-line entry point: synth, train, eval, match, inspect-attention.

Flags override config-file values; anything not given on either side falls
back to the built-in defaults. All data artifacts go to files, stdout only
carries human-readable progress. Exit codes: 0 success, 2 usage error,
1 runtime failure (with one machine-readable ``error {...}`` line on
stderr).
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields, replace
from pathlib import Path

from fsar.data import SynthSpec, load_feature_set, save_feature_set, split_classes, synth_dataset
from fsar.engine import (
    RunConfig,
    checkpoint_from_result,
    evaluate,
    inspect_attention,
    load_checkpoint,
    save_checkpoint,
    save_loss_curve,
    train,
    write_attention_csv,
)
from fsar.errors import FsarError
from fsar.matching import video_similarity
from fsar.tensor import no_grad


def _add_synth(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser("synth", help="generate a synthetic feature dataset")
    p.add_argument("--classes", type=int, default=5)
    p.add_argument("--per-class", type=int, default=20)
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--boxes", type=int, default=3)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--separation", type=float, default=4.0,
                   help="class separation; noise std is 1/separation ('inf' allowed)")
    p.add_argument("--temporal-jitter", type=float, default=0.25)
    p.add_argument("--speed-jitter", type=float, default=0.2)
    p.add_argument("--signal-carrier", choices=("both", "global", "objects"), default="both")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", type=str, default=None, metavar="TRAIN,VAL,TEST",
                   help="also write class-disjoint manifest_{train,val,test}.json")
    p.add_argument("-o", "--out", required=True, help="output dataset directory")


def _add_train(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser("train", help="train a model on episodic tasks")
    p.add_argument("--train-manifest", required=True)
    p.add_argument("--val-manifest", required=True)
    p.add_argument("--config", default=None, help="RunConfig JSON file")
    p.add_argument("-o", "--out", required=True, help="checkpoint output directory")
    # config overrides (None = keep config-file / default value)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--c-way", type=int, default=None)
    p.add_argument("--k-shot", type=int, default=None)
    p.add_argument("--n-query", type=int, default=None)
    p.add_argument("--max-epochs", type=int, default=None)
    p.add_argument("--episodes-per-epoch", type=int, default=None)
    p.add_argument("--learning-rate", type=float, default=None)
    p.add_argument("--relations", type=str, default=None, help="comma list out of gg,go,oo")
    p.add_argument("--num-global", type=int, default=None)
    p.add_argument("--num-focused", type=int, default=None)
    p.add_argument("--temperature", type=float, default=None)
    p.add_argument("--quiet", action="store_true")


def _add_eval(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser("eval", help="evaluate a checkpoint over test episodes")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="test manifest path")
    p.add_argument("--episodes", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--allow-class-overlap", action="store_true")
    p.add_argument("-o", "--out", default=None, help="report JSON path (default: stdout summary only)")


def _add_match(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser("match", help="similarity breakdown for two videos")
    p.add_argument("first", help="first video id")
    p.add_argument("second", help="second video id")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="manifest containing both videos")
    p.add_argument("-o", "--out", default=None, help="output JSON path")


def _add_inspect(sub: argparse._SubParsersAction) -> None:
    p = sub.add_parser("inspect-attention", help="per-frame attention profile of one video")
    p.add_argument("video", help="video id")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("-o", "--out", default=None, help="output CSV path")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fsar", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    _add_synth(sub)
    _add_train(sub)
    _add_eval(sub)
    _add_match(sub)
    _add_inspect(sub)
    return parser


def _cmd_synth(args: argparse.Namespace) -> int:
    spec = SynthSpec(
        classes=args.classes,
        videos_per_class=args.per_class,
        frames=args.frames,
        boxes_per_frame=args.boxes,
        dim=args.dim,
        separation=args.separation,
        temporal_jitter=args.temporal_jitter,
        speed_jitter=args.speed_jitter,
        seed=args.seed,
        signal_carrier=args.signal_carrier,
    )
    fs = synth_dataset(spec)
    out = Path(args.out)
    manifest = save_feature_set(fs, out)
    print(f"wrote {sum(len(v) for v in fs.by_class.values())} videos to {manifest}")
    if args.split:
        sizes = tuple(int(s) for s in args.split.split(","))
        if len(sizes) != 3:
            raise FsarError(f"--split needs three comma-separated sizes, got {args.split!r}")
        names = ("manifest_train.json", "manifest_val.json", "manifest_test.json")
        for part, name in zip(split_classes(fs, sizes), names):
            save_feature_set(part, out, manifest_name=name)
            print(f"wrote {name} with {len(part.classes)} classes")
    return 0


def _cmd_train(args: argparse.Namespace) -> int:
    cfg = RunConfig.from_json_file(args.config) if args.config else RunConfig()
    overrides = {}
    for name in ("seed", "c_way", "k_shot", "n_query", "max_epochs", "episodes_per_epoch",
                 "learning_rate", "num_global", "num_focused", "temperature"):
        value = getattr(args, name)
        if value is not None:
            overrides[name] = value
    if args.relations is not None:
        overrides["relations"] = tuple(r for r in args.relations.split(",") if r)
    if overrides:
        cfg = replace(cfg, **overrides)
    cfg.validate()

    train_set = load_feature_set(args.train_manifest)
    val_set = load_feature_set(args.val_manifest)
    progress = None if args.quiet else print
    result = train(train_set, val_set, cfg, progress=progress)
    out = Path(args.out)
    save_checkpoint(checkpoint_from_result(result), out)
    save_loss_curve(result.history, out / "loss_curve.csv")
    print(f"checkpoint written to {out} (best epoch {result.best_epoch}, "
          f"val loss {result.best_val_loss:.6f})")
    return 0


def _cmd_eval(args: argparse.Namespace) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    test_set = load_feature_set(args.data)
    report = evaluate(
        ckpt,
        test_set,
        episodes=args.episodes,
        seed=args.seed,
        workers=args.workers,
        allow_class_overlap=args.allow_class_overlap,
    )
    if args.out:
        Path(args.out).write_text(report.to_json())
    lo, hi = report.ci95
    print(f"accuracy {report.accuracy:.4f} (95% CI [{lo:.4f}, {hi:.4f}]) "
          f"over {report.episodes} episodes")
    return 0


def _cmd_match(args: argparse.Namespace) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    fs = load_feature_set(args.data)
    a = fs.video_by_id(args.first)
    b = fs.video_by_id(args.second)
    with no_grad():
        breakdown = video_similarity(
            ckpt.model.encode(a),
            ckpt.model.encode(b),
            ckpt.config.lambda_global,
            ckpt.config.lambda_focused,
        )
    payload = {"first": args.first, "second": args.second, **breakdown.to_dict()}
    text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    print(f"fused similarity {breakdown.value:.6f}")
    return 0


def _cmd_inspect(args: argparse.Namespace) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    fs = load_feature_set(args.data)
    video = fs.video_by_id(args.video)
    profile = inspect_attention(ckpt.model, video)
    out = Path(args.out) if args.out else Path(f"{args.video}_attention.csv")
    write_attention_csv(profile, out)
    print(f"attention profile written to {out}")
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "match": _cmd_match,
    "inspect-attention": _cmd_inspect,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (FsarError, OSError) as exc:
        print("error " + json.dumps({"type": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
