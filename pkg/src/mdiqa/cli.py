"""``mdiqa`` command line: train / eval / score / restore / sweep / gen-data.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Dict, List, Optional

from .config import RunConfig, desk_scale, load_config, save_config
from .data import (DataError, load_manifest, make_synthetic_dataset, read_image, stack_samples,
                   write_image, write_manifest)
from .metrics import evaluate, split_indices, write_report
from .registry import ConfigError


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _ratios(items: Optional[List[str]]) -> Dict[str, float]:
    out = {}
    for item in items or []:
        name, sep, val = item.partition("=")
        try:
            out[name.strip()] = float(val)
        except ValueError:
            sep = ""
        if not sep or not name.strip():
            raise UsageError(f"--ratio expects dim=value, got {item!r}")
    return out


def _float_list(s: str) -> List[float]:
    try:
        return [float(v) for v in s.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"--ratios expects comma-separated numbers, got {s!r}") from None


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else desk_scale()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _jsonl(path):
    fh = open(path, "w", encoding="utf-8")

    def log(rec):
        fh.write(json.dumps(rec, sort_keys=True) + "\n")

    return fh, log


def load_dataset(cfg: RunConfig, registry):
    """Samples from the configured manifest, or a synthetic set."""
    d = cfg.data
    if d.manifest:
        return load_manifest(d.manifest, registry)
    return make_synthetic_dataset(d.n_samples, d.size, seed=d.seed, presence=d.presence,
                                  max_severity=d.max_severity, registry=registry)


def train_val_split(cfg: RunConfig, arrays):
    n = len(arrays[0])
    tr, va = split_indices(n, cfg.data.seed, 1.0 - cfg.data.val_fraction)
    return tuple(a[tr] for a in arrays), tuple(a[va] for a in arrays)


# --- subcommands -------------------------------------------------------------------------------

def cmd_train(args) -> int:
    from .plotting import plot_loss_curve, plot_report
    from .train import load_checkpoint, predictor, save_checkpoint, train_stage1, train_stage2

    cfg = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    registry = cfg.model.registry()
    train, val = train_val_split(cfg, stack_samples(load_dataset(cfg, registry), registry))
    fh, log = _jsonl(out / f"stage{args.stage}_log.jsonl")
    with fh:
        if args.stage == 1:
            resume = load_checkpoint(args.resume) if args.resume else None
            ckpt = train_stage1(train, cfg, on_log=log, resume=resume, max_steps=args.max_steps)
        else:
            if not args.resume:
                raise UsageError("stage 2 needs --resume <stage-one or partial stage-two checkpoint>")
            ckpt = train_stage2(train, load_checkpoint(args.resume), cfg, on_log=log,
                                max_steps=args.max_steps)
    save_checkpoint(ckpt, out / f"stage{args.stage}.ckpt")
    save_config(cfg, out / "config.json")
    plot_loss_curve(ckpt.history, out / f"stage{args.stage}_loss.png", f"stage {args.stage} loss")
    if len(val[0]):
        report = evaluate(predictor(ckpt.build_model()), val, registry.names, splits=1)
        write_report(report, out / f"stage{args.stage}_val")
        plot_report(report, out / f"stage{args.stage}_val" / "report.png")
        print(json.dumps({"stage": args.stage, "steps": ckpt.step, "val": report["mean"]},
                         sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    from .plotting import plot_report
    from .train import load_checkpoint, predictor

    model = load_checkpoint(args.ckpt).build_model()
    samples = load_manifest(args.manifest, model.registry)
    arrays = stack_samples(samples, model.registry)
    seed = 0 if args.seed is None else args.seed
    report = evaluate(predictor(model), arrays, model.names, splits=args.splits, seed=seed)
    paths = write_report(report, args.out)
    plot_report(report, Path(args.out) / "report.png")
    sys.stdout.write(Path(paths["csv"]).read_text(encoding="utf-8"))
    return 0


def cmd_score(args) -> int:
    from .train import load_checkpoint

    model = load_checkpoint(args.ckpt).build_model()
    out = model.score_image(read_image(args.image), override=args.ratio_map or None)
    print(json.dumps(out, sort_keys=True))
    return 0


def _critic(path):
    from .aggregate import freeze
    from .train import load_checkpoint

    return freeze(load_checkpoint(path).build_model())


def cmd_restore(args) -> int:
    from .plotting import plot_restore_log
    from .restore import run_from_config, save_outputs, train_restorer
    from .train import save_checkpoint

    cfg = _config(args)
    run = run_from_config(cfg, args.variant, {**cfg.ratios, **args.ratio_map})
    critic = _critic(args.critic)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fh, log = _jsonl(out / "log.jsonl")
    with fh:
        res = train_restorer(run, critic, on_log=log)
    save_outputs(res.outputs, out / "images")
    save_checkpoint(res.checkpoint(run), out / "restorer.ckpt")
    (out / "metrics.json").write_text(json.dumps(res.metrics, indent=2, sort_keys=True) + "\n")
    plot_restore_log(res.log, out / "restore.png")
    print(json.dumps(res.metrics, sort_keys=True))
    return 0


def cmd_sweep(args) -> int:
    from .plotting import plot_sweep
    from .restore import run_from_config, sweep_ratio, write_sweep_csv

    cfg = _config(args)
    run = run_from_config(cfg, args.variant, {**cfg.ratios, **args.ratio_map})
    critic = _critic(args.critic)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fh, log = _jsonl(out / "log.jsonl")
    with fh:
        rows = sweep_ratio(run, args.dim, args.ratio_list, critic, on_log=log)
    path = write_sweep_csv(rows, out / "sweep.csv")
    plot_sweep(rows, out / "sweep.png")
    sys.stdout.write(Path(path).read_text(encoding="utf-8"))
    return 0


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    size = args.size or cfg.data.size
    registry = cfg.model.registry()
    samples = make_synthetic_dataset(args.n, size, seed=cfg.data.seed, presence=cfg.data.presence,
                                     max_severity=cfg.data.max_severity, registry=registry)
    out = Path(args.out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    paths = []
    for i, s in enumerate(samples):
        rel = f"images/{i:05d}.png"
        write_image(out / rel, s.image)
        paths.append(rel)
    write_manifest(out / "manifest.csv", samples, paths, registry)
    print(json.dumps({"n": len(samples), "manifest": str(out / "manifest.csv")}))
    return 0


# --- parser ------------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    # SUPPRESS so a subcommand without --seed does not clobber a top-level one
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS,
                        help="override every seed in the config")
    p = _Parser(prog="mdiqa", description="Multi-dimensional image quality assessment toolkit.",
                parents=[common])
    p.set_defaults(seed=None)
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    t = sub.add_parser("train", parents=[common], help="run training stage 1 or 2")
    t.add_argument("--stage", type=int, choices=(1, 2), required=True)
    t.add_argument("--config", help="JSON run config (desk preset when omitted)")
    t.add_argument("--resume", help="checkpoint to resume (stage 2: the stage-one checkpoint)")
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--max-steps", type=int, default=None, help="stop early after this many steps")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="SRCC/PLCC report on a manifest")
    e.add_argument("--manifest", required=True)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--splits", type=int, default=1)
    e.add_argument("--out", default="eval_out")
    e.set_defaults(fn=cmd_eval)

    s = sub.add_parser("score", parents=[common], help="score one image, JSON on stdout")
    s.add_argument("--image", required=True)
    s.add_argument("--ckpt", required=True)
    s.add_argument("--ratio", action="append", metavar="DIM=VALUE")
    s.set_defaults(fn=cmd_score)

    r = sub.add_parser("restore", parents=[common], help="train the toy restorer with a critic")
    r.add_argument("--config")
    r.add_argument("--critic", required=True)
    r.add_argument("--ratio", action="append", metavar="DIM=VALUE")
    r.add_argument("--variant", choices=("nr", "fr", "org"), default=None)
    r.add_argument("--out", default="restore_out")
    r.set_defaults(fn=cmd_restore)

    w = sub.add_parser("sweep", parents=[common], help="ratio sweep on one dimension")
    w.add_argument("--dim", required=True)
    w.add_argument("--ratios", required=True, help="ascending, comma-separated, first 1.0")
    w.add_argument("--config")
    w.add_argument("--critic", required=True)
    w.add_argument("--ratio", action="append", metavar="DIM=VALUE", help="fixed extra overrides")
    w.add_argument("--variant", choices=("nr", "fr"), default="nr")
    w.add_argument("--out", default="sweep_out")
    w.set_defaults(fn=cmd_sweep)

    g = sub.add_parser("gen-data", parents=[common], help="write a synthetic set and manifest")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--size", type=int, default=None)
    g.add_argument("--config")
    g.set_defaults(fn=cmd_gen_data)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not getattr(args, "fn", None):
        parser.print_usage(sys.stderr)
        print("mdiqa: error: a subcommand is required", file=sys.stderr)
        return 1
    try:
        # flag syntax is checked before any file is touched
        args.ratio_map = _ratios(getattr(args, "ratio", None))
        if getattr(args, "ratios", None) is not None:
            args.ratio_list = _float_list(args.ratios)
        return args.fn(args)
    except UsageError as e:
        print(f"mdiqa: error: {e}", file=sys.stderr)
        return 1
    except (ConfigError, DataError, KeyError, ValueError, RuntimeError, OSError) as e:
        print(f"mdiqa: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
