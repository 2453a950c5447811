"""``ssmheight`` command line.

Exit codes: 0 success, 1 invalid usage or a failed check, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _lengths(text: str) -> list:
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not vals or any(v < 1 for v in vals):
        raise argparse.ArgumentTypeError("lengths must be positive integers")
    return vals


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ssmheight", description="Building segmentation and height estimation with selective scans.",
                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    def add(name, help_text):
        return sub.add_parser(name, help=help_text, description=help_text)

    g = add("gen-data", "generate a synthetic dataset directory")
    g.add_argument("--out", required=True, type=Path, help="dataset directory to create")
    g.add_argument("--scenes", type=int, default=512, help="training scenes (default 512)")
    g.add_argument("--val-scenes", type=int, default=None, help="validation scenes (default scenes/4)")
    g.add_argument("--extent", type=int, default=64, help="scene side length in pixels (default 64)")
    g.add_argument("--label-noise", type=float, default=0.0, help="fraction of corrupted building labels")
    g.add_argument("--seed", type=int, default=0, help="dataset seed")

    t = add("train", "train a model and write checkpoints plus a metrics log")
    t.add_argument("--dataset", required=True, type=Path, help="dataset directory from gen-data")
    t.add_argument("--out", required=True, type=Path, help="run directory")
    t.add_argument("--config", type=Path, help="key = value training config file")
    t.add_argument("--seed", type=int, help="override the config seed")
    t.add_argument("--ablation-arm", choices=["backbone", "mam", "smamba_fpn", "full"], help="ablation arm")
    t.add_argument("--epochs", type=int, help="override the epoch count")

    e = add("eval", "evaluate a checkpoint on a dataset split")
    e.add_argument("--checkpoint", required=True, type=Path, help="checkpoint directory")
    e.add_argument("--dataset", required=True, type=Path, help="dataset directory")
    e.add_argument("--split", default="val", choices=["train", "val"], help="split to score (default val)")
    e.add_argument("--out", type=Path, help="optional CSV file for the metrics row")

    i = add("infer", "write mask (PGM) and height (BMT1) predictions for every scene in a split")
    i.add_argument("--checkpoint", required=True, type=Path, help="checkpoint directory")
    i.add_argument("--dataset", required=True, type=Path, help="dataset directory")
    i.add_argument("--split", default="val", choices=["train", "val"], help="split to predict (default val)")
    i.add_argument("--out", required=True, type=Path, help="prediction directory")

    a = add("ablate", "train the four-arm ablation ladder and write a summary table")
    a.add_argument("--dataset", required=True, type=Path, help="dataset directory")
    a.add_argument("--out", required=True, type=Path, help="output directory")
    a.add_argument("--config", type=Path, help="key = value training config file")
    a.add_argument("--seed", type=int, help="override the config seed")
    a.add_argument("--epochs", type=int, help="override the epoch count")

    c = add("gradcheck", "finite-difference audit of every differentiable operation")
    c.add_argument("--module", default="all", help="'all', a group name, or a single op (default all)")
    c.add_argument("--trials", type=int, default=100, help="random trials per op (default 100)")
    c.add_argument("--seed", type=int, default=0, help="trial seed")

    b = add("bench-scan", "time the selective scan against dense attention")
    b.add_argument("--lengths", type=_lengths, default=[256, 512, 1024, 2048, 4096, 8192],
                   help="comma-separated sequence lengths")
    b.add_argument("--trials", type=int, default=5, help="timed repeats per length (default 5)")
    b.add_argument("--seed", type=int, default=0, help="input seed")
    b.add_argument("--backend", choices=["active", "cython", "python"], default="active", help="scan kernel")
    b.add_argument("--out", type=Path, help="optional CSV file")

    r = add("render", "write side-by-side PPM panels for the first scenes in a split")
    r.add_argument("--checkpoint", required=True, type=Path, help="checkpoint directory")
    r.add_argument("--dataset", required=True, type=Path, help="dataset directory")
    r.add_argument("--split", default="val", choices=["train", "val"], help="split (default val)")
    r.add_argument("--count", type=int, default=8, help="number of scenes (default 8)")
    r.add_argument("--out", required=True, type=Path, help="output directory")

    lines = ["commands and their flags:"]
    for name, sp in sub.choices.items():
        lines.append("")
        lines.append(f"  {name}: {sp.description}")
        for act in sp._actions:
            if act.option_strings and "-h" not in act.option_strings:
                req = " (required)" if act.required else ""
                lines.append(f"    {', '.join(act.option_strings):<16} {act.help}{req}")
    p.epilog = "\n".join(lines)
    return p


def _train_config(args):
    from .train import TrainConfig, load_config
    cfg = load_config(args.config) if args.config else TrainConfig()
    updates = {}
    if args.seed is not None:
        updates["seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        updates["epochs"] = args.epochs
    import dataclasses
    cfg = dataclasses.replace(cfg, **updates)
    arm = getattr(args, "ablation_arm", None)
    return cfg.with_arm(arm) if arm else cfg


def cmd_gen_data(args) -> int:
    from .data import SceneConfig, write_dataset
    if args.scenes < 1:
        raise UsageError("--scenes must be positive")
    n_val = args.val_scenes if args.val_scenes is not None else max(1, args.scenes // 4)
    cfg = SceneConfig(extent=args.extent, label_noise=args.label_noise)
    write_dataset(args.out, cfg, args.seed, args.scenes, n_val)
    print(f"wrote {args.scenes} train + {n_val} val scenes to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .data import read_dataset
    from .train import train
    cfg = _train_config(args)
    data = read_dataset(args.dataset)
    res = train(cfg, data, out=args.out, progress=print)
    if res.final is not None:
        print("iou,f1,rmse,delta1,delta2,delta3")
        print(res.final.csv_row())
    return EXIT_OK


def cmd_eval(args) -> int:
    from .checkpoint import load_checkpoint
    from .data import read_dataset
    from .losses import LossConfig
    from .metrics import CSV_HEADER
    from .train import evaluate_model
    model = load_checkpoint(args.checkpoint)
    data = read_dataset(args.dataset, splits=(args.split,))
    if args.split not in data:
        raise UsageError(f"dataset has no {args.split!r} split")
    rep, _ = evaluate_model(model, data[args.split], LossConfig())
    text = f"{CSV_HEADER}\n{rep.csv_row()}\n"
    sys.stdout.write(text)
    if args.out:
        Path(args.out).write_text(text)
    return EXIT_OK


def _predict(model, split, batch: int = 16):
    from .tensor import no_grad
    with no_grad():
        for i in range(0, len(split), batch):
            preds = model(split.images[i:i + batch])
            yield i, preds.s.data, preds.height.data


def cmd_infer(args) -> int:
    from .checkpoint import load_checkpoint
    from .data import read_dataset
    from .render import write_pgm
    from .tensor import save_bmt
    model = load_checkpoint(args.checkpoint)
    split = read_dataset(args.dataset, splits=(args.split,))[args.split]
    args.out.mkdir(parents=True, exist_ok=True)
    for i, s, h in _predict(model, split):
        for j in range(len(s)):
            seed = split.seeds[i + j]
            write_pgm(args.out / f"{seed:09d}_mask.pgm", s[j])
            save_bmt(args.out / f"{seed:09d}_height.bmt", h[j])
    print(f"wrote {len(split)} predictions to {args.out}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .data import read_dataset
    from .train import run_ablation_ladder
    cfg = _train_config(args)
    data = read_dataset(args.dataset)
    _, text = run_ablation_ladder(data, cfg, out=args.out, progress=print)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradsuite import format_table, resolve, run_suite
    if args.trials < 1:
        raise UsageError("--trials must be positive")
    try:
        resolve(args.module)
    except KeyError as exc:
        raise UsageError(str(exc.args[0])) from None
    results = run_suite(args.module, args.trials, args.seed)
    print(format_table(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_INVALID


def cmd_bench_scan(args) -> int:
    from . import _kernels
    from .ssm import bench_csv, bench_scan, loglog_slope
    if any(b <= a for a, b in zip(args.lengths, args.lengths[1:])):
        raise UsageError("--lengths must be strictly ascending")
    backend = {"active": None, "python": _kernels.python_backend}.get(args.backend)
    if args.backend == "cython":
        if _kernels.compiled_backend is None:
            raise RuntimeError("compiled scan kernel is not available")
        backend = _kernels.compiled_backend
    rows = bench_scan(args.lengths, repeats=args.trials, seed=args.seed, backend=backend)
    text = bench_csv(rows)
    sys.stdout.write(text)
    if len(rows) >= 2:
        Ls = [r[0] for r in rows]
        print(f"# slope scan={loglog_slope(Ls, [r[1] for r in rows]):.3f} "
              f"attention={loglog_slope(Ls, [r[2] for r in rows]):.3f}", file=sys.stderr)
    if args.out:
        Path(args.out).write_text(text)
    return EXIT_OK


def cmd_render(args) -> int:
    from .checkpoint import load_checkpoint
    from .data import read_dataset
    from .render import side_by_side, write_ppm
    model = load_checkpoint(args.checkpoint)
    split = read_dataset(args.dataset, splits=(args.split,))[args.split]
    args.out.mkdir(parents=True, exist_ok=True)
    n = min(args.count, len(split))
    from .data import Split
    head = Split(split.images[:n], split.masks[:n], split.heights[:n], split.seeds[:n])
    for i, s, h in _predict(model, head):
        for j in range(len(s)):
            k = i + j
            panel = side_by_side(head.images[k], head.masks[k], s[j], head.heights[k], h[j])
            write_ppm(args.out / f"{head.seeds[k]:09d}.ppm", panel)
    print(f"wrote {n} panels to {args.out}")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "infer": cmd_infer,
    "ablate": cmd_ablate, "gradcheck": cmd_gradcheck, "bench-scan": cmd_bench_scan, "render": cmd_render,
}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as exc:   # --help
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"ssmheight {args.command}: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (ValueError, KeyError) as exc:
        print(f"ssmheight {args.command}: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - the exit code is the contract
        print(f"ssmheight {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
