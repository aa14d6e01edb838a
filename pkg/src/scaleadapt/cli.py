"""Command line interface.

Subcommands: gen-data, train-source, adapt, eval, score, report.
Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="scaleadapt", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate the paired source/target toy datasets")
    g.add_argument("--spec", default="default", help="'default' or a path to a spec JSON")
    g.add_argument("--n", type=int, default=200, help="images per domain")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--height", type=int, default=64)
    g.add_argument("--width", type=int, default=128)

    for name in ("train-source", "adapt"):
        p = sub.add_parser(name, help=f"{name.replace('-', ' ')} with a TOML run config")
        p.add_argument("--config", required=True)
        p.add_argument("--out-dir")
        p.add_argument("--seed", type=int)
        p.add_argument("--rounds", type=int)
        p.add_argument("--steps-per-round", type=int)
        p.add_argument("--source-steps", type=int)
        p.add_argument("--beta", type=float)
        p.add_argument("--gamma", type=float)
        p.add_argument("--lr", type=float)
        p.add_argument("--threads", type=int)
        p.add_argument("--label")
        p.add_argument("--no-deterministic", action="store_true")

    e = sub.add_parser("eval", help="evaluate a checkpoint against a labeled manifest")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--out", default="report.csv")
    e.add_argument("--confusion-out")

    s = sub.add_parser("score", help="emit the per-image per-class confidence table")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", default="scores.csv")

    r = sub.add_parser("report", help="merge runs into the selection-history CSV")
    r.add_argument("--runs", nargs="+", required=True, help="run output directories")
    r.add_argument("--out", default="selection_history.csv")
    return parser


def _apply_overrides(cfg, args):
    from dataclasses import replace

    updates = {}
    mapping = {
        "out_dir": args.out_dir,
        "seed": args.seed,
        "rounds": args.rounds,
        "steps_per_round": args.steps_per_round,
        "source_steps": args.source_steps,
        "beta": args.beta,
        "gamma": args.gamma,
        "lr": args.lr,
        "threads": args.threads,
        "label": args.label,
    }
    for key, value in mapping.items():
        if value is not None:
            updates[key] = value
    if args.no_deterministic:
        updates["deterministic"] = False
    return replace(cfg, **updates)


def _cmd_gen_data(args) -> int:
    from .synth_data import DomainSpec, default_spec, generate_dataset

    out = Path(args.out)
    for domain in ("source", "target"):
        if args.spec == "default":
            spec = default_spec(domain, seed=args.seed, height=args.height, width=args.width)
        else:
            with open(args.spec, encoding="utf-8") as fh:
                doc = json.load(fh)
            spec = DomainSpec.from_json_dict(doc[domain])
        manifest = generate_dataset(spec, args.n, out / domain, domain)
        print(f"{domain}: {args.n} images -> {manifest}")
    return 0


def _cmd_run(args, source_only: bool) -> int:
    from .pipeline import Run, load_config

    cfg = _apply_overrides(load_config(args.config), args)
    run = Run(cfg)
    if source_only:
        ckpt = run.train_source()
        print(f"source checkpoint -> {ckpt}")
    else:
        states = run.adapt()
        for st in states:
            print(f"round {st.round_index}: target mIoU {st.metrics['target_miou']:.4f}")
    return 0


def _cmd_eval(args) -> int:
    from .evaluate import evaluate_model, report_csv
    from .model import load_checkpoint
    from .synth_data import Dataset
    from .tensor import write_tensor

    params, _, _ = load_checkpoint(args.checkpoint)
    dataset = Dataset(args.manifest, with_labels=True)

    from .model import predict as model_predict

    report = evaluate_model(lambda x: model_predict(params, x), dataset)
    Path(args.out).write_text(report_csv(report))
    if args.confusion_out:
        write_tensor(args.confusion_out, report.confusion.astype(np.float32))
    print(f"mIoU {report.miou:.4f} over {report.image_count} images -> {args.out}")
    return 0


def _cmd_score(args) -> int:
    from .model import load_checkpoint, predict as model_predict
    from .selection import score_image
    from .synth_data import Dataset

    params, _, _ = load_checkpoint(args.checkpoint)
    dataset = Dataset(args.manifest, with_labels=False)
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "class", "confidence", "present"])
        for image_id in dataset.ids:
            u, present = score_image(model_predict(params, dataset.load_image(image_id)))
            for c in range(len(u)):
                writer.writerow(
                    [image_id, c, f"{u[c]:.6f}" if present[c] else "", int(present[c])]
                )
    print(f"confidence table -> {args.out}")
    return 0


def _cmd_report(args) -> int:
    from .evaluate import selection_history_csv
    from .selection import SelectionResult

    histories = {}
    for run_dir in args.runs:
        run_dir = Path(run_dir)
        with open(run_dir / "run.json", encoding="utf-8") as fh:
            label = json.load(fh)["label"]
        rounds = sorted(run_dir.glob("round_*/selection.json"))
        if not rounds:
            raise FileNotFoundError(f"no round_*/selection.json under {run_dir}")
        histories[label] = [SelectionResult.load(p) for p in rounds]
    Path(args.out).write_text(selection_history_csv(histories))
    print(f"selection history ({len(histories)} configs) -> {args.out}")
    return 0


def cli(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return 1
    try:
        if args.command == "gen-data":
            return _cmd_gen_data(args)
        if args.command == "train-source":
            return _cmd_run(args, source_only=True)
        if args.command == "adapt":
            return _cmd_run(args, source_only=False)
        if args.command == "eval":
            return _cmd_eval(args)
        if args.command == "score":
            return _cmd_score(args)
        if args.command == "report":
            return _cmd_report(args)
        raise RuntimeError(f"unhandled command {args.command}")
    except Exception as err:  # runtime failure -> exit 2
        print(f"error: {err}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(cli())


if __name__ == "__main__":
    main()
