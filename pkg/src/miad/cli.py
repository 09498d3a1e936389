"""Command line: ``miad train | sample | eval | verify``.

Set ``MIAD_LOG_LEVEL`` (e.g. DEBUG) to change logging verbosity.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

from . import engine
from .io import DatasetError, CheckpointError, load_checkpoint, load_config, load_dataset, save_checkpoint, write_crystals
from .metrics import evaluation_report

log = logging.getLogger("miad")


def meta_path(samples_path):
    """Sidecar written next to a sample file: seed, count and discards."""
    p = Path(samples_path)
    return p.with_name(p.name + ".meta.json")


def cmd_train(args):
    cfg = load_config(args.config)
    crystals, _ = load_dataset(args.data)
    model = engine.Model(cfg.train, cfg.model)
    state = None
    if args.resume:
        model, state = load_checkpoint(args.resume)

    def report(st, bd):
        if st.step % 50 == 0:
            log.info("step %d loss %.4f (L %.3f F %.3f A %.3f)", st.step, bd.total, bd.lattice, bd.coords, bd.types)

    state, history = engine.train(crystals, model, state, max_steps=args.max_steps, callback=report)
    save_checkpoint(model, state, args.out)
    balance = engine.loss_balance_report(history) if any(history) else None
    if balance is not None:
        print("loss shares L-F-A: {:.1f}-{:.1f}-{:.1f}".format(*balance.shares))
    print(f"wrote {args.out} after {state.step} steps")
    return 0


def cmd_sample(args):
    model, state = load_checkpoint(args.ckpt)
    crystals, discards = engine.sample(state.params, args.num, model, args.seed, chunk=args.chunk)
    write_crystals(crystals, args.out)
    meta = {"num_requested": args.num, "num_written": len(crystals), "discards": discards, "seed": args.seed}
    meta_path(args.out).write_text(json.dumps(meta, sort_keys=True) + "\n")
    print(f"wrote {len(crystals)} crystals to {args.out} ({discards} all-mirage samples discarded)")
    return 0


def cmd_eval(args):
    samples, _ = load_dataset(args.samples)
    reference = load_dataset(args.reference)[0] if args.reference else None
    discards = 0
    side = meta_path(args.samples)
    if side.exists():
        discards = json.loads(side.read_text())["discards"]
    report = evaluation_report(samples, reference, discards, args.cutoff, args.delta_d, args.min_dist)
    Path(args.report).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    hist_path = Path(args.report).with_suffix(".histogram.csv")
    with open(hist_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["n_atoms", "count"])
        for n, count in report["histogram"].items():
            writer.writerow([n, count])
    print(json.dumps(report, sort_keys=True))
    return 0


def cmd_verify(args):
    from .verify import run_all

    results = run_all(echo=print)
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 1 if failed else 0


def build_parser():
    parser = argparse.ArgumentParser(prog="miad", description="Mirage atom diffusion for periodic crystals.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    p.add_argument("--config", required=True, help="JSON run config")
    p.add_argument("--data", required=True, help="JSONL dataset")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--resume", help="continue from this checkpoint")
    p.add_argument("--max-steps", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="generate crystals from a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--num", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="JSONL output; discards go to <out>.meta.json")
    p.add_argument("--chunk", type=int, default=128, help="trajectories per batch")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="uniqueness / novelty / validity report")
    p.add_argument("--samples", required=True)
    p.add_argument("--reference")
    p.add_argument("--report", required=True, help="JSON report; histogram CSV is written alongside")
    p.add_argument("--cutoff", type=float, default=6.0)
    p.add_argument("--delta-d", type=float, default=0.05)
    p.add_argument("--min-dist", type=float, default=0.5)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("verify", help="run the symmetry / oracle / gradient self-checks")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None):
    logging.basicConfig(level=os.environ.get("MIAD_LOG_LEVEL", "WARNING").upper(), format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (DatasetError, CheckpointError, FileNotFoundError) as err:
        print(f"miad: error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
