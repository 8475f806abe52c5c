"""Command line entry point: ``rfn {simulate,train,sample,evaluate}``.

Every command writes a manifest (config, seed, SHA-256 of its inputs) next to
its outputs so that a run can be traced back to the exact files it read.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import data as data_mod
from .data import DataFormatError, split
from .gbm import GbmConfig, simulate, subsample_asyn, subsample_syn
from .ode import IntegrationError
from .train import (Checkpoint, RunConfig, TrainingDiverged, evaluate, make_report,
                    rollout, run_manifest, train, write_json)

logger = logging.getLogger("rfn")


def _add_simulate(sub):
    p = sub.add_parser("simulate", help="simulate a correlated GBM dataset")
    p.add_argument("--instances", type=int, default=1000)
    p.add_argument("--keep", type=float, default=0.5, help="fraction of points kept (1 keeps all)")
    p.add_argument("--mode", choices=["syn", "asyn"], default="syn")
    p.add_argument("--grid-points", type=int, default=101)
    p.add_argument("--rho1", type=float, default=0.8)
    p.add_argument("--rho2", type=float, default=0.6)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", type=float, nargs=3, default=(0.7, 0.15, 0.15),
                   metavar=("TRAIN", "VALID", "TEST"))
    p.add_argument("--out", required=True, help="output directory")


def _add_train(sub):
    p = sub.add_parser("train", help="train a model on a dataset")
    p.add_argument("--data", required=True, help="dataset directory or CSV")
    p.add_argument("--config", help="JSON file with RunConfig fields; flags override it")
    p.add_argument("--cell", choices=["gruode", "gru-d", "odernn", "odelstm"])
    p.add_argument("--joint", choices=["cnf", "gaussian"])
    p.add_argument("--mode", choices=["syn", "asyn"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--hidden", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--flow-steps", type=int)
    p.add_argument("--standardize", action="store_true", default=None)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default="run", help="run directory (default: run)")


def _add_sample(sub):
    p = sub.add_parser("sample", help="sample forecast paths for one instance")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--instance", help="instance id (default: first test instance)")
    p.add_argument("--start", type=int, default=None,
                   help="first forecast event, 0-based (default: half the events)")
    p.add_argument("--n", type=int, default=100, help="number of sample paths")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output .npz file")


def _add_evaluate(sub):
    p = sub.add_parser("evaluate", help="score one-step-ahead forecasts on the test split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--n-samples", type=int, default=100)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--split", default="test")
    p.add_argument("--out", help="report path (default: report.json beside the checkpoint)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rfn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for add in (_add_simulate, _add_train, _add_sample, _add_evaluate):
        add(sub)
    return parser


def _data_path(path) -> Path:
    path = Path(path)
    return path / "dataset.csv" if path.is_dir() else path


def cmd_simulate(args) -> int:
    cfg = GbmConfig(n_instances=args.instances, grid_points=args.grid_points,
                    rho1=args.rho1, rho2=args.rho2, seed=args.seed)
    ds = simulate(cfg)
    if args.keep < 1.0:
        sub = subsample_syn if args.mode == "syn" else subsample_asyn
        ds = sub(ds, args.keep, args.seed + 1)
    ds = split(ds, tuple(args.split), args.seed)
    out = Path(args.out)
    path = data_mod.save(ds, out)
    write_json(run_manifest("simulate", vars(args), [], args.seed), out / "simulate.manifest.json")
    print(f"wrote {len(ds)} instances to {path}")
    return 0


def cmd_train(args) -> int:
    cfg = json.loads(Path(args.config).read_text()) if args.config else {}
    for key in ("cell", "joint", "mode", "epochs", "hidden", "lr", "batch_size", "patience",
                "flow_steps", "standardize", "seed"):
        val = getattr(args, key)
        if val is not None:
            cfg[key] = val
    config = RunConfig.from_json(cfg)
    data_path = _data_path(args.data)
    ds = data_mod.load(data_path)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = train(config, ds, log_path=out / "loss.csv")
    ckpt.save(out / "ckpt")
    write_json(run_manifest("train", config.to_json(), [data_path], config.seed), out / "manifest.json")
    print(f"best epoch {ckpt.epoch} valid loss {ckpt.valid_loss:.6f}; checkpoint in {out / 'ckpt'}")
    return 0


def cmd_sample(args) -> int:
    ckpt = Checkpoint.load(args.ckpt)
    data_path = _data_path(args.data)
    ds = data_mod.load(data_path)
    if args.instance is None:
        pool = ds.subset("test").instances if ds.splits else ds.instances
        inst = pool[0]
    else:
        matches = [i for i in ds.instances if i.instance_id == args.instance]
        if not matches:
            raise KeyError(f"no instance {args.instance!r}")
        inst = matches[0]
    start = inst.n_events // 2 if args.start is None else args.start
    paths = rollout(ckpt, inst, start, args.n, np.random.default_rng(args.seed))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    np.savez(out, samples=paths, times=inst.times[start:], observed=inst.values[:, start:].T,
             mask=inst.mask[:, start:].T)
    write_json(run_manifest("sample", {k: v for k, v in vars(args).items() if k != "func"},
                            [Path(args.ckpt), data_path], args.seed),
               out.with_name(out.stem + ".manifest.json"))
    print(f"wrote {args.n} paths over {inst.n_events - start} events to {out}")
    return 0


def cmd_evaluate(args) -> int:
    ckpt = Checkpoint.load(args.ckpt)
    data_path = _data_path(args.data)
    ds = data_mod.load(data_path)
    res = evaluate(ckpt, ds, args.n_samples, args.seed, args.split)
    report = make_report({res["model"]: [res]}, ckpt.config.cs_levels,
                         {"mode": res["mode"], "split": args.split, "n_samples": args.n_samples,
                          "n_instances": res["n_instances"], "n_events": res["n_events"]})
    out = Path(args.out) if args.out else Path(args.ckpt).parent / "report.json"
    write_json(report, out)
    write_json(run_manifest("evaluate", {k: v for k, v in vars(args).items() if k != "func"},
                            [Path(args.ckpt), data_path], args.seed),
               out.with_name(out.stem + ".manifest.json"))
    print(f"{res['model']}: crps {res['crps']:.6f} crps_sum {res['crps_sum']:.6f} cs {res['cs']:.6f}")
    return 0


COMMANDS = {"simulate": cmd_simulate, "train": cmd_train, "sample": cmd_sample,
            "evaluate": cmd_evaluate}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed the usage text
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (DataFormatError, ValueError, KeyError, IndexError, FileNotFoundError,
            IntegrationError, TrainingDiverged) as exc:
        print(f"rfn {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
