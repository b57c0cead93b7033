"""Command-line front end.

Subcommands: ``gen``, ``simulate``, ``dmp``, ``infer``, ``train``, ``eval``
and ``experiment``. Exit status is 0 on success, 1 on usage errors, 2 on data
errors (missing files, schema violations, incompatible checkpoints) and 3 on
numerical failure. Every CSV written starts with a ``#`` comment line holding
the full invocation.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import shlex
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .dmp import dmp_run
from .experiments import ExperimentSpec, build_model, run_experiment
from .graph import GRAPH_KINDS, GraphError, Instance, load_instance
from .models import load_model
from .nn import CheckpointError
from .simulate import MarginalTrajectory, estimate_marginals
from .training import (
    DatasetConfig,
    NumericalError,
    TrainConfig,
    l1_metric,
    load_dataset,
    make_dataset,
    train,
    write_log,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("nedmp")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


class DataError(Exception):
    """Bad or missing input data."""


def _with_horizon(inst: Instance, horizon: int | None) -> Instance:
    if horizon is None or horizon == inst.horizon:
        return inst
    return Instance(inst.graph, inst.seeds, horizon, meta=dict(inst.meta))


def _read_instance(path, horizon=None) -> Instance:
    return _with_horizon(load_instance(Path(path)), horizon)


def _emit(text: str, out) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        Path(out).write_text(text)


def _load_trained(kind: str, ckpt):
    if ckpt is None:
        raise DataError(f"--model {kind} needs --ckpt")
    model = load_model(ckpt)
    expected = {"gnn": "nodegnn", "nedmp": "nedmp"}[kind]
    if model.kind != expected:
        raise CheckpointError(f"checkpoint holds a {model.kind!r} model, --model asks for {kind!r}")
    return model


def _predict(args, inst: Instance) -> MarginalTrajectory:
    if args.model == "dmp":
        if getattr(args, "identity_refine", False):
            log.info("--identity-refine has no effect for --model dmp")
        return dmp_run(inst)
    model = _load_trained(args.model, args.ckpt)
    if args.model == "nedmp":
        return model.predict(inst, identity_refine=args.identity_refine)
    if args.identity_refine:
        raise DataError("--identity-refine applies only to --model nedmp")
    return model.predict(inst)


# ---------------------------------------------------------------------------
# commands


def cmd_gen(args, invocation) -> None:
    if args.spec:
        cfg = DatasetConfig.from_dict(json.loads(Path(args.spec).read_text()))
    else:
        cfg = DatasetConfig(
            kind=args.kind,
            size=args.size,
            count=args.count,
            beta=tuple(args.beta),
            gamma=tuple(args.gamma),
            n_seeds=args.n_seeds,
            horizon=args.horizon if args.horizon is not None else 30,
            fixed_topology=args.fixed_topology,
            edgelist=args.edgelist,
        )
        if args.runs is not None:
            cfg = replace(cfg, n_runs=args.runs)
    ds = make_dataset(cfg, args.data_seed)
    ds.provenance["invocation"] = invocation
    ds.save(args.out)


def cmd_simulate(args, invocation) -> None:
    inst = _read_instance(args.instance, args.horizon)
    P = estimate_marginals(inst, args.runs, seed=args.mc_seed, stop_early=args.stop_early)
    _emit(P.to_csv(header_comment=invocation), args.out)


def cmd_dmp(args, invocation) -> None:
    inst = _read_instance(args.instance, args.horizon)
    _emit(dmp_run(inst).to_csv(header_comment=invocation), args.out)


def cmd_infer(args, invocation) -> None:
    inst = _read_instance(args.instance, args.horizon)
    _emit(_predict(args, inst).to_csv(header_comment=invocation), args.out)


def cmd_train(args, invocation) -> None:
    ds = load_dataset(args.dataset)
    overrides = {"lam": args.lam}
    for key in ("lr", "max_epochs", "hidden"):
        if getattr(args, key) is not None:
            overrides[key] = getattr(args, key)
    if args.horizon is not None:
        overrides["horizon"] = args.horizon
    cfg = TrainConfig(**overrides)
    model = build_model(args.model, cfg.hidden, args.train_seed)
    rows = train(model, ds, cfg, seed=args.train_seed)
    model.save(args.out, invocation=invocation, train_config=vars(cfg))
    log_path = args.log or str(Path(args.out).with_suffix("")) + ".log.csv"
    write_log(rows, log_path, header_comment=invocation)


def _labels_for(args, inst: Instance) -> MarginalTrajectory:
    if args.labels:
        return MarginalTrajectory.from_csv(Path(args.labels))
    if inst.labels is None:
        raise DataError("no labels: the instance carries none and --labels was not given")
    return inst.labels


def cmd_eval(args, invocation) -> None:
    rows = []
    if args.dataset:
        if args.pred:
            raise DataError("--pred evaluates a single --instance, not a --dataset")
        ds = load_dataset(args.dataset)
        for k in ds.splits[args.split]:
            inst = ds.instances[k]
            rows.append([k, l1_metric(_predict(args, inst), inst.labels)])
    elif args.instance:
        inst = _read_instance(args.instance)
        P = MarginalTrajectory.from_csv(Path(args.pred)) if args.pred else _predict(args, inst)
        rows.append([0, l1_metric(P, _labels_for(args, inst))])
    else:
        raise DataError("eval needs --dataset or --instance")
    errs = [r[1] for r in rows]
    if not all(np.isfinite(errs)):
        raise NumericalError("non-finite L1 value")
    lines = [f"# {invocation}", "instance,l1"]
    lines += [f"{k},{v:.6f}" for k, v in rows]
    lines.append(f"mean,{np.mean(errs):.6f}")
    _emit("\n".join(lines) + "\n", args.out)


def cmd_experiment(args, invocation) -> None:
    spec = ExperimentSpec.load(args.spec)
    changes = {}
    if args.data_seed is not None:
        changes["data_seed"] = args.data_seed
    if args.train_seed is not None:
        changes["train_seed"] = args.train_seed
    if args.lam is not None:
        changes["train"] = replace(spec.train, lam=args.lam)
    spec = replace(spec, **changes)
    manifest = run_experiment(spec, out=args.out, comment=invocation)
    if manifest["failures"]:
        log.warning("%d experiment cells failed; see failures.json", len(manifest["failures"]))


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="nedmp", description="SIR marginal inference: Monte Carlo, DMP, GNN and NEDMP.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate a labelled dataset directory")
    g.add_argument("--out", required=True, help="dataset directory")
    g.add_argument("--data-seed", type=int, default=0)
    g.add_argument("--spec", help="dataset config JSON (overrides the generator flags)")
    g.add_argument("--kind", choices=GRAPH_KINDS, default="tree")
    g.add_argument("--size", type=int, default=12)
    g.add_argument("--count", type=int, default=200)
    g.add_argument("--beta", type=float, nargs=2, default=(0.4, 0.6), metavar=("LO", "HI"))
    g.add_argument("--gamma", type=float, nargs=2, default=(0.2, 0.5), metavar=("LO", "HI"))
    g.add_argument("--n-seeds", type=int, default=1)
    g.add_argument("--runs", type=int, help="Monte Carlo runs per label (default 100000)")
    g.add_argument("--horizon", type=int)
    g.add_argument("--fixed-topology", action="store_true")
    g.add_argument("--edgelist", help="'src dst' edge list; implies a fixed topology")

    s = sub.add_parser("simulate", help="Monte Carlo marginals of one instance")
    s.add_argument("--instance", required=True)
    s.add_argument("--runs", type=int, default=100_000)
    s.add_argument("--mc-seed", type=int, default=0)
    s.add_argument("--horizon", type=int)
    s.add_argument("--stop-early", action="store_true", help="stop runs without infected nodes")
    s.add_argument("--out")

    d = sub.add_parser("dmp", help="DMP marginals of one instance")
    d.add_argument("--instance", required=True)
    d.add_argument("--horizon", type=int)
    d.add_argument("--out")

    def model_flags(q, required=True):
        q.add_argument("--model", choices=("dmp", "gnn", "nedmp"), required=required, default="dmp")
        q.add_argument("--ckpt")
        q.add_argument("--identity-refine", action="store_true", help="force xi = 1, zeta = 0 in NEDMP")

    i = sub.add_parser("infer", help="model marginals of one instance")
    model_flags(i)
    i.add_argument("--instance", required=True)
    i.add_argument("--horizon", type=int)
    i.add_argument("--out")

    t = sub.add_parser("train", help="train a model on a dataset")
    t.add_argument("--model", choices=("gnn", "nedmp"), required=True)
    t.add_argument("--dataset", required=True)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--log", help="training log CSV (default <out>.log.csv)")
    t.add_argument("--train-seed", type=int, default=0)
    t.add_argument("--lambda", dest="lam", type=float, default=5.0)
    t.add_argument("--horizon", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--max-epochs", type=int)
    t.add_argument("--hidden", type=int)

    e = sub.add_parser("eval", help="L1 error against Monte Carlo labels")
    model_flags(e, required=False)
    e.add_argument("--dataset")
    e.add_argument("--split", choices=("train", "val", "test"), default="test")
    e.add_argument("--instance")
    e.add_argument("--pred", help="marginals CSV to score instead of running a model")
    e.add_argument("--labels", help="labels CSV (default: the instance's own labels)")
    e.add_argument("--out")

    x = sub.add_parser("experiment", help="run an experiment JSON end to end")
    x.add_argument("--spec", required=True)
    x.add_argument("--out")
    x.add_argument("--data-seed", type=int)
    x.add_argument("--train-seed", type=int)
    x.add_argument("--lambda", dest="lam", type=float)
    return p


COMMANDS = {
    "gen": cmd_gen,
    "simulate": cmd_simulate,
    "dmp": cmd_dmp,
    "infer": cmd_infer,
    "train": cmd_train,
    "eval": cmd_eval,
    "experiment": cmd_experiment,
}

DATA_ERRORS = (DataError, GraphError, CheckpointError, OSError, json.JSONDecodeError, KeyError, csv.Error)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    invocation = shlex.join(["nedmp", *argv])
    try:
        with np.errstate(invalid="raise", divide="raise", over="raise"):
            COMMANDS[args.command](args, invocation)
    except (NumericalError, FloatingPointError) as exc:
        print(f"nedmp: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (*DATA_ERRORS, ValueError) as exc:
        print(f"nedmp: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
