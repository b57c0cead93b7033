"""Datasets, losses, the L1 metric and the training loop."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import autograd as ag
from .dmp import dmp_run
from .graph import Instance, from_undirected, generate_graph, load_instance, read_edgelist, save_instance
from .nn import Adam, PlateauSchedule, early_stop
from .simulate import MarginalTrajectory, estimate_marginals

__all__ = [
    "DatasetConfig",
    "Dataset",
    "TrainConfig",
    "NumericalError",
    "split_sizes",
    "make_dataset",
    "shared_topology",
    "sample_instance",
    "load_dataset",
    "loss_ce",
    "loss_monotone",
    "loss_total",
    "l1_metric",
    "predict",
    "evaluate",
    "train",
    "write_log",
]

log = logging.getLogger(__name__)

CE_FLOOR = 1e-12


class NumericalError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass
class DatasetConfig:
    """How to draw labelled instances.

    ``kind``/``size``/``graph_params`` select a synthetic topology (see
    :func:`nedmp.graph.generate_graph`); alternatively ``edgelist`` names a
    ``src dst`` text file. Rates are drawn uniformly per undirected edge and
    per node from the ``beta`` and ``gamma`` ranges.
    """

    kind: str = "tree"
    size: int = 12
    count: int = 200
    beta: tuple[float, float] = (0.4, 0.6)
    gamma: tuple[float, float] = (0.2, 0.5)
    n_seeds: int = 1
    n_runs: int = 100_000
    horizon: int = 30
    graph_params: dict = field(default_factory=dict)
    fixed_topology: bool = False
    edgelist: Optional[str] = None

    @classmethod
    def from_dict(cls, doc: dict) -> "DatasetConfig":
        doc = dict(doc)
        for key in ("beta", "gamma"):
            if key in doc:
                doc[key] = tuple(doc[key])
        return cls(**doc)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["beta"], d["gamma"] = list(self.beta), list(self.gamma)
        return d


@dataclass
class Dataset:
    instances: list[Instance]
    splits: dict[str, list[int]]
    provenance: dict = field(default_factory=dict)

    def split(self, name: str) -> list[Instance]:
        return [self.instances[k] for k in self.splits[name]]

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        files = []
        for k, inst in enumerate(self.instances):
            name = f"instance_{k:04d}.json"
            save_instance(inst, directory / name)
            files.append(name)
        manifest = {"files": files, "splits": self.splits, "provenance": self.provenance}
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=1))


def load_dataset(directory) -> Dataset:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    instances = [load_instance(directory / f) for f in manifest["files"]]
    return Dataset(instances, {k: list(v) for k, v in manifest["splits"].items()}, manifest.get("provenance", {}))


@dataclass
class TrainConfig:
    lr: float = 0.01
    batch_size: int = 1
    plateau_factor: float = 0.5
    plateau_patience: int = 5
    min_lr: float = 1e-5
    patience: int = 15
    lam: float = 5.0
    horizon: int = 30
    hidden: int = 32
    max_epochs: int = 200
    clip_norm: Optional[float] = 1.0

    def __post_init__(self):
        if self.batch_size != 1:
            raise ValueError("only batch size 1 is supported")
        if min(self.lr, self.plateau_factor, self.patience, self.hidden, self.max_epochs) <= 0:
            raise ValueError("training hyperparameters must be positive")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")


def split_sizes(count: int, ratios: Sequence[float] = (6, 2, 2)) -> tuple[int, ...]:
    """Largest-remainder apportionment of ``count`` items to the given ratios."""
    ratios = np.asarray(ratios, dtype=float)
    quotas = count * ratios / ratios.sum()
    sizes = np.floor(quotas).astype(int)
    remainder = quotas - sizes
    for k in np.argsort(-remainder, kind="stable")[: count - sizes.sum()]:
        sizes[k] += 1
    return tuple(int(s) for s in sizes)


def _symmetric_beta(pairs_graph, rng, lo, hi) -> np.ndarray:
    g = pairs_graph
    beta = np.empty(g.num_edges)
    for e, (a, b) in enumerate(g.edges):
        if a < b:
            beta[e] = rng.uniform(lo, hi)
    rev = g.reverse
    upper = g.src > g.dst
    beta[upper] = beta[rev[upper]]
    return beta


def sample_instance(cfg: DatasetConfig, rng: np.random.Generator, topology=None) -> Instance:
    """Draw rates and seeds (and a topology unless one is given); no labels."""
    if topology is None:
        topology = _topology(cfg, rng)
    beta = _symmetric_beta(topology, rng, *cfg.beta)
    gamma = rng.uniform(*cfg.gamma, size=topology.n)
    seeds = rng.choice(topology.n, size=cfg.n_seeds, replace=False)
    return Instance(topology.with_rates(beta, gamma), seeds.tolist(), cfg.horizon)


def _topology(cfg: DatasetConfig, rng):
    if cfg.edgelist:
        n, pairs = read_edgelist(cfg.edgelist)
        return from_undirected(n, pairs)
    return generate_graph(cfg.kind, cfg.size, rng, **cfg.graph_params)


def shared_topology(cfg: DatasetConfig, seed: int):
    """The single topology used by every sample of a fixed-topology config, else None."""
    if not (cfg.fixed_topology or cfg.edgelist):
        return None
    topo_seq = np.random.SeedSequence(seed).spawn(1)[0]
    return _topology(cfg, np.random.default_rng(topo_seq))


def make_dataset(cfg: DatasetConfig, seed: int, topology=None) -> Dataset:
    """Draw ``cfg.count`` instances, label them by Monte Carlo and split 6:2:2.

    ``topology`` overrides the shared topology of a fixed-topology config.
    """
    root = np.random.SeedSequence(seed)
    _, split_seq, *sample_seqs = root.spawn(cfg.count + 2)
    fixed = topology if topology is not None else shared_topology(cfg, seed)
    instances = []
    for k, ss in enumerate(sample_seqs):
        rng = np.random.default_rng(ss)
        inst = sample_instance(cfg, rng, fixed)
        mc_seed = int(ss.generate_state(1)[0])
        inst.labels = estimate_marginals(inst, cfg.n_runs, seed=mc_seed)
        instances.append(inst)
        log.debug("labelled sample %d/%d", k + 1, cfg.count)
    order = np.random.default_rng(split_seq).permutation(cfg.count)
    n_train, n_val, _ = split_sizes(cfg.count)
    splits = {
        "train": sorted(order[:n_train].tolist()),
        "val": sorted(order[n_train : n_train + n_val].tolist()),
        "test": sorted(order[n_train + n_val :].tolist()),
    }
    provenance = {"config": cfg.to_dict(), "seed": seed, "n_runs": cfg.n_runs}
    return Dataset(instances, splits, provenance)


# ---------------------------------------------------------------------------
# objectives


def _as_tensor(P):
    if isinstance(P, MarginalTrajectory):
        return ag.constant(P.stack())
    return ag.constant(P)


def _as_array(q) -> np.ndarray:
    return q.stack() if isinstance(q, MarginalTrajectory) else np.asarray(q, dtype=float)


def loss_ce(P, q):
    """Cross-entropy averaged over nodes and steps 1..T (t = 0 excluded)."""
    P, q = _as_tensor(P), _as_array(q)
    if P.shape != q.shape:
        raise ValueError(f"prediction shape {P.shape} != label shape {q.shape}")
    T, n = P.shape[0] - 1, P.shape[1]
    logp = ag.log(ag.getitem(P, slice(1, None)), floor=CE_FLOOR)
    return ag.sum(logp * q[1:]) * (-1.0 / (n * T))


def loss_monotone(P):
    """Total increase of P_S plus total decrease of P_R over consecutive steps."""
    P = _as_tensor(P)
    up_s = ag.getitem(P, (slice(1, None), slice(None), 0)) - ag.getitem(P, (slice(None, -1), slice(None), 0))
    down_r = ag.getitem(P, (slice(None, -1), slice(None), 2)) - ag.getitem(P, (slice(1, None), slice(None), 2))
    return ag.relu_sum(up_s) + ag.relu_sum(down_r)


def loss_total(P, q, lam: float = 5.0):
    return loss_ce(P, q) + lam * loss_monotone(P)


def l1_metric(P, q) -> float:
    """Mean over nodes and steps 1..T of the L1 distance between state triples."""
    P = P.stack() if isinstance(P, MarginalTrajectory) else np.asarray(P)
    q = _as_array(q)
    if P.shape != q.shape:
        raise ValueError(f"prediction shape {P.shape} != label shape {q.shape}")
    T, n = P.shape[0] - 1, P.shape[1]
    return float(np.abs(P[1:] - q[1:]).sum() / (n * T))


# ---------------------------------------------------------------------------
# training and evaluation


def predict(model, inst: Instance, **kwargs) -> MarginalTrajectory:
    """Marginals from a trained model, or from DMP when ``model`` is None or ``"dmp"``."""
    if model is None or model == "dmp":
        return dmp_run(inst)
    return model.predict(inst, **kwargs)


def evaluate(model, instances: Sequence[Instance]) -> list[float]:
    return [l1_metric(predict(model, inst), inst.labels) for inst in instances]


def _val_loss(model, instances, lam) -> float:
    with ag.no_grad():
        return float(np.mean([loss_total(model.forward(x), x.labels, lam).value for x in instances]))


def _clip_gradients(params, max_norm: float) -> None:
    norm = np.sqrt(sum(float(np.sum(t.grad**2)) for _, t in params.items()))
    if norm > max_norm:
        for _, t in params.items():
            t.grad *= max_norm / norm


def train(model, dataset: Dataset, cfg: TrainConfig, seed: int = 0, progress=None):
    """Adam on one instance per step; keeps the weights with the best validation loss.

    Returns the per-epoch log as a list of dicts with keys
    ``epoch, train_loss, val_loss, lr``.
    """
    train_set, val_set = dataset.split("train"), dataset.split("val")
    if not train_set or not val_set:
        raise ValueError("training needs nonempty train and val splits")
    for inst in train_set + val_set:
        if inst.labels is None:
            raise ValueError("every training instance needs labels")
    rng = np.random.default_rng(seed)
    opt = Adam(model.params, lr=cfg.lr)
    sched = PlateauSchedule(cfg.lr, cfg.plateau_factor, cfg.plateau_patience, cfg.min_lr)
    history, rows = [], []
    best_state, best = model.params.state(), np.inf
    for epoch in range(cfg.max_epochs):
        losses = []
        for k in rng.permutation(len(train_set)):
            inst = train_set[k]
            model.params.zero_grads()
            loss = loss_total(model.forward(inst), inst.labels, cfg.lam)
            if not np.isfinite(loss.value):
                raise NumericalError(f"non-finite training loss at epoch {epoch}")
            ag.backward(loss)
            if cfg.clip_norm is not None:
                _clip_gradients(model.params, cfg.clip_norm)
            opt.step()
            losses.append(float(loss.value))
        val = _val_loss(model, val_set, cfg.lam)
        if not np.isfinite(val):
            raise NumericalError(f"non-finite validation loss at epoch {epoch}")
        rows.append({"epoch": epoch, "train_loss": float(np.mean(losses)), "val_loss": val, "lr": opt.lr})
        if progress is not None:
            progress(rows[-1])
        log.info("epoch %d train %.5f val %.5f lr %.2e", epoch, rows[-1]["train_loss"], val, opt.lr)
        history.append(val)
        if val < best:
            best, best_state = val, model.params.state()
        opt.lr = sched.step(val)
        if early_stop(history, cfg.patience):
            break
    model.params.load_state(best_state)
    return rows


def write_log(rows, path, header_comment: str | None = None) -> None:
    with open(path, "w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        w = csv.DictWriter(fh, fieldnames=["epoch", "train_loss", "val_loss", "lr"], lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow(r)
