"""Synchronous discrete-time SIR simulation and Monte-Carlo marginal estimates."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .graph import Instance

__all__ = [
    "S",
    "I",
    "R",
    "MarginalTrajectory",
    "simulate_once",
    "estimate_marginals",
    "BLOCK_SIZE",
]

S, I, R = 0, 1, 2

# Runs are drawn in blocks of this size; block k always uses substream k.
BLOCK_SIZE = 10_000


@dataclass(eq=False)
class MarginalTrajectory:
    """Per-node state probabilities, each array indexed ``[t, node]`` for t = 0..T."""

    ps: np.ndarray
    pi: np.ndarray
    pr: np.ndarray

    def __post_init__(self):
        self.ps = np.asarray(self.ps, dtype=float)
        self.pi = np.asarray(self.pi, dtype=float)
        self.pr = np.asarray(self.pr, dtype=float)
        if not (self.ps.ndim == 2 and self.ps.shape == self.pi.shape == self.pr.shape):
            raise ValueError("ps, pi, pr must be 2-d arrays of equal shape")

    @property
    def shape(self) -> tuple[int, int]:
        return self.ps.shape

    @property
    def horizon(self) -> int:
        return self.ps.shape[0] - 1

    def stack(self) -> np.ndarray:
        """Array of shape (T+1, n, 3) ordered (S, I, R)."""
        return np.stack([self.ps, self.pi, self.pr], axis=-1)

    @classmethod
    def from_stack(cls, arr: np.ndarray) -> "MarginalTrajectory":
        return cls(arr[..., 0], arr[..., 1], arr[..., 2])

    def permute(self, perm) -> "MarginalTrajectory":
        """Relabel node ``i`` as ``perm[i]``."""
        perm = np.asarray(perm)
        out = np.empty_like(self.stack())
        out[:, perm] = self.stack()
        return MarginalTrajectory.from_stack(out)

    def __eq__(self, other) -> bool:
        if not isinstance(other, MarginalTrajectory):
            return NotImplemented
        return (
            np.array_equal(self.ps, other.ps)
            and np.array_equal(self.pi, other.pi)
            and np.array_equal(self.pr, other.pr)
        )

    def to_csv(self, path=None, header_comment: str | None = None) -> str:
        buf = io.StringIO()
        if header_comment:
            buf.write(f"# {header_comment}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "node", "ps", "pi", "pr"])
        T1, n = self.shape
        for t in range(T1):
            for i in range(n):
                w.writerow(
                    [t, i, f"{self.ps[t, i]:.6f}", f"{self.pi[t, i]:.6f}", f"{self.pr[t, i]:.6f}"]
                )
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_csv(cls, source) -> "MarginalTrajectory":
        text = Path(source).read_text() if not str(source).startswith(("t,", "#")) else source
        rows = [r for r in csv.DictReader(l for l in text.splitlines() if not l.startswith("#"))]
        T1 = max(int(r["t"]) for r in rows) + 1
        n = max(int(r["node"]) for r in rows) + 1
        arr = np.zeros((T1, n, 3))
        for r in rows:
            arr[int(r["t"]), int(r["node"])] = [float(r["ps"]), float(r["pi"]), float(r["pr"])]
        return cls.from_stack(arr)


DENSE_LIMIT = 2000


def _log_escape(inst: Instance):
    """(n, n) matrix with entry [j, i] = log(1 - beta_ji); sparse for large graphs."""
    g = inst.graph
    # beta = 1 maps to a huge finite negative so that 0 * value stays 0
    logs = np.log(np.maximum(1.0 - g.beta, 1e-300))
    mat = sp.csr_matrix((logs, (g.src, g.dst)), shape=(g.n, g.n))
    return mat.toarray() if g.n <= DENSE_LIMIT else mat


def _run_block(inst: Instance, n_runs: int, rng: np.random.Generator, escape, stop_early: bool,
               record: bool = False):
    """Simulate ``n_runs`` trajectories at once.

    Returns per-step state counts of shape (T+1, n, 3) and, with ``record``, the
    full state array (T+1, runs, n).
    """
    g = inst.graph
    T = inst.horizon
    counts = np.zeros((T + 1, g.n, 3), dtype=np.int64)
    states = np.zeros((T + 1, n_runs, g.n), dtype=np.int8) if record else None
    cur = np.full((n_runs, g.n), S, dtype=np.int8)
    cur[:, list(inst.seeds)] = I
    gamma_flat = np.tile(g.gamma, n_runs)

    def tally(t, cur):
        infected = cur == I
        n_s = (cur == S).sum(axis=0)
        n_i = infected.sum(axis=0)
        counts[t, :, 0] = n_s
        counts[t, :, 1] = n_i
        counts[t, :, 2] = n_runs - n_s - n_i
        if record:
            states[t] = cur
        return infected

    infected = tally(0, cur)
    for t in range(1, T + 1):
        if stop_early and not infected.any():
            counts[t:] = counts[t - 1]
            if record:
                states[t:] = cur
            break
        # log P(no transmission) for every (run, node), from time t-1 states
        log_safe = infected.astype(float) @ escape
        exposed = np.flatnonzero((cur == S) & (log_safe < 0))
        sick = np.flatnonzero(infected)
        caught = rng.random(exposed.size) < -np.expm1(log_safe.ravel()[exposed])
        healed = rng.random(sick.size) < gamma_flat[sick]
        cur = cur.copy()
        flat = cur.ravel()
        flat[exposed[caught]] = I
        flat[sick[healed]] = R
        infected = tally(t, cur)
    return counts, states


def simulate_once(inst: Instance, rng: np.random.Generator, stop_early: bool = False) -> np.ndarray:
    """One stochastic SIR trajectory; array of shape (T+1, n) with values in {S, I, R}."""
    _, states = _run_block(inst, 1, rng, _log_escape(inst), stop_early, record=True)
    return states[:, 0, :]


def estimate_marginals(
    inst: Instance,
    n_runs: int,
    seed: int = 0,
    stop_early: bool = False,
    block_size: int = BLOCK_SIZE,
) -> MarginalTrajectory:
    """Monte-Carlo state frequencies over ``n_runs`` independent simulations.

    Runs are grouped into blocks of ``block_size``; block ``k`` draws from the
    ``k``-th child of ``SeedSequence(seed)``, so the estimate depends only on
    ``(seed, n_runs, block_size)`` and not on evaluation order.
    """
    if n_runs < 1:
        raise ValueError("n_runs must be >= 1")
    n_blocks = -(-n_runs // block_size)
    children = np.random.SeedSequence(seed).spawn(n_blocks)
    escape = _log_escape(inst)
    counts = np.zeros((inst.horizon + 1, inst.n, 3), dtype=np.int64)
    for k, child in enumerate(children):
        runs = min(block_size, n_runs - k * block_size)
        block, _ = _run_block(inst, runs, np.random.default_rng(child), escape, stop_early)
        counts += block
    freq = counts / n_runs
    return MarginalTrajectory.from_stack(freq)
