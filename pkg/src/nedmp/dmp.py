"""Dynamic message passing for discrete-time SIR.

Messages live on directed edges ``j -> i`` in the graph's canonical edge order:

* ``theta[e]``: probability that no infection has crossed ``j -> i`` yet;
* ``phi[e]``: same, and additionally ``j`` is infected;
* ``ps_cavity[e]``: probability that ``j`` is susceptible when ignoring ``i``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .graph import Instance, ProductPlan
from .simulate import MarginalTrajectory

__all__ = [
    "DMPState",
    "dmp_init",
    "dmp_step",
    "dmp_run",
    "node_products",
    "cavity_products",
]


def _exclusive_prefix_suffix(P: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    ones = np.ones(P.shape[:-1] + (1,))
    pre = np.cumprod(np.concatenate([ones, P[..., :-1]], axis=-1), axis=-1)
    suf = np.cumprod(np.concatenate([ones, P[..., :0:-1]], axis=-1), axis=-1)[..., ::-1]
    return pre, suf


def leave_one_out(P: np.ndarray) -> np.ndarray:
    """``out[..., m] = prod_{k != m} P[..., k]`` without division."""
    pre, suf = _exclusive_prefix_suffix(P)
    return pre * suf


def node_products(theta: np.ndarray, plan: ProductPlan) -> np.ndarray:
    """Product of incoming ``theta`` at every node (empty product = 1)."""
    return plan.padded(theta).prod(axis=1)


def cavity_products(theta: np.ndarray, plan: ProductPlan) -> np.ndarray:
    """For each edge ``j -> i``: product of ``theta[k -> j]`` over ``k != i``."""
    P = plan.padded(theta)
    loo = leave_one_out(P)
    full = P.prod(axis=1)
    j = plan.cavity_node
    has_rev = plan.cavity_slot >= 0
    return np.where(has_rev, loo[j, np.maximum(plan.cavity_slot, 0)], full[j])


@dataclass(frozen=True)
class DMPState:
    theta: np.ndarray
    phi: np.ndarray
    ps_cavity: np.ndarray
    ps: np.ndarray
    pi: np.ndarray
    pr: np.ndarray
    t: int = 0


def dmp_init(inst: Instance) -> DMPState:
    g = inst.graph
    seeds = inst.seed_mask()
    ps0 = np.where(seeds, 0.0, 1.0)
    theta = np.ones(g.num_edges)
    return DMPState(
        theta=theta,
        phi=seeds[g.src].astype(float),
        ps_cavity=ps0[g.src] * cavity_products(theta, g.products),
        ps=ps0,
        pi=seeds.astype(float),
        pr=np.zeros(g.n),
        t=0,
    )


def dmp_step(state: DMPState, inst: Instance, ps0: np.ndarray | None = None) -> DMPState:
    """Advance all DMP variables from ``t - 1`` to ``t``."""
    g = inst.graph
    plan = g.products
    if ps0 is None:
        ps0 = np.where(inst.seed_mask(), 0.0, 1.0)
    theta = state.theta - g.beta * state.phi
    ps_cavity = ps0[g.src] * cavity_products(theta, plan)
    phi = (1 - g.beta) * (1 - g.gamma[g.src]) * state.phi + (state.ps_cavity - ps_cavity)
    ps = ps0 * node_products(theta, plan)
    # P_I can sit a rounding error below zero once P_S + P_R ~ 1; never let that shrink P_R
    pr = state.pr + g.gamma * np.maximum(state.pi, 0.0)
    pi = 1.0 - pr - ps
    return DMPState(theta, phi, ps_cavity, ps, pi, pr, state.t + 1)


def dmp_run(inst: Instance, horizon: int | None = None, tol: float | None = None) -> MarginalTrajectory:
    """Marginals for t = 0..T.

    With ``tol`` set, the edge messages are frozen once
    ``max |theta(t) - theta(t-1)| < tol``; the remaining steps only move
    infected mass to recovered.
    """
    T = inst.horizon if horizon is None else int(horizon)
    ps0 = np.where(inst.seed_mask(), 0.0, 1.0)
    state = dmp_init(inst)
    out = np.empty((T + 1, inst.n, 3))
    out[0] = np.stack([state.ps, state.pi, state.pr], axis=-1)
    for t in range(1, T + 1):
        new = dmp_step(state, inst, ps0)
        out[t] = np.stack([new.ps, new.pi, new.pr], axis=-1)
        converged = tol is not None and (
            new.theta.size == 0 or np.max(np.abs(new.theta - state.theta)) < tol
        )
        state = new
        if converged:
            # keep iterating the cheap node update so recovered mass still flows
            for s in range(t + 1, T + 1):
                pr = state.pr + inst.graph.gamma * np.maximum(state.pi, 0.0)
                state = replace(state, pr=pr, pi=1.0 - pr - state.ps, t=s)
                out[s] = np.stack([state.ps, state.pi, state.pr], axis=-1)
            break
    return MarginalTrajectory.from_stack(out)
