"""Learned inference models: the line-graph GNN, the NEDMP hybrid and the node-GNN baseline.

Both trainable models expose ``forward(inst)`` returning a recorded tensor of
shape (T+1, n, 3) holding (P_S, P_I, P_R), and ``predict(inst)`` returning a
:class:`MarginalTrajectory` without recording.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .graph import Instance, LineGraph
from .nn import (
    GRU,
    MLP,
    CheckpointError,
    GRUSpec,
    MLPSpec,
    ParamStore,
    load_checkpoint,
    save_checkpoint,
)
from .simulate import MarginalTrajectory

__all__ = [
    "LineGNN",
    "linegnn_step",
    "NEDMP",
    "NodeGNN",
    "nedmp_run",
    "nodegnn_run",
    "load_model",
    "MODEL_KINDS",
]

HIDDEN = 32
READOUT_BIAS = 2.0


def _initial_rows(inst: Instance) -> np.ndarray:
    seeds = inst.seed_mask().astype(float)
    return np.stack([1.0 - seeds, seeds, np.zeros(inst.n)], axis=1)


class _Model:
    kind = ""

    def __init__(self, hidden: int = HIDDEN, seed: int = 0):
        self.hidden = int(hidden)
        self.seed = int(seed)
        self.params = ParamStore()
        self._build(np.random.default_rng(seed))

    def _build(self, rng):
        raise NotImplementedError

    def forward(self, inst: Instance) -> Tensor:
        raise NotImplementedError

    def predict(self, inst: Instance, **kwargs) -> MarginalTrajectory:
        with ag.no_grad():
            out = self.forward(inst, **kwargs)
        return MarginalTrajectory.from_stack(out.value)

    def save(self, path, **meta) -> None:
        save_checkpoint(
            path,
            self.params,
            {"model_kind": self.kind, "hidden": self.hidden, "seed": self.seed, **meta},
        )

    @classmethod
    def load(cls, path) -> "_Model":
        meta, state = load_checkpoint(path)
        if meta.get("model_kind") != cls.kind:
            raise CheckpointError(
                f"checkpoint holds a {meta.get('model_kind')!r} model, expected {cls.kind!r}"
            )
        model = cls(hidden=meta.get("hidden", HIDDEN), seed=meta.get("seed", 0))
        model.params.load_state(state)
        return model


# ---------------------------------------------------------------------------
# line-graph GNN


@dataclass
class LineGNN:
    """Gated GNN on the non-backtracking line graph.

    ``embed`` maps the per-line-node input to width D, ``message`` combines it
    with the hidden state, ``aggregate`` post-processes the summed incoming
    messages and ``gru`` updates the hidden state.
    """

    embed: MLP
    message: MLP
    aggregate: MLP
    gru: GRU

    @classmethod
    def create(cls, params: ParamStore, hidden: int, in_dim: int, rng) -> "LineGNN":
        D = hidden
        return cls(
            MLP.create(params, "phi_e", MLPSpec(in_dim, (D,), D), rng),
            MLP.create(params, "phi_m", MLPSpec(2 * D, (D,), D), rng),
            MLP.create(params, "phi_a", MLPSpec(D, (D,), D), rng),
            GRU.create(params, "gru", GRUSpec(D, D), rng),
        )


def linegnn_step(gnn: LineGNN, h: Tensor, x, lg: LineGraph):
    """One line-graph iteration.

    Returns ``(messages, aggregated, h_next)``: per-line-node messages
    ``phi_m(h + phi_e(x))``, the ``phi_a``-transformed sum of messages over
    non-backtracking in-arcs, and the GRU-updated hidden state.
    """
    msg = gnn.message(ag.concat([h, gnn.embed(x)], axis=1))
    agg = gnn.aggregate(ag.spmm(lg.matrix, msg))
    return msg, agg, gnn.gru(agg, h)


# ---------------------------------------------------------------------------
# NEDMP


class NEDMP(_Model):
    """DMP recursion whose susceptible aggregates are refined by a line-graph GNN.

    At every step the raw products ``P~_S`` (node and cavity) are corrected as
    ``P_S = P~_S * xi + zeta`` with ``(xi, zeta)`` read out from the GNN, then
    fed back into the DMP message updates.
    """

    kind = "nedmp"

    def _build(self, rng):
        D = self.hidden
        self.gnn = LineGNN.create(self.params, D, 1, rng)
        self.readout = MLP.create(self.params, "phi_r", MLPSpec(D + 1, (D,), 2, "sigmoid"), rng)
        # start close to the identity refinement xi = 1, zeta = 0
        self.params["phi_r.b1"].value[:] = [READOUT_BIAS, -READOUT_BIAS]

    def forward(self, inst: Instance, identity_refine: bool = False, trace: list | None = None):
        g = inst.graph
        plan, lg = g.products, g.line
        n, E, T = g.n, g.num_edges, inst.horizon
        seeds = inst.seed_mask()
        ps0 = np.where(seeds, 0.0, 1.0)
        beta = g.beta
        decay = (1 - g.beta) * (1 - g.gamma[g.src])

        theta = ag.constant(np.ones(E))
        phi = ag.constant(seeds[g.src].astype(float))
        cavity = ag.constant(ps0[g.src])
        ps = ag.constant(ps0)
        pi = ag.constant(seeds.astype(float))
        pr = ag.constant(np.zeros(n))
        h = self.gnn.embed(np.ones((E, 1)))
        rows = [ag.constant(_initial_rows(inst))]

        for t in range(1, T + 1):
            theta = theta - beta * phi
            raw_node = ps0 * ag.node_prod(theta, plan)
            raw_cavity = ps0[g.src] * ag.cavity_prod(theta, plan)

            msg, agg, h_next = linegnn_step(self.gnn, h, ag.reshape(theta, (E, 1)), lg)
            node_msg = ag.spmm(g.in_incidence, msg)
            ro = self.readout(
                ag.concat(
                    [
                        ag.concat([ag.reshape(raw_node, (n, 1)), node_msg], axis=1),
                        ag.concat([ag.reshape(raw_cavity, (E, 1)), agg], axis=1),
                    ],
                    axis=0,
                )
            )
            if identity_refine:
                new_ps, new_cavity = raw_node, raw_cavity
            else:
                xi, zeta = ag.column(ro, 0), ag.column(ro, 1)
                new_ps = raw_node * ag.getitem(xi, slice(0, n)) + ag.getitem(zeta, slice(0, n))
                new_cavity = raw_cavity * ag.getitem(xi, slice(n, n + E)) + ag.getitem(
                    zeta, slice(n, n + E)
                )
            new_pr = pr + g.gamma * pi
            new_ps = ag.minimum(ag.clip(new_ps, 0.0, 1.0), 1.0 - new_pr)
            new_cavity = ag.clip(new_cavity, 0.0, 1.0)

            phi = decay * phi + (cavity - new_cavity)
            cavity, ps, pr = new_cavity, new_ps, new_pr
            pi = 1.0 - pr - ps
            h = h_next
            rows.append(ag.stack_columns([ps, pi, pr]))
            if trace is not None:
                trace.append(
                    {
                        "theta": theta.value,
                        "raw_node": raw_node.value,
                        "raw_cavity": raw_cavity.value,
                        "readout": ro.value,
                        "ps": ps.value,
                        "cavity": cavity.value,
                    }
                )
        return ag.stack(rows, axis=0)


def nedmp_run(inst: Instance, model: NEDMP, identity_refine: bool = False) -> MarginalTrajectory:
    return model.predict(inst, identity_refine=identity_refine)


# ---------------------------------------------------------------------------
# node-level GNN baseline


class NodeGNN(_Model):
    """Recurrent node-level GNN that reads the marginals out through a softmax."""

    kind = "nodegnn"

    def _build(self, rng):
        D = self.hidden
        p = self.params
        self.phi_n = MLP.create(p, "phi_n", MLPSpec(2, (D,), D), rng)
        self.phi_e = MLP.create(p, "phi_e", MLPSpec(1, (D,), D), rng)
        self.phi_init = MLP.create(p, "phi_init", MLPSpec(D, (D,), D), rng)
        self.phi_1 = MLP.create(p, "phi_1", MLPSpec(2 * D, (D,), D), rng)
        self.phi_2 = MLP.create(p, "phi_2", MLPSpec(D, (D,), D), rng)
        self.phi_3 = MLP.create(p, "phi_3", MLPSpec(2 * D, (D,), D), rng)
        self.phi_4 = MLP.create(p, "phi_4", MLPSpec(2 * D, (D,), 3, "softmax"), rng)
        self.gru = GRU.create(p, "gru", GRUSpec(D, D), rng)

    def forward(self, inst: Instance) -> Tensor:
        g = inst.graph
        seeds = inst.seed_mask().astype(float)
        x0 = self.phi_n(np.stack([seeds, g.gamma], axis=1))
        e0 = self.phi_e(g.beta.reshape(-1, 1))
        m = self.phi_init(x0)
        rows = [ag.constant(_initial_rows(inst))]
        for _ in range(inst.horizon):
            per_edge = self.phi_1(ag.concat([ag.take(m, g.src), e0], axis=1))
            incoming = self.phi_2(ag.spmm(g.in_incidence, per_edge))
            m = self.gru(self.phi_3(ag.concat([incoming, x0], axis=1)), m)
            rows.append(self.phi_4(ag.concat([m, x0], axis=1)))
        return ag.stack(rows, axis=0)


def nodegnn_run(inst: Instance, model: NodeGNN) -> MarginalTrajectory:
    return model.predict(inst)


MODEL_KINDS = {"nedmp": NEDMP, "nodegnn": NodeGNN}


def load_model(path):
    """Load a checkpoint of either trainable kind, dispatching on its ``model_kind`` tag."""
    meta, _ = load_checkpoint(path)
    kind = meta.get("model_kind")
    if kind not in MODEL_KINDS:
        raise CheckpointError(f"unknown model_kind {kind!r}")
    return MODEL_KINDS[kind].load(path)
