"""Diffusion graphs, their non-backtracking line graphs, and SIR problem instances.

A :class:`Graph` stores directed edges in canonical (sorted) order together with
per-edge infection probabilities ``beta`` and per-node recovery probabilities
``gamma``. Every message-indexed array in the package (DMP messages, GNN hidden
states) is aligned with this edge order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Optional, Sequence

import networkx as nx
import numpy as np
import scipy.sparse as sp

__all__ = [
    "GraphError",
    "EndpointError",
    "SelfLoopError",
    "DuplicateEdgeError",
    "RateError",
    "SchemaError",
    "Graph",
    "LineGraph",
    "Instance",
    "build_graph",
    "from_undirected",
    "line_graph",
    "generate_graph",
    "GRAPH_KINDS",
    "load_instance",
    "save_instance",
    "instance_from_dict",
    "instance_to_dict",
    "read_edgelist",
]


class GraphError(ValueError):
    """Base class for invalid graph or instance data."""


class EndpointError(GraphError):
    pass


class SelfLoopError(GraphError):
    pass


class DuplicateEdgeError(GraphError):
    pass


class RateError(GraphError):
    pass


class SchemaError(GraphError):
    """An instance document does not match the expected schema."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass(frozen=True, eq=False)
class Graph:
    """Directed diffusion network.

    Attributes
    ----------
    n : int
        Number of nodes.
    src, dst : ndarray of int, shape (E,)
        Endpoints of each directed edge, sorted lexicographically by (src, dst).
    beta : ndarray of float, shape (E,)
        Infection probability of each directed edge.
    gamma : ndarray of float, shape (n,)
        Recovery probability of each node.
    """

    n: int
    src: np.ndarray
    dst: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray

    @property
    def num_edges(self) -> int:
        return int(self.src.shape[0])

    @property
    def edges(self) -> list[tuple[int, int]]:
        return list(zip(self.src.tolist(), self.dst.tolist()))

    @cached_property
    def edge_index(self) -> dict[tuple[int, int], int]:
        return {e: k for k, e in enumerate(self.edges)}

    @cached_property
    def in_neighbors(self) -> list[np.ndarray]:
        return [self.src[self.dst == i] for i in range(self.n)]

    @cached_property
    def out_neighbors(self) -> list[np.ndarray]:
        return [self.dst[self.src == i] for i in range(self.n)]

    @cached_property
    def in_edges(self) -> list[np.ndarray]:
        """Edge indices ``k -> i`` entering each node ``i``, in edge order."""
        order = np.arange(self.num_edges)
        return [order[self.dst == i] for i in range(self.n)]

    @cached_property
    def reverse(self) -> np.ndarray:
        """Index of the reversed edge ``j -> i`` for every edge ``i -> j`` (-1 if absent)."""
        idx = self.edge_index
        return np.array([idx.get((j, i), -1) for i, j in self.edges], dtype=np.int64)

    @cached_property
    def in_incidence(self) -> sp.csr_matrix:
        """Sparse (n, E) matrix summing edge quantities onto their target node."""
        E = self.num_edges
        return sp.csr_matrix(
            (np.ones(E), (self.dst, np.arange(E))), shape=(self.n, E)
        )

    @cached_property
    def products(self) -> "ProductPlan":
        return ProductPlan.from_graph(self)

    @cached_property
    def line(self) -> "LineGraph":
        return line_graph(self)

    def degree(self) -> np.ndarray:
        return np.bincount(self.dst, minlength=self.n)

    def is_symmetric(self) -> bool:
        return bool(np.all(self.reverse >= 0))

    def with_rates(self, beta, gamma) -> "Graph":
        """Copy of the graph with new rates (scalars broadcast)."""
        beta = np.broadcast_to(np.asarray(beta, dtype=float), (self.num_edges,)).copy()
        gamma = np.broadcast_to(np.asarray(gamma, dtype=float), (self.n,)).copy()
        _check_rates(beta, "beta")
        _check_rates(gamma, "gamma")
        return Graph(self.n, self.src, self.dst, beta, gamma)

    def permute(self, perm: Sequence[int]) -> "Graph":
        """Relabel node ``i`` as ``perm[i]``."""
        perm = np.asarray(perm)
        gamma = np.empty(self.n)
        gamma[perm] = self.gamma
        edges = [
            (int(perm[s]), int(perm[d]), float(b))
            for s, d, b in zip(self.src, self.dst, self.beta)
        ]
        return build_graph(self.n, edges, gamma)

    def to_networkx(self) -> nx.DiGraph:
        g = nx.DiGraph()
        g.add_nodes_from(range(self.n))
        g.add_edges_from(self.edges)
        return g

    def __eq__(self, other) -> bool:
        if not isinstance(other, Graph):
            return NotImplemented
        return (
            self.n == other.n
            and np.array_equal(self.src, other.src)
            and np.array_equal(self.dst, other.dst)
            and np.array_equal(self.beta, other.beta)
            and np.array_equal(self.gamma, other.gamma)
        )

    __hash__ = object.__hash__


def _check_rates(values: np.ndarray, name: str) -> None:
    if values.size and (not np.all(np.isfinite(values)) or values.min() < 0 or values.max() > 1):
        raise RateError(f"{name} values must lie in [0, 1]")


def build_graph(n: int, directed_edges: Iterable[tuple], gamma) -> Graph:
    """Validate and assemble a :class:`Graph`.

    ``directed_edges`` holds ``(src, dst, beta)`` triples in any order; they are
    stored sorted by ``(src, dst)``.
    """
    n = int(n)
    if n < 1:
        raise GraphError("graph needs at least one node")
    triples = [(int(s), int(d), float(b)) for s, d, b in directed_edges]
    seen = set()
    for s, d, b in triples:
        if not (0 <= s < n and 0 <= d < n):
            raise EndpointError(f"edge ({s}, {d}) has an endpoint outside [0, {n})")
        if s == d:
            raise SelfLoopError(f"self-loop at node {s}")
        if (s, d) in seen:
            raise DuplicateEdgeError(f"duplicate edge ({s}, {d})")
        seen.add((s, d))
    triples.sort()
    gamma = np.asarray(gamma, dtype=float).reshape(-1)
    if gamma.shape[0] != n:
        raise GraphError(f"gamma has length {gamma.shape[0]}, expected {n}")
    beta = np.array([b for _, _, b in triples], dtype=float)
    _check_rates(beta, "beta")
    _check_rates(gamma, "gamma")
    src = np.array([s for s, _, _ in triples], dtype=np.int64)
    dst = np.array([d for _, d, _ in triples], dtype=np.int64)
    return Graph(n, src, dst, beta, gamma.copy())


def from_undirected(n: int, pairs: Iterable[tuple[int, int]], beta=0.0, gamma=0.0) -> Graph:
    """Expand undirected pairs into a symmetric directed graph.

    ``beta`` may be a scalar or one value per pair; both directions of a pair
    get the same value.
    """
    pairs = [(int(a), int(b)) for a, b in pairs]
    beta = np.broadcast_to(np.asarray(beta, dtype=float), (len(pairs),))
    edges = []
    for (a, b), w in zip(pairs, beta):
        edges.append((a, b, w))
        edges.append((b, a, w))
    gamma = np.broadcast_to(np.asarray(gamma, dtype=float), (n,))
    return build_graph(n, edges, gamma)


@dataclass(frozen=True)
class ProductPlan:
    """Padded per-node layout of incoming edges used for message products.

    ``slots[i, s]`` is the edge index of the ``s``-th edge entering node ``i``
    (-1 for padding). ``cavity_slot[e]`` locates, for edge ``e = j -> i``, the
    slot of ``i -> j`` among the incoming edges of ``j`` (-1 when absent, in
    which case the cavity equals the full product).
    """

    slots: np.ndarray
    mask: np.ndarray
    cavity_node: np.ndarray
    cavity_slot: np.ndarray

    @classmethod
    def from_graph(cls, g: Graph) -> "ProductPlan":
        width = max(1, int(g.degree().max()) if g.n else 1)
        slots = -np.ones((g.n, width), dtype=np.int64)
        slot_of = np.zeros(g.num_edges, dtype=np.int64)
        for i, edges in enumerate(g.in_edges):
            slots[i, : len(edges)] = edges
            slot_of[edges] = np.arange(len(edges))
        rev = g.reverse
        cavity_slot = np.where(rev >= 0, slot_of[np.maximum(rev, 0)], -1)
        return cls(slots, slots >= 0, g.src.copy(), cavity_slot)

    def padded(self, theta: np.ndarray) -> np.ndarray:
        P = np.ones(self.slots.shape)
        P[self.mask] = theta[self.slots[self.mask]]
        return P


@dataclass(frozen=True)
class LineGraph:
    """Non-backtracking line graph: one node per directed edge of the base graph.

    ``arcs`` lists ``(a, b)`` pairs of base-edge indices with ``a = i -> j`` and
    ``b = j -> k``, ``i != k``. ``matrix[b, a] = 1`` so that ``matrix @ x``
    sums, for every line node, the values on its incoming arcs.
    """

    base: Graph
    arcs: np.ndarray
    matrix: sp.csr_matrix

    @property
    def num_nodes(self) -> int:
        return self.base.num_edges

    @property
    def edge_of(self) -> list[tuple[int, int]]:
        return self.base.edges

    @property
    def node_in(self) -> list[np.ndarray]:
        """Line nodes ``k -> i`` entering each base node ``i``."""
        return self.base.in_edges

    def in_arcs(self, line_node: int) -> np.ndarray:
        return self.arcs[self.arcs[:, 1] == line_node, 0]


def line_graph(g: Graph) -> LineGraph:
    a_list, b_list = [], []
    out_edges = [np.flatnonzero(g.src == i) for i in range(g.n)]
    for a, (i, j) in enumerate(g.edges):
        for b in out_edges[j]:
            if g.dst[b] != i:
                a_list.append(a)
                b_list.append(int(b))
    arcs = np.array([a_list, b_list], dtype=np.int64).T.reshape(-1, 2)
    E = g.num_edges
    matrix = sp.csr_matrix((np.ones(len(a_list)), (b_list, a_list)), shape=(E, E))
    return LineGraph(g, arcs, matrix)


@dataclass(eq=False)
class Instance:
    """SIR marginal inference problem: graph, initial seeds and horizon."""

    graph: Graph
    seeds: tuple[int, ...]
    horizon: int
    labels: Optional["MarginalTrajectory"] = None  # noqa: F821
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.seeds = tuple(sorted(int(s) for s in self.seeds))
        self.horizon = int(self.horizon)
        if not self.seeds:
            raise GraphError("seed set must be nonempty")
        if len(set(self.seeds)) != len(self.seeds):
            raise GraphError("seed set has repeated nodes")
        if self.seeds[0] < 0 or self.seeds[-1] >= self.graph.n:
            raise EndpointError("seed outside node range")
        if self.horizon < 1:
            raise GraphError("horizon must be >= 1")
        if self.labels is not None and self.labels.shape != (self.horizon + 1, self.graph.n):
            raise GraphError(
                f"labels shape {self.labels.shape} does not match (T+1, n) = "
                f"{(self.horizon + 1, self.graph.n)}"
            )

    @property
    def n(self) -> int:
        return self.graph.n

    def seed_mask(self) -> np.ndarray:
        mask = np.zeros(self.graph.n, dtype=bool)
        mask[list(self.seeds)] = True
        return mask

    def __eq__(self, other) -> bool:
        if not isinstance(other, Instance):
            return NotImplemented
        if (self.labels is None) != (other.labels is None):
            return False
        return (
            self.graph == other.graph
            and self.seeds == other.seeds
            and self.horizon == other.horizon
            and (self.labels is None or self.labels == other.labels)
        )


# ---------------------------------------------------------------------------
# synthetic topologies

GRAPH_KINDS = (
    "tree",
    "cycle",
    "grid",
    "regular",
    "erdos_renyi",
    "watts_strogatz",
    "barabasi_albert",
    "complete",
)


def _grid_shape(size: int) -> tuple[int, int]:
    rows = max(d for d in range(1, int(np.sqrt(size)) + 1) if size % d == 0)
    return rows, size // rows


def generate_graph(kind: str, size: int, rng: np.random.Generator, **params) -> Graph:
    """Connected simple undirected topology as a symmetric Graph.

    Rates are left at zero; use :meth:`Graph.with_rates` to fill them in.

    Kind-specific parameters: ``degree`` (regular, default 3), ``p`` (erdos_renyi
    edge probability, default 0.3; watts_strogatz rewiring, default 0.2), ``k``
    (watts_strogatz ring neighbors, default 4; odd values act as ``k - 1``),
    ``m`` (barabasi_albert attachments, default 2), ``rows``/``cols`` (grid).
    """
    if kind not in GRAPH_KINDS:
        raise GraphError(f"unknown graph kind {kind!r}")
    size = int(size)
    if size < 1:
        raise GraphError("size must be >= 1")
    seed = int(rng.integers(2**32))
    if kind == "tree":
        G = nx.random_labeled_tree(size, seed=seed) if size > 1 else nx.empty_graph(1)
    elif kind == "cycle":
        if size < 3:
            raise GraphError("cycle needs at least 3 nodes")
        G = nx.cycle_graph(size)
    elif kind == "grid":
        rows, cols = params.get("rows"), params.get("cols")
        if rows is None or cols is None:
            rows, cols = _grid_shape(size)
        if rows * cols != size:
            raise GraphError(f"grid {rows}x{cols} does not have {size} nodes")
        G = nx.convert_node_labels_to_integers(nx.grid_2d_graph(rows, cols), ordering="sorted")
    elif kind == "regular":
        d = int(params.get("degree", 3))
        if d >= size or (d * size) % 2:
            raise GraphError(f"no {d}-regular graph on {size} nodes")
        G = _retry_connected(lambda s: nx.random_regular_graph(d, size, seed=s), seed)
    elif kind == "erdos_renyi":
        p = float(params.get("p", 0.3))
        if not 0 < p <= 1:
            raise GraphError("erdos_renyi needs 0 < p <= 1")
        G = _retry_connected(lambda s: nx.gnp_random_graph(size, p, seed=s), seed)
    elif kind == "watts_strogatz":
        k = int(params.get("k", 4))
        p = float(params.get("p", 0.2))
        if k < 2 or k - k % 2 >= size:
            raise GraphError("watts_strogatz needs 2 <= k < size")
        G = _retry_connected(lambda s: nx.watts_strogatz_graph(size, k, p, seed=s), seed)
    elif kind == "barabasi_albert":
        m = int(params.get("m", 2))
        if not 1 <= m < size:
            raise GraphError("barabasi_albert needs 1 <= m < size")
        G = nx.barabasi_albert_graph(size, m, seed=seed)
    else:
        G = nx.complete_graph(size)
    return from_undirected(size, sorted(tuple(sorted(e)) for e in G.edges()))


def _retry_connected(make, seed: int, tries: int = 1000) -> nx.Graph:
    for k in range(tries):
        G = make(seed + k)
        if nx.is_connected(G):
            return G
    raise GraphError("could not draw a connected graph with these parameters")


def read_edgelist(path) -> tuple[int, list[tuple[int, int]]]:
    """Read a whitespace-separated ``src dst`` edge list as an undirected graph.

    Lines starting with ``#`` are comments. Node labels are remapped to
    ``0..n-1`` in order of first appearance; self-loops and repeated pairs are
    dropped.
    """
    labels: dict[str, int] = {}
    pairs: set[tuple[int, int]] = set()
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) < 2:
            raise SchemaError("edgelist", f"malformed line {line!r}")
        a, b = (labels.setdefault(x, len(labels)) for x in parts[:2])
        if a != b:
            pairs.add((min(a, b), max(a, b)))
    return len(labels), sorted(pairs)


# ---------------------------------------------------------------------------
# JSON instance documents


def instance_to_dict(inst: Instance) -> dict:
    g = inst.graph
    doc = {
        "n": g.n,
        "edges": [[int(s), int(d), float(b)] for s, d, b in zip(g.src, g.dst, g.beta)],
        "gamma": g.gamma.tolist(),
        "seeds": list(inst.seeds),
        "T": inst.horizon,
    }
    if inst.labels is not None:
        doc["labels"] = {
            "ps": inst.labels.ps.tolist(),
            "pi": inst.labels.pi.tolist(),
            "pr": inst.labels.pr.tolist(),
        }
    if inst.meta:
        doc["meta"] = inst.meta
    return doc


def _field(doc: dict, name: str, kind):
    if name not in doc:
        raise SchemaError(name, "missing")
    value = doc[name]
    if not isinstance(value, kind) or isinstance(value, bool):
        raise SchemaError(name, f"expected {getattr(kind, '__name__', kind)}")
    return value


def instance_from_dict(doc: dict) -> Instance:
    from .simulate import MarginalTrajectory

    if not isinstance(doc, dict):
        raise SchemaError("<root>", "expected a JSON object")
    n = _field(doc, "n", int)
    edges = _field(doc, "edges", list)
    gamma = _field(doc, "gamma", list)
    seeds = _field(doc, "seeds", list)
    T = _field(doc, "T", int)
    if len(gamma) != n:
        raise SchemaError("gamma", f"length {len(gamma)} does not match n={n}")
    for e in edges:
        if not (isinstance(e, list) and len(e) == 3):
            raise SchemaError("edges", f"entry {e!r} is not [src, dst, beta]")
    try:
        graph = build_graph(n, edges, gamma)
    except RateError as exc:
        raise SchemaError("edges/gamma", str(exc)) from exc
    except GraphError as exc:
        raise SchemaError("edges", str(exc)) from exc
    labels = None
    if doc.get("labels") is not None:
        lab = doc["labels"]
        try:
            labels = MarginalTrajectory(
                np.asarray(lab["ps"], dtype=float),
                np.asarray(lab["pi"], dtype=float),
                np.asarray(lab["pr"], dtype=float),
            )
        except (KeyError, ValueError, TypeError) as exc:
            raise SchemaError("labels", str(exc)) from exc
        if labels.shape != (T + 1, n):
            raise SchemaError("labels", f"shape {labels.shape} != (T+1, n) = {(T + 1, n)}")
    try:
        return Instance(graph, seeds, T, labels, dict(doc.get("meta", {})))
    except GraphError as exc:
        raise SchemaError("seeds" if "seed" in str(exc) else "T", str(exc)) from exc


def save_instance(inst: Instance, path=None) -> str:
    text = json.dumps(instance_to_dict(inst))
    if path is not None:
        Path(path).write_text(text)
    return text


def load_instance(source) -> Instance:
    """Parse an instance from a JSON string or a path to a JSON file."""
    if isinstance(source, Path) or (isinstance(source, str) and not source.lstrip().startswith("{")):
        text = Path(source).read_text()
    else:
        text = source
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError("<root>", f"invalid JSON: {exc}") from exc
    return instance_from_dict(doc)
