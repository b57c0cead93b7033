"""Small fixtures shared by the test modules."""

import numpy as np

from nedmp.graph import Instance, build_graph, from_undirected, generate_graph

DIAMOND = [(0, 1), (0, 2), (1, 3), (2, 3)]


def two_node(beta=0.5, gamma=0.5, horizon=30):
    g = build_graph(2, [(0, 1, beta), (1, 0, beta)], [gamma, gamma])
    return Instance(g, [0], horizon)


def diamond(beta=0.5, gamma=0.5, horizon=10):
    return Instance(from_undirected(4, DIAMOND, beta, gamma), [0], horizon)


def random_instance(kind, size, rng, horizon=30, beta=(0.4, 0.6), gamma=(0.2, 0.5), n_seeds=1, **params):
    """Random-rate instance with symmetric beta per undirected pair."""
    g = generate_graph(kind, size, rng, **params)
    b = np.zeros(g.num_edges)
    for e, (i, j) in enumerate(g.edges):
        if i < j:
            b[e] = rng.uniform(*beta)
    b[g.src > g.dst] = b[g.reverse[g.src > g.dst]]
    gam = rng.uniform(*gamma, size=g.n)
    seeds = rng.choice(g.n, size=n_seeds, replace=False)
    return Instance(g.with_rates(b, gam), seeds.tolist(), horizon)


def standard_error(p, n_runs):
    """Binomial standard error with the add-two-successes adjustment.

    The plain Wald form collapses to zero when an estimated frequency is 0 or 1,
    so the adjusted estimate ``(k + 2) / (N + 4)`` is used for the spread.
    """
    adj = (np.asarray(p) * n_runs + 2.0) / (n_runs + 4.0)
    return np.sqrt(adj * (1 - adj) / n_runs)


def wald_error(p, n_runs):
    """Plain binomial standard error ``sqrt(p (1 - p) / N)``."""
    p = np.asarray(p)
    return np.sqrt(p * (1 - p) / n_runs)


def count_outside(diff, p, n_runs, k):
    """Entries with ``diff > k * SE``: (Wald count, adjusted count).

    Zero differences never count, so 0/0 at a deterministic entry is a match.
    """
    wald = int(((diff > k * wald_error(p, n_runs)) & (diff > 0)).sum())
    return wald, int((diff > k * standard_error(p, n_runs)).sum())
