"""Marginal inference for SIR spreading on graphs: Monte Carlo, DMP, node-GNN and NEDMP."""

from .dmp import DMPState, dmp_init, dmp_run, dmp_step
from .graph import (
    GRAPH_KINDS,
    Graph,
    Instance,
    LineGraph,
    build_graph,
    from_undirected,
    generate_graph,
    line_graph,
    load_instance,
    save_instance,
)
from .models import NEDMP, NodeGNN, load_model, nedmp_run, nodegnn_run
from .simulate import MarginalTrajectory, estimate_marginals, simulate_once

__version__ = "0.1.0"
