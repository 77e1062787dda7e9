"""Desk-scale benchmark setup: the planted-signal graph and its 1,024-architecture space."""
from __future__ import annotations

from .graph import HeteroGraph, synth_graph
from .space import SearchSpace, build_space

# Three node types chained A-P-S. The class of each P node follows the two-hop path
# P -> S -> P, which a two-layer model can only realise with one slot per layer.
PLANTED_SIZES = {"A": 60, "P": 600, "S": 100}
PLANTED_PATH = ("P-S", "S-P")
PLANTED_NOISE = 0.02
PLANTED_SEED = 0


def planted_graph(seed: int = PLANTED_SEED, noise: float = PLANTED_NOISE) -> HeteroGraph:
    return synth_graph(seed, PLANTED_SIZES, list(PLANTED_PATH), noise=noise, name="planted")


def benchmark_space(g: HeteroGraph, layers: int = 2) -> SearchSpace:
    """Pruned two-layer space with self-relations and candidates {gcn, zero} x {sum}: 10 slots."""
    return build_space(g, layers, kind="benchmark", prune=True, self_loops=True)
