"""Architecture spaces, the bracketed sequence encoding, enumeration and baselines."""
from __future__ import annotations

import itertools
import math
import re
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .errors import ArchDecodeError, EnumerationCapError, LengthError, SpaceError, TokenError
from .graph import SELF_PREFIX, HeteroGraph, MetaPath, self_relation

GNN_OPS = ("gcn", "gat", "edge", "sage", "zero")
AGGREGATORS = ("sum", "mean", "max", "lstm", "att")
BENCHMARK_GNN = ("gcn", "zero")
BENCHMARK_AGGR = ("sum",)
IDENTITY = "I"
EMPTY = "O"
DEFAULT_CAP = 2 ** 20


@dataclass(frozen=True)
class ArchSeq:
    """One architecture: a tuple of token groups (one group per layer for slot spaces)."""

    layers: tuple[tuple[str, ...], ...]
    kind: str = "hgnas"

    @property
    def tokens(self) -> tuple[str, ...]:
        return tuple(itertools.chain.from_iterable(self.layers))

    def __str__(self) -> str:
        return encode(self)


def encode(a: ArchSeq) -> str:
    return "[" + " | ".join(", ".join(layer) for layer in a.layers) + "]"


_QUOTES = "\"'`"


def _split_text(text: str) -> list[list[str]]:
    body = text.strip()
    if not (body.startswith("[") and body.endswith("]")):
        raise ArchDecodeError("architecture must be written as a bracketed list", text)
    body = body[1:-1]
    if "[" in body or "]" in body:
        raise ArchDecodeError("nested brackets", text)
    if not body.strip():
        return [[]]
    return [[tok.strip().strip(_QUOTES).strip() for tok in group.split(",")] for group in body.split("|")]


class SequenceSpace:
    """Shared machinery for spaces whose architectures are fixed-length token sequences.

    Subclasses provide ``groups``: for each token group, the candidate tuple of every
    position in it.
    """

    kind: str
    groups: tuple[tuple[tuple[str, ...], ...], ...]

    @property
    def positions(self) -> list[tuple[str, ...]]:
        return [c for group in self.groups for c in group]

    @property
    def group_sizes(self) -> list[int]:
        return [len(g) for g in self.groups]

    def size(self) -> int:
        return math.prod(len(c) for c in self.positions)

    def make(self, tokens: Sequence[str]) -> ArchSeq:
        tokens = list(tokens)
        layers, k = [], 0
        for n in self.group_sizes:
            layers.append(tuple(tokens[k:k + n]))
            k += n
        return ArchSeq(tuple(layers), self.kind)

    def validate(self, a: ArchSeq) -> ArchSeq:
        if a.kind != self.kind:
            raise ArchDecodeError(f"architecture kind {a.kind!r} does not match space kind {self.kind!r}", str(a))
        toks = a.tokens
        pos = self.positions
        if len(toks) != len(pos):
            raise LengthError(len(pos), len(toks), str(a))
        if [len(layer) for layer in a.layers] != self.group_sizes:
            raise ArchDecodeError("layer boundaries do not match the space", str(a))
        for i, (tok, cands) in enumerate(zip(toks, pos)):
            if tok not in cands:
                raise TokenError(i, tok, str(a), cands)
        return a

    def decode(self, text: str, numeric: bool = False) -> ArchSeq:
        """Parse canonical text. ``numeric`` reads each token as an index into its candidates."""
        groups = _split_text(text)
        flat = [t for g in groups for t in g]
        pos = self.positions
        if len(flat) != len(pos):
            raise LengthError(len(pos), len(flat), text)
        if len(groups) > 1 and [len(g) for g in groups] != self.group_sizes:
            raise ArchDecodeError(
                f"layer sizes {[len(g) for g in groups]} do not match expected {self.group_sizes}", text
            )
        out = []
        for i, (tok, cands) in enumerate(zip(flat, pos)):
            if numeric:
                if not re.fullmatch(r"\d+", tok) or int(tok) >= len(cands):
                    raise TokenError(i, tok, text, tuple(str(k) for k in range(len(cands))))
                out.append(cands[int(tok)])
                continue
            if tok in cands:
                out.append(tok)
                continue
            folded = [c for c in cands if c.lower() == tok.lower()]
            if len(folded) != 1:
                raise TokenError(i, tok, text, cands)
            out.append(folded[0])
        return self.make(out)

    def encode(self, a: ArchSeq, numeric: bool = False) -> str:
        if not numeric:
            return encode(a)
        idx = [str(c.index(t)) for t, c in zip(a.tokens, self.positions)]
        return encode(self.make(idx))

    def index_of(self, a: ArchSeq) -> int:
        """Mixed-radix index of ``a`` in enumeration order."""
        idx = 0
        for tok, cands in zip(a.tokens, self.positions):
            idx = idx * len(cands) + cands.index(tok)
        return idx

    def arch_at(self, index: int) -> ArchSeq:
        pos = self.positions
        if not 0 <= index < self.size():
            raise IndexError(index)
        toks = []
        for cands in reversed(pos):
            index, r = divmod(index, len(cands))
            toks.append(cands[r])
        return self.make(reversed(toks))

    def random_arch(self, rng: np.random.Generator) -> ArchSeq:
        return self.make([c[int(rng.integers(len(c)))] for c in self.positions])


@dataclass(frozen=True)
class Slot:
    relation: str
    source: str
    target: str

    @property
    def is_self(self) -> bool:
        return self.relation.startswith(SELF_PREFIX) and self.source == self.target


@dataclass(frozen=True)
class SearchSpace(SequenceSpace):
    """Per-layer relation slots with candidate GNN operators and one aggregator per layer."""

    slots: tuple[tuple[Slot, ...], ...]
    gnn_candidates: tuple[str, ...] = GNN_OPS
    aggr_candidates: tuple[str, ...] = AGGREGATORS
    kind: str = "hgnas"
    task_types: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.slots:
            raise SpaceError("a space needs at least one layer")
        if self.kind == "benchmark" and (
            set(self.gnn_candidates) != set(BENCHMARK_GNN) or tuple(self.aggr_candidates) != BENCHMARK_AGGR
        ):
            raise SpaceError("benchmark spaces use gnn candidates {gcn, zero} and aggregator {sum}")
        for c in self.gnn_candidates:
            if c not in GNN_OPS:
                raise SpaceError(f"unknown GNN operator {c!r}")
        for c in self.aggr_candidates:
            if c not in AGGREGATORS:
                raise SpaceError(f"unknown aggregator {c!r}")

    @property
    def layers(self) -> int:
        return len(self.slots)

    @property
    def groups(self):
        return tuple(
            tuple([self.gnn_candidates] * len(layer) + [self.aggr_candidates]) for layer in self.slots
        )

    def slot_count(self) -> int:
        return sum(len(layer) for layer in self.slots)

    def ops(self, a: ArchSeq, layer: int) -> tuple[str, ...]:
        return a.layers[layer][:-1]

    def aggregator(self, a: ArchSeq, layer: int) -> str:
        return a.layers[layer][-1]

    def relation_names(self) -> list[str]:
        seen = []
        for layer in self.slots:
            for s in layer:
                if s.relation not in seen:
                    seen.append(s.relation)
        return seen

    def check_graph(self, g: HeteroGraph) -> None:
        for layer in self.slots:
            for s in layer:
                if (s.source, s.target) != g.endpoint_types(s.relation):
                    raise SpaceError(f"slot {s.relation!r} does not match the graph's relation types")

    # -- text for prompts ------------------------------------------------------

    def alias_map(self, anonymize: bool) -> dict[str, str]:
        names = self.relation_names()
        if not anonymize:
            return {n: n for n in names}
        return {n: f"edge_{i + 1}" for i, n in enumerate(names)}

    def template(self, anonymize: bool = False) -> str:
        alias = self.alias_map(anonymize)
        return "[" + " | ".join(
            ", ".join([alias[s.relation] for s in layer] + [f"HAggr_{i + 1}"]) for i, layer in enumerate(self.slots)
        ) + "]"

    def describe(self, anonymize: bool = False, operations: bool = True) -> str:
        alias = self.alias_map(anonymize)
        n = self.layers
        if not operations:
            counts = ", ".join(str(len(c)) for c in self.positions)
            return (
                f"The architecture is a sequence of {len(self.positions)} elements split into {n} groups "
                f"of sizes {self.group_sizes}, written as [{' | '.join(', '.join(['x'] * k) for k in self.group_sizes)}]. "
                f"For each element choose a number from 0 to (number of choices - 1); the numbers of choices "
                f"per element are {counts}."
            )
        lines = [
            f"The architecture of a {n}-layer HGNN is expressed as {self.template(anonymize)}, "
            f"for each edge, you need to select one from [{', '.join(self.gnn_candidates)}], "
            f"then choose an aggregate function from [{', '.join(self.aggr_candidates)}] per layer."
        ]
        if "zero" in self.gnn_candidates:
            lines.append('Choosing "zero" for an edge means that edge passes no messages in that layer.')
        for i, layer in enumerate(self.slots):
            lines.append(f"Layer {i + 1} edges: " + ", ".join(
                f"{alias[s.relation]} ({'self loop on ' + s.target if s.is_self and not anonymize else 'to ' + s.target if not anonymize else 'edge'})"
                for s in layer
            ))
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "slots": [[{"relation": s.relation, "source": s.source, "target": s.target} for s in layer]
                      for layer in self.slots],
            "gnn_candidates": list(self.gnn_candidates),
            "aggr_candidates": list(self.aggr_candidates),
            "task_types": list(self.task_types),
        }

    @classmethod
    def from_dict(cls, d: dict) -> SearchSpace:
        return cls(
            slots=tuple(tuple(Slot(**s) for s in layer) for layer in d["slots"]),
            gnn_candidates=tuple(d["gnn_candidates"]),
            aggr_candidates=tuple(d["aggr_candidates"]),
            kind=d["kind"],
            task_types=tuple(d.get("task_types", ())),
        )


def build_space(
    g: HeteroGraph,
    layers: int,
    kind: str = "hgnas",
    prune: bool = True,
    self_loops: bool = True,
    gnn_candidates: Sequence[str] | None = None,
    aggr_candidates: Sequence[str] | None = None,
) -> SearchSpace:
    """Build a slot space over every directed relation of ``g`` plus one self-relation per type.

    With ``prune`` a slot survives in layer ``l`` only if its target type can still reach a
    task type through the slots of the remaining layers.
    """
    if layers < 1:
        raise SpaceError("layers must be >= 1")
    if kind not in ("hgnas", "benchmark"):
        raise SpaceError(f"unknown space kind {kind!r}")
    task_types = g.task_types
    if not any(r.target in task_types for r in g.relations):
        raise SpaceError(f"no relation delivers messages to the task type(s) {', '.join(task_types)}")
    full = [Slot(r.name, r.source, r.target) for r in g.relations]
    if self_loops:
        full += [Slot(self_relation(t), t, t) for t in g.node_types]
    per_layer = [list(full) for _ in range(layers)]
    if prune:
        useful = set(task_types)
        for l in range(layers - 1, -1, -1):
            per_layer[l] = [s for s in full if s.target in useful]
            useful = {s.source for s in per_layer[l]}
    if kind == "benchmark":
        gnn, aggr = BENCHMARK_GNN, BENCHMARK_AGGR
    else:
        gnn = tuple(gnn_candidates or GNN_OPS)
        aggr = tuple(aggr_candidates or AGGREGATORS)
    return SearchSpace(tuple(tuple(l) for l in per_layer), gnn, aggr, kind, tuple(task_types))


def space_size(s: SequenceSpace) -> int:
    return s.size()


def enumerate_space(s: SequenceSpace, cap: int = DEFAULT_CAP) -> Iterator[ArchSeq]:
    """Yield every architecture once, lexicographically in slot order and candidate order."""
    n = s.size()
    if n > cap:
        raise EnumerationCapError(n, cap)
    for toks in itertools.product(*s.positions):
        yield s.make(toks)


def baseline_archs(s: SearchSpace, mp: MetaPath | Sequence[str]) -> tuple[ArchSeq, ArchSeq]:
    """The all-relations gcn architecture and the meta-path architecture.

    Step ``k`` (0-based) of the meta-path is placed in layer ``n - len(mp) + k`` so the
    last step lands in the last layer; every other slot is ``zero``.
    """
    steps = list(mp.steps if isinstance(mp, MetaPath) else mp)
    if len(steps) > s.layers:
        raise SpaceError(f"meta-path has {len(steps)} steps but the space has {s.layers} layers")
    if "gcn" not in s.gnn_candidates or "zero" not in s.gnn_candidates:
        raise SpaceError("baselines need both gcn and zero among the candidates")
    aggr = "sum" if "sum" in s.aggr_candidates else s.aggr_candidates[0]
    all_rel = ArchSeq(tuple(tuple(["gcn"] * len(layer) + [aggr]) for layer in s.slots), s.kind)
    layers = [["zero"] * len(layer) + [aggr] for layer in s.slots]
    offset = s.layers - len(steps)
    for k, rel in enumerate(steps):
        l = offset + k
        names = [slot.relation for slot in s.slots[l]]
        if rel not in names:
            raise SpaceError(f"meta-path step {rel!r} has no slot in layer {l + 1}")
        layers[l][names.index(rel)] = "gcn"
    return all_rel, ArchSeq(tuple(tuple(x) for x in layers), s.kind)


# -- meta-structure DAG space ----------------------------------------------------


def dag_case(j: int, i: int, n: int) -> int:
    """Which candidate rule applies to the edge from state ``i`` into state ``j`` (i < j <= n)."""
    if not 0 <= i < j <= n:
        raise ValueError(f"no DAG edge H{i}-H{j} for {n} states")
    if j < n:
        return 1 if i == j - 1 else 2
    return 3 if i == n - 1 else 4


@dataclass(frozen=True)
class DagSpace(SequenceSpace):
    """Meta-structure DAG over states H0..HN.

    Every ordered pair i < j is an edge choosing a relation, ``I`` (identity) or ``O``
    (nothing). Edges into the final state may only use relations delivering messages to
    the target type. Edges are ordered consecutive first (H0-H1, ..., H(N-1)-HN), then
    skips by destination then source.
    """

    n_states: int
    target: str
    relations: tuple[str, ...]
    target_relations: tuple[str, ...]
    edges: tuple[tuple[int, int], ...]
    candidates: tuple[tuple[str, ...], ...]
    kind: str = "diffmg"

    @property
    def groups(self):
        return (self.candidates,)

    def edge_name(self, k: int) -> str:
        i, j = self.edges[k]
        return f"H{i}-H{j}"

    def candidates_for(self, name: str) -> tuple[str, ...]:
        for k in range(len(self.edges)):
            if self.edge_name(k) == name:
                return self.candidates[k]
        raise KeyError(name)

    def template(self, anonymize: bool = False) -> str:
        return "[" + ", ".join(self.edge_name(k) for k in range(len(self.edges))) + "]"

    def describe(self, anonymize: bool = False, operations: bool = True) -> str:
        alias = {r: (f"edge_{i + 1}" if anonymize else r) for i, r in enumerate(self.relations)}
        alias.update({IDENTITY: IDENTITY, EMPTY: EMPTY})
        names = [self.edge_name(k) for k in range(len(self.edges))]
        consec = [n for n, (i, j) in zip(names, self.edges) if i == j - 1]
        skips = [n for n, (i, j) in zip(names, self.edges) if i != j - 1]
        by_set: dict[tuple[str, ...], list[str]] = {}
        for n, c in zip(names, self.candidates):
            by_set.setdefault(c, []).append(n)
        parts = [f"For a given meta-structure {{{', '.join(consec)}}} {{{', '.join(skips)}}}, "]
        clauses = []
        for cands, edges in by_set.items():
            if not operations:
                choice = f"a number from 0 to {len(cands) - 1}"
            else:
                choice = "[" + ", ".join(alias[c] for c in cands) + "]"
            clauses.append(f"{', '.join(edges)} should be selected from {choice}")
        parts.append("; ".join(clauses))
        if not anonymize:
            parts.append(f". Edges into H{self.n_states} only use relations that reach the target {self.target}.")
        parts.append(f" I is the identity and O removes the edge. Write an architecture as {self.template()}.")
        return "".join(parts)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "n_states": self.n_states, "target": self.target,
                "relations": list(self.relations), "target_relations": list(self.target_relations),
                "edges": [list(e) for e in self.edges], "candidates": [list(c) for c in self.candidates]}

    @classmethod
    def from_dict(cls, d: dict) -> DagSpace:
        return cls(d["n_states"], d["target"], tuple(d["relations"]), tuple(d["target_relations"]),
                   tuple(tuple(e) for e in d["edges"]), tuple(tuple(c) for c in d["candidates"]), d["kind"])


def build_dag_space(g: HeteroGraph, n_states: int, target: str | None = None) -> DagSpace:
    if n_states < 2:
        raise SpaceError("a meta-structure needs at least 2 intermediate states")
    target = target or g.target_type
    rels = tuple(g.relation_names)
    bar = tuple(r.name for r in g.relations if r.target == target)
    if not bar:
        raise SpaceError(f"no relation delivers messages to target type {target!r}")
    edges = [(j - 1, j) for j in range(1, n_states + 1)]
    edges += [(i, j) for j in range(2, n_states + 1) for i in range(j - 1)]
    rules = {
        1: rels + (IDENTITY,),
        2: rels + (IDENTITY, EMPTY),
        3: bar + (IDENTITY,),
        4: bar + (IDENTITY, EMPTY),
    }
    cands = tuple(rules[dag_case(j, i, n_states)] for i, j in edges)
    return DagSpace(n_states, target, rels, bar, tuple(edges), cands)


def space_from_dict(d: dict) -> SequenceSpace:
    if d["kind"] == "diffmg":
        return DagSpace.from_dict(d)
    return SearchSpace.from_dict(d)
