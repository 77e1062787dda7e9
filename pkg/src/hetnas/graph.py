"""Heterogeneous graph data model, TSV dataset I/O and a planted-signal generator."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DatasetError, ParseError, SchemaError, SplitError

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
SELF_PREFIX = "self_"


def self_relation(node_type: str) -> str:
    return SELF_PREFIX + node_type


@dataclass(frozen=True)
class Relation:
    name: str
    source: str
    target: str
    reverse: str | None = None
    derived: bool = False


@dataclass(frozen=True)
class MetaPath:
    steps: tuple[str, ...]

    def __init__(self, steps: Iterable[str]):
        object.__setattr__(self, "steps", tuple(steps))

    def __len__(self) -> int:
        return len(self.steps)

    def types(self, g: HeteroGraph) -> list[str]:
        """Node types visited by the path, start to end. Raises on a broken chain."""
        if not self.steps:
            return []
        src, tgt = g.endpoint_types(self.steps[0])
        visited = [src, tgt]
        for step in self.steps[1:]:
            s, t = g.endpoint_types(step)
            if s != visited[-1]:
                raise SchemaError(
                    f"meta-path step {step!r} starts at {s!r} but previous step ends at {visited[-1]!r}"
                )
            visited.append(t)
        return visited

    def __str__(self) -> str:
        return " -> ".join(self.steps)


@dataclass(frozen=True, eq=False)
class LinkSample:
    relation: str
    positives: np.ndarray
    negatives: np.ndarray

    def __post_init__(self):
        pos = {tuple(p) for p in np.asarray(self.positives).tolist()}
        neg = {tuple(p) for p in np.asarray(self.negatives).tolist()}
        if pos & neg:
            raise DatasetError(f"link sample for {self.relation} has pairs that are both positive and negative")

    def pairs(self) -> tuple[np.ndarray, np.ndarray]:
        pairs = np.concatenate([self.positives, self.negatives]).reshape(-1, 2)
        y = np.concatenate([np.ones(len(self.positives)), np.zeros(len(self.negatives))])
        return pairs.astype(np.int64), y


def _frozen(a, dtype=None) -> np.ndarray:
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class HeteroGraph:
    """Typed nodes and directed typed edges.

    Node identity is (type, local index). ``edges[name]`` is a pair of index arrays
    (source indices, target indices). For node classification ``labels`` covers every
    node of ``target_type`` with -1 marking unlabeled nodes, and ``split`` maps
    train/val/test to local target indices. For link prediction ``links`` maps each
    split to a :class:`LinkSample` over ``target_relation``.
    """

    name: str
    node_types: tuple[str, ...]
    num_nodes: Mapping[str, int]
    relations: tuple[Relation, ...]
    edges: Mapping[str, tuple[np.ndarray, np.ndarray]]
    features: Mapping[str, np.ndarray]
    task: str = "node"
    target_type: str | None = None
    target_relation: str | None = None
    labels: np.ndarray | None = None
    num_classes: int = 0
    split: Mapping[str, np.ndarray] = field(default_factory=dict)
    links: Mapping[str, LinkSample] = field(default_factory=dict)
    node_ids: Mapping[str, tuple[str, ...]] | None = None
    meta: Mapping = field(default_factory=dict)
    cache: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        edges = {k: (_frozen(s, np.int64), _frozen(t, np.int64)) for k, (s, t) in self.edges.items()}
        for r in self.relations:
            edges.setdefault(r.name, (_frozen([], np.int64), _frozen([], np.int64)))
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "features", {k: _frozen(v, np.float64) for k, v in self.features.items()})
        object.__setattr__(self, "split", {k: _frozen(v, np.int64) for k, v in self.split.items()})
        if self.labels is not None:
            object.__setattr__(self, "labels", _frozen(self.labels, np.int64))
        if self.node_ids is None:
            ids = {t: tuple(f"{t}{i}" for i in range(self.num_nodes[t])) for t in self.node_types}
            object.__setattr__(self, "node_ids", ids)
        self.validate()

    # -- lookups -----------------------------------------------------------------

    @property
    def relation_names(self) -> list[str]:
        return [r.name for r in self.relations]

    def relation(self, name: str) -> Relation:
        for r in self.relations:
            if r.name == name:
                return r
        raise SchemaError(f"unknown relation {name!r}")

    def endpoint_types(self, name: str) -> tuple[str, str]:
        if name.startswith(SELF_PREFIX) and name[len(SELF_PREFIX):] in self.node_types:
            t = name[len(SELF_PREFIX):]
            return t, t
        r = self.relation(name)
        return r.source, r.target

    def num_edges(self, name: str) -> int:
        return len(self.edges[name][0])

    def adjacency_set(self, name: str) -> set[tuple[int, int]]:
        s, t = self.edges[name]
        return set(zip(s.tolist(), t.tolist()))

    def input_dim(self, node_type: str) -> int:
        return self.features[node_type].shape[1]

    @property
    def task_types(self) -> tuple[str, ...]:
        """Node types whose final representation feeds the task head."""
        if self.task == "node":
            return (self.target_type,)
        r = self.relation(self.target_relation)
        return (r.source,) if r.source == r.target else (r.source, r.target)

    # -- invariants --------------------------------------------------------------

    def validate(self) -> None:
        if len(set(self.node_types)) != len(self.node_types):
            raise SchemaError("duplicate node type")
        if len(self.node_types) + len(self.relations) <= 2:
            raise SchemaError(
                f"not heterogeneous: {len(self.node_types)} node types + {len(self.relations)} relations <= 2"
            )
        names = [r.name for r in self.relations]
        if len(set(names)) != len(names):
            raise SchemaError("duplicate relation name")
        for r in self.relations:
            for t in (r.source, r.target):
                if t not in self.node_types:
                    raise SchemaError(f"relation {r.name!r} references unknown node type {t!r}")
            if r.name.startswith(SELF_PREFIX):
                raise SchemaError(f"relation name {r.name!r} collides with the self-relation prefix")
            s, t = self.edges.get(r.name, (np.zeros(0, np.int64), np.zeros(0, np.int64)))
            if len(s) != len(t):
                raise SchemaError(f"relation {r.name!r}: source/target arrays differ in length")
            if len(s) and (s.min() < 0 or s.max() >= self.num_nodes[r.source]):
                raise SchemaError(f"relation {r.name!r}: source index out of range for type {r.source!r}")
            if len(t) and (t.min() < 0 or t.max() >= self.num_nodes[r.target]):
                raise SchemaError(f"relation {r.name!r}: target index out of range for type {r.target!r}")
        for t in self.node_types:
            x = self.features.get(t)
            if x is None or x.ndim != 2 or x.shape[0] != self.num_nodes[t]:
                raise SchemaError(f"features for type {t!r} must be a ({self.num_nodes[t]}, d) matrix")
        if self.task == "node":
            if self.target_type not in self.node_types:
                raise SchemaError(f"target node type {self.target_type!r} is not declared")
            if self.labels is not None and len(self.labels) != self.num_nodes[self.target_type]:
                raise SchemaError("labels must cover every node of the target type")
            seen: dict[int, str] = {}
            overlap = []
            for part, ids in self.split.items():
                for i in ids.tolist():
                    if i in seen and seen[i] != part:
                        overlap.append(i)
                    seen[i] = part
            if overlap:
                ids = self.node_ids[self.target_type]
                raise SplitError(
                    "train/val/test splits overlap on: " + ", ".join(ids[i] for i in sorted(set(overlap))),
                    [ids[i] for i in sorted(set(overlap))],
                )
        elif self.task == "link":
            if self.target_relation not in names:
                raise SchemaError(f"target relation {self.target_relation!r} is not declared")
        else:
            raise SchemaError(f"unknown task {self.task!r}")

    # -- reporting ---------------------------------------------------------------

    def summary(self, include_derived: bool = False) -> str:
        """Per-relation counts laid out as ``Relations(A-B)  #A  #B  #A-B``."""
        rows = [("Relations(A-B)", "#A", "#B", "#A-B")]
        for r in self.relations:
            if r.derived and not include_derived:
                continue
            rows.append((f"{r.name}", f"{self.num_nodes[r.source]:,}", f"{self.num_nodes[r.target]:,}",
                         f"{self.num_edges(r.name):,}"))
        widths = [max(len(row[i]) for row in rows) for i in range(4)]
        lines = ["  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(row, widths)))
                 for row in rows]
        return "\n".join(lines)

    def descriptor(self) -> dict:
        """JSON-ready description used by prompt rendering and ``dataset.json``."""
        d = {
            "name": self.name,
            "task": self.task,
            "target": self.target_type if self.task == "node" else self.target_relation,
            "node_types": [{"name": t, "count": self.num_nodes[t]} for t in self.node_types],
            "relations": [
                {"name": r.name, "source": r.source, "target": r.target, "count": self.num_edges(r.name),
                 **({"derived": True} if r.derived else {})}
                for r in self.relations
            ],
        }
        if self.task == "node":
            d["num_classes"] = self.num_classes
        return d


# -- reverse relations -----------------------------------------------------------


def reverse_name(r: Relation) -> str:
    if r.name == f"{r.source}-{r.target}":
        return f"{r.target}-{r.source}"
    if r.name == r.target + r.source:
        return r.source + r.target
    if r.name == r.source + r.target:
        return r.target + r.source
    return r.name + "_rev"


def derive_reverse_relations(g: HeteroGraph) -> HeteroGraph:
    """Add a transposed relation for every relation lacking one.

    An existing relation counts as the reverse when its endpoint types are swapped and
    its edge set is exactly the transpose. New reverses are inserted right after their
    forward relation so slot order stays stable.
    """
    rels = list(g.relations)
    edges = dict(g.edges)
    paired: dict[str, str] = {r.name: r.reverse for r in rels if r.reverse}
    for a in rels:
        if a.name in paired:
            continue
        ea = g.adjacency_set(a.name)
        for b in rels:
            if b.name == a.name or b.name in paired or (b.source, b.target) != (a.target, a.source):
                continue
            if {(t, s) for s, t in g.adjacency_set(b.name)} == ea:
                paired[a.name], paired[b.name] = b.name, a.name
                break
    out: list[Relation] = []
    taken = {r.name for r in rels}
    for r in rels:
        if r.name in paired:
            out.append(replace(r, reverse=paired[r.name]))
            continue
        if r.source == r.target and {(t, s) for s, t in g.adjacency_set(r.name)} == g.adjacency_set(r.name):
            out.append(replace(r, reverse=r.name))
            continue
        name = reverse_name(r)
        while name in taken:
            name += "_rev"
        taken.add(name)
        out.append(replace(r, reverse=name))
        out.append(Relation(name, r.target, r.source, reverse=r.name, derived=True))
        s, t = g.edges[r.name]
        edges[name] = (t.copy(), s.copy())
    if out == list(g.relations):
        return g
    return replace(g, relations=tuple(out), edges=edges)


# -- TSV dataset files -----------------------------------------------------------


def _rows(path: Path):
    with open(path, encoding="utf-8", newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh, delimiter="\t", quoting=csv.QUOTE_NONE), start=1):
            if not row or (len(row) == 1 and not row[0].strip()) or row[0].startswith("#"):
                continue
            yield lineno, [c.strip() for c in row]


def _parse_features(path, lineno, text: str) -> list[float] | None:
    if not text:
        return None
    try:
        return [float(v) for v in text.split(",")]
    except ValueError:
        raise ParseError(path, lineno, f"feature vector {text!r} is not a comma-separated list of numbers") from None


def load_dataset(node_file, edge_file, label_file, split_file=None, descriptor=None) -> HeteroGraph:
    """Read a dataset from TSV files and return it with reverse relations derived.

    ``descriptor`` is an optional ``dataset.json`` path (or dict) declaring node types,
    relations (name, source, target), the task and its target. Without it, types and
    relations are inferred from the node and edge files and the task is node
    classification over the type of the labeled nodes.
    """
    node_file, edge_file, label_file = Path(node_file), Path(edge_file), Path(label_file)
    if isinstance(descriptor, (str, Path)):
        with open(descriptor, encoding="utf-8") as fh:
            descriptor = json.load(fh)
    desc = descriptor or {}
    declared_types = [t["name"] if isinstance(t, dict) else t for t in desc.get("node_types", [])]

    where: dict[str, tuple[str, int]] = {}
    ids: dict[str, list[str]] = {t: [] for t in declared_types}
    feats: dict[str, list] = {t: [] for t in declared_types}
    for lineno, row in _rows(node_file):
        if len(row) not in (2, 3):
            raise ParseError(node_file, lineno, f"expected 2 or 3 columns (id, type, features), got {len(row)}")
        nid, ntype = row[0], row[1]
        if declared_types and ntype not in declared_types:
            raise SchemaError(f"{node_file}:{lineno}: unknown node type {ntype!r}")
        if nid in where:
            raise ParseError(node_file, lineno, f"duplicate node id {nid!r}")
        ids.setdefault(ntype, [])
        feats.setdefault(ntype, [])
        where[nid] = (ntype, len(ids[ntype]))
        ids[ntype].append(nid)
        feats[ntype].append(_parse_features(node_file, lineno, row[2] if len(row) == 3 else ""))
    node_types = declared_types or list(ids)

    features = {}
    onehot = []
    for t in node_types:
        vecs = feats[t]
        if not vecs or all(v is None for v in vecs):
            features[t] = np.eye(len(vecs))
            onehot.append(t)
            continue
        if any(v is None for v in vecs):
            raise SchemaError(f"node type {t!r}: some nodes have features and some do not")
        if len({len(v) for v in vecs}) != 1:
            raise SchemaError(f"node type {t!r}: feature vectors have different lengths")
        features[t] = np.array(vecs, dtype=np.float64)

    rel_decl: dict[str, tuple[str, str]] = {}
    for r in desc.get("relations", []):
        if r.get("derived"):
            continue
        for t in (r["source"], r["target"]):
            if t not in node_types:
                raise SchemaError(f"relation {r['name']!r} references unknown node type {t!r}")
        rel_decl[r["name"]] = (r["source"], r["target"])
    declared_rels = bool(rel_decl)
    edge_lists: dict[str, tuple[list[int], list[int]]] = {k: ([], []) for k in rel_decl}
    for lineno, row in _rows(edge_file):
        if len(row) != 3:
            raise ParseError(edge_file, lineno, f"expected 3 columns (src, dst, relation), got {len(row)}")
        src, dst, rel = row
        for nid in (src, dst):
            if nid not in where:
                raise SchemaError(f"{edge_file}:{lineno}: node {nid!r} is not declared in {node_file.name}")
        (st, si), (tt, ti) = where[src], where[dst]
        if rel not in rel_decl:
            if declared_rels:
                raise SchemaError(f"{edge_file}:{lineno}: unknown relation {rel!r}")
            rel_decl[rel] = (st, tt)
            edge_lists[rel] = ([], [])
        if rel_decl[rel] != (st, tt):
            raise SchemaError(
                f"{edge_file}:{lineno}: relation {rel!r} is declared {rel_decl[rel][0]}->{rel_decl[rel][1]} "
                f"but edge joins {st}->{tt}"
            )
        edge_lists[rel][0].append(si)
        edge_lists[rel][1].append(ti)
    for rel, (s, _) in edge_lists.items():
        if not s:
            log.warning("relation %s has no edges", rel)

    relations = tuple(Relation(k, *v) for k, v in rel_decl.items())
    edges = {k: (np.array(v[0], np.int64), np.array(v[1], np.int64)) for k, v in edge_lists.items()}
    task = desc.get("task", "node")
    common = dict(
        name=desc.get("name", node_file.parent.name or "dataset"),
        node_types=tuple(node_types),
        num_nodes={t: len(ids[t]) for t in node_types},
        relations=relations,
        edges=edges,
        features=features,
        node_ids={t: tuple(ids[t]) for t in node_types},
        meta={"onehot_types": onehot},
    )
    if task == "link":
        g = _load_links(label_file, where, desc, common)
    else:
        g = _load_node_labels(label_file, split_file, where, desc, common)
    g = derive_reverse_relations(g)
    for r in g.relations:
        if not r.derived:
            log.info("%s: %d edges", r.name, g.num_edges(r.name))
    return g


def _load_node_labels(label_file, split_file, where, desc, common) -> HeteroGraph:
    target = desc.get("target")
    raw: dict[str, int] = {}
    for lineno, row in _rows(label_file):
        if len(row) != 2:
            raise ParseError(label_file, lineno, f"expected 2 columns (id, class), got {len(row)}")
        nid, cls = row
        if nid not in where:
            raise SchemaError(f"{label_file}:{lineno}: node {nid!r} is not declared")
        try:
            c = int(cls)
        except ValueError:
            raise ParseError(label_file, lineno, f"class {cls!r} is not an integer") from None
        if c < 0:
            raise ParseError(label_file, lineno, f"class {c} is negative")
        t = where[nid][0]
        if target is None:
            target = t
        if t != target:
            raise SchemaError(f"{label_file}:{lineno}: node {nid!r} has type {t!r}, target type is {target!r}")
        raw[nid] = c
    if target is None:
        raise SchemaError(f"{label_file}: no labels and no target declared")
    labels = np.full(common["num_nodes"][target], -1, dtype=np.int64)
    for nid, c in raw.items():
        labels[where[nid][1]] = c
    num_classes = int(desc.get("num_classes", labels.max() + 1 if len(raw) else 0))
    if labels.max(initial=-1) >= num_classes:
        raise SchemaError(f"label {labels.max()} exceeds num_classes={num_classes}")

    parts: dict[str, list[int]] = {k: [] for k in SPLITS}
    assigned: dict[str, tuple[str, int]] = {}
    overlap = []
    if split_file is not None:
        for lineno, row in _rows(Path(split_file)):
            if len(row) != 2:
                raise ParseError(split_file, lineno, f"expected 2 columns (id, split), got {len(row)}")
            nid, part = row
            if part not in SPLITS:
                raise ParseError(split_file, lineno, f"split {part!r} is not one of {', '.join(SPLITS)}")
            if nid not in where:
                raise SchemaError(f"{split_file}:{lineno}: node {nid!r} is not declared")
            t, i = where[nid]
            if t != target:
                raise SchemaError(f"{split_file}:{lineno}: node {nid!r} is not of the target type {target!r}")
            if nid in assigned:
                if assigned[nid][0] != part:
                    overlap.append(nid)
                continue
            if labels[i] < 0:
                raise SchemaError(f"{split_file}:{lineno}: node {nid!r} is in a split but has no label")
            assigned[nid] = (part, lineno)
            parts[part].append(i)
    if overlap:
        raise SplitError("train/val/test splits overlap on: " + ", ".join(overlap), overlap)
    return HeteroGraph(
        **common, task="node", target_type=target, labels=labels, num_classes=num_classes,
        split={k: np.array(v, np.int64) for k, v in parts.items()},
    )


def _load_links(label_file, where, desc, common) -> HeteroGraph:
    target = desc.get("target")
    rels = {r.name: r for r in common["relations"]}
    if target not in rels:
        raise SchemaError(f"link task target relation {target!r} is not declared")
    r = rels[target]
    buckets = {k: ([], []) for k in SPLITS}
    seen = {}
    for lineno, row in _rows(label_file):
        if len(row) != 4:
            raise ParseError(label_file, lineno, f"expected 4 columns (src, dst, label, split), got {len(row)}")
        src, dst, lab, part = row
        for nid in (src, dst):
            if nid not in where:
                raise SchemaError(f"{label_file}:{lineno}: node {nid!r} is not declared")
        if (where[src][0], where[dst][0]) != (r.source, r.target):
            raise SchemaError(f"{label_file}:{lineno}: pair does not match relation {target!r}")
        if part not in SPLITS:
            raise ParseError(label_file, lineno, f"split {part!r} is not one of {', '.join(SPLITS)}")
        if lab not in ("0", "1"):
            raise ParseError(label_file, lineno, f"label {lab!r} is not 0 or 1")
        key = (src, dst)
        if key in seen and seen[key] != part:
            raise SplitError(f"pair {src}-{dst} appears in both {seen[key]} and {part}", [f"{src}-{dst}"])
        seen[key] = part
        buckets[part][0 if lab == "1" else 1].append((where[src][1], where[dst][1]))
    links = {
        k: LinkSample(target, np.array(p, np.int64).reshape(-1, 2), np.array(n, np.int64).reshape(-1, 2))
        for k, (p, n) in buckets.items()
    }
    return HeteroGraph(**common, task="link", target_relation=target, links=links)


def load_dataset_dir(directory) -> HeteroGraph:
    d = Path(directory)
    desc = d / "dataset.json"
    split = d / "splits.tsv"
    return load_dataset(d / "nodes.tsv", d / "edges.tsv", d / "labels.tsv",
                        split if split.exists() else None, desc if desc.exists() else None)


def write_dataset(g: HeteroGraph, directory) -> Path:
    """Write ``g`` as ``nodes.tsv``, ``edges.tsv``, ``labels.tsv``, ``splits.tsv`` and ``dataset.json``.

    Derived reverse relations are not written; loading derives them again.
    """
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    ids = g.node_ids
    onehot = set(g.meta.get("onehot_types", ()))
    with open(d / "nodes.tsv", "w", encoding="utf-8") as fh:
        for t in g.node_types:
            x = g.features[t]
            for i, nid in enumerate(ids[t]):
                vec = "" if t in onehot else ",".join(repr(float(v)) for v in x[i])
                fh.write(f"{nid}\t{t}\t{vec}\n")
    with open(d / "edges.tsv", "w", encoding="utf-8") as fh:
        for r in g.relations:
            if r.derived:
                continue
            s, t = g.edges[r.name]
            for a, b in zip(s.tolist(), t.tolist()):
                fh.write(f"{ids[r.source][a]}\t{ids[r.target][b]}\t{r.name}\n")
    with open(d / "labels.tsv", "w", encoding="utf-8") as fh:
        if g.task == "node":
            tid = ids[g.target_type]
            for i, c in enumerate(g.labels.tolist()):
                if c >= 0:
                    fh.write(f"{tid[i]}\t{c}\n")
        else:
            r = g.relation(g.target_relation)
            for part in SPLITS:
                ls = g.links.get(part)
                if ls is None:
                    continue
                for lab, pairs in (("1", ls.positives), ("0", ls.negatives)):
                    for a, b in np.asarray(pairs).reshape(-1, 2).tolist():
                        fh.write(f"{ids[r.source][a]}\t{ids[r.target][b]}\t{lab}\t{part}\n")
    if g.task == "node":
        with open(d / "splits.tsv", "w", encoding="utf-8") as fh:
            tid = ids[g.target_type]
            for part in SPLITS:
                for i in g.split.get(part, np.zeros(0, np.int64)).tolist():
                    fh.write(f"{tid[i]}\t{part}\n")
    desc = g.descriptor()
    desc["node_types"] = [t["name"] for t in desc["node_types"]]
    desc["relations"] = [{k: r[k] for k in ("name", "source", "target")} for r in desc["relations"]
                         if not r.get("derived")]
    with open(d / "dataset.json", "w", encoding="utf-8") as fh:
        json.dump(desc, fh, indent=2)
        fh.write("\n")
    return d


# -- synthetic planted-signal graphs ---------------------------------------------


def propagate_mean(g: HeteroGraph, x: np.ndarray, relation: str) -> np.ndarray:
    """Mean of source rows over each target's in-neighbours; zero for isolated targets."""
    src_t, tgt_t = g.endpoint_types(relation)
    if relation.startswith(SELF_PREFIX) and src_t == tgt_t and relation not in g.edges:
        return x.copy()
    s, t = g.edges[relation]
    out = np.zeros((g.num_nodes[tgt_t], x.shape[1]))
    np.add.at(out, t, x[s])
    deg = np.bincount(t, minlength=g.num_nodes[tgt_t]).astype(float)
    nz = deg > 0
    out[nz] /= deg[nz, None]
    return out


def planted_scores(g: HeteroGraph, path: MetaPath, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    types = path.types(g)
    h = g.features[types[0]]
    for step in path.steps:
        h = propagate_mean(g, h, step)
    return h @ weights + bias


def _random_bipartite(rng, n_src: int, n_tgt: int, max_degree: int) -> tuple[np.ndarray, np.ndarray]:
    # every node on the larger side gets 1..max_degree partners; the smaller side is covered
    big_is_src = n_src >= n_tgt
    n_big, n_small = (n_src, n_tgt) if big_is_src else (n_tgt, n_src)
    pairs = set()
    for b in range(n_big):
        k = int(rng.integers(1, min(max_degree, n_small) + 1))
        for s in rng.choice(n_small, size=k, replace=False).tolist():
            pairs.add((b, s))
    covered = {s for _, s in pairs}
    for s in range(n_small):
        if s not in covered:
            pairs.add((int(rng.integers(n_big)), s))
    pairs = sorted(pairs)
    a = np.array([p[0] for p in pairs], np.int64)
    b = np.array([p[1] for p in pairs], np.int64)
    return (a, b) if big_is_src else (b, a)


def synth_graph(
    seed: int,
    sizes: Mapping[str, int],
    planted_path: MetaPath | Sequence[str],
    noise: float = 0.05,
    relations: Sequence[tuple[str, str]] | None = None,
    feature_dim: int = 8,
    num_classes: int = 3,
    max_degree: Mapping[str, int] | int = 2,
    split_fractions: tuple[float, float, float] = (0.4, 0.3, 0.3),
    distractor_scale: float = 1.0,
    balance_tolerance: float = 0.10,
    max_tries: int = 50,
    name: str = "synthetic",
) -> HeteroGraph:
    """Generate a node-classification graph whose labels follow a planted meta-path.

    Features of the path's start type are propagated along ``planted_path`` by
    neighbour means; a fixed random linear map plus argmax turns the result into a
    class for every node of the end (target) type. Each label is then replaced by a
    different uniformly drawn class with probability ``noise``. Instances whose noisy
    labels are more than ``balance_tolerance`` away from uniform are discarded and
    regenerated from ``seed + 1``, ``seed + 2`` and so on.

    ``relations`` lists declared (source, target) type pairs named ``"S-T"``; the default
    chains the types in ``sizes`` order. Reverse relations are derived. Features of types
    other than the start type are Gaussian noise scaled by ``distractor_scale``.
    """
    path = planted_path if isinstance(planted_path, MetaPath) else MetaPath(planted_path)
    if not path.steps:
        raise SchemaError("planted path must have at least one step")
    if not 0.0 <= noise < 1.0:
        raise ValueError("noise must be in [0, 1)")
    types = list(sizes)
    pairs = list(relations) if relations is not None else list(zip(types[:-1], types[1:]))
    for attempt in range(max_tries):
        s = seed + attempt
        g = _synth_once(s, sizes, types, pairs, path, noise, feature_dim, num_classes, max_degree,
                        split_fractions, distractor_scale, name)
        counts = np.bincount(g.labels, minlength=num_classes)
        expected = len(g.labels) / num_classes
        if np.all(np.abs(counts - expected) <= balance_tolerance * expected):
            return g
        log.debug("seed %d rejected, label counts %s", s, counts.tolist())
    raise DatasetError(f"could not generate a balanced instance in {max_tries} seeds starting at {seed}")


def _balancing_bias(scores: np.ndarray, steps: int = 300) -> np.ndarray:
    """Per-class offsets that push argmax class counts towards uniform."""
    n, c = scores.shape
    bias = np.zeros(c)
    spread = float(np.ptp(scores)) or 1.0
    best, best_err = bias.copy(), np.inf
    for k in range(steps):
        counts = np.bincount(np.argmax(scores + bias, axis=1), minlength=c)
        err = np.abs(counts - n / c).max()
        if err < best_err:
            best, best_err = bias.copy(), err
        bias = bias + spread * 0.5 / (1 + k) * (n / c - counts) / n
    return best


def _synth_once(seed, sizes, types, pairs, path, noise, feature_dim, num_classes, max_degree,
                split_fractions, distractor_scale, name) -> HeteroGraph:
    rng = np.random.default_rng(seed)
    rels, edges = [], {}
    for src, tgt in pairs:
        rname = f"{src}-{tgt}"
        deg = max_degree.get(rname, 2) if isinstance(max_degree, Mapping) else max_degree
        edges[rname] = _random_bipartite(rng, sizes[src], sizes[tgt], deg)
        rels.append(Relation(rname, src, tgt))
    features = {t: rng.normal(size=(sizes[t], feature_dim)) for t in types}
    base = HeteroGraph(
        name=name, node_types=tuple(types), num_nodes=dict(sizes), relations=tuple(rels), edges=edges,
        features=features, task="node", target_type=types[-1], labels=None, num_classes=num_classes,
    )
    base = derive_reverse_relations(base)
    visited = path.types(base)
    start, target = visited[0], visited[-1]
    features = {t: (x if t == start else x * distractor_scale) for t, x in features.items()}
    weights = rng.normal(size=(feature_dim, num_classes))
    g = replace(base, features=features, target_type=target)
    bias = _balancing_bias(planted_scores(g, path, weights, np.zeros(num_classes)))
    clean = np.argmax(planted_scores(g, path, weights, bias), axis=1)
    labels = clean.copy()
    flip = rng.random(len(labels)) < noise
    shift = rng.integers(1, num_classes, size=len(labels))
    labels[flip] = (labels[flip] + shift[flip]) % num_classes
    n = sizes[target]
    perm = rng.permutation(n)
    n_train = int(round(split_fractions[0] * n))
    n_val = int(round(split_fractions[1] * n))
    split = {"train": np.sort(perm[:n_train]), "val": np.sort(perm[n_train:n_train + n_val]),
             "test": np.sort(perm[n_train + n_val:])}
    meta = {
        "generator": "synth_graph",
        "seed": seed,
        "planted_path": list(path.steps),
        "planted_weights": weights.tolist(),
        "planted_bias": bias.tolist(),
        "noise": noise,
        "clean_labels": clean.tolist(),
    }
    return replace(g, labels=labels, split=split, meta=meta)


def link_task(g: HeteroGraph, relation: str, seed: int = 0, holdout: float = 0.5,
              ratios: tuple[int, int, int] = (3, 1, 1)) -> HeteroGraph:
    """Turn ``g`` into a link-prediction task over ``relation``.

    A ``holdout`` fraction of the relation's edges is removed from message passing and
    split into train/val/test positives by ``ratios``; each split gets as many negatives,
    drawn uniformly from non-edges with the same endpoint types.
    """
    rel = g.relation(relation)
    rng = np.random.default_rng(seed)
    s, t = g.edges[relation]
    m = len(s)
    perm = rng.permutation(m)
    n_hold = int(round(holdout * m))
    hold, keep = perm[:n_hold], np.sort(perm[n_hold:])
    all_pos = set(zip(s.tolist(), t.tolist()))
    total = sum(ratios)
    cuts = np.cumsum([int(round(n_hold * r / total)) for r in ratios[:-1]])
    parts = np.split(hold, cuts)
    n_src, n_tgt = g.num_nodes[rel.source], g.num_nodes[rel.target]
    if n_src * n_tgt - len(all_pos) < n_hold:
        raise DatasetError(f"relation {relation!r} is too dense to sample {n_hold} negatives")
    used = set()
    links = {}
    for part, idx in zip(SPLITS, parts):
        pos = np.stack([s[idx], t[idx]], axis=1) if len(idx) else np.zeros((0, 2), np.int64)
        neg = []
        while len(neg) < len(idx):
            a, b = int(rng.integers(n_src)), int(rng.integers(n_tgt))
            if (a, b) in all_pos or (a, b) in used:
                continue
            used.add((a, b))
            neg.append((a, b))
        links[part] = LinkSample(relation, pos, np.array(neg, np.int64).reshape(-1, 2))
    edges = dict(g.edges)
    edges[relation] = (s[keep], t[keep])
    if rel.reverse and rel.reverse != relation:
        edges[rel.reverse] = (t[keep], s[keep])
    return replace(g, task="link", target_relation=relation, edges=edges, links=links, labels=None,
                   split={}, num_classes=0)
