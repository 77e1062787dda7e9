"""Miniature HGNN: relation-wise messages, per-type aggregation, training and evaluation."""
from __future__ import annotations

import logging
import math
import zlib
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np
import scipy.sparse as sp

from . import autograd as ag
from .autograd import Segments, Tensor
from .errors import SpaceError
from .graph import HeteroGraph
from .metrics import metric_auc, metric_macro_f1
from .space import EMPTY, IDENTITY, ArchSeq, DagSpace, SearchSpace

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.005
    dropout: float = 0.6
    hidden_dim: int = 256
    epochs: int = 100
    patience: int = 20
    seed: int = 0
    weight_decay: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.hidden_dim < 1 or self.epochs < 1 or self.patience < 1:
            raise ValueError("hidden_dim, epochs and patience must be positive")

    @classmethod
    def desk(cls, **overrides) -> TrainConfig:
        """Desk-scale defaults: hidden size 16."""
        return cls(**{"hidden_dim": 16, **overrides})

    def to_dict(self) -> dict:
        return asdict(self)


# -- relation structure ----------------------------------------------------------------


class Adjacency:
    """Edge list of one relation sorted by target, with the derived kernels the ops need."""

    def __init__(self, src, tgt, n_src: int, n_tgt: int):
        src = np.asarray(src, dtype=np.int64)
        tgt = np.asarray(tgt, dtype=np.int64)
        order = np.argsort(tgt, kind="stable")
        self.src = src[order]
        self.tgt = tgt[order]
        self.n_src = n_src
        self.n_tgt = n_tgt
        self.seg = Segments(self.tgt, n_tgt)
        out_deg = np.bincount(self.src, minlength=n_src).astype(float)
        in_deg = np.bincount(self.tgt, minlength=n_tgt).astype(float)
        w = 1.0 / np.sqrt(out_deg[self.src] * in_deg[self.tgt]) if len(self.src) else np.zeros(0)
        self.gcn = sp.csr_matrix((w, (self.tgt, self.src)), shape=(n_tgt, n_src))
        self.gcn_t = self.gcn.T.tocsr()

    @property
    def num_edges(self) -> int:
        return len(self.src)

    def dense(self) -> np.ndarray:
        a = np.zeros((self.n_tgt, self.n_src))
        a[self.tgt, self.src] = 1.0
        return a


def adjacency(g: HeteroGraph, relation: str) -> Adjacency:
    key = ("adj", relation)
    if key not in g.cache:
        s_t, t_t = g.endpoint_types(relation)
        if relation in g.edges:
            s, t = g.edges[relation]
        else:
            s = t = np.arange(g.num_nodes[s_t])
        g.cache[key] = Adjacency(s, t, g.num_nodes[s_t], g.num_nodes[t_t])
    return g.cache[key]


# -- GNN operators -----------------------------------------------------------------------


def relation_message(op: str, x_src: Tensor, x_tgt: Tensor | None, adj: Adjacency, weight: Tensor | None,
                     att_src: Tensor | None = None, att_dst: Tensor | None = None, slot: str = "") -> Tensor:
    """Message from the source type to every target node of one relation.

    Targets without incoming edges receive zeros. ``x_tgt`` is only read by ``gat`` and
    ``edge`` and may be ``None`` otherwise.
    """
    x_src = ag.as_tensor(x_src)
    if op == "zero":
        h = weight.shape[1] if weight is not None else x_src.shape[1]
        return Tensor(np.zeros((adj.n_tgt, h)))
    rows_t = adj.n_tgt
    if op in ("gat", "edge"):
        if x_tgt is None:
            raise SpaceError(f"slot {slot or '?'}: operator {op} needs target features")
        x_tgt = ag.as_tensor(x_tgt)
        rows_t = x_tgt.shape[0]
    if x_src.shape[0] != adj.n_src or rows_t != adj.n_tgt:
        raise SpaceError(
            f"slot {slot or '?'}: feature rows ({x_src.shape[0]}, {rows_t}) do not match "
            f"relation sizes ({adj.n_src}, {adj.n_tgt})"
        )
    if weight is None or weight.shape[0] != x_src.shape[1]:
        raise SpaceError(f"slot {slot or '?'}: weight shape does not match input width {x_src.shape[1]}")
    if op == "gcn":
        return ag.spmm(adj.gcn, x_src, adj.gcn_t) @ weight
    if op == "sage":
        return ag.segment_max(ag.gather(x_src @ weight, adj.src), adj.seg)
    if op == "edge":
        return ag.segment_max(ag.gather(x_src @ weight, adj.src) - ag.gather(x_tgt @ weight, adj.tgt), adj.seg)
    if op == "gat":
        zs = x_src @ weight
        zt = x_tgt @ weight
        score = ag.leaky_relu(ag.gather(zs @ att_src, adj.src) + ag.gather(zt @ att_dst, adj.tgt))
        alpha = ag.segment_softmax(score, adj.seg)
        return ag.segment_sum(ag.gather(zs, adj.src) * ag.reshape(alpha, (-1, 1)), adj.seg)
    raise SpaceError(f"unknown GNN operator {op!r}")


# -- aggregators -------------------------------------------------------------------------


def attention_weights(messages: list[Tensor], query: Tensor) -> Tensor:
    pooled = ag.mean(ag.stack(messages), axis=1)
    return ag.softmax(ag.tanh(pooled) @ query, axis=0)


def aggregate(kind: str, messages: list[Tensor], params: dict | None = None) -> Tensor:
    """Combine per-relation messages for one target type.

    ``lstm`` reads the messages in the given order and returns the last hidden state;
    ``att`` weights messages by a softmax over relation scores from a learned query.
    """
    if not messages:
        raise ValueError("aggregate needs at least one message; pass a zero message for an empty layer")
    shape = messages[0].shape
    if any(m.shape != shape for m in messages):
        raise ValueError("messages must share one shape")
    if kind == "sum":
        out = messages[0]
        for m in messages[1:]:
            out = out + m
        return out
    if kind == "mean":
        return aggregate("sum", messages) * (1.0 / len(messages))
    if kind == "max":
        return messages[0] if len(messages) == 1 else ag.max_reduce(ag.stack(messages), axis=0)
    if kind == "att":
        beta = attention_weights(messages, params["query"])
        return ag.tsum(ag.stack(messages) * ag.reshape(beta, (-1, 1, 1)), axis=0)
    if kind == "lstm":
        wx, wh, b = params["wx"], params["wh"], params["b"]
        hd = shape[1]
        h = c = None
        for m in messages:
            z = m @ wx + b if h is None else m @ wx + h @ wh + b
            i = ag.sigmoid(z[:, :hd])
            f = ag.sigmoid(z[:, hd:2 * hd])
            o = ag.sigmoid(z[:, 2 * hd:3 * hd])
            cand = ag.tanh(z[:, 3 * hd:])
            c = i * cand if c is None else f * c + i * cand
            h = o * ag.tanh(c)
        return h
    raise ValueError(f"unknown aggregator {kind!r}")


# -- parameters ------------------------------------------------------------------------------


def _rng_for(seed: int, key: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(key.encode())])


def _glorot(seed: int, key: str, shape: tuple[int, ...]) -> Tensor:
    fan_in = shape[0]
    fan_out = shape[1] if len(shape) > 1 else 1
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return ag.parameter(_rng_for(seed, key).uniform(-limit, limit, size=shape))


def _dropout_masks(rng: np.random.Generator, g: HeteroGraph, layers: int, hidden: int, p: float):
    # same draws for every architecture so that functionally identical models train identically
    keep = 1.0 - p
    return [
        {t: (rng.random((g.num_nodes[t], hidden)) < keep) / keep for t in g.node_types}
        for _ in range(layers)
    ]


class HgnnModel:
    """Parameters and forward pass for one architecture of a slot space.

    Zero slots own no parameters. Slots whose output cannot reach the task head are
    skipped in the forward pass.
    """

    def __init__(self, space: SearchSpace, arch: ArchSeq, g: HeteroGraph, hidden_dim: int, seed: int = 0):
        space.validate(arch)
        for layer in space.slots:
            for s in layer:
                if s.is_self:
                    if s.source not in g.node_types:
                        raise SpaceError(f"architecture uses self-relation of unknown type {s.source!r}")
                elif s.relation not in g.edges:
                    raise SpaceError(f"architecture references relation {s.relation!r} absent from the graph")
        self.space = space
        self.arch = arch
        self.hidden = hidden_dim
        self.task = g.task
        self.params: dict[str, Tensor] = {}
        h = hidden_dim
        for t in g.node_types:
            self.params[f"in/{t}"] = _glorot(seed, f"in/{t}", (g.input_dim(t), h))
        for l, layer in enumerate(space.slots):
            for s, op in zip(layer, space.ops(arch, l)):
                if op == "zero":
                    continue
                key = f"L{l}/{s.relation}"
                self.params[f"{key}/W"] = _glorot(seed, f"{key}/W", (h, h))
                if op == "gat":
                    self.params[f"{key}/a_src"] = _glorot(seed, f"{key}/a_src", (h,))
                    self.params[f"{key}/a_dst"] = _glorot(seed, f"{key}/a_dst", (h,))
            aggr = space.aggregator(arch, l)
            if aggr == "att":
                self.params[f"L{l}/att"] = _glorot(seed, f"L{l}/att", (h,))
            elif aggr == "lstm":
                self.params[f"L{l}/lstm_wx"] = _glorot(seed, f"L{l}/lstm_wx", (h, 4 * h))
                self.params[f"L{l}/lstm_wh"] = _glorot(seed, f"L{l}/lstm_wh", (h, 4 * h))
                self.params[f"L{l}/lstm_b"] = ag.parameter(np.zeros(4 * h))
        if g.task == "node":
            self.params["head/W"] = _glorot(seed, "head/W", (h, g.num_classes))
            self.params["head/b"] = ag.parameter(np.zeros(g.num_classes))
        self._live = self._live_slots(g.task_types)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def _live_slots(self, task_types) -> list[list[tuple[int, str]]]:
        need = set(task_types)
        live: list[list[tuple[int, str]]] = [[] for _ in self.space.slots]
        for l in range(self.space.layers - 1, -1, -1):
            nxt = set()
            for k, (s, op) in enumerate(zip(self.space.slots[l], self.space.ops(self.arch, l))):
                if op != "zero" and s.target in need:
                    live[l].append((k, op))
                    nxt.add(s.source)
                    if op in ("gat", "edge"):
                        nxt.add(s.target)
            need = nxt
        return live

    def forward(self, g: HeteroGraph, masks=None) -> dict[str, Tensor]:
        """Final representation of every type needed by the task head.

        ``masks`` holds per-layer, per-type dropout multipliers (train mode); ``None``
        means evaluation mode.
        """
        p = self.params
        first = {self.space.slots[0][k].source for k, _ in self._live[0]}
        first |= {self.space.slots[0][k].target for k, op in self._live[0] if op in ("gat", "edge")}
        x = {t: Tensor(g.features[t]) @ p[f"in/{t}"] for t in g.node_types if t in first}
        zeros = lambda t: Tensor(np.zeros((g.num_nodes[t], self.hidden)))
        for l, layer in enumerate(self.space.slots):
            for k, op in self._live[l]:
                # a type with no live inbound message in the previous layer carries zeros
                x.setdefault(layer[k].source, zeros(layer[k].source))
                if op in ("gat", "edge"):
                    x.setdefault(layer[k].target, zeros(layer[k].target))
            if masks is not None:
                x = {t: v * masks[l][t] for t, v in x.items()}
            by_type: dict[str, list[Tensor]] = {}
            for k, op in self._live[l]:
                s = layer[k]
                key = f"L{l}/{s.relation}"
                msg = relation_message(
                    op, x[s.source], x.get(s.target),
                    adjacency(g, s.relation), p[f"{key}/W"], p.get(f"{key}/a_src"), p.get(f"{key}/a_dst"),
                    slot=f"layer {l + 1} {s.relation}",
                )
                by_type.setdefault(s.target, []).append(msg)
            aggr = self.space.aggregator(self.arch, l)
            params = {"query": p.get(f"L{l}/att"), "wx": p.get(f"L{l}/lstm_wx"),
                      "wh": p.get(f"L{l}/lstm_wh"), "b": p.get(f"L{l}/lstm_b")}
            nxt = {t: aggregate(aggr, msgs, params) for t, msgs in by_type.items()}
            if l < self.space.layers - 1:
                nxt = {t: ag.elu(v) for t, v in nxt.items()}
            x = nxt
        return {t: x[t] if t in x else zeros(t) for t in g.task_types}

    def logits(self, g: HeteroGraph, masks=None) -> Tensor:
        reps = self.forward(g, masks)
        return reps[g.target_type] @ self.params["head/W"] + self.params["head/b"]


def link_scores(reps: dict[str, Tensor], g: HeteroGraph, pairs: np.ndarray) -> Tensor:
    r = g.relation(g.target_relation)
    hu = ag.gather(reps[r.source], pairs[:, 0])
    hv = ag.gather(reps[r.target], pairs[:, 1])
    return ag.tsum(hu * hv, axis=1)


# -- training ------------------------------------------------------------------------------


@dataclass
class FitResult:
    val: float
    test: float
    best_epoch: int
    epochs_run: int
    failed: bool = False


def _fit(params: list[Tensor], outputs: Callable, g: HeteroGraph, cfg: TrainConfig, mask_fn: Callable) -> FitResult:
    """Full-batch training with early stopping on the validation metric.

    ``outputs(masks)`` returns class logits (node task) or the representation dict (link task).
    """
    opt = ag.Adam(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng([cfg.seed, 0x5EED])
    if g.task == "node":
        y = g.labels
        train, val, test = (g.split[k] for k in ("train", "val", "test"))
    else:
        tr_pairs, tr_y = g.links["train"].pairs()
        va_pairs, va_y = g.links["val"].pairs()
        te_pairs, te_y = g.links["test"].pairs()
    best = FitResult(-1.0, 0.0, -1, 0)
    wait = 0
    for epoch in range(cfg.epochs):
        masks = mask_fn(rng)
        out = outputs(masks)
        if g.task == "node":
            loss = ag.cross_entropy(out[train], y[train])
        else:
            loss = ag.bce_with_logits(link_scores(out, g, tr_pairs), tr_y)
        if not np.isfinite(loss.data):
            log.warning("non-finite loss at epoch %d; trial marked failed", epoch)
            return FitResult(0.0, 0.0, epoch, epoch + 1, failed=True)
        opt.zero_grad()
        loss.backward()
        opt.step()
        with ag.no_grad():
            out = outputs(None)
        if g.task == "node":
            if not np.all(np.isfinite(out.data)):
                return FitResult(0.0, 0.0, epoch, epoch + 1, failed=True)
            pred = np.argmax(out.data, axis=1)
            v = metric_macro_f1(pred[val], y[val], g.num_classes)
            te = metric_macro_f1(pred[test], y[test], g.num_classes) if len(test) else 0.0
        else:
            sv = link_scores(out, g, va_pairs).data
            st = link_scores(out, g, te_pairs).data
            if not (np.all(np.isfinite(sv)) and np.all(np.isfinite(st))):
                return FitResult(0.0, 0.0, epoch, epoch + 1, failed=True)
            v = metric_auc(sv, va_y)
            te = metric_auc(st, te_y)
        if v > best.val:
            best = FitResult(v, te, epoch, epoch + 1)
            wait = 0
        else:
            wait += 1
            if wait >= cfg.patience:
                break
    best.epochs_run = epoch + 1
    return best


def fit_arch(arch: ArchSeq, g: HeteroGraph, cfg: TrainConfig, space: SearchSpace) -> FitResult:
    model = HgnnModel(space, arch, g, cfg.hidden_dim, cfg.seed)

    def outputs(masks):
        return model.logits(g, masks) if g.task == "node" else model.forward(g, masks)

    return _fit(model.parameters(), outputs, g, cfg,
                lambda rng: _dropout_masks(rng, g, space.layers, cfg.hidden_dim, cfg.dropout))


def train_eval(arch: ArchSeq, g: HeteroGraph, cfg: TrainConfig, space: SearchSpace | DagSpace) -> tuple[float, float]:
    """Train ``arch`` on the train split and return (validation, test) metric at the best epoch.

    The metric is macro-F1 for node classification and AUC for link prediction. A
    diverging run scores (0.0, 0.0).
    """
    if isinstance(space, DagSpace):
        return eval_dag_arch(arch, g, cfg, space)
    r = fit_arch(arch, g, cfg, space)
    return r.val, r.test


# -- meta-structure DAG evaluation --------------------------------------------------------


def _global_layout(g: HeteroGraph) -> dict[str, int]:
    offsets, k = {}, 0
    for t in g.node_types:
        offsets[t] = k
        k += g.num_nodes[t]
    return offsets


def global_adjacency(g: HeteroGraph, relation: str) -> tuple[sp.csr_matrix, sp.csr_matrix]:
    """gcn-normalised relation matrix embedded in the all-nodes index space, and its transpose."""
    key = ("global", relation)
    if key not in g.cache:
        off = _global_layout(g)
        n = sum(g.num_nodes.values())
        s_t, t_t = g.endpoint_types(relation)
        a = adjacency(g, relation).gcn.tocoo()
        m = sp.csr_matrix((a.data, (a.row + off[t_t], a.col + off[s_t])), shape=(n, n))
        g.cache[key] = (m, m.T.tocsr())
    return g.cache[key]


class DagModel:
    def __init__(self, space: DagSpace, arch: ArchSeq, g: HeteroGraph, hidden_dim: int, seed: int = 0):
        space.validate(arch)
        for r in space.relations:
            if r not in g.edges:
                raise SpaceError(f"meta-structure uses relation {r!r} absent from the graph")
        self.space = space
        self.arch = arch
        self.hidden = hidden_dim
        self.choice = dict(zip(space.edges, arch.tokens))
        n = space.n_states
        for j in range(1, n + 1):
            if all(self.choice[(i, j)] == EMPTY for i in range(j)):
                raise SpaceError(f"state H{j} receives no input; the target is unreachable")
        self.params = {f"in/{t}": _glorot(seed, f"in/{t}", (g.input_dim(t), hidden_dim)) for t in g.node_types}
        if g.task == "node":
            self.params["head/W"] = _glorot(seed, "head/W", (hidden_dim, g.num_classes))
            self.params["head/b"] = ag.parameter(np.zeros(g.num_classes))
        self.offsets = _global_layout(g)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def states(self, g: HeteroGraph, mask=None) -> list[Tensor]:
        h0 = ag.concat([Tensor(g.features[t]) @ self.params[f"in/{t}"] for t in g.node_types])
        if mask is not None:
            h0 = h0 * mask
        hs = [h0]
        for j in range(1, self.space.n_states + 1):
            parts = []
            for i in range(j):
                c = self.choice[(i, j)]
                if c == EMPTY:
                    continue
                if c == IDENTITY:
                    parts.append(hs[i])
                else:
                    m, mt = global_adjacency(g, c)
                    parts.append(ag.spmm(m, hs[i], mt))
            hs.append(aggregate("mean", parts))
        return hs

    def forward(self, g: HeteroGraph, mask=None) -> dict[str, Tensor]:
        hn = self.states(g, mask)[-1]
        out = {}
        for t in g.task_types:
            o = self.offsets[t]
            out[t] = ag.elu(hn[o:o + g.num_nodes[t]])
        return out

    def logits(self, g: HeteroGraph, mask=None) -> Tensor:
        return self.forward(g, mask)[g.target_type] @ self.params["head/W"] + self.params["head/b"]


def eval_dag_arch(arch: ArchSeq, g: HeteroGraph, cfg: TrainConfig, space: DagSpace) -> tuple[float, float]:
    """Train a meta-structure model and return (validation, test) metric at the best epoch."""
    r = fit_dag(arch, g, cfg, space)
    return r.val, r.test


def fit_dag(arch: ArchSeq, g: HeteroGraph, cfg: TrainConfig, space: DagSpace) -> FitResult:
    model = DagModel(space, arch, g, cfg.hidden_dim, cfg.seed)
    n = sum(g.num_nodes.values())
    keep = 1.0 - cfg.dropout

    def outputs(mask):
        return model.logits(g, mask) if g.task == "node" else model.forward(g, mask)

    return _fit(model.parameters(), outputs, g, cfg,
                lambda rng: (rng.random((n, cfg.hidden_dim)) < keep) / keep)
