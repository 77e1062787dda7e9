"""Staged search loop, evaluation cache, oracle tables, persistence and resume."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.stats import rankdata

from .controller import (
    EXPLORATION,
    OPTIMIZATION,
    STAGES,
    Controller,
    Stage,
    TrialRecord,
    reject_note,
    top_records,
)
from .engine import TrainConfig, train_eval
from .errors import ArchDecodeError, ConfigError, ControllerAbort, IntegrityError, SpaceError
from .graph import HeteroGraph
from .space import DEFAULT_CAP, ArchSeq, SequenceSpace, enumerate_space, space_from_dict

log = logging.getLogger(__name__)

RUN_FORMAT = "hetnas-run"
RUN_VERSION = 1


# -- evaluators ------------------------------------------------------------------------------


def _safe_train(args) -> tuple[float, float]:
    arch, g, cfg, space = args
    try:
        val, test = train_eval(arch, g, cfg, space)
    except Exception as e:  # isolated per trial; the controller sees an honest zero
        log.warning("training %s failed: %s", arch, e)
        return 0.0, 0.0
    return float(np.clip(val, 0.0, 1.0)), float(np.clip(test, 0.0, 1.0))


class Evaluator:
    """Maps architectures to (validation, test) metrics."""

    calls = 0

    def evaluate(self, archs: Sequence[ArchSeq]) -> list[tuple[float, float]]:
        raise NotImplementedError

    def retrain(self, arch: ArchSeq, repeats: int) -> list[tuple[float, float]]:
        raise NotImplementedError


class TrainingEvaluator(Evaluator):
    """Trains each architecture with the engine; ``workers > 1`` uses a process pool."""

    def __init__(self, g: HeteroGraph, cfg: TrainConfig, space: SequenceSpace, workers: int = 1):
        self.g = g
        self.cfg = cfg
        self.space = space
        self.workers = max(1, workers)
        self.calls = 0

    def _run(self, jobs: list) -> list[tuple[float, float]]:
        self.calls += len(jobs)
        if self.workers == 1 or len(jobs) < 2:
            return [_safe_train(j) for j in jobs]
        with ProcessPoolExecutor(max_workers=self.workers) as pool:
            return list(pool.map(_safe_train, jobs, chunksize=max(1, len(jobs) // (4 * self.workers))))

    def evaluate(self, archs):
        return self._run([(a, self.g, self.cfg, self.space) for a in archs])

    def retrain(self, arch, repeats):
        cfgs = [TrainConfig(**{**self.cfg.to_dict(), "seed": self.cfg.seed + r}) for r in range(repeats)]
        return self._run([(arch, self.g, c, self.space) for c in cfgs])


class OracleEvaluator(Evaluator):
    """Tabular lookup: search metric is the oracle mean, retraining returns the stored repeats."""

    def __init__(self, table: OracleTable):
        self.table = table
        self.calls = 0

    def evaluate(self, archs):
        self.calls += len(archs)
        out = []
        for a in archs:
            i = self.table.index(a)
            out.append((float(self.table.mean_val[i]), float(self.table.mean_test[i])))
        return out

    def retrain(self, arch, repeats):
        i = self.table.index(arch)
        vals, tests = self.table.vals[i], self.table.tests[i]
        n = min(repeats, len(vals))
        return [(float(vals[r]), float(tests[r])) for r in range(n)]


# -- batch evaluation ------------------------------------------------------------------------


def evaluate_batch(archs: Sequence[ArchSeq], evaluator: Evaluator, cache: dict[ArchSeq, tuple[float, float]],
                   stage: str = "exploration", iteration: int = 0, source: str = "controller"
                   ) -> tuple[list[TrialRecord], int]:
    """Evaluate a proposal batch through ``cache``.

    Returns one record per distinct architecture, in proposal order, and the number of
    cache hits. Only misses reach the evaluator; the cache is updated in place.
    """
    distinct: list[ArchSeq] = []
    for a in archs:
        if a not in distinct:
            distinct.append(a)
    misses = [a for a in distinct if a not in cache]
    for a, m in zip(misses, evaluator.evaluate(misses)):
        cache[a] = m
    recs = [TrialRecord(a, cache[a][0], cache[a][1], stage, iteration, source) for a in distinct]
    return recs, len(distinct) - len(misses)


def top_k(history: Sequence[TrialRecord], k: int) -> list[TrialRecord]:
    """Best ``k`` records by validation metric; earlier discovery wins ties."""
    if k < 1:
        raise ValueError("k must be at least 1")
    return top_records(history, k)


# -- oracle tables -------------------------------------------------------------------------------


INACTIVE = ("zero", "O")


def active_count(a: ArchSeq) -> int:
    """Tokens that pass messages (everything except ``zero`` slots and ``O`` edges)."""
    return sum(t not in INACTIVE for t in a.tokens)


def ordinal_ranks(mean_val: np.ndarray, active: np.ndarray | None = None) -> np.ndarray:
    """Ranks 1..n by descending metric, always a permutation.

    Equal means go to the architecture with fewer active tokens first (dead slots make
    many architectures compute the same function), then to enumeration order.
    """
    n = len(mean_val)
    active = np.zeros(n) if active is None else np.asarray(active)
    order = np.lexsort((np.arange(n), active, -np.asarray(mean_val)))
    ranks = np.empty(len(mean_val), dtype=np.int64)
    ranks[order] = np.arange(1, len(mean_val) + 1)
    return ranks


@dataclass
class OracleTable:
    space: SequenceSpace
    archs: list[ArchSeq]
    vals: np.ndarray
    tests: np.ndarray
    _index: dict = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self):
        self.vals = np.asarray(self.vals, dtype=float)
        self.tests = np.asarray(self.tests, dtype=float)
        self._index = {a: i for i, a in enumerate(self.archs)}
        if len(self._index) != len(self.archs):
            raise SpaceError("oracle table lists an architecture twice")
        self.mean_val = self.vals.mean(axis=1)
        self.mean_test = self.tests.mean(axis=1)
        self.rank = ordinal_ranks(self.mean_val, [active_count(a) for a in self.archs])
        self.dense_rank = rankdata(-self.mean_val, method="dense").astype(np.int64)

    @property
    def repeats(self) -> int:
        return self.vals.shape[1]

    def __len__(self) -> int:
        return len(self.archs)

    def index(self, a: ArchSeq) -> int:
        try:
            return self._index[a]
        except KeyError:
            raise SpaceError(f"architecture {a} is not in the oracle's space") from None

    def best(self) -> ArchSeq:
        return self.archs[int(np.argmin(self.rank))]

    def by_rank(self, r: int) -> ArchSeq:
        return self.archs[int(np.flatnonzero(self.rank == r)[0])]

    def top(self, k: int) -> list[ArchSeq]:
        return [self.archs[i] for i in np.argsort(self.rank)[:k]]

    def complete(self) -> bool:
        return len(self.archs) == self.space.size()


def rank_of(oracle: OracleTable, a: ArchSeq) -> int:
    """Oracle rank of ``a`` (1 = best mean validation metric)."""
    return int(oracle.rank[oracle.index(a)])


def _header(repeats: int) -> list[str]:
    return (["arch"] + [f"val_{r}" for r in range(repeats)] + [f"test_{r}" for r in range(repeats)]
            + ["mean_val", "mean_test", "rank"])


def _fmt(x: float) -> str:
    return repr(float(x))


def _row(a: ArchSeq, vals, tests, mean_val=None, mean_test=None, rank=None) -> list[str]:
    return ([str(a)] + [_fmt(v) for v in vals] + [_fmt(t) for t in tests]
            + [_fmt(np.mean(vals)) if mean_val is None else _fmt(mean_val),
               _fmt(np.mean(tests)) if mean_test is None else _fmt(mean_test),
               "" if rank is None else str(rank)])


def write_oracle_csv(table: OracleTable, path) -> Path:
    path = Path(path)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(_header(table.repeats))
    for i, a in enumerate(table.archs):
        w.writerow(_row(a, table.vals[i], table.tests[i], table.mean_val[i], table.mean_test[i], table.rank[i]))
    _atomic_write(path, buf.getvalue().encode())
    return path


def _read_rows(path: Path, space: SequenceSpace) -> tuple[int, list[tuple[ArchSeq, list[float], list[float]]]]:
    text = path.read_text(encoding="utf-8")
    if text and not text.endswith("\n"):
        text = text[: text.rfind("\n") + 1]  # drop a torn final line
    lines = list(csv.reader(io.StringIO(text)))
    if not lines:
        return 0, []
    head = lines[0]
    repeats = sum(1 for h in head if h.startswith("val_"))
    if head != _header(repeats):
        raise IntegrityError(path, 0, "unexpected oracle CSV header")
    rows = []
    for row in lines[1:]:
        if len(row) != len(head):
            break
        rows.append((space.decode(row[0]), [float(x) for x in row[1:1 + repeats]],
                     [float(x) for x in row[1 + repeats:1 + 2 * repeats]]))
    return repeats, rows


def read_oracle_csv(path, space: SequenceSpace) -> OracleTable:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"oracle file {path} does not exist")
    try:
        repeats, rows = _read_rows(path, space)
    except ArchDecodeError as e:
        raise SpaceError(f"oracle {path} does not match the space: {e}") from None
    if not rows:
        raise IntegrityError(path, 0, "oracle CSV has no rows")
    return OracleTable(space, [r[0] for r in rows], [r[1] for r in rows], [r[2] for r in rows])


def build_oracle(space: SequenceSpace, g: HeteroGraph, cfg: TrainConfig, repeats: int = 5,
                 path=None, resume: bool = False, workers: int = 1, cap: int = DEFAULT_CAP,
                 chunk: int = 64, stop_after: int | None = None,
                 progress: Callable[[int, int], None] | None = None) -> OracleTable:
    """Train every architecture of ``space`` ``repeats`` times (seeds ``cfg.seed + r``).

    With ``path`` rows are appended as they finish so that ``resume=True`` continues an
    interrupted build; the final file is rewritten with ranks. ``stop_after`` ends the
    build early after that many architectures (used to exercise resume).
    """
    if repeats < 1:
        raise ValueError("repeats must be at least 1")
    archs = list(enumerate_space(space, cap))
    n = len(archs)
    done: list[tuple[ArchSeq, list[float], list[float]]] = []
    p = Path(path) if path else None
    if p and resume and p.exists():
        rep0, done = _read_rows(p, space)
        if done and rep0 != repeats:
            raise ConfigError(f"partial oracle has {rep0} repeats, requested {repeats}")
        if [r[0] for r in done] != archs[: len(done)]:
            raise IntegrityError(p, 0, "partial oracle does not follow enumeration order")
        log.info("resuming oracle at %d of %d", len(done), n)
    if p:
        p.parent.mkdir(parents=True, exist_ok=True)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(_header(repeats))
        for a, v, t in done:
            w.writerow(_row(a, v, t))
        _atomic_write(p, buf.getvalue().encode())
    cfgs = [TrainConfig(**{**cfg.to_dict(), "seed": cfg.seed + r}) for r in range(repeats)]
    start = len(done)
    end = n if stop_after is None else min(n, start + stop_after)
    pool = ProcessPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for lo in range(start, end, chunk):
            hi = min(end, lo + chunk)
            jobs = [(archs[i], g, c, space) for i in range(lo, hi) for c in cfgs]
            res = list(pool.map(_safe_train, jobs, chunksize=max(1, len(jobs) // (4 * workers)))) if pool \
                else [_safe_train(j) for j in jobs]
            rows = []
            for k, i in enumerate(range(lo, hi)):
                rr = res[k * repeats:(k + 1) * repeats]
                done.append((archs[i], [m[0] for m in rr], [m[1] for m in rr]))
                rows.append(_row(*done[-1]))
            if p:
                buf = io.StringIO()
                csv.writer(buf, lineterminator="\n").writerows(rows)
                with p.open("a", encoding="utf-8") as f:
                    f.write(buf.getvalue())
                    f.flush()
            if progress:
                progress(hi, n)
    finally:
        if pool:
            pool.shutdown()
    table = OracleTable(space, [d[0] for d in done], [d[1] for d in done], [d[2] for d in done])
    if p and table.complete():
        write_oracle_csv(table, p)
    return table


# -- search runs ---------------------------------------------------------------------------------


@dataclass
class SearchRun:
    space: SequenceSpace
    controller: str = "random"
    t_e: int = 10
    t_o: int = 5
    batch: int = 20
    top_k: int = 10
    retrain_count: int = 10
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0
    history: list[TrialRecord] = field(default_factory=list)
    stage: str = "exploration"
    iteration: int = 0
    status: str = "running"
    controller_state: dict = field(default_factory=dict)
    retrain_table: dict[str, list[list[float]]] = field(default_factory=dict)
    best: str | None = None
    proposals: int = 0
    cache_hits: int = 0
    rejects: int = 0
    series: list[dict] = field(default_factory=list)
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("t_e", "t_o"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.batch < 1 or self.top_k < 1 or self.retrain_count < 1:
            raise ConfigError("batch, top_k and retrain_count must be positive")

    def to_dict(self) -> dict:
        return {
            "space": self.space.to_dict(), "controller": self.controller, "t_e": self.t_e, "t_o": self.t_o,
            "batch": self.batch, "top_k": self.top_k, "retrain_count": self.retrain_count,
            "train": self.train.to_dict(), "seed": self.seed,
            "history": [r.to_dict() for r in self.history],
            "stage": self.stage, "iteration": self.iteration, "status": self.status,
            "controller_state": self.controller_state, "retrain_table": self.retrain_table,
            "best": self.best, "proposals": self.proposals, "cache_hits": self.cache_hits,
            "rejects": self.rejects, "series": self.series, "info": self.info,
        }

    @classmethod
    def from_dict(cls, d: dict) -> SearchRun:
        space = space_from_dict(d["space"])
        return cls(
            space=space, controller=d["controller"], t_e=d["t_e"], t_o=d["t_o"], batch=d["batch"],
            top_k=d["top_k"], retrain_count=d["retrain_count"], train=TrainConfig(**d["train"]), seed=d["seed"],
            history=[TrialRecord.from_dict(r, space) for r in d["history"]], stage=d["stage"],
            iteration=d["iteration"], status=d["status"], controller_state=d.get("controller_state", {}),
            retrain_table=d.get("retrain_table", {}), best=d.get("best"), proposals=d.get("proposals", 0),
            cache_hits=d.get("cache_hits", 0), rejects=d.get("rejects", 0), series=d.get("series", []),
            info=d.get("info", {}),
        )

    def best_arch(self) -> ArchSeq | None:
        return self.space.decode(self.best) if self.best else None


@dataclass
class SearchResult:
    best: ArchSeq | None
    history: list[TrialRecord]
    run: SearchRun


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(data)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


def persist(run: SearchRun, path) -> Path:
    """Write ``run`` atomically as JSON with a sha256 of its canonical payload."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = run.to_dict()
    digest = hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()
    doc = {"format": RUN_FORMAT, "version": RUN_VERSION, "sha256": digest, "run": payload}
    _atomic_write(path, (json.dumps(doc, indent=1, sort_keys=True) + "\n").encode())
    return path


def load_run(path) -> SearchRun:
    """Read a file written by :func:`persist`; damage raises :class:`IntegrityError` with a byte offset."""
    path = Path(path)
    raw = path.read_bytes()
    try:
        doc = json.loads(raw.decode("utf-8"))
    except UnicodeDecodeError as e:
        raise IntegrityError(path, e.start, "not valid UTF-8") from None
    except json.JSONDecodeError as e:
        raise IntegrityError(path, len(e.doc[: e.pos].encode("utf-8")), e.msg) from None
    if not isinstance(doc, dict) or doc.get("format") != RUN_FORMAT or "run" not in doc:
        raise IntegrityError(path, 0, "not a search-run file")
    digest = hashlib.sha256(json.dumps(doc["run"], sort_keys=True).encode()).hexdigest()
    if digest != doc.get("sha256"):
        raise IntegrityError(path, raw.find(b'"run"'), "checksum mismatch")
    return SearchRun.from_dict(doc["run"])


def resume(path) -> SearchRun:
    return load_run(path)


def _series_point(run: SearchRun, iteration_records: list[TrialRecord], label: str) -> dict:
    vals = np.array([r.val for r in iteration_records]) if iteration_records else np.zeros(0)
    best = max((r.val for r in run.history), default=0.0)
    return {"step": len(run.series) + 1, "stage": label, "best": best,
            "mean": float(vals.mean()) if vals.size else 0.0,
            "variance": float(vals.var()) if vals.size else 0.0, "evaluated": len(run.history)}


def run_search(run: SearchRun, controller: Controller, evaluator: Evaluator, path=None,
               on_iteration: Callable[[SearchRun], None] | None = None) -> SearchResult:
    """Exploration rounds, top-k distillation, optimization rounds, then retrain-and-select.

    After every round the run is persisted to ``path`` (when given) and
    ``on_iteration`` is called. A controller abort stops the run with status
    ``aborted``; the history gathered so far is kept.
    """
    if run.status == "done":
        return SearchResult(run.best_arch(), run.history, run)
    controller.load_state(run.controller_state)
    cache: dict[ArchSeq, tuple[float, float]] = {r.arch: (r.val, r.test) for r in run.history}

    def save():
        run.controller_state = controller.state()
        if path:
            persist(run, path)

    plan = [("exploration", run.t_e), ("optimization", run.t_o)]
    try:
        for name, count in plan:
            if run.stage not in ("exploration", "optimization"):
                break
            if name == "exploration" and run.stage == "optimization":
                continue
            stage = STAGES[name]
            while run.iteration < count:
                it = run.iteration
                # optimization rounds see the top-k distilled history (compose_feedback does the cut)
                proposals = controller.propose(stage, run.history, run.batch, it)
                run.proposals += len(proposals)
                run.rejects += len(controller.last_rejects)
                recs, hits = evaluate_batch(proposals, evaluator, cache, name, it)
                known = {r.arch for r in run.history}
                fresh = [r for r in recs if r.arch not in known]
                repeats = [r for r in recs if r.arch in known]
                run.cache_hits += hits
                run.history.extend(fresh)
                notes = [reject_note(f, e) for f, e in controller.last_rejects]
                notes += [f"already evaluated: {run.space.encode(r.arch)} is {r.val:.4f}" for r in repeats]
                controller.notify(notes)
                run.series.append(_series_point(run, recs, name))
                run.iteration += 1
                save()
                if on_iteration:
                    on_iteration(run)
            if name == "exploration":
                run.stage, run.iteration = "optimization", 0
                save()
        run.stage = "selection"
        save()
    except ControllerAbort as e:
        log.error("controller aborted: %s", e)
        run.status = "aborted"
        run.info["abort"] = str(e)
        _select(run, evaluator)
        save()
        return SearchResult(run.best_arch(), run.history, run)
    _select(run, evaluator)
    run.stage = "done"
    run.status = "done"
    save()
    return SearchResult(run.best_arch(), run.history, run)


def _select(run: SearchRun, evaluator: Evaluator) -> None:
    finalists = top_k(run.history, run.top_k) if run.history else []
    best, best_mean = None, -1.0
    for r in finalists:
        key = str(r.arch)
        if key not in run.retrain_table:
            run.retrain_table[key] = [list(m) for m in evaluator.retrain(r.arch, run.retrain_count)]
        m = float(np.mean([v for v, _ in run.retrain_table[key]]))
        if m > best_mean:
            best, best_mean = key, m
    run.best = best
