"""Proposal strategies: prompt-driven language model, uniform random, and scripted replay."""
from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    ArchDecodeError,
    ConfigError,
    ContextOverflow,
    ControllerAbort,
    DuplicateError,
    EmptyProposal,
    ExcessError,
)
from .gateway import GatewayConfig, complete, transcript_responses
from .space import ArchSeq, DagSpace, SearchSpace, SequenceSpace

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Stage:
    name: str
    temperature: float

    def __post_init__(self):
        if self.name not in ("exploration", "optimization"):
            raise ValueError(f"unknown stage {self.name!r}")


EXPLORATION = Stage("exploration", 1.0)
OPTIMIZATION = Stage("optimization", 0.0)
STAGES = {"exploration": EXPLORATION, "optimization": OPTIMIZATION}


@dataclass(frozen=True)
class TrialRecord:
    arch: ArchSeq
    val: float
    test: float
    stage: str
    iteration: int
    source: str = "controller"

    def __post_init__(self):
        for m in (self.val, self.test):
            if not 0.0 <= m <= 1.0:
                raise ValueError(f"metric {m} outside [0, 1]")

    @property
    def text(self) -> str:
        return str(self.arch)

    def to_dict(self) -> dict:
        return {"arch": self.text, "val": self.val, "test": self.test, "stage": self.stage,
                "iteration": self.iteration, "source": self.source}

    @classmethod
    def from_dict(cls, d: dict, space: SequenceSpace) -> TrialRecord:
        return cls(space.decode(d["arch"]), float(d["val"]), float(d["test"]), d["stage"],
                   int(d["iteration"]), d.get("source", "controller"))


@dataclass(frozen=True)
class Ablation:
    """Prompt variants: drop dataset info, operation names, or the search strategy."""

    no_dataset: bool = False
    no_operation: bool = False
    no_strategy: bool = False

    @classmethod
    def from_flags(cls, flags: Sequence[str]) -> Ablation:
        known = {"no-dataset": "no_dataset", "no-operation": "no_operation", "no-strategy": "no_strategy"}
        kw = {}
        for f in flags:
            if f not in known:
                raise ValueError(f"unknown ablation {f!r}; choose from {sorted(known)}")
            kw[known[f]] = True
        return cls(**kw)

    def flags(self) -> list[str]:
        return [n for n, on in (("no-dataset", self.no_dataset), ("no-operation", self.no_operation),
                                ("no-strategy", self.no_strategy)) if on]


SECTION_TITLES = {
    "task": "Task description",
    "dataset": "Heterogeneous graph",
    "space": "Search space",
    "strategy": "Search strategy",
    "feedback": "Feedback",
}

TASK_TEXT = ("Our task is heterogeneous graph neural architecture search, searching for a HGNN architecture "
             "that can achieve the best performance on a downstream task.")
DAG_TASK_TEXT = "Our task is to find a meta-structure of heterogeneous graphs that maximizes accuracy on downstream tasks."
EXPLORATION_TEXT = ("Exploration Strategy: Explore as many different architectures in the search space as possible, "
                    "and do not repeat architectures that have already been evaluated.")
OPTIMIZATION_TEXT = ("Optimization Strategy: Analyze how to get a better architecture based on existing results, "
                     "then output new architectures.")


@dataclass(frozen=True)
class PromptBundle:
    task: str
    dataset: str
    space: str
    strategy: str
    feedback: str
    ablation: Ablation = field(default_factory=Ablation)
    instruction: str = ""

    def sections(self) -> list[tuple[str, str]]:
        out = [("task", self.task)]
        if not self.ablation.no_dataset:
            out.append(("dataset", self.dataset))
        out.append(("space", self.space))
        if not self.ablation.no_strategy:
            out.append(("strategy", self.strategy))
        out.append(("feedback", self.feedback))
        return out

    def render(self) -> str:
        parts = [f"{SECTION_TITLES[k]}:\n{v}" for k, v in self.sections()]
        if self.instruction:
            parts.append(self.instruction)
        return "\n\n".join(parts)


def describe_dataset(desc: dict) -> str:
    nodes = ", ".join(f"{n['name']} ({n['count']:,})" for n in desc["node_types"])
    edges = ", ".join(f"{r['name']} ({r['count']:,})" for r in desc["relations"])
    if desc["task"] == "node":
        task, what = "node classification", "node"
    else:
        task, what = "link prediction", "link"
    return (f"The data set is {desc['name']}, node types and numbers: {nodes}; edge types and numbers: {edges}. "
            f"The downstream task is {task} and the target {what} is {desc['target']}.")


def _format_arch(space: SequenceSpace, a: ArchSeq, numeric: bool) -> str:
    return space.encode(a, numeric=numeric)


def compose_feedback(history: Sequence[TrialRecord], stage: Stage | str, top_k: int = 10,
                     space: SequenceSpace | None = None, numeric: bool = False) -> str:
    """Feedback lines "The performance of [arch] is 0.xxxx".

    Exploration lists every record in discovery order; optimization lists the current
    ``top_k`` by validation metric, best first, earlier discovery winning ties.
    """
    if top_k < 1:
        raise ValueError("top_k must be at least 1")
    name = stage.name if isinstance(stage, Stage) else stage
    recs = list(history) if name == "exploration" else top_records(history, top_k)
    fmt = (lambda a: _format_arch(space, a, numeric)) if space is not None else str
    return "\n".join(f"The performance of {fmt(r.arch)} is {r.val:.4f}" for r in recs)


def top_records(history: Sequence[TrialRecord], k: int) -> list[TrialRecord]:
    order = sorted(range(len(history)), key=lambda i: (-history[i].val, i))
    return [history[i] for i in order[:k]]


def render_prompt(
    space: SequenceSpace,
    dataset_descriptor: dict,
    stage: Stage,
    history: Sequence[TrialRecord],
    batch: int,
    ablation: Ablation | None = None,
    top_k: int = 10,
    notes: Sequence[str] = (),
) -> str:
    """Full prompt text for one proposal round. Pure: equal inputs give equal text.

    ``notes`` are extra feedback lines (invalid or repeated proposals from the previous
    round) appended after the performance lines.
    """
    return build_bundle(space, dataset_descriptor, stage, history, batch, ablation, top_k, notes).render()


def build_bundle(space, dataset_descriptor, stage, history, batch, ablation=None, top_k=10, notes=()) -> PromptBundle:
    if batch < 1:
        raise ValueError("batch must be at least 1")
    ab = ablation or Ablation()
    numeric = ab.no_operation
    is_dag = isinstance(space, DagSpace)
    lines = compose_feedback(history, stage, top_k, space, numeric)
    extra = "\n".join(notes)
    feedback = "\n".join(x for x in (lines, extra) if x) or "No architectures have been evaluated yet."
    template = space.template(ab.no_dataset)
    fmt = (space.encode(space.arch_at(0), numeric=True) if numeric else template)
    instruction = (
        f"Output exactly {batch} different {'meta-structures' if is_dag else 'architectures'}, one per line, "
        f"each written as a bracketed sequence in the format {fmt}"
        + (" with a number for each element" if numeric else "") + ". Do not repeat evaluated ones."
    )
    return PromptBundle(
        task=DAG_TASK_TEXT if is_dag else TASK_TEXT,
        dataset=describe_dataset(dataset_descriptor),
        space=space.describe(anonymize=ab.no_dataset, operations=not numeric),
        strategy=EXPLORATION_TEXT if stage.name == "exploration" else OPTIMIZATION_TEXT,
        feedback=feedback,
        ablation=ab,
        instruction=instruction,
    )


_CANDIDATE = re.compile(r"\[[^\[\]\n]*\]")


def parse_response(text: str, space: SequenceSpace, batch: int, numeric: bool = False
                   ) -> tuple[list[ArchSeq], list[tuple[str, ArchDecodeError]]]:
    """Pull every bracketed candidate out of free text and decode it against ``space``.

    Returns (valid, rejects). Rejects carry the decode error (kinds ``format``,
    ``length``, ``token``, ``duplicate``, ``excess``). Raises :class:`EmptyProposal`
    when nothing valid remains.
    """
    valid: list[ArchSeq] = []
    seen: dict[ArchSeq, int] = {}
    rejects: list[tuple[str, ArchDecodeError]] = []
    for m in _CANDIDATE.finditer(text or ""):
        frag = m.group(0)
        try:
            a = space.decode(frag, numeric=numeric)
        except ArchDecodeError as e:
            rejects.append((frag, e))
            continue
        if a in seen:
            rejects.append((frag, DuplicateError(frag, seen[a])))
            continue
        if len(valid) >= batch:
            rejects.append((frag, ExcessError(batch, frag)))
            continue
        seen[a] = len(valid)
        valid.append(a)
    if not valid:
        raise EmptyProposal(rejects)
    return valid, rejects


def reject_note(fragment: str, err: ArchDecodeError) -> str:
    return f"invalid: {fragment} ({err.kind}: {err})"


# -- controllers -------------------------------------------------------------------------


class Controller:
    """Proposal strategy. Stateful controllers expose their cursor via ``state``."""

    kind = "base"

    def __init__(self, space: SequenceSpace):
        self.space = space
        self.notes: list[str] = []
        self.last_rejects: list[tuple[str, ArchDecodeError]] = []

    def propose(self, stage: Stage, history: Sequence[TrialRecord], batch: int, iteration: int) -> list[ArchSeq]:
        raise NotImplementedError

    def notify(self, lines: Sequence[str]) -> None:
        """Queue feedback notes (e.g. repeated proposals) for the next round."""
        self.notes.extend(lines)

    def state(self) -> dict:
        return {"notes": list(self.notes)}

    def load_state(self, state: dict) -> None:
        self.notes = list(state.get("notes", []))


class RandomController(Controller):
    """Uniform sampling without replacement against the history.

    Draws for round (stage, iteration) come from a generator seeded by
    ``[seed, stage, iteration]``, so a resumed run reproduces the same proposals.
    """

    kind = "random"

    def __init__(self, space: SequenceSpace, seed: int = 0):
        super().__init__(space)
        self.seed = seed
        self.exhausted = False

    def propose(self, stage, history, batch, iteration):
        rng = np.random.default_rng([self.seed, 0 if stage.name == "exploration" else 1, iteration])
        taken = {r.arch for r in history}
        size = self.space.size()
        remaining = size - len(taken)
        if remaining <= batch:
            left = [a for a in (self.space.arch_at(i) for i in range(size)) if a not in taken]
            out = [left[i] for i in rng.permutation(len(left))]
            if len(out) < batch:
                self.exhausted = True
                log.warning("search space exhausted: %d of %d requested proposals available", len(out), batch)
            return out
        out: list[ArchSeq] = []
        picked: set[ArchSeq] = set()
        while len(out) < batch:
            a = self.space.random_arch(rng)
            if a in taken or a in picked:
                continue
            picked.add(a)
            out.append(a)
        return out


class ScriptedController(Controller):
    """Replays a fixture: one entry per round, each a list of architecture texts or a raw response."""

    kind = "scripted"

    def __init__(self, space: SequenceSpace, rounds: Sequence[Sequence[str] | str], numeric: bool = False):
        super().__init__(space)
        self.rounds = [r if isinstance(r, str) else list(r) for r in rounds]
        self.cursor = 0
        self.numeric = numeric

    @classmethod
    def from_file(cls, path, space: SequenceSpace) -> ScriptedController:
        """Fixture JSON: a list of rounds, or ``{"rounds": [...]}``; a ``.jsonl`` transcript replays its responses."""
        p = Path(path)
        try:
            if p.suffix == ".jsonl":
                return cls(space, transcript_responses(p))
            data = json.loads(p.read_text(encoding="utf-8"))
            rounds = data["rounds"] if isinstance(data, dict) else data
        except (OSError, ValueError, KeyError) as e:
            raise ConfigError(f"cannot read fixture {p}: {e}") from None
        return cls(space, rounds)

    def propose(self, stage, history, batch, iteration):
        if self.cursor >= len(self.rounds):
            raise ControllerAbort(f"fixture exhausted after {self.cursor} rounds")
        item = self.rounds[self.cursor]
        self.cursor += 1
        if isinstance(item, str):
            valid, self.last_rejects = parse_response(item, self.space, batch, self.numeric)
            return valid
        return [self.space.decode(t, numeric=self.numeric) for t in item][:batch]

    def state(self):
        return {**super().state(), "cursor": self.cursor}

    def load_state(self, state):
        super().load_state(state)
        self.cursor = int(state.get("cursor", 0))


class LLMController(Controller):
    """Renders the staged prompt, queries the chat endpoint and parses the reply.

    On :class:`EmptyProposal` the round is retried up to ``retries`` times with the
    rejected fragments explained in the feedback. On :class:`ContextOverflow` the
    feedback is compacted: in exploration to the latest ``3 * top_k`` records plus the
    ``top_k`` best, in optimization to the ``top_k`` best, halving ``top_k`` if the
    overflow repeats.
    """

    kind = "llm"

    def __init__(self, space: SequenceSpace, descriptor: dict, gateway: GatewayConfig,
                 ablation: Ablation | None = None, top_k: int = 10, retries: int = 3, sleep=None):
        super().__init__(space)
        self.descriptor = descriptor
        self.gateway = gateway
        self.ablation = ablation or Ablation()
        self.top_k = top_k
        self.retries = retries
        self.compact = False
        self.k = top_k
        self.overflows = 0
        self._sleep = sleep

    def view(self, stage: Stage, history: Sequence[TrialRecord]) -> list[TrialRecord]:
        """The history slice shown to the model after any compaction."""
        if not self.compact:
            return list(history)
        if stage.name == "optimization":
            return list(history)
        best = set(id(r) for r in top_records(history, self.k))
        recent = set(id(r) for r in history[-3 * self.k:])
        return [r for r in history if id(r) in best or id(r) in recent]

    def propose(self, stage, history, batch, iteration):
        notes = list(self.notes)
        self.notes.clear()
        attempts = 0
        while True:
            prompt = render_prompt(self.space, self.descriptor, stage, self.view(stage, history), batch,
                                   self.ablation, self.k if self.compact else self.top_k, notes)
            kw = {"sleep": self._sleep} if self._sleep else {}
            try:
                text = complete(self.gateway, None, [("user", prompt)], temperature=stage.temperature,
                                meta={"stage": stage.name, "iteration": iteration}, **kw)
            except ContextOverflow:
                self.overflows += 1
                if self.compact:
                    if self.k == 1:
                        raise ControllerAbort("context overflow persists with top-1 feedback") from None
                    self.k = max(1, self.k // 2)
                self.compact = True
                log.warning("context overflow; compacting feedback to top-%d", self.k)
                continue
            try:
                valid, self.last_rejects = parse_response(text, self.space, batch, self.ablation.no_operation)
                return valid
            except EmptyProposal as e:
                attempts += 1
                self.last_rejects = e.rejects
                if attempts > self.retries:
                    raise ControllerAbort(f"no valid proposal after {attempts} attempts") from e
                notes = notes + [reject_note(f, err) for f, err in e.rejects] + [
                    f"Your previous answer contained no valid architecture. Write each one in the format "
                    f"{self.space.template(self.ablation.no_dataset)}."
                ]

    def state(self):
        return {**super().state(), "compact": self.compact, "k": self.k, "overflows": self.overflows}

    def load_state(self, state):
        super().load_state(state)
        self.compact = bool(state.get("compact", False))
        self.k = int(state.get("k", self.top_k))
        self.overflows = int(state.get("overflows", 0))


def propose(controller: Controller, stage: Stage, history: Sequence[TrialRecord], batch: int,
            iteration: int = 0) -> list[ArchSeq]:
    return controller.propose(stage, history, batch, iteration)
