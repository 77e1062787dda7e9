from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest

from hetnas.controller import (
    EXPLORATION,
    OPTIMIZATION,
    SECTION_TITLES,
    Ablation,
    RandomController,
    ScriptedController,
    TrialRecord,
    build_bundle,
    compose_feedback,
    parse_response,
    reject_note,
    render_prompt,
)
from hetnas.errors import ControllerAbort, EmptyProposal
from hetnas.presets import PLANTED_PATH, benchmark_space, planted_graph
from hetnas.space import baseline_archs, build_dag_space, enumerate_space

CORPUS = Path(__file__).parent / "fixtures" / "malformed_responses.json"


@pytest.fixture(scope="module")
def graph():
    return planted_graph()


@pytest.fixture(scope="module")
def space(graph):
    return benchmark_space(graph)


def records(space, vals, stage="exploration"):
    archs = list(enumerate_space(space))
    return [TrialRecord(archs[i * 7], v, v, stage, 0) for i, v in enumerate(vals)]


def section_positions(text):
    return [text.find(f"{SECTION_TITLES[k]}:\n") for k in ("task", "dataset", "space", "strategy", "feedback")]


# -- prompts ---------------------------------------------------------------------------


def test_prompt_sections_in_order(space, graph):
    text = render_prompt(space, graph.descriptor(), EXPLORATION, records(space, [0.5, 0.6]), 20)
    pos = section_positions(text)
    assert all(p >= 0 for p in pos) and pos == sorted(pos)
    for k in SECTION_TITLES.values():
        assert text.count(f"{k}:\n") == 1
    assert "The data set is planted" in text
    assert "for each edge, you need to select one from [gcn, zero]" in text
    assert "Output exactly 20 different architectures" in text


def test_empty_history_exploration(space, graph):
    text = render_prompt(space, graph.descriptor(), EXPLORATION, [], 20)
    assert "performance of" not in text
    assert "Explore as many different architectures in the search space as possible" in text


def test_feedback_quotes_each_record(space, graph):
    hist = records(space, [0.1, 0.2, 0.3])
    text = render_prompt(space, graph.descriptor(), EXPLORATION, hist, 5)
    assert text.count("The performance of ") == 3
    for r in hist:
        assert f"The performance of {r.text} is {r.val:.4f}" in text


def test_optimization_prompt_strategy(space, graph):
    text = render_prompt(space, graph.descriptor(), OPTIMIZATION, records(space, [0.1] * 12), 5)
    assert "Analyze how to get a better architecture based on existing results" in text
    assert "Explore as many" not in text
    assert text.count("The performance of ") == 10


def test_render_is_pure(space, graph):
    hist = records(space, [0.4, 0.7])
    a = render_prompt(space, graph.descriptor(), OPTIMIZATION, hist, 3)
    b = render_prompt(space, graph.descriptor(), OPTIMIZATION, list(hist), 3)
    assert a == b


def test_ablation_no_dataset_anonymises(space, graph):
    text = render_prompt(space, graph.descriptor(), EXPLORATION, [], 5, Ablation(no_dataset=True))
    assert SECTION_TITLES["dataset"] + ":" not in text
    assert "edge_1" in text and "A-P" not in text and "self_P" not in text


def test_ablation_no_strategy_and_no_operation(space, graph):
    text = render_prompt(space, graph.descriptor(), EXPLORATION, records(space, [0.5]), 5,
                         Ablation(no_operation=True, no_strategy=True))
    assert SECTION_TITLES["strategy"] + ":" not in text
    assert "gcn" not in text
    assert "The performance of [0, 0, 0, 0, 0, 0, 0, 0 | 0, 0, 0, 0] is" in text  # all-gcn arch, gcn is choice 0


def test_ablation_flags_roundtrip():
    ab = Ablation.from_flags(["no-dataset", "no-strategy"])
    assert ab.flags() == ["no-dataset", "no-strategy"]
    with pytest.raises(ValueError):
        Ablation.from_flags(["no-everything"])


def test_bundle_rejects_zero_batch(space, graph):
    with pytest.raises(ValueError):
        build_bundle(space, graph.descriptor(), EXPLORATION, [], 0)


def test_dag_prompt_lists_candidates(graph):
    d = build_dag_space(graph, 2)
    text = render_prompt(d, graph.descriptor(), EXPLORATION, [], 4)
    assert "H1-H2 should be selected from [A-P, S-P, I]" in text
    assert "meta-structure" in text


# -- feedback ------------------------------------------------------------------------------


def test_feedback_optimization_top_k(space):
    vals = list(np.linspace(0.1, 0.9, 30))
    lines = compose_feedback(records(space, vals), OPTIMIZATION, top_k=10).splitlines()
    assert len(lines) == 10
    got = [float(l.rsplit(" ", 1)[1]) for l in lines]
    assert got == sorted(got, reverse=True)


def test_feedback_tie_keeps_discovery_order(space):
    hist = records(space, [0.91, 0.93, 0.93, 0.90])
    lines = compose_feedback(hist, "optimization", top_k=2).splitlines()
    assert lines == [f"The performance of {hist[1].text} is 0.9300", f"The performance of {hist[2].text} is 0.9300"]


def test_feedback_exploration_discovery_order(space):
    hist = records(space, list(np.random.default_rng(0).random(30)))
    lines = compose_feedback(hist, EXPLORATION, top_k=10).splitlines()
    assert lines == [f"The performance of {r.text} is {r.val:.4f}" for r in hist]


def test_feedback_rejects_bad_k(space):
    with pytest.raises(ValueError):
        compose_feedback([], EXPLORATION, top_k=0)


def test_trial_record_bounds(space):
    a = next(enumerate_space(space))
    with pytest.raises(ValueError):
        TrialRecord(a, 1.2, 0.5, "exploration", 0)
    r = TrialRecord(a, 0.5, 0.4, "exploration", 2, "random")
    assert TrialRecord.from_dict(r.to_dict(), space) == r


# -- parsing -----------------------------------------------------------------------------


def test_parse_twenty_valid(space):
    archs = list(enumerate_space(space))[100:120]
    valid, rejects = parse_response("\n".join(map(str, archs)), space, 20)
    assert valid == archs and rejects == []


def test_parse_accepts_own_format(space):
    for a in list(enumerate_space(space))[::97]:
        assert parse_response(f"Answer: {space.encode(a)}", space, 1)[0] == [a]


def load_corpus():
    return json.loads(CORPUS.read_text())["cases"]


def check_case(case, space):
    """Apply one corpus case; return the list of mismatches (empty when it behaves as documented)."""
    problems = []
    try:
        valid, rejects = parse_response(case["text"], space, case["batch"])
    except EmptyProposal as e:
        valid, rejects = [], e.rejects
        if case["valid"]:
            problems.append("unexpected EmptyProposal")
    if len(valid) != case["valid"]:
        problems.append(f"valid {len(valid)} != {case['valid']}")
    kinds = [err.kind for _, err in rejects]
    if kinds != [r["kind"] for r in case["rejects"]]:
        problems.append(f"reject kinds {kinds} != {[r['kind'] for r in case['rejects']]}")
        return problems
    for (frag, err), want in zip(rejects, case["rejects"]):
        for key in ("expected", "got", "position", "token"):
            if key in want and getattr(err, key, None) != want[key]:
                problems.append(f"{key} {getattr(err, key, None)!r} != {want[key]!r}")
        if not reject_note(frag, err).startswith(f"invalid: {frag} ({err.kind}: "):
            problems.append("bad reject note")
    return problems


def test_corpus_size_and_categories():
    cases = load_corpus()
    assert len(cases) >= 20
    kinds = {r["kind"] for c in cases for r in c["rejects"]}
    assert {"length", "token", "duplicate", "format", "excess"} <= kinds
    assert any(c["valid"] == 0 and not c["rejects"] for c in cases)  # prose only


@pytest.mark.parametrize("case", load_corpus(), ids=lambda c: c["name"])
def test_corpus_case(case, space):
    assert check_case(case, space) == []


def test_length_and_token_errors_are_reconstructible(space):
    with pytest.raises(EmptyProposal) as e:
        parse_response("[gcn, sum] [zero, zero, gcn, zero, zero, zero, zero, sum | zero, gcm, zero, sum]", space, 5)
    (_, length), (_, token) = e.value.rejects
    assert (length.expected, length.got) == (12, 2)
    assert (token.position, token.token) == (9, "gcm")


# -- random and scripted controllers ---------------------------------------------------------


def test_random_without_replacement(space):
    rc = RandomController(space, seed=3)
    out = rc.propose(EXPLORATION, [], 100, 0)
    assert len(out) == len(set(out)) == 100


def test_random_never_repeats_history(space):
    rc = RandomController(space, seed=1)
    hist = [TrialRecord(a, 0.5, 0.5, "exploration", 0) for a in rc.propose(EXPLORATION, [], 300, 0)]
    out = rc.propose(EXPLORATION, hist, 100, 1)
    assert not set(out) & {r.arch for r in hist}


def test_random_exhaustion(space, caplog):
    archs = list(enumerate_space(space))
    rng = np.random.default_rng(0)
    keep = set(rng.choice(1024, 4, replace=False).tolist())
    hist = [TrialRecord(a, 0.5, 0.5, "exploration", 0) for i, a in enumerate(archs) if i not in keep]
    rc = RandomController(space, seed=0)
    out = rc.propose(EXPLORATION, hist, 20, 0)
    assert sorted(space.index_of(a) for a in out) == sorted(keep)
    assert rc.exhausted
    assert "exhausted" in caplog.text


def test_random_is_reproducible(space):
    a = RandomController(space, 5).propose(OPTIMIZATION, [], 20, 4)
    b = RandomController(space, 5).propose(OPTIMIZATION, [], 20, 4)
    assert a == b


def test_scripted_replays_and_aborts(space):
    _, mp = baseline_archs(space, PLANTED_PATH)
    sc = ScriptedController(space, [[str(mp)], f"I suggest {mp} this time."])
    assert sc.propose(EXPLORATION, [], 20, 0) == [mp]
    assert sc.propose(EXPLORATION, [], 20, 1) == [mp]
    with pytest.raises(ControllerAbort):
        sc.propose(EXPLORATION, [], 20, 2)
    sc.load_state({"cursor": 1, "notes": []})
    assert sc.propose(EXPLORATION, [], 20, 1) == [mp]


def test_scripted_from_file(tmp_path, space):
    _, mp = baseline_archs(space, PLANTED_PATH)
    p = tmp_path / "fx.json"
    p.write_text(json.dumps({"rounds": [[str(mp)]]}))
    assert ScriptedController.from_file(p, space).propose(EXPLORATION, [], 3, 0) == [mp]
