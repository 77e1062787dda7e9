from __future__ import annotations

import json
import logging

import numpy as np
import pytest

from hetnas.errors import DatasetError, ParseError, SchemaError, SplitError
from hetnas.graph import (
    HeteroGraph,
    LinkSample,
    MetaPath,
    Relation,
    derive_reverse_relations,
    link_task,
    load_dataset,
    load_dataset_dir,
    planted_scores,
    propagate_mean,
    reverse_name,
    synth_graph,
    write_dataset,
)


def write(tmp_path, name, lines):
    p = tmp_path / name
    p.write_text("\n".join(lines) + "\n")
    return p


@pytest.fixture
def toy_files(tmp_path):
    nodes = write(tmp_path, "nodes.tsv", ["# id type features", "a0\tA\t1,0", "a1\tA\t0,1",
                                           "p0\tP\t1,1", "p1\tP\t0,0", "p2\tP\t1,0", "s0\tS"])
    edges = write(tmp_path, "edges.tsv", ["a0\tp0\tA-P", "a1\tp1\tA-P", "a1\tp2\tA-P", "p0\ts0\tP-S"])
    labels = write(tmp_path, "labels.tsv", ["p0\t0", "p1\t1", "p2\t1"])
    splits = write(tmp_path, "splits.tsv", ["p0\ttrain", "p1\tval", "p2\ttest"])
    return nodes, edges, labels, splits


def test_load_derives_reverses_and_counts(toy_files):
    g = load_dataset(*toy_files)
    assert g.relation_names == ["A-P", "P-A", "P-S", "S-P"]
    assert g.num_edges("A-P") == 3 and g.num_edges("P-A") == 3
    assert g.relation("P-A").derived
    assert g.adjacency_set("P-A") == {(t, s) for s, t in g.adjacency_set("A-P")}
    assert g.target_type == "P" and g.num_classes == 2
    assert g.features["S"].shape == (1, 1)  # featureless type gets one-hot identity
    assert g.split["train"].tolist() == [0]


def test_summary_layout(toy_files):
    g = load_dataset(*toy_files)
    lines = g.summary().splitlines()
    assert lines[0].split() == ["Relations(A-B)", "#A", "#B", "#A-B"]
    assert lines[1].split() == ["A-P", "2", "3", "3"]
    assert len(lines) == 3  # derived reverses hidden by default


def test_overlapping_split_names_ids(tmp_path, toy_files):
    nodes, edges, labels, _ = toy_files
    splits = write(tmp_path, "bad.tsv", ["p0\ttrain", "p1\tval", "p1\ttest"])
    with pytest.raises(SplitError) as e:
        load_dataset(nodes, edges, labels, splits)
    assert e.value.ids == ["p1"]
    assert "p1" in str(e.value)


def test_unknown_edge_endpoint(tmp_path, toy_files):
    nodes, _, labels, splits = toy_files
    edges = write(tmp_path, "e2.tsv", ["a0\tzz\tA-P"])
    with pytest.raises(SchemaError, match="zz"):
        load_dataset(nodes, edges, labels, splits)


def test_bad_feature_is_parse_error_with_line(tmp_path, toy_files):
    _, edges, labels, splits = toy_files
    nodes = write(tmp_path, "n2.tsv", ["a0\tA\t1,x"])
    with pytest.raises(ParseError) as e:
        load_dataset(nodes, edges, labels, splits)
    assert e.value.line == 1


def test_declared_empty_relation_warns(tmp_path, toy_files, caplog):
    nodes, edges, labels, splits = toy_files
    desc = {"node_types": ["A", "P", "S"], "relations": [
        {"name": "A-P", "source": "A", "target": "P"}, {"name": "P-S", "source": "P", "target": "S"},
        {"name": "A-S", "source": "A", "target": "S"}]}
    with caplog.at_level(logging.WARNING):
        g = load_dataset(nodes, edges, labels, splits, desc)
    assert g.num_edges("A-S") == 0
    assert any("A-S" in r.message for r in caplog.records)


def test_homogeneous_graph_rejected():
    with pytest.raises(SchemaError):
        HeteroGraph("h", ("A",), {"A": 2}, (Relation("A-A", "A", "A"),), {"A-A": ([0], [1])},
                    {"A": np.eye(2)}, labels=[0, 1], target_type="A", num_classes=2)


def test_reverse_naming_rules():
    assert reverse_name(Relation("A-P", "A", "P")) == "P-A"
    assert reverse_name(Relation("PA", "A", "P")) == "AP"
    assert reverse_name(Relation("writes", "A", "P")) == "writes_rev"


def test_derive_reverse_idempotent(toy_files):
    g = load_dataset(*toy_files)
    assert derive_reverse_relations(g) is g


def test_metapath_chain_check(toy_files):
    g = load_dataset(*toy_files)
    assert MetaPath(["P-A", "A-P"]).types(g) == ["P", "A", "P"]
    with pytest.raises(SchemaError):
        MetaPath(["A-P", "A-P"]).types(g)


def test_write_load_roundtrip(tmp_path):
    g = synth_graph(3, {"A": 10, "P": 30, "S": 5}, ["P-S", "S-P"], noise=0.0)
    write_dataset(g, tmp_path / "d")
    h = load_dataset_dir(tmp_path / "d")
    assert h.relation_names == g.relation_names
    for r in g.relation_names:
        assert h.adjacency_set(r) == g.adjacency_set(r)
    np.testing.assert_array_equal(h.labels, g.labels)
    for t in g.node_types:
        np.testing.assert_array_equal(h.features[t], g.features[t])
    for k in g.split:
        np.testing.assert_array_equal(h.split[k], g.split[k])
    assert json.loads((tmp_path / "d" / "dataset.json").read_text())["target"] == "P"


def test_propagate_mean_matches_dense():
    g = synth_graph(1, {"A": 8, "P": 40, "S": 20}, ["S-P"], noise=0.0)
    x = g.features["S"]
    a = np.zeros((40, 20))
    s, t = g.edges["S-P"]
    a[t, s] = 1.0
    deg = a.sum(1, keepdims=True)
    np.testing.assert_allclose(propagate_mean(g, x, "S-P"), a @ x / np.maximum(deg, 1), atol=1e-12)
    np.testing.assert_array_equal(propagate_mean(g, x, "self_S"), x)


def test_synth_noiseless_labels_follow_planted_signal():
    g = synth_graph(0, {"A": 20, "P": 90, "S": 15}, ["P-S", "S-P"], noise=0.0)
    w = np.array(g.meta["planted_weights"])
    b = np.array(g.meta["planted_bias"])
    pred = np.argmax(planted_scores(g, MetaPath(g.meta["planted_path"]), w, b), axis=1)
    np.testing.assert_array_equal(pred, g.labels)


def test_synth_balanced_and_reproducible():
    a = synth_graph(5, {"A": 20, "P": 120, "S": 15}, ["P-S", "S-P"], noise=0.05)
    b = synth_graph(5, {"A": 20, "P": 120, "S": 15}, ["P-S", "S-P"], noise=0.05)
    np.testing.assert_array_equal(a.labels, b.labels)
    counts = np.bincount(a.labels, minlength=3)
    assert np.all(np.abs(counts - 40) <= 4)
    for k in ("train", "val", "test"):
        np.testing.assert_array_equal(a.split[k], b.split[k])


def test_synth_noise_rate_close_to_requested():
    g = synth_graph(2, {"A": 20, "P": 2000, "S": 100}, ["P-S", "S-P"], noise=0.1)
    flips = np.mean(np.array(g.meta["clean_labels"]) != g.labels)
    assert 0.07 < flips < 0.13


def test_link_task_disjoint_and_hidden():
    g = synth_graph(0, {"A": 20, "P": 60, "S": 10}, ["P-S", "S-P"], noise=0.0)
    lg = link_task(g, "A-P", seed=1)
    held = set()
    for part in ("train", "val", "test"):
        ls = lg.links[part]
        assert len(ls.positives) == len(ls.negatives)
        held |= {tuple(p) for p in ls.positives.tolist()}
    assert not (held & lg.adjacency_set("A-P"))
    assert not ({(b, a) for a, b in held} & lg.adjacency_set("P-A"))
    assert lg.task_types == ("A", "P")


def test_link_sample_rejects_overlap():
    with pytest.raises(DatasetError):
        LinkSample("A-P", np.array([[0, 1]]), np.array([[0, 1]]))


def test_link_dataset_roundtrip(tmp_path):
    g = link_task(synth_graph(0, {"A": 20, "P": 60, "S": 10}, ["P-S", "S-P"], noise=0.0), "A-P", seed=2)
    write_dataset(g, tmp_path / "l")
    h = load_dataset_dir(tmp_path / "l")
    assert h.task == "link" and h.target_relation == "A-P"
    for part in ("train", "val", "test"):
        np.testing.assert_array_equal(h.links[part].positives, g.links[part].positives)
