from __future__ import annotations

import csv
import json
import subprocess
import sys

import pytest

from hetnas.cli import EXIT_CONFIG, EXIT_OK, DEFAULTS, load_config, main, report_rows
from hetnas.errors import ConfigError
from hetnas.orchestrator import load_run, read_oracle_csv
from hetnas.space import enumerate_space

SMALL = {
    "synth": {"sizes": {"A": 6, "P": 30, "S": 6}, "noise": 0.0},
    "space": {"layers": 1},
    "train": {"epochs": 3, "patience": 3},
    "search": {"t_e": 1, "t_o": 1, "batch": 3, "retrain_count": 2},
    "oracle": {"repeats": 1},
}


def write_cfg(tmp_path, extra=None, name="cfg.json"):
    cfg = json.loads(json.dumps(SMALL))
    for k, v in (extra or {}).items():
        cfg[k] = {**cfg.get(k, {}), **v} if isinstance(v, dict) else v
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return str(p)


@pytest.fixture(scope="module")
def oracle(tmp_path_factory):
    d = tmp_path_factory.mktemp("oracle")
    path = d / "oracle.csv"
    cfg = write_cfg(d, {"oracle": {"path": str(path)}})
    assert main(["oracle", "--config", cfg]) == EXIT_OK
    return cfg, path


# -- config ------------------------------------------------------------------------------------


def test_empty_config_gives_defaults(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{}")
    assert load_config(str(p)) == DEFAULTS
    assert load_config(None)["train"]["lr"] == 0.005


def test_unknown_key_is_config_error(tmp_path, capsys):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"search": {"budjet": 3}}))
    with pytest.raises(ConfigError, match="search.budjet"):
        load_config(str(p))
    assert main(["synth", "--config", str(p), "--out", str(tmp_path / "d")]) == EXIT_CONFIG
    assert "search.budjet" in capsys.readouterr().err


def test_missing_config_file(tmp_path):
    assert main(["synth", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path)]) == EXIT_CONFIG


# -- synth / validate ------------------------------------------------------------------------


def test_synth_then_validate(tmp_path, capsys):
    cfg = write_cfg(tmp_path)
    assert main(["synth", "--config", cfg, "--out", str(tmp_path / "ds")]) == EXIT_OK
    capsys.readouterr()
    assert main(["validate", str(tmp_path / "ds")]) == EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    assert lines[1].split() == ["Relations(A-B)", "#A", "#B", "#A-B"]
    assert lines[2].split()[:3] == ["A-P", "6", "30"]


def test_validate_overlapping_splits(tmp_path, capsys):
    cfg = write_cfg(tmp_path)
    main(["synth", "--config", cfg, "--out", str(tmp_path / "ds")])
    splits = tmp_path / "ds" / "splits.tsv"
    first = splits.read_text().splitlines()[0].split("\t")[0]
    with splits.open("a") as f:
        f.write(f"{first}\ttest\n")
    capsys.readouterr()
    assert main(["validate", str(tmp_path / "ds")]) == EXIT_CONFIG
    assert first in capsys.readouterr().err


def test_synth_seed_reproducible(tmp_path):
    cfg = write_cfg(tmp_path)
    for name in ("a", "b"):
        main(["synth", "--config", cfg, "--seed", "4", "--out", str(tmp_path / name)])
    for f in ("nodes.tsv", "edges.tsv", "labels.tsv", "splits.tsv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


# -- oracle ----------------------------------------------------------------------------------


def test_oracle_writes_all_rows(oracle, capsys):
    cfg, path = oracle
    with path.open() as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 8
    assert sorted(int(r["rank"]) for r in rows) == list(range(1, 9))
    assert path.with_name("oracle.csv.space.json").exists()


def test_oracle_resume_is_byte_identical(oracle, tmp_path):
    cfg, path = oracle
    part = tmp_path / "part.csv"
    assert main(["oracle", "--config", cfg, "--out", str(part), "--stop-after", "3"]) == EXIT_OK
    assert main(["oracle", "--config", cfg, "--out", str(part), "--resume"]) == EXIT_OK
    assert part.read_bytes() == path.read_bytes()


def test_oracle_refuses_dag_space(tmp_path):
    cfg = write_cfg(tmp_path, {"space": {"kind": "diffmg"}})
    assert main(["oracle", "--config", cfg, "--out", str(tmp_path / "o.csv")]) == EXIT_CONFIG


# -- search ----------------------------------------------------------------------------------


def test_llm_controller_needs_key(tmp_path, monkeypatch, capsys):
    monkeypatch.delenv("HETNAS_CLI_KEY", raising=False)
    cfg = write_cfg(tmp_path, {"gateway": {"api_key_env": "HETNAS_CLI_KEY"}})
    assert main(["search", "--config", cfg, "--out", str(tmp_path / "r")]) == EXIT_CONFIG
    assert "HETNAS_CLI_KEY" in capsys.readouterr().err
    assert not (tmp_path / "r" / "run.json").exists()


def test_scripted_needs_fixture(tmp_path):
    cfg = write_cfg(tmp_path)
    assert main(["search", "--config", cfg, "--controller", "scripted", "--out", str(tmp_path / "r")]) == EXIT_CONFIG
    assert main(["search", "--config", cfg, "--controller", "scripted", "--fixture", str(tmp_path / "none.json"),
                 "--out", str(tmp_path / "r")]) == EXIT_CONFIG


def scripted_fixture(tmp_path, oracle_path, cfg):
    table = read_oracle_csv(oracle_path, load_run_space(cfg))
    archs = list(enumerate_space(table.space))
    best = table.best()
    rounds = [[str(archs[0]), str(archs[1]), str(archs[2])], [str(best), str(archs[0])]]
    p = tmp_path / "fx.json"
    p.write_text(json.dumps({"rounds": rounds}))
    return p, best


def load_run_space(cfg):
    from hetnas.cli import make_graph, make_space
    c = load_config(cfg)
    return make_space(c, make_graph(c))


def test_scripted_search_is_deterministic_and_finds_rank_one(oracle, tmp_path, capsys):
    cfg, path = oracle
    fx, best = scripted_fixture(tmp_path, path, cfg)
    outs = []
    for name in ("r1", "r2"):
        out = tmp_path / name
        assert main(["search", "--config", cfg, "--controller", "scripted", "--fixture", str(fx),
                     "--out", str(out)]) == EXIT_OK
        outs.append(out)
        assert "oracle rank 1" in capsys.readouterr().out
    a, b = (load_run(o / "run.json") for o in outs)
    assert a.best_arch() == best
    assert [r.to_dict() for r in a.history] == [r.to_dict() for r in b.history]
    assert (outs[0] / "series.csv").read_text() == (outs[1] / "series.csv").read_text()
    header = (outs[0] / "series.csv").read_text().splitlines()[0]
    assert header == "iteration,stage,best_so_far,mean,variance,evaluated"
    capsys.readouterr()
    assert main(["report", str(outs[0] / "run.json"), "--oracle", str(path)]) == EXIT_OK
    text = capsys.readouterr().out
    assert text.splitlines()[1].split()[-1] == "1"


def test_random_search_budget_and_report(oracle, tmp_path, capsys):
    cfg, path = oracle
    runs = []
    for seed in range(3):
        out = tmp_path / f"s{seed}"
        assert main(["search", "--config", cfg, "--controller", "random", "--seed", str(seed),
                     "--budget", "6", "--out", str(out)]) == EXIT_OK
        run = load_run(out / "run.json")
        assert (run.t_e, run.t_o, run.batch) == (1, 1, 3)
        runs.append(str(out / "run.json"))
    capsys.readouterr()
    csv_out = tmp_path / "report.csv"
    assert main(["report", *runs, "--oracle", str(path), "--csv", str(csv_out)]) == EXIT_OK
    rows = list(csv.reader(csv_out.open()))
    assert rows[0] == ["run", "val", "test", "rank"]
    assert rows[-1][0] == "avg" and len(rows) == 5
    ranks = [int(r[3]) for r in rows[1:-1]]
    assert rows[-1][3] == f"{sum(ranks) / 3:.1f}"
    assert "±" in rows[-1][1]


def test_report_without_oracle_omits_rank(oracle, tmp_path):
    cfg, _ = oracle
    out = tmp_path / "r"
    main(["search", "--config", cfg, "--controller", "random", "--out", str(out)])
    rows = report_rows([("r", load_run(out / "run.json"))])
    assert rows[0] == ["run", "val", "test"]
    assert [r[0] for r in rows] == ["run", "r", "avg"]


def test_report_space_mismatch(oracle, tmp_path, capsys):
    cfg, path = oracle
    other = write_cfg(tmp_path, {"space": {"layers": 2}}, "other.json")
    out = tmp_path / "r"
    main(["search", "--config", other, "--controller", "random", "--out", str(out)])
    capsys.readouterr()
    assert main(["report", str(out / "run.json"), "--oracle", str(path)]) == EXIT_CONFIG
    assert "space" in capsys.readouterr().err


def test_search_resume_of_finished_run(oracle, tmp_path):
    cfg, _ = oracle
    out = tmp_path / "r"
    args = ["search", "--config", cfg, "--controller", "random", "--out", str(out)]
    assert main(args) == EXIT_OK
    before = (out / "run.json").read_bytes()
    assert main(args + ["--resume"]) == EXIT_OK
    assert (out / "run.json").read_bytes() == before


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "hetnas", "search", "--controller", "bogus"],
                       capture_output=True, text=True)
    assert r.returncode == EXIT_CONFIG and "invalid choice" in r.stderr
    r = subprocess.run([sys.executable, "-m", "hetnas", "validate", str(tmp_path / "missing")],
                       capture_output=True, text=True)
    assert r.returncode == EXIT_CONFIG and r.stderr.startswith("error:")
