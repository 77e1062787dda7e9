"""Command-line entry point: synth, validate, oracle, search, report."""
from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import math
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import presets
from .controller import Ablation, LLMController, RandomController, ScriptedController
from .engine import TrainConfig
from .errors import ConfigError, DatasetError, GatewayError, HetNasError, IntegrityError, SpaceError
from .gateway import GatewayConfig
from .graph import HeteroGraph, link_task, load_dataset_dir, synth_graph, write_dataset
from .orchestrator import (
    OracleEvaluator,
    SearchRun,
    TrainingEvaluator,
    build_oracle,
    load_run,
    rank_of,
    read_oracle_csv,
    run_search,
)
from .space import SequenceSpace, baseline_archs, build_dag_space, build_space, space_from_dict

log = logging.getLogger("hetnas")

EXIT_OK, EXIT_CONFIG, EXIT_TRANSPORT, EXIT_INTERNAL = 0, 1, 2, 3

DEFAULTS: dict = {
    "dataset": None,
    "synth": {
        "seed": presets.PLANTED_SEED,
        "sizes": dict(presets.PLANTED_SIZES),
        "planted_path": list(presets.PLANTED_PATH),
        "noise": presets.PLANTED_NOISE,
        "relations": None,
        "feature_dim": 8,
        "num_classes": 3,
        "max_degree": 2,
        "distractor_scale": 1.0,
        "link_relation": None,
        "name": "planted",
    },
    "space": {"kind": "benchmark", "layers": 2, "prune": True, "self_loops": True,
              "gnn_candidates": None, "aggr_candidates": None, "n_states": 4},
    "train": TrainConfig.desk().to_dict(),
    "search": {"controller": "llm", "t_e": 10, "t_o": 5, "batch": 20, "top_k": 10, "retrain_count": 10,
               "seed": 0, "retries": 3},
    "oracle": {"path": None, "repeats": 5},
    "gateway": GatewayConfig().to_dict(),
    "ablate": [],
    "workers": 1,
    "output": "runs",
}


def _merge(base: dict, over: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in base:
            raise ConfigError(f"unknown config key {where + k!r}")
        if isinstance(base[k], dict) and k not in ("sizes",):
            if not isinstance(v, dict):
                raise ConfigError(f"config key {where + k!r} must be an object")
            out[k] = _merge(base[k], v, f"{where}{k}.")
        else:
            out[k] = v
    return out


def load_config(path: str | None) -> dict:
    """Read a JSON run config over the defaults; unknown keys are an error."""
    if not path:
        return copy.deepcopy(DEFAULTS)
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path}: {e}") from None
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    return _merge(DEFAULTS, data)


def make_graph(cfg: dict) -> HeteroGraph:
    if cfg["dataset"]:
        return load_dataset_dir(cfg["dataset"])
    s = cfg["synth"]
    rels = [tuple(r) for r in s["relations"]] if s["relations"] else None
    g = synth_graph(s["seed"], s["sizes"], s["planted_path"], noise=s["noise"], relations=rels,
                    feature_dim=s["feature_dim"], num_classes=s["num_classes"], max_degree=s["max_degree"],
                    distractor_scale=s["distractor_scale"], name=s["name"])
    if s["link_relation"]:
        g = link_task(g, s["link_relation"], seed=s["seed"])
    return g


def make_space(cfg: dict, g: HeteroGraph) -> SequenceSpace:
    sp = cfg["space"]
    if sp["kind"] == "diffmg":
        return build_dag_space(g, sp["n_states"])
    return build_space(g, sp["layers"], kind=sp["kind"], prune=sp["prune"], self_loops=sp["self_loops"],
                       gnn_candidates=sp["gnn_candidates"], aggr_candidates=sp["aggr_candidates"])


def make_train(cfg: dict) -> TrainConfig:
    try:
        return TrainConfig(**cfg["train"])
    except (TypeError, ValueError) as e:
        raise ConfigError(f"train config: {e}") from None


def _print(text: str = "") -> None:
    sys.stdout.write(text + "\n")


# -- commands ----------------------------------------------------------------------------------


def cmd_synth(args, cfg) -> int:
    if args.seed is not None:
        cfg["synth"]["seed"] = args.seed
    g = make_graph({**cfg, "dataset": None})
    out = write_dataset(g, args.out)
    _print(f"wrote {g.name} to {out}")
    _print(g.summary())
    return EXIT_OK


def cmd_validate(args, cfg) -> int:
    g = load_dataset_dir(args.dataset)
    _print(f"dataset {g.name}: task={g.task} target={g.target_type if g.task == 'node' else g.target_relation}")
    _print(g.summary(include_derived=args.derived))
    return EXIT_OK


def cmd_oracle(args, cfg) -> int:
    train = make_train(cfg)
    if args.seed is not None:
        train = TrainConfig(**{**train.to_dict(), "seed": args.seed})
    g = make_graph(cfg)
    space = make_space(cfg, g)
    if getattr(space, "kind", None) != "benchmark":
        raise ConfigError("oracle building needs a benchmark-kind space")
    path = Path(args.out or cfg["oracle"]["path"] or Path(cfg["output"]) / "oracle.csv")
    repeats = args.repeats or cfg["oracle"]["repeats"]
    workers = args.workers or cfg["workers"]

    def progress(done, total):
        log.info("oracle %d/%d", done, total)

    table = build_oracle(space, g, train, repeats, path=path, resume=args.resume, workers=workers,
                         stop_after=args.stop_after, progress=progress)
    Path(str(path) + ".space.json").write_text(json.dumps(space.to_dict(), indent=1) + "\n")
    if not table.complete():
        _print(f"partial oracle: {len(table)} of {space.size()} architectures in {path}")
        return EXIT_OK
    _print(f"oracle: {len(table)} architectures x {repeats} repeats -> {path}")
    best = table.best()
    _print(f"rank 1: {best}  val {table.mean_val[table.index(best)]:.4f}  test {table.mean_test[table.index(best)]:.4f}")
    if not cfg["dataset"] and len(cfg["synth"]["planted_path"]) == cfg["space"]["layers"]:
        full, mp = baseline_archs(space, cfg["synth"]["planted_path"])
        _print(f"all_relations baseline rank {rank_of(table, full)}; meta_path baseline rank {rank_of(table, mp)}")
    return EXIT_OK


def _budget(cfg: dict, budget: int) -> None:
    s = cfg["search"]
    total = max(1, math.ceil(budget / s["batch"]))
    share = s["t_e"] / max(1, s["t_e"] + s["t_o"])
    s["t_e"] = int(round(total * share))
    s["t_o"] = total - s["t_e"]


def cmd_search(args, cfg) -> int:
    s = cfg["search"]
    if args.controller:
        s["controller"] = args.controller
    if args.seed is not None:
        s["seed"] = args.seed
    if args.ablate:
        cfg["ablate"] = list(args.ablate)
    if args.budget:
        _budget(cfg, args.budget)
    if s["controller"] not in ("llm", "random", "scripted"):
        raise ConfigError(f"unknown controller {s['controller']!r}")
    out = Path(args.out or cfg["output"])
    out.mkdir(parents=True, exist_ok=True)
    gw = GatewayConfig(**{**cfg["gateway"], "log_path": cfg["gateway"]["log_path"] or str(out / "transcript.jsonl")})
    if s["controller"] == "llm":
        gw.api_key(required=True)
    ablation = Ablation.from_flags(cfg["ablate"])
    run_path = out / "run.json"
    g = make_graph(cfg)
    if args.resume and run_path.exists():
        run = load_run(run_path)
        space = run.space
    else:
        space = make_space(cfg, g)
        run = SearchRun(space, s["controller"], s["t_e"], s["t_o"], s["batch"], s["top_k"], s["retrain_count"],
                        make_train(cfg), s["seed"])
        run.info["config"] = cfg
    if s["controller"] == "random":
        ctl = RandomController(space, run.seed)
    elif s["controller"] == "scripted":
        if not args.fixture:
            raise ConfigError("the scripted controller needs --fixture")
        ctl = ScriptedController.from_file(args.fixture, space)
        ctl.numeric = ablation.no_operation
    else:
        ctl = LLMController(space, g.descriptor(), gw, ablation, run.top_k, s["retries"])
    oracle = None
    if cfg["oracle"]["path"] and Path(cfg["oracle"]["path"]).exists():
        oracle = read_oracle_csv(cfg["oracle"]["path"], space)
        evaluator = OracleEvaluator(oracle)
    else:
        evaluator = TrainingEvaluator(g, run.train, space, args.workers or cfg["workers"])
    result = run_search(run, ctl, evaluator, path=run_path)
    _write_series(run, out / "series.csv")
    _print(json.dumps(cfg, indent=1, sort_keys=True, default=str))
    _print(f"status: {run.status}; evaluated {len(run.history)} architectures, {run.proposals} proposals, "
           f"{run.cache_hits} repeats, {run.rejects} rejected fragments")
    if result.best is not None:
        key = str(result.best)
        m = np.mean([v for v, _ in run.retrain_table[key]])
        t = np.mean([x for _, x in run.retrain_table[key]])
        line = f"best: {key}  val {m:.4f}  test {t:.4f}"
        if oracle is not None:
            line += f"  oracle rank {rank_of(oracle, result.best)}"
        _print(line)
    _print(f"run file: {run_path}")
    return EXIT_OK if run.status == "done" else EXIT_CONFIG


def _write_series(run: SearchRun, path: Path) -> None:
    with path.open("w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["iteration", "stage", "best_so_far", "mean", "variance", "evaluated"])
        for p in run.series:
            w.writerow([p["step"], p["stage"], f"{p['best']:.6f}", f"{p['mean']:.6f}", f"{p['variance']:.6f}",
                        p["evaluated"]])


def report_rows(runs: Sequence[tuple[str, SearchRun]], oracle=None) -> list[list[str]]:
    """Per-run best rows then an ``avg`` row (mean ± std of metrics, mean rank)."""
    rows = [["run", "val", "test"] + (["rank"] if oracle is not None else [])]
    vals, tests, ranks = [], [], []
    for name, run in runs:
        if not run.best:
            rows.append([name, "-", "-"] + (["-"] if oracle is not None else []))
            continue
        rt = run.retrain_table[run.best]
        v = float(np.mean([x for x, _ in rt])) * 100
        t = float(np.mean([x for _, x in rt])) * 100
        vals.append(v)
        tests.append(t)
        row = [name, f"{v:.2f}", f"{t:.2f}"]
        if oracle is not None:
            r = rank_of(oracle, run.best_arch())
            ranks.append(r)
            row.append(str(r))
        rows.append(row)
    if vals:
        avg = ["avg", f"{np.mean(vals):.2f}±{np.std(vals):.2f}", f"{np.mean(tests):.2f}±{np.std(tests):.2f}"]
        if oracle is not None:
            avg.append(f"{np.mean(ranks):.1f}")
        rows.append(avg)
    return rows


def cmd_report(args, cfg) -> int:
    runs = [(Path(p).parent.name + "/" + Path(p).name, load_run(p)) for p in args.runs]
    oracle = None
    if args.oracle:
        space = runs[0][1].space
        side = Path(args.oracle + ".space.json")
        if side.exists() and space_from_dict(json.loads(side.read_text())) != space:
            raise SpaceError("run space and oracle space differ")
        for name, r in runs[1:]:
            if r.space != space:
                raise SpaceError(f"run {name} uses a different space")
        oracle = read_oracle_csv(args.oracle, space)
    rows = report_rows(runs, oracle)
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    for r in rows:
        _print("  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths))))
    if args.csv:
        with open(args.csv, "w", newline="", encoding="utf-8") as f:
            csv.writer(f, lineterminator="\n").writerows(rows)
    return EXIT_OK


# -- entry point -------------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hetnas", description="Heterogeneous GNN architecture search toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON run config; unknown keys are rejected")
        sp.add_argument("--seed", type=int)

    sp = sub.add_parser("synth", help="write a synthetic planted-signal dataset")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("validate", help="check a dataset directory and print relation counts")
    common(sp)
    sp.add_argument("dataset")
    sp.add_argument("--derived", action="store_true", help="also list derived reverse relations")
    sp.set_defaults(func=cmd_validate)

    sp = sub.add_parser("oracle", help="exhaustively evaluate a benchmark space")
    common(sp)
    sp.add_argument("--out")
    sp.add_argument("--repeats", type=int)
    sp.add_argument("--resume", action="store_true")
    sp.add_argument("--workers", type=int)
    sp.add_argument("--stop-after", type=int, help=argparse.SUPPRESS)
    sp.set_defaults(func=cmd_oracle)

    sp = sub.add_parser("search", help="run a staged architecture search")
    common(sp)
    sp.add_argument("--controller", choices=["llm", "random", "scripted"])
    sp.add_argument("--fixture", help="scripted controller rounds (JSON) or a transcript (.jsonl) to replay")
    sp.add_argument("--budget", type=int, help="total proposals; splits rounds between the two stages")
    sp.add_argument("--ablate", action="append", choices=["no-dataset", "no-operation", "no-strategy"])
    sp.add_argument("--resume", action="store_true")
    sp.add_argument("--workers", type=int)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_search)

    sp = sub.add_parser("report", help="summarise run files, optionally with oracle ranks")
    common(sp)
    sp.add_argument("runs", nargs="+")
    sp.add_argument("--oracle")
    sp.add_argument("--csv")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        # argparse exits 2 on usage errors, which would read as a transport failure
        return EXIT_CONFIG if e.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except (ConfigError, DatasetError, SpaceError, IntegrityError) as e:
        sys.stderr.write(f"error: {e}\n")
        return EXIT_CONFIG
    except (FileNotFoundError, NotADirectoryError, IsADirectoryError) as e:
        sys.stderr.write(f"error: {e}\n")
        return EXIT_CONFIG
    except GatewayError as e:
        sys.stderr.write(f"transport error: {e}\n")
        return EXIT_TRANSPORT
    except HetNasError as e:
        sys.stderr.write(f"error: {e}\n")
        return EXIT_INTERNAL
    except Exception as e:  # noqa: BLE001
        log.debug("internal error", exc_info=True)
        sys.stderr.write(f"internal error: {type(e).__name__}: {e}\n")
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
