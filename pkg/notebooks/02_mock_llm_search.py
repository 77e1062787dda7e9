"""
Staged search against a local chat endpoint
===========================================

A scripted mock server stands in for the model. The controller renders the prompt,
the server answers, and the orchestrator trains whatever was proposed.
"""

import os
import tempfile
from pathlib import Path

from hetnas import GatewayConfig, LLMController, MockServer, SearchRun, TrainConfig, TrainingEvaluator, run_search
from hetnas.controller import EXPLORATION, render_prompt
from hetnas.gateway import overflow_response, read_transcript
from hetnas.space import build_space, enumerate_space
from hetnas.graph import synth_graph

g = synth_graph(0, {"A": 20, "P": 120, "S": 20}, ["P-S", "S-P"], noise=0.02)
s = build_space(g, 2, kind="benchmark")
print(s.size(), "architectures")

# what the model sees on the first round
print(render_prompt(s, g.descriptor(), EXPLORATION, [], 4))

archs = list(enumerate_space(s))
answers = [" ".join(str(a) for a in archs[i:i + 4]) for i in (0, 300, 600)]
script = [answers[0], overflow_response(), answers[1], "I am not sure.", answers[2]]

os.environ.setdefault("DEMO_KEY", "sk-local")
out = Path(tempfile.mkdtemp())
with MockServer(script) as srv:
    gw = GatewayConfig(endpoint=srv.endpoint, api_key_env="DEMO_KEY", backoff=0.0,
                       log_path=str(out / "transcript.jsonl"))
    ctl = LLMController(s, g.descriptor(), gw, top_k=2)
    cfg = TrainConfig.desk(epochs=30)
    run = SearchRun(s, "llm", t_e=2, t_o=1, batch=4, top_k=2, retrain_count=2, train=cfg)
    res = run_search(run, ctl, TrainingEvaluator(g, cfg, s), path=out / "run.json")

print(run.status, len(run.history), "evaluated;", "overflows:", ctl.overflows, "compact:", ctl.compact)
print("temperatures:", [r["temperature"] for r in srv.requests])
print("best:", res.best)
for p in run.series:
    print(p["step"], p["stage"], round(p["best"], 4), round(p["mean"], 4))

for rec in read_transcript(out / "transcript.jsonl"):
    print(rec["event"], rec.get("stage"), rec.get("status", ""), rec["content"][:60].replace("\n", " "))
