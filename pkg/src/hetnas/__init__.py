"""Heterogeneous graph neural architecture search with staged prompt-driven controllers."""
from __future__ import annotations

from .controller import (
    Ablation,
    EXPLORATION,
    OPTIMIZATION,
    LLMController,
    PromptBundle,
    RandomController,
    ScriptedController,
    Stage,
    TrialRecord,
    compose_feedback,
    parse_response,
    propose,
    render_prompt,
)
from .engine import TrainConfig, aggregate, relation_message, train_eval, eval_dag_arch
from .errors import *  # noqa: F401,F403
from .gateway import GatewayConfig, MockServer, complete, mock_server
from .graph import (
    HeteroGraph,
    LinkSample,
    MetaPath,
    Relation,
    derive_reverse_relations,
    link_task,
    load_dataset,
    load_dataset_dir,
    synth_graph,
    write_dataset,
)
from .metrics import metric_auc, metric_macro_f1
from .orchestrator import (
    OracleEvaluator,
    OracleTable,
    SearchRun,
    TrainingEvaluator,
    build_oracle,
    evaluate_batch,
    load_run,
    persist,
    rank_of,
    resume,
    run_search,
    top_k,
)
from .space import (
    ArchSeq,
    DagSpace,
    SearchSpace,
    baseline_archs,
    build_dag_space,
    build_space,
    enumerate_space,
    space_size,
)

__version__ = "0.1.0"
