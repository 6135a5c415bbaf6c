"""Training-data preparation and the optimization loop.

Harvests (proof state, invocation) pairs by replaying ground-truth scripts,
lowers them to compiled graphs with argument targets, registers definition
clusters on the embedding table, and runs seeded Adam steps.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .kernel import DefKind, Environment, Global, Local, TacticInvocation, run_script
from .kernel import TACTIC_INDEX
from .model import ClusterJob, Model, ModelConfig, StateSample, make_cluster_jobs
from .termgraph import InputGraph, TermGraph
from .util import derive_seed

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    steps: int = 200
    batch_defs: int = 512
    batch_states: int = 512
    def_every: int = 1      # definition batches join every k-th step
    def_warmup: int = 0     # first k steps take a definition batch every step
    lr: float = 3e-4
    l2: float = 1e-5
    seed: int = 0
    log_every: int = 50


@dataclass(frozen=True)
class EvalItem:
    graph: InputGraph
    invocation: TacticInvocation


@dataclass
class TrainData:
    all_jobs: list[ClusterJob]
    def_jobs: list[ClusterJob]          # trainable clusters only
    samples: list[StateSample]
    eval_items: list[EvalItem]
    cand_rows: np.ndarray               # global candidate rows, ascending
    cand_def_ids: tuple[int, ...]       # one representative DefId per row
    counters: dict[str, int] = field(default_factory=dict)


def prepare_training_data(env: Environment, graph: TermGraph, model: Model,
                          def_ids: Sequence[int],
                          theorem_ids: Sequence[int]) -> TrainData:
    """Register training clusters and harvest supervised samples.

    def_ids: every definition visible at training time. theorem_ids: the
    theorems whose ground-truth scripts are replayed for prediction samples.
    """
    cfg = model.cfg
    counters: dict[str, int] = {
        "states": 0, "kept": 0, "local_pruned": 0, "global_unbound": 0,
        "rare_tactic": 0, "broken_proof": 0,
    }
    jobs = make_cluster_jobs(graph, env, def_ids, max_nodes=cfg.max_nodes)
    model.register_training_clusters(jobs)
    def_jobs = [j for j in jobs if j.trainable]

    row_to_rep: dict[int, int] = {}
    for d in sorted(def_ids):
        if env[d].kind is DefKind.SYMBOL:
            continue
        row_to_rep.setdefault(model.row_for(d), d)
    cand_rows = np.array(sorted(row_to_rep), dtype=np.int64)
    cand_def_ids = tuple(row_to_rep[r] for r in cand_rows)

    raw: list[tuple[InputGraph, TacticInvocation]] = []
    for tid in theorem_ids:
        d = env[tid]
        steps: list[tuple] = []
        try:
            run_script(d.statement, d.proof, env,
                       on_step=lambda s, inv: steps.append((s, inv)))
        except Exception:
            counters["broken_proof"] += 1
            continue
        for state, inv in steps:
            raw.append((graph.state_input_graph(state, max_nodes=cfg.max_nodes),
                        inv))
    counters["states"] = len(raw)

    freq = np.zeros(len(TACTIC_INDEX), dtype=np.int64)
    for _, inv in raw:
        freq[TACTIC_INDEX[inv.base]] += 1
    trained = freq >= cfg.min_tactic_freq
    if not trained.any():
        trained = freq > 0
    model.trained_tactics = trained

    samples: list[StateSample] = []
    eval_items: list[EvalItem] = []
    for ig, inv in raw:
        base_id = TACTIC_INDEX[inv.base]
        if not trained[base_id]:
            counters["rare_tactic"] += 1
            continue
        num_local = len(ig.context_nodes)
        targets = []
        ok = True
        for a in inv.args:
            if isinstance(a, Local):
                if a.index >= num_local:
                    counters["local_pruned"] += 1
                    ok = False
                    break
                targets.append(a.index)
            elif isinstance(a, Global):
                if not model.has_row(a.def_id):
                    counters["global_unbound"] += 1
                    ok = False
                    break
                row = model.row_for(a.def_id)
                pos = int(np.searchsorted(cand_rows, row))
                if pos >= len(cand_rows) or cand_rows[pos] != row:
                    counters["global_unbound"] += 1
                    ok = False
                    break
                targets.append(num_local + pos)
            else:
                ok = False
                break
        if not ok:
            continue
        samples.append(StateSample(
            graph=model.compile(ig),
            base_id=base_id,
            slot_targets=tuple(targets),
            cand_rows=cand_rows,
        ))
        eval_items.append(EvalItem(graph=ig, invocation=inv))
        counters["kept"] += 1

    return TrainData(all_jobs=jobs, def_jobs=def_jobs, samples=samples,
                     eval_items=eval_items, cand_rows=cand_rows,
                     cand_def_ids=cand_def_ids, counters=counters)


def train(model: Model, data: TrainData, tcfg: TrainConfig) -> list[dict]:
    """Seeded optimization loop; returns one loss record per step."""
    adam = ad.Adam(model.params, lr=tcfg.lr, l2=tcfg.l2)
    batch_rng = np.random.default_rng(derive_seed(tcfg.seed, "batches"))
    drop_rng = np.random.default_rng(derive_seed(tcfg.seed, "dropout"))
    defs = data.def_jobs if model.cfg.use_def_task else []
    history = []
    for step in range(tcfg.steps):
        def_batch = []
        if defs and (step < tcfg.def_warmup
                     or step % max(1, tcfg.def_every) == 0):
            k = min(tcfg.batch_defs, len(defs))
            def_batch = [defs[i] for i in
                         batch_rng.choice(len(defs), size=k, replace=False)]
        k = min(tcfg.batch_states, len(data.samples))
        state_batch = [data.samples[i] for i in
                       batch_rng.choice(len(data.samples), size=k, replace=False)]
        rec = model.train_step(def_batch, state_batch, adam, drop_rng)
        rec["step"] = step
        history.append(rec)
        if tcfg.log_every and (step + 1) % tcfg.log_every == 0:
            log.info("step %d: loss=%.4f def=%.4f tactic=%.4f",
                     step + 1, rec["loss"], rec["def"], rec["tactic"])
    return history


VARIANT_FLAGS = {
    "anon": {"use_def_task": True, "use_names": False},
    "named": {"use_def_task": True, "use_names": True},
    "nodef": {"use_def_task": False, "use_names": False},
}


def variant_config(variant: str, **overrides) -> ModelConfig:
    """Model configuration for one ablation arm of the definition task."""
    if variant not in VARIANT_FLAGS:
        raise ValueError(f"unknown model variant {variant!r}")
    return ModelConfig(**{**VARIANT_FLAGS[variant], **overrides})


def train_on_corpus(corpus, variant: str = "anon",
                    tcfg: Optional[TrainConfig] = None,
                    **config_overrides) -> tuple[Model, TrainData, list[dict]]:
    """Train one model variant on a corpus' train-split packages."""
    if corpus.split is None:
        raise ValueError("corpus has no train/test split")
    train_pkgs = [p for p in corpus.packages if p.name in set(corpus.split.train)]
    def_ids = [d for p in train_pkgs for d in p.def_ids]
    theorem_ids = [t for p in train_pkgs for f in p.files for t in f]
    model = Model(variant_config(variant, **config_overrides))
    graph = TermGraph(corpus.env)
    data = prepare_training_data(corpus.env, graph, model, def_ids,
                                 theorem_ids)
    history = train(model, data, tcfg or TrainConfig())
    return model, data, history


def greedy_accuracy(model: Model, items: Sequence[EvalItem],
                    avail_def_ids: Sequence[int]) -> float:
    """Fraction of items whose top-1 prediction equals the ground truth."""
    if not items:
        return 0.0
    hits = 0
    for item in items:
        top = model.predict(item.graph, avail_def_ids=avail_def_ids,
                            beam_width=1)
        if top and top[0][0] == item.invocation:
            hits += 1
    return hits / len(items)
