"""Solver benchmark over held-out packages.

Runs a set of suggestion sources (k-NN variants at three visibility grades,
GNN variants at three definition-table modes) against every theorem of the
test packages under a shared search budget, and records one row per
(solver, theorem). Solved rows carry the proof script, re-checked by the
kernel before the row is written, so downstream reports never trust the
search loop. Aggregation (budget-splitting solver unions) and summaries
(pass-rate curves, solve-set overlaps, new-dependency buckets) are pure
functions of the records, persisted as CSV next to a JSON run manifest.

Work is split package by package: each (solver, package) task owns a private
model copy or a read-only view of the example index, so tasks can run in
parallel worker processes and the merged records are independent of the
schedule. Within a package, theorems run in file order. The k-NN example
database holds ground-truth proof steps only, never a solver's own output;
visibility masks hide the theorem under attack and everything after it.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import multiprocessing as mp
from bisect import bisect_left
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .corpus import Corpus, count_new_dependencies, merged_defined_by, train_def_ids
from .kernel import (
    DefKind,
    Environment,
    Global,
    NameScope,
    TacticInvocation,
    check_proof,
    parse_all,
    run_script,
    tactic_of_sexp,
    tactic_to_str,
)
from .knn import KnnIndex, QueryContext, extract_features
from .model import Model, TableMode, make_cluster_jobs
from .search import SearchBudget, similarity_log_probs, solve
from .termgraph import TermGraph

log = logging.getLogger(__name__)

KNN_VARIANTS = ("recent", "lshf")
KNN_SCOPES = ("online", "allButFile", "offline")
KNN_SOLVERS = tuple(f"knn-{v}-{s}" for v in KNN_VARIANTS for s in KNN_SCOPES)

G2T_SOLVERS = (
    "g2t-anon-update",
    "g2t-anon-recalc",
    "g2t-anon-frozen",
    "g2t-named-update",
    "g2t-named-recalc",
    "g2t-nodef-frozen",
)
SOLVER_IDS = KNN_SOLVERS + G2T_SOLVERS

MODEL_VARIANTS = ("anon", "named", "nodef")

_TABLE_MODES = {
    "update": TableMode.UPDATE,
    "recalc": TableMode.RECALC,
    "frozen": TableMode.FROZEN,
}


class UnknownSolver(ValueError):
    pass


class MismatchedTheoremSets(ValueError):
    """Aggregation distributes one budget over solvers; their records must
    cover identical theorem sets for the split to mean anything."""


class LeakedExample(AssertionError):
    """An example outside the allowed visibility reached a candidate pool."""


def solver_kind(solver: str) -> str:
    if solver in KNN_SOLVERS:
        return "knn"
    if solver in G2T_SOLVERS:
        return "g2t"
    raise UnknownSolver(f"unknown solver id {solver!r}")


def checkpoint_variant(solver: str) -> Optional[str]:
    """Which trained checkpoint a solver id needs, None for k-NN."""
    if solver_kind(solver) == "knn":
        return None
    return solver.split("-")[1]


def _knn_parts(solver: str) -> tuple[str, str]:
    _, variant, scope = solver.split("-")
    return variant, scope


def _g2t_mode(solver: str) -> TableMode:
    return _TABLE_MODES[solver.split("-")[2]]


# --- records ------------------------------------------------------------------


def script_to_str(script: Sequence[TacticInvocation],
                  env: Environment) -> str:
    return " ".join(tactic_to_str(i, env) for i in script)


def script_from_str(text: str, env: Environment
                    ) -> tuple[TacticInvocation, ...]:
    scope = NameScope(env)
    return tuple(tactic_of_sexp(f, scope) for f in parse_all(text))


@dataclass(frozen=True)
class BenchRecord:
    solver: str
    theorem: int                # DefId in the corpus environment
    name: str                   # qualified theorem name, stable across loads
    package: str
    solved: bool
    wall_time: float
    model_calls: int
    tactic_executions: int
    new_deps: int
    seed: int
    proof: str = ""             # kernel-checked script, "" when unsolved


RECORD_COLUMNS = (
    "solver", "theorem", "name", "package", "solved", "wall_time",
    "model_calls", "tactic_executions", "new_deps", "seed", "proof",
)


def save_records(path, records: Sequence[BenchRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RECORD_COLUMNS)
        for r in records:
            w.writerow([r.solver, r.theorem, r.name, r.package,
                        int(r.solved), repr(r.wall_time), r.model_calls,
                        r.tactic_executions, r.new_deps, r.seed, r.proof])


def load_records(path) -> list[BenchRecord]:
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != RECORD_COLUMNS:
            raise ValueError(f"unexpected record columns in {path}: "
                             f"{reader.fieldnames}")
        for row in reader:
            out.append(BenchRecord(
                solver=row["solver"], theorem=int(row["theorem"]),
                name=row["name"], package=row["package"],
                solved=bool(int(row["solved"])),
                wall_time=float(row["wall_time"]),
                model_calls=int(row["model_calls"]),
                tactic_executions=int(row["tactic_executions"]),
                new_deps=int(row["new_deps"]), seed=int(row["seed"]),
                proof=row["proof"]))
    return out


# --- configuration --------------------------------------------------------------


@dataclass(frozen=True)
class BenchConfig:
    solvers: tuple[str, ...]
    budget: SearchBudget = SearchBudget()
    seed: int = 0
    workers: int = 0            # 0/1 runs inline, >1 forks worker processes
    max_theorems: Optional[int] = None  # cap on test theorems, in corpus order
    knn_k: int = 10
    knn_window: int = 1000
    lsh_trees: int = 16
    lsh_depth: int = 12

    def to_dict(self) -> dict:
        d = asdict(self)
        d["solvers"] = list(self.solvers)
        d["budget"] = asdict(self.budget)
        return d


# --- example harvest and indexes ---------------------------------------------


def _interned_graph(env: Environment) -> TermGraph:
    """Term graph with every definition interned, in environment order."""
    graph = TermGraph(env)
    for i in range(len(env)):
        graph.intern_definition(env[i])
    return graph


def harvest_examples(corpus: Corpus, index: KnnIndex,
                     packages: Sequence[str]) -> None:
    """Insert one example per ground-truth proof step of every theorem in
    packages, in corpus order, so insertion recency matches writing order."""
    env = corpus.env
    graph = _interned_graph(env)
    by_name = {p.name: p for p in corpus.packages}
    for pname in packages:
        pkg = by_name[pname]
        for fi, file_ids in enumerate(pkg.files):
            for ii, tid in enumerate(file_ids):
                d = env[tid]
                steps: list[tuple] = []
                left = run_script(d.statement, d.proof, env,
                                  on_step=lambda s, inv: steps.append((s, inv)))
                if left is None or left:
                    raise AssertionError(f"ground-truth proof of {d.name} "
                                         "does not replay")
                for state, inv in steps:
                    feats = extract_features(graph.state_input_graph(state))
                    index.insert(feats, inv, tid, pkg.name, fi, ii)


def build_indexes(corpus: Corpus, config: BenchConfig,
                  ) -> tuple[KnnIndex, KnnIndex]:
    """(full, train_only): the full index serves the online and allButFile
    grades, the train-only one serves offline so its pool cannot contain
    test-package examples no matter what the mask says."""
    full = KnnIndex(trees=config.lsh_trees, depth=config.lsh_depth,
                    seed=config.seed)
    train_only = KnnIndex(trees=config.lsh_trees, depth=config.lsh_depth,
                          seed=config.seed)
    order = [p.name for p in corpus.packages]
    harvest_examples(corpus, full, order)
    train_set = set(corpus.split.train)
    harvest_examples(corpus, train_only,
                     [n for n in order if n in train_set])
    return full, train_only


# --- shared worker context -----------------------------------------------------

# Built once before the worker pool forks; children inherit it read-mostly.
_CTX: Optional["_BenchContext"] = None


@dataclass
class _BenchContext:
    corpus: Corpus
    config: BenchConfig
    checkpoints: dict[str, str]
    closures: dict[str, frozenset[str]]     # package -> transitive deps
    closure_defs: dict[str, tuple[int, ...]]
    selected: dict[str, list[tuple[int, int, int]]]  # pkg -> (tid, file, idx)
    defined_by: dict[int, tuple[int, ...]]
    train_defs: set[int]
    graph: TermGraph
    full_index: Optional[KnnIndex] = None
    train_index: Optional[KnnIndex] = None
    full_is_test: Optional[np.ndarray] = None
    train_is_test: Optional[np.ndarray] = None


def _package_closures(corpus: Corpus) -> dict[str, frozenset[str]]:
    closures: dict[str, frozenset[str]] = {}
    for p in corpus.packages:
        c: set[str] = set()
        for d in p.deps:
            c.add(d)
            c |= closures[d]
        closures[p.name] = frozenset(c)
    return closures


def _select_theorems(corpus: Corpus, cap: Optional[int]
                     ) -> dict[str, list[tuple[int, int, int]]]:
    by_name = {p.name: p for p in corpus.packages}
    selected: dict[str, list[tuple[int, int, int]]] = {}
    taken = 0
    for pname in corpus.split.test:
        rows = []
        for fi, file_ids in enumerate(by_name[pname].files):
            for ii, tid in enumerate(file_ids):
                if cap is not None and taken >= cap:
                    break
                rows.append((tid, fi, ii))
                taken += 1
        if rows:
            selected[pname] = rows
    return selected


def _build_context(corpus: Corpus, config: BenchConfig,
                   checkpoints: dict[str, str]) -> _BenchContext:
    by_name = {p.name: p for p in corpus.packages}
    closures = _package_closures(corpus)
    closure_defs = {
        name: tuple(sorted(d for dep in deps for d in by_name[dep].def_ids))
        for name, deps in closures.items()
    }
    ctx = _BenchContext(
        corpus=corpus, config=config, checkpoints=dict(checkpoints),
        closures=closures, closure_defs=closure_defs,
        selected=_select_theorems(corpus, config.max_theorems),
        defined_by=merged_defined_by(corpus.packages),
        train_defs=train_def_ids(corpus),
        graph=_interned_graph(corpus.env),
    )
    if any(solver_kind(s) == "knn" for s in config.solvers):
        ctx.full_index, ctx.train_index = build_indexes(corpus, config)
        test = set(corpus.split.test)
        ctx.full_is_test = np.array(
            [e.package in test for e in ctx.full_index.examples], dtype=bool)
        ctx.train_is_test = np.array(
            [e.package in test for e in ctx.train_index.examples], dtype=bool)
    return ctx


# --- per-task solver adapters ---------------------------------------------------


def _globals_ok(inv: TacticInvocation, visible: frozenset[int]) -> bool:
    return all(a.def_id in visible
               for a in inv.args if isinstance(a, Global))


def _knn_suggester(ctx: _BenchContext, solver: str, pkg: str,
                   tid: int, fi: int, ii: int, visible: frozenset[int]):
    variant, scope_name = _knn_parts(solver)
    offline = scope_name == "offline"
    index = ctx.train_index if offline else ctx.full_index
    is_test = ctx.train_is_test if offline else ctx.full_is_test
    qc = QueryContext(package=pkg, file_index=fi, index_in_file=ii,
                      import_packages=ctx.closures[pkg])
    mask = index.scope_mask(qc, scope_name)
    if offline and bool((mask & is_test).any()):
        raise LeakedExample(
            f"offline pool for {ctx.corpus.env[tid].name} contains "
            "test-package examples")
    scope = index.scope_for(mask)
    cfg = ctx.config
    graph = ctx.graph

    def suggest(state):
        feats = extract_features(graph.state_input_graph(state))
        ranked = index.suggest(feats, variant, scope=scope,
                               k=cfg.knn_k, window=cfg.knn_window)
        ranked = [(inv, s) for inv, s in ranked if _globals_ok(inv, visible)]
        lps = similarity_log_probs([s for _, s in ranked])
        return [(inv, float(lp)) for (inv, _), lp in zip(ranked, lps)]

    return suggest


def _g2t_setup(ctx: _BenchContext, solver: str, pkg: str) -> Model:
    """Fresh model copy with the package closure's definitions given rows."""
    model = Model.load(ctx.checkpoints[checkpoint_variant(solver)])
    env = ctx.corpus.env
    by_name = {p.name: p for p in ctx.corpus.packages}
    train = set(ctx.corpus.split.train)
    new_pkgs = [n for n in (*sorted(ctx.closures[pkg]), pkg) if n not in train]
    new_defs = [d for n in new_pkgs for d in by_name[n].def_ids
                if not model.has_row(d)]
    if new_defs:
        jobs = make_cluster_jobs(ctx.graph, env, new_defs,
                                 max_nodes=model.cfg.max_nodes)
        model.update_definition_table(jobs, _g2t_mode(solver))
    return model


def _g2t_suggester(model: Model, ctx: _BenchContext, candidates: Sequence[int]):
    graph = ctx.graph

    def suggest(state):
        ig = graph.state_input_graph(state, max_nodes=model.cfg.max_nodes)
        return model.predict(ig, avail_def_ids=candidates)

    return suggest


def _visible_upto(base: tuple[int, ...], own: Sequence[int], tid: int
                  ) -> list[int]:
    cut = bisect_left(list(own), tid)
    return list(base) + list(own[:cut])


# --- one (solver, package) task ------------------------------------------------


def _run_package(solver: str, pkg_name: str) -> list[BenchRecord]:
    ctx = _CTX
    assert ctx is not None, "benchmark context missing in worker"
    env = ctx.corpus.env
    pkg = next(p for p in ctx.corpus.packages if p.name == pkg_name)
    own = tuple(sorted(pkg.def_ids))
    base = ctx.closure_defs[pkg_name]
    kind = solver_kind(solver)

    model: Optional[Model] = None
    if kind == "g2t":
        model = _g2t_setup(ctx, solver, pkg_name)
        for d in (*base, *own):
            if env[d].kind is not DefKind.SYMBOL and not model.has_row(d):
                raise AssertionError(f"{env[d].name} has no definition row "
                                     f"for {solver}")

    records = []
    for tid, fi, ii in ctx.selected[pkg_name]:
        visible = frozenset(_visible_upto(base, own, tid))
        if kind == "knn":
            suggest = _knn_suggester(ctx, solver, pkg_name, tid, fi, ii,
                                     visible)
        else:
            cand = tuple(d for d in sorted(visible)
                         if env[d].kind is not DefKind.SYMBOL)
            suggest = _g2t_suggester(model, ctx, cand)
        stmt = env[tid].statement
        stats = solve(stmt, suggest, env, ctx.config.budget)
        solved, proof_str = stats.solved, ""
        if solved:
            if stats.proof is None or not check_proof(stmt, stats.proof, env):
                log.error("%s: proof of %s failed kernel re-check",
                          solver, env[tid].name)
                solved = False
            else:
                proof_str = script_to_str(stats.proof, env)
        records.append(BenchRecord(
            solver=solver, theorem=tid, name=env[tid].name, package=pkg_name,
            solved=solved, wall_time=stats.wall_time,
            model_calls=stats.model_calls,
            tactic_executions=stats.tactic_executions,
            new_deps=count_new_dependencies(tid, env, ctx.defined_by,
                                            ctx.train_defs),
            seed=ctx.config.seed, proof=proof_str))
    return records


def _run_task(task: tuple[str, str]) -> list[BenchRecord]:
    return _run_package(*task)


# --- the benchmark loop ----------------------------------------------------------


def run_benchmark(corpus: Corpus, config: BenchConfig,
                  checkpoints: Optional[dict[str, str]] = None
                  ) -> list[BenchRecord]:
    """One record per (solver, test theorem), sorted by that key.

    checkpoints maps model variant ("anon", "named", "nodef") to a saved
    model path; only variants named by the requested solvers are required.
    Theorems of one package run in file order; packages and solvers fan out
    across worker processes when config.workers > 1.
    """
    checkpoints = dict(checkpoints or {})
    for s in config.solvers:
        solver_kind(s)
        v = checkpoint_variant(s)
        if v is not None and v not in checkpoints:
            raise ValueError(f"solver {s} needs a {v!r} checkpoint")

    global _CTX
    _CTX = _build_context(corpus, config, checkpoints)
    try:
        tasks = [(s, p) for s in config.solvers for p in _CTX.selected]
        if config.workers > 1 and len(tasks) > 1:
            fork = mp.get_context("fork")
            with ProcessPoolExecutor(max_workers=config.workers,
                                     mp_context=fork) as pool:
                chunks = list(pool.map(_run_task, tasks))
        else:
            chunks = [_run_task(t) for t in tasks]
    finally:
        _CTX = None
    records = [r for chunk in chunks for r in chunk]
    records.sort(key=lambda r: (r.solver, r.theorem))
    return records


def _sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(path, corpus: Corpus, config: BenchConfig,
                   checkpoints: dict[str, str],
                   records: Sequence[BenchRecord]) -> dict:
    manifest = {
        "config": config.to_dict(),
        "corpus": {
            "spec": corpus.spec.to_dict(),
            "split": {"train": list(corpus.split.train),
                      "test": list(corpus.split.test),
                      "fraction": corpus.split.fraction,
                      "seed": corpus.split.seed},
        },
        "checkpoints": {v: {"path": str(p), "sha256": _sha256_file(p)}
                        for v, p in sorted(checkpoints.items())},
        "records": len(records),
        "solved": sum(r.solved for r in records),
    }
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


# --- aggregation -----------------------------------------------------------------


def aggregate_name(components: Sequence[str]) -> str:
    return "tn(" + "+".join(components) + ")"


def aggregate_solvers(records: Sequence[BenchRecord],
                      components: Sequence[str],
                      budget: SearchBudget) -> list[BenchRecord]:
    """Synthesize records for running the components side by side on equal
    shares of one budget: a theorem counts as solved iff some component
    solved it within budget/k, and costs k times that component's spend.
    """
    if not components:
        raise ValueError("need at least one component solver")
    k = len(components)
    by: dict[str, dict[int, BenchRecord]] = {}
    for r in records:
        by.setdefault(r.solver, {})[r.theorem] = r
    for c in components:
        if c not in by:
            raise MismatchedTheoremSets(f"no records for component {c!r}")
    keys = {c: set(by[c]) for c in components}
    universe = keys[components[0]]
    for c in components[1:]:
        if keys[c] != universe:
            diff = sorted(keys[c] ^ universe)[:5]
            raise MismatchedTheoremSets(
                f"{c!r} covers a different theorem set than "
                f"{components[0]!r} (e.g. DefIds {diff})")

    name = aggregate_name(components)
    wall_share = budget.wall_seconds / k
    call_share = budget.max_model_calls // k
    exec_share = budget.max_tactic_executions // k
    out = []
    for t in sorted(universe):
        comps = [by[c][t] for c in components]
        fits = [r for r in comps if r.solved
                and k * r.wall_time <= budget.wall_seconds
                and k * r.model_calls <= budget.max_model_calls]
        ref = comps[0]
        if fits:
            best = min(fits, key=lambda r: (r.wall_time, r.model_calls,
                                            r.solver))
            rec = replace(best, solver=name, solved=True,
                          wall_time=k * best.wall_time,
                          model_calls=k * best.model_calls,
                          tactic_executions=k * best.tactic_executions)
        else:
            rec = replace(
                ref, solver=name, solved=False, proof="",
                wall_time=min(budget.wall_seconds,
                              k * max(min(r.wall_time, wall_share)
                                      for r in comps)),
                model_calls=min(budget.max_model_calls,
                                k * max(min(r.model_calls, call_share)
                                        for r in comps)),
                tactic_executions=min(budget.max_tactic_executions,
                                      k * max(min(r.tactic_executions,
                                                  exec_share)
                                              for r in comps)))
        out.append(rec)
    return out


# --- summaries -------------------------------------------------------------------

DEP_BUCKETS = ("0", "1-9", "10-99", "100+")


def dep_bucket(new_deps: int) -> str:
    if new_deps <= 0:
        return "0"
    if new_deps < 10:
        return "1-9"
    if new_deps < 100:
        return "10-99"
    return "100+"


@dataclass
class Summary:
    curves: list[dict] = field(default_factory=list)
    venn: list[dict] = field(default_factory=list)
    buckets: list[dict] = field(default_factory=list)
    totals: list[dict] = field(default_factory=list)


def _solver_curve(solver: str, rows: list[BenchRecord], axis: str,
                  key) -> list[dict]:
    total = len(rows)
    xs = sorted(key(r) for r in rows if r.solved)
    points = [{"solver": solver, "axis": axis, "x": 0.0 if axis == "time"
               else 0, "solved": 0, "total": total, "rate": 0.0}]
    for n, x in enumerate(xs, start=1):
        point = {"solver": solver, "axis": axis, "x": x, "solved": n,
                 "total": total, "rate": n / total}
        if points[-1]["x"] == x and points[-1]["axis"] == axis:
            points[-1] = point
        else:
            points.append(point)
    return points


def summarize(records: Sequence[BenchRecord],
              outdir: Optional[str] = None) -> Summary:
    """Cumulative pass-rate curves per solver over wall time and over model
    calls, exclusive solve-set overlap counts, and pass rates stratified by
    new-dependency bucket. Writes curves/venn/buckets/totals CSV when outdir
    is given."""
    solvers = sorted({r.solver for r in records})
    by: dict[str, list[BenchRecord]] = {s: [] for s in solvers}
    for r in records:
        by[r.solver].append(r)

    s = Summary()
    for solver in solvers:
        rows = by[solver]
        s.curves += _solver_curve(solver, rows, "time",
                                  lambda r: r.wall_time)
        s.curves += _solver_curve(solver, rows, "calls",
                                  lambda r: r.model_calls)
        nsolved = sum(r.solved for r in rows)
        s.totals.append({"solver": solver, "total": len(rows),
                         "solved": nsolved,
                         "rate": nsolved / len(rows) if rows else 0.0})
        per_bucket: dict[str, list[BenchRecord]] = {b: [] for b in DEP_BUCKETS}
        for r in rows:
            per_bucket[dep_bucket(r.new_deps)].append(r)
        for b in DEP_BUCKETS:
            brows = per_bucket[b]
            bs = sum(r.solved for r in brows)
            s.buckets.append({"solver": solver, "bucket": b,
                              "total": len(brows), "solved": bs,
                              "rate": bs / len(brows) if brows else 0.0})

    regions: dict[tuple[str, ...], int] = {}
    solved_by_theorem: dict[int, set[str]] = {}
    for r in records:
        if r.solved:
            solved_by_theorem.setdefault(r.theorem, set()).add(r.solver)
    for who in solved_by_theorem.values():
        regions[tuple(sorted(who))] = regions.get(tuple(sorted(who)), 0) + 1
    for members in sorted(regions):
        s.venn.append({"members": "+".join(members),
                       "count": regions[members]})

    if outdir is not None:
        out = Path(outdir)
        out.mkdir(parents=True, exist_ok=True)
        _write_csv(out / "curves.csv",
                   ("solver", "axis", "x", "solved", "total", "rate"),
                   s.curves)
        _write_csv(out / "venn.csv", ("members", "count"), s.venn)
        _write_csv(out / "buckets.csv",
                   ("solver", "bucket", "total", "solved", "rate"), s.buckets)
        _write_csv(out / "totals.csv",
                   ("solver", "total", "solved", "rate"), s.totals)
    return s


def _write_csv(path, columns: tuple[str, ...], rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns)
        w.writeheader()
        for row in rows:
            w.writerow(row)
