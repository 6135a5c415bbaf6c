"""Command line driving the full pipeline: generate a corpus, train model
variants on its train split, benchmark solvers on its test split, and turn
record CSVs into summary CSVs ready for plotting."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .bench import (
    BenchConfig,
    MODEL_VARIANTS,
    SOLVER_IDS,
    aggregate_solvers,
    load_records,
    run_benchmark,
    save_records,
    summarize,
    write_manifest,
)
from .corpus import CorpusSpec, generate_corpus, load_corpus, save_corpus, split_train_test
from .search import SearchBudget
from .training import TrainConfig, train_on_corpus

log = logging.getLogger(__name__)


def _pair(text: str) -> tuple[int, int]:
    lo, hi = (int(x) for x in text.split(","))
    return lo, hi


def _triple(text: str) -> tuple[float, float, float]:
    a, b, c = (float(x) for x in text.split(","))
    return a, b, c


def _budget(args) -> SearchBudget:
    return SearchBudget(wall_seconds=args.wall, max_model_calls=args.calls,
                        max_tactic_executions=args.execs)


def _add_budget_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--wall", type=float, default=60.0,
                   help="per-theorem wall clock budget, seconds")
    p.add_argument("--calls", type=int, default=512,
                   help="per-theorem model call budget")
    p.add_argument("--execs", type=int, default=4096,
                   help="per-theorem tactic execution budget")


def cmd_generate(args) -> int:
    spec = CorpusSpec(
        packages=args.packages, symbols_per_package=args.symbols,
        theorems_per_package=args.theorems, proof_len=args.proof_len,
        file_size=args.file_size, dep_profile=args.profile, seed=args.seed)
    corpus = generate_corpus(spec)
    corpus.split = split_train_test(corpus.packages,
                                    target_fraction=args.split_fraction,
                                    seed=args.split_seed)
    save_corpus(args.outdir, corpus)
    total = sum(len(f) for p in corpus.packages for f in p.files)
    print(f"generated {len(corpus.packages)} packages, {total} theorems "
          f"-> {args.outdir}")
    print(f"split: {len(corpus.split.train)} train / "
          f"{len(corpus.split.test)} test packages "
          f"(state fraction {corpus.split.fraction:.3f})")
    return 0


def cmd_train(args) -> int:
    corpus = load_corpus(args.corpus)
    tcfg = TrainConfig(steps=args.steps, lr=args.lr, seed=args.seed,
                       batch_states=args.batch_states,
                       batch_defs=args.batch_defs)
    model, data, history = train_on_corpus(
        corpus, args.variant, tcfg,
        hidden=args.hidden, hops=args.hops, beam_width=args.beam_width,
        seed=args.seed)
    model.save(args.out)
    kept = data.counters["kept"]
    print(f"trained {args.variant} on {kept} states; "
          f"final loss {history[-1]['loss']:.4f} -> {args.out}")
    return 0


def cmd_bench(args) -> int:
    corpus = load_corpus(args.corpus)
    solvers = tuple(SOLVER_IDS) if args.solvers == "all" \
        else tuple(s.strip() for s in args.solvers.split(",") if s.strip())
    config = BenchConfig(
        solvers=solvers, budget=_budget(args), seed=args.seed,
        workers=args.workers, max_theorems=args.max_theorems,
        knn_k=args.knn_k, knn_window=args.knn_window)
    checkpoints = {v: p for v, p in (("anon", args.ckpt_anon),
                                     ("named", args.ckpt_named),
                                     ("nodef", args.ckpt_nodef))
                   if p is not None}
    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    records = run_benchmark(corpus, config, checkpoints)
    save_records(outdir / "records.csv", records)
    write_manifest(outdir / "manifest.json", corpus, config, checkpoints,
                   records)
    for s in solvers:
        rows = [r for r in records if r.solver == s]
        n = sum(r.solved for r in rows)
        print(f"{s}: {n}/{len(rows)} solved")
    print(f"records -> {outdir / 'records.csv'}")
    return 0


def cmd_report(args) -> int:
    records = []
    for path in args.records:
        records += load_records(path)
    budget = _budget(args)
    aggregated = list(records)
    for spec in args.aggregate or ():
        components = [s.strip() for s in spec.split("+") if s.strip()]
        aggregated += aggregate_solvers(records, components, budget)
    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    if len(aggregated) > len(records):
        save_records(outdir / "aggregates.csv",
                     [r for r in aggregated[len(records):]])
    summary = summarize(aggregated, outdir)
    for row in summary.totals:
        print(f"{row['solver']}: {row['solved']}/{row['total']} "
              f"({row['rate']:.1%})")
    print(f"summary CSVs -> {outdir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="tacgraph",
        description="synthetic prover benchmark: corpus, training, solvers")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="generate and save a corpus")
    g.add_argument("--outdir", required=True)
    g.add_argument("--packages", type=int, default=40)
    g.add_argument("--symbols", type=int, default=5)
    g.add_argument("--theorems", type=int, default=75)
    g.add_argument("--proof-len", type=_pair, default=(1, 6),
                   metavar="LO,HI")
    g.add_argument("--file-size", type=_pair, default=(8, 15),
                   metavar="LO,HI")
    g.add_argument("--profile", type=_triple, default=(0.3, 0.45, 0.25),
                   metavar="IMP,MIX,LOC",
                   help="dependency profile weights, imported/mixed/local")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--split-fraction", type=float, default=0.9)
    g.add_argument("--split-seed", type=int, default=0)
    g.set_defaults(fn=cmd_generate)

    t = sub.add_parser("train", help="train one model variant on a corpus")
    t.add_argument("--corpus", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--variant", choices=MODEL_VARIANTS, default="anon")
    t.add_argument("--steps", type=int, default=200)
    t.add_argument("--lr", type=float, default=3e-4)
    t.add_argument("--batch-states", type=int, default=512)
    t.add_argument("--batch-defs", type=int, default=512)
    t.add_argument("--hidden", type=int, default=16)
    t.add_argument("--hops", type=int, default=8)
    t.add_argument("--beam-width", type=int, default=256)
    t.add_argument("--seed", type=int, default=0)
    t.set_defaults(fn=cmd_train)

    b = sub.add_parser("bench", help="run solvers over the test split")
    b.add_argument("--corpus", required=True)
    b.add_argument("--outdir", required=True)
    b.add_argument("--solvers", default="all",
                   help="comma separated solver ids, or 'all'")
    b.add_argument("--ckpt-anon")
    b.add_argument("--ckpt-named")
    b.add_argument("--ckpt-nodef")
    _add_budget_args(b)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--workers", type=int, default=0)
    b.add_argument("--max-theorems", type=int, default=None)
    b.add_argument("--knn-k", type=int, default=10)
    b.add_argument("--knn-window", type=int, default=1000)
    b.set_defaults(fn=cmd_bench)

    r = sub.add_parser("report", help="summarize record CSVs")
    r.add_argument("--records", nargs="+", required=True)
    r.add_argument("--outdir", required=True)
    r.add_argument("--aggregate", action="append", metavar="A+B",
                   help="also report a budget-splitting union of solvers")
    _add_budget_args(r)
    r.set_defaults(fn=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s")
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
