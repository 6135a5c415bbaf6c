"""k-nearest-neighbor tactic prediction over hand-crafted state features.

Each recorded proof step becomes an example (feature set, tactic invocation,
provenance). A query scores in-scope examples by IDF-weighted Jaccard
similarity of feature sets and returns the tactics of the nearest ones.
Candidate selection is either exhaustive, a bounded recency window, or an
approximate minhash forest; provenance masks implement the offline /
all-but-current-file / online visibility grades.

Scoring statistics (document frequencies, hence IDF weights) are computed
over the visible examples only, so a query sees exactly what a solver that
had inserted those examples into a private database would see.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .kernel import TacticInvocation
from .termgraph import EdgeLabel, InputGraph
from .util import mix64

SCOPES = ("offline", "allButFile", "online")
VARIANTS = ("recent", "lshf", "exhaustive")


def _splitmix(x: np.ndarray) -> np.ndarray:
    x = x + np.uint64(0x9E3779B97F4A7C15)
    x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return x ^ (x >> np.uint64(31))


DEF_KEY_BASE = 1 << 40  # node keys: plain label, or this + DefId for DEF nodes


def extract_features(ig: InputGraph) -> np.ndarray:
    """Hashed structural features of a state graph, as sorted uint64.

    One hash per node label (DEF nodes keyed by definition identity), per
    labeled edge triple, and per depth-1/depth-2 label path out of the goal
    formula's root. Set semantics: duplicates collapse.
    """
    keys = [DEF_KEY_BASE + ig.def_refs[i] if i in ig.def_refs else int(l)
            for i, l in enumerate(ig.labels)]
    feats = {mix64(1, k) for k in keys}
    out_of: dict[int, list[tuple[int, int]]] = {}
    for s, l, d in ig.edges:
        feats.add(mix64(2, keys[s], l, keys[d]))
        out_of.setdefault(s, []).append((l, d))
    anchor = ig.state_root if ig.state_root is not None else \
        (ig.roots[0] if ig.roots else None)
    goal = None
    if anchor is not None:
        for l, d in out_of.get(anchor, ()):
            if l == EdgeLabel.GOAL:
                goal = d
    if goal is not None:
        for l1, n1 in out_of.get(goal, ()):
            feats.add(mix64(3, keys[goal], l1, keys[n1]))
            for l2, n2 in out_of.get(n1, ()):
                feats.add(mix64(4, keys[goal], l1, keys[n1], l2, keys[n2]))
    return np.array(sorted(feats), dtype=np.uint64)


@dataclass(frozen=True)
class Example:
    seq: int
    features: np.ndarray
    invocation: TacticInvocation
    theorem: int
    package: str
    file_index: int
    index_in_file: int


@dataclass(frozen=True)
class QueryContext:
    """Where a query stands in the corpus; fixes what is visible."""
    package: str
    file_index: int
    index_in_file: int
    import_packages: frozenset[str]


class LshForest:
    """Minhash prefix trees for approximate Jaccard nearest neighbors.

    Each tree hashes an example to a depth-bit path (one minhash parity per
    level). Queries descend to the deepest prefix still shared with enough
    in-scope examples, shortening one level at a time.
    """

    def __init__(self, trees: int = 16, depth: int = 12, seed: int = 0):
        self.trees = trees
        self.depth = depth
        base = np.arange(trees * depth, dtype=np.uint64) + np.uint64(seed << 20)
        self.seeds = _splitmix(base)
        self._paths: list[np.ndarray] = []   # per tree, path per example
        self._sorted: list[np.ndarray] = []  # per tree, sorted paths
        self._order: list[np.ndarray] = []   # per tree, argsort of paths

    def signature(self, features: np.ndarray) -> np.ndarray:
        if len(features) == 0:
            raise ValueError("empty feature set")
        mixed = _splitmix(features[None, :] ^ self.seeds[:, None])
        bits = (mixed.min(axis=1) & np.uint64(1)).astype(np.int64)
        weights = 1 << np.arange(self.depth - 1, -1, -1, dtype=np.int64)
        return bits.reshape(self.trees, self.depth) @ weights

    def build(self, signatures: Sequence[np.ndarray]) -> None:
        if signatures:
            mat = np.stack(signatures)  # (n, trees)
        else:
            mat = np.zeros((0, self.trees), dtype=np.int64)
        self._paths = [mat[:, t] for t in range(self.trees)]
        self._order = [np.argsort(p, kind="stable") for p in self._paths]
        self._sorted = [p[o] for p, o in zip(self._paths, self._order)]

    def candidates(self, sig: np.ndarray, scope: np.ndarray,
                   want: int) -> np.ndarray:
        """Example rows sharing long signature prefixes, filtered to scope."""
        for d in range(self.depth, -1, -1):
            shift = self.depth - d
            chunks = []
            for t in range(self.trees):
                prefix = sig[t] >> shift
                lo = np.searchsorted(self._sorted[t], prefix << shift, "left")
                hi = np.searchsorted(self._sorted[t], (prefix + 1) << shift,
                                     "left")
                chunks.append(self._order[t][lo:hi])
            ids = np.unique(np.concatenate(chunks)) if chunks else \
                np.zeros(0, dtype=np.int64)
            ids = ids[scope[ids]]
            if len(ids) >= want or d == 0:
                return ids
        return np.zeros(0, dtype=np.int64)


class Scope:
    """Visibility-restricted scoring statistics for one query context."""

    def __init__(self, index: "KnnIndex", mask: np.ndarray):
        self.mask = mask
        self.rows = np.nonzero(mask)[0]
        self.n = int(len(self.rows))
        if index.size == 0:
            self.df = np.zeros(0, dtype=np.int64)
            self.idf = np.zeros(0)
            self.weight = np.zeros(0)
            return
        # every example has >= 1 feature, so no reduceat empty-segment pitfalls
        nnz_mask = np.repeat(mask, np.diff(index._indptr))
        self.df = np.bincount(index._indices[nnz_mask],
                              minlength=len(index._vocab))
        self.idf = np.log((self.n + 1) / (self.df + 1.0)) + 1.0
        self.weight = np.add.reduceat(self.idf[index._indices],
                                      index._indptr[:-1])

    def query_idf(self, col: Optional[int]) -> float:
        if col is None:
            return float(np.log(self.n + 1.0) + 1.0)
        return float(self.idf[col])


class KnnIndex:
    """Append-only example store with scoped exact and approximate queries."""

    def __init__(self, trees: int = 16, depth: int = 12, seed: int = 0):
        self.examples: list[Example] = []
        self.forest = LshForest(trees, depth, seed)
        self._signatures: list[np.ndarray] = []
        self._dirty = True
        self._vocab: dict[int, int] = {}
        self._indices = np.zeros(0, dtype=np.int64)
        self._indptr = np.zeros(1, dtype=np.int64)
        self._pkg_ids: dict[str, int] = {}
        self._pkg = np.zeros(0, dtype=np.int32)
        self._file = np.zeros(0, dtype=np.int32)
        self._tidx = np.zeros(0, dtype=np.int32)

    @property
    def size(self) -> int:
        return len(self.examples)

    def insert(self, features: np.ndarray, invocation: TacticInvocation,
               theorem: int, package: str, file_index: int,
               index_in_file: int) -> int:
        if len(features) == 0:
            raise ValueError("examples must have at least one feature")
        seq = len(self.examples)
        self.examples.append(Example(seq, features, invocation, theorem,
                                     package, file_index, index_in_file))
        self._signatures.append(self.forest.signature(features))
        self._dirty = True
        return seq

    def document_frequency(self, feature: int) -> int:
        """df over every stored example, visibility ignored."""
        self._ensure_built()
        col = self._vocab.get(int(feature))
        if col is None:
            return 0
        return int(np.bincount(self._indices,
                               minlength=len(self._vocab))[col])

    def _ensure_built(self) -> None:
        if not self._dirty:
            return
        self._vocab = {}
        cols: list[int] = []
        indptr = [0]
        for ex in self.examples:
            for f in ex.features.tolist():
                col = self._vocab.get(f)
                if col is None:
                    col = len(self._vocab)
                    self._vocab[f] = col
                cols.append(col)
            indptr.append(len(cols))
        self._indices = np.array(cols, dtype=np.int64)
        self._indptr = np.array(indptr, dtype=np.int64)
        for ex in self.examples:
            if ex.package not in self._pkg_ids:
                self._pkg_ids[ex.package] = len(self._pkg_ids)
        self._pkg = np.array([self._pkg_ids[e.package] for e in self.examples],
                             dtype=np.int32)
        self._file = np.array([e.file_index for e in self.examples],
                              dtype=np.int32)
        self._tidx = np.array([e.index_in_file for e in self.examples],
                              dtype=np.int32)
        self.forest.build(self._signatures)
        self._dirty = False

    # --- visibility ---

    def scope_mask(self, ctx: QueryContext, scope: str) -> np.ndarray:
        """offline ⊆ allButFile ⊆ online, by construction."""
        self._ensure_built()
        if scope not in SCOPES:
            raise ValueError(f"unknown scope {scope!r}")
        imp_ids = [self._pkg_ids[p] for p in ctx.import_packages
                   if p in self._pkg_ids]
        mask = np.isin(self._pkg, imp_ids)
        if scope == "offline":
            return mask
        pid = self._pkg_ids.get(ctx.package, -1)
        same = self._pkg == pid
        mask |= same & (self._file < ctx.file_index)
        if scope == "allButFile":
            return mask
        mask |= same & (self._file == ctx.file_index) & \
            (self._tidx < ctx.index_in_file)
        return mask

    def scope_for(self, mask: np.ndarray) -> Scope:
        self._ensure_built()
        return Scope(self, mask)

    # --- querying ---

    def _query_weight(self, features: np.ndarray, scope: Scope
                      ) -> tuple[np.ndarray, float]:
        qvec = np.zeros(len(self._vocab))
        total = 0.0
        for f in features.tolist():
            col = self._vocab.get(f)
            idf = scope.query_idf(col)
            total += idf
            if col is not None:
                qvec[col] = idf
        return qvec, total

    def _scores(self, qvec: np.ndarray, qweight: float,
                scope: Scope) -> np.ndarray:
        if not len(self._indices):
            return np.zeros(self.size)
        contrib = qvec[self._indices]
        inter = np.add.reduceat(contrib, self._indptr[:-1])
        union = qweight + scope.weight - inter
        with np.errstate(invalid="ignore"):
            scores = np.where(union > 0, inter / np.maximum(union, 1e-300), 0.0)
        return scores

    def suggest(self, features: np.ndarray, variant: str,
                mask: Optional[np.ndarray] = None, k: int = 10,
                window: int = 1000, scope: Optional[Scope] = None
                ) -> list[tuple[TacticInvocation, float]]:
        """Ranked (invocation, score), deduplicated, at most k entries."""
        self._ensure_built()
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}")
        if scope is None:
            if mask is None:
                raise ValueError("need a mask or a prebuilt scope")
            scope = self.scope_for(mask)
        if scope.n == 0:
            return []
        if variant == "recent":
            pool = scope.rows[-window:]
        elif variant == "lshf":
            pool = self.forest.candidates(
                self.forest.signature(features), scope.mask, want=4 * k)
        else:
            pool = scope.rows
        if len(pool) == 0:
            return []
        qvec, qweight = self._query_weight(features, scope)
        scores = self._scores(qvec, qweight, scope)[pool]
        order = np.lexsort((-pool, -scores))
        out: list[tuple[TacticInvocation, float]] = []
        seen: set[TacticInvocation] = set()
        for i in order:
            inv = self.examples[int(pool[i])].invocation
            if inv in seen:
                continue
            seen.add(inv)
            out.append((inv, float(scores[i])))
            if len(out) >= k:
                break
        return out
