"""GNN tactic predictor over shared term graphs.

One model owns four embedding tables (node label, message label, base
tactic, definition), a stack of message-passing hops shared by every task,
a definition-embedding head, a tactic head, and a recurrent argument
decoder. Definitions occupy rows of `def_emb`; rows are keyed by cluster
content hash so the same definition text always lands on the same row, and
unseen definitions can be added online by running the definition task in
dependency order (or by freezing random rows, for the ablations).

Graphs are executed one at a time; a training batch is a python loop with
the losses summed on the tape.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Iterable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Var
from .kernel import BASE_TACTICS, DefKind, Environment, Global, Local, TacticInvocation
from .termgraph import (
    NUM_MESSAGE_LABELS,
    NodeLabel,
    InputGraph,
    TermGraph,
    compute_clusters,
    to_message_graph,
    topo_order,
)
from .util import derive_seed

log = logging.getLogger(__name__)

NUM_NODE_LABELS = len(NodeLabel)
NUM_TACTICS = len(BASE_TACTICS)
TACTIC_SLOTS = tuple(t.slots for t in BASE_TACTICS)

ROW_UNSET, ROW_LEARNED, ROW_COMPUTED, ROW_FROZEN = 0, 1, 2, 3

NEG_INF = -1e30

# character vocabulary for the name encoder: 0 = out-of-range, then the
# printable ASCII range
_CHAR_BASE = 32
_CHAR_VOCAB = 1 + (126 - _CHAR_BASE + 1)


class UnsetDefinitionRow(Exception):
    """A graph references a definition whose embedding row is not set."""


class NoAvailableTactics(Exception):
    """Every base tactic is masked out for this prediction."""


class CapacityExceeded(Exception):
    """The definition table cannot hold the requested rows."""


class TableMode(Enum):
    UPDATE = "update"
    RECALC = "recalc"
    FROZEN = "frozen"


@dataclass
class ModelConfig:
    hidden: int = 16
    hops: int = 8
    beam_width: int = 256
    dropout: float = 0.1
    max_nodes: int = 1024
    use_def_task: bool = True
    use_names: bool = False
    def_weight: float = 1000.0
    min_tactic_freq: int = 6
    deg_includes_self: bool = True
    def_capacity: int = 4096
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass(frozen=True)
class ClusterJob:
    """One definition cluster prepared for the embedding table.

    def_ids are ordered by (member graph hash, DefId) so that row positions
    are reproducible for content-equal clusters across environments.
    """
    def_ids: tuple[int, ...]
    hash: int
    graph: InputGraph
    names: tuple[str, ...]
    trainable: bool


def make_cluster_jobs(graph: TermGraph, env: Environment,
                      def_ids: Sequence[int],
                      max_nodes: int = 1024) -> list[ClusterJob]:
    """Cluster the definitions and return jobs in dependency order."""
    node_of = {d: graph.intern_definition(env[d]) for d in def_ids}
    clusters = compute_clusters(graph, def_ids)
    jobs = []
    for c in topo_order(clusters, env):
        ordered = tuple(sorted(c.ids, key=lambda d: (graph.graph_hash(node_of[d]), d)))
        jobs.append(ClusterJob(
            def_ids=ordered,
            hash=c.hash,
            graph=graph.definition_input_graph(ordered, max_nodes=max_nodes),
            names=tuple(env[d].name for d in ordered),
            trainable=any(env[d].kind is not DefKind.SYMBOL for d in c.ids),
        ))
    return jobs


@dataclass(frozen=True, eq=False)
class CompiledGraph:
    """An InputGraph lowered to the arrays the forward pass consumes."""
    num_nodes: int
    plain_ids: np.ndarray       # node positions initialized from node_emb
    plain_labels: np.ndarray
    def_ids: np.ndarray         # node positions initialized from def_emb
    def_rows: np.ndarray
    num_zero: int               # definition-task roots, zero-initialized
    init_perm: np.ndarray       # restores node order after the 3-way concat
    msg_src: np.ndarray
    msg_label: np.ndarray
    msg_dst: np.ndarray
    inv_deg: np.ndarray
    roots: np.ndarray
    context: np.ndarray


class Model:
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        h = cfg.hidden
        rng = np.random.default_rng(derive_seed(cfg.seed, "model-init"))

        def unit_rows(n: int, d: int) -> np.ndarray:
            m = rng.normal(size=(n, d))
            return m / np.linalg.norm(m, axis=1, keepdims=True)

        def glorot(n_in: int, n_out: int) -> np.ndarray:
            s = math.sqrt(2.0 / (n_in + n_out))
            return rng.normal(scale=s, size=(n_in, n_out))

        p: dict[str, Var] = {}
        p["node_emb"] = Var(unit_rows(NUM_NODE_LABELS, h))
        p["edge_emb"] = Var(unit_rows(NUM_MESSAGE_LABELS, h))
        p["tactic_emb"] = Var(unit_rows(NUM_TACTICS, h))
        p["def_emb"] = Var(unit_rows(cfg.def_capacity, h))
        for t in range(cfg.hops):
            p[f"hop{t}/conv_w"] = Var(glorot(2 * h, h))
            p[f"hop{t}/conv_b"] = Var(np.zeros(h))
            p[f"hop{t}/mlp_w1"] = Var(glorot(h, 2 * h))
            p[f"hop{t}/mlp_b1"] = Var(np.zeros(2 * h))
            p[f"hop{t}/mlp_w2"] = Var(glorot(2 * h, h))
            p[f"hop{t}/mlp_b2"] = Var(np.zeros(h))
            p[f"hop{t}/ln_g"] = Var(np.ones(h))
            p[f"hop{t}/ln_b"] = Var(np.zeros(h))
        def_in = 3 * h if cfg.use_names else 2 * h
        p["def_head/w1"] = Var(glorot(def_in, h))
        p["def_head/b1"] = Var(np.zeros(h))
        p["def_head/w2"] = Var(glorot(h, h))
        p["def_head/b2"] = Var(np.zeros(h))
        p["tac_head/w1"] = Var(glorot(h, h))
        p["tac_head/b1"] = Var(np.zeros(h))
        p["tac_head/w2"] = Var(glorot(h, h))
        p["tac_head/b2"] = Var(np.zeros(h))
        p["rnn/w1"] = Var(glorot(2 * h, 2 * h))
        p["rnn/b1"] = Var(np.zeros(2 * h))
        p["rnn/w2"] = Var(glorot(2 * h, 2 * h))
        p["rnn/b2"] = Var(np.zeros(2 * h))
        p["local_q/w1"] = Var(glorot(h, h))
        p["local_q/b1"] = Var(np.zeros(h))
        p["local_q/w2"] = Var(glorot(h, h))
        p["local_q/b2"] = Var(np.zeros(h))
        p["global_q/w1"] = Var(glorot(h, h))
        p["global_q/b1"] = Var(np.zeros(h))
        p["global_q/w2"] = Var(glorot(h, h))
        p["global_q/b2"] = Var(np.zeros(h))
        # softplus(raw) = 1 at init
        p["temp_raw"] = Var(np.full((1, 1), math.log(math.e - 1.0)))
        if cfg.use_names:
            p["name/char_emb"] = Var(unit_rows(_CHAR_VOCAB, h))
            p["name/fw_w"] = Var(glorot(2 * h, h))
            p["name/fw_b"] = Var(np.zeros(h))
            p["name/bw_w"] = Var(glorot(2 * h, h))
            p["name/bw_b"] = Var(np.zeros(h))
            p["name/out_w"] = Var(glorot(2 * h, h))
            p["name/out_b"] = Var(np.zeros(h))
        self.params = p

        self.row_state = np.full(cfg.def_capacity, ROW_UNSET, dtype=np.uint8)
        self._manifest: dict[int, tuple[int, ...]] = {}   # cluster hash -> rows
        self._def_rows: dict[int, int] = {}               # DefId -> row
        self._live = 0
        self.def_task_calls = 0
        self.trained_tactics = np.ones(NUM_TACTICS, dtype=bool)

    # --- rows -------------------------------------------------------------

    @property
    def live_rows(self) -> int:
        return self._live

    def row_for(self, def_id: int) -> int:
        try:
            row = self._def_rows[def_id]
        except KeyError:
            raise UnsetDefinitionRow(f"definition {def_id} has no table row") from None
        if self.row_state[row] == ROW_UNSET:
            raise UnsetDefinitionRow(f"row {row} for definition {def_id} is unset")
        return row

    def has_row(self, def_id: int) -> bool:
        return def_id in self._def_rows and \
            self.row_state[self._def_rows[def_id]] != ROW_UNSET

    def _grow(self, needed: int) -> None:
        cap = self.params["def_emb"].value.shape[0]
        new_cap = max(2 * cap, needed)
        if new_cap <= cap:
            raise CapacityExceeded(f"cannot grow table to {needed}")
        log.info("growing definition table %d -> %d rows", cap, new_cap)
        rng = np.random.default_rng(derive_seed(self.cfg.seed, "grow", new_cap))
        extra = rng.normal(size=(new_cap - cap, self.cfg.hidden))
        extra /= np.linalg.norm(extra, axis=1, keepdims=True)
        self.params["def_emb"] = Var(
            np.concatenate([self.params["def_emb"].value, extra], axis=0))
        self.row_state = np.concatenate(
            [self.row_state, np.full(new_cap - cap, ROW_UNSET, dtype=np.uint8)])

    def _alloc_rows(self, n: int) -> tuple[int, ...]:
        if self._live + n > self.params["def_emb"].value.shape[0]:
            self._grow(self._live + n)
        rows = tuple(range(self._live, self._live + n))
        self._live += n
        return rows

    def _bind(self, job: ClusterJob, rows: tuple[int, ...]) -> None:
        for d, r in zip(job.def_ids, rows):
            self._def_rows[d] = r

    def register_training_clusters(self, jobs: Sequence[ClusterJob]) -> None:
        """Give every training cluster a Learned row (values start random)."""
        for job in jobs:
            rows = self._manifest.get(job.hash)
            if rows is None:
                rows = self._alloc_rows(len(job.def_ids))
                self._manifest[job.hash] = rows
                self.row_state[list(rows)] = ROW_LEARNED
            self._bind(job, rows)

    # --- forward pass -----------------------------------------------------

    def compile(self, ig: InputGraph, zero_roots: bool = False) -> CompiledGraph:
        roots = frozenset(ig.roots) if zero_roots else frozenset()
        plain_ids, plain_labels, def_ids, def_rows, zero_ids = [], [], [], [], []
        for i, lbl in enumerate(ig.labels):
            if i in roots:
                zero_ids.append(i)
            elif i in ig.def_refs:
                def_ids.append(i)
                def_rows.append(self.row_for(ig.def_refs[i]))
            else:
                plain_ids.append(i)
                plain_labels.append(lbl)
        n = len(ig.labels)
        order = plain_ids + def_ids + zero_ids
        perm = np.empty(n, dtype=np.int64)
        perm[order] = np.arange(n)
        mg = to_message_graph(ig)
        deg = mg.deg.astype(np.float64)
        if not self.cfg.deg_includes_self:
            deg = np.maximum(deg - 1.0, 1.0)
        return CompiledGraph(
            num_nodes=n,
            plain_ids=np.asarray(plain_ids, dtype=np.int64),
            plain_labels=np.asarray(plain_labels, dtype=np.int64),
            def_ids=np.asarray(def_ids, dtype=np.int64),
            def_rows=np.asarray(def_rows, dtype=np.int64),
            num_zero=len(zero_ids),
            init_perm=perm,
            msg_src=mg.src,
            msg_label=mg.label,
            msg_dst=mg.dst,
            inv_deg=1.0 / deg,
            roots=np.asarray(ig.roots, dtype=np.int64),
            context=np.asarray(ig.context_nodes, dtype=np.int64),
        )

    def _gnn(self, t: Tape, cg: CompiledGraph) -> Var:
        p = self.params
        parts = []
        if len(cg.plain_ids):
            parts.append(ad.gather(t, p["node_emb"], cg.plain_labels))
        if len(cg.def_ids):
            parts.append(ad.gather(t, p["def_emb"], cg.def_rows))
        if cg.num_zero:
            parts.append(Var(np.zeros((cg.num_zero, self.cfg.hidden)),
                             requires=False))
        stacked = parts[0] if len(parts) == 1 else ad.concat(t, parts, axis=0)
        x = ad.gather(t, stacked, cg.init_perm)
        for i in range(self.cfg.hops):
            src = ad.gather(t, x, cg.msg_src)
            lab = ad.gather(t, p["edge_emb"], cg.msg_label)
            m = ad.dense(t, p[f"hop{i}/conv_w"], p[f"hop{i}/conv_b"],
                         ad.concat(t, [lab, src], axis=1))
            agg = ad.segment_sum(t, m, cg.msg_dst, cg.num_nodes)
            xhat = ad.relu(t, ad.scale_rows(t, agg, cg.inv_deg))
            y = ad.dense(t, p[f"hop{i}/mlp_w2"], p[f"hop{i}/mlp_b2"],
                         ad.relu(t, ad.dense(t, p[f"hop{i}/mlp_w1"],
                                             p[f"hop{i}/mlp_b1"], xhat)))
            y = ad.dropout(t, y, self.cfg.dropout)
            x = ad.layernorm(t, ad.add(t, x, y),
                             p[f"hop{i}/ln_g"], p[f"hop{i}/ln_b"])
        return x

    def _encode_name(self, t: Tape, name: str) -> Var:
        p = self.params
        ids = np.array([ord(c) - _CHAR_BASE + 1
                        if _CHAR_BASE <= ord(c) <= 126 else 0
                        for c in name], dtype=np.int64)
        if len(ids) == 0:
            ids = np.array([0], dtype=np.int64)
        chars = ad.gather(t, p["name/char_emb"], ids)
        h = self.cfg.hidden

        def run(order: range, w: Var, b: Var) -> Var:
            state = Var(np.zeros((1, h)), requires=False)
            for i in order:
                xi = ad.gather(t, chars, np.array([i]))
                state = ad.tanh(t, ad.dense(t, w, b,
                                            ad.concat(t, [xi, state], axis=1)))
            return state

        fw = run(range(len(ids)), p["name/fw_w"], p["name/fw_b"])
        bw = run(range(len(ids) - 1, -1, -1), p["name/bw_w"], p["name/bw_b"])
        return ad.dense(t, p["name/out_w"], p["name/out_b"],
                        ad.concat(t, [fw, bw], axis=1))

    def _def_task(self, t: Tape, cg: CompiledGraph, names: Sequence[str]) -> Var:
        """Per-root unit embeddings for one cluster graph."""
        self.def_task_calls += 1
        p = self.params
        x = self._gnn(t, cg)
        pooled = ad.mean_pool(t, x)
        r = len(cg.roots)
        root_emb = ad.gather(t, x, cg.roots)
        pooled_b = ad.gather(t, pooled, np.zeros(r, dtype=np.int64))
        parts = [pooled_b, root_emb]
        if self.cfg.use_names:
            embs = [self._encode_name(t, nm) for nm in names]
            parts.append(embs[0] if r == 1 else ad.concat(t, embs, axis=0))
        z = ad.dense(t, p["def_head/w2"], p["def_head/b2"],
                     ad.relu(t, ad.dense(t, p["def_head/w1"], p["def_head/b1"],
                                         ad.concat(t, parts, axis=1))))
        return ad.unit_normalize(t, z)

    def definition_task(self, job: ClusterJob) -> np.ndarray:
        """Inference-mode definition embeddings, one row per cluster member."""
        t = Tape(training=False, record=False)
        cg = self.compile(job.graph, zero_roots=True)
        return self._def_task(t, cg, job.names).value

    def _tactic_logits(self, t: Tape, pooled: Var) -> Var:
        p = self.params
        z = ad.dense(t, p["tac_head/w2"], p["tac_head/b2"],
                     ad.relu(t, ad.dense(t, p["tac_head/w1"], p["tac_head/b1"],
                                         pooled)))
        return ad.matmul_t(t, z, p["tactic_emb"])

    def _slot_queries(self, t: Tape, pooled: Var, base_id: int,
                      num_slots: int) -> list[Var]:
        """Recurrent decoder: slot i's query seed, independent of chosen args."""
        p = self.params
        h = self.cfg.hidden
        temb = ad.gather(t, p["tactic_emb"], np.array([base_id]))
        h1 = h2 = temb
        ys = []
        for _ in range(num_slots):
            o1 = ad.relu(t, ad.dense(t, p["rnn/w1"], p["rnn/b1"],
                                     ad.concat(t, [pooled, h1], axis=1)))
            out1, h1 = ad.split(t, o1, [h, h], axis=1)
            o2 = ad.relu(t, ad.dense(t, p["rnn/w2"], p["rnn/b2"],
                                     ad.concat(t, [out1, h2], axis=1)))
            y, h2 = ad.split(t, o2, [h, h], axis=1)
            ys.append(y)
        return ys

    def _slot_log_probs(self, t: Tape, y: Var, ctx_emb: Optional[Var],
                        cand_rows: np.ndarray) -> Var:
        """log-softmax over [local context nodes] ++ [global candidates]."""
        p = self.params
        pieces = []
        if ctx_emb is not None:
            lq = ad.dense(t, p["local_q/w2"], p["local_q/b2"],
                          ad.relu(t, ad.dense(t, p["local_q/w1"],
                                              p["local_q/b1"], y)))
            pieces.append(ad.matmul_t(t, lq, ctx_emb))
        if len(cand_rows):
            gq = ad.unit_normalize(
                t, ad.dense(t, p["global_q/w2"], p["global_q/b2"],
                            ad.relu(t, ad.dense(t, p["global_q/w1"],
                                                p["global_q/b1"], y))))
            cand = ad.gather(t, p["def_emb"], cand_rows)
            raw = ad.matmul_t(t, gq, cand)
            pieces.append(ad.scale_by(t, raw, ad.softplus(t, p["temp_raw"])))
        logits = pieces[0] if len(pieces) == 1 else ad.concat(t, pieces, axis=1)
        return ad.log_softmax(t, logits)

    # --- prediction ---------------------------------------------------------

    def predict(self, ig: InputGraph,
                avail_tactics: Optional[Iterable[int]] = None,
                avail_def_ids: Sequence[int] = (),
                beam_width: Optional[int] = None,
                ) -> list[tuple[TacticInvocation, float]]:
        """Beam of (invocation, log-prob), best first.

        Base tactics are restricted to avail_tactics (default: all) that also
        occurred in training data. Global argument candidates come from
        avail_def_ids, locals from the state's hypotheses.
        """
        width = beam_width or self.cfg.beam_width
        mask = np.zeros(NUM_TACTICS, dtype=bool)
        if avail_tactics is None:
            mask[:] = True
        else:
            mask[list(avail_tactics)] = True
        mask &= self.trained_tactics
        if not mask.any():
            raise NoAvailableTactics("no base tactic is both available and trained")

        t = Tape(training=False, record=False)
        cg = self.compile(ig)
        x = self._gnn(t, cg)
        pooled = ad.mean_pool(t, x)

        logits = self._tactic_logits(t, pooled)
        bias = np.where(mask, 0.0, NEG_INF)[None, :]
        base_lp = ad.log_softmax(
            t, ad.add(t, logits, Var(bias, requires=False))).value[0]

        rows = np.array([self.row_for(d) for d in avail_def_ids], dtype=np.int64)
        ctx = cg.context
        num_local = len(ctx)
        ctx_emb = ad.gather(t, x, ctx) if num_local else None

        entries: list[tuple[float, int, tuple[int, ...]]] = []
        for b in range(NUM_TACTICS):
            if not mask[b]:
                continue
            nslots = TACTIC_SLOTS[b]
            if nslots == 0:
                entries.append((float(base_lp[b]), b, ()))
                continue
            if num_local + len(rows) == 0:
                continue
            ys = self._slot_queries(t, pooled, b, nslots)
            seq_ids = np.zeros((1, 0), dtype=np.int64)
            seq_lps = np.zeros(1)
            for y in ys:
                slot_lp = self._slot_log_probs(t, y, ctx_emb, rows).value[0]
                total = seq_lps[:, None] + slot_lp[None, :]
                flat = total.ravel()
                if len(flat) > width:
                    sel = np.argpartition(-flat, width - 1)[:width]
                else:
                    sel = np.arange(len(flat))
                # exact order: best log-prob first, then lexicographic args
                sel = sel[np.lexsort((sel, -flat[sel]))]
                prev, cand = np.divmod(sel, len(slot_lp))
                seq_ids = np.concatenate(
                    [seq_ids[prev], cand[:, None]], axis=1)
                seq_lps = flat[sel]
            for ids, lp in zip(seq_ids, seq_lps):
                entries.append((float(base_lp[b] + lp), b, tuple(int(i) for i in ids)))

        def arg_key(choice: int):
            if choice < num_local:
                return (0, choice)
            return (1, int(avail_def_ids[choice - num_local]))

        entries.sort(key=lambda e: (-e[0], e[1], tuple(arg_key(c) for c in e[2])))
        out = []
        for lp, b, choices in entries[:width]:
            args = tuple(Local(c) if c < num_local
                         else Global(int(avail_def_ids[c - num_local]))
                         for c in choices)
            out.append((TacticInvocation(BASE_TACTICS[b], args), lp))
        return out

    # --- training -----------------------------------------------------------

    def compute_loss(self, t: Tape, def_batch: Sequence[ClusterJob],
                     state_batch: Sequence["StateSample"],
                     ) -> tuple[Var, Var, Var]:
        """(total, definition, tactic) losses for one batch, on tape t."""
        l_def = Var(np.asarray(0.0), requires=False)
        if self.cfg.use_def_task and def_batch:
            raws = []
            sizes = []
            for job in def_batch:
                cg = self.compile(job.graph, zero_roots=True)
                out = self._def_task(t, cg, job.names)
                targets = ad.gather(t, self.params["def_emb"],
                                    np.array(self._manifest[job.hash]))
                raws.append(ad.sum_all(t, ad.cosine_loss(t, out, targets)))
                sizes.append(len(job.def_ids))
            n_defs = sum(sizes)
            l_def = ad.weighted_sum(
                t, raws, [1.0 / (math.sqrt(s) * n_defs) for s in sizes])

        l_tac = Var(np.asarray(0.0), requires=False)
        if state_batch:
            pieces = []
            for s in state_batch:
                x = self._gnn(t, s.graph)
                pooled = ad.mean_pool(t, x)
                logits = self._tactic_logits(t, pooled)
                pieces.append(ad.sum_all(t, ad.softmax_cross_entropy(
                    t, logits, np.array([s.base_id]))))
                if s.slot_targets:
                    ctx_emb = ad.gather(t, x, s.graph.context) \
                        if len(s.graph.context) else None
                    ys = self._slot_queries(t, pooled, s.base_id,
                                            len(s.slot_targets))
                    for y, target in zip(ys, s.slot_targets):
                        lp = self._slot_log_probs(t, y, ctx_emb, s.cand_rows)
                        pieces.append(ad.sum_all(t, ad.softmax_cross_entropy(
                            t, lp, np.array([target]))))
            l_tac = ad.weighted_sum(t, pieces, [1.0 / len(state_batch)] * len(pieces))

        loss = ad.weighted_sum(
            t, [l_def, l_tac],
            [self.cfg.def_weight if self.cfg.use_def_task else 0.0, 1.0])
        return loss, l_def, l_tac

    def train_step(self, def_batch: Sequence[ClusterJob],
                   state_batch: Sequence["StateSample"],
                   adam: ad.Adam, rng: np.random.Generator) -> dict[str, float]:
        t = Tape(training=True, record=True, rng=rng)
        loss, l_def, l_tac = self.compute_loss(t, def_batch, state_batch)
        t.backward(loss)
        adam.step()
        adam.zero_grad()
        self.renormalize()
        return {"loss": float(loss.value), "def": float(l_def.value),
                "tactic": float(l_tac.value)}

    def renormalize(self) -> None:
        for name in ("node_emb", "def_emb"):
            v = self.params[name].value
            v /= np.maximum(np.linalg.norm(v, axis=1, keepdims=True), 1e-12)

    # --- online table maintenance --------------------------------------------

    def update_definition_table(self, jobs: Sequence[ClusterJob],
                                mode: TableMode) -> dict[str, int]:
        """Bind clusters to rows, computing or freezing unseen ones.

        jobs must be topologically ordered (dependencies first); Recalc
        recomputes every cluster's rows in that order, Update only unseen
        ones, Frozen assigns seeded random unit rows to unseen ones.
        """
        new_clusters = 0
        for job in jobs:
            rows = self._manifest.get(job.hash)
            if rows is not None:
                self._bind(job, rows)
                if mode is TableMode.RECALC:
                    vals = self.definition_task(job)
                    self.params["def_emb"].value[list(rows)] = vals
                    self.row_state[list(rows)] = ROW_COMPUTED
                continue
            new_clusters += 1
            rows = self._alloc_rows(len(job.def_ids))
            self._manifest[job.hash] = rows
            self._bind(job, rows)
            if mode is TableMode.FROZEN:
                rng = np.random.default_rng(
                    derive_seed(self.cfg.seed, "frozen-row", job.hash))
                vals = rng.normal(size=(len(rows), self.cfg.hidden))
                vals /= np.linalg.norm(vals, axis=1, keepdims=True)
                self.params["def_emb"].value[list(rows)] = vals
                self.row_state[list(rows)] = ROW_FROZEN
            else:
                vals = self.definition_task(job)
                self.params["def_emb"].value[list(rows)] = vals
                self.row_state[list(rows)] = ROW_COMPUTED
        return {"clusters": len(jobs), "new_clusters": new_clusters}

    # --- persistence ----------------------------------------------------------

    def save(self, path: str) -> None:
        tensors = {f"param/{k}": v.value for k, v in self.params.items()}
        tensors["state/row_state"] = self.row_state
        tensors["state/trained_tactics"] = \
            self.trained_tactics.astype(np.uint8)
        hashes = sorted(self._manifest)
        tensors["manifest/hashes"] = np.array(hashes, dtype=np.uint64)
        tensors["manifest/counts"] = np.array(
            [len(self._manifest[h]) for h in hashes], dtype=np.int64)
        tensors["manifest/rows"] = np.array(
            [r for h in hashes for r in self._manifest[h]], dtype=np.int64)
        bind = sorted(self._def_rows.items())
        tensors["binding/def_ids"] = np.array([d for d, _ in bind], dtype=np.int64)
        tensors["binding/rows"] = np.array([r for _, r in bind], dtype=np.int64)
        meta = {"config": self.cfg.to_dict(), "live": self._live,
                "def_task_calls": self.def_task_calls}
        ad.save_tensors(path, tensors, meta)

    @classmethod
    def load(cls, path: str) -> "Model":
        tensors, meta = ad.load_tensors(path)
        cfg = ModelConfig.from_dict(meta["config"])
        model = cls(cfg)
        cap = tensors["param/def_emb"].shape[0]
        if cap != cfg.def_capacity:
            model.params["def_emb"] = Var(np.zeros((cap, cfg.hidden)))
            model.row_state = np.zeros(cap, dtype=np.uint8)
        for k, v in model.params.items():
            stored = tensors[f"param/{k}"]
            if stored.shape != v.value.shape:
                raise ValueError(f"checkpoint shape mismatch for {k}")
            v.value[...] = stored
        model.row_state[...] = tensors["state/row_state"]
        model.trained_tactics = tensors["state/trained_tactics"].astype(bool)
        model._live = int(meta["live"])
        counts = tensors["manifest/counts"]
        rows = tensors["manifest/rows"]
        off = 0
        for h, c in zip(tensors["manifest/hashes"], counts):
            model._manifest[int(h)] = tuple(int(r) for r in rows[off:off + c])
            off += int(c)
        for d, r in zip(tensors["binding/def_ids"], tensors["binding/rows"]):
            model._def_rows[int(d)] = int(r)
        return model


@dataclass(frozen=True, eq=False)
class StateSample:
    """One supervised prediction step, lowered for training."""
    graph: CompiledGraph
    base_id: int
    slot_targets: tuple[int, ...]   # index into [locals ++ cand_rows]
    cand_rows: np.ndarray = field(repr=False)
