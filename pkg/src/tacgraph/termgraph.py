"""Shared term graph: one hash-consed store for definitions and proof states.

Structurally identical subterms (up to de Bruijn representation and binder
targets) map to a single node. Variables carry a back edge to their binder;
with those edges removed the graph is acyclic. Pruned, root-anchored
subgraphs (`InputGraph`) feed the predictors, and each input graph can be
compiled to the symmetrized message form used by the network.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum
from typing import Iterable, Optional, Sequence

import numpy as np

from .kernel import (BoundVar, Const, DefKind, Definition, Environment, Eq, FnApp,
                     Forall, Formula, FreeVar, Implies, ProofState, Term,
                     free_indices, strip_foralls)
from .util import combine64


class GraphError(Exception):
    pass


class DanglingReference(GraphError):
    pass


class FrozenGraph(GraphError):
    pass


class CycleDetected(GraphError):
    pass


class NodeLabel(IntEnum):
    FORALL = 0
    IMPLIES = 1
    EQ = 2
    APP = 3
    VAR = 4
    DEF = 5
    STATE_ROOT = 6
    CTX_HYP = 7


class EdgeLabel(IntEnum):
    APP_FUN = 0
    APP_ARG = 1
    FORALL_BODY = 2
    IMPL_PREMISE = 3
    IMPL_CONCL = 4
    EQ_LHS = 5
    EQ_RHS = 6
    BINDER_REF = 7
    CTX_ELEM = 8
    GOAL = 9


NUM_NODE_LABELS = len(NodeLabel)
NUM_EDGE_LABELS = len(EdgeLabel)
# forward labels, mirrored reverse labels, one self-loop label
NUM_MESSAGE_LABELS = 2 * NUM_EDGE_LABELS + 1


@dataclass(frozen=True)
class InputGraph:
    """Pruned subgraph with local ids 0..n-1 in BFS discovery order."""
    labels: tuple[int, ...]
    edges: tuple[tuple[int, int, int], ...]   # (src, edge label, dst)
    def_refs: dict[int, int]                  # local id -> DefId, every DEF node
    roots: tuple[int, ...] = ()               # definition-task entry points
    state_root: Optional[int] = None          # prediction-task root
    context_nodes: tuple[int, ...] = ()       # hypothesis wrappers, in order


@dataclass(frozen=True)
class MessageGraph:
    """Symmetrized edge list: forward, reversed, then one self edge per node."""
    num_nodes: int
    src: np.ndarray
    label: np.ndarray
    dst: np.ndarray
    deg: np.ndarray  # incoming message count per node, self edge included


@dataclass(frozen=True)
class Cluster:
    ids: tuple[int, ...]       # member DefIds, ascending
    package: str
    hash: int                  # content digest over member root digests


class TermGraph:
    """Append-only hash-consed node store over one Environment."""

    def __init__(self, env: Environment):
        self.env = env
        self.labels: list[int] = []
        self.out: list[list[tuple[int, int]]] = []
        self.def_of: dict[int, int] = {}      # node -> DefId (DEF nodes)
        self.scope_level: dict[int, int] = {}  # node -> scope constant level
        self.def_roots: dict[int, int] = {}   # DefId -> node
        self.state_meta: dict[int, tuple[int, ...]] = {}  # state root -> hyp wrappers
        self._hc: dict = {}
        self._frozen = False

    # --- store primitives ---

    def __len__(self) -> int:
        return len(self.labels)

    def freeze(self) -> None:
        self._frozen = True

    def _node(self, label: NodeLabel) -> int:
        if self._frozen:
            raise FrozenGraph("graph is frozen")
        self.labels.append(int(label))
        self.out.append([])
        return len(self.labels) - 1

    def _edge(self, src: int, label: EdgeLabel, dst: int) -> None:
        if self._frozen:
            raise FrozenGraph("graph is frozen")
        self.out[src].append((int(label), dst))

    # --- interning ---

    def _def_node(self, def_id: int) -> int:
        n = self.def_roots.get(def_id)
        if n is None:
            raise DanglingReference(f"definition {def_id} not interned yet")
        return n

    def _intern_term(self, t: Term, binders: tuple[int, ...]) -> int:
        if isinstance(t, BoundVar):
            b = binders[t.index]
            key = ("var", b)
            n = self._hc.get(key)
            if n is None:
                n = self._node(NodeLabel.VAR)
                self._hc[key] = n
                self._edge(n, EdgeLabel.BINDER_REF, b)
            return n
        if isinstance(t, FreeVar):
            skey = ("scope", t.level)
            s = self._hc.get(skey)
            if s is None:
                s = self._node(NodeLabel.CTX_HYP)
                self._hc[skey] = s
                self.scope_level[s] = t.level
            key = ("fvar", t.level)
            n = self._hc.get(key)
            if n is None:
                n = self._node(NodeLabel.VAR)
                self._hc[key] = n
                self._edge(n, EdgeLabel.BINDER_REF, s)
            return n
        if isinstance(t, Const):
            return self._def_node(t.def_id)
        if isinstance(t, FnApp):
            cur = self._def_node(t.def_id)
            for a in t.args:
                an = self._intern_term(a, binders)
                key = ("app", cur, an)
                n = self._hc.get(key)
                if n is None:
                    n = self._node(NodeLabel.APP)
                    self._hc[key] = n
                    self._edge(n, EdgeLabel.APP_FUN, cur)
                    self._edge(n, EdgeLabel.APP_ARG, an)
                cur = n
            return cur
        raise GraphError(f"not a term: {t!r}")

    def _intern_formula(self, f: Formula, binders: tuple[int, ...]) -> int:
        if isinstance(f, Eq):
            l = self._intern_term(f.lhs, binders)
            r = self._intern_term(f.rhs, binders)
            key = ("eq", l, r)
            n = self._hc.get(key)
            if n is None:
                n = self._node(NodeLabel.EQ)
                self._hc[key] = n
                self._edge(n, EdgeLabel.EQ_LHS, l)
                self._edge(n, EdgeLabel.EQ_RHS, r)
            return n
        if isinstance(f, Implies):
            p = self._intern_formula(f.premise, binders)
            c = self._intern_formula(f.conclusion, binders)
            key = ("impl", p, c)
            n = self._hc.get(key)
            if n is None:
                n = self._node(NodeLabel.IMPLIES)
                self._hc[key] = n
                self._edge(n, EdgeLabel.IMPL_PREMISE, p)
                self._edge(n, EdgeLabel.IMPL_CONCL, c)
            return n
        if isinstance(f, Forall):
            # α-equivalent subtrees whose free variables point at the same
            # binder nodes share one subgraph; the key captures exactly that
            frees = sorted(free_indices(f))
            key = ("bind", f, tuple(binders[i] for i in frees))
            n = self._hc.get(key)
            if n is None:
                n = self._node(NodeLabel.FORALL)
                self._hc[key] = n
                b = self._intern_formula(f.body, (n,) + binders)
                self._edge(n, EdgeLabel.FORALL_BODY, b)
            return n
        raise GraphError(f"not a formula: {f!r}")

    def intern_formula(self, f: Formula) -> int:
        """Intern a formula outside any definition (free variables allowed)."""
        return self._intern_formula(f, ())

    def intern_definition(self, d: Definition) -> int:
        """Intern one definition; referenced DefIds must already be present.

        Idempotent: re-interning returns the existing root and adds nothing.
        Theorem proofs are not interned.
        """
        existing = self.def_roots.get(d.id)
        if existing is not None:
            return existing
        n = self._node(NodeLabel.DEF)
        self.def_of[n] = d.id
        self.def_roots[d.id] = n
        self._hc[("def", d.id)] = n
        if d.statement is not None:
            stmt = self._intern_formula(d.statement, ())
            self._edge(n, EdgeLabel.GOAL, stmt)
        return n

    def intern_proof_state(self, s: ProofState) -> tuple[int, tuple[int, ...]]:
        """Intern a proof state; returns (root, hypothesis wrapper nodes)."""
        key = ("state", s)
        n = self._hc.get(key)
        if n is not None:
            return n, self.state_meta[n]
        root = self._node(NodeLabel.STATE_ROOT)
        self._hc[key] = root
        for level in range(s.num_free):
            skey = ("scope", level)
            sn = self._hc.get(skey)
            if sn is None:
                sn = self._node(NodeLabel.CTX_HYP)
                self._hc[skey] = sn
                self.scope_level[sn] = level
            self._edge(root, EdgeLabel.CTX_ELEM, sn)
        wrappers = []
        for h in s.hypotheses:
            fn = self._intern_formula(h, ())
            w = self._node(NodeLabel.CTX_HYP)
            self._edge(root, EdgeLabel.CTX_ELEM, w)
            self._edge(w, EdgeLabel.CTX_ELEM, fn)
            wrappers.append(w)
        gn = self._intern_formula(s.goal, ())
        self._edge(root, EdgeLabel.GOAL, gn)
        meta = tuple(wrappers)
        self.state_meta[root] = meta
        return root, meta

    # --- extraction ---

    def extract_subgraph(self, roots: Sequence[int], max_nodes: int = 1024,
                         context_nodes: Sequence[int] = (),
                         as_state: bool = False) -> InputGraph:
        """Forward BFS closure from roots, pruned to the first max_nodes nodes.

        Traversal never expands out of a DEF node unless it is a root, so
        dependency definitions stay leaves. Local ids follow discovery order:
        roots come first, in the order given.
        """
        if max_nodes < 1:
            raise GraphError("max_nodes must be positive")
        if len(set(roots)) > max_nodes:
            raise GraphError("more roots than max_nodes")
        local: dict[int, int] = {}
        order: list[int] = []
        queue: list[int] = []
        root_set = set(roots)
        for r in roots:
            if r not in local:
                local[r] = len(order)
                order.append(r)
                queue.append(r)
        qi = 0
        while qi < len(queue):
            n = queue[qi]
            qi += 1
            if self.labels[n] == NodeLabel.DEF and n not in root_set:
                continue  # dependency leaf
            for _, dst in self.out[n]:
                if dst not in local and len(order) < max_nodes:
                    local[dst] = len(order)
                    order.append(dst)
                    queue.append(dst)
        edges = []
        for n in order:
            if self.labels[n] == NodeLabel.DEF and n not in root_set:
                continue
            for lbl, dst in self.out[n]:
                if dst in local:
                    edges.append((local[n], lbl, local[dst]))
        def_refs = {local[n]: self.def_of[n] for n in order
                    if self.labels[n] == NodeLabel.DEF}
        kept_ctx = tuple(local[c] for c in context_nodes if c in local)
        return InputGraph(
            labels=tuple(self.labels[n] for n in order),
            edges=tuple(edges),
            def_refs=def_refs,
            roots=() if as_state else tuple(local[r] for r in roots),
            state_root=local[roots[0]] if as_state else None,
            context_nodes=kept_ctx,
        )

    def definition_input_graph(self, def_ids: Sequence[int],
                               max_nodes: int = 1024) -> InputGraph:
        return self.extract_subgraph([self._def_node(d) for d in def_ids], max_nodes)

    def state_input_graph(self, s: ProofState, max_nodes: int = 1024) -> InputGraph:
        root, wrappers = self.intern_proof_state(s)
        return self.extract_subgraph([root], max_nodes, context_nodes=wrappers,
                                     as_state=True)

    # --- digests ---

    def graph_hash(self, node: int) -> int:
        """Stable content digest of the tree reachable from node.

        Binder back edges are replaced by de Bruijn distance, dependency DEF
        leaves by their qualified name, so the digest is α-invariant and
        independent of node numbering. A definition root digests its kind and
        statement but not its own name; bare symbols digest name and arity.
        """
        binder_depth: dict[int, int] = {}

        def go(n: int, depth: int, is_root: bool) -> int:
            lbl = self.labels[n]
            if lbl == NodeLabel.DEF:
                did = self.def_of[n]
                d = self.env[did]
                if not is_root:
                    return combine64("d", d.name)
                if d.kind is DefKind.SYMBOL:
                    return combine64("droot-sym", d.arity, d.name)
                stmt = combine64("none") if not self.out[n] else \
                    go(self.out[n][0][1], depth, False)
                return combine64("droot", d.kind.value, stmt)
            if lbl == NodeLabel.VAR:
                target = self.out[n][0][1]
                if target in binder_depth:
                    return combine64("v", depth - binder_depth[target] - 1)
                return combine64("c", self.scope_level[target])
            if lbl == NodeLabel.FORALL:
                binder_depth[n] = depth
                h = go(self.out[n][0][1], depth + 1, False)
                del binder_depth[n]
                return combine64("forall", h)
            if lbl == NodeLabel.CTX_HYP:
                if n in self.scope_level:
                    return combine64("scopevar", self.scope_level[n])
                return combine64("hyp", go(self.out[n][0][1], depth, False))
            tag = {NodeLabel.APP: "app", NodeLabel.EQ: "eq",
                   NodeLabel.IMPLIES: "impl",
                   NodeLabel.STATE_ROOT: "state"}[lbl]
            parts: list = [tag]
            for _, dst in self.out[n]:
                parts.append(go(dst, depth, False))
            return combine64(*parts)

        return go(node, 0, self.labels[node] == NodeLabel.DEF)

    # --- decoding (tests, debugging, CLI dumps) ---

    def decode_term(self, n: int, binders: tuple[int, ...]) -> Term:
        lbl = self.labels[n]
        if lbl == NodeLabel.DEF:
            return Const(self.def_of[n])
        if lbl == NodeLabel.VAR:
            target = self.out[n][0][1]
            if target in binders:
                return BoundVar(binders.index(target))
            return FreeVar(self.scope_level[target])
        if lbl == NodeLabel.APP:
            spine = []
            cur = n
            while self.labels[cur] == NodeLabel.APP:
                fun = arg = None
                for el, dst in self.out[cur]:
                    if el == EdgeLabel.APP_FUN:
                        fun = dst
                    elif el == EdgeLabel.APP_ARG:
                        arg = dst
                spine.append(arg)
                cur = fun
            args = tuple(self.decode_term(a, binders) for a in reversed(spine))
            return FnApp(self.def_of[cur], args)
        raise GraphError(f"node {n} is not a term node")

    def decode_formula(self, n: int, binders: tuple[int, ...] = ()) -> Formula:
        lbl = self.labels[n]
        edges = {el: dst for el, dst in self.out[n]}
        if lbl == NodeLabel.EQ:
            return Eq(self.decode_term(edges[EdgeLabel.EQ_LHS], binders),
                      self.decode_term(edges[EdgeLabel.EQ_RHS], binders))
        if lbl == NodeLabel.IMPLIES:
            return Implies(self.decode_formula(edges[EdgeLabel.IMPL_PREMISE], binders),
                           self.decode_formula(edges[EdgeLabel.IMPL_CONCL], binders))
        if lbl == NodeLabel.FORALL:
            return Forall(self.decode_formula(edges[EdgeLabel.FORALL_BODY], (n,) + binders))
        raise GraphError(f"node {n} is not a formula node")


# --- clusters and topological order -------------------------------------------

def statement_refs(f: Formula) -> set[int]:
    out: set[int] = set()

    def go(x) -> None:
        if isinstance(x, Const):
            out.add(x.def_id)
        elif isinstance(x, FnApp):
            out.add(x.def_id)
            for a in x.args:
                go(a)
        elif isinstance(x, Eq):
            go(x.lhs)
            go(x.rhs)
        elif isinstance(x, Implies):
            go(x.premise)
            go(x.conclusion)
        elif isinstance(x, Forall):
            go(x.body)

    go(f)
    return out


def strongly_connected(nodes: Sequence[int],
                       refs: dict[int, list[int]]) -> list[list[int]]:
    """SCCs of the directed graph given by refs, each sorted ascending.

    Iterative Tarjan; member lists come out in reverse topological order of
    the condensation, but callers should not rely on that.
    """
    index: dict[int, int] = {}
    low: dict[int, int] = {}
    on_stack: set[int] = set()
    stack: list[int] = []
    sccs: list[list[int]] = []
    counter = [0]

    for start in nodes:
        if start in index:
            continue
        work = [(start, 0)]
        while work:
            v, pi = work[-1]
            if pi == 0:
                index[v] = low[v] = counter[0]
                counter[0] += 1
                stack.append(v)
                on_stack.add(v)
            advanced = False
            for i in range(pi, len(refs[v])):
                w = refs[v][i]
                if w not in index:
                    work[-1] = (v, i + 1)
                    work.append((w, 0))
                    advanced = True
                    break
                if w in on_stack:
                    low[v] = min(low[v], index[w])
            if advanced:
                continue
            work.pop()
            if low[v] == index[v]:
                comp = []
                while True:
                    w = stack.pop()
                    on_stack.discard(w)
                    comp.append(w)
                    if w == v:
                        break
                sccs.append(sorted(comp))
            if work:
                u, _ = work[-1]
                low[u] = min(low[u], low[v])
    return sccs


def defining_equations(env: Environment, def_ids: Sequence[int]
                       ) -> dict[int, list[int]]:
    """symbol -> equations whose stripped left side is headed by it."""
    idset = set(def_ids)
    out: dict[int, list[int]] = {}
    for d in def_ids:
        defn = env[d]
        if defn.kind is not DefKind.EQUATION or defn.statement is None:
            continue
        _, body = strip_foralls(defn.statement)
        if not isinstance(body, Eq):
            continue
        head = body.lhs
        if isinstance(head, (Const, FnApp)) and head.def_id in idset \
                and env[head.def_id].kind is DefKind.SYMBOL:
            out.setdefault(head.def_id, []).append(d)
    return out


def compute_clusters(graph: TermGraph, def_ids: Sequence[int]) -> list[Cluster]:
    """Strongly connected components of the statement-reference graph,
    restricted to def_ids, as content-hashed clusters.

    A defined symbol cites its defining equations, so symbol and equations
    land in one cluster; a bare symbol alone carries nothing a row could be
    computed from.
    """
    env = graph.env
    idset = set(def_ids)
    refs = {d: sorted(statement_refs(env[d].statement) & idset)
            if env[d].statement is not None else [] for d in def_ids}
    for sym, eqs in defining_equations(env, def_ids).items():
        refs[sym] = sorted(set(refs[sym]) | set(eqs))
    clusters = []
    for comp in strongly_connected(def_ids, refs):
        member_hashes = tuple(sorted(graph.graph_hash(graph.def_roots[d])
                                     for d in comp))
        clusters.append(Cluster(ids=tuple(comp), package=env[comp[0]].package,
                                hash=combine64("cluster", *member_hashes)))
    return clusters


def topo_order(clusters: Sequence[Cluster], env: Environment) -> list[Cluster]:
    """Dependency-respecting order; ties broken by ascending minimum DefId."""
    import heapq

    of_def = {}
    for ci, c in enumerate(clusters):
        for d in c.ids:
            of_def[d] = ci
    deps: list[set[int]] = [set() for _ in clusters]
    rdeps: list[set[int]] = [set() for _ in clusters]
    for ci, c in enumerate(clusters):
        for d in c.ids:
            stmt = env[d].statement
            if stmt is None:
                continue
            for r in statement_refs(stmt):
                cj = of_def.get(r)
                if cj is not None and cj != ci:
                    deps[ci].add(cj)
                    rdeps[cj].add(ci)
    remaining = [len(s) for s in deps]
    ready = [(min(clusters[ci].ids), ci) for ci in range(len(clusters))
             if remaining[ci] == 0]
    heapq.heapify(ready)
    out = []
    while ready:
        _, ci = heapq.heappop(ready)
        out.append(clusters[ci])
        for cj in rdeps[ci]:
            remaining[cj] -= 1
            if remaining[cj] == 0:
                heapq.heappush(ready, (min(clusters[cj].ids), cj))
    if len(out) != len(clusters):
        raise CycleDetected("cluster dependencies contain a cycle")
    return out


# --- message graphs -------------------------------------------------------------

def to_message_graph(ig: InputGraph) -> MessageGraph:
    """Edge count is exactly 2(input edges) + nodes: forward, reverse, self."""
    n = len(ig.labels)
    e = len(ig.edges)
    src = np.empty(2 * e + n, dtype=np.int32)
    lbl = np.empty(2 * e + n, dtype=np.int32)
    dst = np.empty(2 * e + n, dtype=np.int32)
    for i, (s, l, d) in enumerate(ig.edges):
        src[i] = s
        lbl[i] = l
        dst[i] = d
        src[e + i] = d
        lbl[e + i] = l + NUM_EDGE_LABELS
        dst[e + i] = s
    for i in range(n):
        src[2 * e + i] = i
        lbl[2 * e + i] = 2 * NUM_EDGE_LABELS
        dst[2 * e + i] = i
    deg = np.zeros(n, dtype=np.float64)
    np.add.at(deg, dst, 1.0)
    return MessageGraph(num_nodes=n, src=src, label=lbl, dst=dst, deg=deg)
