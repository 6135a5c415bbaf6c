"""Deterministic synthetic corpus: packages of symbols, equations, theorems.

Each package introduces fresh constants and function symbols, gives the
defined ones rewrite equations over previously visible symbols, then emits
theorem files. Theorems are built forward: starting from a random term, a
chain of leftmost-outermost rewrites is rolled out with the exact stepping
discipline the rewrite tactic uses, so the recorded script (the chain read
back as tactic steps plus closers) replays by construction. Every script is
still pushed through check_proof before a theorem is admitted.

Files group 8..15 theorems sharing a family, a dependency profile and an
equation subpool, which makes neighbours within a file genuinely predictive
of each other. Dependency profiles steer how much a theorem leans on
same-package material: "imported" theorems touch only imported symbols,
"mixed" ones must use at least one same-package equation as a global tactic
argument, and "local" ones are built around several same-package symbols so
their transitive new-dependency counts run high.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .kernel import (BaseTactic, BoundVar, Const, DefKind, Definition,
                     Environment, Eq, FnApp, Formula, Forall, FreeVar, Global,
                     Implies, Local, TacticInvocation, Term, check_proof,
                     dump_package, iter_subterms, load_package_text,
                     rewrite_first, strip_foralls, subst_term)
from .util import derive_seed

T = TacticInvocation


class GenerationRetryExhausted(Exception):
    pass


class CycleDetected(Exception):
    pass


@dataclass(frozen=True)
class CorpusSpec:
    """Everything generation depends on; equal specs give identical bytes."""

    packages: int = 40
    symbols_per_package: int = 5
    theorems_per_package: int = 75
    proof_len: tuple[int, int] = (1, 6)
    file_size: tuple[int, int] = (8, 15)
    dep_profile: tuple[float, float, float] = (0.3, 0.45, 0.25)
    seed: int = 0
    min_tactic_freq: int = 6

    def to_dict(self) -> dict:
        d = self.__dict__.copy()
        for k in ("proof_len", "file_size", "dep_profile"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusSpec":
        d = dict(d)
        for k in ("proof_len", "file_size", "dep_profile"):
            d[k] = tuple(d[k])
        return cls(**d)


PROFILES = ("imported", "mixed", "local")


@dataclass
class Package:
    name: str
    deps: tuple[str, ...]
    def_ids: tuple[int, ...]
    files: tuple[tuple[int, ...], ...]          # theorem ids, file by file
    defined_by: dict[int, tuple[int, ...]]      # symbol -> defining equations
    profiles: dict[int, str]                    # theorem -> dependency profile
    states: int                                 # total proof steps, for splits


@dataclass(frozen=True)
class SplitManifest:
    train: tuple[str, ...]
    test: tuple[str, ...]
    fraction: float
    seed: int


@dataclass
class Corpus:
    env: Environment
    packages: list[Package]
    split: Optional[SplitManifest]
    spec: CorpusSpec


# --- term machinery ----------------------------------------------------------

@dataclass(frozen=True)
class _Rule:
    def_id: int
    nvars: int
    lhs: Term
    rhs: Term
    local: bool


def _rule_of(defn: Definition, local: bool) -> _Rule:
    nvars, body = strip_foralls(defn.statement)
    return _Rule(defn.id, nvars, body.lhs, body.rhs, local)


def _step(t: Term, rule: _Rule) -> Optional[Term]:
    """One leftmost-outermost rewrite of t, exactly as the tactic will see it.

    Wrapping as Eq(t, t) reuses the formula scanner; the first match always
    lands in the left copy.
    """
    r = rewrite_first(Eq(t, t), rule.lhs, rule.rhs, rule.nvars)
    return None if r is None else r.lhs


def _size(t: Term) -> int:
    return sum(1 for _ in iter_subterms(t))


def _refs(x) -> set[int]:
    return {s.def_id for s, _ in iter_subterms(x)
            if isinstance(s, (Const, FnApp))}


def _map_free(x, f):
    if isinstance(x, FreeVar):
        return f(x)
    if isinstance(x, FnApp):
        return FnApp(x.def_id, tuple(_map_free(a, f) for a in x.args))
    if isinstance(x, Eq):
        return Eq(_map_free(x.lhs, f), _map_free(x.rhs, f))
    return x


class _Pool:
    """Symbols and rules a theorem may draw from, split by origin."""

    def __init__(self):
        self.consts: list[tuple[int, bool]] = []    # (def_id, local)
        self.fns: list[tuple[int, int, bool]] = []  # (def_id, arity, local)
        self.rules: list[_Rule] = []

    def term(self, rng, size: int, local_only=False, imported_only=False,
             var_levels: Sequence[int] = ()) -> Optional[Term]:
        consts = [c for c, loc in self.consts
                  if (loc or not local_only) and not (loc and imported_only)]
        fns = [(f, a) for f, a, loc in self.fns
               if (loc or not local_only) and not (loc and imported_only)]
        if not consts and not var_levels:
            return None

        def build(budget: int) -> Term:
            if budget <= 1 or not fns or rng.random() < 0.3:
                if var_levels and (not consts or rng.random() < 0.35):
                    return FreeVar(var_levels[int(rng.integers(
                        len(var_levels)))])
                return Const(consts[int(rng.integers(len(consts)))])
            f, arity = fns[int(rng.integers(len(fns)))]
            share = max(1, (budget - 1) // arity)
            return FnApp(f, tuple(build(share) for _ in range(arity)))

        return build(size)


def _prof_rules(pool: _Pool, prof: str) -> list[_Rule]:
    if prof == "imported":
        return [r for r in pool.rules if not r.local]
    return pool.rules


def _seed_term(rng, pool: _Pool, prof: str, want_var=False) -> Optional[Term]:
    """A chain start guaranteed to admit at least one rewrite step.

    Built around a rule head so the first step can always fire; arguments are
    free random terms, one of them carrying the bound variable when asked.
    """
    rules = _prof_rules(pool, prof)
    fn_rules = [r for r in rules if isinstance(r.lhs, FnApp)]
    if prof == "local":
        fn_rules = [r for r in fn_rules if r.local] or fn_rules
    if fn_rules:
        r = fn_rules[int(rng.integers(len(fn_rules)))]
        arity = len(r.lhs.args)
        var_at = int(rng.integers(arity)) if want_var else -1
        args = []
        for j in range(arity):
            a = pool.term(rng, int(rng.integers(1, 4)),
                          local_only=prof == "local",
                          imported_only=prof == "imported",
                          var_levels=(0,) if j == var_at else ())
            if a is None:
                return None
            if j == var_at and not any(isinstance(s, FreeVar)
                                       for s, _ in iter_subterms(a)):
                a = FreeVar(0)
            args.append(a)
        return FnApp(r.lhs.def_id, tuple(args))
    const_rules = [r for r in rules if isinstance(r.lhs, Const)]
    if prof == "local":
        const_rules = [r for r in const_rules if r.local] or const_rules
    if not const_rules:
        return None
    base = Const(const_rules[int(rng.integers(len(const_rules)))].lhs.def_id)
    if not want_var:
        return base
    fns = [(f, a) for f, a, loc in pool.fns
           if a >= 2 and not (loc and prof == "imported")
           and (loc or prof != "local")]
    if not fns:
        return None
    f, arity = fns[int(rng.integers(len(fns)))]
    rest = tuple(FreeVar(0) if j == 1 else base for j in range(1, arity))
    return FnApp(f, (base,) + rest)


def _evolve(rng, t: Term, rules: Sequence[_Rule], steps: int,
            local_bias: float = 0.0, size_cap: int = 60
            ) -> tuple[Term, list[_Rule]]:
    """Roll the term forward; returns the end term and the rules applied."""
    used: list[_Rule] = []
    for _ in range(steps):
        app = [r for r in rules if _step(t, r) is not None]
        if not app:
            break
        local = [r for r in app if r.local]
        pool = local if local and rng.random() < local_bias else app
        rule = pool[int(rng.integers(len(pool)))]
        nxt = _step(t, rule)
        if _size(nxt) > size_cap:
            break
        t = nxt
        used.append(rule)
    return t, used


# --- theorem families ----------------------------------------------------------
#
# Builders return (statement, script, extra) where extra is the discharge
# script of an apply pair, or None to ask for a resample.

def _rewrites(rules: Sequence[_Rule]) -> tuple[T, ...]:
    return tuple(T(BaseTactic.REWRITE, (Global(r.def_id),)) for r in rules)


def _bias(prof: str) -> float:
    return {"local": 0.8, "mixed": 0.5}.get(prof, 0.0)


def _family_ground(rng, pool, prof, k):
    t0 = _seed_term(rng, pool, prof)
    if t0 is None:
        return None
    tk, used = _evolve(rng, t0, _prof_rules(pool, prof), k, _bias(prof))
    if not used:
        return None
    return Eq(t0, tk), _rewrites(used) + (T(BaseTactic.REFLEXIVITY),), None


def _family_forall(rng, pool, prof, k):
    t0 = _seed_term(rng, pool, prof, want_var=True)
    if t0 is None or not any(isinstance(s, FreeVar)
                             for s, _ in iter_subterms(t0)):
        return None
    tk, used = _evolve(rng, t0, _prof_rules(pool, prof), k, _bias(prof))
    if not used:
        return None
    closed = _map_free(Eq(t0, tk), lambda v: BoundVar(0))
    return Forall(closed), \
        (T(BaseTactic.INTRO),) + _rewrites(used) + \
        (T(BaseTactic.REFLEXIVITY),), None


def _family_conditional(rng, pool, prof, k):
    """Implies(Eq(u, v), _): the premise bridges the chain at a random point."""
    rules = _prof_rules(pool, prof)
    t0 = _seed_term(rng, pool, prof)
    if t0 is None:
        return None
    u, used1 = _evolve(rng, t0, rules, int(rng.integers(0, k + 1)))
    v = pool.term(rng, int(rng.integers(2, 6)),
                  imported_only=prof == "imported")
    if v is None or v == u:
        return None
    w, used2 = _evolve(rng, v, rules, k - len(used1), _bias(prof))
    script = (T(BaseTactic.INTRO),) + _rewrites(used1) + \
        (T(BaseTactic.REWRITE, (Local(0),)),) + _rewrites(used2) + \
        (T(BaseTactic.REFLEXIVITY),)
    return Implies(Eq(u, v), Eq(t0, w)), script, None


def _family_apply_pair(rng, pool, prof, k):
    """A conditional lemma plus the discharge script for its premise.

    The caller emits the lemma, then a second theorem stating the bare
    conclusion, proved by apply on the lemma followed by the discharge.
    """
    rules = _prof_rules(pool, prof)
    hu = _seed_term(rng, pool, prof)
    if hu is None:
        return None
    if prof != "imported":
        k = max(k, 2)  # the lemma keeps at least one chain step of its own
    hv, hused = _evolve(rng, hu, rules, max(1, k // 2))
    if not hused:
        return None
    mid, used2 = _evolve(rng, hv, rules, k - len(hused), _bias(prof))
    stmt = Implies(Eq(hu, hv), Eq(hu, mid))
    script = (T(BaseTactic.INTRO),
              T(BaseTactic.REWRITE, (Local(0),))) + _rewrites(used2) + \
        (T(BaseTactic.REFLEXIVITY),)
    discharge = _rewrites(hused) + (T(BaseTactic.REFLEXIVITY),)
    return stmt, script, discharge


def _family_exact(rng, pool, prof, k):
    u = pool.term(rng, int(rng.integers(2, 6)),
                  imported_only=prof == "imported",
                  local_only=prof == "local")
    v = pool.term(rng, int(rng.integers(2, 6)),
                  imported_only=prof == "imported")
    if u is None or v is None or u == v:
        return None
    if rng.random() < 0.5:
        stmt = Implies(Eq(u, v), Eq(v, u))
        script = (T(BaseTactic.INTRO), T(BaseTactic.SYMMETRY),
                  T(BaseTactic.EXACT, (Local(0),)))
    else:
        stmt = Implies(Eq(u, v), Eq(u, v))
        script = (T(BaseTactic.INTRO), T(BaseTactic.EXACT, (Local(0),)))
    return stmt, script, None


def _family_rewrite_in(rng, pool, prof, k):
    """The premise needs one repair step inside the hypothesis before use."""
    rules = _prof_rules(pool, prof)
    locs = [r for r in rules if r.local] or rules
    if not locs:
        return None
    rule = locs[int(rng.integers(len(locs)))]
    sub = {}
    for i in range(rule.nvars):
        val = pool.term(rng, int(rng.integers(1, 4)),
                        imported_only=prof == "imported")
        if val is None:
            return None
        sub[i] = val
    u0 = subst_term(rule.lhs, sub)
    u1 = subst_term(rule.rhs, sub)
    if u0 == u1:
        return None
    v = pool.term(rng, int(rng.integers(2, 6)),
                  imported_only=prof == "imported")
    if v is None:
        return None
    w, used = _evolve(rng, v, rules, k, _bias(prof))
    stmt = Implies(Eq(u0, v), Eq(u1, w))
    script = (T(BaseTactic.INTRO),
              T(BaseTactic.REWRITE_IN, (Global(rule.def_id), Local(0))),
              T(BaseTactic.REWRITE, (Local(0),))) + _rewrites(used) + \
        (T(BaseTactic.REFLEXIVITY),)
    return stmt, script, None


_FAMILIES = ("ground", "forall", "conditional", "apply", "exact", "rewrite_in")
_FAMILY_WEIGHTS = (0.25, 0.20, 0.15, 0.15, 0.10, 0.15)
_BUILDERS = {"ground": _family_ground, "forall": _family_forall,
             "conditional": _family_conditional, "apply": _family_apply_pair,
             "exact": _family_exact, "rewrite_in": _family_rewrite_in}


# --- package generation ----------------------------------------------------------

def _gen_symbols(rs, env: Environment, pkg: str, idx: int, imported: _Pool,
                 spec: CorpusSpec) -> tuple[_Pool, dict[int, tuple[int, ...]]]:
    """Fresh base constants, defined symbols and their equations."""
    local = _Pool()
    n_base = 3 if idx == 0 else 1
    for b in range(n_base):
        d = env.add(DefKind.SYMBOL, f"{pkg}.b{b}", pkg)
        local.consts.append((d.id, True))
    imp_ids = {c for c, _ in imported.consts} | \
        {f for f, _, _ in imported.fns}
    defined_by: dict[int, tuple[int, ...]] = {}
    eq_n = 0
    for s in range(spec.symbols_per_package):
        arity = int(rs.choice(3, p=(0.4, 0.4, 0.2))) if s else 0
        d = env.add(DefKind.SYMBOL, f"{pkg}.s{s}", pkg, arity=arity)
        merged = _merge_pools(imported, local)
        eqs = []
        for _ in range(1 if arity == 0 else int(rs.integers(1, 3))):
            body = None
            for _ in range(20):
                cand = merged.term(rs, int(rs.integers(2, 5)),
                                   var_levels=tuple(range(arity)))
                if cand is None:
                    continue
                if imp_ids and not _refs(cand) & imp_ids and \
                        rs.random() < 0.8:
                    continue  # defined symbols should usually mix in imports
                body = cand
                break
            if body is None:
                continue
            bound = _map_free(body, lambda v: BoundVar(arity - 1 - v.level))
            if arity == 0:
                stmt: Formula = Eq(Const(d.id), bound)
            else:
                head = FnApp(d.id, tuple(BoundVar(arity - 1 - i)
                                         for i in range(arity)))
                stmt = Eq(head, bound)
                for _ in range(arity):
                    stmt = Forall(stmt)
            e = env.add(DefKind.EQUATION, f"{pkg}.e{eq_n}", pkg,
                        statement=stmt)
            eq_n += 1
            eqs.append(e.id)
            local.rules.append(_rule_of(e, local=True))
        if eqs:
            defined_by[d.id] = tuple(eqs)
        if arity == 0:
            local.consts.append((d.id, True))
        else:
            local.fns.append((d.id, arity, True))
    return local, defined_by


def _merge_pools(imported: _Pool, local: _Pool) -> _Pool:
    m = _Pool()
    m.consts = imported.consts + local.consts
    m.fns = imported.fns + local.fns
    m.rules = imported.rules + local.rules
    return m


def _script_local_globals(script, env: Environment, pkg: str) -> int:
    n = 0
    for inv in script:
        for a in inv.args:
            if isinstance(a, Global) and env[a.def_id].package == pkg \
                    and env[a.def_id].kind is DefKind.EQUATION:
                n += 1
    return n


def _local_footprint(stmt: Formula, script, env: Environment,
                     pkg: str) -> int:
    """Distinct same-package definitions the theorem visibly depends on."""
    ids = set(_refs(stmt))
    for inv in script:
        for a in inv.args:
            if isinstance(a, Global):
                ids.add(a.def_id)
    return sum(1 for d in ids if env[d].package == pkg)


def _make_theorem(env: Environment, pool: _Pool, pkg: str, spec: CorpusSpec,
                  family: str, prof: str, seed_parts: tuple):
    """One theorem (plus discharge for apply pairs), with bounded retries.

    Some (family, profile) pairs are unsatisfiable in a given package, e.g. a
    quantified local-heavy theorem when the only local function symbol is
    unary. Requirements are relaxed rung by rung rather than giving up; the
    achieved profile is reported back so labels stay truthful.
    """
    n_local = sum(loc for _, loc in pool.consts) + \
        sum(loc for *_, loc in pool.fns) + sum(r.local for r in pool.rules)
    ladder = [(family, prof), (family, "mixed"), ("ground", "mixed"),
              ("exact", "mixed")]
    ladder = [c for i, c in enumerate(ladder) if c not in ladder[:i]]
    for rung, (fam, pr) in enumerate(ladder):
        for attempt in range(64):
            rng = np.random.default_rng(
                derive_seed(*seed_parts, rung, attempt))
            k = int(rng.integers(spec.proof_len[0], spec.proof_len[1] + 1))
            if pr == "local":
                k = max(k, 3)
            out = _BUILDERS[fam](rng, pool, pr, k)
            if out is None:
                continue
            stmt, script, discharge = out
            if not check_proof(stmt, script, env):
                continue
            both = script + (discharge or ())
            if pr != "imported" and fam != "exact" and \
                    _script_local_globals(both, env, pkg) == 0:
                continue
            if pr == "local" and \
                    _local_footprint(stmt, both, env, pkg) < min(3, n_local):
                continue
            return stmt, script, discharge, pr
    raise GenerationRetryExhausted(
        f"no viable theorem for {pkg} even at {ladder[-1]}")


def _plan_file_sizes(rs, total: int, lo: int, hi: int) -> list[int]:
    sizes = []
    remaining = total
    while remaining > hi:
        sizes.append(int(rs.integers(lo, min(hi, remaining - lo) + 1)))
        remaining -= sizes[-1]
    sizes.append(remaining)
    return sizes


def generate_corpus(spec: CorpusSpec) -> Corpus:
    env = Environment()
    packages: list[Package] = []
    pools: dict[str, _Pool] = {}
    closures: dict[str, tuple[str, ...]] = {}
    for i in range(spec.packages):
        pkg = f"p{i:02d}"
        rs = np.random.default_rng(derive_seed(spec.seed, "pkg", i))
        n_deps = 0 if i == 0 else int(rs.integers(1, min(3, i) + 1))
        deps = tuple(sorted(
            f"p{int(j):02d}" for j in
            rs.choice(i, size=n_deps, replace=False))) if n_deps else ()
        closure: set[str] = set()
        for dep in deps:
            closure.add(dep)
            closure.update(closures[dep])
        closures[pkg] = tuple(sorted(closure))
        imported = _Pool()
        for dep in closures[pkg]:
            imported.consts += [(c, False) for c, _ in pools[dep].consts]
            imported.fns += [(f, a, False) for f, a, _ in pools[dep].fns]
            imported.rules += [replace(r, local=False)
                               for r in pools[dep].rules]
        local, defined_by = _gen_symbols(rs, env, pkg, i, imported, spec)

        prof_w = np.array(spec.dep_profile, dtype=float)
        if not imported.rules:
            prof_w = np.array([0.0, prof_w[0] + prof_w[1], prof_w[2]])
        prof_w = prof_w / prof_w.sum()

        files: list[tuple[int, ...]] = []
        profiles: dict[int, str] = {}
        tn = 0
        sizes = _plan_file_sizes(rs, spec.theorems_per_package,
                                 *spec.file_size)
        for file_idx, size in enumerate(sizes):
            family = _FAMILIES[int(rs.choice(len(_FAMILIES),
                                             p=_FAMILY_WEIGHTS))]
            prof = PROFILES[int(rs.choice(3, p=prof_w))]
            # a per-file equation subpool keeps neighbours similar
            fpool = _merge_pools(imported, local)
            imp_rules = [r for r in fpool.rules if not r.local]
            if len(imp_rules) > 24:
                keep = rs.choice(len(imp_rules), size=24, replace=False)
                fpool.rules = [r for r in fpool.rules if r.local] + \
                    [imp_rules[int(j)] for j in sorted(keep)]
            if family != "exact":
                has_local = any(r.local for r in fpool.rules)
                has_imp = any(not r.local for r in fpool.rules)
                if prof == "imported" and not has_imp:
                    prof = "mixed" if has_local else prof
                if prof != "imported" and not has_local:
                    prof = "imported" if has_imp else prof
                if not fpool.rules:
                    family = "exact"
            file_ids: list[int] = []
            while len(file_ids) < size:
                stmt, script, discharge, used_prof = _make_theorem(
                    env, fpool, pkg, spec, family, prof,
                    (spec.seed, "thm", i, file_idx, len(file_ids)))
                d = env.add(DefKind.THEOREM, f"{pkg}.t{tn:03d}", pkg,
                            statement=stmt, proof=script)
                tn += 1
                file_ids.append(d.id)
                profiles[d.id] = used_prof
                if discharge is not None and len(file_ids) < size:
                    stmt2 = stmt.conclusion
                    script2 = (T(BaseTactic.APPLY, (Global(d.id),)),) \
                        + discharge
                    assert check_proof(stmt2, script2, env)
                    d2 = env.add(DefKind.THEOREM, f"{pkg}.t{tn:03d}", pkg,
                                 statement=stmt2, proof=script2)
                    tn += 1
                    file_ids.append(d2.id)
                    profiles[d2.id] = used_prof
            files.append(tuple(file_ids))

        def_ids = tuple(sorted(
            [c for c, _ in local.consts] + [f for f, _, _ in local.fns] +
            [e for eqs in defined_by.values() for e in eqs] +
            [t for f in files for t in f]))
        states = sum(len(env[t].proof) for f in files for t in f)
        packages.append(Package(pkg, deps, def_ids, tuple(files), defined_by,
                                profiles, states))
        pools[pkg] = local
    return Corpus(env, packages, None, spec)


# --- split ------------------------------------------------------------------------

def split_train_test(packages: Sequence[Package], target_fraction: float = 0.9,
                     seed: int = 0) -> SplitManifest:
    """Seeded random topological order, cut where the state fraction fits."""
    by_name = {p.name: p for p in packages}
    for p in packages:
        unknown = set(p.deps) - by_name.keys()
        if unknown:
            raise CycleDetected(
                f"{p.name} depends on missing {sorted(unknown)}")
    rng = np.random.default_rng(derive_seed(seed, "split"))
    order: list[str] = []
    placed: set[str] = set()
    while len(order) < len(packages):
        ready = sorted(n for n, p in by_name.items()
                       if n not in placed and set(p.deps) <= placed)
        if not ready:
            raise CycleDetected("dependency cycle among packages")
        pick = ready[int(rng.integers(len(ready)))]
        order.append(pick)
        placed.add(pick)
    states = np.array([by_name[n].states for n in order], dtype=float)
    cum = np.cumsum(states) / max(states.sum(), 1.0)
    best = int(np.argmin(np.abs(cum[:-1] - target_fraction))) + 1
    train, test = tuple(order[:best]), tuple(order[best:])
    train_set = set(train)
    for n in train:
        assert set(by_name[n].deps) <= train_set
    return SplitManifest(train, test, float(cum[best - 1]), seed)


# --- dependency counting ------------------------------------------------------------

def count_new_dependencies(theorem, env: Environment,
                           defined_by: dict[int, tuple[int, ...]],
                           train_defs) -> int:
    """Transitive statement and argument dependencies absent from train_defs.

    Reaching a symbol pulls in its defining equations; reaching any
    statement-bearing definition pulls in the symbols of its statement.
    """
    d = env[theorem] if isinstance(theorem, int) else theorem
    stack = list(_refs(d.statement))
    for inv in d.proof or ():
        for a in inv.args:
            if isinstance(a, Global):
                stack.append(a.def_id)
    seen: set[int] = set()
    while stack:
        x = stack.pop()
        if x in seen:
            continue
        seen.add(x)
        dd = env[x]
        if dd.statement is not None:
            stack.extend(_refs(dd.statement))
        stack.extend(defined_by.get(x, ()))
    seen.discard(d.id)
    return len(seen - set(train_defs))


def merged_defined_by(packages: Sequence[Package]) -> dict[int, tuple[int, ...]]:
    out: dict[int, tuple[int, ...]] = {}
    for p in packages:
        out.update(p.defined_by)
    return out


def train_def_ids(corpus: Corpus) -> set[int]:
    assert corpus.split is not None
    train = set(corpus.split.train)
    return {i for p in corpus.packages if p.name in train for i in p.def_ids}


# --- persistence ---------------------------------------------------------------------

def save_corpus(outdir, corpus: Corpus) -> None:
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    env = corpus.env
    man: dict = {"spec": corpus.spec.to_dict(), "packages": []}
    for p in corpus.packages:
        text = dump_package(p.name, list(p.deps),
                            [env[i] for i in p.def_ids], env)
        (out / f"{p.name}.sx").write_text(text)
        man["packages"].append({
            "name": p.name,
            "deps": list(p.deps),
            "files": [[env[t].name for t in f] for f in p.files],
            "defined_by": {env[s].name: [env[e].name for e in eqs]
                           for s, eqs in p.defined_by.items()},
            "profiles": {env[t].name: prof for t, prof in p.profiles.items()},
            "sha256": hashlib.sha256(text.encode()).hexdigest(),
        })
    if corpus.split is not None:
        man["split"] = {"train": list(corpus.split.train),
                        "test": list(corpus.split.test),
                        "fraction": corpus.split.fraction,
                        "seed": corpus.split.seed}
    (out / "manifest.json").write_text(
        json.dumps(man, indent=2, sort_keys=True) + "\n")


def load_corpus(outdir) -> Corpus:
    out = Path(outdir)
    man = json.loads((out / "manifest.json").read_text())
    env = Environment()
    packages: list[Package] = []
    for entry in man["packages"]:
        text = (out / f"{entry['name']}.sx").read_text()
        if hashlib.sha256(text.encode()).hexdigest() != entry["sha256"]:
            raise ValueError(f"corpus file for {entry['name']} was modified")
        name, deps, ids = load_package_text(text, env)
        files = tuple(tuple(env.by_name[t] for t in f)
                      for f in entry["files"])
        defined_by = {env.by_name[s]: tuple(env.by_name[e] for e in eqs)
                      for s, eqs in entry["defined_by"].items()}
        profiles = {env.by_name[t]: prof
                    for t, prof in entry["profiles"].items()}
        states = sum(len(env[t].proof or ()) for f in files for t in f)
        packages.append(Package(name, tuple(deps), tuple(sorted(ids)), files,
                                defined_by, profiles, states))
    split = None
    if "split" in man:
        s = man["split"]
        split = SplitManifest(tuple(s["train"]), tuple(s["test"]),
                              s["fraction"], s["seed"])
    return Corpus(env, packages, split, CorpusSpec.from_dict(man["spec"]))
