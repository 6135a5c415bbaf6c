"""Tactic application: one-sided matching, single-occurrence rewriting, replay.

Matching is purely syntactic first-order matching. Pattern variables are the
de Bruijn indices stripped off leading Foralls of the argument formula; they
may occur several times (nonlinear patterns must match equal subterms). The
target side is always rigid.
"""
from __future__ import annotations

from typing import Callable, Optional

from .terms import (BadArgument, BaseTactic, BoundVar, Const, DefKind, Environment, Eq,
                    FnApp, Forall, Formula, FreeVar, Global, GoalStack, Implies,
                    KernelError, Local, NoMatch, NotApplicable, ProofState, Term,
                    TacticInvocation, initial_state, open_binder, shift_term,
                    strip_foralls, subst_formula, subst_term, term_has_loose_below)

Subst = dict[int, Term]


def match_term(pattern: Term, nvars: int, target: Term,
               sub: Optional[Subst] = None, inner: int = 0) -> Optional[Subst]:
    """Match pattern against target; indices inner..inner+nvars-1 are variables.

    `inner` counts binders crossed inside the pattern itself (zero for plain
    term patterns). Bound values may not capture pattern-internal binders.
    Returns the substitution on success, None otherwise.
    """
    if sub is None:
        sub = {}
    if isinstance(pattern, BoundVar):
        if pattern.index < inner:
            # rigid: bound inside the pattern
            return sub if pattern == target else None
        v = pattern.index - inner
        if v < nvars:
            if term_has_loose_below(target, inner):
                return None  # would let a pattern-internal binder escape
            value = shift_term(target, -inner, 0) if inner else target
            if v in sub:
                return sub if sub[v] == value else None
            sub[v] = value
            return sub
        return sub if pattern == target else None
    if isinstance(pattern, (Const, FreeVar)):
        return sub if pattern == target else None
    if isinstance(pattern, FnApp):
        if not isinstance(target, FnApp) or target.def_id != pattern.def_id \
                or len(target.args) != len(pattern.args):
            return None
        for pa, ta in zip(pattern.args, target.args):
            if match_term(pa, nvars, ta, sub, inner) is None:
                return None
        return sub
    return None


def match_formula(pattern: Formula, nvars: int, target: Formula,
                  sub: Optional[Subst] = None, inner: int = 0) -> Optional[Subst]:
    if sub is None:
        sub = {}
    if isinstance(pattern, Eq):
        if not isinstance(target, Eq):
            return None
        if match_term(pattern.lhs, nvars, target.lhs, sub, inner) is None:
            return None
        return match_term(pattern.rhs, nvars, target.rhs, sub, inner)
    if isinstance(pattern, Implies):
        if not isinstance(target, Implies):
            return None
        if match_formula(pattern.premise, nvars, target.premise, sub, inner) is None:
            return None
        return match_formula(pattern.conclusion, nvars, target.conclusion, sub, inner)
    if isinstance(pattern, Forall):
        if not isinstance(target, Forall):
            return None
        return match_formula(pattern.body, nvars, target.body, sub, inner + 1)
    return None


# --- rewriting ---------------------------------------------------------------

def _rewrite_term(t: Term, lhs: Term, rhs: Term, nvars: int) -> Optional[Term]:
    """Rewrite the leftmost-outermost occurrence of lhs in t; None if absent."""
    sub = match_term(lhs, nvars, t)
    if sub is not None and len(sub) == nvars:
        return subst_formula_rhs(rhs, sub)
    if isinstance(t, FnApp):
        for i, a in enumerate(t.args):
            r = _rewrite_term(a, lhs, rhs, nvars)
            if r is not None:
                args = list(t.args)
                args[i] = r
                return FnApp(t.def_id, tuple(args))
    return None


def subst_formula_rhs(rhs: Term, sub: Subst) -> Term:
    return subst_term(rhs, sub, 0)


def rewrite_first(f: Formula, lhs: Term, rhs: Term, nvars: int) -> Optional[Formula]:
    """Rewrite the single leftmost-outermost matching term occurrence in f.

    Preorder over the formula tree: Eq lhs before rhs, premise before
    conclusion, then under binders.
    """
    if isinstance(f, Eq):
        r = _rewrite_term(f.lhs, lhs, rhs, nvars)
        if r is not None:
            return Eq(r, f.rhs)
        r = _rewrite_term(f.rhs, lhs, rhs, nvars)
        if r is not None:
            return Eq(f.lhs, r)
        return None
    if isinstance(f, Implies):
        r = rewrite_first(f.premise, lhs, rhs, nvars)
        if r is not None:
            return Implies(r, f.conclusion)
        r = rewrite_first(f.conclusion, lhs, rhs, nvars)
        if r is not None:
            return Implies(f.premise, r)
        return None
    if isinstance(f, Forall):
        # pattern variables stand for closed instantiations only; matching a
        # subterm that mentions the inner binder is still fine because the
        # substitution values come from the target at this same depth
        r = rewrite_first(f.body, lhs, rhs, nvars)
        if r is not None:
            return Forall(r)
        return None
    return None


# --- tactic dispatch ----------------------------------------------------------

def _resolve_formula(state: ProofState, env: Environment, arg) -> Formula:
    if isinstance(arg, Local):
        if not 0 <= arg.index < len(state.hypotheses):
            raise BadArgument(f"no hypothesis {arg.index}")
        return state.hypotheses[arg.index]
    if isinstance(arg, Global):
        if not 0 <= arg.def_id < len(env):
            raise BadArgument(f"unknown definition id {arg.def_id}")
        d = env[arg.def_id]
        if d.statement is None:
            raise BadArgument(f"{d.name} has no statement")
        return d.statement
    raise BadArgument(f"not an argument: {arg!r}")


def _equation_parts(f: Formula) -> tuple[int, Term, Term]:
    nvars, body = strip_foralls(f)
    if not isinstance(body, Eq):
        raise NotApplicable("argument is not an equation")
    return nvars, body.lhs, body.rhs


def _apply(state: ProofState, env: Environment, arg) -> list[ProofState]:
    stmt = _resolve_formula(state, env, arg)
    nvars, body = strip_foralls(stmt)
    # peel premises lazily: first suffix whose conclusion matches wins
    premises: list[Formula] = []
    tail = body
    while True:
        sub = match_formula(tail, nvars, state.goal)
        if sub is not None and len(sub) == nvars:
            subgoals = [subst_formula(p, sub) for p in premises]
            return [ProofState(state.num_free, state.hypotheses, g) for g in subgoals]
        if isinstance(tail, Implies):
            premises.append(tail.premise)
            tail = tail.conclusion
        else:
            raise NoMatch("conclusion does not match the goal")


def apply_tactic(state: ProofState, invocation: TacticInvocation,
                 env: Environment) -> list[ProofState]:
    """Run one tactic on one proof state; returns its subgoals in order.

    Pure: never mutates state or env. Raises NoMatch / BadArgument /
    NotApplicable on failure.
    """
    base = invocation.base
    args = invocation.args
    if len(args) != base.slots:
        raise BadArgument(f"{base.value} takes {base.slots} arguments, got {len(args)}")

    if base is BaseTactic.INTRO:
        g = state.goal
        if isinstance(g, Forall):
            opened = open_binder(g.body, FreeVar(state.num_free))
            return [ProofState(state.num_free + 1, state.hypotheses, opened)]
        if isinstance(g, Implies):
            return [ProofState(state.num_free, state.hypotheses + (g.premise,),
                               g.conclusion)]
        raise NotApplicable("goal is neither a Forall nor an Implies")

    if base is BaseTactic.REFLEXIVITY:
        g = state.goal
        if not isinstance(g, Eq):
            raise NotApplicable("goal is not an equation")
        if g.lhs != g.rhs:
            raise NoMatch("equation sides differ")
        return []

    if base is BaseTactic.SYMMETRY:
        g = state.goal
        if not isinstance(g, Eq):
            raise NotApplicable("goal is not an equation")
        return [ProofState(state.num_free, state.hypotheses, Eq(g.rhs, g.lhs))]

    if base is BaseTactic.EXACT:
        if not isinstance(args[0], Local):
            raise BadArgument("exact takes a hypothesis")
        h = _resolve_formula(state, env, args[0])
        if h != state.goal:
            raise NoMatch("hypothesis does not equal the goal")
        return []

    if base is BaseTactic.APPLY:
        return _apply(state, env, args[0])

    if base is BaseTactic.REWRITE:
        nvars, lhs, rhs = _equation_parts(_resolve_formula(state, env, args[0]))
        r = rewrite_first(state.goal, lhs, rhs, nvars)
        if r is None:
            raise NoMatch("no occurrence of the equation's left-hand side")
        return [ProofState(state.num_free, state.hypotheses, r)]

    if base is BaseTactic.REWRITE_IN:
        if not isinstance(args[1], Local):
            raise BadArgument("rewrite target must be a hypothesis")
        idx = args[1].index
        if not 0 <= idx < len(state.hypotheses):
            raise BadArgument(f"no hypothesis {idx}")
        nvars, lhs, rhs = _equation_parts(_resolve_formula(state, env, args[0]))
        r = rewrite_first(state.hypotheses[idx], lhs, rhs, nvars)
        if r is None:
            raise NoMatch("no occurrence in the hypothesis")
        hyps = list(state.hypotheses)
        hyps[idx] = r
        return [ProofState(state.num_free, tuple(hyps), state.goal)]

    raise BadArgument(f"unknown tactic {base!r}")


# --- replay -------------------------------------------------------------------

def run_script(statement: Formula, script: tuple[TacticInvocation, ...] | list,
               env: Environment,
               on_step: Optional[Callable[[ProofState, TacticInvocation], None]] = None,
               ) -> Optional[GoalStack]:
    """Replay a script from a statement; None on any tactic failure.

    Subgoals replace the front of the stack, so scripts are depth-first. The
    optional on_step callback sees each (state, invocation) pair before the
    step runs, which is how training examples are harvested.
    """
    stack: GoalStack = [initial_state(statement)]
    for inv in script:
        if not stack:
            return None  # script continues past a complete proof
        state = stack[0]
        if on_step is not None:
            on_step(state, inv)
        try:
            subgoals = apply_tactic(state, inv, env)
        except KernelError:
            return None
        stack = subgoals + stack[1:]
    return stack


def check_proof(statement: Formula, script, env: Environment) -> bool:
    """True iff the script replays from the statement to an empty goal stack."""
    stack = run_script(statement, script, env)
    return stack is not None and not stack
