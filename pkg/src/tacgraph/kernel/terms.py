"""Core calculus data: terms, formulas, definitions, proof states.

Terms are nameless. BoundVar uses de Bruijn indices counted from the nearest
enclosing Forall; FreeVar refers to a scope constant introduced by `intro` on a
Forall goal and therefore only ever appears inside proof states. Definition
statements are always closed.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Iterator, Optional, Union

from ..util import combine64

DefId = int


class KernelError(Exception):
    """Base for tactic and well-formedness failures."""


class NoMatch(KernelError):
    pass


class BadArgument(KernelError):
    pass


class NotApplicable(KernelError):
    pass


class IllFormed(KernelError):
    pass


# --- terms ------------------------------------------------------------------

@dataclass(frozen=True)
class BoundVar:
    index: int


@dataclass(frozen=True)
class FreeVar:
    level: int


@dataclass(frozen=True)
class Const:
    def_id: DefId


@dataclass(frozen=True)
class FnApp:
    def_id: DefId
    args: tuple["Term", ...]


Term = Union[BoundVar, FreeVar, Const, FnApp]


# --- formulas ---------------------------------------------------------------

@dataclass(frozen=True)
class Eq:
    lhs: Term
    rhs: Term


@dataclass(frozen=True)
class Implies:
    premise: "Formula"
    conclusion: "Formula"


@dataclass(frozen=True)
class Forall:
    body: "Formula"


Formula = Union[Eq, Implies, Forall]


# --- definitions and environment -------------------------------------------

class DefKind(Enum):
    SYMBOL = "symbol"
    EQUATION = "equation"
    THEOREM = "theorem"


@dataclass
class Definition:
    id: DefId
    kind: DefKind
    name: str          # globally unique qualified name, e.g. "p03.double"
    package: str
    arity: int = 0                      # SYMBOL only
    statement: Optional[Formula] = None  # EQUATION and THEOREM
    proof: Optional[tuple] = None        # THEOREM only; tuple of TacticInvocation


class Environment:
    """Append-only definition store; DefIds are dense list indices."""

    def __init__(self) -> None:
        self.defs: list[Definition] = []
        self.by_name: dict[str, DefId] = {}

    def __len__(self) -> int:
        return len(self.defs)

    def __getitem__(self, def_id: DefId) -> Definition:
        return self.defs[def_id]

    def lookup(self, name: str) -> Definition:
        return self.defs[self.by_name[name]]

    def add(self, kind: DefKind, name: str, package: str, arity: int = 0,
            statement: Optional[Formula] = None,
            proof: Optional[tuple] = None) -> Definition:
        if name in self.by_name:
            raise IllFormed(f"duplicate definition name {name!r}")
        if kind is DefKind.SYMBOL:
            if statement is not None:
                raise IllFormed("function symbols carry no statement")
        else:
            if statement is None:
                raise IllFormed(f"{kind.value} requires a statement")
            check_closed_formula(statement, self)
        d = Definition(id=len(self.defs), kind=kind, name=name, package=package,
                       arity=arity, statement=statement, proof=proof)
        self.defs.append(d)
        self.by_name[name] = d.id
        return d


def check_term(t: Term, env: Environment, depth: int, num_free: int) -> None:
    if isinstance(t, BoundVar):
        if not 0 <= t.index < depth:
            raise IllFormed(f"dangling de Bruijn index {t.index} at depth {depth}")
    elif isinstance(t, FreeVar):
        if not 0 <= t.level < num_free:
            raise IllFormed(f"unknown scope constant {t.level}")
    elif isinstance(t, Const):
        d = env[t.def_id]
        if d.kind is not DefKind.SYMBOL or d.arity != 0:
            raise IllFormed(f"{d.name} used as a constant but has arity {d.arity}")
    elif isinstance(t, FnApp):
        d = env[t.def_id]
        if d.kind is not DefKind.SYMBOL:
            raise IllFormed(f"{d.name} is not a function symbol")
        if len(t.args) != d.arity or d.arity == 0:
            raise IllFormed(f"{d.name} expects {d.arity} arguments, got {len(t.args)}")
        for a in t.args:
            check_term(a, env, depth, num_free)
    else:
        raise IllFormed(f"not a term: {t!r}")


def check_formula(f: Formula, env: Environment, depth: int = 0, num_free: int = 0) -> None:
    if isinstance(f, Eq):
        check_term(f.lhs, env, depth, num_free)
        check_term(f.rhs, env, depth, num_free)
    elif isinstance(f, Implies):
        check_formula(f.premise, env, depth, num_free)
        check_formula(f.conclusion, env, depth, num_free)
    elif isinstance(f, Forall):
        check_formula(f.body, env, depth + 1, num_free)
    else:
        raise IllFormed(f"not a formula: {f!r}")


def check_closed_formula(f: Formula, env: Environment) -> None:
    check_formula(f, env, depth=0, num_free=0)


# --- proof states and tactic surface ----------------------------------------

@dataclass(frozen=True)
class ProofState:
    num_free: int
    hypotheses: tuple[Formula, ...]
    goal: Formula


class BaseTactic(Enum):
    INTRO = "intro"
    REFLEXIVITY = "reflexivity"
    SYMMETRY = "symmetry"
    EXACT = "exact"
    APPLY = "apply"
    REWRITE = "rewrite"
    REWRITE_IN = "rewrite-in"

    @property
    def slots(self) -> int:
        return _SLOTS[self]


_SLOTS = {
    BaseTactic.INTRO: 0,
    BaseTactic.REFLEXIVITY: 0,
    BaseTactic.SYMMETRY: 0,
    BaseTactic.EXACT: 1,
    BaseTactic.APPLY: 1,
    BaseTactic.REWRITE: 1,
    BaseTactic.REWRITE_IN: 2,
}

BASE_TACTICS: tuple[BaseTactic, ...] = tuple(BaseTactic)
TACTIC_INDEX: dict[BaseTactic, int] = {t: i for i, t in enumerate(BASE_TACTICS)}


@dataclass(frozen=True)
class Local:
    index: int


@dataclass(frozen=True)
class Global:
    def_id: DefId


Argument = Union[Local, Global]


@dataclass(frozen=True)
class TacticInvocation:
    base: BaseTactic
    args: tuple[Argument, ...] = ()


GoalStack = list  # list[ProofState]; front element is the current goal


def initial_state(statement: Formula) -> ProofState:
    return ProofState(num_free=0, hypotheses=(), goal=statement)


# --- structural helpers ------------------------------------------------------

def shift_term(t: Term, amount: int, cutoff: int = 0) -> Term:
    """Shift loose de Bruijn indices >= cutoff by amount."""
    if isinstance(t, BoundVar):
        if t.index >= cutoff:
            idx = t.index + amount
            if idx < 0:
                raise IllFormed("negative index after shift")
            return BoundVar(idx)
        return t
    if isinstance(t, FnApp):
        return FnApp(t.def_id, tuple(shift_term(a, amount, cutoff) for a in t.args))
    return t


def term_has_loose_below(t: Term, bound: int) -> bool:
    """True if some de Bruijn index < bound occurs loose in t."""
    if isinstance(t, BoundVar):
        return t.index < bound
    if isinstance(t, FnApp):
        return any(term_has_loose_below(a, bound) for a in t.args)
    return False


def subst_term(t: Term, sub: dict[int, Term], depth: int = 0) -> Term:
    """Replace loose BoundVar(depth + i) by sub[i], shifting values under binders."""
    if isinstance(t, BoundVar):
        if t.index >= depth and (t.index - depth) in sub:
            return shift_term(sub[t.index - depth], depth, 0)
        return t
    if isinstance(t, FnApp):
        return FnApp(t.def_id, tuple(subst_term(a, sub, depth) for a in t.args))
    return t


def subst_formula(f: Formula, sub: dict[int, Term], depth: int = 0) -> Formula:
    if isinstance(f, Eq):
        return Eq(subst_term(f.lhs, sub, depth), subst_term(f.rhs, sub, depth))
    if isinstance(f, Implies):
        return Implies(subst_formula(f.premise, sub, depth),
                       subst_formula(f.conclusion, sub, depth))
    return Forall(subst_formula(f.body, sub, depth + 1))


def open_binder(body: Formula, value: Term) -> Formula:
    """Instantiate the binder a Forall body refers to as index 0 with value."""

    def go_t(t: Term, depth: int) -> Term:
        if isinstance(t, BoundVar):
            if t.index == depth:
                return shift_term(value, depth, 0)
            if t.index > depth:
                return BoundVar(t.index - 1)
            return t
        if isinstance(t, FnApp):
            return FnApp(t.def_id, tuple(go_t(a, depth) for a in t.args))
        return t

    def go_f(f: Formula, depth: int) -> Formula:
        if isinstance(f, Eq):
            return Eq(go_t(f.lhs, depth), go_t(f.rhs, depth))
        if isinstance(f, Implies):
            return Implies(go_f(f.premise, depth), go_f(f.conclusion, depth))
        return Forall(go_f(f.body, depth + 1))

    return go_f(body, 0)


def strip_foralls(f: Formula) -> tuple[int, Formula]:
    n = 0
    while isinstance(f, Forall):
        f = f.body
        n += 1
    return n, f


def free_indices(f: Formula | Term) -> frozenset[int]:
    """Loose de Bruijn indices of a term or formula, relative to its root."""
    out: set[int] = set()

    def go(x, depth: int) -> None:
        if isinstance(x, BoundVar):
            if x.index >= depth:
                out.add(x.index - depth)
        elif isinstance(x, FnApp):
            for a in x.args:
                go(a, depth)
        elif isinstance(x, Eq):
            go(x.lhs, depth)
            go(x.rhs, depth)
        elif isinstance(x, Implies):
            go(x.premise, depth)
            go(x.conclusion, depth)
        elif isinstance(x, Forall):
            go(x.body, depth + 1)

    go(f, 0)
    return frozenset(out)


def iter_subterms(f: Formula | Term, depth: int = 0) -> Iterator[tuple[Term, int]]:
    """All term occurrences in preorder, with their binder depth."""
    if isinstance(f, (BoundVar, FreeVar, Const, FnApp)):
        yield f, depth
        if isinstance(f, FnApp):
            for a in f.args:
                yield from iter_subterms(a, depth)
    elif isinstance(f, Eq):
        yield from iter_subterms(f.lhs, depth)
        yield from iter_subterms(f.rhs, depth)
    elif isinstance(f, Implies):
        yield from iter_subterms(f.premise, depth)
        yield from iter_subterms(f.conclusion, depth)
    elif isinstance(f, Forall):
        yield from iter_subterms(f.body, depth + 1)


# --- stable digests ----------------------------------------------------------

def _ser(x, buf: bytearray) -> None:
    if isinstance(x, BoundVar):
        buf.append(1)
        buf += x.index.to_bytes(4, "little")
    elif isinstance(x, FreeVar):
        buf.append(2)
        buf += x.level.to_bytes(4, "little")
    elif isinstance(x, Const):
        buf.append(3)
        buf += x.def_id.to_bytes(4, "little")
    elif isinstance(x, FnApp):
        buf.append(4)
        buf += x.def_id.to_bytes(4, "little")
        buf.append(len(x.args))
        for a in x.args:
            _ser(a, buf)
    elif isinstance(x, Eq):
        buf.append(5)
        _ser(x.lhs, buf)
        _ser(x.rhs, buf)
    elif isinstance(x, Implies):
        buf.append(6)
        _ser(x.premise, buf)
        _ser(x.conclusion, buf)
    elif isinstance(x, Forall):
        buf.append(7)
        _ser(x.body, buf)
    else:
        raise TypeError(f"cannot serialize {x!r}")


def value_digest(x: Formula | Term) -> int:
    """Stable 64-bit digest of the de Bruijn structure (DefIds as given)."""
    buf = bytearray()
    _ser(x, buf)
    return combine64(bytes(buf))


def state_digest(s: ProofState) -> int:
    buf = bytearray()
    buf += s.num_free.to_bytes(4, "little")
    buf += len(s.hypotheses).to_bytes(2, "little")
    for h in s.hypotheses:
        _ser(h, buf)
    buf.append(0xFF)
    _ser(s.goal, buf)
    return combine64(bytes(buf))
