"""S-expression reader and printer for formulas, scripts, and package files.

Grammar (names are qualified `pkg.def`; short names resolve inside the
current package first):

    term       := (v N)              de Bruijn index
                | (c N)              proof-local scope constant
                | NAME               arity-0 symbol
                | (NAME term+)       application
    formula    := (forall formula) | (-> formula formula) | (= term term)
    arg        := (h N) | NAME
    tactic     := (intro) | (reflexivity) | (symmetry) | (exact (h N))
                | (apply arg) | (rewrite arg) | (rewrite-in arg (h N))
    file form  := (package NAME (deps NAME*))
                | (symbol NAME ARITY)
                | (equation NAME formula)
                | (theorem NAME formula (proof tactic*))
"""
from __future__ import annotations

from typing import Union

from .terms import (BaseTactic, BoundVar, Const, DefKind, Environment, Eq, FnApp,
                    Forall, Formula, FreeVar, Global, IllFormed, Implies, Local,
                    ProofState, Term, TacticInvocation)

Sexp = Union[str, int, list]


def tokenize(text: str) -> list[str]:
    out: list[str] = []
    i, n = 0, len(text)
    while i < n:
        ch = text[i]
        if ch in "()":
            out.append(ch)
            i += 1
        elif ch.isspace():
            i += 1
        elif ch == ";":
            while i < n and text[i] != "\n":
                i += 1
        else:
            j = i
            while j < n and not text[j].isspace() and text[j] not in "();":
                j += 1
            out.append(text[i:j])
            i = j
    return out


def parse_all(text: str) -> list[Sexp]:
    tokens = tokenize(text)
    pos = 0

    def parse_one() -> Sexp:
        nonlocal pos
        if pos >= len(tokens):
            raise IllFormed("unexpected end of input")
        tok = tokens[pos]
        pos += 1
        if tok == "(":
            items = []
            while pos < len(tokens) and tokens[pos] != ")":
                items.append(parse_one())
            if pos >= len(tokens):
                raise IllFormed("unbalanced parenthesis")
            pos += 1
            return items
        if tok == ")":
            raise IllFormed("unexpected )")
        try:
            return int(tok)
        except ValueError:
            return tok

    forms = []
    while pos < len(tokens):
        forms.append(parse_one())
    return forms


def parse(text: str) -> Sexp:
    forms = parse_all(text)
    if len(forms) != 1:
        raise IllFormed(f"expected one form, found {len(forms)}")
    return forms[0]


# --- resolution ---------------------------------------------------------------

class NameScope:
    """Resolves short or qualified names against an environment."""

    def __init__(self, env: Environment, package: str = ""):
        self.env = env
        self.package = package

    def def_id(self, name: str) -> int:
        if self.package:
            qualified = f"{self.package}.{name}"
            if qualified in self.env.by_name:
                return self.env.by_name[qualified]
        if name in self.env.by_name:
            return self.env.by_name[name]
        raise IllFormed(f"unknown name {name!r}")


def term_of_sexp(s: Sexp, scope: NameScope) -> Term:
    if isinstance(s, str):
        return Const(scope.def_id(s))
    if isinstance(s, int):
        raise IllFormed(f"bare integer {s} is not a term")
    if not s:
        raise IllFormed("empty term")
    head = s[0]
    if head == "v":
        return BoundVar(_int(s, 1))
    if head == "c":
        return FreeVar(_int(s, 1))
    if not isinstance(head, str):
        raise IllFormed(f"bad application head {head!r}")
    args = tuple(term_of_sexp(a, scope) for a in s[1:])
    if not args:
        raise IllFormed("application needs arguments")
    return FnApp(scope.def_id(head), args)


def formula_of_sexp(s: Sexp, scope: NameScope) -> Formula:
    if not isinstance(s, list) or not s:
        raise IllFormed(f"not a formula: {s!r}")
    head = s[0]
    if head == "forall":
        _arity(s, 2)
        return Forall(formula_of_sexp(s[1], scope))
    if head == "->":
        _arity(s, 3)
        return Implies(formula_of_sexp(s[1], scope), formula_of_sexp(s[2], scope))
    if head == "=":
        _arity(s, 3)
        return Eq(term_of_sexp(s[1], scope), term_of_sexp(s[2], scope))
    raise IllFormed(f"unknown formula head {head!r}")


def _arg_of_sexp(s: Sexp, scope: NameScope):
    if isinstance(s, str):
        return Global(scope.def_id(s))
    if isinstance(s, list) and len(s) == 2 and s[0] == "h":
        return Local(_int(s, 1))
    raise IllFormed(f"bad tactic argument {s!r}")


_TACTIC_BY_NAME = {t.value: t for t in BaseTactic}


def tactic_of_sexp(s: Sexp, scope: NameScope) -> TacticInvocation:
    if not isinstance(s, list) or not s or not isinstance(s[0], str):
        raise IllFormed(f"not a tactic: {s!r}")
    base = _TACTIC_BY_NAME.get(s[0])
    if base is None:
        raise IllFormed(f"unknown tactic {s[0]!r}")
    args = tuple(_arg_of_sexp(a, scope) for a in s[1:])
    if len(args) != base.slots:
        raise IllFormed(f"{base.value} takes {base.slots} arguments")
    return TacticInvocation(base, args)


def _int(s: list, idx: int) -> int:
    if len(s) <= idx or not isinstance(s[idx], int) or s[idx] < 0:
        raise IllFormed(f"expected a nonnegative integer in {s!r}")
    return s[idx]


def _arity(s: list, n: int) -> None:
    if len(s) != n:
        raise IllFormed(f"form {s!r} expects {n - 1} parts")


# --- printing -----------------------------------------------------------------

def term_to_str(t: Term, env: Environment) -> str:
    if isinstance(t, BoundVar):
        return f"(v {t.index})"
    if isinstance(t, FreeVar):
        return f"(c {t.level})"
    if isinstance(t, Const):
        return env[t.def_id].name
    if isinstance(t, FnApp):
        inner = " ".join(term_to_str(a, env) for a in t.args)
        return f"({env[t.def_id].name} {inner})"
    raise IllFormed(f"not a term: {t!r}")


def formula_to_str(f: Formula, env: Environment) -> str:
    if isinstance(f, Eq):
        return f"(= {term_to_str(f.lhs, env)} {term_to_str(f.rhs, env)})"
    if isinstance(f, Implies):
        return f"(-> {formula_to_str(f.premise, env)} {formula_to_str(f.conclusion, env)})"
    if isinstance(f, Forall):
        return f"(forall {formula_to_str(f.body, env)})"
    raise IllFormed(f"not a formula: {f!r}")


def tactic_to_str(inv: TacticInvocation, env: Environment) -> str:
    parts = [inv.base.value]
    for a in inv.args:
        parts.append(f"(h {a.index})" if isinstance(a, Local) else env[a.def_id].name)
    return "(" + " ".join(parts) + ")"


def state_to_str(s: ProofState, env: Environment) -> str:
    lines = [f"scope constants: {s.num_free}"] if s.num_free else []
    for i, h in enumerate(s.hypotheses):
        lines.append(f"h{i}: {formula_to_str(h, env)}")
    lines.append(f"goal: {formula_to_str(s.goal, env)}")
    return "\n".join(lines)


# --- package files --------------------------------------------------------------

def load_package_text(text: str, env: Environment) -> tuple[str, list[str], list[int]]:
    """Parse one package file into env; returns (name, deps, new def ids)."""
    forms = parse_all(text)
    if not forms or not isinstance(forms[0], list) or forms[0][:1] != ["package"]:
        raise IllFormed("file must start with a (package ...) form")
    header = forms[0]
    if len(header) != 3 or not isinstance(header[1], str):
        raise IllFormed("bad package header")
    pkg = header[1]
    deps_form = header[2]
    if not isinstance(deps_form, list) or deps_form[:1] != ["deps"]:
        raise IllFormed("bad deps form")
    deps = [d for d in deps_form[1:]]
    scope = NameScope(env, pkg)
    new_ids: list[int] = []
    for form in forms[1:]:
        if not isinstance(form, list) or not form:
            raise IllFormed(f"bad form {form!r}")
        head = form[0]
        if head == "symbol":
            _arity(form, 3)
            d = env.add(DefKind.SYMBOL, f"{pkg}.{form[1]}", pkg, arity=_int(form, 2))
        elif head == "equation":
            _arity(form, 3)
            stmt = formula_of_sexp(form[2], scope)
            d = env.add(DefKind.EQUATION, f"{pkg}.{form[1]}", pkg, statement=stmt)
        elif head == "theorem":
            _arity(form, 4)
            stmt = formula_of_sexp(form[2], scope)
            proof_form = form[3]
            if not isinstance(proof_form, list) or proof_form[:1] != ["proof"]:
                raise IllFormed("theorem needs a (proof ...) form")
            proof = tuple(tactic_of_sexp(t, scope) for t in proof_form[1:])
            d = env.add(DefKind.THEOREM, f"{pkg}.{form[1]}", pkg,
                        statement=stmt, proof=proof)
        else:
            raise IllFormed(f"unknown form head {head!r}")
        new_ids.append(d.id)
    return pkg, deps, new_ids


def dump_package(pkg: str, deps: list[str], defs, env: Environment) -> str:
    """Inverse of load_package_text for definitions belonging to pkg."""
    prefix = f"{pkg}."

    def short(name: str) -> str:
        return name[len(prefix):] if name.startswith(prefix) else name

    lines = [f"(package {pkg} (deps{''.join(' ' + d for d in deps)}))"]
    for d in defs:
        if d.kind is DefKind.SYMBOL:
            lines.append(f"(symbol {short(d.name)} {d.arity})")
        elif d.kind is DefKind.EQUATION:
            lines.append(f"(equation {short(d.name)} {formula_to_str(d.statement, env)})")
        else:
            proof = " ".join(tactic_to_str(t, env) for t in d.proof or ())
            lines.append(f"(theorem {short(d.name)} {formula_to_str(d.statement, env)}"
                         f" (proof {proof}))" if proof else
                         f"(theorem {short(d.name)} {formula_to_str(d.statement, env)}"
                         f" (proof))")
    return "\n".join(lines) + "\n"
