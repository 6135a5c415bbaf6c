"""First-order equational calculus: terms, tactics, proof replay, file syntax."""
from .terms import (Argument, BadArgument, BASE_TACTICS, BaseTactic, BoundVar, Const,
                    DefId, DefKind, Definition, Environment, Eq, FnApp, Forall,
                    Formula, FreeVar, Global, GoalStack, IllFormed, Implies,
                    KernelError, Local, NoMatch, NotApplicable, ProofState,
                    TACTIC_INDEX, TacticInvocation, Term, check_closed_formula,
                    check_formula, free_indices, initial_state, iter_subterms,
                    open_binder, shift_term, state_digest, strip_foralls,
                    subst_formula, subst_term, term_has_loose_below, value_digest)
from .tactics import (apply_tactic, check_proof, match_formula, match_term,
                      rewrite_first, run_script)
from .sexpr import (NameScope, dump_package, formula_of_sexp, formula_to_str,
                    load_package_text, parse, parse_all, state_to_str,
                    tactic_of_sexp, tactic_to_str, term_of_sexp, term_to_str)

__all__ = [n for n in dir() if not n.startswith("_")]
