"""Iterative-deepening cost-bounded proof search with budget accounting.

Depth-first search over the tree of tactic applications, children ordered by
ascending step cost (-log p), pruned when the cumulative path cost exceeds the
current threshold. On exhaustion the threshold is raised and the search
restarts, so memory stays proportional to the deepest path instead of the
frontier. Within one iteration each distinct proof state is sent to the
suggestion source once, and a goal that was already fully explored at an equal
or cheaper cumulative cost is not explored again.

Two stopping policies:

* ``first_proof=True`` (default): return the first complete proof. Cheapest
  for solver benchmarks, but the proof found under an overshot threshold is
  not always the cheapest one.
* ``first_proof=False``: keep searching the current iteration with the best
  proof so far as an extra pruning bound and return the cheapest proof. This
  matches a queue-based Dijkstra on the same suggestion space exactly (ties
  broken toward the leftmost proof).

Once a subgoal produced by a goal split is solved, its sub-proof is committed;
alternatives for it are never revisited when a later sibling fails. Subgoals
share no metavariables, so a sibling's failure can never be caused by the
committed choice, and under ``first_proof=False`` the committed sub-proof is
the cheapest one, which maximizes the budget left for the siblings.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from typing import Callable, Optional, Protocol, Sequence

import numpy as np

from .kernel import (Environment, Formula, KernelError, ProofState,
                     TacticInvocation, apply_tactic, initial_state,
                     state_digest)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SearchBudget:
    """Per-theorem limits; the search halts when any of them trips."""

    wall_seconds: float = 60.0
    max_model_calls: int = 512
    max_tactic_executions: int = 4096


@dataclass
class SearchStats:
    model_calls: int = 0
    tactic_executions: int = 0
    wall_time: float = 0.0
    iterations: int = 0
    solved: bool = False
    proof: Optional[tuple[TacticInvocation, ...]] = None
    cost: Optional[float] = None
    peak_stack: int = 0


def next_threshold(d_max: float, d_extra: float) -> float:
    """Cost bound for the next deepening iteration."""
    return d_max + 1.0 + d_extra


def similarity_log_probs(scores: Sequence[float]) -> np.ndarray:
    """Normalize raw similarity scores to log probabilities (softmax, T=1).

    Suggestion sources that score by similarity rather than probability go
    through this before their scores are turned into additive step costs.
    """
    s = np.asarray(scores, dtype=np.float64)
    if s.size == 0:
        return s
    m = float(s.max())
    return s - (m + np.log(np.exp(s - m).sum()))


class SearchDomain(Protocol):
    """What the driver needs from a problem domain."""

    def suggest(self, state) -> Sequence[tuple[object, float]]:
        """Scored actions for one state as (action, log_prob) pairs."""

    def apply(self, state, action) -> Optional[Sequence]:
        """Sub-states left after the action, () if none, None on failure."""

    def digest(self, state) -> object:
        """Hashable key identifying the state up to structural equality."""


class _BudgetHit(Exception):
    pass


class _Driver:
    def __init__(self, domain: SearchDomain, budget: SearchBudget,
                 first_proof: bool):
        self.domain = domain
        self.budget = budget
        self.first_proof = first_proof
        self.stats = SearchStats()
        self.t0 = time.monotonic()
        self.sugg_memo: dict = {}
        self.fail_memo: dict = {}
        self.on_path: dict = {}
        self.action_path: list = []
        self.d_max = 0.0
        self.overflow: Optional[float] = None
        self.incumbent: Optional[float] = None
        self.best_script: Optional[tuple] = None
        self.depth = 0

    # -- budgets ---------------------------------------------------------

    def _tick(self) -> None:
        if time.monotonic() - self.t0 > self.budget.wall_seconds:
            raise _BudgetHit

    def _suggest(self, state, dig):
        hit = self.sugg_memo.get(dig)
        if hit is not None:
            return hit
        if self.stats.model_calls >= self.budget.max_model_calls:
            raise _BudgetHit
        self.stats.model_calls += 1
        try:
            raw = self.domain.suggest(state)
        except Exception as exc:  # noqa: BLE001 - foreign suggestion code
            log.warning("suggestion source failed, treating as empty: %s", exc)
            raw = []
        pairs = [(max(0.0, -float(lp)), a) for a, lp in raw]
        pairs.sort(key=lambda p: p[0])
        self.sugg_memo[dig] = pairs
        return pairs

    def _execute(self, state, action):
        if self.stats.tactic_executions >= self.budget.max_tactic_executions:
            raise _BudgetHit
        self.stats.tactic_executions += 1
        return self.domain.apply(state, action)

    # -- one deepening iteration ------------------------------------------

    def _goal(self, state, cum, closing):
        """Solve one goal completely, starting at cumulative cost cum.

        Returns ((cost_after, script), pruned_any); the solution part is None
        when the subtree holds no proof under the current bounds. closing is
        true when no obligations remain after this goal, so a completion here
        finishes a whole proof.
        """
        self._tick()
        dig = self.domain.digest(state)
        seen = self.on_path.get(dig)
        if seen is not None and seen <= cum:
            return None, False
        failed = self.fail_memo.get(dig)
        if failed is not None and cum >= failed[0]:
            return None, failed[1]

        self.depth += 1
        self.stats.peak_stack = max(self.stats.peak_stack, self.depth)
        self.on_path[dig] = cum
        best: Optional[tuple[float, tuple]] = None
        solved = False
        pruned = False
        try:
            for cost, action in self._suggest(state, dig):
                new = cum + cost
                if new > self.d_max:
                    if self.overflow is None:
                        self.overflow = new - self.d_max
                    pruned = True
                    break
                if self.incumbent is not None and new >= self.incumbent:
                    break
                if best is not None and new >= best[0]:
                    break
                subgoals = self._execute(state, action)
                if subgoals is None:
                    continue
                self.action_path.append(action)
                try:
                    sol, p = self._pending(list(subgoals), new, closing)
                finally:
                    self.action_path.pop()
                pruned = pruned or p
                if sol is None:
                    continue
                found = (sol[0], (action,) + sol[1])
                if self.first_proof:
                    solved = True
                    return found, pruned
                if best is None or found[0] < best[0]:
                    best = found
            solved = best is not None
            return best, pruned
        finally:
            del self.on_path[dig]
            self.depth -= 1
            if not solved:
                prev = self.fail_memo.get(dig)
                if prev is None or cum < prev[0]:
                    self.fail_memo[dig] = (cum, pruned)

    def _pending(self, goals, cum, closing):
        """Solve goals left to right, committing each sub-proof as found."""
        if not goals:
            if closing:
                self.incumbent = cum
                self.best_script = tuple(self.action_path)
            return (cum, ()), False
        head, rest = goals[0], goals[1:]
        sol, pruned = self._goal(head, cum, closing and not rest)
        if sol is None:
            return None, pruned
        after, script = sol
        sol2, pruned2 = self._pending(rest, after, closing)
        pruned = pruned or pruned2
        if sol2 is None:
            return None, pruned
        return (sol2[0], script + sol2[1]), pruned

    # -- deepening loop ----------------------------------------------------

    def run(self, root) -> SearchStats:
        solution: Optional[tuple[float, tuple]] = None
        try:
            first = self._suggest(root, self.domain.digest(root))
            if first:
                self.d_max = first[0][0]
                while True:
                    self.stats.iterations += 1
                    self.overflow = None
                    self.incumbent = None
                    self.best_script = None
                    if self.stats.iterations > 1:
                        self.sugg_memo.clear()
                    self.fail_memo.clear()
                    sol, _ = self._goal(root, 0.0, True)
                    if sol is not None:
                        solution = sol
                        break
                    if self.overflow is None:
                        break
                    self.d_max = next_threshold(self.d_max, self.overflow)
        except _BudgetHit:
            if self.incumbent is not None and self.best_script is not None:
                solution = (self.incumbent, self.best_script)
        if solution is not None:
            self.stats.solved = True
            self.stats.cost = solution[0]
            self.stats.proof = tuple(solution[1])
        self.stats.wall_time = time.monotonic() - self.t0
        return self.stats


def run_search(root, domain: SearchDomain, budget: SearchBudget,
               first_proof: bool = True) -> SearchStats:
    """Drive the deepening search from one root state of any domain."""
    return _Driver(domain, budget, first_proof).run(root)


class _TacticDomain:
    """Kernel proof states driven by a (state -> suggestions) callable."""

    def __init__(self, model: Callable[[ProofState], Sequence], env: Environment):
        self.model = model
        self.env = env

    def suggest(self, state):
        return self.model(state)

    def apply(self, state, action):
        try:
            return apply_tactic(state, action, self.env)
        except KernelError:
            return None

    def digest(self, state):
        return state_digest(state)


def solve(statement: Formula, model: Callable[[ProofState], Sequence],
          env: Environment, budget: SearchBudget,
          first_proof: bool = True) -> SearchStats:
    """Search for a proof of statement using model as the suggestion source."""
    root = initial_state(statement)
    return run_search(root, _TacticDomain(model, env), budget, first_proof)
