"""tacgraph: a synthetic equational proving benchmark with learned tactic
predictors (graph neural network and k-nearest-neighbour) that keep learning
from new definitions and proofs at evaluation time."""

__version__ = "0.1.0"
