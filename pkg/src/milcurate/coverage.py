"""Representative-subset selection by soft coverage.

Node i with score d_i is covered by a set S with probability
``1 - prod_{j in S}(1 - e_ij)`` (1 when i is in S); the objective is the
score-weighted coverage. It is monotone submodular, so greedy selection
under a cardinality budget is within 1 - 1/e of the optimum.
"""
import itertools
import json
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, EnumerationTooLarge, ValidationError

MAX_EXACT_NODES = 20


@dataclass(frozen=True, eq=False)
class ComponentGraph:
    d: np.ndarray
    e: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.d, dtype=float)
        e = np.asarray(self.e, dtype=float)
        problems = []
        if d.ndim != 1:
            problems.append("d must be a vector")
        elif e.shape != (len(d), len(d)):
            problems.append(f"e must be {len(d)}x{len(d)}, got {e.shape}")
        else:
            if np.any(d < 0) or not np.all(np.isfinite(d)):
                problems.append("node scores must be finite and >= 0")
            if np.any((e < 0) | (e > 1)) or not np.all(np.isfinite(e)):
                problems.append("affinities must lie in [0, 1]")
            if np.any(np.diag(e) != 0):
                problems.append("affinity diagonal must be zero")
        if problems:
            raise ValidationError("invalid component graph: " + "; ".join(problems), problems)
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "e", e)

    @property
    def n(self):
        return len(self.d)

    def to_dict(self):
        return {"d": self.d.tolist(), "e": self.e.tolist()}

    @classmethod
    def from_dict(cls, obj):
        return cls(obj["d"], obj["e"])

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _check_nodes(S, n):
    S = sorted(set(int(i) for i in S))
    if S and (S[0] < 0 or S[-1] >= n):
        raise DomainError(f"node index out of range 0..{n - 1}: {S}")
    return S


def coverage_objective(S, graph):
    S = _check_nodes(S, graph.n)
    if not S:
        return 0.0
    theta = 1.0 - np.prod(1.0 - graph.e[:, S], axis=1)
    theta[S] = 1.0
    return float(graph.d @ theta)


def _check_budget(budget, n):
    if not 1 <= budget <= n:
        raise DomainError(f"budget must lie in 1..{n}, got {budget}")


def greedy_select(graph, budget):
    """Add the node with the largest marginal gain until ``budget`` nodes are
    chosen (lowest index wins ties). Returns ``(nodes, objective)``."""
    _check_budget(budget, graph.n)
    S = []
    # uncovered[i] = prod_{j in S}(1 - e_ij), zero once i itself is chosen
    uncovered = np.ones(graph.n)
    for _ in range(budget):
        # gain(v) = d_v * uncovered_v + sum_{i != v} d_i * uncovered_i * e_iv
        spill = (graph.d * uncovered) @ graph.e
        gains = graph.d * uncovered + spill
        gains[S] = -np.inf
        v = int(np.argmax(gains))
        S.append(v)
        uncovered *= 1.0 - graph.e[:, v]
        uncovered[v] = 0.0
    S.sort()
    return S, coverage_objective(S, graph)


def exact_select(graph, budget, max_nodes=MAX_EXACT_NODES):
    """Exhaustive optimum over subsets of size <= budget; ties go to the
    lexicographically smallest subset. Returns ``(nodes, objective)``."""
    if graph.n > max_nodes:
        raise EnumerationTooLarge(f"exact selection is limited to {max_nodes} nodes, got {graph.n}")
    _check_budget(budget, graph.n)
    candidates = [list(S) for r in range(1, budget + 1) for S in itertools.combinations(range(graph.n), r)]
    candidates.sort()
    best, best_val = None, -np.inf
    for S in candidates:
        val = coverage_objective(S, graph)
        if val > best_val:
            best, best_val = S, val
    return best, best_val
