"""Instance-level noise filtering: MIL with constrained positive bags.

Learns ``f(x) = sum_i alpha_i * y~_i * (k(x, x_i) + 1)`` by a cutting-plane
loop over candidate labelings. Each restricted master problem is a
multiple-kernel problem whose base kernels are ``K_aug * y y'`` for the
labelings collected so far; the next labeling is the most violated one,
found by exhaustive enumeration of positive-bag labels.

A labeling y in {-1,+1}^n is admissible when every negative-bag instance is
-1 and every positive bag keeps at least ceil(delta*|B|) instances at +1.
"""
import math
from dataclasses import dataclass, field

import numpy as np

from .core import require_valid
from .errors import ConvergenceError, DomainError, EnumerationTooLarge, StateError
from .kernels import KernelSpec, augment, gram_matrix, kernel_matrix
from .solvers import simplex_qp

MAX_ENUM_INSTANCES = 20
SUPPORT_TOL = 1e-10


def initial_labeling(problem):
    return np.where(problem.positive_mask, 1, -1).astype(np.int8)


def labeling_violations(y, problem):
    """Human-readable list of admissibility violations (empty when admissible)."""
    y = np.asarray(y)
    out = []
    if y.shape != (len(problem.bag_index),):
        return [f"labeling has length {y.size}, expected {len(problem.bag_index)}"]
    if not np.all(np.isin(y, (-1, 1))):
        out.append("labels must be -1 or +1")
    for i, bag in enumerate(problem.bags):
        yb = y[problem.bag_index == i]
        if bag.positive:
            need = problem.min_positive(bag)
            if (yb == 1).sum() < need:
                out.append(f"bag {bag.id} keeps {(yb == 1).sum()} positives, needs {need}")
        elif np.any(yb != -1):
            out.append(f"negative bag {bag.id} has a positive instance")
    return out


def is_admissible(y, problem):
    return not labeling_violations(y, problem)


def _bag_patterns(size, need):
    """All +/-1 patterns of length ``size`` with >= ``need`` ones.

    Rows come in lexicographic order with +1 ranked before -1.
    """
    if size == 0:
        return np.zeros((1, 0), dtype=np.int8)
    codes = np.arange(2 ** size)
    # bit set -> -1; counting upward in binary is then lexicographic with +1 first
    bits = (codes[:, None] >> np.arange(size - 1, -1, -1)) & 1
    pats = np.where(bits == 1, -1, 1).astype(np.int8)
    return pats[(pats == 1).sum(1) >= need]


def count_admissible(problem):
    total = 1
    for bag in problem.positive_bags:
        m = problem.min_positive(bag)
        total *= sum(math.comb(len(bag), j) for j in range(m, len(bag) + 1))
    return total


def _positive_slots(problem):
    """(global indices, required positives) per positive bag, in bag order."""
    slots = []
    for i, bag in enumerate(problem.bags):
        if bag.positive:
            slots.append((np.flatnonzero(problem.bag_index == i), problem.min_positive(bag)))
    return slots


def _iter_products(pattern_sets, chunk=1 << 16):
    """Yield blocks of concatenated patterns over the Cartesian product.

    The first set varies slowest, so rows stream out in lexicographic order.
    """
    sizes = [len(p) for p in pattern_sets]
    total = int(np.prod(sizes)) if sizes else 1
    for start in range(0, total, chunk):
        idx = np.arange(start, min(start + chunk, total))
        parts = []
        for pats, size, stride in zip(pattern_sets, sizes, _strides(sizes)):
            parts.append(pats[(idx // stride) % size])
        yield np.hstack(parts) if parts else np.zeros((len(idx), 0), dtype=np.int8)


def _strides(sizes):
    out, acc = [], 1
    for s in reversed(sizes):
        out.append(acc)
        acc *= s
    return out[::-1]


def admissible_labelings(problem, max_instances=MAX_ENUM_INSTANCES):
    """Generate every admissible labeling once, in lexicographic order."""
    slots = _positive_slots(problem)
    n_free = sum(len(idx) for idx, _ in slots)
    if n_free > max_instances:
        raise EnumerationTooLarge(f"{n_free} positive-bag instances exceed the limit of {max_instances}")
    base = initial_labeling(problem)
    free = np.concatenate([idx for idx, _ in slots]) if slots else np.zeros(0, int)
    patterns = [_bag_patterns(len(idx), m) for idx, m in slots]
    for block in _iter_products(patterns):
        for row in block:
            y = base.copy()
            y[free] = row
            yield y


@dataclass
class MklState:
    u: np.ndarray
    alpha: np.ndarray
    objective: float
    gap: float
    iterations: int
    support: list = field(default_factory=list, repr=False)


def _labeling_matrix(labelings):
    return np.vstack([np.asarray(y, dtype=float) for y in labelings])


def labeling_values(alpha, K, labelings):
    """``(alpha*y)' K (alpha*y)`` for each labeling y (rows of a matrix)."""
    Y = _labeling_matrix(labelings)
    A = Y * alpha
    return np.einsum("ti,ij,tj->t", A, K, A)


def _project_simplex(v):
    n = len(v)
    s = np.sort(v)[::-1]
    css = np.cumsum(s) - 1.0
    rho = np.nonzero(s * np.arange(1, n + 1) > css)[0][-1]
    return np.maximum(v - css[rho] / (rho + 1.0), 0.0)


def restricted_mkl(gram, labelings, C, tol=1e-6, u0=None, support=None, max_iter=500):
    """Solve ``min_u max_alpha -alpha'(sum_t u_t K_aug*y_t y_t' + I/C)alpha / 2``.

    u ranges over the simplex of the active labelings and alpha over the
    simplex of instances. For fixed u the inner problem is an exact simplex
    QP. The outer objective J(u) is convex and smooth with gradient
    ``-v/2``, ``v_t = alpha'(K_aug*y_t y_t')alpha``. It is minimized by
    projected Newton steps: the Hessian follows from differentiating the
    inner optimality conditions on the support of alpha, and the quadratic
    model is minimized over the simplex. A line search on the directional
    derivative picks the step, since near the optimum J is flat to rounding
    error while v is still resolved accurately.

    Stops when the primal-dual gap ``(max_t v_t - u'v)/2 + inner_gap`` is at
    most ``tol``.
    """
    if not gram.augmented:
        raise StateError("restricted MKL needs the augmented Gram matrix")
    if not labelings:
        raise StateError("active labeling set is empty")
    K = gram.entries
    n = K.shape[0]
    Y = _labeling_matrix(labelings)
    T = len(Y)
    ridge = np.eye(n) / C
    u = np.full(T, 1.0 / T) if u0 is None else np.asarray(u0, dtype=float)

    def evaluate(u, support):
        M = K * (Y.T @ (Y * u[:, None])) + ridge
        alpha, inner_gap, S = simplex_qp(M, tol=1e-15, support=support)
        v = labeling_values(alpha, K, Y)
        return -0.5 * float(alpha @ M @ alpha), v, alpha, inner_gap, S

    cur = evaluate(u, support)
    for it in range(max_iter):
        J, v, alpha, inner_gap, S = cur
        gap = 0.5 * (v.max() - u @ v) + inner_gap
        if gap <= tol or T == 1:
            return MklState(u, alpha, J, float(gap), it + 1, S)
        grad = -0.5 * v
        H = _mkl_hessian(K, Y, u, alpha, S, ridge)
        u_newton, _, _ = simplex_qp(H, q=grad - H @ u, tol=1e-15)
        d = u_newton - u
        slope0 = grad @ d
        if not slope0 < 0:
            # fall back to a projected gradient direction
            d = _project_simplex(u - grad / max(np.ptp(grad), 1e-300)) - u
            slope0 = grad @ d
        if not slope0 < 0:
            # toward the most violated labeling; slope is minus the outer gap
            d = -u.copy()
            d[np.argmax(v)] += 1.0
            slope0 = grad @ d
            if not slope0 < 0:
                raise ConvergenceError(f"MKL made no progress at gap {gap:.3g}")
        t, nxt = _derivative_search(lambda t: evaluate(u + t * d, S), d, slope0)
        u = np.maximum(u + t * d, 0.0)
        u /= u.sum()
        cur = nxt
    raise ConvergenceError(f"MKL did not reach gap {tol} in {max_iter} iterations")


def _mkl_hessian(K, Y, u, alpha, S, ridge):
    """Hessian of J(u) = -alpha*(u)'M(u)alpha*(u)/2 with alpha* restricted to
    its support S, where it solves ``M_SS a = lam 1, 1'a = 1``."""
    M = K[np.ix_(S, S)] * (Y[:, S].T @ (Y[:, S] * u[:, None])) + ridge[np.ix_(S, S)]
    # column t: (K*y_t y_t') alpha on the support
    B = (Y[:, S].T * (K[S] @ (Y * alpha).T))
    MiB = np.linalg.solve(M, B)
    Mi1 = np.linalg.solve(M, np.ones(len(S)))
    PB = MiB - np.outer(Mi1, Mi1 @ B) / Mi1.sum()
    H = B.T @ PB
    return 0.5 * (H + H.T)


def _derivative_search(evaluate, d, slope0, max_eval=40):
    """Minimize a convex smooth function along ``t in [0, 1]`` using only its
    derivative ``-v(t)'d/2`` (regula falsi, Illinois variant)."""
    hi = evaluate(1.0)
    slope_hi = -0.5 * hi[1] @ d
    if slope_hi <= 0:
        return 1.0, hi
    t_lo, s_lo, t_hi, s_hi = 0.0, slope0, 1.0, slope_hi
    best_t, best = 1.0, hi
    side = 0
    for _ in range(max_eval):
        t = t_hi - s_hi * (t_hi - t_lo) / (s_hi - s_lo)
        if not t_lo < t < t_hi:
            t = 0.5 * (t_lo + t_hi)
        res = evaluate(t)
        s = -0.5 * res[1] @ d
        best_t, best = t, res
        if abs(s) <= 1e-6 * abs(slope0):
            break
        if s < 0:
            t_lo, s_lo = t, s
            if side == -1:
                s_hi *= 0.5
            side = -1
        else:
            t_hi, s_hi = t, s
            if side == 1:
                s_lo *= 0.5
            side = 1
    return best_t, best


def most_violated_labeling(alpha, gram, problem, max_instances=MAX_ENUM_INSTANCES, support_tol=SUPPORT_TOL):
    """Admissible labeling maximizing ``sum_ij alpha_i alpha_j y_i y_j G_ij``.

    Only positive-bag instances with ``alpha_i > support_tol`` can change the
    objective, so the others are pinned to +1 (which only loosens the bag
    constraints) and the enumeration runs over the rest. Ties go to the
    lexicographically first labeling with +1 ranked before -1.

    Returns ``(y, value)``.
    """
    alpha = np.asarray(alpha, dtype=float)
    G = gram.entries
    y = initial_labeling(problem)
    active = alpha > support_tol
    slots = []
    for idx, need in _positive_slots(problem):
        free = idx[active[idx]]
        pinned = len(idx) - len(free)
        slots.append((free, max(0, need - pinned)))
    free = np.concatenate([f for f, _ in slots]) if slots else np.zeros(0, int)
    if len(free) > max_instances:
        raise EnumerationTooLarge(
            f"{len(free)} positive-bag instances with non-zero weight exceed the limit of {max_instances}")
    fixed = np.flatnonzero(active & ~np.isin(np.arange(len(y)), free))
    a_free = alpha[free]
    a_fixed = alpha[fixed] * y[fixed]
    W = G[np.ix_(free, free)] * np.outer(a_free, a_free)
    lin = a_free * (G[np.ix_(free, fixed)] @ a_fixed)
    const = float(a_fixed @ G[np.ix_(fixed, fixed)] @ a_fixed)
    patterns = [_bag_patterns(len(f), need) for f, need in slots]
    best_val, best_row = -np.inf, None
    for block in _iter_products(patterns):
        Z = block.astype(float)
        vals = np.einsum("ij,ij->i", Z @ W, Z) + 2.0 * (Z @ lin)
        top = vals.max()
        if best_row is None or top > best_val + 1e-12 * max(1.0, abs(best_val)):
            cut = top - 1e-12 * max(1.0, abs(top))
            r = int(np.argmax(vals >= cut))
            best_val, best_row = float(vals[r]), block[r]
    y[free] = best_row
    return y, best_val + const


@dataclass
class InstanceModel:
    """Kernel expansion ``f(x) = sum_i alpha_i y~_i (k(x, x_i) + 1)``."""

    support: np.ndarray
    alpha: np.ndarray
    y_tilde: np.ndarray
    kernel: KernelSpec

    def score(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if len(self.alpha) == 0:
            return np.zeros(len(X))
        Kx = kernel_matrix(X, self.support, self.kernel) + 1.0
        return Kx @ (self.alpha * self.y_tilde)

    def to_dict(self):
        return {
            "kernel": self.kernel.to_dict(),
            "support": [
                {"features": [float(v) for v in x], "alpha": float(a), "y_tilde": float(t)}
                for x, a, t in zip(self.support, self.alpha, self.y_tilde)
            ],
        }

    @classmethod
    def from_dict(cls, d):
        sup = d["support"]
        dim = len(sup[0]["features"]) if sup else 0
        return cls(
            np.array([s["features"] for s in sup], dtype=float).reshape(len(sup), dim),
            np.array([s["alpha"] for s in sup], dtype=float),
            np.array([s["y_tilde"] for s in sup], dtype=float),
            KernelSpec.from_dict(d["kernel"]),
        )


def score_instance(model, x):
    x = np.asarray(x, dtype=float)
    if model.support.size and x.shape[-1] != model.support.shape[1]:
        raise DomainError(f"dimension mismatch: {x.shape[-1]} vs {model.support.shape[1]}")
    return float(model.score(x[None, :])[0])


@dataclass
class CuttingPlaneTrace:
    objectives: list = field(default_factory=list)
    mkl_gaps: list = field(default_factory=list)
    violations: list = field(default_factory=list)
    labelings: list = field(default_factory=list, repr=False)
    u: np.ndarray | None = None
    alpha: np.ndarray | None = None
    converged: bool = False
    stop_reason: str = ""

    @property
    def iterations(self):
        return len(self.objectives)


def train_instance_model(problem, tol=1e-6, max_iter=50, mkl_tol=1e-6, max_instances=MAX_ENUM_INSTANCES):
    """Cutting-plane training; returns ``(InstanceModel, CuttingPlaneTrace)``.

    Stops when the most violated labeling is already active, when it beats
    the best active labeling by at most ``tol``, or after ``max_iter``
    restricted solves.
    """
    require_valid(problem)
    X = problem.X
    kernel = problem.kernel.resolve(X.shape[1])
    G = augment(gram_matrix(X, kernel))
    K = G.entries
    y1 = initial_labeling(problem)
    active = [y1]
    trace = CuttingPlaneTrace(labelings=active)
    state = restricted_mkl(G, active, problem.C, mkl_tol)
    trace.objectives.append(state.objective)
    trace.mkl_gaps.append(state.gap)
    while True:
        y_star, _ = most_violated_labeling(state.alpha, G, problem, max_instances)
        bad = labeling_violations(y_star, problem)
        if bad:
            raise AssertionError(f"inadmissible labeling emitted: {bad}")
        vals = labeling_values(state.alpha, K, active + [y_star])
        violation = float(vals[-1] - vals[:-1].max())
        trace.violations.append(violation)
        if any(np.array_equal(y_star, y) for y in active):
            trace.converged, trace.stop_reason = True, "violator already active"
            break
        if violation <= tol:
            trace.converged, trace.stop_reason = True, "violation below tolerance"
            break
        if len(trace.objectives) >= max_iter:
            trace.stop_reason = "iteration limit"
            break
        active.append(y_star)
        state = restricted_mkl(G, active, problem.C, mkl_tol, u0=np.append(state.u, 0.0), support=state.support)
        trace.objectives.append(state.objective)
        trace.mkl_gaps.append(state.gap)
    trace.u, trace.alpha = state.u, state.alpha
    y_tilde = state.u @ _labeling_matrix(active)
    keep = state.alpha > SUPPORT_TOL
    model = InstanceModel(X[keep].copy(), state.alpha[keep].copy(), y_tilde[keep], kernel)
    return model, trace
