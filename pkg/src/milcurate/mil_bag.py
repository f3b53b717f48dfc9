"""Group-noise filtering with a latent bag classifier.

A bag X (instances as rows) is represented by a weighted compound feature
``phi(X, h) = X'h / xi'h`` over a 0/1 selection h of exactly k instances,
where ``xi`` down-weights instances far from the bag center. The bag score
is ``f(X) = max_h omega'phi(X, h)``, a cardinality-constrained fractional
program solved exactly by Dinkelbach iteration.

Training minimizes the latent SVM risk
``|omega|^2/2 + C sum_I max(0, 1 - Y_I f(X_I))`` with the concave-convex
procedure: positive-bag selections are frozen at their current argmax, and
the resulting convex upper bound is minimized with a bundle method.
"""
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import CalibrationError, CardinalityError, DomainError
from .solvers import dinkelbach_topk, simplex_qp, topk_indicator, train_linear_svm

log = logging.getLogger(__name__)

_XI_MIN = np.finfo(float).tiny
_XI_MAX = np.nextafter(1.0, 0.0)


@dataclass(frozen=True)
class WeightParams:
    xi_alpha: float = 1.0
    xi_beta: float = 0.0
    d_clamp: float = 1e-6

    def __post_init__(self):
        if not self.xi_alpha > 0:
            raise DomainError("xi_alpha must be positive")
        if not self.d_clamp > 0:
            raise DomainError("d_clamp must be positive")


def _features(bag):
    return bag.X if hasattr(bag, "X") else np.atleast_2d(np.asarray(bag, dtype=float))


def _bag_name(bag, i):
    return getattr(bag, "id", f"#{i}")


def instance_weights(bag, params=WeightParams()):
    """``xi_i = 1 / (1 + exp(a log d_i + b))`` with d_i the clamped distance
    to the bag mean; values are kept strictly inside (0, 1)."""
    X = _features(bag)
    d = np.linalg.norm(X - X.mean(0), axis=1)
    d = np.maximum(d, params.d_clamp)
    xi = expit(-(params.xi_alpha * np.log(d) + params.xi_beta))
    return np.clip(xi, _XI_MIN, _XI_MAX)


def topk_by_score(f, bag, k):
    """0/1 selection of the k instances with the largest ``f`` values."""
    X = _features(bag)
    if k > len(X):
        raise CardinalityError(f"k={k} exceeds bag size {len(X)}")
    return topk_indicator(f(X), k)


def compound_topk_feature(f, bag, k):
    X = _features(bag)
    h = topk_by_score(f, X, k)
    return X[h == 1].mean(0)


def weighted_feature(bag, xi, h):
    X = _features(bag)
    h = np.asarray(h)
    xi = np.asarray(xi, dtype=float)
    if len(h) != len(X) or len(xi) != len(X):
        raise DomainError("weights, selection and bag size disagree")
    # summing the selected rows matches X[sel].mean(0) bit for bit when xi = 1
    return X[h == 1].sum(0) / (xi @ h)


def best_assignment(omega, bag, xi, k, tol=1e-12):
    """Selection h maximizing ``omega'X'h / xi'h`` with ``sum(h) = k``."""
    X = _features(bag)
    if k > len(X):
        raise CardinalityError(f"k={k} exceeds bag size {len(X)}")
    return dinkelbach_topk(X @ np.asarray(omega, dtype=float), xi, k, tol).h


@dataclass
class BagModel:
    omega: np.ndarray
    k: int
    weights: WeightParams = field(default_factory=WeightParams)
    # exact latent objective after every CCCP iteration (index 0 = initializer)
    objectives: list = field(default_factory=list, repr=False)

    def score(self, bag, tol=1e-12):
        X = _features(bag)
        if self.k > len(X):
            raise CardinalityError(f"k={self.k} exceeds size {len(X)} of bag {getattr(bag, 'id', '?')}")
        xi = instance_weights(X, self.weights)
        return dinkelbach_topk(X @ self.omega, xi, self.k, tol).ratio

    def to_dict(self):
        return {
            "omega": [float(v) for v in self.omega],
            "k": self.k,
            "xi_alpha": self.weights.xi_alpha,
            "xi_beta": self.weights.xi_beta,
            "d_clamp": self.weights.d_clamp,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["omega"], dtype=float), int(d["k"]),
                   WeightParams(d["xi_alpha"], d["xi_beta"], d["d_clamp"]))


def bag_score(model, bag):
    return model.score(bag)


class _LatentProblem:
    """Cached per-bag data for the latent SVM objective."""

    def __init__(self, positive, negative, k, C, weights, tol):
        self.pos = [_features(b) for b in positive]
        self.neg = [_features(b) for b in negative]
        for i, X in enumerate(self.pos + self.neg):
            if k > len(X):
                name = _bag_name((list(positive) + list(negative))[i], i)
                raise CardinalityError(f"k={k} exceeds size {len(X)} of bag {name}")
        self.xi_pos = [instance_weights(X, weights) for X in self.pos]
        self.xi_neg = [instance_weights(X, weights) for X in self.neg]
        self.k, self.C, self.tol = k, C, tol

    def _latent(self, omega, X, xi):
        sol = dinkelbach_topk(X @ omega, xi, self.k, self.tol)
        return sol.ratio, weighted_feature(X, xi, sol.h)

    def objective(self, omega):
        """Latent SVM risk, i.e. the difference-of-convex objective exactly."""
        total = 0.5 * omega @ omega
        for X, xi in zip(self.neg, self.xi_neg):
            total += self.C * max(0.0, 1.0 + self._latent(omega, X, xi)[0])
        for X, xi in zip(self.pos, self.xi_pos):
            f = self._latent(omega, X, xi)[0]
            total += self.C * (max(f, 1.0) - f)
        return total

    def frozen_features(self, omega):
        return [self._latent(omega, X, xi)[1] for X, xi in zip(self.pos, self.xi_pos)]

    def bound_risk(self, omega, frozen):
        """Convex upper-bound risk (without the regularizer) and a subgradient."""
        risk = 0.0
        grad = np.zeros_like(omega)
        for X, xi in zip(self.neg, self.xi_neg):
            f, phi = self._latent(omega, X, xi)
            if 1.0 + f > 0:
                risk += self.C * (1.0 + f)
                grad += self.C * phi
        for X, xi, phi_star in zip(self.pos, self.xi_pos, frozen):
            f, phi = self._latent(omega, X, xi)
            if f > 1.0:
                risk += self.C * f
                grad += self.C * phi
            else:
                risk += self.C
            risk -= self.C * (omega @ phi_star)
            grad -= self.C * phi_star
        return risk, grad


def _bundle_minimize(risk_fn, w0, tol, max_iter=500):
    """Minimize ``|w|^2/2 + R(w)`` for convex R by a bundle method.

    The cutting-plane model of R is exact for the quadratic term; its dual is
    a QP over the simplex of planes. Returns the best evaluated point, which
    is never worse than ``w0``.
    """
    w = np.asarray(w0, dtype=float).copy()
    r, g = risk_fn(w)
    best_w, best_val = w.copy(), 0.5 * w @ w + r
    A = [g]
    b = [r - g @ w]
    support = None
    for _ in range(max_iter):
        Am = np.array(A)
        beta, _, support = simplex_qp(None, q=-np.array(b), tol=1e-14, support=support, factor=Am)
        w = -beta @ Am
        model = 0.5 * w @ w + max(Am @ w + np.array(b))
        if best_val - model <= tol * max(1.0, abs(best_val)):
            return best_w, best_val
        r, g = risk_fn(w)
        val = 0.5 * w @ w + r
        if val < best_val:
            best_w, best_val = w.copy(), val
        A.append(g)
        b.append(r - g @ w)
    log.warning("bundle method stopped at its iteration limit")
    return best_w, best_val


def train_bag_model(positive_bags, negative_bags, config=None, *, k=None, C=None,
                    weights=None, tol=None, max_iter=None):
    """Latent SVM over weighted compound features, trained by CCCP.

    ``omega`` starts from a linear SVM on plain bag means (every instance
    selected). Each outer step freezes the positive-bag selections at their
    current argmax and minimizes the convex upper bound; the exact latent
    objective is recorded after every step and is non-increasing.
    """
    from .core import CurationConfig

    config = config or CurationConfig()
    k = k if k is not None else config.k
    C = C if C is not None else config.C_bag
    weights = weights or WeightParams(config.xi_alpha, config.xi_beta, config.d_clamp)
    tol = tol if tol is not None else config.cccp_tol
    max_iter = max_iter if max_iter is not None else config.max_cccp_iter
    if not positive_bags or not negative_bags:
        raise DomainError("need at least one positive and one negative bag")
    prob = _LatentProblem(positive_bags, negative_bags, k, C, weights, config.dinkelbach_tol)

    svm = train_linear_svm([X.mean(0) for X in prob.pos], [X.mean(0) for X in prob.neg], C=C)
    omega = svm.w
    objectives = [prob.objective(omega)]
    for _ in range(max_iter):
        frozen = prob.frozen_features(omega)
        omega, _ = _bundle_minimize(lambda w: prob.bound_risk(w, frozen), omega, 0.1 * tol)
        objectives.append(prob.objective(omega))
        if objectives[-2] - objectives[-1] <= tol * max(1.0, abs(objectives[-1])):
            break
    else:
        log.warning("CCCP stopped at its iteration limit")
    zero_obj = prob.objective(np.zeros_like(omega))
    if zero_obj <= objectives[-1]:
        omega = np.zeros_like(omega)
        objectives.append(zero_obj)
    if objectives[-1] >= zero_obj - tol * max(1.0, abs(zero_obj)):
        warnings.warn("bag model is degenerate: no better than omega = 0, every bag scores about 0",
                      RuntimeWarning, stacklevel=2)
    return BagModel(omega, k, weights, objectives)


def filter_bags(model, bags):
    """Keep bags with a strictly positive score; returns (kept ids, {id: score})."""
    scores = {bag.id: model.score(bag) for bag in bags}
    kept = [bag.id for bag in bags if scores[bag.id] > 0]
    return kept, scores


def bag_accuracy(model, positive_bags, negative_bags):
    hits = sum(model.score(b) > 0 for b in positive_bags) + sum(model.score(b) <= 0 for b in negative_bags)
    return hits / (len(positive_bags) + len(negative_bags))


def cross_validate_weights(labeled_bag_sets, params, config=None, **train_kw):
    """Leave-one-set-out accuracy of the bag classifier for one weighting.

    Returns ``(mean accuracy, skipped fold indices)``.
    """
    accs, skipped = [], []
    for j, (pos_j, neg_j) in enumerate(labeled_bag_sets):
        train_pos = [b for i, (p, _) in enumerate(labeled_bag_sets) if i != j for b in p]
        train_neg = [b for i, (_, n) in enumerate(labeled_bag_sets) if i != j for b in n]
        if not (pos_j and neg_j and train_pos and train_neg):
            log.info("fold %d skipped: a class is missing", j)
            skipped.append(j)
            continue
        model = train_bag_model(train_pos, train_neg, config, weights=params, **train_kw)
        accs.append(bag_accuracy(model, pos_j, neg_j))
    return (float(np.mean(accs)) if accs else float("nan")), skipped


def calibrate_weight_params(labeled_bag_sets, grid, config=None, **train_kw):
    """Grid point with the best cross-validated bag accuracy (first wins ties)."""
    if not grid:
        raise CalibrationError("empty calibration grid")
    if not labeled_bag_sets:
        raise CalibrationError("no labeled bag sets")
    if len(grid) == 1:
        return grid[0]
    best, best_acc = None, -np.inf
    for params in grid:
        acc, skipped = cross_validate_weights(labeled_bag_sets, params, config, **train_kw)
        if len(skipped) == len(labeled_bag_sets):
            raise CalibrationError("every calibration fold was skipped")
        if acc > best_acc:
            best, best_acc = params, acc
    return best
