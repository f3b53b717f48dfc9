"""Small optimization kernels used throughout the pipeline.

* ``train_linear_svm``: squared-hinge linear SVM with a squared bias penalty,
  solved by dual coordinate descent and certified by the duality gap.
* ``simplex_qp``: convex quadratic minimization over the probability simplex
  by a primal active-set method; ``simplex_qp_max`` is the maximization view.
* ``dinkelbach_topk``: cardinality-constrained 0/1 linear-fractional program.
"""
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

from .errors import CardinalityError, ConvergenceError, DomainError, NumericError


@dataclass
class LinearSvmModel:
    w: np.ndarray
    b: float
    C: float
    # dual objective after every coordinate sweep (min form, non-increasing)
    history: list = field(default_factory=list, repr=False)
    gap: float = 0.0

    def decision_function(self, X):
        return np.asarray(X, dtype=float) @ self.w + self.b

    def predict(self, X):
        return np.where(self.decision_function(X) >= 0, 1, -1)


def svm_primal_objective(w, b, X, y, C):
    margins = np.maximum(0.0, 1.0 - y * (X @ w + b))
    return 0.5 * (w @ w + b * b) + C * (margins @ margins)


def train_linear_svm(pos, neg, C=1.0, tol=1e-6, max_iter=20000):
    """Fit ``f(x) = w'x + b`` separating ``pos`` (+1) from ``neg`` (-1).

    Minimizes ``(|w|^2 + b^2)/2 + C * sum(max(0, 1 - y f(x))^2)``. The bias is
    folded into the weight vector through a constant feature, so the
    problem is the plain L2-regularized L2-loss SVM and its dual is solved by
    cyclic coordinate descent. Stops once the duality gap is below
    ``tol * max(1, primal)``.
    """
    pos = np.atleast_2d(np.asarray(pos, dtype=float))
    neg = np.atleast_2d(np.asarray(neg, dtype=float))
    if pos.size == 0 or neg.size == 0:
        raise DomainError("both classes need at least one example")
    X = np.vstack([pos, neg])
    if not np.all(np.isfinite(X)):
        raise NumericError("non-finite training data")
    y = np.concatenate([np.ones(len(pos)), -np.ones(len(neg))])
    Xa = np.hstack([X, np.ones((len(X), 1))])
    n = len(Xa)
    diag = 0.5 / C
    Qii = (Xa * Xa).sum(1) + diag
    alpha = np.zeros(n)
    wa = np.zeros(Xa.shape[1])
    history = []
    gap = np.inf
    # fixed-seed sweep order keeps the fit deterministic
    rng = np.random.default_rng(0)
    for sweep in range(max_iter):
        for i in rng.permutation(n):
            G = y[i] * (wa @ Xa[i]) - 1.0 + diag * alpha[i]
            new = max(alpha[i] - G / Qii[i], 0.0)
            if new != alpha[i]:
                wa += (new - alpha[i]) * y[i] * Xa[i]
                alpha[i] = new
        if sweep % 10 == 9:
            alpha, wa = _polish_dual(Xa, y, diag, alpha, wa)
        dual = 0.5 * (wa @ wa) + 0.5 * diag * (alpha @ alpha) - alpha.sum()
        history.append(dual)
        primal = svm_primal_objective(wa[:-1], wa[-1], X, y, C)
        gap = primal + dual
        if gap <= tol * max(1.0, primal):
            break
    else:
        raise ConvergenceError(f"linear SVM did not reach duality gap {tol} (gap {gap:.3g})")
    w, b = wa[:-1].copy(), float(wa[-1])
    # the objective is 1-strongly convex, so |w - w*| <= sqrt(2 gap)
    if np.linalg.norm(w) <= np.sqrt(2.0 * max(gap, 0.0)) + 1e-10 * max(1.0, np.abs(X).max()):
        warnings.warn("linear SVM found no separating direction (zero margin)", RuntimeWarning, stacklevel=2)
    return LinearSvmModel(w, b, C, history, gap)


def _polish_dual(Xa, y, diag, alpha, wa):
    """Exact dual solution on the current free set, kept only if feasible and
    no worse. The dual is ``a'Qa/2 - 1'a`` with ``Q = (yy')*(XX') + diag*I``."""
    S = np.flatnonzero(alpha > 0)
    if len(S) == 0:
        return alpha, wa
    Z = Xa[S] * y[S, None]
    Q = Z @ Z.T + diag * np.eye(len(S))
    try:
        a_S = np.linalg.solve(Q, np.ones(len(S)))
    except np.linalg.LinAlgError:
        return alpha, wa
    if not np.all(a_S > 0):
        return alpha, wa
    cand = np.zeros_like(alpha)
    cand[S] = a_S
    w_new = Z.T @ a_S

    def dual(a, w):
        return 0.5 * (w @ w) + 0.5 * diag * (a @ a) - a.sum()

    if dual(cand, w_new) <= dual(alpha, wa):
        return cand, w_new
    return alpha, wa


@dataclass
class SimplexQpSolution:
    alpha: np.ndarray
    value: float
    gap: float
    support: list


def _well_conditioned(A):
    try:
        L = np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        return False
    d = np.diag(L)
    return d.min() > 1e-4 * d.max()


def _face_step(M, q, S):
    """Minimizer of the QP over the affine hull of the face ``S``.

    Returns ``(z, None)`` for a bounded face. When ``M_SS`` is (nearly)
    singular along the hull and ``q`` decreases in that direction, the face
    is unbounded and the result is ``(None, d)`` with d a descent ray
    (``sum(d) = 0``).
    """
    m = len(S)
    Mss = M[np.ix_(S, S)]
    qs = q[S]
    if m == 1:
        return np.ones(1), None
    if _well_conditioned(Mss):
        A = np.zeros((m + 1, m + 1))
        A[:m, :m] = Mss
        A[:m, m] = -1.0
        A[m, :m] = 1.0
        rhs = np.zeros(m + 1)
        rhs[:m] = -qs
        rhs[m] = 1.0
        return np.linalg.solve(A, rhs)[:m], None
    # a = a0 + Z w with Z an orthonormal basis of {sum = 0}
    Z = _null_basis(m)
    a0 = np.full(m, 1.0 / m)
    H = Z.T @ Mss @ Z
    g = Z.T @ (Mss @ a0 + qs)
    lam, V = np.linalg.eigh(0.5 * (H + H.T))
    gv = V.T @ g
    flat = lam <= 1e-11 * max(lam[-1], 1e-300)
    scale = max(np.abs(Mss).max(), np.abs(qs).max(), 1.0)
    if np.any(np.abs(gv[flat]) > 1e-12 * scale):
        return None, -Z @ (V[:, flat] @ gv[flat])
    w = np.where(flat, 0.0, -gv / np.where(flat, 1.0, lam))
    return a0 + Z @ (V @ w), None


def _null_basis(m):
    """Orthonormal basis of ``{z : sum(z) = 0}`` in R^m, as columns."""
    return np.linalg.svd(np.ones((1, m)))[2][1:].T


def _face_step_factored(F, q, S):
    """:func:`_face_step` for ``M = FF'`` without forming M."""
    m = len(S)
    if m == 1:
        return np.ones(1), None
    Z = _null_basis(m)
    a0 = np.full(m, 1.0 / m)
    Fs = F[S].T
    B = Fs @ Z
    c = Fs @ a0
    r = Z.T @ q[S]
    U, sig, Vt = np.linalg.svd(B, full_matrices=True)
    sig = np.concatenate([sig, np.zeros(m - 1 - len(sig))])
    flat = sig <= 1e-12 * max(sig.max(), 1e-300)
    rv = Vt @ r
    scale = max(np.abs(q[S]).max(), 1.0)
    if np.any(np.abs(rv[flat]) > 1e-12 * scale):
        return None, -Z @ (Vt[flat].T @ rv[flat])
    uc = np.zeros(m - 1)
    k = min(len(c), m - 1)
    uc[:k] = (U.T @ c)[:k]
    safe = np.where(flat, 1.0, sig)
    y = np.where(flat, 0.0, -(sig * uc + rv) / safe ** 2)
    return a0 + Z @ (Vt.T @ y), None


class _Quadratic:
    """``a'Ma/2 + q'a`` from either M or a factor F with M = FF'."""

    def __init__(self, M, q, factor):
        self.q = q
        if factor is not None:
            self.F = np.asarray(factor, dtype=float)
            self.M = None
            self.n = self.F.shape[0]
            self.diag = np.einsum("ij,ij->i", self.F, self.F)
        else:
            self.F = None
            self.M = M
            self.n = M.shape[0]
            self.diag = np.diag(M).copy()

    def matvec(self, a):
        return self.F @ (self.F.T @ a) if self.F is not None else self.M @ a

    def value(self, a):
        if self.F is not None:
            Fa = self.F.T @ a
            return 0.5 * Fa @ Fa + self.q @ a
        return 0.5 * a @ self.M @ a + self.q @ a

    def entry(self, i, j):
        return self.F[i] @ self.F[j] if self.F is not None else self.M[i, j]

    def face(self, S):
        if self.F is not None:
            return _face_step_factored(self.F, self.q, S)
        return _face_step(self.M, self.q, S)


def simplex_qp(M, q=None, tol=1e-12, support=None, max_iter=None, factor=None):
    """Minimize ``a'Ma/2 + q'a`` over the probability simplex.

    Primal active-set method: the iterate is the exact minimizer over the
    affine hull of a support set, grown by the coordinate with the most
    negative gradient and shrunk by ratio tests. Faces on which a singular
    M leaves the objective unbounded are crossed along a descent ray.
    Terminates when the Frank-Wolfe gap ``g'a - min_i g_i`` (g the
    gradient) is at most ``tol``, or when rounding stops all progress.

    ``factor`` may replace M by F with ``M = FF'`` (M is then ignored); the
    face solves then work on F and keep its condition number unsquared.

    Returns ``(alpha, gap, support)``.
    """
    qf = _Quadratic(M, None, factor)
    n = qf.n
    q = np.zeros(n) if q is None else np.asarray(q, dtype=float)
    qf.q = q
    max_iter = max_iter or 20 * n + 100
    lin = 0.5 * qf.diag + q
    S = sorted(set(support)) if support else [int(np.argmin(lin))]
    z, _ = qf.face(S)
    if z is None or not np.all(z > 0):
        S = [int(np.argmin(lin))]
        z = np.ones(1)
    alpha = np.zeros(n)
    alpha[S] = z
    f = qf.value(alpha)
    for _ in range(max_iter):
        g = qf.matvec(alpha) + q
        j = int(np.argmin(g))
        gap = float(alpha @ g - g[j])
        if gap <= tol:
            return alpha, max(gap, 0.0), S
        prev, prev_S = alpha, S
        if j not in S:
            alpha, S = _grow_support(qf, alpha, sorted(S + [j]))
        f_new = qf.value(alpha)
        if j not in S or not f_new < f:
            # in exact arithmetic the entering coordinate stays and the
            # objective drops; the face solve has lost accuracy, so fall back
            # to a pairwise step
            alpha = _pairwise_step(qf, prev, j)
            f_new = qf.value(alpha)
            if not f_new < f:
                # rounding floor reached
                return prev, gap, prev_S
            S = [int(i) for i in np.flatnonzero(alpha > 0)]
        f = f_new
    raise ConvergenceError("simplex QP active-set method hit its iteration limit")


def _grow_support(qf, alpha, S):
    """Move from ``alpha`` towards the face minimizer of ``S``, dropping
    coordinates by ratio tests until the minimizer is interior."""
    n = len(alpha)
    for _ in range(n + 1):
        z, ray = qf.face(S)
        cur = alpha[S]
        if ray is None:
            if np.all(z > 0):
                alpha = np.zeros(n)
                alpha[S] = z
                return alpha, S
            bad = z <= 0
            t = np.min(cur[bad] / (cur[bad] - z[bad]))
            step = cur + t * (z - cur)
        else:
            bad = ray < 0
            step = cur + np.min(cur[bad] / -ray[bad]) * ray
        step = np.maximum(step, 0.0)
        keep = step > 1e-15
        if keep.all():
            keep[np.argmin(step)] = False
        S = [s for s, k in zip(S, keep) if k]
        if not S:
            raise ConvergenceError("simplex QP lost its support set")
        alpha = np.zeros(n)
        alpha[S] = step[keep] / step[keep].sum()
    raise ConvergenceError("simplex QP could not settle a support set")


def _pairwise_step(qf, alpha, j):
    """Move weight from the worst support coordinate to ``j`` with an exact
    line search."""
    g = qf.matvec(alpha) + qf.q
    S = np.flatnonzero(alpha > 0)
    a = int(S[np.argmax(g[S])])
    slope = g[j] - g[a]
    if not slope < 0:
        return alpha
    curv = qf.diag[j] + qf.diag[a] - 2.0 * qf.entry(j, a)
    t = alpha[a] if curv <= 0 else min(alpha[a], -slope / curv)
    alpha = alpha.copy()
    alpha[j] += t
    alpha[a] = 0.0 if t == alpha[a] else alpha[a] - t
    return alpha


def _check_symmetric(M):
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise DomainError("matrix must be square")
    if not np.allclose(M, M.T, rtol=1e-10, atol=1e-12):
        raise DomainError("matrix must be symmetric")
    return M


def simplex_qp_max(M, tol=1e-12, support=None):
    """Maximize ``-a'Ma/2`` over the probability simplex (M symmetric PSD)."""
    M = _check_symmetric(M)
    alpha, gap, S = simplex_qp(M, tol=tol, support=support)
    return SimplexQpSolution(alpha, float(-0.5 * alpha @ M @ alpha), gap, S)


def topk_indicator(values, k):
    """0/1 vector selecting the k largest entries; ties go to the lower index."""
    values = np.asarray(values, dtype=float)
    if not 1 <= k <= len(values):
        raise CardinalityError(f"cannot select {k} of {len(values)} items")
    h = np.zeros(len(values), dtype=int)
    h[np.argsort(-values, kind="stable")[:k]] = 1
    return h


@dataclass
class FractionalSolution:
    h: np.ndarray
    ratio: float
    lambdas: list


def dinkelbach_topk(c, xi, k, tol=1e-12, max_iter=1000):
    """Maximize ``c'h / xi'h`` over 0/1 vectors h with exactly k ones.

    Dinkelbach's parametric iteration; each inner problem
    ``max_h (c - lam*xi)'h`` is solved exactly by a top-k selection.
    """
    c = np.asarray(c, dtype=float)
    xi = np.asarray(xi, dtype=float)
    if c.shape != xi.shape:
        raise DomainError("c and xi must have the same length")
    if not 1 <= k <= len(c):
        raise CardinalityError(f"cannot select {k} of {len(c)} items")
    if np.any(xi <= 0):
        raise DomainError("xi must be strictly positive")
    h = topk_indicator(c, k)
    lam = (c @ h) / (xi @ h)
    lambdas = [lam]
    for _ in range(max_iter):
        h_new = topk_indicator(c - lam * xi, k)
        lam_new = (c @ h_new) / (xi @ h_new)
        if lam_new - lam <= tol * max(1.0, abs(lam)):
            if lam_new > lam:
                h, lam = h_new, lam_new
                lambdas.append(lam)
            return FractionalSolution(h, float(lam), lambdas)
        h, lam = h_new, lam_new
        lambdas.append(lam)
    raise ConvergenceError("Dinkelbach iteration did not terminate")


def fractional_lp(c, xi, k):
    """Charnes-Cooper LP for the box relaxation of the fractional program.

    With ``y = h t`` and ``t = 1/xi'h`` the relaxation becomes
    ``max c'y  s.t.  xi'y = 1, 1'y = k t, 0 <= y <= t``.
    Used as an independent cross-check of :func:`dinkelbach_topk`.
    """
    c = np.asarray(c, dtype=float)
    xi = np.asarray(xi, dtype=float)
    n = len(c)
    obj = np.concatenate([-c, [0.0]])
    A_eq = np.zeros((2, n + 1))
    A_eq[0, :n] = xi
    A_eq[1, :n] = 1.0
    A_eq[1, n] = -k
    A_ub = np.hstack([np.eye(n), -np.ones((n, 1))])
    res = linprog(obj, A_ub=A_ub, b_ub=np.zeros(n), A_eq=A_eq, b_eq=[1.0, 0.0],
                  bounds=[(0, None)] * (n + 1), method="highs")
    if res.status != 0:
        raise ConvergenceError(f"LP failed: {res.message}")
    y, t = res.x[:n], res.x[n]
    return y / t, -res.fun
