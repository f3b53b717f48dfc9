"""Kernel evaluation and Gram matrices, including the bias-augmented kernel.

The augmented kernel appends a constant coordinate to every feature map,
which adds one to every kernel value: ``K_aug = K + 1 1'``.
"""
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, NumericError, StateError

KINDS = ("linear", "rbf")


@dataclass(frozen=True)
class KernelSpec:
    """Kernel choice.

    ``gamma=None`` on an rbf kernel means "use 1/D", resolved once the
    feature dimension is known (see :meth:`resolve`).
    """

    kind: str = "rbf"
    gamma: float | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DomainError(f"unknown kernel kind {self.kind!r}")
        if self.kind == "rbf" and self.gamma is not None:
            if not (np.isfinite(self.gamma) and self.gamma > 0):
                raise DomainError(f"rbf gamma must be finite and > 0, got {self.gamma}")

    def resolve(self, dim):
        if self.kind == "rbf" and self.gamma is None:
            return KernelSpec("rbf", 1.0 / dim)
        return self

    def to_dict(self):
        return {"kind": self.kind, "gamma": self.gamma}

    @classmethod
    def from_dict(cls, d):
        return cls(d["kind"], d.get("gamma"))


@dataclass(frozen=True, eq=False)
class GramMatrix:
    entries: np.ndarray
    augmented: bool = False

    @property
    def n(self):
        return self.entries.shape[0]


def kernel_matrix(A, B, spec):
    """Cross-kernel values ``k(a_i, b_j)`` between the rows of A and B."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    if A.shape[1] != B.shape[1]:
        raise DomainError(f"dimension mismatch: {A.shape[1]} vs {B.shape[1]}")
    spec = spec.resolve(A.shape[1])
    if spec.kind == "linear":
        return A @ B.T
    sq = (A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2.0 * (A @ B.T)
    np.maximum(sq, 0.0, out=sq)
    return np.exp(-spec.gamma * sq)


def gram_matrix(X, spec):
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise DomainError("instances must form a 2-d array (uniform dimension)")
    K = kernel_matrix(X, X, spec)
    # exact symmetry; the rbf expansion above is only symmetric to rounding
    K = 0.5 * (K + K.T)
    if spec.resolve(X.shape[1]).kind == "rbf":
        np.fill_diagonal(K, 1.0)
    bad = np.argwhere(~np.isfinite(K))
    if len(bad):
        i, j = bad[0]
        raise NumericError(f"non-finite kernel entry at ({i}, {j})")
    return GramMatrix(K, augmented=False)


def augment(gram):
    if gram.augmented:
        raise StateError("Gram matrix is already augmented")
    return GramMatrix(gram.entries + 1.0, augmented=True)
