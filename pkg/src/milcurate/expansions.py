"""Query-expansion pruning: visual salience, then semantic/visual relevance.

An expansion is *salient* when a linear SVM trained on its top images
against a pool of random negatives classifies held-out images well. A
salient expansion is *relevant* when a linear model over the pair
(semantic distance, visual distance) to the target query says so. The
semantic distance is the normalized Google distance computed from an
offline page-count table.
"""
import dataclasses
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (CardinalityError, ConfigError, DegenerateDataError, ParseError,
                     UndefinedDistanceError, ValidationError)
from .solvers import train_linear_svm

PENDING, SALIENT, NON_SALIENT = "pending", "salient", "non_salient"
RELEVANT, IRRELEVANT, UNDEFINED = "relevant", "irrelevant", "undefined"
STATUSES = (PENDING, SALIENT, NON_SALIENT, RELEVANT, IRRELEVANT, UNDEFINED)

# stage-local seed offset for negative sampling and split shuffles
SALIENCE_SEED_OFFSET = 101


def pair_key(x, y):
    return "|".join(sorted((x, y)))


@dataclass(frozen=True)
class PageCounts:
    total: float
    single: dict
    pair: dict

    def __post_init__(self):
        problems = []
        if not self.total > 0:
            problems.append("total must be positive")
        for term, c in self.single.items():
            if c < 0:
                problems.append(f"negative count for {term!r}")
            if c > self.total:
                problems.append(f"count for {term!r} exceeds total")
        for key, c in self.pair.items():
            terms = key.split("|")
            if len(terms) != 2 or key != pair_key(*terms):
                problems.append(f"pair key {key!r} is not 'a|b' in sorted order")
                continue
            missing = [t for t in terms if t not in self.single]
            if missing:
                problems.append(f"pair {key!r} names unknown term {missing[0]!r}")
            elif c > min(self.single[t] for t in terms):
                problems.append(f"pair count for {key!r} exceeds a single count")
            if c < 0:
                problems.append(f"negative count for pair {key!r}")
        if problems:
            raise ValidationError("invalid page counts: " + "; ".join(problems), problems)

    def to_dict(self):
        return {"total": self.total, "single": dict(sorted(self.single.items())),
                "pair": dict(sorted(self.pair.items()))}

    @classmethod
    def from_dict(cls, d):
        return cls(d["total"], dict(d["single"]), dict(d["pair"]))

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def ngd(x, y, counts):
    """Normalized Google distance between two terms.

    ``(max(log fx, log fy) - log fxy) / (log N - min(log fx, log fy))``
    """
    fx = counts.single.get(x, 0)
    fy = counts.single.get(y, 0)
    fxy = counts.pair.get(pair_key(x, y), 0)
    for term, c in ((x, fx), (y, fy), (pair_key(x, y), fxy)):
        if c <= 0:
            raise UndefinedDistanceError(f"undefined distance: zero page count for {term!r}", term)
    lx, ly = math.log(fx), math.log(fy)
    denom = math.log(counts.total) - min(lx, ly)
    if denom <= 0:
        raise DegenerateDataError(f"degenerate denominator: total {counts.total} <= min single count")
    return (max(lx, ly) - math.log(fxy)) / denom


def compound_visual_feature(vectors, k):
    """Mean of the first k (rank-ordered) feature vectors."""
    vectors = np.asarray(vectors, dtype=float)
    if k < 1 or k > len(vectors):
        raise CardinalityError(f"insufficient images: need {k}, have {len(vectors)}")
    return vectors[:k].mean(0)


@dataclass(frozen=True, eq=False)
class ExpansionCandidate:
    text: str
    images: np.ndarray
    salience: float | None = None
    semantic_distance: float | None = None
    visual_distance: float | None = None
    status: str = PENDING

    def __post_init__(self):
        imgs = np.atleast_2d(np.asarray(self.images, dtype=float))
        object.__setattr__(self, "images", imgs)
        if self.status not in STATUSES:
            raise ValueError(f"unknown status {self.status!r}")

    def with_(self, **changes):
        return dataclasses.replace(self, **changes)


def visual_distance(candidate, target, k):
    a = compound_visual_feature(candidate.images, k)
    b = compound_visual_feature(target.images, k)
    return float(np.linalg.norm(a - b))


@dataclass(frozen=True)
class SalienceSplit:
    train_pos: int = 75
    val_pos: int = 25
    train_neg: int = 25
    val_neg: int = 25

    def __post_init__(self):
        if min(self.train_pos, self.val_pos, self.train_neg, self.val_neg) < 1:
            raise ConfigError(f"every salience split partition must be non-empty: {self}")

    @classmethod
    def proportional(cls, n_pos, n_neg, val_frac=0.25):
        """75/25-style split scaled to the available images."""
        vp = max(1, round(val_frac * n_pos))
        tn = max(1, n_neg // 2)
        return cls(n_pos - vp, vp, tn, n_neg - tn)


def salience_score(candidate, negatives, split=SalienceSplit(), C=1.0, rng=None):
    """Held-out accuracy of a linear SVM separating the candidate's images
    from random negatives."""
    rng = rng if rng is not None else np.random.default_rng(0)
    pos = candidate.images
    negatives = np.atleast_2d(np.asarray(negatives, dtype=float))
    if split.train_pos + split.val_pos > len(pos):
        raise ConfigError(f"split needs {split.train_pos + split.val_pos} images, "
                          f"{candidate.text!r} has {len(pos)}")
    if split.train_neg + split.val_neg > len(negatives):
        raise ConfigError(f"split needs {split.train_neg + split.val_neg} negatives, pool has {len(negatives)}")
    p = rng.permutation(len(pos))
    n = rng.choice(len(negatives), split.train_neg + split.val_neg, replace=False)
    tp, vp = p[:split.train_pos], p[split.train_pos:split.train_pos + split.val_pos]
    tn, vn = n[:split.train_neg], n[split.train_neg:]
    model = train_linear_svm(pos[tp], negatives[tn], C=C)
    correct = np.sum(model.predict(pos[vp]) == 1) + np.sum(model.predict(negatives[vn]) == -1)
    return float(correct / (len(vp) + len(vn)))


@dataclass
class RelevanceModel:
    w: np.ndarray
    b: float

    def decision(self, v):
        return float(np.asarray(v, dtype=float) @ self.w + self.b)

    def is_relevant(self, v):
        # exact ties count as relevant
        return self.decision(v) >= 0

    def to_dict(self):
        return {"w": [float(x) for x in self.w], "b": float(self.b)}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["w"], dtype=float), float(d["b"]))


def train_relevance_model(positive, negative, C=1.0):
    """Linear SVM over 2-d (semantic distance, visual distance) points."""
    P = np.atleast_2d(np.asarray(positive, dtype=float))
    N = np.atleast_2d(np.asarray(negative, dtype=float))
    if P.size == 0 or N.size == 0:
        raise DegenerateDataError("relevance model needs positive and negative points")
    allpts = np.vstack([P, N])
    if np.all(allpts == allpts[0]):
        raise DegenerateDataError("all relevance training points are identical")
    svm = train_linear_svm(P, N, C=C)
    return RelevanceModel(svm.w, svm.b)


@dataclass
class ExpansionReport:
    candidates: list
    diagnostics: list = field(default_factory=list)

    @property
    def selected(self):
        return [c for c in self.candidates if c.status == RELEVANT]


def assess_expansions(candidates, target, counts, model, config, negatives, split=None, visual_k=10):
    """Assign a final status to every candidate, in input order.

    Salience is tested first; only salient candidates get distances and a
    relevance decision. Missing page counts mark a candidate ``undefined``.
    """
    out, diags = [], []
    for i, cand in enumerate(candidates):
        rng = np.random.default_rng([config.seed, SALIENCE_SEED_OFFSET, i])
        sp = split or SalienceSplit.proportional(len(cand.images), len(negatives))
        s = salience_score(cand, negatives, sp, C=1.0, rng=rng)
        if s < config.salience_threshold:
            out.append(cand.with_(salience=s, status=NON_SALIENT))
            continue
        try:
            d = ngd(cand.text, target.text, counts)
        except UndefinedDistanceError as exc:
            diags.append(f"{cand.text}: {exc}")
            out.append(cand.with_(salience=s, status=UNDEFINED))
            continue
        k = min(visual_k, len(cand.images), len(target.images))
        e = visual_distance(cand, target, k)
        status = RELEVANT if model.is_relevant([d, e]) else IRRELEVANT
        out.append(cand.with_(salience=s, semantic_distance=d, visual_distance=e, status=status))
    return ExpansionReport(out, diags)


def filter_expansions(candidates, target, counts, model, config, negatives, split=None, visual_k=10):
    """Relevant candidates only, in input order."""
    return assess_expansions(candidates, target, counts, model, config, negatives, split, visual_k).selected


def read_expansions(path):
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                out.append(ExpansionCandidate(str(d["text"]), d["images"]))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ParseError(f"bad expansion record: {exc}", lineno) from None
    return out
