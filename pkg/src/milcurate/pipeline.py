"""End-to-end curation: instance model, bag model, filtering and selection.

``run_curation`` trains the constrained-bag instance classifier, trains the
latent bag classifier, drops positive bags that score <= 0, keeps
instances with a positive instance score inside the surviving bags and
finally picks a quota of instances evenly across bags. The result is a
:class:`CurationManifest` whose JSON encoding is byte-stable.

Exact instance training enumerates labelings of positive-bag instances.
When a problem has more positive-bag instances than the enumeration guard
allows, one model is trained per positive bag (that bag against every
negative bag) and each bag's instances are scored by their own model.
"""
import dataclasses
import json
import logging
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from .core import NEG, POS, Bag, CurationConfig, Instance, MilProblem, read_bags, require_valid
from .errors import CurationError, QuotaError, SchemaError, ValidationError
from .mil_bag import BagModel, filter_bags, train_bag_model
from .mil_instance import InstanceModel, train_instance_model

log = logging.getLogger(__name__)

MANIFEST_SCHEMA = "milcurate.manifest/1"
MODELS_SCHEMA = "milcurate.models/1"


def _dumps(obj):
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


@contextmanager
def _stage(name):
    try:
        yield
    except CurationError as exc:
        if getattr(exc, "stage", None) is None:
            exc.stage = name
            exc.args = (f"[{name}] {exc}",) + exc.args[1:]
        raise


# -- ingestion ---------------------------------------------------------------

def load_bags(path, config=None):
    """Parse a bag file into a validated :class:`MilProblem`."""
    config = config or CurationConfig()
    problem = MilProblem(read_bags(path), config.delta, config.C_instance, config.kernel_spec)
    return require_valid(problem)


def problem_from_bags(bags, config):
    return MilProblem(bags, config.delta, config.C_instance, config.kernel_spec)


# -- synthetic benchmark -----------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    """Gaussian clusters standing in for visual distributions.

    Cluster centers sit on scaled coordinate axes, so every pair of centers
    is exactly ``separation`` apart; each cluster is isotropic with
    per-coordinate standard deviation ``scale``. Clean positive bags draw
    from one class cluster; planted instance noise, noise bags and negative
    bags all draw from a mixture of background clusters.
    """

    dim: int = 16
    class_clusters: int = 3
    background_clusters: int = 3
    positive_bags: int = 8
    noise_bags: int = 2
    negative_bags: int = 8
    bag_size: int = 10
    noise: float = 0.3
    scale: float = 1.0
    separation: float = 6.0
    seed: int = 0

    def __post_init__(self):
        problems = []
        if not 0 <= self.noise < 1:
            problems.append("noise fraction must lie in [0, 1)")
        if self.class_clusters + self.background_clusters > self.dim:
            problems.append("need dim >= total number of clusters")
        if not 0 <= self.noise_bags <= self.positive_bags:
            problems.append("noise_bags must lie in 0..positive_bags")
        if min(self.class_clusters, self.background_clusters, self.bag_size, self.negative_bags) < 1:
            problems.append("cluster, bag and negative-bag counts must be >= 1")
        if not (self.scale > 0 and self.separation > 0):
            problems.append("scale and separation must be positive")
        if problems:
            raise ValidationError("invalid synthetic spec: " + "; ".join(problems), problems)

    def to_dict(self):
        return dict(self.__dict__)


def generate_synthetic(spec):
    """Returns ``(bags, truth)``; truth maps bag and instance ids to
    "clean", "noise" or "negative"."""
    rng = np.random.default_rng(spec.seed)
    n_clusters = spec.class_clusters + spec.background_clusters
    centers = np.zeros((n_clusters, spec.dim))
    centers[np.arange(n_clusters), np.arange(n_clusters)] = spec.separation / np.sqrt(2.0)
    cls_c, bg_c = centers[:spec.class_clusters], centers[spec.class_clusters:]

    def draw(center):
        return center + spec.scale * rng.standard_normal(spec.dim)

    n_noise = int(np.floor(spec.noise * spec.bag_size + 1e-9))
    noise_bag_idx = set(rng.choice(spec.positive_bags, spec.noise_bags, replace=False).tolist())
    bags, truth_bags, truth_inst = [], {}, {}
    for b in range(spec.positive_bags):
        bid = f"p{b:02d}"
        if b in noise_bag_idx:
            X = np.array([draw(bg_c[rng.integers(spec.background_clusters)]) for _ in range(spec.bag_size)])
            kinds = ["noise"] * spec.bag_size
            truth_bags[bid] = "noise"
        else:
            c = cls_c[b % spec.class_clusters]
            slots = set(rng.permutation(spec.bag_size)[:n_noise].tolist())
            X, kinds = [], []
            for i in range(spec.bag_size):
                if i in slots:
                    X.append(draw(bg_c[rng.integers(spec.background_clusters)]))
                    kinds.append("noise")
                else:
                    X.append(draw(c))
                    kinds.append("clean")
            X = np.array(X)
            truth_bags[bid] = "clean"
        bag = Bag.from_array(bid, POS, X, expansion=f"expansion {b}")
        bags.append(bag)
        truth_inst.update(zip(bag.instance_ids, kinds))
    for b in range(spec.negative_bags):
        bid = f"n{b:02d}"
        X = np.array([draw(bg_c[rng.integers(spec.background_clusters)]) for _ in range(spec.bag_size)])
        bag = Bag.from_array(bid, NEG, X)
        bags.append(bag)
        truth_bags[bid] = "negative"
        truth_inst.update((i, "negative") for i in bag.instance_ids)
    return bags, {"bags": truth_bags, "instances": truth_inst}


def generate_reference(spec, bags_per_class=32, seed_offset=1_000_003):
    """Clean labeled bags from the same distributions as ``spec``: positive
    bags keep their planted instance noise but no noise bags are planted.
    Used to train the bag model apart from the bags being curated."""
    ref = dataclasses.replace(spec, noise_bags=0, positive_bags=bags_per_class,
                              negative_bags=bags_per_class, seed=spec.seed + seed_offset)
    bags, _ = generate_synthetic(ref)
    return [_renamed(b, "r" + b.id) for b in bags]


def _renamed(bag, new_id):
    insts = [Instance(f"{new_id}/{i.rank}", new_id, i.features, i.rank) for i in bag.instances]
    return Bag(new_id, bag.label, insts, bag.expansion)


# -- instance stage ----------------------------------------------------------

@dataclass
class ShardedInstanceModel:
    """Instance models keyed by the positive bag they were trained for.

    A single unsharded model is stored under the key ``"*"``. Instances of
    bags without their own shard get the maximum score over all shards.
    """

    shards: dict

    def score(self, X, bag_id=None):
        if bag_id in self.shards:
            return self.shards[bag_id].score(X)
        if "*" in self.shards:
            return self.shards["*"].score(X)
        return np.max([m.score(X) for m in self.shards.values()], axis=0)

    def to_dict(self):
        return {key: m.to_dict() for key, m in sorted(self.shards.items())}

    @classmethod
    def from_dict(cls, d):
        return cls({key: InstanceModel.from_dict(m) for key, m in d.items()})


def _trace_summary(shard, trace):
    return {
        "shard": shard,
        "iterations": trace.iterations,
        "objectives": [float(v) for v in trace.objectives],
        "mkl_gaps": [float(v) for v in trace.mkl_gaps],
        "stop_reason": trace.stop_reason,
    }


def train_instances(problem, config):
    """Train the instance stage; returns ``(ShardedInstanceModel, traces)``."""
    kw = dict(tol=config.cutting_plane_tol, max_iter=config.max_cutting_plane_iter,
              mkl_tol=config.mkl_tol, max_instances=config.max_enum_instances)
    n_pos = sum(len(b) for b in problem.positive_bags)
    if n_pos <= config.max_enum_instances:
        model, trace = train_instance_model(problem, **kw)
        return ShardedInstanceModel({"*": model}), [_trace_summary("*", trace)]
    shards, traces = {}, []
    for bag in problem.positive_bags:
        sub = problem.subproblem([bag] + problem.negative_bags)
        model, trace = train_instance_model(sub, **kw)
        shards[bag.id] = model
        traces.append(_trace_summary(bag.id, trace))
    return ShardedInstanceModel(shards), traces


def retained_instance_index(scores, min_keep, top_m=None):
    """Rows kept inside a retained bag, in bag order.

    Instances with a positive score are kept, but never fewer than
    ``min_keep`` (the bag's minimum positive count), so the kept set is
    itself an admissible labeling. ``top_m`` overrides both rules.
    """
    order = np.argsort(-np.asarray(scores), kind="stable")
    n = top_m if top_m is not None else max(int(np.sum(scores > 0)), min_keep)
    return np.sort(order[:n])


# -- selection ---------------------------------------------------------------

def even_select(retained, quota, seed=None):
    """Round-robin pick across bags.

    ``retained`` is a list of ``(bag_id, bag_score, [(instance_id, score)])``.
    Bags are visited by descending bag score, each contributing its next
    best unselected instance, until ``quota`` ids are chosen. ``seed`` is
    accepted for interface symmetry; the rule is deterministic.
    """
    total = sum(len(insts) for _, _, insts in retained)
    if quota is None:
        quota = total
    if quota < 0 or quota > total:
        raise QuotaError(f"quota {quota} exceeds the {total} retained instances")
    order = sorted(range(len(retained)), key=lambda i: -retained[i][1])
    queues = [sorted(retained[i][2], key=lambda t: -t[1]) for i in order]
    picked, depth = [], 0
    while len(picked) < quota:
        for q in queues:
            if depth < len(q) and len(picked) < quota:
                picked.append(q[depth][0])
        depth += 1
    return picked


# -- manifest ----------------------------------------------------------------

@dataclass
class CurationManifest:
    config: dict
    bag_scores: dict
    retained_bags: list
    retained_instances: dict
    selected: list
    diagnostics: dict = field(default_factory=dict)

    def check(self):
        """Internal consistency: instances lie in retained bags and the
        selection lies within the retained instances."""
        problems = []
        kept = set(self.retained_bags)
        for bag_id, insts in self.retained_instances.items():
            if bag_id not in kept:
                problems.append(f"instances kept for dropped bag {bag_id}")
        pool = {i for insts in self.retained_instances.values() for i in insts}
        stray = [i for i in self.selected if i not in pool]
        if stray:
            problems.append(f"selected ids outside the retained set: {stray[:3]}")
        quota = self.config.get("quota")
        if quota is not None and len(self.selected) != quota:
            problems.append(f"selected {len(self.selected)} ids for quota {quota}")
        return problems

    def to_dict(self):
        return {
            "schema": MANIFEST_SCHEMA,
            "config": self.config,
            "bag_scores": self.bag_scores,
            "retained_bags": self.retained_bags,
            "retained_instances": self.retained_instances,
            "selected": self.selected,
            "diagnostics": self.diagnostics,
        }

    def to_json(self):
        return _dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d):
        if d.get("schema") != MANIFEST_SCHEMA:
            raise SchemaError(f"unknown manifest schema {d.get('schema')!r}")
        return cls(d["config"], d["bag_scores"], d["retained_bags"], d["retained_instances"],
                   d["selected"], d.get("diagnostics", {}))

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def run_curation(problem, config, reference=None, expansion_statuses=None, models=None):
    """Full curation of a validated problem; returns ``(manifest, models)``
    where models is ``(ShardedInstanceModel, BagModel)``.

    The bag model is trained on ``reference`` (labeled bags known to be
    clean) when given. Without a reference it is trained on the problem's
    own bags, where it can fit noise bags as positives.
    """
    with _stage("validate"):
        require_valid(problem)
    if models is None:
        with _stage("instance"):
            inst_model, inst_traces = train_instances(problem, config)
        with _stage("bag"):
            src = problem if reference is None else problem.subproblem(reference)
            bag_model = train_bag_model(src.positive_bags, src.negative_bags, config)
    else:
        inst_model, bag_model = models
        inst_traces = []
    with _stage("filter"):
        kept_ids, scores = filter_bags(bag_model, problem.positive_bags)
        kept = set(kept_ids)
        retained, retained_inst = [], {}
        for bag in problem.positive_bags:
            if bag.id not in kept:
                continue
            s = inst_model.score(bag.X, bag.id)
            idx = retained_instance_index(s, problem.min_positive(bag), config.instance_top_m)
            pairs = [(bag.instances[i].id, float(s[i])) for i in idx]
            retained_inst[bag.id] = [p[0] for p in pairs]
            retained.append((bag.id, scores[bag.id], pairs))
    with _stage("select"):
        selected = even_select(retained, config.quota, config.seed)
    diagnostics = {
        "instance": inst_traces,
        "bag": {"objectives": [float(v) for v in bag_model.objectives],
                "omega_norm": float(np.linalg.norm(bag_model.omega))},
        "instance_scores": {
            bag.id: [float(v) for v in inst_model.score(bag.X, bag.id)] for bag in problem.positive_bags
        },
    }
    if expansion_statuses is not None:
        diagnostics["expansions"] = expansion_statuses
    manifest = CurationManifest(
        config=config.to_dict(),
        bag_scores={k: float(v) for k, v in scores.items()},
        retained_bags=[b for b in kept_ids],
        retained_instances=retained_inst,
        selected=selected,
        diagnostics=diagnostics,
    )
    return manifest, (inst_model, bag_model)


# -- persistence -------------------------------------------------------------

def save_models(path, instance_model, bag_model):
    d = {"schema": MODELS_SCHEMA}
    if instance_model is not None:
        d["instance"] = instance_model.to_dict()
    if bag_model is not None:
        d["bag"] = bag_model.to_dict()
    with open(path, "w") as fh:
        fh.write(_dumps(d))


def load_models(path):
    """Returns ``(instance model or None, bag model or None)``."""
    with open(path) as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"corrupt model file: {exc.msg}") from None
    if not isinstance(d, dict) or d.get("schema") != MODELS_SCHEMA:
        raise SchemaError(f"unknown model schema {d.get('schema') if isinstance(d, dict) else None!r}")
    try:
        inst = ShardedInstanceModel.from_dict(d["instance"]) if "instance" in d else None
        bag = BagModel.from_dict(d["bag"]) if "bag" in d else None
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"corrupt model file: {exc!r}") from None
    return inst, bag


# -- reporting ---------------------------------------------------------------

def format_report(manifest):
    m = manifest
    lines = [f"bags scored: {len(m.bag_scores)}   retained: {len(m.retained_bags)}"]
    for bag_id, score in sorted(m.bag_scores.items(), key=lambda t: -t[1]):
        mark = "keep" if bag_id in m.retained_instances else "drop"
        n = len(m.retained_instances.get(bag_id, []))
        lines.append(f"  {bag_id:<16} {score:+10.4f}  {mark}  {n} instances")
    n_inst = sum(len(v) for v in m.retained_instances.values())
    lines.append(f"retained instances: {n_inst}   selected: {len(m.selected)}")
    for t in m.diagnostics.get("instance", []):
        lines.append(f"instance shard {t['shard']}: {t['iterations']} restricted solves, {t['stop_reason']}")
    objs = m.diagnostics.get("bag", {}).get("objectives", [])
    if objs:
        lines.append(f"bag model: {len(objs) - 1} CCCP steps, objective {objs[0]:.6g} -> {objs[-1]:.6g}")
    problems = m.check()
    lines.append("consistency: ok" if not problems else "consistency: " + "; ".join(problems))
    return "\n".join(lines) + "\n"


__all__ = [
    "CurationManifest", "ShardedInstanceModel", "SyntheticSpec", "even_select", "format_report",
    "generate_reference", "generate_synthetic", "load_bags", "load_models", "problem_from_bags", "run_curation",
    "retained_instance_index", "save_models", "train_instances",
]
