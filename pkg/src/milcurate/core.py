"""Domain model: instances, bags, MIL problems and the curation config.

Bags are read from line-delimited JSON, one bag per line::

    {"id": "b1", "label": "pos", "expansion": "jumping horse",
     "instances": [{"id": "b1/0", "rank": 0, "features": [0.1, 2.0]}]}

Instance labels are handled internally as -1/+1.
"""
import dataclasses
import json
import math
import typing
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import ConfigError, ParseError, ValidationError
from .kernels import KernelSpec

POS = "pos"
NEG = "neg"


@dataclass(frozen=True, eq=False)
class Instance:
    id: str
    bag_id: str
    features: np.ndarray
    rank: int = 0

    def __post_init__(self):
        feats = np.array(self.features, dtype=float)
        feats.setflags(write=False)
        object.__setattr__(self, "features", feats)


@dataclass(frozen=True, eq=False)
class Bag:
    id: str
    label: str
    instances: tuple = ()
    expansion: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "instances", tuple(self.instances))

    @property
    def positive(self):
        return self.label == POS

    def __len__(self):
        return len(self.instances)

    @cached_property
    def X(self):
        """Instance features stacked row-wise, shape (|B|, D)."""
        return np.vstack([inst.features for inst in self.instances])

    @property
    def instance_ids(self):
        return [inst.id for inst in self.instances]

    @classmethod
    def from_array(cls, bag_id, label, X, expansion=None):
        """Build a bag from a feature matrix; instance ids are ``<bag>/<row>``."""
        insts = [Instance(f"{bag_id}/{r}", bag_id, x, r) for r, x in enumerate(np.asarray(X, float))]
        return cls(bag_id, label, insts, expansion)


def min_positive_count(delta, bag_size):
    """Smallest number of positives a positive bag must keep: ceil(delta*|B|).

    A 1e-9 slack absorbs float error when delta*|B| is integral (0.7*10).
    """
    return max(0, math.ceil(delta * bag_size - 1e-9))


@dataclass(frozen=True, eq=False)
class MilProblem:
    bags: tuple
    delta: float = 0.7
    C: float = 10.0
    kernel: KernelSpec = field(default_factory=KernelSpec)

    def __post_init__(self):
        object.__setattr__(self, "bags", tuple(self.bags))

    @cached_property
    def instances(self):
        return [inst for bag in self.bags for inst in bag.instances]

    @cached_property
    def X(self):
        return np.vstack([inst.features for inst in self.instances])

    @property
    def dim(self):
        return self.bags[0].instances[0].features.shape[0]

    @cached_property
    def bag_index(self):
        """Index into ``bags`` for every instance, in instance order."""
        return np.concatenate([np.full(len(b), i) for i, b in enumerate(self.bags)])

    @cached_property
    def positive_mask(self):
        return np.concatenate([np.full(len(b), b.positive) for b in self.bags])

    @property
    def positive_bags(self):
        return [b for b in self.bags if b.positive]

    @property
    def negative_bags(self):
        return [b for b in self.bags if not b.positive]

    def min_positive(self, bag):
        return min_positive_count(self.delta, len(bag))

    def subproblem(self, bags):
        return dataclasses.replace(self, bags=tuple(bags))


@dataclass
class ValidationReport:
    problems: list = field(default_factory=list)

    def __bool__(self):
        # truthy when the problem is well-formed
        return not self.problems

    def __iter__(self):
        return iter(self.problems)

    def __len__(self):
        return len(self.problems)


def validate_problem(problem):
    """Collect every violated invariant of ``problem``; never raises."""
    report = []
    dim = None
    seen = set()
    n_pos = n_neg = 0
    for bag in problem.bags:
        if bag.label not in (POS, NEG):
            report.append(f"bad label {bag.label!r} on bag {bag.id}")
        elif bag.positive:
            n_pos += 1
        else:
            n_neg += 1
        if not bag.instances:
            report.append(f"empty bag {bag.id}")
        local = set()
        for inst in bag.instances:
            if inst.bag_id != bag.id:
                report.append(f"instance {inst.id} claims bag {inst.bag_id} but sits in {bag.id}")
            if inst.id in local:
                report.append(f"duplicate instance id {inst.id} in bag {bag.id}")
            elif inst.id in seen:
                report.append(f"instance id {inst.id} is not globally unique")
            local.add(inst.id)
            seen.add(inst.id)
            f = inst.features
            if f.ndim != 1:
                report.append(f"instance {inst.id} features are not a vector")
                continue
            if dim is None:
                dim = f.shape[0]
            elif f.shape[0] != dim:
                report.append(f"dimension mismatch: instance {inst.id} has {f.shape[0]}, expected {dim}")
            if not np.all(np.isfinite(f)):
                report.append(f"non-finite feature in instance {inst.id}")
            if inst.rank < 0:
                report.append(f"negative rank on instance {inst.id}")
    if not problem.bags:
        report.append("no bags")
    else:
        if n_pos == 0:
            report.append("no positive bag")
        if n_neg == 0:
            report.append("no negative bag")
    if not (0 < problem.delta <= 1):
        report.append(f"delta must lie in (0, 1], got {problem.delta}")
    if not problem.C > 0:
        report.append(f"C must be positive, got {problem.C}")
    return ValidationReport(report)


def require_valid(problem):
    report = validate_problem(problem)
    if not report:
        raise ValidationError("invalid problem: " + "; ".join(report.problems), report.problems)
    return problem


# -- bag files ---------------------------------------------------------------

def encode_bag(bag):
    d = {"id": bag.id, "label": bag.label}
    if bag.expansion is not None:
        d["expansion"] = bag.expansion
    d["instances"] = [
        {"id": inst.id, "rank": inst.rank, "features": [float(v) for v in inst.features]}
        for inst in bag.instances
    ]
    return json.dumps(d, separators=(", ", ": "))


def decode_bag(line, lineno=None):
    try:
        d = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ParseError(f"malformed JSON ({exc.msg})", lineno) from None
    if not isinstance(d, dict):
        raise ParseError("bag record must be a JSON object", lineno)
    try:
        bag_id = str(d["id"])
        label = d["label"]
        insts = [
            Instance(str(i["id"]), bag_id, i["features"], int(i.get("rank", r)))
            for r, i in enumerate(d["instances"])
        ]
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"bad bag record: {exc!r}", lineno) from None
    return Bag(bag_id, label, insts, d.get("expansion"))


def read_bags(path):
    bags = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                bags.append(decode_bag(line, lineno))
    if not bags:
        raise ValidationError(f"no bags in {path}", ["no bags"])
    return bags


def write_bags(path, bags):
    with open(path, "w") as fh:
        for bag in bags:
            fh.write(encode_bag(bag) + "\n")


# -- configuration -----------------------------------------------------------

@dataclass(frozen=True)
class CurationConfig:
    delta: float = 0.7
    C_instance: float = 10.0
    C_bag: float = 0.1
    kernel: str = "rbf"
    gamma: float | None = None
    k: int = 3
    xi_alpha: float = 1.0
    xi_beta: float = 0.0
    d_clamp: float = 1e-6
    salience_threshold: float = 0.7
    top_n: int = 100
    coverage_budget: int | None = None
    quota: int | None = None
    instance_top_m: int | None = None
    seed: int = 0
    mkl_tol: float = 1e-6
    cccp_tol: float = 1e-6
    dinkelbach_tol: float = 1e-12
    cutting_plane_tol: float = 1e-6
    max_cutting_plane_iter: int = 50
    max_cccp_iter: int = 50
    max_enum_instances: int = 20

    def __post_init__(self):
        for name in ("mkl_tol", "cccp_tol", "dinkelbach_tol", "cutting_plane_tol"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0")
        if not (0 < self.delta <= 1):
            raise ConfigError(f"delta must lie in (0, 1], got {self.delta}")
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if not (self.C_instance > 0 and self.C_bag > 0):
            raise ConfigError("regularization constants must be positive")
        if not self.xi_alpha > 0:
            raise ConfigError("xi_alpha must be positive")
        if not self.d_clamp > 0:
            raise ConfigError("d_clamp must be positive")
        KernelSpec(self.kernel, self.gamma)

    @property
    def kernel_spec(self):
        return KernelSpec(self.kernel, self.gamma)

    def to_dict(self):
        return dataclasses.asdict(self)

    def dumps(self):
        """Flat ``key = value`` text, one documented key per line."""
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {'none' if v is None else v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text):
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value'")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ConfigError(f"line {lineno}: unknown config key {key!r}")
            values[key] = _coerce(val, types[key], key)
        return cls(**values)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.loads(fh.read())


def _coerce(val, typ, key):
    args = typing.get_args(typ) or (typ,)
    if val.lower() == "none" and type(None) in args:
        return None
    base = next(a for a in args if a is not type(None))
    try:
        return base(val)
    except ValueError:
        raise ConfigError(f"bad value {val!r} for {key}") from None
