"""Curation of weakly labeled bags of feature vectors.

Noisy query expansions are pruned first, then a constrained multi-instance
classifier removes noisy instances and a latent bag classifier removes
noisy bags; a soft-coverage objective picks representative components.
"""
from .core import Bag, CurationConfig, Instance, MilProblem, validate_problem
from .coverage import ComponentGraph, coverage_objective, exact_select, greedy_select
from .expansions import ExpansionCandidate, PageCounts, filter_expansions, ngd
from .kernels import KernelSpec
from .mil_bag import BagModel, WeightParams, bag_score, train_bag_model
from .mil_instance import InstanceModel, train_instance_model
from .pipeline import CurationManifest, SyntheticSpec, generate_synthetic, run_curation

__version__ = "0.1.0"
