"""Command-line interface.

Exit codes: 0 success, 2 invalid input (validation, parse or config
errors), 3 solver non-convergence, 1 anything else.
"""
import argparse
import dataclasses
import json
import logging
import sys

import numpy as np

from .core import CurationConfig, read_bags, write_bags
from .coverage import ComponentGraph, greedy_select
from .errors import ConfigError, ConvergenceError, CurationError, ValidationError
from .expansions import PageCounts, assess_expansions, read_expansions, train_relevance_model
from .mil_bag import train_bag_model
from .pipeline import (CurationManifest, SyntheticSpec, format_report, generate_reference, generate_synthetic,
                       load_bags, run_curation, save_models, train_instances)

log = logging.getLogger("milcurate")


def _config(args):
    cfg = CurationConfig.load(args.config) if args.config else CurationConfig()
    changes = {}
    for name in ("seed", "quota"):
        if getattr(args, name, None) is not None:
            changes[name] = getattr(args, name)
    if getattr(args, "budget", None) is not None:
        changes["coverage_budget"] = args.budget
    return dataclasses.replace(cfg, **changes) if changes else cfg


def _write(text, out):
    if out:
        with open(out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _json(obj):
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


def cmd_synth(args):
    cfg = _config(args)
    spec = SyntheticSpec(seed=cfg.seed, noise=args.noise, noise_bags=args.noise_bags)
    bags, truth = generate_synthetic(spec)
    write_bags(args.out, bags)
    if args.truth:
        with open(args.truth, "w") as fh:
            fh.write(_json(truth))
    if args.reference:
        write_bags(args.reference, generate_reference(spec))


def cmd_train_instance(args):
    cfg = _config(args)
    problem = load_bags(args.bags, cfg)
    model, traces = train_instances(problem, cfg)
    save_models(args.out, model, None)
    for t in traces:
        log.info("shard %s: %d restricted solves (%s)", t["shard"], t["iterations"], t["stop_reason"])


def cmd_train_bag(args):
    cfg = _config(args)
    problem = load_bags(args.bags, cfg)
    model = train_bag_model(problem.positive_bags, problem.negative_bags, cfg)
    save_models(args.out, None, model)


def cmd_curate(args):
    cfg = _config(args)
    problem = load_bags(args.bags, cfg)
    reference = read_bags(args.reference) if args.reference else None
    statuses = None
    if args.expansion_statuses:
        with open(args.expansion_statuses) as fh:
            statuses = json.load(fh)
    manifest, models = run_curation(problem, cfg, reference=reference, expansion_statuses=statuses)
    _write(manifest.to_json(), args.out)
    if args.models:
        save_models(args.models, *models)


def cmd_select_components(args):
    cfg = _config(args)
    if cfg.coverage_budget is None:
        raise ConfigError("a coverage budget is required (--budget or coverage_budget)")
    graph = ComponentGraph.load(args.graph)
    nodes, value = greedy_select(graph, cfg.coverage_budget)
    _write(_json({"selected": nodes, "objective": value}), args.out)


def cmd_filter_expansions(args):
    cfg = _config(args)
    cands = read_expansions(args.expansions)
    counts = PageCounts.load(args.counts)
    by_text = {c.text: c for c in cands}
    if args.target not in by_text:
        raise ValidationError(f"target {args.target!r} is not in the expansion file")
    target = by_text[args.target]
    with open(args.negatives) as fh:
        negatives = np.array(json.load(fh), dtype=float)
    with open(args.relevance_train) as fh:
        rel = json.load(fh)
    model = train_relevance_model(rel["positive"], rel["negative"])
    report = assess_expansions([c for c in cands if c is not target], target, counts, model, cfg, negatives)
    rows = [
        {"text": c.text, "status": c.status, "salience": c.salience,
         "semantic_distance": c.semantic_distance, "visual_distance": c.visual_distance}
        for c in report.candidates
    ]
    _write(_json({"candidates": rows, "diagnostics": report.diagnostics}), args.out)


def cmd_report(args):
    _write(format_report(CurationManifest.load(args.manifest)), args.out)


def build_parser():
    p = argparse.ArgumentParser(prog="milcurate", description="Curate weakly labeled bags of feature vectors.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, func, help):
        sp = sub.add_parser(name, help=help)
        sp.set_defaults(func=func)
        sp.add_argument("--config", help="flat key = value config file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out")
        return sp

    sp = add("synth", cmd_synth, "write a synthetic bag file with ground truth")
    sp.add_argument("--truth")
    sp.add_argument("--reference", help="also write a clean labeled reference bag file")
    sp.add_argument("--noise", type=float, default=0.3)
    sp.add_argument("--noise-bags", type=int, default=2)

    sp = add("train-instance", cmd_train_instance, "train the instance model")
    sp.add_argument("bags")

    sp = add("train-bag", cmd_train_bag, "train the bag model")
    sp.add_argument("bags")

    sp = add("curate", cmd_curate, "run the full curation pipeline")
    sp.add_argument("bags")
    sp.add_argument("--quota", type=int)
    sp.add_argument("--reference", help="labeled bag file for training the bag model")
    sp.add_argument("--expansion-statuses", help="JSON output of filter-expansions to record")
    sp.add_argument("--models", help="also save the trained models here")

    sp = add("select-components", cmd_select_components, "greedy coverage selection")
    sp.add_argument("graph")
    sp.add_argument("--budget", type=int)

    sp = add("filter-expansions", cmd_filter_expansions, "salience and relevance filtering")
    sp.add_argument("expansions")
    sp.add_argument("counts")
    sp.add_argument("--target", required=True, help="text of the target query in the expansion file")
    sp.add_argument("--negatives", required=True, help="JSON list of negative feature vectors")
    sp.add_argument("--relevance-train", required=True,
                    help='JSON {"positive": [[D, E], ...], "negative": [[D, E], ...]}')

    sp = add("report", cmd_report, "human-readable manifest summary")
    sp.add_argument("manifest")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (ValidationError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ConvergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (CurationError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
