import json

import numpy as np
import pytest

from milcurate.core import CurationConfig, write_bags
from milcurate.errors import QuotaError, SchemaError, ValidationError
from milcurate.pipeline import (CurationManifest, SyntheticSpec, even_select, format_report, generate_reference,
                                generate_synthetic, load_bags, load_models, problem_from_bags,
                                retained_instance_index, run_curation, save_models)

SMALL = SyntheticSpec(dim=8, positive_bags=4, noise_bags=1, negative_bags=4, bag_size=6, seed=5)


@pytest.fixture(scope="module")
def small_run():
    cfg = CurationConfig(quota=6)
    bags, truth = generate_synthetic(SMALL)
    manifest, models = run_curation(problem_from_bags(bags, cfg), cfg, reference=generate_reference(SMALL, 16))
    return bags, truth, cfg, manifest, models


def test_generator_geometry_and_truth():
    bags, truth = generate_synthetic(SyntheticSpec(seed=1))
    assert [b.id for b in bags][:2] == ["p00", "p01"] and len(bags) == 16
    assert sum(v == "noise" for v in truth["bags"].values()) == 2
    for b in bags:
        if truth["bags"][b.id] == "clean":
            assert sum(truth["instances"][i] == "noise" for i in b.instance_ids) == 3
    X = np.vstack([b.X for b in bags])
    assert X.shape == (160, 16)


def test_generator_is_seeded():
    a, _ = generate_synthetic(SMALL)
    b, _ = generate_synthetic(SMALL)
    assert all(np.array_equal(x.X, y.X) for x, y in zip(a, b))


def test_spec_validation():
    with pytest.raises(ValidationError):
        SyntheticSpec(noise=1.0)
    with pytest.raises(ValidationError):
        SyntheticSpec(dim=4)


def test_reference_ids_are_distinct():
    ref = generate_reference(SMALL, 4)
    assert all(b.id.startswith("r") for b in ref)
    assert {b.label for b in ref} == {"pos", "neg"}


def test_retained_index_respects_floor():
    scores = np.array([-1.0, 0.5, -0.2, -3.0])
    np.testing.assert_array_equal(retained_instance_index(scores, 1), [1])
    np.testing.assert_array_equal(retained_instance_index(scores, 3), [0, 1, 2])
    np.testing.assert_array_equal(retained_instance_index(scores, 1, top_m=2), [1, 2])


def test_even_select_examples():
    retained = [("a", 0.5, [("a0", 3.0), ("a1", 2.0), ("a2", 1.0)]),
                ("b", 0.9, [("b0", 1.0), ("b1", 5.0), ("b2", 0.0)])]
    assert even_select(retained, 4) == ["b1", "a0", "b0", "a1"]
    assert even_select(retained, 3) == ["b1", "a0", "b0"]
    assert even_select(retained, 0) == []
    assert len(even_select(retained, None)) == 6
    with pytest.raises(QuotaError):
        even_select(retained, 7)


def test_manifest_invariants(small_run):
    bags, truth, cfg, manifest, _ = small_run
    assert manifest.check() == []
    assert len(manifest.selected) == 6
    assert set(manifest.retained_instances) == set(manifest.retained_bags)
    noise_bag = [b for b, v in truth["bags"].items() if v == "noise"][0]
    assert noise_bag not in manifest.retained_bags
    for bag in bags:
        if bag.id in manifest.retained_instances:
            assert len(manifest.retained_instances[bag.id]) >= 5  # ceil(0.7 * 6)


def test_manifest_round_trip(small_run, tmp_path):
    manifest = small_run[3]
    path = tmp_path / "m.json"
    path.write_text(manifest.to_json())
    assert CurationManifest.load(path).to_json() == manifest.to_json()
    with pytest.raises(SchemaError):
        CurationManifest.from_dict({"schema": "other"})


def test_models_round_trip_bit_exact(small_run, tmp_path):
    bags, _, cfg, manifest, (inst, bag) = small_run
    path = tmp_path / "models.json"
    save_models(path, inst, bag)
    inst2, bag2 = load_models(path)
    for b in bags:
        assert np.array_equal(inst2.score(b.X, b.id), inst.score(b.X, b.id))
        assert bag2.score(b) == bag.score(b)
    again, _ = run_curation(problem_from_bags(bags, cfg), cfg, models=(inst2, bag2))
    assert again.selected == manifest.selected
    assert again.bag_scores == manifest.bag_scores


def test_load_models_errors(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(SchemaError):
        load_models(bad)
    bad.write_text(json.dumps({"schema": "nope"}))
    with pytest.raises(SchemaError):
        load_models(bad)
    with pytest.raises(FileNotFoundError):
        load_models(tmp_path / "missing.json")


def test_report_mentions_consistency(small_run):
    text = format_report(small_run[3])
    assert "consistency: ok" in text and "retained instances" in text


def test_full_delta_without_noise_keeps_everything():
    spec = SyntheticSpec(dim=8, positive_bags=3, noise_bags=0, negative_bags=3, bag_size=5, noise=0.0, seed=2)
    cfg = CurationConfig(delta=1.0)
    bags, _ = generate_synthetic(spec)
    manifest, _ = run_curation(problem_from_bags(bags, cfg), cfg, reference=generate_reference(spec, 8))
    pos = [b for b in bags if b.positive]
    assert manifest.retained_bags == [b.id for b in pos]
    assert all(manifest.retained_instances[b.id] == b.instance_ids for b in pos)


def test_stage_name_in_errors():
    cfg = CurationConfig(quota=10 ** 6)
    bags, _ = generate_synthetic(SMALL)
    with pytest.raises(QuotaError, match=r"\[select\]"):
        run_curation(problem_from_bags(bags, cfg), cfg, reference=generate_reference(SMALL, 8))


def test_load_bags_validates(tmp_path):
    bags, _ = generate_synthetic(SMALL)
    path = tmp_path / "bags.jsonl"
    write_bags(path, [b for b in bags if b.positive])
    with pytest.raises(ValidationError, match="no negative bag"):
        load_bags(path)
