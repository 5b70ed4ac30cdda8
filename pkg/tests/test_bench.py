import json
import xml.etree.ElementTree as ET

import numpy
import pandas
import pytest

from flowalign import ConfigurationError, InputError
from flowalign.bench import (REPORT_COLUMNS, AblationSpec, BenchBase, SampleSet, accuracy_rows,
                             compare_samples, comparison_report, emit_report, flip_fraction,
                             held_out_conditions, parse_setting, prompt_keys, read_ledger, read_report,
                             relabel_pairs, report_summary, run_ablation, sampler, wilson_interval)
from flowalign.flow import FlowSchedule, velocity_net_init
from flowalign.io import derive_seed
from flowalign.reward import ScoreStats, evaluate_reward, reward_net_init
from flowalign.toyworld import AnnotatorModel, GroundTruthReward, KnobDistribution, WorldConfig, build_pref_dataset


def test_wilson_interval():
    low, high = wilson_interval(50, 100)
    assert low == pytest.approx(0.4038, abs=1e-4)
    assert high == pytest.approx(0.5962, abs=1e-4)
    assert wilson_interval(0, 10)[0] == 0.0
    assert wilson_interval(10, 10)[1] == 1.0
    low, high = wilson_interval(2.5, 5)
    assert low < 0.5 < high
    with pytest.raises(InputError):
        wilson_interval(0, 0)


def test_prompt_keys():
    conds, seeds = prompt_keys([1, 2], [0, 5])
    assert list(conds) == [1, 2, 1, 2]
    assert list(seeds) == [derive_seed(0, 0), derive_seed(0, 1), derive_seed(5, 0), derive_seed(5, 1)]
    # repeated prompts still draw distinct noise
    _, seeds = prompt_keys([3, 3], [0])
    assert seeds[0] != seeds[1]
    with pytest.raises(InputError):
        prompt_keys([], [0])
    with pytest.raises(InputError):
        prompt_keys([1], [])


@pytest.fixture(scope="module")
def world():
    return WorldConfig()


@pytest.fixture(scope="module")
def policy():
    return velocity_net_init(32, 8, hidden=(8,), seed=2)


def test_self_win_rate_is_half(world, policy):
    gen = sampler(policy, FlowSchedule(5))
    report = comparison_report(gen, gen, GroundTruthReward(world), None, [3, 7, 3], [0, 1], "self", world)
    assert list(report.columns) == REPORT_COLUMNS
    assert set(report.metric) == {"win_rate", "gt_win_rate"}
    assert set(report.dimension) == {"vq", "mq", "ta", "overall"}
    assert report.value.to_numpy() == pytest.approx(0.5)
    assert (report.ci_low < 0.5).all()
    assert (report.ci_high > 0.5).all()
    assert sorted(set(report.seed)) == [0, 1]


def test_without_world_only_learned_reward(world, policy):
    gen = sampler(policy, FlowSchedule(5))
    report = comparison_report(gen, gen, GroundTruthReward(world), None, [3], [0], "self")
    assert set(report.metric) == {"win_rate"}


def test_compare_needs_matching_keys():
    samples = numpy.zeros((2, 32))
    a = SampleSet(samples, numpy.array([0, 1]), numpy.array([5, 6]))
    b = SampleSet(samples, numpy.array([0, 1]), numpy.array([5, 7]))
    with pytest.raises(InputError, match="keys"):
        compare_samples(a, b, GroundTruthReward())


def test_better_generator_wins(world):
    rng = numpy.random.default_rng(0)
    _, records = build_pref_dataset(1, KnobDistribution(), AnnotatorModel(), seed=1)
    clean = numpy.tile(records[0].sample_a.flat, (20, 1))
    noisy = clean + 0.3*rng.standard_normal(clean.shape)
    conds = numpy.full(20, records[0].condition_class)
    keys = numpy.arange(20)
    result = compare_samples(SampleSet(clean, conds, keys), SampleSet(noisy, conds, keys),
                             GroundTruthReward(world), ScoreStats([0.0]*3, [1.0]*3))
    assert result.per_dimension["mq"] == 1.0
    assert result.n_prompts == 20


def test_relabel_pairs_orients_by_score(world):
    _, records = build_pref_dataset(60, KnobDistribution(), AnnotatorModel(), seed=2)
    pairs = relabel_pairs(GroundTruthReward(world), ScoreStats([0.0]*3, [1.0]*3), records)
    assert 0 < len(pairs) <= 60
    for p in pairs:
        assert p.scores[0] > p.scores[1]
        assert p.provenance["chosen_side"] in ("a", "b")
        assert set(p.provenance["labels"]) == {"vq", "mq", "ta"}
    assert 0 <= flip_fraction(pairs) < 0.5
    assert flip_fraction([]) == 0.0
    assert relabel_pairs(GroundTruthReward(world), None, []) == []


def test_ablation_spec():
    spec = AblationSpec("beta_value", [100, 500], [0, 1])
    assert spec.grid == ("100", "500")
    assert spec.cells() == [("100", 0), ("100", 1), ("500", 0), ("500", 1)]
    with pytest.raises(ConfigurationError):
        AblationSpec("learning_rate", ["1"])
    with pytest.raises(ConfigurationError):
        AblationSpec("w_scale", [])


@pytest.mark.parametrize("axis, grid, seeds", [
    ("data_fraction", ["bt@x"], [0]),
    ("beta_schedule", ["constant@big"], [0]),
    ("beta_value", ["100", "lots"], [0]),
    ("w_scale", ["1"], ["a"]),
    ("w_scale", ["1"], ["1.5"]),
    ("guidance_weights", ["0:0"], [0]),
])
def test_ablation_spec_rejects_bad_settings(axis, grid, seeds):
    with pytest.raises(ConfigurationError):
        AblationSpec(axis, grid, seeds)


def test_parse_setting():
    assert parse_setting("data_fraction", "bt@0.25") == ("bt", 0.25)
    assert parse_setting("data_fraction", "btt") == ("btt", 1.0)
    assert parse_setting("beta_schedule", "quadratic") == ("quadratic", None)
    assert parse_setting("w_scale", " 2 ") == 2.0
    assert AblationSpec("w_scale", ["1"], ["0", " 3"]).seeds == (0, 3)


def test_base_requires_inputs():
    base = BenchBase(WorldConfig(), [], [], (3,))
    with pytest.raises(ConfigurationError, match="pretrained"):
        run_ablation(AblationSpec("w_scale", ["1"]), base)


def test_ledger_resume(tmp_path, monkeypatch):
    import flowalign.bench as bench

    calls = []

    def fake_cell(base, axis, setting, seed):
        calls.append((setting, seed))
        return [("win_rate", "overall", float(setting)/10, 0.0, 1.0)]

    monkeypatch.setattr(bench, "run_cell", fake_cell)
    base = BenchBase(WorldConfig(), ["r"], ["r"], (3,))
    spec = AblationSpec("rm_mode", ["1", "2"], [0, 1])
    ledger = tmp_path/"ablation.ledger.jsonl"
    first = run_ablation(spec, base, ledger)
    assert len(calls) == 4
    assert len(read_ledger(ledger)) == 4

    # a second run only reads the ledger
    second = run_ablation(spec, base, ledger)
    assert len(calls) == 4
    pandas.testing.assert_frame_equal(first, second)

    # a wider grid only runs the new cells
    run_ablation(AblationSpec("rm_mode", ["1", "2", "3"], [0, 1]), base, ledger)
    assert calls[4:] == [("3", derive_seed(0, 4, 0)), ("3", derive_seed(0, 5, 1))]


def make_report():
    rows = []
    for setting in ("100", "500"):
        for seed in (0, 1, 2):
            for dim in ("vq", "mq", "ta", "overall"):
                value = 0.5 + int(setting)/2000 + 0.01*seed
                rows.append(("beta_value", setting, "win_rate", dim, seed, value, value - 0.05, value + 0.05))
    return pandas.DataFrame(rows, columns=REPORT_COLUMNS)


def test_report_summary():
    summary = report_summary(make_report())
    assert len(summary) == 8
    first = summary[0]
    assert (first["setting"], first["dimension"]) == ("100", "vq")
    assert first["value"] == pytest.approx(0.56)
    assert first["n_seeds"] == 3


def test_emit_report(tmp_path):
    report = make_report()
    paths = emit_report(report, tmp_path, {"k": 1}, stem="ablation", timestamp="2024-01-01T00:00:00+00:00")
    assert sorted(paths) == ["csv", "json", "svg"]

    head = paths["csv"].read_text().splitlines()[0]
    assert head.startswith("# generated: 2024-01-01T00:00:00+00:00 config: ")
    back = read_report(paths["csv"])
    assert list(back.columns) == REPORT_COLUMNS
    assert back.value.to_numpy() == pytest.approx(report.value.to_numpy())
    assert list(back.setting) == list(report.setting)

    summary = json.loads(paths["json"].read_text())
    assert len(summary["rows"]) == 8

    root = ET.parse(paths["svg"]).getroot()
    ids = {el.get("id") for el in root.iter()}
    assert {"series-100", "series-500"} <= ids

    again = emit_report(report, tmp_path/"again", {"k": 1}, stem="ablation",
                        timestamp="2024-01-01T00:00:00+00:00")
    for kind in ("csv", "json", "svg"):
        assert again[kind].read_bytes() == paths[kind].read_bytes()


def test_emit_refuses_empty(tmp_path):
    with pytest.raises(InputError):
        emit_report(pandas.DataFrame(columns=REPORT_COLUMNS), tmp_path)
    with pytest.raises(InputError):
        read_report(tmp_path/"missing.csv")


def test_accuracy_rows():
    _, records = build_pref_dataset(40, KnobDistribution(), AnnotatorModel(), seed=3)
    table = evaluate_reward(reward_net_init(32, 8, hidden=(4,)), records)
    rows = accuracy_rows(table)
    metrics = {m for m, _, _, _, _ in rows}
    assert metrics == {"accuracy_with_ties", "accuracy_without_ties", "mean_abs_delta_ties"}
    assert all(numpy.isnan(lo) and numpy.isnan(hi) for _, _, _, lo, hi in rows)


def test_held_out_conditions():
    assert held_out_conditions(5, [7, 3]) == (3, 7, 3, 7, 3)
    with pytest.raises(ConfigurationError):
        held_out_conditions(4, [])
