import dataclasses
import json

import pandas
import pytest

from flowalign import ConfigurationError, InputError
from flowalign.cli import (RunConfig, build_parser, dispatch, effective_config, parse_config, render_config,
                           validate_config)
from flowalign.reward import RewardWeights

TINY = """\
[run]
seed = 3

[data]
n_pairs = 60
corpus_size = 80
n_frames = 8
n_classes = 4
val_classes = 3

[flow]
hidden = 8
steps = 20
batch_size = 16
log_every = 0

[reward]
hidden = 8
epochs = 1
batch_size = 16
log_every = 0

[noisy_reward]
hidden = 8
epochs = 1
batch_size = 16
log_every = 0

[align]
beta = 10
steps = 3
batch_size = 8
log_every = 0

[guide]
steps = 5

[bench]
n_prompts = 4
axis = w_scale
grid = 0,1
seeds = 0
"""


@pytest.fixture
def tiny(tmp_path):
    path = tmp_path/"tiny.ini"
    path.write_text(TINY)
    return path


def test_empty_config_is_default():
    assert parse_config("") == RunConfig()
    assert parse_config("", "json") == RunConfig()
    assert validate_config() == RunConfig()


def test_config_values():
    config = parse_config(TINY)
    assert config.run.seed == 3
    assert config.data.val_classes == (3,)
    assert config.data.world.n_frames == 8
    assert config.flow.hidden == (8,)
    assert config.bench.grid == ("0", "1")
    assert config.align.beta == 10.0


def test_render_round_trip():
    config = parse_config(TINY)
    config = dataclasses.replace(config, relabel=dataclasses.replace(config.relabel,
                                                                     weights=RewardWeights(0.1, 0.2, 0.7)))
    assert parse_config(render_config(config)) == config
    assert parse_config(render_config(RunConfig())) == RunConfig()


def test_json_config():
    config = parse_config(json.dumps({"reward": {"mode": "bt", "hidden": [16, 16]},
                                      "guide": {"weights": [0, 0, 1]}, "bench": {"gt_eval": False}}), "json")
    assert config.reward.mode == "bt"
    assert config.reward.hidden == (16, 16)
    assert config.guide.weights == RewardWeights(0, 0, 1)
    assert config.bench.gt_eval is False


@pytest.mark.parametrize("text", [
    "[reward]\nmood = bt\n",
    "[rewards]\nmode = bt\n",
    "[flow]\nsteps = 1.5\n",
    "[bench]\ngt_eval = perhaps\n",
    "[relabel]\nweights = 0.5:0.5:0.5\n",
    "[data]\nval_classes = 9\n",
    "[data]\nn_classes = 2\nval_classes = 0,1\n",
    "[reward]\ntheta = 1\n",
    "[guide]\nform = tilt\n",
    "seed = 1\n",
])
def test_bad_config(text):
    with pytest.raises(ConfigurationError):
        parse_config(text)


def test_config_errors_name_the_key():
    with pytest.raises(ConfigurationError, match=r"\[flow\] steps"):
        parse_config("[flow]\nsteps = many\n")
    with pytest.raises(InputError):
        validate_config("/nonexistent/flowalign.ini")


def test_bool_coercion():
    assert parse_config("[bench]\ngt_eval = no\n").bench.gt_eval is False
    assert parse_config("[data]\nemit_gt = yes\n").data.emit_gt is True


def test_options_before_and_after_command():
    parser = build_parser()
    assert parser.parse_args(["--seed", "4", "gen-data"]).seed == 4
    assert parser.parse_args(["gen-data", "--seed", "5"]).seed == 5
    assert parser.parse_args(["--out", "a", "align"]).out == "a"
    args = parser.parse_args(["align", "--beta", "2000", "--schedule", "quadratic"])
    assert (args.method, args.beta, args.schedule) == ("dpo", 2000.0, "quadratic")


def test_effective_config_precedence(tiny, monkeypatch):
    parser = build_parser()
    monkeypatch.setenv("FLOWALIGN_OUT", "/from/env")
    config = effective_config(parser.parse_args(["--config", str(tiny), "gen-data"]))
    assert config.run.out == "/from/env"
    assert config.run.seed == 3
    config = effective_config(parser.parse_args(["--config", str(tiny), "--seed", "9", "--out", "x",
                                                 "gen-data"]))
    assert (config.run.seed, config.run.out) == (9, "x")


def test_config_hash_ignores_output_root():
    a = RunConfig()
    b = dataclasses.replace(a, run=dataclasses.replace(a.run, out="elsewhere"))
    assert a.digest == b.digest
    c = dataclasses.replace(a, run=dataclasses.replace(a.run, seed=1))
    assert a.digest != c.digest


def test_usage_errors(capsys):
    assert dispatch(["frobnicate"]) == 2
    assert dispatch([]) == 2
    assert "command" in capsys.readouterr().err
    assert dispatch(["--version"]) == 0


def test_print_effective(capsys, tiny):
    assert dispatch(["--config", str(tiny), "--print-effective"]) == 0
    out = capsys.readouterr().out
    assert "[data]" in out
    assert parse_config(out).data.n_pairs == 60


def test_simplex_violation_exits_one(tmp_path, capsys):
    path = tmp_path/"bad.ini"
    path.write_text("[relabel]\nweights = 0.5:0.5:0.5\n")
    assert dispatch(["--config", str(path), "gen-data", "--out", str(tmp_path/"run")]) == 1
    assert "ConfigurationError" in capsys.readouterr().err
    assert not (tmp_path/"run").exists()


def test_missing_artifact_is_named(tmp_path, capsys):
    assert dispatch(["align", "--out", str(tmp_path)]) == 1
    err = capsys.readouterr().err
    assert "data/relabeled.jsonl" in err
    assert "train-reward" in err


@pytest.mark.parametrize("options", [["--seeds", "a,b"], ["--seeds", "1.5"],
                                     ["--axis", "data_fraction", "--grid", "bt@x"],
                                     ["--axis", "w_scale", "--grid", "0,strong"]])
def test_bad_ablation_grid_exits_one(tmp_path, capsys, tiny, options):
    assert dispatch(["--config", str(tiny), "--out", str(tmp_path), "ablate"] + options) == 1
    assert "error: ConfigurationError:" in capsys.readouterr().err


def test_gen_data_deterministic(tmp_path, tiny):
    for name in ("a", "b"):
        assert dispatch(["--config", str(tiny), "--out", str(tmp_path/name), "gen-data"]) == 0
    for artifact in ("data/prefs.jsonl", "data/corpus.npy", "data/corpus_conditions.npy"):
        assert (tmp_path/"a"/artifact).read_bytes() == (tmp_path/"b"/artifact).read_bytes()
    manifest = json.loads((tmp_path/"a"/"manifests"/"gen-data.json").read_text())
    again = json.loads((tmp_path/"b"/"manifests"/"gen-data.json").read_text())
    assert manifest["config_hash"] == again["config_hash"]
    assert manifest["outputs"] == again["outputs"]
    assert set(manifest["seeds"]) == {"corpus", "prefs"}
    assert len((tmp_path/"a"/"data"/"prefs.jsonl").read_text().splitlines()) == 61


def test_seed_changes_data(tmp_path, tiny):
    dispatch(["--config", str(tiny), "--out", str(tmp_path/"a"), "gen-data"])
    dispatch(["--config", str(tiny), "--out", str(tmp_path/"b"), "--seed", "4", "gen-data"])
    assert (tmp_path/"a"/"data"/"prefs.jsonl").read_bytes() != (tmp_path/"b"/"data"/"prefs.jsonl").read_bytes()


PIPELINE = (["gen-data"], ["train-flow"], ["train-reward"], ["train-noisy-reward"], ["align", "--method", "dpo"],
            ["sample", "--guided", "--trace"], ["sample"], ["eval"], ["ablate"], ["report"])


def run_pipeline(out, config):
    common = ["--config", str(config), "--out", str(out)]
    for command in PIPELINE:
        assert dispatch(common + command) == 0, command


def test_pipeline(tmp_path, tiny):
    out = tmp_path/"run"
    run_pipeline(out, tiny)

    for artifact in ("models/flow.faln", "models/reward.faln", "models/noisy_reward.faln",
                     "models/aligned_dpo.faln", "data/relabeled.jsonl", "samples/flow.jsonl",
                     "samples/flow_guided.jsonl", "samples/flow_guided_trace.csv",
                     "reports/reward_btt.csv", "reports/eval_aligned_dpo_vs_flow.csv",
                     "reports/ablation_w_scale.csv", "reports/ablation_w_scale.ledger.jsonl",
                     "reports/summary.csv", "reports/summary.svg", "curves/flow.svg",
                     "manifests/align-dpo.json", "manifests/report.json"):
        assert (out/artifact).exists(), artifact

    report = pandas.read_csv(out/"reports"/"eval_aligned_dpo_vs_flow.csv", skiprows=1)
    assert set(report.metric) == {"win_rate", "gt_win_rate"}
    assert report.value.between(0, 1).all()

    ablation = pandas.read_csv(out/"reports"/"ablation_w_scale.csv", skiprows=1, dtype={"setting": str})
    assert set(ablation.setting) == {"0", "1"}
    # w_scale 0 leaves the sampler unchanged, so every comparison is a tie
    assert (ablation[ablation.setting == "0"].value == 0.5).all()

    manifest = json.loads((out/"manifests"/"align-dpo.json").read_text())
    assert set(manifest["inputs"]) == {"data/relabeled.jsonl", "models/flow.faln"}
    assert set(manifest["versions"]) >= {"flowalign", "numpy", "python"}


@pytest.mark.slow
@pytest.mark.parametrize("method", ["sft", "rwr"])
def test_pipeline_other_methods(tmp_path, tiny, method):
    out = tmp_path/"run"
    common = ["--config", str(tiny), "--out", str(out)]
    for command in (["gen-data"], ["train-flow"], ["train-reward"], ["align", "--method", method],
                    ["eval", "--model", f"aligned_{method}"]):
        assert dispatch(common + command) == 0, command
    assert (out/"reports"/f"eval_aligned_{method}_vs_flow.csv").exists()


def artifact_bytes(root):
    files = {}
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        data = path.read_bytes()
        if path.suffix == ".csv" and data.startswith(b"# generated"):
            data = data.split(b"\n", 1)[1]
        files[path.relative_to(root).as_posix()] = data
    return files


def test_pipeline_is_reproducible(tmp_path, tiny):
    run_pipeline(tmp_path/"a", tiny)
    run_pipeline(tmp_path/"b", tiny)
    a, b = artifact_bytes(tmp_path/"a"), artifact_bytes(tmp_path/"b")
    assert sorted(a) == sorted(b)
    for name in a:
        assert a[name] == b[name], name
