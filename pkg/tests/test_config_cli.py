import json

import pytest
import yaml

from natbackdoor import cli, pipeline
from natbackdoor.config import ExperimentConfig, config_from_dict, load_config, parse_config
from natbackdoor.errors import ConfigurationError
from natbackdoor.plots import emit_plots

TINY = """
# two-class blobs, enough to exercise every stage quickly
seed: 3
dataset: {name: blobs, n: 240, num_classes: 2}
substitutes:
  - {family: mlp, width: 8}
  - {family: small-vgg, width: 4}
targets:
  - {family: small-shufflenet, width: 4}
target_training: {learning_rate: 0.02, epochs: 4}
distill:
  train: {learning_rate: 0.02}
schedule: {max_epochs: 4}
lambda: {initial: 0.001, up_factor: 1.2}
attack:
  target_class: 1
  transparency_grid: [0.5, 1.0]
  uap: {enabled: true, epsilon: 0.1, steps: 2, step_size: 0.05}
defenses:
  prune: {enabled: true, ratios: [0.0, 0.2]}
  fine_tune: {enabled: true, epochs: 1}
  nad: {enabled: true, epochs: 1}
  strip: {enabled: true, n_overlays: 4}
  beatrix: {enabled: true, gram_orders: [1, 2]}
checks: {min_ensemble_asr: 0.5}
"""


def tiny(**overrides):
    data = yaml.safe_load(TINY)
    for dotted, value in overrides.items():
        node = data
        *path, last = dotted.split(".")
        for key in path:
            node = node.setdefault(key, {})
        node[last] = value
    return config_from_dict(data)


def write_config(tmp_path, cfg, name="exp.yaml"):
    path = tmp_path / name
    path.write_text(cfg.dump())
    return path


# configuration ----------------------------------------------------------------------------


@pytest.mark.parametrize("source", ["default", "tiny", "desk"])
def test_config_round_trip(source):
    if source == "default":
        cfg = ExperimentConfig().validate()
    elif source == "tiny":
        cfg = tiny()
    else:
        cfg = load_config("configs/desk.yaml")
    again = parse_config(cfg.dump())
    assert again == cfg
    assert again.dump() == cfg.dump()


@pytest.mark.parametrize("patch", [{"colour": 1}, {"schedule": {"epochs": 3}}, {"targets": [{"famly": "mlp"}]}])
def test_unknown_keys_are_rejected(patch):
    with pytest.raises(ConfigurationError, match="unknown key"):
        config_from_dict(patch)


@pytest.mark.parametrize("patch", [
    {"attack": {"target_class": 2}},
    {"attack": {"target_class": 0, "multi_targets": [1, 1]}},
    {"attack": {"norm_type": "L0"}},
    {"schedule": {"batch_size": "big"}},
    {"seed": 1.5},
    {"defenses": {"prune": {"ratios": [0.0, 1.0]}}},
    {"substitutes": []},
    {"targets": [{"family": "mlp"}, {"family": "mlp"}]},
])
def test_invalid_configs(patch):
    base = {"dataset": {"name": "blobs", "num_classes": 2}}
    with pytest.raises(ConfigurationError):
        config_from_dict({**base, **patch})


def test_bad_target_class_fails_before_any_run_directory(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text(TINY.replace("target_class: 1", "target_class: 2"))
    assert cli.main(["run", "--config", str(path), "--out", str(tmp_path / "runs")]) == 2
    assert not (tmp_path / "runs").exists()


def test_yaml_comments_and_lambda_key():
    cfg = parse_config("# comment\nlambda:\n  initial: 0.5  # trailing\n")
    assert cfg.lambda_.initial == 0.5
    assert "lambda" in cfg.to_dict() and "lambda_" not in cfg.to_dict()


# full pipeline ----------------------------------------------------------------------------


@pytest.fixture(scope="module")
def full_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("runs")
    cfg = tiny()
    run_dir, summary = pipeline.run_experiment(cfg, root)
    return root, run_dir, summary


def test_full_run_writes_every_artifact(full_run):
    _, run_dir, summary = full_run
    for name in ("trigger.npz", "ensemble/manifest.json", "run_manifest.json", "attack_report.json",
                 "attack_report.csv", "defense_report.json", "prune_report.csv", "repair_report.csv",
                 "strip_report.csv", "beatrix_report.csv", "checks.json", "config.yaml"):
        assert (run_dir / name).exists(), name
    assert set(summary["checks"]) == {"ensemble_asr"}
    report = json.loads((run_dir / "attack_report.json").read_text())
    assert "uap" in report and report["uap"]["linf"] <= 0.1 + 1e-7


def test_figures_per_target_and_strip(full_run):
    _, run_dir, _ = full_run
    figures = sorted(p.name for p in (run_dir / "figures").iterdir())
    assert figures == ["pruning_small-shufflenet-w4-d2.png", "strip_small-shufflenet-w4-d2.png",
                       "transparency_small-shufflenet-w4-d2.png"]
    with pytest.raises(FileExistsError):
        emit_plots(run_dir)  # figures are never overwritten


def test_rerun_gives_identical_reports(full_run):
    root, run_dir, _ = full_run
    second, _ = pipeline.run_experiment(tiny(), root, plots=False)
    assert second != run_dir
    for name in ("attack_report.json", "defense_report.json", "run_manifest.json"):
        assert (second / name).read_bytes() == (run_dir / name).read_bytes()


def test_defenses_off_writes_no_defense_report(tmp_path):
    cfg = tiny()
    for name in ("prune", "fine_tune", "nad", "strip", "beatrix"):
        getattr(cfg.defenses, name).enabled = False
    cfg.attack.uap.enabled = False
    run_dir, _ = pipeline.run_experiment(cfg, tmp_path)
    assert (run_dir / "trigger.npz").exists() and (run_dir / "attack_report.json").exists()
    assert not list(run_dir.glob("defense_report*")) and not list(run_dir.glob("*strip*"))


def test_stage_failure_writes_failure_record(tmp_path):
    cfg = tiny()
    cfg.targets[0].checkpoint = str(tmp_path / "missing.npz")
    with pytest.raises(FileNotFoundError):
        pipeline.run_experiment(cfg, tmp_path / "runs")
    run_dir = tmp_path / "runs" / "run-001"
    failure = json.loads((run_dir / "failure.json").read_text())
    assert failure["stage"] == "targets"
    assert (run_dir / "trigger.npz").exists()


def test_output_directories_are_append_only(tmp_path):
    first, second = pipeline.new_run_dir(tmp_path), pipeline.new_run_dir(tmp_path)
    assert (first.name, second.name) == ("run-001", "run-002")
    pipeline.write_json(first / "a.json", {"x": 1})
    with pytest.raises(FileExistsError):
        pipeline.write_json(first / "a.json", {"x": 2})


# command line -----------------------------------------------------------------------------


def test_cli_stages_chain(tmp_path, capsys):
    cfg = tiny()
    cfg.defenses.nad.enabled = False
    path = write_config(tmp_path, cfg)
    out = tmp_path / "runs"
    common = ["--config", str(path), "--out", str(out)]
    assert cli.main(["split-data", *common]) == 0
    assert json.loads((out / "run-001" / "split.json").read_text())["mode"] == "none"
    assert cli.main(["train-substitutes", *common]) == 0
    assert (out / "run-002" / "ensemble" / "manifest.json").exists()
    assert cli.main(["gen-trigger", *common]) == 0
    assert cli.main(["eval-attack", *common, "--from", str(out / "run-003")]) == 0
    assert (out / "run-004" / "attack_report.json").exists()
    assert cli.main(["eval-defense", *common, "--from", str(out / "run-003")]) == 0
    assert (out / "run-005" / "defense_report.json").exists()
    assert cli.main(["plot", str(out / "run-004")]) == 0
    assert (out / "run-004" / "figures").is_dir()
    capsys.readouterr()


def test_cli_run_exit_codes(tmp_path, capsys):
    passing = write_config(tmp_path, tiny(), "pass.yaml")
    assert cli.main(["run", "--config", str(passing), "--out", str(tmp_path / "a")]) == 0
    failing = write_config(tmp_path, tiny(**{"checks.min_target_asr": 1.01}), "fail.yaml")
    assert cli.main(["run", "--config", str(failing), "--out", str(tmp_path / "b")]) == 1
    lines = capsys.readouterr().out.splitlines()
    assert any(line.startswith("FAIL target_asr[") for line in lines)


def test_cli_seed_override(tmp_path, capsys):
    path = write_config(tmp_path, tiny())
    assert cli.main(["split-data", "--config", str(path), "--out", str(tmp_path), "--seed", "11"]) == 0
    assert yaml.safe_load((tmp_path / "run-001" / "config.yaml").read_text())["seed"] == 11
    capsys.readouterr()


def test_plot_on_empty_directory_names_expected_files(tmp_path, capsys):
    with pytest.raises(FileNotFoundError, match="attack_report.json"):
        emit_plots(tmp_path)
    assert cli.main(["plot", str(tmp_path)]) == 2
    assert "defense_report.json" in capsys.readouterr().err
