import json

import pytest
import torch
import torch.nn as nn

from natbackdoor.attack import (AttackReport, AttackRow, UapConfig, attack_success_rate, baseline_target_rate,
                                evaluate_targets, multi_trigger_campaign, perturbation_success_rate,
                                transparency_sweep, uap_baseline)
from natbackdoor.data import DatasetSpec, LabeledData, make_blobs, split_data
from natbackdoor.distill import DistillConfig
from natbackdoor.errors import ConfigurationError
from natbackdoor.smaml import LambdaScheduler, OptimizerSchedule, generate_natural_trigger
from natbackdoor.training import (Classifier, TrainConfig, dataset_spec_for, evaluate_accuracy,
                                  parameter_checksum, train_classifier)
from natbackdoor.trigger import Trigger, TriggerArtifact
from natbackdoor.zoo import ModelSpec

SHAPE = (1, 4, 4)


class Keyed(nn.Module):
    """Logit row chosen by round(100 * first pixel), so inputs carry their own index."""

    def __init__(self, table):
        super().__init__()
        self.table = table

    def forward(self, x):
        return self.table[(x.flatten(1)[:, 0] * 100).round().long()]


def _wrap(net, k=2):
    return Classifier(ModelSpec("mlp", k), net, DatasetSpec("toy", k, SHAPE, mean=(0.0,), std=(1.0,)))


def _keyed_inputs(n):
    x = torch.zeros(n, *SHAPE)
    x.view(n, -1)[:, 0] = torch.arange(n, dtype=x.dtype) / 100
    return x


def _invisible(target):
    """A trigger that leaves inputs untouched (mask ~ 0)."""
    return Trigger(torch.full(SHAPE[1:], -50.0), torch.zeros(SHAPE), target)


def test_always_target_model_has_full_asr():
    model = _wrap(Keyed(torch.tensor([[0.0, 9.0]]).repeat(20, 1)))
    data = LabeledData(_keyed_inputs(20), torch.arange(20) % 2)
    assert attack_success_rate(model, data, Trigger.random(SHAPE, 1)) == 1.0


def test_zero_transparency_on_perfect_model():
    labels = torch.arange(20) % 2
    model = _wrap(Keyed(nn.functional.one_hot(labels, 2).float()))
    data = LabeledData(_keyed_inputs(20), labels)
    assert attack_success_rate(model, data, Trigger.random(SHAPE, 1, logit_mean=3.0), 0.0) == 0.0


def test_seven_of_ten_hits():
    n = 20
    labels = torch.tensor([0] * 10 + [1] * 10)
    table = torch.zeros(n, 2)
    table[:7, 1] = 5.0  # 7 of the 10 class-0 inputs predicted as class 1
    table[7:10, 0] = 5.0
    table[10:, 1] = 5.0
    data = LabeledData(_keyed_inputs(n), labels)
    assert attack_success_rate(_wrap(Keyed(table)), data, _invisible(1)) == pytest.approx(0.7)


def test_target_only_test_set_is_an_error():
    data = LabeledData(_keyed_inputs(4), torch.ones(4, dtype=torch.long))
    with pytest.raises(ValueError):
        attack_success_rate(_wrap(Keyed(torch.zeros(4, 2))), data, _invisible(1))


@pytest.fixture(scope="module")
def trained():
    data = make_blobs(n=300, seed=5)
    train, test = split_data(data, [0.7, 0.3], seed=0)
    model = train_classifier(ModelSpec("mlp", 2), train, TrainConfig(epochs=5, learning_rate=0.05))
    return model, train, test


def test_zero_transparency_equals_baseline(trained):
    model, _, test = trained
    trig = Trigger.random(SHAPE, 0, logit_mean=1.0, seed=3)
    assert attack_success_rate(model, test, trig, 0.0) == baseline_target_rate(model, test, 0)


def test_sweep_consistency(trained):
    model, _, test = trained
    trig = Trigger.random(SHAPE, 1, logit_mean=0.5, seed=1)
    assert transparency_sweep(model, test, trig, [1.0]) == [(1.0, attack_success_rate(model, test, trig, 1.0))]
    assert transparency_sweep(model, test, trig, [0.0])[0][1] == baseline_target_rate(model, test, 1)
    with pytest.raises(ValueError):
        transparency_sweep(model, test, trig, [1.2])


def test_evaluation_never_touches_the_target(trained, tmp_path):
    model, _, test = trained
    before_sum, before_ca = parameter_checksum(model), evaluate_accuracy(model, test)
    report = evaluate_targets({"m": model}, test, Trigger.random(SHAPE, 0, seed=2), [0.5, 1.0], {"s": 1})
    assert parameter_checksum(model) == before_sum
    assert evaluate_accuracy(model, test) == before_ca == report.rows[0].clean_accuracy
    report.write(tmp_path)
    payload = json.loads((tmp_path / "attack_report.json").read_text())
    assert payload["rows"][0]["model_id"] == "m" and payload["transparency_grid"] == [0.5, 1.0]
    header = (tmp_path / "attack_report.csv").read_text().splitlines()[0]
    assert header == "model,CA,ASR,baseline,ASR@0.5,ASR@1"


# campaigns --------------------------------------------------------------------------------


def _fake_generate(cls):
    return TriggerArtifact(Trigger.random(SHAPE, cls, seed=cls), {"ensemble_asr": 1.0})


def test_single_class_campaign_matches_single_run():
    result = multi_trigger_campaign(_fake_generate, [1])
    single = _fake_generate(1)
    assert torch.equal(result["artifacts"][1].trigger.pattern, single.trigger.pattern)
    assert result["failures"] == {}


def test_two_class_campaign_has_distinct_artifacts():
    result = multi_trigger_campaign(_fake_generate, [0, 1])
    a, b = result["artifacts"][0], result["artifacts"][1]
    assert a is not b and a.trigger.target_class == 0 and b.trigger.target_class == 1


def test_campaign_keeps_going_after_a_failure():
    def generate(cls):
        if cls == 1:
            raise RuntimeError("no data")
        return _fake_generate(cls)

    result = multi_trigger_campaign(generate, [0, 1, 2])
    assert sorted(result["artifacts"]) == [0, 2]
    assert "RuntimeError" in result["failures"][1]
    with pytest.raises(ConfigurationError):
        multi_trigger_campaign(generate, [0, 0])


def test_three_class_campaign_meets_scheduler_target():
    data = make_blobs(n=450, num_classes=3, seed=7)
    train, val = split_data(data, [0.7, 0.3], seed=0)
    spec = dataset_spec_for(train, 3)
    specs = [ModelSpec("mlp", 3), ModelSpec("small-vgg", 3, width=4)]
    distill = DistillConfig(2, train=TrainConfig(learning_rate=0.02, seed=0))

    def generate(cls):
        artifact, _, _ = generate_natural_trigger(train, val, specs, spec, distill, OptimizerSchedule(max_epochs=15),
                                                  cls, lam=LambdaScheduler(lam=1e-3, up_factor=1.2))
        return artifact

    result = multi_trigger_campaign(generate, [0, 1, 2])
    assert result["failures"] == {}
    for row in result["rows"]:
        assert row["ensemble_asr"] >= 0.99


# universal perturbation baseline ----------------------------------------------------------


def test_uap_zero_steps_is_zero(trained):
    model, train, _ = trained
    delta = uap_baseline(model, train, UapConfig(epsilon=0.1, steps=0, step_size=0.01))
    assert delta.shape == SHAPE and float(delta.abs().max()) == 0.0


@pytest.mark.parametrize("steps", [1, 5, 25])
def test_uap_respects_linf_bound(trained, steps):
    model, train, test = trained
    delta = uap_baseline(model, train, UapConfig(epsilon=0.05, steps=steps, step_size=0.02, target_class=1))
    assert float(delta.abs().max()) <= 0.05 + 1e-7
    assert 0.0 <= perturbation_success_rate(model, test, delta, 1) <= 1.0


def test_uap_config_validation():
    with pytest.raises(ConfigurationError):
        UapConfig(epsilon=0.01, step_size=0.1)
    with pytest.raises(ConfigurationError):
        UapConfig(epsilon=0.0)


def test_report_dict_sorted_rows():
    report = AttackReport(0, "L1", [1.0])
    report.rows = [AttackRow("b", 1, 1, 0), AttackRow("a", 1, 1, 0)]
    assert [r["model_id"] for r in report.to_dict()["rows"]] == ["a", "b"]
