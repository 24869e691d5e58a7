import numpy as np
import pytest
import torch
import torch.nn as nn
import torch.nn.functional as F
from hypothesis import given, settings, strategies as st

from natbackdoor.data import DatasetSpec, LabeledData, make_blobs, split_data
from natbackdoor.errors import ArtifactFormatError, ConfigurationError
from natbackdoor.training import (Classifier, TrainConfig, evaluate_accuracy, load_classifier,
                                  parameter_checksum, predict_logits, save_classifier,
                                  train_classifier)
from natbackdoor.zoo import FAMILIES, ModelSpec, build_model, count_parameters


def _dataset(shape=(1, 4, 4), k=2):
    c = shape[0]
    return DatasetSpec("toy", k, shape, mean=(0.0,) * c, std=(1.0,) * c)


def _wrap(net, shape=(1, 4, 4), k=2):
    return Classifier(ModelSpec("mlp", k), net, _dataset(shape, k))


class Lookup(nn.Module):
    """Returns a fixed logit row per input, chosen by the input's first pixel as an index."""

    def __init__(self, table):
        super().__init__()
        self.table = table

    def forward(self, x):
        return self.table[x.flatten(1)[:, 0].long()]


def logistic_oracle(x, y, steps=500, lr=0.5):
    """Plain numpy batch gradient descent on the logistic loss."""
    x = np.hstack([x, np.ones((x.shape[0], 1))])
    w = np.zeros(x.shape[1])
    for _ in range(steps):
        p = 1 / (1 + np.exp(-x @ w))
        w -= lr * x.T @ (p - y) / len(y)
    return w


# model zoo --------------------------------------------------------------------------------


@pytest.mark.parametrize("family", FAMILIES)
@pytest.mark.parametrize("shape", [(1, 16, 16), (3, 32, 32)])
def test_every_family_is_desk_sized(family, shape):
    torch.manual_seed(0)
    net = build_model(ModelSpec(family, 10), shape, (0.5,) * shape[0], (0.25,) * shape[0])
    assert count_parameters(net) <= 500_000
    net.eval()
    x = torch.rand(3, *shape)
    assert net(x).shape == (3, 10)
    maps = net.forward_features(x)
    assert maps[-1].shape[1] == net.head.in_features


def test_model_spec_rejects_unknown_family():
    with pytest.raises(ConfigurationError):
        ModelSpec("transformer", 2)


# training ---------------------------------------------------------------------------------


def test_blobs_mlp_matches_logistic_oracle():
    data = make_blobs(n=200, seed=3)
    train, val = split_data(data, [0.7, 0.3], seed=0)
    w = logistic_oracle(train.x.flatten(1).numpy().astype(float), train.y.numpy().astype(float))
    xv = np.hstack([val.x.flatten(1).numpy(), np.ones((len(val), 1))])
    oracle_acc = float(((xv @ w > 0).astype(int) == val.y.numpy()).mean())
    assert oracle_acc > 0.95  # the blobs really are linearly separable

    model = train_classifier(ModelSpec("mlp", 2), train, TrainConfig(epochs=5, seed=0, learning_rate=0.05),
                             val=val)
    assert model.history[-1]["val_accuracy"] > 0.95
    assert evaluate_accuracy(model, val) >= oracle_acc - 0.05


@pytest.mark.parametrize("family", ["mlp", "small-resnet"])
def test_untrained_classifier_is_near_chance(family):
    data = make_blobs(n=200, num_classes=4, seed=1)
    model = train_classifier(ModelSpec(family, 4), data, TrainConfig(epochs=0))
    assert model.history == []
    assert abs(evaluate_accuracy(model, data) - 0.25) <= 0.15


def test_same_seed_gives_identical_parameters():
    data = make_blobs(n=120, seed=2)
    cfg = TrainConfig(epochs=2, seed=7, learning_rate=0.05)
    a = train_classifier(ModelSpec("small-vgg", 2, width=4), data, cfg)
    b = train_classifier(ModelSpec("small-vgg", 2, width=4), data, cfg)
    assert parameter_checksum(a) == parameter_checksum(b)
    assert a.history[-1]["val_accuracy"] == b.history[-1]["val_accuracy"]


def test_train_config_validation():
    with pytest.raises(ConfigurationError):
        TrainConfig(learning_rate=0)
    with pytest.raises(ConfigurationError):
        TrainConfig(loss="hinge")


def test_label_outside_range_is_rejected():
    data = make_blobs(n=20, seed=0)
    bad = LabeledData(data.x, torch.full((20,), 5))
    with pytest.raises(ConfigurationError):
        train_classifier(ModelSpec("mlp", 2), bad, TrainConfig(epochs=1))


def test_two_layer_gradient_matches_central_differences(fp64):
    torch.manual_seed(0)
    net = nn.Sequential(nn.Linear(5, 4), nn.Tanh(), nn.Linear(4, 3))
    x = torch.randn(6, 5)
    y = torch.tensor([0, 1, 2, 0, 1, 2])
    loss = F.cross_entropy(net(x), y)
    grads = torch.autograd.grad(loss, list(net.parameters()))
    h = 1e-6
    with torch.no_grad():
        for p, g in zip(net.parameters(), grads):
            fd = torch.zeros_like(p)
            flat, fd_flat = p.view(-1), fd.view(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + h
                up = F.cross_entropy(net(x), y).item()
                flat[i] = old - h
                down = F.cross_entropy(net(x), y).item()
                flat[i] = old
                fd_flat[i] = (up - down) / (2 * h)
            rel = (fd - g).norm() / max(g.norm().item(), 1e-12)
            assert rel < 1e-3


# evaluation -------------------------------------------------------------------------------


def _indexed_inputs(n):
    x = torch.zeros(n, 1, 4, 4)
    x.view(n, -1)[:, 0] = torch.arange(n, dtype=x.dtype)
    return x


def test_constant_model_scores_one_over_k():
    k, n = 4, 40
    table = torch.tensor([[5.0, 0, 0, 0]]).repeat(n, 1)
    model = _wrap(Lookup(table), k=k)
    data = LabeledData(_indexed_inputs(n), torch.arange(n) % k)
    assert evaluate_accuracy(model, data) == pytest.approx(1 / k)


def test_ground_truth_lookup_scores_one():
    n = 12
    labels = torch.arange(n) % 3
    model = _wrap(Lookup(F.one_hot(labels, 3).float() * 4), k=3)
    assert evaluate_accuracy(model, LabeledData(_indexed_inputs(n), labels)) == 1.0


def test_three_examples_two_correct():
    table = torch.tensor([[2.0, 0.0], [0.0, 2.0], [2.0, 0.0]])
    model = _wrap(Lookup(table))
    data = LabeledData(_indexed_inputs(3), torch.tensor([0, 1, 1]))
    assert evaluate_accuracy(model, data) == pytest.approx(0.6667, abs=1e-4)


def test_accuracy_on_empty_data_is_an_error():
    model = _wrap(Lookup(torch.zeros(1, 2)))
    with pytest.raises(ValueError):
        evaluate_accuracy(model, LabeledData(torch.zeros(0, 1, 4, 4), torch.zeros(0, dtype=torch.long)))


@settings(max_examples=40, deadline=None)
@given(st.integers(min_value=6, max_value=10), st.integers(min_value=5, max_value=60), st.integers(0, 10_000))
def test_accuracy_bounds_and_topk_order(k, n, seed):
    gen = torch.Generator().manual_seed(seed)
    table = torch.randn(n, k, generator=gen)
    labels = torch.randint(0, k, (n,), generator=gen)
    model = _wrap(Lookup(table), k=k)
    data = LabeledData(_indexed_inputs(n), labels)
    top1, top5 = evaluate_accuracy(model, data), evaluate_accuracy(model, data, top=5)
    assert 0.0 <= top1 <= top5 <= 1.0


def test_predict_logits_edge_cases():
    net = nn.Sequential(nn.Flatten(), nn.Linear(16, 3))
    model = _wrap(net, k=3)
    assert predict_logits(model, torch.zeros(0, 1, 4, 4)).shape == (0, 3)
    x = torch.rand(2, 1, 4, 4)
    out = predict_logits(model, torch.cat([x, x[:1]]))
    assert torch.equal(out[0], out[2])
    with pytest.raises(ConfigurationError):
        predict_logits(model, torch.zeros(1, 1, 5, 5))


def test_predict_logits_fixed_dense_head_by_hand():
    lin = nn.Linear(4, 2)
    with torch.no_grad():
        lin.weight.copy_(torch.tensor([[1.0, 2.0, 0.0, -1.0], [0.5, 0.0, 3.0, 0.0]]))
        lin.bias.copy_(torch.tensor([0.1, -0.2]))
    model = _wrap(nn.Sequential(nn.Flatten(), lin), shape=(1, 2, 2))
    one_hot_inputs = torch.eye(4).view(4, 1, 2, 2)
    expected = torch.tensor([[1.1, 0.3], [2.1, -0.2], [0.1, 2.8], [-0.9, -0.2]])
    assert torch.allclose(predict_logits(model, one_hot_inputs), expected, atol=1e-6)


def test_classifier_checkpoint_round_trip(tmp_path):
    data = make_blobs(n=60, seed=4)
    model = train_classifier(ModelSpec("small-shufflenet", 2, width=4), data, TrainConfig(epochs=1))
    path = save_classifier(model, tmp_path / "m.npz")
    loaded = load_classifier(path)
    assert parameter_checksum(loaded) == parameter_checksum(model)
    assert torch.equal(predict_logits(loaded, data.x), predict_logits(model, data.x))
    assert loaded.history == model.history

    np.savez(tmp_path / "bare.npz", w=np.zeros(3))
    with pytest.raises(ArtifactFormatError):
        load_classifier(tmp_path / "bare.npz")

