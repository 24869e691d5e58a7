import pytest
import torch

from natbackdoor.data import DatasetSpec, LabeledData, load_dataset, load_digits_images, make_blobs, split_data
from natbackdoor.errors import ConfigurationError


def test_blobs_are_bounded_balanced_images():
    data = make_blobs(n=101, num_classes=3, shape=(2, 3, 3), seed=5)
    assert data.x.shape == (101, 2, 3, 3)
    assert float(data.x.min()) >= 0.0 and float(data.x.max()) <= 1.0
    counts = torch.bincount(data.y)
    assert counts.max() - counts.min() <= 1


def test_blobs_are_seeded():
    a, b = make_blobs(seed=9), make_blobs(seed=9)
    assert torch.equal(a.x, b.x) and torch.equal(a.y, b.y)
    assert not torch.equal(a.x, make_blobs(seed=10).x)


def test_digits_class_subset_is_relabelled():
    data = load_digits_images(classes=[3, 8], image_size=16)
    assert data.x.shape[1:] == (1, 16, 16)
    assert set(data.y.tolist()) == {0, 1}
    assert float(data.x.min()) >= 0.0 and float(data.x.max()) <= 1.0


def test_split_data_partitions_every_example():
    data = make_blobs(n=50, seed=0)
    parts = split_data(data, [0.6, 0.2, 0.2], seed=1)
    assert [len(p) for p in parts] == [30, 10, 10]
    rows = torch.cat([p.x.flatten(1) for p in parts])
    assert torch.equal(rows.sort(dim=0).values, data.x.flatten(1).sort(dim=0).values)


def test_load_dataset_normalizes_from_train_split():
    splits = load_dataset("digits", seed=0, classes=[3, 8])
    assert splits.spec.num_classes == 2
    assert splits.spec.split_sizes == {"train": len(splits.train), "val": len(splits.val),
                                       "test": len(splits.test)}
    assert splits.spec.mean[0] == pytest.approx(float(splits.train.x.mean()), abs=1e-6)


def test_load_dataset_errors():
    with pytest.raises(ConfigurationError):
        load_dataset("imagenet")
    with pytest.raises(ConfigurationError):
        load_dataset("cifar10")
    with pytest.raises(ConfigurationError):
        load_dataset("blobs", val_fraction=0.5, test_fraction=0.5)


def test_dataset_spec_validation_and_round_trip():
    spec = DatasetSpec("x", 3, (1, 4, 4), {"train": 10}, (0.5,), (0.2,))
    assert DatasetSpec.from_dict(spec.to_dict()) == spec
    with pytest.raises(ConfigurationError):
        DatasetSpec("x", 1, (1, 4, 4), mean=(0.5,), std=(0.2,))
    with pytest.raises(ConfigurationError):
        DatasetSpec("x", 2, (1, 4, 4), {"val": 0}, (0.5,), (0.2,))
    with pytest.raises(ConfigurationError):
        DatasetSpec("x", 2, (3, 4, 4), mean=(0.5,), std=(0.2,))


def test_labeled_data_helpers():
    data = make_blobs(n=20, seed=0)
    assert set(data.without_class(0).y.tolist()) == {1}
    assert set(data.of_class(0).y.tolist()) == {0}
    with pytest.raises(ConfigurationError):
        LabeledData(torch.zeros(3, 1, 2, 2), torch.zeros(2, dtype=torch.long))
