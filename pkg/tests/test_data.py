import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from catkd.data import (
    DatasetSpec,
    LabelFreeView,
    augment,
    heldout_classes,
    iterate,
    load,
    poison_labels,
    ratio_index,
    reduce_classes,
)
from catkd.errors import ConfigError, DataMissingError, PolicyError


def test_synthetic_counts_balanced():
    ds = load(DatasetSpec(num_classes=10, per_class=100))
    assert len(ds) == 1000
    assert ds.class_counts().tolist() == [100] * 10
    assert ds.images.shape == (1000, 3, 32, 32)
    assert int(ds.labels.min()) == 0 and int(ds.labels.max()) == 9


def test_ratio_one_is_full_split():
    full = load(DatasetSpec(num_classes=5, per_class=20))
    same = load(DatasetSpec(num_classes=5, per_class=20, ratio=1.0))
    assert torch.equal(full.images, same.images)


def test_ratio_half_keeps_first_half_of_every_class():
    spec = DatasetSpec(num_classes=10, per_class=500, image_size=8)
    full = load(spec)
    half = load(DatasetSpec(num_classes=10, per_class=500, image_size=8, ratio=0.5))
    assert half.class_counts().tolist() == [250] * 10
    for c in range(10):
        first = full.ids[full.labels == c][:250]
        assert torch.equal(half.ids[half.labels == c], first)


@settings(max_examples=40, deadline=None)
@given(ratio=st.floats(0.01, 1.0), counts=st.lists(st.integers(1, 40), min_size=2, max_size=6))
def test_ratio_index_floor_rule(ratio, counts):
    labels = torch.cat([torch.full((n,), c) for c, n in enumerate(counts)])
    labels = labels[torch.randperm(len(labels), generator=torch.Generator().manual_seed(0))]
    keep = ratio_index(labels, len(counts), ratio)
    kept = torch.bincount(labels[keep], minlength=len(counts)).tolist()
    assert kept == [max(1, math.floor(ratio * n + 1e-9)) for n in counts]
    assert torch.equal(keep, torch.sort(keep).values)


def test_missing_cifar_raises_with_instructions(tmp_path):
    with pytest.raises(DataMissingError, match="nothing is downloaded"):
        load(DatasetSpec(name="cifar10", root=str(tmp_path)))
    assert not any(tmp_path.iterdir())


def test_reduce_classes():
    spec = DatasetSpec(num_classes=10, per_class=10, image_size=8)
    assert reduce_classes(spec, 10) == spec
    train = load(reduce_classes(spec, 6))
    assert set(train.labels.tolist()) == set(range(6))
    s = load(heldout_classes(DatasetSpec(num_classes=10, per_class=10, image_size=8, split="test"), 6))
    assert set(s.labels.tolist()) == {6, 7, 8, 9}
    with pytest.raises(PolicyError):
        reduce_classes(spec, 0)
    with pytest.raises(PolicyError):
        reduce_classes(spec, 11)


def test_reduce_classes_on_hundred_categories():
    spec = DatasetSpec(num_classes=100, per_class=2, image_size=8)
    assert set(load(reduce_classes(spec, 60)).labels.tolist()) == set(range(60))
    assert heldout_classes(spec, 60).class_subset == tuple(range(60, 100))


def test_subset_and_ratio_compose():
    a = load(DatasetSpec(num_classes=10, per_class=20, image_size=8, class_subset=(1, 3), ratio=0.5))
    b = load(DatasetSpec(num_classes=10, per_class=20, image_size=8, class_subset=(1, 3), ratio=0.5))
    assert a.class_counts().tolist() == [0, 10, 0, 10, 0, 0, 0, 0, 0, 0]
    assert torch.equal(a.ids, b.ids) and torch.equal(a.images, b.images)


def test_train_and_test_splits_differ_but_share_classes():
    tr = load(DatasetSpec(num_classes=4, per_class=5, image_size=8))
    te = load(DatasetSpec(num_classes=4, per_class=5, image_size=8, split="test"))
    assert not torch.equal(tr.images, te.images)
    assert tr.labels.tolist() == te.labels.tolist()


def test_seed_changes_samples():
    a = load(DatasetSpec(num_classes=4, per_class=5, image_size=8, seed=0))
    b = load(DatasetSpec(num_classes=4, per_class=5, image_size=8, seed=1))
    assert not torch.equal(a.images, b.images)


def test_batch_order_is_seed_determined():
    a = [b.tolist() for b in iterate(50, 8, torch.Generator().manual_seed(3))]
    b = [b.tolist() for b in iterate(50, 8, torch.Generator().manual_seed(3))]
    assert a == b
    assert sorted(sum(a, [])) == list(range(50))


def test_augment_is_generator_driven_and_shape_preserving():
    x = torch.randn(6, 3, 8, 8)
    a = augment(x, torch.Generator().manual_seed(0))
    b = augment(x, torch.Generator().manual_seed(0))
    assert torch.equal(a, b) and a.shape == x.shape


def test_poison_permutes_labels_only():
    ds = load(DatasetSpec(num_classes=5, per_class=10, image_size=8))
    bad = poison_labels(ds, seed=1)
    assert torch.equal(bad.images, ds.images)
    assert sorted(bad.labels.tolist()) == sorted(ds.labels.tolist())
    assert not torch.equal(bad.labels, ds.labels)


def test_label_free_view_hides_labels():
    view = LabelFreeView(load(DatasetSpec(num_classes=3, per_class=2, image_size=8)))
    assert len(view) == 6
    assert not hasattr(view, "labels")


def test_bad_spec_rejected():
    with pytest.raises(ConfigError):
        DatasetSpec(ratio=0.0)
    with pytest.raises(ConfigError):
        DatasetSpec(name="mnist")
    with pytest.raises(ConfigError):
        DatasetSpec(num_classes=3, class_subset=(5,))
