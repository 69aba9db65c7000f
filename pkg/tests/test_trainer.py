import copy

import pytest
import torch

from catkd.backbones import BackboneSpec
from catkd.data import DatasetSpec, LabelFreeView, load, poison_labels
from catkd.errors import ConfigError, DivergenceError
from catkd.losses import DistillConfig, cat_loss
from catkd.models import build_model
from catkd.persistence import read_metrics
from catkd.trainer import (
    TrainSchedule,
    evaluate,
    linear_probe,
    train_cat,
    train_catkd,
    train_ce,
    train_kd,
)

SPEC = BackboneSpec("tiny-cnn", 3, 8)
K = 4


def small(split="train", per_class=30, **kw):
    return load(DatasetSpec(num_classes=K, per_class=per_class, split=split, **kw))


@pytest.fixture(scope="module")
def data():
    return small(), small("test", 20)


@pytest.fixture(scope="module")
def teacher(data):
    train, test = data
    model = build_model(SPEC, K, seed=0)
    train_ce(model, train, TrainSchedule(8, 32, 0.05, milestones=(6,)), {"test": test})
    return model


def state(model):
    return {k: v.clone() for k, v in model.state_dict().items()}


def same_state(a, b):
    return a.keys() == b.keys() and all(torch.equal(a[k], b[k]) for k in a)


def test_zero_lr_leaves_parameters_unchanged(data):
    model = build_model(SPEC, K, seed=1)
    before = state(model)
    train_ce(model, data[0], TrainSchedule(1, 32, 0.0, weight_decay=0.0))
    after = state(model)
    for k in before:
        if "running" in k or "num_batches" in k:  # BN statistics still update
            continue
        assert torch.equal(before[k], after[k]), k


def test_same_seed_same_stream(data):
    runs = []
    for _ in range(2):
        model = build_model(SPEC, K, seed=2)
        _, rec = train_ce(model, data[0], TrainSchedule(2, 32, 0.05, seed=5), {"test": data[1]})
        runs.append([r.comparable() for r in rec])
    assert runs[0] == runs[1]


def test_ce_learns_and_loss_decreases(data, teacher):
    acc, _ = evaluate(teacher, data[1])
    assert acc > 60.0
    model = build_model(SPEC, K, seed=3)
    _, rec = train_ce(model, data[0], TrainSchedule(3, 32, 0.05))
    losses = [r.total for r in rec if r.split == "train"]
    assert losses[-1] < losses[0]


def test_beta_zero_matches_ce(data, teacher):
    sched = TrainSchedule(2, 32, 0.05, seed=4)
    a = build_model(SPEC, K, seed=5).convert()
    b = build_model(SPEC, K, seed=5)
    _, ce_rec = train_ce(a, data[0], sched, {"test": data[1]})
    _, kd_rec = train_catkd(teacher, b, data[0], sched, DistillConfig(beta=0.0), {"test": data[1]})
    key = lambda r: (r.epoch, r.split, r.ce, r.total, r.top1)  # noqa: E731
    assert [key(r) for r in ce_rec] == [key(r) for r in kd_rec]
    assert same_state(a.state_dict(), b.state_dict())


def test_teacher_untouched_by_distillation(data, teacher):
    before = state(teacher)
    sched = TrainSchedule(1, 32, 0.05)
    train_catkd(teacher, build_model(SPEC, K, seed=6), data[0], sched, DistillConfig(beta=10.0))
    train_cat(teacher, build_model(SPEC, K, seed=6), data[0], sched, DistillConfig())
    train_kd(teacher, build_model(SPEC, K, seed=6), data[0], sched, DistillConfig())
    assert same_state(before, state(teacher))
    assert not teacher.converted


def test_self_distillation_fixed_point(data, teacher):
    student = copy.deepcopy(teacher).convert().eval()
    t = copy.deepcopy(teacher).convert().eval()
    x = data[0].images[:32]
    with torch.no_grad():
        tl, tc = t.forward_cams(x)
        _, sc = student.forward_cams(x)
    assert float(cat_loss(tc, sc, DistillConfig(), tl)) == 0.0

    fresh = build_model(SPEC, K, seed=7)
    sched = TrainSchedule(2, 32, 0.01)
    _, self_rec = train_cat(teacher, copy.deepcopy(teacher), data[0], sched, DistillConfig())
    _, fresh_rec = train_cat(teacher, fresh, data[0], sched, DistillConfig())
    self_cat = [r.cat for r in self_rec if r.split == "train"]
    fresh_cat = [r.cat for r in fresh_rec if r.split == "train"]
    # train-mode batch statistics keep it from being exactly zero
    assert max(self_cat) < 0.1 * fresh_cat[0]


def test_pure_cat_ignores_labels(data, teacher):
    sched = TrainSchedule(2, 32, 0.05, seed=8)
    streams = []
    for ds in (data[0], poison_labels(data[0], seed=3)):
        student = build_model(SPEC, K, seed=9)
        _, rec = train_cat(teacher, student, ds, sched, DistillConfig(), {"test": data[1]})
        streams.append([r.comparable() for r in rec])
    assert streams[0] == streams[1]


def test_pure_cat_accepts_label_free_view(data, teacher):
    student, rec = train_cat(teacher, build_model(SPEC, K, seed=10), LabelFreeView(data[0]),
                             TrainSchedule(1, 32, 0.05), DistillConfig())
    assert rec[-1].cat is not None


def test_pure_cat_requires_normalization(data, teacher):
    with pytest.raises(ConfigError):
        train_cat(teacher, build_model(SPEC, K), data[0], TrainSchedule(1), DistillConfig(normalize_rule="never"))


def test_unresolved_auto_rule_rejected(data, teacher):
    with pytest.raises(ConfigError):
        train_catkd(teacher, build_model(SPEC, K), data[0], TrainSchedule(1), DistillConfig(normalize_rule="auto"))


def test_teacher_cache_matches_online_without_augmentation(data, teacher):
    sched = TrainSchedule(1, 32, 0.05, seed=11)
    streams = []
    for cache in (False, True):
        _, rec = train_catkd(teacher, build_model(SPEC, K, seed=12), data[0], sched,
                             DistillConfig(beta=10.0), cache_teacher=cache)
        streams.append([r.comparable() for r in rec])
    assert streams[0] == streams[1]


def test_divergence_aborts_with_records(data, tmp_path):
    model = build_model(SPEC, K, seed=13)
    with pytest.raises(DivergenceError) as exc:
        train_ce(model, data[0], TrainSchedule(3, 32, 1e6, momentum=0.0), run_dir=tmp_path)
    assert isinstance(exc.value.records, list)
    assert (tmp_path / "metrics.tsv").exists()


def test_checkpoints_and_metrics_written(data, tmp_path):
    model = build_model(SPEC, K, seed=14)
    _, rec = train_ce(model, data[0], TrainSchedule(2, 32, 0.05), {"test": data[1]}, run_dir=tmp_path)
    assert (tmp_path / "best.pt").exists() and (tmp_path / "last.pt").exists()
    assert [r.comparable() for r in read_metrics(tmp_path / "metrics.tsv")] == [r.comparable() for r in rec]


def test_zero_epoch_probe_is_chance(data, teacher):
    acc, _, _ = linear_probe(teacher, data[0], data[1], TrainSchedule(0, 32, 0.1))
    assert acc == pytest.approx(100.0 / K)


def test_probe_prefers_trained_extractor(data, teacher):
    sched = TrainSchedule(20, 32, 0.1, weight_decay=0.0, milestones=(10,))
    trained, _, _ = linear_probe(teacher, data[0], data[1], sched)
    random_acc, _, _ = linear_probe(build_model(SPEC, K, seed=15), data[0], data[1], sched)
    assert trained > random_acc


def test_self_probe_close_to_own_head(data, teacher):
    own = evaluate(teacher, data[1])[0]
    probed, head, _ = linear_probe(teacher, data[0], data[1], TrainSchedule(40, 32, 0.1, weight_decay=0.0,
                                                                               milestones=(10, 20, 30)))
    assert head.weight.shape == (K, teacher.backbone.out_channels)
    assert abs(probed - own) <= 2.0 + 1e-9
