import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from catkd.cam import CamStack
from catkd.errors import ConfigError, IncompatibleStacksError, LabelError, ProvenanceError
from catkd.losses import DistillConfig, cat_loss, catkd_loss, ce_loss, kd_baseline_loss
from catkd.transforms import SubsetPolicy, TransformConfig, binarize_cams, pool_cams


def cfg(**kw):
    t = {k: kw.pop(k) for k in list(kw) if k in ("pool", "norm", "binarize", "subset", "epsilon")}
    return DistillConfig(transform=TransformConfig(**t), **kw)


def randn(*shape, seed=0):
    return torch.randn(*shape, dtype=torch.float64, generator=torch.Generator().manual_seed(seed))


def test_identical_stacks_give_zero():
    a = CamStack(randn(2, 3, 8, 8))
    assert float(cat_loss(a, a, cfg())) == 0.0


def test_one_by_one_example():
    t = CamStack(torch.ones(1, 1, 1, dtype=torch.float64))
    s = CamStack(torch.zeros(1, 1, 1, dtype=torch.float64))
    assert float(cat_loss(t, s, cfg(pool=(1, 1)))) == pytest.approx(1.0, abs=1e-9)


def test_opposite_unit_maps_give_four():
    t = torch.zeros(1, 2, 2, dtype=torch.float64)
    t[0, 0, 0] = 1.0
    loss = cat_loss(CamStack(t), CamStack(-t), cfg())
    assert float(loss) == pytest.approx(4.0, abs=1e-9)


@pytest.mark.parametrize("order", ["l1", "l2"])
def test_matches_scalar_loop_oracle(order):
    t, s = randn(3, 4, 8, 8, seed=1), randn(3, 4, 8, 8, seed=2)
    got = float(cat_loss(CamStack(t), CamStack(s), cfg(norm=order)))
    assert got == pytest.approx(oracles.cat_loss(t.numpy(), s.numpy(), (2, 2), order), abs=1e-10)


def test_uneven_pool_matches_oracle():
    t, s = randn(2, 3, 7, 5, seed=3), randn(2, 3, 7, 5, seed=4)
    got = float(cat_loss(CamStack(t), CamStack(s), cfg(pool=(3, 2))))
    assert got == pytest.approx(oracles.cat_loss(t.numpy(), s.numpy(), (3, 2)), abs=1e-10)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**16), scale=st.floats(0.01, 100))
def test_symmetric_bounded_and_scale_invariant(seed, scale):
    t, s = randn(2, 5, 4, 4, seed=seed), randn(2, 5, 4, 4, seed=seed + 1)
    c = cfg()
    ab = float(cat_loss(CamStack(t), CamStack(s), c))
    ba = float(cat_loss(CamStack(s), CamStack(t), c))
    assert ab == pytest.approx(ba, abs=1e-12)
    assert 0.0 <= ab <= 4.0 + 1e-9
    scaled = float(cat_loss(CamStack(scale * t), CamStack(s), c))
    assert scaled == pytest.approx(ab, abs=1e-6)


def test_unnormalized_loss_not_scale_invariant():
    t, s = randn(1, 2, 4, 4, seed=5), randn(1, 2, 4, 4, seed=6)
    c = cfg(normalize_rule="never")
    assert float(cat_loss(CamStack(3 * t), CamStack(s), c)) != pytest.approx(float(cat_loss(CamStack(t), CamStack(s), c)))


def test_gradient_matches_finite_difference():
    t = randn(1, 2, 4, 4, seed=7)
    s = randn(1, 2, 4, 4, seed=8).requires_grad_(True)
    c = cfg()
    cat_loss(CamStack(t), CamStack(s), c).backward()
    eps = 1e-6
    num = torch.zeros_like(s)
    flat = s.detach().clone().view(-1)
    for i in range(flat.numel()):
        up, dn = flat.clone(), flat.clone()
        up[i] += eps
        dn[i] -= eps
        lu = cat_loss(CamStack(t), CamStack(up.view_as(s)), c)
        ld = cat_loss(CamStack(t), CamStack(dn.view_as(s)), c)
        num.view(-1)[i] = (lu - ld) / (2 * eps)
    torch.testing.assert_close(s.grad, num, atol=1e-6, rtol=1e-4)


def test_zero_student_is_finite_with_finite_gradient():
    t = CamStack(randn(1, 2, 4, 4, seed=9))
    s = torch.zeros(1, 2, 4, 4, dtype=torch.float64, requires_grad=True)
    loss = cat_loss(t, CamStack(s), cfg())
    loss.backward()
    assert torch.isfinite(loss) and bool(torch.isfinite(s.grad).all())
    assert float(loss.detach()) == pytest.approx(1.0, abs=1e-9)


def test_batch_mean_reduction():
    t, s = randn(4, 3, 4, 4, seed=10), randn(4, 3, 4, 4, seed=11)
    c = cfg()
    whole = float(cat_loss(CamStack(t), CamStack(s), c))
    each = [float(cat_loss(CamStack(t[i]), CamStack(s[i]), c)) for i in range(4)]
    assert whole == pytest.approx(sum(each) / 4, abs=1e-12)


def test_shape_mismatch_rejected():
    with pytest.raises(IncompatibleStacksError):
        cat_loss(CamStack(randn(1, 3, 4, 4)), CamStack(randn(1, 4, 4, 4)), cfg())


def test_different_resolutions_meet_after_pooling():
    t, s = randn(1, 3, 8, 8, seed=25), randn(1, 3, 4, 4, seed=26)
    got = float(cat_loss(CamStack(t), CamStack(s), cfg(pool=(2, 2))))
    tp = np.stack([[oracles.adaptive_pool(m, 2, 2) for m in row] for row in t.numpy()])
    sp = np.stack([[oracles.adaptive_pool(m, 2, 2) for m in row] for row in s.numpy()])
    assert got == pytest.approx(oracles.cat_loss(tp, sp), abs=1e-10)


def test_differently_transformed_inputs_rejected():
    t = pool_cams(CamStack(randn(1, 3, 8, 8)), (4, 4))
    s = CamStack(randn(1, 3, 8, 8))
    with pytest.raises(ProvenanceError):
        cat_loss(t, s, cfg(pool=(2, 2)))


def test_binarized_student_rejected():
    s = binarize_cams(pool_cams(CamStack(randn(1, 3, 8, 8)), (2, 2)))
    with pytest.raises(IncompatibleStacksError):
        cat_loss(CamStack(randn(1, 3, 8, 8)), s, cfg())


def test_binarized_teacher_path():
    t, s = randn(2, 3, 8, 8, seed=12), randn(2, 3, 8, 8, seed=13)
    got = float(cat_loss(CamStack(t), CamStack(s), cfg(binarize=True)))
    tp = np.stack([[oracles.adaptive_pool(m, 2, 2) for m in row] for row in t.numpy()])
    tb = (tp >= tp.mean(axis=(-2, -1), keepdims=True)).astype(float)
    expect = oracles.cat_loss(tb, s.numpy(), (2, 2))
    assert got == pytest.approx(expect, abs=1e-10)


def test_subset_uses_selected_categories_only():
    t, s = randn(2, 5, 4, 4, seed=14), randn(2, 5, 4, 4, seed=15)
    logits = torch.tensor([[5.0, 4.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0, 1.0, 2.0]])
    got = float(cat_loss(CamStack(t), CamStack(s), cfg(subset=SubsetPolicy("top", 2)), teacher_logits=logits))
    expect = 0.0
    for b, idx in enumerate([[0, 1], [3, 4]]):
        expect += oracles.cat_loss(t[b:b + 1, idx].numpy(), s[b:b + 1, idx].numpy())
    assert got == pytest.approx(expect / 2, abs=1e-10)
    with pytest.raises(ConfigError):
        cat_loss(CamStack(t), CamStack(s), cfg(subset=SubsetPolicy("top", 2)))


def test_normalize_rule_resolution():
    c = cfg(normalize_rule="auto")
    with pytest.raises(ConfigError):
        c.norm_order
    assert c.resolve("resnet-cifar", "wrn-style").norm_order == "l2"
    assert c.resolve("tiny-cnn", "tiny-cnn").norm_order == "none"


def test_ce_examples_and_oracle():
    assert float(ce_loss(torch.zeros(1, 4), torch.tensor([2]))) == pytest.approx(np.log(4), abs=1e-6)
    logits = randn(6, 5, seed=16)
    labels = torch.tensor([0, 1, 2, 3, 4, 0])
    assert float(ce_loss(logits, labels)) == pytest.approx(oracles.cross_entropy(logits.tolist(), labels.tolist()), abs=1e-10)
    with pytest.raises(LabelError):
        ce_loss(torch.zeros(1, 4), torch.tensor([4]))


def test_catkd_beta_zero_is_ce():
    logits, labels = randn(3, 4, seed=17), torch.tensor([0, 1, 2])
    t, s = CamStack(randn(3, 4, 4, 4, seed=18)), CamStack(randn(3, 4, 4, 4, seed=19))
    assert torch.equal(catkd_loss(logits, labels, t, s, cfg(beta=0.0)), ce_loss(logits, labels))


@settings(max_examples=20, deadline=None)
@given(beta=st.floats(0, 1000))
def test_catkd_affine_in_beta(beta):
    logits, labels = randn(3, 4, seed=20), torch.tensor([0, 1, 2])
    t, s = CamStack(randn(3, 4, 4, 4, seed=21)), CamStack(randn(3, 4, 4, 4, seed=22))
    total, ce, cat = catkd_loss(logits, labels, t, s, cfg(beta=beta), return_parts=True)
    assert float(total) == pytest.approx(float(ce) + beta * float(cat), rel=1e-9, abs=1e-9)


def test_negative_beta_rejected():
    with pytest.raises(ConfigError):
        DistillConfig(beta=-1.0)


def test_kd_baseline_matches_oracle():
    s, t = randn(4, 6, seed=23), randn(4, 6, seed=24)
    labels = torch.tensor([0, 2, 4, 5])
    got = float(kd_baseline_loss(s, t, labels, 4.0, 0.9))
    assert got == pytest.approx(oracles.kd_loss(s.tolist(), t.tolist(), labels.tolist(), 4.0, 0.9), abs=1e-9)
    same = float(kd_baseline_loss(s, s, labels, 4.0, 0.9))
    assert same == pytest.approx(float(ce_loss(s, labels)), abs=1e-9)
