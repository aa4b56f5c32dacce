import math

import numpy as np
import pytest

from csqa import instrument
from csqa import tensor as T
from csqa.errors import ConfigurationError, UsageError
from csqa.mlsqe import (Eca, Mlsqe, MlsqeConfig, StageVectors, branch_loss, build_classifiers,
                        eca_enhance, ensemble_logits, fuse, stage_logits)
from csqa.model import count_calls


def sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x))


def test_eca_zero_kernel_halves_input(rng):
    F = rng.normal(size=(2, 5, 3, 3))
    out = eca_enhance(T.Tensor(F), T.Tensor(np.zeros((1, 1, 3)))).data
    np.testing.assert_allclose(out, F / 2, atol=1e-15)


def test_eca_single_channel_closed_form(rng):
    F = rng.normal(size=(1, 1, 4, 4))
    w = 0.8
    out = eca_enhance(T.Tensor(F), T.Tensor(np.full((1, 1, 1), w))).data
    np.testing.assert_allclose(out, sigmoid(w * F.mean()) * F, atol=1e-12)


def test_eca_gate_is_per_channel_and_positive(rng):
    F = rng.normal(size=(2, 6, 4, 5))
    w = T.Tensor(rng.normal(size=(1, 1, 3)))
    out = eca_enhance(T.Tensor(F), w).data
    ratio = out / F
    np.testing.assert_allclose(ratio, ratio[:, :, :1, :1] * np.ones_like(ratio), rtol=1e-12)
    assert np.all(np.sign(out) == np.sign(F))


def test_eca_uses_zero_padding_over_channels(rng):
    # channel 0 only sees itself and channel 1 through a 3-tap kernel
    F = rng.normal(size=(1, 4, 2, 2))
    w = np.array([[[0.3, -0.5, 0.9]]])
    gap = F.mean(axis=(2, 3))[0]
    gate0 = sigmoid(-0.5 * gap[0] + 0.9 * gap[1])
    out = eca_enhance(T.Tensor(F), T.Tensor(w)).data
    np.testing.assert_allclose(out[0, 0], gate0 * F[0, 0], atol=1e-12)


def test_even_eca_kernel_rejected(rng):
    with pytest.raises(ConfigurationError):
        Eca(rng, kernel=4)
    with pytest.raises(ConfigurationError):
        eca_enhance(T.Tensor(np.ones((1, 2, 2, 2))), T.Tensor(np.ones((1, 1, 2))))


def small_mlsqe(rng):
    cfg = MlsqeConfig(stages_used=3, proj_channels=4, alphas=[0.7, 0.8, 0.9, 1.0])
    return Mlsqe(cfg, [3, 5, 6], rng), cfg


def test_project_stage_scan_oracle(rng):
    m, _ = small_mlsqe(rng)
    F = T.Tensor(rng.normal(size=(2, 5, 4, 4)))
    v = m.project_stage(F, 1).data
    proj = m.proj[1](F).data
    for b in range(2):
        for c in range(4):
            best = -np.inf
            for val in proj[b, c].ravel():
                best = val if val > best else best
            assert v[b, c] == best


def test_project_stage_constant_field(rng):
    m, _ = small_mlsqe(rng)
    m.eval()
    F = T.Tensor(np.full((1, 5, 3, 3), 0.7))
    proj = m.proj[1](F)
    np.testing.assert_allclose(m.project_stage(F, 1).data, T.pool_global(proj, "avg").data, atol=1e-15)


def test_project_stage_range_checked(rng):
    m, _ = small_mlsqe(rng)
    with pytest.raises(UsageError):
        m.project_stage(T.Tensor(np.zeros((1, 5, 2, 2))), 3)


def test_fuse_concatenates_in_order(rng):
    vs = [T.Tensor(rng.normal(size=4)) for _ in range(3)]
    out = fuse(vs, 3).data
    assert out.shape == (12,)
    for k in range(3):
        np.testing.assert_array_equal(out[4 * k:4 * (k + 1)], vs[k].data)
    perm = [2, 0, 1]
    pout = fuse([vs[i] for i in perm], 3).data
    for k, i in enumerate(perm):
        np.testing.assert_array_equal(pout[4 * k:4 * (k + 1)], out[4 * i:4 * (i + 1)])
    with pytest.raises(UsageError):
        fuse(vs[:2], 3)


def test_config_validation():
    with pytest.raises(ConfigurationError):
        MlsqeConfig(alphas=[0.9, 0.8, 0.9, 1.0]).validate()
    with pytest.raises(ConfigurationError):
        MlsqeConfig(stages_used=4, alphas=[0.6, 0.7, 0.8, 0.9, 1.0]).validate(3)
    with pytest.raises(ConfigurationError):
        MlsqeConfig(alphas=[0.7, 1.0]).validate()


def pyramid(rng, b=2):
    return [T.Tensor(rng.normal(size=(b, c, s, s))) for c, s in ((3, 8), (5, 4), (6, 2))]


def test_forward_emits_stage_vectors(rng):
    m, cfg = small_mlsqe(rng)
    sv = m(pyramid(rng))
    assert [v.shape for v in sv.vectors] == [(2, 4)] * 3 and sv.fusion.shape == (2, 12)
    np.testing.assert_array_equal(sv.fusion.data, np.concatenate([v.data for v in sv.vectors], axis=1))


def test_branch_loss_counts_and_degenerate_schedule(rng):
    m, cfg = small_mlsqe(rng)
    qps = build_classifiers(cfg, 5, rng)
    sv = m(pyramid(rng))
    labels = np.array([1, 3])
    (loss, outs), delta = count_calls(branch_loss, sv, labels, qps)
    assert delta == {"qp": 4} and len(outs) == 4
    with pytest.raises(UsageError):
        branch_loss(sv, labels, qps[:3])
    # alpha = 1 everywhere and identical heads: phi = 0, so each stage is sce(=ce) + ce
    cfg1 = MlsqeConfig(alphas=[1.0] * 4, proj_channels=4)
    qps1 = build_classifiers(cfg1, 5, rng)
    for qp in qps1:
        qp.aux.weight.data[...] = qp.main.weight.data
    total, outs = branch_loss(sv, labels, qps1)
    expect = sum(2 * np.mean(-T.log_softmax(o.main_logits).data[np.arange(2), labels]) for o in outs)
    assert total.item() == pytest.approx(expect, abs=1e-12)


def test_supervision_reaches_every_stage(rng):
    m, cfg = small_mlsqe(rng)
    qps = build_classifiers(cfg, 5, rng)
    pyr = pyramid(rng)
    for f in pyr:
        f.requires_grad = True
    loss, _ = branch_loss(m(pyr), np.array([0, 4]), qps)
    T.backward(loss)
    assert all(np.abs(f.grad).sum() > 0 for f in pyr)


def test_loss_invariant_to_batch_permutation(rng):
    m, cfg = small_mlsqe(rng)
    m.eval()
    qps = build_classifiers(cfg, 5, rng)
    pyr = pyramid(rng, b=4)
    labels = np.array([0, 1, 2, 3])
    perm = np.array([2, 0, 3, 1])
    a, _ = branch_loss(m(pyr), labels, qps)
    b, _ = branch_loss(m([T.Tensor(f.data[perm]) for f in pyr]), labels[perm], qps)
    assert a.item() == pytest.approx(b.item(), abs=1e-12)


def test_single_stage_ensemble(rng):
    cfg = MlsqeConfig(stages_used=1, proj_channels=4, alphas=[0.9, 1.0])
    m = Mlsqe(cfg, [3, 5, 6], rng)
    qps = build_classifiers(cfg, 5, rng)
    sv = m(pyramid(rng))
    heads = stage_logits(sv, qps)
    assert len(heads) == 2
    np.testing.assert_array_equal(ensemble_logits(heads).data, heads[0].data + heads[1].data)
    np.testing.assert_array_equal(sv.fusion.data, sv.vectors[0].data)


def test_eca_gradcheck_twenty_points():
    for seed in range(20):
        r = np.random.default_rng(seed)
        F = T.Tensor(r.normal(size=(2, 5, 3, 3)))
        w = T.Tensor(r.normal(size=(1, 1, 3)))
        probe = r.normal(size=(2, 5, 3, 3))
        assert T.gradcheck(lambda F, w: T.tsum(eca_enhance(F, w) * probe), [F, w]) < 1e-4


def test_stage_vectors_all_order(rng):
    vs = [T.Tensor(rng.normal(size=(1, 2))) for _ in range(2)]
    sv = StageVectors(vs, fuse(vs))
    assert sv.all()[:2] == vs and sv.all()[2] is sv.fusion
    instrument.reset()
