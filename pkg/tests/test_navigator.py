import itertools
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from csqa import kernels, nn
from csqa import tensor as T
from csqa.errors import ConfigurationError, DegenerateBoxWarning, DimensionError, ShortfallWarning
from csqa.navigator import (NavigatorConfig, PartNavigator, SaeBlock, anchor_boxes, crop_resize, nms_top_n,
                            ranking_loss, read_proposals, sae, sae_chain, write_proposals)


def iou(a, b):
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def nms_reference(boxes, scores, thresh, n):
    """Quadratic greedy NMS: scan candidates best-first, keep those clear of every kept box."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    keep = []
    for i in order:
        if len(keep) == n:
            break
        if all(iou(boxes[i], boxes[k]) <= thresh for k in keep):
            keep.append(i)
    return keep


def random_boxes(r, n, size=64.0):
    xy = r.uniform(0, size * 0.8, size=(n, 2))
    wh = r.uniform(2.0, size * 0.5, size=(n, 2))
    return np.concatenate([xy, np.minimum(xy + wh, size)], axis=1)


def test_nms_full_overlap():
    boxes = np.array([[0, 0, 10, 10], [0, 0, 10, 10]], dtype=float)
    props = nms_top_n([0.3, 0.9], boxes, 0.5, 1)
    assert [p.anchor_index for p in props] == [1]


def test_nms_disjoint_is_top_n():
    boxes = np.array([[10 * i, 0, 10 * i + 5, 5] for i in range(6)], dtype=float)
    scores = [0.1, 0.7, 0.3, 0.9, 0.5, 0.2]
    assert [p.anchor_index for p in nms_top_n(scores, boxes, 0.1, 3)] == [3, 1, 4]


def test_nms_matches_reference_200(backend):
    r = np.random.default_rng(5)
    for _ in range(50):
        boxes = random_boxes(r, 200)
        scores = r.normal(size=200)
        got = [p.anchor_index for p in nms_top_n(scores, boxes, 0.25, 4)]
        assert got == nms_reference(boxes, scores, 0.25, 4)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 40), st.floats(0.05, 0.9), st.integers(0, 2 ** 31 - 1), st.booleans())
def test_nms_properties(n, thresh, seed, ties):
    r = np.random.default_rng(seed)
    boxes = random_boxes(r, n)
    scores = np.round(r.random(n), 1) if ties else r.random(n)
    previous = kernels.BACKEND
    for name in kernels.BACKENDS:
        kernels.use_backend(name)
        try:
            keep = list(kernels.nms(boxes, scores, thresh, -1))
        finally:
            kernels.use_backend(previous)
        assert keep == nms_reference(boxes, scores, thresh, n)
        assert all(scores[a] >= scores[b] for a, b in zip(keep, keep[1:]))
        assert all(iou(boxes[a], boxes[b]) <= thresh for a, b in itertools.combinations(keep, 2))


def test_nms_shortfall_warns_with_count():
    boxes = np.array([[0, 0, 10, 10]] * 3, dtype=float)
    with pytest.warns(ShortfallWarning) as rec:
        props = nms_top_n([0.1, 0.2, 0.3], boxes, 0.5, 2)
    assert len(props) == 1 and rec[0].message.count == 1


def test_anchor_counts_and_examples():
    assert len(anchor_boxes([14, 7, 4], [48, 96, 192], 448)) == 261
    a = anchor_boxes([14, 7, 4], [48, 96, 192], 448)
    # level 2, cell (0, 0): centre 32 = 0.5 * 448 / 7, side 96, clipped at 0
    np.testing.assert_allclose(a[196], [0.0, 0.0, 80.0, 80.0])
    assert np.all(a >= 0) and np.all(a <= 448)
    assert np.all(a[:, 2] > a[:, 0]) and np.all(a[:, 3] > a[:, 1])


def test_anchor_flattening_is_row_major():
    a = anchor_boxes([3], [10], 30)
    centres = (a[:, :2] + a[:, 2:]) / 2
    for k, (row, col) in enumerate(itertools.product(range(3), range(3))):
        np.testing.assert_allclose(centres[k], [col * 10 + 5, row * 10 + 5])


def zero_sae_block(rng, c):
    blk = SaeBlock(rng, c)
    blk.omega.weight.data[...] = 0.0
    blk.omega.bias.data[...] = 0.0
    return blk


def test_sae_zero_gate_is_identity(rng):
    blk = zero_sae_block(rng, 4)
    a, b = T.Tensor(rng.normal(size=(2, 4, 8, 8))), T.Tensor(rng.normal(size=(2, 4, 4, 4)))
    a2, b2, gate = sae(a, b, blk.omega, blk.psi)
    assert np.all(gate.data == 0.0)
    np.testing.assert_array_equal(a2.data, a.data)
    np.testing.assert_array_equal(b2.data, b.data)


def test_sae_reconstruction(rng):
    blk = SaeBlock(rng, 4)
    a, b = T.Tensor(rng.normal(size=(2, 4, 8, 8))), T.Tensor(rng.normal(size=(2, 4, 4, 4)))
    a2, b2, gate = sae(a, b, blk.omega, blk.psi)
    np.testing.assert_array_equal(a.data - a2.data, a.data - (a.data - gate.data))
    np.testing.assert_allclose(a.data - a2.data, gate.data, atol=1e-15)
    np.testing.assert_allclose(b2.data - b.data, blk.psi(gate).data, atol=1e-14)
    with pytest.raises(DimensionError):
        sae(a, T.Tensor(rng.normal(size=(2, 3, 4, 4))), blk.omega, blk.psi)


def test_sae_chain_reuses_updated_level(rng):
    blocks = [SaeBlock(rng, 3), SaeBlock(rng, 3)]
    levels = [T.Tensor(rng.normal(size=(1, 3, s, s))) for s in (8, 4, 2)]
    out = sae_chain(levels, blocks)
    f1, f2, _ = sae(levels[0], levels[1], blocks[0].omega, blocks[0].psi)
    f2b, f3, _ = sae(f2, levels[2], blocks[1].omega, blocks[1].psi)
    for got, want in zip(out, (f1, f2b, f3)):
        np.testing.assert_array_equal(got.data, want.data)


def test_sae_chain_with_zero_gates_is_plain_pyramid(rng):
    blocks = [zero_sae_block(rng, 3), zero_sae_block(rng, 3)]
    for blk in blocks:
        blk.psi.bias.data[...] = 0.0
    levels = [T.Tensor(rng.normal(size=(1, 3, s, s))) for s in (8, 4, 2)]
    for got, want in zip(sae_chain(levels, blocks), levels):
        np.testing.assert_array_equal(got.data, want.data)


def test_sae_gradcheck_twenty_points():
    for seed in range(20):
        r = np.random.default_rng(seed)
        blk = SaeBlock(r, 2)
        a, b = T.Tensor(r.normal(size=(1, 2, 4, 4))), T.Tensor(r.normal(size=(1, 2, 2, 2)))
        pa, pb = r.normal(size=(1, 2, 4, 4)), r.normal(size=(1, 2, 2, 2))
        params = [blk.omega.weight, blk.omega.bias, blk.psi.weight]

        def fn(a, b, *_):
            a2, b2, _ = sae(a, b, blk.omega, blk.psi)
            return T.tsum(a2 * pa) + T.tsum(b2 * pb)

        assert T.gradcheck(fn, [a, b] + params) < 1e-4


def make_navigator(rng, channels=4, resolution=64, **kw):
    cfg = NavigatorConfig(**kw)
    return PartNavigator(cfg, channels, resolution, rng)


def test_pyramid_extents(rng):
    nav = make_navigator(rng, grids=[8, 4, 2], anchor_scales=[16, 32, 48])
    levels = nav.build_pyramid(T.Tensor(rng.normal(size=(1, 4, 8, 8))))
    assert [f.shape[2:] for f in levels] == [(8, 8), (4, 4), (2, 2)]
    assert all(f.shape[1] == 4 for f in levels)
    nav = make_navigator(rng, grids=[14, 7, 4], anchor_scales=[48, 96, 192], resolution=448)
    levels = nav.build_pyramid(T.Tensor(rng.normal(size=(1, 4, 14, 14))))
    assert [f.shape[2] for f in levels] == [14, 7, 4]


def test_pyramid_underflow_is_configuration_error(rng):
    nav = make_navigator(rng)
    with pytest.raises(ConfigurationError):
        nav.build_pyramid(T.Tensor(rng.normal(size=(1, 4, 2, 2))))
    with pytest.raises(ConfigurationError):
        nav.build_pyramid(T.Tensor(rng.normal(size=(1, 4, 8, 8))))


def test_config_validation():
    with pytest.raises(ConfigurationError):
        NavigatorConfig(levels=2).validate()
    with pytest.raises(ConfigurationError):
        NavigatorConfig(parts=22).validate()
    with pytest.raises(ConfigurationError):
        NavigatorConfig(iou_threshold=1.0).validate()


def test_forward_selects_n_sorted_proposals(rng):
    nav = make_navigator(rng)
    scores, props, idx = nav(T.Tensor(rng.normal(size=(3, 4, 4, 4))))
    assert scores.shape == (3, nav.num_anchors) == (3, 21)
    assert idx.shape == (3, 4)
    for row, ps in zip(scores.data, props):
        vals = [p.score for p in ps]
        assert vals == sorted(vals, reverse=True)
        assert all(row[p.anchor_index] == p.score for p in ps)
        for p in ps:
            x0, y0, x1, y1 = p.box
            assert 0 <= x0 < x1 <= 64 and 0 <= y0 < y1 <= 64


def test_crop_full_image_is_half_downsample(rng):
    img = rng.random((1, 3, 8, 8))
    out = crop_resize(T.Tensor(img), np.array([[[0.0, 0.0, 8.0, 8.0]]])).data
    expect = img.reshape(1, 3, 4, 2, 4, 2).mean(axis=(3, 5))
    np.testing.assert_allclose(out, expect, atol=1e-14)


@settings(max_examples=60, deadline=None)
@given(st.floats(0, 50), st.floats(0, 50), st.floats(4, 60), st.floats(4, 60), st.booleans())
def test_crop_preserves_ramp_monotonicity(x0, y0, w, h, horizontal):
    ramp = np.arange(64, dtype=float)
    img = np.broadcast_to(ramp[None, :] if horizontal else ramp[:, None], (64, 64))
    img = np.broadcast_to(img, (1, 3, 64, 64)).copy()
    box = np.array([[[x0, y0, min(x0 + w, 64), min(y0 + h, 64)]]])
    out = crop_resize(T.Tensor(img), box).data[0, 0]
    diffs = np.diff(out, axis=1 if horizontal else 0)
    assert np.all(diffs >= -1e-12)


def test_crop_batch_layout_part_index_fastest(rng):
    img = rng.random((2, 3, 16, 16))
    boxes = np.array([[[0, 0, 8, 8], [8, 8, 16, 16]], [[0, 8, 8, 16], [4, 4, 12, 12]]], dtype=float)
    out = crop_resize(T.Tensor(img), boxes).data
    assert out.shape == (4, 3, 8, 8)
    np.testing.assert_allclose(out[1], img[0, :, 8:16, 8:16], atol=1e-14)
    np.testing.assert_allclose(out[2], img[1, :, 8:16, 0:8], atol=1e-14)


def test_crop_degenerate_box_widened(rng):
    img = T.Tensor(rng.random((1, 3, 16, 16)))
    with pytest.warns(DegenerateBoxWarning):
        out = crop_resize(img, np.array([[[5.0, 5.0, 5.0, 9.0]]]))
    assert np.all(np.isfinite(out.data))


def test_crop_is_differentiable_in_pixels(rng):
    img = T.Tensor(rng.random((1, 2, 8, 8)))
    boxes = np.array([[[1.3, 0.7, 6.1, 7.9]]])
    probe = rng.normal(size=(1, 2, 4, 4))
    assert T.gradcheck(lambda im: T.tsum(crop_resize(im, boxes) * probe), [img]) < 1e-8


def test_ranking_loss_examples():
    assert ranking_loss(T.Tensor([3.0, 1.5, 0.0]), [0.9, 0.5, 0.1]).item() == 0.0
    assert ranking_loss(T.Tensor([0.2, 0.2]), [0.7, 0.3]).item() == 1.0


def test_ranking_loss_enumeration_oracle(rng):
    for _ in range(20):
        s = rng.normal(size=(3, 4))
        c = rng.random((3, 4))
        want = 0.0
        for b in range(3):
            for i, j in itertools.permutations(range(4), 2):
                if c[b, i] > c[b, j]:
                    want += max(0.0, 1.0 - (s[b, i] - s[b, j]))
        assert ranking_loss(T.Tensor(s), c).item() == pytest.approx(want / 3, abs=1e-12)


def test_proposals_file_round_trip(tmp_path, rng):
    nav = make_navigator(rng)
    _, props, _ = nav(T.Tensor(rng.normal(size=(2, 4, 4, 4))))
    path = tmp_path / "proposals.txt"
    write_proposals(path, props, image_ids=["a", "b"])
    rows = read_proposals(path)
    assert len(rows) == 8 and rows[0][0] == "a" and rows[-1][0] == "b"
    line = path.read_text().splitlines()[0].split()
    assert len(line) == 6 and len(line[5].split(".")[1]) == 6
    assert rows[0][5] == pytest.approx(props[0][0].score, abs=1e-6)


def test_ranking_gradient_reaches_scorers_only(rng):
    nav = make_navigator(rng)
    F = T.Tensor(rng.normal(size=(2, 4, 4, 4)), requires_grad=True)
    scores, _, idx = nav(F)
    picked = scores[np.arange(2)[:, None], idx]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        T.backward(ranking_loss(picked, rng.random((2, 4))))
    assert any(np.abs(p.grad).sum() > 0 for p in nav.parameters() if p.grad is not None)
    assert F.grad is None  # features are detached by default
    assert isinstance(nav.pyramid[0], nn.ConvBlock)
