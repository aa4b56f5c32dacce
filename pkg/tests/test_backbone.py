import numpy as np
import pytest

from csqa import tensor as T
from csqa.backbone import Backbone, BackboneConfig
from csqa.errors import ConfigurationError, DimensionError


def make(seed=0, **kw):
    return Backbone(BackboneConfig(**kw), np.random.default_rng(seed))


def test_stage_shapes_four_stages(rng):
    net = make(stages=4, channels=[16, 32, 64, 128], resolution=64)
    maps = net(T.Tensor(rng.random((2, 3, 64, 64))))
    assert [m.shape for m in maps] == [(2, 16, 16, 16), (2, 32, 8, 8), (2, 64, 4, 4), (2, 128, 2, 2)]


def test_part_input_halves_every_extent(rng):
    cfg = BackboneConfig(stages=3, channels=[8, 8, 16], resolution=64)
    net = Backbone(cfg, rng)
    full = net(T.Tensor(rng.random((1, 3, 64, 64))))
    half = net(T.Tensor(rng.random((1, 3, 32, 32))))
    assert [f.shape[2] // 2 for f in full] == [h.shape[2] for h in half]
    assert cfg.stage_extents(32) == [h.shape[2] for h in half]


def test_forward_is_deterministic(rng):
    x = rng.random((2, 3, 32, 32))
    a = make(seed=3, channels=[8, 8, 8], resolution=32)(T.Tensor(x))
    b = make(seed=3, channels=[8, 8, 8], resolution=32)(T.Tensor(x))
    for u, v in zip(a, b):
        assert np.array_equal(u.data, v.data)


def test_wrong_resolution_is_a_dimension_error(rng):
    net = make(channels=[8, 8, 8], resolution=32)
    with pytest.raises(DimensionError):
        net(T.Tensor(rng.random((1, 3, 24, 24))))


@pytest.mark.parametrize("kw", [dict(stages=2, channels=[8, 8]), dict(channels=[16, 8, 32]),
                                dict(resolution=40), dict(channels=[8, 8])])
def test_invalid_configs(kw):
    with pytest.raises(ConfigurationError):
        BackboneConfig(**kw).validate()


def test_parameter_count_is_a_function_of_config():
    counts = {make(seed=s, channels=[8, 16, 16], resolution=32).num_parameters() for s in range(3)}
    assert len(counts) == 1


def test_shared_view_aliases_parameters(rng):
    net = make(channels=[8, 8, 8], resolution=32)
    view = net.shared_view()
    assert [id(p) for p in view.parameters()] == [id(p) for p in net.parameters()]
    before = net.num_parameters()
    # an in-place update through the view is visible through the base
    for p in view.parameters():
        p.data += 0.5
    assert all(np.all(p.data == q.data) for p, q in zip(net.parameters(), view.parameters()))
    assert net.num_parameters() == before


def test_two_pass_gradient_accumulation(rng):
    net = make(channels=[8, 8, 8], resolution=32)
    view = net.shared_view()
    img = T.Tensor(rng.random((2, 3, 32, 32)))
    part = T.Tensor(rng.random((4, 3, 16, 16)))

    def image_loss():
        return T.tsum(T.pool_global(net(img)[-1], "avg"))

    def part_loss():
        return T.tsum(T.pool_global(view(part)[-1], "max") * 0.3)

    grads = []
    for fn in (image_loss, part_loss):
        net.zero_grad()
        T.backward(fn())
        grads.append([p.grad.copy() for p in net.parameters()])
    net.zero_grad()
    T.backward(image_loss() + part_loss())
    for p, g1, g2 in zip(net.parameters(), *grads):
        np.testing.assert_allclose(p.grad, g1 + g2, rtol=1e-12, atol=1e-14)


def test_maps_stay_finite_on_extreme_inputs(rng):
    net = make(channels=[8, 8, 8], resolution=32)
    for x in (np.zeros((2, 3, 32, 32)), np.full((2, 3, 32, 32), 1e3), rng.normal(scale=50, size=(2, 3, 32, 32))):
        assert all(np.all(np.isfinite(m.data)) for m in net(T.Tensor(x)))


def test_shared_view_leaves_running_statistics(rng):
    net = make(channels=[8, 8, 8], resolution=32)
    view = net.shared_view()
    before = {k: v.copy() for k, v in net.named_buffers()}
    out = view(T.Tensor(rng.random((4, 3, 16, 16))))
    assert all(np.array_equal(v, before[k]) for k, v in net.named_buffers())
    # batch statistics are still used on that path: each stage's channels are normalised
    assert np.all(np.isfinite(out[-1].data))
    net(T.Tensor(rng.random((2, 3, 32, 32))))
    assert not all(np.array_equal(v, before[k]) for k, v in net.named_buffers())
    assert all(m.track_stats for m in net.modules() if hasattr(m, "running_mean"))
