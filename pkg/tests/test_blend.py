import numpy as np
import pytest
from hypothesis import given, strategies as st

from flickerlens.backbone import ContextStack
from flickerlens.blend import BlendTap, BottleneckMix, OneByOneMix, mix_frequency_features, residual_blend
from flickerlens.errors import ConfigError, ShapeError
from flickerlens.tensor_core import FeatureTensor

seeds = st.integers(0, 2**31 - 1)


def chw(a):
    return FeatureTensor(("channel", "height", "width"), a)


def cthw(a):
    return FeatureTensor(("channel", "time", "height", "width"), a)


@given(seeds, st.integers(1, 9))
def test_fresh_bottleneck_outputs_zero(seed, c):
    rng = np.random.default_rng(seed)
    out, _ = BottleneckMix.create(c, rng).forward(rng.normal(0, 100, size=(c, 3, 4)))
    assert not out.any()


def test_identity_mixes_double_the_global_input():
    z0 = np.array([[[1.0, 2.0], [3.0, 4.0]]])
    tap = BlendTap(1, 1, rng=np.random.default_rng(0))
    tap.mix0[0] = OneByOneMix.create(1, 1, identity=True)
    tap.mixp[0][0] = OneByOneMix.create(1, 1, identity=True)
    _, cache = tap.forward(z0, [z0.copy()])
    bottleneck_input = cache["bottleneck"][0]
    assert bottleneck_input.tolist() == [[[2.0, 4.0], [6.0, 8.0]]]


def test_no_parts_reduces_to_global_path():
    rng = np.random.default_rng(1)
    tap = BlendTap(4, 0, rng=rng)
    tap.bottleneck.second.weight[:] = rng.normal(size=tap.bottleneck.second.weight.shape)
    z0 = rng.random((4, 3, 3))
    out, _ = tap.forward(z0, [])
    expect, _ = tap.bottleneck.forward(tap.mix0[0](z0))
    assert np.array_equal(out, expect)


def test_part_features_are_resized_to_tap_grid():
    rng = np.random.default_rng(2)
    tap = BlendTap(2, 1, mode="add")
    z0 = rng.random((2, 5, 5))
    zp = np.full((2, 3, 3), 0.5)
    out, _ = tap.forward(z0, [zp])
    assert np.allclose(out, z0 + 0.5)


@given(seeds)
def test_superposition_in_the_linear_regime(seed):
    rng = np.random.default_rng(seed)
    tap = BlendTap(3, 2, rng=rng)
    for m in tap.named_mixes().values():
        m.weight[:] = np.abs(m.weight) if m is not tap.bottleneck.second else rng.normal(size=m.weight.shape)
    f = lambda z0, zps: mix_frequency_features(chw(z0), [chw(z) for z in zps], tap).data.astype(np.float64)
    u0, v0 = rng.random((2, 3, 4, 4))
    up, vp = [rng.random((3, 2, 2)) for _ in range(2)], [rng.random((3, 2, 2)) for _ in range(2)]
    lhs = f(u0 + v0, [a + b for a, b in zip(up, vp)])
    rhs = f(u0, up) + f(v0, vp)
    assert np.max(np.abs(lhs - rhs)) <= 1e-5 * max(1.0, np.max(np.abs(rhs)))


def test_channel_mismatch():
    tap = BlendTap(4, 1)
    with pytest.raises(ShapeError):
        tap.forward(np.zeros((3, 2, 2)), [np.zeros((3, 2, 2))])
    with pytest.raises(ShapeError):
        OneByOneMix.create(4, 4)(np.zeros((3, 2, 2)))


def test_unknown_mode():
    with pytest.raises(ConfigError):
        BlendTap(2, 1, mode="weave")


@pytest.mark.parametrize("mode", ["conv1x1", "conv1x1x2", "concat", "add"])
def test_tap_backward_matches_fd(mode):
    rng = np.random.default_rng(3)
    tap = BlendTap(3, 2, mode=mode, rng=rng)
    if tap.bottleneck is not None:
        tap.bottleneck.second.weight[:] = rng.normal(size=tap.bottleneck.second.weight.shape)
    z0 = rng.random((3, 4, 4))
    zps = [rng.random((3, 2, 2)), rng.random((3, 4, 4))]
    g = rng.normal(size=(3, 4, 4))
    out, cache = tap.forward(z0, zps)
    grads, g_zp = tap.backward(g, cache)
    loss = lambda: float(np.sum(g * tap.forward(z0, zps)[0]))
    h = 1e-6
    for name, w in tap.parameters().items():
        idx = tuple(rng.integers(0, s) for s in w.shape)
        old = w[idx]
        w[idx] = old + h
        lp = loss()
        w[idx] = old - h
        lm = loss()
        w[idx] = old
        assert abs(grads[name][idx] - (lp - lm) / (2 * h)) <= 1e-5 * max(1.0, abs(grads[name][idx])), name
    for j, zp in enumerate(zps):
        idx = (1, 1, 0)
        old = zp[idx]
        zp[idx] = old + h
        lp = loss()
        zp[idx] = old - h
        lm = loss()
        zp[idx] = old
        assert abs(g_zp[j][idx] - (lp - lm) / (2 * h)) <= 1e-5 * max(1.0, abs(g_zp[j][idx]))


class TestResidualBlend:
    def test_zero_blend_is_context_path(self):
        ctx = ContextStack(seed=4)
        zplus = np.random.default_rng(4).random((8, 3, 4, 4))
        out = residual_blend(chw(np.zeros((8, 4, 4))), cthw(zplus), lambda x: ctx.stage(1, x)[0])
        assert np.array_equal(out.data, ctx.stage(1, zplus.astype(np.float32).astype(np.float64))[0].astype(np.float32))

    def test_constant_shift(self):
        zplus = np.random.default_rng(5).random((2, 3, 2, 2))
        out = residual_blend(chw(np.full((2, 2, 2), 0.25)), cthw(zplus), lambda x: x)
        assert np.allclose(out.data, zplus + 0.25, atol=1e-7)

    @given(seeds)
    def test_broadcast_matches_loop(self, seed):
        rng = np.random.default_rng(seed)
        zt, zp = rng.normal(size=(3, 2, 5)), rng.normal(size=(3, 4, 2, 5))
        out = residual_blend(chw(zt), cthw(zp), lambda x: x).data
        zt32, zp32 = zt.astype(np.float32).astype(np.float64), zp.astype(np.float32).astype(np.float64)
        for t in range(4):
            assert np.max(np.abs(out[:, t] - (zp32[:, t] + zt32))) <= 1e-6

    def test_mismatch(self):
        with pytest.raises(ShapeError):
            residual_blend(chw(np.zeros((3, 2, 2))), cthw(np.zeros((3, 4, 2, 3))), lambda x: x)
