import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vmudiff.errors import ShapeError
from vmudiff.gradsuite import SUITE
from vmudiff.nn import ParamStore
from vmudiff.stab import STAB, ChannelTemporalAttention, SpatialAttention, StabConfig, fold_time, unfold_time


def test_sab_zero_weights_halves_input():
    s = ParamStore(0, np.float64)
    sab = SpatialAttention(s, "sab", init="zeros")
    x = np.random.default_rng(0).normal(size=(2, 3, 4, 5, 5))
    np.testing.assert_array_equal(sab.forward(x), x / 2)


def test_sab_zero_input_gives_zero():
    s = ParamStore(0, np.float64)
    sab = SpatialAttention(s, "sab")
    assert not np.any(sab.forward(np.zeros((1, 2, 3, 6, 6))))


def test_ctab_zero_init_quarters_input():
    s = ParamStore(0, np.float64)
    ctab = ChannelTemporalAttention(s, "ctab", 5, 8, init="zeros")
    x = np.random.default_rng(1).normal(size=(2, 5, 8, 4, 4))
    np.testing.assert_allclose(ctab.forward(x), x / 4, rtol=0, atol=1e-15)


def test_ctab_single_timestep_gate_is_uniform():
    s = ParamStore(3, np.float64)
    ctab = ChannelTemporalAttention(s, "ctab", 1, 2)
    x = np.ones((1, 1, 2, 3, 3))
    y = ctab.forward(x)
    assert 0 < ctab.temporal._g.item() < 1
    for c in range(2):
        assert np.ptp(y[0, 0, c]) == 0


def test_stab_output_shape():
    s = ParamStore(0)
    stab = STAB(s, StabConfig(5, 5, 3, 32, 32))
    out = stab.forward(np.ones((1, 5, 5, 32, 32), np.float32), np.ones((1, 5, 3, 32, 32), np.float32))
    assert out.shape == (1, 40, 32, 32)


def test_stab_zero_satellite_at_init():
    s = ParamStore(0, np.float64)
    cfg = StabConfig(3, 2, 2, 6, 6)
    stab = STAB(s, cfg, init="zeros")
    radar = np.random.default_rng(0).normal(size=(1, 3, 2, 6, 6))
    out = unfold_time(stab.forward(radar, np.zeros((1, 3, 2, 6, 6))), 3)
    np.testing.assert_allclose(out[:, :, :2], radar / 8, atol=1e-15)
    assert not np.any(out[:, :, 2:])


def test_fold_unfold_is_lossless():
    x = np.arange(2 * 3 * 4 * 2 * 2, dtype=float).reshape(2, 3, 4, 2, 2)
    f = fold_time(x)
    assert f.shape == (2, 12, 2, 2)
    np.testing.assert_array_equal(f[:, 1 * 4 + 2], x[:, 1, 2])
    np.testing.assert_array_equal(unfold_time(f, 3), x)


def test_stab_shape_errors():
    s = ParamStore(0)
    stab = STAB(s, StabConfig(2, 1, 1, 4, 4))
    with pytest.raises(ShapeError):
        stab.forward(np.ones((1, 2, 1, 4, 4)), np.ones((1, 3, 1, 4, 4)))
    with pytest.raises(ShapeError):
        stab.forward(np.ones((1, 2, 1, 4, 4)), np.ones((1, 2, 1, 4, 5)))
    with pytest.raises(ShapeError):
        stab.forward(np.ones((1, 2, 2, 4, 4)), np.ones((1, 2, 1, 4, 4)))
    with pytest.raises(ValueError):
        StabConfig(2, 1, 1, 4, 4, sab_kernel=4)


@given(st.integers(0, 10**6))
def test_gates_shrink_magnitude(seed):
    rng = np.random.default_rng(seed)
    s = ParamStore(seed, np.float64)
    stab = STAB(s, StabConfig(2, 2, 1, 5, 5))
    for n in s:
        s.set(n, rng.normal(size=s.value(n).shape))
    radar = rng.normal(size=(1, 2, 2, 5, 5))
    sat = rng.normal(size=(1, 2, 1, 5, 5))
    out = unfold_time(stab.forward(radar, sat), 2)
    inp = np.concatenate([radar, sat], axis=2)
    assert np.all(np.abs(out) <= np.abs(inp) + 1e-15)


@pytest.mark.parametrize("name", ["sab", "ctab", "stab"])
def test_stab_gradients(name):
    r = SUITE[name](0)
    assert r.passed and r.tol == 1e-4, (r.rel_error, r.worst)
