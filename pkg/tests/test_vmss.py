import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vmudiff import kernels
from vmudiff.errors import ShapeError
from vmudiff.gradsuite import SUITE
from vmudiff.nn import ParamStore, layer_norm
from vmudiff.vmss import (
    SS2D,
    ScanDirection,
    VMSSBlock,
    cross_merge,
    cross_scan,
    discretize_zoh,
    format_benchmark,
    scan_benchmark,
    selective_scan,
    selective_scan_backward,
)

from oracles import naive_scan, random_instance

BACKENDS = sorted(kernels.BACKENDS)


def test_zoh_examples():
    ab, bb = discretize_zoh(0.0, 1.0, 1.0)
    assert ab == 1.0 and bb == 1.0
    ab, _ = discretize_zoh(-1e9, 1.0, 1.0)
    assert ab == 0.0
    ab, bb = discretize_zoh(-1.0, 2.0, 0.5)
    assert ab == pytest.approx(0.60653066, abs=1e-8) and bb == 1.0
    ab, bb = discretize_zoh(-1.0, 2.0, 0.5, exact=True)
    assert bb == pytest.approx(2 * (1 - np.exp(-0.5)))
    _, bb = discretize_zoh(0.0, 3.0, 0.25, exact=True)
    assert bb == 0.75
    with pytest.raises(ValueError):
        discretize_zoh(-1.0, 1.0, 0.0)


def _scalar_scan(u, a, d_skip):
    L = len(u)
    one = np.ones((L, 1))
    return selective_scan(np.array(u, float)[:, None], one, np.array([[a]]), one, one, np.array([d_skip]))[0][:, 0]


def test_scan_examples():
    np.testing.assert_array_equal(_scalar_scan([3, -1, 4], -np.inf, 0.0), [3, -1, 4])
    np.testing.assert_array_equal(_scalar_scan([1, 1, 1], 0.0, 0.0), [1, 2, 3])
    np.testing.assert_array_equal(_scalar_scan([1, 1, 1], 0.0, 1.0), [2, 3, 4])


def test_scan_rejects_empty_and_bad_shapes():
    with pytest.raises(ShapeError):
        selective_scan(np.zeros((0, 2)), np.zeros((0, 2)), -np.ones((2, 1)), np.zeros((0, 1)), np.zeros((0, 1)),
                       np.zeros(2))
    with pytest.raises(ShapeError):
        selective_scan(np.zeros((3, 2)), np.ones((3, 2)), -np.ones((2, 1)), np.zeros((3, 2)), np.zeros((3, 1)),
                       np.zeros(2))


@pytest.mark.parametrize("backend", BACKENDS)
@pytest.mark.parametrize("exact", [False, True])
def test_scan_matches_naive_oracle(backend, exact):
    rng = np.random.default_rng(11)
    impl = kernels.get_backend(backend)
    for _ in range(5):
        args = random_instance(rng, 16, 3, 4)
        y, _ = impl.scan_forward(*(a[None] for a in args), exact)
        np.testing.assert_allclose(y[0], naive_scan(*args, exact=exact), rtol=0, atol=1e-10)


@pytest.mark.parametrize("exact", [False, True])
def test_backends_agree(exact):
    if len(BACKENDS) < 2:
        pytest.skip("compiled kernel not built")
    rng = np.random.default_rng(5)
    u, dt, A, B, C, D = (a[None] for a in random_instance(rng, 40, 4, 6))
    dy = rng.normal(size=u.shape)
    out = {}
    for name in BACKENDS:
        impl = kernels.get_backend(name)
        y, cache = impl.scan_forward(u, dt, A, B, C, D, exact)
        out[name] = (y,) + tuple(impl.scan_backward(dy, u, dt, A, B, C, D, cache, exact))
    for a, b in zip(out["numpy"], out["cython"]):
        np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-12)


def test_float32_scan_close_to_oracle():
    rng = np.random.default_rng(2)
    args = random_instance(rng, 64, 4, 8, np.float32)
    y, _ = selective_scan(*args)
    ref = naive_scan(*(a.astype(np.float64) for a in args))
    assert np.max(np.abs(y - ref)) < 1e-4


def test_long_sequence_is_stable():
    rng = np.random.default_rng(0)
    L, Dm, N = 4096, 2, 4
    u = rng.uniform(-1, 1, size=(L, Dm))
    dt = rng.uniform(0.01, 0.1, size=(L, Dm))
    A = -rng.uniform(0.5, 2.0, size=(Dm, N))
    B = rng.uniform(-1, 1, size=(L, N))
    y, cache = selective_scan(u, dt, A, B, np.ones((L, N)), np.ones(Dm))
    hs = cache[0]
    assert np.all(np.isfinite(y))
    abar_max = np.exp(dt.min() * A.max())
    bound = (dt.max() * np.abs(B).max()) * np.abs(u).max() / (1 - abar_max)
    assert np.abs(hs).max() <= bound


def test_time_reversal_symmetry():
    rng = np.random.default_rng(8)
    x = rng.normal(size=(3, 4, 5))
    seqs = cross_scan(x)
    u_f = seqs[ScanDirection.ROW_FWD]
    u_b = seqs[ScanDirection.ROW_BWD]
    L = u_f.shape[0]
    dt = np.full((L, 3), 0.1)
    A = -np.ones((3, 2))
    Bc = np.ones((L, 2))
    y_rev_input, _ = selective_scan(u_f[::-1].copy(), dt, A, Bc, Bc, np.ones(3))
    y_bwd, _ = selective_scan(u_b, dt, A, Bc, Bc, np.ones(3))
    np.testing.assert_array_equal(y_rev_input, y_bwd)


def test_cross_scan_enumeration():
    x = np.array([[[1.0, 2.0], [3.0, 4.0]]])  # a b / c d
    seqs = cross_scan(x)[..., 0]
    assert seqs.tolist() == [[1, 2, 3, 4], [4, 3, 2, 1], [1, 3, 2, 4], [4, 2, 3, 1]]


@given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 3))
def test_cross_merge_inverts_scan(h, w, c):
    x = np.random.default_rng(h * 31 + w).normal(size=(c, h, w))
    np.testing.assert_array_equal(cross_merge(cross_scan(x), h, w), 4 * x)


def test_cross_merge_shape_error():
    with pytest.raises(ShapeError):
        cross_merge(np.zeros((3, 4, 1)), 2, 2)


def _zero_projections(store, name):
    for key in ("proj_dt.weight", "proj_b.weight", "proj_c.weight"):
        store.set(f"{name}.{key}", np.zeros_like(store.value(f"{name}.{key}")))


def test_ss2d_degenerate_parameters_give_layer_norm_of_4x():
    s = ParamStore(0, np.float64)
    ss = SS2D(s, "ss", 3, 4)
    _zero_projections(s, "ss")
    x = np.random.default_rng(0).normal(size=(2, 3, 4, 5))
    ref, _ = layer_norm(4 * x, np.ones(3), np.zeros(3), axis=1)
    np.testing.assert_allclose(ss.forward(x), ref, atol=1e-12)


def test_ss2d_single_cell():
    s = ParamStore(2, np.float64)
    ss = SS2D(s, "ss", 4, 3)
    x = np.random.default_rng(1).normal(size=(1, 4, 1, 1))
    out = ss.forward(x)
    tokens = x.reshape(1, 4)
    dt = np.logaddexp(0, tokens @ s.value("ss.proj_dt.weight").T + s.value("ss.dt_bias"))
    Bm = tokens @ s.value("ss.proj_b.weight").T
    Cm = tokens @ s.value("ss.proj_c.weight").T
    A = -np.exp(s.value("ss.row_fwd.a_log"))
    y = naive_scan(tokens, dt, A, Bm, Cm, np.ones(4))
    ref, _ = layer_norm(4 * y, np.ones(4), np.zeros(4))
    np.testing.assert_allclose(out.reshape(1, 4), ref, atol=1e-10)


def test_ss2d_param_names_per_direction():
    s = ParamStore(0)
    SS2D(s, "vmss.b0.ss2d", 2, 2)
    for d in ScanDirection:
        assert f"vmss.b0.ss2d.{d.tag}.a_log" in s
    np.testing.assert_allclose(-np.exp(s.value("vmss.b0.ss2d.row_fwd.a_log")[0]), [-1, -2])


def test_vmss_block_identity_at_init():
    s = ParamStore(0)
    blk = VMSSBlock(s, "blk", 4, 4)
    x = np.random.default_rng(0).normal(size=(2, 4, 5, 6)).astype(np.float32)
    assert blk.forward(x).tobytes() == x.tobytes()


def test_vmss_block_zero_input_zero_output():
    s = ParamStore(3, np.float64)
    blk = VMSSBlock(s, "blk", 3, 2)
    rng = np.random.default_rng(1)
    s.set("blk.out_proj.weight", rng.normal(size=(3, 3)))
    assert not np.any(blk.forward(np.zeros((1, 3, 4, 4))))


@pytest.mark.parametrize("name", ["selective_scan", "selective_scan_exact_zoh", "ss2d", "ss2d_lti", "vmss_block"])
def test_vmss_gradients(name):
    r = SUITE[name](0)
    assert r.passed and r.tol == 1e-4, (r.rel_error, r.worst)


def test_scan_backward_single_sequence():
    rng = np.random.default_rng(4)
    args = random_instance(rng, 6, 2, 3)
    y, cache = selective_scan(*args)
    grads = selective_scan_backward(np.ones_like(y), *args, cache)
    assert [g.shape for g in grads] == [a.shape for a in args]


def test_benchmark_table():
    rows = scan_benchmark([1, 8, 32], repeats=2)
    assert [r[0] for r in rows] == [1, 8, 32]
    assert rows[0][1] > 0
    text = format_benchmark(rows)
    lines = text.splitlines()
    assert lines[0] == "L\tnanos\tnanos_per_element" and len(lines) == 4
    with pytest.raises(ValueError):
        scan_benchmark([8, 4])
