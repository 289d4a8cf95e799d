import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vmudiff import nn
from vmudiff.errors import BadMagicError, NumericError, ShapeError, TruncatedPayloadError
from vmudiff.gradsuite import SUITE


def test_conv_identity_and_ones():
    x = np.random.default_rng(0).normal(size=(1, 3, 4, 5))
    eye = np.eye(3).reshape(3, 3, 1, 1)
    y, _ = nn.conv2d(x, eye)
    np.testing.assert_array_equal(y, x)
    y, _ = nn.conv2d(np.ones((1, 1, 3, 3)), np.ones((1, 1, 3, 3)))
    assert y.shape == (1, 1, 1, 1) and y.item() == 9.0


def test_conv_output_size_errors():
    with pytest.raises(ShapeError):
        nn.conv2d(np.ones((1, 1, 5, 5)), np.ones((1, 1, 2, 2)), stride=2)
    with pytest.raises(ShapeError):
        nn.conv2d(np.ones((1, 2, 5, 5)), np.ones((1, 1, 3, 3)))


@pytest.mark.parametrize("k", [1, 3, 5, 7])
def test_same_padding_preserves_dims(k):
    x = np.ones((2, 2, 9, 6))
    y, _ = nn.conv2d(x, np.ones((3, 2, k, k)), padding=k // 2)
    assert y.shape == (2, 3, 9, 6)


def test_conv_matches_direct_loop():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 3, 7, 5))
    W = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    y, _ = nn.conv2d(x, W, b, stride=2, padding=1)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros_like(y)
    for n in range(2):
        for o in range(4):
            for i in range(y.shape[2]):
                for j in range(y.shape[3]):
                    ref[n, o, i, j] = np.sum(xp[n, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3] * W[o]) + b[o]
    np.testing.assert_allclose(y, ref, rtol=1e-12, atol=1e-12)


def test_depthwise_examples():
    x = np.random.default_rng(1).normal(size=(1, 2, 4, 4))
    ident = np.zeros((2, 3, 3))
    ident[:, 1, 1] = 1
    y, _ = nn.depthwise_conv2d(x, ident, padding=1)
    np.testing.assert_array_equal(y, x)
    scaled = ident.copy()
    scaled[0] *= 2
    scaled[1] *= 0
    y, _ = nn.depthwise_conv2d(x, scaled, padding=1)
    np.testing.assert_array_equal(y[0, 0], 2 * x[0, 0])
    np.testing.assert_array_equal(y[0, 1], 0)


def test_activation_values():
    assert nn.silu(np.array([0.0]))[0].item() == 0.0
    assert nn.sigmoid(np.array([0.0])).item() == 0.5
    s, _ = nn.softmax(np.full(4, 3.7))
    np.testing.assert_allclose(s, 0.25)
    big = nn.sigmoid(np.array([-800.0, 800.0]))
    assert np.all(np.isfinite(big)) and big[0] == 0.0 and big[1] == 1.0


@given(arrays(np.float64, (3, 7), elements=st.floats(-100, 100)))
def test_layer_norm_standardizes(x):
    y, _ = nn.layer_norm(x, np.ones(7), np.zeros(7))
    spread = x.std(axis=-1)
    ok = spread > 3.0  # var / (var + eps) is within 1e-5 of 1 only for rows with real spread
    np.testing.assert_allclose(y.mean(axis=-1), 0, atol=1e-9)
    np.testing.assert_allclose(y[ok].var(axis=-1), 1, atol=1e-5)


def test_layer_norm_variance_exact_on_wide_rows():
    x = np.random.default_rng(2).normal(scale=5.0, size=(4, 64))
    y, _ = nn.layer_norm(x, np.ones(64), np.zeros(64))
    np.testing.assert_allclose(y.var(axis=-1), 1, atol=1e-5)


def test_dense_shape_mismatch():
    with pytest.raises(ShapeError):
        nn.dense(np.ones((2, 3)), np.ones((4, 5)))


def test_mse_loss_and_gradient():
    a = np.full((2, 3), 0.4)
    loss, g = nn.mse_loss(a + 0.1, a)
    assert loss == pytest.approx(0.01)
    np.testing.assert_allclose(g, 2 * 0.1 / 6)
    with pytest.raises(ShapeError):
        nn.mse_loss(np.ones(3), np.ones(4))


def test_adam_zero_grad_keeps_params():
    s = nn.ParamStore(0)
    s.add("w", (3,))
    before = s.value("w").copy()
    nn.adam_step(s)
    np.testing.assert_array_equal(s.value("w"), before)
    assert s.step == 1


def test_adam_first_steps_match_hand_recurrence():
    s = nn.ParamStore(0, np.float64)
    s.add("w", (1,), "zeros")
    lr, b1, b2, eps = 1e-4, 0.9, 0.999, 1e-8
    s.grad("w")[:] = 1.0
    nn.adam_step(s, lr)
    assert s.value("w")[0] == pytest.approx(-1e-4, abs=1e-9)
    assert np.all(s.grad("w") == 0)
    s.grad("w")[:] = 1.0
    nn.adam_step(s, lr)
    m = (1 - b1) * b1 + (1 - b1)
    v = (1 - b2) * b2 + (1 - b2)
    m_hat, v_hat = m / (1 - b1**2), v / (1 - b2**2)
    assert m_hat == pytest.approx(1.0) and v_hat == pytest.approx(1.0)
    assert s.value("w")[0] == pytest.approx(-1e-4 - lr * m_hat / (np.sqrt(v_hat) + eps), abs=1e-12)


def test_adam_rejects_nonfinite_with_name():
    s = nn.ParamStore(0)
    s.add("layer.weight", (2,))
    s.grad("layer.weight")[0] = np.inf
    before = s.value("layer.weight").copy()
    with pytest.raises(NumericError, match="layer.weight"):
        nn.adam_step(s)
    np.testing.assert_array_equal(s.value("layer.weight"), before)
    assert s.step == 0


def test_param_store_init_contract():
    a = nn.ParamStore(4)
    a.add("x.weight", (8, 5))
    a.add("x.bias", (8,), "zeros")
    b = nn.ParamStore(4)
    b.add("other", (2,))
    b.add("x.weight", (8, 5))
    np.testing.assert_array_equal(a.value("x.weight"), b.value("x.weight"))
    assert np.abs(a.value("x.weight")).max() <= np.sqrt(1 / 5)
    with pytest.raises(KeyError):
        a.add("x.bias", (8,))
    assert a.grad("x.weight").shape == a.value("x.weight").shape


def test_checkpoint_round_trip_and_format(tmp_path):
    s = nn.ParamStore(1)
    s.add("a.w", (2, 3))
    s.add("b", (4,))
    path = tmp_path / "m.vmck"
    s.save(path)
    raw = path.read_bytes()
    assert raw[:4] == b"VMCK" and raw[4:12] == (1).to_bytes(4, "little") + (2).to_bytes(4, "little")
    t = nn.ParamStore(99)
    t.add("a.w", (2, 3))
    t.add("b", (4,))
    t.load(path)
    for n in s:
        np.testing.assert_array_equal(s.value(n), t.value(n))
    u = nn.ParamStore(0)
    u.add("a.w", (2, 3))
    with pytest.raises(ShapeError):
        u.load(path)
    path.write_bytes(raw[:-3])
    with pytest.raises(TruncatedPayloadError):
        nn.read_checkpoint(path)
    path.write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(BadMagicError):
        nn.read_checkpoint(path)


def test_forward_is_deterministic():
    s = nn.ParamStore(3)
    conv = nn.Conv2d(s, "c", 2, 3, 3)
    x = np.random.default_rng(0).normal(size=(1, 2, 5, 5)).astype(np.float32)
    assert conv.forward(x).tobytes() == conv.forward(x).tobytes()


@pytest.mark.parametrize("name", ["conv2d", "conv2d_strided", "depthwise_conv2d", "dense", "mlp", "layer_norm",
                                  "activations", "mse_loss"])
@pytest.mark.parametrize("seed", [0, 1])
def test_primitive_gradients(name, seed):
    r = SUITE[name](seed)
    assert r.passed, (r.rel_error, r.worst)
    assert r.tol == 1e-4
