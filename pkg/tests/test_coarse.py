import numpy as np
import pytest

from vmudiff.coarse import MU_MAX, CoarsePredictor, VmuConfig, coarse_loss
from vmudiff.errors import ShapeError
from vmudiff.gradsuite import SUITE
from vmudiff.nn import ParamStore


def inputs(rng, b=1, n=5, h=32, w=32):
    return (rng.uniform(0, 1, size=(b, n, 1, h, w)).astype(np.float32),
            rng.uniform(0, 1, size=(b, n, 4, h, w)).astype(np.float32))


def test_desk_shapes():
    model = CoarsePredictor(ParamStore(0), VmuConfig())
    mu, fused = model.forward(*inputs(np.random.default_rng(0)))
    assert mu.shape == (1, 5, 32, 32)
    assert fused.shape == (1, 64, 8, 8)
    assert VmuConfig().bottleneck_shape == (64, 8, 8)
    assert mu.min() >= 0 and mu.max() <= MU_MAX


def test_zero_head_gives_zero_forecast():
    s = ParamStore(0)
    model = CoarsePredictor(s, VmuConfig(h=16, w=16))
    s.set("vmu.head.weight", np.zeros_like(s.value("vmu.head.weight")))
    mu, _ = model.forward(*inputs(np.random.default_rng(1), h=16, w=16))
    assert not np.any(mu)


def test_deterministic():
    model = CoarsePredictor(ParamStore(3), VmuConfig(h=16, w=16))
    x = inputs(np.random.default_rng(2), b=2, h=16, w=16)
    a, fa = model.forward(*x)
    b, fb = model.forward(*x)
    assert a.tobytes() == b.tobytes() and fa.tobytes() == fb.tobytes()


def test_ablation_keeps_output_shape_and_drops_stab():
    s_full, s_abl = ParamStore(0), ParamStore(0)
    cfg = VmuConfig(h=16, w=16)
    full = CoarsePredictor(s_full, cfg)
    abl = CoarsePredictor(s_abl, VmuConfig(h=16, w=16, msfusion=False))
    x = inputs(np.random.default_rng(0), h=16, w=16)
    assert full.forward(*x)[0].shape == abl.forward(*x)[0].shape
    assert any(n.startswith("stab.") for n in s_full.names())
    assert not any(n.startswith("stab") for n in s_abl.names())
    assert set(s_abl.names()) < set(s_full.names())


def test_zero_init_attention_scales_features_by_eighth():
    cfg = VmuConfig(n_in=2, m_out=2, h=8, w=8, c_radar=2, c_sat=2, base_width=4, levels=2, blocks_per_level=1)
    s_full, s_abl = ParamStore(0, np.float64), ParamStore(0, np.float64)
    full = CoarsePredictor(s_full, cfg)
    abl = CoarsePredictor(s_abl, VmuConfig(**{**cfg.__dict__, "msfusion": False}))
    for n in s_full.names("stab"):
        s_full.set(n, np.zeros_like(s_full.value(n)))
    seen = {}

    def spy(tag, orig):
        def fwd(x):
            seen[tag] = x.copy()
            return orig(x)
        return fwd

    for tag, model in (("full", full), ("abl", abl)):
        model.stem.forward = spy(tag, model.stem.forward)
        model.forward(*inputs(np.random.default_rng(5), n=2, h=8, w=8))
    np.testing.assert_allclose(seen["full"], seen["abl"] / 8, atol=1e-14)


def test_shape_errors():
    model = CoarsePredictor(ParamStore(0), VmuConfig(h=16, w=16))
    r, s = inputs(np.random.default_rng(0), h=16, w=16)
    with pytest.raises(ShapeError):
        model.forward(r[:, :4], s)
    with pytest.raises(ShapeError):
        model.forward(r[..., :8], s[..., :8])
    with pytest.raises(ShapeError):
        VmuConfig(h=30, w=32)


def test_identity_at_init_losses_finite():
    model = CoarsePredictor(ParamStore(0), VmuConfig(h=16, w=16))
    r, s = inputs(np.random.default_rng(0), b=2, h=16, w=16)
    mu, _ = model.forward(r, s)
    loss, grad = coarse_loss(mu, np.zeros_like(mu))
    assert np.isfinite(loss) and np.all(np.isfinite(grad))
    model.backward(grad)
    assert all(np.all(np.isfinite(model.store.grad(n))) for n in model.store)


def test_coarse_loss_examples():
    y = np.random.default_rng(0).uniform(size=(2, 3, 4, 4))
    assert coarse_loss(y, y)[0] == 0
    loss, g = coarse_loss(y + 0.1, y)
    assert loss == pytest.approx(0.01)
    np.testing.assert_allclose(g, 2 * 0.1 / y.size)


def test_param_names():
    s = ParamStore(0)
    CoarsePredictor(s, VmuConfig(h=16, w=16))
    names = s.names()
    assert any(n.startswith("vmu.enc0.") for n in names)
    assert any(n.startswith("vmu.dec1.") for n in names)
    assert any(n.startswith("vmu.head.") for n in names)
    assert any(n.startswith("stab.sab_radar.") for n in names)


@pytest.mark.parametrize("name", ["coarse_model", "coarse_model_no_msfusion"])
def test_end_to_end_gradient(name):
    r = SUITE[name](0)
    assert r.passed and r.tol == 1e-3, (r.rel_error, r.worst)
