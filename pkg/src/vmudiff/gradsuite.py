"""Registry of finite-difference checks covering every differentiable op and block.

Each check builds a tiny 64-bit instance with randomized parameters (the
zero-initialized production layout would make several gradients vanish).
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import nn
from .coarse import CoarsePredictor, VmuConfig
from .diffusion import CMSSBlock, ConditionEncoder, Denoiser, DiffusionConfig
from .gradcheck import GradResult, check_gradients
from .nn import ParamStore
from .stab import STAB, ChannelTemporalAttention, SpatialAttention, StabConfig
from .vmss import SS2D, VMSSBlock, selective_scan, selective_scan_backward

COMPOSITE_H = 1e-5
TOL = 1e-4
COMPOSITE_TOL = 1e-3

SUITE: dict[str, Callable[[int], GradResult]] = {}


def register(name):
    def deco(fn):
        SUITE[name] = fn
        return fn
    return deco


def _store(seed):
    return ParamStore(seed, np.float64)


def _randomize(store, rng, scale=0.5):
    for name in store:
        v = store.value(name)
        if name.endswith("a_log"):
            store.set(name, rng.uniform(-0.5, 1.0, size=v.shape))
        elif name.endswith("dt_bias"):
            store.set(name, rng.uniform(-3.0, -1.0, size=v.shape))
        else:
            store.set(name, rng.normal(scale=scale, size=v.shape))


def _module_check(name, module, inputs, store, h=COMPOSITE_H, tol=TOL, seed=0, call=None, back=None):
    fwd = call or (lambda inp: module.forward(*inp.values()))

    def bwd(dout):
        g = (back or module.backward)(dout)
        g = g if isinstance(g, tuple) else (g,)
        return dict(zip(inputs, g))

    return check_gradients(name, fwd, bwd, inputs, store, h=h, tol=tol, seed=seed)


# --------------------------------------------------------------------------
# primitives

@register("conv2d")
def check_conv2d(seed=0):
    rng = np.random.default_rng(seed)
    s = _store(seed)
    conv = nn.Conv2d(s, "conv", 2, 3, 5, padding=2)
    _randomize(s, rng)
    return _module_check("conv2d", conv, {"x": rng.normal(size=(1, 2, 4, 4))}, s, h=1e-3, seed=seed)


@register("conv2d_strided")
def check_conv2d_strided(seed=0):
    rng = np.random.default_rng(seed)
    s = _store(seed)
    conv = nn.Conv2d(s, "conv", 2, 2, 2, stride=2, padding=0)
    _randomize(s, rng)
    return _module_check("conv2d_strided", conv, {"x": rng.normal(size=(2, 2, 4, 4))}, s, h=1e-3, seed=seed)


@register("depthwise_conv2d")
def check_depthwise(seed=0):
    rng = np.random.default_rng(seed)
    s = _store(seed)
    conv = nn.DepthwiseConv2d(s, "dw", 2, 3)
    _randomize(s, rng)
    return _module_check("depthwise_conv2d", conv, {"x": rng.normal(size=(1, 2, 4, 4))}, s, h=1e-3, seed=seed)


@register("dense")
def check_dense(seed=0):
    rng = np.random.default_rng(seed)
    s = _store(seed)
    d = nn.Dense(s, "fc", 4, 3)
    _randomize(s, rng)
    return _module_check("dense", d, {"x": rng.normal(size=(4, 4))}, s, seed=seed)


@register("mlp")
def check_mlp(seed=0):
    rng = np.random.default_rng(seed)
    s = _store(seed)
    m = nn.MLP(s, "mlp", 4, 6, 3)
    _randomize(s, rng)
    return _module_check("mlp", m, {"x": rng.normal(size=(3, 4))}, s, seed=seed)


@register("layer_norm")
def check_layer_norm(seed=0):
    rng = np.random.default_rng(seed)
    s = _store(seed)
    ln = nn.LayerNorm(s, "ln", 4)
    _randomize(s, rng)
    return _module_check("layer_norm", ln, {"x": rng.normal(size=(3, 4))}, s, h=1e-5, seed=seed)


def _functional(name, op, op_back, x, seed):
    def fwd(inp):
        out, cache = op(inp["x"])
        fwd.cache = cache
        return out

    def bwd(dout):
        return {"x": op_back(dout, fwd.cache)}

    return check_gradients(name, fwd, bwd, {"x": x}, None, h=1e-5, tol=TOL, seed=seed)


@register("activations")
def check_activations(seed=0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(4, 5))
    rs = [
        _functional("silu", nn.silu, nn.silu_backward, x, seed),
        _functional("softmax", lambda v: nn.softmax(v, -1), nn.softmax_backward, x, seed),
        _functional("sigmoid", lambda v: (lambda s: (s, s))(nn.sigmoid(v)),
                    lambda d, s: nn.sigmoid_backward(d, s), x, seed),
        _functional("softplus", lambda v: (nn.softplus(v), v), nn.softplus_backward, x, seed),
    ]
    worst = max(rs, key=lambda r: r.rel_error)
    return GradResult("activations", worst.rel_error, TOL, worst.name, {r.name: r.rel_error for r in rs})


@register("mse_loss")
def check_mse(seed=0):
    rng = np.random.default_rng(seed)
    target = rng.normal(size=(2, 3, 4))

    def fwd(inp):
        loss, fwd.grad = nn.mse_loss(inp["x"], target)
        return np.array(loss)

    return check_gradients("mse_loss", fwd, lambda d: {"x": d * fwd.grad}, {"x": rng.normal(size=(2, 3, 4))},
                           None, h=1e-5, tol=TOL, seed=seed)


# --------------------------------------------------------------------------
# attention

@register("sab")
def check_sab(seed=0):
    rng = np.random.default_rng(seed)
    s = _store(seed)
    sab = SpatialAttention(s, "sab")
    _randomize(s, rng)
    return _module_check("sab", sab, {"x": rng.normal(size=(1, 2, 3, 4, 4))}, s, seed=seed)


@register("ctab")
def check_ctab(seed=0):
    rng = np.random.default_rng(seed)
    s = _store(seed)
    ctab = ChannelTemporalAttention(s, "ctab", 2, 4, ratio=2)
    _randomize(s, rng)
    return _module_check("ctab", ctab, {"x": rng.normal(size=(1, 2, 4, 4, 4))}, s, seed=seed)


@register("stab")
def check_stab(seed=0):
    rng = np.random.default_rng(seed)
    s = _store(seed)
    stab = STAB(s, StabConfig(t_len=2, c_radar=2, c_sat=2, h=4, w=4))
    _randomize(s, rng)
    inputs = {"radar": rng.normal(size=(2, 2, 2, 4, 4)), "sat": rng.normal(size=(2, 2, 2, 4, 4))}
    return _module_check("stab", stab, inputs, s, seed=seed)


# --------------------------------------------------------------------------
# state-space core

def _scan_check(name, exact, seed):
    rng = np.random.default_rng(seed)
    L, D, N = 6, 3, 4
    inputs = {
        "u": rng.normal(size=(L, D)),
        "delta": rng.uniform(0.1, 0.6, size=(L, D)),
        "A": -rng.uniform(0.5, 2.0, size=(D, N)),
        "B": rng.normal(size=(L, N)),
        "C": rng.normal(size=(L, N)),
        "D": rng.normal(size=D),
    }

    def fwd(inp):
        y, fwd.cache = selective_scan(*inp.values(), exact=exact)
        fwd.args = tuple(inp.values())
        return y

    def bwd(dy):
        grads = selective_scan_backward(dy, *fwd.args, fwd.cache, exact=exact)
        return dict(zip(inputs, grads))

    return check_gradients(name, fwd, bwd, inputs, None, h=1e-5, tol=TOL, seed=seed)


@register("selective_scan")
def check_scan(seed=0):
    return _scan_check("selective_scan", False, seed)


@register("selective_scan_exact_zoh")
def check_scan_exact(seed=0):
    return _scan_check("selective_scan_exact_zoh", True, seed)


@register("ss2d")
def check_ss2d(seed=0):
    rng = np.random.default_rng(seed)
    s = _store(seed)
    m = SS2D(s, "ss2d", 2, d_state=3)
    _randomize(s, rng)
    return _module_check("ss2d", m, {"x": rng.normal(size=(1, 2, 3, 3))}, s, seed=seed)


@register("ss2d_lti")
def check_ss2d_lti(seed=0):
    rng = np.random.default_rng(seed)
    s = _store(seed)
    m = SS2D(s, "ss2d", 2, d_state=3, selective=False)
    _randomize(s, rng)
    return _module_check("ss2d_lti", m, {"x": rng.normal(size=(1, 2, 3, 3))}, s, seed=seed)


@register("vmss_block")
def check_vmss(seed=0):
    rng = np.random.default_rng(seed)
    s = _store(seed)
    m = VMSSBlock(s, "vmss", 3, d_state=2)
    _randomize(s, rng)
    return _module_check("vmss_block", m, {"x": rng.normal(size=(1, 3, 3, 4))}, s, seed=seed)


# --------------------------------------------------------------------------
# diffusion

def _tiny_diffusion(**kw):
    base = dict(m_out=2, h=8, w=8, fused_channels=4, fused_h=2, fused_w=2, width=3, n_blocks=2, d_state=2,
                mu_channels=3, cond_width=6, temb_width=4)
    base.update(kw)
    return DiffusionConfig(**base)


@register("cmss_block")
def check_cmss(seed=0):
    rng = np.random.default_rng(seed)
    s = _store(seed)
    blk = CMSSBlock(s, "blk", 3, d_state=2)
    _randomize(s, rng)
    keys = ("gamma1", "beta1", "gamma2", "beta2")
    inputs = {"h": rng.normal(size=(2, 3, 3, 3))}
    inputs.update({k: rng.normal(scale=0.5, size=(2, 3)) for k in keys})

    def fwd(inp):
        return blk.forward(inp["h"], {k: inp[k] for k in keys})

    def bwd(dout):
        dh, dmods = blk.backward(dout)
        return {"h": dh, **dmods}

    return check_gradients("cmss_block", fwd, bwd, inputs, s, h=COMPOSITE_H, tol=TOL, seed=seed)


@register("condition_embedding")
def check_condition(seed=0):
    rng = np.random.default_rng(seed)
    s = _store(seed)
    cfg = _tiny_diffusion()
    enc = ConditionEncoder(s, cfg, "stdiff.cond")
    _randomize(s, rng)
    inputs = {"fused": rng.normal(size=(2, 4, 2, 2)), "mu": rng.uniform(size=(2, 2, 8, 8))}
    return _module_check("condition_embedding", enc, inputs, s, seed=seed)


@register("denoiser")
def check_denoiser(seed=0):
    rng = np.random.default_rng(seed)
    s = _store(seed)
    den = Denoiser(s, _tiny_diffusion())
    _randomize(s, rng, scale=0.3)
    t = np.array([3, 700])

    def fwd(inp):
        return den.forward(inp["z"], den.build_condition(inp["fused"], inp["mu"], t))

    def bwd(dout):
        dz, dmods = den.backward(dout)
        dfused, dmu = den.condition_backward(dmods)
        return {"z": dz, "fused": dfused, "mu": dmu}

    inputs = {"z": rng.normal(size=(2, 2, 8, 8)), "fused": rng.normal(size=(2, 4, 2, 2)),
              "mu": rng.uniform(size=(2, 2, 8, 8))}
    return check_gradients("denoiser", fwd, bwd, inputs, s, h=COMPOSITE_H, tol=COMPOSITE_TOL, seed=seed)


# --------------------------------------------------------------------------
# full coarse model

def tiny_vmu(**kw) -> VmuConfig:
    base = dict(n_in=2, m_out=2, h=8, w=8, c_radar=2, c_sat=2, base_width=4, levels=3, blocks_per_level=1,
                d_state=2)
    base.update(kw)
    return VmuConfig(**base)


def _coarse_check(name, cfg, seed):
    rng = np.random.default_rng(seed)
    s = _store(seed)
    model = CoarsePredictor(s, cfg)
    _randomize(s, rng, scale=0.25)
    inputs = {"radar": rng.uniform(size=(1, cfg.n_in, 1, cfg.h, cfg.w)),
              "sat": rng.uniform(size=(1, cfg.n_in, 4, cfg.h, cfg.w))}
    c, fh, fw = cfg.bottleneck_shape
    R_f = rng.normal(size=(1, c, fh, fw))

    # Head output plus a projection of F_fused, so both backward entry points are exercised.
    def fwd(inp):
        raw, fused = model.forward_raw(inp["radar"], inp["sat"])
        return raw + np.sum(fused * R_f)

    def bwd(dout):
        dfused = R_f * dout.sum()
        return dict(zip(inputs, model.backward_raw(dout, dfused)))

    return check_gradients(name, fwd, bwd, inputs, s, h=COMPOSITE_H, tol=COMPOSITE_TOL, seed=seed)


@register("coarse_model")
def check_coarse(seed=0):
    return _coarse_check("coarse_model", tiny_vmu(), seed)


@register("coarse_model_no_msfusion")
def check_coarse_ablated(seed=0):
    return _coarse_check("coarse_model_no_msfusion", tiny_vmu(msfusion=False), seed)


def run_suite(names=None, seed: int = 0) -> list[GradResult]:
    names = list(SUITE) if names is None else list(names)
    unknown = [n for n in names if n not in SUITE]
    if unknown:
        raise KeyError(f"unknown gradient checks: {unknown}")
    return [SUITE[n](seed) for n in names]


def format_results(results) -> str:
    lines = ["check\trel_error\ttol\tstatus\tworst"]
    for r in results:
        lines.append(f"{r.name}\t{r.rel_error:.3e}\t{r.tol:.0e}\t{'PASS' if r.passed else 'FAIL'}\t{r.worst}")
    return "\n".join(lines) + "\n"
