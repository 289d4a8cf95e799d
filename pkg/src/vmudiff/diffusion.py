"""Residual conditional diffusion: schedule, noising, CMSS denoiser and samplers.

The diffusion runs in pixel space on the residual ``z0 = Y - mu`` of the coarse
forecast. Frames are stacked as channels, so every field here is
``(B, m, H, W)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ShapeError
from .nn import MLP, Conv2d, Dense, Module, mse_loss, silu, silu_backward
from .vmss import VMSSBlock

T_DIFF = 1000
COND_WIDTH = 256
TEMB_WIDTH = 128


class NoiseSchedule:
    """Linear beta schedule; tables are indexed by ``t`` in ``0..T`` with ``alpha_bar[0] = 1``."""

    def __init__(self, T: int = T_DIFF, beta_start: float = 1e-4, beta_end: float = 0.02):
        if T < 1 or not 0 < beta_start < beta_end < 1:
            raise ValueError("need T >= 1 and 0 < beta_start < beta_end < 1")
        self.T = int(T)
        self.betas = np.concatenate([[0.0], np.linspace(beta_start, beta_end, self.T)])
        self.alphas = 1.0 - self.betas
        self.alpha_bar = np.cumprod(self.alphas)

    def check_t(self, t, lo: int = 0):
        t = np.asarray(t)
        if np.any(t < lo) or np.any(t > self.T):
            raise ValueError(f"timestep out of range [{lo}, {self.T}]: {t}")
        return t.astype(np.int64)


def compute_residual_target(y, mu):
    """``Y - mu`` in 64-bit, so ``mu + z0`` restores ``Y`` exactly.

    Exact for 32-bit inputs in ``[0, 2)`` whose nonzero entries are at least
    ``2**-24``: the difference then fits a double's mantissa.
    """
    y = np.asarray(y)
    mu = np.asarray(mu)
    if y.shape != mu.shape:
        raise ShapeError(f"residual: target {y.shape} vs coarse {mu.shape}")
    return y.astype(np.float64) - mu.astype(np.float64)


def _per_sample(coef, ndim):
    coef = np.asarray(coef, dtype=np.float64)
    return coef.reshape(coef.shape + (1,) * (ndim - coef.ndim))


def q_sample(schedule: NoiseSchedule, z0, t, eps):
    """Closed-form forward marginal ``sqrt(ab_t) z0 + sqrt(1 - ab_t) eps``.

    ``t`` is a scalar or one step per leading-axis sample.
    """
    z0 = np.asarray(z0)
    eps = np.asarray(eps)
    if z0.shape != eps.shape:
        raise ShapeError(f"q_sample: z0 {z0.shape} vs eps {eps.shape}")
    ab = schedule.alpha_bar[schedule.check_t(t)]
    ab = _per_sample(ab, z0.ndim)
    out = np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps
    return out.astype(np.result_type(z0.dtype, eps.dtype), copy=False)


def timestep_embedding(t, dim: int = TEMB_WIDTH):
    """Sinusoidal embedding ``[sin(t w_k), cos(t w_k)]`` with geometric ``w_k``."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    ang = t[:, None] * freqs[None]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def total_loss(l_coarse: float, l_refine: float, alpha: float = 0.7) -> float:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if not (np.isfinite(l_coarse) and np.isfinite(l_refine)):
        raise ValueError("losses must be finite")
    return alpha * l_coarse + (1.0 - alpha) * l_refine


# --------------------------------------------------------------------------
# Conditioning

@dataclass(frozen=True)
class DiffusionConfig:
    m_out: int = 5
    h: int = 32
    w: int = 32
    fused_channels: int = 64
    fused_h: int = 8
    fused_w: int = 8
    width: int = 16
    n_blocks: int = 4
    d_state: int = 8
    mu_channels: int = 16
    cond_width: int = COND_WIDTH
    temb_width: int = TEMB_WIDTH
    literal_modulation: bool = False

    def __post_init__(self):
        if self.h % self.fused_h or self.w % self.fused_w or self.h // self.fused_h != self.w // self.fused_w:
            raise ShapeError(f"grid {self.h}x{self.w} is not an integer multiple of {self.fused_h}x{self.fused_w}")

    @property
    def mu_stride(self) -> int:
        return self.h // self.fused_h


class ConditionEncoder(Module):
    """``(F_fused, mu) -> c``: strided conv on ``mu``, concat, global pool, MLP."""

    def __init__(self, store, cfg: DiffusionConfig, name="stdiff.cond"):
        super().__init__(store, name)
        self.cfg = cfg
        s = cfg.mu_stride
        self.mu_down = Conv2d(store, f"{name}.mu_down", cfg.m_out, cfg.mu_channels, s, stride=s, padding=0)
        self.mlp = MLP(store, f"{name}.mlp", cfg.fused_channels + cfg.mu_channels, cfg.cond_width, cfg.cond_width)

    def forward(self, fused, mu):
        c = self.cfg
        if fused.shape[1:] != (c.fused_channels, c.fused_h, c.fused_w):
            raise ShapeError(f"fused features {fused.shape[1:]} do not match "
                             f"({c.fused_channels}, {c.fused_h}, {c.fused_w})")
        if mu.shape[1:] != (c.m_out, c.h, c.w) or mu.shape[0] != fused.shape[0]:
            raise ShapeError(f"coarse forecast {mu.shape} does not match config")
        md = self.mu_down.forward(mu)
        cat = np.concatenate([fused, md.astype(fused.dtype, copy=False)], axis=1)
        self._hw = cat.shape[2] * cat.shape[3]
        self._shape = cat.shape
        return self.mlp.forward(cat.mean(axis=(2, 3)))

    def backward(self, dc):
        dpool = self.mlp.backward(dc)
        dcat = np.broadcast_to(dpool[:, :, None, None] / self._hw, self._shape)
        nf = self.cfg.fused_channels
        dmu = self.mu_down.backward(np.ascontiguousarray(dcat[:, nf:]))
        return np.ascontiguousarray(dcat[:, :nf]), dmu


@dataclass
class ConditionEmbedding:
    """Condition vector, timestep embedding and per-block modulations."""

    c: np.ndarray  # (B, cond_width)
    temb: np.ndarray  # (B, temb_width)
    mods: list  # per block: dict gamma1/beta1/gamma2/beta2 -> (B, C)


class ModulationHeads(Module):
    """Zero-initialized dense heads ``[c, temb] -> (gamma1, beta1, gamma2, beta2)`` for one block."""

    KEYS = ("gamma1", "beta1", "gamma2", "beta2")

    def __init__(self, store, name, d_in, width):
        super().__init__(store, name)
        self.heads = {k: Dense(store, f"{name}.{k}", d_in, width, init="zeros") for k in self.KEYS}

    def forward(self, e):
        return {k: h.forward(e) for k, h in self.heads.items()}

    def backward(self, dmods):
        de = 0.0
        for k, h in self.heads.items():
            de = de + h.backward(dmods[k])
        return de


# --------------------------------------------------------------------------
# Denoiser

class CMSSBlock(Module):
    """Condition-modulated VMSS block.

    ``o1 = (1 + g1) h + b1``, ``o1' = o1 + FFN(o1)``, ``o2 = g2 VMSS(o1') + b2``,
    output ``h + o2``. With ``literal=True`` the first modulation is ``g1 h + b1``.
    Modulations are per-channel, broadcast over the grid.
    """

    def __init__(self, store, name, width, d_state=8, literal=False):
        super().__init__(store, name)
        self.literal = literal
        self.ffn_in = Conv2d(store, f"{name}.ffn.fc1", width, 2 * width, 1)
        self.ffn_out = Conv2d(store, f"{name}.ffn.fc2", 2 * width, width, 1)
        self.vmss = VMSSBlock(store, f"{name}.vmss", width, d_state)

    def forward(self, h, mods):
        g1 = mods["gamma1"][:, :, None, None]
        b1 = mods["beta1"][:, :, None, None]
        g2 = mods["gamma2"][:, :, None, None]
        b2 = mods["beta2"][:, :, None, None]
        scale1 = g1 if self.literal else 1.0 + g1
        o1 = scale1 * h + b1
        f, self._act = silu(self.ffn_in.forward(o1))
        o1p = o1 + self.ffn_out.forward(f)
        v = self.vmss.forward(o1p)
        self._saved = (h, scale1, g2, v)
        return h + g2 * v + b2

    def backward(self, dout):
        h, scale1, g2, v = self._saved
        dmods = {
            "gamma2": (dout * v).sum(axis=(2, 3)),
            "beta2": dout.sum(axis=(2, 3)),
        }
        do1p = self.vmss.backward(dout * g2)
        do1 = do1p + self.ffn_in.backward(silu_backward(self.ffn_out.backward(do1p), self._act))
        dmods["gamma1"] = (do1 * h).sum(axis=(2, 3))
        dmods["beta1"] = do1.sum(axis=(2, 3))
        dh = dout + do1 * scale1
        return dh, dmods


class Denoiser(Module):
    """Noise predictor ``eps_hat(z_t, t, cond)`` built from CMSS blocks."""

    def __init__(self, store, cfg: DiffusionConfig, name="stdiff"):
        super().__init__(store, name)
        self.cfg = cfg
        C = cfg.width
        self.cond = ConditionEncoder(store, cfg, f"{name}.cond")
        # Input lift: a 3x3 conv on z_t plus a projected timestep embedding,
        # i.e. a conv over [z_t, broadcast temb] with a 1x1 footprint on temb.
        self.inp = Conv2d(store, f"{name}.in.conv", cfg.m_out, C, 3)
        self.inp_t = Dense(store, f"{name}.in.temb", cfg.temb_width, C)
        d_mod = cfg.cond_width + cfg.temb_width
        self.blocks = []
        self.mod_heads = []
        for i in range(cfg.n_blocks):
            self.blocks.append(CMSSBlock(store, f"{name}.block{i}", C, cfg.d_state, cfg.literal_modulation))
            self.mod_heads.append(ModulationHeads(store, f"{name}.block{i}.mod", d_mod, C))
        self.out = Conv2d(store, f"{name}.out.conv", C, cfg.m_out, 3, init="zeros")

    # condition --------------------------------------------------------------
    def build_condition(self, fused, mu, t) -> ConditionEmbedding:
        t = np.atleast_1d(t)
        c = self.cond.forward(fused, mu)
        if t.shape[0] == 1 and c.shape[0] > 1:
            t = np.repeat(t, c.shape[0])
        temb = timestep_embedding(t, self.cfg.temb_width).astype(c.dtype)
        e = np.concatenate([c, temb], axis=1)
        mods = [hd.forward(e) for hd in self.mod_heads]
        return ConditionEmbedding(c, temb, mods)

    def condition_backward(self, dmods_list):
        """Gradient of the modulations back to ``(dF_fused, dmu)``."""
        de = 0.0
        for hd, dm in zip(self.mod_heads, dmods_list):
            de = de + hd.backward(dm)
        dc = de[:, : self.cfg.cond_width]
        return self.cond.backward(np.ascontiguousarray(dc))

    # denoiser -----------------------------------------------------------------
    def forward(self, z_t, cond: ConditionEmbedding):
        if z_t.shape[1:] != (self.cfg.m_out, self.cfg.h, self.cfg.w):
            raise ShapeError(f"z_t {z_t.shape} does not match ({self.cfg.m_out}, {self.cfg.h}, {self.cfg.w})")
        h = self.inp.forward(z_t) + self.inp_t.forward(cond.temb)[:, :, None, None]
        for blk, mods in zip(self.blocks, cond.mods):
            h = blk.forward(h, mods)
        return self.out.forward(h)

    def backward(self, deps):
        """Returns ``(dz_t, per-block modulation grads)``."""
        dh = self.out.backward(deps)
        dmods_list = [None] * len(self.blocks)
        for i in range(len(self.blocks) - 1, -1, -1):
            dh, dmods_list[i] = self.blocks[i].backward(dh)
        self.inp_t.backward(dh.sum(axis=(2, 3)))
        dz = self.inp.backward(dh)
        return dz, dmods_list


def refine_loss(schedule: NoiseSchedule, denoiser: Denoiser, z0, fused, mu, rng):
    """Draw ``t`` and ``eps``, noise ``z0`` and score the predicted noise.

    Returns ``(loss, deps_hat, t, eps)``; ``deps_hat`` is the loss gradient
    with respect to the prediction, ready for :meth:`Denoiser.backward`.
    """
    B = z0.shape[0]
    t = rng.integers(1, schedule.T + 1, size=B)
    eps = rng.standard_normal(z0.shape).astype(mu.dtype)
    z_t = q_sample(schedule, z0.astype(mu.dtype), t, eps).astype(mu.dtype)
    cond = denoiser.build_condition(fused, mu, t)
    eps_hat = denoiser.forward(z_t, cond)
    loss, grad = mse_loss(eps_hat, eps)
    return loss, grad, t, eps


# --------------------------------------------------------------------------
# Sampling

def ddim_timesteps(T: int, n_steps: int) -> np.ndarray:
    """Uniform decreasing subsequence ``T = t_0 > ... > t_n = 0``."""
    if n_steps < 1 or n_steps > T:
        raise ValueError(f"n_steps must lie in [1, {T}], got {n_steps}")
    return np.round(np.linspace(T, 0, n_steps + 1)).astype(np.int64)


def ddim_sample_residual(eps_fn: Callable[[np.ndarray, int], np.ndarray], shape, schedule: NoiseSchedule,
                         n_steps: int = 250, eta: float = 0.0, seed: int = 0, z_T=None, dtype=np.float64):
    """Deterministic (``eta = 0``) DDIM from ``z_T ~ N(0, I)`` down to ``t = 0``.

    ``eps_fn(z, t)`` returns the predicted noise at integer step ``t``.
    """
    ts = ddim_timesteps(schedule.T, n_steps)
    rng = np.random.default_rng(seed)
    z = rng.standard_normal(shape).astype(dtype) if z_T is None else np.array(z_T, dtype=dtype)
    ab = schedule.alpha_bar
    for t, t_next in zip(ts[:-1], ts[1:]):
        eps = np.asarray(eps_fn(z, int(t)), dtype=np.float64)
        a_t, a_n = ab[t], ab[t_next]
        z0_hat = (z - np.sqrt(1.0 - a_t) * eps) / np.sqrt(a_t)
        sigma = eta * np.sqrt((1.0 - a_n) / (1.0 - a_t) * (1.0 - a_t / a_n)) if eta > 0 else 0.0
        z = np.sqrt(a_n) * z0_hat + np.sqrt(max(1.0 - a_n - sigma**2, 0.0)) * eps
        if sigma > 0:
            z = z + sigma * rng.standard_normal(shape)
        z = z.astype(dtype, copy=False)
    return z


def ddim_sample(mu, eps_fn, schedule: NoiseSchedule, n_steps: int = 250, eta: float = 0.0, seed: int = 0,
                z_T=None):
    """Refine a coarse forecast: returns ``(p, y_hat)`` with ``y_hat = clip(mu + p, 0, 1)``."""
    p = ddim_sample_residual(eps_fn, np.shape(mu), schedule, n_steps, eta, seed, z_T, dtype=np.asarray(mu).dtype)
    return p, np.clip(mu + p, 0.0, 1.0)


def denoiser_eps_fn(denoiser: Denoiser, fused, mu):
    """Wrap a trained denoiser as ``eps_fn`` for the samplers; ``c`` is computed once."""
    c = denoiser.cond.forward(fused, mu)
    B = c.shape[0]

    def eps_fn(z, t):
        temb = timestep_embedding(np.full(B, t), denoiser.cfg.temb_width).astype(c.dtype)
        e = np.concatenate([c, temb], axis=1)
        cond = ConditionEmbedding(c, temb, [hd.forward(e) for hd in denoiser.mod_heads])
        return denoiser.forward(z.astype(c.dtype, copy=False), cond)

    return eps_fn
