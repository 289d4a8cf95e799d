"""Spatio-temporal attention: spatial gates per stream, then shared temporal/channel gates.

Feature tensors here are ``(B, T, C, H, W)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .nn import Conv2d, Dense, Module, sigmoid, sigmoid_backward, silu, silu_backward


@dataclass(frozen=True)
class StabConfig:
    t_len: int
    c_radar: int
    c_sat: int
    h: int
    w: int
    sab_kernel: int = 5
    ratio: int = 4

    def __post_init__(self):
        if min(self.t_len, self.c_radar, self.c_sat, self.h, self.w) < 1:
            raise ValueError("all StabConfig widths must be >= 1")
        if self.sab_kernel % 2 == 0:
            raise ValueError("SAB kernel must be odd")


class SpatialAttention(Module):
    """Per-timestep gate from channel mean+max pooled maps through a k x k conv."""

    def __init__(self, store, name, kernel=5, init="uniform"):
        super().__init__(store, name)
        self.conv = Conv2d(store, f"{name}.conv", 2, 1, kernel, padding=kernel // 2, init=init)

    def forward(self, x):
        B, T, C, H, W = x.shape
        flat = x.reshape(B * T, C, H, W)
        arg = flat.argmax(axis=1)
        pooled = np.stack([flat.mean(axis=1), flat.max(axis=1)], axis=1)
        gate = sigmoid(self.conv.forward(pooled))  # (B*T, 1, H, W)
        self._cache = (x.shape, flat, arg, gate)
        return (flat * gate).reshape(x.shape)

    def backward(self, dy):
        shape, flat, arg, gate = self._cache
        B, T, C, H, W = shape
        dflat = dy.reshape(B * T, C, H, W)
        dgate = (dflat * flat).sum(axis=1, keepdims=True)
        dx = dflat * gate
        dpooled = self.conv.backward(sigmoid_backward(dgate, gate))
        dx += dpooled[:, 0:1] / C
        np.put_along_axis(dx, arg[:, None], np.take_along_axis(dx, arg[:, None], 1) + dpooled[:, 1:2], axis=1)
        return dx.reshape(shape)


class _Gate(Module):
    """Global average -> dense -> silu -> dense -> sigmoid over one axis."""

    def __init__(self, store, name, width, ratio, init="uniform"):
        super().__init__(store, name)
        hidden = max(width // ratio, 1)
        self.fc1 = Dense(store, f"{name}.fc1", width, hidden, init=init)
        self.fc2 = Dense(store, f"{name}.fc2", hidden, width, init=init)

    def forward(self, pooled):
        a, self._act = silu(self.fc1.forward(pooled))
        self._g = sigmoid(self.fc2.forward(a))
        return self._g

    def backward(self, dg):
        da = self.fc2.backward(sigmoid_backward(dg, self._g))
        return self.fc1.backward(silu_backward(da, self._act))


class ChannelTemporalAttention(Module):
    """Temporal gate over T, then channel gate over C; both multiplicative."""

    def __init__(self, store, name, t_len, channels, ratio=4, init="uniform"):
        super().__init__(store, name)
        self.temporal = _Gate(store, f"{name}.temporal", t_len, ratio, init)
        self.channel = _Gate(store, f"{name}.channel", channels, ratio, init)
        self.t_len = t_len
        self.channels = channels

    def forward(self, x):
        B, T, C, H, W = x.shape
        if T != self.t_len or C != self.channels:
            raise ShapeError(f"{self.name}: expected T={self.t_len}, C={self.channels}, got {x.shape}")
        a = self.temporal.forward(x.mean(axis=(2, 3, 4)))  # (B, T)
        x1 = x * a[:, :, None, None, None]
        b = self.channel.forward(x1.mean(axis=(1, 3, 4)))  # (B, C)
        self._cache = (x, a, x1, b)
        return x1 * b[:, None, :, None, None]

    def backward(self, dy):
        x, a, x1, b = self._cache
        B, T, C, H, W = x.shape
        db = (dy * x1).sum(axis=(1, 3, 4))
        dpool_c = self.channel.backward(db)
        dx1 = dy * b[:, None, :, None, None] + dpool_c[:, None, :, None, None] / (T * H * W)
        da = (dx1 * x).sum(axis=(2, 3, 4))
        dpool_t = self.temporal.backward(da)
        return dx1 * a[:, :, None, None, None] + dpool_t[:, :, None, None, None] / (C * H * W)


class STAB(Module):
    """Fuse radar and satellite feature streams into ``(B, T*C, H, W)``.

    Channel index of the output is ``t * (c_radar + c_sat) + c``.
    """

    def __init__(self, store, cfg: StabConfig, name="stab", init="uniform"):
        super().__init__(store, name)
        self.cfg = cfg
        self.sab_radar = SpatialAttention(store, f"{name}.sab_radar", cfg.sab_kernel, init)
        self.sab_sat = SpatialAttention(store, f"{name}.sab_sat", cfg.sab_kernel, init)
        self.ctab = ChannelTemporalAttention(store, f"{name}.ctab", cfg.t_len, cfg.c_radar + cfg.c_sat, cfg.ratio, init)

    def forward(self, radar, sat):
        if radar.ndim != 5 or sat.ndim != 5 or radar.shape[0] != sat.shape[0] \
                or not radar.shape[1] == sat.shape[1] == self.cfg.t_len or radar.shape[3:] != sat.shape[3:]:
            raise ShapeError(f"stab: stream shapes disagree: radar {radar.shape}, satellite {sat.shape}")
        if radar.shape[2] != self.cfg.c_radar or sat.shape[2] != self.cfg.c_sat:
            raise ShapeError(f"stab: channel widths {radar.shape[2]}/{sat.shape[2]} != config")
        fused = np.concatenate([self.sab_radar.forward(radar), self.sab_sat.forward(sat)], axis=2)
        out = self.ctab.forward(fused)
        return fold_time(out)

    def backward(self, dy):
        cr = self.cfg.c_radar
        B, TC, H, W = dy.shape
        dfused = self.ctab.backward(unfold_time(dy, self.cfg.t_len))
        return self.sab_radar.backward(dfused[:, :, :cr]), self.sab_sat.backward(dfused[:, :, cr:])


def fold_time(x):
    """``(B, T, C, H, W)`` -> ``(B, T*C, H, W)``."""
    B, T, C, H, W = x.shape
    return np.ascontiguousarray(x).reshape(B, T * C, H, W)


def unfold_time(x, t_len):
    B, TC, H, W = x.shape
    return x.reshape(B, t_len, TC // t_len, H, W)


def concat_streams(radar, sat):
    """Fusion without attention: the w/o-MSFusion ablation."""
    if radar.shape[:2] != sat.shape[:2] or radar.shape[3:] != sat.shape[3:]:
        raise ShapeError(f"concat: stream shapes disagree: radar {radar.shape}, satellite {sat.shape}")
    return fold_time(np.concatenate([radar, sat], axis=2))
