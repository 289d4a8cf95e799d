"""U-shaped VMSS network producing the deterministic coarse forecast."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .nn import Conv2d, Module, mse_loss, upsample_nearest, upsample_nearest_backward
from .stab import STAB, StabConfig, concat_streams, unfold_time
from .vmss import VMSSBlock

MU_MAX = 1.2


@dataclass(frozen=True)
class VmuConfig:
    n_in: int = 5
    m_out: int = 5
    h: int = 32
    w: int = 32
    c_radar: int = 4
    c_sat: int = 4
    base_width: int = 16
    levels: int = 3
    blocks_per_level: int = 2
    d_state: int = 8
    msfusion: bool = True
    selective: bool = True

    def __post_init__(self):
        if self.n_in < 1 or self.m_out < 1 or self.levels < 1:
            raise ValueError("n_in, m_out and levels must be >= 1")
        f = 2 ** (self.levels - 1)
        if self.h % f or self.w % f:
            raise ShapeError(f"grid {self.h}x{self.w} not divisible by {f} for {self.levels} levels")

    def width(self, level: int) -> int:
        return self.base_width * 2**level

    @property
    def bottleneck_shape(self) -> tuple[int, int, int]:
        f = 2 ** (self.levels - 1)
        return self.width(self.levels - 1), self.h // f, self.w // f


class CoarsePredictor(Module):
    """Radar + satellite frames -> ``(mu, F_fused)``.

    Inputs are normalized ``(B, n, 1, H, W)`` radar and ``(B, n, 4, H, W)``
    satellite stacks; ``mu`` is ``(B, m, H, W)`` and ``F_fused`` the
    bottleneck map.
    """

    def __init__(self, store, cfg: VmuConfig, name="vmu"):
        super().__init__(store, name)
        self.cfg = cfg
        self.embed_radar = Conv2d(store, f"{name}.embed.radar", 1, cfg.c_radar, 1)
        self.embed_sat = Conv2d(store, f"{name}.embed.sat", 4, cfg.c_sat, 1)
        if cfg.msfusion:
            self.stab = STAB(store, StabConfig(cfg.n_in, cfg.c_radar, cfg.c_sat, cfg.h, cfg.w))
        fused_ch = cfg.n_in * (cfg.c_radar + cfg.c_sat)
        self.stem = Conv2d(store, f"{name}.enc0.stem", fused_ch, cfg.width(0), 1)
        self.enc, self.down = [], []
        for lvl in range(cfg.levels):
            c = cfg.width(lvl)
            self.enc.append([VMSSBlock(store, f"{name}.enc{lvl}.vmss{j}", c, cfg.d_state, cfg.selective)
                             for j in range(cfg.blocks_per_level)])
            if lvl < cfg.levels - 1:
                self.down.append(Conv2d(store, f"{name}.enc{lvl}.down", c, cfg.width(lvl + 1), 2, stride=2, padding=0))
        self.up, self.fuse, self.dec = {}, {}, {}
        for lvl in range(cfg.levels - 2, -1, -1):
            c = cfg.width(lvl)
            self.up[lvl] = Conv2d(store, f"{name}.dec{lvl}.up", cfg.width(lvl + 1), c, 3)
            self.fuse[lvl] = Conv2d(store, f"{name}.dec{lvl}.fuse", 2 * c, c, 1)
            self.dec[lvl] = [VMSSBlock(store, f"{name}.dec{lvl}.vmss{j}", c, cfg.d_state, cfg.selective)
                             for j in range(cfg.blocks_per_level)]
        self.head = Conv2d(store, f"{name}.head", cfg.width(0), cfg.m_out, 1)

    def _embed(self, conv, x):
        B, T, C, H, W = x.shape
        y = conv.forward(np.ascontiguousarray(x).reshape(B * T, C, H, W))
        return y.reshape(B, T, -1, H, W)

    def _embed_backward(self, conv, dy):
        B, T, C, H, W = dy.shape
        dx = conv.backward(np.ascontiguousarray(dy).reshape(B * T, C, H, W))
        return dx.reshape(B, T, -1, H, W)

    def _check(self, radar, sat):
        c = self.cfg
        if radar.ndim != 5 or sat.ndim != 5:
            raise ShapeError("inputs must be (B, n, C, H, W)")
        if radar.shape[1] != sat.shape[1]:
            raise ShapeError(f"radar has {radar.shape[1]} frames but satellite has {sat.shape[1]}")
        if radar.shape[1:] != (c.n_in, 1, c.h, c.w) or sat.shape[1:] != (c.n_in, 4, c.h, c.w) \
                or radar.shape[0] != sat.shape[0]:
            raise ShapeError(f"inputs {radar.shape}/{sat.shape} do not match config "
                             f"n={c.n_in}, grid {c.h}x{c.w}")

    def forward_raw(self, radar, sat):
        """Unclamped head output and bottleneck features."""
        self._check(radar, sat)
        er = self._embed(self.embed_radar, radar)
        es = self._embed(self.embed_sat, sat)
        x = self.stab.forward(er, es) if self.cfg.msfusion else concat_streams(er, es)
        x = self.stem.forward(x)
        skips = []
        for lvl in range(self.cfg.levels):
            for blk in self.enc[lvl]:
                x = blk.forward(x)
            if lvl < self.cfg.levels - 1:
                skips.append(x)
                x = self.down[lvl].forward(x)
        fused = x
        for lvl in range(self.cfg.levels - 2, -1, -1):
            x = self.up[lvl].forward(upsample_nearest(x))
            x = self.fuse[lvl].forward(np.concatenate([x, skips[lvl]], axis=1))
            for blk in self.dec[lvl]:
                x = blk.forward(x)
        return self.head.forward(x), fused

    def forward(self, radar, sat):
        raw, fused = self.forward_raw(radar, sat)
        self._raw = raw
        return np.clip(raw, 0.0, MU_MAX), fused

    def backward_raw(self, draw, dfused=None):
        """Backpropagate from head output (and optionally the bottleneck)."""
        cfg = self.cfg
        dx = self.head.backward(draw)
        dskips = {}
        for lvl in range(0, cfg.levels - 1):
            for blk in reversed(self.dec[lvl]):
                dx = blk.backward(dx)
            dcat = self.fuse[lvl].backward(dx)
            c = cfg.width(lvl)
            dskips[lvl] = dcat[:, c:]
            dx = upsample_nearest_backward(self.up[lvl].backward(np.ascontiguousarray(dcat[:, :c])))
        if dfused is not None:
            dx = dx + dfused
        for lvl in range(cfg.levels - 1, -1, -1):
            if lvl < cfg.levels - 1:
                dx = self.down[lvl].backward(dx) + dskips[lvl]
            for blk in reversed(self.enc[lvl]):
                dx = blk.backward(dx)
        dx = self.stem.backward(dx)
        if cfg.msfusion:
            der, des = self.stab.backward(dx)
        else:
            d5 = unfold_time(dx, cfg.n_in)
            der, des = d5[:, :, :cfg.c_radar], d5[:, :, cfg.c_radar:]
        return self._embed_backward(self.embed_radar, der), self._embed_backward(self.embed_sat, des)

    def backward(self, dmu, dfused=None):
        """Backpropagate through the output clamp; returns input gradients."""
        mask = (self._raw >= 0.0) & (self._raw <= MU_MAX)
        return self.backward_raw(dmu * mask, dfused)


def coarse_loss(mu, target):
    """Mean squared error and its gradient with respect to ``mu``."""
    return mse_loss(mu, target)
