"""Run configuration with a flat ``key = value`` file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .coarse import VmuConfig
from .diffusion import DiffusionConfig


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    data_dir: str = "data"
    out: str = "run"
    checkpoint: str = "model.vmck"
    # data
    count: int = 100
    n_in: int = 5
    m_out: int = 5
    h: int = 32
    w: int = 32
    sat_lag: int = 2
    # coarse network
    base_width: int = 16
    levels: int = 3
    blocks_per_level: int = 2
    d_state: int = 8
    # diffusion
    diff_width: int = 16
    diff_blocks: int = 4
    T: int = 1000
    ddim_steps: int = 50
    eta: float = 0.0
    literal_modulation: bool = False
    # optimization
    alpha: float = 0.7
    lr: float = 1e-4
    iters: int = 2000
    batch_size: int = 2
    warmup_frac: float = 0.0
    log_every: int = 1
    ckpt_every: int = 500
    # ablations
    msfusion: bool = True
    stdiff: bool = True

    def __post_init__(self):
        positive = ("count", "n_in", "m_out", "h", "w", "base_width", "levels", "blocks_per_level", "d_state",
                    "diff_width", "diff_blocks", "T", "ddim_steps", "iters", "batch_size", "log_every", "ckpt_every")
        for name in positive:
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.ddim_steps > self.T:
            raise ValueError(f"ddim_steps ({self.ddim_steps}) exceeds T ({self.T})")
        if not 0.0 <= self.warmup_frac <= 1.0:
            raise ValueError("warmup_frac must lie in [0, 1]")
        if self.lr <= 0 or self.eta < 0 or self.sat_lag < 0:
            raise ValueError("lr must be positive; eta and sat_lag nonnegative")

    # derived model configs ---------------------------------------------------
    def vmu(self) -> VmuConfig:
        return VmuConfig(n_in=self.n_in, m_out=self.m_out, h=self.h, w=self.w, base_width=self.base_width,
                         levels=self.levels, blocks_per_level=self.blocks_per_level, d_state=self.d_state,
                         msfusion=self.msfusion)

    def diffusion(self) -> DiffusionConfig:
        v = self.vmu()
        c, fh, fw = v.bottleneck_shape
        return DiffusionConfig(m_out=self.m_out, h=self.h, w=self.w, fused_channels=c, fused_h=fh, fused_w=fw,
                               width=self.diff_width, n_blocks=self.diff_blocks, d_state=self.d_state,
                               literal_modulation=self.literal_modulation)

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)

    # serialization -----------------------------------------------------------
    def to_text(self, keys=None) -> str:
        keys = keys or [f.name for f in fields(self)]
        return "".join(f"{k} = {_format(getattr(self, k))}\n" for k in keys)


# Keys that fix the parameter layout; they travel with a checkpoint.
MODEL_KEYS = ("n_in", "m_out", "h", "w", "base_width", "levels", "blocks_per_level", "d_state", "diff_width",
              "diff_blocks", "T", "msfusion", "stdiff", "literal_modulation")


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _parse(kind, text: str):
    text = text.strip()
    if kind is bool:
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    return kind(text)


_TYPES = {f.name: {"int": int, "float": float, "str": str, "bool": bool}[f.type] for f in fields(RunConfig)}


def parse_config_text(text: str, source: str = "<config>") -> dict:
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{source}:{n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in _TYPES:
            raise ValueError(f"{source}:{n}: unknown key {key!r}")
        try:
            out[key] = _parse(_TYPES[key], value)
        except ValueError as exc:
            raise ValueError(f"{source}:{n}: bad value for {key}: {exc}") from None
    return out


def load_config(path=None, **overrides) -> RunConfig:
    """File values first, then non-``None`` overrides."""
    values = {}
    if path is not None:
        values.update(parse_config_text(Path(path).read_text(encoding="utf-8"), str(path)))
    values.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig(**values)
