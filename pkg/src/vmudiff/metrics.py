"""Forecast verification: threshold skill scores, SSIM and spectral sharpness."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from os import PathLike

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError

THRESHOLDS = (25.0, 35.0, 40.0, 45.0, 50.0)


@dataclass(frozen=True)
class ContingencyTable:
    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError("contingency counts must be nonnegative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "ContingencyTable") -> "ContingencyTable":
        return ContingencyTable(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)


def _same_shape(a, b, what):
    if np.shape(a) != np.shape(b):
        raise ShapeError(f"{what}: shape {np.shape(a)} != {np.shape(b)}")


def contingency(pred_dbz, obs_dbz, threshold: float) -> ContingencyTable:
    """Events are cells at or above ``threshold`` dBZ."""
    _same_shape(pred_dbz, obs_dbz, "contingency")
    p = np.asarray(pred_dbz) >= threshold
    o = np.asarray(obs_dbz) >= threshold
    tp = int(np.count_nonzero(p & o))
    fp = int(np.count_nonzero(p & ~o))
    fn = int(np.count_nonzero(~p & o))
    return ContingencyTable(tp, fp, fn, p.size - tp - fp - fn)


# Scores return None when undefined (zero denominator).

def csi(t: ContingencyTable) -> float | None:
    d = t.tp + t.fp + t.fn
    return t.tp / d if d else None


def far(t: ContingencyTable) -> float | None:
    d = t.tp + t.fp
    return t.fp / d if d else None


def hss(t: ContingencyTable) -> float | None:
    tp, fp, fn, tn = (float(v) for v in (t.tp, t.fp, t.fn, t.tn))
    d = (tp + fn) * (fn + tn) + (tp + fp) * (fp + tn)
    return 2.0 * (tp * tn - fp * fn) / d if d else None


# --------------------------------------------------------------------------
# SSIM

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def _filter_valid(img, win):
    return np.einsum("ijkl,kl->ij", sliding_window_view(img, win.shape), win)


def ssim(x, y, data_range: float = 1.0, k1: float = 0.01, k2: float = 0.03) -> float:
    """Gaussian-window SSIM averaged over all fully contained window positions."""
    _same_shape(x, y, "ssim")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or min(x.shape) < SSIM_WINDOW:
        raise ShapeError(f"ssim needs 2-D frames of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {x.shape}")
    win = gaussian_window()
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    mx, my = _filter_valid(x, win), _filter_valid(y, win)
    sxx = _filter_valid(x * x, win) - mx * mx
    syy = _filter_valid(y * y, win) - my * my
    sxy = _filter_valid(x * y, win) - mx * my
    s = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
    return float(s.mean())


# --------------------------------------------------------------------------
# Sharpness

def high_frequency_energy(frame) -> float:
    """Fourier power at radial frequencies above half the Nyquist frequency."""
    f = np.asarray(frame, dtype=np.float64)
    h, w = f.shape
    power = np.abs(np.fft.fft2(f)) ** 2
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.fftfreq(w)[None, :]
    radius = np.sqrt(fx**2 + fy**2)
    return float(power[radius > 0.25].sum())


def spectral_sharpness(pred, obs) -> float:
    """High-frequency energy of ``pred`` over that of ``obs`` (1 = matched, < 1 = blurrier)."""
    _same_shape(pred, obs, "spectral_sharpness")
    if np.ndim(pred) != 2 or np.shape(pred)[0] != np.shape(pred)[1]:
        raise ShapeError(f"spectral_sharpness needs square frames, got {np.shape(pred)}")
    e_obs = high_frequency_energy(obs)
    e_pred = high_frequency_energy(pred)
    if e_obs == 0.0:
        return 1.0 if e_pred == 0.0 else math.inf
    return e_pred / e_obs


# --------------------------------------------------------------------------
# Aggregated report

@dataclass
class MetricReport:
    """Pooled threshold scores plus per-lead SSIM and sharpness.

    Tables are summed over all frames and episodes before scoring.
    """

    tables: dict = field(default_factory=lambda: {t: ContingencyTable(0, 0, 0, 0) for t in THRESHOLDS})
    ssim_by_lead: dict = field(default_factory=dict)
    sharp_by_lead: dict = field(default_factory=dict)

    def add(self, pred_dbz, obs_dbz) -> "MetricReport":
        """Accumulate one ``(m, H, W)`` or ``(m, 1, H, W)`` sequence pair (raw dBZ)."""
        _same_shape(pred_dbz, obs_dbz, "evaluate_run")
        p = np.asarray(pred_dbz, dtype=np.float64)
        o = np.asarray(obs_dbz, dtype=np.float64)
        if p.ndim == 4:
            if p.shape[1] != 1:
                raise ShapeError(f"expected single-channel frames, got {p.shape}")
            p, o = p[:, 0], o[:, 0]
        if p.ndim != 3:
            raise ShapeError(f"expected (m, H, W) frames, got {p.shape}")
        for thr in THRESHOLDS:
            self.tables[thr] = self.tables[thr] + contingency(p, o, thr)
        for lead in range(p.shape[0]):
            pu, ou = p[lead] / 70.0, o[lead] / 70.0
            self.ssim_by_lead.setdefault(lead, []).append(ssim(pu, ou))
            self.sharp_by_lead.setdefault(lead, []).append(spectral_sharpness(pu, ou))
        return self

    def scores(self, thr):
        t = self.tables[thr]
        return csi(t), hss(t), far(t)

    def _mean(self, by_lead):
        vals = [v for vs in by_lead.values() for v in vs if np.isfinite(v)]
        return float(np.mean(vals)) if vals else None

    @property
    def ssim(self) -> float | None:
        return self._mean(self.ssim_by_lead)

    @property
    def sharpness(self) -> float | None:
        return self._mean(self.sharp_by_lead)

    def lead_means(self, by_lead) -> list[float]:
        return [float(np.mean(by_lead[k])) for k in sorted(by_lead)]

    def to_tsv(self) -> str:
        rows = ["thr\tcsi\thss\tfar"]
        for thr in THRESHOLDS:
            rows.append("\t".join([_fmt(thr, 0)] + [_fmt(v) for v in self.scores(thr)]))
        rows.append(f"ssim\t{_fmt(self.ssim)}")
        rows.append(f"sharpness\t{_fmt(self.sharpness)}")
        return "\n".join(rows) + "\n"

    def write(self, path: str | PathLike) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.to_tsv())


def _fmt(v, digits=6):
    if v is None or (isinstance(v, float) and not math.isfinite(v)):
        return "NA"
    return f"{v:.{digits}f}"


def evaluate_run(pred_seq, obs_seq) -> MetricReport:
    """Report for one sequence pair, or a list of pairs pooled together."""
    report = MetricReport()
    if isinstance(pred_seq, (list, tuple)):
        if len(pred_seq) != len(obs_seq):
            raise ShapeError(f"{len(pred_seq)} forecasts vs {len(obs_seq)} observations")
        for p, o in zip(pred_seq, obs_seq):
            report.add(_data(p), _data(o))
    else:
        report.add(_data(pred_seq), _data(obs_seq))
    return report


def _data(seq):
    return seq.data if hasattr(seq, "data") else np.asarray(seq)
