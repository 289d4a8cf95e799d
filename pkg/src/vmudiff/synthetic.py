"""Seeded synthetic episodes: advected Gaussian rain cells with a leading satellite proxy.

Radar frames are sums of anisotropic Gaussian blobs moving at constant
velocity and growing or decaying geometrically. Satellite channel ``k`` at
frame ``t`` is the radar field at ``t + sat_lag`` smoothed by a Gaussian of
width ``1 + k``, computed in closed form from the blob parameters, so the
satellite stream carries information about the radar future.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .core_types import (
    RADAR_MAX_DBZ,
    RADAR_MIN_DBZ,
    RadarSequence,
    SatelliteSequence,
    kelvin_to_unit,
    radar_to_unit,
    read_sequence,
    unit_to_kelvin,
    write_sequence,
)
from .errors import DataError

N_SAT = 4
SPLITS = ("train", "val", "test")
# Blob tails below this are zeroed, keeping normalized cells either 0 or >= 2**-24
# so residual targets reconstruct exactly.
TRACE_DBZ = 1e-3


@dataclass(frozen=True)
class Blob:
    """One rain cell. ``velocity = (vx, vy)`` in columns and rows per frame."""

    row: float
    col: float
    velocity: tuple[float, float]
    sigma: tuple[float, float]  # (along rows, along columns)
    peak: float
    growth: float = 1.0

    def center(self, t: float) -> tuple[float, float]:
        return self.row + self.velocity[1] * t, self.col + self.velocity[0] * t

    def amplitude(self, t: float) -> float:
        return self.peak * self.growth**t


@dataclass(frozen=True)
class EpisodeParams:
    seed: int = 0
    n_in: int = 5
    m_out: int = 5
    h: int = 32
    w: int = 32
    n_blobs: tuple[int, int] = (1, 4)
    velocity: tuple[float, float] = (-2.0, 2.0)
    sigma: tuple[float, float] = (2.0, 6.0)
    intensity: tuple[float, float] = (30.0, 60.0)
    growth: tuple[float, float] = (0.9, 1.1)
    sat_lag: int = 2
    noise: float = 0.02
    blobs: tuple[Blob, ...] | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.n_in < 1 or self.m_out < 1:
            raise ValueError("n_in and m_out must be >= 1")
        if self.h < 16 or self.w < 16:
            raise ValueError(f"grid must be at least 16x16, got {self.h}x{self.w}")
        if self.sat_lag < 0:
            raise ValueError("sat_lag must be >= 0")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a u64")
        for name in ("n_blobs", "velocity", "sigma", "intensity", "growth"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"range {name}={lo, hi} is empty")
        if not 1 <= self.n_blobs[0] <= self.n_blobs[1] <= 4:
            raise ValueError("n_blobs must lie within 1..4")
        if self.sigma[0] <= 0:
            raise ValueError("sigma must be positive")
        if self.sigma[1] > min(self.h, self.w) / 2:
            raise ValueError(f"sigma up to {self.sigma[1]} cells does not fit a {self.h}x{self.w} grid")

    @property
    def total_frames(self) -> int:
        return self.n_in + self.m_out


def sample_blobs(params: EpisodeParams, rng: np.random.Generator) -> tuple[Blob, ...]:
    if params.blobs is not None:
        return tuple(params.blobs)
    k = int(rng.integers(params.n_blobs[0], params.n_blobs[1] + 1))
    blobs = []
    t_mid = params.n_in  # place cells inside the grid at the first forecast frame
    for _ in range(k):
        vx, vy = rng.uniform(*params.velocity, size=2)
        sr, sc = rng.uniform(*params.sigma, size=2)
        peak = rng.uniform(*params.intensity)
        growth = rng.uniform(*params.growth)
        r_mid = rng.uniform(0.2 * params.h, 0.8 * params.h)
        c_mid = rng.uniform(0.2 * params.w, 0.8 * params.w)
        blobs.append(Blob(r_mid - vy * t_mid, c_mid - vx * t_mid, (vx, vy), (sr, sc), peak, growth))
    return tuple(blobs)


def render(blobs, t: float, h: int, w: int, smooth: float = 0.0) -> np.ndarray:
    """Unclipped dBZ field at time ``t``; ``smooth`` convolves each blob with a Gaussian of that width."""
    rows = np.arange(h, dtype=np.float64)[:, None]
    cols = np.arange(w, dtype=np.float64)[None, :]
    field_ = np.zeros((h, w))
    for b in blobs:
        r0, c0 = b.center(t)
        vr = b.sigma[0] ** 2 + smooth**2
        vc = b.sigma[1] ** 2 + smooth**2
        amp = b.amplitude(t) * b.sigma[0] * b.sigma[1] / math.sqrt(vr * vc)
        field_ += amp * np.exp(-((rows - r0) ** 2) / (2 * vr) - (cols - c0) ** 2 / (2 * vc))
    return field_


def generate_episode(params: EpisodeParams) -> tuple[RadarSequence, SatelliteSequence]:
    """Raw-unit radar (``n_in + m_out`` frames, dBZ) and satellite (``n_in`` frames, K)."""
    rng = np.random.default_rng(params.seed)
    blobs = sample_blobs(params, rng)
    h, w = params.h, params.w
    radar = np.empty((params.total_frames, 1, h, w), np.float32)
    for t in range(params.total_frames):
        radar[t, 0] = np.clip(render(blobs, t, h, w), RADAR_MIN_DBZ, RADAR_MAX_DBZ)
    radar[radar < TRACE_DBZ] = 0.0
    sat_unit = np.empty((params.n_in, N_SAT, h, w))
    for t in range(params.n_in):
        for k in range(N_SAT):
            sat_unit[t, k] = render(blobs, t + params.sat_lag, h, w, smooth=1.0 + k) / RADAR_MAX_DBZ
    if params.noise > 0:
        sat_unit += params.noise * rng.standard_normal(sat_unit.shape)
    sat = unit_to_kelvin(np.clip(sat_unit, 0.0, 1.0)).astype(np.float32)
    return RadarSequence(radar, normalized=False), SatelliteSequence(sat, normalized=False)


# --------------------------------------------------------------------------
# Datasets

@dataclass(frozen=True)
class ManifestRecord:
    idx: int
    split: str
    radar_path: str
    sat_path: str
    seed: int

    def line(self) -> str:
        return f"{self.idx}\t{self.split}\t{self.radar_path}\t{self.sat_path}\t{self.seed}"


@dataclass
class Manifest:
    path: Path
    records: list[ManifestRecord]

    def split(self, name: str) -> list[ManifestRecord]:
        return [r for r in self.records if r.split == name]

    def resolve(self, rel: str) -> Path:
        return self.path.parent / rel


MANIFEST_NAME = "manifest.tsv"


def episode_seed(master_seed: int, idx: int) -> int:
    return int(np.random.SeedSequence([master_seed, idx]).generate_state(1, np.uint64)[0])


def assign_splits(count: int, fractions, seed: int) -> list[str]:
    """Exact-count split: rounded fractions, then a seeded permutation of indices."""
    if count < 1:
        raise ValueError("count must be >= 1")
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or min(fractions) < 0 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"split fractions must be three nonnegative values summing to 1, got {fractions}")
    n_train = int(round(fractions[0] * count))
    n_val = min(int(round(fractions[1] * count)), count - n_train)
    labels = ["train"] * n_train + ["val"] * n_val + ["test"] * (count - n_train - n_val)
    order = np.random.default_rng([seed, count]).permutation(count)
    out = [""] * count
    for pos, idx in enumerate(order):
        out[idx] = labels[pos]
    return out


def make_dataset(count: int, params: EpisodeParams, out_dir, split=(0.8, 0.1, 0.1)) -> Manifest:
    """Write ``count`` episodes and a manifest; episode ``i`` is seeded from ``(params.seed, i)``."""
    if count < 1:
        raise ValueError("count must be >= 1")
    labels = assign_splits(count, split, params.seed)
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        if not os.access(out, os.W_OK):
            raise PermissionError(f"{out} is not writable")
    except OSError as exc:
        raise DataError(f"cannot write dataset to {out}: {exc}") from exc
    records = []
    for idx in range(count):
        s = episode_seed(params.seed, idx)
        radar, sat = generate_episode(replace(params, seed=s))
        rp, sp = f"ep{idx}_radar.vmud", f"ep{idx}_sat.vmud"
        write_sequence(radar, out / rp)
        write_sequence(sat, out / sp)
        records.append(ManifestRecord(idx, labels[idx], rp, sp, s))
    path = out / MANIFEST_NAME
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("".join(r.line() + "\n" for r in records))
    return Manifest(path, records)


def read_manifest(path) -> Manifest:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    records = []
    for n, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        parts = line.split("\t")
        if len(parts) != 5 or parts[1] not in SPLITS:
            raise DataError(f"{path}:{n}: malformed manifest record")
        records.append(ManifestRecord(int(parts[0]), parts[1], parts[2], parts[3], int(parts[4])))
    return Manifest(path, sorted(records, key=lambda r: r.idx))


@dataclass
class Episode:
    """Normalized arrays for one record: inputs, satellite and target frames."""

    idx: int
    radar_in: np.ndarray  # (n_in, 1, H, W)
    sat_in: np.ndarray  # (n_in, 4, H, W)
    target: np.ndarray  # (m_out, 1, H, W)


def load_episode(manifest: Manifest, record: ManifestRecord, n_in: int, m_out: int) -> Episode:
    radar = read_sequence(manifest.resolve(record.radar_path))
    sat = read_sequence(manifest.resolve(record.sat_path))
    if radar.t_len != n_in + m_out or sat.t_len != n_in:
        raise DataError(f"episode {record.idx}: {radar.t_len} radar / {sat.t_len} satellite frames, "
                        f"expected {n_in + m_out} / {n_in}")
    if radar.c_len != 1 or sat.c_len != N_SAT or (radar.h, radar.w) != (sat.h, sat.w):
        raise DataError(f"episode {record.idx}: channel or grid mismatch")
    r = radar.data if radar.normalized else radar_to_unit(radar.data)
    s = sat.data if sat.normalized else kelvin_to_unit(sat.data)
    return Episode(record.idx, r[:n_in], s, r[n_in:])
