"""Frame sequences, unit normalization and the VMUD binary file format.

A :class:`FrameSequence` is a rank-4 ``(t, c, h, w)`` float32 stack. Batches
are plain lists of sequences; the network code stacks them on a leading axis.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from os import PathLike
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    DimOverflowError,
    FormatError,
    NumericError,
    ShapeError,
    TruncatedPayloadError,
    VersionMismatchError,
)

RADAR_MIN_DBZ = 0.0
RADAR_MAX_DBZ = 70.0
SAT_MIN_K = 180.0
SAT_MAX_K = 320.0
SAT_CHANNELS = ("C8", "C11", "C13", "C15")

MAGIC = b"VMUD"
VERSION = 1
_HEADER = struct.Struct("<4sIIIIIB3x")
# Refuse headers describing more than 2**32 cells (16 GiB of payload).
_MAX_CELLS = 2**32


@dataclass(frozen=True)
class FrameSequence:
    """Immutable ``(t, c, h, w)`` grid stack of 32-bit reals."""

    data: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float32)
        if arr.ndim != 4:
            raise ShapeError(f"expected rank-4 (t, c, h, w) data, got shape {arr.shape}")
        if arr.shape[0] < 1:
            raise ShapeError("t_len must be >= 1")
        _check_finite(arr)
        arr = arr.copy() if arr is self.data else arr
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def t_len(self) -> int:
        return self.data.shape[0]

    @property
    def c_len(self) -> int:
        return self.data.shape[1]

    @property
    def h(self) -> int:
        return self.data.shape[2]

    @property
    def w(self) -> int:
        return self.data.shape[3]

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    def __eq__(self, other):
        if not isinstance(other, FrameSequence):
            return NotImplemented
        return (
            self.normalized == other.normalized
            and self.data.shape == other.data.shape
            and self.data.tobytes() == other.data.tobytes()
        )

    __hash__ = None


class RadarSequence(FrameSequence):
    """Single-channel reflectivity: dBZ when raw, [0, 1] when normalized."""

    def __post_init__(self):
        super().__post_init__()
        if self.c_len != 1:
            raise ShapeError(f"radar sequence needs c_len=1, got {self.c_len}")


class SatelliteSequence(FrameSequence):
    """Four infrared channels (C8, C11, C13, C15): kelvin raw, [0, 1] normalized."""

    def __post_init__(self):
        super().__post_init__()
        if self.c_len != len(SAT_CHANNELS):
            raise ShapeError(f"satellite sequence needs c_len=4, got {self.c_len}")


def _check_finite(arr: np.ndarray) -> None:
    bad = ~np.isfinite(arr)
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise NumericError(f"non-finite value {arr[idx]!r} at cell {idx}")


def normalize_radar(seq: RadarSequence) -> RadarSequence:
    if seq.normalized:
        raise ValueError("radar sequence is already normalized")
    return RadarSequence(radar_to_unit(seq.data), normalized=True)


def denormalize_radar(seq: RadarSequence) -> RadarSequence:
    if not seq.normalized:
        raise ValueError("radar sequence is already raw")
    return RadarSequence(unit_to_radar(seq.data), normalized=False)


def normalize_satellite(seq: SatelliteSequence) -> SatelliteSequence:
    """Clamp to [180, 320] K and map cold tops high: ``(320 - v) / 140``."""
    if seq.normalized:
        raise ValueError("satellite sequence is already normalized")
    return SatelliteSequence(kelvin_to_unit(seq.data), normalized=True)


def denormalize_satellite(seq: SatelliteSequence) -> SatelliteSequence:
    if not seq.normalized:
        raise ValueError("satellite sequence is already raw")
    return SatelliteSequence(unit_to_kelvin(seq.data), normalized=False)


# Array-level maps, shared with the generator and metrics.

def radar_to_unit(dbz: np.ndarray) -> np.ndarray:
    dbz = np.asarray(dbz, dtype=np.float32)
    _check_finite(dbz)
    return (np.clip(dbz, RADAR_MIN_DBZ, RADAR_MAX_DBZ) / np.float32(RADAR_MAX_DBZ)).astype(np.float32)


def unit_to_radar(unit: np.ndarray) -> np.ndarray:
    unit = np.asarray(unit, dtype=np.float32)
    _check_finite(unit)
    return (np.clip(unit, 0.0, 1.0) * np.float32(RADAR_MAX_DBZ)).astype(np.float32)


def kelvin_to_unit(kelvin: np.ndarray) -> np.ndarray:
    kelvin = np.asarray(kelvin, dtype=np.float32)
    _check_finite(kelvin)
    span = np.float32(SAT_MAX_K - SAT_MIN_K)
    return ((np.float32(SAT_MAX_K) - np.clip(kelvin, SAT_MIN_K, SAT_MAX_K)) / span).astype(np.float32)


def unit_to_kelvin(unit: np.ndarray) -> np.ndarray:
    unit = np.asarray(unit, dtype=np.float32)
    _check_finite(unit)
    span = np.float32(SAT_MAX_K - SAT_MIN_K)
    return (np.float32(SAT_MAX_K) - np.clip(unit, 0.0, 1.0) * span).astype(np.float32)


def write_sequence(seq: FrameSequence, path: str | PathLike) -> None:
    dims = seq.shape
    if any(d >= 2**32 for d in dims):
        raise DimOverflowError(f"dimension does not fit in u32: {dims}")
    header = _HEADER.pack(MAGIC, VERSION, *dims, 1 if seq.normalized else 0)
    payload = seq.data.astype("<f4", copy=False).tobytes(order="C")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def read_sequence(path: str | PathLike) -> FrameSequence:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise BadMagicError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < _HEADER.size:
        raise TruncatedPayloadError(f"{path}: header truncated ({len(raw)} bytes)")
    _, version, t, c, h, w, flag = _HEADER.unpack_from(raw)
    if version != VERSION:
        raise VersionMismatchError(f"{path}: version {version}, expected {VERSION}")
    cells = t * c * h * w
    if cells > _MAX_CELLS:
        raise DimOverflowError(f"{path}: {t}x{c}x{h}x{w} exceeds {_MAX_CELLS} cells")
    expected = _HEADER.size + 4 * cells
    if len(raw) < expected:
        raise TruncatedPayloadError(f"{path}: payload has {len(raw) - _HEADER.size} bytes, header implies {4 * cells}")
    if len(raw) > expected:
        raise FormatError(f"{path}: {len(raw) - expected} trailing bytes after payload")
    if flag not in (0, 1):
        raise FormatError(f"{path}: invalid form flag {flag}")
    data = np.frombuffer(raw, dtype="<f4", count=cells, offset=_HEADER.size).reshape(t, c, h, w)
    return FrameSequence(data.astype(np.float32), normalized=bool(flag))


def as_radar(seq: FrameSequence) -> RadarSequence:
    return RadarSequence(seq.data, normalized=seq.normalized)


def as_satellite(seq: FrameSequence) -> SatelliteSequence:
    return SatelliteSequence(seq.data, normalized=seq.normalized)
