import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vmudiff.core_types import kelvin_to_unit, radar_to_unit
from vmudiff.diffusion import compute_residual_target
from vmudiff.errors import DataError
from vmudiff.synthetic import (
    Blob,
    EpisodeParams,
    assign_splits,
    generate_episode,
    load_episode,
    make_dataset,
    read_manifest,
    render,
)


def test_static_scene_repeats():
    blob = Blob(16, 16, (0.0, 0.0), (3.0, 4.0), 45.0, 1.0)
    radar, _ = generate_episode(EpisodeParams(seed=3, blobs=(blob,)))
    np.testing.assert_array_equal(radar.data[0], radar.data[4])
    np.testing.assert_array_equal(radar.data[0], radar.data[-1])


def test_same_seed_is_byte_identical():
    a = generate_episode(EpisodeParams(seed=7))
    b = generate_episode(EpisodeParams(seed=7))
    assert a[0].data.tobytes() == b[0].data.tobytes()
    assert a[1].data.tobytes() == b[1].data.tobytes()
    c = generate_episode(EpisodeParams(seed=8))
    assert a[0].data.tobytes() != c[0].data.tobytes()


def test_advection_moves_peak_one_column():
    blob = Blob(8, 8, (1.0, 0.0), (2.0, 2.0), 40.0, 1.0)
    radar, _ = generate_episode(EpisodeParams(seed=0, blobs=(blob,)))
    f0, f1 = radar.data[0, 0], radar.data[1, 0]
    assert np.unravel_index(np.argmax(f0), f0.shape) == (8, 8)
    assert np.unravel_index(np.argmax(f1), f1.shape) == (8, 9)


def test_shapes_units_and_ranges():
    p = EpisodeParams(seed=1, n_in=4, m_out=3, h=24, w=20)
    radar, sat = generate_episode(p)
    assert radar.shape == (7, 1, 24, 20) and not radar.normalized
    assert sat.shape == (4, 4, 24, 20)
    assert radar.data.min() >= 0 and radar.data.max() <= 70
    assert sat.data.min() >= 180 and sat.data.max() <= 320
    r = radar_to_unit(radar.data)
    assert r.min() >= 0 and r.max() <= 1


def test_sigma_too_large_for_grid():
    with pytest.raises(ValueError, match="does not fit"):
        EpisodeParams(h=16, w=16, sigma=(2.0, 9.0))
    with pytest.raises(ValueError):
        EpisodeParams(h=8, w=32)
    with pytest.raises(ValueError):
        EpisodeParams(velocity=(1.0, -1.0))


def test_smoothing_orders_channel_variance():
    blobs = (Blob(12, 14, (0.5, -0.5), (2.5, 3.0), 50.0, 1.0), Blob(22, 20, (0, 0), (2.0, 2.0), 40.0, 1.0))
    variances = [np.var(render(blobs, 2.0, 32, 32, smooth=1.0 + k)) for k in range(4)]
    assert all(a > b for a, b in zip(variances, variances[1:]))


def test_satellite_leads_radar():
    lead, same = [], []
    for s in range(40):
        p = EpisodeParams(seed=100 + s, noise=0.0)
        radar, sat = generate_episode(p)
        s0 = kelvin_to_unit(sat.data)[0, 0].ravel()
        r = radar.data[:, 0].reshape(p.total_frames, -1)
        if s0.std() == 0 or r[0].std() == 0 or r[p.sat_lag].std() == 0:
            continue
        lead.append(np.corrcoef(s0, r[p.sat_lag])[0, 1])
        same.append(np.corrcoef(s0, r[0])[0, 1])
    assert np.mean(lead) > np.mean(same)


def test_persistence_has_positive_error_on_average():
    errs = []
    for s in range(100):
        radar, _ = generate_episode(EpisodeParams(seed=s))
        r = radar_to_unit(radar.data)
        errs.append(np.mean((r[5:] - r[4]) ** 2))
    assert np.mean(errs) > 0 and np.median(errs) > 0


def test_split_counts():
    labels = assign_splits(10, (0.8, 0.1, 0.1), seed=0)
    assert labels.count("train") == 8 and labels.count("val") == 1 and labels.count("test") == 1
    assert assign_splits(1, (1, 0, 0), seed=0) == ["train"]
    with pytest.raises(ValueError):
        assign_splits(10, (0.5, 0.2, 0.2), seed=0)
    with pytest.raises(ValueError):
        assign_splits(0, (1, 0, 0), seed=0)


@given(st.integers(1, 60), st.integers(0, 2**63))
def test_split_is_exact_partition(count, seed):
    labels = assign_splits(count, (0.6, 0.2, 0.2), seed)
    assert len(labels) == count and set(labels) <= {"train", "val", "test"}
    assert labels == assign_splits(count, (0.6, 0.2, 0.2), seed)


def test_make_dataset_and_manifest(tmp_path):
    p = EpisodeParams(seed=5)
    m1 = make_dataset(10, p, tmp_path / "a")
    m2 = make_dataset(10, p, tmp_path / "b")
    assert m1.path.read_bytes() == m2.path.read_bytes()
    lines = m1.path.read_text().splitlines()
    assert len(lines) == 10
    idx, split, rp, sp, seed = lines[3].split("\t")
    assert (idx, rp, sp) == ("3", "ep3_radar.vmud", "ep3_sat.vmud")
    assert (tmp_path / "a" / rp).read_bytes() == (tmp_path / "b" / rp).read_bytes()
    back = read_manifest(tmp_path / "a")
    assert [r.idx for r in back.records] == list(range(10))
    assert len(back.split("train")) == 8
    ep = load_episode(back, back.records[0], 5, 5)
    assert ep.radar_in.shape == (5, 1, 32, 32) and ep.sat_in.shape == (5, 4, 32, 32)
    assert ep.target.shape == (5, 1, 32, 32)
    assert 0 <= ep.radar_in.min() and ep.target.max() <= 1


def test_make_dataset_errors(tmp_path):
    with pytest.raises(ValueError):
        make_dataset(0, EpisodeParams(), tmp_path)
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(DataError):
        make_dataset(1, EpisodeParams(), blocker / "sub")
    with pytest.raises(DataError):
        read_manifest(tmp_path / "missing")


def test_load_episode_checks_frame_counts(tmp_path):
    m = make_dataset(2, EpisodeParams(seed=1), tmp_path)
    with pytest.raises(DataError):
        load_episode(m, m.records[0], 4, 5)


def test_trace_echoes_are_flushed():
    radar, _ = generate_episode(EpisodeParams(seed=11))
    y = radar_to_unit(radar.data)
    nz = y[y > 0]
    assert nz.size and nz.min() >= 2.0**-24
    mu = np.random.default_rng(0).uniform(0, 1.2, size=y.shape).astype(np.float32)
    np.testing.assert_array_equal(mu.astype(np.float64) + compute_residual_target(y, mu), y.astype(np.float64))
