"""Model bundle, training loop, prediction and evaluation."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .coarse import CoarsePredictor, coarse_loss
from .config import MODEL_KEYS, RunConfig, parse_config_text
from .core_types import FrameSequence, unit_to_radar, write_sequence
from .diffusion import (
    Denoiser,
    NoiseSchedule,
    compute_residual_target,
    ddim_sample_residual,
    denoiser_eps_fn,
    refine_loss,
    total_loss,
)
from .errors import DataError, NumericError, ShapeError
from .metrics import MetricReport, spectral_sharpness
from .nn import ParamStore, adam_step, load_checkpoint, save_checkpoint
from .synthetic import Episode, Manifest, load_episode, read_manifest

LOG_HEADER = "iter\tl_coarse\tl_refine\tl_total\n"


def _stream(seed: int, *tags: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), *tags])


def sample_seed(seed: int, idx: int) -> int:
    """Seed of the sampler noise for episode ``idx``."""
    return int(np.random.SeedSequence([int(seed), int(idx), 3]).generate_state(1, np.uint64)[0])


class Model:
    """Coarse predictor plus (optionally) the diffusion refiner over one shared store."""

    def __init__(self, cfg: RunConfig, dtype=np.float32):
        self.cfg = cfg
        self.store = ParamStore(cfg.seed, dtype)
        self.coarse = CoarsePredictor(self.store, cfg.vmu())
        self.denoiser = Denoiser(self.store, cfg.diffusion()) if cfg.stdiff else None
        self.schedule = NoiseSchedule(cfg.T)

    # persistence -----------------------------------------------------------
    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(self.store, path)
        config_path(path).write_text(self.cfg.to_text(MODEL_KEYS), encoding="utf-8")

    @classmethod
    def load(cls, path, cfg: RunConfig | None = None, expect: dict | None = None) -> "Model":
        """Rebuild from a checkpoint.

        Layout keys come from the checkpoint's sidecar; runtime keys (seed,
        sampler steps, ...) from ``cfg``. ``expect`` lists layout values the
        caller requires, and any disagreement raises :class:`ShapeError`.
        """
        path = Path(path)
        side = config_path(path)
        if not path.exists() or not side.exists():
            raise DataError(f"checkpoint {path} (or its {side.name}) is missing")
        saved = parse_config_text(side.read_text(encoding="utf-8"), str(side))
        clash = {k: (v, saved[k]) for k, v in (expect or {}).items() if k in saved and saved[k] != v}
        if clash:
            raise ShapeError(f"checkpoint layout disagrees with request (requested, saved): {clash}")
        model = cls((cfg or RunConfig()).replace(**saved))
        load_checkpoint(model.store, path)
        return model

    # inference ---------------------------------------------------------------
    def predict(self, radar_in, sat_in, seeds, n_steps=None, eta=None) -> dict:
        """Batch forecast for ``(B, n, 1, H, W)`` radar and ``(B, n, 4, H, W)`` satellite inputs.

        Returns ``mu``, ``p``, the unclamped sum ``y_raw = mu + p`` and ``y_hat``.
        Without the refiner ``p = 0`` and ``y_hat = mu``.
        """
        dtype = self.store.dtype
        mu, fused = self.coarse.forward(radar_in.astype(dtype, copy=False), sat_in.astype(dtype, copy=False))
        if self.denoiser is None:
            p = np.zeros_like(mu)
            return {"mu": mu, "p": p, "y_raw": mu + p, "y_hat": mu.copy()}
        n_steps = n_steps or self.cfg.ddim_steps
        eta = self.cfg.eta if eta is None else eta
        z_T = np.stack([np.random.default_rng(s).standard_normal(mu.shape[1:]) for s in seeds]).astype(dtype)
        eps_fn = denoiser_eps_fn(self.denoiser, fused, mu)
        p = ddim_sample_residual(eps_fn, mu.shape, self.schedule, n_steps, eta, seed=int(seeds[0]),
                                 z_T=z_T, dtype=dtype)
        y_raw = mu + p
        return {"mu": mu, "p": p, "y_raw": y_raw, "y_hat": np.clip(y_raw, 0.0, 1.0)}


def config_path(ckpt) -> Path:
    ckpt = Path(ckpt)
    return ckpt.with_name(ckpt.name + ".cfg")


# --------------------------------------------------------------------------
# Data

def stack_episodes(eps: list[Episode]):
    radar = np.stack([e.radar_in for e in eps])
    sat = np.stack([e.sat_in for e in eps])
    target = np.stack([e.target[:, 0] for e in eps])  # (B, m, H, W)
    return radar, sat, target


def load_split(manifest: Manifest, split: str, cfg: RunConfig) -> list[Episode]:
    eps = [load_episode(manifest, r, cfg.n_in, cfg.m_out) for r in manifest.split(split)]
    for e in eps:
        if e.radar_in.shape[-2:] != (cfg.h, cfg.w):
            raise DataError(f"episode {e.idx} grid {e.radar_in.shape[-2:]} != configured {cfg.h}x{cfg.w}")
    return eps


# --------------------------------------------------------------------------
# Training

@dataclass
class TrainResult:
    model: Model
    log: list = field(default_factory=list)  # (iter, l_coarse, l_refine | None, l_total)
    seconds: float = 0.0


def _fmt(v) -> str:
    return "NA" if v is None else f"{v:.9g}"


def train_step(model: Model, radar, sat, target, rng, alpha: float, lr: float, joint: bool):
    """One optimizer step; returns ``(l_coarse, l_refine or None, l_total)``."""
    dtype = model.store.dtype
    radar, sat, target = (a.astype(dtype, copy=False) for a in (radar, sat, target))
    mu, fused = model.coarse.forward(radar, sat)
    l_c, dmu = coarse_loss(mu, target)
    if not joint:
        if not np.isfinite(l_c):
            return l_c, None, l_c
        model.coarse.backward(dmu)
        adam_step(model.store, lr=lr)
        return l_c, None, l_c
    # The residual target is treated as data; conditioning gradients still reach mu and F_fused.
    z0 = compute_residual_target(target, mu).astype(dtype)
    l_r, deps, _, _ = refine_loss(model.schedule, model.denoiser, z0, fused, mu, rng)
    if not (np.isfinite(l_c) and np.isfinite(l_r)):
        return l_c, l_r, float("nan")
    l_t = total_loss(l_c, l_r, alpha)
    _, dmods = model.denoiser.backward(((1.0 - alpha) * deps).astype(dtype))
    dfused, dmu_cond = model.denoiser.condition_backward(dmods)
    model.coarse.backward(alpha * dmu + dmu_cond, dfused)
    adam_step(model.store, lr=lr)
    return l_c, l_r, l_t


def train(cfg: RunConfig, manifest: Manifest | None = None, log_path=None, checkpoint=None,
          progress=None) -> TrainResult:
    """Coarse warmup (``warmup_frac`` of the iterations), then joint training.

    Data order and diffusion draws come from streams derived from ``cfg.seed``.
    """
    manifest = manifest or read_manifest(cfg.data_dir)
    episodes = load_split(manifest, "train", cfg)
    if not episodes:
        raise DataError("training split is empty")
    radar_all, sat_all, target_all = stack_episodes(episodes)
    model = Model(cfg)
    data_rng = _stream(cfg.seed, 1)
    noise_rng = _stream(cfg.seed, 2)
    n_warm = int(round(cfg.warmup_frac * cfg.iters))
    log_fh = None
    if log_path is not None:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        log_fh = open(log_path, "w", encoding="utf-8", newline="\n")
        log_fh.write(LOG_HEADER)
    result = TrainResult(model)
    order = np.empty(0, dtype=np.int64)
    t0 = time.perf_counter()
    try:
        for it in range(1, cfg.iters + 1):
            if len(order) < cfg.batch_size:
                order = np.concatenate([order, data_rng.permutation(len(episodes))])
            idx, order = order[: cfg.batch_size], order[cfg.batch_size:]
            joint = cfg.stdiff and it > n_warm
            l_c, l_r, l_t = train_step(model, radar_all[idx], sat_all[idx], target_all[idx], noise_rng,
                                       cfg.alpha, cfg.lr, joint)
            if not np.isfinite(l_t):
                raise NumericError(f"non-finite loss at iteration {it}")
            result.log.append((it, l_c, l_r, l_t))
            if log_fh is not None and it % cfg.log_every == 0:
                log_fh.write(f"{it}\t{_fmt(l_c)}\t{_fmt(l_r)}\t{_fmt(l_t)}\n")
            if checkpoint is not None and it % cfg.ckpt_every == 0:
                model.save(checkpoint)
            if progress is not None:
                progress(it, l_c, l_r, l_t)
    finally:
        if log_fh is not None:
            log_fh.close()
    if checkpoint is not None:
        model.save(checkpoint)
    result.seconds = time.perf_counter() - t0
    return result


# --------------------------------------------------------------------------
# Prediction outputs

def write_pgm(path, frame) -> None:
    """8-bit binary PGM of a ``[0, 1]`` frame (values scaled by 255 and rounded)."""
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim != 2:
        raise ShapeError(f"PGM export needs a 2-D frame, got {frame.shape}")
    h, w = frame.shape
    pix = np.clip(np.rint(frame * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pix.tobytes())


def write_prediction(out_dir, pred: dict, pgm: bool = False) -> dict:
    """Write ``mu``, ``p`` and ``y_hat`` for a single forecast as normalized VMUD files."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    for key, name in (("mu", "mu"), ("p", "p"), ("y_hat", "yhat")):
        arr = np.asarray(pred[key], dtype=np.float32)[:, None]  # (m, 1, H, W)
        paths[key] = out / f"{name}.vmud"
        write_sequence(FrameSequence(arr, normalized=True), paths[key])
    if pgm:
        for key, name in (("mu", "mu"), ("y_hat", "yhat")):
            for k, frame in enumerate(pred[key]):
                write_pgm(out / f"{name}_f{k}.pgm", np.clip(frame, 0.0, 1.0))
    return paths


# --------------------------------------------------------------------------
# Evaluation

@dataclass
class EvalResult:
    full: MetricReport
    coarse: MetricReport
    persistence: MetricReport
    rows: list  # per episode: idx, mse_full, mse_coarse, mse_persist, sharp_full, sharp_coarse

    def episode_table(self) -> str:
        head = "idx\tmse_full\tmse_coarse\tmse_persistence\tsharp_full\tsharp_coarse\n"
        return head + "".join("\t".join([str(r[0])] + [f"{v:.9g}" for v in r[1:]]) + "\n" for r in self.rows)


def _episode_sharpness(pred, obs) -> float:
    vals = [spectral_sharpness(p, o) for p, o in zip(pred, obs)]
    vals = [v for v in vals if np.isfinite(v)]
    return float(np.mean(vals)) if vals else float("nan")


def evaluate(model: Model, manifest: Manifest, split: str = "test", out_dir=None, chunk: int = 8,
             n_steps=None) -> EvalResult:
    """Forecast every episode of ``split`` and pool verification scores in dBZ.

    Alongside the model, reports the coarse forecast ``mu`` and last-frame persistence.
    """
    cfg = model.cfg
    eps = load_split(manifest, split, cfg)
    if not eps:
        raise DataError(f"split {split!r} is empty")
    full, coarse, persist = MetricReport(), MetricReport(), MetricReport()
    rows = []
    for start in range(0, len(eps), chunk):
        part = eps[start: start + chunk]
        radar, sat, target = stack_episodes(part)
        pred = model.predict(radar, sat, [sample_seed(cfg.seed, e.idx) for e in part], n_steps=n_steps)
        for j, e in enumerate(part):
            obs = target[j]
            y = np.clip(pred["y_hat"][j], 0.0, 1.0)
            mu = np.clip(pred["mu"][j], 0.0, 1.0)
            last = np.repeat(e.radar_in[-1], cfg.m_out, axis=0)
            obs_dbz = unit_to_radar(obs)
            full.add(unit_to_radar(y), obs_dbz)
            coarse.add(unit_to_radar(mu), obs_dbz)
            persist.add(unit_to_radar(last), obs_dbz)
            rows.append((e.idx, float(np.mean((y - obs) ** 2)), float(np.mean((mu - obs) ** 2)),
                         float(np.mean((last - obs) ** 2)), _episode_sharpness(y, obs), _episode_sharpness(mu, obs)))
    result = EvalResult(full, coarse, persist, rows)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        full.write(out / "metrics.tsv")
        coarse.write(out / "metrics_coarse.tsv")
        persist.write(out / "metrics_persistence.tsv")
        (out / "episodes.tsv").write_text(result.episode_table(), encoding="utf-8")
    return result
