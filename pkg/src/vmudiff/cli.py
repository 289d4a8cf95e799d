"""Command-line entry point: generate, train, predict, evaluate, gradcheck, bench-scan.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import RunConfig, load_config
from .core_types import read_sequence
from .errors import DataError, NumericError, ShapeError, VmuError
from .synthetic import EpisodeParams, load_episode, make_dataset, read_manifest

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--data-dir", dest="data_dir", help="dataset directory (holds manifest.tsv)")
    p.add_argument("--checkpoint")
    p.add_argument("--iters", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--ddim-steps", dest="ddim_steps", type=int)
    p.add_argument("--eta", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--warmup-frac", dest="warmup_frac", type=float)
    p.add_argument("--ablate-msfusion", action="store_true")
    p.add_argument("--ablate-stdiff", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vmudiff", description="Coarse-to-fine precipitation nowcasting")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic dataset and manifest")
    _common(g)
    g.add_argument("--count", type=int)
    g.add_argument("--split", default="0.8,0.1,0.1", help="train,val,test fractions")

    t = sub.add_parser("train", help="train and write a checkpoint plus loss log")
    _common(t)

    pr = sub.add_parser("predict", help="forecast one episode")
    _common(pr)
    pr.add_argument("--episode", type=int, help="episode index from the dataset manifest")
    pr.add_argument("--radar", help="radar VMUD file (first n_in frames are used)")
    pr.add_argument("--sat", help="satellite VMUD file")
    pr.add_argument("--pgm", action="store_true", help="also export frames as PGM images")

    ev = sub.add_parser("evaluate", help="score a checkpoint on a dataset split")
    _common(ev)
    ev.add_argument("--split-name", dest="split_name", default="test", choices=("train", "val", "test"))

    gc = sub.add_parser("gradcheck", help="finite-difference check of every backward pass")
    gc.add_argument("--only", nargs="*", help="restrict to these check names")
    gc.add_argument("--seed", type=int, default=0)

    b = sub.add_parser("bench-scan", help="time the selective scan at several lengths")
    b.add_argument("--lengths", default="256,512,1024,2048")
    b.add_argument("--repeats", type=int, default=5)
    b.add_argument("--backend", choices=("numpy", "cython"))
    b.add_argument("--out", help="write the TSV here instead of stdout")
    return parser


def _config(args) -> RunConfig:
    keys = ("seed", "out", "data_dir", "checkpoint", "iters", "batch_size", "lr", "ddim_steps", "eta", "alpha",
            "warmup_frac", "count")
    over = {k: getattr(args, k, None) for k in keys}
    if getattr(args, "ablate_msfusion", False):
        over["msfusion"] = False
    if getattr(args, "ablate_stdiff", False):
        over["stdiff"] = False
    try:
        return load_config(args.config, **over)
    except (ValueError, TypeError) as exc:
        raise UsageError(str(exc)) from None


def _ckpt(cfg: RunConfig) -> Path:
    path = Path(cfg.checkpoint)
    return path if path.is_absolute() or path.parent != Path(".") else Path(cfg.out) / path


def cmd_generate(args) -> int:
    cfg = _config(args)
    try:
        split = tuple(float(x) for x in args.split.split(","))
        params = EpisodeParams(seed=cfg.seed, n_in=cfg.n_in, m_out=cfg.m_out, h=cfg.h, w=cfg.w, sat_lag=cfg.sat_lag)
        manifest = make_dataset(cfg.count, params, cfg.out, split)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    print(manifest.path)
    return EXIT_OK


def cmd_train(args) -> int:
    from .pipeline import train

    cfg = _config(args)
    manifest = read_manifest(cfg.data_dir)
    out = Path(cfg.out)
    ckpt = _ckpt(cfg)
    result = train(cfg, manifest, log_path=out / "loss.tsv", checkpoint=ckpt)
    print(f"trained {cfg.iters} iterations in {result.seconds:.1f}s; checkpoint {ckpt}")
    return EXIT_OK


def _load_model(cfg: RunConfig, args):
    from .pipeline import Model

    expect = {}
    if args.ablate_msfusion:
        expect["msfusion"] = False
    model = Model.load(_ckpt(cfg), cfg, expect=expect)
    if args.ablate_stdiff:
        model.denoiser = None
    return model


def cmd_predict(args) -> int:
    from .core_types import kelvin_to_unit, radar_to_unit
    from .pipeline import sample_seed, write_prediction

    cfg = _config(args)
    model = _load_model(cfg, args)
    mc = model.cfg
    if args.episode is not None:
        manifest = read_manifest(cfg.data_dir)
        recs = [r for r in manifest.records if r.idx == args.episode]
        if not recs:
            raise DataError(f"episode {args.episode} not in manifest")
        ep = load_episode(manifest, recs[0], mc.n_in, mc.m_out)
        radar, sat, idx = ep.radar_in, ep.sat_in, ep.idx
    elif args.radar and args.sat:
        r_seq, s_seq = read_sequence(args.radar), read_sequence(args.sat)
        radar = r_seq.data if r_seq.normalized else radar_to_unit(r_seq.data)
        sat = s_seq.data if s_seq.normalized else kelvin_to_unit(s_seq.data)
        if radar.shape[0] < mc.n_in or sat.shape[0] < mc.n_in:
            raise ShapeError(f"need {mc.n_in} input frames, got {radar.shape[0]} radar / {sat.shape[0]} satellite")
        radar, sat, idx = radar[: mc.n_in], sat[: mc.n_in], 0
    else:
        raise UsageError("predict needs --episode or both --radar and --sat")
    if radar.shape[1:] != (1, mc.h, mc.w) or sat.shape[1:] != (4, mc.h, mc.w):
        raise ShapeError(f"input grid {radar.shape[1:]} / {sat.shape[1:]} does not match checkpoint "
                         f"({mc.h}x{mc.w})")
    pred = model.predict(radar[None], sat[None], [sample_seed(cfg.seed, idx)], n_steps=cfg.ddim_steps)
    paths = write_prediction(cfg.out, {k: v[0] for k, v in pred.items()}, pgm=args.pgm)
    for key in ("mu", "p", "y_hat"):
        print(paths[key])
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .pipeline import evaluate

    cfg = _config(args)
    model = _load_model(cfg, args)
    manifest = read_manifest(cfg.data_dir)
    if not manifest.split(args.split_name):
        raise DataError(f"split {args.split_name!r} is empty")
    result = evaluate(model, manifest, args.split_name, cfg.out, n_steps=cfg.ddim_steps)
    sys.stdout.write(result.full.to_tsv())
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradsuite import format_results, run_suite

    try:
        results = run_suite(args.only or None, seed=args.seed)
    except KeyError as exc:
        raise UsageError(str(exc)) from None
    sys.stdout.write(format_results(results))
    failed = [r.name for r in results if not r.passed]
    if failed:
        print("FAILED: " + ", ".join(failed), file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_bench_scan(args) -> int:
    from .vmss import format_benchmark, scan_benchmark

    try:
        lengths = [int(x) for x in args.lengths.split(",") if x.strip()]
        rows = scan_benchmark(lengths, repeats=args.repeats, backend=args.backend)
    except (ValueError, KeyError) as exc:
        raise UsageError(str(exc)) from None
    text = format_benchmark(rows)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "gradcheck": cmd_gradcheck,
    "bench-scan": cmd_bench_scan,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse reports usage problems with status 2
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, ShapeError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except VmuError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
