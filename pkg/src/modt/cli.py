"""``modt synth|train|track|eval|gradcheck``.

Exit codes: 0 success, 1 runtime failure, 2 input-format error.
``MODT_THREADS`` caps BLAS/OpenMP threads; it is applied before numpy loads.
"""
from __future__ import annotations

import argparse
import os
import sys

EXIT_OK, EXIT_RUNTIME, EXIT_INPUT = 0, 1, 2
THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


class InputError(Exception):
    """Malformed user input; maps to exit code 2."""


def apply_thread_limit(environ=os.environ) -> int | None:
    raw = environ.get("MODT_THREADS")
    if raw is None or raw == "":
        return None
    try:
        n = int(raw)
    except ValueError:
        raise InputError(f"MODT_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise InputError(f"MODT_THREADS must be a positive integer, got {raw!r}")
    for var in THREAD_VARS:
        environ[var] = str(n)
    return n


def _load_config(path):
    from .config import load, toy_config

    return load(path) if path else toy_config()


def _seed_cfg(cfg, seed):
    from dataclasses import replace

    if seed is None:
        return cfg
    return replace(cfg, train=replace(cfg.train, seed=seed), model=replace(cfg.model, init_seed=seed))


def _read_sequences(data_dir):
    """A scan directory, or a directory of ``seq_*`` scan directories."""
    from .scans import read_sequence

    if not os.path.isdir(data_dir):
        raise FileNotFoundError(f"no such directory: {data_dir}")
    subs = sorted(
        os.path.join(data_dir, n) for n in os.listdir(data_dir) if n.startswith("seq_")
    )
    subs = [s for s in subs if os.path.isdir(s)]
    return [read_sequence(s) for s in subs] if subs else [read_sequence(data_dir)]


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    from dataclasses import replace

    from .scans import synth_scene, write_sequence

    cfg = _seed_cfg(_load_config(args.config), args.seed)
    seed = cfg.train.seed
    if args.frames is not None:
        cfg = replace(cfg, scene=replace(cfg.scene, num_frames=args.frames))
    n = args.sequences if args.sequences is not None else cfg.train.sequences
    if n < 1:
        raise InputError("--sequences must be >= 1")
    for i in range(n):
        seq = synth_scene(cfg.scene, seed + i)
        write_sequence(seq, os.path.join(args.out, f"seq_{i:03d}") if n > 1 else args.out)
    print(f"wrote {n} sequence(s) of {cfg.scene.num_frames} frames to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    import numpy as np

    from .pipeline import (
        NonFiniteLoss,
        init_params,
        load_checkpoint,
        save_checkpoint,
        train,
        write_history,
    )
    from .scans import window_triplets

    opt = None
    if args.resume:
        params, cfg, opt = load_checkpoint(args.resume)
        if args.config:
            cfg = _load_config(args.config)
    else:
        cfg = _seed_cfg(_load_config(args.config), args.seed)
        params = init_params(cfg)
    triplets = [t for seq in _read_sequences(args.data) for t in window_triplets(seq)]
    iterations = cfg.train.iterations if args.iterations is None else args.iterations
    os.makedirs(args.out, exist_ok=True)
    history: list[dict] = []
    try:
        params, opt, history = train(params, triplets, cfg, iterations, opt, log=history.append)
    except NonFiniteLoss as exc:
        write_history(os.path.join(args.out, "loss.csv"), history)
        with open(os.path.join(args.out, "diagnostics.txt"), "w") as fh:
            fh.write(f"{exc}\n")
            for row in history[-5:]:
                fh.write(f"{row}\n")
            for k, v in sorted((exc.params or params).items()):
                fh.write(f"{k} finite={bool(np.isfinite(v).all())} max_abs={float(np.abs(v).max(initial=0.0))!r}\n")
        print(f"error: {exc}; diagnostics in {args.out}", file=sys.stderr)
        return EXIT_RUNTIME
    save_checkpoint(args.out, params, cfg, opt)
    write_history(os.path.join(args.out, "loss.csv"), history)
    if history:
        print(f"step {history[-1]['step']}: objective {history[-1]['objective']:.6f}")
    return EXIT_OK


def cmd_track(args) -> int:
    from .pipeline import infer_sequence, load_checkpoint
    from .scans import read_sequence
    from .tracker import TrackerState, step, write_tracks

    if not os.path.isdir(args.checkpoint):
        raise FileNotFoundError(f"no checkpoint at {args.checkpoint}")
    params, cfg, _ = load_checkpoint(args.checkpoint)
    if args.config:
        from dataclasses import replace

        override = _load_config(args.config)
        cfg = replace(cfg, tracker=override.tracker, heads=override.heads)
    seq = read_sequence(args.scans, gt_path="")
    state = TrackerState()
    if seq.frames:
        for out in infer_sequence(seq, params, cfg):
            step(state, out.detections, out.offsets, cfg.tracker, frame=out.frame)
    tracks = sorted(state.terminated + state.active, key=lambda t: t.id)
    parent = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(parent, exist_ok=True)
    write_tracks(args.out, tracks)
    print(f"{len(tracks)} track(s) over {len(seq.frames)} frame(s) -> {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .metrics import averaged_mot, evaluate, gt_to_obs, read_track_file, write_report
    from .scans import load_ground_truth

    cfg = _load_config(args.config)
    dist_max = cfg.eval.dist_max if args.dist_max is None else args.dist_max
    gt = gt_to_obs(load_ground_truth(args.gt))
    pred = read_track_file(args.tracks)
    rep = evaluate(gt, pred, dist_max)
    avg = averaged_mot(gt, pred, dist_max)
    write_report(args.out, rep, avg)
    print(f"MOTA {rep.mota:.4f} IDS {rep.ids} AMOTA {avg.amota:.4f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import TOLERANCE, run_gradcheck

    cfg = _load_config(args.config) if args.config else None
    seeds = [args.seed] if args.seed is not None else range(args.seeds)

    lines = []

    def log(r):
        status = "ok" if r.ok else "FAIL"
        lines.append(f"seed {r.seed}: loss {r.loss:.6f} worst rel err {r.worst:.2e} {status}")
        print(f"{lines[-1]} ({r.seconds:.1f}s)")

    results = run_gradcheck(cfg, seeds, args.coords, log=log)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write("\n".join(lines) + "\n")
    bad = [r for r in results if not r.ok]
    for r in bad:
        worst = max(r.per_tensor, key=r.per_tensor.get)
        print(f"seed {r.seed}: {worst} error {r.per_tensor[worst]:.2e} >= {TOLERANCE}", file=sys.stderr)
    return EXIT_RUNTIME if bad else EXIT_OK


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="modt", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate synthetic scan sequences with ground truth")
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.add_argument("--sequences", type=int, help="number of sequences (default: [train] sequences)")
    s.add_argument("--frames", type=int, help="override [scene] num_frames")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train on synthetic sequences, write a checkpoint")
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True, help="checkpoint directory")
    s.add_argument("--iterations", type=int)
    s.add_argument("--resume", help="checkpoint to continue from (parameters and optimizer state)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("track", help="detect and track through a scan directory")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--scans", required=True)
    s.add_argument("--out", required=True, help="track file")
    s.add_argument("--config", help="override [tracker] and [heads] settings")
    s.add_argument("--seed", type=int, help="accepted for uniformity; tracking uses no randomness")
    s.set_defaults(func=cmd_track)

    s = sub.add_parser("eval", help="CLEAR-MOT and averaged MOT metrics")
    s.add_argument("--tracks", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--out", required=True, help="report directory")
    s.add_argument("--config")
    s.add_argument("--dist-max", type=float)
    s.add_argument("--seed", type=int, help="accepted for uniformity; evaluation uses no randomness")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gradcheck", help="finite-difference check of the training gradient")
    s.add_argument("--config")
    s.add_argument("--seed", type=int, help="check a single seed")
    s.add_argument("--seeds", type=int, default=5, help="check seeds 0..N-1")
    s.add_argument("--coords", type=int, default=3, help="sampled coordinates per tensor")
    s.add_argument("--out", help="also write the per-seed report to this file")
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse reports usage errors with 2
        return int(exc.code or 0)
    try:
        apply_thread_limit()
        from .config import ConfigError
        from .numerics import InvalidInputError
        from .scans import ScanFormatError

        try:
            return args.func(args)
        except (ConfigError, ScanFormatError, InvalidInputError) as exc:
            raise InputError(str(exc)) from None
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as exc:  # noqa: BLE001 - every other failure is a runtime failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
