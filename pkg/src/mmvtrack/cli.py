"""Command-line front end.

Every subcommand reads a JSON config, calls into the library and writes its
outputs atomically under ``--out``.  A one-line JSON summary goes to stdout;
progress goes to stderr.

Exit codes: 0 success, 1 numerical/runtime error, 2 configuration error.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import bench
from ._io import atomic_write_text
from .model import ConfigError, SceneParams, export_timeline, generate_scene
from .recovery import RecoveryConfig, csmusic, csmusic_optimized, music, somp, two_thresholding
from .tracking import TrackerConfig, TrackerMode, states_to_csv, states_to_jsonl, track_scene

RECOVERY_ALGORITHMS = ("csmusic_optimized", "csmusic", "music", "somp", "two_thresholding")


def _u64(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mmvtrack", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in (
        ("generate", "generate a scene and export it as CSV"),
        ("recover", "recover the support of one frame"),
        ("track", "track the support through a scene"),
        ("sweep", "Monte Carlo success-rate sweep over k and u"),
        ("grid", "moving targets on a 2-D grid, tracker vs MUSIC"),
    ):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", required=True, type=Path)
        s.add_argument("--out", required=True, type=Path)
        s.add_argument("--seed", type=_u64, default=None)
        s.add_argument("--threads", type=_positive, default=None)
        s.add_argument("--trials", type=_positive, default=None)
        s.add_argument("--full", action="store_true",
                       help=f"use {bench.FULL_TRIALS} trials (sweep only)")
    return p


def _load_config(path: Path) -> dict:
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError("--config", f"cannot read {path}: {exc.strerror}") from None
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}", f"malformed JSON: {exc.msg}") from None
    if not isinstance(d, dict):
        raise ConfigError(str(path), "top level must be a JSON object")
    return d


def _split_scene(d: dict) -> tuple[dict, dict]:
    """Accept a bare scene object or ``{"scene": ..., <extra sections>}``."""
    if "scene" in d:
        extra = {k: v for k, v in d.items() if k != "scene"}
        for key in extra:
            if key not in ("recovery", "tracker", "init"):
                raise ConfigError(key, "unknown field")
        return d["scene"], extra
    return d, {}


def _progress(done: int, total: int) -> None:
    step = max(1, total // 20)
    if done == total or done % step == 0:
        print(f"\r{done}/{total}", end="\n" if done == total else "", file=sys.stderr, flush=True)


def _recovery_section(d: dict, params: SceneParams) -> tuple[str, RecoveryConfig, int]:
    if not isinstance(d, dict):
        raise ConfigError("recovery", "must be a JSON object")
    for key in d:
        if key not in ("algorithm", "k", "cs_algo", "frame"):
            raise ConfigError(f"recovery.{key}", "unknown field")
    algo = d.get("algorithm", "csmusic_optimized")
    if algo not in RECOVERY_ALGORITHMS:
        raise ConfigError("recovery.algorithm", f"unknown algorithm {algo!r}")
    frame = d.get("frame", 0)
    if not isinstance(frame, int) or not 0 <= frame <= params.t_max:
        raise ConfigError("recovery.frame", "must be an integer in 0..t_max")
    k = d.get("k", params.sparsity(frame))
    try:
        cfg = RecoveryConfig(k, d.get("cs_algo", "somp"))
    except (ValueError, TypeError) as exc:
        raise ConfigError("recovery", str(exc)) from None
    return algo, cfg, frame


def _tracker_section(d: dict, params: SceneParams) -> TrackerConfig:
    if not isinstance(d, dict):
        raise ConfigError("tracker", "must be a JSON object")
    fields = set(TrackerConfig.__dataclass_fields__)
    for key in d:
        if key not in fields:
            raise ConfigError(f"tracker.{key}", "unknown field")
    d = dict(d)
    if "mode" not in d:
        d["mode"] = "noiseless" if math.isinf(params.snr_db) else "noisy_fixed_k"
    try:
        mode = TrackerMode(d["mode"])
    except ValueError:
        raise ConfigError("tracker.mode", f"unknown mode {d['mode']!r}") from None
    ks = params.k_schedule or (params.k_init,)
    d.setdefault("k_max", max(max(ks), params.k_init))
    d.setdefault("r", params.r)
    if mode is TrackerMode.NOISY_FIXED_K:
        d.setdefault("k", params.k_init)
    try:
        return TrackerConfig(**d)
    except (ValueError, TypeError) as exc:
        raise ConfigError("tracker", str(exc)) from None


def _run_recovery(algo: str, A, Y, cfg: RecoveryConfig):
    if algo == "csmusic_optimized":
        return csmusic_optimized(A, Y, cfg)
    if algo == "csmusic":
        return csmusic(A, Y, cfg)
    if algo == "music":
        return music(A, Y, cfg.k)
    if algo == "somp":
        return somp(A, Y, cfg.k)
    return two_thresholding(A, Y, cfg.k)


def cmd_generate(args, d: dict) -> dict:
    scene, _ = _split_scene(d)
    params = SceneParams.from_dict(scene, args.seed)
    timeline = generate_scene(params)
    export_timeline(timeline, args.out)
    return {"frames": len(timeline), "out": str(args.out)}


def cmd_recover(args, d: dict) -> dict:
    scene, extra = _split_scene(d)
    params = SceneParams.from_dict(scene, args.seed)
    algo, cfg, frame = _recovery_section(extra.get("recovery", {}), params)
    timeline = generate_scene(params)
    f = timeline.frames[frame]
    res = _run_recovery(algo, timeline.sensing, f.measurement, cfg)
    rec = res.to_record(include_metrics=True)
    rec["frame"] = frame
    rec["exact_match"] = bench.success(res.support, f.signal.support)
    atomic_write_text(args.out / "recovery.json", json.dumps(rec, indent=2) + "\n")
    return {"algorithm": algo, "frame": frame, "exact_match": rec["exact_match"]}


def cmd_track(args, d: dict) -> dict:
    scene, extra = _split_scene(d)
    params = SceneParams.from_dict(scene, args.seed)
    cfg = _tracker_section(extra.get("tracker", {}), params)
    init = extra.get("init", "truth")
    if init not in ("truth", "csmusic"):
        raise ConfigError("init", "must be 'truth' or 'csmusic'")
    timeline = generate_scene(params)
    if init == "truth":
        I0 = timeline.frames[0].signal.support
    else:
        I0 = csmusic_optimized(timeline.sensing, timeline.frames[0].measurement,
                               RecoveryConfig(params.sparsity(0))).support
    states = track_scene(timeline.sensing, timeline, I0, cfg)
    atomic_write_text(args.out / "track.csv", states_to_csv(states))
    atomic_write_text(args.out / "track.jsonl", states_to_jsonl(states))
    matches = [bool(s.exact_match) for s in states]
    return {"frames": len(states), "exact_frames": sum(matches), "all_exact": all(matches)}


def cmd_sweep(args, d: dict) -> dict:
    trials = args.trials
    if args.full and trials is None:
        trials = bench.FULL_TRIALS
    spec = bench.SweepSpec.from_dict(d, args.seed, trials)
    result = bench.run_sweep(spec, args.threads, progress=_progress)
    atomic_write_text(args.out / "sweep.csv", result.to_csv())
    atomic_write_text(args.out / "sweep_spec.json", json.dumps(spec.to_dict(), indent=2) + "\n")
    print(f"wall time {result.wall_time:.1f} s", file=sys.stderr)
    return {"cells": len(result.successes), "trials": spec.trials}


def cmd_grid(args, d: dict) -> dict:
    spec = bench.GridSpec.from_dict(d, args.seed, args.trials)
    result = bench.run_grid_tracking(spec, args.threads)
    bench.write_grid_outputs(result, args.out)
    print(f"wall time {result.wall_time:.1f} s", file=sys.stderr)
    return {"tracking_mean_exact": result.mean_exact("tracking"),
            "music_mean_exact": result.mean_exact("music"), "scenes": spec.scenes}


COMMANDS = {
    "generate": cmd_generate,
    "recover": cmd_recover,
    "track": cmd_track,
    "sweep": cmd_sweep,
    "grid": cmd_grid,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        d = _load_config(args.config)
        try:
            args.out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise ConfigError("--out", f"cannot create {args.out}: {exc.strerror}") from None
        summary = COMMANDS[args.command](args, d)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(json.dumps(summary))
    return 0


if __name__ == "__main__":
    sys.exit(main())
