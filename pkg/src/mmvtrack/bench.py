"""Monte Carlo harness: recovery-rate sweeps and the 2-D moving-target run.

Trial seeding
-------------
Trial ``i`` of sparsity ``k`` uses ``trial_seed(spec.seed, i, k)``; every
change count ``u`` of that trial shares it, so the cells being compared over
``u`` see the same sensing matrix, first frame and amplitude draws (common
random numbers).  A single cell can be re-run from ``(seed, i, k, u)`` alone.
Work items are reduced in ``(k, trial)`` order, never completion order, so
results do not depend on the worker count.
"""

from __future__ import annotations

import csv
import io
import json
import math
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ._io import atomic_write_text
from .model import (
    ConfigError,
    FixedSwap,
    PerTargetMove,
    SceneParams,
    SceneTimeline,
    SupportSet,
    generate_scene,
    generate_sensing,
)
from .recovery import CSAlgorithm, RecoveryConfig, csmusic_optimized, music
from .tracking import TrackerConfig, TrackerMode, track_frame

__all__ = [
    "ALGORITHMS",
    "SweepSpec",
    "SweepResult",
    "GridSpec",
    "GridFrame",
    "GridResult",
    "success",
    "trial_seed",
    "run_trial",
    "run_sweep",
    "run_grid_tracking",
    "write_grid_outputs",
]

ALGORITHMS = ("tracking", "tracking_noiseless", "tracking_adaptive", "csmusic", "music")
DESK_TRIALS = 500
FULL_TRIALS = 5000


def success(estimated, truth) -> bool:
    """Exact-match criterion: the estimated support equals the true one as a set."""
    return set(estimated) == set(truth)


def trial_seed(seed: int, trial: int, k: int) -> int:
    """64-bit seed for one trial, hashed from ``(seed, trial, k)``."""
    words = np.random.SeedSequence([int(seed), int(trial), int(k)]).generate_state(2, np.uint32)
    return (int(words[0]) << 32) | int(words[1])


def _check_int(d: dict, name: str, minimum: int | None = None) -> int:
    v = d.get(name)
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigError(name, "must be an integer")
    if minimum is not None and v < minimum:
        raise ConfigError(name, f"must be >= {minimum}")
    return v


def _check_snr(v) -> float:
    if v is None or v == "inf":
        return math.inf
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError("snr_db", "must be a number, 'inf' or null")
    return float(v)


@dataclass(frozen=True)
class SweepSpec:
    """Fig.-2 style sweep over sparsity ``k`` and per-frame change count ``u``.

    Times are labelled ``t = 1..t_max``: the support at ``t = 1`` comes from
    ``init`` (``"csmusic"`` = optimized CS-MUSIC with ``cs_algo``, or
    ``"truth"``) and later frames are tracked recursively.
    """

    m: int
    n: int
    r: int
    k_values: tuple[int, ...]
    change_counts: tuple[int, ...]
    t_max: int
    snr_db: float
    trials: int
    seed: int
    algorithms: tuple[str, ...] = ("tracking",)
    init: str = "csmusic"
    cs_algo: str = "somp"

    def __post_init__(self):
        object.__setattr__(self, "k_values", tuple(int(k) for k in self.k_values))
        object.__setattr__(self, "change_counts", tuple(int(u) for u in self.change_counts))
        object.__setattr__(self, "algorithms", tuple(self.algorithms))
        self.validate()

    def validate(self) -> None:
        if not 0 < self.m < self.n:
            raise ConfigError("m", "require 0 < m < n")
        if self.r < 1:
            raise ConfigError("r", "must be >= 1")
        if self.trials < 1:
            raise ConfigError("trials", "must be >= 1")
        if self.t_max < 1:
            raise ConfigError("t_max", "must be >= 1")
        if not self.k_values:
            raise ConfigError("k_values", "must not be empty")
        if not self.change_counts:
            raise ConfigError("change_counts", "must not be empty")
        if any(k < 1 or k >= self.m for k in self.k_values):
            raise ConfigError("k_values", "entries must satisfy 1 <= k < m")
        if any(u < 0 for u in self.change_counts):
            raise ConfigError("change_counts", "entries must be >= 0")
        if any(u > k for k in self.k_values for u in self.change_counts):
            raise ConfigError("change_counts", "a change count exceeds a sparsity in k_values")
        if any(k + u > self.n for k in self.k_values for u in self.change_counts):
            raise ConfigError("change_counts", "not enough free columns for the changes")
        for a in self.algorithms:
            if a not in ALGORITHMS:
                raise ConfigError("algorithms", f"unknown algorithm {a!r}")
        if self.init not in ("csmusic", "truth"):
            raise ConfigError("init", "must be 'csmusic' or 'truth'")
        try:
            CSAlgorithm(self.cs_algo)
        except ValueError:
            raise ConfigError("cs_algo", f"unknown CS algorithm {self.cs_algo!r}") from None
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed", "must be a 64-bit unsigned integer")

    @classmethod
    def from_dict(cls, d: dict, seed_override: int | None = None,
                  trials_override: int | None = None) -> "SweepSpec":
        if not isinstance(d, dict):
            raise ConfigError("sweep", "must be a JSON object")
        known = {"m", "n", "r", "k_values", "change_counts", "t_max", "snr_db",
                 "trials", "seed", "algorithms", "init", "cs_algo"}
        for key in d:
            if key not in known:
                raise ConfigError(key, "unknown field")
        d = dict(d)
        if seed_override is not None:
            d["seed"] = seed_override
        if trials_override is not None:
            d["trials"] = trials_override
        d.setdefault("trials", DESK_TRIALS)
        if d.get("seed") is None:
            raise ConfigError("seed", "no seed in config and none given on the command line")
        for name in ("m", "n", "r", "t_max", "trials", "seed"):
            _check_int(d, name)
        for name in ("k_values", "change_counts"):
            v = d.get(name)
            if not isinstance(v, list) or not all(
                isinstance(x, int) and not isinstance(x, bool) for x in v
            ):
                raise ConfigError(name, "must be a list of integers")
        if "snr_db" not in d:
            raise ConfigError("snr_db", "missing required field")
        algs = d.get("algorithms", ["tracking"])
        if not isinstance(algs, list):
            raise ConfigError("algorithms", "must be a list of names")
        return cls(
            m=d["m"], n=d["n"], r=d["r"], k_values=tuple(d["k_values"]),
            change_counts=tuple(d["change_counts"]), t_max=d["t_max"],
            snr_db=_check_snr(d["snr_db"]), trials=d["trials"], seed=d["seed"],
            algorithms=tuple(algs), init=d.get("init", "csmusic"),
            cs_algo=d.get("cs_algo", "somp"),
        )

    def to_dict(self) -> dict:
        return {
            "m": self.m, "n": self.n, "r": self.r, "k_values": list(self.k_values),
            "change_counts": list(self.change_counts), "t_max": self.t_max,
            "snr_db": "inf" if math.isinf(self.snr_db) else self.snr_db,
            "trials": self.trials, "seed": self.seed, "algorithms": list(self.algorithms),
            "init": self.init, "cs_algo": self.cs_algo,
        }


@dataclass
class SweepResult:
    """Success counts per ``(algorithm, k, u, t)`` cell."""

    spec: SweepSpec
    successes: dict[tuple[str, int, int, int], int] = field(default_factory=dict)
    trials: dict[tuple[str, int, int, int], int] = field(default_factory=dict)
    wall_time: float = 0.0

    def success_rate(self, algorithm: str, k: int, u: int, t: int) -> float:
        key = (algorithm, k, u, t)
        return self.successes[key] / self.trials[key]

    def rates(self, algorithm: str, k: int, u: int) -> np.ndarray:
        return np.array([self.success_rate(algorithm, k, u, t)
                         for t in range(1, self.spec.t_max + 1)])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["algorithm", "k", "u", "t", "success_rate", "trials"])
        for key in sorted(self.successes, key=lambda c: (ALGORITHMS.index(c[0]),) + c[1:]):
            a, k, u, t = key
            w.writerow([a, k, u, t, repr(self.successes[key] / self.trials[key]),
                        self.trials[key]])
        return buf.getvalue()


def _tracker_config(algorithm: str, k: int, r: int, k_max: int) -> TrackerConfig:
    if algorithm == "tracking":
        return TrackerConfig(mode=TrackerMode.NOISY_FIXED_K, k=k, k_max=k_max, r=r)
    if algorithm == "tracking_noiseless":
        return TrackerConfig(mode=TrackerMode.NOISELESS, k_max=k_max, r=r)
    return TrackerConfig(mode=TrackerMode.NOISY_ADAPTIVE, k_max=k_max, r=min(r, k))


def _run_algorithm(algorithm: str, timeline: SceneTimeline, k: int, r: int,
                   init: str, cs_algo: str) -> list[bool]:
    A = timeline.sensing
    frames = timeline.frames
    truth = timeline.supports()
    rcfg = RecoveryConfig(k, cs_algo)
    out = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        if algorithm == "music":
            return [success(music(A, f.measurement, k).support, truth[i])
                    for i, f in enumerate(frames)]
        if algorithm == "csmusic":
            return [success(csmusic_optimized(A, f.measurement, rcfg).support, truth[i])
                    for i, f in enumerate(frames)]
        if init == "truth":
            current = truth[0]
        else:
            current = csmusic_optimized(A, frames[0].measurement, rcfg).support
        out.append(success(current, truth[0]))
        cfg = _tracker_config(algorithm, k, r, max(k, r))
        for i in range(1, len(frames)):
            try:
                current = track_frame(A, frames[i].measurement, current, cfg, i).support
            except ValueError:
                # e.g. an adaptive estimate that outgrew m; counts as failure
                current = SupportSet()
            out.append(success(current, truth[i]))
    return out


def run_trial(spec: SweepSpec, k: int, trial: int) -> dict[tuple[str, int], list[bool]]:
    """All change counts and algorithms of one trial; keyed by ``(algorithm, u)``."""
    seed = trial_seed(spec.seed, trial, k)
    sensing = generate_sensing(spec.m, spec.n, seed)
    out = {}
    for u in spec.change_counts:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            params = SceneParams(spec.m, spec.n, spec.r, k, spec.t_max - 1, FixedSwap(u),
                                 spec.snr_db, seed)
        timeline = generate_scene(params, sensing)
        for a in spec.algorithms:
            out[(a, u)] = _run_algorithm(a, timeline, k, spec.r, spec.init, spec.cs_algo)
    return out


def _work(item):
    spec, k, trial = item
    return run_trial(spec, k, trial)


def run_sweep(spec: SweepSpec, workers: int | None = None, progress=None) -> SweepResult:
    """Run every trial of ``spec``; deterministic for any ``workers``."""
    spec.validate()
    start = time.perf_counter()
    items = [(spec, k, i) for k in spec.k_values for i in range(spec.trials)]
    result = SweepResult(spec)
    for a in spec.algorithms:
        for k in spec.k_values:
            for u in spec.change_counts:
                for t in range(1, spec.t_max + 1):
                    result.successes[(a, k, u, t)] = 0
                    result.trials[(a, k, u, t)] = 0

    def consume(item, outcome):
        _, k, _ = item
        for (a, u), flags in outcome.items():
            for t, ok in enumerate(flags, start=1):
                result.successes[(a, k, u, t)] += int(ok)
                result.trials[(a, k, u, t)] += 1

    if workers is None or workers <= 1:
        for n_done, item in enumerate(items, 1):
            consume(item, _work(item))
            if progress is not None:
                progress(n_done, len(items))
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            chunk = max(1, len(items) // (8 * workers))
            for n_done, (item, outcome) in enumerate(
                zip(items, pool.map(_work, items, chunksize=chunk)), 1
            ):
                consume(item, outcome)
                if progress is not None:
                    progress(n_done, len(items))
    result.wall_time = time.perf_counter() - start
    return result


# ---------------------------------------------------------------- 2-D tracking


@dataclass(frozen=True)
class GridSpec:
    """Moving targets on a ``grid_w x grid_h`` image; ``n = grid_w * grid_h``."""

    m: int = 50
    grid_w: int = 30
    grid_h: int = 30
    k: int = 24
    r: int = 9
    r_init: int = 50
    snr_db: float = 40.0
    t_max: int = 45
    scenes: int = 20
    seed: int = 0
    move_prob: float | None = None
    export_frames: tuple[int, ...] = (1, 13, 27, 41)

    def __post_init__(self):
        object.__setattr__(self, "export_frames", tuple(self.export_frames))
        if self.k > self.n:
            raise ConfigError("k", "grid too small to hold k targets")
        if not 0 < self.m < self.n:
            raise ConfigError("m", "require 0 < m < grid_w * grid_h")
        if self.scenes < 1:
            raise ConfigError("scenes", "must be >= 1")
        if self.k >= self.m:
            raise ConfigError("k", "must be < m")
        if any(t < 0 or t > self.t_max for t in self.export_frames):
            raise ConfigError("export_frames", "frames must lie in 0..t_max")
        if not 0 <= self.prob <= 1:
            raise ConfigError("move_prob", "must lie in [0, 1]")

    @property
    def n(self) -> int:
        return self.grid_w * self.grid_h

    @property
    def prob(self) -> float:
        if self.move_prob is not None:
            return self.move_prob
        return 0.5 * (self.r - 1) / self.k

    def scene_params(self, scene: int) -> SceneParams:
        return SceneParams(
            m=self.m, n=self.n, r=self.r, k_init=self.k, t_max=self.t_max,
            change_mode=PerTargetMove(self.prob, self.grid_w, self.grid_h),
            snr_db=self.snr_db, seed=trial_seed(self.seed, scene, self.k),
            r_init=self.r_init,
        )

    @classmethod
    def from_dict(cls, d: dict, seed_override: int | None = None,
                  trials_override: int | None = None) -> "GridSpec":
        if not isinstance(d, dict):
            raise ConfigError("grid", "must be a JSON object")
        known = {f for f in cls.__dataclass_fields__}
        for key in d:
            if key not in known:
                raise ConfigError(key, "unknown field")
        d = dict(d)
        if seed_override is not None:
            d["seed"] = seed_override
        if trials_override is not None:
            d["scenes"] = trials_override
        if d.get("seed") is None:
            raise ConfigError("seed", "no seed in config and none given on the command line")
        for name in ("m", "grid_w", "grid_h", "k", "r", "r_init", "t_max", "scenes", "seed"):
            if name in d:
                _check_int(d, name, 0)
        if "snr_db" in d:
            d["snr_db"] = _check_snr(d["snr_db"])
        if "export_frames" in d:
            d["export_frames"] = tuple(d["export_frames"])
        return cls(**d)


@dataclass(frozen=True)
class GridFrame:
    t: int
    algorithm: str
    width: int
    height: int
    occupied: SupportSet
    estimated: SupportSet
    exact_match: bool

    def __post_init__(self):
        cells = self.width * self.height
        if any(i >= cells for i in self.occupied) or any(i >= cells for i in self.estimated):
            raise ValueError("grid index out of range")

    def to_record(self) -> dict:
        return {
            "t": self.t, "algorithm": self.algorithm, "width": self.width,
            "height": self.height, "occupied": list(self.occupied),
            "estimated": list(self.estimated), "exact_match": self.exact_match,
        }


@dataclass
class GridResult:
    spec: GridSpec
    # per scene, per t = 1..t_max
    exact: dict[str, np.ndarray]
    # frames of scene 0, t = 0..t_max, per algorithm
    frames: dict[str, list[GridFrame]]
    wall_time: float = 0.0

    def mean_exact(self, algorithm: str) -> float:
        return float(self.exact[algorithm].mean())


def _grid_scene(spec: GridSpec, scene: int):
    timeline = generate_scene(spec.scene_params(scene))
    A = timeline.sensing
    truth = timeline.supports()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        init = csmusic_optimized(A, timeline.frames[0].measurement,
                                 RecoveryConfig(spec.k)).support
        cfg = TrackerConfig(mode=TrackerMode.NOISY_FIXED_K, k=spec.k, k_max=spec.k, r=spec.r)
        tracked = [init]
        for t in range(1, spec.t_max + 1):
            tracked.append(track_frame(A, timeline.frames[t].measurement, tracked[-1], cfg, t)
                           .support)
        baseline = [init] + [music(A, timeline.frames[t].measurement, spec.k).support
                             for t in range(1, spec.t_max + 1)]
    return truth, {"tracking": tracked, "music": baseline}


def _grid_work(item):
    spec, scene = item
    return _grid_scene(spec, scene)


def run_grid_tracking(spec: GridSpec, workers: int | None = None) -> GridResult:
    """Tracker vs per-frame MUSIC on moving targets over ``spec.scenes`` seeds."""
    start = time.perf_counter()
    items = [(spec, s) for s in range(spec.scenes)]
    if workers is None or workers <= 1:
        outcomes = [_grid_work(it) for it in items]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_grid_work, items))
    algs = ("tracking", "music")
    exact = {a: np.zeros((spec.scenes, spec.t_max), dtype=bool) for a in algs}
    frames: dict[str, list[GridFrame]] = {a: [] for a in algs}
    for s, (truth, estimates) in enumerate(outcomes):
        for a in algs:
            for t in range(1, spec.t_max + 1):
                exact[a][s, t - 1] = success(estimates[a][t], truth[t])
            if s == 0:
                frames[a] = [
                    GridFrame(t, a, spec.grid_w, spec.grid_h, truth[t], estimates[a][t],
                              success(estimates[a][t], truth[t]))
                    for t in range(spec.t_max + 1)
                ]
    return GridResult(spec, exact, frames, time.perf_counter() - start)


def _pgm_panels(panels: Sequence[SupportSet], w: int, h: int) -> str:
    gutter = 1
    width = len(panels) * w + (len(panels) - 1) * gutter
    img = np.full((h, width), 128, dtype=int)
    for p, cells in enumerate(panels):
        block = np.zeros(w * h, dtype=int)
        block[list(cells)] = 255
        x0 = p * (w + gutter)
        img[:, x0:x0 + w] = block.reshape(h, w)
    rows = "\n".join(" ".join(str(v) for v in row) for row in img)
    return f"P2\n{width} {h}\n255\n{rows}\n"


def write_grid_outputs(result: GridResult, out_dir: str | Path) -> list[Path]:
    """PGM per exported frame (truth | tracker | MUSIC), JSON-lines log, CSV table."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    spec = result.spec
    written = []
    tr, mu = result.frames["tracking"], result.frames["music"]
    for t in spec.export_frames:
        path = out / f"frame_{t:03d}.pgm"
        atomic_write_text(path, _pgm_panels(
            [tr[t].occupied, tr[t].estimated, mu[t].estimated], spec.grid_w, spec.grid_h))
        written.append(path)
    log = "".join(json.dumps(f.to_record()) + "\n"
                  for t in range(spec.t_max + 1) for f in (tr[t], mu[t]))
    atomic_write_text(out / "frames.jsonl", log)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["scene", "t", "tracking_exact", "music_exact"])
    for s in range(spec.scenes):
        for t in range(1, spec.t_max + 1):
            w.writerow([s, t, str(bool(result.exact["tracking"][s, t - 1])).lower(),
                        str(bool(result.exact["music"][s, t - 1])).lower()])
    atomic_write_text(out / "grid.csv", buf.getvalue())
    summary = {
        "tracking_mean_exact": result.mean_exact("tracking"),
        "music_mean_exact": result.mean_exact("music"),
        "scenes": spec.scenes,
    }
    atomic_write_text(out / "summary.json", json.dumps(summary, indent=2) + "\n")
    written += [out / "frames.jsonl", out / "grid.csv", out / "summary.json"]
    return written
