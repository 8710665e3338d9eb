"""Problem generation and canonicalisation for dynamic MMV scenes.

Random streams
--------------
Every random draw comes from a Philox (counter-based) generator keyed by a
``numpy.random.SeedSequence`` built from ``(seed, *key)``.  The key layout is
fixed so that any single frame of any trial can be regenerated in isolation:

* ``(seed, 0)``            sensing matrix
* ``(seed, 1)``            frame-0 support (and grid positions)
* ``(seed, 2, t)``         support evolution from frame ``t-1`` to ``t``
* ``(seed, 3, t)``         amplitudes of frame ``t``
* ``(seed, 4, t)``         measurement noise of frame ``t``

Streams never depend on how many workers are running.
"""

from __future__ import annotations

import enum
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import linalg
from ._io import atomic_write_text

__all__ = [
    "SupportSet",
    "SensingMatrix",
    "JointSparseSignal",
    "MeasurementBlock",
    "MeasurementKind",
    "FixedSwap",
    "PerTargetMove",
    "SceneParams",
    "Frame",
    "SceneTimeline",
    "ConfigError",
    "stream",
    "generate_sensing",
    "generate_scene",
    "add_noise",
    "canonicalize",
    "snr_min_check",
    "projection_perturbation_bound",
    "export_timeline",
]

_SENSING, _SUPPORT0, _EVOLVE, _AMPLITUDE, _NOISE = range(5)


class ConfigError(ValueError):
    """Invalid configuration; ``field`` names the offending entry."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


def stream(seed: int, *key: int) -> np.random.Generator:
    """Independent Philox stream for ``(seed, *key)``."""
    if seed < 0:
        raise ValueError("seed must be non-negative")
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


class SupportSet(tuple):
    """Strictly increasing tuple of column indices."""

    def __new__(cls, indices: Sequence[int] = ()):
        idx = sorted(int(i) for i in indices)
        if any(i < 0 for i in idx):
            raise ValueError("support indices must be non-negative")
        if len(set(idx)) != len(idx):
            raise ValueError("support indices must be distinct")
        return super().__new__(cls, idx)

    def __repr__(self) -> str:
        return f"SupportSet({list(self)})"

    def to_array(self) -> np.ndarray:
        return np.asarray(self, dtype=int)

    def __or__(self, other):
        return SupportSet(set(self) | set(other))

    def __and__(self, other):
        return SupportSet(set(self) & set(other))

    def __sub__(self, other):
        return SupportSet(set(self) - set(other))


@dataclass(frozen=True)
class SensingMatrix:
    data: np.ndarray
    column_sq_norms: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        data = np.array(self.data, dtype=float)
        if data.ndim != 2:
            raise ValueError("sensing matrix must be 2-D")
        if not np.all(np.isfinite(data)):
            raise ValueError("sensing matrix has non-finite entries")
        data.setflags(write=False)
        norms = np.einsum("ij,ij->j", data, data)
        norms.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "column_sq_norms", norms)

    @property
    def m(self) -> int:
        return self.data.shape[0]

    @property
    def n(self) -> int:
        return self.data.shape[1]

    def columns(self, idx) -> np.ndarray:
        return self.data[:, np.asarray(list(idx), dtype=int)]


@dataclass(frozen=True)
class JointSparseSignal:
    data: np.ndarray
    support: SupportSet

    def __post_init__(self):
        data = np.asarray(self.data, dtype=float)
        support = SupportSet(self.support)
        off = np.ones(data.shape[0], dtype=bool)
        off[list(support)] = False
        if np.any(data[off] != 0):
            raise ValueError("rows outside the support must be zero")
        if support and np.any(np.all(data[list(support)] == 0, axis=1)):
            raise ValueError("support rows must be nonzero")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "support", support)

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def r(self) -> int:
        return self.data.shape[1]

    @property
    def k(self) -> int:
        return len(self.support)


class MeasurementKind(str, enum.Enum):
    NOISELESS = "noiseless"
    NOISY = "noisy"


@dataclass(frozen=True)
class MeasurementBlock:
    data: np.ndarray
    kind: MeasurementKind = MeasurementKind.NOISELESS
    canonical: bool = False

    def __post_init__(self):
        data = np.asarray(self.data, dtype=float)
        if data.ndim == 1:
            data = data[:, None]
        if not np.all(np.isfinite(data)):
            raise ValueError("measurement block has non-finite entries")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "kind", MeasurementKind(self.kind))

    @property
    def m(self) -> int:
        return self.data.shape[0]

    @property
    def r(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class FixedSwap:
    u: int
    kind: str = field(default="fixed_swap", init=False)


@dataclass(frozen=True)
class PerTargetMove:
    prob: float
    grid_w: int
    grid_h: int
    kind: str = field(default="per_target_move", init=False)


@dataclass(frozen=True)
class SceneParams:
    """Generation parameters of a scene timeline.

    ``k_schedule`` (optional) gives the sparsity of every frame 0..t_max and
    ``r_init`` (optional) the number of snapshots of frame 0 only, used for a
    high-rank resting block.
    """

    m: int
    n: int
    r: int
    k_init: int
    t_max: int
    change_mode: FixedSwap | PerTargetMove
    snr_db: float
    seed: int
    k_schedule: tuple[int, ...] | None = None
    r_init: int | None = None

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("m", "n", "r", "k_init", "t_max", "seed"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
                raise ConfigError(name, "must be an integer")
        if not 0 < self.m < self.n:
            raise ConfigError("m", "require 0 < m < n")
        if self.r < 1:
            raise ConfigError("r", "must be >= 1")
        if self.t_max < 0:
            raise ConfigError("t_max", "must be >= 0")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed", "must be a 64-bit unsigned integer")
        if self.k_init < 1 or self.k_init >= self.m:
            raise ConfigError("k_init", "require 1 <= k_init < m")
        if self.r_init is not None and self.r_init < 1:
            raise ConfigError("r_init", "must be >= 1")
        snr = self.snr_db
        if not isinstance(snr, (int, float)) or math.isnan(snr) or snr == -math.inf:
            raise ConfigError("snr_db", "must be a number or +inf")
        mode = self.change_mode
        if isinstance(mode, FixedSwap):
            if mode.u < 0:
                raise ConfigError("change_mode.u", "must be >= 0")
            if mode.u > self.r - 1:
                warnings.warn(
                    f"u={mode.u} exceeds r-1={self.r - 1}; tracking is not guaranteed",
                    stacklevel=3,
                )
            if mode.u > self.n - self.k_init:
                raise ConfigError("change_mode.u", "more entering indices than free columns")
        elif isinstance(mode, PerTargetMove):
            if not 0.0 <= mode.prob <= 1.0:
                raise ConfigError("change_mode.prob", "must lie in [0, 1]")
            if mode.grid_w < 1 or mode.grid_h < 1:
                raise ConfigError("change_mode.grid_w", "grid sides must be >= 1")
            if mode.grid_w * mode.grid_h != self.n:
                raise ConfigError("change_mode.grid_w", "grid_w * grid_h must equal n")
            if self.k_schedule is not None:
                raise ConfigError("k_schedule", "not supported with per_target_move")
        else:
            raise ConfigError("change_mode", f"unknown change mode {mode!r}")
        if self.k_schedule is not None:
            ks = tuple(self.k_schedule)
            if len(ks) != self.t_max + 1:
                raise ConfigError("k_schedule", "needs one entry per frame 0..t_max")
            if ks[0] != self.k_init:
                raise ConfigError("k_schedule", "first entry must equal k_init")
            if any(k < 1 or k >= self.m for k in ks):
                raise ConfigError("k_schedule", "entries must satisfy 1 <= k < m")
            object.__setattr__(self, "k_schedule", ks)

    def sparsity(self, t: int) -> int:
        return self.k_init if self.k_schedule is None else self.k_schedule[t]

    def snapshots(self, t: int) -> int:
        return self.r_init if (t == 0 and self.r_init is not None) else self.r

    def to_dict(self) -> dict:
        mode = self.change_mode
        if isinstance(mode, FixedSwap):
            mode_d = {"kind": "fixed_swap", "u": mode.u}
        else:
            mode_d = {
                "kind": "per_target_move",
                "prob": mode.prob,
                "grid_w": mode.grid_w,
                "grid_h": mode.grid_h,
            }
        d = {
            "m": self.m,
            "n": self.n,
            "r": self.r,
            "k_init": self.k_init,
            "t_max": self.t_max,
            "change_mode": mode_d,
            "snr_db": "inf" if math.isinf(self.snr_db) else self.snr_db,
            "seed": self.seed,
        }
        if self.k_schedule is not None:
            d["k_schedule"] = list(self.k_schedule)
        if self.r_init is not None:
            d["r_init"] = self.r_init
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict, seed_override: int | None = None) -> "SceneParams":
        if not isinstance(d, dict):
            raise ConfigError("scene", "must be a JSON object")
        known = {"m", "n", "r", "k_init", "t_max", "change_mode", "snr_db", "seed",
                 "k_schedule", "r_init"}
        for key in d:
            if key not in known:
                raise ConfigError(key, "unknown field")
        required = ["m", "n", "r", "k_init", "t_max", "change_mode", "snr_db"]
        for key in required:
            if key not in d:
                raise ConfigError(key, "missing required field")
        seed = seed_override if seed_override is not None else d.get("seed")
        if seed is None:
            raise ConfigError("seed", "no seed in config and none given on the command line")
        mode_d = d["change_mode"]
        if not isinstance(mode_d, dict) or "kind" not in mode_d:
            raise ConfigError("change_mode", "must be an object with a 'kind' entry")
        try:
            if mode_d["kind"] == "fixed_swap":
                mode = FixedSwap(int(mode_d["u"]))
            elif mode_d["kind"] == "per_target_move":
                mode = PerTargetMove(
                    float(mode_d["prob"]), int(mode_d["grid_w"]), int(mode_d["grid_h"])
                )
            else:
                raise ConfigError("change_mode.kind", f"unknown kind {mode_d['kind']!r}")
        except KeyError as exc:
            raise ConfigError(f"change_mode.{exc.args[0]}", "missing required field") from None
        snr = d["snr_db"]
        if snr is None or snr == "inf":
            snr = math.inf
        elif not isinstance(snr, (int, float)) or isinstance(snr, bool):
            raise ConfigError("snr_db", "must be a number, 'inf' or null")
        ks = d.get("k_schedule")
        return cls(
            m=d["m"], n=d["n"], r=d["r"], k_init=d["k_init"], t_max=d["t_max"],
            change_mode=mode, snr_db=float(snr), seed=seed,
            k_schedule=tuple(ks) if ks is not None else None,
            r_init=d.get("r_init"),
        )

    @classmethod
    def from_json(cls, text: str, seed_override: int | None = None) -> "SceneParams":
        return cls.from_dict(json.loads(text), seed_override)


@dataclass(frozen=True)
class Frame:
    signal: JointSparseSignal
    measurement: MeasurementBlock


@dataclass(frozen=True)
class SceneTimeline:
    sensing: SensingMatrix
    frames: tuple[Frame, ...]
    params: SceneParams
    # grid cell of every target per frame (per_target_move only)
    positions: tuple[tuple[int, ...], ...] | None = None

    def __len__(self) -> int:
        return len(self.frames)

    def __iter__(self) -> Iterator[Frame]:
        return iter(self.frames)

    def supports(self) -> list[SupportSet]:
        return [f.signal.support for f in self.frames]


def generate_sensing(m: int, n: int, seed: int) -> SensingMatrix:
    """Gaussian sensing matrix with i.i.d. N(0, 1/m) entries."""
    if not 0 < m < n:
        raise ValueError("require 0 < m < n")
    rng = stream(seed, _SENSING)
    return SensingMatrix(rng.standard_normal((m, n)) / math.sqrt(m))


def _initial_support(params: SceneParams, rng: np.random.Generator) -> np.ndarray:
    return np.sort(rng.choice(params.n, size=params.k_init, replace=False))


def _swap_step(
    support: np.ndarray, u: int, k_new: int, n: int, rng: np.random.Generator
) -> np.ndarray:
    # Permutations are drawn in full so that the first u entering indices do
    # not depend on u (coupled draws across change counts).
    k_old = support.size
    leaving = u + k_old - k_new
    if leaving < 0 or leaving > k_old:
        raise ConfigError(
            "k_schedule", f"cannot go from k={k_old} to k={k_new} with u={u} entering"
        )
    complement = np.setdiff1d(np.arange(n), support)
    out_order = rng.permutation(support)
    in_order = rng.permutation(complement)
    kept = out_order[leaving:]
    return np.sort(np.concatenate([kept, in_order[:u]]))


def _neighbours(cell: int, w: int, h: int) -> list[int]:
    x, y = cell % w, cell // w
    out = []
    for dx, dy in ((1, 0), (-1, 0), (0, 1), (0, -1)):
        nx, ny = x + dx, y + dy
        if 0 <= nx < w and 0 <= ny < h:
            out.append(ny * w + nx)
    return out


def _move_targets(
    positions: list[int], mode: PerTargetMove, rng: np.random.Generator
) -> list[int]:
    occupied = set(positions)
    new = list(positions)
    moves = rng.random(len(positions))
    picks = rng.random(len(positions))
    for i, cell in enumerate(positions):
        if moves[i] >= mode.prob:
            continue
        free = [c for c in _neighbours(cell, mode.grid_w, mode.grid_h) if c not in occupied]
        if not free:
            continue
        dest = free[int(picks[i] * len(free))]
        occupied.discard(cell)
        occupied.add(dest)
        new[i] = dest
    return new


def _amplitudes(
    support: np.ndarray, n: int, r: int, rng: np.random.Generator
) -> np.ndarray:
    # Full n x r draw masked to the support keeps amplitudes independent of
    # which indices happen to be active.
    Z = rng.standard_normal((n, r))
    X = np.zeros((n, r))
    X[support] = Z[support]
    return X


def generate_scene(params: SceneParams, sensing: SensingMatrix | None = None) -> SceneTimeline:
    """Generate a slowly varying joint-sparse timeline with frames 0..t_max."""
    params.validate()
    if sensing is None:
        sensing = generate_sensing(params.m, params.n, params.seed)
    elif sensing.data.shape != (params.m, params.n):
        raise ValueError("sensing matrix shape does not match params")
    mode = params.change_mode
    rng0 = stream(params.seed, _SUPPORT0)

    positions_log = None
    if isinstance(mode, PerTargetMove):
        if params.k_init > params.n:
            raise ConfigError("k_init", "grid too small to hold the targets")
        positions = [int(c) for c in rng0.choice(params.n, size=params.k_init, replace=False)]
        positions_log = [tuple(positions)]
        support = np.sort(np.asarray(positions))
    else:
        support = _initial_support(params, rng0)

    frames = []
    for t in range(params.t_max + 1):
        if t > 0:
            rng = stream(params.seed, _EVOLVE, t)
            if isinstance(mode, PerTargetMove):
                positions = _move_targets(positions, mode, rng)
                positions_log.append(tuple(positions))
                support = np.sort(np.asarray(positions))
            else:
                support = _swap_step(support, mode.u, params.sparsity(t), params.n, rng)
        r_t = params.snapshots(t)
        X = _amplitudes(support, params.n, r_t, stream(params.seed, _AMPLITUDE, t))
        signal = JointSparseSignal(X, SupportSet(support))
        B = MeasurementBlock(sensing.data @ X, MeasurementKind.NOISELESS)
        Y = add_noise(B, params.snr_db, stream(params.seed, _NOISE, t))
        frames.append(Frame(signal, Y))

    return SceneTimeline(
        sensing=sensing,
        frames=tuple(frames),
        params=params,
        positions=tuple(positions_log) if positions_log is not None else None,
    )


def add_noise(
    B: MeasurementBlock, snr_db: float, seed: int | np.random.Generator
) -> MeasurementBlock:
    """Add white Gaussian noise at an exact Frobenius SNR.

    The drawn noise is rescaled so that
    ``20 log10(||B||_F / ||N||_F) == snr_db``.  ``snr_db = inf`` returns ``B``.
    """
    if B.kind is not MeasurementKind.NOISELESS:
        raise ValueError("add_noise expects a noiseless block")
    if math.isinf(snr_db) and snr_db > 0:
        return B
    b_norm = np.linalg.norm(B.data)
    if b_norm == 0.0:
        raise ValueError("cannot set an SNR on a zero block")
    rng = seed if isinstance(seed, np.random.Generator) else stream(seed, _NOISE)
    N = rng.standard_normal(B.data.shape)
    N *= b_norm * 10.0 ** (-snr_db / 20.0) / np.linalg.norm(N)
    return MeasurementBlock(B.data + N, MeasurementKind.NOISY, canonical=False)


def canonicalize(
    Y: MeasurementBlock,
    X: JointSparseSignal | None = None,
    tol: float | None = None,
    rank: int | None = None,
) -> tuple[MeasurementBlock, JointSparseSignal | None]:
    """Reduce a block to canonical form ``Y V`` with full column rank.

    ``V`` holds the leading right singular vectors of ``Y``; their number is
    the numerical rank of ``Y``, capped at ``rank`` when given (signal-subspace
    truncation for noisy blocks).  ``X`` is mapped to ``X V`` alongside.
    """
    data = Y.data
    if not np.any(data):
        raise ValueError("cannot canonicalize a zero block")
    _, s, Vt = np.linalg.svd(data, full_matrices=False)
    if tol is None:
        tol = linalg.default_rank_tol(data.shape)
    r = int(np.count_nonzero(s > tol * s[0]))
    if rank is not None:
        r = max(1, min(r, int(rank)))
    V = Vt[:r].T
    out = MeasurementBlock(data @ V, Y.kind, canonical=True)
    X_out = None
    if X is not None:
        XV = X.data @ V
        # rows outside the support are exact zeros, so XV keeps them zero
        X_out = JointSparseSignal(XV, X.support)
    return out, X_out


def snr_min_check(B, N, gamma: float, alpha: float) -> tuple[float, float, bool]:
    """Minimum-SNR sufficient condition for the noisy thresholds.

    Returns ``(snr_min, bound, satisfied)`` with
    ``snr_min = sigma_min(B) / ||N||`` and
    ``bound = 1 + 4 (kappa(B) + 1) / (1 - gamma (1 + alpha))``.
    """
    B = B.data if isinstance(B, MeasurementBlock) else np.asarray(B, dtype=float)
    N = np.asarray(N, dtype=float)
    denom = 1.0 - gamma * (1.0 + alpha)
    if denom <= 0:
        raise ValueError("require gamma * (1 + alpha) < 1")
    s = np.linalg.svd(B, compute_uv=False)
    tol = linalg.default_rank_tol(B.shape)
    if s.size == 0 or s[0] == 0 or np.count_nonzero(s > tol * s[0]) < B.shape[1]:
        raise ValueError("B must have full column rank")
    s_min, s_max = s[-1], s[0]
    bound = 1.0 + 4.0 * (s_max / s_min + 1.0) / denom
    n_norm = linalg.spectral_norm(N)
    if n_norm == 0.0:
        return math.inf, bound, True
    snr_min = s_min / n_norm
    return snr_min, bound, snr_min > bound


def projection_perturbation_bound(B, N) -> float:
    """Upper bound on ``||P_R(B+N) - P_R(B)||`` for ``||N|| < sigma_min(B)``.

    ``2 (s_max + s_min) ||N|| / (s_min (s_min - ||N||))`` with the extreme
    nonzero singular values of ``B``.
    """
    B = B.data if isinstance(B, MeasurementBlock) else np.asarray(B, dtype=float)
    s = np.linalg.svd(B, compute_uv=False)
    s_max = s[0]
    s_min = linalg.min_nonzero_singular(B)
    n_norm = linalg.spectral_norm(N)
    if n_norm >= s_min:
        raise ValueError("bound needs ||N|| < sigma_min(B)")
    return 2.0 * (s_max + s_min) * n_norm / (s_min * (s_min - n_norm))


def _write_csv(path: Path, array: np.ndarray, header: str | None = None) -> None:
    lines = [] if header is None else [header]
    arr = np.atleast_2d(array)
    lines.extend(",".join(repr(float(v)) for v in row) for row in arr)
    atomic_write_text(path, "\n".join(lines) + "\n")


def export_timeline(timeline: SceneTimeline, out_dir: str | Path) -> Path:
    """Write ``params.json``, ``sensing.csv`` and per-frame CSV files."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out / "params.json", timeline.params.to_json() + "\n")
    _write_csv(out / "sensing.csv", timeline.sensing.data)
    for t, frame in enumerate(timeline.frames):
        _write_csv(out / f"frame_{t:03d}_signal.csv", frame.signal.data)
        _write_csv(out / f"frame_{t:03d}_measurement.csv", frame.measurement.data)
        atomic_write_text(
            out / f"frame_{t:03d}_support.csv",
            "index\n" + "".join(f"{i}\n" for i in frame.signal.support),
        )
    return out
