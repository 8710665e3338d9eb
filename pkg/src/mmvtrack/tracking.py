"""Frame-to-frame support tracking for dynamic MMV scenes.

Three recursions share one pattern: a *deletion* step tests every index of
the previous estimate with the support-selection metric, then an *addition*
step scans the remaining columns with the generalized MUSIC metric seeded by
the survivors.

* ``noiseless``      exact zero tests; the sparsity is discovered per frame.
* ``noisy_fixed_k``  known constant sparsity; keep the ``k - r`` smallest
  deletion metrics, add the ``r`` smallest addition metrics.
* ``noisy_adaptive`` thresholds ``eps1``/``eps2`` with numerical-rank subset
  selection so that every projector is built from a well-conditioned,
  full-column-rank matrix.
"""

from __future__ import annotations

import csv
import enum
import io
import json
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from . import linalg
from .linalg import OrthonormalBasis
from .model import MeasurementBlock, SceneTimeline, SensingMatrix, SupportSet, canonicalize
from .recovery import (
    DEFAULT_ZERO_TOL,
    MetricVector,
    _as_sensing,
    _finish,
    _normalize,
    gmusic_metric,
    signal_basis,
    support_selection_metric,
)

__all__ = [
    "TrackerMode",
    "TrackerConfig",
    "TrackerState",
    "default_thresholds",
    "track_noiseless",
    "track_noisy_fixed_k",
    "track_noisy_adaptive",
    "track_frame",
    "track_scene",
    "states_to_jsonl",
    "states_to_csv",
]

ASSUMPTION_VIOLATED = "tracking assumption violated"


class TrackerMode(str, enum.Enum):
    NOISELESS = "noiseless"
    NOISY_FIXED_K = "noisy_fixed_k"
    NOISY_ADAPTIVE = "noisy_adaptive"


@dataclass(frozen=True)
class TrackerConfig:
    """Tracker settings.

    ``eps1``/``eps2`` default to :func:`default_thresholds`.  ``nrank_tol`` is
    the pivot threshold of the numerical-rank subset selection: a unit column
    counts as independent when more than ``nrank_tol`` of its norm lies outside
    the current span.  ``k`` is only used by ``noisy_fixed_k``.
    """

    mode: TrackerMode = TrackerMode.NOISELESS
    k_max: int = 0
    r: int = 0
    k: int | None = None
    eps1: float | None = None
    eps2: float | None = None
    zero_tol: float = DEFAULT_ZERO_TOL
    nrank_tol: float = 0.1
    use_column_truncation: bool = False
    normalize: bool = True

    def __post_init__(self):
        object.__setattr__(self, "mode", TrackerMode(self.mode))
        if self.r < 0 or self.k_max < 0:
            raise ValueError("r and k_max must be non-negative")
        if self.k_max and self.r and self.k_max < self.r:
            raise ValueError("k_max must be >= r")
        for name in ("eps1", "eps2"):
            v = getattr(self, name)
            if v is not None and not 0.0 < v < 1.0:
                raise ValueError(f"{name} must lie in (0, 1)")
        if self.mode is TrackerMode.NOISY_FIXED_K and (self.k is None or self.k < 1):
            raise ValueError("noisy_fixed_k needs k >= 1")
        if self.zero_tol <= 0:
            raise ValueError("zero_tol must be positive")
        if not 0.0 < self.nrank_tol < 1.0:
            raise ValueError("nrank_tol must lie in (0, 1)")

    def thresholds(self, m: int) -> tuple[float, float]:
        if self.eps1 is not None and self.eps2 is not None:
            return self.eps1, self.eps2
        e1, e2 = default_thresholds(m, self.k_max, self.r)
        return (self.eps1 if self.eps1 is not None else e1,
                self.eps2 if self.eps2 is not None else e2)

    def to_dict(self) -> dict:
        return {
            "mode": self.mode.value, "k_max": self.k_max, "r": self.r, "k": self.k,
            "eps1": self.eps1, "eps2": self.eps2, "zero_tol": self.zero_tol,
            "nrank_tol": self.nrank_tol,
            "use_column_truncation": self.use_column_truncation,
            "normalize": self.normalize,
        }


@dataclass(frozen=True)
class TrackerState:
    """Support estimate after one frame.

    ``last_deletion`` holds the indices removed by the deletion step and
    ``last_addition`` those brought in by the addition step.
    """

    t: int
    support: SupportSet
    k_hat: int
    last_deletion: SupportSet = SupportSet()
    last_addition: SupportSet = SupportSet()
    diagnostics: dict = field(default_factory=dict)
    exact_match: bool | None = None

    @property
    def flags(self) -> tuple[str, ...]:
        return tuple(self.diagnostics.get("flags", ()))

    def to_record(self) -> dict:
        return {
            "t": self.t,
            "support": list(self.support),
            "k_hat": self.k_hat,
            "deleted": list(self.last_deletion),
            "added": list(self.last_addition),
            "exact_match": self.exact_match,
            "flags": list(self.flags),
        }


def default_thresholds(m: int, k_max: int, r: int) -> tuple[float, float]:
    """Deletion/addition thresholds from the large-system ratios.

    With ``gamma = k_max / m`` and ``alpha = r / k_max``:
    ``eps1 = (1 - gamma (1 + alpha)) / 2`` and ``eps2 = (1 - gamma) / 2``.
    """
    if r < 1:
        raise ValueError("r must be >= 1")
    if k_max < r:
        raise ValueError("k_max must be >= r")
    if k_max + r >= m:
        raise ValueError("threshold formula outside validity (need k_max + r < m)")
    # gamma (1 + alpha) = (k_max + r) / m; integer form keeps the result exact
    eps1 = (m - k_max - r) / (2 * m)
    eps2 = (m - k_max) / (2 * m)
    return eps1, eps2


def _canonical(Y: MeasurementBlock | np.ndarray, k: int | None = None) -> MeasurementBlock:
    if not isinstance(Y, MeasurementBlock):
        Y = MeasurementBlock(np.asarray(Y, float))
    if Y.canonical and (k is None or Y.r <= k):
        return Y
    return canonicalize(Y, rank=k)[0]


def _state(t: int, prev: SupportSet, kept: SupportSet, final: SupportSet,
           diagnostics: dict) -> TrackerState:
    return TrackerState(
        t=t,
        support=final,
        k_hat=len(final),
        last_deletion=prev - kept,
        last_addition=final - kept,
        diagnostics=diagnostics,
    )


def track_noiseless(A, B_t, I_prev: Iterable[int], cfg: TrackerConfig,
                    t: int = 0) -> TrackerState:
    """One step of exact noiseless tracking.

    Deletion keeps ``j`` in ``I_prev`` with ``zeta(j) <= zero_tol``; addition
    collects every ``j`` with ``eta(j) <= zero_tol`` given the survivors.
    The returned ``k_hat`` is discovered, not supplied.
    """
    A = _as_sensing(A)
    B = _canonical(B_t)
    prev = SupportSet(I_prev)
    basis = signal_basis(B)
    r = basis.basis_dim
    flags: list[str] = []

    del_basis = basis
    if len(prev) + r > A.m:
        if not cfg.use_column_truncation:
            raise ValueError(
                f"deletion test needs |I_prev| + r <= m (got {len(prev)} + {r} > {A.m})"
            )
        cols = min(r, 1 + cfg.k_max // 2)
        del_basis = signal_basis(B.data[:, :cols])
        flags.append("column_truncation")

    zeta = support_selection_metric(A, None, prev, normalize=cfg.normalize, basis=del_basis)
    kept = zeta.below(cfg.zero_tol)
    if prev and not kept:
        flags.append(ASSUMPTION_VIOLATED)
    eta = gmusic_metric(A, None, kept, normalize=cfg.normalize, basis=basis,
                        allow_rank_deficient=True)
    final = kept | eta.below(cfg.zero_tol)
    flags.extend(zeta.flags + eta.flags)
    return _state(t, prev, kept, final, {"zeta": zeta, "eta": eta, "flags": flags})


def track_noisy_fixed_k(A, Y_t, I_prev: Iterable[int], k: int, cfg: TrackerConfig,
                        t: int = 0) -> TrackerState:
    """One step of ordering-based tracking at known constant sparsity ``k``.

    Keeps the ``k - r`` smallest deletion metrics of ``I_prev`` and adds the
    ``r`` smallest generalized MUSIC metrics over the other columns.
    """
    A = _as_sensing(A)
    prev = SupportSet(I_prev)
    if len(prev) != k:
        raise ValueError(f"|I_prev| = {len(prev)} but k = {k}")
    if k >= A.m:
        raise ValueError("require k < m")
    Y = _canonical(Y_t, k)
    basis = signal_basis(Y, k)
    r = basis.basis_dim
    flags: list[str] = []
    del_basis = basis
    if k + r > A.m:
        if not cfg.use_column_truncation:
            raise ValueError(f"deletion test needs k + r <= m (got {k} + {r} > {A.m})")
        del_basis = OrthonormalBasis(basis.columns[:, : min(r, 1 + cfg.k_max // 2)])
        flags.append("column_truncation")
    zeta = support_selection_metric(A, None, prev, normalize=cfg.normalize, basis=del_basis)
    kept = zeta.smallest(k - r)
    eta = gmusic_metric(A, None, kept, normalize=cfg.normalize, basis=basis,
                        allow_rank_deficient=True)
    final = kept | eta.smallest(r)
    flags.extend(zeta.flags + eta.flags)
    return _state(t, prev, kept, final, {"zeta": zeta, "eta": eta, "flags": flags})


def _independent_span(A: SensingMatrix, base: OrthonormalBasis, candidates: np.ndarray,
                      tol: float) -> tuple[OrthonormalBasis, np.ndarray]:
    """Span of ``base`` plus a numerically independent subset of the candidates."""
    if candidates.size == 0:
        return base, candidates
    pos = linalg.pivoted_independent_columns(base, A.data[:, candidates], tol)
    chosen = candidates[pos]
    if chosen.size == 0:
        return base, chosen
    span = linalg.orthonormal_basis(np.hstack([base.columns, A.data[:, chosen]]))
    return span, chosen


def track_noisy_adaptive(A, Y_t, I_prev: Iterable[int], cfg: TrackerConfig,
                         t: int = 0) -> TrackerState:
    """One step of threshold-based noisy tracking with unknown sparsity.

    Deletion keeps ``j`` in ``I_prev`` whose normalized residual off
    ``R([Y A_{I1}])`` is below ``eps1``, where ``I1`` is a numerically
    independent subset of ``I_prev - {j}`` (so ``[Y A_{I1}]`` has numerical
    rank ``r + |I1|`` and the same numerical span as ``[Y A_{I_prev - j}]``).
    Addition accepts ``j`` whose residual off ``R([Y A_{I2}])`` is below
    ``eps2``, ``I2`` being an independent subset of the survivors.
    """
    A = _as_sensing(A)
    prev = SupportSet(I_prev)
    Y = _canonical(Y_t)
    basis = signal_basis(Y)
    r = basis.basis_dim
    k_max = cfg.k_max or len(prev)
    cfg_r = cfg.r or r
    eps1, eps2 = (cfg.eps1, cfg.eps2)
    if eps1 is None or eps2 is None:
        d1, d2 = default_thresholds(A.m, k_max, cfg_r)
        eps1 = d1 if eps1 is None else eps1
        eps2 = d2 if eps2 is None else eps2
    tol = cfg.nrank_tol
    flags: list[str] = []

    prev_arr = prev.to_array()
    zeta_raw = np.empty(prev_arr.size)
    i1_sizes = []
    for pos, j in enumerate(prev_arr):
        others = np.delete(prev_arr, pos)
        span, chosen = _independent_span(A, basis, others, tol)
        i1_sizes.append(int(chosen.size))
        zeta_raw[pos] = linalg.residual_sq_norms(span, A.data[:, j])[0]
    zeta = MetricVector(prev_arr, _normalize(_finish(zeta_raw), A, prev_arr, cfg.normalize))
    kept = zeta.below(eps1, strict=True)
    if prev and not kept:
        flags.append(ASSUMPTION_VIOLATED)

    kept_arr = kept.to_array()
    span2, i2 = _independent_span(A, basis, kept_arr, tol)
    mask = np.ones(A.n, dtype=bool)
    mask[kept_arr] = False
    idx = np.flatnonzero(mask)
    eta_raw = linalg.residual_sq_norms(span2, A.data[:, idx])
    eta = MetricVector(idx, _normalize(_finish(eta_raw), A, idx, cfg.normalize))
    final = kept | eta.below(eps2, strict=True)
    if cfg.k_max and len(final) > cfg.k_max:
        flags.append("k_max exceeded")
    diagnostics = {
        "zeta": zeta, "eta": eta, "flags": flags,
        "eps1": eps1, "eps2": eps2, "I1_sizes": i1_sizes, "I2": SupportSet(i2),
    }
    return _state(t, prev, kept, final, diagnostics)


def track_frame(A, Y_t, I_prev, cfg: TrackerConfig, t: int = 0) -> TrackerState:
    if cfg.mode is TrackerMode.NOISELESS:
        return track_noiseless(A, Y_t, I_prev, cfg, t)
    if cfg.mode is TrackerMode.NOISY_FIXED_K:
        return track_noisy_fixed_k(A, Y_t, I_prev, cfg.k, cfg, t)
    return track_noisy_adaptive(A, Y_t, I_prev, cfg, t)


def track_scene(A, timeline: SceneTimeline, I0: Iterable[int], cfg: TrackerConfig,
                start: int = 0) -> list[TrackerState]:
    """Fold the per-frame tracker over the frames after ``start``.

    The first returned state is ``I0`` at frame ``start``.  When the timeline
    carries ground truth every state records ``exact_match``.
    """
    A = _as_sensing(A) if A is not None else timeline.sensing
    truth = timeline.supports()
    I0 = SupportSet(I0)
    states = [TrackerState(start, I0, len(I0), exact_match=(I0 == truth[start]))]
    current = I0
    for t in range(start + 1, len(timeline.frames)):
        st = track_frame(A, timeline.frames[t].measurement, current, cfg, t)
        st = replace(st, exact_match=(st.support == truth[t]))
        states.append(st)
        current = st.support
    return states


def states_to_jsonl(states: Sequence[TrackerState]) -> str:
    return "".join(json.dumps(s.to_record()) + "\n" for s in states)


def states_to_csv(states: Sequence[TrackerState]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t", "k_hat", "exact_match", "deleted", "added"])
    for s in states:
        em = "" if s.exact_match is None else str(bool(s.exact_match)).lower()
        w.writerow([s.t, s.k_hat, em, len(s.last_deletion), len(s.last_addition)])
    return buf.getvalue()
