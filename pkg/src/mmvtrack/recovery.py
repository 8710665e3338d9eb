"""Static joint-sparse support recovery.

Greedy compressed-sensing steps (S-OMP, 2-thresholding), classical MUSIC,
the generalized MUSIC metric, the support-selection metric and the two
compressive MUSIC procedures built from them.

All subspace metrics are quadratic forms ``a_j^T P a_j`` in orthogonal
projectors.  By default they are divided by ``||a_j||^2`` so the zero test is
scale-free; pass ``normalize=False`` for the raw forms.  Orderings are stable
with ties broken towards the lower index.
"""

from __future__ import annotations

import enum
import itertools
import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import linalg
from .linalg import OrthonormalBasis
from .model import MeasurementBlock, SensingMatrix, SupportSet

__all__ = [
    "CSAlgorithm",
    "RecoveryConfig",
    "MetricVector",
    "RecoveryResult",
    "DegenerateDictionaryError",
    "DegenerateSupportError",
    "somp",
    "two_thresholding",
    "music",
    "music_metric",
    "gmusic_metric",
    "gmusic_metric_complement",
    "support_selection_metric",
    "csmusic",
    "csmusic_optimized",
    "spark_bruteforce",
    "signal_basis",
]

DEFAULT_ZERO_TOL = 1e-8
# quadratic forms may dip below zero by rounding only
NEGATIVE_SLACK = 1e-10


class DegenerateDictionaryError(ValueError):
    pass


class DegenerateSupportError(ValueError):
    pass


class CSAlgorithm(str, enum.Enum):
    SOMP = "somp"
    TWO_THRESHOLDING = "two_thresholding"


@dataclass(frozen=True)
class RecoveryConfig:
    k: int
    cs_algo: CSAlgorithm = CSAlgorithm.SOMP
    zero_tol: float = DEFAULT_ZERO_TOL
    normalize: bool = True

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.zero_tol <= 0:
            raise ValueError("zero_tol must be positive")
        object.__setattr__(self, "cs_algo", CSAlgorithm(self.cs_algo))


@dataclass(frozen=True)
class MetricVector:
    """Metric value per candidate index, plus any degeneracy flags."""

    indices: np.ndarray
    values: np.ndarray
    flags: tuple[str, ...] = ()

    def __len__(self) -> int:
        return self.indices.size

    def as_dict(self) -> dict[int, float]:
        return {int(i): float(v) for i, v in zip(self.indices, self.values)}

    def ascending(self) -> np.ndarray:
        """Indices sorted by value, lower index first on ties."""
        order = np.lexsort((self.indices, self.values))
        return self.indices[order]

    def smallest(self, count: int) -> SupportSet:
        return SupportSet(self.ascending()[:count])

    def below(self, threshold: float, strict: bool = False) -> SupportSet:
        mask = self.values < threshold if strict else self.values <= threshold
        return SupportSet(self.indices[mask])


@dataclass(frozen=True)
class RecoveryResult:
    algorithm: str
    k: int
    r: int
    support: SupportSet
    metrics: dict[str, MetricVector] = field(default_factory=dict)
    degenerate_flags: tuple[str, ...] = ()

    def to_record(self, include_metrics: bool = False) -> dict:
        rec = {
            "algorithm": self.algorithm,
            "k": self.k,
            "r": self.r,
            "support": list(self.support),
            "degenerate_flags": list(self.degenerate_flags),
        }
        if include_metrics:
            rec["metrics"] = {
                name: {str(i): v for i, v in mv.as_dict().items()}
                for name, mv in self.metrics.items()
            }
        return rec

    def to_json(self, include_metrics: bool = False) -> str:
        return json.dumps(self.to_record(include_metrics))


def _block_data(B) -> np.ndarray:
    return B.data if isinstance(B, MeasurementBlock) else np.atleast_2d(np.asarray(B, float))


def _as_sensing(A) -> SensingMatrix:
    return A if isinstance(A, SensingMatrix) else SensingMatrix(np.asarray(A, float))


def signal_basis(B, k: int | None = None, tol: float | None = None) -> OrthonormalBasis:
    """Orthonormal basis of ``R(B)``, truncated to ``k`` leading directions.

    The truncation is the signal-subspace estimate used when a noisy block has
    more numerically independent columns than the target sparsity.
    """
    basis = linalg.orthonormal_basis(_block_data(B), tol)
    if k is not None and basis.basis_dim > k:
        basis = OrthonormalBasis(basis.columns[:, :k])
    return basis


def _normalize(values: np.ndarray, A: SensingMatrix, idx: np.ndarray, normalize: bool):
    if not normalize:
        return values
    norms = A.column_sq_norms[idx]
    out = np.zeros_like(values)
    nz = norms > 0
    out[nz] = values[nz] / norms[nz]
    return out


def _finish(raw: np.ndarray) -> np.ndarray:
    if raw.size and raw.min() < -NEGATIVE_SLACK * 10:
        # far outside rounding; indicates a broken projector
        raise ArithmeticError(f"negative quadratic form {raw.min():.3e}")
    return np.maximum(raw, 0.0)


# ---------------------------------------------------------------- CS steps


def _somp_ranking(A: SensingMatrix, Bd: np.ndarray, k: int) -> tuple[list[int], bool]:
    selected: list[int] = []
    R = Bd
    degenerate = False
    for _ in range(k):
        corr = np.linalg.norm(A.data.T @ R, axis=1)
        corr[selected] = -np.inf
        j = int(np.argmax(corr))
        if corr[j] <= 0.0:
            degenerate = True
        selected.append(j)
        Q = linalg.orthonormal_basis(A.columns(selected))
        if Q.basis_dim < len(selected):
            raise DegenerateDictionaryError("degenerate dictionary")
        R = Bd - Q.columns @ (Q.columns.T @ Bd)
    return selected, degenerate


def somp(A, B, k: int) -> RecoveryResult:
    """Simultaneous orthogonal matching pursuit.

    Picks, ``k`` times, the column maximizing ``||a_j^T R||_2`` where ``R`` is
    ``B`` projected off the span of the columns picked so far.
    """
    A = _as_sensing(A)
    Bd = _block_data(B)
    if k < 0:
        raise ValueError("k must be non-negative")
    if k >= A.m:
        raise ValueError("S-OMP needs k < m")
    selected, degenerate = _somp_ranking(A, Bd, k)
    flags = ("zero_correlation",) if degenerate else ()
    return RecoveryResult("somp", k, linalg.numerical_rank(Bd) if Bd.any() else 0,
                          SupportSet(selected), degenerate_flags=flags)


def _threshold_ranking(A: SensingMatrix, Bd: np.ndarray) -> tuple[np.ndarray, bool]:
    scores = np.linalg.norm(A.data.T @ Bd, axis=1)
    order = np.lexsort((np.arange(A.n), -scores))
    return order, bool(np.all(scores == scores[0]))


def two_thresholding(A, B, k: int) -> RecoveryResult:
    """Keep the ``k`` columns with the largest ``||a_j^T B||_2``."""
    A = _as_sensing(A)
    Bd = _block_data(B)
    if not 0 <= k <= A.n:
        raise ValueError("require 0 <= k <= n")
    order, all_tie = _threshold_ranking(A, Bd)
    flags = ("all_tie",) if all_tie else ()
    return RecoveryResult("two_thresholding", k, linalg.numerical_rank(Bd) if Bd.any() else 0,
                          SupportSet(order[:k]), degenerate_flags=flags)


def _cs_ranking(A: SensingMatrix, Bd: np.ndarray, count: int, algo: CSAlgorithm):
    if count == 0:
        return [], False
    if algo is CSAlgorithm.SOMP:
        return _somp_ranking(A, Bd, count)
    order, all_tie = _threshold_ranking(A, Bd)
    return [int(i) for i in order[:count]], all_tie


# ---------------------------------------------------------------- subspace metrics


def music_metric(A, B, *, basis: OrthonormalBasis | None = None,
                 normalize: bool = True) -> MetricVector:
    """``||Q^T a_j||^2`` for every column, ``Q`` spanning the noise subspace."""
    A = _as_sensing(A)
    if basis is None:
        basis = signal_basis(B)
    raw = linalg.residual_sq_norms(basis, A.data)
    idx = np.arange(A.n)
    return MetricVector(idx, _normalize(_finish(raw), A, idx, normalize))


def music(A, B, k: int, zero_tol: float = DEFAULT_ZERO_TOL, *,
          normalize: bool = True) -> RecoveryResult:
    """Classical MUSIC: the ``k`` columns closest to the signal subspace.

    Exact in the noiseless regime ``rank(B) = k < m``.  If ``B`` has more
    than ``k`` independent columns only its leading ``k`` directions are used.
    """
    A = _as_sensing(A)
    if k >= A.m:
        raise ValueError(f"MUSIC needs k < m (k={k}, m={A.m})")
    basis = signal_basis(B, k)
    r = basis.basis_dim
    if r < k:
        warnings.warn(f"rank(B)={r} < k={k}: the MUSIC criterion cannot hold", stacklevel=2)
    metric = music_metric(A, B, basis=basis, normalize=normalize)
    flags = ()
    if r == 0:
        flags = ("zero_measurement",)
    support = metric.smallest(k)
    return RecoveryResult("music", k, r, support, {"music": metric}, flags)


def _gmusic_raw(A: SensingMatrix, basis: OrthonormalBasis, partial: np.ndarray,
                allow_rank_deficient: bool) -> tuple[np.ndarray, np.ndarray, tuple]:
    """Projector-difference form ``a^T [P_Q - P_{R(P_Q A_partial)}] a`` (unclipped)."""
    noise = linalg.complement_basis(basis)
    Qn = noise.columns
    W = Qn @ (Qn.T @ A.columns(partial)) if partial.size else np.zeros((A.m, 0))
    G = linalg.orthonormal_basis(W) if partial.size else OrthonormalBasis.empty(A.m)
    flags: tuple[str, ...] = ()
    if G.basis_dim < partial.size:
        if not allow_rank_deficient:
            raise DegenerateSupportError("partial support degenerate")
        flags = ("partial_rank_deficient",)
    mask = np.ones(A.n, dtype=bool)
    mask[partial] = False
    idx = np.flatnonzero(mask)
    Aj = A.data[:, idx]
    raw = (np.einsum("ij,ij->j", Qn.T @ Aj, Qn.T @ Aj)
           - np.einsum("ij,ij->j", G.columns.T @ Aj, G.columns.T @ Aj))
    return idx, raw, flags


def gmusic_metric(A, B, partial, *, normalize: bool = True,
                  allow_rank_deficient: bool = False,
                  basis: OrthonormalBasis | None = None) -> MetricVector:
    """Generalized MUSIC metric ``eta(j)`` for every ``j`` outside ``partial``.

    ``eta(j) = a_j^T [P_{R(Q)} - P_{R(P_{R(Q)} A_partial)}] a_j`` with ``Q`` a
    basis of the noise subspace of ``B``.  Given ``k - r`` correct indices in
    ``partial`` (noiseless), ``eta`` vanishes exactly on the rest of the support.
    """
    A = _as_sensing(A)
    partial = np.asarray(sorted(set(int(i) for i in partial)), dtype=int)
    if basis is None:
        basis = signal_basis(B)
    idx, raw, flags = _gmusic_raw(A, basis, partial, allow_rank_deficient)
    return MetricVector(idx, _normalize(_finish(raw), A, idx, normalize), flags)


def gmusic_metric_complement(A, B, partial, *, normalize: bool = True,
                             basis: OrthonormalBasis | None = None) -> MetricVector:
    """``a_j^T P^perp_{R([B A_partial])} a_j``; algebraically equal to :func:`gmusic_metric`."""
    A = _as_sensing(A)
    partial = np.asarray(sorted(set(int(i) for i in partial)), dtype=int)
    if basis is None:
        basis = signal_basis(B)
    span = linalg.orthonormal_basis(np.hstack([basis.columns, A.columns(partial)]))
    mask = np.ones(A.n, dtype=bool)
    mask[partial] = False
    idx = np.flatnonzero(mask)
    raw = linalg.residual_sq_norms(span, A.data[:, idx])
    return MetricVector(idx, _normalize(_finish(raw), A, idx, normalize))


def support_selection_metric(A, B, I_k, *, normalize: bool = True,
                             basis: OrthonormalBasis | None = None) -> MetricVector:
    """Support-selection metric ``zeta(j) = a_j^T P^perp_{R([B A_{I_k - j}])} a_j``.

    Defined for ``j`` in ``I_k``.  When ``[B A_{I_k - j}]`` is numerically rank
    deficient the projector is taken onto its numerical column space and the
    ``rank_reduced`` flag is set.
    """
    A = _as_sensing(A)
    I_k = np.asarray(sorted(set(int(i) for i in I_k)), dtype=int)
    if basis is None:
        basis = signal_basis(B)
    r = basis.basis_dim
    if I_k.size - 1 + r > A.m:
        raise ValueError(
            f"[B A_(I_k - j)] has {I_k.size - 1 + r} columns, more than m={A.m}"
        )
    raw = np.empty(I_k.size)
    reduced = False
    for pos, j in enumerate(I_k):
        others = np.delete(I_k, pos)
        M = np.hstack([basis.columns, A.columns(others)])
        span = linalg.orthonormal_basis(M)
        if span.basis_dim < M.shape[1]:
            reduced = True
        raw[pos] = linalg.residual_sq_norms(span, A.data[:, j])[0]
    flags = ("rank_reduced",) if reduced else ()
    return MetricVector(I_k, _normalize(_finish(raw), A, I_k, normalize), flags)


# ---------------------------------------------------------------- CS-MUSIC


def _prepare(A, B, cfg: RecoveryConfig):
    A = _as_sensing(A)
    Bd = _block_data(B)
    basis = signal_basis(Bd, cfg.k)
    r = basis.basis_dim
    if cfg.k >= A.m:
        raise ValueError(f"require k < m (k={cfg.k}, m={A.m})")
    return A, Bd, basis, r


def csmusic(A, B, cfg: RecoveryConfig) -> RecoveryResult:
    """Compressive MUSIC: ``k - r`` indices from the CS step, ``r`` by generalized MUSIC."""
    A, Bd, basis, r = _prepare(A, B, cfg)
    partial, degenerate = _cs_ranking(A, Bd, cfg.k - r, cfg.cs_algo)
    eta = gmusic_metric(A, Bd, partial, normalize=cfg.normalize, basis=basis)
    support = SupportSet(partial) | eta.smallest(r)
    flags = ("cs_step_degenerate",) if degenerate else ()
    if r == 0:
        flags += ("zero_measurement",)
    return RecoveryResult("csmusic", cfg.k, r, support, {"eta": eta}, flags)


def csmusic_optimized(A, B, cfg: RecoveryConfig) -> RecoveryResult:
    """Compressive MUSIC with optimized partial support selection.

    1. the CS step proposes ``k`` candidates ``I_k``;
    2. the ``k - r`` candidates with the smallest ``zeta`` are kept;
    3. the ``r`` indices with the smallest ``eta`` over the rest are added.

    Exact (noiseless) whenever at least ``k - r + 1`` candidates are correct.
    """
    A, Bd, basis, r = _prepare(A, B, cfg)
    if cfg.k + r > A.m:
        raise ValueError(f"optimized selection needs k + r <= m (k={cfg.k}, r={r}, m={A.m})")
    candidates, degenerate = _cs_ranking(A, Bd, cfg.k, cfg.cs_algo)
    zeta = support_selection_metric(A, Bd, candidates, normalize=cfg.normalize, basis=basis)
    kept = zeta.smallest(cfg.k - r)
    eta = gmusic_metric(A, Bd, kept, normalize=cfg.normalize, basis=basis,
                        allow_rank_deficient=True)
    support = kept | eta.smallest(r)
    flags = tuple(f for f in zeta.flags + eta.flags)
    if degenerate:
        flags += ("cs_step_degenerate",)
    if r == 0:
        flags += ("zero_measurement",)
    return RecoveryResult("csmusic_optimized", cfg.k, r, support,
                          {"zeta": zeta, "eta": eta}, flags)


# ---------------------------------------------------------------- spark oracle


SPARK_BUDGET = 2_000_000


def spark_bruteforce(A, max_cols: int | None = None) -> int | None:
    """Smallest number of linearly dependent columns, by exhaustive search.

    Searches subsets of size ``<= max_cols`` (default ``min(n, m + 1)``) and
    returns ``None`` when none is dependent.  Only meant for tiny matrices.
    """
    A = _as_sensing(A)
    m, n = A.data.shape
    if max_cols is None:
        max_cols = min(n, m + 1)
    max_cols = min(max_cols, n)
    if n > 20 and max_cols > 6:
        raise ValueError("combinatorial guard: need n <= 20 or max_cols <= 6")
    budget = sum(math.comb(n, s) for s in range(1, max_cols + 1))
    if budget > SPARK_BUDGET:
        raise ValueError(f"combinatorial budget exceeded: {budget} subsets required")
    data = A.data
    for size in range(1, max_cols + 1):
        if size > m:
            return size
        for cols in itertools.combinations(range(n), size):
            if linalg.numerical_rank(data[:, cols]) < size:
                return size
    return None
