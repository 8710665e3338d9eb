"""End-to-end acceptance checks.

Each test records a PASS/FAIL line through the ``report`` fixture; the lines
are printed in the terminal summary.
"""

import math
import os
import time
import warnings

import numpy as np
import pytest

from mmvtrack.bench import GridSpec, SweepSpec, run_grid_tracking, run_sweep
from mmvtrack.linalg import orthonormal_basis, projector_distance, spectral_norm
from mmvtrack.model import (
    FixedSwap,
    Frame,
    MeasurementBlock,
    MeasurementKind,
    SceneParams,
    SceneTimeline,
    SupportSet,
    generate_scene,
    generate_sensing,
    projection_perturbation_bound,
    snr_min_check,
    stream,
)
from mmvtrack.recovery import (
    gmusic_metric,
    gmusic_metric_complement,
    music,
    spark_bruteforce,
)
from mmvtrack.tracking import TrackerConfig, TrackerMode, default_thresholds, track_scene

WORKERS = os.cpu_count() or 1
M, N, R = 40, 100, 9


def _schedule(rng, k0, u, t_max, k_lo=9, k_hi=15):
    # each step: u enter, so the new sparsity must lie in [max(k_lo, u), k_old + u]
    ks = [k0]
    for _ in range(t_max):
        lo = max(k_lo, u)
        hi = min(k_hi, ks[-1] + u)
        ks.append(int(rng.integers(lo, hi + 1)))
    return tuple(ks)


def test_c1_noiseless_tracking(report):
    start = time.perf_counter()
    cfg = TrackerConfig(mode=TrackerMode.NOISELESS, k_max=15, r=R, zero_tol=1e-8)
    exact_scenes = 0
    for s in range(200):
        rng = np.random.default_rng([1, s])
        u = int(rng.integers(0, R))
        k0 = int(rng.integers(max(9, u), 16))
        ks = _schedule(rng, k0, u, 5)
        tl = generate_scene(SceneParams(M, N, R, k0, 5, FixedSwap(u), math.inf, 1000 + s,
                                        k_schedule=ks))
        states = track_scene(tl.sensing, tl, tl.frames[0].signal.support, cfg)
        exact_scenes += all(st.exact_match for st in states)
    elapsed = time.perf_counter() - start
    ok = exact_scenes == 200
    report(1, ok, f"{exact_scenes}/200 scenes exact at every frame ({elapsed:.1f} s)")
    assert ok


def test_c2_self_correction(report):
    start = time.perf_counter()
    cfg = TrackerConfig(mode=TrackerMode.NOISELESS, k_max=15, r=R)
    exact_scenes = 0
    for s in range(100):
        rng = np.random.default_rng([2, s])
        k = int(rng.integers(9, 16))
        u = int(rng.integers(0, R))
        tl = generate_scene(SceneParams(M, N, R, k, 5, FixedSwap(u), math.inf, 2000 + s))
        s0, s1 = tl.supports()[:2]
        leaving = sorted(set(s0) - set(s1))
        staying = sorted(set(s0) & set(s1))
        outside = np.setdiff1d(np.arange(N), np.union1d(s0, s1))
        n_wrong = R - 1
        injected = rng.choice(outside, n_wrong - len(leaving), replace=False)
        keep = list(rng.choice(staying, k - n_wrong, replace=False))
        I0 = SupportSet(keep + leaving + [int(j) for j in injected])
        assert len(I0) == k and len(set(I0) - set(s1)) == n_wrong
        states = track_scene(tl.sensing, tl, I0, cfg)
        exact_scenes += all(st.exact_match for st in states[1:])
    elapsed = time.perf_counter() - start
    ok = exact_scenes == 100
    report(2, ok, f"{exact_scenes}/100 corrupted starts corrected from t=1 ({elapsed:.1f} s)")
    assert ok


def test_c3_music_full_rank(report):
    start = time.perf_counter()
    failures = []
    for k in range(5, 21):
        for trial in range(100):
            rng = np.random.default_rng([3, k, trial])
            A = generate_sensing(M, N, 3_000_000 + 1000 * k + trial)
            supp = np.sort(rng.choice(N, k, replace=False))
            X = np.zeros((N, k))
            X[supp] = rng.standard_normal((k, k))
            if music(A, A.data @ X, k).support != tuple(supp):
                failures.append((k, trial))
    elapsed = time.perf_counter() - start
    ok = not failures
    report(3, ok, f"{1600 - len(failures)}/1600 exact for r=k=5..20 ({elapsed:.1f} s)")
    assert ok


def test_c4_sweep_trends(report):
    spec = SweepSpec(m=M, n=N, r=R, k_values=(10, 15, 20, 25, 30), change_counts=(4, 6, 7, 8),
                     t_max=5, snr_db=40.0, trials=500, seed=20240601)
    res = run_sweep(spec, workers=WORKERS)
    ts = range(1, spec.t_max + 1)

    a = res.rates("tracking", 10, 4)
    ok_a = bool(np.all(a >= 0.9))
    report(4, ok_a, f"(a) u=4,k=10 min rate {a.min():.3f}")

    worst = 0.0
    for k in spec.k_values:
        for t in ts:
            rates = [res.success_rate("tracking", k, u, t) for u in spec.change_counts]
            worst = max(worst, max(b - a_ for a_, b in zip(rates, rates[1:])))
    ok_b = worst <= 0.03
    report(4, ok_b, f"(b) largest rise with u {worst:+.3f}")

    drops = [res.success_rate("tracking", k, 4, 1) - res.success_rate("tracking", k, 4, 5)
             for k in spec.k_values if k <= 15]
    ok_c = max(drops) <= 0.05
    report(4, ok_c, f"(c) largest t=1->5 drop {max(drops):+.3f} ({res.wall_time:.0f} s)")
    assert ok_a and ok_b and ok_c


def test_c5_grid_tracking(report):
    spec = GridSpec(m=50, grid_w=30, grid_h=30, k=24, r=9, r_init=50, snr_db=40.0,
                    t_max=45, scenes=20, seed=20240602)
    res = run_grid_tracking(spec, workers=WORKERS)
    tr, mu = res.mean_exact("tracking"), res.mean_exact("music")
    ok = tr >= 0.9 and tr > mu
    report(5, ok, f"tracker {tr:.3f} vs MUSIC {mu:.3f} over 20 scenes ({res.wall_time:.1f} s)")
    assert ok


def _perturbation_instances(count=1000, m=20, r=3, n=40):
    rng = np.random.default_rng(6)
    for _ in range(count):
        A = rng.standard_normal((m, n)) / math.sqrt(m)
        k = int(rng.integers(r, 9))
        supp = rng.choice(n, k, replace=False)
        X = np.zeros((n, r))
        X[supp] = rng.standard_normal((k, r))
        B = A @ X
        s = np.linalg.svd(B, compute_uv=False)
        Nz = rng.standard_normal((m, r))
        Nz *= rng.uniform(0.0, 0.5) * s[-1] / spectral_norm(Nz)
        # a column subset S with [B A_S] of full column rank
        while True:
            S = rng.choice(n, int(rng.integers(1, m - r - 1)), replace=False)
            BS = np.hstack([B, A[:, S]])
            if orthonormal_basis(BS).basis_dim == BS.shape[1]:
                break
        yield B, Nz, A[:, S]


def test_c6_perturbation_bound(report):
    start = time.perf_counter()
    violations = 0
    for B, Nz, _ in _perturbation_instances():
        d = projector_distance(orthonormal_basis(B + Nz), orthonormal_basis(B))
        violations += d > projection_perturbation_bound(B, Nz) + 1e-9
    elapsed = time.perf_counter() - start
    ok = violations == 0
    report(6, ok, f"projection perturbation bound: {violations}/1000 violations ({elapsed:.1f} s)")
    assert ok


@pytest.mark.xfail(strict=True, reason="the contraction fails on generic instances; "
                                       "see test_contraction_counterexample")
def test_c6_contraction(report):
    violations = 0
    worst = 0.0
    for B, Nz, AS in _perturbation_instances():
        Y = B + Nz
        rhs = projector_distance(orthonormal_basis(Y), orthonormal_basis(B))
        lhs = projector_distance(orthonormal_basis(np.hstack([B, AS])),
                                 orthonormal_basis(np.hstack([Y, AS])))
        violations += lhs > rhs + 1e-9
        worst = max(worst, lhs / rhs)
    ok = violations == 0
    report(6, ok, f"augmented-projector contraction: {violations}/1000 violations, "
                  f"worst ratio {worst:.2f}")
    assert ok


def test_contraction_counterexample():
    # R(B), R(Y) close, both nearly inside span(e3); off e3 they are orthogonal
    eps = 1e-3
    B = np.array([[eps], [0.0], [1.0]])
    Y = np.array([[0.0], [eps], [1.0]])
    AS = np.array([[0.0], [0.0], [1.0]])
    rhs = projector_distance(orthonormal_basis(Y), orthonormal_basis(B))
    lhs = projector_distance(orthonormal_basis(np.hstack([B, AS])),
                             orthonormal_basis(np.hstack([Y, AS])))
    assert rhs < 2 * eps
    assert lhs == pytest.approx(1.0)


def test_c7_oracles(report):
    sparks = [spark_bruteforce(np.random.default_rng([7, s]).standard_normal((6, 10)))
              for s in range(50)]
    ok_spark = all(v == 7 for v in sparks)
    report(7, ok_spark, f"spark 7 in {sum(v == 7 for v in sparks)}/50 matrices")

    worst = 0.0
    for i in range(500):
        rng = np.random.default_rng([70, i])
        m, n = int(rng.integers(8, 30)), 60
        r = int(rng.integers(1, 5))
        A = rng.standard_normal((m, n)) / math.sqrt(m)
        Y = rng.standard_normal((m, r))
        size = int(rng.integers(0, m - r))
        partial = rng.choice(n, size, replace=False)
        a = gmusic_metric(A, Y, partial).values
        b = gmusic_metric_complement(A, Y, partial).values
        worst = max(worst, float(np.max(np.abs(a - b))))
    ok_forms = worst <= 1e-9
    report(7, ok_forms, f"two metric forms max gap {worst:.1e} over 500 instances")
    assert ok_spark and ok_forms


def _eq14_timeline(seed, k, u, k_max, factor=2.0, t_max=5):
    """Scene whose per-frame noise is scaled to satisfy the minimum-SNR condition."""
    clean = generate_scene(SceneParams(M, N, R, k, t_max, FixedSwap(u), math.inf, seed))
    gamma, alpha = k_max / M, R / k_max
    frames = []
    for t, f in enumerate(clean.frames):
        B = f.measurement.data
        s = np.linalg.svd(B, compute_uv=False)
        _, bound, _ = snr_min_check(B, np.zeros_like(B), gamma, alpha)
        Nz = stream(seed, 99, t).standard_normal(B.shape)
        Nz *= s[-1] / (factor * bound * spectral_norm(Nz))
        assert snr_min_check(B, Nz, gamma, alpha)[2]
        frames.append(Frame(f.signal, MeasurementBlock(B + Nz, MeasurementKind.NOISY)))
    return SceneTimeline(clean.sensing, tuple(frames), clean.params)


def test_c8_thresholds_and_adaptive(report):
    ok_thr = default_thresholds(40, 15, 9) == (0.2, 0.3125)
    report(8, ok_thr, f"thresholds {default_thresholds(40, 15, 9)}")

    k_max = 12
    cfg = TrackerConfig(mode=TrackerMode.NOISY_ADAPTIVE, k_max=k_max, r=R)
    hits = total = 0
    start = time.perf_counter()
    for trial in range(200):
        rng = np.random.default_rng([8, trial])
        k = int(rng.integers(R, k_max + 1))
        u = int(rng.integers(1, 5))
        tl = _eq14_timeline(8000 + trial, k, u, k_max)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            states = track_scene(tl.sensing, tl, tl.frames[0].signal.support, cfg)
        hits += sum(bool(s.exact_match) for s in states[1:])
        total += len(states) - 1
    rate = hits / total
    ok_rate = rate >= 0.95
    report(8, ok_rate, f"adaptive per-frame exact {rate:.3f} over {total} frames "
                       f"({time.perf_counter() - start:.1f} s)")
    assert ok_thr and ok_rate
