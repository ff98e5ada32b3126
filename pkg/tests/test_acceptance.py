"""Acceptance criteria, one test each; every test prints a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v`` or ``python3 tests/test_acceptance.py``.
"""

import json
import math
import sys
import time

import numpy as np
import pytest
from scipy import stats

from hidim import bench
from hidim.cli import main as cli_main
from hidim.design import LearningSample, lhs_sample, unit_inputs
from hidim.gpcore import build_model, fit_gp, gp_predict, loo_predictions
from hidim.jointgp import dispersion_predict, fit_joint, q2, sequential_build
from hidim.screening import (
    dgsm_screen,
    gaussian_gram,
    hsic_gamma_test,
    hsic_permutation_test,
    hsic_v_statistic,
    screen_inputs,
)


@pytest.fixture
def verdict(capsys):
    """Print one PASS/FAIL line for a criterion, then assert it."""

    def report(number, title, ok, detail, elapsed, limit):
        ok = bool(ok) and elapsed < limit
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {title}: {detail} ({elapsed:.1f} s, limit {limit:g} s)"
        with capsys.disabled():
            print("\n" + line)
        assert ok, line

    return report


def brute_force_hsic(K, L):
    n = K.shape[0]
    total = 0.0
    for i in range(n):
        for j in range(n):
            row_i = sum(L[i, q] for q in range(n))
            total += K[i, j] * L[i, j] - 2.0 * K[i, j] * row_i / n
    sum_k = sum(K[i, j] for i in range(n) for j in range(n))
    sum_l = sum(L[i, j] for i in range(n) for j in range(n))
    return total / n**2 + sum_k * sum_l / n**4


def test_criterion_01_hsic_oracle(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(50):
        x = rng.normal(size=10)
        y = np.tanh(x) + rng.normal(size=10)
        K, L = gaussian_gram(x), gaussian_gram(y)
        worst = max(worst, abs(hsic_v_statistic(K, L) - brute_force_hsic(K, L)))
    elapsed = time.perf_counter() - start
    verdict(1, "HSIC oracle equivalence", worst <= 1e-12, f"max abs error {worst:.2e}", elapsed, 1)


def test_criterion_02_permutation_calibration(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(7)
    pvals = np.array([
        hsic_permutation_test(rng.random(100), rng.random(100), n_permutations=199, seed=trial)
        for trial in range(500)
    ])
    rate = float(np.mean(pvals < 0.1))
    ks = stats.kstest(pvals, "uniform").statistic
    elapsed = time.perf_counter() - start
    verdict(2, "permutation-test calibration", 0.07 <= rate <= 0.13 and ks < 0.1,
            f"type-I rate {rate:.3f}, KS distance {ks:.3f}", elapsed, 120)


def test_criterion_03_gamma_permutation_agreement(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(11)
    gaps = []
    for case in range(50):
        x = rng.random(200)
        y = rng.normal(size=200) if case % 2 else rng.exponential(size=200)
        gaps.append(abs(hsic_gamma_test(x, y) - hsic_permutation_test(x, y, 999, seed=case)))
    elapsed = time.perf_counter() - start
    worst = max(gaps)
    verdict(3, "Gamma/permutation agreement", worst <= 0.1,
            f"max |p_gamma - p_perm| {worst:.3f}, median {np.median(gaps):.3f}", elapsed, 120)


def test_criterion_04_screening_recovery(verdict):
    start = time.perf_counter()
    a = bench.G27_COEFFICIENTS
    dominant = set(range(4))
    inert = np.flatnonzero(a == 99.0)
    always, inert_hits = True, 0
    for seed in range(20):
        X = lhs_sample(27, 270, seed=seed).points
        report = screen_inputs(LearningSample(X, bench.g_function(X, a), unit_inputs(27)), alpha=0.1)
        always &= dominant <= set(report.selected) and set(report.ordering[:4]) == dominant
        inert_hits += int(np.isin(report.selected, inert).sum())
    rate = inert_hits / (20 * inert.size)
    elapsed = time.perf_counter() - start
    verdict(4, "g27 screening recovery", always and rate <= 0.15,
            f"dominant inputs lead in all seeds: {always}, inert selection rate {rate:.3f}", elapsed, 300)


def test_criterion_05_gp_interpolation(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(5)
    worst = 0.0
    for problem in range(10):
        d = 1 + problem % 3
        n = 8 + 6 * d
        X = rng.random((n, d))
        w = rng.normal(size=d)
        y = np.sin(3 * X @ w) + 0.5 * np.cos(2 * X[:, 0])
        model = fit_gp(X, y, nugget=0.0, n_starts=2, random_state=problem)
        err = np.max(np.abs(gp_predict(model, X)[0] - y)) / np.ptp(y)
        worst = max(worst, err)
    elapsed = time.perf_counter() - start
    verdict(5, "zero-nugget GP interpolation", worst <= 1e-8, f"max relative error {worst:.2e}", elapsed, 30)


def test_criterion_06_loo_closed_form(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(6)
    X = rng.random((20, 2))
    y = np.sin(4 * X[:, 0]) + X[:, 1] ** 2 + 0.05 * rng.normal(size=20)
    model = fit_gp(X, y, n_starts=2)
    means, _ = loo_predictions(model)
    refit = np.empty(20)
    for i in range(20):
        keep = np.arange(20) != i
        sub = build_model(X[keep], y[keep], model.kernel)
        refit[i] = gp_predict(sub, X[[i]])[0][0]
    worst = float(np.max(np.abs(means - refit)))
    elapsed = time.perf_counter() - start
    verdict(6, "closed-form LOO equivalence", worst <= 1e-6, f"max abs difference {worst:.2e}", elapsed, 10)


def test_criterion_07_dispersion_recovery(verdict):
    start = time.perf_counter()
    rhos = []
    for seed in range(5):
        X = lhs_sample(6, 300, seed=seed).points
        model = fit_joint(LearningSample(X, bench.hetero_testcase(X), unit_inputs(6)), [0, 1])
        Q = lhs_sample(6, 500, seed=100 + seed).points
        truth = bench.hetero_conditional_variance(Q[:, 0])
        rhos.append(stats.spearmanr(dispersion_predict(model, Q), truth).statistic)
    hits = sum(r >= 0.5 for r in rhos)
    elapsed = time.perf_counter() - start
    verdict(7, "dispersion recovery", hits >= 4,
            f"Spearman {', '.join(f'{r:.3f}' for r in rhos)}; {hits}/5 seeds >= 0.5", elapsed, 300)


@pytest.mark.slow
def test_criterion_08_sequential_build_benefit(verdict):
    start = time.perf_counter()
    a = bench.G27_COEFFICIENTS
    budget = 500  # likelihood evaluations per optimizer start, identical for both metamodels
    joint, simple = [], []
    for seed in range(5):
        X = lhs_sample(27, 200, seed=seed).points
        Xt = lhs_sample(27, 300, seed=1000 + seed).points
        sample = LearningSample(X, bench.g_function(X, a), unit_inputs(27))
        test = LearningSample(Xt, bench.g_function(Xt, a), unit_inputs(27))
        report = screen_inputs(sample, alpha=0.1)
        traj = sequential_build(sample, report.ordering, test, max_evals=budget)
        joint.append(traj.iterations[traj.selected_iteration].q2_test)
        gp = fit_gp(X, sample.outputs, input_bounds=(np.zeros(27), np.ones(27)), max_evals=budget)
        simple.append(q2(test.outputs, gp_predict(gp, Xt)[0]))
    gain = float(np.median(np.subtract(joint, simple)))
    level = float(np.median(joint))
    elapsed = time.perf_counter() - start
    detail = (f"joint Q2 {', '.join(f'{v:.3f}' for v in joint)}; simple Q2 {', '.join(f'{v:.3f}' for v in simple)}; "
              f"median gain {gain:.3f}, median joint Q2 {level:.3f}")
    verdict(8, "sequential-build benefit", gain >= 0.02 and level >= 0.7, detail, elapsed, 1200)


def test_criterion_09_dgsm_bound(verdict):
    start = time.perf_counter()
    X = lhs_sample(2, 100, seed=0).points
    _, total, var = bench.linear_sobol()
    results = dgsm_screen(bench.linear_gradient(X), unit_inputs(2), var)
    ratios = np.array([r.total_sobol_bound / t for r, t in zip(results, total)])
    dominated = all(r.total_sobol_bound >= t for r, t in zip(results, total))
    elapsed = time.perf_counter() - start
    ok = dominated and np.all(np.abs(ratios - 12 / math.pi**2) <= 1e-6)
    verdict(9, "DGSM bound dominance", ok, f"bound/total ratios {ratios.round(8).tolist()}", elapsed, 1)


def _pipeline(root):
    common = ["--seed", "3"]
    assert cli_main(["design", "--d", "15", "--n", "90", "--out", str(root / "design")] + common) == 0
    assert cli_main(["bench", "g15", "--design", str(root / "design" / "design.csv"),
                     "--out", str(root / "bench")] + common) == 0
    sample = str(root / "bench" / "sample.csv")
    assert cli_main(["screen", sample, "--out", str(root / "screen")] + common) == 0
    assert cli_main(["fit", sample, "--screening", str(root / "screen" / "screening.csv"),
                     "--validation", "loo", "--starts", "2", "--max-evals", "300",
                     "--out", str(root / "fit")] + common) == 0
    with open(root / "fit" / "manifest_fit.json") as fh:
        selected = json.load(fh)["selected_iteration"]
    files = {name: (root / sub / name).read_bytes()
             for sub, name in [("design", "design.csv"), ("design", "design_unit.csv"),
                               ("screen", "screening.csv")]}
    return files, selected


def test_criterion_10_determinism(verdict, tmp_path, capsys):
    start = time.perf_counter()
    first, sel_a = _pipeline(tmp_path / "a")
    second, sel_b = _pipeline(tmp_path / "b")
    capsys.readouterr()
    identical = first == second
    elapsed = time.perf_counter() - start
    verdict(10, "pipeline determinism", identical and sel_a == sel_b,
            f"CSV bytes identical: {identical}, selected iteration {sel_a} vs {sel_b}", elapsed, 300)


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
