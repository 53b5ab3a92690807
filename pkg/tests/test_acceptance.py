"""Acceptance criteria, each reported as one PASS/FAIL line.

Criteria 1-4 are replication studies and take a while on one core
(criterion 3 dominates at roughly an hour).  ``PLSIM_QUICK=1`` skips
criteria 3 and 4; ``PLSIM_WORKERS`` sets the process count for the
replication runs (default: all cores).
"""

import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from plsim.gee import GeeConfig, _smooth, gee_score, solve_gee, working_covariance
from plsim.simulation import StudyConfig, example1, example3, generate_dataset, run_replications

WORKERS = int(os.environ.get("PLSIM_WORKERS", os.cpu_count() or 1))
QUICK = bool(os.environ.get("PLSIM_QUICK"))
HERE = Path(__file__).parent


@pytest.fixture
def report(capsys):
    def emit(number, passed, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if passed else 'FAIL'} criterion {number}: {detail}")
        assert passed, detail

    return emit


@pytest.fixture(scope="module")
def example1_study():
    start = time.perf_counter()
    reports = run_replications(example1(60), ("independence", "gee", "qif"), 100, StudyConfig(), parallelism=WORKERS)
    return reports, time.perf_counter() - start


def test_criterion_1_gee_vs_independence_mse(example1_study, report):
    reports, elapsed = example1_study
    gee, ind = reports["gee"].mse_beta, reports["independence"].mse_beta
    ok = 0.0008 <= gee <= 0.0032 and 0.0017 <= ind <= 0.0068 and gee < ind
    report(1, ok, f"MSE_beta GEE={gee:.5f} in [0.0008, 0.0032], independence={ind:.5f} in [0.0017, 0.0068], "
           f"GEE < independence; L=100, {elapsed:.0f}s for three methods")


def test_criterion_2_qif_theta_mse(example1_study, report):
    reports, _ = example1_study
    qif, ind = reports["qif"].mse_theta, reports["independence"].mse_theta
    ok = 0.055 <= qif <= 0.22 and qif <= ind
    report(2, ok, f"MSE_theta QIF={qif:.4f} in [0.055, 0.22] and <= independence={ind:.4f}; L=100")


@pytest.mark.skipif(QUICK, reason="PLSIM_QUICK set")
def test_criterion_3_selection(report):
    start = time.perf_counter()
    r = run_replications(example3(100), ("penalized_gee",), 50, StudyConfig(), parallelism=WORKERS)["penalized_gee"]
    elapsed = time.perf_counter() - start
    ok = r.tp_beta >= 2.8 and r.tn_beta >= 16.5 and r.tp_theta >= 1.9 and r.tn_theta >= 27.3 and r.r2_beta >= 0.97
    report(3, ok, f"penalized GEE TP_beta={r.tp_beta:.2f}>=2.8 TN_beta={r.tn_beta:.2f}>=16.5 TP_theta={r.tp_theta:.2f}>=1.9 "
           f"TN_theta={r.tn_theta:.2f}>=27.3 R2_beta={r.r2_beta:.4f}>=0.97; L={r.replications}, "
           f"failures={r.failures}, nonconverged={r.nonconverged}, {elapsed:.0f}s")


@pytest.mark.skipif(QUICK, reason="PLSIM_QUICK set")
def test_criterion_4_oracle(report):
    r = run_replications(example3(50), ("oracle_gee",), 50, StudyConfig(), parallelism=WORKERS)["oracle_gee"]
    report(4, r.r2_beta >= 0.995, f"oracle GEE R2_beta={r.r2_beta:.5f} >= 0.995; n=50, L={r.replications}, failures={r.failures}")


PROPERTY_TESTS = [
    "test_kernel.py::test_weight_identities",
    "test_kernel.py::test_affine_link_reproduced",
    "test_core.py::test_jacobian_matches_central_differences",
    "test_selection.py::test_scad_derivative_continuous_and_supported",
    "test_correlation.py::test_inverse_correlation_in_basis_span",
    "test_qif.py::test_single_basis_solver_agrees_with_independence_gee",
    "test_selection.py::test_zero_penalty_gee_matches_unpenalized",
    "test_selection.py::test_zero_penalty_qif_matches_unpenalized",
    "test_simulation.py::test_parallel_matches_serial_bitwise",
]


def test_criterion_5_property_suite(report):
    start = time.perf_counter()
    proc = subprocess.run(
        [sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", *PROPERTY_TESTS],
        cwd=HERE, capture_output=True, text=True,
    )
    elapsed = time.perf_counter() - start
    tail = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr.strip()[-200:]
    report(5, proc.returncode == 0 and elapsed < 120, f"{len(PROPERTY_TESTS)} property groups: {tail}; {elapsed:.1f}s < 120s")


def test_criterion_6_convergence_certificate(report):
    design = example1(60)
    converged = 0
    worst = 0.0
    for rep in range(50):
        data = generate_dataset(design, rep)
        cfg = GeeConfig(tol=1e-6, max_iterations=100)
        fit = solve_gee(data, cfg)
        if not (fit.converged and fit.iterations <= 100):
            continue
        converged += 1
        smooth = _smooth(data, fit.beta, fit.theta.theta, fit.bandwidth)
        score = gee_score(data, smooth, working_covariance(data, smooth, cfg))
        worst = max(worst, float(np.linalg.norm(score)) / data.n)
    ok = converged >= 48 and worst <= 1e-5
    report(6, ok, f"{converged}/50 converged (need >= 48); max re-evaluated ||score||/n = {worst:.2e} <= 1e-5")
