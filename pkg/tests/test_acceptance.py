"""End-to-end acceptance suite: one test per criterion, each printing a pass/fail line."""

import time
from pathlib import Path

import numpy as np
import pytest

from conftest import random_contraction_matrix, random_vector
from opdefect.cli import main
from opdefect.compress import RidgeProblem, ridge_stability_check, run_greedy, stopping_rule
from opdefect.dropout import DropoutConfig, IidCoordinate, coercivity_constant, geometric_rate_check
from opdefect.gkpca import (Dictionary, convergence_and_noise_report, deflation_run, residual_delta)
from opdefect.hilbert import rank_one_projection
from opdefect.interpolate import (InterpolationProblem, NoiseModel, kaczmarz_run, noise_floor_curve,
                                  noisy_kaczmarz_run, residual_series_bound_check)
from opdefect.rkhs import Kernel, RkhsFunction, feature_coordinates, gram
from opdefect.telescope import (Schedule, defect_of, effectiveness_diagnostic, relaxed_step,
                                run_product, telescoping_residual)
from opdefect.treesplit import (FeatureMap, PrefixSet, TruncatedKernel, random_contraction,
                                random_isometric, scaled_rotations, tree_energies, truncated_gram,
                                words_at_depth)

ROOT = Path(__file__).resolve().parents[1]
KERNELS = [Kernel("gaussian", gamma=0.5), Kernel("linear"), Kernel("polynomial", degree=3, c=1.0)]


@pytest.fixture
def verdict(request, capsys):
    """Print one line for the criterion, then fail the test if it did not hold."""
    t0 = time.perf_counter()

    def report(label, ok, detail="", budget=None):
        took = time.perf_counter() - t0
        ok = bool(ok) and (budget is None or took < budget)
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] {label}: {detail} ({took:.1f}s)")
        assert ok, f"{label}: {detail}"

    return report


def random_truth(rng, kernel, n=5, p=2):
    return RkhsFunction(rng.standard_normal((n, p)), rng.standard_normal(n), kernel)


def test_01_defect_identity(verdict):
    rng = np.random.default_rng(101)
    worst = 0.0
    for i in range(1000):
        n, cplx = int(rng.integers(2, 33)), bool(i % 2)
        A = random_contraction_matrix(rng, n, cplx, shrink=1.0 + rng.random())
        x = random_vector(rng, n, cplx)
        D = defect_of(A).defect
        gap = np.vdot(x, x).real - np.vdot(A @ x, A @ x).real - np.vdot(D @ x, D @ x).real
        worst = max(worst, abs(gap) / np.vdot(x, x).real)
    verdict("1 defect identity", worst <= 1e-9, f"max rel residual {worst:.2e}", budget=10)


def test_02_telescoping_identity(verdict):
    rng = np.random.default_rng(102)
    worst = 0.0
    for i in range(200):
        n, L, cplx = int(rng.integers(1, 13)), int(rng.integers(1, 21)), bool(i % 2)
        steps = [defect_of(random_contraction_matrix(rng, n, cplx, 1.0 + rng.random()))
                 for _ in range(L)]
        worst = max(worst, telescoping_residual(steps))
    verdict("2 telescoping operator identity", worst <= 1e-8, f"max residual {worst:.2e}", budget=30)


def test_03_summability_effectiveness(verdict):
    rng = np.random.default_rng(103)
    lam = Schedule.one_over_n_sq(500).lambdas
    worst = 0.0
    for _ in range(50):
        steps = [relaxed_step(rank_one_projection(rng.standard_normal(8)), l) for l in lam]
        probes = rng.standard_normal((5, 8))
        probes /= np.linalg.norm(probes, axis=1, keepdims=True)
        rep = effectiveness_diagnostic(steps, probes, 1e-3, start=250)
        worst = max(worst, float(rep.cauchy_tail.max()))
    verdict("3 summability effectiveness", worst < 1e-3, f"max Cauchy tail {worst:.2e}", budget=60)


def test_04_kaczmarz_energy_balance(verdict):
    rng = np.random.default_rng(104)
    worst, bound_ok = 0.0, True
    for i in range(100):
        kernel = KERNELS[i % 3]
        N = int(rng.integers(1, 51))
        truth = random_truth(rng, kernel)
        lam = rng.uniform(0.05, 1.95, N)
        prob = InterpolationProblem.from_truth(kernel, rng.standard_normal((N, 2)), truth,
                                               Schedule(lam))
        tr = kaczmarz_run(prob)
        worst = max(worst, tr.energy_balance_residual())
        bound_ok &= residual_series_bound_check(tr)
    verdict("4 Kaczmarz energy balance", worst <= 1e-8 and bound_ok,
            f"max rel residual {worst:.2e}, series bound held {bound_ok}", budget=60)


def test_05_noisy_bias_variance(verdict):
    rng = np.random.default_rng(105)
    kernel = KERNELS[0]
    truth = random_truth(rng, kernel)
    prob = InterpolationProblem.from_truth(kernel, rng.standard_normal((200, 2)), truth,
                                           Schedule.one_over_n(200))
    noise = NoiseModel(0.1, seed=105)
    rep = noisy_kaczmarz_run(prob, noise, 200, 500)
    bound = noise_floor_curve(prob, noise, 1.0, 200)
    cps = [10, 50, 100, 200]
    slack = bound[cps] + 3 * rep.stderr_error_sq[cps] - rep.mean_error_sq[cps]
    quiet = noisy_kaczmarz_run(prob, NoiseModel(0.0, seed=105), 200, 3)
    clean = kaczmarz_run(prob)
    same = all(np.array_equal(quiet.error_sq[t], clean.error_sq) for t in range(3))
    same &= np.array_equal(quiet.coeffs[0], clean.coeffs)
    verdict("5 noisy bias-variance", np.all(slack >= 0) and same,
            f"min slack {slack.min():.3e}, zero-noise bit-identical {same}", budget=300)


@pytest.mark.parametrize("p", [0.5, 1.0])
def test_06_dropout_rate(verdict, p):
    cfg = DropoutConfig(p=p, schedule=1.0, source=IidCoordinate(2), seed=106)
    beta = coercivity_constant(cfg)
    rep = geometric_rate_check(cfg, np.array([1.0, -2.0]), 60, 2000)
    ok = beta == pytest.approx(p / 2) and rep.passed and rep.pathwise_residual <= 1e-9
    verdict(f"6 dropout geometric rate (p={p})", ok,
            f"beta {beta}, pathwise {rep.pathwise_residual:.1e}", budget=120)


def test_07_tree_identities(verdict):
    rng = np.random.default_rng(107)
    worst_split = worst_iso = worst_c = 0.0
    for depth in range(1, 11):
        x = rng.standard_normal(4)
        nx = float(x @ x)
        te = tree_energies(random_contraction(depth, 2, 4), x, depth)
        worst_split = max(worst_split, te.splitting_residual() / nx, te.refinement_residuals().max() / nx)
        iso = tree_energies(random_isometric(depth, 2, 4), x, depth)
        worst_iso = max(worst_iso, np.abs(iso.levels - nx).max() / nx)
        sc = tree_energies(scaled_rotations(0.8, 2, dim=4), x, depth)
        ref = 0.8 ** np.arange(depth + 1) * nx
        worst_c = max(worst_c, np.abs(sc.levels - ref).max() / nx)
    ok = worst_split <= 1e-9 and worst_iso <= 1e-10 and worst_c <= 1e-9
    verdict("7 tree identities", ok,
            f"splitting {worst_split:.1e}, isometric {worst_iso:.1e}, scaled {worst_c:.1e}", budget=30)


def test_08_kernel_truncation(verdict):
    rng = np.random.default_rng(108)
    phi0 = FeatureMap.linear(np.eye(4))
    worst_diag = worst_trace = 0.0
    cs_ok = psd_ok = True
    for k in range(10):
        fam = random_contraction(k, 2, 4) if k % 2 else scaled_rotations(0.5 + 0.05 * k, 2, dim=4)
        N = 3
        keep = PrefixSet.depth_truncation(2, N, int(rng.integers(0, N + 1)))
        tk = TruncatedKernel(fam, phi0, keep)
        X = rng.standard_normal((10, 4))
        rep = truncated_gram(tk, X)
        K0, KS, R = rep.K0.entries, rep.KS.entries, rep.residuals
        d0 = np.real(np.diag(K0))
        worst_diag = max(worst_diag, np.max(np.abs(d0 - np.real(np.diag(KS)) - R) / d0))
        gap = K0 - KS
        cs_ok &= bool(np.all(np.abs(gap) ** 2 <= np.outer(R, R) * (1 + 1e-9) + 1e-12))
        psd_ok &= rep.gap_psd
        worst_trace = max(worst_trace, rep.trace_identity_residual)
    ok = worst_diag <= 1e-9 and cs_ok and psd_ok and worst_trace <= 1e-8
    verdict("8 kernel truncation", ok,
            f"diagonal {worst_diag:.1e}, trace {worst_trace:.1e}, CS {cs_ok}, PSD {psd_ok}", budget=60)


def test_09_greedy_compression(verdict):
    rng = np.random.default_rng(109)
    phi0 = FeatureMap.linear(np.eye(4))
    worst = 0.0
    chain_ok = stop_ok = True
    fired = 0
    for k in range(6):
        fam = random_contraction(k, 2, 4)
        X = rng.standard_normal((8, 4))
        prob = RidgeProblem(rng.standard_normal(8), reg=1.0)
        state = run_greedy(fam, phi0, X, 3)
        K0 = state.gram0()
        tr0 = float(np.real(np.trace(K0)))
        # a threshold that the rule crosses halfway through the run
        eps = state.history[len(state.history) // 2].trace_gap_after / prob.reg
        for S, rec in zip(state.snapshot_sets()[1:], state.history):
            KS = state.gram(S)
            worst = max(worst, abs(tr0 - np.real(np.trace(KS)) - rec.trace_gap_after) / tr0)
            st = ridge_stability_check(K0, KS, prob)
            chain_ok &= st.passed
            if rec.trace_gap_after <= eps * prob.reg:
                fired += 1
                stop_ok &= st.lhs <= eps * np.linalg.norm(prob.labels) * (1 + 1e-9)
        assert stopping_rule(state, eps, prob) == (state.trace_gap <= eps * prob.reg)
    ok = worst <= 1e-9 and chain_ok and stop_ok and fired > 0
    verdict("9 greedy compression", ok,
            f"trace decrease {worst:.1e}, chain {chain_ok}, stop rule {stop_ok} ({fired} firings)",
            budget=60)


def test_10_gkpca(verdict):
    rng = np.random.default_rng(110)
    kernel = KERNELS[0]
    worst_delta = 0.0
    for _ in range(200):
        D = rng.standard_normal((int(rng.integers(1, 8)), 2)) * 1.5
        dic = Dictionary.empty(kernel, 2, 1e-12)
        for d in D:
            dic = dic.admit(d)
        x = rng.standard_normal(2) * 1.5
        J = gram(kernel, np.vstack([D, x])).entries
        a = np.linalg.lstsq(J[:-1, :-1], J[:-1, -1], rcond=None)[0]
        v = np.concatenate([-a, [1.0]])
        worst_delta = max(worst_delta, abs(residual_delta(dic, x) - v @ J @ v) / J[-1, -1])
    worst_dec = 0.0
    step_ok = True
    for N in range(1, 31):
        lam = rng.uniform(0.05, 1.95, N)
        run = deflation_run(kernel, rng.standard_normal((N, 2)), Schedule(lam), random_truth(rng, kernel))
        worst_dec = max(worst_dec, run.decomposition_residuals().max())
        step_ok &= bool(run.step_bound_slack().min() >= -1e-10)
    rep = convergence_and_noise_report(kernel, random_truth(rng, kernel), rng.standard_normal((200, 2)),
                                       Schedule.one_over_n(200), NoiseModel(0.1, seed=110), 200, 500,
                                       kappa=1.0)
    cps = [10, 50, 100, 200]
    mc_ok = bool(np.all(rep.mean_error_sq[cps] <= rep.bound_norm[cps] + 3 * rep.stderr_error_sq[cps]))
    ok = worst_delta <= 1e-8 and worst_dec <= 1e-8 and step_ok and rep.passed and mc_ok
    verdict("10 GKPCA", ok,
            f"delta {worst_delta:.1e}, decomposition {worst_dec:.1e}, step bound {step_ok}, "
            f"noise bound {rep.noise_bound_ok and mc_ok}", budget=180)


def test_11_cross_module_oracle(verdict):
    rng = np.random.default_rng(111)
    worst = 0.0
    for i in range(50):
        kernel = KERNELS[i % 3]
        truth = random_truth(rng, kernel, n=4)
        N = int(rng.integers(1, 26))
        X = rng.standard_normal((N, 2))
        lam = rng.uniform(0.05, 1.95, N)
        tr = kaczmarz_run(InterpolationProblem.from_truth(kernel, X, truth, Schedule(lam)))
        B = feature_coordinates(kernel, np.vstack([truth.anchors, X]))
        m = truth.n_anchors
        steps = [relaxed_step(rank_one_projection(B[:, m + j]), lam[j]) for j in range(N)]
        coords_f = B[:, :m] @ truth.coeffs
        TNf, _ = run_product(steps, coords_f)
        e_N = coords_f - B[:, m:] @ tr.coeffs
        worst = max(worst, np.linalg.norm(TNf - e_N) / np.sqrt(truth.norm_sq()))
    verdict("11 interpolation error equals telescope product", worst <= 1e-8,
            f"max rel gap {worst:.1e}", budget=30)


def test_12_cli_determinism(verdict, tmp_path):
    configs = sorted((ROOT / "configs").glob("*.ini"))
    codes, same = [], True
    for cfg in configs:
        runs = []
        for rep in range(2):
            out = tmp_path / f"{cfg.stem}_{rep}"
            codes.append(main(["run", "--config", str(cfg), "--out", str(out)]))
            runs.append({p.name: p.read_bytes() for p in sorted(out.glob("*.csv"))})
        same &= bool(runs[0]) and runs[0] == runs[1]
    ok = same and all(c == 0 for c in codes)
    verdict("12 CLI determinism", ok, f"{len(configs)} configs, exit codes {sorted(set(codes))}")
