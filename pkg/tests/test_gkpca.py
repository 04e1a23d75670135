import numpy as np
import pytest
from hypothesis import given, strategies as st

from opdefect.errors import DegenerateDiagonal, EmptyDictionary, PTooLarge
from opdefect.gkpca import (Dictionary, components_for_fraction, convergence_and_noise_report,
                            deflation_run, embed, embeddings_csv, fit_kpca, greedy_select,
                            greedy_select_log, residual_delta)
from opdefect.interpolate import NoiseModel
from opdefect.rkhs import Kernel, RkhsFunction, gram, rkhs_distance_sq
from opdefect.telescope import Schedule

GAUSS = Kernel("gaussian", gamma=0.5)
LIN = Kernel("linear")


def brute_delta(kernel, D, x):
    """min_a ||k_x - sum a_i k_{d_i}||^2 from the normal equations on the joint Gram."""
    Z = np.vstack([D, x[None, :]])
    J = gram(kernel, Z).entries
    G, b, c = J[:-1, :-1], J[:-1, -1], J[-1, -1]
    a = np.linalg.solve(G, b)
    v = np.concatenate([-a, [1.0]])
    return float(v @ J @ v), c


def test_delta_examples(rng):
    x = rng.standard_normal(2)
    assert residual_delta(Dictionary.empty(GAUSS, 2, 1e-3), x) == 1.0
    d = Dictionary.empty(GAUSS, 2, 1e-3).admit(x)
    assert abs(residual_delta(d, x)) <= 1e-9
    e1 = Dictionary.empty(LIN, 2, 1e-6).admit([1.0, 0.0])
    assert residual_delta(e1, np.array([1.0, 1.0])) == pytest.approx(1.0)


@given(st.integers(1, 8), st.integers(0, 2**31 - 1))
def test_delta_matches_least_squares(l, seed):
    rng = np.random.default_rng(seed)
    D = rng.standard_normal((l, 2)) * 2
    dic = Dictionary.empty(GAUSS, 2, 1e-9)
    for p in D:
        dic = dic.admit(p)
    x = rng.standard_normal(2) * 2
    ref, kxx = brute_delta(GAUSS, D, x)
    assert abs(residual_delta(dic, x) - ref) <= 1e-8 * kxx


def test_incremental_factor(rng):
    dic = greedy_select(GAUSS, rng.standard_normal((20, 2)), 1e-6)
    L, G = dic.chol, dic.gram
    assert np.allclose(L, np.tril(L))
    assert np.abs(L @ L.T - G).max() <= 1e-8 * np.abs(G).max()
    assert np.abs(G - gram(GAUSS, dic.points).entries).max() <= 1e-14


def test_selection_examples(rng):
    x = rng.standard_normal(2)
    assert greedy_select(GAUSS, np.tile(x, (5, 1)), 1e-6).size == 1
    d = greedy_select(LIN, [[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]], 1e-6)
    assert d.indices == (0, 1)
    assert greedy_select(GAUSS, rng.standard_normal((6, 2)), 1.0).size == 0
    with pytest.raises(ValueError):
        greedy_select(GAUSS, rng.standard_normal((3, 2)), 0.0)


def test_admission_soundness(rng):
    X = rng.standard_normal((40, 2))
    dic, log = greedy_select_log(GAUSS, X, 5e-2)
    assert [r.index for r in log if r.admitted] == list(dic.indices)
    for r in log:
        if not r.admitted:
            assert r.delta <= 5e-2
            assert residual_delta(dic, X[r.index]) <= r.delta + 1e-9


def test_fit_examples(rng):
    ortho = Dictionary.empty(LIN, 2, 1e-6).admit([1.0, 0.0]).admit([0.0, 1.0])
    assert np.allclose(fit_kpca(ortho).eigvals, [1.0, 1.0])
    single = Dictionary.empty(LIN, 2, 1e-6).admit([3.0, 4.0])
    assert fit_kpca(single).eigvals.tolist() == [pytest.approx(25.0)]
    dic = greedy_select(GAUSS, rng.standard_normal((6, 2)), 1e-9)
    m = fit_kpca(dic)
    assert np.abs(dic.gram @ m.eigvecs - m.eigvecs * m.eigvals).max() <= 1e-8
    assert np.all(np.diff(m.eigvals) <= 0)
    with pytest.raises(EmptyDictionary):
        fit_kpca(Dictionary.empty(GAUSS, 2, 1.0))
    with pytest.raises(PTooLarge):
        fit_kpca(dic, p=dic.size + 1)


def test_variance_fraction():
    assert components_for_fraction([5.0, 3.0, 2.0], 0.5) == 1
    assert components_for_fraction([5.0, 3.0, 2.0], 0.8) == 2
    assert components_for_fraction([5.0, 3.0, 2.0], 1.0) == 3


def test_embedding_examples(rng):
    single = Dictionary.empty(LIN, 2, 1e-6).admit([3.0, 4.0])
    m = fit_kpca(single)
    assert abs(embed(m, np.array([3.0, 4.0]))[0]) == pytest.approx(5.0)
    dic = greedy_select(GAUSS, rng.standard_normal((10, 2)), 1e-6)
    m = fit_kpca(dic, p=3)
    x = rng.standard_normal(2)
    kx = GAUSS.matrix(dic.points, x[None, :])[:, 0]
    assert np.allclose(embed(m, x), m.eigvecs.T @ kx)
    pk = Kernel("polynomial", degree=2, c=1.0)
    dic = greedy_select(pk, rng.standard_normal((8, 2)), 1e-6)
    m = fit_kpca(dic)
    direct = [sum(m.eigvecs[i, j] * pk(dic.points[i], x) for i in range(dic.size)) / np.sqrt(pk(x, x))
              for j in range(m.num_components)]
    assert np.allclose(embed(m, x), direct)
    with pytest.raises(DegenerateDiagonal):
        embed(fit_kpca(greedy_select(LIN, [[1.0, 0.0]], 1e-6)), np.zeros(2))


def test_embedding_on_dictionary_points(rng):
    dic = greedy_select(GAUSS, rng.standard_normal((12, 2)), 1e-4)
    m = fit_kpca(dic)
    G = dic.gram
    ref = (m.eigvecs.T @ G).T / np.sqrt(np.diag(G))[:, None]
    assert np.abs(embed(m, dic.points) - ref).max() <= 1e-9
    rows = embeddings_csv(m, dic.points).splitlines()
    assert len(rows) == dic.size + 1 and len(rows[1].split(",")) == m.num_components


def random_truth(rng, kernel=GAUSS, n=4):
    return RkhsFunction(rng.standard_normal((n, 2)), rng.standard_normal(n), kernel)


def test_hard_deflation_annihilates(rng):
    f = random_truth(rng)
    run = deflation_run(GAUSS, rng.standard_normal((1, 2)), Schedule.constant(1.0, 1), f)
    assert abs(run.post_step_values()[0]) <= 1e-15
    X = rng.standard_normal((6, 2))
    run = deflation_run(GAUSS, X, Schedule.constant(1.0, 6), f)
    assert np.abs(run.post_step_values()).max() <= 1e-14


def test_zero_function_deflation(rng):
    run = deflation_run(GAUSS, rng.standard_normal((5, 2)), Schedule.one_over_n(5),
                        RkhsFunction.zero(GAUSS, 2))
    assert np.all(run.eval_energy == 0) and np.all(run.norm_sq == 0)


def test_energy_decomposition_two_forms(rng):
    f = random_truth(rng)
    run = deflation_run(GAUSS, rng.standard_normal((15, 2)), Schedule.one_over_n(15), f)
    assert run.decomposition_residuals().max() <= 1e-8
    assert run.form_gap() <= 1e-12
    assert run.ledger.balance_residual() <= 1e-8
    final = run.iterate(15)
    assert final.norm_sq() == pytest.approx(run.norm_sq[-1], rel=1e-10)
    assert rkhs_distance_sq(run.iterate(0), f) == 0.0


@given(st.integers(1, 30), st.floats(0.05, 1.95), st.integers(0, 2**31 - 1))
def test_step_difference_bound(n, lam, seed):
    rng = np.random.default_rng(seed)
    run = deflation_run(GAUSS, rng.standard_normal((n, 2)), Schedule.constant(lam, n), random_truth(rng))
    assert run.step_bound_slack().min() >= -1e-10
    assert run.decomposition_residuals().max() <= 1e-8


def test_report_without_noise(rng):
    f = random_truth(rng)
    X = rng.standard_normal((30, 2))
    rep = convergence_and_noise_report(GAUSS, f, X, Schedule.one_over_n(30), NoiseModel(0.0), 30, 10)
    assert rep.mean_error_sq is None and rep.passed
    assert np.array_equal(rep.bound_ledger, rep.deflation.norm_sq)


def test_cauchy_tail_small_steps(rng):
    f = random_truth(rng)
    X = rng.standard_normal((300, 2))
    rep = convergence_and_noise_report(GAUSS, f, X, Schedule.one_over_n_sq(300), NoiseModel(0.0), 300, 1)
    n = np.arange(151, 301)
    # each step moves at most lambda_n ||T_{n-1} f|| <= lambda_n ||f||
    assert rep.cauchy_tail <= np.sqrt(f.norm_sq()) * np.sum(1.0 / n**2)
    assert rep.cauchy_tail < 1e-2


def test_noise_stability(rng):
    f = random_truth(rng)
    X = rng.standard_normal((200, 2))
    rep = convergence_and_noise_report(GAUSS, f, X, Schedule.one_over_n(200), NoiseModel(0.1, seed=5),
                                       200, 500, kappa=1.0)
    assert rep.noise_bound_ok and rep.passed
    assert np.all(rep.bound_ledger <= rep.bound_norm + 1e-12)
