import numpy as np
import pytest
from hypothesis import given, strategies as st

from opdefect.errors import DegenerateDiagonal, KernelMismatch
from opdefect.rkhs import (Kernel, RkhsFunction, as_points, compact, feature_coordinates, gram,
                           load_points_csv, rkhs_distance_sq, rkhs_inner, section_projection_apply)

LIN = Kernel("linear")
GAUSS = Kernel("gaussian", gamma=1.0)


def test_gram_examples(rng):
    assert np.array_equal(gram(LIN, np.eye(2)).entries, np.eye(2))
    assert gram(GAUSS, [[0.3, 0.1]]).entries.tolist() == [[1.0]]
    G = gram(Kernel("polynomial", degree=2, c=1.0), rng.standard_normal((5, 3)))
    assert G.min_eig() >= -1e-10 * G.trace
    assert np.array_equal(G.entries, G.entries.T)


def test_kernel_validation():
    with pytest.raises(ValueError):
        Kernel("laplace")
    with pytest.raises(ValueError):
        Kernel("gaussian", gamma=0.0)
    with pytest.raises(ValueError):
        Kernel("custom")


def test_custom_kernel_matches_builtin(rng):
    X = rng.standard_normal((4, 2))
    k = Kernel("custom", func=lambda A, B: A @ B.T)
    assert np.allclose(k.matrix(X, X), LIN.matrix(X, X))
    assert np.allclose(k.diag(X), LIN.diag(X))


def test_reproducing_property(rng):
    x, y = rng.standard_normal(2), rng.standard_normal(2)
    kx, ky = RkhsFunction.section(GAUSS, x), RkhsFunction.section(GAUSS, y)
    assert rkhs_inner(kx, ky) == pytest.approx(GAUSS(x, y), abs=1e-15)
    f = RkhsFunction(rng.standard_normal((3, 2)), rng.standard_normal(3), GAUSS)
    assert rkhs_inner(kx, f) == pytest.approx(f(x), abs=1e-14)


def test_inner_is_conjugate_linear_in_first_slot(rng):
    Z = rng.standard_normal((3, 2))
    f = RkhsFunction(Z, np.array([1.0, 2j, -1.0]), GAUSS)
    g = RkhsFunction(Z[:2], np.array([0.5, 1 - 1j]), GAUSS)
    a = 2 - 3j
    assert rkhs_inner(a * f, g) == pytest.approx(np.conj(a) * rkhs_inner(f, g))
    assert rkhs_inner(f, a * g) == pytest.approx(a * rkhs_inner(f, g))


@given(st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_norms_are_real_and_nonnegative(n, seed):
    rng = np.random.default_rng(seed)
    f = RkhsFunction(rng.standard_normal((n, 3)), rng.standard_normal(n) + 1j * rng.standard_normal(n),
                     GAUSS)
    v = rkhs_inner(f, f)
    assert abs(np.imag(v)) <= 1e-12 * max(1.0, abs(v))
    assert np.real(v) >= -1e-10


def test_zero_function_and_mismatch(rng):
    z = RkhsFunction(rng.standard_normal((2, 2)), np.zeros(2), GAUSS)
    g = RkhsFunction.section(GAUSS, [0.0, 1.0])
    assert rkhs_inner(z, g) == 0.0
    with pytest.raises(KernelMismatch):
        rkhs_inner(g, RkhsFunction.section(LIN, [0.0, 1.0]))


def test_section_projection_examples(rng):
    x = np.array([0.2, -0.4])
    kx = RkhsFunction.section(GAUSS, x)
    assert rkhs_distance_sq(section_projection_apply(kx, x), kx) <= 1e-15
    # f with f(e1) = 0
    f = RkhsFunction(np.array([[0.0, 1.0]]), np.array([1.0]), LIN)
    assert section_projection_apply(f, [1.0, 0.0]).norm_sq() == 0.0
    f = RkhsFunction(np.eye(2), np.array([1.0, 2.0]), LIN)
    Pf = section_projection_apply(f, [1.0, 0.0])
    assert rkhs_distance_sq(Pf, RkhsFunction.section(LIN, [1.0, 0.0])) <= 1e-15
    with pytest.raises(DegenerateDiagonal):
        section_projection_apply(f, [0.0, 0.0])


def test_section_projection_is_idempotent(rng):
    f = RkhsFunction(rng.standard_normal((4, 2)), rng.standard_normal(4), GAUSS)
    x = rng.standard_normal(2)
    once = section_projection_apply(f, x)
    assert rkhs_distance_sq(section_projection_apply(once, x), once) <= 1e-14


def test_compact_merges_and_drops(rng):
    z = np.array([[1.0, 2.0]])
    f = RkhsFunction(np.vstack([z, z]), np.array([0.5, 1.5]), GAUSS)
    c = compact(f)
    assert c.n_anchors == 1 and c.coeffs[0] == 2.0
    assert compact(RkhsFunction(np.vstack([z, z]), np.zeros(2), GAUSS)).n_anchors == 0
    Z = rng.standard_normal((3, 2))
    g = RkhsFunction(np.vstack([Z, Z[::-1]]), rng.standard_normal(6), GAUSS)
    assert rkhs_distance_sq(g, compact(g)) <= 1e-13
    assert np.array_equal(compact(g).anchors, Z)


def test_feature_coordinates_are_isometric(rng):
    Z = rng.standard_normal((5, 2))
    B = feature_coordinates(GAUSS, Z)
    c, d = rng.standard_normal(5), rng.standard_normal(5)
    f, g = RkhsFunction(Z, c, GAUSS), RkhsFunction(Z, d, GAUSS)
    assert (B @ c) @ (B @ d) == pytest.approx(rkhs_inner(f, g), rel=1e-10)


def test_points_csv(tmp_path):
    p = tmp_path / "pts.csv"
    p.write_text("a,b\n1,2\n3,4\n")
    assert load_points_csv(p).tolist() == [[1.0, 2.0], [3.0, 4.0]]
    p.write_text("1,2\n")
    assert load_points_csv(p).shape == (1, 2)
    assert as_points([1.0, 2.0]).shape == (1, 2)
