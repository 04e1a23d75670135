"""Kernels, Gram matrices and finite kernel expansions.

Conventions: ``k_z = k(., z)``, a function ``f = sum_i c_i k_{z_i}`` evaluates
as ``f(x) = sum_i c_i k(x, z_i)`` and the inner product is conjugate-linear
in the first argument, so ``<k_x, k_y> = k(x, y)`` and ``<k_x, f> = f(x)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import DegenerateDiagonal, KernelMismatch
from .hilbert import psd_sqrt

TOL_DIAG = 1e-12


def as_points(points) -> np.ndarray:
    """Coerce to a float array of shape ``(m, p)``; a 1-d input is one point."""
    X = np.asarray(points, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] < 1:
        raise ValueError(f"points must have shape (m, p) with p >= 1, got {X.shape}")
    return X


@dataclass(frozen=True, eq=False)
class Kernel:
    """A positive-definite kernel on ``R^p``.

    ``kind`` is one of ``gaussian`` (``exp(-gamma ||x-y||^2)``), ``linear``
    (``<x, y>``), ``polynomial`` (``(<x, y> + c)^degree``) or ``custom``, in
    which case ``func(X, Y)`` must return the ``(len(X), len(Y))`` matrix.
    """

    kind: str = "gaussian"
    gamma: float = 1.0
    degree: int = 2
    c: float = 1.0
    func: Callable | None = None

    def __post_init__(self):
        if self.kind not in {"gaussian", "linear", "polynomial", "custom"}:
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if self.kind == "custom" and self.func is None:
            raise ValueError("custom kernel needs func")
        if self.kind == "gaussian" and self.gamma <= 0:
            raise ValueError("gaussian kernel needs gamma > 0")

    def matrix(self, X, Y) -> np.ndarray:
        X, Y = as_points(X), as_points(Y)
        if self.kind == "gaussian":
            d2 = (np.sum(X**2, axis=1)[:, None] + np.sum(Y**2, axis=1)[None, :] - 2.0 * X @ Y.T)
            return np.exp(-self.gamma * np.clip(d2, 0.0, None))
        if self.kind == "linear":
            return X @ Y.T
        if self.kind == "polynomial":
            return (X @ Y.T + self.c) ** self.degree
        return np.asarray(self.func(X, Y))

    def __call__(self, x, y):
        return self.matrix(x, y)[0, 0]

    def diag(self, X) -> np.ndarray:
        X = as_points(X)
        if self.kind == "gaussian":
            return np.ones(X.shape[0])
        if self.kind == "linear":
            return np.sum(X**2, axis=1)
        if self.kind == "polynomial":
            return (np.sum(X**2, axis=1) + self.c) ** self.degree
        return np.real(np.array([self.matrix(x, x)[0, 0] for x in X]))

    def same_as(self, other: "Kernel") -> bool:
        if self is other:
            return True
        if self.kind != other.kind or self.kind == "custom":
            return self.kind == other.kind == "custom" and self.func is other.func
        return (self.gamma, self.degree, self.c) == (other.gamma, other.degree, other.c)


@dataclass(frozen=True, eq=False)
class GramMatrix:
    points: np.ndarray
    entries: np.ndarray

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    @property
    def trace(self) -> float:
        return float(np.real(np.trace(self.entries)))

    def min_eig(self) -> float:
        return float(np.linalg.eigvalsh(self.entries)[0])


def gram(kernel: Kernel, points) -> GramMatrix:
    """Gram matrix, Hermitian by construction (upper triangle mirrored)."""
    X = as_points(points)
    if X.shape[0] == 0:
        raise ValueError("gram needs at least one point")
    K = kernel.matrix(X, X)
    upper = np.triu(K)
    K = upper + np.conj(np.triu(K, 1)).T
    return GramMatrix(points=X, entries=K)


@dataclass(frozen=True, eq=False)
class RkhsFunction:
    anchors: np.ndarray
    coeffs: np.ndarray
    kernel: Kernel

    def __post_init__(self):
        A = np.asarray(self.anchors, dtype=float)
        c = np.asarray(self.coeffs).reshape(-1)
        if A.ndim == 1:
            A = A.reshape(-1, 1) if c.shape[0] != 1 else A[None, :]
        if A.shape[0] != c.shape[0]:
            raise ValueError(f"{A.shape[0]} anchors but {c.shape[0]} coefficients")
        object.__setattr__(self, "anchors", A)
        object.__setattr__(self, "coeffs", c)

    @classmethod
    def zero(cls, kernel: Kernel, p: int) -> "RkhsFunction":
        return cls(np.zeros((0, p)), np.zeros(0), kernel)

    @classmethod
    def section(cls, kernel: Kernel, x) -> "RkhsFunction":
        return cls(as_points(x), np.ones(1), kernel)

    @classmethod
    def normalized_section(cls, kernel: Kernel, x) -> "RkhsFunction":
        X = as_points(x)
        kxx = float(np.real(kernel.diag(X)[0]))
        if kxx <= TOL_DIAG:
            raise DegenerateDiagonal(f"k(x, x) = {kxx:.3e}")
        return cls(X, np.array([1.0 / np.sqrt(kxx)]), kernel)

    @property
    def n_anchors(self) -> int:
        return self.coeffs.shape[0]

    @property
    def dim(self) -> int:
        return self.anchors.shape[1]

    def __call__(self, x):
        X = as_points(x)
        if self.n_anchors == 0:
            vals = np.zeros(X.shape[0], dtype=self.coeffs.dtype)
        else:
            vals = self.kernel.matrix(X, self.anchors) @ self.coeffs
        return vals[0] if np.ndim(x) == 1 else vals

    def _check(self, other: "RkhsFunction"):
        if not self.kernel.same_as(other.kernel):
            raise KernelMismatch("functions live in different RKHSs")

    def __add__(self, other: "RkhsFunction") -> "RkhsFunction":
        self._check(other)
        A = np.vstack([self.anchors.reshape(-1, other.dim), other.anchors])
        c = np.concatenate([self.coeffs, other.coeffs])
        return RkhsFunction(A, c, self.kernel)

    def __neg__(self) -> "RkhsFunction":
        return RkhsFunction(self.anchors, -self.coeffs, self.kernel)

    def __sub__(self, other: "RkhsFunction") -> "RkhsFunction":
        return self + (-other)

    def __mul__(self, a) -> "RkhsFunction":
        return RkhsFunction(self.anchors, a * self.coeffs, self.kernel)

    __rmul__ = __mul__

    def norm_sq(self) -> float:
        return float(np.real(rkhs_inner(self, self)))


def rkhs_inner(f: RkhsFunction, g: RkhsFunction):
    """``<f, g> = sum_{i,j} conj(c_i) d_j k(z_i, w_j)``."""
    if not f.kernel.same_as(g.kernel):
        raise KernelMismatch("functions live in different RKHSs")
    if f.n_anchors == 0 or g.n_anchors == 0:
        return 0.0
    K = f.kernel.matrix(f.anchors, g.anchors)
    return np.conj(f.coeffs) @ K @ g.coeffs


def rkhs_distance_sq(f: RkhsFunction, g: RkhsFunction) -> float:
    return (f - g).norm_sq()


def section_projection_apply(f: RkhsFunction, x, tol_diag: float = TOL_DIAG) -> RkhsFunction:
    """Rank-one projection onto the section at ``x``: ``(f(x)/k(x,x)) k_x``."""
    X = as_points(x)
    kxx = float(np.real(f.kernel.diag(X)[0]))
    if kxx <= tol_diag:
        raise DegenerateDiagonal(f"k(x, x) = {kxx:.3e} at {X[0]}")
    fx = f(X)[0]
    return RkhsFunction(X, np.array([fx / kxx]), f.kernel)


def compact(f: RkhsFunction, tol: float = 0.0) -> RkhsFunction:
    """Merge exactly repeated anchors and drop negligible coefficients.

    A coefficient is dropped when ``|c_i| <= tol * max|c|``; with ``tol=0``
    only exact zeros go and the function is unchanged.
    """
    if f.n_anchors == 0:
        return f
    uniq, inverse = np.unique(f.anchors, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    # keep first-appearance order so repeated runs give identical layouts
    first = np.full(uniq.shape[0], f.n_anchors)
    np.minimum.at(first, inverse, np.arange(f.n_anchors))
    order = np.argsort(first, kind="stable")
    rank = np.empty_like(order)
    rank[order] = np.arange(order.shape[0])
    merged = np.zeros(uniq.shape[0], dtype=f.coeffs.dtype)
    np.add.at(merged, rank[inverse], f.coeffs)
    anchors = uniq[order]
    cmax = np.max(np.abs(merged)) if merged.size else 0.0
    keep = np.abs(merged) > tol * cmax if cmax > 0 else np.zeros(merged.shape[0], bool)
    return RkhsFunction(anchors[keep], merged[keep], f.kernel)


def feature_coordinates(kernel: Kernel, anchors) -> np.ndarray:
    """Isometric coordinates for ``span{k_z : z in anchors}``.

    Returns ``B = G^{1/2}`` (``G`` the anchor Gram) so that a function with
    coefficient vector ``c`` over ``anchors`` maps to ``B c`` and
    ``<f, g> = (B c)^H (B d)``.
    """
    G = gram(kernel, anchors).entries
    return psd_sqrt(G, tol_neg=1e-9 * max(np.real(np.trace(G)), 1.0))


def load_points_csv(path) -> np.ndarray:
    """One point per row; a non-numeric first row is treated as a header."""
    with open(path) as fh:
        first = fh.readline()
    skip = 0
    try:
        [float(t) for t in first.strip().split(",")]
    except ValueError:
        skip = 1
    X = np.loadtxt(path, delimiter=",", skiprows=skip, ndmin=2)
    return as_points(X)
