"""Finite-dimensional model Hilbert space: vectors, operators, projections.

Vectors and operators are plain numpy arrays (real or complex). The inner
product is conjugate-linear in the first slot, ``<x, y> = x^H y``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NotPSD, NotSelfAdjoint, ZeroVector

TOL_PROJ = 1e-8
TOL_GS = 1e-10


def inner(x, y):
    return np.vdot(x, y)


def norm_sq(x) -> float:
    x = np.asarray(x)
    return float(np.real(np.vdot(x, x)))


def adjoint(A):
    return np.conj(np.asarray(A)).T


def spectral_norm(A, iters: int = 50, rtol: float = 1e-10) -> float:
    """Estimate ``||A||_2`` by power iteration on ``A^H A``.

    The returned value never exceeds the Frobenius norm, which is a valid
    upper bound and is used when the iteration hits a zero vector.
    """
    A = np.asarray(A)
    fro = float(np.linalg.norm(A))
    if fro == 0.0:
        return 0.0
    n = A.shape[1]
    # deterministic start with all-ones plus a ramp so it is not orthogonal
    # to the top singular vector for structured inputs
    v = np.ones(n, dtype=A.dtype) + np.arange(n) / (3.0 * n)
    v = v / np.linalg.norm(v)
    est = 0.0
    for _ in range(iters):
        w = adjoint(A) @ (A @ v)
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return fro
        v = w / nw
        new = float(np.sqrt(nw))
        if abs(new - est) <= rtol * new:
            est = new
            break
        est = new
    return min(est, fro)


def is_self_adjoint(M, tol: float = TOL_PROJ) -> bool:
    M = np.asarray(M)
    return float(np.linalg.norm(M - adjoint(M))) <= tol


def psd_sqrt(M, tol_neg: float | None = None):
    """Self-adjoint PSD square root via a full eigendecomposition.

    Eigenvalues in ``[-tol_neg, 0)`` are clamped to zero; anything more
    negative raises :class:`NotPSD`. ``tol_neg`` defaults to ``1e-10 * ||M||``.
    """
    M = np.asarray(M)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise NotSelfAdjoint(f"expected a square matrix, got shape {M.shape}")
    if not is_self_adjoint(M):
        raise NotSelfAdjoint("matrix is not self-adjoint within tolerance")
    Mh = 0.5 * (M + adjoint(M))
    scale = float(np.linalg.norm(Mh, 2)) if Mh.size else 0.0
    if tol_neg is None:
        tol_neg = 1e-10 * max(scale, 1.0)
    w, V = np.linalg.eigh(Mh)
    if w.size and w.min() < -tol_neg:
        raise NotPSD(f"smallest eigenvalue {w.min():.3e} below -{tol_neg:.1e}")
    w = np.clip(w, 0.0, None)
    S = (V * np.sqrt(w)) @ adjoint(V)
    return 0.5 * (S + adjoint(S))


@dataclass(frozen=True, eq=False)
class Projection:
    """Orthogonal projection ``P = P* = P^2``, checked on construction."""

    op: np.ndarray
    tol: float = TOL_PROJ

    def __post_init__(self):
        P = np.asarray(self.op)
        if P.ndim != 2 or P.shape[0] != P.shape[1]:
            raise ValueError(f"projection must be square, got shape {P.shape}")
        if float(np.linalg.norm(P - adjoint(P))) > self.tol:
            raise NotSelfAdjoint("projection is not self-adjoint")
        if float(np.linalg.norm(P @ P - P)) > self.tol:
            raise ValueError("projection is not idempotent")
        object.__setattr__(self, "op", P)

    @property
    def dim(self) -> int:
        return self.op.shape[0]

    @property
    def rank(self) -> int:
        return int(round(float(np.real(np.trace(self.op)))))

    def __matmul__(self, x):
        return self.op @ x

    def complement(self) -> "Projection":
        return Projection(np.eye(self.dim, dtype=self.op.dtype) - self.op, self.tol)


def rank_one_projection(g) -> Projection:
    """Projection onto the line spanned by ``g``: ``P x = <g, x>/||g||^2 g``."""
    g = np.asarray(g)
    nsq = norm_sq(g)
    if nsq == 0.0:
        raise ZeroVector("cannot project onto the zero vector")
    u = g / np.sqrt(nsq)
    P = np.outer(u, np.conj(u))
    return Projection(P)


def orthonormal_basis(vectors, dim: int | None = None, tol_gs: float = TOL_GS):
    """Gram-Schmidt with one re-orthogonalization pass.

    Vectors whose residual norm falls below ``tol_gs`` (relative to their
    original norm) are dropped. Returns an array of shape ``(dim, r)``.
    """
    vectors = [np.asarray(v) for v in vectors]
    if not vectors:
        if dim is None:
            raise ValueError("dim is required for an empty vector list")
        return np.zeros((dim, 0))
    dim = vectors[0].shape[0] if dim is None else dim
    dtype = np.result_type(*vectors, float)
    basis: list[np.ndarray] = []
    for v in vectors:
        if v.shape != (dim,):
            raise ValueError(f"vector of shape {v.shape} in a {dim}-dim space")
        v0 = np.linalg.norm(v)
        if v0 == 0.0:
            continue
        r = v.astype(dtype)
        for _ in range(2):
            for q in basis:
                r = r - np.vdot(q, r) * q
        nr = np.linalg.norm(r)
        if nr <= tol_gs * v0:
            continue
        basis.append(r / nr)
    if not basis:
        return np.zeros((dim, 0), dtype=dtype)
    return np.stack(basis, axis=1)


def project_onto_nullspace(vectors, dim: int | None = None, tol_gs: float = TOL_GS) -> Projection:
    """Orthogonal projection onto ``span(vectors)``.

    Used for the common fixed-point subspace ``M`` of a projection family;
    an empty list gives the zero operator (``M = {0}``), in which case
    ``dim`` must be supplied.
    """
    Q = orthonormal_basis(vectors, dim=dim, tol_gs=tol_gs)
    P = Q @ adjoint(Q)
    return Projection(P)
