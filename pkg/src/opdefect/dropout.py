"""Intermittent (Bernoulli-gated) relaxed projections.

Each trial ``t`` draws projections from ``default_rng([seed, t, 0])`` and
gates from ``default_rng([seed, t, 1])``; the gate is ``eta_n = (u_n < p)``
with ``u_n`` uniform, so runs that differ only in ``p`` share both the
projection stream and the uniforms (``p' < p`` gives ``eta' <= eta``).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import AssumptionMViolated, DegenerateDiagonal, DimensionMismatch, NotIid
from .hilbert import Projection, adjoint, project_onto_nullspace
from .rkhs import TOL_DIAG, Kernel, RkhsFunction, as_points, feature_coordinates, gram
from .telescope import Schedule

TOL_M = 1e-10


class ProjectionSource:
    """A finite catalogue of projection matrices plus a draw rule."""

    iid = True

    def __init__(self, matrices, weights=None):
        mats = np.asarray(matrices)
        if mats.ndim != 3 or mats.shape[1] != mats.shape[2]:
            raise ValueError(f"expected (L, d, d) projection stack, got {mats.shape}")
        self.matrices = mats
        L = mats.shape[0]
        w = np.full(L, 1.0 / L) if weights is None else np.asarray(weights, dtype=float)
        if w.shape != (L,) or np.any(w < 0) or not np.isclose(w.sum(), 1.0):
            raise ValueError("weights must be a probability vector over the catalogue")
        self.weights = w / w.sum()

    @property
    def dim(self) -> int:
        return self.matrices.shape[1]

    def draw(self, rng: np.random.Generator, horizon: int) -> np.ndarray:
        return rng.choice(self.matrices.shape[0], size=horizon, p=self.weights)

    def mean_projection(self) -> np.ndarray:
        return np.einsum("l,lij->ij", self.weights, self.matrices)

    def analytic_alpha(self) -> float | None:
        return None


class FixedSequence(ProjectionSource):
    """Deterministic sequence; step ``n`` uses entry ``(n-1) mod L``."""

    iid = False

    def __init__(self, projections):
        mats = [p.op if isinstance(p, Projection) else np.asarray(p) for p in projections]
        for m in mats:
            Projection(m)
        super().__init__(np.stack(mats))

    def draw(self, rng, horizon):
        return np.arange(horizon) % self.matrices.shape[0]


class IidCoordinate(ProjectionSource):
    """Uniform choice among coordinate projections ``e_i e_i^T``, ``i in coords``."""

    def __init__(self, dim: int, coords=None):
        coords = list(range(dim)) if coords is None else list(coords)
        mats = np.zeros((len(coords), dim, dim))
        for k, i in enumerate(coords):
            mats[k, i, i] = 1.0
        super().__init__(mats)
        self.coords = coords

    def analytic_alpha(self) -> float:
        # E[P] = (1/|coords|) * projection onto span(coords)
        return 1.0 / len(self.coords)


class IidRkhsSample(ProjectionSource):
    """Rank-one projections onto normalized sections at a finitely supported random point.

    The sections are represented in isometric coordinates of
    ``span{k_s : s in support}``.
    """

    def __init__(self, kernel: Kernel, support, weights=None):
        S = as_points(support)
        diag = np.real(kernel.diag(S))
        if np.any(diag <= TOL_DIAG):
            raise DegenerateDiagonal("support point with vanishing k(x, x)")
        B = feature_coordinates(kernel, S)
        G = B / np.sqrt(diag)[None, :]
        mats = np.einsum("ij,kj->jik", G, np.conj(G))
        super().__init__(mats, weights)
        self.kernel = kernel
        self.support = S
        self.coords = B


@dataclass(frozen=True, eq=False)
class DropoutConfig:
    p: float
    schedule: Schedule | float
    source: ProjectionSource
    M_basis: list = field(default_factory=list)
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.p <= 1.0:
            raise ValueError(f"on-probability p={self.p} outside (0, 1]")
        if not isinstance(self.schedule, Schedule):
            Schedule.constant(float(self.schedule), 1)  # validates the range
        d = self.source.dim
        for v in self.M_basis:
            v = np.asarray(v)
            if v.shape != (d,):
                raise DimensionMismatch(f"M basis vector of shape {v.shape} in dim {d}")
            nv = np.linalg.norm(v)
            moved = np.linalg.norm(self.source.matrices @ v, axis=1).max()
            if moved > TOL_M * max(nv, 1.0):
                raise AssumptionMViolated(f"a projection moves M (||P v|| = {moved:.3e})")

    @property
    def dim(self) -> int:
        return self.source.dim

    def lambdas(self, horizon: int) -> np.ndarray:
        if isinstance(self.schedule, Schedule):
            return self.schedule.head(horizon).lambdas
        return np.full(horizon, float(self.schedule))

    def fixed_projection(self) -> Projection:
        return project_onto_nullspace(self.M_basis, dim=self.dim)

    def streams(self, trial: int):
        return (np.random.default_rng([self.seed, trial, 0]),
                np.random.default_rng([self.seed, trial, 1]))


@dataclass(frozen=True, eq=False)
class PathBundle:
    """Vectorized simulation output for ``trials`` paths of length ``N``."""

    eta: np.ndarray            # (T, N) in {0, 1}
    dissipated: np.ndarray     # (T, N)
    energy: np.ndarray         # (T, N+1)  ||x_n||^2
    error_sq: np.ndarray       # (T, N+1)  ||x_n - P_M x0||^2
    final: np.ndarray          # (T, d)
    limit: np.ndarray          # (d,)  P_M x0

    def pathwise_residual(self) -> np.ndarray:
        """Per-path relative gap in ``||x0||^2 - ||x_N||^2 = sum dissipated``."""
        e0 = self.energy[:, 0]
        gap = e0 - self.energy[:, -1] - self.dissipated.sum(axis=1)
        return np.abs(gap) / np.maximum(e0, 1e-14)


def simulate(cfg: DropoutConfig, x0, horizon: int, trials: int = 1, first_trial: int = 0,
             keep_path: bool = False):
    x0 = np.asarray(x0)
    if x0.shape != (cfg.dim,):
        raise DimensionMismatch(f"x0 has shape {x0.shape}, expected ({cfg.dim},)")
    lam = cfg.lambdas(horizon)
    idx = np.empty((trials, horizon), dtype=int)
    eta = np.empty((trials, horizon))
    for k in range(trials):
        rp, re = cfg.streams(first_trial + k)
        idx[k] = cfg.source.draw(rp, horizon)
        eta[k] = re.random(horizon) < cfg.p
    limit = cfg.fixed_projection().op @ x0
    dtype = np.result_type(x0, cfg.source.matrices, float)
    X = np.tile(x0.astype(dtype), (trials, 1))
    energy = np.empty((trials, horizon + 1))
    err = np.empty((trials, horizon + 1))
    dis = np.empty((trials, horizon))
    energy[:, 0] = np.sum(np.abs(X) ** 2, axis=1)
    err[:, 0] = np.sum(np.abs(X - limit) ** 2, axis=1)
    path = [X.copy()] if keep_path else None
    for n in range(horizon):
        P = cfg.source.matrices[idx[:, n]]
        PX = np.einsum("tij,tj->ti", P, X)
        dis[:, n] = eta[:, n] * lam[n] * (2.0 - lam[n]) * np.sum(np.abs(PX) ** 2, axis=1)
        X = X - (lam[n] * eta[:, n])[:, None] * PX
        energy[:, n + 1] = np.sum(np.abs(X) ** 2, axis=1)
        err[:, n + 1] = np.sum(np.abs(X - limit) ** 2, axis=1)
        if keep_path:
            path.append(X.copy())
    bundle = PathBundle(eta=eta, dissipated=dis, energy=energy, error_sq=err, final=X, limit=limit)
    if keep_path:
        return bundle, np.stack(path, axis=1)
    return bundle


@dataclass(frozen=True, eq=False)
class DropoutTrace:
    eta: np.ndarray
    dissipated: np.ndarray
    energy: np.ndarray
    error_to_limit: np.ndarray
    path: np.ndarray
    limit: np.ndarray

    def pathwise_residual(self) -> float:
        gap = self.energy[0] - self.energy[-1] - self.dissipated.sum()
        return abs(gap) / max(self.energy[0], 1e-14)


def dropout_run(cfg: DropoutConfig, x0, horizon: int, trial: int = 0) -> DropoutTrace:
    """One gated path ``x_n = x_{n-1} - lambda_n eta_n P_n x_{n-1}``."""
    b, path = simulate(cfg, x0, horizon, trials=1, first_trial=trial, keep_path=True)
    return DropoutTrace(eta=b.eta[0].astype(int), dissipated=b.dissipated[0], energy=b.energy[0],
                        error_to_limit=b.error_sq[0], path=path[0], limit=b.limit)


def _complement_basis(cfg: DropoutConfig) -> np.ndarray:
    PM = cfg.fixed_projection().op
    w, V = np.linalg.eigh(np.eye(cfg.dim) - PM)
    return V[:, w > 0.5]


def restricted_min_eig(E: np.ndarray, Q: np.ndarray) -> float:
    """Smallest eigenvalue of ``E`` compressed to the range of orthonormal ``Q``."""
    if Q.shape[1] == 0:
        return 0.0
    return float(np.linalg.eigvalsh(adjoint(Q) @ E @ Q)[0])


def coercivity_constant(cfg: DropoutConfig, n_mc: int = 100_000, seed: int | None = None) -> float:
    """``beta = p * min_{x in M^perp, |x|=1} <E[P] x, x>``.

    Coordinate sources return the exact value; other i.i.d. sources average
    ``n_mc`` sampled projections.
    """
    src = cfg.source
    if not src.iid:
        raise NotIid("the conditional mean of P_n is only a fixed operator for i.i.d. sources")
    alpha = src.analytic_alpha()
    if alpha is None:
        rng = np.random.default_rng(cfg.seed if seed is None else seed)
        idx = src.draw(rng, n_mc)
        counts = np.bincount(idx, minlength=src.matrices.shape[0])
        E = np.einsum("l,lij->ij", counts / n_mc, src.matrices)
        alpha = restricted_min_eig(E, _complement_basis(cfg))
    return cfg.p * alpha


@dataclass(frozen=True, eq=False)
class RateReport:
    empirical: np.ndarray
    bound: np.ndarray
    stderr: np.ndarray
    beta: float | None
    pathwise_residual: float

    @property
    def passed(self) -> bool:
        slack = 1e-12 * self.bound[0]
        return bool(np.all(self.empirical <= self.bound + 3.0 * self.stderr + slack))


def geometric_rate_check(cfg: DropoutConfig, x0, horizon: int, trials: int,
                         beta: float | None = None, gamma: float | None = None) -> RateReport:
    """Mean-square error against the geometric contraction bound.

    With ``gamma`` the bound is ``(1-gamma)^n ||e0||^2``; otherwise it is
    ``prod_j (1 - beta lambda_j (2 - lambda_j)) ||e0||^2``, which is
    ``(1 - beta lambda(2-lambda))^n ||e0||^2`` for a constant schedule.
    """
    b = simulate(cfg, x0, horizon, trials)
    e0 = b.error_sq[0, 0]
    if gamma is not None:
        factors = np.full(horizon, 1.0 - gamma)
    else:
        if beta is None:
            beta = coercivity_constant(cfg)
        lam = cfg.lambdas(horizon)
        factors = 1.0 - beta * lam * (2.0 - lam)
    bound = e0 * np.concatenate([[1.0], np.cumprod(factors)])
    stderr = b.error_sq.std(axis=0, ddof=1) / np.sqrt(trials) if trials > 1 else np.zeros(horizon + 1)
    return RateReport(empirical=b.error_sq.mean(axis=0), bound=bound, stderr=stderr, beta=beta,
                      pathwise_residual=float(b.pathwise_residual().max()))


@dataclass(frozen=True, eq=False)
class RkhsDropoutReport:
    mean_error_sq: np.ndarray
    stderr: np.ndarray
    bound: np.ndarray
    alpha: float
    limit: RkhsFunction
    pathwise_residual: float


def min_norm_interpolant(kernel: Kernel, truth: RkhsFunction, support) -> RkhsFunction:
    """Projection of ``truth`` onto ``span{k_s}``: the minimal-norm interpolant on the support."""
    S = as_points(support)
    K = gram(kernel, S).entries
    a = np.linalg.lstsq(K, truth(S), rcond=None)[0]
    return RkhsFunction(S, a, kernel)


def rkhs_dropout_run(kernel: Kernel, truth: RkhsFunction, support, p: float, lambda_: float,
                     horizon: int, trials: int, weights=None, seed: int = 0) -> RkhsDropoutReport:
    """Gated Kaczmarz with i.i.d. sample points drawn from a finite support.

    Starts from ``f_0 = 0``; iterates are kept as coefficient vectors over
    the support (repeated draws accumulate on the same anchor).
    """
    S = as_points(support)
    src = IidRkhsSample(kernel, S, weights)
    cfg = DropoutConfig(p=p, schedule=lambda_, source=src, seed=seed)
    K = gram(kernel, S).entries
    diag = np.real(np.diag(K))
    limit = min_norm_interpolant(kernel, truth, S)
    ys = truth(S)
    lam = float(lambda_)
    L = S.shape[0]
    dtype = np.result_type(K, truth.coeffs, float)
    C = np.zeros((trials, L), dtype=dtype)
    D = C - limit.coeffs[None, :]
    err = np.empty((trials, horizon + 1))
    dis = np.zeros((trials, horizon))
    quad = lambda V: np.real(np.sum(np.conj(V) * (V @ K.T), axis=1))  # noqa: E731
    err[:, 0] = quad(D)
    draws = [cfg.streams(t) for t in range(trials)]
    idx = np.stack([src.draw(rp, horizon) for rp, _ in draws])
    eta = np.stack([re.random(horizon) < p for _, re in draws])
    rows = np.arange(trials)
    for n in range(horizon):
        j = idx[:, n]
        fx = np.sum(K[j] * C, axis=1)
        r = ys[j] - fx
        dis[:, n] = eta[:, n] * lam * (2.0 - lam) * np.abs(r) ** 2 / diag[j]
        C[rows, j] += lam * eta[:, n] * r / diag[j]
        err[:, n + 1] = quad(C - limit.coeffs[None, :])
    # f* - limit lies in M, which no step touches, so the error telescopes
    gap = err[:, 0] - err[:, -1] - dis.sum(axis=1)
    pathwise = float(np.max(np.abs(gap) / np.maximum(err[:, 0], 1e-14)))
    # M^perp = span of the sections = range(K^{1/2}) = range(K) in these coordinates
    w, V = np.linalg.eigh(K)
    alpha = restricted_min_eig(src.mean_projection(), V[:, w > 1e-10 * w.max()])
    bound = err[0, 0] * (1.0 - p * alpha * lam * (2.0 - lam)) ** np.arange(horizon + 1)
    stderr = err.std(axis=0, ddof=1) / np.sqrt(trials) if trials > 1 else np.zeros(horizon + 1)
    return RkhsDropoutReport(mean_error_sq=err.mean(axis=0), stderr=stderr, bound=bound,
                             alpha=alpha, limit=limit, pathwise_residual=pathwise)
