"""Relaxed Kaczmarz interpolation in an RKHS, noiseless and noisy.

The iterate after ``n`` steps is ``f_n = f_0 + sum_{j<=n} c_j k_{x_j}``; each
coefficient is fixed once written, so a single coefficient vector encodes
the whole path and ``f_n`` is recovered by truncation.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateDiagonal, KappaViolated, KernelMismatch, MissingTruth
from .rkhs import TOL_DIAG, Kernel, RkhsFunction, as_points, compact, gram
from .telescope import Schedule

NOISE_LAWS = ("GaussianReal", "GaussianComplex", "UniformBounded")


@dataclass(frozen=True, eq=False)
class InterpolationProblem:
    kernel: Kernel
    points: np.ndarray
    values: np.ndarray
    schedule: Schedule
    truth: RkhsFunction | None = None

    def __post_init__(self):
        X = as_points(self.points)
        y = np.asarray(self.values).reshape(-1)
        if X.shape[0] != y.shape[0]:
            raise ValueError(f"{X.shape[0]} points but {y.shape[0]} values")
        if len(self.schedule) < X.shape[0]:
            raise ValueError("schedule shorter than the sample sequence")
        if self.truth is not None and not self.truth.kernel.same_as(self.kernel):
            raise KernelMismatch("truth lives in a different RKHS")
        object.__setattr__(self, "points", X)
        object.__setattr__(self, "values", y)

    @classmethod
    def from_truth(cls, kernel: Kernel, points, truth: RkhsFunction, schedule: Schedule):
        X = as_points(points)
        return cls(kernel, X, truth(X), schedule, truth)

    @property
    def n_samples(self) -> int:
        return self.points.shape[0]

    def diagonals(self, horizon: int | None = None) -> np.ndarray:
        X = self.points if horizon is None else self.points[:horizon]
        return np.real(self.kernel.diag(X))


@dataclass(frozen=True)
class NoiseModel:
    sigma: float = 0.0
    law: str = "GaussianReal"
    seed: int = 0

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if self.law not in NOISE_LAWS:
            raise ValueError(f"unknown noise law {self.law!r}; expected one of {NOISE_LAWS}")

    def rng(self, trial: int) -> np.random.Generator:
        return np.random.default_rng([self.seed, trial])

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """Mean-zero draws with ``E|eps|^2 = sigma^2``."""
        if self.law == "GaussianReal":
            return self.sigma * rng.standard_normal(n)
        if self.law == "GaussianComplex":
            z = rng.standard_normal(n) + 1j * rng.standard_normal(n)
            return (self.sigma / np.sqrt(2.0)) * z
        half_width = self.sigma * np.sqrt(3.0)
        return rng.uniform(-half_width, half_width, n)


def _check_diagonals(diag, tol=TOL_DIAG):
    bad = np.nonzero(diag <= tol)[0]
    if bad.size:
        raise DegenerateDiagonal(f"k(x_n, x_n) <= {tol} at sample {int(bad[0])}")


def _kaczmarz_core(K, diag, lambdas, targets, start_vals):
    """Run the relaxed update for every row of ``targets`` at once.

    ``K`` is the sample Gram, ``start_vals[n] = f_0(x_n)``. Each row is
    reduced independently (elementwise product + row sum) so the result for
    one row does not depend on how many rows are processed together.
    Returns the coefficient matrix and the residuals ``y_n - f_{n-1}(x_n)``.
    """
    T, N = targets.shape
    dtype = np.result_type(targets, K, start_vals, float)
    C = np.zeros((T, N), dtype=dtype)
    R = np.zeros((T, N), dtype=dtype)
    for n in range(N):
        fx = start_vals[n] + (C[:, :n] * K[n, :n]).sum(axis=1)
        r = targets[:, n] - fx
        R[:, n] = r
        C[:, n] = lambdas[n] * r / diag[n]
    return C, R


class _ErrorGeometry:
    """Joint Gram over truth anchors, start anchors and samples.

    Gives ``||f* - f_n||^2`` as an explicit quadratic form, independent of
    the residual bookkeeping.
    """

    def __init__(self, kernel, truth, start, X):
        anchors = [truth.anchors, start.anchors, X]
        self.Z = np.vstack([a.reshape(-1, X.shape[1]) for a in anchors])
        self.G = gram(kernel, self.Z).entries
        self.base = np.concatenate([truth.coeffs, -start.coeffs, np.zeros(X.shape[0])])
        self.offset = truth.n_anchors + start.n_anchors

    def error_sq(self, C):
        """``||e_n||^2`` for ``n = 0..N`` and every row of ``C``; shape ``(T, N+1)``.

        Step ``n`` changes one coordinate of ``v``, so ``w = G v`` is updated
        by a single column; every reduction is row-wise, which keeps each
        row's result independent of how many rows are processed together.
        """
        T, N = C.shape
        dtype = np.result_type(self.base, C, self.G)
        V = np.tile(self.base.astype(dtype), (T, 1))
        W = np.tile((self.G @ self.base).astype(dtype), (T, 1))
        out = np.empty((T, N + 1))
        out[:, 0] = np.real(np.sum(np.conj(V) * W, axis=1))
        for n in range(1, N + 1):
            j = self.offset + n - 1
            V[:, j] = -C[:, n - 1]
            W = W + self.G[None, :, j] * V[:, j:j + 1]
            out[:, n] = np.real(np.sum(np.conj(V) * W, axis=1))
        return out


@dataclass(frozen=True, eq=False)
class KaczmarzTrace:
    points: np.ndarray
    residuals: np.ndarray
    diags: np.ndarray
    lambdas: np.ndarray
    dissipated: np.ndarray
    coeffs: np.ndarray
    start: RkhsFunction
    final: RkhsFunction
    truth_norm_sq: float | None = None
    error_sq: np.ndarray | None = None

    @property
    def horizon(self) -> int:
        return self.residuals.shape[0]

    @property
    def error_norms(self):
        return None if self.error_sq is None else np.sqrt(np.clip(self.error_sq, 0, None))

    def iterate(self, n: int) -> RkhsFunction:
        """``f_n`` as an expansion over start anchors and the first ``n`` samples."""
        if not 0 <= n <= self.horizon:
            raise IndexError(f"n={n} outside 0..{self.horizon}")
        if n == 0:
            return self.start
        step = RkhsFunction(self.points[:n], self.coeffs[:n], self.start.kernel)
        return self.start + step if self.start.n_anchors else step

    def energy_balance_residual(self) -> float:
        """Relative gap in ``||f*-f_N||^2 = ||f*||^2 - sum dissipated``."""
        if self.error_sq is None:
            raise MissingTruth("energy balance needs the true interpolant")
        lhs = self.error_sq[-1]
        rhs = self.truth_norm_sq - float(np.sum(self.dissipated))
        return abs(lhs - rhs) / max(self.truth_norm_sq, 1e-14)

    def to_csv(self, fh=None) -> str:
        out = io.StringIO() if fh is None else fh
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["step", "residual_abs", "dissipated", "running_error_sq"])
        for n in range(self.horizon):
            err = "" if self.error_sq is None else format(self.error_sq[n + 1], ".17g")
            w.writerow([n + 1, format(abs(self.residuals[n]), ".17g"),
                        format(self.dissipated[n], ".17g"), err])
        return out.getvalue() if fh is None else ""


def kaczmarz_run(prob: InterpolationProblem, start: RkhsFunction | None = None,
                 horizon: int | None = None) -> KaczmarzTrace:
    N = prob.n_samples if horizon is None else int(horizon)
    if not 0 <= N <= prob.n_samples:
        raise ValueError(f"horizon {N} outside 0..{prob.n_samples}")
    p = prob.points.shape[1]
    if start is None:
        start = RkhsFunction.zero(prob.kernel, p)
    elif not start.kernel.same_as(prob.kernel):
        raise KernelMismatch("start function lives in a different RKHS")
    X = prob.points[:N]
    diag = prob.diagonals(N)
    _check_diagonals(diag)
    lam = prob.schedule.lambdas[:N]
    K = gram(prob.kernel, X).entries if N else np.zeros((0, 0))
    start_vals = start(X) if N else np.zeros(0)
    C, R = _kaczmarz_core(K, diag, lam, prob.values[None, :N], start_vals)
    C, R = C[0], R[0]
    dissipated = lam * (2.0 - lam) * np.abs(R) ** 2 / diag
    final = start
    if N:
        final = compact(start + RkhsFunction(X, C, prob.kernel))
    truth_norm_sq = err = None
    if prob.truth is not None:
        truth_norm_sq = prob.truth.norm_sq()
        err = _ErrorGeometry(prob.kernel, prob.truth, start, X).error_sq(C[None, :])[0]
    return KaczmarzTrace(points=X, residuals=R, diags=diag, lambdas=lam, dissipated=dissipated,
                         coeffs=C, start=start, final=final, truth_norm_sq=truth_norm_sq,
                         error_sq=err)


def residual_series_bound_check(trace: KaczmarzTrace, f_star_norm_sq: float | None = None) -> bool:
    """Whether the weighted squared residuals sum to at most ``||f*||^2``."""
    if trace.error_sq is None:
        raise MissingTruth("bound check needs a trace produced with the truth")
    bound = trace.truth_norm_sq if f_star_norm_sq is None else f_star_norm_sq
    return bool(np.sum(trace.dissipated) <= bound * (1.0 + 1e-8) + 1e-14)


@dataclass(frozen=True, eq=False)
class NoisyRunReport:
    """Monte Carlo summary; arrays indexed by step ``n = 0..N`` or ``1..N``."""

    mean_error_sq: np.ndarray      # (N+1,)
    stderr_error_sq: np.ndarray    # (N+1,)
    dissipated_mean: np.ndarray    # (N,) mean of lambda(2-lambda)||P_n e_{n-1}||^2
    noise_term: np.ndarray         # (N,) mean of lambda^2 |eps|^2 / k
    cross_term_mean: np.ndarray    # (N,) mean of -2 Re<u_n, v_n>
    cross_term_stderr: np.ndarray  # (N,)
    pathwise_residual: float       # max relative error of the per-step expansion
    truth_norm_sq: float
    lambdas: np.ndarray
    trials: int
    error_sq: np.ndarray           # (trials, N+1) raw per-path values
    coeffs: np.ndarray             # (trials, N)

    def decomposition(self) -> np.ndarray:
        """``||f*||^2 - cumsum(dissipated) + cumsum(noise) + cumsum(cross)``."""
        acc = np.cumsum(-self.dissipated_mean + self.noise_term + self.cross_term_mean)
        return np.concatenate([[self.truth_norm_sq], self.truth_norm_sq + acc])


def noisy_kaczmarz_run(prob: InterpolationProblem, noise: NoiseModel, horizon: int | None = None,
                       trials: int = 1) -> NoisyRunReport:
    """Relaxed Kaczmarz on ``y_n + eps_n`` over independent noise streams.

    The clean data ``y_n`` are the problem's sample values (equal to
    ``f*(x_n)`` for a consistent problem). Trial ``t`` draws its noise from
    ``default_rng([noise.seed, t])``, so trials are reproducible individually.
    """
    if prob.truth is None:
        raise MissingTruth("noisy runs need the true interpolant to form the error")
    if trials < 1:
        raise ValueError("trials must be >= 1")
    N = prob.n_samples if horizon is None else int(horizon)
    X = prob.points[:N]
    diag = prob.diagonals(N)
    _check_diagonals(diag)
    lam = prob.schedule.lambdas[:N]
    K = gram(prob.kernel, X).entries
    start = RkhsFunction.zero(prob.kernel, X.shape[1])
    eps = np.stack([noise.sample(noise.rng(t), N) for t in range(trials)])
    targets = prob.values[None, :N] + eps
    C, R = _kaczmarz_core(K, diag, lam, targets, np.zeros(N))

    geom = _ErrorGeometry(prob.kernel, prob.truth, start, X)
    err = geom.error_sq(C)
    truth_norm_sq = prob.truth.norm_sq()

    # pathwise: e_n = u_n - v_n with u_n = (I - lam P_n) e_{n-1}, v_n = lam eps k_x / k
    e_prev_at_x = R - eps                     # e_{n-1}(x_n) = f*(x_n) - f_{n-1}(x_n)
    dis = lam * (2.0 - lam) * np.abs(e_prev_at_x) ** 2 / diag
    u_sq = err[:, :-1] - dis
    v_sq = lam**2 * np.abs(eps) ** 2 / diag
    u_at_x = (1.0 - lam) * e_prev_at_x        # u_n(x_n)
    cross = -2.0 * np.real(lam * eps * np.conj(u_at_x)) / diag
    expanded = u_sq + v_sq + cross
    scale = np.maximum(err[:, :-1], truth_norm_sq) + 1e-14
    pathwise = float(np.max(np.abs(expanded - err[:, 1:]) / scale)) if N else 0.0

    root = np.sqrt(trials)
    return NoisyRunReport(
        mean_error_sq=err.mean(axis=0),
        stderr_error_sq=err.std(axis=0, ddof=1) / root if trials > 1 else np.zeros(N + 1),
        dissipated_mean=dis.mean(axis=0),
        noise_term=v_sq.mean(axis=0),
        cross_term_mean=cross.mean(axis=0),
        cross_term_stderr=cross.std(axis=0, ddof=1) / root if trials > 1 else np.zeros(N),
        pathwise_residual=pathwise,
        truth_norm_sq=truth_norm_sq,
        lambdas=lam,
        trials=trials,
        error_sq=err,
        coeffs=C,
    )


def noise_floor_bound(prob: InterpolationProblem, noise: NoiseModel, kappa: float,
                      horizon: int | None = None) -> float:
    """``||f*||^2 + (sigma^2 / kappa) sum_{n<=N} lambda_n^2``."""
    if prob.truth is None:
        raise MissingTruth("the bound is stated in terms of ||f*||^2")
    if kappa <= 0:
        raise ValueError("kappa must be positive")
    N = prob.n_samples if horizon is None else int(horizon)
    diag = prob.diagonals(N)
    if np.any(diag < kappa):
        i = int(np.argmin(diag))
        raise KappaViolated(f"k(x_{i}, x_{i}) = {diag[i]:.6g} < kappa = {kappa}")
    lam = prob.schedule.lambdas[:N]
    return prob.truth.norm_sq() + noise.sigma**2 / kappa * float(np.sum(lam**2))


def noise_floor_curve(prob: InterpolationProblem, noise: NoiseModel, kappa: float,
                      horizon: int | None = None) -> np.ndarray:
    """The same bound for every ``n = 0..N``."""
    N = prob.n_samples if horizon is None else int(horizon)
    noise_floor_bound(prob, noise, kappa, N)
    lam = prob.schedule.lambdas[:N]
    acc = np.concatenate([[0.0], np.cumsum(lam**2)])
    return prob.truth.norm_sq() + noise.sigma**2 / kappa * acc
