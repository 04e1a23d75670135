"""Greedy kernel PCA: dictionary selection, dictionary-Gram eigenanalysis, deflation runs."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

from .errors import DegenerateDiagonal, EmptyDictionary, KappaViolated, PTooLarge
from .interpolate import (InterpolationProblem, NoiseModel, _ErrorGeometry, _check_diagonals,
                          _kaczmarz_core, noisy_kaczmarz_run)
from .rkhs import TOL_DIAG, Kernel, RkhsFunction, as_points, gram
from .telescope import (EnergyLedger, LedgerStep, Schedule, SummabilityReport,
                        summability_criterion)


@dataclass(frozen=True, eq=False)
class Dictionary:
    """Admitted points ``d_1..d_l`` with ``G_ij = k(d_i, d_j)`` and ``L L^H = G``."""

    kernel: Kernel
    points: np.ndarray
    gram: np.ndarray
    chol: np.ndarray
    eps_admit: float
    indices: tuple = ()

    @classmethod
    def empty(cls, kernel: Kernel, p: int, eps_admit: float) -> "Dictionary":
        z = np.zeros((0, 0))
        return cls(kernel, np.zeros((0, p)), z, z, eps_admit)

    @property
    def size(self) -> int:
        return self.points.shape[0]

    def _solve(self, kappa):
        return solve_triangular(self.chol, kappa, lower=True)

    def admit(self, x, index: int | None = None) -> "Dictionary":
        """Rank-one extension of the factor; the caller decides whether ``x`` clears ``eps``."""
        X = as_points(x)
        kxx = float(np.real(self.kernel.diag(X)[0]))
        if self.size == 0:
            G = np.array([[kxx]])
            L = np.array([[np.sqrt(kxx)]])
        else:
            kappa = self.kernel.matrix(self.points, X)[:, 0]
            w = self._solve(kappa)
            delta = max(kxx - float(np.real(np.vdot(w, w))), 0.0)
            l = self.size
            dtype = np.result_type(self.chol, w)
            L = np.zeros((l + 1, l + 1), dtype=dtype)
            L[:l, :l] = self.chol
            L[l, :l] = np.conj(w)
            L[l, l] = np.sqrt(delta)
            G = np.zeros((l + 1, l + 1), dtype=np.result_type(self.gram, kappa))
            G[:l, :l] = self.gram
            G[:l, l] = kappa
            G[l, :l] = np.conj(kappa)
            G[l, l] = kxx
        idx = self.indices + ((self.size if index is None else index),)
        return Dictionary(self.kernel, np.vstack([self.points, X]), G, L, self.eps_admit, idx)


def residual_delta(dic: Dictionary, x) -> float:
    """Squared feature-space distance from ``k_x`` to the span of the dictionary sections."""
    X = as_points(x)
    kxx = float(np.real(dic.kernel.diag(X)[0]))
    if dic.size == 0:
        return kxx
    w = dic._solve(dic.kernel.matrix(dic.points, X)[:, 0])
    return kxx - float(np.real(np.vdot(w, w)))


@dataclass(frozen=True)
class SelectionRecord:
    index: int
    delta: float
    admitted: bool


def greedy_select_log(kernel: Kernel, training, eps_admit: float):
    """Single ordered pass; returns the dictionary and one record per candidate."""
    if not eps_admit > 0:
        raise ValueError("eps_admit must be positive")
    X = as_points(training)
    dic = Dictionary.empty(kernel, X.shape[1], eps_admit)
    log = []
    for i, x in enumerate(X):
        delta = residual_delta(dic, x)
        ok = delta > eps_admit
        if ok:
            dic = dic.admit(x, index=i)
        log.append(SelectionRecord(i, delta, ok))
    return dic, tuple(log)


def greedy_select(kernel: Kernel, training, eps_admit: float) -> Dictionary:
    return greedy_select_log(kernel, training, eps_admit)[0]


@dataclass(frozen=True, eq=False)
class KpcaModel:
    dictionary: Dictionary
    eigvals: np.ndarray
    eigvecs: np.ndarray

    @property
    def num_components(self) -> int:
        return self.eigvals.shape[0]


def components_for_fraction(eigvals, theta: float) -> int:
    """Smallest ``p`` whose leading eigenvalues carry at least ``theta`` of the total."""
    if not 0 < theta <= 1:
        raise ValueError("theta must lie in (0, 1]")
    lam = np.clip(np.sort(np.asarray(eigvals))[::-1], 0, None)
    total = lam.sum()
    if total <= 0:
        return 1
    cum = np.cumsum(lam)
    return int(min(np.searchsorted(cum, theta * total * (1 - 1e-12)) + 1, lam.shape[0]))


def fit_kpca(dic: Dictionary, p: int | None = None, theta: float | None = None) -> KpcaModel:
    """Top-``p`` eigenpairs of the dictionary Gram (``p`` defaults to ``|dict|``)."""
    if dic.size == 0:
        raise EmptyDictionary("no points were admitted to the dictionary")
    w, V = np.linalg.eigh(0.5 * (dic.gram + np.conj(dic.gram).T))
    w, V = w[::-1], V[:, ::-1]
    if p is None:
        p = dic.size if theta is None else components_for_fraction(w, theta)
    if p < 1:
        raise ValueError("p must be >= 1")
    if p > dic.size:
        raise PTooLarge(f"p = {p} exceeds dictionary size {dic.size}")
    return KpcaModel(dic, np.clip(w[:p], 0.0, None), V[:, :p])


def embed(model: KpcaModel, x) -> np.ndarray:
    """``f_j(x) = sum_i (v_j)_i k(d_i, x) / sqrt(k(x, x))``; one row per point."""
    X = as_points(x)
    dic = model.dictionary
    kxx = np.real(dic.kernel.diag(X))
    if np.any(kxx <= TOL_DIAG):
        raise DegenerateDiagonal(f"k(x, x) = {float(kxx.min()):.3e}")
    Kx = dic.kernel.matrix(dic.points, X)        # (l, m), entries k(d_i, x)
    F = (model.eigvecs.T @ Kx) / np.sqrt(kxx)[None, :]
    F = F.T
    return F[0] if np.ndim(x) == 1 else F


def embeddings_csv(model: KpcaModel, X, fh=None) -> str:
    out = io.StringIO() if fh is None else fh
    w = csv.writer(out, lineterminator="\n")
    F = embed(model, as_points(X))
    w.writerow([f"f{j + 1}" for j in range(F.shape[1])])
    for row in F:
        w.writerow([format(v, ".17g") for v in row])
    return out.getvalue() if fh is None else ""


@dataclass(frozen=True, eq=False)
class DeflationRun:
    """``T_n f = f - sum_{j<=n} c_j k_{x_j}`` for ``T_n = (I - lam_n P_n)...(I - lam_1 P_1)``."""

    f: RkhsFunction
    points: np.ndarray
    lambdas: np.ndarray
    diags: np.ndarray
    coeffs: np.ndarray
    evals: np.ndarray            # (T_{n-1} f)(x_n)
    eval_energy: np.ndarray      # |(T_{n-1} f)(x_n)|^2 / k(x_n, x_n)
    proj_norm_sq: np.ndarray     # ||P_n T_{n-1} f||^2 from the Gram quadratic form
    norm_sq: np.ndarray          # ||T_n f||^2, n = 0..N
    step_diff_sq: np.ndarray     # ||T_{n-1} f - T_n f||^2
    ledger: EnergyLedger = field(repr=False, default=None)

    @property
    def horizon(self) -> int:
        return self.coeffs.shape[0]

    def iterate(self, n: int) -> RkhsFunction:
        if not 0 <= n <= self.horizon:
            raise IndexError(f"n={n} outside 0..{self.horizon}")
        if n == 0:
            return self.f
        return self.f - RkhsFunction(self.points[:n], self.coeffs[:n], self.f.kernel)

    def decomposition_residuals(self) -> np.ndarray:
        """``|‖f‖² - ‖T_n f‖² - sum_{j<=n} dissipated_j|`` relative, for every ``n``."""
        dis = np.concatenate([[0.0], np.cumsum(self.lambdas * (2 - self.lambdas) * self.eval_energy)])
        scale = max(self.norm_sq[0], 1e-14)
        return np.abs(self.norm_sq[0] - self.norm_sq - dis) / scale

    def form_gap(self) -> float:
        """Largest gap between the two per-step energy forms."""
        if self.horizon == 0:
            return 0.0
        return float(np.max(np.abs(self.eval_energy - self.proj_norm_sq)))

    def step_bound_slack(self) -> np.ndarray:
        """``lam/(2-lam) (‖T_{n-1}f‖² - ‖T_nf‖²) - ‖T_{n-1}f - T_nf‖²``; nonnegative up to rounding."""
        lam = self.lambdas
        drop = self.norm_sq[:-1] - self.norm_sq[1:]
        return lam / (2 - lam) * drop - self.step_diff_sq

    def post_step_values(self) -> np.ndarray:
        """``(T_n f)(x_n)`` evaluated from the expansion after each step."""
        return np.array([self.iterate(n + 1)(self.points[n]) for n in range(self.horizon)])

    def to_csv(self, fh=None) -> str:
        out = io.StringIO() if fh is None else fh
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["step", "lambda", "eval_energy", "proj_norm_sq", "norm_sq", "step_diff_sq"])
        w.writerow([0, "", "", "", format(self.norm_sq[0], ".17g"), ""])
        for n in range(self.horizon):
            w.writerow([n + 1] + [format(float(v), ".17g") for v in
                                  (self.lambdas[n], self.eval_energy[n], self.proj_norm_sq[n],
                                   self.norm_sq[n + 1], self.step_diff_sq[n])])
        return out.getvalue() if fh is None else ""


def deflation_run(kernel: Kernel, points, schedule: Schedule, f: RkhsFunction) -> DeflationRun:
    X = as_points(points)
    N = X.shape[0]
    if len(schedule) < N:
        raise ValueError("schedule shorter than the point sequence")
    diag = np.real(kernel.diag(X))
    _check_diagonals(diag)
    lam = schedule.lambdas[:N]
    K = gram(kernel, X).entries
    fx = f(X) if f.n_anchors else np.zeros(N)
    # T_n f is f minus the Kaczmarz iterate interpolating f from zero
    C, R = _kaczmarz_core(K, diag, lam, fx[None, :], np.zeros(N, dtype=np.result_type(fx, float)))
    C, R = C[0], R[0]
    zero = RkhsFunction.zero(kernel, X.shape[1])
    norm_sq = _ErrorGeometry(kernel, f, zero, X).error_sq(C[None, :])[0]
    eval_energy = np.abs(R) ** 2 / diag
    # P_n T_{n-1} f = (R_n / k_nn) k_{x_n}; its norm from the Gram diagonal
    a = R / diag
    proj_norm_sq = np.real(np.conj(a) * np.diag(K) * a)
    step_diff_sq = np.real(np.conj(C) * np.diag(K) * C)
    dis = lam * (2 - lam) * eval_energy
    ledger = EnergyLedger(float(norm_sq[0]), tuple(
        LedgerStep(n + 1, float(dis[n]), float(norm_sq[n + 1])) for n in range(N)))
    return DeflationRun(f=f, points=X, lambdas=lam, diags=diag, coeffs=C, evals=R,
                        eval_energy=eval_energy, proj_norm_sq=proj_norm_sq, norm_sq=norm_sq,
                        step_diff_sq=step_diff_sq, ledger=ledger)


@dataclass(frozen=True, eq=False)
class ConvergenceNoiseReport:
    summability: SummabilityReport
    deflation: DeflationRun
    cauchy_tail: float
    tail_start: int
    monotone: bool
    step_bound_ok: bool
    kappa: float
    sigma: float
    trials: int
    mean_error_sq: np.ndarray | None    # (N+1,)
    stderr_error_sq: np.ndarray | None
    bound_ledger: np.ndarray             # ‖T_n f‖² + sigma²/kappa sum lam²
    bound_norm: np.ndarray               # ‖f‖² + sigma²/kappa sum lam²
    pathwise_residual: float

    @property
    def noise_bound_ok(self) -> bool:
        if self.mean_error_sq is None:
            return True
        slack = 3 * self.stderr_error_sq + 1e-12 * max(self.bound_norm[0], 1.0)
        return bool(np.all(self.mean_error_sq <= self.bound_ledger + slack))

    @property
    def passed(self) -> bool:
        return self.monotone and self.step_bound_ok and self.noise_bound_ok


def convergence_and_noise_report(kernel: Kernel, truth: RkhsFunction, points, schedule: Schedule,
                                 noise: NoiseModel, horizon: int, trials: int,
                                 kappa: float | None = None, tail_tag: str | None = None,
                                 tail_start: int | None = None) -> ConvergenceNoiseReport:
    X = as_points(points)
    if not 1 <= horizon <= X.shape[0]:
        raise ValueError(f"horizon {horizon} outside 1..{X.shape[0]}")
    X = X[:horizon]
    summ = summability_criterion(schedule, horizon, tail_tag)
    run = deflation_run(kernel, X, schedule, truth)
    diag = run.diags
    kappa = float(diag.min()) if kappa is None else float(kappa)
    if kappa <= 0:
        raise ValueError("kappa must be positive")
    if np.any(diag < kappa * (1 - 1e-12)):
        raise KappaViolated(f"min k(x_n, x_n) = {float(diag.min()):.6g} < kappa = {kappa}")
    n0 = horizon // 2 if tail_start is None else tail_start
    tail = float(np.sum(np.sqrt(np.clip(run.step_diff_sq[n0:], 0, None))))
    levels = run.norm_sq
    monotone = bool(np.all(np.diff(levels) <= 1e-12 * max(levels[0], 1e-14)))
    step_ok = bool(np.all(run.step_bound_slack() >= -1e-10))

    acc = np.concatenate([[0.0], np.cumsum(run.lambdas ** 2)]) * noise.sigma ** 2 / kappa
    bound_ledger = run.norm_sq + acc
    bound_norm = run.norm_sq[0] + acc
    mean = stderr = None
    pathwise = 0.0
    if noise.sigma > 0:
        prob = InterpolationProblem.from_truth(kernel, X, truth, schedule)
        rep = noisy_kaczmarz_run(prob, noise, horizon, trials)
        mean, stderr, pathwise = rep.mean_error_sq, rep.stderr_error_sq, rep.pathwise_residual
    return ConvergenceNoiseReport(summability=summ, deflation=run, cauchy_tail=tail, tail_start=n0,
                                  monotone=monotone, step_bound_ok=step_ok, kappa=kappa,
                                  sigma=noise.sigma, trials=trials, mean_error_sq=mean,
                                  stderr_error_sq=stderr, bound_ledger=bound_ledger,
                                  bound_norm=bound_norm, pathwise_residual=pathwise)
