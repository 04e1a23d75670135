"""Contraction defects, relaxed projection products and their energy ledgers."""

from __future__ import annotations

import csv
import enum
import io
import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import DimensionMismatch, LambdaOutOfRange, NotContraction
from .hilbert import Projection, adjoint, norm_sq, psd_sqrt, spectral_norm

TOL_CONTRACT = 1e-8
ENERGY_FLOOR = 1e-14


@dataclass(frozen=True, eq=False)
class ContractionStep:
    """A contraction ``A`` with its defect ``D_A = (I - A*A)^{1/2}``.

    Relaxed steps ``A = I - lambda P`` keep ``lambda_`` and ``proj`` so the
    dissipated energy can be written as ``lambda(2 - lambda)||P y||^2``.
    """

    A: np.ndarray
    defect: np.ndarray
    lambda_: float | None = None
    proj: Projection | None = None

    @property
    def dim(self) -> int:
        return self.A.shape[0]

    @property
    def defect_sq(self) -> np.ndarray:
        if self.proj is not None:
            return self.lambda_ * (2.0 - self.lambda_) * self.proj.op
        return adjoint(self.defect) @ self.defect

    def dissipated(self, y) -> float:
        if self.proj is not None:
            return self.lambda_ * (2.0 - self.lambda_) * norm_sq(self.proj.op @ y)
        return norm_sq(self.defect @ y)


def defect_of(A, tol_contract: float = TOL_CONTRACT) -> ContractionStep:
    A = np.asarray(A)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise DimensionMismatch(f"operator must be square, got {A.shape}")
    nrm = spectral_norm(A)
    if nrm > 1.0 + tol_contract:
        raise NotContraction(f"||A|| estimated at {nrm:.12g} > 1")
    eye = np.eye(A.shape[0], dtype=A.dtype)
    D = psd_sqrt(eye - adjoint(A) @ A)
    return ContractionStep(A=A, defect=D)


def relaxed_step(P: Projection, lambda_: float) -> ContractionStep:
    """``A = I - lambda P`` with the closed-form defect ``sqrt(lambda(2-lambda)) P``."""
    lam = float(lambda_)
    if not 0.0 < lam < 2.0:
        raise LambdaOutOfRange(f"relaxation {lam} outside (0, 2)")
    op = P.op
    A = np.eye(P.dim, dtype=op.dtype) - lam * op
    D = np.sqrt(lam * (2.0 - lam)) * op
    return ContractionStep(A=A, defect=D, lambda_=lam, proj=P)


@dataclass(frozen=True)
class LedgerStep:
    step_index: int
    dissipated: float
    running_energy: float


@dataclass(frozen=True)
class EnergyLedger:
    initial_energy: float
    steps: tuple[LedgerStep, ...] = ()

    @property
    def dissipated(self) -> np.ndarray:
        return np.array([s.dissipated for s in self.steps])

    @property
    def running_energy(self) -> np.ndarray:
        return np.array([s.running_energy for s in self.steps])

    @property
    def final_energy(self) -> float:
        return self.steps[-1].running_energy if self.steps else self.initial_energy

    def balance_residual(self) -> float:
        """``|initial - final - sum(dissipated)|`` relative to the initial energy."""
        total = float(np.sum(self.dissipated)) if self.steps else 0.0
        gap = abs(self.initial_energy - self.final_energy - total)
        return gap / max(self.initial_energy, ENERGY_FLOOR)

    def is_monotone(self, rtol: float = 1e-12) -> bool:
        levels = np.concatenate([[self.initial_energy], self.running_energy])
        slack = rtol * max(self.initial_energy, ENERGY_FLOOR)
        return bool(np.all(np.diff(levels) <= slack))

    def to_csv(self, fh=None) -> str:
        out = io.StringIO() if fh is None else fh
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["step", "dissipated", "running_energy"])
        w.writerow([0, _fmt(0.0), _fmt(self.initial_energy)])
        for s in self.steps:
            w.writerow([s.step_index, _fmt(s.dissipated), _fmt(s.running_energy)])
        return out.getvalue() if fh is None else ""

    def to_json(self) -> str:
        payload = {
            "initial_energy": self.initial_energy,
            "steps": [
                {"step": s.step_index, "dissipated": s.dissipated, "running_energy": s.running_energy}
                for s in self.steps
            ],
        }
        return json.dumps(payload)

    @classmethod
    def from_json(cls, text: str) -> "EnergyLedger":
        data = json.loads(text)
        steps = tuple(LedgerStep(d["step"], d["dissipated"], d["running_energy"]) for d in data["steps"])
        return cls(initial_energy=data["initial_energy"], steps=steps)


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def iterate_product(steps: Sequence[ContractionStep], x) -> list[np.ndarray]:
    """All partial products ``[T_0 x, T_1 x, ..., T_N x]``."""
    x = np.asarray(x)
    path = [x]
    y = x
    for n, st in enumerate(steps, start=1):
        if st.dim != x.shape[0]:
            raise DimensionMismatch(f"step {n} has dim {st.dim}, vector has {x.shape[0]}")
        y = st.A @ y
        path.append(y)
    return path


def run_product(steps: Sequence[ContractionStep], x) -> tuple[np.ndarray, EnergyLedger]:
    x = np.asarray(x)
    y = x
    records = []
    for n, st in enumerate(steps, start=1):
        if st.dim != x.shape[0]:
            raise DimensionMismatch(f"step {n} has dim {st.dim}, vector has {x.shape[0]}")
        d = st.dissipated(y)
        y = st.A @ y
        records.append(LedgerStep(n, d, norm_sq(y)))
    return y, EnergyLedger(initial_energy=norm_sq(x), steps=tuple(records))


def product_operator(steps: Sequence[ContractionStep], dim: int | None = None) -> np.ndarray:
    if not steps:
        if dim is None:
            raise ValueError("dim required for an empty product")
        return np.eye(dim)
    T = np.eye(steps[0].dim, dtype=np.result_type(*[s.A for s in steps]))
    for st in steps:
        T = st.A @ T
    return T


def telescoping_residual(steps: Sequence[ContractionStep]) -> float:
    """Spectral norm of ``(I - T_N^* T_N) - sum T_{n-1}^* D_n^2 T_{n-1}``."""
    dim = steps[0].dim
    dtype = np.result_type(*[s.A for s in steps])
    T = np.eye(dim, dtype=dtype)
    acc = np.zeros((dim, dim), dtype=dtype)
    for st in steps:
        acc = acc + adjoint(T) @ st.defect_sq @ T
        T = st.A @ T
    lhs = np.eye(dim) - adjoint(T) @ T
    return float(np.linalg.norm(lhs - acc, 2))


def q_normalization_residual(steps: Sequence[ContractionStep]) -> float:
    """Same identity written with ``Q_n = sqrt(lambda_n(2-lambda_n)) P_n T_{n-1}``."""
    dim = steps[0].dim
    dtype = np.result_type(*[s.A for s in steps])
    T = np.eye(dim, dtype=dtype)
    acc = np.zeros((dim, dim), dtype=dtype)
    for st in steps:
        if st.proj is None:
            raise ValueError("Q-normalization needs relaxed projection steps")
        Q = np.sqrt(st.lambda_ * (2.0 - st.lambda_)) * (st.proj.op @ T)
        acc = acc + adjoint(Q) @ Q
        T = st.A @ T
    return float(np.linalg.norm(np.eye(dim) - adjoint(T) @ T - acc, 2))


@dataclass(frozen=True)
class Schedule:
    lambdas: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        lam = np.asarray(self.lambdas, dtype=float).reshape(-1)
        bad = (lam <= 0.0) | (lam >= 2.0)
        if np.any(bad):
            i = int(np.argmax(bad))
            raise LambdaOutOfRange(f"lambda[{i}] = {lam[i]} outside (0, 2)")
        object.__setattr__(self, "lambdas", lam)

    def __len__(self):
        return self.lambdas.shape[0]

    def __getitem__(self, i):
        return self.lambdas[i]

    def __iter__(self):
        return iter(self.lambdas)

    def head(self, n: int) -> "Schedule":
        if n > len(self):
            raise ValueError(f"schedule has {len(self)} entries, {n} requested")
        return Schedule(self.lambdas[:n])

    @classmethod
    def constant(cls, lam: float, n: int) -> "Schedule":
        return cls(np.full(n, float(lam)))

    @classmethod
    def one_over_n(cls, n: int, scale: float = 1.0) -> "Schedule":
        return cls(scale / np.arange(1, n + 1))

    @classmethod
    def one_over_n_sq(cls, n: int, scale: float = 1.0) -> "Schedule":
        return cls(scale / np.arange(1, n + 1) ** 2)

    @classmethod
    def make(cls, kind: str, n: int, value: float = 1.0, values=None) -> "Schedule":
        if kind == "constant":
            return cls.constant(value, n)
        if kind == "one_over_n":
            return cls.one_over_n(n, value)
        if kind == "one_over_n_sq":
            return cls.one_over_n_sq(n, value)
        if kind == "custom_list":
            if values is None:
                raise ValueError("custom_list schedule needs explicit values")
            vals = np.asarray(values, dtype=float)
            if vals.shape[0] < n:
                vals = np.resize(vals, n)  # cycle a short list
            return cls(vals[:n])
        raise ValueError(f"unknown schedule kind {kind!r}")


class Verdict(enum.Enum):
    SufficientIfSummable = "SufficientIfSummable"
    Inconclusive = "Inconclusive"


@dataclass(frozen=True)
class SummabilityReport:
    partial_sum: float
    verdict: Verdict
    tail_tag: str | None = None


def summability_criterion(sched: Schedule, horizon: int, tail_tag: str | None = None) -> SummabilityReport:
    """Partial sum of ``lambda_n / (2 - lambda_n)`` up to ``horizon``.

    Finite data cannot prove convergence of a series, so the verdict is
    only ``SufficientIfSummable`` when the caller vouches for the tail with a
    closed-form tag (e.g. ``"p-series p=2"``). Divergence is never claimed.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    lam = sched.lambdas[:horizon]
    s = float(np.sum(lam / (2.0 - lam)))
    verdict = Verdict.SufficientIfSummable if tail_tag else Verdict.Inconclusive
    return SummabilityReport(partial_sum=s, verdict=verdict, tail_tag=tail_tag)


@dataclass(frozen=True)
class EffectivenessReport:
    cauchy_tail: np.ndarray
    start_index: int
    eps: float

    @property
    def effective_numerically(self) -> bool:
        return bool(np.all(self.cauchy_tail < self.eps))


def step_differences(steps: Sequence[ContractionStep], x) -> np.ndarray:
    path = iterate_product(steps, x)
    return np.array([np.linalg.norm(path[n] - path[n - 1]) for n in range(1, len(path))])


def effectiveness_diagnostic(steps: Sequence[ContractionStep], probes: Iterable, eps: float,
                             start: int | None = None) -> EffectivenessReport:
    """Cauchy-tail surrogate for strong convergence of the products.

    For each probe sums ``||T_n x - T_{n-1} x||`` over ``n > start``
    (default: the second half of the available horizon).
    """
    probes = list(probes)
    if not steps or not probes:
        raise ValueError("need at least one step and one probe")
    n0 = len(steps) // 2 if start is None else start
    tails = np.array([step_differences(steps, x)[n0:].sum() for x in probes])
    return EffectivenessReport(cauchy_tail=tails, start_index=n0, eps=eps)
