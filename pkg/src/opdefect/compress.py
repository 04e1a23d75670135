"""Greedy prefix-closed refinement of truncated tree kernels, with ridge stability."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import DepthExceeded, EmptyFrontier, NotPSD
from .rkhs import GramMatrix, as_points
from .treesplit import (BlockFeatures, ChannelFamily, FeatureMap, PrefixSet, Word, apply_word,
                        block_features, word_str)


def block_energy(family: ChannelFamily, phi0: FeatureMap, alpha: Word, sample, depth_N: int) -> float:
    """``E(alpha) = sum_j ||D A_alpha Phi_0(x_j)||^2``, the trace of the block Gram."""
    alpha = tuple(alpha)
    if len(alpha) >= depth_N:
        raise DepthExceeded(f"|alpha| = {len(alpha)} is not below N = {depth_N}")
    V = phi0(sample)
    W = np.stack([family.defect @ apply_word(family.channels, alpha, v) for v in V])
    return float(np.sum(np.abs(W) ** 2))


@dataclass(frozen=True)
class GreedyRecord:
    chosen: Word
    energy: float
    trace_gap_after: float


@dataclass(frozen=True, eq=False)
class GreedyState:
    S: PrefixSet
    d: int
    energies: dict
    trace_K0: float
    trace_gap: float
    history: tuple = ()
    blocks: BlockFeatures | None = None

    @property
    def depth_N(self) -> int:
        return self.S.depth_N

    @property
    def frontier(self) -> frozenset:
        return self.S.frontier(self.d)

    def gram(self, nodes=None) -> np.ndarray:
        """Materialize ``K_S = sum_{alpha in S} K_alpha`` (or over ``nodes``)."""
        if self.blocks is None:
            raise ValueError("state was built without block features")
        nodes = self.S if nodes is None else nodes
        m = self.blocks.base.shape[0]
        K = np.zeros((m, m), dtype=np.result_type(self.blocks.base, float))
        for w in nodes:
            K = K + self.blocks.gram_block(w)
        return K

    def gram0(self) -> np.ndarray:
        F = self.blocks.base
        return np.conj(F) @ F.T

    def snapshot_sets(self) -> list[PrefixSet]:
        """``S_0, S_1, ..., S_t`` reconstructed from the history."""
        nodes = set(self.S.nodes) - {r.chosen for r in self.history}
        sets = [PrefixSet(frozenset(nodes), self.depth_N)]
        for r in self.history:
            nodes.add(r.chosen)
            sets.append(PrefixSet(frozenset(nodes), self.depth_N))
        return sets


def init_state(family: ChannelFamily, phi0: FeatureMap, sample, depth_N: int,
               seed_set: PrefixSet | None = None) -> GreedyState:
    S = PrefixSet.root(depth_N) if seed_set is None else seed_set
    if S.depth_N != depth_N:
        raise ValueError("seed set was built for a different depth")
    blocks = block_features(family, phi0(as_points(sample)), depth_N)
    energies = {w: blocks.block_energy(w) for w in blocks.defect_blocks}
    tr0 = float(np.sum(np.abs(blocks.base) ** 2))
    gap = tr0 - sum(energies[w] for w in S)
    return GreedyState(S=S, d=family.d, energies=energies, trace_K0=tr0, trace_gap=gap,
                       blocks=blocks)


def greedy_step(state: GreedyState) -> GreedyState:
    """Add the frontier node of largest energy; ties go to the lexicographically smallest word."""
    front = state.frontier
    if not front:
        raise EmptyFrontier("prefix set already contains every node above depth N")
    chosen = min(front, key=lambda w: (-state.energies[w], w))
    e = state.energies[chosen]
    gap = state.trace_gap - e
    rec = GreedyRecord(chosen=chosen, energy=e, trace_gap_after=gap)
    return replace(state, S=state.S.add(chosen), trace_gap=gap, history=state.history + (rec,))


def run_greedy(family: ChannelFamily, phi0: FeatureMap, sample, depth_N: int,
               budget: int | None = None, tolerance: float | None = None,
               seed_set: PrefixSet | None = None) -> GreedyState:
    """Greedy refinement from ``S_0`` until the budget, an empty frontier, or trace gap <= tolerance."""
    if budget is not None and budget < 0:
        raise ValueError("budget must be >= 0")
    if tolerance is not None and tolerance < 0:
        raise ValueError("tolerance must be >= 0")
    state = init_state(family, phi0, sample, depth_N, seed_set)
    while state.frontier:
        if budget is not None and len(state.history) >= budget:
            break
        if tolerance is not None and state.trace_gap <= tolerance:
            break
        state = greedy_step(state)
    return state


@dataclass(frozen=True)
class RidgeProblem:
    labels: np.ndarray
    reg: float

    def __post_init__(self):
        if not self.reg > 0:
            raise ValueError("ridge regularization must be positive")
        object.__setattr__(self, "labels", np.asarray(self.labels).reshape(-1))


def _entries(K):
    return K.entries if isinstance(K, GramMatrix) else np.asarray(K)


def _check_psd(K, what="K"):
    tol = 1e-9 * max(float(np.real(np.trace(K))), 1.0)
    lo = float(np.linalg.eigvalsh(0.5 * (K + np.conj(K).T))[0]) if K.size else 0.0
    if lo < -tol:
        raise NotPSD(f"{what} has eigenvalue {lo:.3e}")


def ridge_coefficients(K, prob: RidgeProblem) -> np.ndarray:
    """Solve ``(K + lambda I) a = y`` by a Cholesky factorization."""
    K = _entries(K)
    _check_psd(K)
    A = K + prob.reg * np.eye(K.shape[0])
    return cho_solve(cho_factor(A), prob.labels)


def ridge_predict(K, prob: RidgeProblem) -> np.ndarray:
    """``K (K + lambda I)^{-1} y``."""
    return _entries(K) @ ridge_coefficients(K, prob)


def ridge_predict_resolvent(K, prob: RidgeProblem) -> np.ndarray:
    """Same predictor in resolvent form, ``y - lambda (K + lambda I)^{-1} y``."""
    return prob.labels - prob.reg * ridge_coefficients(K, prob)


@dataclass(frozen=True)
class RidgeStability:
    lhs: float
    operator_bound: float
    trace_bound: float

    @property
    def passed(self) -> bool:
        return (self.lhs <= self.operator_bound * (1 + 1e-8) + 1e-15
                and self.operator_bound <= self.trace_bound * (1 + 1e-8) + 1e-15)


def ridge_stability_check(K0, KS, prob: RidgeProblem) -> RidgeStability:
    K0, KS = _entries(K0), _entries(KS)
    gap = K0 - KS
    _check_psd(gap, "K0 - KS")
    lhs = float(np.linalg.norm(ridge_predict(K0, prob) - ridge_predict(KS, prob)))
    ny = float(np.linalg.norm(prob.labels))
    op = float(np.linalg.norm(gap, 2)) * ny / prob.reg
    tr = float(np.real(np.trace(gap))) * ny / prob.reg
    return RidgeStability(lhs=lhs, operator_bound=op, trace_bound=tr)


def stopping_rule(state: GreedyState, eps: float, prob: RidgeProblem) -> bool:
    """Fires once the discarded sample energy is at most ``eps * lambda``."""
    return state.trace_gap <= eps * prob.reg


def history_csv(state: GreedyState, prob: RidgeProblem | None = None, fh=None) -> str:
    """Rows ``t, word, energy, trace_gap, ridge_lhs, ridge_bound`` (row 0 is ``S_0``)."""
    out = io.StringIO() if fh is None else fh
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["t", "word", "energy", "trace_gap", "ridge_lhs", "ridge_bound"])
    sets = state.snapshot_sets()
    K0 = state.gram0() if prob is not None else None
    gap0 = state.trace_gap + sum(r.energy for r in state.history)
    rows = [(0, "", None, gap0)] + [(t, word_str(r.chosen), r.energy, r.trace_gap_after)
                                   for t, r in enumerate(state.history, start=1)]
    for (t, word, energy, gap), S in zip(rows, sets):
        lhs = bound = ""
        if prob is not None:
            st = ridge_stability_check(K0, state.gram(S), prob)
            lhs, bound = format(st.lhs, ".17g"), format(st.trace_bound, ".17g")
        w.writerow([t, word, "" if energy is None else format(energy, ".17g"),
                    format(gap, ".17g"), lhs, bound])
    return out.getvalue() if fh is None else ""
