"""Multichannel splitting along a rooted d-ary tree and the induced kernel truncations.

Word convention: a word is a tuple ``(i_1, ..., i_n)`` of letters in
``1..d`` listed in the order they are applied, and
``A_word = A_{i_n} ... A_{i_1}``; so ``A_word x`` applies ``A_{i_1}`` first.
The empty tuple is the root and ``A_() = I``.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from .errors import BudgetExceeded, NotColumnContraction, NotPrefixClosed
from .hilbert import adjoint, psd_sqrt
from .rkhs import GramMatrix, Kernel, as_points, gram

MAX_NODES = 2**20
TOL_COLUMN = 1e-9

Word = tuple


def word_str(word: Word) -> str:
    if any(i > 9 for i in word):
        return ".".join(map(str, word))
    return "".join(map(str, word))


def parse_word(text: str) -> Word:
    text = text.strip()
    if not text:
        return ()
    if "." in text:
        return tuple(int(t) for t in text.split("."))
    return tuple(int(ch) for ch in text)


def apply_word(channels, word: Word, x):
    y = np.asarray(x)
    for i in word:
        y = channels[i - 1] @ y
    return y


def words_at_depth(d: int, n: int) -> list[Word]:
    words: list[Word] = [()]
    for _ in range(n):
        words = [w + (i,) for w in words for i in range(1, d + 1)]
    return words


def _guard(d: int, depth: int):
    if depth < 0:
        raise ValueError("depth must be >= 0")
    if d**depth > MAX_NODES:
        raise BudgetExceeded(f"{d}^{depth} leaves exceeds the budget of {MAX_NODES}")


@dataclass(frozen=True, eq=False)
class ChannelFamily:
    channels: np.ndarray
    defect: np.ndarray
    contraction_bound: float | None = None

    @property
    def d(self) -> int:
        return self.channels.shape[0]

    @property
    def dim(self) -> int:
        return self.channels.shape[1]

    def gram_sum(self) -> np.ndarray:
        return sum(adjoint(A) @ A for A in self.channels)

    def splitting_residual(self, x) -> float:
        """``| ||x||^2 - sum ||A_i x||^2 - ||D x||^2 |``."""
        x = np.asarray(x)
        parts = sum(np.linalg.norm(A @ x) ** 2 for A in self.channels)
        return abs(np.linalg.norm(x) ** 2 - parts - np.linalg.norm(self.defect @ x) ** 2)


def make_family(channels, contraction_bound: float | None = None) -> ChannelFamily:
    mats = np.asarray(channels)
    if mats.ndim == 2:
        mats = mats[None]
    if mats.ndim != 3 or mats.shape[1] != mats.shape[2]:
        raise ValueError(f"channels must be a (d, n, n) stack, got {mats.shape}")
    S = sum(adjoint(A) @ A for A in mats)
    S = 0.5 * (S + adjoint(S))
    top = float(np.linalg.eigvalsh(S)[-1])
    if top > 1.0 + TOL_COLUMN:
        raise NotColumnContraction(f"largest eigenvalue of sum A_i*A_i is {top:.12g} > 1")
    if contraction_bound is not None and top > contraction_bound + TOL_COLUMN:
        raise NotColumnContraction(f"sum A_i*A_i has eigenvalue {top:.12g} > c = {contraction_bound}")
    eye = np.eye(mats.shape[1])
    D = psd_sqrt(eye - S, tol_neg=TOL_COLUMN)
    return ChannelFamily(channels=mats, defect=D, contraction_bound=contraction_bound)


def rotation(theta: float, dim: int) -> np.ndarray:
    """Givens rotations by ``theta`` on coordinate pairs (0,1), (2,3), ..."""
    R = np.eye(dim)
    c, s = np.cos(theta), np.sin(theta)
    for k in range(0, dim - 1, 2):
        R[k, k], R[k, k + 1], R[k + 1, k], R[k + 1, k + 1] = c, -s, s, c
    return R


def scaled_rotations(c: float, d: int, angles=None, dim: int = 2) -> ChannelFamily:
    """``A_i = sqrt(c/d) R(theta_i)``, so ``sum A_i*A_i = c I`` exactly.

    ``c = 1`` gives a column-isometric family.
    """
    if angles is None:
        angles = [np.pi * (i + 1) / (d + 1) for i in range(d)]
    if len(angles) != d:
        raise ValueError("need one angle per channel")
    mats = np.stack([np.sqrt(c / d) * rotation(t, dim) for t in angles])
    bound = c if c < 1.0 else None
    return make_family(mats, contraction_bound=bound)


def random_contraction(seed: int, d: int, dim: int, norm_cap: float = 0.95,
                       complex_field: bool = False) -> ChannelFamily:
    """Gaussian channels rescaled so that ``||sum A_i*A_i|| = norm_cap``."""
    rng = np.random.default_rng(seed)
    mats = rng.standard_normal((d, dim, dim))
    if complex_field:
        mats = mats + 1j * rng.standard_normal((d, dim, dim))
    S = sum(adjoint(A) @ A for A in mats)
    top = float(np.linalg.eigvalsh(0.5 * (S + adjoint(S)))[-1])
    mats = mats * np.sqrt(norm_cap / top)
    return make_family(mats, contraction_bound=norm_cap if norm_cap < 1 else None)


def random_isometric(seed: int, d: int, dim: int) -> ChannelFamily:
    """``A_i = Q_i / sqrt(d)`` with random orthogonal ``Q_i``: column isometric."""
    rng = np.random.default_rng(seed)
    mats = []
    for _ in range(d):
        Q, R = np.linalg.qr(rng.standard_normal((dim, dim)))
        mats.append(Q * np.sign(np.diag(R)) / np.sqrt(d))
    return make_family(np.stack(mats))


def level_vectors(family: ChannelFamily, V, depth: int):
    """Yield ``(n, words, stack)`` for ``n = 0..depth``.

    ``stack[k]`` holds ``A_{words[k]}`` applied to every row of ``V``
    (shape ``(d^n, m, dim)``); children are formed from their parent's
    vectors, never recomputed from the root.
    """
    _guard(family.d, depth)
    V = np.atleast_2d(np.asarray(V))
    words: list[Word] = [()]
    stack = V[None]
    for n in range(depth + 1):
        yield n, words, stack
        if n == depth:
            break
        # child (alpha, i) = A_i applied to alpha's vectors; lexicographic order
        kids = np.einsum("iab,kmb->kima", family.channels, stack)
        stack = kids.reshape(-1, *stack.shape[1:])
        words = [w + (i,) for w in words for i in range(1, family.d + 1)]


@dataclass(frozen=True, eq=False)
class TreeEnergies:
    E: dict
    Delta: dict
    levels: np.ndarray
    depth: int
    norm_sq: float

    def refinement_residuals(self) -> np.ndarray:
        """``|L_n - L_{n+1} - sum_{|alpha|=n} Delta_alpha|`` for ``n < N``."""
        out = np.empty(self.depth)
        for n in range(self.depth):
            dsum = sum(v for w, v in self.Delta.items() if len(w) == n)
            out[n] = abs(self.levels[n] - self.levels[n + 1] - dsum)
        return out

    def splitting_residual(self) -> float:
        """``| ||x||^2 - L_N - sum_{|alpha|<N} Delta_alpha |``."""
        return abs(self.norm_sq - self.levels[-1] - sum(self.Delta.values()))

    def to_csv(self, fh=None) -> str:
        out = io.StringIO() if fh is None else fh
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["word", "depth", "E", "Delta"])
        for word in sorted(self.E, key=lambda t: (len(t), t)):
            delta = self.Delta.get(word)
            w.writerow([word_str(word), len(word), format(self.E[word], ".17g"),
                        "" if delta is None else format(delta, ".17g")])
        return out.getvalue() if fh is None else ""


def tree_energies(family: ChannelFamily, x, depth: int) -> TreeEnergies:
    x = np.asarray(x)
    E, Delta = {}, {}
    levels = np.empty(depth + 1)
    for n, words, stack in level_vectors(family, x[None, :], depth):
        vecs = stack[:, 0, :]
        e = np.sum(np.abs(vecs) ** 2, axis=1)
        levels[n] = e.sum()
        E.update(zip(words, e.tolist()))
        if n < depth:
            dv = vecs @ family.defect.T
            Delta.update(zip(words, np.sum(np.abs(dv) ** 2, axis=1).tolist()))
    return TreeEnergies(E=E, Delta=Delta, levels=levels, depth=depth,
                        norm_sq=float(np.linalg.norm(x) ** 2))


class FeatureMap:
    """A map ``Phi_0`` from points to vectors in the feature space.

    ``k_0(x, y) = <Phi_0(x), Phi_0(y)>``.
    """

    def __init__(self, fn: Callable, dim: int):
        self._fn = fn
        self.dim = dim

    def __call__(self, points) -> np.ndarray:
        return np.asarray(self._fn(as_points(points)))

    def kernel0(self, X, Y) -> np.ndarray:
        return np.conj(self(X)) @ self(Y).T

    @classmethod
    def linear(cls, W, b=None) -> "FeatureMap":
        """``Phi_0(x) = W x + b``."""
        W = np.atleast_2d(np.asarray(W))
        b = np.zeros(W.shape[0]) if b is None else np.asarray(b)
        return cls(lambda X: X @ W.T + b, W.shape[0])

    @classmethod
    def table(cls, points, features) -> "FeatureMap":
        """Explicit lookup; points must match a table row exactly."""
        P = as_points(points)
        F = np.asarray(features)
        index = {tuple(p): i for i, p in enumerate(P)}

        def lookup(X):
            try:
                return F[[index[tuple(x)] for x in X]]
            except KeyError as exc:
                raise KeyError(f"point {exc.args[0]} is not in the feature table") from None

        return cls(lookup, F.shape[1])

    @classmethod
    def from_kernel(cls, kernel: Kernel, points) -> "FeatureMap":
        """Sample-restricted factor: ``Phi_0(x_j) = K^{1/2} e_j`` reproduces ``K`` exactly."""
        P = as_points(points)
        K = gram(kernel, P).entries
        S = psd_sqrt(K, tol_neg=1e-9 * max(np.trace(K).real, 1.0))
        return cls.table(P, S.T)


@dataclass(frozen=True)
class PrefixSet:
    nodes: frozenset
    depth_N: int

    def __post_init__(self):
        nodes = frozenset(tuple(w) for w in self.nodes)
        for w in nodes:
            if len(w) >= self.depth_N:
                raise NotPrefixClosed(f"node {word_str(w)!r} has depth >= N = {self.depth_N}")
            if w and w[:-1] not in nodes:
                raise NotPrefixClosed(f"node {word_str(w)!r} is present without its parent")
        object.__setattr__(self, "nodes", nodes)

    def __contains__(self, w):
        return tuple(w) in self.nodes

    def __len__(self):
        return len(self.nodes)

    def __iter__(self):
        return iter(sorted(self.nodes, key=lambda t: (len(t), t)))

    def frontier(self, d: int) -> frozenset:
        """Children (of depth < N) of members that are not members themselves."""
        out = set()
        cands = [()] if not self.nodes else [w + (i,) for w in self.nodes for i in range(1, d + 1)]
        for b in cands:
            if b not in self.nodes and len(b) < self.depth_N:
                out.add(b)
        return frozenset(out)

    def add(self, w: Word) -> "PrefixSet":
        return PrefixSet(self.nodes | {tuple(w)}, self.depth_N)

    @classmethod
    def empty(cls, depth_N: int) -> "PrefixSet":
        return cls(frozenset(), depth_N)

    @classmethod
    def root(cls, depth_N: int) -> "PrefixSet":
        return cls(frozenset({()}), depth_N)

    @classmethod
    def depth_truncation(cls, d: int, depth_N: int, M: int) -> "PrefixSet":
        """All nodes of depth ``< M``."""
        if not 0 <= M <= depth_N:
            raise ValueError("need 0 <= M <= N")
        nodes = [w for n in range(M) for w in words_at_depth(d, n)]
        return cls(frozenset(nodes), depth_N)

    @classmethod
    def full(cls, d: int, depth_N: int) -> "PrefixSet":
        return cls.depth_truncation(d, depth_N, depth_N)


@dataclass(frozen=True, eq=False)
class BlockFeatures:
    """``D A_alpha Phi_0(x_j)`` for ``|alpha| < N`` and ``A_alpha Phi_0(x_j)`` for ``|alpha| = N``."""

    defect_blocks: dict
    leaf_blocks: dict
    base: np.ndarray

    def block_energy(self, word: Word) -> float:
        return float(np.sum(np.abs(self.defect_blocks[tuple(word)]) ** 2))

    def leaf_energy(self) -> np.ndarray:
        """Per-point ``sum_{|alpha|=N} ||A_alpha Phi_0(x_j)||^2``."""
        return sum(np.sum(np.abs(v) ** 2, axis=1) for v in self.leaf_blocks.values())

    def gram_block(self, word: Word) -> np.ndarray:
        F = self.defect_blocks[tuple(word)]
        return np.conj(F) @ F.T


def block_features(family: ChannelFamily, Phi, depth_N: int) -> BlockFeatures:
    Phi = np.atleast_2d(np.asarray(Phi))
    defect_blocks, leaf_blocks = {}, {}
    for n, words, stack in level_vectors(family, Phi, depth_N):
        if n < depth_N:
            dv = np.einsum("ab,kmb->kma", family.defect, stack)
            defect_blocks.update(zip(words, dv))
        else:
            leaf_blocks.update(zip(words, stack))
    return BlockFeatures(defect_blocks=defect_blocks, leaf_blocks=leaf_blocks, base=Phi)


@dataclass(frozen=True, eq=False)
class TruncatedKernel:
    family: ChannelFamily
    phi0: FeatureMap
    keep: PrefixSet

    @property
    def depth_N(self) -> int:
        return self.keep.depth_N

    def blocks(self, points) -> BlockFeatures:
        return block_features(self.family, self.phi0(points), self.depth_N)

    def matrix(self, X, Y) -> np.ndarray:
        bx, by = self.blocks(X), self.blocks(Y)
        out = np.zeros((bx.base.shape[0], by.base.shape[0]), dtype=np.result_type(bx.base, by.base, float))
        for w in self.keep:
            out = out + np.conj(bx.defect_blocks[w]) @ by.defect_blocks[w].T
        return out

    def residual(self, points) -> np.ndarray:
        b = self.blocks(points)
        R = b.leaf_energy()
        for w, F in b.defect_blocks.items():
            if w not in self.keep:
                R = R + np.sum(np.abs(F) ** 2, axis=1)
        return R


def truncated_kernel_eval(tk: TruncatedKernel, x, y):
    """``k_S(x, y) = sum_{alpha in S} <D A_alpha Phi_0(x), D A_alpha Phi_0(y)>``."""
    return tk.matrix(x, y)[0, 0]


def residual_energy(tk: TruncatedKernel, x) -> float:
    """Discarded energy: level-N leaves plus defect blocks outside ``keep``."""
    return float(tk.residual(x)[0])


@dataclass(frozen=True, eq=False)
class TruncatedGramReport:
    K0: GramMatrix
    KS: GramMatrix
    residuals: np.ndarray
    trace_gap: float
    min_eig_gap: float
    max_eig_gap: float
    trace_identity_residual: float

    @property
    def gap_psd(self) -> bool:
        return self.min_eig_gap >= -1e-9 * max(self.trace_gap, 1e-300)

    @property
    def trace_identity_ok(self) -> bool:
        return self.trace_identity_residual <= 1e-8

    @property
    def operator_bound_ok(self) -> bool:
        total = float(np.sum(self.residuals))
        return self.max_eig_gap <= total + 1e-9 * max(total, 1.0)

    @property
    def passed(self) -> bool:
        return self.gap_psd and self.trace_identity_ok and self.operator_bound_ok


def _hermitian(K):
    return 0.5 * (K + adjoint(K))


def truncated_gram(tk: TruncatedKernel, points) -> TruncatedGramReport:
    P = as_points(points)
    b = tk.blocks(P)
    F0 = b.base
    K0 = _hermitian(np.conj(F0) @ F0.T)
    KS = np.zeros_like(K0)
    R = b.leaf_energy()
    for w, F in b.defect_blocks.items():
        if w in tk.keep:
            KS = KS + np.conj(F) @ F.T
        else:
            R = R + np.sum(np.abs(F) ** 2, axis=1)
    KS = _hermitian(KS)
    gap = K0 - KS
    eig = np.linalg.eigvalsh(gap)
    trace_gap = float(np.real(np.trace(gap)))
    rel = abs(trace_gap - float(np.sum(R))) / max(float(np.real(np.trace(K0))), 1e-300)
    return TruncatedGramReport(K0=GramMatrix(P, K0), KS=GramMatrix(P, KS), residuals=R,
                               trace_gap=trace_gap, min_eig_gap=float(eig[0]),
                               max_eig_gap=float(eig[-1]), trace_identity_residual=rel)


def isometry_coordinates(family: ChannelFamily, x, depth_N: int) -> np.ndarray:
    """``W_N x``: leaves ``A_alpha x`` (``|alpha| = N``) then defect blocks ``D A_alpha x`` (``|alpha| < N``)."""
    b = block_features(family, np.asarray(x)[None, :], depth_N)
    leaves = [b.leaf_blocks[w][0] for w in words_at_depth(family.d, depth_N)]
    defects = [b.defect_blocks[w][0] for n in range(depth_N) for w in words_at_depth(family.d, n)]
    return np.concatenate(leaves + defects)


def isometry_check(family: ChannelFamily, depth_N: int, probes: Iterable, tol: float = 1e-9) -> bool:
    """Norm and inner-product preservation of ``W_N`` on the probes and all probe pairs."""
    probes = [np.asarray(p) for p in probes]
    W = [isometry_coordinates(family, p, depth_N) for p in probes]
    for i, (x, wx) in enumerate(zip(probes, W)):
        scale = max(np.linalg.norm(x) ** 2, 1e-300)
        if abs(np.vdot(wx, wx) - np.vdot(x, x)) > tol * scale:
            return False
        for y, wy in zip(probes[i + 1:], W[i + 1:]):
            s = max(np.linalg.norm(x) * np.linalg.norm(y), 1e-300)
            if abs(np.vdot(wx, wy) - np.vdot(x, y)) > tol * s:
                return False
    return True
