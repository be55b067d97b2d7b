"""Attention heads with an exact shared nullspace direction.

If every head's bilinear form ``M_i = Q_i K_i^T`` is symmetric, every value
matrix's columns lie in the row space of its ``M_i``, and two heads share at
least one nonzero row direction, then the summed row space ``S`` of all
``M_i`` is a proper subspace of R^d. Any unit ``w`` orthogonal to ``S``
satisfies ``w M_i = 0`` and ``w V_i = 0``, so adding a matrix ``W`` whose
rows are multiples of ``w`` to the tokens leaves every head's output
unchanged, whatever the tokens are.

This module builds heads that meet the three conditions, checks the
conditions numerically for arbitrary heads, extracts ``w`` and verifies
invariance. All computations run in float64.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .errors import ExistenceError, UsageError
from .linalg import DEFAULT_TOL, numerical_rank, orthogonal_complement, row_space_basis, symmetry_residual
from .tensor import no_grad
from .vit import attention_head


@dataclass
class HeadParams:
    q: np.ndarray  # (h, d, d_k)
    k: np.ndarray  # (h, d, d_k)
    v: np.ndarray  # (h, d, d_v)

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=np.float64)
        self.k = np.asarray(self.k, dtype=np.float64)
        self.v = np.asarray(self.v, dtype=np.float64)
        if self.q.shape != self.k.shape or self.q.ndim != 3 or self.v.shape[:2] != self.q.shape[:2]:
            raise UsageError(f"inconsistent head shapes q{self.q.shape} k{self.k.shape} v{self.v.shape}")
        if not (np.all(np.isfinite(self.q)) and np.all(np.isfinite(self.k)) and np.all(np.isfinite(self.v))):
            raise UsageError("head parameters must be finite")

    @property
    def heads(self) -> int:
        return self.q.shape[0]

    @property
    def d(self) -> int:
        return self.q.shape[1]

    def bilinear(self, i: int) -> np.ndarray:
        """``Q_i K_i^T`` (d x d)."""
        return self.q[i] @ self.k[i].T

    @classmethod
    def from_model(cls, params, layer: int) -> "HeadParams":
        pre = f"blocks.{layer}.attn."
        return cls(params[pre + "q"], params[pre + "k"], params[pre + "v"])


def synth_head_params(d: int, h: int, d_k: int, d_v: int | None, rng: np.random.Generator) -> HeadParams:
    """Random heads that satisfy all three invariance conditions by construction.

    Head ``i`` gets a random ``B_i`` (d x d_k) and a symmetric positive
    definite ``A_i = G G^T + d_k I`` with eigendecomposition ``P D P^T``; then
    ``Q_i = B_i P`` and ``K_i = B_i P D`` give ``Q_i K_i^T = B_i A_i B_i^T``.
    ``V_i = (B_i A_i B_i^T) G'_i`` keeps the value columns inside that row
    space. Heads 0 and 1 share ``B`` so their row spaces coincide.
    """
    d_v = d_k if d_v is None else d_v
    if d_k >= d:
        raise UsageError(f"d_k={d_k} leaves no room for a complement in d={d}")
    if h * d_k != d:
        raise UsageError(f"h * d_k must equal d (got {h} * {d_k} != {d})")
    if d_v > d_k:
        raise UsageError(f"d_v={d_v} must not exceed d_k={d_k}")
    if h < 2:
        raise UsageError("need at least two heads to share a row direction")
    bs = [rng.standard_normal((d, d_k)) for _ in range(h)]
    bs[1] = bs[0]
    q = np.empty((h, d, d_k))
    k = np.empty((h, d, d_k))
    v = np.empty((h, d, d_v))
    for i in range(h):
        g = rng.standard_normal((d_k, d_k))
        a = g @ g.T + d_k * np.eye(d_k)
        eigvals, p = np.linalg.eigh(a)
        q[i] = bs[i] @ p
        k[i] = bs[i] @ p @ np.diag(eigvals)
        v[i] = (bs[i] @ a @ bs[i].T) @ rng.standard_normal((d, d_v))
    # rescale so products are O(1) in magnitude; scaling preserves all conditions
    q /= np.sqrt(d)
    k /= np.sqrt(d) * d_k
    v /= np.abs(v).max()
    return HeadParams(q, k, v)


@dataclass
class ConditionReport:
    symmetry: np.ndarray  # per head, max|M - M^T| / max|M|
    value_inclusion: np.ndarray  # per head, worst relative distance of a V column from R(M_i)
    colinearity: tuple  # (m, n, k, relative residual) of the best shared row found
    dim_s: int
    dim_s_perp: int
    tol: float

    @property
    def symmetric(self) -> bool:
        return bool(np.all(self.symmetry <= self.tol))

    @property
    def values_included(self) -> bool:
        return bool(np.all(self.value_inclusion <= self.tol))

    @property
    def colinear(self) -> bool:
        return self.colinearity[3] <= self.tol

    @property
    def all_pass(self) -> bool:
        return self.symmetric and self.values_included and self.colinear

    def rows(self):
        """Flat records, one per condition and head, for CSV output."""
        out = []
        for i, r in enumerate(self.symmetry):
            out.append(("symmetric", i, float(r), bool(r <= self.tol)))
        for i, r in enumerate(self.value_inclusion):
            out.append(("value_rows_in_row_space", i, float(r), bool(r <= self.tol)))
        m, n, k, r = self.colinearity
        out.append((f"colinear(m={m};n={n};k={k})", -1, float(r), self.colinear))
        out.append(("dim_S", -1, float(self.dim_s), self.dim_s < self.dim_s + self.dim_s_perp))
        out.append(("dim_S_perp", -1, float(self.dim_s_perp), self.dim_s_perp > 0))
        return out


def _relative_residuals(basis: np.ndarray, rows: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(rows, axis=1)
    resid = np.linalg.norm(rows - (rows @ basis.T) @ basis, axis=1)
    return np.where(norms > 0, resid / np.where(norms > 0, norms, 1.0), np.inf)


def check_conditions(params: HeadParams, tol: float = 1e-9, rank_tol: float = DEFAULT_TOL) -> ConditionReport:
    """Measure how well each invariance condition holds; every residual is relative."""
    h, d = params.heads, params.d
    forms = [params.bilinear(i) for i in range(h)]
    bases = [row_space_basis(m, rank_tol) for m in forms]
    symmetry = np.array([symmetry_residual(m) for m in forms])
    inclusion = np.array([_relative_residuals(bases[i], params.v[i].T).max() for i in range(h)])

    best = (-1, -1, -1, np.inf)
    for m, n in itertools.permutations(range(h), 2):
        rows = forms[m]
        scale = np.linalg.norm(rows, axis=1)
        live = scale > rank_tol * max(scale.max(), 1e-300)
        if not live.any():
            continue
        resid = _relative_residuals(bases[n], rows)
        resid[~live] = np.inf
        k = int(np.argmin(resid))
        if resid[k] < best[3]:
            best = (m, n, k, float(resid[k]))

    dim_s = numerical_rank(np.vstack(forms), rank_tol)
    return ConditionReport(symmetry, inclusion, best, dim_s, d - dim_s, tol)


@dataclass
class NullW:
    w: np.ndarray  # (d,), unit norm
    W: np.ndarray  # (n_tokens, d), row j = row_scales[j] * w
    row_scales: np.ndarray


def construct_null_w(params: HeadParams, n_tokens: int, row_scales=None, rng: np.random.Generator | None = None, rank_tol: float = DEFAULT_TOL) -> NullW:
    """Unit ``w`` orthogonal to every row of every ``Q_i K_i^T``, and ``W = row_scales w``.

    Without ``row_scales`` the scales are drawn from U(-100, 100) using ``rng``.
    """
    stacked = np.vstack([params.bilinear(i) for i in range(params.heads)])
    comp = orthogonal_complement(stacked, rank_tol)
    if comp.is_trivial:
        raise ExistenceError("the summed row space of the heads is all of R^d; no invariant direction exists")
    w = comp.vectors[0]
    if row_scales is None:
        rng = rng if rng is not None else np.random.default_rng()
        row_scales = rng.uniform(-100.0, 100.0, size=n_tokens)
    row_scales = np.asarray(row_scales, dtype=np.float64).reshape(-1)
    if row_scales.shape[0] != n_tokens:
        raise UsageError(f"{row_scales.shape[0]} row scales for {n_tokens} tokens")
    return NullW(w, np.outer(row_scales, w), row_scales)


def head_outputs(params: HeadParams, X: np.ndarray) -> np.ndarray:
    """Stacked head outputs ``(h, n, d_v)`` for tokens ``X`` (n x d)."""
    X = np.asarray(X, dtype=np.float64)
    with no_grad():
        return np.stack([attention_head(X, params.q[i], params.k[i], params.v[i]).data for i in range(params.heads)])


def verify_head_invariance(params: HeadParams, X: np.ndarray, W: np.ndarray) -> np.ndarray:
    """Per-head ``max |head_i(X + W) - head_i(X)|``."""
    clean = head_outputs(params, X)
    noisy = head_outputs(params, np.asarray(X, dtype=np.float64) + W)
    return np.abs(noisy - clean).reshape(params.heads, -1).max(axis=1)


def cross_term_residual(params: HeadParams, X: np.ndarray, W: np.ndarray) -> np.ndarray:
    """Per-head ``max |W M X^T + X M W^T + W M W^T|`` with ``M = Q_i K_i^T``."""
    out = []
    for i in range(params.heads):
        m = params.bilinear(i)
        out.append(np.abs(W @ m @ X.T + X @ m @ W.T + W @ m @ W.T).max())
    return np.array(out)
