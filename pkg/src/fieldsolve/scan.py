"""Exact solves of the causal first-order recurrence psi_i = a_i psi_{i-1} + b_i.

Coefficients come from per-position conductance/damping/source via
a_i = w_i / (w_i + lam_i), b_i = src_i / (w_i + lam_i), so a_i is always
in (0, 1). The recurrence is solved either sequentially or with a
Blelloch up-sweep/down-sweep over affine-map composition, which is
associative and therefore scan-order independent.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ShapeError
from .tensor import Tensor, astensor, custom_grad


@dataclass(frozen=True)
class AffineElem:
    """The map x -> a*x + b."""

    a: float
    b: float

    def __call__(self, x: float) -> float:
        return self.a * x + self.b


IDENTITY = AffineElem(1.0, 0.0)


def compose(e2: AffineElem, e1: AffineElem) -> AffineElem:
    """e2 after e1: (a2, b2) o (a1, b1) = (a2*a1, a2*b1 + b2)."""
    return AffineElem(e2.a * e1.a, e2.a * e1.b + e2.b)


@dataclass(frozen=True)
class AffineChain:
    """Per-position affine maps, with the generating parameters kept for adjoints."""

    alpha: np.ndarray
    beta: np.ndarray
    w: Optional[np.ndarray] = None
    lam: Optional[np.ndarray] = None
    b: Optional[np.ndarray] = None

    def __post_init__(self):
        alpha = np.asarray(self.alpha, dtype=np.float64)
        beta = np.asarray(self.beta, dtype=np.float64)
        if alpha.shape != beta.shape or alpha.ndim != 1:
            raise ShapeError("alpha and beta must be equal-length 1-D arrays")
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "beta", beta)

    def __len__(self) -> int:
        return len(self.alpha)


def coefficients(w, lam, b) -> AffineChain:
    """Affine coefficients a = w/(w+lam), beta = b/(w+lam); needs w, lam > 0."""
    w = np.asarray(w, dtype=np.float64)
    lam = np.asarray(lam, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if w.shape != lam.shape or w.shape != b.shape:
        raise ShapeError("w, lam, b must share a shape")
    if w.size and (w.min() <= 0 or lam.min() <= 0):
        raise ValueError("w and lam must be strictly positive")
    denom = w + lam
    return AffineChain(w / denom, b / denom, w=w, lam=lam, b=b)


def scan_sequential(chain: AffineChain, psi0: float = 0.0) -> np.ndarray:
    """Reference left-to-right recurrence."""
    if len(chain) == 0:
        raise ShapeError("chain must be nonempty")
    out = np.empty(len(chain))
    prev = float(psi0)
    for i in range(len(chain)):
        prev = chain.alpha[i] * prev + chain.beta[i]
        out[i] = prev
    return out


def _scan_affine(alpha: np.ndarray, beta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Inclusive prefix composition of (alpha_i, beta_i) via Blelloch sweeps.

    Arrays are padded to a power of two with the identity map (1, 0).
    Position i of the result holds the composition e_i o ... o e_1.
    """
    n = len(alpha)
    size = 1 << max(n - 1, 0).bit_length() if n > 1 else 1
    a = np.ones(size)
    b = np.zeros(size)
    a[:n] = alpha
    b[:n] = beta
    # up-sweep: each parent becomes (right o left)
    d = 1
    while d < size:
        idx = np.arange(2 * d - 1, size, 2 * d)
        left = idx - d
        b[idx] = a[idx] * b[left] + b[idx]
        a[idx] = a[idx] * a[left]
        d *= 2
    # down-sweep: turn reductions into exclusive prefixes
    a[size - 1] = 1.0
    b[size - 1] = 0.0
    d = size // 2
    while d >= 1:
        idx = np.arange(2 * d - 1, size, 2 * d)
        left = idx - d
        ta = a[left].copy()
        tb = b[left].copy()
        a[left] = a[idx]
        b[left] = b[idx]
        b[idx] = ta * b[idx] + tb
        a[idx] = ta * a[idx]
        d //= 2
    # inclusive prefix at i = e_i o exclusive_i
    inc_a = alpha * a[:n]
    inc_b = alpha * b[:n] + beta
    return inc_a, inc_b


def scan_parallel(chain: AffineChain, psi0: float = 0.0) -> np.ndarray:
    """Blelloch-style parallel scan; matches scan_sequential to roundoff."""
    if len(chain) == 0:
        raise ShapeError("chain must be nonempty")
    inc_a, inc_b = _scan_affine(chain.alpha, chain.beta)
    return inc_a * float(psi0) + inc_b


def _adjoint_states(alpha: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """v_i = upstream_i + alpha_{i+1} v_{i+1}, solved as a reversed scan."""
    a_rev = np.concatenate(([0.0], alpha[::-1][:-1]))
    inc_a, inc_b = _scan_affine(a_rev, upstream[::-1])
    return inc_b[::-1]


def scan_grad(chain: AffineChain, psi: np.ndarray, upstream: np.ndarray,
              psi0: float = 0.0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Adjoint gradients (grad_w, grad_lam, grad_b) of the recurrence.

    Uses the reverse-direction recurrence for the total derivatives v,
    then the chain rule through the coefficient formulas.
    """
    if chain.w is None:
        raise ValueError("chain lacks generating parameters; build it via coefficients()")
    upstream = np.asarray(upstream, dtype=np.float64)
    v = _adjoint_states(chain.alpha, upstream)
    prev = np.concatenate(([float(psi0)], psi[:-1]))
    denom = chain.w + chain.lam
    inv2 = 1.0 / (denom * denom)
    grad_alpha = v * prev
    grad_beta = v
    grad_w = grad_alpha * chain.lam * inv2 - grad_beta * chain.b * inv2
    grad_lam = -grad_alpha * chain.w * inv2 - grad_beta * chain.b * inv2
    grad_b = grad_beta / denom
    return grad_w, grad_lam, grad_b


def scan_tensor(w: Tensor, lam: Tensor, b: Tensor, psi0: float = 0.0,
                parallel: bool = True) -> Tensor:
    """Differentiable causal solve registered as one custom-gradient node."""
    w, lam, b = astensor(w), astensor(lam), astensor(b)
    chain = coefficients(w.data, lam.data, b.data)
    psi = scan_parallel(chain, psi0) if parallel else scan_sequential(chain, psi0)

    def backward(g):
        return scan_grad(chain, psi, g, psi0)

    return custom_grad([w, lam, b], psi, backward, name="causal_scan")


def causal_pool(x: np.ndarray, chunk: int) -> np.ndarray:
    """Shifted chunk pooling: position i sees the mean of the chunk before its own.

    Positions in the first chunk get zeros, so no output ever depends on
    its own chunk (strict causality across the pooled scale).
    """
    if chunk < 1:
        raise ValueError("chunk must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    n_complete = n // chunk
    out = np.zeros_like(x)
    if n_complete == 0:
        return out
    means = x[:n_complete * chunk].reshape((n_complete, chunk) + x.shape[1:]).mean(axis=1)
    chunk_of = np.arange(n) // chunk
    has_prev = chunk_of >= 1
    out[has_prev] = means[chunk_of[has_prev] - 1]
    return out
