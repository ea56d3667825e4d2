"""Conjugate-gradient solves of (L_W + diag(lam)) psi = b with exact adjoints.

The forward solve uses plain CG (optionally Jacobi-preconditioned) from a
zero initial guess. Gradients never differentiate through the iterations:
one extra CG solve v = A^{-1} g gives

    grad_b      = v
    grad_w_ij   = -(v_i - v_j)(psi_i - psi_j)
    grad_lam_i  = -v_i psi_i

which ``solve_tensor`` registers on the tape as a custom-gradient node.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ConvergenceError, NumericError, ShapeError
from .graph import GraphTopology, ScreenedSystem, laplacian_apply
from .tensor import Tensor, astensor, custom_grad


@dataclass(frozen=True)
class CgConfig:
    max_iters: int = 60
    rel_tol: float = 1e-10
    abs_floor: float = 1e-30
    jacobi: bool = False

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.rel_tol <= 0 or self.abs_floor <= 0:
            raise ValueError("tolerances must be positive")


@dataclass
class SolveRecord:
    psi: np.ndarray
    iterations: int
    rel_residual: float
    adjoint: Optional[np.ndarray] = None  # filled by the backward pass


def cg_solve(sys: ScreenedSystem, b: np.ndarray, cfg: CgConfig = CgConfig()) -> SolveRecord:
    """Solve A psi = b to ||A psi - b|| / max(||b||, floor) <= rel_tol."""
    b = np.asarray(b, dtype=np.float64)
    if b.shape != (sys.n_nodes,):
        raise ShapeError(f"b must have shape ({sys.n_nodes},), got {b.shape}")
    bnorm = float(np.linalg.norm(b))
    if bnorm <= cfg.abs_floor:
        return SolveRecord(np.zeros_like(b), 0, 0.0)
    denom = max(bnorm, cfg.abs_floor)

    if cfg.jacobi:
        diag = sys.lam.copy()
        if sys.topology.n_edges:
            i, j = sys.topology.edges[:, 0], sys.topology.edges[:, 1]
            n = sys.n_nodes
            diag += np.bincount(i, weights=sys.w, minlength=n)
            diag += np.bincount(j, weights=sys.w, minlength=n)
        inv_diag = 1.0 / diag
    else:
        inv_diag = None

    x = np.zeros_like(b)
    r = b.copy()
    z = r * inv_diag if inv_diag is not None else r
    p = z.copy()
    rz = float(r @ z)
    res = 1.0
    for it in range(1, cfg.max_iters + 1):
        ap = laplacian_apply(sys, p)
        pap = float(p @ ap)
        if not np.isfinite(pap) or pap <= 0.0:
            raise NumericError(f"CG curvature p.Ap = {pap} at iteration {it}")
        alpha = rz / pap
        x += alpha * p
        r -= alpha * ap
        res = float(np.linalg.norm(r)) / denom
        if not np.isfinite(res):
            raise NumericError(f"CG residual became non-finite at iteration {it}")
        if res <= cfg.rel_tol:
            return SolveRecord(x, it, res)
        z = r * inv_diag if inv_diag is not None else r
        rz_new = float(r @ z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise ConvergenceError(
        f"CG did not reach rel_tol={cfg.rel_tol} in {cfg.max_iters} iterations "
        f"(final relative residual {res:.3e})",
        residual=res, iterations=cfg.max_iters)


def cg_solve_grad(sys: ScreenedSystem, b: np.ndarray, psi: np.ndarray,
                  upstream: np.ndarray, cfg: CgConfig = CgConfig(),
                  record: Optional[SolveRecord] = None):
    """Adjoint gradients of a converged solve; returns (grad_b, grad_w, grad_lam).

    The adjoint v = A^{-1} upstream is found with the same CG solver and
    tolerance as the forward pass.
    """
    upstream = np.asarray(upstream, dtype=np.float64)
    if not upstream.any():
        return (np.zeros(sys.n_nodes), np.zeros(sys.topology.n_edges),
                np.zeros(sys.n_nodes))
    try:
        v = cg_solve(sys, upstream, cfg).psi
    except ConvergenceError as err:
        raise ConvergenceError(
            f"adjoint solve failed: {err}", residual=err.residual,
            iterations=err.iterations) from err
    if record is not None:
        record.adjoint = v
    psi = np.asarray(psi, dtype=np.float64)
    if sys.topology.n_edges:
        i, j = sys.topology.edges[:, 0], sys.topology.edges[:, 1]
        grad_w = -(v[i] - v[j]) * (psi[i] - psi[j])
    else:
        grad_w = np.zeros(0)
    return v, grad_w, -v * psi


def solve_k_fields(systems: Sequence[ScreenedSystem], bs: Sequence[np.ndarray],
                   cfg: CgConfig = CgConfig(), threads: int = 1) -> list[SolveRecord]:
    """Independent per-field solves over one shared topology and conductance."""
    if len(systems) != len(bs):
        raise ShapeError("need one source vector per system")
    if not systems:
        return []
    top = systems[0].topology
    w0 = systems[0].w
    for k, s in enumerate(systems[1:], start=1):
        if s.topology is not top and not (
                s.topology.n_nodes == top.n_nodes
                and np.array_equal(s.topology.edges, top.edges)):
            raise ValueError(f"field {k} does not share the topology")
        if not np.array_equal(s.w, w0):
            raise ValueError(f"field {k} does not share the conductances")

    def solve_one(k: int) -> SolveRecord:
        try:
            return cg_solve(systems[k], bs[k], cfg)
        except (ConvergenceError, NumericError) as err:
            raise type(err)(f"field {k}: {err}") from err

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(solve_one, range(len(systems))))
    return [solve_one(k) for k in range(len(systems))]


def solve_tensor(topology: GraphTopology, w: Tensor, lam: Tensor, b: Tensor,
                 cfg: CgConfig = CgConfig()) -> tuple[Tensor, SolveRecord]:
    """Differentiable solve: forward CG plus a custom adjoint backward rule."""
    w, lam, b = astensor(w), astensor(lam), astensor(b)
    sys = ScreenedSystem(topology, w.data, lam.data)
    record = cg_solve(sys, b.data, cfg)
    psi = record.psi

    def backward(g):
        grad_b, grad_w, grad_lam = cg_solve_grad(sys, b.data, psi, g, cfg, record)
        return (grad_w, grad_lam, grad_b)

    out = custom_grad([w, lam, b], psi, backward, name="cg_solve")
    return out, record
