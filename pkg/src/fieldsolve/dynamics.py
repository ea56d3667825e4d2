"""Explicit Euler metriplectic field dynamics on image grids.

One step applies

    psi <- psi + dt * (-sigma * stencil(psi) + alpha * (J_anti psi)
                       - gamma * psi + source)

where J_anti = J_raw - J_raw^T couples the K fields per pixel and the
stencil is a learned depthwise 3x3 kernel initialized to the 5-point
Laplacian. Diffusion/damping dissipate; the skew coupling advects.

Under pure advection with a per-pixel gain shared across fields, the
quadratic energy E = 0.5*sum(psi^2) obeys the exact per-step identity

    E_{n+1} - E_n = 0.5 * dt^2 * ||alpha * (J_anti psi_n)||^2

because the cross term psi . (alpha * J_anti psi) vanishes by skewness.
``structure_diagnostics`` checks this identity, Dirichlet monotonicity
under pure graph dissipation, and the spectral structure of J_anti
(paired singular values, even rank 2r, null-space dimension K - 2r).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import NumericError, ShapeError
from .graph import ScreenedSystem, dirichlet_energy, laplacian_apply
from .params import ModelParams
from .tensor import (Tensor, add, astensor, clamp, conv3x3_depthwise, matmul,
                     mul, neg, reshape, softplus, sub, transpose)

FIVE_POINT_LAPLACIAN = np.array([[0.0, 1.0, 0.0],
                                 [1.0, -4.0, 1.0],
                                 [0.0, 1.0, 0.0]])

SINGULAR_RANK_TOL = 1e-10


@dataclass
class OperatorCoeffs:
    """Per-pixel per-field operator coefficients (each (K, H, W))."""

    sigma: Tensor
    alpha: Tensor
    gamma: Tensor
    source: Tensor


@dataclass
class PoissonTensor:
    """Learned raw K x K matrix whose antisymmetrization advects fields."""

    j_raw: Tensor

    def anti(self) -> Tensor:
        return sub(self.j_raw, transpose(self.j_raw))

    def anti_array(self) -> np.ndarray:
        return self.j_raw.data - self.j_raw.data.T


@dataclass(frozen=True)
class ProjectionHeads:
    """Names of the five K x D projection matrices (no biases)."""

    psi: str
    sigma: str
    alpha: str
    gamma: str
    source: str


def init_projections(params: ModelParams, prefix: str, k: int, d: int,
                     rng: np.random.Generator, scale: float = 0.2) -> ProjectionHeads:
    names = {}
    for head in ("psi", "sigma", "alpha", "gamma", "source"):
        name = f"{prefix}.{head}"
        params.add(name, scale * rng.standard_normal((k, d)))
        names[head] = name
    return ProjectionHeads(**names)


def init_stencil(params: ModelParams, name: str, k: int) -> str:
    params.add(name, np.tile(FIVE_POINT_LAPLACIAN, (k, 1, 1)))
    return name


def _project(weight: Tensor, h: Tensor) -> Tensor:
    """1x1 convolution: (K, D) applied across the channel axis of (D, H, W)."""
    d, hh, ww = h.shape
    flat = reshape(h, (d, hh * ww))
    return reshape(matmul(weight, flat), (weight.shape[0], hh, ww))


def project_operators(h: Tensor, heads: ProjectionHeads,
                      params: ModelParams) -> tuple[Tensor, OperatorCoeffs]:
    """Derive fresh fields and operator coefficients from the representation.

    psi = W_psi h, sigma = softplus(W_sigma h), alpha = W_alpha h,
    gamma = softplus(W_gamma h) + 0.1, source = clamp(W_s h, +-5).
    """
    h = astensor(h)
    if h.ndim != 3:
        raise ShapeError("h must be (D, H, W)")
    psi = _project(params[heads.psi], h)
    coeffs = OperatorCoeffs(
        sigma=softplus(_project(params[heads.sigma], h)),
        alpha=_project(params[heads.alpha], h),
        gamma=add(softplus(_project(params[heads.gamma], h)), 0.1),
        source=clamp(_project(params[heads.source], h), -5.0, 5.0),
    )
    return psi, coeffs


def _coupled(j_anti: Tensor, psi: Tensor) -> Tensor:
    k, hh, ww = psi.shape
    return reshape(matmul(j_anti, reshape(psi, (k, hh * ww))), (k, hh, ww))


def _check_finite(name: str, t: Tensor) -> Tensor:
    if not np.isfinite(t.data).all():
        raise NumericError(f"{name} produced non-finite values")
    return t


def euler_step(psi: Tensor, coeffs: OperatorCoeffs, j: PoissonTensor,
               stencil: Tensor, dt: float) -> Tensor:
    """One explicit Euler update; raises NumericError naming the bad term."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    psi = astensor(psi)
    diffusion = _check_finite(
        "diffusion term", mul(coeffs.sigma, conv3x3_depthwise(psi, stencil)))
    advection = _check_finite(
        "advection term", mul(coeffs.alpha, _coupled(j.anti(), psi)))
    damping = _check_finite("damping term", mul(coeffs.gamma, psi))
    update = add(sub(advection, add(diffusion, damping)), coeffs.source)
    return _check_finite("euler update", add(psi, mul(Tensor(dt), update)))


def evolve(psi: Tensor, coeffs: OperatorCoeffs, j: PoissonTensor,
           stencil: Tensor, dt: float, substeps: int) -> Tensor:
    """Repeated euler_step with fixed coefficients."""
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    out = astensor(psi)
    for step in range(substeps):
        try:
            out = euler_step(out, coeffs, j, stencil, dt)
        except NumericError as err:
            raise NumericError(f"substep {step}: {err}") from err
    return out


# ---------------------------------------------------------------------------
# structure diagnostics (plain numpy)


def quadratic_energy(psi: np.ndarray) -> float:
    return 0.5 * float(np.sum(np.square(psi)))


def advection_trajectory(psi0: np.ndarray, alpha: np.ndarray,
                         j_anti: np.ndarray, dt: float,
                         steps: int) -> np.ndarray:
    """Pure-advection rollout psi <- psi + dt * alpha * (J_anti psi).

    psi0: (K, ...); alpha broadcasts against it (use a per-pixel map
    shared across fields to stay on the exact-drift branch).
    """
    psi = np.asarray(psi0, dtype=np.float64)
    k = psi.shape[0]
    traj = np.empty((steps + 1,) + psi.shape)
    traj[0] = psi
    for n in range(steps):
        coupled = np.tensordot(j_anti, psi, axes=(1, 0))
        psi = psi + dt * (alpha * coupled)
        traj[n + 1] = psi
    return traj


def predicted_drift(psi: np.ndarray, alpha: np.ndarray, j_anti: np.ndarray,
                    dt: float) -> float:
    """0.5 * dt^2 * ||alpha * (J_anti psi)||^2 for one step from psi."""
    coupled = np.tensordot(j_anti, psi, axes=(1, 0))
    return 0.5 * dt * dt * float(np.sum(np.square(alpha * coupled)))


def graph_dissipation_trajectory(sys: ScreenedSystem, psi0: np.ndarray,
                                 dt: float, steps: int) -> np.ndarray:
    """Pure dissipation on a graph: psi <- psi - dt * (L_W + Lam) psi."""
    psi = np.asarray(psi0, dtype=np.float64)
    traj = np.empty((steps + 1, len(psi)))
    traj[0] = psi
    for n in range(steps):
        psi = psi - dt * laplacian_apply(sys, psi)
        traj[n + 1] = psi
    return traj


def drift_convergence_order(psi0: np.ndarray, alpha: np.ndarray,
                            j_anti: np.ndarray, dt0: float, steps: int,
                            halvings: int = 3) -> float:
    """Log-log slope of total drift over a fixed step budget as dt halves.

    Per-step drift is O(dt^2), so the accumulated drift over a fixed
    number of steps scales quadratically: expect slope ~ 2.
    """
    dts, drifts = [], []
    for h in range(halvings + 1):
        dt = dt0 / (2 ** h)
        traj = advection_trajectory(psi0, alpha, j_anti, dt, steps)
        drift = abs(quadratic_energy(traj[-1]) - quadratic_energy(traj[0]))
        dts.append(dt)
        drifts.append(drift)
    slope, _ = np.polyfit(np.log(dts), np.log(drifts), 1)
    return float(slope)


@dataclass
class DiagnosticsReport:
    """Structural checks of one learned Poisson tensor and trajectories."""

    skew_residual: float
    singular_values: np.ndarray
    max_pair_gap: float
    rank: int
    casimir_dim: int
    drift_rows: list = field(default_factory=list)  # (step, E, drift, predicted)
    max_drift_error: Optional[float] = None
    dirichlet_energies: Optional[np.ndarray] = None
    dirichlet_monotone: Optional[bool] = None

    def to_dict(self) -> dict:
        out = {
            "skew_residual": self.skew_residual,
            "singular_values": [float(s) for s in self.singular_values],
            "max_pair_gap": self.max_pair_gap,
            "rank": self.rank,
            "casimir_dim": self.casimir_dim,
        }
        if self.max_drift_error is not None:
            out["max_drift_error"] = self.max_drift_error
        if self.dirichlet_monotone is not None:
            out["dirichlet_monotone"] = bool(self.dirichlet_monotone)
            out["dirichlet_energies"] = [float(e) for e in self.dirichlet_energies]
        return out


def singular_pair_gap(svals: np.ndarray) -> float:
    """Max gap between consecutive members of descending singular-value pairs.

    A real skew matrix has singular values in equal pairs (plus zeros for
    odd dimension), so this gap should sit at roundoff.
    """
    svals = np.sort(svals)[::-1]
    padded = np.concatenate([svals, [0.0]]) if len(svals) % 2 else svals
    pairs = padded.reshape(-1, 2)
    return float(np.max(np.abs(pairs[:, 0] - pairs[:, 1]))) if len(pairs) else 0.0


def structure_diagnostics(j_anti: np.ndarray,
                          trajectory: Optional[np.ndarray] = None,
                          alpha: Optional[np.ndarray] = None,
                          dt: Optional[float] = None,
                          sys: Optional[ScreenedSystem] = None,
                          dissipation_trajectory: Optional[np.ndarray] = None,
                          ) -> DiagnosticsReport:
    """Assemble the structural report.

    Pass ``trajectory`` (pure advection, with ``alpha`` and ``dt``) to
    check the per-step drift identity, and/or ``dissipation_trajectory``
    with its graph ``sys`` to check Dirichlet monotonicity.
    """
    j_anti = np.asarray(j_anti, dtype=np.float64)
    k = j_anti.shape[0]
    skew_residual = float(np.max(np.abs(j_anti + j_anti.T))) if k else 0.0
    svals = np.linalg.svd(j_anti, compute_uv=False)
    rank = int(np.sum(svals > SINGULAR_RANK_TOL))
    report = DiagnosticsReport(
        skew_residual=skew_residual,
        singular_values=svals,
        max_pair_gap=singular_pair_gap(svals),
        rank=rank,
        casimir_dim=k - rank,
    )
    if trajectory is not None:
        if alpha is None or dt is None:
            raise ValueError("drift check needs alpha and dt")
        if len(trajectory) < 2:
            raise ValueError("trajectory must hold at least 2 states")
        worst = 0.0
        for n in range(len(trajectory) - 1):
            e_n = quadratic_energy(trajectory[n])
            drift = quadratic_energy(trajectory[n + 1]) - e_n
            pred = predicted_drift(trajectory[n], alpha, j_anti, dt)
            report.drift_rows.append((n, e_n, drift, pred))
            worst = max(worst, abs(drift - pred))
        report.max_drift_error = worst
    if dissipation_trajectory is not None:
        if sys is None:
            raise ValueError("dissipation check needs the graph system")
        zeros = np.zeros(sys.n_nodes)
        energies = np.array([dirichlet_energy(sys, psi, zeros)
                             for psi in dissipation_trajectory])
        report.dirichlet_energies = energies
        report.dirichlet_monotone = bool(
            np.all(np.diff(energies) <= np.abs(energies[:-1]) * 1e-12 + 1e-300))
    return report
