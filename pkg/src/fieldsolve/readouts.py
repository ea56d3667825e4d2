"""Feature readouts from evolved fields via conserved currents.

Three interchangeable families over K fields on an H x W grid:

* stress-energy: gradient correlations E_ab = gx_a gx_b + gy_a gy_b
  (a <= b) and vorticity V_ab = gx_a gy_b - gx_b gy_a (a < b), K^2
  features total;
* field curvature: diagonal value-times-Laplacian products psi_a lap_a
  plus antisymmetric cross twists, K + K(K-1)/2 features;
* position-aware currents: per-field momentum densities p_mu = psi d_mu psi,
  angular momentum x p_y - y p_x, dilation x p_x + y p_y and gradient
  energy on the diagonal, plus cross energy, vorticity and cross angular
  momentum pairwise, 5K + 3K(K-1)/2 features.

Directional derivatives come from learned depthwise 3x3 kernels
initialized to Sobel-like filters scaled by 1/8, which makes them exact
on linear ramps. Everything here runs through tape ops, so the readouts
are differentiable when given tracked tensors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .params import ModelParams
from .tensor import (Tensor, add, astensor, concat, conv3x3_depthwise, gather,
                     mul, sub)

SOBEL_X = np.array([[-1.0, 0.0, 1.0],
                    [-2.0, 0.0, 2.0],
                    [-1.0, 0.0, 1.0]]) / 8.0
SOBEL_Y = SOBEL_X.T.copy()


@dataclass
class GradientField:
    """Directional derivative maps of every field (each (K, H, W))."""

    gx: Tensor
    gy: Tensor


def init_gradient_kernels(params: ModelParams, prefix: str, k: int) -> tuple[str, str]:
    """Register learnable derivative kernels at their Sobel-like init."""
    kx = f"{prefix}.kx"
    ky = f"{prefix}.ky"
    params.add(kx, np.tile(SOBEL_X, (k, 1, 1)))
    params.add(ky, np.tile(SOBEL_Y, (k, 1, 1)))
    return kx, ky


def gradient_fields(psi, kx, ky) -> GradientField:
    psi = astensor(psi)
    return GradientField(conv3x3_depthwise(psi, kx), conv3x3_depthwise(psi, ky))


def position_grids(height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    """Coordinates spanning [-1, 1] per axis with the origin at the center."""
    xs = np.linspace(-1.0, 1.0, width) if width > 1 else np.zeros(width)
    ys = np.linspace(-1.0, 1.0, height) if height > 1 else np.zeros(height)
    x = np.broadcast_to(xs, (height, width)).copy()
    y = np.broadcast_to(ys[:, None], (height, width)).copy()
    return x, y


def pair_indices(k: int) -> tuple[np.ndarray, np.ndarray]:
    """Index arrays (a, b) enumerating the K(K-1)/2 pairs with a < b."""
    a, b = np.triu_indices(k, k=1)
    return a.astype(np.int64), b.astype(np.int64)


@dataclass
class ReadoutFeatures:
    """Stress-energy blocks: diagonal energy, cross energy, vorticity."""

    e_diag: Tensor   # (K, H, W), nonnegative
    e_cross: Tensor  # (K(K-1)/2, H, W)
    vorticity: Tensor  # (K(K-1)/2, H, W)

    def stacked(self) -> Tensor:
        return concat([self.e_diag, self.e_cross, self.vorticity], axis=0)


def stress_energy(gx, gy) -> ReadoutFeatures:
    """E_ab = gx_a gx_b + gy_a gy_b (a <= b); V_ab = gx_a gy_b - gx_b gy_a (a < b)."""
    gx, gy = astensor(gx), astensor(gy)
    if gx.shape != gy.shape or gx.ndim != 3:
        raise ShapeError("gx and gy must both be (K, H, W)")
    k = gx.shape[0]
    e_diag = add(mul(gx, gx), mul(gy, gy))
    a, b = pair_indices(k)
    gxa, gxb = gather(gx, a), gather(gx, b)
    gya, gyb = gather(gy, a), gather(gy, b)
    e_cross = add(mul(gxa, gxb), mul(gya, gyb))
    vorticity = sub(mul(gxa, gyb), mul(gxb, gya))
    return ReadoutFeatures(e_diag, e_cross, vorticity)


def txy_decomposition(gx: np.ndarray, gy: np.ndarray):
    """Full K x K cross block T^xy_ab = gx_a gy_b and its two halves.

    Returns (txy, symmetric, antisymmetric) with txy = symmetric +
    antisymmetric exactly; the halves are the stored symmetric/skew
    decomposition of the mixed-direction stress block.
    """
    txy = np.einsum("ahw,bhw->abhw", gx, gy)
    sym = 0.5 * (txy + txy.transpose(1, 0, 2, 3))
    anti = 0.5 * (txy - txy.transpose(1, 0, 2, 3))
    return txy, sym, anti


def noether_currents(psi, gx, gy, x: np.ndarray, y: np.ndarray) -> Tensor:
    """Position-aware current stack, (5K + 3K(K-1)/2, H, W).

    Diagonal per field: p_x, p_y, angular momentum, dilation, gradient
    energy. Pairwise per (a, b): cross energy, vorticity, and the cross
    angular momentum built from the symmetrized cross momentum
    p_mu_ab = 0.5 (psi_a d_mu psi_b + psi_b d_mu psi_a).
    """
    psi, gx, gy = astensor(psi), astensor(gx), astensor(gy)
    if psi.shape != gx.shape or psi.shape != gy.shape:
        raise ShapeError("psi, gx, gy must share (K, H, W)")
    k = psi.shape[0]
    px = mul(psi, gx)
    py = mul(psi, gy)
    ang = sub(mul(py, x), mul(px, y))
    dil = add(mul(px, x), mul(py, y))
    e_diag = add(mul(gx, gx), mul(gy, gy))
    blocks = [px, py, ang, dil, e_diag]
    if k > 1:
        a, b = pair_indices(k)
        pa, pb = gather(psi, a), gather(psi, b)
        gxa, gxb = gather(gx, a), gather(gx, b)
        gya, gyb = gather(gy, a), gather(gy, b)
        e_cross = add(mul(gxa, gxb), mul(gya, gyb))
        vorticity = sub(mul(gxa, gyb), mul(gxb, gya))
        px_ab = mul(add(mul(pa, gxb), mul(pb, gxa)), 0.5)
        py_ab = mul(add(mul(pa, gyb), mul(pb, gya)), 0.5)
        ang_ab = sub(mul(py_ab, x), mul(px_ab, y))
        blocks.extend([e_cross, vorticity, ang_ab])
    return concat(blocks, axis=0)


def field_curvature(psi, lap) -> Tensor:
    """Diagonal psi_a lap_a plus antisymmetric cross twists, K + K(K-1)/2 maps."""
    psi, lap = astensor(psi), astensor(lap)
    if psi.shape != lap.shape or psi.ndim != 3:
        raise ShapeError("psi and lap must share (K, H, W)")
    k = psi.shape[0]
    diag = mul(psi, lap)
    if k == 1:
        return diag
    a, b = pair_indices(k)
    twist = sub(mul(gather(psi, a), gather(lap, b)),
                mul(gather(psi, b), gather(lap, a)))
    return concat([diag, twist], axis=0)


READOUT_KINDS = ("stress_energy", "curvature", "noether")


def feature_count(kind: str, k: int) -> int:
    """Per-pixel feature count of each readout family."""
    if k < 1:
        raise ValueError("k must be >= 1")
    pairs = k * (k - 1) // 2
    if kind == "stress_energy":
        return k * k
    if kind == "curvature":
        return k + pairs
    if kind == "noether":
        return 5 * k + 3 * pairs
    raise ValueError(f"unknown readout kind {kind!r}; expected one of {READOUT_KINDS}")


def readout_features(kind: str, psi, gx, gy, lap=None,
                     x: np.ndarray | None = None,
                     y: np.ndarray | None = None) -> Tensor:
    """Single dispatch over the three readout families."""
    if kind == "stress_energy":
        return stress_energy(gx, gy).stacked()
    if kind == "curvature":
        if lap is None:
            raise ValueError("curvature readout needs the Laplacian maps")
        return field_curvature(psi, lap)
    if kind == "noether":
        if x is None or y is None:
            raise ValueError("position-aware readout needs coordinate grids")
        return noether_currents(psi, gx, gy, x, y)
    raise ValueError(f"unknown readout kind {kind!r}; expected one of {READOUT_KINDS}")
