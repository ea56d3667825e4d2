"""Learned two-level V-cycle: soft restriction, coarse solve, prolongation.

Nodes are softly assigned to K_obj clusters; features are pooled through
the assignment, a small screened-Poisson system on the complete object
graph is solved, and the coarse solution is spread back to the nodes.
All steps are tape ops, so gradients flow through the whole cycle.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .cg import CgConfig, solve_tensor
from .errors import ShapeError
from .graph import GraphTopology
from .params import MlpSpec, ModelParams, apply_mlp, init_mlp
from .tensor import (Tensor, add, astensor, concat, div, gather, gather_cols,
                     matmul, mul, reshape, softplus, softmax, transpose, tsum)

ZERO_MASS_EPS = 1e-8


@dataclass
class Assignment:
    """Soft node-to-object memberships; each row lies on the simplex."""

    rho: Tensor  # (n, K_obj)
    temperature: float


def build_assignment(params: ModelParams, spec: MlpSpec, features: Tensor,
                     tau) -> Assignment:
    """rho = softmax(MLP(features) / tau) row-wise."""
    logits = apply_mlp(params, spec, astensor(features))
    tau_t = tau if isinstance(tau, Tensor) else Tensor(float(tau))
    rho = softmax(div(logits, tau_t), axis=1)
    return Assignment(rho, float(tau_t.data) if tau_t.data.ndim == 0 else float(np.mean(tau_t.data)))


def restrict(rho, f, normalize: bool = True, diag: Optional[dict] = None) -> Tensor:
    """Pool node features through the assignment: o = rho^T f.

    With ``normalize`` each object is divided by its soft mass (column
    sum of rho); objects with vanishing mass get a 1e-8 guard and are
    counted in ``diag['zero_mass_objects']`` when a dict is supplied.
    """
    rho, f = astensor(rho), astensor(f)
    if rho.ndim != 2 or f.ndim != 2 or rho.shape[0] != f.shape[0]:
        raise ShapeError("restrict expects rho (n, K_obj) and f (n, F)")
    pooled = matmul(transpose(rho), f)
    if not normalize:
        return pooled
    mass = reshape(tsum(rho, axis=0), (rho.shape[1], 1))
    zero = mass.data.reshape(-1) < ZERO_MASS_EPS
    if diag is not None:
        diag["zero_mass_objects"] = int(np.sum(zero))
    guard = Tensor(np.where(zero, ZERO_MASS_EPS, 0.0).reshape(-1, 1))
    return div(pooled, add(mass, guard))


def prolongate(rho, o) -> Tensor:
    """Spread object features back to nodes: u = rho o."""
    rho, o = astensor(rho), astensor(o)
    if rho.ndim != 2 or o.ndim != 2 or rho.shape[1] != o.shape[0]:
        raise ShapeError("prolongate expects rho (n, K_obj) and o (K_obj, F)")
    return matmul(rho, o)


def complete_topology(k_obj: int) -> GraphTopology:
    """Complete graph over the objects (dense inter-object coupling)."""
    pairs = [(p, q) for p in range(k_obj) for q in range(p + 1, k_obj)]
    edges = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    return GraphTopology(k_obj, edges)


@dataclass(frozen=True)
class ObjectHeads:
    """Coarse-level heads mapping pooled features to a screened system."""

    conductance: MlpSpec  # pair features -> raw edge conductance
    damping: MlpSpec      # pooled features -> per-object damping logits
    source: MlpSpec       # pooled features -> per-object sources
    k_objects: int
    coarse_fields: int


def init_object_heads(params: ModelParams, prefix: str, feat_dim: int,
                      k_objects: int, coarse_fields: int,
                      hidden: tuple[int, ...], rng: np.random.Generator) -> ObjectHeads:
    conduct = init_mlp(params, f"{prefix}.conduct",
                       [2 * feat_dim, *hidden, 1], rng)
    damping = init_mlp(params, f"{prefix}.damp",
                       [feat_dim, *hidden, coarse_fields], rng)
    source = init_mlp(params, f"{prefix}.src",
                      [feat_dim, *hidden, coarse_fields], rng)
    return ObjectHeads(conduct, damping, source, k_objects, coarse_fields)


def coarse_conductances(params: ModelParams, heads: ObjectHeads,
                        pooled: Tensor, topology: GraphTopology) -> Tensor:
    """Symmetric positive edge conductances from pooled feature pairs.

    The pair MLP is averaged over both argument orders so w_pq = w_qp by
    construction, then passed through softplus for positivity.
    """
    if topology.n_edges == 0:
        return Tensor(np.zeros(0))
    p, q = topology.edges[:, 0], topology.edges[:, 1]
    op, oq = gather(pooled, p), gather(pooled, q)
    raw_pq = apply_mlp(params, heads.conductance, concat([op, oq], axis=1))
    raw_qp = apply_mlp(params, heads.conductance, concat([oq, op], axis=1))
    raw = mul(add(raw_pq, raw_qp), 0.5)
    return softplus(reshape(raw, (topology.n_edges,)))


def vcycle(rho, features, heads: ObjectHeads, params: ModelParams,
           cfg: CgConfig = CgConfig(), normalize: bool = True,
           diag: Optional[dict] = None) -> Tensor:
    """Restrict, solve the coarse screened system, prolongate.

    Returns per-node unpooled features u of shape (n, coarse_fields).
    """
    rho = astensor(rho)
    pooled = restrict(rho, features, normalize=normalize, diag=diag)
    top = complete_topology(heads.k_objects)
    w = coarse_conductances(params, heads, pooled, top)
    lam = softplus(apply_mlp(params, heads.damping, pooled))
    b = apply_mlp(params, heads.source, pooled)
    cols = []
    for c in range(heads.coarse_fields):
        lam_c = reshape(gather_cols(lam, [c]), (heads.k_objects,))
        b_c = reshape(gather_cols(b, [c]), (heads.k_objects,))
        psi_c, _ = solve_tensor(top, w, lam_c, b_c, cfg)
        cols.append(reshape(psi_c, (heads.k_objects, 1)))
    coarse = concat(cols, axis=1)
    return prolongate(rho, coarse)


@dataclass
class AssignmentDiagnostics:
    active_objects: int
    mean_entropy: float
    cluster_map: np.ndarray  # per-node argmax

    def to_dict(self) -> dict:
        return {
            "active_objects": self.active_objects,
            "mean_entropy": self.mean_entropy,
            "cluster_map": self.cluster_map.tolist(),
        }


def assignment_diagnostics(rho: np.ndarray) -> AssignmentDiagnostics:
    """Active objects (max membership > 0.5), mean row entropy (nats), argmax map."""
    rho = np.asarray(rho, dtype=np.float64)
    active = int(np.sum(rho.max(axis=0) > 0.5))
    safe = np.where(rho > 0.0, rho, 1.0)
    entropy = float(np.mean(-np.sum(rho * np.log(safe), axis=1)))
    return AssignmentDiagnostics(active, entropy, rho.argmax(axis=1))
