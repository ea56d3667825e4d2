"""One recurrent V-cycle round over a node graph.

Per round: encode per-node features, derive symmetric edge conductances
from a bilinear form, produce per-field damping and sources, solve the K
screened-Poisson systems, read out dissipation and 8-way directional
scans, optionally run the object-level V-cycle, decode per-node logits,
and feed back annealed softmax predictions. Rounds share weights; the
feedback temperature anneals linearly from tau_start to tau_end.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .cg import CgConfig, solve_tensor
from .errors import ShapeError, UnsupportedTopology
from .graph import GraphTopology
from .multigrid import (Assignment, ObjectHeads, build_assignment,
                        init_object_heads, vcycle)
from .params import MlpSpec, ModelParams, apply_mlp, init_mlp
from .tensor import (Tensor, add, astensor, concat, div, gather, gather_cols,
                     grid_scan, matmul, mul, relu, reshape, scatter_add,
                     softmax, softplus, sqrt, sub, transpose, tsum, tmean)

SCAN_DIRECTIONS = ("n", "s", "e", "w", "ne", "nw", "se", "sw")


@dataclass(frozen=True)
class LayerConfig:
    """Shape of one recurrent layer; ``from_json`` enforces known keys."""

    fields: int = 2
    rounds: int = 1
    hidden: tuple[int, ...] = (64, 64)
    objects: Optional[int] = None
    n_classes: int = 5
    input_dim: int = 4
    d_h: int = 64
    conductance_dim: Optional[int] = None  # None: bilinear form reads h
    coarse_fields: Optional[int] = None    # None: same as fields
    tau_start: float = 1.0
    tau_end: float = 0.2
    lambda_over_n: bool = False
    normalize_eps: float = 1e-6

    def __post_init__(self):
        if self.fields < 1 or self.rounds < 1:
            raise ValueError("fields and rounds must be >= 1")
        if not (0.0 < self.tau_end <= self.tau_start):
            raise ValueError("need 0 < tau_end <= tau_start")

    @property
    def k_coarse(self) -> int:
        return self.coarse_fields if self.coarse_fields is not None else self.fields

    def to_json(self) -> str:
        out = {
            "fields": self.fields,
            "rounds": self.rounds,
            "hidden": list(self.hidden),
            "objects": self.objects,
            "feedback": {"tau_start": self.tau_start, "tau_end": self.tau_end},
            "n_classes": self.n_classes,
            "input_dim": self.input_dim,
            "d_h": self.d_h,
            "conductance_dim": self.conductance_dim,
            "coarse_fields": self.coarse_fields,
            "lambda_over_n": self.lambda_over_n,
            "normalize_eps": self.normalize_eps,
        }
        return json.dumps(out, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "LayerConfig":
        raw = json.loads(text)
        known = {"fields", "rounds", "hidden", "objects", "feedback", "n_classes",
                 "input_dim", "d_h", "conductance_dim", "coarse_fields",
                 "lambda_over_n", "normalize_eps"}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kwargs = dict(raw)
        feedback = kwargs.pop("feedback", {})
        extra = set(feedback) - {"tau_start", "tau_end"}
        if extra:
            raise ValueError(f"unknown feedback keys: {sorted(extra)}")
        if "hidden" in kwargs:
            kwargs["hidden"] = tuple(kwargs["hidden"])
        kwargs.update({f"tau_{k.split('_')[1]}": v for k, v in feedback.items()})
        return cls(**kwargs)


@dataclass(frozen=True)
class LayerHeads:
    """Parameter specs of every head used by one round."""

    encoder: MlpSpec
    w_raw: str
    damping: MlpSpec
    source: MlpSpec
    decoder: MlpSpec
    assign: Optional[MlpSpec] = None
    tau_assign_raw: Optional[str] = None
    objects: Optional[ObjectHeads] = None


def init_layer(params: ModelParams, cfg: LayerConfig,
               rng: np.random.Generator, prefix: str = "layer") -> LayerHeads:
    k, d_h = cfg.fields, cfg.d_h
    d_c = cfg.conductance_dim if cfg.conductance_dim is not None else d_h
    enc_in = cfg.input_dim + cfg.n_classes + 2 + 1
    rich = d_h + 2 + k + 8 * k + 2 + (cfg.k_coarse if cfg.objects else 0)
    dec_in = k + k + d_h + 2 + 8 * k + (cfg.k_coarse if cfg.objects else 0)
    encoder = init_mlp(params, f"{prefix}.enc", [enc_in, *cfg.hidden, d_h], rng)
    w_raw = f"{prefix}.w_raw"
    params.add(w_raw, 0.3 * rng.standard_normal((d_c, d_c)))
    damping = init_mlp(params, f"{prefix}.damp", [rich, *cfg.hidden, k], rng)
    source = init_mlp(params, f"{prefix}.src", [rich, *cfg.hidden, k], rng)
    decoder = init_mlp(params, f"{prefix}.dec", [dec_in, *cfg.hidden, cfg.n_classes],
                       rng, zero_last=True)
    assign = tau_raw = objects = None
    if cfg.objects:
        assign = init_mlp(params, f"{prefix}.assign", [k + 2, *cfg.hidden, cfg.objects], rng)
        tau_raw = f"{prefix}.tau_assign"
        params.add(tau_raw, np.array(0.5))
        objects = init_object_heads(params, f"{prefix}.obj", k + k + d_h,
                                    cfg.objects, cfg.k_coarse, cfg.hidden, rng)
    return LayerHeads(encoder, w_raw, damping, source, decoder, assign, tau_raw, objects)


@dataclass
class RoundState:
    """State threaded between rounds (the raw input rides along unchanged)."""

    x: Tensor                   # (n, input_dim)
    psi: Tensor                 # (n, K)
    prev_soft: Tensor           # (n, n_classes), rows sum to 1
    u_prev: Optional[Tensor]    # (n, k_coarse) unpooled object features
    r: int
    total_rounds: int
    tau: float
    logits: Optional[Tensor] = None
    h: Optional[Tensor] = None
    assignment: Optional[Assignment] = None


def tau_schedule(r: int, total_rounds: int, tau_start: float = 1.0,
                 tau_end: float = 0.2) -> float:
    """Linear anneal tau_start -> tau_end over the rounds (single round: start)."""
    if total_rounds <= 1:
        return tau_start
    t = r / (total_rounds - 1)
    return tau_start * (1.0 - t) + tau_end * t


def initial_state(x, cfg: LayerConfig) -> RoundState:
    """Cold start: uniform class feedback, zero fields, zero object features."""
    x = astensor(x)
    n = x.shape[0]
    uniform = np.full((n, cfg.n_classes), 1.0 / cfg.n_classes)
    u0 = Tensor(np.zeros((n, cfg.k_coarse))) if cfg.objects else None
    return RoundState(x=x, psi=Tensor(np.zeros((n, cfg.fields))),
                      prev_soft=Tensor(uniform), u_prev=u0, r=0,
                      total_rounds=cfg.rounds,
                      tau=tau_schedule(0, cfg.rounds, cfg.tau_start, cfg.tau_end))


def conductances(features, w_raw, topology: GraphTopology) -> Tensor:
    """Per-edge w = softplus(f_i^T W_sym f_j), W_sym = relu((W + W^T)/2)."""
    features, w_raw = astensor(features), astensor(w_raw)
    if features.shape[0] != topology.n_nodes:
        raise ShapeError("feature rows must match the node count")
    w_sym = relu(mul(add(w_raw, transpose(w_raw)), 0.5))
    if topology.n_edges == 0:
        return Tensor(np.zeros(0))
    i, j = topology.edges[:, 0], topology.edges[:, 1]
    fw = matmul(features, w_sym)
    bilinear = tsum(mul(gather(fw, i), gather(features, j)), axis=1)
    return softplus(bilinear)


def normalize_fields(psi, eps: float = 1e-6) -> Tensor:
    """Zero-mean unit-variance per field over all nodes (constants map to 0)."""
    psi = astensor(psi)
    m = tmean(psi, axis=0, keepdims=True)
    centered = sub(psi, m)
    var = tmean(mul(centered, centered), axis=0, keepdims=True)
    return div(centered, sqrt(add(var, eps)))


def directional_scans(psi, topology: GraphTopology, eps: float = 1e-6) -> Tensor:
    """Exclusive cumulative sums of normalized fields along 8 grid sweeps.

    Output columns are field-major: 8 directions for field 0, then field
    1, etc. Only grid topologies carry the needed (H, W) structure.
    """
    psi = astensor(psi)
    if topology.grid_shape is None:
        raise UnsupportedTopology("directional scans need a grid topology")
    h, w = topology.grid_shape
    n, k = psi.shape
    if n != h * w:
        raise ShapeError("psi rows must match the grid size")
    normed = normalize_fields(psi, eps)
    cols = []
    for kf in range(k):
        plane = reshape(gather_cols(normed, [kf]), (h, w))
        for direction in SCAN_DIRECTIONS:
            cols.append(reshape(grid_scan(plane, direction), (n, 1)))
    return concat(cols, axis=1)


def dissipation_readout(w, psi, topology: GraphTopology) -> Tensor:
    """Per-node gradient energy D_k(i) = sum_j w_ij (psi_k(i) - psi_k(j))^2."""
    w, psi = astensor(w), astensor(psi)
    n = topology.n_nodes
    if topology.n_edges == 0:
        return Tensor(np.zeros(psi.shape))
    i, j = topology.edges[:, 0], topology.edges[:, 1]
    diff = sub(gather(psi, i), gather(psi, j))
    energy = mul(reshape(w, (topology.n_edges, 1)), mul(diff, diff))
    return add(scatter_add(energy, i, n), scatter_add(energy, j, n))


def cross_field_stats(psi) -> Tensor:
    """Per-node mean and variance across the K fields, (n, 2)."""
    psi = astensor(psi)
    m = tmean(psi, axis=1, keepdims=True)
    centered = sub(psi, m)
    v = tmean(mul(centered, centered), axis=1, keepdims=True)
    return concat([m, v], axis=1)


def run_round(state: RoundState, heads: LayerHeads, params: ModelParams,
              topology: GraphTopology, cfg: LayerConfig,
              cg_cfg: CgConfig = CgConfig(),
              cond_features: Optional[Tensor] = None) -> RoundState:
    """Execute one weight-shared round and return the successor state."""
    if not (0 <= state.r < state.total_rounds):
        raise ValueError(f"round index {state.r} outside [0, {state.total_rounds})")
    if topology.positions is None:
        raise ValueError("run_round needs node positions")
    n = topology.n_nodes
    pos = Tensor(topology.positions)
    r_frac = state.r / (state.total_rounds - 1) if state.total_rounds > 1 else 0.0

    enc_in = concat([state.x, state.prev_soft, pos,
                     Tensor(np.full((n, 1), r_frac))], axis=1)
    h = apply_mlp(params, heads.encoder, enc_in)

    w = conductances(cond_features if cond_features is not None else h,
                     params[heads.w_raw], topology)

    rich_parts = [h, pos, state.psi,
                  directional_scans(state.psi, topology, cfg.normalize_eps),
                  cross_field_stats(state.psi)]
    if cfg.objects:
        rich_parts.append(state.u_prev)
    rich = concat(rich_parts, axis=1)

    lam = softplus(apply_mlp(params, heads.damping, rich))
    if cfg.lambda_over_n:
        lam = div(lam, float(n))
    b = apply_mlp(params, heads.source, rich)

    cols = []
    for k in range(cfg.fields):
        lam_k = reshape(gather_cols(lam, [k]), (n,))
        b_k = reshape(gather_cols(b, [k]), (n,))
        psi_k, _ = solve_tensor(topology, w, lam_k, b_k, cg_cfg)
        cols.append(reshape(psi_k, (n, 1)))
    psi = concat(cols, axis=1)

    dissipation = dissipation_readout(w, psi, topology)
    scans = directional_scans(psi, topology, cfg.normalize_eps)

    u = state.u_prev
    assignment = None
    if cfg.objects:
        assign_in = concat([normalize_fields(psi, cfg.normalize_eps), pos], axis=1)
        tau_a = add(softplus(params[heads.tau_assign_raw]), 0.05)
        assignment = build_assignment(params, heads.assign, assign_in, tau_a)
        u = vcycle(assignment.rho, concat([psi, dissipation, h], axis=1),
                   heads.objects, params, cg_cfg)

    dec_parts = [psi, dissipation, h, pos, scans]
    if cfg.objects:
        dec_parts.append(u)
    logits = apply_mlp(params, heads.decoder, concat(dec_parts, axis=1))

    tau_r = tau_schedule(state.r, state.total_rounds, cfg.tau_start, cfg.tau_end)
    y_soft = softmax(div(logits, Tensor(tau_r)), axis=1)
    return RoundState(x=state.x, psi=psi, prev_soft=y_soft, u_prev=u,
                      r=state.r + 1, total_rounds=state.total_rounds,
                      tau=tau_r, logits=logits, h=h, assignment=assignment)


def run_model(x, topology: GraphTopology, heads: LayerHeads, params: ModelParams,
              cfg: LayerConfig, cg_cfg: CgConfig = CgConfig(),
              cond_features: Optional[Tensor] = None) -> RoundState:
    """Run all R weight-shared rounds from the cold start; returns the last state."""
    state = initial_state(x, cfg)
    for _ in range(cfg.rounds):
        state = run_round(state, heads, params, topology, cfg, cg_cfg, cond_features)
    return state
