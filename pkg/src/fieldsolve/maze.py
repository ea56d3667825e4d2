"""Trainable maze pathfinding on top of the screened-Poisson layer.

Mazes are perfect (spanning-tree) mazes carved by randomized DFS, so any
two corridor cells are joined by exactly one path. Cell types reach the
model only as anonymous integer indices; a learned 4-dim type embedding
feeds both the encoder and the 4x4 bilinear conductance form, which has
to discover on its own that walls should not conduct.

Damping can be divided by the node count (lambda/N) to keep the balance
between screening and the graph Laplacian independent of grid size; this
is the knob behind transfer to larger mazes than were trained on.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .cg import CgConfig, cg_solve, solve_tensor
from .graph import GraphTopology, ScreenedSystem, grid_topology
from .params import Adam, AdamConfig, MlpSpec, ModelParams, apply_mlp, init_mlp
from .poisson_layer import (conductances, directional_scans,
                            dissipation_readout, normalize_fields)
from .tensor import (Tape, Tensor, concat, div, gather, gather_cols,
                     log_softmax, mul, neg, reshape, softplus, tsum)

# generator-private type indices; the model only ever sees the integers
WALL, CORRIDOR, SOURCE, GOAL = 0, 1, 2, 3
# per-cell output classes
LBL_OFF, LBL_PATH, LBL_SOURCE, LBL_GOAL, LBL_WALL = 0, 1, 2, 3, 4

POSITIVE_LABELS = (LBL_PATH, LBL_SOURCE, LBL_GOAL)


@dataclass(frozen=True)
class Maze:
    grid: np.ndarray    # (H, W) type indices in {0..3}
    labels: np.ndarray  # (H, W) classes in {0..4}

    @property
    def height(self) -> int:
        return self.grid.shape[0]

    @property
    def width(self) -> int:
        return self.grid.shape[1]


def _corridor_neighbors(grid: np.ndarray, r: int, c: int):
    h, w = grid.shape
    for dr, dc in ((0, 1), (0, -1), (1, 0), (-1, 0)):
        rr, cc = r + dr, c + dc
        if 0 <= rr < h and 0 <= cc < w and grid[rr, cc] != WALL:
            yield rr, cc


def generate_maze(height: int, width: int, seed: int) -> Maze:
    """Randomized-DFS spanning-tree maze with one source and one goal.

    Needs odd extents >= 5 so the carving lattice is well formed. The
    corridor set is a tree, hence the source-goal path is unique; labels
    mark that path plus the endpoints.
    """
    if height < 5 or width < 5 or height % 2 == 0 or width % 2 == 0:
        raise ValueError("maze extents must be odd and >= 5")
    rng = np.random.default_rng(seed)
    grid = np.full((height, width), WALL, dtype=np.int64)
    lattice = [(r, c) for r in range(1, height, 2) for c in range(1, width, 2)]
    start = lattice[int(rng.integers(len(lattice)))]
    grid[start] = CORRIDOR
    stack = [start]
    visited = {start}
    while stack:
        r, c = stack[-1]
        options = []
        for dr, dc in ((0, 2), (0, -2), (2, 0), (-2, 0)):
            rr, cc = r + dr, c + dc
            if 1 <= rr < height - 1 and 1 <= cc < width - 1 and (rr, cc) not in visited:
                options.append((rr, cc))
        if not options:
            stack.pop()
            continue
        nxt = options[int(rng.integers(len(options)))]
        grid[(r + nxt[0]) // 2, (c + nxt[1]) // 2] = CORRIDOR
        grid[nxt] = CORRIDOR
        visited.add(nxt)
        stack.append(nxt)

    corridors = list(zip(*np.nonzero(grid != WALL)))
    src_i, goal_i = rng.choice(len(corridors), size=2, replace=False)
    src, goal = corridors[int(src_i)], corridors[int(goal_i)]
    grid[src], grid[goal] = SOURCE, GOAL

    # unique tree path via BFS parents
    parent = {src: None}
    queue = deque([src])
    while queue:
        cell = queue.popleft()
        if cell == goal:
            break
        for nb in _corridor_neighbors(grid, *cell):
            if nb not in parent:
                parent[nb] = cell
                queue.append(nb)
    path = []
    cell = goal
    while cell is not None:
        path.append(cell)
        cell = parent[cell]

    labels = np.where(grid == WALL, LBL_WALL, LBL_OFF).astype(np.int64)
    for cell in path:
        labels[cell] = LBL_PATH
    labels[src] = LBL_SOURCE
    labels[goal] = LBL_GOAL
    return Maze(grid, labels)


def maze_to_text(maze: Maze, predictions: Optional[np.ndarray] = None) -> str:
    """Serialize as "H W" then H rows of W digits (plus predictions if given)."""
    lines = [f"{maze.height} {maze.width}"]
    lines += ["".join(str(int(v)) for v in row) for row in maze.grid]
    if predictions is not None:
        lines += ["".join(str(int(v)) for v in row) for row in predictions]
    return "\n".join(lines) + "\n"


def maze_from_text(text: str) -> Maze:
    """Read the digit-grid format; path labels are recomputed from the grid."""
    lines = [ln for ln in text.strip().splitlines() if ln.strip()]
    h, w = (int(v) for v in lines[0].split())
    grid = np.array([[int(ch) for ch in lines[1 + r][:w]] for r in range(h)],
                    dtype=np.int64)
    src = tuple(np.argwhere(grid == SOURCE)[0])
    goal = tuple(np.argwhere(grid == GOAL)[0])
    parent = {src: None}
    queue = deque([src])
    while queue:
        cell = queue.popleft()
        for nb in _corridor_neighbors(grid, *cell):
            if nb not in parent:
                parent[nb] = cell
                queue.append(nb)
    labels = np.where(grid == WALL, LBL_WALL, LBL_OFF).astype(np.int64)
    cell = goal
    while cell is not None:
        labels[cell] = LBL_PATH
        cell = parent[cell]
    labels[src] = LBL_SOURCE
    labels[goal] = LBL_GOAL
    return Maze(grid, labels)


@dataclass(frozen=True)
class MazeModelConfig:
    """Defaults sized to roughly 43.8K parameters."""

    k_fields: int = 2
    rounds: int = 1
    type_count: int = 4
    embed_dim: int = 4
    d_h: int = 72
    hidden: tuple[int, ...] = (72, 72)
    n_classes: int = 5
    lambda_over_n: bool = True
    # trained mazes drive wall conductances toward zero, which makes the
    # screened system ill-conditioned; Jacobi scaling plus a slightly
    # looser tolerance keeps CG convergent at 64-bit
    rel_tol: float = 1e-8
    jacobi: bool = True
    max_iter_slack: int = 60
    lr: float = 6e-3
    beta1: float = 0.9
    beta2: float = 0.999
    cosine_decay: bool = True
    # per-class loss weights; the on-path classes are rare, so they are
    # upweighted to keep the optimum away from the never-predict-path trap
    class_weights: tuple[float, ...] = (1.0, 4.0, 4.0, 4.0, 1.0)

    def to_json(self) -> str:
        return json.dumps({
            "k_fields": self.k_fields, "rounds": self.rounds,
            "type_count": self.type_count, "embed_dim": self.embed_dim,
            "d_h": self.d_h, "hidden": list(self.hidden),
            "n_classes": self.n_classes, "lambda_over_n": self.lambda_over_n,
            "rel_tol": self.rel_tol, "jacobi": self.jacobi,
            "max_iter_slack": self.max_iter_slack,
            "lr": self.lr, "beta1": self.beta1, "beta2": self.beta2,
            "cosine_decay": self.cosine_decay,
            "class_weights": list(self.class_weights),
        }, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MazeModelConfig":
        raw = json.loads(text)
        known = {"k_fields", "rounds", "type_count", "embed_dim", "d_h", "hidden",
                 "n_classes", "lambda_over_n", "rel_tol", "jacobi",
                 "max_iter_slack", "lr", "beta1", "beta2", "cosine_decay",
                 "class_weights"}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        for key in ("hidden", "class_weights"):
            if key in raw:
                raw[key] = tuple(raw[key])
        return cls(**raw)


class MazeModel:
    """Type embedding + one screened-Poisson solve + per-cell classifier.

    The single-round instantiation: h = MLP(embedding, position) feeds
    damping and source heads, the 4x4 bilinear form over type embeddings
    sets edge conductances, K fields are solved by CG, and the decoder
    classifies each cell from the fields, their dissipation, directional
    scans, h, and position. The field-derived decoder inputs are z-scored
    per grid, so their distribution does not drift with maze size; that,
    together with lambda/N damping, is what lets a trained model run on
    larger mazes than it saw.
    """

    def __init__(self, cfg: MazeModelConfig = MazeModelConfig(), seed: int = 0):
        self.cfg = cfg
        self.params = ModelParams(seed)
        rng = np.random.default_rng(seed)
        self.params.add("type_embed",
                        rng.standard_normal((cfg.type_count, cfg.embed_dim)))
        # positive diagonal keeps the relu'd symmetric part alive at init;
        # a fully dead W_sym would freeze every conductance at softplus(0)
        self.params.add("w_raw", 0.5 * np.eye(cfg.embed_dim)
                        + 0.2 * rng.standard_normal((cfg.embed_dim, cfg.embed_dim)))
        k, d_h = cfg.k_fields, cfg.d_h
        self.encoder: MlpSpec = init_mlp(
            self.params, "enc", [cfg.embed_dim + 2, *cfg.hidden, d_h], rng)
        self.damping: MlpSpec = init_mlp(
            self.params, "damp", [d_h + 2, *cfg.hidden, k], rng)
        self.source: MlpSpec = init_mlp(
            self.params, "src", [d_h + 2, *cfg.hidden, k], rng)
        self.decoder: MlpSpec = init_mlp(
            self.params, "dec",
            [k + k + 8 * k + d_h + 2, *cfg.hidden, cfg.n_classes],
            rng, zero_last=True)
        self._topologies: dict[tuple[int, int], GraphTopology] = {}

    def topology(self, height: int, width: int) -> GraphTopology:
        key = (height, width)
        if key not in self._topologies:
            self._topologies[key] = grid_topology(height, width, 4)
        return self._topologies[key]

    def cg_config(self, n_nodes: int) -> CgConfig:
        return CgConfig(max_iters=2 * n_nodes + self.cfg.max_iter_slack,
                        rel_tol=self.cfg.rel_tol, jacobi=self.cfg.jacobi)

    def build_system(self, maze: Maze):
        """Differentiable (topology, w, lam, b) of one maze.

        Conductances are the 4x4 bilinear form over type embeddings;
        damping is softplus(MLP)/N when lambda-over-N scaling is on.
        """
        top = self.topology(maze.height, maze.width)
        emb = gather(self.params["type_embed"], maze.grid.reshape(-1))
        w = conductances(emb, self.params["w_raw"], top) + 1e-12
        pos = Tensor(top.positions)
        h = apply_mlp(self.params, self.encoder, concat([emb, pos], axis=1))
        rich = concat([h, pos], axis=1)
        # the 1e-12 floor keeps the operator definite when softplus underflows
        lam = softplus(apply_mlp(self.params, self.damping, rich)) + 1e-12
        if self.cfg.lambda_over_n:
            lam = div(lam, float(top.n_nodes))
        b = apply_mlp(self.params, self.source, rich)
        return top, w, lam, b, h, pos

    def forward(self, maze: Maze) -> Tensor:
        """Per-cell logits; differentiable when run under an active tape."""
        top, w, lam, b, h, pos = self.build_system(maze)
        n = top.n_nodes
        cfg = self.cg_config(n)
        cols = []
        for k in range(self.cfg.k_fields):
            lam_k = reshape(gather_cols(lam, [k]), (n,))
            b_k = reshape(gather_cols(b, [k]), (n,))
            psi_k, _ = solve_tensor(top, w, lam_k, b_k, cfg)
            cols.append(reshape(psi_k, (n, 1)))
        psi = concat(cols, axis=1)
        dissipation = dissipation_readout(w, psi, top)
        scans = directional_scans(psi, top)
        features = concat([normalize_fields(psi), normalize_fields(dissipation),
                           normalize_fields(scans), h, pos], axis=1)
        return apply_mlp(self.params, self.decoder, features)

    def predict(self, maze: Maze) -> np.ndarray:
        """Argmax class per cell (ties resolve to the lower class index)."""
        return self.forward(maze).data.argmax(axis=1).reshape(maze.grid.shape)

    def edge_conductances(self, maze: Maze) -> np.ndarray:
        """Learned conductances of one maze's grid edges (diagnostic)."""
        top = self.topology(maze.height, maze.width)
        emb = gather(self.params["type_embed"], maze.grid.reshape(-1))
        return conductances(emb, self.params["w_raw"], top).data


def cross_entropy(logits: Tensor, labels: np.ndarray,
                  class_weights: Optional[Sequence[float]] = None) -> Tensor:
    """Per-cell cross-entropy, optionally class-weighted (weight-normalized)."""
    n, c = logits.shape
    weights = np.ones(c) if class_weights is None else np.asarray(class_weights, float)
    onehot = np.zeros((n, c))
    onehot[np.arange(n), labels] = weights[labels]
    return neg(tsum(mul(log_softmax(logits, axis=1), Tensor(onehot)))) / float(onehot.sum())


@dataclass
class TrainLog:
    losses: list = field(default_factory=list)
    aborted: bool = False
    abort_step: Optional[int] = None


def train(corpus: Sequence[Maze], model: MazeModel, steps: int, seed: int,
          log_every: int = 0) -> TrainLog:
    """Adam training over weighted per-cell cross-entropy, one maze per step.

    The learning rate follows a cosine decay to zero over the step budget
    unless the config disables it. Deterministic given (corpus, model
    seed, steps, seed). On a NaN loss the previous step's parameters are
    restored and training stops.
    """
    if not corpus:
        raise ValueError("training corpus is empty")
    cfg = model.cfg
    opt = Adam(model.params, AdamConfig(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2))
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(corpus))
    log = TrainLog()
    backup = model.params.state_arrays()
    for step in range(steps):
        if step % len(corpus) == 0 and step > 0:
            order = rng.permutation(len(corpus))
        if cfg.cosine_decay:
            lr = cfg.lr * 0.5 * (1.0 + np.cos(np.pi * step / steps))
            opt.cfg = AdamConfig(lr=lr, beta1=cfg.beta1, beta2=cfg.beta2)
        maze = corpus[order[step % len(corpus)]]
        with Tape() as tape:
            logits = model.forward(maze)
            loss = cross_entropy(logits, maze.labels.reshape(-1), cfg.class_weights)
            loss_val = float(loss.data)
            if not np.isfinite(loss_val):
                model.params.load_state(backup)
                log.aborted = True
                log.abort_step = step
                return log
            tape.backward(loss)
        backup = model.params.state_arrays()
        grads = {name: tape.grad(model.params[name])
                 for name in model.params.names()}
        opt.step({k: g for k, g in grads.items() if g is not None})
        log.losses.append(loss_val)
        if log_every and step % log_every == 0:
            print(f"step {step}: loss {loss_val:.4f}")
    return log


def binary_counts(pred: np.ndarray, labels: np.ndarray,
                  include_endpoints: bool = True) -> tuple[int, int, int]:
    """(tp, fp, fn) of the on-path indicator."""
    positive = POSITIVE_LABELS if include_endpoints else (LBL_PATH,)
    p = np.isin(pred, positive)
    t = np.isin(labels, positive)
    tp = int(np.sum(p & t))
    fp = int(np.sum(p & ~t))
    fn = int(np.sum(~p & t))
    return tp, fp, fn


def evaluate_f1(model: MazeModel, mazes: Sequence[Maze],
                include_endpoints: bool = True) -> float:
    """Micro-averaged binary F1 of on-path cell predictions."""
    tp = fp = fn = 0
    for maze in mazes:
        a, b, c = binary_counts(model.predict(maze), maze.labels, include_endpoints)
        tp, fp, fn = tp + a, fp + b, fn + c
    denom = 2 * tp + fp + fn
    return 2.0 * tp / denom if denom else 0.0


def size_generalization(model: MazeModel, eval_size: int, n_eval: int,
                        seed: int, include_endpoints: bool = True) -> dict:
    """Evaluate on fresh mazes of a new size without retraining."""
    mazes = [generate_maze(eval_size, eval_size, seed + 1000 + i)
             for i in range(n_eval)]
    per_maze = []
    tp = fp = fn = 0
    for maze in mazes:
        a, b, c = binary_counts(model.predict(maze), maze.labels, include_endpoints)
        tp, fp, fn = tp + a, fp + b, fn + c
        d = 2 * a + b + c
        per_maze.append(2.0 * a / d if d else 0.0)
    denom = 2 * tp + fp + fn
    return {
        "eval_size": eval_size,
        "n_eval": n_eval,
        "f1": 2.0 * tp / denom if denom else 0.0,
        "per_maze": per_maze,
    }


def harmonic_baseline(maze: Maze, threshold: float = 0.5) -> np.ndarray:
    """Predict on-path by thresholding the raw screened-Poisson potential.

    Hand-set physics: conductance 1.0 between corridor cells, 1e-4 on
    wall-incident edges, uniform small damping, +1 source and -1 goal
    charge. The normalized potential is thresholded; no learning.
    """
    top = grid_topology(maze.height, maze.width, 4)
    grid = maze.grid.reshape(-1)
    i, j = top.edges[:, 0], top.edges[:, 1]
    open_i, open_j = grid[i] != WALL, grid[j] != WALL
    w = np.where(open_i & open_j, 1.0, 1e-4)
    lam = np.full(top.n_nodes, 1e-3 / top.n_nodes)
    b = np.zeros(top.n_nodes)
    b[grid == SOURCE] = 1.0
    b[grid == GOAL] = -1.0
    sys = ScreenedSystem(top, w, lam)
    psi = cg_solve(sys, b, CgConfig(max_iters=4 * top.n_nodes, rel_tol=1e-8)).psi
    lo, hi = psi.min(), psi.max()
    norm = (psi - lo) / (hi - lo) if hi > lo else np.zeros_like(psi)
    pred = np.where(norm >= threshold, LBL_PATH, LBL_OFF)
    pred[grid == WALL] = LBL_WALL
    return pred.reshape(maze.grid.shape)


def conductance_structure(model: MazeModel, mazes: Sequence[Maze]) -> dict:
    """Mean learned conductance on wall-incident vs corridor-corridor edges."""
    wall_vals, open_vals = [], []
    for maze in mazes:
        top = model.topology(maze.height, maze.width)
        w = model.edge_conductances(maze)
        grid = maze.grid.reshape(-1)
        i, j = top.edges[:, 0], top.edges[:, 1]
        open_edge = (grid[i] != WALL) & (grid[j] != WALL)
        wall_vals.append(w[~open_edge])
        open_vals.append(w[open_edge])
    wall_mean = float(np.mean(np.concatenate(wall_vals)))
    open_mean = float(np.mean(np.concatenate(open_vals)))
    return {
        "wall_incident_mean": wall_mean,
        "corridor_corridor_mean": open_mean,
        "separated": wall_mean < open_mean,
    }
