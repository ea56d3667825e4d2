"""Graph topology, weighted Laplacian application, and the screened operator.

The screened operator is A = L_W + diag(lam) with (L_W psi)_i =
sum_{j ~ i} w_ij (psi_i - psi_j). Positive conductances and positive
damping make A symmetric positive definite, so every solve below it is
well posed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ResourceError, ShapeError

DENSE_CAP = 2000


@dataclass(frozen=True)
class GraphTopology:
    """Undirected graph with edges stored once as (i, j), i < j."""

    n_nodes: int
    edges: np.ndarray  # (m, 2) int64
    positions: Optional[np.ndarray] = None  # (n, 2) in [0, 1]
    grid_shape: Optional[tuple[int, int]] = None

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        object.__setattr__(self, "edges", edges)
        if self.n_nodes < 1:
            raise ValueError("graph needs at least one node")
        if edges.size:
            if edges.min() < 0 or edges.max() >= self.n_nodes:
                raise ValueError("edge endpoint out of range")
            if np.any(edges[:, 0] >= edges[:, 1]):
                raise ValueError("edges must satisfy i < j (no self-loops)")
            keys = edges[:, 0] * self.n_nodes + edges[:, 1]
            if len(np.unique(keys)) != len(keys):
                raise ValueError("duplicate edges")
        if self.positions is not None:
            pos = np.asarray(self.positions, dtype=np.float64)
            if pos.shape != (self.n_nodes, 2):
                raise ShapeError("positions must be (n_nodes, 2)")
            object.__setattr__(self, "positions", pos)

    @property
    def n_edges(self) -> int:
        return len(self.edges)


@dataclass(frozen=True)
class ScreenedSystem:
    """Conductances plus per-node damping defining one SPD operator."""

    topology: GraphTopology
    w: np.ndarray    # (m,) strictly positive
    lam: np.ndarray  # (n,) strictly positive

    def __post_init__(self):
        w = np.asarray(self.w, dtype=np.float64).reshape(-1)
        lam = np.asarray(self.lam, dtype=np.float64).reshape(-1)
        if len(w) != self.topology.n_edges:
            raise ShapeError(f"need {self.topology.n_edges} conductances, got {len(w)}")
        if len(lam) != self.topology.n_nodes:
            raise ShapeError(f"need {self.topology.n_nodes} damping values, got {len(lam)}")
        if w.size and w.min() <= 0:
            raise ValueError("conductances must be strictly positive")
        if lam.min() <= 0:
            raise ValueError("damping must be strictly positive")
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "lam", lam)

    @property
    def n_nodes(self) -> int:
        return self.topology.n_nodes


def laplacian_apply(sys: ScreenedSystem, psi: np.ndarray) -> np.ndarray:
    """Matrix-free (L_W + diag(lam)) @ psi in O(|E|)."""
    psi = np.asarray(psi, dtype=np.float64)
    if psi.shape != (sys.n_nodes,):
        raise ShapeError(f"psi must have shape ({sys.n_nodes},), got {psi.shape}")
    out = sys.lam * psi
    if sys.topology.n_edges:
        i, j = sys.topology.edges[:, 0], sys.topology.edges[:, 1]
        flow = sys.w * (psi[i] - psi[j])
        n = sys.n_nodes
        out += np.bincount(i, weights=flow, minlength=n)
        out -= np.bincount(j, weights=flow, minlength=n)
    return out


def assemble_dense(sys: ScreenedSystem, cap: int = DENSE_CAP) -> np.ndarray:
    """Dense A for oracle use; refuses graphs above ``cap`` nodes."""
    n = sys.n_nodes
    if n > cap:
        raise ResourceError(f"dense assembly capped at {cap} nodes, got {n}")
    a = np.diag(sys.lam.copy())
    for (i, j), w in zip(sys.topology.edges, sys.w):
        a[i, i] += w
        a[j, j] += w
        a[i, j] -= w
        a[j, i] -= w
    return a


def dirichlet_energy(sys: ScreenedSystem, psi: np.ndarray, b: np.ndarray) -> float:
    """0.5 sum_e w (psi_i - psi_j)^2 + 0.5 sum_i lam_i psi_i^2 - sum_i b_i psi_i."""
    psi = np.asarray(psi, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if psi.shape != (sys.n_nodes,) or b.shape != (sys.n_nodes,):
        raise ShapeError("psi and b must be per-node vectors")
    edge_term = 0.0
    if sys.topology.n_edges:
        i, j = sys.topology.edges[:, 0], sys.topology.edges[:, 1]
        edge_term = 0.5 * float(np.sum(sys.w * (psi[i] - psi[j]) ** 2))
    return edge_term + 0.5 * float(np.sum(sys.lam * psi * psi)) - float(np.sum(b * psi))


def grid_topology(height: int, width: int, connectivity: int = 4) -> GraphTopology:
    """Row-major grid graph with 4- or 8-neighbour edges.

    Positions are (row, col) normalized to [0, 1] per axis (degenerate
    axes map to 0).
    """
    if height < 1 or width < 1:
        raise ValueError("grid extents must be >= 1")
    if connectivity not in (4, 8):
        raise ValueError(f"connectivity must be 4 or 8, got {connectivity}")
    edges = []
    for r in range(height):
        for c in range(width):
            idx = r * width + c
            if c + 1 < width:
                edges.append((idx, idx + 1))
            if r + 1 < height:
                edges.append((idx, idx + width))
            if connectivity == 8 and r + 1 < height:
                if c + 1 < width:
                    edges.append((idx, idx + width + 1))
                if c - 1 >= 0:
                    edges.append((idx, idx + width - 1))
    rows, cols = np.divmod(np.arange(height * width), width)
    pos = np.stack([
        rows / (height - 1) if height > 1 else np.zeros(height * width),
        cols / (width - 1) if width > 1 else np.zeros(height * width),
    ], axis=1)
    edge_arr = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    return GraphTopology(height * width, edge_arr, positions=pos,
                         grid_shape=(height, width))


def write_graph_text(path, sys: ScreenedSystem) -> None:
    """Text fixture format: first line "n m", then m lines "i j w"."""
    with open(path, "w") as f:
        f.write(f"{sys.n_nodes} {sys.topology.n_edges}\n")
        for (i, j), w in zip(sys.topology.edges, sys.w):
            f.write(f"{i} {j} {w!r}\n")


def read_graph_text(path) -> tuple[GraphTopology, np.ndarray]:
    """Read the text fixture format; returns (topology, conductances)."""
    with open(path) as f:
        header = f.readline().split()
        n, m = int(header[0]), int(header[1])
        edges = np.zeros((m, 2), dtype=np.int64)
        w = np.zeros(m)
        for k in range(m):
            i, j, wk = f.readline().split()
            edges[k] = (int(i), int(j))
            w[k] = float(wk)
    return GraphTopology(n, edges), w
