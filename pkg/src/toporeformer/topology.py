"""0-dimensional Vietoris-Rips persistence and the topological loss.

For 0-dimensional homology of a Rips filtration every point is born at 0
and components die when an edge of the minimum spanning tree joins them,
so the persistence pairing is exactly the MST edge set and the death
times are the MST edge lengths.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import maximum_bipartite_matching

from .autodiff import Tensor, active_tape
from .errors import DimensionMismatch, DimMismatch, NonFinite, ShapeMismatch, StalePairing

_DEGENERATE = 1e-12


@dataclass(frozen=True)
class PersistenceDiagram:
    """Multiset of (birth, death) bars; the essential bar is omitted."""

    bars: np.ndarray  # shape (k, 2)
    dim: int = 0

    def __len__(self) -> int:
        return len(self.bars)

    def deaths(self) -> np.ndarray:
        return self.bars[:, 1]

    def to_csv_rows(self) -> list[str]:
        return [f"{self.dim},{float(b)!r},{float(d)!r}" for b, d in self.bars]


def _points(cloud) -> np.ndarray:
    pts = np.asarray(cloud.data if isinstance(cloud, Tensor) else cloud, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts[:, None]
    if pts.ndim != 2 or pts.shape[0] < 1:
        raise ShapeMismatch(f"point cloud must be (n >= 1, D), got {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise NonFinite("point cloud contains NaN or Inf")
    return pts


def pairwise_distances(cloud) -> np.ndarray:
    """Euclidean distance matrix, exactly symmetric with a zero diagonal."""
    pts = _points(cloud)
    n = pts.shape[0]
    iu, ju = np.triu_indices(n, k=1)
    diff = pts[iu] - pts[ju]
    d = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    out = np.zeros((n, n))
    out[iu, ju] = d
    out[ju, iu] = d
    return out


class _UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))
        self.rank = [0] * n

    def find(self, a: int) -> int:
        root = a
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[a] != root:
            self.parent[a], a = root, self.parent[a]
        return root

    def union(self, a: int, b: int) -> bool:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return False
        if self.rank[ra] < self.rank[rb]:
            ra, rb = rb, ra
        self.parent[rb] = ra
        if self.rank[ra] == self.rank[rb]:
            self.rank[ra] += 1
        return True


def persistence0(dist: np.ndarray) -> tuple[np.ndarray, PersistenceDiagram]:
    """Kruskal over edges sorted by (distance, i, j).

    Returns the pairing as an ``(n-1, 2)`` int array of ``(i, j)`` with
    ``i < j`` in acceptance order, and the diagram of ``(0, death)`` bars.
    """
    dist = np.asarray(dist, dtype=np.float64)
    if dist.ndim != 2 or dist.shape[0] != dist.shape[1] or dist.shape[0] < 1:
        raise ShapeMismatch(f"distance matrix must be square and non-empty, got {dist.shape}")
    if not np.all(np.isfinite(dist)):
        raise NonFinite("distance matrix contains NaN or Inf")
    n = dist.shape[0]
    iu, ju = np.triu_indices(n, k=1)
    w = dist[iu, ju]
    order = np.lexsort((ju, iu, w))
    uf = _UnionFind(n)
    edges = []
    for e in order:
        i, j = int(iu[e]), int(ju[e])
        if uf.union(i, j):
            edges.append((i, j))
            if len(edges) == n - 1:
                break
    pairing = np.array(edges, dtype=np.int64).reshape(-1, 2)
    deaths = dist[pairing[:, 0], pairing[:, 1]]
    bars = np.column_stack([np.zeros_like(deaths), deaths])
    return pairing, PersistenceDiagram(bars)


def _check_pairing(pairing: np.ndarray, n: int) -> np.ndarray:
    pairing = np.asarray(pairing, dtype=np.int64).reshape(-1, 2)
    if len(pairing) != n - 1:
        raise StalePairing(f"pairing has {len(pairing)} edges, expected {n - 1}")
    return pairing


def topo_loss(a_x: np.ndarray, a_z: np.ndarray, pi_x, pi_z) -> tuple[float, float, float]:
    """Return ``(L_t, L_xz, L_zx)``.

    ``L_xz`` compares the two matrices on the edges selected by the input
    pairing, ``L_zx`` on those selected by the latent pairing.
    """
    a_x = np.asarray(a_x, dtype=np.float64)
    a_z = np.asarray(a_z, dtype=np.float64)
    if a_x.shape != a_z.shape or a_x.ndim != 2:
        raise DimensionMismatch(f"distance matrices {a_x.shape} vs {a_z.shape}")
    n = a_x.shape[0]
    pi_x = _check_pairing(pi_x, n)
    pi_z = _check_pairing(pi_z, n)
    dx = a_x[pi_x[:, 0], pi_x[:, 1]] - a_z[pi_x[:, 0], pi_x[:, 1]]
    dz = a_z[pi_z[:, 0], pi_z[:, 1]] - a_x[pi_z[:, 0], pi_z[:, 1]]
    l_xz = 0.5 * float(dx @ dx)
    l_zx = 0.5 * float(dz @ dz)
    return l_xz + l_zx, l_xz, l_zx


def _distance_grad(pts: np.ndarray, edges: np.ndarray, coeff: np.ndarray) -> np.ndarray:
    """Gradient of ``sum_e coeff_e * ||p_i - p_j||`` with respect to ``pts``."""
    grad = np.zeros_like(pts)
    if len(edges) == 0:
        return grad
    i, j = edges[:, 0], edges[:, 1]
    diff = pts[i] - pts[j]
    norm = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    live = norm >= _DEGENERATE
    unit = np.zeros_like(diff)
    unit[live] = diff[live] / norm[live, None]
    contrib = coeff[:, None] * unit
    np.add.at(grad, i, contrib)
    np.add.at(grad, j, -contrib)
    return grad


def topo_loss_backward(x, z, pi_x, pi_z) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of ``L_t`` with respect to the two point clouds.

    Pairings are held fixed; edges of (near) zero length contribute nothing.
    """
    px, pz = _points(x), _points(z)
    if px.shape[0] != pz.shape[0]:
        raise DimensionMismatch(f"clouds have {px.shape[0]} and {pz.shape[0]} points")
    n = px.shape[0]
    pi_x = _check_pairing(pi_x, n)
    pi_z = _check_pairing(pi_z, n)
    edges = np.concatenate([pi_x, pi_z])

    def lengths(p):
        diff = p[edges[:, 0]] - p[edges[:, 1]]
        return np.sqrt(np.einsum("ij,ij->i", diff, diff))

    # d/dA_X of the squared mismatch is (A_X - A_Z) on both pairing sets
    resid = lengths(px) - lengths(pz)
    return _distance_grad(px, edges, resid), _distance_grad(pz, edges, -resid)


def topological_loss(x, z):
    """``L_t`` between two batches as a taped scalar.

    Both arguments are ``(n, ...)`` tensors; rows are flattened into points.
    Pairings are recomputed from the current values and treated as
    constants, so the recorded gradient is the one from
    :func:`topo_loss_backward`.
    """
    xt = x if isinstance(x, Tensor) else Tensor(x)
    zt = z if isinstance(z, Tensor) else Tensor(z)
    n = xt.shape[0]
    px = xt.data.reshape(n, -1)
    pz = zt.data.reshape(n, -1)
    a_x, a_z = pairwise_distances(px), pairwise_distances(pz)
    pi_x, _ = persistence0(a_x)
    pi_z, _ = persistence0(a_z)
    value, _, _ = topo_loss(a_x, a_z, pi_x, pi_z)

    tape = active_tape() or xt.tape or zt.tape
    if tape is None:
        return Tensor(value)

    x_shape, z_shape = xt.shape, zt.shape  # the closure must not hold taped tensors

    def vjp(g):
        gx, gz = topo_loss_backward(px, pz, pi_x, pi_z)
        return float(g) * gx.reshape(x_shape), float(g) * gz.reshape(z_shape)

    return tape.custom([xt, zt], np.asarray(value), vjp)


# ----------------------------------------------------------- bottleneck


def _as_diagram(d) -> PersistenceDiagram:
    if isinstance(d, PersistenceDiagram):
        return d
    return PersistenceDiagram(np.asarray(d, dtype=np.float64).reshape(-1, 2))


def _perfect_matching_exists(cost: np.ndarray, threshold: float) -> bool:
    graph = csr_matrix(cost <= threshold)
    match = maximum_bipartite_matching(graph, perm_type="column")
    return bool(np.all(match >= 0))


def bottleneck_cost_matrix(d1: PersistenceDiagram, d2: PersistenceDiagram) -> np.ndarray:
    """Square cost matrix of the diagonal-augmented bipartite problem.

    Rows are bars of ``d1`` followed by one diagonal slot per bar of ``d2``;
    columns are bars of ``d2`` followed by one diagonal slot per bar of
    ``d1``.
    """
    a, b = d1.bars, d2.bars
    n1, n2 = len(a), len(b)
    size = n1 + n2
    cost = np.zeros((size, size))
    half_a = (a[:, 1] - a[:, 0]) / 2.0
    half_b = (b[:, 1] - b[:, 0]) / 2.0
    if n1 and n2:
        cost[:n1, :n2] = np.maximum(
            np.abs(a[:, None, 0] - b[None, :, 0]), np.abs(a[:, None, 1] - b[None, :, 1])
        )
    # a bar may only go to its own diagonal slot
    cost[:n1, n2:] = np.inf
    cost[np.arange(n1), n2 + np.arange(n1)] = half_a
    cost[n1:, :n2] = np.inf
    cost[n1 + np.arange(n2), np.arange(n2)] = half_b
    return cost


def bottleneck0(d1, d2) -> float:
    """Bottleneck distance between two persistence diagrams.

    Binary search over the finite candidate costs; feasibility at a
    threshold is a perfect matching in the thresholded bipartite graph.
    """
    d1, d2 = _as_diagram(d1), _as_diagram(d2)
    if d1.dim != d2.dim:
        raise DimMismatch(f"diagrams of dimension {d1.dim} and {d2.dim}")
    if len(d1) + len(d2) == 0:
        return 0.0
    cost = bottleneck_cost_matrix(d1, d2)
    candidates = np.unique(cost[np.isfinite(cost)])
    lo, hi = 0, len(candidates) - 1
    while lo < hi:
        mid = (lo + hi) // 2
        if _perfect_matching_exists(cost, candidates[mid]):
            hi = mid
        else:
            lo = mid + 1
    return float(candidates[lo])
