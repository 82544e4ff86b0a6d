"""Classical baselines: PCA normals, n-jet surface fitting, MST orientation.

The jet fitter models the neighborhood as a polynomial heightfield
z = sum_{k<=n} sum_{j<=k} a[k-j,j] x^(k-j) y^j in a local frame whose z-axis
follows an initial PCA normal estimate; the surface normal then is
(-a10, -a01, 1) normalized, rotated back to world coordinates.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components, minimum_spanning_tree

from .errors import DisconnectedGraph, RankDeficient
from .geometry import KdIndex, Patch, PointCloud


def n_jet_terms(order: int):
    """Monomial exponent pairs (k-j, j) in the canonical coefficient order."""
    return [(k - j, j) for k in range(order + 1) for j in range(k + 1)]


@dataclass
class JetCoefficients:
    order: int
    alpha: np.ndarray     # length (n+1)(n+2)/2, ordered (a00, a10, a01, a20, ...)
    frame: np.ndarray     # 3x3 rotation, world -> fitting frame (z along normal)


def canonical_sign(v: np.ndarray) -> np.ndarray:
    """Flip v so its z-component (or first nonzero component) is positive."""
    v = np.asarray(v, dtype=np.float64)
    if abs(v[2]) > 1e-15:
        return v if v[2] > 0 else -v
    for comp in v:
        if abs(comp) > 1e-15:
            return v if comp > 0 else -v
    return v


def pca_normal(patch: Patch) -> np.ndarray:
    """Unoriented PCA normal: smallest-eigenvalue direction of the covariance."""
    pts = patch.local_coords
    if len(pts) < 3:
        raise RankDeficient("need at least 3 points")
    centered = pts - pts.mean(axis=0)
    cov = centered.T @ centered / len(pts)
    eigvals, eigvecs = np.linalg.eigh(cov)
    if eigvals[0] < 1e-12 and eigvals[1] < 1e-12:
        raise RankDeficient("neighbors are collinear")
    normal = eigvecs[:, 0]
    normal = normal / np.linalg.norm(normal)
    return canonical_sign(normal)


def _tangent_frame(normal: np.ndarray) -> np.ndarray:
    """Rotation with rows (t1, t2, normal), deterministic for a given normal."""
    helper = np.array([1.0, 0.0, 0.0])
    if abs(normal @ helper) > 0.9:
        helper = np.array([0.0, 1.0, 0.0])
    t1 = np.cross(normal, helper)
    t1 /= np.linalg.norm(t1)
    t2 = np.cross(normal, t1)
    return np.vstack([t1, t2, normal])


def jet_fit(patch: Patch, order: int, frame: np.ndarray | None = None) -> JetCoefficients:
    """Least-squares n-jet fit in the PCA tangent frame.

    Solved by normal equations with Tikhonov damping 1e-10 on the diagonal so
    near-degenerate patches yield a (slightly biased) solution instead of a
    silent singular system.
    """
    terms = n_jet_terms(order)
    if len(patch.local_coords) < len(terms):
        raise RankDeficient(
            f"{len(patch.local_coords)} points cannot determine {len(terms)} coefficients"
        )
    if frame is None:
        frame = _tangent_frame(pca_normal(patch))
    local = patch.local_coords @ frame.T
    x, y, z = local[:, 0], local[:, 1], local[:, 2]
    design = np.column_stack([x ** px * y ** py for px, py in terms])
    lhs = design.T @ design + 1e-10 * np.eye(len(terms))
    rhs = design.T @ z
    try:
        alpha = np.linalg.solve(lhs, rhs)
    except np.linalg.LinAlgError:
        raise RankDeficient("damped normal equations are singular") from None
    return JetCoefficients(order=order, alpha=alpha, frame=frame)


def jet_normal(coef: JetCoefficients) -> np.ndarray:
    """World-frame unoriented normal of the fitted jet at the origin."""
    a10, a01 = coef.alpha[1], coef.alpha[2]
    local = np.array([-a10, -a01, 1.0]) / np.sqrt(1.0 + a10 ** 2 + a01 ** 2)
    world = coef.frame.T @ local
    return canonical_sign(world)


def mst_orient(cloud: PointCloud, unoriented, k_graph: int):
    """Propagate a consistent orientation over the minimum spanning tree.

    Builds the k-NN graph with weights 1 - |ni.nj| (cheap edges between
    near-parallel normals), seeds at the
    highest-z point forcing its normal upward, then flips each child normal
    that disagrees with its tree parent.
    """
    normals = np.array(unoriented, dtype=np.float64).reshape(-1, 3)
    n = len(cloud)
    if len(normals) != n:
        raise ValueError("one normal per point required")
    if k_graph < 2:
        raise ValueError("k_graph must be >= 2")

    index = KdIndex(cloud)
    kk = min(k_graph + 1, n)
    edges = set()
    for i in range(n):
        idx, _ = index.knn(cloud.points[i], kk)
        for j in idx:
            if j != i:
                edges.add((i, j) if i < j else (j, i))
    rows, cols, weights = [], [], []
    for a, b in edges:
        rows.append(a)
        cols.append(b)
        # +1 keeps zero-weight (parallel-normal) edges visible to the
        # sparse MST routine; a constant offset cannot change the tree.
        weights.append(1.0 - abs(normals[a] @ normals[b]) + 1.0)
    graph = coo_matrix((weights, (rows, cols)), shape=(n, n)).tocsr()

    n_comp, _ = connected_components(graph, directed=False)
    if n_comp > 1:
        raise DisconnectedGraph(n_comp)

    tree = minimum_spanning_tree(graph).tocoo()
    adjacency = [[] for _ in range(n)]
    for a, b in zip(tree.row, tree.col):
        adjacency[a].append(b)
        adjacency[b].append(a)

    seed = int(np.lexsort((np.arange(n), -cloud.points[:, 2]))[0])
    oriented = normals.copy()
    if oriented[seed, 2] < 0:
        oriented[seed] = -oriented[seed]

    visited = np.zeros(n, dtype=bool)
    visited[seed] = True
    queue = deque([seed])
    while queue:
        parent = queue.popleft()
        for child in adjacency[parent]:
            if visited[child]:
                continue
            visited[child] = True
            if oriented[parent] @ oriented[child] < 0:
                oriented[child] = -oriented[child]
            queue.append(child)
    return oriented
