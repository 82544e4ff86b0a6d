"""Point-cloud containers, file I/O, k-NN search, patches and synthetic shapes.

Coordinates are plain float64 numpy arrays. `.xyz` files are ASCII with 3
(points) or 6 (points + normals) whitespace-separated columns per line;
'#' starts a comment line. `.normals` files carry 3 columns per line,
row i being the normal of point i.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegeneratePatch, EmptyCloud, EmptyInput, MalformedLine


def _unit_rows(v):
    """Normalize rows of v to unit length."""
    v = np.asarray(v, dtype=np.float64)
    norms = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / norms


@dataclass
class PointCloud:
    """Positions with optional ground-truth oriented normals.

    Immutable by convention; operations return new clouds.
    """

    points: np.ndarray
    normals: np.ndarray | None = None
    bbox_diagonal: float = field(default=0.0)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if len(self.points) == 0:
            raise EmptyCloud("point cloud has no points")
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
            if len(self.normals) != len(self.points):
                raise ValueError(
                    f"{len(self.normals)} normals for {len(self.points)} points"
                )
        if not self.bbox_diagonal:
            self.bbox_diagonal = float(
                np.linalg.norm(self.points.max(axis=0) - self.points.min(axis=0))
            )

    def __len__(self):
        return len(self.points)


class KdIndex:
    """Balanced spatial index with deterministic k-NN queries.

    Queries return exactly min(k, N) neighbors sorted by ascending distance,
    ties broken by ascending point index (brute-force-equivalent).
    """

    def __init__(self, cloud: PointCloud, leaf_size: int = 16):
        if leaf_size < 1:
            raise ValueError("leaf_size must be positive")
        self.points = cloud.points
        self.leaf_size = leaf_size
        self._tree = cKDTree(cloud.points, leafsize=leaf_size)

    def knn(self, query, k: int):
        """k nearest neighbors of a 3D query position.

        Returns (indices, distances) as aligned arrays of length min(k, N).
        """
        if k < 1:
            raise ValueError("k must be >= 1")
        n = len(self.points)
        kk = min(k, n)
        dist, idx = self._tree.query(np.asarray(query, dtype=np.float64), k=kk)
        dist = np.atleast_1d(dist)
        idx = np.atleast_1d(idx)
        # The tree's own tie-breaking at the k-th distance is unspecified;
        # pull every point within that radius and re-rank deterministically.
        radius = dist[-1]
        cand = self._tree.query_ball_point(query, radius * (1.0 + 1e-12) + 1e-300)
        cand = np.asarray(sorted(cand), dtype=np.intp)
        cand_dist = np.linalg.norm(self.points[cand] - query, axis=1)
        order = np.lexsort((cand, cand_dist))[:kk]
        return cand[order], cand_dist[order]


@dataclass
class Patch:
    """A query point with its k nearest neighbors in canonical coordinates.

    local_coords holds the neighbors translated so the query sits at the
    origin and scaled by 1/patch_radius (distance to the k-th neighbor),
    nearest first.
    """

    query_index: int
    neighbor_indices: np.ndarray
    local_coords: np.ndarray
    patch_radius: float


def knn(index: KdIndex, query, k: int):
    """Module-level convenience wrapper around KdIndex.knn."""
    return index.knn(query, k)


def extract_patch(cloud: PointCloud, index: KdIndex, q: int, k: int) -> Patch:
    """Canonical k-NN patch around point q (q itself included as nearest)."""
    if not 0 <= q < len(cloud):
        raise IndexError(f"query index {q} out of range")
    if k > len(cloud):
        raise ValueError(f"k={k} exceeds cloud size {len(cloud)}")
    idx, dist = index.knn(cloud.points[q], k)
    radius = float(dist[-1])
    if radius < 1e-12:
        raise DegeneratePatch(f"all {k} neighbors coincide with point {q}")
    local = (cloud.points[idx] - cloud.points[q]) / radius
    return Patch(query_index=q, neighbor_indices=idx, local_coords=local,
                 patch_radius=radius)


def load_xyz(path) -> PointCloud:
    """Read an ASCII .xyz file (3 or 6 columns, '#' comments)."""
    pts = []
    nrm = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            tokens = stripped.split()
            if len(tokens) not in (3, 6):
                raise MalformedLine(line_no, f"expected 3 or 6 columns, got {len(tokens)}")
            try:
                values = [float(t) for t in tokens]
            except ValueError:
                raise MalformedLine(line_no, "non-numeric token") from None
            if nrm and len(tokens) == 3 or pts and not nrm and len(tokens) == 6:
                raise MalformedLine(line_no, "inconsistent column count")
            pts.append(values[:3])
            if len(values) == 6:
                nrm.append(values[3:])
    if not pts:
        raise EmptyCloud(f"no points in {path}")
    normals = _unit_rows(nrm) if nrm else None
    return PointCloud(points=np.asarray(pts), normals=normals)


def save_xyz(cloud: PointCloud, path):
    """Write a .xyz file; emits 6 columns when normals are present."""
    data = cloud.points
    if cloud.normals is not None:
        data = np.hstack([cloud.points, cloud.normals])
    np.savetxt(path, data, fmt="%.17g")


def load_normals(path) -> np.ndarray:
    """Read a .normals file (3 columns per line)."""
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            tokens = stripped.split()
            if len(tokens) != 3:
                raise MalformedLine(line_no, f"expected 3 columns, got {len(tokens)}")
            try:
                rows.append([float(t) for t in tokens])
            except ValueError:
                raise MalformedLine(line_no, "non-numeric token") from None
    if not rows:
        raise EmptyInput(f"no rows in {path}")
    return np.asarray(rows, dtype=np.float64)


def save_normals(normals, path):
    np.savetxt(path, np.asarray(normals, dtype=np.float64), fmt="%.17g")


def generate_shape(kind: str, n: int, seed: int) -> PointCloud:
    """Sample a synthetic shape uniformly by area with analytic outward normals.

    kind is one of sphere (unit), torus (R=1, r=0.3), box (unit cube centered
    at origin) or plane (unit square, z=0).
    """
    if n < 10:
        raise ValueError("need at least 10 points")
    rng = np.random.default_rng(seed)
    if kind == "sphere":
        pts = _unit_rows(rng.normal(size=(n, 3)))
        return PointCloud(points=pts, normals=pts.copy())
    if kind == "plane":
        xy = rng.uniform(-0.5, 0.5, size=(n, 2))
        pts = np.column_stack([xy, np.zeros(n)])
        normals = np.tile([0.0, 0.0, 1.0], (n, 1))
        return PointCloud(points=pts, normals=normals)
    if kind == "torus":
        return _sample_torus(n, rng, big_r=1.0, small_r=0.3)
    if kind == "box":
        return _sample_box(n, rng)
    raise ValueError(f"unknown shape kind {kind!r}")


def _sample_torus(n, rng, big_r, small_r):
    # Uniform-by-area via rejection on the tube angle: the area element is
    # proportional to (R + r cos v).
    us = np.empty(n)
    vs = np.empty(n)
    filled = 0
    while filled < n:
        m = 2 * (n - filled) + 16
        u = rng.uniform(0.0, 2 * np.pi, m)
        v = rng.uniform(0.0, 2 * np.pi, m)
        accept = rng.uniform(0.0, 1.0, m) < (big_r + small_r * np.cos(v)) / (big_r + small_r)
        take = min(int(accept.sum()), n - filled)
        us[filled:filled + take] = u[accept][:take]
        vs[filled:filled + take] = v[accept][:take]
        filled += take
    cu, su = np.cos(us), np.sin(us)
    cv, sv = np.cos(vs), np.sin(vs)
    pts = np.column_stack([(big_r + small_r * cv) * cu,
                           (big_r + small_r * cv) * su,
                           small_r * sv])
    normals = np.column_stack([cv * cu, cv * su, sv])
    return PointCloud(points=pts, normals=normals)


def _sample_box(n, rng):
    # Six faces of the unit cube have equal area; pick faces uniformly.
    face = rng.integers(0, 6, size=n)
    uv = rng.uniform(-0.5, 0.5, size=(n, 2))
    pts = np.empty((n, 3))
    normals = np.zeros((n, 3))
    axis = face // 2          # 0:x 1:y 2:z
    sign = np.where(face % 2 == 0, 1.0, -1.0)
    for a in range(3):
        mask = axis == a
        others = [i for i in range(3) if i != a]
        pts[mask, a] = 0.5 * sign[mask]
        pts[mask, others[0]] = uv[mask, 0]
        pts[mask, others[1]] = uv[mask, 1]
        normals[mask, a] = sign[mask]
    return PointCloud(points=pts, normals=normals)


def torus_implicit(p, big_r=1.0, small_r=0.3):
    """Implicit torus function F(p); zero on the surface, positive outside."""
    p = np.asarray(p, dtype=np.float64)
    rho = np.sqrt(p[..., 0] ** 2 + p[..., 1] ** 2)
    return (rho - big_r) ** 2 + p[..., 2] ** 2 - small_r ** 2


def add_noise(cloud: PointCloud, level: float, seed: int) -> PointCloud:
    """Perturb points with isotropic Gaussian noise of sigma level*bbox_diagonal.

    Normals are kept as ground truth of the clean surface.
    """
    if level < 0:
        raise ValueError("noise level must be >= 0")
    if level == 0:
        return PointCloud(points=cloud.points.copy(),
                          normals=None if cloud.normals is None else cloud.normals.copy())
    rng = np.random.default_rng(seed)
    sigma = level * cloud.bbox_diagonal
    noisy = cloud.points + rng.normal(scale=sigma, size=cloud.points.shape)
    normals = None if cloud.normals is None else cloud.normals.copy()
    return PointCloud(points=noisy, normals=normals)
