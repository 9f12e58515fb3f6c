"""Point-cloud operations: nearest neighbors, Chamfer distance, farthest
point sampling, outlier removal, ICP registration, and PCA framing."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateCloud, DegenerateGeometry, EmptyCloud
from .geometry import Pose
from .pointcloud import PointCloud, RigidTransform


class NeighborIndex:
    """Nearest-neighbor index over a fixed point set.

    Backed by an axis-aligned splitting tree with leaf size 16. Queries
    return exactly the point a linear scan would (lowest index on exact
    distance ties).
    """

    def __init__(self, points: np.ndarray):
        pts = np.asarray(points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] == 0:
            raise ValueError(f"index needs (n, 3) points with n >= 1, got {pts.shape}")
        self._pts = pts
        self._tree = cKDTree(pts, leafsize=16)

    def __len__(self) -> int:
        return self._pts.shape[0]

    def _resolve_tie(self, q: np.ndarray, d: float) -> int:
        cand = self._tree.query_ball_point(q, d * (1.0 + 1e-9) + 1e-300)
        cand = np.asarray(sorted(cand))
        sq = ((self._pts[cand] - q) ** 2).sum(axis=1)
        best = sq.min()
        return int(cand[sq == best][0])

    def query(self, points: np.ndarray):
        """Indices and squared distances of nearest neighbors for (m, 3) queries."""
        q = np.atleast_2d(np.asarray(points, dtype=float))
        k = min(2, len(self))
        d, i = self._tree.query(q, k=k)
        if k == 1:
            d = d[:, None]
            i = i[:, None]
        idx = i[:, 0].astype(np.int64)
        dist = d[:, 0]
        if k == 2:
            # Exact-equal top-2 distances mean the tree's winner is arbitrary;
            # re-resolve those few queries against the linear-scan tie rule.
            ties = np.nonzero(d[:, 0] == d[:, 1])[0]
            for row in ties:
                idx[row] = self._resolve_tie(q[row], dist[row])
        return idx, dist**2

    def nearest(self, point: np.ndarray):
        idx, sq = self.query(np.asarray(point, dtype=float)[None, :])
        return int(idx[0]), float(sq[0])

    def sq_distances(self, points: np.ndarray) -> np.ndarray:
        """Squared nearest distances only (no tie bookkeeping needed)."""
        d, _ = self._tree.query(np.atleast_2d(points))
        return d**2


def chamfer_distance(a: PointCloud, b: PointCloud) -> float:
    """Symmetric mean of squared nearest-neighbor distances, in m^2.

    mean_a min_b ||a - b||^2 + mean_b min_a ||b - a||^2.
    """
    if len(a) == 0 or len(b) == 0:
        raise EmptyCloud("chamfer_distance requires non-empty clouds")
    d_ab = NeighborIndex(b.points).sq_distances(a.points)
    d_ba = NeighborIndex(a.points).sq_distances(b.points)
    return float(d_ab.mean() + d_ba.mean())


def fps_downsample(cloud: PointCloud, n: int, seed: int = 0) -> PointCloud:
    """Greedy farthest-point subsample of n points.

    Starts at the point farthest from the centroid, then repeatedly takes
    the point maximizing the minimum distance to the selected set; exact
    ties break to the lowest index. Deterministic; `seed` is reserved for
    future stochastic variants and is unused.
    """
    del seed
    if n < 1:
        raise ValueError("n must be >= 1")
    m = len(cloud)
    if m == 0:
        raise EmptyCloud("cannot downsample an empty cloud")
    if n >= m:
        return cloud
    pts = cloud.points
    centroid = pts.mean(axis=0)
    start = int(np.argmax(((pts - centroid) ** 2).sum(axis=1)))
    selected = np.empty(n, dtype=np.int64)
    selected[0] = start
    min_sq = ((pts - pts[start]) ** 2).sum(axis=1)
    for k in range(1, n):
        nxt = int(np.argmax(min_sq))
        selected[k] = nxt
        min_sq = np.minimum(min_sq, ((pts - pts[nxt]) ** 2).sum(axis=1))
    return cloud.select(selected)


@dataclass
class OutlierConfig:
    plane_tol: float = 0.003  # RANSAC plane inlier distance, m
    floor_frac: float = 0.35  # inlier fraction that triggers floor removal
    min_neighbors: int = 5  # radius filter: neighbors required ...
    radius: float = 0.008  # ... within this distance, m
    ransac_iters: int = 500
    seed: int = 714025  # fixed so the whole pipeline is reproducible


def _ransac_plane(pts: np.ndarray, tol: float, iters: int, rng) -> tuple:
    best_count = 0
    best = None
    m = pts.shape[0]
    for _ in range(iters):
        i3 = rng.choice(m, size=3, replace=False)
        p0, p1, p2 = pts[i3]
        nrm = np.cross(p1 - p0, p2 - p0)
        norm = np.linalg.norm(nrm)
        if norm < 1e-12:
            continue
        nrm = nrm / norm
        dist = np.abs((pts - p0) @ nrm)
        count = int((dist < tol).sum())
        if count > best_count:
            best_count = count
            best = (nrm, p0)
    return best, best_count


def remove_outliers(cloud: PointCloud, cfg: OutlierConfig | None = None) -> PointCloud:
    """Two-stage clean-up for bin-picking clouds.

    Stage 1 removes a bin-floor plane: the best RANSAC plane is deleted
    when it holds more than `floor_frac` of the points AND looks like a
    support surface (near-horizontal, with the off-plane mass lying above
    it). The second condition keeps the top face of a flat object — the
    dominant plane in a single top-down view — from being mistaken for
    the floor. Stage 2 drops sparse points with fewer than `min_neighbors`
    neighbors within `radius`.
    """
    cfg = cfg or OutlierConfig()
    if len(cloud) < 10:
        raise DegenerateCloud(f"need >= 10 points, got {len(cloud)}")
    pts = cloud.points
    keep = np.ones(len(cloud), dtype=bool)

    rng = np.random.default_rng(cfg.seed)
    best, best_count = _ransac_plane(pts, cfg.plane_tol, cfg.ransac_iters, rng)
    if best is not None and best_count / len(cloud) > cfg.floor_frac:
        nrm, p0 = best
        if abs(nrm[2]) > 0.7:
            if nrm[2] < 0:
                nrm = -nrm
            signed = (pts - p0) @ nrm
            inlier = np.abs(signed) < cfg.plane_tol
            above = int((signed >= cfg.plane_tol).sum())
            below = int((signed <= -cfg.plane_tol).sum())
            off_plane = above + below
            if off_plane > 0 and above / off_plane >= 0.75:
                keep &= ~inlier

    kept = cloud.select(keep)
    if len(kept) >= 1:
        tree = cKDTree(kept.points, leafsize=16)
        counts = tree.query_ball_point(kept.points, cfg.radius, return_length=True)
        dense = (counts - 1) >= cfg.min_neighbors
        kept = kept.select(dense)

    if len(kept) < 10:
        raise DegenerateCloud(f"only {len(kept)} points survive outlier removal")
    return kept


@dataclass
class IcpConfig:
    rel_tol: float = 1e-8  # stop when relative MSE improvement drops below
    max_iter: int = 60


def _kabsch(src: np.ndarray, dst: np.ndarray):
    """Least-squares rigid transform src -> dst; None if rank-deficient."""
    sc = src.mean(axis=0)
    dc = dst.mean(axis=0)
    H = (src - sc).T @ (dst - dc)
    U, S, Vt = np.linalg.svd(H)
    if S[1] <= 1e-12 * max(S[0], 1e-300):
        return None
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    t = dc - R @ sc
    return R, t


def icp_align(source: PointCloud, target: PointCloud, cfg: IcpConfig | None = None):
    """Point-to-point ICP mapping source onto target.

    Correspondences by nearest neighbor; rigid update in closed form from
    the SVD of the cross-covariance; stops when the relative improvement
    of the mean-squared correspondence error falls below rel_tol or after
    max_iter. Returns (RigidTransform, fitness) with fitness the final
    symmetric Chamfer distance between the moved source and the target.

    Raises DegenerateGeometry when the cross-covariance stays
    rank-deficient for 3 consecutive iterations.
    """
    cfg = cfg or IcpConfig()
    if len(source) < 3 or len(target) < 3:
        raise DegenerateGeometry("ICP needs at least 3 points per cloud")
    src = source.points
    index = NeighborIndex(target.points)
    R = np.eye(3)
    t = np.zeros(3)
    prev_mse = np.inf
    deficient = 0
    for _ in range(cfg.max_iter):
        moved = src @ R.T + t
        idx, sq = index.query(moved)
        mse = float(sq.mean())
        fit = _kabsch(src, target.points[idx])
        if fit is None:
            deficient += 1
            if deficient >= 3:
                raise DegenerateGeometry("rank-deficient correspondences in ICP")
            continue
        deficient = 0
        R, t = fit
        if prev_mse - mse <= cfg.rel_tol * max(prev_mse, 1e-300):
            break
        prev_mse = mse
    transform = RigidTransform(R, t)
    fitness = chamfer_distance(PointCloud(transform.apply(src)), target)
    return transform, fitness


def _fix_axis_sign(v: np.ndarray) -> np.ndarray:
    if v[2] < 0:
        return -v
    if v[2] == 0:
        if v[0] < 0:
            return -v
        if v[0] == 0 and v[1] < 0:
            return -v
    return v


def pca_frame(cloud: PointCloud):
    """Principal frame of a cloud: (Pose, extents).

    Pose translation is the centroid; rotation columns are covariance
    eigenvectors in descending eigenvalue order, sign-fixed toward +z then
    +x, with the third column rebuilt by cross product so the frame is
    right-handed. Extents are 2x the per-axis standard deviation.

    Raises DegenerateGeometry for fewer than 4 points or coplanar input.
    """
    if len(cloud) < 4:
        raise DegenerateGeometry(f"PCA frame needs >= 4 points, got {len(cloud)}")
    pts = cloud.points
    centroid = pts.mean(axis=0)
    X = pts - centroid
    C = X.T @ X / len(cloud)
    w, V = np.linalg.eigh(C)
    order = np.argsort(w)[::-1]
    w = w[order]
    V = V[:, order]
    if w[2] <= 1e-9 * max(w[0], 1e-300):
        raise DegenerateGeometry("cloud is coplanar (or worse); no 3D frame")
    c0 = _fix_axis_sign(V[:, 0])
    c1 = _fix_axis_sign(V[:, 1])
    c2 = np.cross(c0, c1)
    rotation = np.column_stack([c0, c1, c2])
    extents = 2.0 * np.sqrt(w)
    return Pose(rotation, centroid), extents
