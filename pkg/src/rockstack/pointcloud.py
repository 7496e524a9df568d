"""Point-cloud construction from depth plus the preprocessing the grasp
detector depends on: workspace cropping, voxel downsampling, normal
estimation and RANSAC support-plane fitting.

Clouds are immutable; every operation returns a new cloud and is
deterministic (seeded where randomness is involved), so results are safe to
reproduce bit-for-bit across runs.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .errors import (
    DegenerateInputError,
    EmptyCloudError,
    TooFewPointsError,
    ValidationError,
)
from .geometry import CameraIntrinsics, RigidTransform

NORMAL_UNIT_TOL = 1e-6


@dataclass(frozen=True)
class PointCloud:
    """Points in mm with optional per-point unit normals."""

    points: np.ndarray  # (n, 3) float64
    normals: np.ndarray | None = None  # (n, 3) float64, unit length
    frame: str = "robot"

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        object.__setattr__(self, "points", pts)
        if self.normals is not None:
            nrm = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
            if nrm.shape[0] != pts.shape[0]:
                raise ValidationError("normal count must equal point count")
            lengths = np.linalg.norm(nrm, axis=1)
            if nrm.shape[0] and np.max(np.abs(lengths - 1.0)) > NORMAL_UNIT_TOL:
                raise ValidationError("normals must be unit length within 1e-6")
            object.__setattr__(self, "normals", nrm)

    def __len__(self) -> int:
        return self.points.shape[0]

    def select(self, index) -> "PointCloud":
        """Cloud restricted to the given row index (order preserved)."""
        normals = self.normals[index] if self.normals is not None else None
        return PointCloud(self.points[index], normals, self.frame)


@dataclass(frozen=True)
class Workspace:
    """Axis-aligned box in the robot frame, mm."""

    min_corner: np.ndarray
    max_corner: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.min_corner, dtype=np.float64).reshape(3)
        hi = np.asarray(self.max_corner, dtype=np.float64).reshape(3)
        object.__setattr__(self, "min_corner", lo)
        object.__setattr__(self, "max_corner", hi)
        if not np.all(lo < hi):
            raise ValidationError("workspace min must be < max per axis")

    def contains(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return np.all((p >= self.min_corner) & (p <= self.max_corner), axis=-1)


@dataclass(frozen=True)
class Plane:
    """Plane n . p = offset with unit normal n."""

    normal: np.ndarray
    offset: float

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=np.float64).reshape(3)
        length = np.linalg.norm(n)
        if abs(length - 1.0) > 1e-9:
            raise ValidationError("plane normal must be unit length within 1e-9")
        object.__setattr__(self, "normal", n)
        object.__setattr__(self, "offset", float(self.offset))

    def signed_distance(self, points) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.normal - self.offset

    def z_at(self, x: float, y: float) -> float:
        """Plane height at an xy location (requires a non-horizontal-degenerate normal)."""
        nz = self.normal[2]
        if abs(nz) < 1e-12:
            raise ValidationError("plane is vertical; has no unique z at xy")
        return float((self.offset - self.normal[0] * x - self.normal[1] * y) / nz)


def cloud_from_depth(
    depth: np.ndarray,
    intr: CameraIntrinsics,
    cam_to_robot: RigidTransform,
    stride: int = 1,
) -> PointCloud:
    """Deproject every valid strided pixel and transform to the robot frame.

    Output order is row-major over the stride grid, one point per pixel with
    depth > 0.
    """
    if stride < 1:
        raise ValidationError("stride must be >= 1")
    depth = np.asarray(depth)
    vs = np.arange(0, depth.shape[0], stride)
    us = np.arange(0, depth.shape[1], stride)
    uu, vv = np.meshgrid(us, vs)  # row-major: v outer, u inner
    dd = depth[vv, uu].astype(np.float64)
    valid = dd > 0
    if not np.any(valid):
        raise EmptyCloudError("depth image has no valid pixels")
    u = uu[valid].astype(np.float64)
    v = vv[valid].astype(np.float64)
    d = dd[valid]
    x = (u - intr.cx) * d / intr.fx
    y = (v - intr.cy) * d / intr.fy
    cam_pts = np.stack([x, y, d], axis=-1)
    return PointCloud(cam_to_robot.apply(cam_pts), frame="robot")


def crop_workspace(cloud: PointCloud, workspace: Workspace) -> PointCloud:
    """Keep exactly the points inside the closed box; order preserved."""
    return cloud.select(workspace.contains(cloud.points))


def voxel_downsample(cloud: PointCloud, leaf: float) -> PointCloud:
    """One centroid per occupied voxel, keyed by floor(p / leaf).

    Output is ordered by voxel key (lexicographic), which makes the result
    independent of input order up to centroid averaging.
    """
    if leaf <= 0:
        raise ValidationError("voxel leaf size must be > 0")
    if len(cloud) == 0:
        return cloud
    keys = np.floor(cloud.points / leaf).astype(np.int64)
    order = np.lexsort((keys[:, 2], keys[:, 1], keys[:, 0]))
    sorted_keys = keys[order]
    sorted_pts = cloud.points[order]
    boundaries = np.any(np.diff(sorted_keys, axis=0) != 0, axis=1)
    starts = np.concatenate([[0], np.nonzero(boundaries)[0] + 1])
    sums = np.add.reduceat(sorted_pts, starts, axis=0)
    counts = np.diff(np.concatenate([starts, [len(cloud)]]))
    return PointCloud(sums / counts[:, None], frame=cloud.frame)


def estimate_normals(cloud: PointCloud, k: int = 15, viewpoint=(0.0, 0.0, 0.0)) -> PointCloud:
    """Per-point normals from the k-NN covariance, oriented toward the sensor.

    The normal is the smallest-eigenvalue eigenvector of the neighborhood
    covariance; it is flipped so that n . (viewpoint - p) >= 0.
    """
    n = len(cloud)
    if k < 3:
        raise ValidationError("k must be >= 3 for normal estimation")
    if n < k:
        raise TooFewPointsError(f"cloud of {n} points is smaller than k={k}")
    tree = cKDTree(cloud.points)
    _, idx = tree.query(cloud.points, k=k)
    nb = cloud.points[idx]  # (n, k, 3)
    centered = nb - nb.mean(axis=1, keepdims=True)
    cov = np.matmul(centered.transpose(0, 2, 1), centered)
    _, vecs = np.linalg.eigh(cov)
    normals = vecs[:, :, 0]  # eigenvalues ascending: column 0 = smallest
    # deterministic sign before viewpoint orientation
    lead = np.argmax(np.abs(normals), axis=1)
    signs = np.sign(normals[np.arange(n), lead])
    signs[signs == 0] = 1.0
    normals = normals * signs[:, None]
    to_sensor = np.asarray(viewpoint, dtype=np.float64) - cloud.points
    flip = np.sum(normals * to_sensor, axis=1) < 0
    normals[flip] = -normals[flip]
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return PointCloud(cloud.points, normals, cloud.frame)


def _plane_from_three(points: np.ndarray) -> tuple[np.ndarray, float] | None:
    a, b, c = points
    n = np.cross(b - a, c - a)
    length = np.linalg.norm(n)
    if length < 1e-9:
        return None
    n = n / length
    return n, float(n @ a)


def _orient_plane(normal: np.ndarray, offset: float) -> tuple[np.ndarray, float]:
    # canonical orientation: "above" is the robot +z side
    if normal[2] < 0 or (normal[2] == 0 and (normal[0] < 0 or (normal[0] == 0 and normal[1] < 0))):
        return -normal, -offset
    return normal, offset


def fit_plane_ransac(
    cloud: PointCloud,
    iters: int = 200,
    tol: float = 5.0,
    seed: int = 0,
    max_points: int | None = None,
) -> tuple[Plane, np.ndarray]:
    """Seeded RANSAC plane fit; returns the plane and sorted inlier indices.

    The winning hypothesis (most inliers; ties broken by lowest iteration
    index) is refit by least squares over its inliers, and the returned
    inlier set is recomputed against the refit plane over the full cloud.
    ``max_points`` caps the hypothesis/scoring subset for large clouds; the
    final refit and inlier indices always refer to the full cloud.
    """
    n = len(cloud)
    if n < 3:
        raise TooFewPointsError("plane fit needs at least 3 points")
    rng = np.random.default_rng(seed)
    if max_points is not None and n > max_points:
        subset = np.sort(rng.choice(n, size=max_points, replace=False))
        pts = cloud.points[subset]
    else:
        pts = cloud.points

    best_count = 0
    best_model: tuple[np.ndarray, float] | None = None
    m = pts.shape[0]
    for _ in range(iters):
        triple = rng.choice(m, size=3, replace=False)
        model = _plane_from_three(pts[triple])
        if model is None:
            continue
        normal, offset = model
        count = int(np.count_nonzero(np.abs(pts @ normal - offset) <= tol))
        if count > best_count:
            best_count = count
            best_model = model
    if best_model is None:
        raise DegenerateInputError("all sampled triples were collinear; no plane model")

    normal, offset = best_model
    inliers = np.abs(pts @ normal - offset) <= tol
    inlier_pts = pts[inliers]
    centroid = inlier_pts.mean(axis=0)
    _, _, vt = np.linalg.svd(inlier_pts - centroid, full_matrices=False)
    normal = vt[-1]
    normal, offset = _orient_plane(normal, float(normal @ centroid))
    plane = Plane(normal / np.linalg.norm(normal), offset)
    full_inliers = np.nonzero(np.abs(plane.signed_distance(cloud.points)) <= tol)[0]
    return plane, full_inliers


def filter_above_plane(cloud: PointCloud, plane: Plane, margin: float = 0.0) -> PointCloud:
    """Keep points with signed distance > margin; order preserved.

    The plane normal must be oriented so that "above" is the robot +z side
    (the orientation :func:`fit_plane_ransac` returns).
    """
    return cloud.select(plane.signed_distance(cloud.points) > margin)


# ---------------------------------------------------------------------------
# ASCII cloud file: '#' comments, then 'x y z [nx ny nz]' per line, mm


def save_cloud_xyz(path, cloud: PointCloud) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"# point cloud, {len(cloud)} points, frame={cloud.frame}, units mm\n")
        if cloud.normals is None:
            for p in cloud.points:
                f.write(f"{p[0]:.6g} {p[1]:.6g} {p[2]:.6g}\n")
        else:
            for p, n in zip(cloud.points, cloud.normals):
                f.write(
                    f"{p[0]:.6g} {p[1]:.6g} {p[2]:.6g} {n[0]:.6g} {n[1]:.6g} {n[2]:.6g}\n"
                )


def load_cloud_xyz(path) -> PointCloud:
    pts: list[list[float]] = []
    nrm: list[list[float]] = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        vals = [float(tok) for tok in line.split()]
        if len(vals) == 3:
            pts.append(vals)
        elif len(vals) == 6:
            pts.append(vals[:3])
            nrm.append(vals[3:])
        else:
            raise ValidationError(f"bad cloud line (expected 3 or 6 values): {line!r}")
    if nrm and len(nrm) != len(pts):
        raise ValidationError("cloud file mixes lines with and without normals")
    points = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    normals = np.asarray(nrm, dtype=np.float64) if nrm else None
    if normals is not None:
        lengths = np.linalg.norm(normals, axis=1)
        lengths[lengths == 0] = 1.0
        normals = normals / lengths[:, None]
    return PointCloud(points, normals)
