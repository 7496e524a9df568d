"""6-DOF grasp candidate generation, scoring and selection for a parallel
gripper working on point clouds.

Candidate poses are rigid transforms whose rotation columns are the approach
axis ``a``, the closing axis ``c`` and the hand axis ``h``. Candidates are
generated top-down: the approach opposes the configured hand axis (vertical
by default) and the closing direction sweeps 180 degrees about it (a
parallel gripper is symmetric under a half turn). Each candidate descends
along its approach in fixed steps to the deepest pose at which neither
finger volume nor the palm face would collide with the cloud, then keeps the
points caught between the fingers as its closing region.

Ranking uses a geometric antipodal score instead of a learned classifier:
the fraction of closing-region points whose normals oppose the closing axis
within a friction cone, weighted by how well filled the closing region is.
Everything is deterministic given the config seed.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    EmptyCloudError,
    InsufficientNeighborhoodError,
    ValidationError,
)
from .geometry import RigidTransform
from .pointcloud import (
    Plane,
    PointCloud,
    Workspace,
    crop_workspace,
    estimate_normals,
    filter_above_plane,
    voxel_downsample,
)

_EPS = 1e-9


@dataclass(frozen=True)
class HandGeometry:
    """Parallel-gripper dimensions, mm.

    Defaults are deliberately smaller than the physical gripper; small hands
    both grasp small objects more reliably and cost less to evaluate.
    """

    finger_width: float = 12.0
    max_aperture: float = 80.0
    finger_depth: float = 50.0
    hand_height: float = 25.0

    def __post_init__(self):
        for name in ("finger_width", "max_aperture", "finger_depth", "hand_height"):
            if getattr(self, name) <= 0:
                raise ValidationError(f"hand geometry field {name} must be > 0")

    def to_json_dict(self) -> dict:
        return {
            "finger_width": self.finger_width,
            "max_aperture": self.max_aperture,
            "finger_depth": self.finger_depth,
            "hand_height": self.hand_height,
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "HandGeometry":
        return cls(**{k: float(v) for k, v in data.items()})


@dataclass(frozen=True)
class GraspConfig:
    """Detector configuration; JSON keys mirror the field names."""

    num_samples: int = 100
    num_orientations: int = 5
    num_selected: int = 20
    hand_axis: tuple = (0.0, 0.0, 1.0)
    approach_filter: bool = True
    cone_half_angle_deg: float = 45.0
    min_closing_points: int = 10
    seed: int = 0
    friction_half_angle_deg: float = 45.0
    expected_closing_points: float = 40.0
    push_step: float = 2.0
    width_clearance: float = 4.0
    min_insertion: float = 10.0  # object must reach this far past the fingertips
    plane_margin: float = 6.0
    normals_k: int = 15
    voxel_leaf: float = 0.0  # 0 disables downsampling in the pipeline

    def __post_init__(self):
        if self.num_samples < 1 or self.num_orientations < 1 or self.num_selected < 1:
            raise ValidationError("num_samples, num_orientations, num_selected must be >= 1")
        if not (0.0 < self.cone_half_angle_deg <= 90.0):
            raise ValidationError("cone_half_angle_deg must be in (0, 90]")
        if self.min_closing_points < 1:
            raise ValidationError("min_closing_points must be >= 1")
        axis = np.asarray(self.hand_axis, dtype=np.float64).reshape(3)
        norm = np.linalg.norm(axis)
        if norm < _EPS:
            raise ValidationError("hand_axis must be a nonzero vector")
        object.__setattr__(self, "hand_axis", tuple(axis / norm))
        if self.push_step <= 0:
            raise ValidationError("push_step must be > 0")

    def to_json_dict(self) -> dict:
        d = {
            "num_samples": self.num_samples,
            "num_orientations": self.num_orientations,
            "num_selected": self.num_selected,
            "hand_axis": list(self.hand_axis),
            "approach_filter": self.approach_filter,
            "cone_half_angle_deg": self.cone_half_angle_deg,
            "min_closing_points": self.min_closing_points,
            "seed": self.seed,
            "friction_half_angle_deg": self.friction_half_angle_deg,
            "expected_closing_points": self.expected_closing_points,
            "push_step": self.push_step,
            "width_clearance": self.width_clearance,
            "plane_margin": self.plane_margin,
            "normals_k": self.normals_k,
            "voxel_leaf": self.voxel_leaf,
        }
        return d

    @classmethod
    def from_json_dict(cls, data: dict) -> "GraspConfig":
        kwargs = dict(data)
        if "hand_axis" in kwargs:
            kwargs["hand_axis"] = tuple(float(x) for x in kwargs["hand_axis"])
        return cls(**kwargs)


@dataclass(frozen=True)
class GraspCandidate:
    """One 6-DOF grasp hypothesis.

    ``pose`` maps hand coordinates to the robot frame; its rotation columns
    are approach, closing and hand axes, and its translation is the palm
    center. ``seed_index``/``orientation_index`` identify the generating
    sample and are the deterministic tie-break key during selection.
    """

    pose: RigidTransform
    grasp_width: float
    score: float
    closing_point_count: int
    seed_index: int = 0
    orientation_index: int = 0

    @property
    def approach(self) -> np.ndarray:
        return self.pose.rotation[:, 0]

    @property
    def closing_axis(self) -> np.ndarray:
        return self.pose.rotation[:, 1]

    @property
    def hand_axis(self) -> np.ndarray:
        return self.pose.rotation[:, 2]

    def to_json_dict(self) -> dict:
        return {
            "rotation": [float(x) for x in self.pose.rotation.reshape(-1)],
            "translation": [float(x) for x in self.pose.translation],
            "grasp_width": float(self.grasp_width),
            "score": float(self.score),
            "closing_point_count": int(self.closing_point_count),
            "seed_index": int(self.seed_index),
            "orientation_index": int(self.orientation_index),
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "GraspCandidate":
        pose = RigidTransform(
            np.asarray(data["rotation"], dtype=np.float64).reshape(3, 3),
            np.asarray(data["translation"], dtype=np.float64),
        )
        return cls(
            pose=pose,
            grasp_width=float(data["grasp_width"]),
            score=float(data["score"]),
            closing_point_count=int(data["closing_point_count"]),
            seed_index=int(data.get("seed_index", 0)),
            orientation_index=int(data.get("orientation_index", 0)),
        )


def save_grasps_json(path, grasps: list[GraspCandidate]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump({"grasps": [g.to_json_dict() for g in grasps]}, f, indent=2, sort_keys=True)


def load_grasps_json(path) -> list[GraspCandidate]:
    with open(path, "r", encoding="utf-8") as f:
        data = json.load(f)
    return [GraspCandidate.from_json_dict(d) for d in data["grasps"]]


def sample_seeds(cloud: PointCloud, cfg: GraspConfig) -> np.ndarray:
    """Uniform sample of distinct point indices, without replacement.

    The sample for a smaller ``num_samples`` is a prefix of the sample for a
    larger one under the same seed, so enlarging the budget only adds seeds.
    """
    n = len(cloud)
    if n == 0:
        raise EmptyCloudError("cannot sample seeds from an empty cloud")
    rng = np.random.default_rng(cfg.seed)
    perm = rng.permutation(n)
    return perm[: min(cfg.num_samples, n)]


def _tangent_fallback(normal: np.ndarray) -> np.ndarray:
    ref = np.array([1.0, 0.0, 0.0]) if abs(normal[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    t = ref - np.dot(ref, normal) * normal
    return t / np.linalg.norm(t)


def _canonical_sign(v: np.ndarray) -> np.ndarray:
    lead = int(np.argmax(np.abs(v)))
    return -v if v[lead] < 0 else v


def local_frame(cloud: PointCloud, idx: int, radius: float) -> RigidTransform:
    """Darboux-style surface frame at a point.

    Columns: x' = minor-curvature direction, y' = major-curvature direction,
    z' = surface normal. Curvature directions come from the covariance of
    the neighbors' normals (the normal barely turns along the minor axis).
    """
    if cloud.normals is None:
        raise ValidationError("local_frame requires a cloud with normals")
    p = cloud.points[idx]
    d2 = np.sum((cloud.points - p) ** 2, axis=1)
    nb = np.nonzero(d2 <= radius * radius)[0]
    nb = nb[nb != idx]
    if nb.size < 3:
        raise InsufficientNeighborhoodError(
            f"only {nb.size} neighbors within {radius} mm; need >= 3"
        )
    z_axis = cloud.normals[idx]
    nn = cloud.normals[nb]
    centered = nn - nn.mean(axis=0)
    cov = centered.T @ centered
    vals, vecs = np.linalg.eigh(cov)
    variation = vecs[:, -1]  # direction the normal turns fastest along
    y_axis = variation - np.dot(variation, z_axis) * z_axis
    norm = np.linalg.norm(y_axis)
    if vals[-1] < 1e-12 or norm < 1e-6:
        y_axis = _tangent_fallback(z_axis)  # flat patch: any stable tangent works
    else:
        y_axis = y_axis / norm
    y_axis = _canonical_sign(y_axis)
    x_axis = np.cross(y_axis, z_axis)
    return RigidTransform(np.column_stack([x_axis, y_axis, z_axis]), p)


def _closing_frame_axes(cfg: GraspConfig) -> tuple[np.ndarray, list[tuple[np.ndarray, np.ndarray]]]:
    """Approach axis plus (closing, hand) axis pairs for each orientation."""
    h_cfg = np.asarray(cfg.hand_axis, dtype=np.float64)
    approach = -h_cfg
    c0 = _tangent_fallback(h_cfg)
    axes = []
    for k in range(cfg.num_orientations):
        theta = math.pi * k / cfg.num_orientations  # 180-degree sweep
        # Rodrigues rotation of c0 about h_cfg
        c = (
            c0 * math.cos(theta)
            + np.cross(h_cfg, c0) * math.sin(theta)
            + h_cfg * np.dot(h_cfg, c0) * (1.0 - math.cos(theta))
        )
        c /= np.linalg.norm(c)
        h = np.cross(approach, c)
        axes.append((c, h))
    return approach, axes


def generate_candidates(
    cloud: PointCloud, hand: HandGeometry, cfg: GraspConfig
) -> list[GraspCandidate]:
    """Unscored candidates for sampled seeds and swept closing directions.

    The cloud must be cropped, above-plane filtered and carry normals. Each
    candidate is pushed along its approach to the deepest collision-free
    depth; candidates whose closing region holds fewer than
    ``cfg.min_closing_points`` points are dropped.
    """
    seeds = sample_seeds(cloud, cfg)
    pts = cloud.points
    approach, axes = _closing_frame_axes(cfg)
    half_ap = hand.max_aperture / 2.0
    corridor_half = half_ap + hand.finger_width
    half_h = hand.hand_height / 2.0
    fd = hand.finger_depth
    step = cfg.push_step

    pa = pts @ approach
    pcs = [pts @ c for c, _ in axes]
    phs = [pts @ h for _, h in axes]

    out: list[GraspCandidate] = []
    for seed_index, pt_idx in enumerate(seeds):
        s = pts[pt_idx]
        u_all = pa - float(s @ approach)
        for orient_index, (c_axis, h_axis) in enumerate(axes):
            gamma = pcs[orient_index] - float(s @ c_axis)
            eta = phs[orient_index] - float(s @ h_axis)
            in_band = np.abs(eta) <= half_h
            closing_band = in_band & (np.abs(gamma) <= half_ap)
            if not np.any(closing_band):
                continue
            finger_band = in_band & (np.abs(gamma) > half_ap) & (np.abs(gamma) <= corridor_half)
            corridor = closing_band | finger_band
            u = u_all[corridor]
            back = fd - float(u.min()) + step
            # push depth at which the fingertip plane reaches each point,
            # and at which the point would pass behind the palm face
            tip_closing = u_all[closing_band] + back - fd
            palm_closing = u_all[closing_band] + back
            if np.any(finger_band):
                bad_finger = float(np.min(u_all[finger_band] + back - fd))
            else:
                bad_finger = np.inf
            bad_palm = float(np.min(palm_closing))
            depth_limit = min(bad_finger - _EPS, bad_palm + _EPS)
            max_steps = int(math.floor(depth_limit / step))
            if max_steps < 1:
                continue
            delta = max_steps * step
            caught = (tip_closing <= delta + _EPS) & (delta <= palm_closing + _EPS)
            count = int(np.count_nonzero(caught))
            if count < cfg.min_closing_points:
                continue
            # material must actually reach between the fingers, not graze the tips
            insertion = delta - float(np.min(tip_closing[caught]))
            if insertion < cfg.min_insertion:
                continue
            g = gamma[closing_band][caught]
            extent = float(g.max() - g.min())
            # fingers must have room to actually close on the material
            if extent + cfg.width_clearance > hand.max_aperture:
                continue
            width = extent + cfg.width_clearance
            origin = s + approach * (delta - back)
            pose = RigidTransform(np.column_stack([approach, c_axis, h_axis]), origin)
            out.append(
                GraspCandidate(
                    pose=pose,
                    grasp_width=width,
                    score=0.0,
                    closing_point_count=count,
                    seed_index=seed_index,
                    orientation_index=orient_index,
                )
            )
    return out


def closing_region_mask(
    points: np.ndarray, pose: RigidTransform, hand: HandGeometry
) -> np.ndarray:
    """Boolean mask of points inside the closing region of a grasp pose."""
    local = (points - pose.translation) @ pose.rotation
    return (
        (local[:, 0] >= -_EPS)
        & (local[:, 0] <= hand.finger_depth + _EPS)
        & (np.abs(local[:, 1]) <= hand.max_aperture / 2.0 + _EPS)
        & (np.abs(local[:, 2]) <= hand.hand_height / 2.0 + _EPS)
    )


def finger_volumes_mask(
    points: np.ndarray, pose: RigidTransform, hand: HandGeometry
) -> np.ndarray:
    """Boolean mask of points inside either finger volume of a grasp pose."""
    local = (points - pose.translation) @ pose.rotation
    half_ap = hand.max_aperture / 2.0
    return (
        (local[:, 0] >= -_EPS)
        & (local[:, 0] <= hand.finger_depth + _EPS)
        & (np.abs(local[:, 1]) > half_ap + _EPS)
        & (np.abs(local[:, 1]) <= half_ap + hand.finger_width - _EPS)
        & (np.abs(local[:, 2]) <= hand.hand_height / 2.0 + _EPS)
    )


def score_candidate(
    cloud: PointCloud,
    grasp: GraspCandidate,
    hand: HandGeometry,
    friction_half_angle_deg: float = 30.0,
    expected_closing_points: float = 40.0,
) -> float:
    """Antipodal fraction times closing-region fill ratio, >= 0.

    A closing-region point supports the grasp when its normal lies within
    the friction half-angle of either closing direction.
    """
    if cloud.normals is None:
        raise ValidationError("scoring requires a cloud with normals")
    mask = closing_region_mask(cloud.points, grasp.pose, hand)
    count = int(np.count_nonzero(mask))
    if count == 0:
        return 0.0
    cos_thresh = math.cos(math.radians(friction_half_angle_deg))
    alignment = np.abs(cloud.normals[mask] @ grasp.closing_axis)
    antipodal = float(np.count_nonzero(alignment >= cos_thresh)) / count
    return antipodal * (count / expected_closing_points)


def filter_by_approach(grasps: list[GraspCandidate], cfg: GraspConfig) -> list[GraspCandidate]:
    """Keep candidates approaching within the cone about world -z; order kept."""
    if not cfg.approach_filter:
        return list(grasps)
    cos_thresh = math.cos(math.radians(cfg.cone_half_angle_deg))
    down = np.array([0.0, 0.0, -1.0])
    return [g for g in grasps if float(g.approach @ down) >= cos_thresh - _EPS]


def select_grasps(grasps: list[GraspCandidate], cfg: GraspConfig) -> list[GraspCandidate]:
    """Top ``num_selected`` by score, ties broken by (seed, orientation) index."""
    ranked = sorted(grasps, key=lambda g: (-g.score, g.seed_index, g.orientation_index))
    return ranked[: cfg.num_selected]


def detect_grasps(
    cloud: PointCloud,
    hand: HandGeometry,
    cfg: GraspConfig,
    plane: Plane,
    workspace: Workspace | None = None,
    viewpoint=(0.0, 0.0, 0.0),
) -> list[GraspCandidate]:
    """Full pipeline: crop, above-plane filter, normals, generate, score,
    approach-filter, select. Returns [] when nothing survives the filters."""
    if len(cloud) == 0:
        raise EmptyCloudError("detect_grasps on an empty cloud")
    work = crop_workspace(cloud, workspace) if workspace is not None else cloud
    work = filter_above_plane(work, plane, cfg.plane_margin)
    if cfg.voxel_leaf > 0:
        work = voxel_downsample(work, cfg.voxel_leaf)
    if len(work) < max(cfg.normals_k, cfg.min_closing_points):
        return []
    work = estimate_normals(work, k=cfg.normals_k, viewpoint=viewpoint)
    candidates = generate_candidates(work, hand, cfg)
    scored = [
        replace(
            g,
            score=score_candidate(
                work, g, hand, cfg.friction_half_angle_deg, cfg.expected_closing_points
            ),
        )
        for g in candidates
    ]
    return select_grasps(filter_by_approach(scored, cfg), cfg)
