"""Kinematic arm simulation and the two manipulation tasks: size-sorted rock
stacking and modular-part assembly.

The arm is end-effector kinematic: it teleports inside a reachability box,
carries at most one rigidly attached object, and reports simulated motion
time from a nominal speed (wall clock never enters task records, keeping
reports byte-reproducible). Task runners record one entry per phase with an
outcome and failure code; expected failures (missed grasp, occluded joint,
toppled rock) are recorded and, where physically sensible, the task moves on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from .errors import (
    GraspMissError,
    MultiObjectError,
    NoContactError,
    NothingHeldError,
    TaskFailure,
    UnreachablePoseError,
    ValidationError,
)
from .geometry import (
    CameraIntrinsics,
    RigidTransform,
    project_point,
    rotation_angle,
)
from .graspdetect import (
    GraspCandidate,
    GraspConfig,
    HandGeometry,
    closing_region_mask,
    detect_grasps,
)
from .perception import (
    Detection,
    detect_objects,
    estimate_height,
    median_window_depth,
    object_workspace_pose,
)
from .pointcloud import Workspace, cloud_from_depth, fit_plane_ransac
from .scenesim import (
    PLUG_BALL_RADIUS,
    CameraSpec,
    RobotPartModel,
    RockModel,
    Scene,
    SensorModel,
    Terrain,
    render_depth,
)
from .shapes import Box
from .geometry import camera_pose_from_lookat, deproject_pixel

GRIPPER_ID = -10

# top-down gripper orientation: approach -z, closing +x, hand axis -y
TOP_DOWN_ROTATION = np.column_stack(
    [np.array([0.0, 0.0, -1.0]), np.array([1.0, 0.0, 0.0]), np.array([0.0, -1.0, 0.0])]
)

# mates a plug frame (z outward from part) into a socket frame (z outward
# from body): assembled means plug z opposes socket z at the same origin
PLUG_MATE_FLIP = RigidTransform.rotation_x(math.pi)


@dataclass(frozen=True)
class ExecParams:
    """Task-execution constants; JSON keys mirror the field names."""

    stack_target_xy: tuple = (250.0, 500.0)
    release_clearance_factor: float = 1.05
    pregrasp_height: float = 350.0
    pregrasp_offset: float = 120.0
    transport_height: float = 300.0
    arm_speed: float = 200.0  # mm/s, simulated
    action_time: float = 0.5  # s per grasp/release/sense action, simulated
    reach_min: tuple = (-450.0, 30.0, -20.0)
    reach_max: tuple = (450.0, 830.0, 950.0)
    attach_tol_mm: float = 3.0
    attach_tol_deg: float = 5.0
    pre_assembly_position: tuple = (0.0, 430.0, 240.0)
    crop_half_xy: float = 70.0
    support_from_terrain: bool = True

    def to_json_dict(self) -> dict:
        return {
            "stack_target_xy": list(self.stack_target_xy),
            "release_clearance_factor": self.release_clearance_factor,
            "pregrasp_height": self.pregrasp_height,
            "pregrasp_offset": self.pregrasp_offset,
            "transport_height": self.transport_height,
            "arm_speed": self.arm_speed,
            "action_time": self.action_time,
            "reach_min": list(self.reach_min),
            "reach_max": list(self.reach_max),
            "attach_tol_mm": self.attach_tol_mm,
            "attach_tol_deg": self.attach_tol_deg,
            "pre_assembly_position": list(self.pre_assembly_position),
            "crop_half_xy": self.crop_half_xy,
            "support_from_terrain": self.support_from_terrain,
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "ExecParams":
        kwargs = dict(data)
        for key in ("stack_target_xy", "reach_min", "reach_max", "pre_assembly_position"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)

    @property
    def reach(self) -> Workspace:
        return Workspace(self.reach_min, self.reach_max)


@dataclass(frozen=True)
class ArmState:
    """End-effector pose, gripper opening and the attached object, if any."""

    pose: RigidTransform
    opening: float
    max_aperture: float
    reach: Workspace
    attached_id: int | None = None
    attached_rel: RigidTransform | None = None  # object pose in gripper frame
    grip_bottom_offset: float = 0.0  # gripper z minus support z at pick time

    @classmethod
    def home(cls, params: ExecParams, hand: HandGeometry) -> "ArmState":
        pose = RigidTransform(TOP_DOWN_ROTATION, (0.0, 300.0, 400.0))
        return cls(
            pose=pose,
            opening=hand.max_aperture,
            max_aperture=hand.max_aperture,
            reach=params.reach,
        )

    def attached_world_pose(self) -> RigidTransform:
        if self.attached_rel is None:
            raise NothingHeldError("no object attached")
        return self.pose.compose(self.attached_rel)


def move_to(arm: ArmState, pose: RigidTransform, scene: Scene | None = None) -> ArmState:
    """Teleport the arm; an attached object follows rigidly."""
    if not bool(arm.reach.contains(pose.translation)):
        raise UnreachablePoseError(
            f"target {np.round(pose.translation, 1)} outside the reachable box"
        )
    moved = replace(arm, pose=pose)
    if scene is not None and moved.attached_id is not None:
        scene.object_by_id(moved.attached_id).pose = moved.attached_world_pose()
    return moved


def gripper_geometry(arm: ArmState, hand: HandGeometry) -> RobotPartModel:
    """Palm and finger boxes at the arm pose, for occlusion ray tests.

    Built in the hand frame (x approach, y closing, z hand axis); fingers
    straddle the current opening.
    """
    half_gap = arm.opening / 2.0
    prims = (
        Box(center=(-6.0, 0.0, 0.0), half_extents=(6.0, half_gap + hand.finger_width, hand.hand_height / 2.0)),
        Box(
            center=(hand.finger_depth / 2.0, half_gap + hand.finger_width / 2.0, 0.0),
            half_extents=(hand.finger_depth / 2.0, hand.finger_width / 2.0, hand.hand_height / 2.0),
        ),
        Box(
            center=(hand.finger_depth / 2.0, -half_gap - hand.finger_width / 2.0, 0.0),
            half_extents=(hand.finger_depth / 2.0, hand.finger_width / 2.0, hand.hand_height / 2.0),
        ),
    )
    return RobotPartModel(
        part_class="joint",
        primitives=prims,
        attachments={},
        pose=arm.pose,
        instance_id=GRIPPER_ID,
    )


def _object_surface_points(obj) -> np.ndarray:
    if isinstance(obj, RockModel):
        return obj.surface_points_world(n_eta=32, n_omega=64)
    return obj.surface_points_world(spacing=2.5)


def _grasp_collides(
    points: np.ndarray, grasp: GraspCandidate, hand: HandGeometry, tol: float = 1.5
) -> bool:
    """True when the open hand at the grasp pose overlaps the given surface
    by more than ``tol`` (compliance/quantization allowance).

    Catches grasps the detector hallucinated at workspace-crop boundaries,
    where the real object continues beyond the cloud it saw.
    """
    local = (points - grasp.pose.translation) @ grasp.pose.rotation
    half_ap = hand.max_aperture / 2.0
    in_slab = (
        (local[:, 0] >= 0.0)
        & (local[:, 0] <= hand.finger_depth)
        & (np.abs(local[:, 2]) <= hand.hand_height / 2.0 - tol)
    )
    fingers = in_slab & (np.abs(local[:, 1]) > half_ap + tol) & (
        np.abs(local[:, 1]) <= half_ap + hand.finger_width - tol
    )
    if np.any(fingers):
        return True
    palm = (
        (local[:, 0] >= -12.0 + tol)
        & (local[:, 0] < -tol)
        & (np.abs(local[:, 1]) <= half_ap + hand.finger_width - tol)
        & (np.abs(local[:, 2]) <= hand.hand_height / 2.0 - tol)
    )
    return bool(np.any(palm))


def execute_grasp(
    arm: ArmState,
    scene: Scene,
    grasp: GraspCandidate,
    hand: HandGeometry,
    min_closing_points: int = 10,
    pregrasp_offset: float = 120.0,
    support_z: float | None = None,
) -> tuple[ArmState, float]:
    """Approach through a pre-grasp offset, close, and attach on success.

    Success requires the closing region to intersect exactly one object with
    at least ``min_closing_points`` of its surface points caught. Returns the
    new arm state and the simulated motion distance. ``support_z`` (support
    surface under the object) is recorded so placement can aim the object's
    bottom later.
    """
    if arm.attached_id is not None:
        raise ValidationError("arm already holds an object")
    approach = grasp.pose.rotation[:, 0]
    pre_pose = RigidTransform(
        grasp.pose.rotation, grasp.pose.translation - pregrasp_offset * approach
    )
    travel = float(np.linalg.norm(pre_pose.translation - arm.pose.translation))
    arm = move_to(arm, pre_pose)
    arm = move_to(arm, grasp.pose)
    travel += pregrasp_offset

    counts: list[tuple[int, int, np.ndarray]] = []
    for obj in scene.objects():
        pts = _object_surface_points(obj)
        if _grasp_collides(pts, grasp, hand):
            raise GraspMissError(
                f"hand would collide with object {obj.instance_id} before closing"
            )
        caught = closing_region_mask(pts, grasp.pose, hand)
        n = int(np.count_nonzero(caught))
        if n > 0:
            counts.append((obj.instance_id, n, pts[caught]))
    if len(counts) == 0:
        raise GraspMissError("closing region holds no object surface")
    if len(counts) > 1:
        raise MultiObjectError(
            f"closing region intersects {len(counts)} objects: "
            + ", ".join(str(c[0]) for c in counts)
        )
    instance_id, n_pts, caught_pts = counts[0]
    if n_pts < min_closing_points:
        raise GraspMissError(
            f"only {n_pts} surface points in the closing region (< {min_closing_points})"
        )
    obj = scene.object_by_id(instance_id)
    # closing fingers squeeze the object onto the hand's centerline
    closing_axis = grasp.pose.rotation[:, 1]
    gamma = (caught_pts - grasp.pose.translation) @ closing_axis
    squeeze = 0.5 * (float(gamma.max()) + float(gamma.min()))
    obj.pose = RigidTransform(obj.pose.rotation, obj.pose.translation - squeeze * closing_axis)
    rel = arm.pose.inverse().compose(obj.pose)
    offset = 0.0
    if support_z is not None:
        offset = float(arm.pose.translation[2] - support_z)
    return (
        replace(
            arm,
            opening=grasp.grasp_width,
            attached_id=instance_id,
            attached_rel=rel,
            grip_bottom_offset=offset,
        ),
        travel,
    )


@dataclass
class StackState:
    """Built-stack bookkeeping; top z never decreases while rocks stack."""

    target_xy: tuple
    base_z: float
    placed: list = field(default_factory=list)
    top_z: float = 0.0
    alignment_errors: list = field(default_factory=list)

    def __post_init__(self):
        if not self.placed:
            self.top_z = self.base_z


def _vertical_surface_z(obj, xys: np.ndarray, from_above: bool) -> np.ndarray:
    """z of the object's surface along vertical lines; nan where missed."""
    center, radius = obj.bounding
    n = xys.shape[0]
    if from_above:
        origins = np.column_stack([xys, np.full(n, center[2] + radius + 1.0)])
        dirs = np.tile([0.0, 0.0, -1.0], (n, 1))
    else:
        origins = np.column_stack([xys, np.full(n, center[2] - radius - 1.0)])
        dirs = np.tile([0.0, 0.0, 1.0], (n, 1))
    inv = obj.pose.inverse()
    o_local = inv.apply(origins)
    d_local = dirs @ obj.pose.rotation
    if isinstance(obj, RockModel):
        s = obj.shape.raycast(o_local, d_local)
    else:
        from .shapes import union_raycast

        s = union_raycast(obj.primitives, o_local, d_local)
    z = origins[:, 2] + s * dirs[:, 2]
    return np.where(np.isfinite(s), z, np.nan)


def settle_object(obj, terrain: Terrain, supports: list | None = None) -> None:
    """Drop the object along -z to first contact with terrain or supports."""
    pts = _object_surface_points(obj)
    support_z = terrain.height_at(pts[:, 0], pts[:, 1])
    for sup in supports or []:
        top = _vertical_surface_z(sup, pts[:, :2], from_above=True)
        support_z = np.fmax(support_z, np.where(np.isnan(top), -np.inf, top))
    gaps = pts[:, 2] - support_z
    drop = float(np.min(gaps))
    obj.pose = RigidTransform(obj.pose.rotation, obj.pose.translation - np.array([0.0, 0.0, drop]))


def check_stack_stability(top: RockModel, support: RockModel) -> str:
    """"stable" iff the top rock's center of mass projects into the convex
    hull of the contact region.

    The contact region is the xy set where the vertical gap between the top
    rock's lower surface and the support's upper surface is within 1 mm of
    the minimum, sampled on a 1 mm grid. Raises NoContactError when the
    bodies are more than 1 mm apart everywhere.
    """
    c_top, r_top = top.bounding
    c_sup, r_sup = support.bounding
    lo = np.maximum(c_top[:2] - r_top, c_sup[:2] - r_sup)
    hi = np.minimum(c_top[:2] + r_top, c_sup[:2] + r_sup)
    if np.any(hi <= lo):
        raise NoContactError("xy footprints do not overlap")
    xs = np.arange(lo[0], hi[0] + 0.5, 1.0)
    ys = np.arange(lo[1], hi[1] + 0.5, 1.0)
    xx, yy = np.meshgrid(xs, ys)
    xys = np.column_stack([xx.ravel(), yy.ravel()])
    bottom = _vertical_surface_z(top, xys, from_above=False)
    upper = _vertical_surface_z(support, xys, from_above=True)
    gap = bottom - upper
    ok = ~np.isnan(gap)
    if not np.any(ok):
        raise NoContactError("no vertical line meets both bodies")
    min_gap = float(np.nanmin(gap))
    if min_gap > 1.0:
        raise NoContactError(f"bodies are {min_gap:.2f} mm apart")
    region = xys[ok & (gap <= min_gap + 1.0)]
    com = top.center_of_mass[:2]
    if region.shape[0] < 3:
        inside = bool(np.min(np.linalg.norm(region - com, axis=1)) <= 1.0)
        return "stable" if inside else "toppled"
    try:
        hull = ConvexHull(region)
    except QhullError:
        inside = bool(np.min(np.linalg.norm(region - com, axis=1)) <= 1.0)
        return "stable" if inside else "toppled"
    eqs = hull.equations
    inside = bool(np.all(eqs[:, :2] @ com + eqs[:, 2] <= 1e-9))
    return "stable" if inside else "toppled"


def place_on_stack(
    arm: ArmState,
    scene: Scene,
    stack: StackState,
    rock_height: float,
    params: ExecParams,
) -> tuple[ArmState, StackState, dict]:
    """Carry the held rock over the target, release, settle and judge.

    The gripper centers itself on the target; any offset between the grasp
    point and the rock's center of mass therefore lands on the stack as
    alignment error. Returns the freed arm, the updated stack, and a
    placement record (outcome, alignment error, release height).
    """
    if arm.attached_id is None:
        raise NothingHeldError("place_on_stack requires a held rock")
    rock = scene.object_by_id(arm.attached_id)
    target = np.asarray(stack.target_xy, dtype=np.float64)
    bottom_target = stack.top_z + (params.release_clearance_factor - 1.0) * rock_height
    gripper_z = bottom_target + arm.grip_bottom_offset
    release_pose = RigidTransform(arm.pose.rotation, (target[0], target[1], gripper_z))
    travel = float(np.linalg.norm(release_pose.translation - arm.pose.translation))
    arm = move_to(arm, release_pose, scene)

    support_rock = scene.object_by_id(stack.placed[-1]) if stack.placed else None
    arm = replace(arm, attached_id=None, attached_rel=None, opening=arm.max_aperture)
    settle_object(rock, scene.terrain, [support_rock] if support_rock else [])

    if support_rock is None:
        outcome = "stable"  # sand conforms under the first rock
        alignment = float(np.linalg.norm(rock.center_of_mass[:2] - target))
    else:
        alignment = float(
            np.linalg.norm(rock.center_of_mass[:2] - support_rock.center_of_mass[:2])
        )
        try:
            outcome = check_stack_stability(rock, support_rock)
        except NoContactError:
            outcome = "toppled"  # landed beside the stack entirely
    if outcome == "stable":
        stack.placed.append(rock.instance_id)
        top_pts = _object_surface_points(rock)
        stack.top_z = float(np.max(top_pts[:, 2]))
        stack.alignment_errors.append(alignment)
    else:
        # topple removes only the top rock: park it beside the stack
        park_xy = target + np.array([stack.top_z - stack.base_z + 120.0, 0.0])
        rock.pose = RigidTransform(
            rock.pose.rotation,
            (park_xy[0], park_xy[1], rock.pose.translation[2] + 50.0),
        )
        settle_object(rock, scene.terrain, [])
    record = {
        "outcome": outcome,
        "alignment_error_mm": alignment,
        "release_bottom_z_mm": float(bottom_target),
        "travel_mm": travel,
    }
    return arm, stack, record


# ---------------------------------------------------------------------------
# trial reports


@dataclass
class TrialReport:
    """Structured per-trial record; everything in it is seed-deterministic."""

    task: str
    trial_seed: int
    success: bool
    phases: list
    rocks: list = field(default_factory=list)
    parts: list = field(default_factory=list)
    metrics: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "task": self.task,
            "trial_seed": self.trial_seed,
            "success": self.success,
            "phases": self.phases,
            "rocks": self.rocks,
            "parts": self.parts,
            "metrics": self.metrics,
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "TrialReport":
        return cls(
            task=data["task"],
            trial_seed=int(data["trial_seed"]),
            success=bool(data["success"]),
            phases=list(data["phases"]),
            rocks=list(data.get("rocks", [])),
            parts=list(data.get("parts", [])),
            metrics=dict(data.get("metrics", {})),
        )


def _derive_seed(seed: int, k: int) -> int:
    return (seed * 1_000_003 + k) % (2**63)


class _Clock:
    """Deterministic simulated time: travel at nominal speed plus fixed
    per-action costs."""

    def __init__(self, params: ExecParams):
        self.params = params
        self.total = 0.0

    def move(self, dist_mm: float) -> None:
        self.total += dist_mm / self.params.arm_speed

    def action(self) -> None:
        self.total += self.params.action_time


def _phase(phases: list, name: str, clock_start: float, clock: _Clock, outcome: str, error_code=None):
    phases.append(
        {
            "phase": name,
            "outcome": outcome,
            "error_code": error_code,
            "sim_time_s": round(clock.total - clock_start, 6),
        }
    )


def _observe_object(
    scene: Scene,
    center_xy: tuple,
    sensor: SensorModel,
    params: ExecParams,
    seed: int,
):
    """Eye-in-hand observation of one object from two oblique wrist poses.

    A single straight-down view contains almost no side-wall points on squat
    objects, which starves the antipodal score; sweeping the wrist camera
    across the object (as an angled wrist mount does) fills the walls in.
    Returns the merged cloud, a support-plane fit, and the nominal viewpoint.
    """
    from .pointcloud import PointCloud

    cx, cy = float(center_xy[0]), float(center_xy[1])
    height = params.pregrasp_height - 20.0
    pts = []
    for i, (dx, dy) in enumerate(((-120.0, 0.0), (120.0, 0.0))):
        eye = (cx + dx, cy + dy, height)
        cam = CameraSpec(
            scene.hand_camera_intrinsics, camera_pose_from_lookat(eye, (cx, cy, 0.0))
        )
        depth = render_depth(scene, cam, sensor, _derive_seed(seed, 200 + i))
        pts.append(
            cloud_from_depth(depth, cam.intrinsics, cam.pose, stride=1).points
        )
    cloud = PointCloud(np.concatenate(pts), frame="robot")
    plane, _ = fit_plane_ransac(
        cloud, iters=200, tol=4.0, seed=_derive_seed(seed, 210), max_points=2500
    )
    viewpoint = (cx, cy, params.pregrasp_height)
    return cloud, plane, viewpoint


def _rock_true_height(rock: RockModel, terrain: Terrain) -> float:
    pts = _object_surface_points(rock)
    top = float(np.max(pts[:, 2]))
    return top - float(terrain.height_at(rock.center_of_mass[0], rock.center_of_mass[1]))


def _detect_grasps_with_retry(cloud, hand, cfg, plane, workspace, viewpoint):
    grasps = detect_grasps(cloud, hand, cfg, plane, workspace, viewpoint)
    if grasps:
        return grasps, False
    wide = replace(cfg, cone_half_angle_deg=90.0)
    return detect_grasps(cloud, hand, wide, plane, workspace, viewpoint), True


def run_stacking_task(
    scene: Scene,
    hand: HandGeometry,
    grasp_cfg: GraspConfig,
    sensor: SensorModel,
    params: ExecParams,
    seed: int,
) -> TrialReport:
    """Detect rocks, sort by mask area, then pick and stack each in order.

    Per-rock failures are recorded and the task moves to the next rock;
    success requires every rock in the scene stacked and stable.
    """
    if len(scene.rocks) < 2:
        raise ValidationError("stacking needs at least 2 rocks in the scene")
    clock = _Clock(params)
    phases: list = []
    rocks_report: list = []
    arm = ArmState.home(params, hand)

    # -- detect (eye on base)
    t0 = clock.total
    depth_base = render_depth(scene, scene.base_camera, sensor, _derive_seed(seed, 1))
    dets = detect_objects(
        scene, scene.base_camera, sensor, _derive_seed(seed, 2), labels=("rock",)
    )
    clock.action()
    if not dets:
        _phase(phases, "detect", t0, clock, "failed", "no-detections")
        return TrialReport("stack", seed, False, phases, rocks_report)
    _phase(phases, "detect", t0, clock, "ok")

    # -- support plane from the base cloud
    base_cloud = cloud_from_depth(
        depth_base, scene.base_camera.intrinsics, scene.base_camera.pose, stride=2
    )
    plane, _ = fit_plane_ransac(
        base_cloud, iters=200, tol=4.0, seed=_derive_seed(seed, 3), max_points=2500
    )
    target = params.stack_target_xy
    stack = StackState(target_xy=target, base_z=plane.z_at(target[0], target[1]))

    # -- sort by mask area, largest first
    t0 = clock.total
    from .perception import sort_by_mask_area  # local import avoids cycle at module load

    ordered = sort_by_mask_area(dets)
    _phase(phases, "sort", t0, clock, "ok")

    id_to_rock = {r.instance_id: r for r in scene.rocks}
    true_sections = {
        r.instance_id: r.max_cross_section_area() for r in scene.rocks
    }
    true_volumes = {r.instance_id: r.true_volume for r in scene.rocks}
    det_ids = [d.instance_id for d in ordered]
    pairs_total = 0
    pairs_correct = 0
    for i in range(len(det_ids)):
        for j in range(i + 1, len(det_ids)):
            pairs_total += 1
            if true_sections[det_ids[i]] >= true_sections[det_ids[j]]:
                pairs_correct += 1
    volume_rank = sorted(det_ids, key=lambda k: -true_volumes[k])

    all_scene_detected = len(det_ids) == len(scene.rocks)
    rocks_ok = True
    for sorted_index, det in enumerate(ordered):
        rock = id_to_rock[det.instance_id]
        entry = {
            "instance_id": det.instance_id,
            "sorted_index": sorted_index,
            "volume_order_correct": volume_rank[sorted_index] == det.instance_id,
            "mask_area_px": int(np.count_nonzero(det.mask.bitmap)),
            "outcome": "pending",
            "failure_code": None,
            "grasp_score": None,
            "grasp_width_mm": None,
            "height_est_mm": None,
            "height_true_mm": _rock_true_height(rock, scene.terrain),
            "alignment_error_mm": None,
            "stable": None,
        }
        try:
            t0 = clock.total
            pose = object_workspace_pose(
                det, depth_base, scene.base_camera.intrinsics, scene.base_camera.pose
            )
            support_ref = scene.terrain if params.support_from_terrain else plane
            height_est = estimate_height(
                det,
                depth_base,
                scene.base_camera.intrinsics,
                scene.base_camera.pose,
                support_ref,
            )
            entry["height_est_mm"] = height_est
            clock.action()
            _phase(phases, f"pose_rock_{sorted_index}", t0, clock, "ok")

            # pre-grasp above the measured pose, then sweep the wrist camera
            t0 = clock.total
            pre = RigidTransform(
                TOP_DOWN_ROTATION,
                (pose.position[0], pose.position[1], params.pregrasp_height),
            )
            clock.move(float(np.linalg.norm(pre.translation - arm.pose.translation)))
            arm = move_to(arm, pre, scene)
            clock.move(240.0)  # observation sweep

            cloud, local_plane, viewpoint = _observe_object(
                scene,
                (pose.position[0], pose.position[1]),
                sensor,
                params,
                _derive_seed(seed, 10 + sorted_index),
            )
            half = params.crop_half_xy
            ws = Workspace(
                (pose.position[0] - half, pose.position[1] - half, -60.0),
                (pose.position[0] + half, pose.position[1] + half, 400.0),
            )
            cfg = replace(grasp_cfg, seed=_derive_seed(seed, 30 + sorted_index))
            grasps, _retried = _detect_grasps_with_retry(
                cloud, hand, cfg, local_plane, ws, viewpoint
            )
            clock.action()
            if not grasps:
                entry["outcome"] = "failed"
                entry["failure_code"] = "grasp-fail"
                rocks_ok = False
                _phase(phases, f"grasp_rock_{sorted_index}", t0, clock, "failed", "empty-grasp-list")
                rocks_report.append(entry)
                continue
            best = grasps[0]
            entry["grasp_score"] = float(best.score)
            entry["grasp_width_mm"] = float(best.grasp_width)
            pick_support = local_plane.z_at(
                float(best.pose.translation[0]), float(best.pose.translation[1])
            )
            arm, travel = execute_grasp(
                arm,
                scene,
                best,
                hand,
                min_closing_points=grasp_cfg.min_closing_points,
                pregrasp_offset=params.pregrasp_offset,
                support_z=pick_support,
            )
            clock.move(travel)
            clock.action()
            entry["grasped_instance_id"] = arm.attached_id
            wrong_object = arm.attached_id != det.instance_id
            _phase(phases, f"grasp_rock_{sorted_index}", t0, clock, "ok")

            # lift and place
            t0 = clock.total
            lift = RigidTransform(
                arm.pose.rotation,
                (arm.pose.translation[0], arm.pose.translation[1], params.transport_height),
            )
            clock.move(float(np.linalg.norm(lift.translation - arm.pose.translation)))
            arm = move_to(arm, lift, scene)
            arm, stack, placement = place_on_stack(arm, scene, stack, height_est, params)
            clock.move(placement["travel_mm"])
            clock.action()
            entry["alignment_error_mm"] = placement["alignment_error_mm"]
            entry["stable"] = placement["outcome"] == "stable"
            if wrong_object:
                entry["outcome"] = "failed"
                entry["failure_code"] = "wrong-object"
                rocks_ok = False
                _phase(phases, f"place_rock_{sorted_index}", t0, clock, "failed", "wrong-object")
            elif placement["outcome"] == "stable":
                entry["outcome"] = "placed"
                _phase(phases, f"place_rock_{sorted_index}", t0, clock, "ok")
            else:
                entry["outcome"] = "failed"
                entry["failure_code"] = "toppled"
                rocks_ok = False
                _phase(phases, f"place_rock_{sorted_index}", t0, clock, "failed", "toppled")
        except TaskFailure as exc:
            entry["outcome"] = "failed"
            entry["failure_code"] = exc.code
            rocks_ok = False
            _phase(phases, f"abort_rock_{sorted_index}", t0, clock, "failed", exc.code)
            # free the arm for the next rock
            arm = replace(arm, attached_id=None, attached_rel=None, opening=arm.max_aperture)
        rocks_report.append(entry)

    success = rocks_ok and all_scene_detected and len(stack.placed) == len(scene.rocks)
    report = TrialReport("stack", seed, success, phases, rocks_report)
    report.metrics = {
        "stacked_count": len(stack.placed),
        "rock_count": len(scene.rocks),
        "sort_pairs_total": pairs_total,
        "sort_pairs_correct": pairs_correct,
        "sim_time_s": round(clock.total, 6),
    }
    return report


def _measure_point_via_depth(
    point_world: np.ndarray,
    depth: np.ndarray,
    camera: CameraSpec,
    window: int = 3,
    surface_offset: float = 0.0,
):
    """Project a known point into the camera and read it back through the
    noisy depth image: the measurement path every detection shares.

    ``surface_offset`` pushes the deprojected surface point forward along
    the sight ray, correcting a ball-shaped feature's near surface to its
    center.
    """
    cam_pt = camera.pose.inverse().apply(point_world)
    u, v, _ = project_point(camera.intrinsics, cam_pt)
    d = median_window_depth(depth, float(u), float(v), size=window)
    measured = camera.pose.apply(deproject_pixel(camera.intrinsics, float(u), float(v), d))
    if surface_offset != 0.0:
        ray = measured - camera.pose.translation
        measured = measured + surface_offset * ray / np.linalg.norm(ray)
    return measured


def _point_visible(
    scene: Scene,
    camera: CameraSpec,
    point_world: np.ndarray,
    extra_objects: list,
    tol_mm: float = 6.0,
) -> bool:
    """True when nothing blocks the camera's line of sight to the point by
    more than ``tol_mm`` in front of it (the tolerance absorbs the plug
    ball's own near surface)."""
    origin = camera.pose.translation
    ray = (point_world - origin).reshape(1, 3)
    s_min = np.inf
    from .shapes import union_raycast

    for obj in scene.objects() + list(extra_objects):
        inv = obj.pose.inverse()
        o_local = np.broadcast_to(inv.apply(origin), (1, 3))
        d_local = ray @ obj.pose.rotation
        if isinstance(obj, RockModel):
            s = obj.shape.raycast(o_local, d_local)
        else:
            s = union_raycast(obj.primitives, o_local, d_local)
        s_min = min(s_min, float(s[0]))
    # terrain
    dz = ray[0, 2]
    if dz < -1e-9:
        from .scenesim import _raycast_terrain

        s_t = _raycast_terrain(scene.terrain, origin, ray)
        s_min = min(s_min, float(s_t[0]))
    dist = float(np.linalg.norm(ray))
    return s_min >= 1.0 - tol_mm / dist


def run_assembly_task(
    scene: Scene,
    hand: HandGeometry,
    grasp_cfg: GraspConfig,
    sensor: SensorModel,
    params: ExecParams,
    seed: int,
) -> TrialReport:
    """Assemble one detachable part onto the body: get pose, grasp, move to
    the pre-assembly pose, detect the grasped plug, displace and attach."""
    bodies = [p for p in scene.parts if p.part_class == "body"]
    loose = [p for p in scene.parts if p.part_class in ("head", "leg")]
    if not bodies or not loose:
        raise ValidationError("assembly needs a body and one attachable part")
    body = bodies[0]
    part = loose[0]
    # legs mate the camera-facing side socket; heads mate the top socket
    socket_name = "socket_top" if part.part_class == "head" else "socket_right"

    clock = _Clock(params)
    phases: list = []
    parts_report: list = []
    arm = ArmState.home(params, hand)
    entry = {
        "part_class": part.part_class,
        "instance_id": part.instance_id,
        "outcome": "pending",
        "failure_code": None,
        "grasp_score": None,
        "attach_pos_error_mm": None,
        "attach_rot_error_deg": None,
    }

    def fail(phase_name: str, t0: float, code: str) -> TrialReport:
        _phase(phases, phase_name, t0, clock, "failed", code)
        entry["outcome"] = "failed"
        entry["failure_code"] = code
        parts_report.append(entry)
        rep = TrialReport("assemble", seed, False, phases, parts=parts_report)
        rep.metrics = {"sim_time_s": round(clock.total, 6)}
        return rep

    # -- get_pose
    t0 = clock.total
    depth_base = render_depth(scene, scene.base_camera, sensor, _derive_seed(seed, 1))
    dets = detect_objects(
        scene, scene.base_camera, sensor, _derive_seed(seed, 2), labels=(part.part_class,)
    )
    clock.action()
    if not dets:
        return fail("get_pose", t0, "pose-detect-fail")
    det = dets[0]
    try:
        part_pose_meas = object_workspace_pose(
            det, depth_base, scene.base_camera.intrinsics, scene.base_camera.pose
        )
        socket_true = body.attachment_world(socket_name)
        socket_pos_meas = _measure_point_via_depth(
            socket_true.translation, depth_base, scene.base_camera
        )
    except TaskFailure:
        return fail("get_pose", t0, "pose-detect-fail")
    except Exception:
        return fail("get_pose", t0, "pose-detect-fail")
    socket_meas = RigidTransform(socket_true.rotation, socket_pos_meas)
    _phase(phases, "get_pose", t0, clock, "ok")

    # -- grasp
    t0 = clock.total
    pre = RigidTransform(
        TOP_DOWN_ROTATION,
        (part_pose_meas.position[0], part_pose_meas.position[1], params.pregrasp_height),
    )
    clock.move(float(np.linalg.norm(pre.translation - arm.pose.translation)))
    try:
        arm = move_to(arm, pre, scene)
        clock.move(240.0)  # observation sweep
        cloud, local_plane, viewpoint = _observe_object(
            scene,
            (part_pose_meas.position[0], part_pose_meas.position[1]),
            sensor,
            params,
            _derive_seed(seed, 10),
        )
        half = params.crop_half_xy
        ws = Workspace(
            (part_pose_meas.position[0] - half, part_pose_meas.position[1] - half, -60.0),
            (part_pose_meas.position[0] + half, part_pose_meas.position[1] + half, 400.0),
        )
        cfg = replace(grasp_cfg, seed=_derive_seed(seed, 12))
        grasps, _ = _detect_grasps_with_retry(
            cloud, hand, cfg, local_plane, ws, viewpoint
        )
        clock.action()
        if not grasps:
            return fail("grasp", t0, "grasp-fail")
        best = grasps[0]
        entry["grasp_score"] = float(best.score)
        arm, travel = execute_grasp(
            arm,
            scene,
            best,
            hand,
            min_closing_points=grasp_cfg.min_closing_points,
            pregrasp_offset=params.pregrasp_offset,
        )
        if arm.attached_id != part.instance_id:
            return fail("grasp", t0, "grasp-fail")
        clock.move(travel)
        clock.action()
    except TaskFailure as exc:
        return fail("grasp", t0, exc.code)
    _phase(phases, "grasp", t0, clock, "ok")

    # -- pre_assembly
    t0 = clock.total
    pre_asm = RigidTransform(arm.pose.rotation, params.pre_assembly_position)
    clock.move(float(np.linalg.norm(pre_asm.translation - arm.pose.translation)))
    try:
        lift = RigidTransform(
            arm.pose.rotation,
            (arm.pose.translation[0], arm.pose.translation[1], params.transport_height),
        )
        arm = move_to(arm, lift, scene)
        arm = move_to(arm, pre_asm, scene)
    except TaskFailure as exc:
        return fail("pre_assembly", t0, exc.code)
    _phase(phases, "pre_assembly", t0, clock, "ok")

    # -- detect_joint (plug visibility + measurement through the base camera)
    t0 = clock.total
    gripper = gripper_geometry(arm, hand)
    plug_true = part.attachment_world("plug")
    visible = _point_visible(scene, scene.base_camera, plug_true.translation, [gripper])
    clock.action()
    if not visible:
        return fail("detect_joint", t0, "joint-not-visible")
    depth_joint = render_depth(
        scene, scene.base_camera, sensor, _derive_seed(seed, 20), extra_objects=[gripper]
    )
    try:
        plug_pos_meas = _measure_point_via_depth(
            plug_true.translation,
            depth_joint,
            scene.base_camera,
            surface_offset=PLUG_BALL_RADIUS,
        )
    except TaskFailure:
        return fail("detect_joint", t0, "joint-not-visible")
    plug_meas = RigidTransform(plug_true.rotation, plug_pos_meas)
    _phase(phases, "detect_joint", t0, clock, "ok")

    # -- displace: move so the measured plug mates the measured socket
    t0 = clock.total
    target_plug = socket_meas.compose(PLUG_MATE_FLIP)
    displacement = target_plug.compose(plug_meas.inverse())
    new_arm_pose = displacement.compose(arm.pose)
    clock.move(float(np.linalg.norm(new_arm_pose.translation - arm.pose.translation)))
    try:
        arm = move_to(arm, new_arm_pose, scene)
    except TaskFailure as exc:
        return fail("displace", t0, exc.code)
    _phase(phases, "displace", t0, clock, "ok")

    # -- attach: true plug frame must meet the true socket frame
    t0 = clock.total
    plug_final = part.attachment_world("plug")
    socket_mate = body.attachment_world(socket_name).compose(PLUG_MATE_FLIP)
    pos_error = float(np.linalg.norm(plug_final.translation - socket_mate.translation))
    axis_cos = float(np.clip(plug_final.rotation[:, 2] @ socket_mate.rotation[:, 2], -1, 1))
    rot_error_deg = math.degrees(math.acos(axis_cos))
    entry["attach_pos_error_mm"] = pos_error
    entry["attach_rot_error_deg"] = rot_error_deg
    # raw frames let an external reader re-verify the check independently
    entry["plug_frame"] = plug_final.to_json_dict()
    entry["socket_frame"] = body.attachment_world(socket_name).to_json_dict()
    clock.action()
    if pos_error <= params.attach_tol_mm and rot_error_deg <= params.attach_tol_deg:
        part.pose = socket_mate.compose(part.attachments["plug"].inverse())
        arm = replace(arm, attached_id=None, attached_rel=None, opening=arm.max_aperture)
        entry["outcome"] = "attached"
        _phase(phases, "attach", t0, clock, "ok")
        parts_report.append(entry)
        rep = TrialReport("assemble", seed, True, phases, parts=parts_report)
    else:
        entry["outcome"] = "failed"
        entry["failure_code"] = "attach-misaligned"
        _phase(phases, "attach", t0, clock, "failed", "attach-misaligned")
        parts_report.append(entry)
        rep = TrialReport("assemble", seed, False, phases, parts=parts_report)
    rep.metrics = {"sim_time_s": round(clock.total, 6)}
    return rep
