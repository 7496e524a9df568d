"""Detection sorting, workspace-pose deprojection and height estimation.

Scene-truth cases get their expectations from the simulator's ground truth
via an independent path (direct geometric render + manual deprojection), not
from the functions under test.
"""

from __future__ import annotations

import logging
import math

import numpy as np
import pytest

from rockstack.errors import (
    EmptyMaskError,
    InsufficientSamplesError,
    MissingDepthError,
    NegativeHeightError,
    OutOfWorkspaceError,
)
from rockstack.geometry import (
    CameraIntrinsics,
    InstanceMask,
    RigidTransform,
    camera_pose_from_lookat,
    deproject_pixel,
    mask_area,
)
from rockstack.perception import (
    Detection,
    WorkspacePose,
    detect_objects,
    detection_from_json_dict,
    detection_to_json_dict,
    estimate_height,
    median_window_depth,
    object_workspace_pose,
    pose_stability_stats,
    sort_by_mask_area,
)
from rockstack.pointcloud import Plane, Workspace
from rockstack.scenesim import (
    CameraSpec,
    RockModel,
    Scene,
    SensorModel,
    Terrain,
    render_depth,
    render_scene_geometry,
)
from rockstack.shapes import Superellipsoid


def make_detection(area: int, offset=(0, 0), size=(96, 96), label="rock") -> Detection:
    """Roughly square detection of the requested area at the given offset."""
    side = int(math.sqrt(area))
    bm = np.zeros(size, dtype=bool)
    v0, u0 = 10 + offset[1], 10 + offset[0]
    bm[v0 : v0 + side, u0 : u0 + side] = True
    extra = area - side * side
    if extra:
        bm[v0 + side, u0 : u0 + extra] = True
    mask = InstanceMask(bm, label=label)
    return Detection.from_mask(mask)


def overhead_scene(rock: RockModel, terrain_z: float = 0.0) -> Scene:
    cam = CameraSpec(
        CameraIntrinsics(fx=270, fy=270, cx=160, cy=120, width=320, height=240),
        camera_pose_from_lookat((0.0, 500.0, 1000.0), (0.0, 500.0, 0.0)),
    )
    return Scene(
        terrain=Terrain(np.full((48, 64), terrain_z), pitch=10.0, origin=(-320.0, 290.0)),
        rocks=[rock],
        parts=[],
        base_camera=cam,
        hand_camera_intrinsics=CameraIntrinsics(fx=130, fy=130, cx=80, cy=60, width=160, height=120),
        seed=0,
    )


class TestSortByMaskArea:
    def test_example_order(self):
        dets = [make_detection(a) for a in (1200, 800, 2000)]
        out = sort_by_mask_area(dets)
        assert [mask_area(d.mask) for d in out] == [2000, 1200, 800]
        assert out[0] is dets[2] and out[1] is dets[0] and out[2] is dets[1]

    def test_equal_areas_tie_break_by_centroid(self):
        a = make_detection(400, offset=(0, 20))  # lower in the image (larger v)
        b = make_detection(400, offset=(0, 0))
        out = sort_by_mask_area([a, b])
        assert out[0] is b and out[1] is a  # smaller centroid v first

    def test_matches_brute_force_sort(self):
        rng = np.random.default_rng(0)
        dets = [
            make_detection(int(rng.integers(50, 900)), offset=(int(rng.integers(0, 20)), int(rng.integers(0, 20))))
            for _ in range(20)
        ]
        out = sort_by_mask_area(dets)
        areas = [mask_area(d.mask) for d in out]
        assert areas == sorted(areas, reverse=True)
        assert sorted(id(d) for d in out) == sorted(id(d) for d in dets)

    def test_empty_masks_dropped_with_warning(self, caplog):
        empty = Detection(
            label="rock",
            mask=InstanceMask(np.zeros((8, 8), dtype=bool)),
            bbox=(0, 0, 0, 0),
            confidence=1.0,
        )
        good = make_detection(100)
        with caplog.at_level(logging.WARNING):
            out = sort_by_mask_area([empty, good])
        assert out == [good]
        assert any("empty mask" in r.message for r in caplog.records)


class TestMedianWindowDepth:
    def test_median_robust_to_holes(self):
        depth = np.zeros((10, 10), dtype=np.uint16)
        depth[4:7, 4:7] = [[500, 0, 504], [502, 0, 0], [498, 506, 510]]
        assert median_window_depth(depth, 5.0, 5.0, size=3) == 503.0

    def test_all_missing_raises(self):
        with pytest.raises(MissingDepthError):
            median_window_depth(np.zeros((10, 10), dtype=np.uint16), 5, 5)


class TestObjectWorkspacePose:
    def test_identity_extrinsic_principal_point(self):
        intr = CameraIntrinsics(fx=600, fy=600, cx=320, cy=240, width=640, height=480)
        depth = np.full((480, 640), 500, dtype=np.uint16)
        bm = np.zeros((480, 640), dtype=bool)
        bm[238:243, 318:323] = True  # centroid exactly at the principal point
        det = Detection.from_mask(InstanceMask(bm))
        pose = object_workspace_pose(det, depth, intr, RigidTransform.identity())
        np.testing.assert_allclose(pose.position, [0.0, 0.0, 500.0])

    def test_scene_truth_within_3mm(self):
        rock = RockModel(
            shape=Superellipsoid(20.0, 16.0, 14.0, 0.9, 1.1),
            pose=RigidTransform.rotation_z(0.4, (100.0, 480.0, 14.0)),
            instance_id=0,
        )
        scene = overhead_scene(rock)
        depth = render_depth(scene, scene.base_camera, SensorModel(), seed=0)
        det = detect_objects(scene, scene.base_camera)[0]
        pose = object_workspace_pose(
            det, depth, scene.base_camera.intrinsics, scene.base_camera.pose
        )
        # oracle: centroid of the visible surface from the exact geometric render
        geo_depth, ids = render_scene_geometry(scene, scene.base_camera)
        vs, us = np.nonzero(ids == 0)
        cam_pts = deproject_pixel(
            scene.base_camera.intrinsics, us.astype(float), vs.astype(float), geo_depth[vs, us]
        )
        visible = scene.base_camera.pose.apply(cam_pts)
        top_centroid = visible.mean(axis=0)
        assert np.linalg.norm(pose.position[:2] - top_centroid[:2]) < 3.0

    def test_all_dropout_under_mask_raises(self):
        intr = CameraIntrinsics(fx=600, fy=600, cx=320, cy=240, width=640, height=480)
        depth = np.zeros((480, 640), dtype=np.uint16)
        bm = np.zeros((480, 640), dtype=bool)
        bm[100:110, 100:110] = True
        det = Detection.from_mask(InstanceMask(bm))
        with pytest.raises(MissingDepthError):
            object_workspace_pose(det, depth, intr, RigidTransform.identity())

    def test_out_of_workspace_rejected(self):
        intr = CameraIntrinsics(fx=600, fy=600, cx=320, cy=240, width=640, height=480)
        depth = np.full((480, 640), 900, dtype=np.uint16)
        bm = np.zeros((480, 640), dtype=bool)
        bm[230:250, 310:330] = True
        det = Detection.from_mask(InstanceMask(bm))
        ws = Workspace((-10, -10, 0), (10, 10, 100))
        with pytest.raises(OutOfWorkspaceError):
            object_workspace_pose(det, depth, intr, RigidTransform.identity(), workspace=ws)


class TestEstimateHeight:
    @staticmethod
    def _overhead_setup(depth_value: int, cam_height: float = 500.0):
        intr = CameraIntrinsics(fx=300, fy=300, cx=160, cy=120, width=320, height=240)
        pose = camera_pose_from_lookat((0.0, 0.0, cam_height), (0.0, 0.0, 0.0))
        depth = np.full((240, 320), int(cam_height), dtype=np.uint16)
        bm = np.zeros((240, 320), dtype=bool)
        bm[100:140, 140:180] = True
        depth[bm] = depth_value
        return intr, pose, depth, Detection.from_mask(InstanceMask(bm))

    def test_flat_topped_object_on_plane(self):
        # object top 50 mm above the z=0 floor seen from 500 mm overhead
        intr, pose, depth, det = self._overhead_setup(450)
        h = estimate_height(det, depth, intr, pose, support=0.0)
        assert h == pytest.approx(50.0, abs=2.0)

    def test_plane_support_reference(self):
        intr, pose, depth, det = self._overhead_setup(450)
        h = estimate_height(det, depth, intr, pose, support=Plane((0.0, 0.0, 1.0), 0.0))
        assert h == pytest.approx(50.0, abs=2.0)

    def test_object_below_reference_raises(self):
        intr, pose, depth, det = self._overhead_setup(450)
        with pytest.raises(NegativeHeightError):
            estimate_height(det, depth, intr, pose, support=100.0)

    def test_sphere_on_raised_terrain(self):
        # sphere r=30 resting on terrain z=10: top-minus-support = 60
        rock = RockModel(
            shape=Superellipsoid(30.0, 30.0, 30.0, 1.0, 1.0),
            pose=RigidTransform.from_translation((0.0, 500.0, 40.0)),
            instance_id=0,
        )
        scene = overhead_scene(rock, terrain_z=10.0)
        depth = render_depth(scene, scene.base_camera, SensorModel(), seed=0)
        det = detect_objects(scene, scene.base_camera)[0]
        h = estimate_height(
            det, depth, scene.base_camera.intrinsics, scene.base_camera.pose, scene.terrain
        )
        assert h == pytest.approx(60.0, abs=2.0)


class TestPoseStabilityStats:
    def test_identical_samples_zero(self):
        samples = [WorkspacePose((1.0, 2.0, 3.0), sample_index=i) for i in range(10)]
        assert pose_stability_stats(samples) == (0.0, 0.0, 0.0)

    def test_alternating_closed_form(self):
        samples = [
            WorkspacePose(((-1.0) ** i, 0.0, 0.0), sample_index=i) for i in range(1000)
        ]
        sx, sy, sz = pose_stability_stats(samples)
        assert sx == pytest.approx(math.sqrt(1000.0 / 999.0), rel=1e-9)  # ~1.0005
        assert sy == 0.0 and sz == 0.0

    def test_insufficient_samples(self):
        with pytest.raises(InsufficientSamplesError):
            pose_stability_stats([WorkspacePose((0.0, 0.0, 0.0))])


class TestDetectionSerialization:
    def test_rle_round_trip(self):
        rng = np.random.default_rng(1)
        bm = rng.random((37, 53)) < 0.4
        det = Detection.from_mask(InstanceMask(bm, label="rock", confidence=0.75))
        back = detection_from_json_dict(detection_to_json_dict(det))
        np.testing.assert_array_equal(back.mask.bitmap, bm)
        assert back.label == "rock"
        assert back.confidence == 0.75
        assert back.bbox == det.bbox

    def test_oracle_detections_have_tight_bbox(self):
        rock = RockModel(
            shape=Superellipsoid(22.0, 18.0, 15.0),
            pose=RigidTransform.from_translation((0.0, 500.0, 15.0)),
            instance_id=0,
        )
        scene = overhead_scene(rock)
        det = detect_objects(scene, scene.base_camera)[0]
        vs, us = np.nonzero(det.mask.bitmap)
        assert det.bbox == (us.min(), vs.min(), us.max(), vs.max())
        assert det.confidence == 1.0
