"""Detection-to-workspace-pose pipeline: size sorting by mask area, pixel
deprojection of mask centroids, and two-camera height estimation.

The detector here is an oracle over rendered instance masks, but everything
downstream consumes plain :class:`Detection` records, so a live segmentation
model could be swapped in without touching this module.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import (
    EmptyMaskError,
    InsufficientSamplesError,
    MissingDepthError,
    NegativeHeightError,
    OutOfWorkspaceError,
)
from .geometry import (
    CameraIntrinsics,
    InstanceMask,
    RigidTransform,
    deproject_pixel,
    mask_area,
    mask_bbox,
    mask_centroid,
)
from .pointcloud import Plane, Workspace
from .scenesim import CameraSpec, Scene, SensorModel, Terrain, degrade_mask, render_instance_masks

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Detection:
    """One detected object: class label, mask, tight bbox, confidence."""

    label: str
    mask: InstanceMask
    bbox: tuple[int, int, int, int]
    confidence: float
    instance_id: int = -1  # oracle provenance; a live detector leaves -1

    @classmethod
    def from_mask(cls, mask: InstanceMask) -> "Detection":
        return cls(
            label=mask.label,
            mask=mask,
            bbox=mask_bbox(mask),
            confidence=mask.confidence,
            instance_id=mask.instance_id,
        )


@dataclass(frozen=True)
class WorkspacePose:
    """Object position in the robot frame, with measurement provenance."""

    position: np.ndarray
    camera_id: str = "base"
    sample_index: int = 0

    def __post_init__(self):
        object.__setattr__(
            self, "position", np.asarray(self.position, dtype=np.float64).reshape(3)
        )


def detect_objects(
    scene: Scene,
    camera: CameraSpec,
    sensor: SensorModel | None = None,
    seed: int = 0,
    labels: tuple | None = None,
    extra_objects: list | None = None,
    exclude_ids: set | None = None,
) -> list[Detection]:
    """Oracle detector: exact rendered masks, optionally sensor-degraded.

    Stands in for a trained segmentation network; emits the same records a
    live detector would.
    """
    masks = render_instance_masks(scene, camera, extra_objects, exclude_ids)
    out = []
    for i, mask in enumerate(masks):
        if labels is not None and mask.label not in labels:
            continue
        if sensor is not None and (sensor.mask_erosion > 0 or sensor.boundary_flip_rate > 0):
            mask = degrade_mask(mask, sensor, seed + 1000 * (i + 1))
        if mask_area(mask) == 0:
            continue
        out.append(Detection.from_mask(mask))
    return out


def sort_by_mask_area(detections: list[Detection]) -> list[Detection]:
    """Non-increasing mask area; ties broken by centroid (v, then u).

    Detections with empty masks are dropped with a warning.
    """
    keep = []
    for det in detections:
        if mask_area(det.mask) == 0:
            logger.warning("dropping detection %r with empty mask", det.label)
            continue
        keep.append(det)
    def key(det: Detection):
        cu, cv = mask_centroid(det.mask)
        return (-mask_area(det.mask), cv, cu)
    return sorted(keep, key=key)


def median_window_depth(depth: np.ndarray, u: float, v: float, size: int = 5) -> float:
    """Median of the valid depths in a ``size x size`` window at (u, v), mm.

    Robust to holes; raises when the whole window is missing.
    """
    half = size // 2
    iu = int(round(u))
    iv = int(round(v))
    h, w = depth.shape
    window = depth[
        max(iv - half, 0) : min(iv + half + 1, h),
        max(iu - half, 0) : min(iu + half + 1, w),
    ]
    valid = window[window > 0]
    if valid.size == 0:
        raise MissingDepthError(f"no valid depth in {size}x{size} window at ({u:.1f}, {v:.1f})")
    return float(np.median(valid.astype(np.float64)))


def object_workspace_pose(
    detection: Detection,
    depth: np.ndarray,
    intr: CameraIntrinsics,
    cam_to_robot: RigidTransform,
    workspace: Workspace | None = None,
    camera_id: str = "base",
    sample_index: int = 0,
) -> WorkspacePose:
    """Mask centroid -> median window depth -> deproject -> robot frame."""
    if mask_area(detection.mask) == 0:
        raise EmptyMaskError("cannot locate an empty detection")
    cu, cv = mask_centroid(detection.mask)
    d = median_window_depth(depth, cu, cv)
    cam_pt = deproject_pixel(intr, cu, cv, d)
    position = cam_to_robot.apply(cam_pt)
    if workspace is not None and not bool(workspace.contains(position)):
        raise OutOfWorkspaceError(
            f"pose {np.round(position, 1)} outside workspace box"
        )
    return WorkspacePose(position=position, camera_id=camera_id, sample_index=sample_index)


def estimate_height(
    detection: Detection,
    depth: np.ndarray,
    intr: CameraIntrinsics,
    cam_to_robot: RigidTransform,
    support,
    top_fraction: float = 0.05,
) -> float:
    """Object top minus the support surface under its centroid, mm.

    The top is a robust maximum: the median of the highest ``top_fraction``
    of the mask's deprojected z values, which keeps depth speckle from
    inflating the estimate. ``support`` may be a Plane, a Terrain, or a
    plain z value.
    """
    bitmap = detection.mask.bitmap
    vs, us = np.nonzero(bitmap)
    if us.size == 0:
        raise EmptyMaskError("cannot measure an empty detection")
    ds = depth[vs, us].astype(np.float64)
    valid = ds > 0
    if not np.any(valid):
        raise MissingDepthError("no valid depth under the detection mask")
    pts = deproject_pixel(intr, us[valid], vs[valid], ds[valid])
    z = cam_to_robot.apply(pts)[:, 2]
    k = max(5, int(round(top_fraction * z.size)))
    k = min(k, z.size)
    top = float(np.median(np.sort(z)[-k:]))

    cu, cv = mask_centroid(detection.mask)
    d = median_window_depth(depth, cu, cv)
    center = cam_to_robot.apply(deproject_pixel(intr, cu, cv, d))
    if isinstance(support, Plane):
        support_z = support.z_at(center[0], center[1])
    elif isinstance(support, Terrain):
        support_z = float(support.height_at(center[0], center[1]))
    else:
        support_z = float(support)
    height = top - support_z
    if height <= 0:
        raise NegativeHeightError(
            f"estimated top {top:.1f} below support {support_z:.1f}; bad reference"
        )
    return height


def pose_stability_stats(samples: list[WorkspacePose]) -> tuple[float, float, float]:
    """Per-coordinate sample standard deviation (ddof=1) of repeated poses.

    Coordinates whose samples are all identical report exactly 0 (no
    accumulated float dust).
    """
    if len(samples) < 2:
        raise InsufficientSamplesError("need at least 2 pose samples")
    arr = np.stack([s.position for s in samples])
    sigma = arr.std(axis=0, ddof=1)
    constant = np.all(arr == arr[0], axis=0)
    sigma[constant] = 0.0
    return float(sigma[0]), float(sigma[1]), float(sigma[2])


# ---------------------------------------------------------------------------
# detection serialization (run-length encoded masks)


def _rle_encode(bitmap: np.ndarray) -> list[int]:
    """Run lengths of the flattened mask, alternating 0-runs and 1-runs,
    starting with a (possibly zero-length) 0-run."""
    flat = bitmap.ravel().astype(np.int8)
    changes = np.nonzero(np.diff(flat))[0] + 1
    bounds = np.concatenate([[0], changes, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat.size and flat[0] == 1:
        runs = [0] + runs
    return [int(r) for r in runs]


def _rle_decode(runs: list[int], shape: tuple[int, int]) -> np.ndarray:
    flat = np.zeros(shape[0] * shape[1], dtype=bool)
    pos = 0
    value = False
    for run in runs:
        if value:
            flat[pos : pos + run] = True
        pos += run
        value = not value
    return flat.reshape(shape)


def detection_to_json_dict(det: Detection) -> dict:
    return {
        "label": det.label,
        "confidence": float(det.confidence),
        "bbox": [int(b) for b in det.bbox],
        "mask": {
            "size": [det.mask.height, det.mask.width],
            "counts": _rle_encode(det.mask.bitmap),
        },
        "instance_id": int(det.instance_id),
    }


def detection_from_json_dict(data: dict) -> Detection:
    shape = tuple(data["mask"]["size"])
    bitmap = _rle_decode(data["mask"]["counts"], shape)
    mask = InstanceMask(
        bitmap=bitmap,
        label=data["label"],
        confidence=float(data["confidence"]),
        instance_id=int(data.get("instance_id", -1)),
    )
    return Detection(
        label=data["label"],
        mask=mask,
        bbox=tuple(int(b) for b in data["bbox"]),
        confidence=float(data["confidence"]),
        instance_id=int(data.get("instance_id", -1)),
    )
