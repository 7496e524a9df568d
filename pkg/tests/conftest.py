"""Shared fixtures: reference intrinsics and synthetic clouds."""

from __future__ import annotations

import numpy as np
import pytest

from rockstack.geometry import CameraIntrinsics
from rockstack.pointcloud import PointCloud


@pytest.fixture
def intr() -> CameraIntrinsics:
    return CameraIntrinsics(fx=600.0, fy=600.0, cx=320.0, cy=240.0, width=640, height=480)


def box_cloud(
    width: float = 40.0,
    depth: float = 60.0,
    height: float = 30.0,
    center=(0.0, 0.0),
    pitch: float = 2.0,
    with_floor: bool = False,
) -> PointCloud:
    """Surface samples of an axis-aligned box resting at z=0: top face plus
    the four side walls (what a camera sweep around the box would capture)."""
    cx, cy = center
    hx, hy = width / 2.0, depth / 2.0
    xs = np.arange(-hx, hx + pitch / 2, pitch)
    ys = np.arange(-hy, hy + pitch / 2, pitch)
    zs = np.arange(0.0, height + pitch / 2, pitch)
    pts = []
    xx, yy = np.meshgrid(xs, ys)
    pts.append(np.column_stack([xx.ravel(), yy.ravel(), np.full(xx.size, height)]))
    xx, zz = np.meshgrid(xs, zs)
    for sign in (-hy, hy):
        pts.append(np.column_stack([xx.ravel(), np.full(xx.size, sign), zz.ravel()]))
    yy, zz = np.meshgrid(ys, zs)
    for sign in (-hx, hx):
        pts.append(np.column_stack([np.full(yy.size, sign), yy.ravel(), zz.ravel()]))
    if with_floor:
        fx = np.arange(-hx - 60, hx + 60, pitch)
        fy = np.arange(-hy - 60, hy + 60, pitch)
        xx, yy = np.meshgrid(fx, fy)
        floor = np.column_stack([xx.ravel(), yy.ravel(), np.zeros(xx.size)])
        outside = (np.abs(floor[:, 0]) > hx) | (np.abs(floor[:, 1]) > hy)
        pts.append(floor[outside])
    cloud = np.concatenate(pts)
    cloud[:, 0] += cx
    cloud[:, 1] += cy
    return PointCloud(cloud, frame="robot")
