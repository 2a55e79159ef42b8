"""Pose algebra on the unit viewing sphere.

Conventions
-----------
A pose is the camera position on S^2 written as (azimuth, elevation)::

    v = (cos(el) sin(az), sin(el), cos(el) cos(az))

so (0, 0) is the +z axis and y is up. Azimuth lives in (-pi, pi]; at the
poles it is undefined and reported as 0.

Camera frames are right-handed with ``right x up = forward`` where
``forward`` points from the camera toward the origin and
``right = normalize(world_up x forward)``. Seen from (0, 0) this gives
``right = (-1, 0, 0)``, i.e. images are mirror images of the usual OpenGL
view. Every renderer and test in the package uses this one convention.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.spatial.transform import Rotation

GOLDEN_RATIO = (1.0 + math.sqrt(5.0)) / 2.0
WORLD_UP = np.array([0.0, 1.0, 0.0])

# Fixed rotation separating the out-of-domain lattice from the in-domain one.
OOD_ROTATION_AXIS = np.array([1.0, 2.0, 3.0]) / math.sqrt(14.0)
OOD_ROTATION_DEG = 23.0

POLE_MARGIN = 1e-6


def wrap_angle(a):
    """Wrap radians into (-pi, pi]."""
    w = np.remainder(np.asarray(a, dtype=float) + math.pi, 2.0 * math.pi) - math.pi
    w = np.where(w <= -math.pi, w + 2.0 * math.pi, w)
    return float(w) if np.ndim(w) == 0 else w


@dataclass(frozen=True)
class Pose:
    azimuth: float
    elevation: float

    def __post_init__(self):
        if not -math.pi / 2 - 1e-12 <= self.elevation <= math.pi / 2 + 1e-12:
            raise ValueError(f"elevation {self.elevation} outside [-pi/2, pi/2]")
        object.__setattr__(self, "azimuth", wrap_angle(self.azimuth))

    @classmethod
    def from_degrees(cls, azimuth: float, elevation: float) -> "Pose":
        return cls(math.radians(azimuth), math.radians(elevation))


@dataclass(frozen=True)
class RelativePose:
    d_azimuth: float
    d_elevation: float


class CameraFrame(NamedTuple):
    right: np.ndarray
    up: np.ndarray
    forward: np.ndarray


def cross3(a, b) -> np.ndarray:
    """Cross product of two 3-vectors (np.cross has large per-call overhead)."""
    return np.array([a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]])


def _unit(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


def pose_to_unit_vector(p: Pose) -> np.ndarray:
    ce = math.cos(p.elevation)
    return _unit([ce * math.sin(p.azimuth), math.sin(p.elevation), ce * math.cos(p.azimuth)])


def unit_vector_to_pose(v) -> Pose:
    v = np.asarray(v, dtype=float)
    if abs(np.linalg.norm(v) - 1.0) > 1e-9:
        raise ValueError("unit_vector_to_pose expects a unit vector")
    y = float(np.clip(v[1], -1.0, 1.0))
    if abs(y) == 1.0:
        return Pose(0.0, math.copysign(math.pi / 2, y))
    return Pose(math.atan2(v[0], v[2]), math.asin(y))


def poses_from_vectors(vs: np.ndarray) -> np.ndarray:
    """Vectorised inverse map; returns an (n, 2) array of (azimuth, elevation)."""
    vs = np.asarray(vs, dtype=float)
    y = np.clip(vs[:, 1], -1.0, 1.0)
    az = np.where(np.abs(y) == 1.0, 0.0, np.arctan2(vs[:, 0], vs[:, 2]))
    return np.stack([wrap_angle(az), np.arcsin(y)], axis=1)


def vectors_from_poses(poses: np.ndarray) -> np.ndarray:
    poses = np.asarray(poses, dtype=float)
    az, el = poses[..., 0], poses[..., 1]
    v = np.stack([np.cos(el) * np.sin(az), np.sin(el), np.cos(el) * np.cos(az)], axis=-1)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def fibonacci_lattice(n: int, rotation=None) -> np.ndarray:
    """n points of the offset Fibonacci lattice, shape (n, 3).

    ``rotation`` is an optional unit quaternion in scalar-last (x, y, z, w)
    order applied to every point.
    """
    if n < 1:
        raise ValueError("fibonacci_lattice needs n >= 1")
    i = np.arange(n, dtype=float)
    y = 1.0 - (2.0 * i + 1.0) / n
    r = np.sqrt(np.maximum(0.0, 1.0 - y * y))
    phi = 2.0 * math.pi * i * (1.0 - 1.0 / GOLDEN_RATIO)
    pts = np.stack([r * np.cos(phi), y, r * np.sin(phi)], axis=1)
    if rotation is not None:
        pts = Rotation.from_quat(np.asarray(rotation, dtype=float)).apply(pts)
    return pts / np.linalg.norm(pts, axis=1, keepdims=True)


def ood_rotation_quaternion() -> np.ndarray:
    return Rotation.from_rotvec(OOD_ROTATION_AXIS * math.radians(OOD_ROTATION_DEG)).as_quat()


def in_domain_lattice() -> np.ndarray:
    return fibonacci_lattice(50)


def out_of_domain_lattice() -> np.ndarray:
    return fibonacci_lattice(100, ood_rotation_quaternion())


def geodesic_angle(p, q) -> float:
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    return float(math.atan2(np.linalg.norm(cross3(p, q)), float(np.dot(p, q))))


def pairwise_angles(a: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    """Geodesic angles between rows of ``a`` and rows of ``b`` (atan2 form)."""
    b = a if b is None else b
    cross = np.linalg.norm(np.cross(a[:, None, :], b[None, :, :]), axis=-1)
    dot = a @ b.T
    return np.arctan2(cross, dot)


def min_pairwise_angle(points: np.ndarray) -> float:
    ang = pairwise_angles(points)
    iu = np.triu_indices(len(points), k=1)
    return float(ang[iu].min())


def slerp(p, q, t: float) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    theta = geodesic_angle(p, q)
    if theta > math.pi - 1e-6:
        raise ValueError("slerp between (near-)antipodal points is ambiguous")
    if theta < 1e-12:
        return _unit(p)
    s = math.sin(theta)
    return _unit(math.sin((1.0 - t) * theta) / s * p + math.sin(t * theta) / s * q)


def extend_geodesic(p_left, p_center) -> np.ndarray:
    """Reflect p_left through p_center along their great circle."""
    p_left = np.asarray(p_left, dtype=float)
    p_center = np.asarray(p_center, dtype=float)
    if geodesic_angle(p_left, p_center) > math.pi - 1e-6:
        raise ValueError("extend_geodesic needs non-antipodal inputs")
    return _unit(2.0 * float(np.dot(p_left, p_center)) * p_center - p_left)


def tangent_project(v, z) -> np.ndarray:
    """Remove the component of ``v`` along the unit vector ``z``."""
    v = np.asarray(v, dtype=float)
    z = np.asarray(z, dtype=float)
    return v - np.dot(v, z) * z


def relative_pose(p1: Pose, p2: Pose) -> RelativePose:
    return RelativePose(wrap_angle(p2.azimuth - p1.azimuth), p2.elevation - p1.elevation)


def bezier_sphere(p0, p1, p2, p3, t: float) -> np.ndarray:
    """Cubic Bezier on the sphere: de Casteljau with slerp in place of lerp."""
    pts = [np.asarray(p, dtype=float) for p in (p0, p1, p2, p3)]
    for a, b in zip(pts, pts[1:]):
        if geodesic_angle(a, b) > math.pi - 1e-6:
            raise ValueError("consecutive Bezier control points are antipodal")
    while len(pts) > 1:
        pts = [slerp(a, b, t) for a, b in zip(pts, pts[1:])]
    return pts[0]


def look_at_frame(p: Pose) -> CameraFrame:
    if abs(p.elevation) >= math.pi / 2 - POLE_MARGIN:
        raise ValueError("look_at_frame is undefined at the poles (up vector parallel to view)")
    forward = -pose_to_unit_vector(p)
    right = _unit(cross3(WORLD_UP, forward))
    up = _unit(cross3(forward, right))
    return CameraFrame(right, up, forward)
