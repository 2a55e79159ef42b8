"""Pose sampling for image triplets along short viewpoint trajectories."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from trajssl.sphere import bezier_sphere, cross3, extend_geodesic, slerp

TRIPLET_MODES = ("equidistant", "bezier")
ARC_RANGE_DEG = (5.0, 20.0)
MAX_OFF_CIRCLE_DEG = 3.0
CENTER_T_RANGE = (0.3, 0.7)


@dataclass(frozen=True)
class TripletPoses:
    """Camera positions of one triplet.

    ``center_index`` is the lattice index the centre was drawn from; for
    Bezier triplets the centre itself lies on the curve and is generally
    off-lattice.
    """

    left: np.ndarray
    center: np.ndarray
    right: np.ndarray
    center_index: int
    mode: str
    arc: float
    curve_t: float = 0.5


def tangent_direction(p: np.ndarray, angle: float) -> np.ndarray:
    """Unit tangent at ``p`` at ``angle`` from a fixed reference tangent."""
    ref = np.array([0.0, 1.0, 0.0]) if abs(p[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
    e1 = ref - np.dot(ref, p) * p
    e1 /= np.linalg.norm(e1)
    e2 = cross3(p, e1)
    return math.cos(angle) * e1 + math.sin(angle) * e2


def bezier_triplet(p_left, p_right, offsets, t: float) -> np.ndarray:
    """Centre of a spherical cubic from ``p_left`` to ``p_right``.

    The two inner control points start at 1/3 and 2/3 of the great-circle
    arc and are pushed off it by ``offsets`` (radians, signed) along the
    circle normal.
    """
    normal = cross3(p_left, p_right)
    normal /= np.linalg.norm(normal)
    controls = []
    for frac, off in zip((1.0 / 3.0, 2.0 / 3.0), offsets):
        c = slerp(p_left, p_right, frac)
        controls.append(math.cos(off) * c + math.sin(off) * normal)
    return bezier_sphere(p_left, controls[0], controls[1], p_right, t)


def sample_triplet_poses(lattice: np.ndarray, rng: np.random.Generator, mode: str = "equidistant",
                         arc_range_deg=ARC_RANGE_DEG, max_off_circle_deg: float = MAX_OFF_CIRCLE_DEG,
                         center_t_range=CENTER_T_RANGE) -> TripletPoses:
    """Draw a centre from ``lattice`` and a short arc through it.

    Draws happen in a fixed order (index, direction, arc, then the Bezier
    extras) so the equidistant part of a Bezier triplet matches the
    equidistant triplet from the same stream.
    """
    if mode not in TRIPLET_MODES:
        raise ValueError(f"unknown triplet mode {mode!r}; expected one of {TRIPLET_MODES}")
    idx = int(rng.integers(len(lattice)))
    pc = lattice[idx]
    direction = tangent_direction(pc, rng.uniform(0.0, 2.0 * math.pi))
    arc = math.radians(rng.uniform(*arc_range_deg))
    pl = math.cos(arc / 2.0) * pc - math.sin(arc / 2.0) * direction
    pl /= np.linalg.norm(pl)
    pr = extend_geodesic(pl, pc)
    if mode == "equidistant":
        return TripletPoses(pl, pc.copy(), pr, idx, mode, arc)
    bound = math.radians(max_off_circle_deg)
    offsets = rng.uniform(-bound, bound, size=2)
    t = float(rng.uniform(*center_t_range))
    center = bezier_triplet(pl, pr, offsets, t)
    return TripletPoses(pl, center, pr, idx, mode, arc, t)
