"""Procedural asymmetric solids, one generator per semantic family.

Every instance is a union of closed primitives plus an off-centre cube
marker, re-centred on its bounding box and scaled so that the farthest
vertex sits at radius 0.8. Overlapping parts are fine: the renderer is
z-buffered.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property, lru_cache
from typing import Callable

import numpy as np

from trajssl.rng import stream

MAX_RADIUS = 0.8


@dataclass(frozen=True)
class Mesh:
    vertices: np.ndarray  # (V, 3) float64
    faces: np.ndarray  # (F, 3) int64

    def __len__(self):
        return len(self.faces)

    @cached_property
    def unit_normals(self) -> np.ndarray:
        """Per-face unit normals from the winding order; zero for degenerate faces."""
        tri = self.vertices[self.faces]
        n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        norm = np.linalg.norm(n, axis=1, keepdims=True)
        return n / np.where(norm > 0, norm, 1.0)


def empty_mesh() -> Mesh:
    return Mesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))


def merge(*parts: Mesh) -> Mesh:
    verts, faces, off = [], [], 0
    for m in parts:
        verts.append(m.vertices)
        faces.append(m.faces + off)
        off += len(m.vertices)
    return Mesh(np.concatenate(verts), np.concatenate(faces))


def box(center, size) -> Mesh:
    c = np.asarray(center, dtype=float)
    h = np.asarray(size, dtype=float) / 2.0
    corners = np.array([[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)], dtype=float)
    faces = np.array([
        [0, 1, 3], [0, 3, 2], [4, 6, 7], [4, 7, 5],  # -x, +x
        [0, 4, 5], [0, 5, 1], [2, 3, 7], [2, 7, 6],  # -y, +y
        [0, 2, 6], [0, 6, 4], [1, 5, 7], [1, 7, 3],  # -z, +z
    ])
    return Mesh(c + corners * h, faces)


def extrude(polygon, height, center=(0.0, 0.0, 0.0)) -> Mesh:
    """Prism from a convex (x, z) polygon extruded along y."""
    poly = np.asarray(polygon, dtype=float)
    n = len(poly)
    c = np.asarray(center, dtype=float)
    bottom = np.column_stack([poly[:, 0], np.full(n, -height / 2), poly[:, 1]])
    top = bottom + [0.0, height, 0.0]
    verts = np.concatenate([bottom, top, [[0, -height / 2, 0], [0, height / 2, 0]]]) + c
    faces = []
    for i in range(n):
        j = (i + 1) % n
        faces += [[i, j, n + j], [i, n + j, n + i], [2 * n, j, i], [2 * n + 1, n + i, n + j]]
    return Mesh(verts, np.array(faces))


def cone(polygon, height, center=(0.0, 0.0, 0.0)) -> Mesh:
    """Convex (x, z) polygon base with an apex straight above its centre."""
    poly = np.asarray(polygon, dtype=float)
    n = len(poly)
    c = np.asarray(center, dtype=float)
    base = np.column_stack([poly[:, 0], np.full(n, -height / 2), poly[:, 1]])
    verts = np.concatenate([base, [[0, height / 2, 0], [0, -height / 2, 0]]]) + c
    faces = []
    for i in range(n):
        j = (i + 1) % n
        faces += [[i, j, n], [n + 1, j, i]]
    return Mesh(verts, np.array(faces))


def octahedron(radii, center=(0.0, 0.0, 0.0)) -> Mesh:
    rx, ry, rz = radii
    verts = np.array([[rx, 0, 0], [-rx, 0, 0], [0, ry, 0], [0, -ry, 0], [0, 0, rz], [0, 0, -rz]], dtype=float)
    faces = np.array([[0, 2, 4], [2, 1, 4], [1, 3, 4], [3, 0, 4], [2, 0, 5], [1, 2, 5], [3, 1, 5], [0, 3, 5]])
    return Mesh(verts + np.asarray(center, dtype=float), faces)


def ngon(n, rx, rz):
    a = 2.0 * math.pi * np.arange(n) / n
    return np.column_stack([rx * np.cos(a), rz * np.sin(a)])


def _jitter(rng, *dims):
    return [d * rng.uniform(0.7, 1.3) for d in dims]


def _l_block(rng):
    lx, ly, lz = _jitter(rng, 1.0, 0.3, 0.4)
    hy = _jitter(rng, 0.7)[0]
    return merge(box((0, 0, 0), (lx, ly, lz)), box((lx / 2 - 0.15, ly / 2 + hy / 2, 0), (0.3, hy, lz)))


def _t_block(rng):
    lx, ly, lz = _jitter(rng, 1.0, 0.25, 0.35)
    sy = _jitter(rng, 0.8)[0]
    return merge(box((0, sy / 2, 0), (lx, ly, lz)), box((0, 0, 0), (0.25, sy, lz)))


def _cross(rng):
    a, b, t = _jitter(rng, 1.0, 0.7, 0.22)
    return merge(box((0.1, 0, 0), (a, t, t)), box((0, -0.1, 0), (t, b, t)), box((0, 0, 0.05), (t, t, 0.5 * a)))


def _house(rng):
    w, h, d = _jitter(rng, 0.8, 0.5, 0.6)
    roof = _jitter(rng, 0.35)[0]
    tri = np.array([[-w / 2, 0.0], [0.0, roof], [w / 2, 0.0]])
    # roof: triangle in (x, y) extruded along z, built by rotating an extrusion
    prism = extrude(np.column_stack([tri[:, 0], tri[:, 1]]), d)
    rot = np.array([[1, 0, 0], [0, 0, 1], [0, -1, 0]], dtype=float)
    roof_mesh = Mesh(prism.vertices @ rot.T + [0, h / 2, 0], prism.faces)
    return merge(box((0, 0, 0), (w, h, d)), roof_mesh)


def _stepped(rng):
    s = _jitter(rng, 0.9, 0.25, 0.7)
    parts = []
    for k in range(3):
        f = 1.0 - 0.3 * k
        parts.append(box((-(1 - f) * s[0] / 2, k * s[1], 0), (s[0] * f, s[1], s[2])))
    return merge(*parts)


def _notched(rng):
    w, h, d = _jitter(rng, 0.9, 0.5, 0.6)
    return merge(box((-w / 4, 0, 0), (w / 2, h, d)), box((w / 4, -h / 4, 0), (w / 2, h / 2, d)),
                 box((w / 4, h / 4, -d / 4), (w / 2, h / 2, d / 2)))


def _cylinder(rng):
    r, h = _jitter(rng, 0.35, 0.9)
    return extrude(ngon(16, r, r * rng.uniform(0.85, 1.15)), h)


def _cone(rng):
    r, h = _jitter(rng, 0.4, 0.9)
    return cone(ngon(16, r, r * rng.uniform(0.85, 1.15)), h)


def _long_box(rng):
    return box((0, 0, 0), _jitter(rng, 1.2, 0.3, 0.4))


def _pyramid(rng):
    r, h = _jitter(rng, 0.45, 0.8)
    return cone(ngon(4, r, r * rng.uniform(0.85, 1.15)), h)


def _octa(rng):
    return octahedron(_jitter(rng, 0.45, 0.6, 0.35))


def _tri_prism(rng):
    r, h = _jitter(rng, 0.45, 0.8)
    return extrude(ngon(3, r, r), h)


FAMILY_BUILDERS: dict[str, Callable] = {
    "l_block": _l_block,
    "t_block": _t_block,
    "cross": _cross,
    "house": _house,
    "stepped_block": _stepped,
    "notched_prism": _notched,
    "cylinder_marker": _cylinder,
    "cone_marker": _cone,
    "long_box_marker": _long_box,
    "pyramid_marker": _pyramid,
    "octahedron_marker": _octa,
    "tri_prism_marker": _tri_prism,
}
FAMILY_NAMES = tuple(FAMILY_BUILDERS)


@dataclass(frozen=True)
class ShapeFamily:
    family_id: int
    name: str

    @classmethod
    def by_name(cls, name: str) -> "ShapeFamily":
        if name not in FAMILY_BUILDERS:
            raise ValueError(f"unknown shape family {name!r}; known: {', '.join(FAMILY_NAMES)}")
        return cls(FAMILY_NAMES.index(name), name)


def normalize_mesh(mesh: Mesh) -> Mesh:
    v = mesh.vertices
    center = (v.max(axis=0) + v.min(axis=0)) / 2.0
    v = v - center
    # shrink by one ulp-scale margin so rounding never lands above the radius
    v = v * (MAX_RADIUS * (1.0 - 1e-12) / np.linalg.norm(v, axis=1).max())
    return Mesh(v, mesh.faces)


@lru_cache(maxsize=4096)
def make_instance(family_name: str, instance_seed: int) -> Mesh:
    """Deterministic mesh for one (family, seed) pair."""
    rng = stream(instance_seed, f"mesh/{family_name}")
    base = FAMILY_BUILDERS[family_name](rng)
    lo, hi = base.vertices.min(axis=0), base.vertices.max(axis=0)
    half = (hi - lo) / 2.0
    mid = (hi + lo) / 2.0
    offset = np.array([rng.uniform(0.45, 0.65), rng.uniform(0.25, 0.45), rng.uniform(0.15, 0.35)])
    offset *= rng.choice([-1.0, 1.0], size=3)
    marker = box(mid + offset * half + np.sign(offset) * 0.1, [rng.uniform(0.18, 0.26)] * 3)
    return normalize_mesh(merge(base, marker))


def _closure(generators, tol=1e-9):
    group = [np.eye(3)]
    frontier = [np.eye(3)]
    keys = {tuple(np.round(np.eye(3), 6).ravel())}
    while frontier:
        nxt = []
        for g in frontier:
            for h in generators:
                m = h @ g
                k = tuple(np.round(m, 6).ravel())
                if k not in keys:
                    keys.add(k)
                    group.append(m)
                    nxt.append(m)
        frontier = nxt
    return group, keys


def _axis_rotation(axis, angle):
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + math.sin(angle) * k + (1 - math.cos(angle)) * k @ k


@lru_cache(maxsize=1)
def symmetry_test_rotations() -> tuple:
    """The 72 rotations of the icosahedral and octahedral groups combined.

    Both groups are placed so that they share the tetrahedral group whose
    two-fold axes are the coordinate axes (60 + 24 - 12 = 72).
    """
    phi = (1 + math.sqrt(5)) / 2
    ico, ico_keys = _closure([_axis_rotation((0, 1, phi), 2 * math.pi / 5), _axis_rotation((1, 1, 1), 2 * math.pi / 3)])
    octa, _ = _closure([_axis_rotation((0, 0, 1), math.pi / 2), _axis_rotation((1, 1, 1), 2 * math.pi / 3)])
    rots = list(ico)
    for r in octa:
        if tuple(np.round(r, 6).ravel()) not in ico_keys:
            rots.append(r)
    return tuple(rots)


def has_rotational_symmetry(mesh: Mesh, tol: float = 1e-3) -> bool:
    """True if a non-identity test rotation maps the vertex set onto itself."""
    v = mesh.vertices
    for r in symmetry_test_rotations():
        if np.allclose(r, np.eye(3)):
            continue
        rv = v @ r.T
        d = np.linalg.norm(rv[:, None, :] - v[None, :, :], axis=-1).min(axis=1)
        if np.all(d < tol):
            return True
    return False
