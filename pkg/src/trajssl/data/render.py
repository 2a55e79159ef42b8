"""Flat-shaded orthographic z-buffer rasterizer.

The camera sits on the unit sphere at the given pose and looks at the
origin (frame from :func:`trajssl.sphere.look_at_frame`). The visible
square is [-1, 1] x [-1, 1] in camera (right, up) coordinates. Faces are
lit by a world-fixed directional light with an ambient floor; nothing
casts shadows and the background is 0.
"""
from __future__ import annotations

import numpy as np
from numba import njit

from trajssl.data.shapes import Mesh
from trajssl.sphere import Pose, look_at_frame

LIGHT_DIR = np.array([1.0, 1.0, 1.0]) / np.sqrt(3.0)
AMBIENT = 0.3
IMAGE_SIZE = 32


def face_shading(mesh: Mesh, forward: np.ndarray) -> np.ndarray:
    n = mesh.unit_normals
    # two-sided: use the side facing the camera
    n = np.where((n @ forward)[:, None] > 0, -n, n)
    return AMBIENT + (1.0 - AMBIENT) * np.maximum(0.0, n @ LIGHT_DIR)


@njit(cache=True, nogil=True)
def _rasterize(sx, sy, depth, faces, shade, size):
    image = np.zeros((size, size), dtype=np.float32)
    zbuf = np.full((size, size), np.inf)
    step = 2.0 / size
    for f in range(faces.shape[0]):
        a, b, c = faces[f, 0], faces[f, 1], faces[f, 2]
        ax, ay, bx, by, cx, cy = sx[a], sy[a], sx[b], sy[b], sx[c], sy[c]
        area = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
        if abs(area) <= 1e-12:
            continue
        # pixel columns j and rows i whose centres may fall inside the bbox
        j0 = max(0, int(np.floor((min(ax, bx, cx) + 1.0) / step - 0.5)))
        j1 = min(size - 1, int(np.ceil((max(ax, bx, cx) + 1.0) / step - 0.5)))
        i0 = max(0, int(np.floor((1.0 - max(ay, by, cy)) / step - 0.5)))
        i1 = min(size - 1, int(np.ceil((1.0 - min(ay, by, cy)) / step - 0.5)))
        for i in range(i0, i1 + 1):
            py = 1.0 - (i + 0.5) * step
            for j in range(j0, j1 + 1):
                px = -1.0 + (j + 0.5) * step
                w0 = ((cx - bx) * (py - by) - (cy - by) * (px - bx)) / area
                w1 = ((ax - cx) * (py - cy) - (ay - cy) * (px - cx)) / area
                w2 = 1.0 - w0 - w1
                if w0 < -1e-9 or w1 < -1e-9 or w2 < -1e-9:
                    continue
                z = w0 * depth[a] + w1 * depth[b] + w2 * depth[c]
                if z < zbuf[i, j]:
                    zbuf[i, j] = z
                    image[i, j] = shade[f]
    return image


def render(mesh: Mesh, pose: Pose, size: int = IMAGE_SIZE) -> np.ndarray:
    """Render ``mesh`` from ``pose`` into a (size, size) float32 image in [0, 1].

    Zero-area faces (after projection) are skipped.
    """
    if len(mesh) == 0:
        return np.zeros((size, size), dtype=np.float32)
    right, up, forward = look_at_frame(pose)
    v = mesh.vertices
    shade = face_shading(mesh, forward)
    return _rasterize(v @ right, v @ up, v @ forward, mesh.faces, shade, size)


def write_pgm(path, pixels: np.ndarray):
    """Binary P5 graymap, 8-bit."""
    img = np.clip(np.round(np.asarray(pixels) * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    parts = blob.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError("not a binary P5 graymap")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    data = np.frombuffer(parts[4][: w * h], dtype=np.uint8).reshape(h, w)
    return data.astype(np.float32) / maxval
