"""Sample and triplet records rendered on demand from a manifest."""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from trajssl.data.manifest import InstanceRef, Manifest
from trajssl.data.render import IMAGE_SIZE, render, write_pgm
from trajssl.data.shapes import make_instance
from trajssl.data.triplets import TripletPoses, sample_triplet_poses
from trajssl.rng import stream
from trajssl.sphere import Pose, unit_vector_to_pose


@dataclass(frozen=True)
class SampleRecord:
    category_id: int
    instance_id: int
    pose: Pose
    pixels: np.ndarray
    pose_index: int = -1


@dataclass(frozen=True)
class TripletRecord:
    left: SampleRecord
    center: SampleRecord
    right: SampleRecord
    mode: str
    arc: float


def render_vector(inst: InstanceRef, vector: np.ndarray, size: int = IMAGE_SIZE) -> np.ndarray:
    return render(make_instance(inst.family, inst.seed), unit_vector_to_pose(vector), size)


class ImageSource:
    """Renders lattice views of manifest instances, memoising each one.

    Off-lattice views (triplet ends) are rendered fresh every time; lattice
    views are cached because evaluation revisits all of them.
    """

    def __init__(self, manifest: Manifest, size: int = IMAGE_SIZE, cache: bool = True):
        self.manifest = manifest
        self.size = size
        self._cache = {} if cache else None

    def lattice_view(self, inst: InstanceRef, pose_set: str, pose_index: int) -> np.ndarray:
        key = (inst.family, inst.index, pose_set, pose_index)
        if self._cache is not None and key in self._cache:
            return self._cache[key]
        img = render_vector(inst, self.manifest.poses(pose_set)[pose_index], self.size)
        img.setflags(write=False)
        if self._cache is not None:
            self._cache[key] = img
        return img

    def sample(self, inst: InstanceRef, pose_set: str, pose_index: int) -> SampleRecord:
        v = self.manifest.poses(pose_set)[pose_index]
        return SampleRecord(inst.category, inst.index, unit_vector_to_pose(v),
                            self.lattice_view(inst, pose_set, pose_index), pose_index)

    def views(self, inst: InstanceRef, pose_set: str, indices) -> np.ndarray:
        return np.stack([self.lattice_view(inst, pose_set, int(i)) for i in indices])

    def triplet(self, inst: InstanceRef, poses: TripletPoses) -> TripletRecord:
        def rec(v, idx=-1):
            pixels = self.lattice_view(inst, "in_domain", idx) if idx >= 0 else render_vector(inst, v, self.size)
            return SampleRecord(inst.category, inst.index, unit_vector_to_pose(v), pixels, idx)

        center_idx = poses.center_index if poses.mode == "equidistant" else -1
        return TripletRecord(rec(poses.left), rec(poses.center, center_idx), rec(poses.right), poses.mode, poses.arc)


def triplet_stream(seed: int, inst: InstanceRef, step: int) -> np.random.Generator:
    return stream(seed, f"triplet/{inst.key}/{step}")


def sample_triplet(source: ImageSource, inst: InstanceRef, rng: np.random.Generator,
                   mode: str = "equidistant") -> TripletRecord:
    """Sample a triplet around an in-domain lattice pose and render it (no augmentation)."""
    poses = sample_triplet_poses(source.manifest.poses("in_domain"), rng, mode)
    return source.triplet(inst, poses)


def dump_images(source: ImageSource, out_dir, pose_set: str = "in_domain") -> int:
    """Write every lattice view as ``<family>_<instance>_<poseindex>.pgm``; returns the count."""
    os.makedirs(out_dir, exist_ok=True)
    domain = pose_set
    count = 0
    for inst in source.manifest.select(domain):
        for j in range(len(source.manifest.poses(pose_set))):
            img = render_vector(inst, source.manifest.poses(pose_set)[j], source.size)
            write_pgm(os.path.join(out_dir, f"{inst.family}_{inst.index}_{j}.pgm"), img)
            count += 1
    return count
