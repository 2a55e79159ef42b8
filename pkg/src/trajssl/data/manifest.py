"""Dataset manifest: families, instance seeds, splits and pose sets.

The manifest is plain JSON and is the only thing the rest of the package
needs to reproduce any image: meshes come from (family, instance seed) and
images from (mesh, pose). Writing it twice from the same config gives the
same bytes (sorted keys, fixed indentation, shortest-repr floats).
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from trajssl.data.shapes import FAMILY_NAMES
from trajssl.rng import derive_seed, stream
from trajssl.sphere import in_domain_lattice, ood_rotation_quaternion, out_of_domain_lattice, poses_from_vectors

MANIFEST_FORMAT = "trajssl-manifest"
MANIFEST_VERSION = 1
DOMAINS = ("in_domain", "out_of_domain")
SPLITS = ("train", "test")


@dataclass(frozen=True)
class DatasetConfig:
    in_domain_families: tuple = FAMILY_NAMES[:8]
    out_of_domain_families: tuple = FAMILY_NAMES[8:]
    instances_per_family: int = 40
    train_per_family: int = 32

    def validate(self):
        ind, ood = list(self.in_domain_families), list(self.out_of_domain_families)
        for name in ind + ood:
            if name not in FAMILY_NAMES:
                raise ValueError(f"unknown shape family {name!r}; known: {', '.join(FAMILY_NAMES)}")
        if len(set(ind)) != len(ind) or len(set(ood)) != len(ood):
            raise ValueError("a family is listed twice within one domain")
        overlap = sorted(set(ind) & set(ood))
        if overlap:
            raise ValueError(f"families assigned to both domains: {', '.join(overlap)}")
        if not ind:
            raise ValueError("at least one in-domain family is required")
        if not 1 <= self.train_per_family < self.instances_per_family:
            raise ValueError("train_per_family must be in [1, instances_per_family)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["in_domain_families"] = list(self.in_domain_families)
        d["out_of_domain_families"] = list(self.out_of_domain_families)
        return d


@dataclass(frozen=True)
class InstanceRef:
    """One object: its family, its label within the domain and its seed."""

    family: str
    family_id: int
    category: int
    index: int
    seed: int
    split: str
    domain: str

    @property
    def key(self) -> str:
        return f"{self.family}/{self.index}"


@dataclass
class Manifest:
    seed: int
    config: DatasetConfig
    instances: list = field(default_factory=list)
    pose_vectors: dict = field(default_factory=dict)

    def select(self, domain: str, split: str | None = None) -> list:
        if domain not in DOMAINS:
            raise ValueError(f"unknown domain {domain!r}")
        return [r for r in self.instances if r.domain == domain and (split is None or r.split == split)]

    def families(self, domain: str) -> tuple:
        cfg = self.config
        return tuple(cfg.in_domain_families if domain == "in_domain" else cfg.out_of_domain_families)

    def poses(self, pose_set: str) -> np.ndarray:
        return self.pose_vectors[pose_set]

    def to_json(self) -> str:
        fam = []
        for domain in DOMAINS:
            for name in self.families(domain):
                rows = [r for r in self.instances if r.family == name]
                fam.append({
                    "name": name,
                    "family_id": rows[0].family_id if rows else FAMILY_NAMES.index(name),
                    "domain": domain,
                    "category": rows[0].category if rows else 0,
                    "instances": [{"index": r.index, "seed": r.seed, "split": r.split} for r in rows],
                })
        pose_sets = {}
        for name, vecs in self.pose_vectors.items():
            pose_sets[name] = {
                "n": int(len(vecs)),
                "rotation_xyzw": None if name == "in_domain" else [float(x) for x in ood_rotation_quaternion()],
                "vectors": vecs.tolist(),
                "azimuth_elevation": poses_from_vectors(vecs).tolist(),
            }
        doc = {
            "format": MANIFEST_FORMAT,
            "version": MANIFEST_VERSION,
            "seed": int(self.seed),
            "config": self.config.to_dict(),
            "families": fam,
            "pose_sets": pose_sets,
        }
        return json.dumps(doc, indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "Manifest":
        doc = json.loads(text)
        if doc.get("format") != MANIFEST_FORMAT:
            raise ValueError("not a trajssl manifest")
        if doc.get("version") != MANIFEST_VERSION:
            raise ValueError(f"unsupported manifest version {doc.get('version')}")
        cfg = doc["config"]
        config = DatasetConfig(
            tuple(cfg["in_domain_families"]), tuple(cfg["out_of_domain_families"]),
            int(cfg["instances_per_family"]), int(cfg["train_per_family"]),
        )
        config.validate()
        instances = [
            InstanceRef(f["name"], f["family_id"], f["category"], i["index"], i["seed"], i["split"], f["domain"])
            for f in doc["families"] for i in f["instances"]
        ]
        vecs = {k: np.array(v["vectors"], dtype=float) for k, v in doc["pose_sets"].items()}
        return cls(int(doc["seed"]), config, instances, vecs)

    def save(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path) -> "Manifest":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(fh.read())


def split_indices(seed: int, family: str, n: int, n_train: int) -> tuple:
    order = stream(seed, f"split/{family}").permutation(n)
    return tuple(sorted(order[:n_train].tolist())), tuple(sorted(order[n_train:].tolist()))


def build_manifest(config: DatasetConfig, seed: int) -> Manifest:
    """Deterministic manifest for ``config`` under the global ``seed``."""
    config.validate()
    instances = []
    for domain in DOMAINS:
        names = config.in_domain_families if domain == "in_domain" else config.out_of_domain_families
        for category, name in enumerate(names):
            train, _ = split_indices(seed, name, config.instances_per_family, config.train_per_family)
            for i in range(config.instances_per_family):
                instances.append(InstanceRef(
                    name, FAMILY_NAMES.index(name), category, i,
                    derive_seed(seed, f"instance/{name}/{i}"),
                    "train" if i in train else "test", domain,
                ))
    poses = {"in_domain": in_domain_lattice(), "out_of_domain": out_of_domain_lattice()}
    return Manifest(int(seed), config, instances, poses)
