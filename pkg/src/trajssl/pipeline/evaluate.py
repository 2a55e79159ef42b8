"""Frozen-representation evaluation: k-NN absolute pose, relative-pose and semantic probes.

Five scenarios are supported::

    in_domain_abs        in-domain families, lattice of 50, weighted k-NN over pose index
    in_domain_rel        in-domain families, lattice of 50, relative-pose probe
    unseen_pose_rel      in-domain families, rotated lattice of 100, relative-pose probe
    unseen_semantic_rel  held-out families, lattice of 50, relative-pose probe
    semantic_cls         in-domain families, lattice of 50, linear probe over family

Galleries and probe training sets always come from the manifest's train
instances and scoring from its test instances.
"""
from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from trajssl.data.augment import bilinear_crop
from trajssl.data.dataset import ImageSource
from trajssl.data.manifest import Manifest
from trajssl.nn import tensor as T
from trajssl.nn.model import HeadSpec, Model, flatten_tap, head_forward, make_head
from trajssl.nn.optim import OptimizerState, optimizer_step
from trajssl.nn.tensor import Tensor
from trajssl.pipeline.metrics import MetricsRecord
from trajssl.rng import derive_seed, stream
from trajssl.sphere import in_domain_lattice, min_pairwise_angle, poses_from_vectors, wrap_angle

SCENARIOS = ("in_domain_abs", "in_domain_rel", "unseen_pose_rel", "unseen_semantic_rel", "semantic_cls")
SCENARIO_DATA = {
    "in_domain_abs": ("in_domain", "in_domain"),
    "in_domain_rel": ("in_domain", "in_domain"),
    "unseen_pose_rel": ("in_domain", "out_of_domain"),
    "unseen_semantic_rel": ("out_of_domain", "in_domain"),
    "semantic_cls": ("in_domain", "in_domain"),
}
PLAIN_LAYERS = ("feature", "conv3", "conv4", "compressed_conv3", "compressed_conv4")
PATCH_LAYERS = {"patch_m1": 1, "patch_m3": 3, "patch_m4": 4}
LAYERS = PLAIN_LAYERS + tuple(PATCH_LAYERS)

# Half the minimum spacing of the 50-point lattice: a prediction counts as
# correct when it is closer to the true displacement than to any neighbour.
DEFAULT_THETA_TOL = 0.5 * min_pairwise_angle(in_domain_lattice())


@dataclass(frozen=True)
class EvalConfig:
    k: int = 20
    temperature: float = 0.07
    probe_epochs: int = 30
    probe_batch: int = 256
    relpose_lr: float = 0.01
    semantic_lr: float = 0.05
    probe_momentum: float = 0.9
    train_pairs: int = 32
    eval_pairs: int = 64
    theta_tol: float = DEFAULT_THETA_TOL
    encode_batch: int = 256

    def validate(self):
        if self.k < 1 or self.temperature <= 0 or self.theta_tol <= 0:
            raise ValueError("k >= 1, temperature > 0 and theta_tol > 0 are required")
        if min(self.probe_epochs, self.probe_batch, self.train_pairs, self.eval_pairs, self.encode_batch) < 1:
            raise ValueError("probe and batch sizes must be positive")


# representations ------------------------------------------------------------

def _check_layer(layer: str):
    if layer not in LAYERS:
        raise ValueError(f"unknown layer {layer!r}; valid layers: {', '.join(LAYERS)}")


def _encode_chunk(model: Model, images: np.ndarray, layers) -> dict:
    taps = model.encode(images[:, None].astype(np.float32))
    out = {}
    for layer in layers:
        if layer == "feature":
            out[layer] = taps["feature"].data
        elif layer in ("conv3", "conv4"):
            out[layer] = flatten_tap(taps[layer]).data
        else:
            tap = layer.split("_")[1]
            out[layer] = model.head(f"compress{tap[-1]}", taps[tap]).data
    return out


def encode_layers(model: Model, images: np.ndarray, layers, batch: int = 256, jobs: int = 1) -> dict:
    """Row-aligned representations of ``images`` (N, H, W) for each plain layer.

    Conv taps are flattened in (C, H, W) row-major order. Chunks may run on
    ``jobs`` threads; each writes its own slice, so results do not depend
    on scheduling.
    """
    for layer in layers:
        if layer not in PLAIN_LAYERS:
            raise ValueError(f"encode_layers handles {PLAIN_LAYERS}, got {layer!r}")
    n = len(images)
    starts = list(range(0, n, batch))
    out: dict = {}

    def work(s):
        part = _encode_chunk(model, images[s:s + batch], layers)
        for layer, mat in part.items():
            if layer not in out:
                out[layer] = np.empty((n, mat.shape[1]), dtype=mat.dtype)
            out[layer][s:s + len(mat)] = mat

    if n == 0:
        return {layer: np.zeros((0, 0), dtype=np.float32) for layer in layers}
    work(starts[0])  # allocates the output slots
    if jobs > 1 and len(starts) > 1:
        with ThreadPoolExecutor(jobs) as pool:
            list(pool.map(work, starts[1:]))
    else:
        for s in starts[1:]:
            work(s)
    return out


def patch_images(images: np.ndarray, m: int) -> np.ndarray:
    """Split each image into an m x m grid and resize every cell back to full size.

    Output is (N * m * m, H, W) with cells in row-major order per image.
    """
    if m not in (1, 3, 4):
        raise ValueError(f"patch grid must be 1, 3 or 4, got {m}")
    n, h, w = images.shape
    ph, pw = h / m, w / m
    out = np.empty((n, m * m, h, w), dtype=np.float32)
    for a in range(n):
        for i in range(m):
            for j in range(m):
                out[a, i * m + j] = bilinear_crop(images[a], j * pw, i * ph, pw, ph, h)
    return out.reshape(n * m * m, h, w)


def extract_representations(model: Model, images: np.ndarray, layer: str, batch: int = 256,
                            jobs: int = 1) -> np.ndarray:
    _check_layer(layer)
    if layer in PATCH_LAYERS:
        m = PATCH_LAYERS[layer]
        feats = encode_layers(model, patch_images(images, m), ["feature"], batch, jobs)["feature"]
        return feats.reshape(len(images), -1)
    return encode_layers(model, images, [layer], batch, jobs)[layer]


@dataclass
class ViewSet:
    """All lattice views of a list of instances, instance-major then pose index."""

    instances: list
    pose_set: str
    n_poses: int
    images: np.ndarray
    index: np.ndarray  # (N, 3): category, instance index, pose index

    @property
    def keys(self) -> set:
        return {inst.key for inst in self.instances}


def collect_views(source: ImageSource, instances, pose_set: str) -> ViewSet:
    n_poses = len(source.manifest.poses(pose_set))
    images = np.empty((len(instances) * n_poses, source.size, source.size), dtype=np.float32)
    index = np.empty((len(images), 3), dtype=np.int64)
    for r, inst in enumerate(instances):
        rows = slice(r * n_poses, (r + 1) * n_poses)
        images[rows] = source.views(inst, pose_set, range(n_poses))
        index[rows] = np.stack([np.full(n_poses, inst.category), np.full(n_poses, inst.index),
                                np.arange(n_poses)], axis=1)
    return ViewSet(list(instances), pose_set, n_poses, images, index)


# weighted k-NN ----------------------------------------------------------------

def _unit_rows(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norm = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.where(norm > 0, norm, 1.0)


def knn_predict(gallery: np.ndarray, gallery_labels: np.ndarray, query: np.ndarray, k: int = 20,
                temperature: float = 0.07, n_classes: int | None = None, chunk: int = 512) -> np.ndarray:
    """Similarity-weighted k-NN vote with cosine similarity.

    Neighbours are ranked by similarity, ties by lower gallery index; each
    votes ``exp(sim / temperature)`` for its label, summed in rank order;
    the class with the largest total wins, ties going to the lowest class.
    """
    gallery_labels = np.asarray(gallery_labels)
    if k > len(gallery):
        raise ValueError(f"k={k} exceeds gallery size {len(gallery)}")
    n_classes = int(gallery_labels.max()) + 1 if n_classes is None else n_classes
    g = _unit_rows(gallery)
    q = _unit_rows(query)
    preds = np.empty(len(q), dtype=np.int64)
    for s in range(0, len(q), chunk):
        sims = q[s:s + chunk] @ g.T
        order = np.argsort(-sims, axis=1, kind="stable")[:, :k]
        for r in range(len(order)):
            nb = order[r]
            votes = np.bincount(gallery_labels[nb], weights=np.exp(sims[r, nb] / temperature), minlength=n_classes)
            preds[s + r] = int(np.argmax(votes))
    return preds


def knn_absolute_pose(gallery, gallery_labels, query, query_labels, k: int = 20, temperature: float = 0.07,
                      n_classes: int | None = None) -> tuple:
    """Returns ``(correct, n_eval)`` of the weighted k-NN pose classifier."""
    preds = knn_predict(gallery, gallery_labels, query, k, temperature, n_classes)
    return int(np.sum(preds == np.asarray(query_labels))), len(preds)


# relative pose ------------------------------------------------------------------

def relpose_targets(poses_a: np.ndarray, poses_b: np.ndarray) -> np.ndarray:
    """(cos d_az, sin d_az, d_el / (pi/2)) for the move from pose a to pose b.

    ``poses_*`` are (n, 2) arrays of (azimuth, elevation).
    """
    d_az = wrap_angle(poses_b[:, 0] - poses_a[:, 0])
    d_el = poses_b[:, 1] - poses_a[:, 1]
    return np.stack([np.cos(d_az), np.sin(d_az), d_el / (math.pi / 2)], axis=1)


def decode_relpose(pred: np.ndarray) -> tuple:
    pred = np.asarray(pred, dtype=np.float64)
    d_az = np.arctan2(pred[:, 1], pred[:, 0])
    d_el = np.clip(pred[:, 2], -2.0, 2.0) * (math.pi / 2)
    return d_az, d_el


def displacement_vectors(d_az: np.ndarray, d_el: np.ndarray) -> np.ndarray:
    """A relative pose applied at the reference pose (0, 0), as a unit vector."""
    return np.stack([np.cos(d_el) * np.sin(d_az), np.sin(d_el), np.cos(d_el) * np.cos(d_az)], axis=1)


def relpose_errors(pred: np.ndarray, true_d_az: np.ndarray, true_d_el: np.ndarray) -> np.ndarray:
    a = displacement_vectors(*decode_relpose(pred))
    b = displacement_vectors(np.asarray(true_d_az, dtype=float), np.asarray(true_d_el, dtype=float))
    cross = np.linalg.norm(np.cross(a, b), axis=1)
    return np.arctan2(cross, np.sum(a * b, axis=1))


def relpose_accuracy(pred: np.ndarray, true_d_az, true_d_el, theta_tol: float = DEFAULT_THETA_TOL) -> float:
    """Fraction of predictions whose displacement lies within ``theta_tol`` of the truth."""
    if theta_tol <= 0:
        raise ValueError("theta_tol must be positive")
    return float(np.mean(relpose_errors(pred, true_d_az, true_d_el) < theta_tol))


def sample_pairs(rng: np.random.Generator, n_poses: int, count: int) -> tuple:
    """``count`` ordered pose-index pairs (i, j) with i != j, uniform over such pairs."""
    i = rng.integers(n_poses, size=count)
    j = (i + rng.integers(1, n_poses, size=count)) % n_poses
    return i, j


def relpose_chance(lattice: np.ndarray, theta_tol: float = DEFAULT_THETA_TOL, draws: int = 100_000,
                   seed: int = 0) -> float:
    """Monte-Carlo accuracy of predicting the displacement of an independent random pair."""
    rng = stream(seed, "relpose-chance")
    poses = poses_from_vectors(lattice)
    ti, tj = sample_pairs(rng, len(lattice), draws)
    pi, pj = sample_pairs(rng, len(lattice), draws)
    true = relpose_targets(poses[ti], poses[tj])
    guess = relpose_targets(poses[pi], poses[pj])
    d_az, d_el = decode_relpose(true)
    return relpose_accuracy(guess, d_az, d_el, theta_tol)


# probes -------------------------------------------------------------------------

def standardize(train: np.ndarray, *others) -> tuple:
    mean = train.mean(axis=0)
    std = train.std(axis=0) + 1e-6
    return tuple(((x - mean) / std).astype(np.float32) for x in (train, *others))


def fit_probe(spec: HeadSpec, x: np.ndarray, y: np.ndarray, objective: str, epochs: int, batch: int,
              lr: float, momentum: float, seed: int):
    """Train a probe head with momentum SGD; returns its parameters.

    ``objective`` is "mse" (regression targets) or "ce" (integer labels).
    Inputs are treated as constants, so nothing flows back into the encoder.
    """
    if len(x) != len(y):
        raise ValueError(f"probe has {len(x)} inputs but {len(y)} targets")
    params = make_head(spec, seed, prefix="probe", dtype=np.float32)
    opt = OptimizerState("sgd_momentum", lr, 0.0, momentum)
    rng = stream(seed, "probe-order")
    for _ in range(epochs):
        order = rng.permutation(len(x))
        for s in range(0, len(x), batch):
            idx = order[s:s + batch]
            params.zero_grad()
            out = head_forward(spec, params, Tensor(x[idx]), prefix="probe")
            if objective == "mse":
                loss = T.mse(out, y[idx].astype(np.float32))
            else:
                loss = T.softmax_cross_entropy(out, y[idx])
            if not np.isfinite(loss.data):
                raise FloatingPointError("probe training produced a non-finite loss")
            loss.backward()
            optimizer_step(opt, params)
    return params


def probe_predict(spec: HeadSpec, params, x: np.ndarray, batch: int = 4096) -> np.ndarray:
    return np.concatenate([head_forward(spec, params, Tensor(x[s:s + batch]), prefix="probe").data
                           for s in range(0, len(x), batch)])


def pair_dataset(views: ViewSet, reps: np.ndarray, lattice: np.ndarray, pairs_per_instance: int,
                 seed: int, tag: str) -> tuple:
    """Concatenated representation pairs from one instance and their relative-pose targets."""
    poses = poses_from_vectors(lattice)
    xs, rows_a, rows_b = [], [], []
    for r, inst in enumerate(views.instances):
        i, j = sample_pairs(stream(seed, f"pairs/{tag}/{views.pose_set}/{inst.key}"), views.n_poses,
                            pairs_per_instance)
        rows_a.append(r * views.n_poses + i)
        rows_b.append(r * views.n_poses + j)
    a = np.concatenate(rows_a)
    b = np.concatenate(rows_b)
    x = np.concatenate([reps[a], reps[b]], axis=1)
    pa, pb = poses[views.index[a, 2]], poses[views.index[b, 2]]
    return x, relpose_targets(pa, pb), (wrap_angle(pb[:, 0] - pa[:, 0]), pb[:, 1] - pa[:, 1])


# scenarios ----------------------------------------------------------------------

class Evaluator:
    """Runs scenarios for one frozen model, caching views and representations.

    ``seed`` labels the records (normally the training seed); pair sampling
    and probe initialisation use the manifest seed so that two encoders are
    compared on identical probe data.
    """

    def __init__(self, model: Model, manifest: Manifest, cfg: EvalConfig = EvalConfig(), seed: int = 0,
                 source: ImageSource | None = None, jobs: int = 1):
        cfg.validate()
        self.model = model
        self.manifest = manifest
        self.cfg = cfg
        self.seed = seed
        self.source = source or ImageSource(manifest)
        self.jobs = jobs
        self._views: dict = {}
        self._reps: dict = {}

    def views(self, domain: str, split: str, pose_set: str) -> ViewSet:
        key = (domain, split, pose_set)
        if key not in self._views:
            self._views[key] = collect_views(self.source, self.manifest.select(domain, split), pose_set)
        return self._views[key]

    def reps(self, domain: str, split: str, pose_set: str, layer: str) -> np.ndarray:
        _check_layer(layer)
        key = (domain, split, pose_set, layer)
        if key not in self._reps:
            views = self.views(domain, split, pose_set)
            if layer in PATCH_LAYERS:
                self._reps[key] = extract_representations(self.model, views.images, layer,
                                                          self.cfg.encode_batch, self.jobs)
            else:
                # one pass fills every plain layer for this view set
                mats = encode_layers(self.model, views.images, PLAIN_LAYERS, self.cfg.encode_batch, self.jobs)
                for name, mat in mats.items():
                    self._reps[(domain, split, pose_set, name)] = mat
        return self._reps[key]

    def _split(self, kind: str, layer: str) -> tuple:
        domain, pose_set = SCENARIO_DATA[kind]
        train, test = self.views(domain, "train", pose_set), self.views(domain, "test", pose_set)
        if train.keys & test.keys:
            raise AssertionError(f"{kind}: train and test instances overlap")
        if not train.instances or not test.instances:
            raise ValueError(f"{kind}: manifest has no {domain} instances in one of the splits")
        return (train, self.reps(domain, "train", pose_set, layer),
                test, self.reps(domain, "test", pose_set, layer), pose_set)

    def _probe_seed(self, kind: str) -> int:
        # independent of the layer, so layers are compared under the same draws
        return derive_seed(self.manifest.seed, f"probe/{kind}")

    def run(self, kind: str, layer: str) -> MetricsRecord:
        if kind not in SCENARIOS:
            raise ValueError(f"unknown scenario {kind!r}; valid: {', '.join(SCENARIOS)}")
        _check_layer(layer)
        start = time.perf_counter()
        cfg = self.cfg
        train, x_train, test, x_test, pose_set = self._split(kind, layer)
        if kind == "in_domain_abs":
            correct, n = knn_absolute_pose(x_train, train.index[:, 2], x_test, test.index[:, 2],
                                           cfg.k, cfg.temperature, train.n_poses)
        elif kind == "semantic_cls":
            xs, xt = standardize(x_train, x_test)
            n_cls = len(self.manifest.families("in_domain"))
            spec = HeadSpec("linear_probe", xs.shape[1], xs.shape[1], n_cls)
            params = fit_probe(spec, xs, train.index[:, 0], "ce", cfg.probe_epochs, cfg.probe_batch,
                               cfg.semantic_lr, cfg.probe_momentum, self._probe_seed(kind))
            pred = np.argmax(probe_predict(spec, params, xt), axis=1)
            correct, n = int(np.sum(pred == test.index[:, 0])), len(pred)
        else:
            lattice = self.manifest.poses(pose_set)
            seed = self.manifest.seed
            x_tr, y_tr, _ = pair_dataset(train, x_train, lattice, cfg.train_pairs, seed, "train")
            x_te, _, (d_az, d_el) = pair_dataset(test, x_test, lattice, cfg.eval_pairs, seed, "test")
            x_tr, x_te = standardize(x_tr, x_te)
            dim = x_tr.shape[1]
            spec = HeadSpec("relpose_probe", dim, dim, 3)
            params = fit_probe(spec, x_tr, y_tr, "mse", cfg.probe_epochs, cfg.probe_batch, cfg.relpose_lr,
                               cfg.probe_momentum, self._probe_seed(kind))
            pred = probe_predict(spec, params, x_te)
            correct = int(np.sum(relpose_errors(pred, d_az, d_el) < cfg.theta_tol))
            n = len(pred)
        return MetricsRecord(kind, layer, correct, n, self.seed, time.perf_counter() - start)


def run_scenario(kind: str, layer: str, model: Model, manifest: Manifest, cfg: EvalConfig = EvalConfig(),
                 seed: int = 0) -> MetricsRecord:
    return Evaluator(model, manifest, cfg, seed).run(kind, layer)


def patch_embedding_eval(evaluator: Evaluator, m: int, kind: str = "in_domain_rel") -> MetricsRecord:
    """Relative-pose probe on concatenated per-patch pooled features (m x m grid)."""
    if m not in (1, 3, 4):
        raise ValueError(f"patch grid must be 1, 3 or 4, got {m}")
    return evaluator.run(kind, f"patch_m{m}")
