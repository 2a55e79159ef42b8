"""Self-supervised training with optional trajectory regularization.

Each step draws a batch of training instances. For every instance a triplet
of adjacent views is sampled (never augmented) and the centre view is
augmented twice for the semantic loss::

    total = semantic(projector(aug1), projector(aug2)) + lam * traj(z_left, z_center, z_right)

The semantic pair and the triplet go through the encoder as two separate
batches. With ``lam == 0`` the trajectory branch only ever adds exact zeros
to the parameter gradients, so the run is bitwise the invariant baseline.
All randomness comes from named streams keyed by instance and step, which
makes the amount of drawing in one branch irrelevant to the other.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from trajssl.data.augment import augment
from trajssl.data.dataset import ImageSource, triplet_stream
from trajssl.data.manifest import Manifest
from trajssl.data.triplets import TRIPLET_MODES, sample_triplet_poses
from trajssl.nn import lossops
from trajssl.nn import tensor as T
from trajssl.nn.model import Model, ModelConfig
from trajssl.nn.optim import OPTIMIZER_KINDS, OptimizerState, optimizer_step
from trajssl.nn.tensor import Tensor
from trajssl.rng import stream

SEMANTIC_LOSSES = ("ntxent", "vicreg")
TRAJ_LAYERS = ("feature", "conv3", "conv4")
COMPRESSION_HEADS = {"conv3": "compress3", "conv4": "compress4"}


@dataclass(frozen=True)
class TrainConfig:
    semantic_loss: str = "ntxent"
    lam: float = 0.01
    traj_loss_layer: str = "feature"
    epochs: int = 40
    batch_size: int = 64
    passes_per_epoch: int = 4
    optimizer: str = "sgd_momentum"
    learning_rate: float = 0.05
    weight_decay: float = 1e-4
    momentum: float = 0.9
    temperature: float = 0.5
    triplet_mode: str = "equidistant"
    seed: int = 0

    def validate(self):
        if self.semantic_loss not in SEMANTIC_LOSSES:
            raise ValueError(f"semantic_loss must be one of {SEMANTIC_LOSSES}")
        if not (self.lam >= 0.0 and math.isfinite(self.lam)):
            raise ValueError("lam must be a finite non-negative number")
        if self.traj_loss_layer not in TRAJ_LAYERS:
            raise ValueError(f"traj_loss_layer must be one of {TRAJ_LAYERS}")
        if self.optimizer not in OPTIMIZER_KINDS:
            raise ValueError(f"optimizer must be one of {OPTIMIZER_KINDS}")
        if self.triplet_mode not in TRIPLET_MODES:
            raise ValueError(f"triplet_mode must be one of {TRIPLET_MODES}")
        if self.epochs < 0 or self.batch_size < 2 or self.passes_per_epoch < 1:
            raise ValueError("epochs >= 0, batch_size >= 2 and passes_per_epoch >= 1 are required")

    def to_dict(self) -> dict:
        return asdict(self)


class TrainingDiverged(FloatingPointError):
    def __init__(self, step: int, components: dict):
        self.step = step
        self.components = components
        parts = ", ".join(f"{k}={v!r}" for k, v in components.items())
        super().__init__(f"non-finite loss at step {step}: {parts}")


@dataclass
class StepRecord:
    epoch: int
    step: int
    sem_loss: float
    traj_loss: float
    total: float


@dataclass
class TrainResult:
    model: Model
    history: list = field(default_factory=list)

    def epoch_table(self) -> list:
        """Per-epoch means as ``(epoch, sem_loss, traj_loss, total)`` rows."""
        rows = []
        for e in sorted({h.epoch for h in self.history}):
            hs = [h for h in self.history if h.epoch == e]
            rows.append((e, *(float(np.mean([getattr(h, k) for h in hs])) for k in ("sem_loss", "traj_loss", "total"))))
        return rows


def epoch_batches(cfg: TrainConfig, n_instances: int, epoch: int) -> list:
    """Instance-index batches for one epoch: ``passes_per_epoch`` shuffled passes.

    A trailing batch smaller than 2 is dropped (the semantic losses need
    at least two rows).
    """
    rng = stream(cfg.seed, f"epoch/{epoch}")
    order = np.concatenate([rng.permutation(n_instances) for _ in range(cfg.passes_per_epoch)])
    batches = [order[i:i + cfg.batch_size] for i in range(0, len(order), cfg.batch_size)]
    return [b for b in batches if len(b) >= 2]


def semantic_loss(cfg: TrainConfig, za: Tensor, zb: Tensor) -> Tensor:
    if cfg.semantic_loss == "ntxent":
        return lossops.ntxent_loss(T.l2_normalize(za), T.l2_normalize(zb), cfg.temperature)
    return lossops.vicreg_loss(za, zb)


def _traj_on(z: Tensor, b: int) -> Tensor:
    z = T.l2_normalize(z)
    return lossops.traj_loss(z[0:b], z[b:2 * b], z[2 * b:3 * b])


class Trainer:
    """Holds model, optimizer state and image source for one training run.

    ``traj_enabled=False`` removes the trajectory branch entirely (no
    triplet rendering, no extra forward pass); it exists to check that a
    ``lam = 0`` run is bitwise identical to the pure semantic baseline.
    """

    def __init__(self, cfg: TrainConfig, manifest: Manifest, model_config: ModelConfig = ModelConfig(),
                 source: ImageSource | None = None, traj_enabled: bool = True):
        cfg.validate()
        self.cfg = cfg
        self.manifest = manifest
        self.source = source or ImageSource(manifest)
        self.model = Model(model_config, seed=cfg.seed)
        self.opt = OptimizerState(cfg.optimizer, cfg.learning_rate, cfg.weight_decay, cfg.momentum)
        self.traj_enabled = traj_enabled
        self.instances = manifest.select("in_domain", "train")
        self.lattice = manifest.poses("in_domain")
        self.dtype = np.float32

    def _batch_images(self, batch, step: int):
        cfg = self.cfg
        aug_a, aug_b, left, center, right = [], [], [], [], []
        for i in batch:
            inst = self.instances[int(i)]
            poses = sample_triplet_poses(self.lattice, triplet_stream(cfg.seed, inst, step), cfg.triplet_mode)
            # the augmentation source is the lattice view at the triplet's centre index
            base = self.source.lattice_view(inst, "in_domain", poses.center_index)
            rng = stream(cfg.seed, f"augment/{inst.key}/{step}")
            aug_a.append(augment(base, rng))
            aug_b.append(augment(base, rng))
            if self.traj_enabled:
                trip = self.source.triplet(inst, poses)
                left.append(trip.left.pixels)
                center.append(trip.center.pixels)
                right.append(trip.right.pixels)
        sem = np.stack(aug_a + aug_b)[:, None].astype(self.dtype)
        trip = np.stack(left + center + right)[:, None].astype(self.dtype) if self.traj_enabled else None
        return sem, trip

    def step(self, batch, step: int) -> StepRecord:
        cfg, model = self.cfg, self.model
        b = len(batch)
        sem_images, trip_images = self._batch_images(batch, step)
        params = model.params
        params.zero_grad()

        feats = model.encode(sem_images)["feature"]
        proj = model.head("projector", feats)
        l_sem = semantic_loss(cfg, proj[0:b], proj[b:2 * b])
        total = l_sem
        traj_value = 0.0
        if self.traj_enabled:
            lam = self.dtype(cfg.lam)
            taps = model.encode(trip_images)
            if cfg.traj_loss_layer == "feature":
                l_traj = _traj_on(taps["feature"], b)
            else:
                head = COMPRESSION_HEADS[cfg.traj_loss_layer]
                l_traj = _traj_on(model.head(head, taps[cfg.traj_loss_layer]), b)
            traj_value = float(l_traj.data)
            total = total + l_traj * lam
            # compression heads learn on detached taps unless they carry the main loss
            for layer, head in COMPRESSION_HEADS.items():
                if layer != cfg.traj_loss_layer:
                    total = total + _traj_on(model.head(head, taps[layer].detach()), b) * lam

        comps = {"sem_loss": float(l_sem.data), "traj_loss": traj_value, "total": float(total.data)}
        if not all(math.isfinite(v) for v in comps.values()):
            raise TrainingDiverged(step, comps)
        total.backward()
        try:
            optimizer_step(self.opt, params)
        except FloatingPointError as exc:
            raise TrainingDiverged(step, {**comps, "gradient": str(exc)}) from exc
        return StepRecord(0, step, comps["sem_loss"], comps["traj_loss"], comps["total"])

    def run(self, progress=None) -> TrainResult:
        result = TrainResult(self.model)
        step = 0
        for epoch in range(self.cfg.epochs):
            for batch in epoch_batches(self.cfg, len(self.instances), epoch):
                rec = self.step(batch, step)
                rec.epoch = epoch
                result.history.append(rec)
                step += 1
            if progress is not None:
                progress(epoch, result)
        return result


def train_ssl(cfg: TrainConfig, manifest: Manifest, model_config: ModelConfig = ModelConfig(),
              source: ImageSource | None = None, traj_enabled: bool = True, progress=None) -> TrainResult:
    """Train an encoder from the seeded initialization; returns model and loss history."""
    return Trainer(cfg, manifest, model_config, source, traj_enabled).run(progress)


def with_lambda(cfg: TrainConfig, lam: float) -> TrainConfig:
    return replace(cfg, lam=float(lam))
