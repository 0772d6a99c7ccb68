"""End-to-end optimization: pair-balanced mini-batch SGD with momentum, a
plateau-driven learning-rate schedule, optional hard-negative mining, and a
versioned binary checkpoint format.

Checkpoint layout (little-endian): magic ``DHSL``, u32 format version, 4-byte
layout tag ``NHWC``, u64 feature dim, f64 channel multiplier, a JSON blob
(config + optional trainer state), a tensor table of (name, dims, offset),
then raw float32 scalars in C order. Save -> load -> save is byte-identical.
"""

from __future__ import annotations

import dataclasses
import io
import json
import os
import struct
import time
from dataclasses import dataclass

import numpy as np

from .data import DatasetManifest, random_augment
from .errors import (CheckpointFormatError, ConfigError, DataError,
                     TrainingDivergenceError)
from .layers import StackConfig
from .model import HEADS, PairModel, build_model

CHECKPOINT_MAGIC = b"DHSL"
CHECKPOINT_VERSION = 1
LAYOUT_TAG = b"NHWC"


@dataclass
class TrainConfig:
    """Training hyperparameters; defaults mirror the recommended small-dataset
    regime (batch 128 split 64/64, momentum 0.9, alpha 5e-2, base lr 1e-3,
    decay to 1/10 on plateau, floor 1e-4)."""

    alpha: float = 5e-2
    batch_size: int = 128
    pos_per_batch: int = 64
    momentum: float = 0.9
    base_lr: float = 1e-3
    lr_decay_factor: float = 0.1
    min_lr: float = 1e-4
    plateau_patience: int = 3
    plateau_threshold: float = 1e-3
    max_epochs: int = 20
    steps_per_epoch: int = 100
    hard_negative_mining: bool = False
    mining_pool: int = 1024
    mining_keep: int = 256
    seed: int = 0
    channel_multiplier: float = 1.0
    head: str = "hybrid"
    augmentation: str = "none"
    weight_decay: float = 0.0

    def __post_init__(self):
        if not (0 < self.min_lr <= self.base_lr):
            raise ConfigError(
                f"require 0 < min_lr <= base_lr, got {self.min_lr}, {self.base_lr}"
            )
        if not (0 <= self.momentum < 1):
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.pos_per_batch > self.batch_size or self.pos_per_batch < 1:
            raise ConfigError(
                f"need 1 <= pos_per_batch <= batch_size, got "
                f"{self.pos_per_batch}/{self.batch_size}"
            )
        if self.alpha < 0:
            raise ConfigError(f"alpha must be >= 0, got {self.alpha}")
        if self.head not in HEADS:
            raise ConfigError(f"unknown head {self.head!r}")
        if self.mining_keep > self.mining_pool:
            raise ConfigError("mining_keep cannot exceed mining_pool")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        return dataclasses.asdict(self)


@dataclass
class PairBatch:
    """A mini-batch of image pairs with +1 (same identity) / -1 labels."""

    img1: np.ndarray
    img2: np.ndarray
    labels: np.ndarray
    index_pairs: list


def sample_batch(manifest: DatasetManifest, images, config: TrainConfig, rng,
                 hard_negatives=None):
    """Draw pos_per_batch cross-camera positives and the remaining negatives.

    Positive pairs come from one identity seen by two different cameras;
    negative pairs join two distinct identities. ``hard_negatives`` is an
    optional list of pre-mined negative index pairs to draw from instead of
    the full dataset.
    """
    pos_ids = manifest.cross_camera_identities()
    all_ids = manifest.identities()
    if not pos_ids:
        raise DataError("no identity has images from two cameras; "
                        "cannot form positive pairs")
    if len(all_ids) < 2:
        raise DataError("need at least 2 identities to form negative pairs")

    n_neg = config.batch_size - config.pos_per_batch
    pairs = []
    labels = np.empty(config.batch_size, dtype=np.float32)
    for k in range(config.pos_per_batch):
        ident = pos_ids[rng.integers(len(pos_ids))]
        cams = manifest.cameras_of(ident)
        ca, cb = rng.choice(len(cams), size=2, replace=False)
        ia = manifest.indices_of(ident, cams[ca])
        ib = manifest.indices_of(ident, cams[cb])
        pairs.append((ia[rng.integers(len(ia))], ib[rng.integers(len(ib))]))
        labels[k] = 1.0
    for k in range(n_neg):
        if hard_negatives:
            pairs.append(hard_negatives[rng.integers(len(hard_negatives))])
        else:
            a, b = rng.choice(len(all_ids), size=2, replace=False)
            ia = manifest.indices_of(all_ids[a])
            ib = manifest.indices_of(all_ids[b])
            pairs.append((ia[rng.integers(len(ia))], ib[rng.integers(len(ib))]))
        labels[config.pos_per_batch + k] = -1.0

    img1 = np.stack([
        random_augment(images[i], config.augmentation, rng) for i, _ in pairs
    ])
    img2 = np.stack([
        random_augment(images[j], config.augmentation, rng) for _, j in pairs
    ])
    return PairBatch(img1, img2, labels, pairs)


class MomentumState:
    """Velocity buffers congruent to the model's parameter vector."""

    def __init__(self, model: PairModel):
        self.velocity = {name: np.zeros_like(p)
                         for name, p in model.named_parameters()}

    def as_vector(self):
        return np.concatenate([v.ravel() for v in self.velocity.values()])


def train_step(model: PairModel, momentum_state: MomentumState,
               batch: PairBatch, lr, config: TrainConfig):
    """One SGD-with-momentum update: v <- mu v - lr g; theta <- theta + v.

    Batch-norm running statistics update as a side effect of the forward
    pass, including at lr = 0. Returns the batch loss.
    """
    if lr < 0:
        raise ValueError(f"lr must be >= 0, got {lr}")
    model.zero_grad()
    loss, _ = model.loss_and_gradients(
        batch.img1, batch.img2, batch.labels, config.alpha, mode="train"
    )
    if not np.isfinite(loss):
        raise TrainingDivergenceError(f"non-finite loss {loss}", where="loss")
    for name, g in model.named_gradients():
        if not np.all(np.isfinite(g)):
            raise TrainingDivergenceError(
                f"non-finite gradient in {name}", where=name
            )
    grads = dict(model.named_gradients())
    for name, p in model.named_parameters():
        g = grads[name]
        if config.weight_decay and name.split(".")[0].startswith("C"):
            g = g + config.weight_decay * p
        v = momentum_state.velocity[name]
        v *= config.momentum
        v -= lr * g
        p += v
    return loss


def lr_schedule_step(epoch_losses, lr, config: TrainConfig):
    """Reduce lr tenfold when the best epoch loss has stopped improving.

    Plateau rule: if the best loss of the last ``plateau_patience`` epochs is
    not better than the best before them by more than ``plateau_threshold``
    relative, decay toward ``min_lr``.
    """
    p = config.plateau_patience
    if len(epoch_losses) < p:
        return lr
    recent = min(epoch_losses[-p:])
    prior = epoch_losses[:-p]
    baseline = min(prior) if prior else epoch_losses[-p]
    if baseline - recent > config.plateau_threshold * max(abs(baseline), 1e-12):
        return lr
    return max(lr * config.lr_decay_factor, config.min_lr)


def mine_hard_negatives(model: PairModel, manifest: DatasetManifest, images,
                        pool_size, keep_count, rng):
    """Score a random pool of negative pairs; keep the highest-scoring ones.

    Features are extracted once per image so the pool scoring is a cheap
    feature-space pass. Returns the exact top-k index pairs by score.
    """
    if keep_count > pool_size:
        raise ValueError("keep_count cannot exceed pool_size")
    ids = manifest.identities()
    if len(ids) < 2:
        raise DataError("mining needs at least 2 identities")
    candidates = []
    for _ in range(pool_size):
        a, b = rng.choice(len(ids), size=2, replace=False)
        ia = manifest.indices_of(ids[a])
        ib = manifest.indices_of(ids[b])
        candidates.append((ia[rng.integers(len(ia))], ib[rng.integers(len(ib))]))
    if not candidates:
        raise DataError("empty mining pool")
    unique = sorted({i for pair in candidates for i in pair})
    feats = {}
    chunk = 256
    for s in range(0, len(unique), chunk):
        sel = unique[s : s + chunk]
        f = model.features(images[sel], mode="infer")
        for u, row in zip(sel, f):
            feats[u] = row
    x1 = np.stack([feats[i] for i, _ in candidates])
    x2 = np.stack([feats[j] for _, j in candidates])
    scores = model.score_features(x1, x2)
    order = np.argsort(-scores, kind="stable")
    return [candidates[i] for i in order[:keep_count]]


# ---- checkpointing -------------------------------------------------------------


def _named_tensors(model: PairModel, velocities=None):
    tensors = list(model.named_parameters()) + list(model.named_state())
    if velocities is not None:
        tensors += [(f"velocity/{n}", v) for n, v in velocities.items()]
    return tensors


def save_checkpoint(model: PairModel, config: TrainConfig, path,
                    trainer_state=None, velocities=None):
    """Write the versioned binary checkpoint; see the module docstring."""
    blob = {"config": config.to_dict(), "head": model.head,
            "stack": dataclasses.asdict(model.stack.config)}
    if trainer_state is not None:
        blob["trainer_state"] = trainer_state
    blob_bytes = json.dumps(blob, sort_keys=True).encode("utf-8")

    tensors = _named_tensors(model, velocities)
    table = io.BytesIO()
    data = io.BytesIO()
    table.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors:
        nb = name.encode("utf-8")
        table.write(struct.pack("<H", len(nb)))
        table.write(nb)
        table.write(struct.pack("<B", arr.ndim))
        for dim in arr.shape:
            table.write(struct.pack("<I", dim))
        table.write(struct.pack("<Q", data.tell()))
        data.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())

    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(LAYOUT_TAG)
        fh.write(struct.pack("<Q", model.feature_dim))
        fh.write(struct.pack("<d", config.channel_multiplier))
        fh.write(struct.pack("<I", len(blob_bytes)))
        fh.write(blob_bytes)
        fh.write(table.getvalue())
        fh.write(data.getvalue())
    os.replace(tmp, path)


def load_checkpoint(path):
    """Read a checkpoint back into (model, config, trainer_state).

    Raises CheckpointFormatError on a bad magic/version or dimension
    mismatch; the model is only constructed after the whole file parses.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    buf = io.BytesIO(raw)

    def take(n, what):
        b = buf.read(n)
        if len(b) != n:
            raise CheckpointFormatError(f"truncated checkpoint while reading {what}")
        return b

    if take(4, "magic") != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"{path} is not a DHSL checkpoint (bad magic)")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    if take(4, "layout") != LAYOUT_TAG:
        raise CheckpointFormatError("unsupported tensor layout tag")
    (d,) = struct.unpack("<Q", take(8, "feature dim"))
    (channel_mult,) = struct.unpack("<d", take(8, "channel multiplier"))
    (blob_len,) = struct.unpack("<I", take(4, "config length"))
    blob = json.loads(take(blob_len, "config blob").decode("utf-8"))
    config = TrainConfig.from_dict(blob["config"])
    if config.channel_multiplier != channel_mult:
        raise CheckpointFormatError(
            f"header channel multiplier {channel_mult} disagrees with config "
            f"{config.channel_multiplier}"
        )

    (count,) = struct.unpack("<I", take(4, "tensor count"))
    table = []
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        name = take(name_len, "tensor name").decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1, "rank"))
        dims = tuple(struct.unpack("<I", take(4, "dim"))[0] for _ in range(ndim))
        (offset,) = struct.unpack("<Q", take(8, "offset"))
        table.append((name, dims, offset))
    data_start = buf.tell()

    arrays = {}
    for name, dims, offset in table:
        size = int(np.prod(dims)) if dims else 1
        start = data_start + offset
        end = start + 4 * size
        if end > len(raw):
            raise CheckpointFormatError(f"tensor {name} overruns the file")
        arrays[name] = np.frombuffer(
            raw, dtype="<f4", count=size, offset=start
        ).reshape(dims).copy()

    stack_config = None
    if "stack" in blob:
        raw = dict(blob["stack"])
        raw["channels"] = tuple(raw["channels"])
        raw["avg_kernel"] = tuple(raw["avg_kernel"])
        stack_config = StackConfig(**raw)
    model = build_model(channel_multiplier=config.channel_multiplier,
                        head=blob.get("head", config.head), seed=0,
                        stack_config=stack_config)
    if model.feature_dim != d:
        raise CheckpointFormatError(
            f"checkpoint feature dim {d} != model {model.feature_dim}"
        )
    for name, p in _named_tensors(model):
        if name not in arrays:
            raise CheckpointFormatError(f"checkpoint is missing tensor {name}")
        if arrays[name].shape != p.shape:
            raise CheckpointFormatError(
                f"tensor {name}: checkpoint {arrays[name].shape} != model {p.shape}"
            )
        p[...] = arrays[name]
    velocities = {
        name[len("velocity/"):]: arr
        for name, arr in arrays.items() if name.startswith("velocity/")
    }
    trainer_state = blob.get("trainer_state")
    if trainer_state is not None and velocities:
        trainer_state = dict(trainer_state, velocities=velocities)
    return model, config, trainer_state


# ---- the training loop -----------------------------------------------------------


@dataclass
class TrainingResult:
    epoch_losses: list
    step_losses: list
    final_lr: float
    steps: int


def run_training(model: PairModel, manifest: DatasetManifest, images,
                 config: TrainConfig, out_dir=None, log_path=None,
                 resume_state=None, stop_fn=None):
    """Train for up to max_epochs, checkpointing per epoch when out_dir is set.

    ``stop_fn(model, epoch, epoch_losses)`` may return True to stop early.
    ``resume_state`` (from load_checkpoint) restores the sampler RNG, momentum
    velocities, learning rate, and loss history so a resumed single-worker run
    continues the exact trajectory.
    """
    momentum_state = MomentumState(model)
    rng = np.random.default_rng(config.seed)
    lr = config.base_lr
    epoch_losses = []
    step_losses = []
    start_epoch = 0
    global_step = 0
    if resume_state:
        rng.bit_generator.state = resume_state["rng_state"]
        lr = resume_state["lr"]
        epoch_losses = list(resume_state["epoch_losses"])
        start_epoch = resume_state["epoch"]
        global_step = resume_state["step"]
        for name, v in resume_state.get("velocities", {}).items():
            momentum_state.velocity[name][...] = v

    log_fh = open(log_path, "a", encoding="utf-8") if log_path else None
    try:
        hard_negatives = None
        for epoch in range(start_epoch, config.max_epochs):
            if config.hard_negative_mining:
                mine_rng = np.random.default_rng(
                    np.random.SeedSequence([config.seed, 0x3A1E, epoch])
                )
                hard_negatives = mine_hard_negatives(
                    model, manifest, images, config.mining_pool,
                    config.mining_keep, mine_rng,
                )
            losses = []
            for _ in range(config.steps_per_epoch):
                batch = sample_batch(manifest, images, config, rng,
                                     hard_negatives=hard_negatives)
                loss = train_step(model, momentum_state, batch, lr, config)
                losses.append(loss)
                global_step += 1
                if log_fh:
                    log_fh.write(
                        f"{global_step}\t{epoch}\t{lr:.6g}\t{loss:.6f}\t"
                        f"{time.time():.3f}\n"
                    )
            epoch_losses.append(float(np.mean(losses)))
            step_losses.extend(losses)
            lr = lr_schedule_step(epoch_losses, lr, config)
            if log_fh:
                log_fh.flush()
            if out_dir:
                state = {
                    "epoch": epoch + 1,
                    "step": global_step,
                    "lr": lr,
                    "epoch_losses": epoch_losses,
                    "rng_state": rng.bit_generator.state,
                }
                save_checkpoint(model, config,
                                os.path.join(out_dir, "checkpoint.dhsl"),
                                trainer_state=state,
                                velocities=momentum_state.velocity)
            if stop_fn and stop_fn(model, epoch, epoch_losses):
                break
    finally:
        if log_fh:
            log_fh.close()
    return TrainingResult(epoch_losses, step_losses, lr, global_step)
