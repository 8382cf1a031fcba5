"""Optimization: Adam, staged schedules, the two training loops.

A schedule is a list of stages; each stage names the freezing groups it
unfreezes, its learning rate, and its epoch count. Training starts a
fresh set of Adam moments per stage (a stage change reshapes the
trainable set, and restarting the moments keeps the first steps bounded).

Determinism contract: batch order is keyed by (seed, global epoch),
augmentation by (seed, global epoch, sample index), initialization by the
caller's generator. Two runs with the same seed and data produce
bit-identical parameters; the training log differs only in its wall-clock
column. Interrupting after any epoch and resuming from the checkpoint
continues the exact same trajectory.
"""

from __future__ import annotations

import json
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, restore_into, save_checkpoint
from .datasets import (
    ImageSet,
    PatchSet,
    augment_patches,
    balanced_batch_weights,
    batch_indices,
)
from .errors import CheckpointError, ConfigError, UsageError
from .graph import PATCH_CLASSES, NetworkGraph
from .kernels import Parameter, softmax_cross_entropy
from .metrics import accuracy, predict_probs, roc_auc
from .rng import per_index


class Adam(object):
    """Adaptive-moment SGD. Bias-corrected first/second moments; the
    damping constant sits outside the square root, which pins the first
    update of a unit gradient to exactly lr / (1 + eps)."""

    def __init__(self, params: list[Parameter], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {lr}")
        names = [p.name for p in params]
        if len(set(names)) != len(names):
            raise UsageError("optimizer got duplicate parameter names")
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {p.name: np.zeros_like(p.value) for p in self.params}
        self.v = {p.name: np.zeros_like(p.value) for p in self.params}

    def step(self) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for p in self.params:
            if p.grad is None:
                raise UsageError(f"{p.name}: step without a gradient")
            g = p.grad
            m = self.m[p.name]
            v = self.v[p.name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.value -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)

    # -- serialization -------------------------------------------------------

    def state_bytes(self) -> bytes:
        from .checkpoint import _pack_arrays

        head = json.dumps({"t": self.t, "lr": self.lr, "beta1": self.beta1,
                           "beta2": self.beta2, "eps": self.eps}).encode()
        arrays = {}
        for p in self.params:
            arrays[f"{p.name}#m"] = self.m[p.name]
            arrays[f"{p.name}#v"] = self.v[p.name]
        packed = _pack_arrays(arrays)
        return struct.pack("<I", len(head)) + head + packed

    def load_state_bytes(self, raw: bytes) -> None:
        from .checkpoint import _unpack_arrays

        (hlen,) = struct.unpack("<I", raw[:4])
        head = json.loads(raw[4:4 + hlen])
        arrays = _unpack_arrays(raw[4 + hlen:])
        self.t = int(head["t"])
        for key in ("lr", "beta1", "beta2", "eps"):
            setattr(self, key, float(head[key]))
        for p in self.params:
            mk, vk = f"{p.name}#m", f"{p.name}#v"
            if mk not in arrays or vk not in arrays:
                raise CheckpointError(f"optimizer state lacks moments for {p.name}")
            if arrays[mk].shape != p.value.shape:
                raise CheckpointError(f"optimizer moment shape mismatch for {p.name}")
            self.m[p.name] = arrays[mk].astype(p.value.dtype)
            self.v[p.name] = arrays[vk].astype(p.value.dtype)


@dataclass(frozen=True)
class Stage:
    lr: float
    groups: object  # list of group names, or the string 'all'
    epochs: int

    def group_label(self) -> str:
        return "all" if self.groups == "all" else "+".join(self.groups)


PATCH_SCHEDULE = (
    Stage(1e-3, ("head",), 3),
    Stage(1e-4, ("head", "top"), 10),
    Stage(1e-5, "all", 37),
)

IMAGE_SCHEDULE = (
    Stage(1e-4, ("image-top",), 10),
    Stage(1e-5, "all", 20),
)


def scale_schedule(schedule, factor: float):
    """Shrink or stretch every stage, keeping the stage-length ratios;
    each stage keeps at least one epoch."""
    if factor <= 0:
        raise ConfigError(f"schedule scale factor must be positive, got {factor}")
    return tuple(Stage(s.lr, s.groups, max(1, math.ceil(s.epochs * factor)))
                 for s in schedule)


@dataclass
class TrainRun:
    """Per-epoch training log. The seconds column is wall clock and is the
    one column excluded from determinism comparisons."""

    columns = ("stage", "epoch_in_stage", "global_epoch", "lr", "groups",
               "mean_loss", "val_metric", "seconds")
    rows: list[tuple] = field(default_factory=list)

    def log(self, **kw) -> None:
        self.rows.append(tuple(kw[c] for c in self.columns))

    def to_csv(self, path) -> None:
        import csv

        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.columns)
            for row in self.rows:
                w.writerow([repr(v) if isinstance(v, float) else v for v in row])

    def last_val(self) -> float:
        if not self.rows:
            raise UsageError("empty training log")
        return float(self.rows[-1][self.columns.index("val_metric")])

    def best_index(self) -> int:
        """Row of the highest validation metric; ties go to the earliest epoch."""
        if not self.rows:
            raise UsageError("empty training log")
        col = self.columns.index("val_metric")
        vals = [float(r[col]) for r in self.rows]
        return int(np.argmax(vals))

    def best_epoch(self) -> int:
        return int(self.rows[self.best_index()][self.columns.index("global_epoch")])

    def best_val(self) -> float:
        return float(self.rows[self.best_index()][self.columns.index("val_metric")])


def _center(x: np.ndarray, pixel_mean: float, dtype) -> np.ndarray:
    return (x.astype(dtype) - dtype.type(pixel_mean))


def patch_accuracy(net: NetworkGraph, patches: PatchSet, pixel_mean: float,
                   batch_size: int = 64) -> float:
    x = _center(patches.x, pixel_mean, net.dtype)
    probs = predict_probs(net, x, batch_size=batch_size)
    return accuracy(probs.argmax(axis=1), patches.y)


def image_auc(net: NetworkGraph, images: ImageSet, pixel_mean: float,
              batch_size: int = 4) -> float:
    x = _center(images.x, pixel_mean, net.dtype)
    probs = predict_probs(net, x, batch_size=batch_size)
    return roc_auc(probs[:, 1], images.y).auc


@dataclass
class _Progress:
    """Where a (possibly resumed) run stands inside its schedule."""

    stage: int = 0
    epoch_in_stage: int = 0
    global_epoch: int = 0
    optimizer_bytes: bytes | None = None


def best_checkpoint_path(checkpoint_path) -> Path:
    """Sibling file that tracks the best-validation epoch, e.g.
    patch.ckpt -> patch.best.ckpt."""
    p = Path(checkpoint_path)
    return p.with_name(p.stem + ".best" + p.suffix)


def _resume_best(checkpoint_path, resuming: bool) -> float:
    # a stale best file from an unrelated run in the same directory must
    # not suppress best-checkpoint writes on a fresh run
    if checkpoint_path is None or not resuming:
        return -math.inf
    best_file = best_checkpoint_path(checkpoint_path)
    if not best_file.exists():
        return -math.inf
    meta = load_checkpoint(best_file).meta
    return float(meta.get("val_metric", -math.inf))


def _run_schedule(net: NetworkGraph, schedule, *, num_classes: int,
                  epoch_batches, train_batch, val_metric,
                  run: TrainRun, progress: _Progress, checkpoint_path=None,
                  checkpoint_meta=None) -> TrainRun:
    """Shared stage/epoch/batch loop for both trainers.

    epoch_batches(global_epoch) -> list of index arrays;
    train_batch(idx, global_epoch) -> (x, y) ready for the network;
    val_metric() -> float, computed after every epoch.
    """
    best = _resume_best(checkpoint_path, progress.global_epoch > 0)
    for si in range(progress.stage, len(schedule)):
        stage = schedule[si]
        net.set_trainable(stage.groups if stage.groups != "all" else "all")
        opt = Adam(net.trainable_params(), stage.lr)
        start_epoch = progress.epoch_in_stage if si == progress.stage else 0
        if start_epoch > 0 and progress.optimizer_bytes is not None:
            opt.load_state_bytes(progress.optimizer_bytes)
        for ep in range(start_epoch, stage.epochs):
            t0 = time.monotonic()
            gep = progress.global_epoch
            losses = []
            for idx in epoch_batches(gep):
                x, y = train_batch(idx, gep)
                w = balanced_batch_weights(y, num_classes)
                logits = net.forward(x, training=True)
                loss, glogits = softmax_cross_entropy(logits, y, w)
                net.zero_grads()
                net.backward(glogits)
                opt.step()
                losses.append(loss)
            progress.global_epoch += 1
            progress.epoch_in_stage = ep + 1
            metric = val_metric()
            run.log(stage=si, epoch_in_stage=ep, global_epoch=gep,
                    lr=stage.lr, groups=stage.group_label(),
                    mean_loss=float(np.mean(losses)), val_metric=metric,
                    seconds=time.monotonic() - t0)
            if checkpoint_path is not None:
                meta = dict(checkpoint_meta or {})
                meta.update({"stage": si, "epoch_in_stage": ep + 1,
                             "global_epoch": progress.global_epoch,
                             "val_metric": metric,
                             "schedule": [[s.lr, list(s.groups) if s.groups != "all" else "all",
                                           s.epochs] for s in schedule]})
                save_checkpoint(checkpoint_path, net, optimizer=opt, meta=meta)
                if metric > best:
                    best = metric
                    save_checkpoint(best_checkpoint_path(checkpoint_path), net,
                                    meta=meta)
        progress.epoch_in_stage = 0
        progress.optimizer_bytes = None
    return run


def _load_progress(resume_from, net: NetworkGraph, schedule) -> _Progress:
    progress = _Progress()
    progress.optimizer_bytes = None
    if resume_from is None:
        return progress
    ckpt = load_checkpoint(resume_from)
    restore_into(net, ckpt, strict=True)
    meta = ckpt.meta
    want = [[s.lr, list(s.groups) if s.groups != "all" else "all", s.epochs]
            for s in schedule]
    if meta.get("schedule") != want:
        raise CheckpointError("resume schedule differs from the checkpointed one")
    progress.stage = int(meta["stage"])
    progress.epoch_in_stage = int(meta["epoch_in_stage"])
    progress.global_epoch = int(meta["global_epoch"])
    progress.optimizer_bytes = ckpt.optimizer
    # a checkpoint taken at a stage boundary resumes at the next stage
    if progress.stage < len(schedule) and progress.epoch_in_stage >= schedule[progress.stage].epochs:
        progress.stage += 1
        progress.epoch_in_stage = 0
        progress.optimizer_bytes = None
    return progress


def train_patch_classifier(net: NetworkGraph, train_set: PatchSet, val_set: PatchSet,
                           *, pixel_mean: float, schedule=PATCH_SCHEDULE,
                           seed: int = 0, batch_size: int = 32, augment: bool = True,
                           checkpoint_path=None, resume_from=None) -> TrainRun:
    """Staged training of the 5-class patch net; logs validation accuracy."""
    progress = _load_progress(resume_from, net, schedule)
    run = TrainRun()
    n = len(train_set)

    def epoch_batches(gep):
        return batch_indices(n, batch_size, seed=seed, epoch=gep)

    def train_batch(idx, gep):
        x = train_set.x[idx]
        if augment:
            x = augment_patches(x, idx, seed=seed, epoch=gep)
        return _center(x, pixel_mean, net.dtype), train_set.y[idx]

    def val_metric():
        return patch_accuracy(net, val_set, pixel_mean)

    return _run_schedule(net, schedule,
                         num_classes=len(PATCH_CLASSES), epoch_batches=epoch_batches,
                         train_batch=train_batch, val_metric=val_metric, run=run,
                         progress=progress, checkpoint_path=checkpoint_path,
                         checkpoint_meta={"task": "patch", "seed": seed,
                                          "pixel_mean": pixel_mean})


def train_whole_image(net: NetworkGraph, train_set: ImageSet, val_set: ImageSet,
                      *, pixel_mean: float, schedule=IMAGE_SCHEDULE, seed: int = 0,
                      batch_size: int = 2, augment: bool = True,
                      checkpoint_path=None, resume_from=None) -> TrainRun:
    """Two-stage whole-image training (new top first, then everything);
    logs validation AUC. Augmentation is mirror flips only; translation
    would ask the fixed-size top variants for grids they cannot produce."""
    progress = _load_progress(resume_from, net, schedule)
    run = TrainRun()
    n = len(train_set)

    def epoch_batches(gep):
        return batch_indices(n, batch_size, seed=seed, epoch=gep)

    def train_batch(idx, gep):
        x = train_set.x[idx]
        if augment:
            out = np.empty_like(x)
            for row, i in enumerate(idx):
                rng = per_index(seed, f"imgaug/{gep}", int(i))
                p = x[row]
                if rng.random() < 0.5:
                    p = p[:, :, ::-1]
                if rng.random() < 0.5:
                    p = p[:, ::-1, :]
                out[row] = p
            x = out
        return _center(x, pixel_mean, net.dtype), train_set.y[idx]

    def val_metric():
        return image_auc(net, val_set, pixel_mean)

    return _run_schedule(net, schedule,
                         num_classes=2, epoch_batches=epoch_batches,
                         train_batch=train_batch, val_metric=val_metric, run=run,
                         progress=progress, checkpoint_path=checkpoint_path,
                         checkpoint_meta={"task": "image", "seed": seed,
                                          "pixel_mean": pixel_mean})
