"""Losses, SGD with momentum, toy task pipelines, and the training loops.

Two desk-scale tasks exercise the full stack:

* rotpair  -- pairs (P, R P) with R drawn from the finite rotation group;
  the network classifies which of the |G| rotations was applied.
* shapecls -- synthetic shapes under random group rotations; the network
  classifies the shape via learned per-class reference features, with an
  auxiliary anchor-matching loss against the known augmentation rotation.

Everything is deterministic given the config seed. Metrics go to a JSON
lines file (one object per epoch); parameters and normalization buffers go
to a flat binary checkpoint with a JSON manifest.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from . import cloud
from .autograd import Tape, Tensor
from .layers import Backbone, ClassHead, RotationHead
from .rotgroup import SolidSymmetry


class Diverged(RuntimeError):
    """Training loss became non-finite."""


class CheckpointMissing(FileNotFoundError):
    """No checkpoint found at the requested path."""


# ---------------------------------------------------------------------------
# losses


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-softmax at the label, stabilized by max subtraction."""
    if logits.ndim != 2:
        raise ag.ShapeMismatch(f"logits must be (B, K), got {logits.shape}")
    b, k = logits.shape
    labels = np.asarray(labels, dtype=np.int64)
    m = ag.reduce_max(logits, (1,))
    shifted = ag.sub(logits, ag.expand(m, 1, k))
    lse = ag.add(ag.log(ag.reduce_sum(ag.exp(shifted), (1,))), m)
    onehot = np.zeros((b, k))
    onehot[np.arange(b), labels] = 1.0
    picked = ag.contract(logits, Tensor(onehot), "bk,bk->b")
    return ag.reduce_mean(ag.sub(lse, picked), (0,))


def binary_cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean of softplus(x) - t*x, the overflow-free form of BCE from logits."""
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape != logits.shape:
        raise ag.ShapeMismatch(f"targets {targets.shape} vs logits {logits.shape}")
    per = ag.sub(ag.softplus(logits), ag.mul(logits, Tensor(targets)))
    return ag.reduce_mean(per, tuple(range(logits.ndim)))


# ---------------------------------------------------------------------------
# optimizer


class SGD:
    """Classical momentum: v <- mu v - lr g;  p <- p + v.

    ``scales`` optionally multiplies the learning rate per parameter
    (used to train the small prediction heads faster than the backbone).
    """

    def __init__(self, params: list[Tensor], lr: float, momentum: float = 0.9,
                 scales: list[float] | None = None):
        self.params = list(params)
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.scales = list(scales) if scales is not None else [1.0] * len(self.params)
        if len(self.scales) != len(self.params):
            raise ValueError("scales must match params")
        self.velocity = [np.zeros(p.shape) for p in self.params]

    def step(self) -> None:
        for p, v, s in zip(self.params, self.velocity, self.scales):
            if p.grad is None:
                continue
            v *= self.momentum
            v -= self.lr * s * p.grad
            p.data += v

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


def sgd_step(params: list[Tensor], grads: list[np.ndarray], state: SGD) -> None:
    """Functional form used by the unit tests; grads override .grad buffers."""
    for p, g in zip(params, grads):
        p.grad = np.asarray(g, dtype=np.float64)
    state.step()


# ---------------------------------------------------------------------------
# task specification and data generation


@dataclass
class TaskSpec:
    task: str = "rotpair"                      # rotpair | shapecls
    shapes: tuple[str, ...] = ("cube", "tetra")
    samples_per_epoch: int = 32
    val_samples: int = 64
    points: int = 256
    noise: float = 0.005
    seed: int = 0


@dataclass
class OptimSpec:
    lr: float = 1e-2
    momentum: float = 0.9
    batch: int = 8
    epochs: int = 30
    lr_decay: float = 0.5
    lr_decay_every: int = 20
    hidden: int = 32
    bce_weight: float = 1.0
    head_lr_scale: float = 10.0


def _random_group_rotation(rng: np.random.Generator, sym: SolidSymmetry) -> int:
    return int(rng.integers(0, sym.order))


def make_rotpair_samples(rng: np.random.Generator, sym: SolidSymmetry, spec: TaskSpec,
                         count: int) -> tuple[list[np.ndarray], list[np.ndarray], np.ndarray]:
    """Clouds P, rotated copies R P, and the rotation index labels."""
    first, second, labels = [], [], np.empty(count, dtype=np.int64)
    for i in range(count):
        kind = spec.shapes[int(rng.integers(0, len(spec.shapes)))]
        pts = cloud.synth_shape(kind, spec.points, spec.noise, rng).positions
        g = _random_group_rotation(rng, sym)
        rot = sym.group.elements[g]
        first.append(pts)
        second.append(pts @ rot.T)
        labels[i] = g
    return first, second, labels


def make_shapecls_samples(rng: np.random.Generator, sym: SolidSymmetry, spec: TaskSpec,
                          count: int) -> tuple[list[np.ndarray], np.ndarray, np.ndarray]:
    """Rotated shape clouds, class labels, and the augmentation rotations."""
    clouds, labels = [], np.empty(count, dtype=np.int64)
    rotations = np.empty(count, dtype=np.int64)
    for i in range(count):
        label = int(rng.integers(0, len(spec.shapes)))
        pts = cloud.synth_shape(spec.shapes[label], spec.points, spec.noise, rng).positions
        g = _random_group_rotation(rng, sym)
        clouds.append(pts @ sym.group.elements[g].T)
        labels[i] = label
        rotations[i] = g
    return clouds, labels, rotations


# ---------------------------------------------------------------------------
# batched forward helpers


def backbone_descriptor(backbone: Backbone, positions_list: list[np.ndarray],
                        plans: list | None = None) -> Tensor:
    """Run the backbone and mean-pool over points: (B, A, C_out).

    All clouds in the batch must have the same point count (no spatial
    pooling inside the trained backbones, which keeps the rotation
    equivariance of the descriptor exact). ``plans`` may carry precomputed
    gather geometry for a fixed batch.
    """
    counts = {len(p) for p in positions_list}
    if len(counts) != 1:
        raise ag.ShapeMismatch("descriptor batching needs equal point counts")
    n = counts.pop()
    b = len(positions_list)
    total = b * n
    feats = Tensor(np.ones((total, 1)))
    values = ag.expand(feats, 1, backbone.sym.num_anchors)
    if plans is None:
        plans, _ = backbone.prepare(positions_list)
    out = backbone.forward(values, plans)
    out = ag.reshape(out, (b, n, backbone.sym.num_anchors, backbone.out_channels))
    return ag.reduce_mean(out, (1,))


# ---------------------------------------------------------------------------
# model container and checkpointing


@dataclass
class Model:
    sym: SolidSymmetry
    backbone: Backbone
    head: object
    task: str

    def params(self) -> list[Tensor]:
        return self.backbone.params() + self.head.params()

    def named_params(self) -> list[tuple[str, Tensor]]:
        named = [(f"backbone.{n}", t) for n, t in self.backbone.named_params()]
        named += [(f"head.{n}", t) for n, t in self.head.named_params()]
        return named

    def named_buffers(self) -> list[tuple[str, np.ndarray]]:
        return [(f"backbone.{n}", b) for n, b in self.backbone.named_buffers()]

    def set_training(self, flag: bool) -> None:
        self.backbone.set_training(flag)

    def lr_scales(self, head_scale: float) -> list[float]:
        return ([1.0] * len(self.backbone.params())
                + [head_scale] * len(self.head.params()))


def build_model(sym: SolidSymmetry, blocks: list[dict], task: str, spec: TaskSpec,
                optim: OptimSpec, rng: np.random.Generator) -> Model:
    backbone = Backbone(sym, blocks, rng)
    if task == "rotpair":
        head = RotationHead(backbone.out_channels, optim.hidden, sym, rng)
    elif task == "shapecls":
        head = ClassHead(len(spec.shapes), backbone.out_channels, sym, rng)
    else:
        raise ValueError(f"unknown task {task!r}")
    return Model(sym=sym, backbone=backbone, head=head, task=task)


def save_checkpoint(prefix, model: Model, extra: dict | None = None) -> None:
    """Flat binary of named float64 buffers plus a JSON manifest."""
    entries = []
    blobs = []
    offset = 0
    for name, tensor in model.named_params():
        arr = np.ascontiguousarray(tensor.data, dtype=np.float64)
        entries.append({"name": name, "offset": offset, "shape": list(arr.shape),
                        "kind": "param"})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    for name, arr in model.named_buffers():
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        entries.append({"name": name, "offset": offset, "shape": list(arr.shape),
                        "kind": "buffer"})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    with open(f"{prefix}.bin", "wb") as f:
        f.write(b"".join(blobs))
    manifest = {"entries": entries, "extra": extra or {}}
    with open(f"{prefix}.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def load_checkpoint(prefix, model: Model) -> dict:
    import os
    if not (os.path.exists(f"{prefix}.bin") and os.path.exists(f"{prefix}.json")):
        raise CheckpointMissing(f"no checkpoint at {prefix}(.bin/.json)")
    with open(f"{prefix}.json") as f:
        manifest = json.load(f)
    raw = np.fromfile(f"{prefix}.bin", dtype=np.float64)
    arrays = {}
    for entry in manifest["entries"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"] // 8
        arrays[entry["name"]] = raw[start:start + count].reshape(shape)
    for name, tensor in model.named_params():
        tensor.data = arrays[name].copy()
    model.backbone.load_buffers({
        name[len("backbone."):]: arrays[name]
        for name, _ in model.named_buffers()})
    return manifest["extra"]


# ---------------------------------------------------------------------------
# training loops


def _check_finite(value: float) -> None:
    if not np.isfinite(value):
        raise Diverged(f"loss became {value}; lower the learning rate")


def _batches(n: int, batch: int):
    for lo in range(0, n, batch):
        yield np.arange(lo, min(lo + batch, n))


def balanced_pair_bce(scores: Tensor, targets: np.ndarray) -> Tensor:
    """Per-pair BCE with the positive and negative classes weighted equally.

    Only 1 of |G| rotation rows is positive; a plain mean lets the head
    collapse to predicting "no match" everywhere, so each class contributes
    half of the loss instead.
    """
    targets = np.asarray(targets, dtype=np.float64)
    per = ag.sub(ag.softplus(scores), ag.mul(scores, Tensor(targets)))
    n_pos = targets.sum()
    n_neg = targets.size - n_pos
    weights = targets / (2.0 * n_pos) + (1.0 - targets) / (2.0 * n_neg)
    letters = "abcdef"[: scores.ndim]
    return ag.contract(per, Tensor(weights), f"{letters},{letters}->")


def rotpair_loss(model: Model, f1: Tensor, f2: Tensor, labels: np.ndarray) -> Tensor:
    scores = model.head.pair_scores(f1, f2)
    b, order, a = scores.shape
    targets = np.zeros((b, order, a))
    targets[np.arange(b), labels, :] = 1.0
    return balanced_pair_bce(scores, targets)


def rotpair_predict(model: Model, f1: Tensor, f2: Tensor) -> np.ndarray:
    scores = model.head.pair_scores(f1, f2)
    logits = model.head.rotation_logits(scores)
    return logits.data.argmax(axis=1)


def evaluate_rotpair(model: Model, first, second, labels, batch: int,
                     plan_cache: dict | None = None) -> float:
    model.set_training(False)
    cache = plan_cache if plan_cache is not None else {}
    hits = 0
    for idx in _batches(len(labels), batch):
        key = int(idx[0])
        if key not in cache:
            cache[key] = (model.backbone.prepare([first[i] for i in idx])[0],
                          model.backbone.prepare([second[i] for i in idx])[0])
        p1, p2 = cache[key]
        f1 = backbone_descriptor(model.backbone, [first[i] for i in idx], plans=p1)
        f2 = backbone_descriptor(model.backbone, [second[i] for i in idx], plans=p2)
        hits += int((rotpair_predict(model, f1, f2) == labels[idx]).sum())
    return hits / len(labels)


def shapecls_loss(model: Model, f: Tensor, labels: np.ndarray,
                  rotations: np.ndarray, bce_weight: float) -> Tensor:
    logits = model.head.class_logits(f)
    loss = cross_entropy(logits, labels)
    if bce_weight > 0:
        scores = model.head.anchor_scores(f, labels)
        b, order, a = scores.shape
        targets = np.zeros((b, order, a))
        targets[np.arange(b), rotations, :] = 1.0
        loss = ag.add(loss, ag.scale(balanced_pair_bce(scores, targets), bce_weight))
    return loss


def evaluate_shapecls(model: Model, clouds, labels, batch: int,
                      plan_cache: dict | None = None) -> float:
    model.set_training(False)
    cache = plan_cache if plan_cache is not None else {}
    hits = 0
    for idx in _batches(len(labels), batch):
        key = int(idx[0])
        if key not in cache:
            cache[key] = model.backbone.prepare([clouds[i] for i in idx])[0]
        f = backbone_descriptor(model.backbone, [clouds[i] for i in idx],
                                plans=cache[key])
        pred, _ = model.head.predict(f)
        hits += int((pred == labels[idx]).sum())
    return hits / len(labels)


def _write_metrics(path, record: dict) -> None:
    if path is None:
        return
    with open(path, "a") as f:
        json.dump(record, f, sort_keys=True)
        f.write("\n")


def run_rotpair_training(sym: SolidSymmetry, blocks: list[dict], spec: TaskSpec,
                         optim: OptimSpec, metrics_path=None, checkpoint_prefix=None,
                         log=None) -> dict:
    rng = np.random.default_rng(spec.seed)
    model = build_model(sym, blocks, "rotpair", spec, optim, rng)
    val = make_rotpair_samples(rng, sym, spec, spec.val_samples)
    val_plans: dict = {}
    opt = SGD(model.params(), optim.lr, optim.momentum,
              scales=model.lr_scales(optim.head_lr_scale))
    history = []
    for epoch in range(optim.epochs):
        start = time.time()
        opt.lr = optim.lr * (optim.lr_decay ** (epoch // optim.lr_decay_every))
        first, second, labels = make_rotpair_samples(rng, sym, spec, spec.samples_per_epoch)
        model.set_training(True)
        losses = []
        for idx in _batches(len(labels), optim.batch):
            opt.zero_grad()
            with Tape() as tape:
                f1 = backbone_descriptor(model.backbone, [first[i] for i in idx])
                f2 = backbone_descriptor(model.backbone, [second[i] for i in idx])
                loss = rotpair_loss(model, f1, f2, labels[idx])
                tape.backward(loss)
            _check_finite(loss.item())
            losses.append(loss.item())
            opt.step()
        acc = evaluate_rotpair(model, *val, optim.batch, plan_cache=val_plans)
        record = {"epoch": epoch, "train_loss": float(np.mean(losses)),
                  "val_acc": acc, "wall_seconds": time.time() - start}
        history.append(record)
        _write_metrics(metrics_path, record)
        if log:
            log(record)
    if checkpoint_prefix:
        save_checkpoint(checkpoint_prefix, model,
                        extra={"task": "rotpair", "final_val_acc": history[-1]["val_acc"]})
    return {"history": history, "model": model, "final_val_acc": history[-1]["val_acc"]}


def run_shapecls_training(sym: SolidSymmetry, blocks: list[dict], spec: TaskSpec,
                          optim: OptimSpec, metrics_path=None, checkpoint_prefix=None,
                          log=None) -> dict:
    if len(spec.shapes) < 2:
        raise ValueError("shape classification needs at least two classes")
    rng = np.random.default_rng(spec.seed)
    model = build_model(sym, blocks, "shapecls", spec, optim, rng)
    val_clouds, val_labels, _ = make_shapecls_samples(rng, sym, spec, spec.val_samples)
    val_plans: dict = {}
    opt = SGD(model.params(), optim.lr, optim.momentum,
              scales=model.lr_scales(optim.head_lr_scale))
    history = []
    for epoch in range(optim.epochs):
        start = time.time()
        opt.lr = optim.lr * (optim.lr_decay ** (epoch // optim.lr_decay_every))
        clouds, labels, rotations = make_shapecls_samples(rng, sym, spec,
                                                          spec.samples_per_epoch)
        model.set_training(True)
        losses = []
        for idx in _batches(len(labels), optim.batch):
            opt.zero_grad()
            with Tape() as tape:
                f = backbone_descriptor(model.backbone, [clouds[i] for i in idx])
                loss = shapecls_loss(model, f, labels[idx], rotations[idx],
                                     optim.bce_weight)
                tape.backward(loss)
            _check_finite(loss.item())
            losses.append(loss.item())
            opt.step()
        acc = evaluate_shapecls(model, val_clouds, val_labels, optim.batch,
                                 plan_cache=val_plans)
        record = {"epoch": epoch, "train_loss": float(np.mean(losses)),
                  "val_acc": acc, "wall_seconds": time.time() - start}
        history.append(record)
        _write_metrics(metrics_path, record)
        if log:
            log(record)
    if checkpoint_prefix:
        save_checkpoint(checkpoint_prefix, model,
                        extra={"task": "shapecls", "final_val_acc": history[-1]["val_acc"]})
    return {"history": history, "model": model, "final_val_acc": history[-1]["val_acc"]}


def evaluate_checkpoint(sym: SolidSymmetry, blocks: list[dict], spec: TaskSpec,
                        optim: OptimSpec, checkpoint_prefix) -> dict:
    """Rebuild the model, load weights, and replay the held-out evaluation."""
    rng = np.random.default_rng(spec.seed)
    task = spec.task
    model = build_model(sym, blocks, task, spec, optim, rng)
    if task == "rotpair":
        val = make_rotpair_samples(rng, sym, spec, spec.val_samples)
    else:
        val_clouds, val_labels, _ = make_shapecls_samples(rng, sym, spec, spec.val_samples)
    extra = load_checkpoint(checkpoint_prefix, model)
    if task == "rotpair":
        acc = evaluate_rotpair(model, *val, optim.batch)
    else:
        acc = evaluate_shapecls(model, val_clouds, val_labels, optim.batch)
    return {"val_acc": acc, "checkpoint_extra": extra, "model": model}
