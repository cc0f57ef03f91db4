"""Training, the retrain oracle and the unlearning procedures (FT, RL, SalUn)."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .augment import AugmentPolicy, augment_batch
from .datasets import Dataset, ForgetPartition
from .errors import InputError, TrainingError
from .models import ArchSpec, Model, build_model
from .rng import stream


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 64
    policy: AugmentPolicy = field(default_factory=lambda: AugmentPolicy("NoAug"))
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise InputError("epochs must be non-negative")
        if self.lr < 0:
            raise InputError("lr must be non-negative")
        if self.batch_size < 1:
            raise InputError("batch_size must be at least 1")
        if not 0 <= self.momentum < 1:
            raise InputError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise InputError("weight_decay must be non-negative")


@dataclass
class SaliencyMask:
    masks: dict[str, np.ndarray]
    fraction: float

    @property
    def selected(self) -> int:
        return int(sum(int(m.sum()) for m in self.masks.values()))

    @property
    def total(self) -> int:
        return int(sum(m.size for m in self.masks.values()))

    def flat(self) -> np.ndarray:
        return np.concatenate([m.ravel() for m in self.masks.values()])


def _sgd_loop(
    model: Model,
    data: Dataset,
    indices: np.ndarray,
    labels: np.ndarray,
    cfg: TrainConfig,
    post_step: Callable[[T.SGD], None] | None = None,
    access_log: list | None = None,
    transform_log=None,
    relabel: Callable[[int], np.ndarray] | None = None,
) -> Model:
    """Mini-batch SGD over ``indices`` (dataset positions) in seeded shuffled order.

    ``labels`` is indexed by dataset position, so relabelled copies can be
    passed in without touching ``data``. ``relabel(epoch)``, if given,
    replaces ``labels`` at the start of each epoch.
    """
    indices = np.asarray(indices, dtype=np.int64)
    if cfg.epochs == 0:
        return model
    if indices.size == 0:
        raise InputError("cannot train on an empty index set")
    opt = T.SGD(model.parameters(), cfg.lr, cfg.momentum, cfg.weight_decay)
    bs = cfg.batch_size
    for epoch in range(cfg.epochs):
        if relabel is not None:
            labels = relabel(epoch)
        order = indices[stream(cfg.seed, "shuffle", epoch).permutation(indices.size)]
        for b, start in enumerate(range(0, order.size, bs)):
            idx = order[start : start + bs]
            x = augment_batch(cfg.policy, data.images[idx], idx, epoch, cfg.seed, transform_log)
            loss = T.cross_entropy(model.forward(T.Tensor(x)), labels[idx])
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingError("non-finite training loss", epoch, b)
            T.backward(loss)
            opt.step()
            if post_step is not None:
                post_step(opt)
            model.loss_history.append(value)
            if access_log is not None:
                access_log.extend((epoch, int(i)) for i in idx)
    return model


def train(arch: ArchSpec, data: Dataset, cfg: TrainConfig, access_log: list | None = None,
          transform_log=None) -> Model:
    """Train a fresh model (initialised from ``cfg.seed``) on all of ``data``."""
    if len(data) == 0:
        raise InputError("cannot train on an empty dataset")
    model = build_model(arch, cfg.seed)
    return _sgd_loop(model, data, np.arange(len(data)), data.labels, cfg,
                     access_log=access_log, transform_log=transform_log)


def retrain(arch: ArchSpec, partition: ForgetPartition, data: Dataset, cfg: TrainConfig,
            access_log: list | None = None, transform_log=None) -> Model:
    """The gold model: train from the baseline initialisation on the remain set only."""
    if partition.remain.size == 0:
        raise InputError("retrain needs a non-empty remain set")
    model = build_model(arch, cfg.seed)
    return _sgd_loop(model, data, partition.remain, data.labels, cfg,
                     access_log=access_log, transform_log=transform_log)


def fine_tune(original: Model, partition: ForgetPartition, data: Dataset, cfg: TrainConfig,
              access_log: list | None = None, transform_log=None) -> Model:
    """Continue SGD from ``original`` on the remain set; forget samples are never read."""
    if partition.remain.size == 0:
        raise InputError("fine-tuning needs a non-empty remain set")
    model = original.clone()
    model.loss_history = []
    return _sgd_loop(model, data, partition.remain, data.labels, cfg,
                     access_log=access_log, transform_log=transform_log)


def draw_random_labels(labels: np.ndarray, num_classes: int, seed: int, epoch: int | None = None) -> np.ndarray:
    """Replace each label by one drawn uniformly from the other ``num_classes - 1`` classes."""
    if num_classes < 2:
        raise InputError("random relabelling needs at least 2 classes")
    labels = np.asarray(labels, dtype=np.int64)
    keys = () if epoch is None else (epoch,)
    offset = stream(seed, "relabel", *keys).integers(1, num_classes, size=labels.size)
    return (labels + offset) % num_classes


def _relabelled(partition: ForgetPartition, data: Dataset, epoch: int | None) -> np.ndarray:
    labels = data.labels.copy()
    labels[partition.forget] = draw_random_labels(data.labels[partition.forget], data.num_classes,
                                                  partition.seed, epoch)
    return labels


def random_label(original: Model, partition: ForgetPartition, data: Dataset, cfg: TrainConfig,
                 forget_only: bool = False, redraw_each_epoch: bool = False,
                 access_log: list | None = None, transform_log=None,
                 _post_step: Callable[[T.SGD], None] | None = None) -> Model:
    """Fine-tune ``original`` on the forget set with random wrong labels, plus the remain set.

    Relabels come from the partition's seed, drawn once per run unless
    ``redraw_each_epoch``. ``forget_only`` drops the remain set.
    """
    if partition.forget.size == 0:
        raise InputError("random-label unlearning needs a non-empty forget set")
    if data.num_classes < 2:
        raise InputError("random relabelling needs at least 2 classes")
    indices = partition.forget if forget_only else np.arange(len(data))
    labels = _relabelled(partition, data, None)
    relabel = (lambda e: _relabelled(partition, data, e)) if redraw_each_epoch else None
    model = original.clone()
    model.loss_history = []
    return _sgd_loop(model, data, indices, labels, cfg, post_step=_post_step, access_log=access_log,
                     transform_log=transform_log, relabel=relabel)


def top_fraction_mask(scores: dict[str, np.ndarray], fraction: float) -> SaliencyMask:
    """Select the ``ceil(fraction * P)`` entries with largest score; ties go to the lower flat index."""
    if not 0 < fraction <= 1:
        raise InputError(f"saliency fraction must lie in (0, 1], got {fraction}")
    flat = np.concatenate([np.asarray(s, dtype=np.float64).ravel() for s in scores.values()])
    # round away float noise such as 0.7 * 10 = 7.000000000000001 before ceil
    count = min(flat.size, math.ceil(round(fraction * flat.size, 9)))
    order = np.argsort(-flat, kind="stable")
    chosen = np.zeros(flat.size, dtype=bool)
    chosen[order[:count]] = True
    masks, offset = {}, 0
    for name, s in scores.items():
        size = np.asarray(s).size
        masks[name] = chosen[offset : offset + size].reshape(np.shape(s))
        offset += size
    return SaliencyMask(masks, fraction)


def forget_gradients(original: Model, partition: ForgetPartition, data: Dataset,
                     batch_cap: int | None = None, batch_size: int = 256) -> dict[str, np.ndarray]:
    """Gradient of the true-label cross-entropy on the forget set, summed over batches."""
    if partition.forget.size == 0:
        raise InputError("saliency needs a non-empty forget set")
    model = original.clone()
    model.zero_grad()
    batches = [partition.forget[i : i + batch_size] for i in range(0, partition.forget.size, batch_size)]
    if batch_cap is not None:
        batches = batches[:batch_cap]
    for idx in batches:
        loss = T.cross_entropy(model.forward(T.Tensor(data.images[idx])), data.labels[idx])
        T.backward(loss)
    return {name: (p.grad if p.grad is not None else np.zeros_like(p.data)) for name, p in model.named_parameters()}


def compute_saliency_mask(original: Model, partition: ForgetPartition, data: Dataset, fraction: float = 0.5,
                          batch_cap: int | None = None, batch_size: int = 256) -> SaliencyMask:
    """Weight saliency: keep the parameters with largest forget-loss gradient magnitude."""
    if not 0 < fraction <= 1:
        raise InputError(f"saliency fraction must lie in (0, 1], got {fraction}")
    grads = forget_gradients(original, partition, data, batch_cap, batch_size)
    return top_fraction_mask({k: np.abs(g) for k, g in grads.items()}, fraction)


def salun(original: Model, partition: ForgetPartition, data: Dataset, mask: SaliencyMask, cfg: TrainConfig,
          forget_only: bool = False, redraw_each_epoch: bool = False,
          access_log: list | None = None, transform_log=None) -> Model:
    """Random-label unlearning restricted to the salient parameters.

    After every step, parameters outside the mask are restored to their
    original values and their momentum buffers are zeroed.
    """
    names = list(original.params)
    if set(mask.masks) != set(names) or any(mask.masks[n].shape != original.params[n].shape for n in names):
        raise InputError("saliency mask shapes do not match the model")
    frozen = [~mask.masks[n] for n in names]
    anchors = [original.params[n].data.copy() for n in names]

    def reset(opt: T.SGD) -> None:
        for p, v, off, anchor in zip(opt.params, opt.velocity, frozen, anchors):
            p.data[off] = anchor[off]
            v[off] = 0

    return random_label(original, partition, data, cfg, forget_only, redraw_each_epoch,
                        access_log, transform_log, _post_step=reset)


def measure_rte(procedure: Callable, *args, **kwargs):
    """Run ``procedure`` and return ``(result, minutes of wall-clock time)``."""
    start = time.perf_counter()
    result = procedure(*args, **kwargs)
    return result, (time.perf_counter() - start) / 60.0
