"""Classifier architectures: a tiny residual CNN and a one-hidden-layer MLP."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import DimensionError, FormatError, InputError
from .rng import stream

ARCH_NAMES = ("tiny-resnet", "mlp")
INPUT_CENTER = 0.5


@dataclass(frozen=True)
class ArchSpec:
    name: str
    input_shape: tuple[int, int, int]
    num_classes: int
    width: int = 1

    def __post_init__(self):
        if self.name not in ARCH_NAMES:
            raise InputError(f"unknown architecture {self.name!r}; expected one of {ARCH_NAMES}")
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise InputError(f"input_shape must be three positive dims, got {self.input_shape}")
        if self.num_classes < 2:
            raise InputError("num_classes must be at least 2")
        if self.width < 1:
            raise InputError("width must be a positive integer")
        if self.name == "tiny-resnet" and (self.input_shape[1] % 2 or self.input_shape[2] % 2):
            raise InputError("tiny-resnet needs even spatial dims for its pooling stage")

    def to_dict(self) -> dict:
        return {"name": self.name, "input_shape": list(self.input_shape),
                "num_classes": self.num_classes, "width": self.width}

    @classmethod
    def from_dict(cls, d: dict) -> ArchSpec:
        return cls(d["name"], tuple(d["input_shape"]), int(d["num_classes"]), int(d.get("width", 1)))


def _layer_shapes(arch: ArchSpec) -> list[tuple[str, tuple[int, ...], int]]:
    """(name, shape, fan_in) for every parameter, in forward order. Biases have fan_in 0."""
    c, h, w = arch.input_shape
    k = arch.num_classes
    if arch.name == "mlp":
        hidden = 32 * arch.width
        d = c * h * w
        return [("fc1.w", (d, hidden), d), ("fc1.b", (hidden,), 0),
                ("fc2.w", (hidden, k), hidden), ("fc2.b", (k,), 0)]
    a, b = 8 * arch.width, 16 * arch.width
    return [
        ("stem.w", (a, c, 3, 3), c * 9), ("stem.b", (a,), 0),
        ("block1.conv1.w", (a, a, 3, 3), a * 9), ("block1.conv1.b", (a,), 0),
        ("block1.conv2.w", (a, a, 3, 3), a * 9), ("block1.conv2.b", (a,), 0),
        ("block2.conv1.w", (b, a, 3, 3), a * 9), ("block2.conv1.b", (b,), 0),
        ("block2.conv2.w", (b, b, 3, 3), b * 9), ("block2.conv2.b", (b,), 0),
        ("block2.skip.w", (b, a, 1, 1), a), ("block2.skip.b", (b,), 0),
        ("fc.w", (b, k), b), ("fc.b", (k,), 0),
    ]


def parameter_count(arch: ArchSpec) -> int:
    return sum(int(np.prod(s)) for _, s, _ in _layer_shapes(arch))


@dataclass
class Model:
    """Architecture plus named parameters.

    ``loss_history`` holds per-batch training losses appended by the
    training loops; it is bookkeeping only and never feeds the forward pass.
    """

    arch: ArchSpec
    params: dict[str, T.Tensor]
    seed: int
    loss_history: list[float] = field(default_factory=list)

    def named_parameters(self) -> Iterator[tuple[str, T.Tensor]]:
        return iter(self.params.items())

    def parameters(self) -> list[T.Tensor]:
        return list(self.params.values())

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def clone(self) -> Model:
        params = {k: T.Tensor(v.data.copy(), requires_grad=True) for k, v in self.params.items()}
        return Model(self.arch, params, self.seed, list(self.loss_history))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def forward(self, x: T.Tensor) -> T.Tensor:
        if x.shape[1:] != self.arch.input_shape:
            raise DimensionError(f"batch has sample shape {x.shape[1:]}, model expects {self.arch.input_shape}")
        # fixed centring of [0, 1] pixels; without normalisation layers an
        # all-positive input leaves many seeds stuck on the chance plateau
        x = T.Tensor(x.data - x.data.dtype.type(INPUT_CENTER))
        p = self.params
        if self.arch.name == "mlp":
            h = T.relu(T.dense(T.flatten(x), p["fc1.w"], p["fc1.b"]))
            return T.dense(h, p["fc2.w"], p["fc2.b"])
        h = T.relu(T.conv2d(x, p["stem.w"], p["stem.b"], padding=1))
        r = T.relu(T.conv2d(h, p["block1.conv1.w"], p["block1.conv1.b"], padding=1))
        r = T.conv2d(r, p["block1.conv2.w"], p["block1.conv2.b"], padding=1)
        h = T.relu(T.add(h, r))
        h = T.maxpool2(h)
        r = T.relu(T.conv2d(h, p["block2.conv1.w"], p["block2.conv1.b"], padding=1))
        r = T.conv2d(r, p["block2.conv2.w"], p["block2.conv2.b"], padding=1)
        s = T.conv2d(h, p["block2.skip.w"], p["block2.skip.b"])
        h = T.relu(T.add(s, r))
        return T.dense(T.global_avg_pool(h), p["fc.w"], p["fc.b"])

    __call__ = forward

    def save(self, path: str | Path, extra_meta: dict | None = None) -> None:
        meta = {"arch": self.arch.to_dict(), "seed": self.seed}
        if extra_meta:
            meta.update(extra_meta)
        T.save_tensors(path, self.state(), meta)

    @classmethod
    def load(cls, path: str | Path) -> Model:
        arrays, meta = T.load_tensors(path)
        if "arch" not in meta:
            raise FormatError(f"{path}: checkpoint has no architecture header")
        arch = ArchSpec.from_dict(meta["arch"])
        expected = {name: shape for name, shape, _ in _layer_shapes(arch)}
        if set(arrays) != set(expected) or any(arrays[n].shape != s for n, s in expected.items()):
            raise FormatError(f"{path}: parameters do not match architecture {arch.name}")
        params = {n: T.Tensor(arrays[n].copy(), requires_grad=True) for n in expected}
        return cls(arch, params, int(meta.get("seed", 0)))


def build_model(arch: ArchSpec, seed: int) -> Model:
    """Kaiming-normal (fan-in) weights and zero biases from the seeded init stream."""
    rng = stream(seed, "init")
    params = {}
    for name, shape, fan_in in _layer_shapes(arch):
        if fan_in:
            values = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
        else:
            values = np.zeros(shape)
        params[name] = T.Tensor(values.astype(np.float32), requires_grad=True)
    return Model(arch, params, int(seed))


def predict(model: Model, batch, batch_size: int = 512) -> np.ndarray:
    """Logits for a (N, C, H, W) array; no graph is recorded and the model is untouched."""
    x = np.asarray(batch, dtype=np.float32)
    if x.ndim != 4 or x.shape[1:] != model.arch.input_shape:
        raise DimensionError(f"batch shape {x.shape} does not match model input {model.arch.input_shape}")
    out = []
    with T.no_grad():
        for start in range(0, len(x), batch_size):
            out.append(model.forward(T.Tensor(x[start : start + batch_size])).data)
    if not out:
        return np.zeros((0, model.arch.num_classes), dtype=np.float32)
    return np.concatenate(out, axis=0)


def argmax_lowest(logits: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximal index, i.e. the lowest class on ties
    return np.asarray(logits).argmax(axis=1)


def accuracy_from_predictions(pred: np.ndarray, labels: np.ndarray) -> float:
    pred = np.asarray(pred)
    labels = np.asarray(labels)
    if labels.size == 0:
        raise InputError("accuracy of an empty set is undefined")
    return 100.0 * int((pred == labels).sum()) / labels.size


def accuracy(model: Model, data) -> float:
    """Top-1 accuracy in percent on a :class:`~unlearnaug.datasets.Dataset`."""
    if len(data) == 0:
        raise InputError("accuracy of an empty dataset is undefined")
    return accuracy_from_predictions(argmax_lowest(predict(model, data.images)), data.labels)

