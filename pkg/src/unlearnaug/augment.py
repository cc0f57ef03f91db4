"""Seeded image augmentations on float (C, H, W) images in [0, 1].

All randomness comes from a generator passed in by the caller; the policy
entry point :func:`apply_policy` derives that generator from
``(seed, sample index, epoch)`` so an augmented sample never depends on
batch composition or on which other samples were augmented before it.

Ops that take a ``log`` list append one dict per random decision, which is
what the transform log and the replay helpers consume.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import InputError
from .rng import stream

NUM_BINS = 31
MAX_BIN = NUM_BINS - 1

SCENARIOS = (
    "NoAug",
    "Default",
    "Default+RandAugment",
    "Default+AutoAugment",
    "Default+RandomErasing",
    "Default+TrivialAug",
    "Default+AugMix",
)

# ---------------------------------------------------------------- geometry


def _round_half_up(x):
    return np.floor(x + 0.5).astype(np.int64)


def _inverse_map(img: np.ndarray, fn: Callable[[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    """Nearest-neighbour resample: output pixel (y, x) reads source ``fn(y, x)``; zero outside."""
    c, h, w = img.shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    sy, sx = fn(ys, xs)
    iy, ix = _round_half_up(sy), _round_half_up(sx)
    valid = (iy >= 0) & (iy < h) & (ix >= 0) & (ix < w)
    out = np.zeros_like(img)
    out[:, valid] = img[:, iy[valid], ix[valid]]
    return out


def rotate(img: np.ndarray, degrees: float) -> np.ndarray:
    if degrees == 0:
        return img.copy()
    _, h, w = img.shape
    cy, cx = (h - 1) / 2, (w - 1) / 2
    t = math.radians(degrees)
    cos, sin = math.cos(t), math.sin(t)

    def src(ys, xs):
        dy, dx = ys - cy, xs - cx
        return cy - sin * dx + cos * dy, cx + cos * dx + sin * dy

    return _inverse_map(img, src)


def shear_x(img: np.ndarray, factor: float) -> np.ndarray:
    if factor == 0:
        return img.copy()
    cy = (img.shape[1] - 1) / 2
    return _inverse_map(img, lambda ys, xs: (ys, xs + factor * (ys - cy)))


def shear_y(img: np.ndarray, factor: float) -> np.ndarray:
    if factor == 0:
        return img.copy()
    cx = (img.shape[2] - 1) / 2
    return _inverse_map(img, lambda ys, xs: (ys + factor * (xs - cx), xs))


def _shift(img: np.ndarray, dy: int, dx: int) -> np.ndarray:
    c, h, w = img.shape
    out = np.zeros_like(img)
    ys, yd = (slice(0, h - dy), slice(dy, h)) if dy >= 0 else (slice(-dy, h), slice(0, h + dy))
    xs, xd = (slice(0, w - dx), slice(dx, w)) if dx >= 0 else (slice(-dx, w), slice(0, w + dx))
    if abs(dy) < h and abs(dx) < w:
        out[:, yd, xd] = img[:, ys, xs]
    return out


def translate_x(img: np.ndarray, pixels: float) -> np.ndarray:
    return _shift(img, 0, int(_round_half_up(np.float64(pixels))))


def translate_y(img: np.ndarray, pixels: float) -> np.ndarray:
    return _shift(img, int(_round_half_up(np.float64(pixels))), 0)


# ---------------------------------------------------------------- colour


def _gray(img: np.ndarray) -> np.ndarray:
    if img.shape[0] == 3:
        return 0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]
    return img.mean(axis=0)


def _blend(degenerate: np.ndarray, img: np.ndarray, factor: float) -> np.ndarray:
    if factor == 1:
        return img.copy()
    out = degenerate + factor * (img.astype(np.float64) - degenerate)
    return np.clip(out, 0.0, 1.0).astype(img.dtype)


def brightness(img: np.ndarray, factor: float) -> np.ndarray:
    return _blend(np.zeros_like(img, dtype=np.float64), img, factor)


def contrast(img: np.ndarray, factor: float) -> np.ndarray:
    return _blend(np.full(img.shape, _gray(img.astype(np.float64)).mean()), img, factor)


def color(img: np.ndarray, factor: float) -> np.ndarray:
    return _blend(np.broadcast_to(_gray(img.astype(np.float64)), img.shape), img, factor)


def sharpness(img: np.ndarray, factor: float) -> np.ndarray:
    _, h, w = img.shape
    if h < 3 or w < 3:
        return img.copy()
    x = img.astype(np.float64)
    smooth = x.copy()
    acc = np.zeros_like(x[:, 1:-1, 1:-1])
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            acc += (5 if dy == dx == 0 else 1) * x[:, 1 + dy : h - 1 + dy, 1 + dx : w - 1 + dx]
    smooth[:, 1:-1, 1:-1] = acc / 13.0
    return _blend(smooth, img, factor)


def _to_u8(img: np.ndarray) -> np.ndarray:
    return np.floor(img.astype(np.float64) * 255.0 + 0.5).astype(np.uint8)


def posterize(img: np.ndarray, bits: int) -> np.ndarray:
    if bits >= 8:
        return img.copy()
    mask = np.uint8((0xFF << (8 - bits)) & 0xFF)
    return ((_to_u8(img) & mask) / 255.0).astype(img.dtype)


def solarize(img: np.ndarray, threshold: float) -> np.ndarray:
    return np.where(img > threshold, 1.0 - img, img).astype(img.dtype)


def invert(img: np.ndarray) -> np.ndarray:
    return (1.0 - img).astype(img.dtype)


def autocontrast(img: np.ndarray) -> np.ndarray:
    out = img.copy()
    for ch in range(img.shape[0]):
        lo, hi = img[ch].min(), img[ch].max()
        if hi > lo:
            out[ch] = (img[ch] - lo) / (hi - lo)
    return np.clip(out, 0.0, 1.0)


def equalize(img: np.ndarray) -> np.ndarray:
    """Per-channel histogram equalization on the 8-bit quantized image."""
    q = _to_u8(img)
    out = img.copy()
    for ch in range(q.shape[0]):
        hist = np.bincount(q[ch].ravel(), minlength=256)
        nz = hist[hist > 0]
        step = (int(hist.sum()) - int(nz[-1])) // 255
        if step == 0:
            continue
        lut = (np.concatenate([[0], np.cumsum(hist)[:-1]]) + step // 2) // step
        lut = np.clip(lut, 0, 255)
        out[ch] = lut[q[ch]] / 255.0
    return out


# ---------------------------------------------------------------- op table

SIGNED_OPS = frozenset({"rotate", "shear_x", "shear_y", "translate_x", "translate_y",
                        "brightness", "contrast", "color", "sharpness"})

DEFAULT_OPS = (
    "identity", "rotate", "shear_x", "shear_y", "translate_x", "translate_y",
    "brightness", "contrast", "color", "sharpness", "posterize", "solarize",
    "autocontrast", "equalize",
)


def apply_op(img: np.ndarray, name: str, magnitude_bin: int, sign: int = 1) -> np.ndarray:
    """Apply op ``name`` at ``magnitude_bin`` in [0, 30] with the given sign.

    Bin 0 is the identity for every parametrised op; bin 30 reaches the
    maximum: 30 degrees, 0.3 shear, 10 px, enhancement factor 1 +/- 0.9,
    4 posterize bits, solarize threshold 0.
    """
    if not 0 <= magnitude_bin <= MAX_BIN:
        raise InputError(f"magnitude bin must lie in [0, {MAX_BIN}], got {magnitude_bin}")
    frac = magnitude_bin / MAX_BIN
    s = -1 if sign < 0 else 1
    if name == "identity":
        return img.copy()
    if name == "rotate":
        return rotate(img, s * 30.0 * frac)
    if name == "shear_x":
        return shear_x(img, s * 0.3 * frac)
    if name == "shear_y":
        return shear_y(img, s * 0.3 * frac)
    if name == "translate_x":
        return translate_x(img, s * 10.0 * frac)
    if name == "translate_y":
        return translate_y(img, s * 10.0 * frac)
    if name in ("brightness", "contrast", "color", "sharpness"):
        fn = {"brightness": brightness, "contrast": contrast, "color": color, "sharpness": sharpness}[name]
        return fn(img, 1.0 + s * 0.9 * frac)
    if name == "posterize":
        return posterize(img, 8 - int(round(4 * frac)))
    if name == "solarize":
        return solarize(img, 1.0 - frac)
    if name == "autocontrast":
        return autocontrast(img)
    if name == "equalize":
        return equalize(img)
    if name == "invert":
        return invert(img)
    raise InputError(f"unknown augmentation op {name!r}")


def _draw_sign(rng: np.random.Generator) -> int:
    return -1 if rng.random() < 0.5 else 1


# ---------------------------------------------------------------- Default pair


def crop(img: np.ndarray, pad: int, top: int, left: int) -> np.ndarray:
    """Zero-pad by ``pad`` then take the original-size window at (top, left)."""
    if pad == 0:
        return img.copy()
    _, h, w = img.shape
    padded = np.pad(img, ((0, 0), (pad, pad), (pad, pad)))
    return padded[:, top : top + h, left : left + w].copy()


def random_crop(img: np.ndarray, pad: int, rng: np.random.Generator, log: list | None = None) -> np.ndarray:
    if pad < 0:
        raise InputError("crop padding must be non-negative")
    top = int(rng.integers(0, 2 * pad + 1))
    left = int(rng.integers(0, 2 * pad + 1))
    if log is not None:
        log.append({"op": "crop", "pad": pad, "top": top, "left": left})
    return crop(img, pad, top, left)


def hflip(img: np.ndarray) -> np.ndarray:
    return img[:, :, ::-1].copy()


def horizontal_flip(img: np.ndarray, p: float, rng: np.random.Generator, log: list | None = None) -> np.ndarray:
    if not 0 <= p <= 1:
        raise InputError("flip probability must lie in [0, 1]")
    fire = bool(rng.random() < p)
    if log is not None:
        log.append({"op": "flip", "fired": fire})
    return hflip(img) if fire else img.copy()


# ---------------------------------------------------------------- Random Erasing


def erase(img: np.ndarray, top: int, left: int, height: int, width: int, fill: float = 0.0) -> np.ndarray:
    out = img.copy()
    out[:, top : top + height, left : left + width] = fill
    return out


def random_erase(
    img: np.ndarray,
    p: float,
    area: tuple[float, float],
    aspect: tuple[float, float],
    fill: float,
    rng: np.random.Generator,
    log: list | None = None,
    attempts: int = 10,
) -> np.ndarray:
    """Erase one rectangle covering an ``area`` fraction of the image with aspect ratio in ``aspect``.

    The rectangle is rejection-sampled; if no draw fits within ``attempts``
    tries the image is returned unchanged.
    """
    s_l, s_h = area
    r_l, r_h = aspect
    if not (0 < s_l <= s_h < 1 and 0 < r_l <= r_h):
        raise InputError("random erase needs 0 < s_l <= s_h < 1 and 0 < r_l <= r_h")
    if rng.random() >= p:
        if log is not None:
            log.append({"op": "erase", "fired": False})
        return img.copy()
    _, h, w = img.shape
    total = h * w
    for _ in range(attempts):
        target = rng.uniform(s_l, s_h) * total
        ratio = math.exp(rng.uniform(math.log(r_l), math.log(r_h)))
        eh = int(round(math.sqrt(target * ratio)))
        ew = int(round(math.sqrt(target / ratio)))
        if 1 <= eh <= h and 1 <= ew <= w and s_l * total <= eh * ew <= s_h * total:
            top = int(rng.integers(0, h - eh + 1))
            left = int(rng.integers(0, w - ew + 1))
            if log is not None:
                log.append({"op": "erase", "fired": True, "top": top, "left": left, "height": eh, "width": ew})
            return erase(img, top, left, eh, ew, fill)
    if log is not None:
        log.append({"op": "erase", "fired": True, "rejected": True})
    return img.copy()


# ---------------------------------------------------------------- TrivialAugment / RandAugment


def trivial_augment(img: np.ndarray, rng: np.random.Generator, ops: Sequence[str] = DEFAULT_OPS,
                    log: list | None = None) -> np.ndarray:
    """One op drawn uniformly from ``ops`` at one magnitude bin drawn uniformly from [0, 30]."""
    if not ops:
        raise InputError("op table must not be empty")
    name = ops[int(rng.integers(len(ops)))]
    magnitude = int(rng.integers(0, NUM_BINS))
    sign = _draw_sign(rng)
    if log is not None:
        log.append({"op": name, "bin": magnitude, "sign": sign})
    return apply_op(img, name, magnitude, sign)


def rand_augment(img: np.ndarray, n: int, m: int, rng: np.random.Generator, ops: Sequence[str] = DEFAULT_OPS,
                 log: list | None = None) -> np.ndarray:
    """``n`` ops drawn uniformly with replacement, each applied at magnitude bin ``m``."""
    if n < 1:
        raise InputError("RandAugment needs n >= 1")
    if not 0 <= m <= MAX_BIN:
        raise InputError(f"RandAugment magnitude must lie in [0, {MAX_BIN}]")
    if not ops:
        raise InputError("op table must not be empty")
    out = img
    for _ in range(n):
        name = ops[int(rng.integers(len(ops)))]
        sign = _draw_sign(rng)
        if log is not None:
            log.append({"op": name, "bin": m, "sign": sign})
        out = apply_op(out, name, m, sign)
    return out if out is not img else img.copy()


# ---------------------------------------------------------------- AutoAugment

# The published CIFAR-10 policy: 25 sub-policies of two (op, probability, magnitude on a 0-9 scale).
CIFAR10_POLICY: tuple[tuple[tuple[str, float, int | None], tuple[str, float, int | None]], ...] = (
    (("invert", 0.1, None), ("contrast", 0.2, 6)),
    (("rotate", 0.7, 2), ("translate_x", 0.3, 9)),
    (("sharpness", 0.8, 1), ("sharpness", 0.9, 3)),
    (("shear_y", 0.5, 8), ("translate_y", 0.7, 9)),
    (("autocontrast", 0.5, None), ("equalize", 0.9, None)),
    (("shear_y", 0.2, 7), ("posterize", 0.3, 7)),
    (("color", 0.4, 3), ("brightness", 0.6, 7)),
    (("sharpness", 0.3, 9), ("brightness", 0.7, 9)),
    (("equalize", 0.6, None), ("equalize", 0.5, None)),
    (("contrast", 0.6, 7), ("sharpness", 0.6, 5)),
    (("color", 0.7, 7), ("translate_x", 0.5, 8)),
    (("equalize", 0.3, None), ("autocontrast", 0.4, None)),
    (("translate_y", 0.4, 3), ("sharpness", 0.2, 6)),
    (("brightness", 0.9, 6), ("color", 0.2, 8)),
    (("solarize", 0.5, 2), ("invert", 0.0, None)),
    (("equalize", 0.2, None), ("autocontrast", 0.6, None)),
    (("equalize", 0.2, None), ("equalize", 0.6, None)),
    (("color", 0.9, 9), ("equalize", 0.6, None)),
    (("autocontrast", 0.8, None), ("solarize", 0.2, 8)),
    (("brightness", 0.1, 3), ("color", 0.7, 0)),
    (("solarize", 0.4, 5), ("autocontrast", 0.9, None)),
    (("translate_y", 0.9, 9), ("translate_y", 0.7, 9)),
    (("autocontrast", 0.9, None), ("solarize", 0.2, 3)),
    (("equalize", 0.8, None), ("invert", 0.1, None)),
    (("translate_y", 0.7, 9), ("autocontrast", 0.9, None)),
)


def _policy_bin(magnitude: int | None) -> int:
    return 0 if magnitude is None else int(round(magnitude * MAX_BIN / 9))


def auto_augment(img: np.ndarray, rng: np.random.Generator, policy=CIFAR10_POLICY,
                 log: list | None = None) -> np.ndarray:
    """Draw one sub-policy uniformly and apply its two ops, each gated by its probability."""
    index = int(rng.integers(len(policy)))
    gates, signs = [], []
    for _ in policy[index]:
        gates.append(float(rng.random()))
        signs.append(_draw_sign(rng))
    record = {"op": "autoaugment", "subpolicy": index, "gates": gates, "signs": signs}
    if log is not None:
        log.append(record)
    return replay_auto_augment(img, record, policy)


def replay_auto_augment(img: np.ndarray, record: dict, policy=CIFAR10_POLICY) -> np.ndarray:
    """Re-apply an AutoAugment decision from its log record; no randomness involved."""
    out = img.copy()
    for (name, prob, magnitude), gate, sign in zip(policy[record["subpolicy"]], record["gates"], record["signs"]):
        if gate < prob:
            out = apply_op(out, name, _policy_bin(magnitude), sign)
    return out


# ---------------------------------------------------------------- AugMix


def augmix(
    img: np.ndarray,
    rng: np.random.Generator,
    chains: int = 3,
    depth: tuple[int, int] = (1, 3),
    alpha: float = 1.0,
    max_bin: int = 9,
    ops: Sequence[str] = DEFAULT_OPS,
    weights: Sequence[float] | None = None,
    mix: float | None = None,
    log: list | None = None,
) -> np.ndarray:
    """``mix * img + (1 - mix) * sum_i weights_i * chain_i(img)``.

    ``weights ~ Dirichlet(alpha)`` over the chains and ``mix ~ Beta(alpha, alpha)``
    unless forced. Each chain applies ``depth`` ops (drawn uniformly from the
    inclusive range) with magnitude bins in [0, ``max_bin``].
    """
    if chains < 1 or alpha <= 0:
        raise InputError("AugMix needs chains >= 1 and alpha > 0")
    w = rng.dirichlet([alpha] * chains) if weights is None else np.asarray(weights, dtype=np.float64)
    m = float(rng.beta(alpha, alpha)) if mix is None else float(mix)
    x = img.astype(np.float64)
    mixed = np.zeros_like(x)
    chain_log = []
    for i in range(chains):
        d = int(rng.integers(depth[0], depth[1] + 1))
        out = img
        steps = []
        for _ in range(d):
            name = ops[int(rng.integers(len(ops)))]
            b = int(rng.integers(0, max_bin + 1))
            sign = _draw_sign(rng)
            steps.append({"op": name, "bin": b, "sign": sign})
            out = apply_op(out, name, b, sign)
        chain_log.append(steps)
        mixed += w[i] * out
    if log is not None:
        log.append({"op": "augmix", "weights": [float(v) for v in w], "mix": m, "chains": chain_log})
    result = m * x + (1.0 - m) * mixed
    return np.clip(result, 0.0, 1.0).astype(img.dtype)


# ---------------------------------------------------------------- policies

_DEFAULT_PARAMS: dict[str, dict] = {
    "Default": {"crop_pad": 4, "flip_p": 0.5},
    "Default+RandAugment": {"n": 2, "m": 9},
    "Default+AutoAugment": {},
    "Default+RandomErasing": {"p": 0.5, "area": [0.02, 0.33], "aspect": [0.3, 3.3], "fill": 0.0},
    "Default+TrivialAug": {},
    "Default+AugMix": {"chains": 3, "depth": [1, 3], "alpha": 1.0, "max_bin": 9},
}


@dataclass(frozen=True)
class AugmentPolicy:
    """One of the seven scenarios plus its operation parameters."""

    scenario: str = "Default"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise InputError(f"unknown augmentation scenario {self.scenario!r}; expected one of {SCENARIOS}")
        merged = {}
        if self.scenario != "NoAug":
            merged.update(_DEFAULT_PARAMS["Default"])
            merged.update(_DEFAULT_PARAMS.get(self.scenario, {}))
        unknown = set(self.params) - set(merged)
        if unknown:
            raise InputError(f"unknown parameters for {self.scenario}: {sorted(unknown)}")
        merged.update(self.params)
        object.__setattr__(self, "params", merged)

    @property
    def is_identity(self) -> bool:
        return self.scenario == "NoAug"


def apply_policy(policy: AugmentPolicy, img: np.ndarray, index: int, epoch: int, seed: int,
                 log: list | None = None) -> np.ndarray:
    """Augment one image; a pure function of (policy, image, index, epoch, seed)."""
    if policy.scenario == "NoAug":
        return img.copy()
    prm = policy.params
    rng = stream(seed, "augment", index, epoch)
    out = random_crop(img, prm["crop_pad"], rng, log)
    out = horizontal_flip(out, prm["flip_p"], rng, log)
    sc = policy.scenario
    if sc == "Default+RandAugment":
        out = rand_augment(out, prm["n"], prm["m"], rng, log=log)
    elif sc == "Default+AutoAugment":
        out = auto_augment(out, rng, log=log)
    elif sc == "Default+RandomErasing":
        out = random_erase(out, prm["p"], tuple(prm["area"]), tuple(prm["aspect"]), prm["fill"], rng, log)
    elif sc == "Default+TrivialAug":
        out = trivial_augment(out, rng, log=log)
    elif sc == "Default+AugMix":
        out = augmix(out, rng, prm["chains"], tuple(prm["depth"]), prm["alpha"], prm["max_bin"], log=log)
    return np.clip(out, 0.0, 1.0)


def augment_batch(policy: AugmentPolicy, images: np.ndarray, indices: Sequence[int], epoch: int, seed: int,
                  log_sink=None) -> np.ndarray:
    """Augment ``images`` whose dataset indices are ``indices``.

    ``log_sink``, when given, receives one newline-delimited JSON record per sample.
    """
    if policy.is_identity and log_sink is None:
        return images
    out = np.empty_like(images)
    for row, (img, idx) in enumerate(zip(images, indices)):
        ops: list | None = [] if log_sink is not None else None
        out[row] = apply_policy(policy, img, int(idx), epoch, seed, ops)
        if log_sink is not None:
            log_sink.write(json.dumps({"sample": int(idx), "epoch": int(epoch), "scenario": policy.scenario,
                                       "ops": ops}, sort_keys=True) + "\n")
    return out
