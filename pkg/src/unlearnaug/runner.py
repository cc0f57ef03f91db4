"""Experiment grid runner: baseline, retrain and unlearning per cell, with checkpoint reuse and a manifest."""

from __future__ import annotations

import json
import logging
import os
import re
from contextlib import ExitStack
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .augment import AugmentPolicy
from .config import ExperimentConfig, config_hash
from .datasets import Dataset, ForgetPartition, load_cifar, make_synthetic, split_forget
from .errors import FormatError
from .evaluation import MetricsRecord, core_accuracies, fit_mia_attacker, mia_score, test_accuracy_excluding
from .models import Model
from .report import RETRAIN, write_reports
from .unlearn import SaliencyMask, compute_saliency_mask, fine_tune, measure_rte, random_label, retrain, salun, train

log = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"


@dataclass
class RunEntry:
    stage: str  # baseline | retrain | unlearn
    method: str
    policy: str
    seed: int
    forget_mode: str | None = None
    forget_param: float | int | None = None
    key: str = ""
    status: str = "pending"  # ok | failed
    error: str | None = None
    checkpoint: str | None = None
    rte: float | None = None
    reused: bool = False
    metrics: dict | None = None


@dataclass
class RunManifest:
    config_hash: str
    config: dict
    runs: list[RunEntry] = field(default_factory=list)
    reports: dict[str, str] = field(default_factory=dict)

    @property
    def failures(self) -> list[RunEntry]:
        return [r for r in self.runs if r.status != "ok"]

    def results(self) -> list[dict]:
        """Flattened records of every evaluated run (retrain and unlearn)."""
        out = []
        for r in self.runs:
            if r.status == "ok" and r.metrics is not None:
                out.append({"dataset": self.config["dataset"]["kind"], "method": r.method, "policy": r.policy,
                            "forget_mode": r.forget_mode, "forget_param": r.forget_param, "seed": r.seed,
                            **{m: r.metrics[m] for m in ("UA", "RA", "TA", "MIA")}, "RTE": r.rte})
        return out

    def to_dict(self) -> dict:
        return {"config_hash": self.config_hash, "config": self.config,
                "runs": [asdict(r) for r in self.runs], "reports": self.reports}

    def save(self, path: str | Path) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")
        os.replace(tmp, path)

    @classmethod
    def load(cls, path: str | Path) -> RunManifest:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
            return cls(raw["config_hash"], raw["config"], [RunEntry(**r) for r in raw["runs"]], raw["reports"])
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise FormatError(f"{path}: not a run manifest ({exc})") from exc


# ---------------------------------------------------------------- data


def load_data(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    d = cfg.dataset
    if d["kind"] == "synthetic":
        shape = tuple(d["image_shape"])
        train_set = make_synthetic(d["num_classes"], d["per_class"], shape, d["seed"], d["noise"])
        test_set = make_synthetic(d["num_classes"], d["test_per_class"], shape, d["seed"], d["noise"], split="test")
        return train_set, test_set
    train_set, test_set = load_cifar(d["path"], d["kind"])
    return _per_class_cap(train_set, d["per_class"]), _per_class_cap(test_set, d["test_per_class"])


def _per_class_cap(data: Dataset, cap: int) -> Dataset:
    """Keep the first ``cap`` samples of every class in file order (0 keeps everything)."""
    if cap <= 0:
        return data
    keep = np.concatenate([np.flatnonzero(data.labels == c)[:cap] for c in range(data.num_classes)])
    return data.subset(np.sort(keep))


# ---------------------------------------------------------------- stage keys


def stage_key(cfg: ExperimentConfig, stage: str, policy: str, seed: int,
              forget_value=None, method: str | None = None) -> str:
    """Hash of exactly the configuration that determines a stage's checkpoint."""
    raw = cfg.raw
    parts: dict = {"stage": stage, "dataset": raw["dataset"], "arch": raw["arch"], "baseline": raw["baseline"],
                   "policy": policy, "seed": seed}
    if stage in ("retrain", "unlearn"):
        parts["forget"] = {"mode": raw["forget"]["mode"], "value": forget_value}
    if stage == "unlearn":
        parts["unlearn"] = raw["unlearn"]
        parts["method"] = method
        if method in ("RL", "SalUn"):
            parts["rl"] = raw["rl"]
        if method == "SalUn":
            parts["salun"] = raw["salun"]
    return config_hash(parts)[:16]


def _slug(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9]+", "-", text).strip("-").lower()


def _ckpt_name(stage: str, policy: str, seed: int, forget_value=None, method=None, key: str = "") -> str:
    bits = [stage, _slug(policy), f"s{seed}"]
    if forget_value is not None:
        bits.append(f"f{forget_value}")
    if method:
        bits.append(_slug(method))
    bits.append(key)
    return "_".join(bits) + ".ckpt"


def _try_reuse(path: Path, key: str) -> tuple[Model, float] | None:
    if not path.exists():
        return None
    try:
        model = Model.load(path)
        _, meta = T.load_tensors(path)
    except (FormatError, OSError):
        return None
    if meta.get("stage_key") != key:
        return None
    return model, float(meta.get("rte", 0.0))


def save_mask(mask: SaliencyMask, path: Path, key: str) -> None:
    T.save_tensors(path, {k: v.astype(np.float32) for k, v in mask.masks.items()},
                   {"stage_key": key, "fraction": mask.fraction, "kind": "saliency-mask"})


def load_mask(path: Path) -> SaliencyMask:
    arrays, meta = T.load_tensors(path)
    return SaliencyMask({k: v.astype(bool) for k, v in arrays.items()}, float(meta["fraction"]))


# ---------------------------------------------------------------- evaluation


def evaluate(cfg: ExperimentConfig, model: Model, partition: ForgetPartition, data: Dataset, test: Dataset,
             policy: str, seed: int, method: str, rte: float) -> MetricsRecord:
    aug = AugmentPolicy(policy) if cfg.raw["eval"]["augmented"] else None
    ua, ra, ta = core_accuracies(model, partition, data, test, aug, seed)
    cap = cfg.raw["eval"]["mia_samples"] or None
    attacker = fit_mia_attacker(model, data.subset(partition.remain), test, seed, cap)
    extras = {"mia_threshold": attacker.threshold, "mia_fit_accuracy": attacker.fit_accuracy}
    if partition.mode == "classwise":
        extras["TA_excluding_class"] = test_accuracy_excluding(model, test, int(partition.parameter))
    return MetricsRecord(ua, ra, ta, mia_score(model, partition, data, attacker), rte, method, policy, seed, extras)


# ---------------------------------------------------------------- runner


class _Stage:
    """Runs one stage: reuse a matching checkpoint or compute, time and save it."""

    def __init__(self, cfg: ExperimentConfig, ckpt_dir: Path, log_dir: Path):
        self.cfg = cfg
        self.ckpt_dir = ckpt_dir
        self.log_dir = log_dir

    def __call__(self, entry: RunEntry, compute) -> Model:
        path = self.ckpt_dir / _ckpt_name(entry.stage, entry.policy, entry.seed, entry.forget_param,
                                          entry.method if entry.stage == "unlearn" else None, entry.key)
        entry.checkpoint = str(path)
        hit = _try_reuse(path, entry.key)
        if hit is not None:
            entry.reused = True
            entry.rte = hit[1]
            return hit[0]
        debug = self.cfg.raw["debug"]
        stem = path.stem
        with ExitStack() as stack:
            access = [] if debug["access_log"] else None
            transforms = None
            if debug["transform_log"]:
                self.log_dir.mkdir(parents=True, exist_ok=True)
                transforms = stack.enter_context(open(self.log_dir / f"{stem}.transforms.ndjson", "w"))
            model, minutes = measure_rte(compute, access, transforms)
        if access is not None:
            self.log_dir.mkdir(parents=True, exist_ok=True)
            with open(self.log_dir / f"{stem}.access.csv", "w") as fh:
                fh.write("epoch,index\n")
                fh.writelines(f"{e},{i}\n" for e, i in access)
        entry.rte = minutes
        model.save(path, {"stage_key": entry.key, "rte": minutes, "stage": entry.stage,
                          "loss_history": [float(v) for v in model.loss_history]})
        return model


def _fail(entry: RunEntry, exc: BaseException) -> None:
    entry.status = "failed"
    entry.error = f"{type(exc).__name__}: {exc}"
    log.error("%s %s %s seed %s failed: %s", entry.stage, entry.method, entry.policy, entry.seed, entry.error)


def run_experiment(cfg: ExperimentConfig, data: tuple[Dataset, Dataset] | None = None) -> RunManifest:
    """Execute the policy x seed x forget-spec x method grid and write reports.

    Completed stages are reused from matching checkpoints; a failing stage is
    recorded in the manifest and only its dependents are skipped.
    """
    out = cfg.output_dir
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(cfg.hash(), cfg.to_dict())
    manifest_path = out / MANIFEST_NAME
    train_set, test_set = data if data is not None else load_data(cfg)
    arch = cfg.arch()
    stage = _Stage(cfg, ckpt_dir, out / "logs")
    salun_cfg, rl_cfg = cfg.raw["salun"], cfg.raw["rl"]

    def add(entry: RunEntry) -> RunEntry:
        manifest.runs.append(entry)
        return entry

    for policy in cfg.policies:
        for seed in cfg.seeds:
            base_cfg = cfg.train_config("baseline", policy, seed)
            unl_cfg = cfg.train_config("unlearn", policy, seed)
            base_entry = add(RunEntry("baseline", "Original", policy, seed,
                                      key=stage_key(cfg, "baseline", policy, seed)))
            log.info("baseline %s seed %d", policy, seed)
            try:
                original = stage(base_entry, lambda a, t: train(arch, train_set, base_cfg, a, t))
                base_entry.status = "ok"
            except Exception as exc:  # noqa: BLE001 - isolate the failure, keep the grid going
                _fail(base_entry, exc)
                original = None
            manifest.save(manifest_path)

            for value in cfg.forget_values:
                mode = cfg.forget_mode
                partition = None
                rt_entry = add(RunEntry("retrain", RETRAIN, policy, seed, mode, value,
                                        key=stage_key(cfg, "retrain", policy, seed, value)))
                log.info("retrain %s seed %d forget %s=%s", policy, seed, mode, value)
                try:
                    partition = split_forget(train_set, mode, value, seed)
                    part = partition
                    model = stage(rt_entry, lambda a, t: retrain(arch, part, train_set, base_cfg, a, t))
                    rt_entry.metrics = evaluate(cfg, model, partition, train_set, test_set, policy, seed,
                                                RETRAIN, rt_entry.rte).to_dict()
                    rt_entry.status = "ok"
                except Exception as exc:  # noqa: BLE001
                    _fail(rt_entry, exc)
                manifest.save(manifest_path)

                for method in cfg.methods:
                    entry = add(RunEntry("unlearn", method, policy, seed, mode, value,
                                         key=stage_key(cfg, "unlearn", policy, seed, value, method)))
                    if original is None or partition is None:
                        entry.status = "failed"
                        entry.error = "dependency failed: " + ("baseline" if original is None else "partition")
                        continue
                    log.info("%s %s seed %d forget %s=%s", method, policy, seed, mode, value)
                    try:
                        model = stage(entry, _unlearner(method, original, partition, train_set, unl_cfg,
                                                        salun_cfg, rl_cfg, ckpt_dir, entry.key))
                        entry.metrics = evaluate(cfg, model, partition, train_set, test_set, policy, seed,
                                                 method, entry.rte).to_dict()
                        entry.status = "ok"
                    except Exception as exc:  # noqa: BLE001
                        _fail(entry, exc)
                    manifest.save(manifest_path)

    results = manifest.results()
    if results:
        manifest.reports = write_reports(results, out, cfg.gap_mode, cfg.raw["report"]["rte"])
    manifest.save(manifest_path)
    return manifest


def _unlearner(method, original, partition, data, cfg, salun_cfg, rl_cfg, ckpt_dir: Path, key: str):
    if method == "FT":
        return lambda a, t: fine_tune(original, partition, data, cfg, a, t)
    if method == "RL":
        return lambda a, t: random_label(original, partition, data, cfg, rl_cfg["forget_only"],
                                         rl_cfg["redraw_each_epoch"], a, t)
    if method == "SalUn":
        def run(a, t):
            # saliency computation is part of the method's cost, so it is timed too
            mask = compute_saliency_mask(original, partition, data, salun_cfg["fraction"],
                                         salun_cfg["batch_cap"] or None)
            save_mask(mask, ckpt_dir / f"mask_{key}.ckpt", key)
            return salun(original, partition, data, mask, cfg, rl_cfg["forget_only"],
                         rl_cfg["redraw_each_epoch"], a, t)
        return run
    raise ValueError(f"unknown method {method!r}")


# ---------------------------------------------------------------- verification


def verify(manifest_path: str | Path, recheck_data: bool = True) -> list[str]:
    """Re-check stored artefacts; returns human-readable problems (empty when everything holds)."""
    manifest = RunManifest.load(manifest_path)
    problems: list[str] = []
    if config_hash(manifest.config) != manifest.config_hash:
        problems.append("config hash does not match the stored config")
    cfg = ExperimentConfig(manifest.config)
    arch = cfg.arch()
    baselines: dict[tuple, Model] = {}
    for r in manifest.runs:
        if r.status != "ok":
            continue
        where = f"{r.stage}/{r.method}/{r.policy}/seed {r.seed}"
        try:
            model = Model.load(r.checkpoint)
            _, meta = T.load_tensors(r.checkpoint)
        except (FormatError, OSError) as exc:
            problems.append(f"{where}: checkpoint unreadable ({exc})")
            continue
        if meta.get("stage_key") != r.key:
            problems.append(f"{where}: checkpoint belongs to a different stage")
        if model.arch != arch:
            problems.append(f"{where}: architecture differs from the config")
        if not all(np.isfinite(p.data).all() for p in model.parameters()):
            problems.append(f"{where}: non-finite weights")
        if r.stage == "baseline":
            baselines[(r.policy, r.seed)] = model
        elif r.metrics is None:
            problems.append(f"{where}: no metrics recorded")
        elif any(not 0 <= r.metrics[m] <= 100 for m in ("UA", "RA", "TA", "MIA")):
            problems.append(f"{where}: metric outside [0, 100]")
        if r.method == "SalUn":
            base = baselines.get((r.policy, r.seed))
            mask_path = Path(r.checkpoint).parent / f"mask_{r.key}.ckpt"
            if base is None or not mask_path.exists():
                problems.append(f"{where}: cannot re-check the masking contract")
            else:
                mask = load_mask(mask_path)
                for name, p in model.named_parameters():
                    frozen = ~mask.masks[name]
                    if not np.array_equal(p.data[frozen], base.params[name].data[frozen]):
                        problems.append(f"{where}: frozen parameters of {name} moved")
    expected = len(cfg.policies) * len(cfg.seeds) * len(cfg.forget_values) * (len(cfg.methods) + 1)
    evaluated = [r for r in manifest.runs if r.stage != "baseline"]
    ok = sum(1 for r in evaluated if r.status == "ok")
    failed = len(evaluated) - ok
    if ok + failed != expected:
        problems.append(f"grid incomplete: {ok} completed + {failed} failed runs, expected {expected}")
    if recheck_data:
        try:
            train_set, _ = load_data(cfg)
        except (FormatError, OSError) as exc:
            problems.append(f"dataset not accessible for partition checks ({exc})")
        else:
            for value in cfg.forget_values:
                for seed in cfg.seeds:
                    part = split_forget(train_set, cfg.forget_mode, value, seed)
                    try:
                        part.check(len(train_set))
                    except Exception as exc:  # noqa: BLE001
                        problems.append(f"partition {value}/seed {seed}: {exc}")
    return problems
