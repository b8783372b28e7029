"""Experiment runner: config handling, metrics, sweeps, and reports.

A run is fully described by a flat JSON config plus a seed. Unknown config
keys are rejected outright; a silent typo in a sweep is worse than a loud
failure. Reports are written atomically (temp file, then rename) and are
byte-identical across repeated runs of the same (config, seed) apart from
the ``timings`` block.
"""

from __future__ import annotations

import csv
import io
import json
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import adapters as adp
from . import autodiff as ad
from . import backbone as bb
from . import classifier as clf
from . import model as mdl
from . import streams
from . import trainer as tr
from .errors import ConfigError

DESK_PRESET: dict = {
    # backbone
    "num_blocks": 4,
    "width": 64,
    "heads": 4,
    "mlp_ratio": 4.0,
    "image_side": 16,
    "patch_side": 8,
    "channels": 1,
    "attach_set": "qv",
    # adapters + training
    "rank": 4,
    "position_l": 2,
    "lambda_kd": 5.0,
    "lambda_orth": 1e-4,
    "temperature": 2.0,
    "epochs": 10,
    "batch_size": 16,
    "learning_rate": 3e-4,
    "optimizer": "adaptive-moments",
    "kd": True,
    "gr": True,
    "bw": True,
    "fix_b": True,
    "flip_positions": False,
    "shared_down_init": "orthogonal",
    # data stream
    "num_classes": 10,
    "num_tasks": 5,
    "train_per_class": 20,
    "test_per_class": 10,
    "noise_std": 0.08,
    "class_shuffle": False,
    "dataset_path": None,
}

# Full-size layout for reference; nothing in the test suite runs it.
PAPER_PRESET: dict = {
    **DESK_PRESET,
    "num_blocks": 12,
    "width": 768,
    "heads": 12,
    "image_side": 224,
    "patch_side": 16,
    "channels": 3,
    "rank": 10,
    "position_l": 6,
    "num_classes": 100,
    "num_tasks": 20,
}

PRESETS = {"desk": DESK_PRESET, "paper": PAPER_PRESET}

_BACKBONE_KEYS = (
    "num_blocks",
    "width",
    "heads",
    "mlp_ratio",
    "image_side",
    "patch_side",
    "channels",
    "attach_set",
)
_TRAIN_KEYS = (
    "rank",
    "position_l",
    "lambda_kd",
    "lambda_orth",
    "temperature",
    "epochs",
    "batch_size",
    "learning_rate",
    "optimizer",
    "kd",
    "gr",
    "bw",
    "fix_b",
    "flip_positions",
    "shared_down_init",
)
_STREAM_KEYS = (
    "num_classes",
    "num_tasks",
    "train_per_class",
    "test_per_class",
    "noise_std",
    "class_shuffle",
    "dataset_path",
)


def resolve_config(overrides: Mapping | None = None, preset: str = "desk") -> dict:
    """Merge overrides onto a preset, rejecting unknown keys."""
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}, expected one of {sorted(PRESETS)}")
    cfg = dict(PRESETS[preset])
    overrides = dict(overrides or {})
    unknown = sorted(set(overrides) - set(cfg))
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    cfg.update(overrides)
    return cfg


def load_config_file(path) -> dict:
    with open(path, "r", encoding="utf-8") as f:
        try:
            raw = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return raw


def split_config(cfg: Mapping) -> tuple[bb.BackboneConfig, tr.TrainConfig, dict]:
    """Validate a resolved config into typed pieces."""
    attach = cfg["attach_set"]
    attach = tuple(attach) if isinstance(attach, str) else tuple(attach)
    bcfg = bb.BackboneConfig(
        num_blocks=int(cfg["num_blocks"]),
        width=int(cfg["width"]),
        heads=int(cfg["heads"]),
        mlp_ratio=float(cfg["mlp_ratio"]),
        image_side=int(cfg["image_side"]),
        patch_side=int(cfg["patch_side"]),
        channels=int(cfg["channels"]),
        attach_set=attach,
    )
    tcfg = tr.TrainConfig(
        rank=int(cfg["rank"]),
        position_l=int(cfg["position_l"]),
        lambda_kd=float(cfg["lambda_kd"]),
        lambda_orth=float(cfg["lambda_orth"]),
        temperature=float(cfg["temperature"]),
        epochs=int(cfg["epochs"]),
        batch_size=int(cfg["batch_size"]),
        learning_rate=float(cfg["learning_rate"]),
        optimizer=str(cfg["optimizer"]),
        kd=bool(cfg["kd"]),
        gr=bool(cfg["gr"]),
        bw=bool(cfg["bw"]),
        fix_b=bool(cfg["fix_b"]),
        flip_positions=bool(cfg["flip_positions"]),
        shared_down_init=str(cfg["shared_down_init"]),
    )
    if tcfg.position_l > bcfg.num_blocks:
        raise ConfigError(
            f"position_l ({tcfg.position_l}) exceeds num_blocks ({bcfg.num_blocks})"
        )
    scfg = {k: cfg[k] for k in _STREAM_KEYS}
    return bcfg, tcfg, scfg


def atomic_write(path, data: str | bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    mode = "wb" if isinstance(data, bytes) else "w"
    with open(tmp, mode) as f:
        f.write(data)
    os.replace(tmp, path)


@dataclass
class AccuracyRecord:
    per_task: list[float]

    @property
    def average(self) -> float:
        return float(np.mean(self.per_task))

    @property
    def final(self) -> float:
        return self.per_task[-1]


@dataclass
class RunReport:
    config: dict
    seed: int
    accuracy: AccuracyRecord
    param_counts: dict
    adapter_pass_count: int
    epoch_log: list[dict]
    timings: dict = field(default_factory=dict)
    loss_log_path: str | None = None

    def to_dict(self, include_timings: bool = True) -> dict:
        out = {
            "config": self.config,
            "seed": self.seed,
            "accuracy": {
                "per_task": self.accuracy.per_task,
                "average": self.accuracy.average,
                "final": self.accuracy.final,
            },
            "params": self.param_counts,
            "adapter_pass_count": self.adapter_pass_count,
            "loss_log": self.loss_log_path,
        }
        if include_timings:
            out["timings"] = self.timings
        return out

    def to_json(self, include_timings: bool = True) -> str:
        return json.dumps(self.to_dict(include_timings), sort_keys=True, indent=2) + "\n"


def _spawn_generators(seed: int, num_tasks: int):
    root = np.random.SeedSequence(seed)
    s_data, s_backbone, s_model, s_train = root.spawn(4)
    task_seqs = s_train.spawn(num_tasks)
    gen = lambda s: np.random.Generator(np.random.PCG64(s))
    return gen(s_data), gen(s_backbone), gen(s_model), [gen(s) for s in task_seqs]


def run_experiment(
    config: Mapping | None,
    seed: int,
    out_dir=None,
    *,
    preset: str = "desk",
) -> RunReport:
    """Train the full task sequence and evaluate after every task.

    Accuracy after task t is measured over the union of test sets of tasks
    1..t. Writes the report JSON and the per-epoch loss log (JSON lines)
    into ``out_dir`` when given.
    """
    cfg = resolve_config(config, preset)
    bcfg, tcfg, scfg = split_config(cfg)
    started = time.perf_counter()

    rng_data, rng_backbone, rng_model, task_rngs = _spawn_generators(seed, scfg["num_tasks"])
    if scfg.get("dataset_path"):
        dataset = streams.load_dataset(scfg["dataset_path"])
    else:
        dataset = streams.gen_synthetic(
            int(scfg["num_classes"]),
            int(scfg["train_per_class"]),
            int(scfg["test_per_class"]),
            bcfg.image_side,
            bcfg.channels,
            float(scfg["noise_std"]),
            rng_data,
        )
    stream = streams.split_tasks(
        dataset,
        int(scfg["num_tasks"]),
        class_order_rng=rng_data if scfg.get("class_shuffle") else None,
    )

    backbone = bb.init_backbone(bcfg, rng_backbone)
    model = mdl.build_model(
        backbone,
        tcfg.position_l,
        tcfg.rank,
        rng_model,
        flip_positions=tcfg.flip_positions,
        fixed_down=tcfg.fix_b,
        shared_down_init=tcfg.shared_down_init,
    )
    store = clf.PrototypeStore()

    per_task_acc: list[float] = []
    epoch_log: list[dict] = []
    task_times: list[float] = []
    for task, rng_task in zip(stream.tasks, task_rngs):
        result = tr.train_task(model, store, task, tcfg, rng_task)
        epoch_log.extend(result.epoch_log)
        task_times.append(result.duration_s)
        seen = stream.tasks[: task.task_id]
        images = np.concatenate([t.test_images for t in seen])
        labels = np.concatenate([t.test_labels for t in seen])
        per_task_acc.append(clf.evaluate(model, store, images, labels))

    accuracy = AccuracyRecord(per_task=per_task_acc)
    counts = adp.count_trainable_params(
        bcfg.num_blocks,
        bcfg.width,
        len(bcfg.attach_set),
        tcfg.rank,
        tcfg.position_l,
        scfg["num_tasks"],
        block_weights=tcfg.bw,
        fixed_down=tcfg.fix_b,
        flip_positions=tcfg.flip_positions,
        backbone_params=backbone.param_count(),
    )
    if model.flip_positions:
        pass_count = bcfg.num_blocks * scfg["num_tasks"]
    else:
        pass_count = clf.adapter_pass_count(
            tcfg.position_l, bcfg.num_blocks, scfg["num_tasks"]
        )
    report = RunReport(
        config=cfg,
        seed=seed,
        accuracy=accuracy,
        param_counts={
            "shared": counts.shared,
            "specific_per_task": counts.specific_per_task,
            "block_weights_per_task": counts.block_weights_per_task,
            "total": counts.total,
            "backbone": counts.backbone,
            "backbone_ratio": counts.backbone_ratio,
        },
        adapter_pass_count=pass_count,
        epoch_log=epoch_log,
        timings={
            "total_s": time.perf_counter() - started,
            "per_task_s": task_times,
        },
        loss_log_path="loss_log.jsonl",
    )
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        lines = "".join(json.dumps(e, sort_keys=True) + "\n" for e in epoch_log)
        atomic_write(out_dir / "loss_log.jsonl", lines)
        atomic_write(out_dir / "run_report.json", report.to_json())
    return report


# ---------------------------------------------------------------------------
# ablation sweeps
# ---------------------------------------------------------------------------

# axis name -> (config key, default value list); position and rank defaults
# depend on the base config and are resolved per sweep
ABLATION_AXES = {
    "kd": ("kd", [True, False]),
    "gr": ("gr", [True, False]),
    "bw": ("bw", [True, False]),
    "l-sweep": ("position_l", None),
    "fixB": ("fix_b", [True, False]),
    "flip": ("flip_positions", [False, True]),
    "rank": ("rank", [1, 2, 4]),
    "attach": ("attach_set", ["v", "qv", "kv", "qkv"]),
    "bs-init": ("shared_down_init", ["orthogonal", "random"]),
}


def run_ablation(
    config: Mapping | None,
    axes: Sequence[str] | Mapping[str, list],
    seeds: Sequence[int],
    out_dir=None,
    *,
    preset: str = "desk",
) -> tuple[list[RunReport], str]:
    """Cross-product sweep over the requested axes at fixed seeds.

    Returns the reports and the summary CSV text (one row per combination per
    seed: axis columns, seed, A_T, A_bar, params_pct, pass_count).
    """
    base = resolve_config(config, preset)
    if isinstance(axes, Mapping):
        requested = {str(k): list(v) for k, v in axes.items()}
    else:
        requested = {str(k): None for k in axes}
    unknown = sorted(set(requested) - set(ABLATION_AXES))
    if unknown:
        raise ConfigError(f"unknown ablation axes: {unknown}")
    if not requested:
        raise ConfigError("no ablation axes requested")

    axis_names = list(requested)
    axis_values: list[list] = []
    for name in axis_names:
        values = requested[name]
        if values is None:
            _, values = ABLATION_AXES[name]
            if name == "l-sweep":
                n = int(base["num_blocks"])
                values = [0, n // 2, n]
        axis_values.append(list(values))

    combos: list[tuple] = [()]
    for values in axis_values:
        combos = [c + (v,) for c in combos for v in values]

    reports: list[RunReport] = []
    rows: list[dict] = []
    for combo in combos:
        overrides = dict(base)
        for name, value in zip(axis_names, combo):
            overrides[ABLATION_AXES[name][0]] = value
        for seed in seeds:
            run_dir = None
            if out_dir is not None:
                tag = "_".join(f"{n}={v}" for n, v in zip(axis_names, combo))
                run_dir = Path(out_dir) / f"{tag}_seed{seed}".replace("/", "-")
            report = run_experiment(overrides, seed, run_dir)
            reports.append(report)
            row = {name: value for name, value in zip(axis_names, combo)}
            row.update(
                {
                    "seed": seed,
                    "A_T": report.accuracy.final,
                    "A_bar": report.accuracy.average,
                    "params_pct": 100.0 * report.param_counts["backbone_ratio"],
                    "pass_count": report.adapter_pass_count,
                }
            )
            rows.append(row)

    buf = io.StringIO()
    writer = csv.DictWriter(
        buf, fieldnames=axis_names + ["seed", "A_T", "A_bar", "params_pct", "pass_count"]
    )
    writer.writeheader()
    writer.writerows(rows)
    summary = buf.getvalue()
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        atomic_write(Path(out_dir) / "summary.csv", summary)
    return reports, summary


# ---------------------------------------------------------------------------
# gradient verification entry point
# ---------------------------------------------------------------------------

GRADCHECK_PRESET: dict = {
    "num_blocks": 2,
    "width": 16,
    "heads": 2,
    "image_side": 8,
    "patch_side": 4,
    "rank": 2,
    "position_l": 1,
    "num_classes": 4,
    "num_tasks": 2,
    "train_per_class": 4,
    "test_per_class": 2,
    "epochs": 2,
    "batch_size": 4,
}


def gradcheck(
    config: Mapping | None,
    seed: int,
    *,
    step: float = 1e-5,
    settle_steps: int = 5,
    preset: str = "desk",
) -> dict:
    """Verify analytic gradients of every active loss term on a micro run.

    Trains the first task, enters the second, takes a few optimizer steps so
    the distillation term is away from its stationary initialization, then
    compares every trainable scalar against central finite differences. The
    distillation target is pinned at the linearization point, matching its
    constant-target semantics.
    """
    overrides = dict(GRADCHECK_PRESET)
    overrides.update(config or {})
    cfg = resolve_config(overrides, preset)
    bcfg, tcfg, scfg = split_config(cfg)
    rng_data, rng_backbone, rng_model, task_rngs = _spawn_generators(seed, scfg["num_tasks"])
    dataset = streams.gen_synthetic(
        int(scfg["num_classes"]),
        int(scfg["train_per_class"]),
        int(scfg["test_per_class"]),
        bcfg.image_side,
        bcfg.channels,
        float(scfg["noise_std"]),
        rng_data,
    )
    stream = streams.split_tasks(dataset, int(scfg["num_tasks"]))
    backbone = bb.init_backbone(bcfg, rng_backbone)
    model = mdl.build_model(
        backbone,
        tcfg.position_l,
        tcfg.rank,
        rng_model,
        flip_positions=tcfg.flip_positions,
        fixed_down=tcfg.fix_b,
        shared_down_init=tcfg.shared_down_init,
    )
    store = clf.PrototypeStore()
    check_task_idx = 1 if len(stream.tasks) > 1 else 0
    for task, rng_task in zip(stream.tasks[:check_task_idx], task_rngs[:check_task_idx]):
        tr.train_task(model, store, task, tcfg, rng_task)

    task = stream.tasks[check_task_idx]
    session = tr.TaskSession(model, task, tcfg, task_rngs[check_task_idx])
    images = task.train_images[: tcfg.batch_size]
    labels = task.train_labels_local[: tcfg.batch_size]
    optimizer = tr.make_optimizer(tcfg)
    for _ in range(settle_steps):
        session.step(images, labels, optimizer)

    pinned = None
    if session.kd_active:
        pinned = tr.kd_target(
            session.head, session.teacher_readout(images), tcfg.temperature
        )

    tag_of = {p.name: p.tag for p in session.params}
    terms: dict[str, dict] = {}
    overall = 0.0
    active = session.losses(images, labels, pinned_kd_target=pinned)
    for term, loss in active.items():
        if loss is None:
            continue

        def closure(term=term):
            return session.losses(images, labels, pinned_kd_target=pinned)[term]

        rep = ad.finite_difference_check(closure, session.params, step)
        per_group: dict[str, float] = {}
        for name, err in rep.per_param.items():
            tag = tag_of[name]
            per_group[tag] = max(per_group.get(tag, 0.0), err)
        terms[term] = {
            "max_rel_error": rep.max_rel_error,
            "num_checked": rep.num_checked,
            "per_param": rep.per_param,
            "per_group": per_group,
        }
        overall = max(overall, rep.max_rel_error)
    return {
        "seed": seed,
        "step": step,
        "task_checked": task.task_id,
        "terms_checked": sorted(terms),
        "max_rel_error": overall,
        "terms": terms,
    }
