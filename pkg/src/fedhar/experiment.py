"""Experiment configs and the partition x model x seed grid runner."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import platform
from concurrent.futures import ProcessPoolExecutor
from functools import lru_cache
from pathlib import Path
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from . import __version__
from .data import GeneratorConfig, PartitionSpec, generate, partition
from .federation import FederationConfig, MutualConfig, run_experiment
from .metrics import aggregate_seeds
from .nn import Architecture, OptimizerConfig

log = logging.getLogger(__name__)

DEFAULT_SEEDS = [42, 1337, 3407, 8711, 9370]
ROUND_FIELDS = ["partition", "model", "seed", "round", "accuracy", "macro_f1"]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class GeneratorSection(_Strict):
    feature_width: int = Field(8, ge=1)
    num_modalities: int = Field(3, ge=1)
    num_classes: int = Field(6, ge=2)
    num_subjects: int = Field(6, ge=2)
    num_rooms: int = Field(2, ge=1)
    class_signal: float = Field(0.6, ge=0)
    noise_scale: float = Field(1.0, ge=0)
    subject_shift_scale: float = Field(0.2, ge=0)
    room_shift_scale: float = Field(0.4, ge=0)
    modality_transform_scale: float = Field(4.0, ge=0)
    room_label_skew: float = Field(0.5, ge=0)
    samples_per_cell: int = Field(80, ge=1)


class PartitionSection(_Strict):
    level: Literal["centralised", "subj", "subj+env", "subj+env+mod"]
    fusion: Literal["fused", "separated"]
    holdout_subject: int = 6

    @model_validator(mode="after")
    def _mod_needs_separated(self):
        if self.level == "subj+env+mod" and self.fusion != "separated":
            raise ValueError("subj+env+mod requires fusion 'separated'")
        return self

    def spec(self) -> PartitionSpec:
        return PartitionSpec(self.level, self.fusion, self.holdout_subject)


class ModelSection(_Strict):
    name: str
    kind: Literal["flat-dense", "token-pooling"]
    hidden_widths: list[int] = [32]

    @field_validator("hidden_widths")
    @classmethod
    def _positive(cls, v):
        if any(h < 1 for h in v):
            raise ValueError("hidden widths must be positive")
        return v


class FederationSection(_Strict):
    rounds: int = Field(10, ge=1)
    local_epochs: int = Field(10, ge=0)
    client_fraction: float = Field(0.30, gt=0, le=1)


class OptimizerSection(_Strict):
    learning_rate: float = Field(1e-3, gt=0)
    beta1: float = Field(0.9, gt=0, lt=1)
    beta2: float = Field(0.999, gt=0, lt=1)
    weight_decay: float = Field(0.01, ge=0)
    epsilon: float = Field(1e-8, gt=0)
    batch_size: int = Field(10, ge=1)


class MutualSection(_Strict):
    enabled: bool = True
    lambda_global: float = Field(0.33, ge=0)
    lambda_group: float = Field(0.75, ge=0)
    global_model: str = "token-pooling"
    group_kind: Literal["flat-dense", "token-pooling"] = "flat-dense"
    group_hidden_widths: list[int] = [16]


def _default_partitions():
    rows = [("centralised", "fused"), ("subj", "fused"), ("subj+env", "fused"),
            ("centralised", "separated"), ("subj", "separated"), ("subj+env", "separated"),
            ("subj+env+mod", "separated")]
    return [PartitionSection(level=lv, fusion=fu) for lv, fu in rows]


def _default_models():
    return [ModelSection(name="flat-dense", kind="flat-dense", hidden_widths=[32]),
            ModelSection(name="token-pooling", kind="token-pooling", hidden_widths=[32])]


class ExperimentConfig(_Strict):
    generator: GeneratorSection = GeneratorSection()
    data_seed: Optional[int] = 0
    partitions: list[PartitionSection] = Field(default_factory=_default_partitions, min_length=1)
    models: list[ModelSection] = Field(default_factory=_default_models, min_length=1)
    federation: FederationSection = FederationSection()
    optimizer: OptimizerSection = OptimizerSection()
    mutual: MutualSection = MutualSection()
    seeds: list[int] = Field(default_factory=lambda: list(DEFAULT_SEEDS), min_length=1)
    output_dir: str = "results"

    @model_validator(mode="after")
    def _check_refs(self):
        names = [m.name for m in self.models]
        if len(set(names)) != len(names):
            raise ValueError("model names must be unique")
        if {"mutual", "Ensemble"} & set(names):
            raise ValueError("model names 'mutual' and 'Ensemble' are reserved")
        if self.mutual.enabled and self.mutual.global_model not in names:
            raise ValueError(f"mutual.global_model {self.mutual.global_model!r} is not a configured model")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError("seeds must be distinct")
        return self

    def architecture(self, kind: str, hidden) -> Architecture:
        g = self.generator
        return Architecture(kind, g.feature_width, g.num_modalities, tuple(hidden), g.num_classes)

    def digest(self) -> str:
        canon = json.dumps(self.model_dump(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()


def load_config(path: str | Path) -> ExperimentConfig:
    """Parse a JSON config file; raises ``ValueError`` with a line or field diagnostic."""
    text = Path(path).read_text()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as exc:
        lines = []
        for err in exc.errors():
            loc = ".".join(str(p) for p in err["loc"]) or "<root>"
            lines.append(f"{path}: field {loc}: {err['msg']}")
        raise ValueError("\n".join(lines)) from exc


# --- grid ---------------------------------------------------------------

@lru_cache(maxsize=8)
def _dataset(gen: GeneratorConfig, data_seed: int):
    return generate(gen, data_seed)


def _cells(cfg: ExperimentConfig) -> list[tuple[int, str, int]]:
    """Grid cells as (partition index, model name or 'mutual', seed), in output order."""
    cells = []
    for pi, p in enumerate(cfg.partitions):
        for m in cfg.models:
            for s in cfg.seeds:
                cells.append((pi, m.name, s))
        if cfg.mutual.enabled and p.level == "subj+env+mod":
            for s in cfg.seeds:
                cells.append((pi, "mutual", s))
    return cells


def run_cell(cfg: ExperimentConfig, cell: tuple[int, str, int]) -> list[dict]:
    pi, model_name, seed = cell
    part = cfg.partitions[pi]
    spec = part.spec()
    gen = GeneratorConfig(**cfg.generator.model_dump())
    samples = _dataset(gen, seed if cfg.data_seed is None else cfg.data_seed)
    clients, test = partition(samples, spec)
    fed = FederationConfig(cfg.federation.rounds, cfg.federation.local_epochs,
                           cfg.federation.client_fraction, seed)
    opt = OptimizerConfig(**cfg.optimizer.model_dump())
    models = {m.name: m for m in cfg.models}
    if model_name == "mutual":
        mu = cfg.mutual
        g = models[mu.global_model]
        result = run_experiment(
            clients, test, fed, cfg.architecture(g.kind, g.hidden_widths), opt, mode="mutual",
            mutual=MutualConfig(mu.lambda_global, mu.lambda_group),
            group_arch=cfg.architecture(mu.group_kind, mu.group_hidden_widths),
            partition_label=spec.label)
        rename = {f"{g.kind}+mutual": f"{g.name}+mutual", "ensemble": "Ensemble"}
    else:
        m = models[model_name]
        result = run_experiment(clients, test, fed, cfg.architecture(m.kind, m.hidden_widths), opt,
                                partition_label=spec.label)
        rename = {m.kind: m.name}
    return [{"partition": r.partition_label, "model": rename.get(r.model_label, r.model_label),
             "seed": r.seed, "round": r.round, "accuracy": r.accuracy, "macro_f1": r.macro_f1}
            for r in result.metrics]


def _safe_cell(args):
    cfg, cell = args
    try:
        return cell, run_cell(cfg, cell), None
    except Exception as exc:  # a failed cell must not lose the rest of the grid
        return cell, None, f"{type(exc).__name__}: {exc}"


def run_grid(cfg: ExperimentConfig, jobs: int = 1, out_dir: str | Path | None = None) -> dict:
    """Execute every cell and write rounds.csv, summary.txt and manifest.txt.

    Cells are written in grid order whether or not they ran in parallel, so
    the output files do not depend on ``jobs``.
    """
    out = Path(out_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_manifest(cfg, out)
    cells = _cells(cfg)
    rows, failed = [], []
    with open(out / "rounds.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=ROUND_FIELDS, lineterminator="\n")
        writer.writeheader()
        if jobs > 1:
            pool = ProcessPoolExecutor(max_workers=jobs)
            results = pool.map(_safe_cell, [(cfg, c) for c in cells])
        else:
            pool = None
            results = map(_safe_cell, [(cfg, c) for c in cells])
        try:
            for cell, cell_rows, err in results:
                if err is not None:
                    log.error("cell %s failed: %s", cell, err)
                    failed.append((cell, err))
                    continue
                for r in cell_rows:
                    writer.writerow({**r, "accuracy": repr(r["accuracy"]), "macro_f1": repr(r["macro_f1"])})
                fh.flush()
                rows.extend(cell_rows)
                log.info("cell %s done: final acc %.3f", cell, cell_rows[-1]["accuracy"])
        finally:
            if pool is not None:
                pool.shutdown()
    summary = summarize(rows, cfg)
    (out / "summary.txt").write_text(format_summary(summary, cfg, failed))
    return {"rows": rows, "failed": failed, "summary": summary}


def summarize(rows: list[dict], cfg: ExperimentConfig) -> dict:
    """Mean/std over seeds of final-round accuracy and macro-F1 per (partition, model)."""
    final_round = cfg.federation.rounds - 1
    per_cell: dict[tuple[str, str], dict[str, list[float]]] = {}
    for r in rows:
        if int(r["round"]) != final_round:
            continue
        d = per_cell.setdefault((r["partition"], r["model"]), {"accuracy": [], "macro_f1": []})
        d["accuracy"].append(float(r["accuracy"]))
        d["macro_f1"].append(float(r["macro_f1"]))
    return {k: {metric: aggregate_seeds(v) for metric, v in d.items()} for k, d in per_cell.items()}


def _columns(cfg: ExperimentConfig) -> list[str]:
    cols = [m.name for m in cfg.models]
    if cfg.mutual.enabled:
        cols.append("Ensemble")
    return cols


def format_summary(summary: dict, cfg: ExperimentConfig, failed=()) -> str:
    cols = _columns(cfg)
    labels = [p.spec().label for p in cfg.partitions]
    width = max(len(s) for s in labels + ["Partition"]) + 2
    lines = []
    for metric, title in (("accuracy", "Accuracy"), ("macro_f1", "Macro F1")):
        lines.append(f"{title} (final round, mean±std over {len(cfg.seeds)} seeds)")
        lines.append("Partition".ljust(width) + "".join(c.ljust(16) for c in cols))
        for lab in labels:
            cells = []
            for c in cols:
                s = summary.get((lab, c))
                cells.append((str(s[metric]) if s else "-").ljust(16))
            lines.append(lab.ljust(width) + "".join(cells))
        lines.append("")
    if failed:
        lines.append("Failed cells:")
        for (pi, model, seed), err in failed:
            lines.append(f"  {labels[pi]} {model} seed={seed}: {err}")
    return "\n".join(lines).rstrip() + "\n"


def _write_manifest(cfg: ExperimentConfig, out: Path) -> None:
    lines = [
        f"fedhar_version: {__version__}",
        f"config_sha256: {cfg.digest()}",
        f"seeds: {','.join(str(s) for s in cfg.seeds)}",
        f"data_seed: {cfg.data_seed}",
        f"python: {platform.python_version()}",
        f"numpy: {np.__version__}",
        "config: " + json.dumps(cfg.model_dump(), sort_keys=True),
    ]
    (out / "manifest.txt").write_text("\n".join(lines) + "\n")


def generator_config(cfg: ExperimentConfig) -> GeneratorConfig:
    return GeneratorConfig(**cfg.generator.model_dump())

