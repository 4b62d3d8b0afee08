"""Single-axis sweep harness.

One axis varies per sweep; every cell is a (value, seed) pair. Axes that
only change inference settings reuse one trained model per seed; axes that
change training re-train per cell. Cell failures are recorded and the sweep
continues. Rows serialize one JSON record per line; the aggregate table
takes the median over seeds within each value, a robust choice when one
seed diverges.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .codec import CodecSpec, Corpus, sample_corpus
from .diffusion import build_cosine_schedule, respace
from .evaluation import EvalReport, GenSettings, evaluate
from .model import BackboneConfig, ModelParams
from .numerics import Rng
from .training import StageConfig, train_stage1

TRAINING_AXES = ("p_mask", "head_depth")
INFERENCE_AXES = ("stopping", "inference")

DEFAULT_VALUES = {
    "p_mask": [0.0, 0.15, 0.3, 0.5],
    "head_depth": [3, 6, 12],
    "stopping": ["oracle_duration", "oracle_endpoint", "eos"],
    "inference": [[t, s] for t in (0.0, 0.9, 1.2) for s in (25, 100)],
}

METRIC_KEYS = ("ter_free_running", "ter_teacher_forced", "sim_r", "sim_g",
               "frame_mse", "endpoint_accuracy")


@dataclass(frozen=True)
class SweepSpec:
    axis: str
    values: list
    seeds: list[int]
    train: StageConfig
    settings: GenSettings
    model: BackboneConfig
    codec: CodecSpec
    corpus_seed: int = 11
    n_train: int = 32
    n_val: int = 8
    len_range: tuple[int, int] = (4, 12)
    n_speakers: int = 6
    n_val_speakers: int = 3
    infer_steps: int = 100
    eval_on: str = "val"  # "val" | "train"

    def __post_init__(self):
        if self.axis not in TRAINING_AXES + INFERENCE_AXES:
            raise ValueError(f"unknown sweep axis {self.axis!r}")
        if not self.values:
            raise ValueError("sweep needs at least one axis value")
        if not self.seeds:
            raise ValueError("sweep needs at least one seed")


@dataclass
class CellResult:
    axis: str
    value: object
    seed: int
    report: EvalReport | None = None
    error: str | None = None
    drift_slope: float | None = None

    def row(self) -> dict:
        out = {"axis": self.axis, "value": self.value, "seed": self.seed}
        if self.error is not None:
            out["error"] = self.error
        else:
            out["report"] = json.loads(self.report.to_json())
            out["drift_slope"] = self.drift_slope
        return out


@dataclass
class SweepResult:
    spec_axis: str
    cells: list[CellResult]
    aggregate: list[dict] = field(default_factory=list)

    def rows_jsonl(self) -> str:
        return "\n".join(json.dumps(c.row(), sort_keys=True) for c in self.cells)


def drift_slope(curve: list[float]) -> float | None:
    """Least-squares slope of the positional error curve; needs >= 2 points."""
    arr = np.asarray([c for c in curve if c > 0.0], dtype=np.float64)
    if arr.size < 2:
        return None
    return float(np.polyfit(np.arange(arr.size), arr, 1)[0])


def _build_corpus(spec: SweepSpec) -> Corpus:
    codec = build_codec(seed=spec.codec_seed)
    return sample_corpus(codec, spec.n_train, spec.n_val, spec.len_range,
                         spec.n_speakers, spec.n_val_speakers, spec.corpus_seed)


def _train_one(spec: SweepSpec, seed: int, p_mask: float | None = None,
               head_layers: int | None = None) -> tuple[ModelParams, Corpus]:
    corpus = _build_corpus(spec)
    cfg = spec.train
    if p_mask is not None:
        cfg = dataclasses.replace(cfg, p_mask=p_mask)
    model = spec.model
    if head_layers is not None:
        model = dataclasses.replace(model, head_layers=head_layers)
    res = train_stage1(cfg, corpus, Rng(seed), model_config=model)
    return res.params, corpus


def _eval_cell(spec: SweepSpec, params: ModelParams, corpus: Corpus, seed: int,
               settings: GenSettings) -> CellResult:
    schedule = respace(build_cosine_schedule(spec.train.schedule_T),
                       min(spec.infer_steps, spec.train.schedule_T))
    utts = corpus.val if spec.eval_on == "val" else corpus.train
    report = evaluate(params, corpus.codec, utts, schedule, settings,
                      Rng(seed).stream("sweep-eval"), with_drift=True)
    cell = CellResult(axis=spec.axis, value=None, seed=seed, report=report)
    cell.drift_slope = drift_slope(report.drift)
    return cell


def _settings_for(spec: SweepSpec, value) -> tuple[GenSettings, int]:
    """Inference-axis cell -> (settings, denoise step count)."""
    if spec.axis == "stopping":
        return dataclasses.replace(spec.settings, criterion=value), spec.infer_steps
    temperature, steps = value
    return dataclasses.replace(spec.settings, temperature=float(temperature)), int(steps)


def run_sweep(spec: SweepSpec, out_dir: str | None = None) -> SweepResult:
    cells: list[CellResult] = []
    if spec.axis in TRAINING_AXES:
        for value in spec.values:
            for seed in spec.seeds:
                try:
                    kw = ({"p_mask": float(value)} if spec.axis == "p_mask"
                          else {"head_layers": int(value)})
                    params, corpus = _train_one(spec, seed, **kw)
                    cell = _eval_cell(spec, params, corpus, seed, spec.settings)
                    cell.value = value
                except Exception as e:
                    cell = CellResult(axis=spec.axis, value=value, seed=seed,
                                      error=f"{type(e).__name__}: {e}")
                cells.append(cell)
    else:
        for seed in spec.seeds:
            try:
                params, corpus = _train_one(spec, seed)
            except Exception as e:
                for value in spec.values:
                    cells.append(CellResult(axis=spec.axis, value=value, seed=seed,
                                            error=f"{type(e).__name__}: {e}"))
                continue
            for value in spec.values:
                try:
                    settings, steps = _settings_for(spec, value)
                    sub = dataclasses.replace(spec, infer_steps=steps)
                    cell = _eval_cell(sub, params, corpus, seed, settings)
                    cell.axis = spec.axis
                    cell.value = value
                except Exception as e:
                    cell = CellResult(axis=spec.axis, value=value, seed=seed,
                                      error=f"{type(e).__name__}: {e}")
                cells.append(cell)

    result = SweepResult(spec_axis=spec.axis, cells=cells,
                         aggregate=aggregate(cells))
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "cells.jsonl"), "w") as f:
            f.write(result.rows_jsonl() + "\n")
        with open(os.path.join(out_dir, "aggregate.json"), "w") as f:
            json.dump(result.aggregate, f, indent=2, sort_keys=True)
    return result


def aggregate(cells: list[CellResult]) -> list[dict]:
    """Median over seeds per axis value; failed cells counted, not averaged."""
    by_value: dict[str, list[CellResult]] = {}
    order: list[tuple[str, object]] = []
    for c in cells:
        key = json.dumps(c.value)
        if key not in by_value:
            by_value[key] = []
            order.append((key, c.value))
        by_value[key].append(c)
    table = []
    for key, value in order:
        group = by_value[key]
        ok = [c for c in group if c.error is None]
        row: dict = {"value": value, "n_seeds": len(group), "n_failed": len(group) - len(ok)}
        for metric in METRIC_KEYS:
            vals = [getattr(c.report, metric) for c in ok]
            vals = [v for v in vals if np.isfinite(v)]
            row[metric] = float(np.median(vals)) if vals else None
        slopes = [c.drift_slope for c in ok if c.drift_slope is not None]
        row["drift_slope"] = float(np.median(slopes)) if slopes else None
        table.append(row)
    return table
