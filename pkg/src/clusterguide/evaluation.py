"""Capture-rate evaluation, parameter sweeps and report emission.

Capture rate (fraction of samples assigned to the target identity sub-cluster)
is the consistency metric; Euclidean latent distances provide consistency and
diversity proxies. Reports serialize to versioned JSON plus a flat CSV.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, replace

import numpy as np

from . import diffusion, infer, semantics, tune as tunemod, world as worldmod
from .infer import GuidanceConfig
from .semantics import Prompt


def capture_rate(samples, world, subject_token, context_token, target_k) -> float:
    """Fraction of samples whose sub-cluster assignment equals target_k."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.size == 0:
        raise ValueError("no samples to evaluate")
    ks = worldmod.assign_subcluster(world, subject_token, context_token, samples)
    return float(np.mean(ks == target_k))


def _consistency_diversity(samples, world, subject_token, context_token, target_k):
    """(mean distance to the context-shifted target mean, mean pairwise distance
    among samples inside the target sub-cluster; 0.0 if fewer than 2 land there)."""
    subject = world.subject(subject_token)
    offset = world.context(context_token).offset
    target_mean = subject.subclusters[target_k].mean + offset
    consistency = float(np.mean(np.linalg.norm(samples - target_mean, axis=1)))
    ks = worldmod.assign_subcluster(world, subject_token, context_token, samples)
    inside = samples[ks == target_k]
    if inside.shape[0] < 2:
        return consistency, 0.0
    diff = inside[:, None, :] - inside[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=-1))
    iu = np.triu_indices(inside.shape[0], k=1)
    return consistency, float(np.mean(dist[iu]))


@dataclass(frozen=True)
class EvalRow:
    axis_value: str
    seed: int
    context: str
    capture: float
    consistency: float
    diversity: float


@dataclass(frozen=True)
class EvalReport:
    """Per-context capture/consistency/diversity, aggregated across seeds."""

    rows: tuple[EvalRow, ...]
    per_context: dict
    mean_capture: float
    n_samples: int
    seeds: tuple[int, ...]
    config: dict
    version: int = 1

    def to_json(self):
        return {
            "version": self.version,
            "mean_capture": self.mean_capture,
            "n_samples": self.n_samples,
            "seeds": list(self.seeds),
            "config": self.config,
            "per_context": self.per_context,
            "rows": [vars(r) for r in self.rows],
        }

    @staticmethod
    def from_json(obj):
        return EvalReport(
            rows=tuple(EvalRow(**r) for r in obj["rows"]),
            per_context=obj["per_context"],
            mean_capture=obj["mean_capture"],
            n_samples=int(obj["n_samples"]),
            seeds=tuple(obj["seeds"]),
            config=obj["config"],
            version=int(obj["version"]),
        )


def _aggregate(rows, n_samples, seeds, config) -> EvalReport:
    per_context = {}
    for r in rows:
        per_context.setdefault(r.context, []).append(r)
    summary = {}
    for ctx_token, ctx_rows in per_context.items():
        caps = np.array([r.capture for r in ctx_rows])
        summary[ctx_token] = {
            "capture_mean": float(np.mean(caps)),
            "capture_std": float(np.std(caps)),
            "consistency_mean": float(np.mean([r.consistency for r in ctx_rows])),
            "diversity_mean": float(np.mean([r.diversity for r in ctx_rows])),
        }
    mean_capture = float(np.mean([r.capture for r in rows]))
    return EvalReport(rows=tuple(rows), per_context=summary,
                      mean_capture=mean_capture, n_samples=n_samples,
                      seeds=tuple(seeds), config=config)


def evaluate(denoiser, proj, base_set, world, vocab, contexts, gcfg: GuidanceConfig,
             n_samples, seeds, sched, axis_value="") -> EvalReport:
    """Guided sampling per (context, seed); aggregates mean/std across seeds."""
    if n_samples < 1:
        raise ValueError(f"n_samples must be positive, got {n_samples}")
    subject_token, _ = tunemod.prompt_world_refs(world, base_set.prompt_tar)
    target_k = base_set.target_subcluster
    rows = []
    for ctx_token in contexts:
        prompt = semantics.subject_prompt(subject_token, ctx_token)
        for seed in seeds:
            res = infer.sample_consistent(denoiser, proj, base_set, prompt, gcfg,
                                          n_samples, seed, world, vocab, sched)
            cons, div = _consistency_diversity(res.z0, world, subject_token,
                                               ctx_token, target_k)
            rows.append(EvalRow(axis_value=axis_value, seed=seed, context=ctx_token,
                                capture=res.capture_rate, consistency=cons,
                                diversity=div))
    return _aggregate(rows, n_samples, seeds, gcfg.to_json())


def unguided_capture(denoiser, world, vocab, subject_token, context_token, target_k,
                     n_samples, seed, sched, steps=30, scale=7.5):
    """Plain-CFG baseline capture on the raw subject prompt."""
    prompt = semantics.subject_prompt(subject_token, context_token)
    emb = semantics.embed_prompt(vocab, prompt)
    cond = semantics.pool_condition(emb)
    c_empty = np.zeros(vocab.embed_dim)
    predict = lambda z, t: diffusion.cfg_predict(denoiser, z, t, cond, c_empty, scale)
    z0 = diffusion.sample_chains(predict, sched, steps, seed, n_samples,
                                 world.latent_dim)
    return capture_rate(z0, world, subject_token, context_token, target_k), z0


@dataclass(frozen=True)
class SweepSpec:
    axis: str           # v | eta1 | eta2 | window
    values: tuple
    repeats: int = 3    # seeds per value

    def __post_init__(self):
        if self.axis not in ("v", "eta1", "eta2", "window"):
            raise ValueError(f"unknown sweep axis {self.axis!r}")
        if not self.values:
            raise ValueError("sweep needs at least one value")
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")


# Window presets compared by the window axis: prefix windows and suffix windows.
WINDOW_PRESETS = ((1, 10), (1, 20), (1, 30), (11, 30), (21, 30))

ETA1_STANDARD = 7.5  # the eta2 axis holds eta1 - eta2 at this value


def apply_axis(gcfg: GuidanceConfig, axis: str, value) -> GuidanceConfig:
    if axis == "v":
        return replace(gcfg, v=float(value))
    if axis == "eta1":
        return replace(gcfg, eta1=float(value))
    if axis == "eta2":
        # Keep eta1 - eta2 fixed at the standard scale.
        return replace(gcfg, eta2=float(value), eta1=ETA1_STANDARD + float(value))
    if axis == "window":
        lo, hi = value
        return replace(gcfg, window=(int(lo), int(hi)))
    raise ValueError(f"unknown sweep axis {axis!r}")


def _axis_label(axis, value):
    if axis == "window":
        return f"{value[0]}-{value[1]}"
    return repr(float(value))


@dataclass(frozen=True)
class SweepTable:
    axis: str
    reports: dict  # axis label -> EvalReport

    def to_json(self):
        return {"version": 1, "axis": self.axis,
                "reports": {k: r.to_json() for k, r in self.reports.items()}}

    @staticmethod
    def from_json(obj):
        return SweepTable(axis=obj["axis"],
                          reports={k: EvalReport.from_json(r)
                                   for k, r in obj["reports"].items()})

    def mean_capture(self, label) -> float:
        return self.reports[label].mean_capture


@dataclass
class PipelineHandle:
    """Everything a sweep needs to rerun guided evaluation at new settings."""

    denoiser: object
    projector: object
    base_set: object
    world: object
    vocab: object
    sched: object
    gcfg: GuidanceConfig
    contexts: tuple
    n_samples: int = 200
    seeds: tuple = (0, 1, 2)


def sweep(spec: SweepSpec, pipeline: PipelineHandle) -> SweepTable:
    """Evaluate the pipeline at every axis value; eta2 keeps eta1-eta2 fixed."""
    reports = {}
    seeds = tuple(range(spec.repeats)) if pipeline.seeds is None \
        else tuple(pipeline.seeds[:spec.repeats])
    for value in spec.values:
        gcfg = apply_axis(pipeline.gcfg, spec.axis, value)
        label = _axis_label(spec.axis, value)
        reports[label] = evaluate(
            pipeline.denoiser, pipeline.projector, pipeline.base_set,
            pipeline.world, pipeline.vocab, pipeline.contexts, gcfg,
            pipeline.n_samples, seeds, pipeline.sched, axis_value=label)
    return SweepTable(axis=spec.axis, reports=reports)


# --- report emission -----------------------------------------------------------

CSV_COLUMNS = ("axis_value", "seed", "context", "capture", "consistency", "diversity")


def _report_rows(obj):
    if isinstance(obj, EvalReport):
        return list(obj.rows)
    if isinstance(obj, SweepTable):
        rows = []
        for report in obj.reports.values():
            rows.extend(report.rows)
        return rows
    raise ValueError(f"cannot emit report for {type(obj).__name__}")


def write_report(obj, path_base):
    """Write <base>.json (full fidelity) and <base>.csv (flat rows).

    Floats are written with repr formatting, which round-trips f64 exactly.
    Returns (json path, csv path).
    """
    json_path = f"{path_base}.json"
    csv_path = f"{path_base}.csv"
    try:
        with open(json_path, "w") as f:
            json.dump(obj.to_json(), f)
            f.write("\n")
        with open(csv_path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(CSV_COLUMNS)
            for r in _report_rows(obj):
                writer.writerow([r.axis_value, r.seed, r.context,
                                 repr(r.capture), repr(r.consistency),
                                 repr(r.diversity)])
    except OSError as e:
        raise OSError(f"failed writing report to {path_base!r}: {e}") from e
    return json_path, csv_path


def read_report(json_path):
    with open(json_path) as f:
        obj = json.load(f)
    if "axis" in obj:
        return SweepTable.from_json(obj)
    return EvalReport.from_json(obj)


# --- pair-world per-subject metrics ---------------------------------------------

def pair_block_capture(base_world, token_a, token_b, context_token, samples,
                       target_a, target_b):
    """Per-subject capture on a product world: assign each block independently."""
    samples = np.asarray(samples, dtype=np.float64)
    d = base_world.latent_dim
    ks_a = worldmod.assign_subcluster(base_world, token_a, context_token,
                                      samples[:, :d])
    ks_b = worldmod.assign_subcluster(base_world, token_b, context_token,
                                      samples[:, d:])
    return float(np.mean(ks_a == target_a)), float(np.mean(ks_b == target_b))


# --- scatter plot ----------------------------------------------------------------

def write_scatter_svg(path, points, assignments, title=""):
    """Minimal deterministic SVG scatter of 2-D samples colored by sub-cluster."""
    points = np.asarray(points, dtype=np.float64)[:, :2]
    colors = ("#4477aa", "#ee6677", "#228833", "#ccbb44", "#66ccee",
              "#aa3377", "#bbbbbb", "#000000")
    lo = points.min(axis=0) - 1.0
    hi = points.max(axis=0) + 1.0
    size = 480.0
    span = np.maximum(hi - lo, 1e-9)

    def sx(x):
        return 20.0 + (x - lo[0]) / span[0] * (size - 40.0)

    def sy(y):
        return size - 20.0 - (y - lo[1]) / span[1] * (size - 40.0)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size:.0f}" '
             f'height="{size:.0f}" viewBox="0 0 {size:.0f} {size:.0f}">']
    if title:
        parts.append(f'<text x="20" y="14" font-size="12">{title}</text>')
    for (x, y), k in zip(points, np.asarray(assignments)):
        color = colors[int(k) % len(colors)]
        parts.append(f'<circle cx="{sx(x):.2f}" cy="{sy(y):.2f}" r="2.5" '
                     f'fill="{color}" fill-opacity="0.7"/>')
    parts.append("</svg>")
    with open(path, "w") as f:
        f.write("\n".join(parts))
        f.write("\n")
