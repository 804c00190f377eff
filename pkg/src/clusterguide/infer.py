"""Cluster-guided inference.

Builds target/average semantic representations from the tuned projector and
evaluates the guided noise prediction: unconditional + eta1 * (target pull)
- eta2 * (average push) inside the guidance window, plain CFG outside it.
Degenerate settings take dedicated code paths so the algebraic reductions
(eta2=0, eta1=eta2=0, coinciding conditions) hold bit-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import diffusion, semantics, tune as tunemod, world as worldmod
from .semantics import Prompt, PromptEmbedding
from .tune import BaseSet, Projector


@dataclass(frozen=True)
class GuidanceConfig:
    eta1: float = 8.5
    eta2: float = 1.0
    v: float = 0.8
    window: tuple[int, int] = (1, 20)
    steps: int = 30
    fallback_scale: float = 7.5
    fallback_condition: str = "target"  # or "raw": use the unmodified prompt
    aver_as_empty: bool = False

    def __post_init__(self):
        lo, hi = self.window
        if not (1 <= lo <= hi <= self.steps):
            raise ValueError(f"window {self.window} must lie within [1, {self.steps}]")
        if self.eta1 < 0 or self.eta2 < 0:
            raise ValueError("guidance scales must be non-negative")
        if self.fallback_condition not in ("target", "raw"):
            raise ValueError(f"unknown fallback condition {self.fallback_condition!r}")

    def to_json(self):
        return {"eta1": self.eta1, "eta2": self.eta2, "v": self.v,
                "window": list(self.window), "steps": self.steps,
                "fallback_scale": self.fallback_scale,
                "fallback_condition": self.fallback_condition,
                "aver_as_empty": self.aver_as_empty}

    @staticmethod
    def from_json(obj):
        obj = dict(obj)
        obj["window"] = tuple(obj["window"])
        return GuidanceConfig(**obj)


@dataclass(frozen=True)
class TargetContext:
    """Prompt-specific semantic offsets plus the features to recompute them."""

    c_delta_tar: np.ndarray    # (L, m)
    c_delta_aver: np.ndarray   # (L, m)
    h_tar: np.ndarray
    aux_features: np.ndarray


def build_representations(proj: Projector, base_set: BaseSet,
                          c_sub: PromptEmbedding) -> TargetContext:
    """Target offset from h_tar, average offset over the N-1 auxiliary features."""
    if base_set.target_index is None:
        raise ValueError("base set has no target selected")
    n_base = len(c_sub.base_indices)
    if n_base != proj.spec.n_offsets:
        raise ValueError(
            f"prompt has {n_base} base word(s) but the projector was tuned for "
            f"{proj.spec.n_offsets}; subjects cannot be added after tuning")
    h_tar = base_set.h[base_set.target_index]
    aux = base_set.h[base_set.aux_indices]
    c_tar = tunemod.projector_forward(proj, h_tar, c_sub)
    c_aver = tunemod.average_condition(proj, aux, c_sub)
    return TargetContext(c_delta_tar=c_tar, c_delta_aver=c_aver,
                         h_tar=h_tar, aux_features=aux)


def _pooled_conditions(ctx: TargetContext, c_sub: PromptEmbedding, gcfg: GuidanceConfig):
    cond_raw = semantics.pool_condition(c_sub)
    cond_tar = semantics.pool_condition(
        semantics.offset_base(c_sub, ctx.c_delta_tar, gcfg.v))
    cond_aver = semantics.pool_condition(
        semantics.offset_base(c_sub, ctx.c_delta_aver, gcfg.v))
    c_empty = np.zeros(cond_raw.shape[0])
    return cond_raw, cond_tar, cond_aver, c_empty


def _guided_combine(denoiser, z, t, step_index, conds, gcfg: GuidanceConfig):
    """One guided prediction given precomputed pooled conditions."""
    cond_raw, cond_tar, cond_aver, c_empty = conds
    lo, hi = gcfg.window
    if not lo <= step_index <= hi:
        cond = cond_tar if gcfg.fallback_condition == "target" else cond_raw
        return diffusion.cfg_predict(denoiser, z, t, cond, c_empty, gcfg.fallback_scale)
    if gcfg.aver_as_empty:
        # The average condition stands in for the empty one; the eta2 term
        # cancels identically.
        return diffusion.cfg_predict(denoiser, z, t, cond_tar, cond_aver, gcfg.eta1)
    if gcfg.eta1 == 0.0 and gcfg.eta2 == 0.0:
        return denoiser.predict(z, t, c_empty)
    if gcfg.eta2 == 0.0:
        # Fast path: the average branch is never evaluated.
        return diffusion.cfg_predict(denoiser, z, t, cond_tar, c_empty, gcfg.eta1)
    if np.array_equal(cond_tar, cond_aver):
        # Coinciding conditions (e.g. v = 0): eta1*D - eta2*D collapses to plain
        # CFG at scale eta1 - eta2, evaluated as such so the identity is bit-exact.
        return diffusion.cfg_predict(denoiser, z, t, cond_tar, c_empty,
                                     gcfg.eta1 - gcfg.eta2)
    e0 = denoiser.predict(z, t, c_empty)
    e_tar = denoiser.predict(z, t, cond_tar)
    e_aver = denoiser.predict(z, t, cond_aver)
    return e0 + gcfg.eta1 * (e_tar - e0) - gcfg.eta2 * (e_aver - e0)


def cluster_guided_predict(denoiser, proj, ctx: TargetContext, z, t,
                           c_sub: PromptEmbedding, gcfg: GuidanceConfig, step_index):
    """Guided noise prediction at one sampling step (1-based step_index)."""
    if not 1 <= step_index <= gcfg.steps:
        raise ValueError(f"step index {step_index} out of range 1..{gcfg.steps}")
    conds = _pooled_conditions(ctx, c_sub, gcfg)
    return _guided_combine(denoiser, z, t, step_index, conds, gcfg)


def make_guided_predictor(denoiser, ctx: TargetContext, c_sub: PromptEmbedding,
                          gcfg: GuidanceConfig, sched):
    """predict_fn(z, t) for the sampler; step indices derived from the time grid."""
    conds = _pooled_conditions(ctx, c_sub, gcfg)
    times = diffusion.sampling_times(sched, gcfg.steps)
    step_of = {int(times[i]): i + 1 for i in range(gcfg.steps)}

    def predict(z, t):
        return _guided_combine(denoiser, z, t, step_of[int(t)], conds, gcfg)

    return predict


@dataclass(frozen=True)
class InferenceResult:
    prompt: Prompt
    gcfg: GuidanceConfig
    z0: np.ndarray           # (n, d)
    subclusters: np.ndarray  # (n,)
    target_subcluster: int
    capture_rate: float

    def to_json(self):
        return {
            "prompt": {"tokens": list(self.prompt.tokens),
                       "base_indices": list(self.prompt.base_indices)},
            "gcfg": self.gcfg.to_json(),
            "samples": [{"z0": row.tolist(), "subcluster": int(k)}
                        for row, k in zip(self.z0, self.subclusters)],
            "target_subcluster": self.target_subcluster,
            "capture_rate": self.capture_rate,
        }


def sample_consistent(denoiser, proj, base_set: BaseSet, prompt_sub: Prompt,
                      gcfg: GuidanceConfig, n_samples, seed, world, vocab,
                      sched) -> InferenceResult:
    """n_samples guided chains plus world sub-cluster assignments."""
    if not prompt_sub.base_indices:
        raise ValueError("subject prompt has no base word")
    c_sub = semantics.embed_prompt(vocab, prompt_sub)
    ctx = build_representations(proj, base_set, c_sub)
    predict = make_guided_predictor(denoiser, ctx, c_sub, gcfg, sched)
    z0 = diffusion.sample_chains(predict, sched, gcfg.steps, seed, n_samples,
                                 world.latent_dim)
    subject_token, context_token = tunemod.prompt_world_refs(world, prompt_sub)
    ks = worldmod.assign_subcluster(world, subject_token, context_token, z0)
    target_k = base_set.target_subcluster
    return InferenceResult(prompt=prompt_sub, gcfg=gcfg, z0=z0,
                           subclusters=np.asarray(ks),
                           target_subcluster=target_k,
                           capture_rate=float(np.mean(ks == target_k)))


# --- multi-subject -----------------------------------------------------------

def combine_prompts(prompts: list[Prompt]) -> Prompt:
    """Join single-subject prompts: all base words first, then the first
    prompt's non-base tokens."""
    if len(prompts) < 2:
        raise ValueError("need at least two subject prompts to combine")
    base_words = []
    for p in prompts:
        if not p.base_indices:
            raise ValueError(f"prompt {p.tokens} has no base word")
        base_words.extend(p.tokens[i] for i in p.base_indices)
    if len(set(base_words)) != len(base_words):
        raise ValueError(f"overlapping base words in {base_words}")
    first = prompts[0]
    rest = [tok for i, tok in enumerate(first.tokens) if i not in first.base_indices]
    return Prompt(tokens=(*base_words, *rest),
                  base_indices=tuple(range(len(base_words))))


@dataclass(frozen=True)
class Variant1Pipeline:
    projector: Projector
    base_set: BaseSet
    prompt: Prompt


def multi_subject_variant1(denoiser, vocab, world, prompts: list[Prompt],
                           tune_cfg, sched, n_base=11, base_seed=0,
                           target_index=None, steps=30,
                           guidance_scale=7.5) -> tuple[Variant1Pipeline, np.ndarray]:
    """Joint tuning: one combined prompt, one projector with one offset per base word.

    With a single prompt this reduces to the single-subject pipeline (same code
    path). Adding subjects after tuning is rejected at inference because the
    projector's offset count is fixed.
    """
    if len(prompts) == 1:
        combined = prompts[0]
    else:
        combined = combine_prompts(prompts)
    base_set = tunemod.generate_base_set(denoiser, vocab, world, combined, n_base,
                                         sched, base_seed, steps=steps,
                                         guidance_scale=guidance_scale)
    if target_index is None:
        import clusterguide.rng as rngmod
        base_set = tunemod.choose_target(
            base_set, rng=rngmod.stream(base_seed, rngmod.BASE))
    else:
        base_set = tunemod.choose_target(base_set, index=target_index)
    proj, history = tunemod.tune(denoiser, vocab, base_set,
                                 semantics.TUNING_TEMPLATES, tune_cfg, sched)
    return Variant1Pipeline(projector=proj, base_set=base_set, prompt=combined), history


def multi_subject_variant2(denoiser, projectors, prompt: Prompt,
                           gcfg: GuidanceConfig, n_samples, seed, world, vocab,
                           sched):
    """Token-scoped inference with one independently tuned projector per base word.

    projectors is a list aligned with prompt.base_indices of (Projector,
    BaseSet) pairs; an entry of None leaves that base word unmodified (the
    independence ablation). Projectors tuned separately can be added
    incrementally by growing the list.
    """
    n_base = len(prompt.base_indices)
    if len(projectors) != n_base:
        raise ValueError(f"{len(projectors)} projector(s) for {n_base} base word(s)")
    c_sub = semantics.embed_prompt(vocab, prompt)
    rows_tar, rows_aver = [], []
    for entry in projectors:
        if entry is None:
            rows_tar.append(None)
            rows_aver.append(None)
            continue
        proj_j, base_set_j = entry
        if proj_j.spec.n_offsets != 1:
            raise ValueError("variant-2 projectors must be single-offset")
        h_tar = base_set_j.h[base_set_j.target_index]
        aux = base_set_j.h[base_set_j.aux_indices]
        rows_tar.append(tunemod.projector_forward(proj_j, h_tar, c_sub)[0])
        rows_aver.append(tunemod.average_condition(proj_j, aux, c_sub)[0])
    cond_raw = semantics.pool_condition(c_sub)
    cond_tar = semantics.pool_condition(semantics.offset_base(c_sub, rows_tar, gcfg.v))
    cond_aver = semantics.pool_condition(semantics.offset_base(c_sub, rows_aver, gcfg.v))
    conds = (cond_raw, cond_tar, cond_aver, np.zeros(vocab.embed_dim))
    times = diffusion.sampling_times(sched, gcfg.steps)
    step_of = {int(times[i]): i + 1 for i in range(gcfg.steps)}
    predict = lambda z, t: _guided_combine(denoiser, z, t, step_of[int(t)], conds, gcfg)
    return diffusion.sample_chains(predict, sched, gcfg.steps, seed, n_samples,
                                   world.latent_dim)
