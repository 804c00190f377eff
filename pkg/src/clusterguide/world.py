"""Ground-truth synthetic latent world with closed-form scores.

Each subject is a mixture of isotropic Gaussian identity sub-clusters;
contexts translate every sub-cluster mean by an offset. The forward noising
process maps a Gaussian mixture to a Gaussian mixture (means scaled by
sqrt(alpha_bar_t), variances alpha_bar_t*var + (1-alpha_bar_t)), so
time-marginal densities, scores, cluster posteriors and the exact
cluster-guided score are all available in closed form.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp, softmax

from . import rng as rngmod


@dataclass(frozen=True)
class SubClusterSpec:
    mean: np.ndarray
    weight: float
    var: float

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=np.float64))
        if self.weight <= 0:
            raise ValueError(f"sub-cluster weight must be positive, got {self.weight}")
        if self.var <= 0:
            raise ValueError(f"sub-cluster variance must be positive, got {self.var}")


@dataclass(frozen=True)
class SubjectSpec:
    token: str
    subclusters: tuple[SubClusterSpec, ...]

    def __post_init__(self):
        object.__setattr__(self, "subclusters", tuple(self.subclusters))
        total = sum(s.weight for s in self.subclusters)
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"sub-cluster weights of {self.token!r} sum to {total}, not 1")


@dataclass(frozen=True)
class ContextSpec:
    token: str
    offset: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "offset", np.asarray(self.offset, dtype=np.float64))


@dataclass(frozen=True)
class WorldSpec:
    latent_dim: int
    subjects: tuple[SubjectSpec, ...]
    contexts: tuple[ContextSpec, ...]
    seed: int

    def __post_init__(self):
        object.__setattr__(self, "subjects", tuple(self.subjects))
        object.__setattr__(self, "contexts", tuple(self.contexts))
        for s in self.subjects:
            for sc in s.subclusters:
                if sc.mean.shape != (self.latent_dim,):
                    raise ValueError(
                        f"sub-cluster mean of {s.token!r} has shape {sc.mean.shape}, "
                        f"world dimension is {self.latent_dim}")
        for c in self.contexts:
            if c.offset.shape != (self.latent_dim,):
                raise ValueError(f"context {c.token!r} offset has shape {c.offset.shape}, "
                                 f"world dimension is {self.latent_dim}")

    def subject(self, token: str) -> SubjectSpec:
        for s in self.subjects:
            if s.token == token:
                return s
        raise ValueError(f"unknown subject token {token!r}")

    def context(self, token: str) -> ContextSpec:
        for c in self.contexts:
            if c.token == token:
                return c
        raise ValueError(f"unknown context token {token!r}")

    @property
    def subject_tokens(self):
        return [s.token for s in self.subjects]

    @property
    def context_tokens(self):
        return [c.token for c in self.contexts]


NULL_CONTEXT = "plain"
DEFAULT_SUBCLUSTER_VAR = 0.25  # sigma_sub = 0.5
DEFAULT_RING_RADIUS = 4.0


def make_default_world(seed: int = 0) -> WorldSpec:
    """2 subjects x 4 equal-weight sub-clusters on a radius-4 ring, 5 contexts."""
    g = rngmod.stream(seed, rngmod.WORLD)
    centers = [np.array([-6.0, 0.0]), np.array([6.0, 0.0])]
    subjects = []
    for token, center in zip(("subject_a", "subject_b"), centers):
        phase = g.uniform(0.0, 2.0 * np.pi)
        subs = []
        for k in range(4):
            angle = phase + k * (np.pi / 2.0)
            mean = center + DEFAULT_RING_RADIUS * np.array([np.cos(angle), np.sin(angle)])
            subs.append(SubClusterSpec(mean=mean, weight=0.25, var=DEFAULT_SUBCLUSTER_VAR))
        subjects.append(SubjectSpec(token=token, subclusters=tuple(subs)))
    contexts = [ContextSpec(token=NULL_CONTEXT, offset=np.zeros(2))]
    for token in ("forest", "city", "night", "river"):
        direction = g.uniform(0.0, 2.0 * np.pi)
        norm = g.uniform(0.5, 1.0)
        contexts.append(ContextSpec(
            token=token, offset=norm * np.array([np.cos(direction), np.sin(direction)])))
    return WorldSpec(latent_dim=2, subjects=tuple(subjects), contexts=tuple(contexts),
                     seed=seed)


def make_pair_world(base: WorldSpec, token_a: str, token_b: str) -> WorldSpec:
    """Product world: block-concatenated subjects, one combined '+'-joined subject.

    The combined subject has K_a*K_b sub-clusters with concatenated means and
    product weights; context offsets are the base offsets repeated per block.
    Per-block assignment against the factor subjects recovers per-subject
    capture rates.
    """
    sa, sb = base.subject(token_a), base.subject(token_b)
    subs = []
    for ca in sa.subclusters:
        for cb in sb.subclusters:
            if abs(ca.var - cb.var) > 1e-12:
                raise ValueError("pair world requires equal sub-cluster variances")
            subs.append(SubClusterSpec(
                mean=np.concatenate([ca.mean, cb.mean]),
                weight=ca.weight * cb.weight,
                var=ca.var,
            ))
    contexts = [ContextSpec(token=c.token, offset=np.concatenate([c.offset, c.offset]))
                for c in base.contexts]
    pair = SubjectSpec(token=f"{token_a}+{token_b}", subclusters=tuple(subs))
    return WorldSpec(latent_dim=2 * base.latent_dim, subjects=(pair,),
                     contexts=tuple(contexts), seed=base.seed)


def _components_t(world, subject_token, context_token, t, sched):
    """Time-t mixture parameters: (means (K,d), variances (K,), log-weights (K,))."""
    subject = world.subject(subject_token)
    offset = world.context(context_token).offset
    ab = float(sched.alpha_bar[t])
    means = np.stack([np.sqrt(ab) * (sc.mean + offset) for sc in subject.subclusters])
    variances = np.array([ab * sc.var + (1.0 - ab) for sc in subject.subclusters])
    logw = np.log(np.array([sc.weight for sc in subject.subclusters]))
    return means, variances, logw


def _component_logpdfs(world, subject_token, context_token, z, t, sched):
    """log w_k + log N(z; m_k, v_k I) for every component. z (..., d) -> (..., K)."""
    means, variances, logw = _components_t(world, subject_token, context_token, t, sched)
    z = np.asarray(z, dtype=np.float64)
    d = world.latent_dim
    diff = z[..., None, :] - means  # (..., K, d)
    sq = np.sum(diff * diff, axis=-1)  # (..., K)
    log_norm = -0.5 * d * np.log(2.0 * np.pi * variances)
    return logw + log_norm - 0.5 * sq / variances


def log_density_t(world, subject_token, context_token, z, t, sched):
    """Log of the time-t marginal mixture density. z (..., d) -> (...)."""
    _check_t(t, sched)
    return logsumexp(_component_logpdfs(world, subject_token, context_token, z, t, sched),
                     axis=-1)


def score_t(world, subject_token, context_token, z, t, sched):
    """Exact gradient of log_density_t w.r.t. z. z (..., d) -> (..., d)."""
    _check_t(t, sched)
    means, variances, _ = _components_t(world, subject_token, context_token, t, sched)
    z = np.asarray(z, dtype=np.float64)
    logp = _component_logpdfs(world, subject_token, context_token, z, t, sched)
    post = softmax(logp, axis=-1)  # (..., K)
    comp_scores = -(z[..., None, :] - means) / variances[..., :, None]  # (..., K, d)
    return np.sum(post[..., None] * comp_scores, axis=-2)


def cluster_posterior_t(world, subject_token, context_token, z, t, sched):
    """p(sub-cluster | z_t): softmax of per-component log densities + log weights."""
    _check_t(t, sched)
    logp = _component_logpdfs(world, subject_token, context_token, z, t, sched)
    return softmax(logp, axis=-1)


def oracle_guided_score(world, subject_token, context_token, z, t, target_k,
                        eta1, eta2, sched):
    """Exact cluster-guided noise prediction with a perfect model.

    Returns -sigma_t * [grad log p_t(z) + eta1 * grad log p_t(S_tar|z)
    - eta2 * sum_{i != tar} grad log p_t(S_i|z)], with every gradient analytic.
    The eta1=eta2=0 and (eta1=1, eta2=0) cases take dedicated code paths so the
    degenerate-guidance and Bayes-identity reductions hold bit-exactly.
    """
    _check_t(t, sched)
    means, variances, _ = _components_t(world, subject_token, context_token, t, sched)
    n_comp = means.shape[0]
    if not 0 <= target_k < n_comp:
        raise ValueError(f"target sub-cluster {target_k} out of range 0..{n_comp - 1}")
    sigma = float(sched.sigma[t])
    z = np.asarray(z, dtype=np.float64)
    comp_scores = -(z[..., None, :] - means) / variances[..., :, None]  # (..., K, d)
    if eta1 == 1.0 and eta2 == 0.0:
        # Bayes identity: the guided score is the target component's own score.
        return -sigma * comp_scores[..., target_k, :]
    score = score_t(world, subject_token, context_token, z, t, sched)
    if eta1 == 0.0 and eta2 == 0.0:
        return -sigma * score
    # grad log p(S_k|z) = component score - mixture score
    post_grads = comp_scores - score[..., None, :]
    aux = np.sum(np.delete(post_grads, target_k, axis=-2), axis=-2)
    guided = score + eta1 * post_grads[..., target_k, :] - eta2 * aux
    return -sigma * guided


def assign_subcluster(world, subject_token, context_token, z0):
    """Argmax data-space cluster posterior; ties break to the lowest index.

    z0 (..., d) -> int indices (...,).
    """
    subject = world.subject(subject_token)
    offset = world.context(context_token).offset
    z0 = np.asarray(z0, dtype=np.float64)
    means = np.stack([sc.mean + offset for sc in subject.subclusters])
    variances = np.array([sc.var for sc in subject.subclusters])
    logw = np.log(np.array([sc.weight for sc in subject.subclusters]))
    diff = z0[..., None, :] - means
    sq = np.sum(diff * diff, axis=-1)
    d = world.latent_dim
    logp = logw - 0.5 * d * np.log(2.0 * np.pi * variances) - 0.5 * sq / variances
    return np.argmax(logp, axis=-1)


def sample_world(world, subject_token, context_token, rng, subcluster=None):
    """One draw: pick k by weight (or the forced k), z0 ~ N(mean_k + offset, var_k I)."""
    subject = world.subject(subject_token)
    offset = world.context(context_token).offset
    weights = np.array([sc.weight for sc in subject.subclusters])
    if subcluster is None:
        k = int(rng.choice(len(weights), p=weights))
    else:
        if not 0 <= subcluster < len(weights):
            raise ValueError(f"sub-cluster {subcluster} out of range")
        k = int(subcluster)
    sc = subject.subclusters[k]
    z0 = sc.mean + offset + np.sqrt(sc.var) * rng.standard_normal(world.latent_dim)
    return z0, k


def sample_world_batch(world, subject_idx, context_idx, rng):
    """Vectorized draws for training. subject_idx, context_idx (B,) -> (Z (B,d), ks (B,))."""
    subject_idx = np.asarray(subject_idx)
    context_idx = np.asarray(context_idx)
    n = subject_idx.shape[0]
    d = world.latent_dim
    all_means = np.stack([np.stack([sc.mean for sc in s.subclusters])
                          for s in world.subjects])  # (S, K, d)
    all_vars = np.stack([np.array([sc.var for sc in s.subclusters])
                         for s in world.subjects])  # (S, K)
    all_weights = np.stack([np.array([sc.weight for sc in s.subclusters])
                            for s in world.subjects])  # (S, K)
    offsets = np.stack([c.offset for c in world.contexts])  # (C, d)
    cum = np.cumsum(all_weights[subject_idx], axis=1)  # (B, K)
    u = rng.random(n)
    ks = np.sum(u[:, None] >= cum, axis=1)
    means = all_means[subject_idx, ks]
    stds = np.sqrt(all_vars[subject_idx, ks])
    z = means + offsets[context_idx] + stds[:, None] * rng.standard_normal((n, d))
    return z, ks


def _check_t(t, sched):
    if not 0 <= t <= sched.T:
        raise ValueError(f"time step {t} out of range 0..{sched.T}")


# --- serialization -----------------------------------------------------------

def world_to_json(world: WorldSpec) -> dict:
    return {
        "latent_dim": world.latent_dim,
        "subjects": [
            {"token": s.token,
             "subclusters": [{"mean": sc.mean.tolist(), "weight": sc.weight,
                              "var": sc.var} for sc in s.subclusters]}
            for s in world.subjects
        ],
        "contexts": [{"token": c.token, "offset": c.offset.tolist()}
                     for c in world.contexts],
        "seed": world.seed,
    }


def world_from_json(obj: dict) -> WorldSpec:
    for field_name in ("latent_dim", "subjects", "contexts", "seed"):
        if field_name not in obj:
            raise ValueError(f"world spec missing field {field_name!r}")
    subjects = tuple(
        SubjectSpec(
            token=s["token"],
            subclusters=tuple(SubClusterSpec(mean=sc["mean"], weight=sc["weight"],
                                             var=sc["var"])
                              for sc in s["subclusters"]),
        )
        for s in obj["subjects"]
    )
    contexts = tuple(ContextSpec(token=c["token"], offset=c["offset"])
                     for c in obj["contexts"])
    return WorldSpec(latent_dim=int(obj["latent_dim"]), subjects=subjects,
                     contexts=contexts, seed=int(obj["seed"]))


def save_world(path, world: WorldSpec):
    with open(path, "w") as f:
        json.dump(world_to_json(world), f)
        f.write("\n")


def load_world(path) -> WorldSpec:
    with open(path) as f:
        return world_from_json(json.load(f))
