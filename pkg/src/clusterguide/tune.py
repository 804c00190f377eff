"""One-shot projector tuning against a frozen denoiser.

Base-set generation captures each sample's low-noise feature vector; a target
is chosen (the rest become auxiliaries); the projector maps (feature, prompt
embedding) to a semantic offset for the base word; and the tuning loop
minimizes the target + auxiliary + average-condition denoising losses with
gradients flowing only into the projector.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import diffusion, numcore, rng as rngmod, semantics, world as worldmod
from .errors import NumericError
from .numcore import silu, silu_grad
from .semantics import Prompt, PromptEmbedding

_BN_EPS = 1e-5


# --- base set -----------------------------------------------------------------

@dataclass(frozen=True)
class BaseSet:
    """N generated proposals with their features and (evaluation-only) sub-clusters."""

    z0: np.ndarray            # (N, d)
    h: np.ndarray             # (N, F)
    subclusters: np.ndarray   # (N,) — recorded via the world, never used by tuning
    prompt_tar: Prompt
    feature_time: int         # schedule time at which h was computed
    guidance_scale: float
    seed: int
    target_index: int | None = None

    @property
    def n(self) -> int:
        return self.z0.shape[0]

    @property
    def aux_indices(self) -> np.ndarray:
        if self.target_index is None:
            raise ValueError("base set has no target selected")
        return np.array([i for i in range(self.n) if i != self.target_index])

    @property
    def target_subcluster(self) -> int:
        return int(self.subclusters[self.target_index])


def prompt_world_refs(world, prompt: Prompt):
    """(subject token, context token) the prompt refers to in the world.

    The subject is the '+'-join of the base-indexed tokens; the context is the
    first non-base token that names a world context, else the null context.
    """
    base_words = [prompt.tokens[i] for i in prompt.base_indices]
    subject_token = "+".join(base_words)
    world.subject(subject_token)  # validates
    context_token = worldmod.NULL_CONTEXT
    context_names = set(world.context_tokens)
    for i, tok in enumerate(prompt.tokens):
        if i not in prompt.base_indices and tok in context_names:
            context_token = tok
            break
    return subject_token, context_token


def generate_base_set(denoiser, vocab, world, prompt_tar: Prompt, n, sched, seed,
                      steps=30, guidance_scale=7.5) -> BaseSet:
    """n independent CFG samples plus features at the smallest-noise grid time.

    The feature vector is recomputed from the stored z0 at the smallest
    positive time of the sampling grid, so stored features are bit-identical
    to a later recomputation.
    """
    if n < 2:
        raise ValueError(f"base set needs at least 2 samples, got {n}")
    if not prompt_tar.base_indices:
        raise ValueError("target prompt has no base word")
    emb = semantics.embed_prompt(vocab, prompt_tar)
    cond = semantics.pool_condition(emb)
    c_empty = np.zeros(vocab.embed_dim)
    predict = lambda z, t: diffusion.cfg_predict(denoiser, z, t, cond, c_empty,
                                                 guidance_scale)
    z0 = diffusion.sample_chains(predict, sched, steps, seed, n, world.latent_dim)
    t_feat = int(diffusion.sampling_times(sched, steps)[-2])
    h = denoiser.features(z0, t_feat, cond)
    subject_token, context_token = prompt_world_refs(world, prompt_tar)
    ks = worldmod.assign_subcluster(world, subject_token, context_token, z0)
    return BaseSet(z0=z0, h=h, subclusters=np.asarray(ks), prompt_tar=prompt_tar,
                   feature_time=t_feat, guidance_scale=guidance_scale, seed=seed)


def choose_target(base_set: BaseSet, index=None, rng=None) -> BaseSet:
    """Fix the target proposal; the remaining N-1 entries become auxiliaries."""
    if index is None:
        if rng is None:
            raise ValueError("either an explicit index or an rng is required")
        index = int(rng.integers(0, base_set.n))
    if not 0 <= index < base_set.n:
        raise ValueError(f"target index {index} out of range 0..{base_set.n - 1}")
    return replace(base_set, target_index=int(index))


@dataclass(frozen=True)
class AugmentedTarget:
    """M jittered copies of the target latent, all sharing the target feature."""

    z: np.ndarray  # (M, d)
    h: np.ndarray  # (F,)


def augment_target(base_set: BaseSet, m, sigma_aug, rng) -> AugmentedTarget:
    if m < 1:
        raise ValueError(f"need at least one augmentation, got {m}")
    if base_set.target_index is None:
        raise ValueError("base set has no target selected")
    z_tar = base_set.z0[base_set.target_index]
    jitter = sigma_aug * rng.standard_normal((m, z_tar.shape[0]))
    return AugmentedTarget(z=z_tar + jitter, h=base_set.h[base_set.target_index])


# --- projector ----------------------------------------------------------------

@dataclass(frozen=True)
class ProjectorSpec:
    feature_dim: int
    embed_dim: int
    width: int = 64
    blocks: int = 5
    n_offsets: int = 1

    def to_json(self):
        return {"feature_dim": self.feature_dim, "embed_dim": self.embed_dim,
                "width": self.width, "blocks": self.blocks,
                "n_offsets": self.n_offsets}

    @staticmethod
    def from_json(obj):
        return ProjectorSpec(**obj)


@dataclass
class Projector:
    """Residual feature network with prompt-conditioned normalization.

    concat(h, pooled c) -> input linear -> residual blocks -> batch-normalized
    features scaled/shifted by an affine map of the pooled prompt -> linear to
    n_offsets stacked semantic offsets. The output layer starts at zero so
    tuning begins as a no-op on the prompt.
    """

    spec: ProjectorSpec
    params: dict
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    use_batch_norm: bool = True


def make_projector(feature_dim, embed_dim, width=64, blocks=5, n_offsets=1,
                   seed=0, use_batch_norm=True) -> Projector:
    spec = ProjectorSpec(feature_dim=feature_dim, embed_dim=embed_dim, width=width,
                         blocks=blocks, n_offsets=n_offsets)
    g = rngmod.stream(seed, rngmod.INIT, 1)

    def uni(fan_in, fan_out):
        a = np.sqrt(6.0 / (fan_in + fan_out))
        return g.uniform(-a, a, size=(fan_in, fan_out))

    params = {"Win": uni(feature_dim + embed_dim, width), "bin": np.zeros(width)}
    for i in range(blocks):
        params[f"Wres{i}"] = uni(width, width)
        params[f"bres{i}"] = np.zeros(width)
    params["Wgam"] = uni(embed_dim, width)
    params["bgam"] = np.ones(width)
    params["Wbet"] = uni(embed_dim, width)
    params["bbet"] = np.zeros(width)
    params["Wout"] = np.zeros((width, n_offsets * embed_dim))
    params["bout"] = np.zeros(n_offsets * embed_dim)
    return Projector(spec=spec, params=params,
                     running_mean=np.zeros(width), running_var=np.ones(width),
                     use_batch_norm=use_batch_norm)


def _projector_forward_batch(proj: Projector, feats, pooled_c, stats=None,
                             train=False):
    """Batched forward. feats (B, F), pooled_c (m,) -> (out (B, L, m), cache).

    train=True with batch norm enabled computes statistics across the batch
    (and reports them in the cache); otherwise `stats` or the frozen running
    statistics are used.
    """
    spec = proj.spec
    p = proj.params
    feats = np.atleast_2d(np.asarray(feats, dtype=np.float64))
    if feats.shape[1] != spec.feature_dim:
        raise ValueError(f"feature width {feats.shape[1]} != {spec.feature_dim}")
    pooled_c = np.asarray(pooled_c, dtype=np.float64)
    n = feats.shape[0]
    u = np.concatenate([feats, np.tile(pooled_c, (n, 1))], axis=1)
    x = u @ p["Win"] + p["bin"]
    block_in = []
    for i in range(spec.blocks):
        block_in.append(x)
        x = x + silu(x) @ p[f"Wres{i}"] + p[f"bres{i}"]
    batch_mode = train and proj.use_batch_norm and n > 1
    if batch_mode:
        mean = x.mean(axis=0)
        var = x.var(axis=0)
    elif stats is not None:
        mean, var = stats
    else:
        mean, var = proj.running_mean, proj.running_var
    std = np.sqrt(var + _BN_EPS)
    xhat = (x - mean) / std
    gamma = pooled_c @ p["Wgam"] + p["bgam"]
    beta = pooled_c @ p["Wbet"] + p["bbet"]
    y = gamma * xhat + beta
    out = y @ p["Wout"] + p["bout"]
    cache = {"u": u, "block_in": block_in, "x": x, "xhat": xhat, "std": std,
             "gamma": gamma, "y": y, "pooled_c": pooled_c,
             "batch_mode": batch_mode, "mean": mean, "var": var}
    return out.reshape(n, spec.n_offsets, spec.embed_dim), cache


def _projector_backward_batch(proj: Projector, cache, upstream):
    """Gradients of sum(upstream * out) w.r.t. projector parameters."""
    spec = proj.spec
    p = proj.params
    n = cache["u"].shape[0]
    g_out = np.asarray(upstream, dtype=np.float64).reshape(n, -1)
    grads = {}
    grads["Wout"] = cache["y"].T @ g_out
    grads["bout"] = g_out.sum(axis=0)
    gy = g_out @ p["Wout"].T
    d_gamma = (gy * cache["xhat"]).sum(axis=0)
    d_beta = gy.sum(axis=0)
    pooled_c = cache["pooled_c"]
    grads["Wgam"] = np.outer(pooled_c, d_gamma)
    grads["bgam"] = d_gamma
    grads["Wbet"] = np.outer(pooled_c, d_beta)
    grads["bbet"] = d_beta
    gxhat = gy * cache["gamma"]
    if cache["batch_mode"]:
        xhat = cache["xhat"]
        gx = (gxhat - gxhat.mean(axis=0)
              - xhat * (gxhat * xhat).mean(axis=0)) / cache["std"]
    else:
        gx = gxhat / cache["std"]
    for i in range(spec.blocks - 1, -1, -1):
        x_in = cache["block_in"][i]
        grads[f"Wres{i}"] = silu(x_in).T @ gx
        grads[f"bres{i}"] = gx.sum(axis=0)
        gx = gx + (gx @ p[f"Wres{i}"].T) * silu_grad(x_in)
    grads["Win"] = cache["u"].T @ gx
    grads["bin"] = gx.sum(axis=0)
    return grads


def projector_forward(proj: Projector, h, c_emb: PromptEmbedding, batch_stats=None):
    """Single-sample semantic offset c_delta, shape (n_offsets, embed_dim).

    Uses the supplied batch statistics, else the frozen running statistics
    (inference mode).
    """
    pooled = semantics.pool_condition(c_emb)
    out, _ = _projector_forward_batch(proj, np.asarray(h)[None, :], pooled,
                                      stats=batch_stats, train=False)
    return out[0]


def average_condition(proj: Projector, aux_features, c_emb: PromptEmbedding,
                      batch_stats=None):
    """Mean projector output over the auxiliary features."""
    aux_features = np.atleast_2d(np.asarray(aux_features, dtype=np.float64))
    if aux_features.shape[0] == 0:
        raise ValueError("auxiliary feature list is empty")
    pooled = semantics.pool_condition(c_emb)
    out, _ = _projector_forward_batch(proj, aux_features, pooled,
                                      stats=batch_stats, train=False)
    return out.mean(axis=0)


# --- tuning losses --------------------------------------------------------------

@dataclass(frozen=True)
class TuneConfig:
    k_aux: int = 3
    m_aug: int = 2
    lam1: float = 0.5
    lam2: float = 0.2
    max_steps: int = 3000
    plateau_patience: int = 200
    plateau_tol: float = 1e-4
    ma_window: int = 50
    sigma_aug: float = 0.05  # 0.1 * default sub-cluster sigma
    lr: float = 1e-4
    weight_decay: float = 0.01
    width: int = 64
    blocks: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.k_aux < 1:
            raise ValueError(f"k_aux must be >= 1, got {self.k_aux}")
        if self.lam1 < 0 or self.lam2 < 0:
            raise ValueError("loss weights must be non-negative")

    def to_json(self):
        return {k: getattr(self, k) for k in (
            "k_aux", "m_aug", "lam1", "lam2", "max_steps", "plateau_patience",
            "plateau_tol", "ma_window", "sigma_aug", "lr", "weight_decay",
            "width", "blocks", "seed")}


@dataclass(frozen=True)
class TuneDraws:
    """Frozen per-step randomness so losses are reproducible and FD-checkable."""

    t: np.ndarray        # (K+1,) noise levels, target first
    eps: np.ndarray      # (K+1, d)
    aver_member: int     # batch row whose noised latent the average term reuses


def draw_tune_noise(rng, n_members, latent_dim, T) -> TuneDraws:
    return TuneDraws(
        t=rng.integers(1, T + 1, size=n_members),
        eps=rng.standard_normal((n_members, latent_dim)),
        aver_member=int(rng.integers(0, n_members)),
    )


def tune_loss(denoiser, proj, batch_z, batch_h, template_emb, lam1, lam2,
              sched, draws: TuneDraws, train=True):
    """Combined loss L_tar + lam1 * L_aux + lam2 * L_aver and projector gradients.

    batch_z/batch_h hold the target first, then K auxiliaries. Each member is
    noised at its own (t, eps) and denoised under the template prompt with its
    own offset; the average term reuses one member's noised latent under the
    mean auxiliary offset. Gradients flow only into the projector; the
    denoiser is frozen. Returns (total, (l_tar, l_aux, l_aver), grads, cache).
    """
    batch_z = np.asarray(batch_z, dtype=np.float64)
    batch_h = np.asarray(batch_h, dtype=np.float64)
    n_members = batch_z.shape[0]
    k_aux = n_members - 1
    if k_aux < 1:
        raise ValueError("batch needs one target and at least one auxiliary")
    n_tokens = template_emb.vectors.shape[0]
    n_base = len(template_emb.base_indices)
    pooled_tmpl = semantics.pool_condition(template_emb)

    c_delta, cache = _projector_forward_batch(proj, batch_h, pooled_tmpl, train=train)
    c_aver = c_delta[1:].mean(axis=0)

    ab = sched.alpha_bar[draws.t]
    z_t = np.sqrt(ab)[:, None] * batch_z + np.sqrt(1.0 - ab)[:, None] * draws.eps

    conds = np.empty((n_members + 1, denoiser.embed_dim))
    for i in range(n_members):
        conds[i] = semantics.pool_condition(
            semantics.offset_base(template_emb, c_delta[i]))
    conds[n_members] = semantics.pool_condition(
        semantics.offset_base(template_emb, c_aver))

    j = draws.aver_member
    z_rows = np.concatenate([z_t, z_t[j][None]], axis=0)
    t_rows = np.concatenate([draws.t, [draws.t[j]]])
    eps_rows = np.concatenate([draws.eps, draws.eps[j][None]], axis=0)
    x = denoiser._inputs(z_rows, t_rows, conds)
    preds, _ = numcore.mlp_forward(denoiser.spec, denoiser.params, x)
    resid = preds - eps_rows
    sq = np.sum(resid * resid, axis=1)
    l_tar = float(sq[0])
    l_aux = float(np.mean(sq[1:n_members]))
    l_aver = float(sq[n_members])
    total = l_tar + lam1 * l_aux + lam2 * l_aver

    weights = np.empty(n_members + 1)
    weights[0] = 1.0
    weights[1:n_members] = lam1 / k_aux
    weights[n_members] = lam2
    upstream = 2.0 * resid * weights[:, None]
    _, input_grad = numcore.mlp_backward(denoiser.spec, denoiser.params, x, upstream)
    d_cond = input_grad[:, denoiser.latent_dim + denoiser.time_dim:]

    # d pooled / d c_delta[row, base j] = 1/n_tokens for every base index.
    d_c_delta = np.repeat(d_cond[:n_members, None, :], n_base, axis=1) / n_tokens
    d_aver = np.repeat(d_cond[n_members][None, :], n_base, axis=0) / n_tokens
    d_c_delta[1:] += d_aver / k_aux

    grads = _projector_backward_batch(proj, cache, d_c_delta)
    return total, (l_tar, l_aux, l_aver), grads, cache


def tune(denoiser, vocab, base_set: BaseSet, templates, cfg: TuneConfig, sched):
    """Tune the projector until the plateau rule or max_steps. Returns (Projector, history).

    history rows are (step, loss_total, loss_tar, loss_aux, loss_aver). The
    denoiser is frozen throughout; only projector parameters move.
    """
    if base_set.target_index is None:
        raise ValueError("base set has no target selected")
    if cfg.k_aux > base_set.n - 1:
        raise ValueError(f"k_aux={cfg.k_aux} exceeds the {base_set.n - 1} auxiliaries")
    n_base = len(base_set.prompt_tar.base_indices)
    proj = make_projector(denoiser.feature_dim, vocab.embed_dim, width=cfg.width,
                          blocks=cfg.blocks, n_offsets=n_base, seed=cfg.seed)
    opt = numcore.adamw_init(proj.params)
    aug = augment_target(base_set, cfg.m_aug, cfg.sigma_aug,
                         rngmod.stream(cfg.seed, rngmod.AUGMENT))
    base_words = [base_set.prompt_tar.tokens[i] for i in base_set.prompt_tar.base_indices]
    template_embs = [
        semantics.embed_prompt(vocab, Prompt(tokens=(*base_words, tmpl),
                                             base_indices=tuple(range(len(base_words)))))
        for tmpl in templates
    ]
    aux_idx = base_set.aux_indices

    history = []
    best_ma = np.inf
    stall = 0
    recent = []
    for step in range(cfg.max_steps):
        g = rngmod.stream(cfg.seed, rngmod.TUNE, step)
        tmpl = template_embs[int(g.integers(0, len(template_embs)))]
        variant = int(g.integers(0, cfg.m_aug))
        chosen = np.sort(g.choice(aux_idx, size=cfg.k_aux, replace=False))
        batch_z = np.concatenate([aug.z[variant][None], base_set.z0[chosen]], axis=0)
        batch_h = np.concatenate([aug.h[None], base_set.h[chosen]], axis=0)
        draws = draw_tune_noise(g, cfg.k_aux + 1, denoiser.latent_dim, sched.T)
        total, parts, grads, cache = tune_loss(
            denoiser, proj, batch_z, batch_h, tmpl, cfg.lam1, cfg.lam2, sched, draws)
        if not np.isfinite(total):
            raise NumericError(f"tuning diverged at step {step}: loss {total}")
        if cache["batch_mode"]:
            mom = proj.momentum
            proj.running_mean = (1.0 - mom) * proj.running_mean + mom * cache["mean"]
            proj.running_var = (1.0 - mom) * proj.running_var + mom * cache["var"]
        proj.params, opt = numcore.adamw_step(
            proj.params, grads, opt, lr=cfg.lr, weight_decay=cfg.weight_decay)
        history.append((step, total, *parts))

        recent.append(total)
        if len(recent) > cfg.ma_window:
            recent.pop(0)
        if len(recent) == cfg.ma_window:
            ma = float(np.mean(recent))
            if ma < best_ma - cfg.plateau_tol:
                best_ma = ma
                stall = 0
            else:
                stall += 1
                if stall >= cfg.plateau_patience:
                    break
    return proj, np.array(history)


# --- projector checkpoints -------------------------------------------------------

def save_projector(path, proj: Projector, tune_cfg: TuneConfig | None = None):
    doc = {
        "version": 1,
        "spec": proj.spec.to_json(),
        "params": numcore.params_to_json(proj.params),
        "norm_stats": {"mean": proj.running_mean.tolist(),
                       "var": proj.running_var.tolist(),
                       "momentum": proj.momentum},
        "use_batch_norm": proj.use_batch_norm,
    }
    if tune_cfg is not None:
        doc["tune_config"] = tune_cfg.to_json()
    with open(path, "w") as f:
        json.dump(doc, f)
        f.write("\n")


def load_projector(path) -> Projector:
    with open(path) as f:
        doc = json.load(f)
    if doc.get("version") != 1:
        raise ValueError(f"unsupported projector checkpoint version in {path}")
    stats = doc["norm_stats"]
    return Projector(
        spec=ProjectorSpec.from_json(doc["spec"]),
        params=numcore.params_from_json(doc["params"]),
        running_mean=np.asarray(stats["mean"], dtype=np.float64),
        running_var=np.asarray(stats["var"], dtype=np.float64),
        momentum=float(stats["momentum"]),
        use_batch_norm=bool(doc["use_batch_norm"]),
    )


# --- base-set serialization ------------------------------------------------------

def base_set_to_json(bs: BaseSet) -> dict:
    return {
        "version": 1,
        "z0": bs.z0.tolist(),
        "h": bs.h.tolist(),
        "subclusters": bs.subclusters.tolist(),
        "prompt": {"tokens": list(bs.prompt_tar.tokens),
                   "base_indices": list(bs.prompt_tar.base_indices)},
        "feature_time": bs.feature_time,
        "guidance_scale": bs.guidance_scale,
        "seed": bs.seed,
        "target_index": bs.target_index,
    }


def base_set_from_json(obj: dict) -> BaseSet:
    return BaseSet(
        z0=np.asarray(obj["z0"], dtype=np.float64),
        h=np.asarray(obj["h"], dtype=np.float64),
        subclusters=np.asarray(obj["subclusters"], dtype=np.int64),
        prompt_tar=Prompt(tokens=tuple(obj["prompt"]["tokens"]),
                          base_indices=tuple(obj["prompt"]["base_indices"])),
        feature_time=int(obj["feature_time"]),
        guidance_scale=float(obj["guidance_scale"]),
        seed=int(obj["seed"]),
        target_index=obj["target_index"],
    )


def save_base_set(path, bs: BaseSet):
    with open(path, "w") as f:
        json.dump(base_set_to_json(bs), f)
        f.write("\n")


def load_base_set(path) -> BaseSet:
    with open(path) as f:
        return base_set_from_json(json.load(f))
