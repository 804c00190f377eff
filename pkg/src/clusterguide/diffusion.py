"""Noise schedules, forward noising, base-model training, CFG, ancestral sampling.

The sampler is parameterized by a pluggable noise-prediction function so the
trained model, the analytic world oracle and the cluster-guided predictor all
share one reverse process.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numcore, rng as rngmod, world as worldmod
from .errors import NumericError
from .numcore import MlpSpec


@dataclass(frozen=True)
class NoiseSchedule:
    """Discretized alpha_bar table, t = 0..T with alpha_bar[0] = 1."""

    kind: str
    T: int
    alpha_bar: np.ndarray
    sigma: np.ndarray = field(init=False)

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        object.__setattr__(self, "alpha_bar", ab)
        if ab.shape != (self.T + 1,):
            raise ValueError(f"alpha_bar has shape {ab.shape}, expected ({self.T + 1},)")
        if ab[0] != 1.0:
            raise ValueError(f"alpha_bar[0] must be 1, got {ab[0]}")
        if not (0.0 < ab[-1] < 1.0):
            raise ValueError(f"alpha_bar[T] must lie in (0, 1), got {ab[-1]}")
        if np.any(np.diff(ab) >= 0):
            raise ValueError("alpha_bar must be strictly decreasing")
        object.__setattr__(self, "sigma", np.sqrt(1.0 - ab))

    def to_json(self) -> dict:
        return {"kind": self.kind, "T": self.T, "alpha_bar": self.alpha_bar.tolist()}

    @staticmethod
    def from_json(obj) -> "NoiseSchedule":
        return NoiseSchedule(kind=obj["kind"], T=int(obj["T"]),
                             alpha_bar=np.asarray(obj["alpha_bar"], dtype=np.float64))


def make_schedule(kind: str, T: int) -> NoiseSchedule:
    """linear_beta: DDPM betas scaled by 1000/T; cosine: squared-cosine alpha_bar."""
    if T < 2:
        raise ValueError(f"schedule needs T >= 2, got {T}")
    if kind == "linear_beta":
        betas = np.clip(np.linspace(0.1 / T, 20.0 / T, T), 1e-8, 0.999)
        alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    elif kind == "cosine":
        s = 0.008
        t = np.arange(T + 1, dtype=np.float64)
        f = np.cos((t / T + s) / (1.0 + s) * (np.pi / 2.0)) ** 2
        alpha_bar = f / f[0]
        alpha_bar[0] = 1.0
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    return NoiseSchedule(kind=kind, T=T, alpha_bar=alpha_bar)


def forward_noise(z0, t, eps, sched: NoiseSchedule):
    """z_t = sqrt(alpha_bar_t) * z0 + sqrt(1 - alpha_bar_t) * eps."""
    if not 0 <= t <= sched.T:
        raise ValueError(f"time step {t} out of range 0..{sched.T}")
    z0 = np.asarray(z0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if z0.shape != eps.shape:
        raise ValueError(f"z0 shape {z0.shape} != eps shape {eps.shape}")
    ab = sched.alpha_bar[t]
    return np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps


def time_embedding(t, T, dim=8):
    """Sinusoidal features of t/T: [sin(pi 2^k t/T), cos(pi 2^k t/T)], k = 0..dim/2-1."""
    tau = np.asarray(t, dtype=np.float64) / T
    freqs = np.pi * (2.0 ** np.arange(dim // 2))
    arg = tau[..., None] * freqs
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=-1)


@dataclass
class Denoiser:
    """Conditional noise-prediction MLP over concat(z_t, time embedding, condition).

    call_count tracks forward evaluations (one per predict call, batched or not)
    for the inference-cost instrumentation.
    """

    spec: MlpSpec
    params: dict
    latent_dim: int
    embed_dim: int
    time_dim: int = 8
    call_count: int = 0
    # The time embedding is normalized by the training schedule's T; set by
    # train_base / checkpoint load.
    _T_for_embed: int = 100

    def __post_init__(self):
        want = self.latent_dim + self.time_dim + self.embed_dim
        if self.spec.layer_widths[0] != want:
            raise ValueError(f"denoiser input width {self.spec.layer_widths[0]} != "
                             f"latent {self.latent_dim} + time {self.time_dim} + "
                             f"embed {self.embed_dim}")
        if self.spec.layer_widths[-1] != self.latent_dim:
            raise ValueError("denoiser output width must equal the latent dimension")

    def _inputs(self, z, t, c):
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        c = np.asarray(c, dtype=np.float64)
        if c.ndim == 1:
            c = np.broadcast_to(c, (z.shape[0], c.shape[0]))
        t_arr = np.asarray(t, dtype=np.float64)
        temb = time_embedding(t_arr, self._T_for_embed, self.time_dim)
        if temb.ndim == 1:
            temb = np.broadcast_to(temb, (z.shape[0], self.time_dim))
        return np.concatenate([z, temb, c], axis=-1)

    def predict(self, z, t, c):
        """Noise prediction. z (d,) or (B, d); t scalar or (B,); c (m,) or (B, m)."""
        single = np.asarray(z).ndim == 1
        x = self._inputs(z, t, c)
        y, _ = numcore.mlp_forward(self.spec, self.params, x)
        self.call_count += 1
        return y[0] if single else y

    def features(self, z, t, c):
        """Post-activation of the feature layer, the toy stand-in for encoder features."""
        single = np.asarray(z).ndim == 1
        x = self._inputs(z, t, c)
        _, hidden = numcore.mlp_forward(self.spec, self.params, x)
        h = hidden[self.spec.feature_layer_index]
        return h[0] if single else h

    @property
    def feature_dim(self) -> int:
        return self.spec.layer_widths[self.spec.feature_layer_index + 1]


def make_denoiser(latent_dim, embed_dim, hidden=(64, 64, 64), time_dim=8,
                  feature_layer_index=1, activation="silu", seed=0, T=100) -> Denoiser:
    spec = MlpSpec(
        layer_widths=(latent_dim + time_dim + embed_dim, *hidden, latent_dim),
        activation=activation,
        feature_layer_index=feature_layer_index,
    )
    params = numcore.init_params(spec, rngmod.stream(seed, rngmod.INIT))
    dn = Denoiser(spec=spec, params=params, latent_dim=latent_dim,
                  embed_dim=embed_dim, time_dim=time_dim)
    dn._T_for_embed = T
    return dn


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 8000
    batch_size: int = 128
    p_uncond: float = 0.1
    lr: float = 1e-3
    weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.p_uncond < 1.0:
            raise ValueError(f"p_uncond must lie in [0, 1), got {self.p_uncond}")

    def to_json(self):
        return {"steps": self.steps, "batch_size": self.batch_size,
                "p_uncond": self.p_uncond, "lr": self.lr,
                "weight_decay": self.weight_decay, "seed": self.seed}


def denoise_loss(denoiser: Denoiser, z0, c, t, eps, sched):
    """Mean squared noise-prediction error over a batch, plus parameter gradients.

    z0 (B, d), c (B, m), t (B,) ints, eps (B, d). The loss is the batch mean of
    the squared error summed over latent dimensions.
    """
    z0 = np.asarray(z0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    t = np.asarray(t)
    if z0.ndim != 2 or z0.shape[0] == 0:
        raise ValueError("batch must be non-empty")
    ab = sched.alpha_bar[t]
    z_t = np.sqrt(ab)[:, None] * z0 + np.sqrt(1.0 - ab)[:, None] * eps
    x = denoiser._inputs(z_t, t, c)
    pred, _ = numcore.mlp_forward(denoiser.spec, denoiser.params, x)
    resid = pred - eps
    loss = float(np.mean(np.sum(resid * resid, axis=-1)))
    upstream = 2.0 * resid / z0.shape[0]
    grads, _ = numcore.mlp_backward(denoiser.spec, denoiser.params, x, upstream)
    return loss, grads


def train_base(world, vocab, cfg: TrainConfig, sched,
               hidden=(64, 64, 64), feature_layer_index=1,
               resume=None):
    """Train the conditional denoiser on the world. Returns (Denoiser, loss history).

    Per step: (subject, context) uniform, z0 from the world, t uniform in [1, T],
    eps standard normal, and the pooled prompt condition replaced by the empty
    (zero) condition with probability p_uncond. Each step draws from its own
    Philox stream keyed by (seed, step), so resume=(params, opt_state, start_step)
    continues bit-identically.
    """
    from . import semantics

    n_subj = len(world.subjects)
    n_ctx = len(world.contexts)
    pooled = np.stack([
        [semantics.pool_condition(semantics.embed_prompt(
            vocab, semantics.subject_prompt(s.token, c.token)))
         for c in world.contexts]
        for s in world.subjects
    ])  # (S, C, m)

    if resume is not None:
        params, opt_state, start_step = resume
        denoiser = make_denoiser(world.latent_dim, vocab.embed_dim, hidden=hidden,
                                 feature_layer_index=feature_layer_index,
                                 seed=cfg.seed, T=sched.T)
        denoiser.params = params
    else:
        denoiser = make_denoiser(world.latent_dim, vocab.embed_dim, hidden=hidden,
                                 feature_layer_index=feature_layer_index,
                                 seed=cfg.seed, T=sched.T)
        opt_state = numcore.adamw_init(denoiser.params)
        start_step = 0

    losses = np.empty(cfg.steps - start_step)
    for step in range(start_step, cfg.steps):
        g = rngmod.stream(cfg.seed, rngmod.TRAIN, step)
        subj = g.integers(0, n_subj, size=cfg.batch_size)
        ctx = g.integers(0, n_ctx, size=cfg.batch_size)
        z0, _ = worldmod.sample_world_batch(world, subj, ctx, g)
        t = g.integers(1, sched.T + 1, size=cfg.batch_size)
        eps = g.standard_normal((cfg.batch_size, world.latent_dim))
        c = pooled[subj, ctx].copy()
        drop = g.random(cfg.batch_size) < cfg.p_uncond
        c[drop] = 0.0
        loss, grads = denoise_loss(denoiser, z0, c, t, eps, sched)
        if not np.isfinite(loss):
            raise NumericError(f"training diverged at step {step}: loss {loss}")
        denoiser.params, opt_state = numcore.adamw_step(
            denoiser.params, grads, opt_state,
            lr=cfg.lr, weight_decay=cfg.weight_decay)
        losses[step - start_step] = loss
    return denoiser, opt_state, losses


def cfg_predict(denoiser, z, t, c, c_empty, s):
    """Classifier-free guidance: eps(empty) + s * (eps(c) - eps(empty)).

    s = 0 and s = 1 take dedicated paths so those reductions are bit-exact.
    """
    if s == 0.0:
        return denoiser.predict(z, t, c_empty)
    if s == 1.0:
        return denoiser.predict(z, t, c)
    e_uncond = denoiser.predict(z, t, c_empty)
    e_cond = denoiser.predict(z, t, c)
    return e_uncond + s * (e_cond - e_uncond)


def sampling_times(sched: NoiseSchedule, steps: int) -> np.ndarray:
    """Evenly strided time grid T = tau_0 > tau_1 > ... > tau_steps = 0."""
    if not 1 <= steps <= sched.T:
        raise ValueError(f"steps must lie in 1..{sched.T}, got {steps}")
    return np.round(np.linspace(sched.T, 0, steps + 1)).astype(int)


def _ancestral_update(z, eps_hat, t_hi, t_lo, sched, noise):
    """DDPM posterior step from time t_hi to t_lo given the noise prediction."""
    ab_hi = sched.alpha_bar[t_hi]
    ab_lo = sched.alpha_bar[t_lo]
    z0_hat = (z - np.sqrt(1.0 - ab_hi) * eps_hat) / np.sqrt(ab_hi)
    ratio = ab_hi / ab_lo
    coef0 = np.sqrt(ab_lo) * (1.0 - ratio) / (1.0 - ab_hi)
    coeft = np.sqrt(ratio) * (1.0 - ab_lo) / (1.0 - ab_hi)
    var = (1.0 - ab_lo) * (1.0 - ratio) / (1.0 - ab_hi)
    mean = coef0 * z0_hat + coeft * z
    if var > 0.0 and noise is not None:
        return mean + np.sqrt(var) * noise
    return mean


def sample(predict_fn, sched, steps, rng, latent_dim):
    """Ancestral sampling over a strided time grid. Returns the full trajectory.

    predict_fn(z (d,), t) -> noise prediction (d,). Trajectory shape is
    (steps + 1, latent_dim), from z_T down to z_0.
    """
    times = sampling_times(sched, steps)
    z = rng.standard_normal(latent_dim)
    traj = np.empty((steps + 1, latent_dim))
    traj[0] = z
    for i in range(steps):
        t_hi, t_lo = int(times[i]), int(times[i + 1])
        eps_hat = predict_fn(z, t_hi)
        noise = rng.standard_normal(latent_dim) if t_lo > 0 else None
        z = _ancestral_update(z, eps_hat, t_hi, t_lo, sched, noise)
        if not np.all(np.isfinite(z)):
            raise NumericError(f"non-finite state at sampling step {i + 1} (t={t_hi})")
        traj[i + 1] = z
    return traj


def sample_chains(predict_fn, sched, steps, seed, n_chains, latent_dim):
    """n independent chains, batched through predict_fn. Returns z_0 rows (n, d).

    Chain i draws all of its noise from its own stream (seed XOR i), so the
    result set is a pure function of (seed, n_chains).
    """
    streams = [rngmod.chain_stream(seed, i) for i in range(n_chains)]
    times = sampling_times(sched, steps)
    z = np.stack([g.standard_normal(latent_dim) for g in streams])
    for i in range(steps):
        t_hi, t_lo = int(times[i]), int(times[i + 1])
        eps_hat = predict_fn(z, t_hi)
        if t_lo > 0:
            noise = np.stack([g.standard_normal(latent_dim) for g in streams])
        else:
            noise = None
        z = _ancestral_update(z, eps_hat, t_hi, t_lo, sched, noise)
        if not np.all(np.isfinite(z)):
            raise NumericError(f"non-finite state at sampling step {i + 1} (t={t_hi})")
    return z


# --- checkpoints --------------------------------------------------------------

def save_denoiser(path, denoiser: Denoiser, sched: NoiseSchedule, vocab,
                  opt_state=None, train_cfg: TrainConfig | None = None):
    from . import semantics

    extra = {
        "schedule": sched.to_json(),
        "vocab": semantics.vocab_to_json(vocab),
        "denoiser_meta": {
            "latent_dim": denoiser.latent_dim,
            "embed_dim": denoiser.embed_dim,
            "time_dim": denoiser.time_dim,
        },
    }
    if train_cfg is not None:
        extra["train_config"] = train_cfg.to_json()
    numcore.save_checkpoint(path, denoiser.spec, denoiser.params,
                            optimizer_state=opt_state, extra=extra)


def load_denoiser(path):
    """Returns (denoiser, sched, vocab, opt_state, train_cfg or None)."""
    from . import semantics

    spec, params, opt_state, extra = numcore.load_checkpoint(path)
    sched = NoiseSchedule.from_json(extra["schedule"])
    vocab = semantics.vocab_from_json(extra["vocab"])
    meta = extra["denoiser_meta"]
    dn = Denoiser(spec=spec, params=params, latent_dim=int(meta["latent_dim"]),
                  embed_dim=int(meta["embed_dim"]), time_dim=int(meta["time_dim"]))
    dn._T_for_embed = sched.T
    cfg = extra.get("train_config")
    train_cfg = TrainConfig(**cfg) if cfg else None
    return dn, sched, vocab, opt_state, train_cfg
