"""Conditional VAE prior from shared-space audio embeddings to goal embeddings.

At prompt time the goal is unknown, so :func:`sample_goal` draws the latent
from the standard normal and decodes it together with the condition.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .clip_align import project_audio
from .embedding_store import VIDEO_DIM
from .errors import ConfigError, DimensionError, TrainingAborted, ValidationError
from .tensor_nn import MLP, AdamWState, adamw_step, load_checkpoint, save_checkpoint

PRIOR_HIDDEN = 256


@dataclass
class PriorConfig:
    batch_size: int = 256
    lr: float = 0.001
    epochs: int = 100
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    seed: int = 0
    latent_dim: int = 128
    hidden_dim: int = PRIOR_HIDDEN
    cond_dim: int = VIDEO_DIM
    goal_dim: int = VIDEO_DIM
    kl_weight: float = 0.001
    kl_warmup: float = 0.1  # fraction of total steps over which kl_weight ramps up linearly
    recon: str = "mse"

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be positive")
        if self.lr <= 0 or self.kl_weight < 0 or not 0 <= self.kl_warmup <= 1:
            raise ConfigError("lr must be positive, kl_weight >= 0, kl_warmup in [0, 1]")
        if self.recon not in ("mse", "cosine"):
            raise ConfigError(f"recon must be 'mse' or 'cosine', got {self.recon!r}")
        for name in ("latent_dim", "hidden_dim", "cond_dim", "goal_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")

    def to_dict(self):
        return asdict(self)


class CvaePrior:
    def __init__(self, encoder: MLP, decoder: MLP, latent_dim: int, cond_dim: int):
        goal_dim = decoder.out_dim
        if encoder.in_dim != goal_dim + cond_dim or encoder.out_dim != 2 * latent_dim:
            raise DimensionError(f"encoder widths {encoder.widths} inconsistent with latent {latent_dim}")
        if decoder.in_dim != latent_dim + cond_dim:
            raise DimensionError(f"decoder widths {decoder.widths} inconsistent with latent {latent_dim}")
        self.encoder = encoder
        self.decoder = decoder
        self.latent_dim = latent_dim
        self.cond_dim = cond_dim
        self.goal_dim = goal_dim

    @classmethod
    def init(cls, config: PriorConfig, rng=None, dtype=np.float32) -> "CvaePrior":
        rng = np.random.default_rng(config.seed) if rng is None else rng
        h = config.hidden_dim
        enc = MLP.init([config.goal_dim + config.cond_dim, h, h, 2 * config.latent_dim], rng,
                       layer_norm=True, dtype=dtype)
        dec = MLP.init([config.latent_dim + config.cond_dim, h, h, config.goal_dim], rng,
                       layer_norm=True, dtype=dtype)
        return cls(enc, dec, config.latent_dim, config.cond_dim)

    @property
    def dtype(self):
        return self.decoder.layers[0].weight.dtype

    def params(self) -> dict:
        out = {f"enc.{k}": v for k, v in self.encoder.params().items()}
        out.update({f"dec.{k}": v for k, v in self.decoder.params().items()})
        return out

    def load_params(self, params):
        self.encoder.load_params({k[4:]: v for k, v in params.items() if k.startswith("enc.")})
        self.decoder.load_params({k[4:]: v for k, v in params.items() if k.startswith("dec.")})

    def astype(self, dtype) -> "CvaePrior":
        return CvaePrior(self.encoder.astype(dtype), self.decoder.astype(dtype), self.latent_dim, self.cond_dim)

    def describe(self) -> dict:
        return {
            "kind": "cvae_prior",
            "encoder_widths": self.encoder.widths,
            "decoder_widths": self.decoder.widths,
            "layer_norm": True,
            "latent_dim": self.latent_dim,
            "cond_dim": self.cond_dim,
            "goal_dim": self.goal_dim,
        }


def _rows(x, dim, what, dtype):
    x = np.asarray(x)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != dim:
        raise DimensionError(f"{what} must have rows of dim {dim}, got shape {x.shape}")
    return x.astype(dtype, copy=False)


def _encode(prior, goal, condition):
    g = _rows(goal, prior.goal_dim, "goal", prior.dtype)
    c = _rows(condition, prior.cond_dim, "condition", prior.dtype)
    if g.shape[0] != c.shape[0]:
        raise DimensionError(f"goal batch {g.shape[0]} != condition batch {c.shape[0]}")
    out, cache = prior.encoder.forward(np.concatenate([g, c], axis=1))
    return out[:, :prior.latent_dim], out[:, prior.latent_dim:], cache


def encode(prior: CvaePrior, goal, condition):
    """Posterior parameters ``(mu, log_var)`` for ``goal`` given ``condition``."""
    mu, log_var, _ = _encode(prior, goal, condition)
    return mu, log_var


def reparameterize(mu, log_var, noise):
    mu, log_var, noise = np.asarray(mu), np.asarray(log_var), np.asarray(noise)
    if not mu.shape == log_var.shape == noise.shape:
        raise DimensionError(f"shapes differ: mu {mu.shape}, log_var {log_var.shape}, noise {noise.shape}")
    return mu + np.exp(0.5 * log_var) * noise


def _decode(prior, z, condition):
    z = _rows(z, prior.latent_dim, "z", prior.dtype)
    c = _rows(condition, prior.cond_dim, "condition", prior.dtype)
    if z.shape[0] != c.shape[0]:
        raise DimensionError(f"z batch {z.shape[0]} != condition batch {c.shape[0]}")
    return prior.decoder.forward(np.concatenate([z, c], axis=1))


def decode(prior: CvaePrior, z, condition):
    return _decode(prior, z, condition)[0]


def _cosine_rows(a, b):
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    return np.sum(a * b, axis=1) / np.maximum(na * nb, 1e-12), na, nb


def elbo_loss(goal, goal_hat, mu, log_var, beta: float = 0.001, recon: str = "mse"):
    """``(total, recon, kl)`` averaged over the batch.

    ``recon`` is the per-dimension mean squared error (or ``1 - cosine`` when
    ``recon='cosine'``); ``kl`` is summed over latent dimensions.
    """
    return _elbo(goal, goal_hat, mu, log_var, beta, recon)[0]


def _elbo(goal, goal_hat, mu, log_var, beta, recon_kind="mse"):
    arrays = [np.asarray(a, dtype=np.float64) for a in (goal, goal_hat, mu, log_var)]
    goal, goal_hat, mu, log_var = [a[None, :] if a.ndim == 1 else a for a in arrays]
    if goal.shape != goal_hat.shape or mu.shape != log_var.shape or goal.shape[0] != mu.shape[0]:
        raise DimensionError("goal/goal_hat and mu/log_var shapes must match")
    if not all(np.all(np.isfinite(a)) for a in (goal, goal_hat, mu, log_var)):
        raise ValidationError("elbo_loss received non-finite inputs")
    b, d = goal.shape
    if recon_kind == "mse":
        diff = goal_hat - goal
        recon = float(np.mean(diff * diff))
        g_hat = 2.0 * diff / (b * d)
    else:
        cos, nh, ng = _cosine_rows(goal_hat, goal)
        recon = float(np.mean(1.0 - cos))
        # d cos / d goal_hat = goal/(|h||g|) - cos * h/|h|^2
        g_hat = -(goal / (nh * ng)[:, None] - cos[:, None] * goal_hat / (nh**2)[:, None]) / b
    ev = np.exp(log_var)
    kl_rows = -0.5 * np.sum(1.0 + log_var - mu * mu - ev, axis=1)
    kl = max(float(np.mean(kl_rows)), 0.0)
    g_mu = beta * mu / b
    g_lv = beta * -0.5 * (1.0 - ev) / b
    return (recon + beta * kl, recon, kl), (g_hat, g_mu, g_lv)


def loss_and_grads(prior: CvaePrior, goal, condition, noise, beta, recon="mse"):
    """One ELBO evaluation with reparameterized ``noise`` and its parameter gradients."""
    mu, log_var, enc_cache = _encode(prior, goal, condition)
    noise = np.asarray(noise, dtype=prior.dtype)
    sigma = np.exp(0.5 * log_var)
    z = mu + sigma * noise
    goal_hat, dec_cache = _decode(prior, z, condition)
    losses, (g_hat, g_mu, g_lv) = _elbo(goal, goal_hat, mu, log_var, beta, recon)
    dt = prior.dtype
    g_in, dec_grads = prior.decoder.backward(dec_cache, g_hat.astype(dt))
    g_z = g_in[:, :prior.latent_dim]
    g_mu = g_mu.astype(dt) + g_z
    g_lv = g_lv.astype(dt) + g_z * 0.5 * sigma * noise
    _, enc_grads = prior.encoder.backward(enc_cache, np.concatenate([g_mu, g_lv], axis=1))
    grads = {f"enc.{k}": v for k, v in enc_grads.items()}
    grads.update({f"dec.{k}": v for k, v in dec_grads.items()})
    return losses, grads


def train_prior(conditions, targets, config: PriorConfig, *, prior=None):
    """Fit the CVAE on row-aligned ``(condition, target)`` pairs.

    Returns ``(prior, history)``; ``history`` rows are
    ``(epoch, batch, total, recon, kl)``.
    """
    c = np.asarray(conditions, dtype=np.float32)
    t = np.asarray(targets, dtype=np.float32)
    if c.ndim != 2 or t.ndim != 2 or c.shape[0] != t.shape[0]:
        raise DimensionError(f"conditions {c.shape} and targets {t.shape} are not row-aligned")
    if c.shape[1] != config.cond_dim or t.shape[1] != config.goal_dim:
        raise DimensionError(
            f"pair dims ({c.shape[1]}, {t.shape[1]}) do not match config ({config.cond_dim}, {config.goal_dim})"
        )
    if not (np.all(np.isfinite(c)) and np.all(np.isfinite(t))):
        raise ValidationError("prior training pairs contain non-finite values")
    n = c.shape[0]
    if n < config.batch_size:
        raise ValidationError(f"{n} pairs is fewer than one batch of {config.batch_size}")
    init_rng, shuffle_rng, noise_rng = (
        np.random.default_rng(s) for s in np.random.SeedSequence(config.seed).spawn(3)
    )
    if prior is None:
        prior = CvaePrior.init(config, init_rng)
    params = prior.params()
    opt = AdamWState(lr=config.lr, beta1=config.beta1, beta2=config.beta2, weight_decay=config.weight_decay,
                     no_decay=frozenset(k for k, v in params.items() if v.ndim < 2))
    n_batches = n // config.batch_size
    total_steps = n_batches * config.epochs
    warm = config.kl_warmup * total_steps
    history = []
    step = 0
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(n)
        for b in range(n_batches):
            idx = order[b * config.batch_size:(b + 1) * config.batch_size]
            beta = config.kl_weight * min(1.0, (step + 1) / warm) if warm > 0 else config.kl_weight
            noise = noise_rng.standard_normal((len(idx), prior.latent_dim)).astype(np.float32)
            try:
                (total, recon, kl), grads = loss_and_grads(prior, t[idx], c[idx], noise, beta, config.recon)
            except ValidationError as exc:
                raise TrainingAborted(step, float("nan")) from exc
            if not math.isfinite(total) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise TrainingAborted(step, total)
            adamw_step(opt, params, grads)
            history.append((epoch, b, total, recon, kl))
            step += 1
    prior.step = step
    return prior, history


def sample_goal(prior: CvaePrior, condition, seed: int = 0, n_samples: int = 1):
    """Decode standard-normal latents with ``condition``.

    Sample ``k`` of condition row ``r`` uses noise seeded by ``(seed, r, k)``.
    A 1-D condition gives ``(n_samples, goal_dim)``; a 2-D batch gives
    ``(rows, n_samples, goal_dim)``.
    """
    single = np.ndim(condition) == 1
    c = _rows(condition, prior.cond_dim, "condition", prior.dtype)
    z = np.stack([
        np.stack([np.random.default_rng([seed, r, k]).standard_normal(prior.latent_dim) for k in range(n_samples)])
        for r in range(c.shape[0])
    ]).astype(prior.dtype)
    cond = np.repeat(c, n_samples, axis=0)
    out = decode(prior, z.reshape(-1, prior.latent_dim), cond).reshape(c.shape[0], n_samples, prior.goal_dim)
    return out[0] if single else out


def map_audio_to_goal(clip_model, prior: CvaePrior, ast_logits, seed: int = 0):
    """Audio-encoder logits -> shared-space audio embedding -> sampled goal embedding."""
    single = np.ndim(ast_logits) == 1
    cond = project_audio(clip_model, ast_logits)
    out = sample_goal(prior, cond, seed, 1)[:, 0, :]
    return out[0] if single else out


def save_prior(path, prior: CvaePrior, step: int = 0):
    save_checkpoint(path, prior.describe(), prior.params(), step)


def load_prior(path) -> CvaePrior:
    arch, params, _ = load_checkpoint(path)
    if arch.get("kind") != "cvae_prior":
        raise ValidationError(f"{path} is not a cvae_prior checkpoint (kind={arch.get('kind')!r})")
    rng = np.random.default_rng(0)
    enc = MLP.init(arch["encoder_widths"], rng, layer_norm=True)
    dec = MLP.init(arch["decoder_widths"], rng, layer_norm=True)
    prior = CvaePrior(enc, dec, arch["latent_dim"], arch["cond_dim"])
    prior.load_params(params)
    return prior
