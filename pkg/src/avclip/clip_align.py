"""Audio-video contrastive alignment head.

Two deep MLPs ("transformation networks") map frozen-encoder embeddings
(527-d audio logits, 512-d video embeddings) into a shared 512-d space where
matching pairs are pulled together by a symmetric cross-entropy over the
batch similarity matrix.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from .embedding_store import AUDIO_DIM, VIDEO_DIM, PairedDataset
from .errors import ConfigError, DimensionError, TrainingAborted, ValidationError
from .tensor_nn import (
    LEAKY_SLOPE,
    MLP,
    AdamWState,
    adamw_step,
    l2_normalize_backward,
    l2_normalize_forward,
    load_checkpoint,
    save_checkpoint,
)

log = logging.getLogger(__name__)

SHARED_DIM = 512
HIDDEN_DIM = 1024
N_LAYERS = 10
INIT_TEMPERATURE = 0.07
MAX_LOGIT_SCALE = 100.0
# variance-preserving gain for leaky ReLU with slope 0.2
INIT_GAIN = math.sqrt(2.0 / (1.0 + LEAKY_SLOPE**2))


@dataclass
class TrainConfig:
    """Contrastive training hyperparameters; defaults are the full-scale recipe."""

    batch_size: int = 1024
    lr: float = 0.001
    epochs: int = 100
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    seed: int = 0
    n_layers: int = N_LAYERS
    hidden_dim: int = HIDDEN_DIM
    shared_dim: int = SHARED_DIM
    audio_dim: int = AUDIO_DIM
    video_dim: int = VIDEO_DIM
    init_temperature: float = INIT_TEMPERATURE
    max_logit_scale: float = MAX_LOGIT_SCALE
    equalized_lr: bool = True

    def __post_init__(self):
        if self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2 so every batch has negatives")
        for name in ("lr", "epochs", "n_layers", "hidden_dim", "shared_dim", "audio_dim",
                     "video_dim", "init_temperature", "max_logit_scale"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """Reduced schedule that trains in minutes on one CPU core."""
        base = {"batch_size": 256, "epochs": 30}
        base.update(overrides)
        return cls(**base)

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]

    def to_dict(self):
        return asdict(self)


def mapping_network(in_dim, rng, *, n_layers=N_LAYERS, hidden_dim=HIDDEN_DIM,
                    out_dim=SHARED_DIM, dtype=np.float32) -> MLP:
    """``n_layers`` linear layers with leaky-ReLU between them and a linear output."""
    widths = [in_dim] + [hidden_dim] * (n_layers - 1) + [out_dim]
    return MLP.init(widths, rng, dtype=dtype, gain=INIT_GAIN)


def equalized_lr_scales(params: dict) -> dict:
    """Per-matrix step multipliers ``gain / sqrt(fan_in)``.

    Under Adam this is the same as storing unit-variance weights and scaling
    them at runtime (StyleGAN's equalized learning rate): every weight moves
    by the same fraction of its init scale regardless of layer width.
    """
    return {k: INIT_GAIN / math.sqrt(v.shape[1]) for k, v in params.items() if v.ndim == 2}


class ClipAlignModel:
    def __init__(self, audio_net: MLP, video_net: MLP, logit_scale: float,
                 max_logit_scale: float = MAX_LOGIT_SCALE):
        if audio_net.out_dim != video_net.out_dim:
            raise DimensionError(
                f"audio and video networks disagree on shared dim: {audio_net.out_dim} vs {video_net.out_dim}"
            )
        self.audio_net = audio_net
        self.video_net = video_net
        dtype = audio_net.layers[0].weight.dtype
        self.logit_scale = np.array(logit_scale, dtype=dtype)
        self.max_logit_scale = float(max_logit_scale)

    @classmethod
    def init(cls, config: TrainConfig, rng=None, dtype=np.float32) -> "ClipAlignModel":
        rng = np.random.default_rng(config.seed) if rng is None else rng
        kw = dict(n_layers=config.n_layers, hidden_dim=config.hidden_dim,
                  out_dim=config.shared_dim, dtype=dtype)
        audio = mapping_network(config.audio_dim, rng, **kw)
        video = mapping_network(config.video_dim, rng, **kw)
        return cls(audio, video, math.log(1.0 / config.init_temperature), config.max_logit_scale)

    @property
    def temperature_scale(self) -> float:
        return float(np.exp(self.logit_scale))

    def clamp_logit_scale(self):
        cap = math.log(self.max_logit_scale)
        if self.logit_scale > cap:
            self.logit_scale[...] = cap

    def params(self) -> dict:
        out = {f"audio.{k}": v for k, v in self.audio_net.params().items()}
        out.update({f"video.{k}": v for k, v in self.video_net.params().items()})
        out["logit_scale"] = self.logit_scale
        return out

    def load_params(self, params: dict):
        self.audio_net.load_params({k[6:]: v for k, v in params.items() if k.startswith("audio.")})
        self.video_net.load_params({k[6:]: v for k, v in params.items() if k.startswith("video.")})
        self.logit_scale = np.array(params["logit_scale"], dtype=self.logit_scale.dtype).reshape(())

    def astype(self, dtype) -> "ClipAlignModel":
        return ClipAlignModel(self.audio_net.astype(dtype), self.video_net.astype(dtype),
                              float(self.logit_scale), self.max_logit_scale)

    def describe(self) -> dict:
        return {
            "kind": "clip_align",
            "audio_widths": self.audio_net.widths,
            "video_widths": self.video_net.widths,
            "activation": f"leaky_relu({self.audio_net.slope})",
            "max_logit_scale": self.max_logit_scale,
        }


def _as_batch(x, dim, what):
    x = np.asarray(x)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != dim:
        raise DimensionError(f"{what} expects rows of dim {dim}, got shape {x.shape}")
    return x


def project_audio(model: ClipAlignModel, ast_logits) -> np.ndarray:
    x = _as_batch(ast_logits, model.audio_net.in_dim, "project_audio")
    x = x.astype(model.logit_scale.dtype, copy=False)
    return l2_normalize_forward(model.audio_net(x))[0]


def project_video(model: ClipAlignModel, video_embeddings) -> np.ndarray:
    x = _as_batch(video_embeddings, model.video_net.in_dim, "project_video")
    x = x.astype(model.logit_scale.dtype, copy=False)
    return l2_normalize_forward(model.video_net(x))[0]


def similarity_logits(model: ClipAlignModel, audio_batch, video_batch) -> np.ndarray:
    """Scaled cosine similarity; entry (i, j) compares audio i with video j."""
    a = project_audio(model, audio_batch)
    v = project_video(model, video_batch)
    if a.shape[0] != v.shape[0]:
        raise DimensionError(f"batch sizes differ: {a.shape[0]} audio vs {v.shape[0]} video")
    return np.exp(model.logit_scale) * (a @ v.T)


def _log_softmax(z, axis):
    m = z.max(axis=axis, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=axis, keepdims=True))


def clip_loss_and_grad(logits):
    """Symmetric cross-entropy with diagonal targets, and its gradient w.r.t. ``logits``."""
    logits = np.asarray(logits)
    if logits.ndim != 2 or logits.shape[0] != logits.shape[1] or logits.shape[0] < 2:
        raise DimensionError(f"clip_loss needs a square N x N matrix with N >= 2, got {logits.shape}")
    if not np.all(np.isfinite(logits)):
        raise ValidationError("clip_loss received non-finite logits")
    n = logits.shape[0]
    z = logits.astype(np.float64)
    lr = _log_softmax(z, axis=1)
    lc = _log_softmax(z, axis=0)
    diag = np.arange(n)
    loss = -0.5 * (lr[diag, diag].mean() + lc[diag, diag].mean())
    grad = 0.5 * (np.exp(lr) + np.exp(lc)) / n
    grad[diag, diag] -= 1.0 / n
    return max(float(loss), 0.0), grad.astype(logits.dtype)


def clip_loss(logits) -> float:
    return clip_loss_and_grad(logits)[0]


def loss_and_grads(model: ClipAlignModel, audio_batch, video_batch):
    """Contrastive loss of one batch and gradients for every model parameter."""
    dtype = model.logit_scale.dtype
    xa = _as_batch(audio_batch, model.audio_net.in_dim, "audio batch").astype(dtype, copy=False)
    xv = _as_batch(video_batch, model.video_net.in_dim, "video batch").astype(dtype, copy=False)
    if xa.shape[0] != xv.shape[0]:
        raise DimensionError(f"batch sizes differ: {xa.shape[0]} audio vs {xv.shape[0]} video")
    ua, cache_a = model.audio_net.forward(xa)
    uv, cache_v = model.video_net.forward(xv)
    a, norm_a = l2_normalize_forward(ua)
    v, norm_v = l2_normalize_forward(uv)
    scale = np.exp(model.logit_scale)
    cos = a @ v.T
    logits = scale * cos
    loss, g_logits = clip_loss_and_grad(logits)

    g_scale = np.sum(g_logits.astype(np.float64) * logits.astype(np.float64))
    g_cos = scale * g_logits
    g_a = l2_normalize_backward(norm_a, g_cos @ v)
    g_v = l2_normalize_backward(norm_v, g_cos.T @ a)
    _, grads_a = model.audio_net.backward(cache_a, g_a)
    _, grads_v = model.video_net.backward(cache_v, g_v)

    grads = {f"audio.{k}": g for k, g in grads_a.items()}
    grads.update({f"video.{k}": g for k, g in grads_v.items()})
    grads["logit_scale"] = np.array(g_scale, dtype=dtype)
    return loss, grads


def no_decay_names(params: dict) -> frozenset:
    """Biases, norm gains and the temperature are excluded from weight decay."""
    return frozenset(k for k, v in params.items() if v.ndim < 2)


def train_clip(dataset: PairedDataset, config: TrainConfig, *, model=None, callback=None):
    """Train both transformation networks on the ``train`` split.

    Returns ``(model, history)`` where ``history`` is a list of
    ``(epoch, batch, loss)`` tuples, one per optimizer step. The final
    incomplete batch of each epoch is dropped. ``callback(step, model, loss)``
    runs after every optimizer step.
    """
    audio, video = dataset.arrays("train")
    n = audio.shape[0]
    if n < config.batch_size:
        raise ValidationError(f"train split has {n} pairs, fewer than one batch of {config.batch_size}")
    if audio.shape[1] != config.audio_dim or video.shape[1] != config.video_dim:
        raise DimensionError(
            f"dataset dims ({audio.shape[1]}, {video.shape[1]}) do not match config "
            f"({config.audio_dim}, {config.video_dim})"
        )
    init_rng, shuffle_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(config.seed).spawn(2))
    if model is None:
        model = ClipAlignModel.init(config, init_rng)
    params = model.params()
    opt = AdamWState(lr=config.lr, beta1=config.beta1, beta2=config.beta2,
                     weight_decay=config.weight_decay, no_decay=no_decay_names(params),
                     lr_scale=equalized_lr_scales(params) if config.equalized_lr else {})
    n_batches = n // config.batch_size
    history = []
    step = 0
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(n)
        for b in range(n_batches):
            idx = order[b * config.batch_size:(b + 1) * config.batch_size]
            try:
                loss, grads = loss_and_grads(model, audio[idx], video[idx])
            except ValidationError as exc:
                raise TrainingAborted(step, float("nan")) from exc
            if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise TrainingAborted(step, loss)
            adamw_step(opt, params, grads)
            model.clamp_logit_scale()
            params["logit_scale"] = model.logit_scale
            history.append((epoch, b, loss))
            if callback is not None:
                callback(step, model, loss)
            step += 1
        log.debug("epoch %d mean loss %.4f", epoch, np.mean([h[2] for h in history[-n_batches:]]))
    model.step = step
    return model, history


def save_clip(path, model: ClipAlignModel, step: int = 0):
    save_checkpoint(path, model.describe(), model.params(), step)


def load_clip(path) -> ClipAlignModel:
    arch, params, _ = load_checkpoint(path)
    if arch.get("kind") != "clip_align":
        raise ValidationError(f"{path} is not a clip_align checkpoint (kind={arch.get('kind')!r})")
    rng = np.random.default_rng(0)
    audio = MLP.init(arch["audio_widths"], rng)
    video = MLP.init(arch["video_widths"], rng)
    model = ClipAlignModel(audio, video, 0.0, arch["max_logit_scale"])
    model.load_params(params)
    return model
