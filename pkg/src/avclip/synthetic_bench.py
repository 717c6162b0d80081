"""Synthetic paired embeddings with known correspondence.

Both modalities are deterministic nonlinear functions of a shared Gaussian
latent (plus optional noise), so a contrastive model can in principle recover
the pairing exactly when ``noise_sigma == 0``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .embedding_store import (
    AUDIO_DIM,
    VIDEO_DIM,
    EmbeddingMatrix,
    PairedDataset,
    PairEntry,
    PairManifest,
)
from .errors import ConfigError, ValidationError


@dataclass(frozen=True)
class SyntheticSpec:
    n_pairs: int = 2000
    latent_dim: int = 32
    audio_dim: int = AUDIO_DIM
    video_dim: int = VIDEO_DIM
    noise_sigma: float = 0.0
    seed: int = 0
    map_depth: int = 2
    hidden_dim: int = 128
    map_gain: float = 1.5

    def __post_init__(self):
        for name in ("latent_dim", "audio_dim", "video_dim", "hidden_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.n_pairs < 0 or self.map_depth < 1:
            raise ConfigError("n_pairs must be >= 0 and map_depth >= 1")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be non-negative")

    def to_dict(self):
        return asdict(self)


class RandomFeatureMap:
    """Frozen map ``x -> W_out tanh(... tanh(W_1 x))`` with orthogonal-ish random weights.

    Output entries have roughly unit variance for standard-normal inputs.
    """

    def __init__(self, in_dim, out_dim, depth, hidden_dim, rng, gain=1.5):
        widths = [in_dim] + [hidden_dim] * depth
        self.hidden = [rng.standard_normal((b, a)) * (gain / np.sqrt(a)) for a, b in zip(widths, widths[1:])]
        self.out = rng.standard_normal((out_dim, hidden_dim)) / np.sqrt(hidden_dim)
        h = np.tanh(gain * rng.standard_normal(4096))
        self.out /= np.sqrt(np.mean(h * h))

    def __call__(self, x):
        h = np.asarray(x, dtype=np.float64)
        for w in self.hidden:
            h = np.tanh(h @ w.T)
        return h @ self.out.T


def _maps(spec: SyntheticSpec):
    rng = np.random.default_rng([spec.seed, 0])
    args = (spec.map_depth, spec.hidden_dim, rng, spec.map_gain)
    f_a = RandomFeatureMap(spec.latent_dim, spec.audio_dim, *args)
    f_v = RandomFeatureMap(spec.latent_dim, spec.video_dim, *args)
    return f_a, f_v


def generate(spec: SyntheticSpec) -> tuple[PairedDataset, np.ndarray]:
    """Return ``(dataset, z)``; row i of both matrices is generated from ``z[i]``."""
    f_a, f_v = _maps(spec)
    rng = np.random.default_rng([spec.seed, 1])
    z = rng.standard_normal((spec.n_pairs, spec.latent_dim))
    audio = f_a(z)
    video = f_v(z)
    if spec.noise_sigma > 0:
        audio = audio + spec.noise_sigma * rng.standard_normal(audio.shape)
        video = video + spec.noise_sigma * rng.standard_normal(video.shape)
    manifest = PairManifest([PairEntry("synthetic", i, i, i, "train") for i in range(spec.n_pairs)])
    ds = PairedDataset(
        EmbeddingMatrix("audio", audio.astype(np.float32), spec.audio_dim),
        EmbeddingMatrix("video", video.astype(np.float32), spec.video_dim),
        manifest,
    )
    return ds, z


def derangement(n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniformly random permutation without fixed points (rejection sampling)."""
    if n < 2:
        raise ValidationError("a derangement needs at least 2 elements")
    while True:
        perm = rng.permutation(n)
        if not np.any(perm == np.arange(n)):
            return perm


def shuffle_negatives(dataset: PairedDataset, seed: int = 0) -> PairedDataset:
    """Re-pair every audio row with a video row other than its true partner."""
    entries = dataset.manifest.entries
    if len(entries) < 2:
        raise ValidationError("shuffle_negatives needs at least 2 pairs")
    perm = derangement(len(entries), np.random.default_rng(seed))
    shuffled = [
        PairEntry(e.source_id, e.window_index, e.audio_row, entries[perm[i]].video_row, e.split)
        for i, e in enumerate(entries)
    ]
    return PairedDataset(dataset.audio, dataset.video, PairManifest(shuffled))


def generate_prior_pairs(n: int, *, cond_dim: int = VIDEO_DIM, target_dim: int = VIDEO_DIM,
                         latent_dim: int = 32, seed: int = 0, map_gain: float = 0.5):
    """Condition/target pairs where the target is a fixed function of the condition.

    Conditions are unit vectors on a ``latent_dim``-dimensional manifold (like
    projected audio embeddings); targets are ``fixed_map(condition)``.
    Returns ``(conditions, targets)`` as float32 arrays.
    """
    rng = np.random.default_rng([seed, 2])
    f_c = RandomFeatureMap(latent_dim, cond_dim, 2, 128, rng)
    fixed_map = RandomFeatureMap(cond_dim, target_dim, 1, 256, rng, map_gain)
    z = np.random.default_rng([seed, 3]).standard_normal((n, latent_dim))
    c = f_c(z)
    c /= np.linalg.norm(c, axis=1, keepdims=True)
    # conditions are unit-norm; rescale so the map's hidden layer sees O(1) inputs
    t = fixed_map(c * np.sqrt(cond_dim))
    return c.astype(np.float32), t.astype(np.float32)
