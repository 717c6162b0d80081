import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from avclip.clip_align import ClipAlignModel, TrainConfig
from avclip.errors import ConfigError, DimensionError, ValidationError
from avclip.goal_prior import (
    CvaePrior,
    PriorConfig,
    decode,
    elbo_loss,
    encode,
    load_prior,
    loss_and_grads,
    map_audio_to_goal,
    reparameterize,
    sample_goal,
    save_prior,
    train_prior,
)
from avclip.synthetic_bench import generate_prior_pairs
from avclip.tensor_nn import flatten_params, grad_check, unflatten_params

SMALL = dict(latent_dim=4, hidden_dim=16, cond_dim=8, goal_dim=6)


def small_prior(seed=0, dtype=np.float32):
    return CvaePrior.init(PriorConfig(**SMALL, seed=seed), dtype=dtype)


def test_architecture_defaults():
    p = CvaePrior.init(PriorConfig())
    assert p.encoder.widths == [1024, 256, 256, 256]
    assert p.decoder.widths == [640, 256, 256, 512]
    assert len(p.encoder.norms) == 2 and len(p.decoder.norms) == 2


def test_encode_shapes_and_determinism():
    p = small_prior()
    rng = np.random.default_rng(0)
    g, c = rng.standard_normal((3, 6)), rng.standard_normal((3, 8))
    mu, lv = encode(p, g, c)
    assert mu.shape == lv.shape == (3, 4)
    mu2, lv2 = encode(p, g, c)
    assert mu.tobytes() == mu2.tobytes() and lv.tobytes() == lv2.tobytes()
    with pytest.raises(DimensionError):
        encode(p, g, c[:, :7])
    assert decode(p, mu, c).shape == (3, 6)
    with pytest.raises(DimensionError):
        decode(p, mu[:, :3], c)


def test_reparameterize_examples():
    mu, n = np.array([0.5, -1.0]), np.array([0.3, 2.0])
    np.testing.assert_array_equal(reparameterize(mu, np.zeros(2), np.zeros(2)), mu)
    np.testing.assert_array_equal(reparameterize(mu, np.zeros(2), n), mu + n)
    np.testing.assert_allclose(reparameterize(mu, np.full(2, 2 * math.log(2)), n), mu + 2 * n, rtol=1e-15)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, 5, elements=st.floats(-5, 5)), arrays(np.float64, 5, elements=st.floats(-5, 5)),
       arrays(np.float64, 5, elements=st.floats(-3, 3)), st.sampled_from([-2.0, 0.5, 3.0]))
def test_reparameterize_linear_in_noise(mu, lv, n, a):
    lhs = reparameterize(mu, lv, a * n) - mu
    rhs = a * (reparameterize(mu, lv, n) - mu)
    np.testing.assert_allclose(lhs, rhs, rtol=1e-12, atol=1e-12)


def test_elbo_examples():
    g = np.random.default_rng(0).standard_normal(512)
    total, recon, kl = elbo_loss(g, g, np.zeros(8), np.zeros(8), beta=0.5)
    assert kl == 0 and recon == 0 and total == 0
    _, _, kl = elbo_loss(g, g, np.ones(1), np.zeros(1))
    assert kl == pytest.approx(0.5)
    total, recon, kl = elbo_loss(g, g, np.ones(3), np.full(3, 0.7), beta=0.25)
    assert recon == 0 and total == pytest.approx(0.25 * kl)
    total, recon, _ = elbo_loss(np.zeros(4), np.full(4, 2.0), np.zeros(1), np.zeros(1))
    assert recon == 4.0
    with pytest.raises(ValidationError):
        elbo_loss(g, g + np.nan, np.zeros(1), np.zeros(1))


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(-10, 10)), arrays(np.float64, (3, 4), elements=st.floats(-10, 10)))
def test_kl_nonnegative(mu, lv):
    g = np.zeros((3, 2))
    assert elbo_loss(g, g, mu, lv)[2] >= 0


@pytest.mark.parametrize("recon", ["mse", "cosine"])
@pytest.mark.parametrize("seed", range(3))
def test_elbo_gradient(seed, recon):
    p = small_prior(seed, np.float64)
    rng = np.random.default_rng(seed + 5)
    g, c, n = rng.standard_normal((5, 6)), rng.standard_normal((5, 8)), rng.standard_normal((5, 4))
    like = p.params()
    keys = list(like)

    def f(vec):
        p.load_params(unflatten_params(vec, like, keys))
        (total, _, _), grads = loss_and_grads(p, g, c, n, beta=0.3, recon=recon)
        return total, flatten_params(grads, keys)

    p0 = flatten_params(like, keys)
    idx = list(rng.choice(p0.size, 200, replace=False))
    assert grad_check(f, p0, step=1e-6, indices=idx) < 1e-3


def test_sample_goal_reproducible_and_distinct():
    p = small_prior()
    c = np.random.default_rng(1).standard_normal(8)
    s = sample_goal(p, c, seed=3, n_samples=3)
    assert s.shape == (3, 6)
    assert s.tobytes() == sample_goal(p, c, seed=3, n_samples=3).tobytes()
    assert len({row.tobytes() for row in s}) == 3
    # sample k does not depend on how many samples were requested
    np.testing.assert_allclose(sample_goal(p, c, seed=3, n_samples=1)[0], s[0], rtol=1e-5, atol=1e-6)
    batch = sample_goal(p, np.stack([c, c]), seed=3, n_samples=2)
    assert batch.shape == (2, 2, 6)


def test_map_audio_to_goal_shapes():
    clip = ClipAlignModel.init(TrainConfig(audio_dim=12, video_dim=10, hidden_dim=16, shared_dim=8))
    prior = small_prior()
    x = np.random.default_rng(0).standard_normal((4, 12)).astype(np.float32)
    out = map_audio_to_goal(clip, prior, x, seed=9)
    assert out.shape == (4, 6) and np.all(np.isfinite(out))
    assert out.tobytes() == map_audio_to_goal(clip, prior, x, seed=9).tobytes()
    assert map_audio_to_goal(clip, prior, x[0], seed=9).shape == (6,)


def test_train_prior_deterministic():
    c, t = generate_prior_pairs(64, cond_dim=8, target_dim=6, latent_dim=3)
    cfg = PriorConfig(**SMALL, batch_size=16, epochs=3, seed=2)
    _, h1 = train_prior(c, t, cfg)
    _, h2 = train_prior(c, t, cfg)
    assert h1 == h2 and len(h1) == 12
    assert all(row[4] >= 0 for row in h1)


def test_train_prior_errors():
    c, t = generate_prior_pairs(8, cond_dim=8, target_dim=6)
    with pytest.raises(ValidationError):
        train_prior(c, t, PriorConfig(**SMALL, batch_size=16))
    with pytest.raises(DimensionError):
        train_prior(c, t[:4], PriorConfig(**SMALL, batch_size=2))
    with pytest.raises(ConfigError):
        PriorConfig(recon="l1")


def test_beta_zero_reduces_reconstruction():
    c, t = generate_prior_pairs(512, cond_dim=32, target_dim=16, latent_dim=4, seed=1)
    cfg = PriorConfig(latent_dim=8, hidden_dim=64, cond_dim=32, goal_dim=16, kl_weight=0.0,
                      batch_size=64, epochs=40, seed=0)
    _, h = train_prior(c, t, cfg)
    first = np.mean([r[3] for r in h[:8]])
    last = np.mean([r[3] for r in h[-8:]])
    assert last < 0.1 * first


def test_checkpoint_roundtrip(tmp_path):
    p = small_prior()
    save_prior(tmp_path / "p.ckpt", p)
    back = load_prior(tmp_path / "p.ckpt")
    assert back.describe() == p.describe()
    c = np.ones((1, 8), np.float32)
    np.testing.assert_array_equal(sample_goal(back, c, 1), sample_goal(p, c, 1))
