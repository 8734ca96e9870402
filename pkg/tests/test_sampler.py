import numpy as np
import pytest

from lpt_seqopt.model import LPT, ModelConfig, PropertySpec
from lpt_seqopt.sampler import (
    ChainBank,
    GradCounter,
    LangevinConfig,
    NonFiniteGradient,
    clip_rows,
    guidance_multipliers,
    langevin_step,
    run_chains,
    sample_conditional,
    sample_posterior,
)
from lpt_seqopt.seqcore import Vocabulary


def std_normal(z):
    return -0.5 * (z * z).sum(axis=1), -z


def conjugate_model(w=(0.8, -1.3), bias=0.4, sigma2=0.5):
    """Identity prior plus a linear head: p(z0 | y) is Gaussian in closed form."""
    vocab = Vocabulary(tuple("AB"), 2)
    cfg = ModelConfig(k_tokens=1, k_dim=2, embed=4, heads=1, layers=1, prior="identity",
                      predictor_layers=1, properties=[PropertySpec(sigma2=sigma2)])
    m = LPT(vocab, cfg, seed=0)
    m.params["predictor.h0.l0.w"] = np.array(w, dtype=np.float64)[:, None]
    m.params["predictor.h0.l0.b"] = np.array([bias])
    return m


def analytic_posterior(w, bias, sigma2, y):
    w = np.asarray(w, dtype=np.float64)
    prec = np.eye(len(w)) + np.outer(w, w) / sigma2
    cov = np.linalg.inv(prec)
    return cov @ w * (y - bias) / sigma2, cov


def test_config_validation():
    with pytest.raises(ValueError):
        LangevinConfig(step_size=-1)
    with pytest.raises(ValueError):
        LangevinConfig(n_steps=0)
    with pytest.raises(ValueError):
        LangevinConfig(guidance_weight=0)


def test_zero_noise_step_is_gradient_ascent():
    cfg = LangevinConfig(step_size=0.1, noise_scale=0.0)
    z = np.array([[1.0, -2.0]])
    out = langevin_step(std_normal, z, cfg, np.random.default_rng(0))
    assert np.allclose(out, z * 0.9)


def test_zero_noise_increases_log_density():
    cfg = LangevinConfig(step_size=0.05, noise_scale=0.0)
    m = conjugate_model()
    y = np.array([[2.0]])
    z = np.array([[1.5, 1.5]])
    prev = m.log_joint(z, y=y)[0]
    for _ in range(30):
        z = langevin_step(lambda v: m.joint_logpost_grad(v, None, y), z, cfg, None)
        cur = m.log_joint(z, y=y)[0]
        assert cur >= prev - 1e-12
        prev = cur


def test_clip_rows_caps_each_row():
    g = np.array([[300.0, 400.0], [0.3, 0.4]])
    out = clip_rows(g, 100.0)
    assert np.allclose(np.linalg.norm(out, axis=1), [100.0, 0.5])


def test_non_finite_gradient_raises():
    def bad(z):
        g = -z
        g[1] = np.nan
        return None, g

    with pytest.raises(NonFiniteGradient) as err:
        langevin_step(bad, np.zeros((3, 2)), LangevinConfig(), np.random.default_rng(0))
    assert err.value.chains == [1]


def test_standard_normal_target_statistics():
    rng = np.random.default_rng(0)
    cfg = LangevinConfig(step_size=0.05, n_steps=400)
    z = run_chains(std_normal, rng.standard_normal((4000, 2)) * 3, cfg, rng)
    # unadjusted Langevin on N(0, 1) has stationary variance 1 / (1 - s/2)
    assert np.allclose(z.mean(axis=0), 0.0, atol=0.06)
    assert np.allclose(z.var(axis=0), 1.0 / (1.0 - 0.025), rtol=0.07)


def test_counter_counts_per_chain_evaluations():
    rng = np.random.default_rng(0)
    c = GradCounter()
    run_chains(std_normal, np.zeros((7, 3)), LangevinConfig(n_steps=5), rng, c)
    assert c.count == 35


def test_persistent_bank_warm_starts():
    rng = np.random.default_rng(1)
    m = conjugate_model()
    bank = ChainBank.gaussian(4, 2, rng, persistent=True)
    cfg = LangevinConfig(step_size=0.01, n_steps=2)
    sample_posterior(m, None, np.ones((4, 1)), bank, cfg, rng)
    after_first = bank.states.copy()
    c = GradCounter()
    sample_posterior(m, None, np.ones((2, 1)), bank, cfg, rng, idx=[0, 2], counter=c)
    assert c.count == 4
    assert np.array_equal(bank.ages, [4, 2, 4, 2])
    # untouched chains keep their states; moved ones stay close to where they were
    assert np.array_equal(bank.states[[1, 3]], after_first[[1, 3]])
    assert np.abs(bank.states[[0, 2]] - after_first[[0, 2]]).max() < 1.0


def test_fresh_bank_redraws():
    rng = np.random.default_rng(2)
    bank = ChainBank(np.full((3, 2), 50.0), np.zeros(3, dtype=np.int64), persistent=False)
    start = bank.starts(np.arange(3), rng)
    assert np.abs(start).max() < 10


def test_conjugate_posterior_short():
    w, b, s2, y = (0.8, -1.3), 0.4, 0.5, 1.7
    mean, cov = analytic_posterior(w, b, s2, y)
    m = conjugate_model(w, b, s2)
    rng = np.random.default_rng(3)
    cfg = LangevinConfig(step_size=0.02, n_steps=1500)
    bank = ChainBank.gaussian(2000, 2, rng)
    sample_posterior(m, None, np.full((2000, 1), y), bank, cfg, rng)
    z = bank.states
    assert np.allclose(z.mean(axis=0), mean, atol=0.05)
    assert np.allclose(np.cov(z.T), cov, atol=0.04)


@pytest.mark.parametrize("lam,sigma2", [(1.0, 1.0), (9.0, 1.0), (9.0, 0.25)])
def test_guidance_is_target_precision(lam, sigma2):
    # conditional target p0(z0) N(y; s(z), 1/lam) whatever the training sigma2
    w, b, y = (1.0, 0.0), 0.0, 2.0
    m = conjugate_model(w, b, sigma2)
    rng = np.random.default_rng(4)
    cfg = LangevinConfig(step_size=0.02, n_steps=1500, guidance_weight=lam)
    bank = ChainBank.gaussian(2000, 2, rng)
    sample_conditional(m, np.array([y]), bank, cfg, rng)
    mean, cov = analytic_posterior(w, b, 1.0 / lam, y)
    assert np.allclose(bank.states.mean(axis=0), mean, atol=0.05)
    assert np.var(bank.states[:, 0]) == pytest.approx(cov[0, 0], rel=0.15)


def test_guidance_multipliers():
    m = conjugate_model(sigma2=0.25)
    assert guidance_multipliers(m, 8.0).tolist() == [2.0]


def test_large_guidance_zero_noise_reduces_residual():
    m = conjugate_model((1.0, 0.5), 0.0, 1.0)
    cfg = LangevinConfig(step_size=0.01, noise_scale=0.0, guidance_weight=50.0)
    y = np.array([[3.0]])
    mult = guidance_multipliers(m, 50.0)
    z = np.zeros((1, 2))
    prev = np.inf
    for _ in range(40):
        z = langevin_step(lambda v: m.joint_logpost_grad(v, None, y, mult), z, cfg, None)
        resid = abs(3.0 - m.predict(m.prior_forward(z))[0, 0])
        assert resid <= prev + 1e-12
        prev = resid
    assert prev < 0.5
