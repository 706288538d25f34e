from __future__ import annotations

import numpy as np
import pytest

from gradguide.dataset import GaussianDist, mean_off_support_ratio, random_basis
from gradguide.guidance import BetaRule, GuidanceSpec
from gradguide.sampler import (
    SamplerConfig,
    analytic_posterior,
    backward_sample,
    guided_posterior,
    naive_offsupport_expectation,
    oracle_sample,
    sample,
    save_batch,
)
from gradguide.schedule import NoiseSchedule
from gradguide.score import FullLinear

S = NoiseSchedule.constant(1.0, 10.0)


def gaussian8(seed=0):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((8, 8))
    cov = A @ A.T / 8 + 0.2 * np.eye(8)
    cov /= np.linalg.eigvalsh(cov).max()
    return GaussianDist(rng.standard_normal(8) * 0.5, cov)


# -- analytic posterior -------------------------------------------------------

def test_posterior_example():
    p = analytic_posterior(GaussianDist(np.zeros(3), np.eye(3)), np.eye(3)[0], 1.0, 1.0)
    np.testing.assert_allclose(p.mean, [0.5, 0, 0], atol=1e-15)
    np.testing.assert_allclose(p.cov, np.eye(3) - 0.5 * np.outer(np.eye(3)[0], np.eye(3)[0]), atol=1e-15)


def test_posterior_on_target_keeps_mean():
    st = gaussian8()
    g = np.arange(8.0)
    p = analytic_posterior(st, g, g @ st.mean, 0.5)
    np.testing.assert_allclose(p.mean, st.mean, atol=1e-12)
    assert g @ p.cov @ g < g @ st.cov @ g


def test_posterior_subspace_stays_in_span():
    basis = random_basis(7, 3, 1)
    cu = np.diag([1.0, 0.5, 2.0])
    st = GaussianDist(basis.A @ np.ones(3), basis.A @ cu @ basis.A.T)
    p = analytic_posterior(st, np.linspace(-1, 2, 7), 4.0, 0.7)
    assert np.linalg.norm(basis.orthogonal(p.mean)) < 1e-12
    Q = np.eye(7) - basis.projector()
    assert np.linalg.norm(Q @ p.cov) < 1e-12


def test_guided_posterior_rules():
    m = FullLinear(np.zeros(2), np.eye(2))
    assert guided_posterior(m, GuidanceSpec.unguided()).mean.tolist() == [0.0, 0.0]
    for spec in (GuidanceSpec("naive", [1.0, 0.0], 1.0),
                 GuidanceSpec("loss", [1.0, 0.0], 1.0, beta_rule=BetaRule.constant(1.0)),
                 GuidanceSpec("loss", [1.0, 0.0], 1.0, gamma=2.0)):
        with pytest.raises(ValueError):
            guided_posterior(m, spec)


# -- oracle sampler ------------------------------------------------------------

def test_oracle_zero_covariance():
    b = oracle_sample(GaussianDist([1.0, -2.0], np.zeros((2, 2))), 10, 3)
    np.testing.assert_array_equal(b.samples, np.tile([1.0, -2.0], (10, 1)))


def test_oracle_standard_normal_covariance():
    b = oracle_sample(GaussianDist(np.zeros(4), np.eye(4)), 100_000, 0)
    assert np.linalg.norm(b.cov - np.eye(4)) < 0.05


def test_oracle_rank_one():
    v = np.array([1.0, 2.0, -1.0])
    mu = np.array([0.5, 0.0, 1.0])
    b = oracle_sample(GaussianDist(mu, np.outer(v, v)), 500, 1)
    d = b.samples - mu
    resid = d - np.outer(d @ v / (v @ v), v)
    assert np.abs(resid).max() < 1e-10


def test_oracle_deterministic_and_rejects_indefinite():
    st = gaussian8()
    a = oracle_sample(st, 50, 9)
    b = oracle_sample(st, 50, 9)
    np.testing.assert_array_equal(a.samples, b.samples)
    assert not np.array_equal(a.samples, oracle_sample(st, 50, 10).samples)
    # bypass GaussianDist validation to reach the sampler's own check
    bad = GaussianDist.__new__(GaussianDist)
    object.__setattr__(bad, "mean", np.zeros(2))
    object.__setattr__(bad, "cov", np.diag([1.0, -1.0]))
    with pytest.raises(ValueError, match="eigenvalue"):
        oracle_sample(bad, 5, 0)


# -- backward SDE ---------------------------------------------------------------

def test_sde_unguided_matches_pretraining_distribution():
    st = gaussian8()
    m = FullLinear(st.mean, st.cov)
    b = backward_sample(m, GuidanceSpec.unguided(), SamplerConfig(n_steps=400, batch=20_000, seed=1), S)
    assert np.linalg.norm(b.mean - st.mean) < 0.05 * np.sqrt(8)
    assert np.linalg.norm(b.cov - st.cov) < 0.1


def test_sde_guided_matches_analytic_posterior():
    st = gaussian8(2)
    m = FullLinear(st.mean, st.cov)
    g = np.linspace(-1, 1, 8)
    spec = GuidanceSpec("loss", g, 2.0, 1.0)
    post = guided_posterior(m, spec)
    b = backward_sample(m, spec, SamplerConfig(n_steps=400, batch=20_000, seed=4), S)
    assert np.linalg.norm(b.mean - post.mean) < 0.05 * np.sqrt(8)
    assert np.linalg.norm(b.cov - post.cov) < 0.1
    # the oracle path gives the same law
    o = sample(m, spec, SamplerConfig(batch=20_000, seed=4, mode="analytic_oracle"), S)
    assert np.linalg.norm(o.mean - b.mean) < 0.05 * np.sqrt(8)
    assert np.linalg.norm(o.cov - b.cov) < 0.1


def test_sde_subspace_guided_stays_near_span(subspace64, rng):
    basis, _, m = subspace64
    spec = GuidanceSpec("loss", rng.standard_normal(64), 3.0, 1.0, BetaRule("subspace_theory"))
    b = backward_sample(m, spec, SamplerConfig(batch=1000, seed=2), S)
    assert mean_off_support_ratio(b.samples, basis) < 0.05


def test_span_confinement_improves_with_horizon(subspace64):
    # fixed step size so only the horizon changes
    basis, _, m = subspace64
    spec = GuidanceSpec("loss", basis.A[:, 0], 1.0, 1.0, BetaRule("subspace_theory"))
    r5 = mean_off_support_ratio(backward_sample(m, spec, SamplerConfig(T=5, n_steps=100, batch=2000, seed=3), S).samples, basis)
    r10 = mean_off_support_ratio(backward_sample(m, spec, SamplerConfig(T=10, n_steps=200, batch=2000, seed=3), S).samples, basis)
    assert r10 <= r5 + 0.005


def test_determinism_across_threads():
    st = gaussian8()
    m = FullLinear(st.mean, st.cov)
    spec = GuidanceSpec("loss", np.ones(8), 1.0)
    cfg = SamplerConfig(n_steps=50, batch=1300, seed=7)
    a = backward_sample(m, spec, cfg, S)
    b = backward_sample(m, spec, SamplerConfig(n_steps=50, batch=1300, seed=7, threads=3), S)
    np.testing.assert_array_equal(a.samples, b.samples)
    # a prefix batch reproduces the leading trajectories
    c = backward_sample(m, spec, SamplerConfig(n_steps=50, batch=700, seed=7), S)
    np.testing.assert_array_equal(c.samples, a.samples[:700])


def test_step_refinement():
    st = gaussian8(5)
    m = FullLinear(st.mean, st.cov)
    spec = GuidanceSpec("loss", np.ones(8) / 3, 1.0)
    a = backward_sample(m, spec, SamplerConfig(n_steps=200, batch=20_000, seed=8), S)
    b = backward_sample(m, spec, SamplerConfig(n_steps=400, batch=20_000, seed=8), S)
    assert np.linalg.norm(a.mean - b.mean) < 0.05 * np.sqrt(8)


def test_sampler_config_validation():
    for kw in ({"T": 0}, {"n_steps": 0}, {"batch": 0}, {"mode": "ode"}, {"threads": 0}):
        with pytest.raises(ValueError):
            SamplerConfig(**kw)
    m = FullLinear(np.zeros(2), np.eye(2))
    with pytest.raises(ValueError, match="horizon"):
        backward_sample(m, GuidanceSpec.unguided(), SamplerConfig(T=20), S)


def test_final_noise_flag_changes_only_last_step():
    m = FullLinear(np.zeros(2), np.eye(2))
    a = backward_sample(m, GuidanceSpec.unguided(), SamplerConfig(n_steps=10, batch=4, seed=0), S)
    b = backward_sample(m, GuidanceSpec.unguided(), SamplerConfig(n_steps=10, batch=4, seed=0, final_noise=True), S)
    diff = b.samples - a.samples
    # the extra term is sqrt(dt) times a unit normal per coordinate
    assert 0 < np.abs(diff).max() < 5 * np.sqrt(1.0)


def test_save_batch_sidecar(tmp_path):
    b = oracle_sample(GaussianDist(np.zeros(2), np.eye(2)), 3, 0)
    save_batch(tmp_path / "s.csv", b, {"note": 1})
    assert (tmp_path / "s.csv").exists()
    assert '"note": 1' in (tmp_path / "s.csv.json").read_text()


# -- naive off-support coefficient ---------------------------------------------

def test_naive_expectation_lower_bound():
    for T in (1.0, 2.0, 5.0, 10.0):
        for b0 in (0.3, 1.0, 4.0):
            assert naive_offsupport_expectation(b0, T) > np.exp(-2.5) * b0


def test_naive_expectation_quadrature_agreement_and_linearity():
    c = naive_offsupport_expectation(1.0, 5.0)
    assert abs(c - naive_offsupport_expectation(1.0, 5.0, nodes=200)) < 1e-6
    assert naive_offsupport_expectation(3.0, 5.0) == pytest.approx(3 * c, rel=1e-12)
    assert naive_offsupport_expectation(0.0, 5.0) == 0.0


def test_naive_expectation_frozen_values():
    # frozen from an independent mpmath tanh-sinh evaluation in the original variables
    assert naive_offsupport_expectation(1.0, 2.0) == pytest.approx(0.37444, abs=1e-5)
    assert naive_offsupport_expectation(1.0, 5.0) == pytest.approx(0.43544, abs=1e-5)
    assert naive_offsupport_expectation(1.0, 10.0) == pytest.approx(0.44555, abs=1e-5)


def test_naive_expectation_requires_long_horizon():
    with pytest.raises(ValueError):
        naive_offsupport_expectation(1.0, 0.5)
