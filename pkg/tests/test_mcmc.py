import dataclasses

import numpy as np
import pytest
from scipy import optimize
from _helpers import batch_means_se, preset_data

from mixexperts import InputError, MCMCConfig, MEModelSpec, PriorSpec, gelman_rubin, hpd_interval, run_chain, simulate
from mixexperts.core import Gating
from mixexperts.experts import BinomialExpert, MarkovChainExpert, make_family
from mixexperts.mcmc import (
    chain_seeds,
    default_mh_proposal,
    drum_update_gamma,
    mh_update_gamma,
    regression_preset,
    resolve_label_switching,
    symmetrize,
)
from mixexperts.scale_mixture import mixture_table


def _binomial_g1(rng, n=80, T=6, p=0.35):
    family = make_family("binomial", trials=T)
    data, _ = simulate(MEModelSpec("a", family, (BinomialExpert(p),), weights=[1.0]), n, rng)
    return family, data


def test_single_binomial_matches_beta_posterior(rng):
    family, data = _binomial_g1(rng)
    y = data.outcomes
    a, b = 1 + y.sum(), 1 + (6 - y).sum()
    chain = run_chain(data, PriorSpec.default(family, data), MCMCConfig("a", family, 1, iters=6000, burnin=1000), seed=0)
    draws = chain.arrays["pi"][:, 0]
    exact_mean = a / (a + b)
    exact_sd = np.sqrt(a * b / ((a + b) ** 2 * (a + b + 1)))
    assert abs(draws.mean() - exact_mean) <= 4 * batch_means_se(draws)
    assert draws.std() == pytest.approx(exact_sd, rel=0.05)


def test_single_markov_matches_dirichlet_posterior(rng):
    family = make_family("markov", n_states=2, n_times=8)
    xi = np.array([[0.8, 0.2], [0.3, 0.7]])
    data, _ = simulate(MEModelSpec("a", family, (MarkovChainExpert(xi),), weights=[1.0]), 60, rng)
    counts = family.counts(data).sum(0)
    alpha = 1.0 + counts
    chain = run_chain(data, PriorSpec.default(family, data), MCMCConfig("a", family, 1, iters=4000, burnin=500), seed=0)
    draws = chain.arrays["xi"][:, 0, :, 0]
    exact = alpha[:, 0] / alpha.sum(1)
    assert np.all(np.abs(draws.mean(0) - exact) <= 4 * batch_means_se(draws))


def test_prior_only_reproduces_prior(rng):
    family, data = _binomial_g1(rng)
    cfg = MCMCConfig("a", family, 2, iters=8000, burnin=0, prior_only=True)
    chain = run_chain(data, PriorSpec.default(family, data), cfg, seed=0)
    pi = chain.arrays["pi"].ravel()
    assert pi.mean() == pytest.approx(0.5, abs=0.02)
    assert pi.var() == pytest.approx(1 / 12, abs=0.005)
    w = chain.arrays["weights"][:, 0]
    assert w.mean() == pytest.approx(0.5, abs=0.02)


def test_run_chain_is_deterministic():
    preset, data, _ = preset_data("binomial-t5", 0)
    cfg = MCMCConfig("a", preset.model.family, 2, iters=300, burnin=100)
    prior = PriorSpec.default(preset.model.family, data)
    a = run_chain(data, prior, cfg, seed=5)
    b = run_chain(data, prior, cfg, seed=5)
    np.testing.assert_array_equal(a.arrays["pi"], b.arrays["pi"])
    np.testing.assert_array_equal(a.loglik, b.loglik)


def test_thinning_and_shapes():
    preset, data, _ = preset_data("gaussian-gated", 0)
    cfg = MCMCConfig("c", preset.model.family, 2, iters=400, burnin=100, thin=3, store_moments=True, store_allocations=True)
    chain = run_chain(data, PriorSpec.default(preset.model.family, data), cfg, seed=0)
    assert chain.n_draws == 100
    assert chain.arrays["gamma"].shape == (100, 2, 2)
    assert np.all(chain.arrays["gamma"][:, 0] == 0)
    assert chain.allocations.shape == (100, data.n)
    assert chain.moments["gamma_mean"].shape == (100, 1, 2)


def test_permutation_sampling_visits_both_labelings():
    preset, data, _ = preset_data("binomial-t5", 0)
    cfg = MCMCConfig("a", preset.model.family, 2, iters=2000, burnin=500)
    chain = run_chain(data, PriorSpec.default(preset.model.family, data), cfg, seed=0)
    first_high = chain.arrays["pi"][:, 0] > chain.arrays["pi"][:, 1]
    assert 0.3 < first_high.mean() < 0.7
    rel = resolve_label_switching(chain, seed=0)
    pi = rel.chain.arrays["pi"]
    frac = (pi[:, 0] > pi[:, 1]).mean()
    assert min(frac, 1 - frac) < 0.05
    # loglik is label-invariant and must be untouched
    np.testing.assert_array_equal(rel.chain.loglik, chain.loglik)


def test_relabeling_undoes_symmetrize():
    preset, data, _ = preset_data("regression-design2", 0)
    cfg = MCMCConfig("b", preset.model.family, 2, iters=1500, burnin=500, permute=False)
    chain = run_chain(data, regression_preset(data), cfg, seed=0)
    rel = resolve_label_switching(symmetrize(chain, 3), seed=0)
    a = np.sort(chain.arrays["beta"].mean(0)[:, 1])
    b = np.sort(rel.chain.arrays["beta"].mean(0)[:, 1])
    np.testing.assert_allclose(a, b, atol=0.05)


def test_relabeling_refuses_large_G():
    preset, data, _ = preset_data("binomial-t5", 0)
    chain = run_chain(
        data, PriorSpec.default(preset.model.family, data), MCMCConfig("a", preset.model.family, 2, iters=60, burnin=0), seed=0
    )
    with pytest.raises(InputError):
        resolve_label_switching(dataclasses.replace(chain, G=7))


def test_hpd_interval_normal_oracle(rng):
    lo, hi = hpd_interval(rng.normal(size=200_000))
    assert lo == pytest.approx(-1.96, abs=0.03)
    assert hi == pytest.approx(1.96, abs=0.03)


def test_hpd_interval_skewed_is_shortest(rng):
    x = rng.exponential(size=50_000)
    lo, hi = hpd_interval(x, 0.9)
    assert lo < 0.01
    assert hi == pytest.approx(-np.log(0.1), abs=0.05)


def test_gelman_rubin(rng):
    same = [rng.normal(size=(2000, 2)) for _ in range(4)]
    assert np.all(np.abs(gelman_rubin(same) - 1) < 0.01)
    shifted = [rng.normal(size=2000) + k for k in range(4)]
    assert gelman_rubin(shifted) > 1.5


def test_chain_seeds_independent():
    a, b = chain_seeds(0, 2)
    assert a.random() != b.random()


def _logit_fixture(rng, n=400):
    x = rng.normal(size=n)
    design = np.column_stack([np.ones(n), x])
    p = 1 / (1 + np.exp(-(-0.5 + 1.5 * x)))
    z = (rng.random(n) < p).astype(int)
    return design, z


@pytest.mark.parametrize("mode", ["drum-mh", "drum-aux", "mh"])
def test_gating_updates_target_logistic_posterior(rng, mode):
    # Laplace approximation of a well-identified logistic posterior as oracle
    design, z = _logit_fixture(rng)
    prior_mean, prior_cov = np.zeros(2), 10.0 * np.eye(2)
    def neg(b):
        eta = design @ b
        return -(z * eta - np.logaddexp(0, eta)).sum() + 0.5 * b @ b / 10.0

    mode_b = optimize.minimize(neg, np.zeros(2), method="BFGS").x
    gating = Gating.from_free([[0.0, 0.0]])
    proposal = default_mh_proposal(design, prior_cov)
    draws = []
    for it in range(3000):
        if mode == "mh":
            gating = mh_update_gamma(gating, z, design, prior_mean, prior_cov, proposal, rng)[0]
        else:
            gating = drum_update_gamma(gating, z, design, prior_mean, prior_cov, rng, mode=mode, table=mixture_table())[0]
        if it >= 500:
            draws.append(gating.gamma[1].copy())
    draws = np.array(draws)
    assert np.all(np.abs(draws.mean(0) - mode_b) <= 0.1)


def test_config_validation():
    fam = make_family("binomial", trials=2)
    with pytest.raises(InputError):
        MCMCConfig("a", fam, 2, iters=100, burnin=100)
    with pytest.raises(InputError):
        MCMCConfig("a", fam, 2, iters=100, burnin=10, thin=7)
    with pytest.raises(InputError):
        MCMCConfig("a", fam, 2, gating_sampler="gibbs")
    with pytest.raises(InputError):
        MCMCConfig("a", fam, 2, alias_jumps=True)


def test_regression_preset_conventions(rng):
    fam = make_family("regression")
    data = fam.dataset(rng.normal(size=50), rng.normal(size=50))
    s2 = np.var(data.outcomes[:, 0], ddof=1)
    assert regression_preset(data).experts.C0 == pytest.approx(1 / (1.25 * s2))
    assert regression_preset(data, "variance-scale").experts.C0 == pytest.approx(1.25 * s2)
    with pytest.raises(InputError):
        regression_preset(data, "other")
