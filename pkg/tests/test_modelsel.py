import math

import numpy as np
import pytest
from scipy import stats
from scipy.special import logsumexp

from mixexperts import (
    EMConfig,
    Gating,
    ImportanceSamplingWarning,
    InputError,
    MCMCConfig,
    MEModelSpec,
    PriorSpec,
    aicm,
    bic,
    build_importance_density,
    compare,
    ecm_fit,
    exact_log_marglik_markov_g1,
    is_log_marglik,
    run_chain,
    simulate,
)
from mixexperts.experts import BinomialExpert, GaussianExpert, GaussianPrior, MarkovChainExpert, make_family
from mixexperts.modelsel import n_free_params, prequential_log_marglik_markov_g1


def test_bic_formula(rng):
    family = make_family("binomial", trials=4)
    model = MEModelSpec("a", family, (BinomialExpert(0.2), BinomialExpert(0.8)), weights=[0.5, 0.5])
    data, _ = simulate(model, 150, rng)
    fit = ecm_fit(data, EMConfig("a", family, 2, seed=0))
    assert n_free_params(fit.model) == 3
    assert bic(fit, data) == pytest.approx(-2 * fit.loglik + 3 * math.log(150), rel=1e-14)
    fit.converged = False
    with pytest.raises(InputError):
        bic(fit, data)


def test_aicm_formula():
    ll = np.array([-10.0, -12.0, -11.0, -9.0, -10.5, -11.5, -10.2, -9.8, -10.9, -11.1])
    assert aicm(ll) == pytest.approx(2 * (ll.mean() - ll.var(ddof=1)))
    with pytest.raises(InputError):
        aicm(ll[:5])


@pytest.mark.parametrize("history,n_times", [("prev", None), ("prev_t", 4)])
def test_exact_markov_marglik_matches_prequential(rng, history, n_times):
    family = make_family("markov", n_states=3, history=history, n_times=n_times)
    J = family.J
    expert = MarkovChainExpert(rng.dirichlet(np.ones(3), size=J), history=history)
    data, _ = simulate(MEModelSpec("a", family, (expert,), weights=[1.0]), 30, rng)
    prior = PriorSpec.default(family, data).experts
    exact = exact_log_marglik_markov_g1(family, data, prior)
    seq = prequential_log_marglik_markov_g1(family, data, prior)
    assert exact == pytest.approx(seq, abs=1e-9)


def _markov_g1_chain(rng):
    family = make_family("markov", n_states=3, n_times=4)
    expert = MarkovChainExpert(rng.dirichlet(np.ones(3), size=3))
    data, _ = simulate(MEModelSpec("a", family, (expert,), weights=[1.0]), 50, rng)
    prior = PriorSpec.default(family, data)
    chain = run_chain(data, prior, MCMCConfig("a", family, 1, iters=1500, burnin=500, store_moments=True), seed=0)
    return family, data, prior, chain


def test_is_with_deliberately_wider_density_still_agrees(rng):
    family, data, prior, chain = _markov_g1_chain(rng)
    exact = exact_log_marglik_markov_g1(family, data, prior.experts)
    q = build_importance_density(chain)
    q.moments["dir_alpha"] = q.moments["dir_alpha"] * 0.5
    est = is_log_marglik(data, prior, q, 10_000, 1)
    assert est.std_error > 1e-4
    assert abs(est.log_marglik - exact) <= 3 * est.std_error
    assert est.ess < 10_000


def _log_grid_mean(logf, axes):
    # midpoint rule on a uniform grid, in log space
    cell = sum(math.log(a[1] - a[0]) for a in axes)
    return logsumexp(logf) + cell


def test_is_gaussian_single_component_against_quadrature(rng):
    family = make_family("gaussian")
    y = rng.normal(1.0, 1.5, size=(15, 1))
    data = family.dataset(y)
    gp = GaussianPrior([0.0], [[4.0]], 3.0, [[2.0]])
    prior = PriorSpec.default(family, data, experts=gp)
    chain = run_chain(data, prior, MCMCConfig("a", family, 1, iters=3000, burnin=500, store_moments=True), seed=0)
    est = is_log_marglik(data, prior, build_importance_density(chain), 10_000, 2)

    mu = np.linspace(-3, 5, 801)
    s2 = np.linspace(0.05, 15, 1500)
    M, S = np.meshgrid(mu, s2, indexing="ij")
    loglik = stats.norm.logpdf(y[:, 0][:, None, None], M, np.sqrt(S)).sum(0)
    logprior = stats.norm.logpdf(M, 0.0, 2.0) + stats.invgamma.logpdf(S, 1.5, scale=1.0)
    oracle = _log_grid_mean(loglik + logprior, (mu, s2))
    assert abs(est.log_marglik - oracle) <= 3 * est.std_error + 1e-3


def test_is_binomial_two_components_against_quadrature(rng):
    family = make_family("binomial", trials=5)
    truth = MEModelSpec("a", family, (BinomialExpert(0.25), BinomialExpert(0.8)), weights=[0.5, 0.5])
    data, _ = simulate(truth, 60, rng)
    prior = PriorSpec.default(family, data)
    cfg = MCMCConfig("a", family, 2, iters=3000, burnin=500, store_moments=True)
    chain = run_chain(data, prior, cfg, seed=0)
    est = is_log_marglik(data, prior, build_importance_density(chain), 20_000, 3)

    # uniform priors on (eta, p1, p2): the marginal likelihood is the mean likelihood over the cube
    k = 140
    grid = (np.arange(k) + 0.5) / k
    counts = np.bincount(data.outcomes, minlength=6)
    pmf = stats.binom.pmf(np.arange(6)[:, None], 5, grid[None])  # (6, k)
    total = []
    for eta in grid:
        mix = eta * pmf[:, :, None] + (1 - eta) * pmf[:, None, :]
        total.append(logsumexp(np.tensordot(counts, np.log(mix), axes=1)))
    oracle = logsumexp(total) - 3 * math.log(k)
    assert abs(est.log_marglik - oracle) <= 3 * est.std_error + 5e-3


def test_importance_density_warns_when_small():
    family = make_family("binomial", trials=5)
    truth = MEModelSpec("a", family, (BinomialExpert(0.25), BinomialExpert(0.8)), weights=[0.5, 0.5])
    data, _ = simulate(truth, 40, np.random.default_rng(0))
    chain = run_chain(
        data, PriorSpec.default(family, data), MCMCConfig("a", family, 2, iters=150, burnin=50, store_moments=True), seed=0
    )
    with pytest.warns(ImportanceSamplingWarning):
        build_importance_density(chain)


def test_importance_density_needs_moments():
    family = make_family("binomial", trials=5)
    data = family.dataset(np.array([0, 1, 2, 5, 4]))
    chain = run_chain(data, PriorSpec.default(family, data), MCMCConfig("a", family, 1, iters=50, burnin=10), seed=0)
    with pytest.raises(InputError):
        build_importance_density(chain)


def test_gated_importance_density_evaluates_its_own_draws(rng):
    family = make_family("gaussian")
    experts = (GaussianExpert([0.0], [[1.0]]), GaussianExpert([3.0], [[1.0]]))
    truth = MEModelSpec("c", family, experts, gating=Gating.from_free([[-0.5, 1.5]]))
    data, _ = simulate(truth, rng.integers(2, size=80).astype(float), rng)
    prior = PriorSpec.default(family, data)
    chain = run_chain(data, prior, MCMCConfig("c", family, 2, iters=700, burnin=200, store_moments=True), seed=0)
    q = build_importance_density(chain)
    draws = q.sample(50, rng)
    assert np.all(np.isfinite(q.logpdf(draws)))
    est = is_log_marglik(data, prior, q, 500, 0)
    assert np.isfinite(est.log_marglik)


def test_compare_directions_and_failures():
    assert compare({"a": 10.0, "b": 5.0}, "bic")["winner"] == "b"
    assert compare({"a": 10.0, "b": 5.0}, "aicm")["winner"] == "a"
    assert compare({"a": None, "b": -3.0}, "log_marglik")["winner"] == "b"
    assert compare({"a": None}, "bic")["winner"] is None
    with pytest.raises(InputError):
        compare({"a": 1.0}, "dic")
