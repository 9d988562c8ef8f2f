import numpy as np
import pytest
from _helpers import preset_data

from mixexperts import EMConfig, InputError, MEModelSpec, ecm_fit, map_crosstab, multi_start, simulate, standard_errors
from mixexperts.em import e_step, pack_model, unpack_model
from mixexperts.experts import BinomialExpert, MarkovChainExpert, PlackettLuceExpert, make_family


def _nondecreasing(trace, slack=1e-8):
    return bool(np.all(np.diff(trace) >= -slack))


def test_responsibilities_on_simplex():
    preset, data, _ = preset_data("gaussian-gated", 3)
    r = e_step(preset.model, data)
    np.testing.assert_allclose(r.sum(1), 1.0, atol=1e-14)
    assert np.all(r >= 0)


def test_gated_gaussian_recovers_truth():
    preset, data, _ = preset_data("gaussian-gated", 1, n=2000)
    fit = multi_start(data, EMConfig("c", preset.model.family, 2, seed=1), 3)
    assert fit.converged and _nondecreasing(fit.loglik_trace)
    centers = sorted(np.round(e.mu, 1).tolist() for e in fit.model.experts)
    np.testing.assert_allclose(centers, [[0, 0], [3, 3]], atol=0.2)
    slope = abs(fit.model.gating.gamma[1, 1])
    assert slope == pytest.approx(2.8, abs=0.4)


@pytest.mark.parametrize(
    "family,variant,experts,weights",
    [
        (make_family("binomial", trials=8), "a", (BinomialExpert(0.2), BinomialExpert(0.7)), [0.3, 0.7]),
        (
            make_family("plackett-luce", n_candidates=4),
            "a",
            (PlackettLuceExpert([0.4, 0.3, 0.2, 0.1]), PlackettLuceExpert([0.1, 0.2, 0.3, 0.4])),
            [0.5, 0.5],
        ),
        (
            make_family("markov", n_states=2, n_times=6),
            "a",
            (MarkovChainExpert([[0.9, 0.1], [0.2, 0.8]]), MarkovChainExpert([[0.3, 0.7], [0.6, 0.4]])),
            [0.5, 0.5],
        ),
    ],
)
def test_traces_nondecreasing_across_families(family, variant, experts, weights, rng):
    model = MEModelSpec(variant, family, experts, weights=weights)
    data, _ = simulate(model, 300, rng)
    fit = ecm_fit(data, EMConfig(variant, family, 2, seed=0))
    assert _nondecreasing(fit.loglik_trace)


def test_regression_variant_d_runs():
    preset, data, _ = preset_data("regression-design2", 0, n=300)
    fit = multi_start(data, EMConfig("d", preset.model.family, 2, seed=0), 3)
    assert _nondecreasing(fit.loglik_trace)
    assert fit.model.gating.gamma.shape == (2, 2)


def test_multi_start_deterministic_and_best():
    preset, data, _ = preset_data("binomial-t5", 0)
    cfg = EMConfig("a", preset.model.family, 2, seed=7)
    a = multi_start(data, cfg, 4)
    b = multi_start(data, cfg, 4)
    assert a.loglik == b.loglik
    logliks = [r["loglik"] for r in a.restarts_summary if r["loglik"] is not None]
    assert a.loglik == max(logliks)


def test_standard_errors_single_binomial_closed_form(rng):
    # score of observation i is (y_i - T p) / (p (1 - p)), so the outer-product
    # information is sum_i (y_i - T p)^2 / (p (1 - p))^2 at the MLE p = mean(y) / T
    family = make_family("binomial", trials=5)
    y = rng.integers(0, 6, size=120)
    data = family.dataset(y)
    fit = ecm_fit(data, EMConfig("a", family, 1, seed=0))
    p = y.mean() / 5
    assert fit.model.experts[0].pi == pytest.approx(p, rel=1e-7)
    info = ((y - 5 * p) ** 2).sum() / (p * (1 - p)) ** 2
    se = standard_errors(fit.model, data)
    assert se.se[-1] == pytest.approx(1 / np.sqrt(info), rel=1e-4)


def test_pack_unpack_roundtrip():
    preset = preset_data("gaussian-gated", 0)[0]
    vec = pack_model(preset.model)
    back = unpack_model(vec, preset.model)
    np.testing.assert_array_equal(pack_model(back), vec)


def test_map_crosstab_counts():
    levels, table = map_crosstab(np.array([0, 0, 1, 1, 1]), np.array([0.0, 1.0, 1.0, 1.0, 0.0]), 2)
    np.testing.assert_array_equal(levels, [0, 1])
    np.testing.assert_array_equal(table, [[1, 1], [1, 2]])


def test_invalid_config_rejected():
    with pytest.raises(InputError):
        EMConfig("a", make_family("binomial", trials=2), 0)
    with pytest.raises(InputError):
        EMConfig("b", make_family("binomial", trials=2), 2)
    with pytest.raises(InputError):
        multi_start(None, EMConfig("a", make_family("binomial", trials=2), 2), 0)
