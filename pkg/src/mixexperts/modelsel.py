"""Model comparison: BIC, AICM and marginal likelihoods.

Marginal likelihoods of single-component Markov chain models are available
in closed form. Everything else goes through importance sampling with a
density assembled from the full-conditional moments stored by a
permutation-sampled chain: an equal-weight mixture, over retained sweeps, of
products of the conditionals each sweep drew from.
"""

import logging
import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln, logsumexp

from . import _expfam
from .core import GATED_VARIANTS, Gating, MEModelSpec, log_likelihood
from .em import pack_model
from .errors import ImportanceSamplingWarning, InputError, NumericalError
from .experts import MarkovFamily, history_index

log = logging.getLogger(__name__)


# ----------------------------------------------------------------------- BIC


def n_free_params(model):
    """Number of coordinates the EM optimizer moves for this model."""
    return int(pack_model(model).size)


def bic(fit, data):
    """``-2 loglik + k log n``; smaller is better. Refuses unconverged fits."""
    if not fit.converged:
        raise InputError("BIC needs a converged fit")
    return -2.0 * fit.loglik + n_free_params(fit.model) * math.log(data.n)


# ---------------------------------------------------------------------- AICM


def aicm(loglik_draws):
    """``2 (mean - variance)`` of per-draw log-likelihoods; larger is better.

    Accepts a :class:`~mixexperts.mcmc.PosteriorChain` or a plain array.
    """
    ll = np.asarray(getattr(loglik_draws, "loglik", loglik_draws), float)
    if ll.size < 10:
        raise InputError("AICM needs at least 10 draws")
    return float(2.0 * (ll.mean() - ll.var(ddof=1)))


# ------------------------------------------------------- exact Markov G = 1


def _log_mvbeta(a):
    return gammaln(a).sum(-1) - gammaln(a.sum(-1))


def _pooled_counts(family, data):
    if not isinstance(family, MarkovFamily):
        raise InputError("closed-form marginal likelihood needs the Markov family")
    return family.counts(data).sum(0)


def exact_log_marglik_markov_g1(family, data, prior):
    """Dirichlet-multinomial marginal likelihood of a single transition matrix."""
    alpha = family.prior_alpha(prior)
    counts = _pooled_counts(family, data)
    return float((_log_mvbeta(alpha + counts) - _log_mvbeta(alpha)).sum())


def prequential_log_marglik_markov_g1(family, data, prior):
    """Same quantity as a running product of posterior predictive probabilities.

    Walks the transitions one at a time; shares no code with the closed form.
    """
    if not isinstance(family, MarkovFamily):
        raise InputError("closed-form marginal likelihood needs the Markov family")
    cov = data.covariates[:, family.covariate_column] if family.history.endswith("x") else None
    rows = history_index(data.outcomes, family.history, family.n_states, cov, family.n_levels)
    nxt = data.outcomes[:, 1:]
    alpha = family.prior_alpha(prior).copy()
    total = 0.0
    for j, k in zip(rows.ravel(), nxt.ravel()):
        total += math.log(alpha[j, k] / alpha[j].sum())
        alpha[j, k] += 1.0
    return total


# --------------------------------------------------------- importance sampling


@dataclass
class ImportanceDensity:
    """Equal-weight mixture over ``S`` stored moment sets.

    ``factors`` lists ``(kind, parameter, moment keys)`` triples; ``moments``
    maps keys to arrays with a leading axis of length ``S``.
    """

    family: object
    variant: str
    G: int
    factors: tuple
    moments: dict
    gating_rows: int = 0

    @property
    def size(self):
        return next(iter(self.moments.values())).shape[0]

    def sample(self, n, rng):
        """``n`` parameter draws as stacked arrays (one mixture component each)."""
        idx = rng.integers(self.size, size=n)
        sub = {k: v[idx] for k, v in self.moments.items()}
        return _expfam.sample(self.factors, sub, rng)

    def logpdf(self, arrays, chunk=256):
        """Log density at ``L`` stacked points; loops over chunks to bound memory."""
        coef, const = _expfam.terms(self.factors, self.moments)
        feat = _expfam.features(self.factors, arrays)
        out = np.empty(feat.shape[0])
        for lo in range(0, feat.shape[0], chunk):
            with np.errstate(invalid="ignore"):
                block = feat[lo : lo + chunk] @ coef.T + const
            block = np.where(np.isnan(block), -np.inf, block)
            out[lo : lo + chunk] = logsumexp(block, axis=1) - math.log(self.size)
        return out


def _gating_surrogate(chain):
    """Moment-matched Gaussian of the pooled free gating rows, repeated per draw."""
    free = chain.arrays["gamma"][:, 1:].reshape(chain.n_draws, -1)
    mean = free.mean(0)
    cov = np.atleast_2d(np.cov(free, rowvar=False))
    cov = cov + 1e-10 * (np.trace(cov) / cov.shape[0] + 1.0) * np.eye(cov.shape[0])
    S = chain.n_draws
    return np.broadcast_to(mean, (S,) + mean.shape), np.broadcast_to(cov, (S,) + cov.shape)


def build_importance_density(chain, warn_factor=100):
    """Importance density from a chain run with ``store_moments=True``.

    For gated variants the gating rows use the Gaussian conditionals of the
    dRUM samplers; after a plain ``mh`` run a moment-matched Gaussian of the
    gating draws stands in.
    """
    if not chain.moments:
        raise InputError("chain has no stored moments; rerun with store_moments=True")
    G = chain.G
    S = chain.n_draws
    if S < warn_factor * math.factorial(G):
        warnings.warn(
            f"{S} stored moment sets is small relative to {G}! = {math.factorial(G)} label permutations",
            ImportanceSamplingWarning,
            stacklevel=2,
        )
    family = chain.family
    factors = list(family.factors)
    moments = {k: v for k, v in chain.moments.items() if k not in ("gamma_mean", "gamma_cov", "weights_alpha")}
    rows = 0
    if G > 1 and chain.variant in GATED_VARIANTS:
        if "gamma_mean" in chain.moments:
            factors.append(("normal", "gamma_free", ("gamma_mean", "gamma_cov")))
            moments["gamma_mean"] = chain.moments["gamma_mean"]
            moments["gamma_cov"] = chain.moments["gamma_cov"]
        else:
            factors.append(("normal", "gamma_flat", ("gamma_mean", "gamma_cov")))
            moments["gamma_mean"], moments["gamma_cov"] = _gating_surrogate(chain)
        rows = chain.arrays["gamma"].shape[-1]
    elif G > 1:
        factors.append(("dirichlet", "weights", ("weights_alpha",)))
        moments["weights_alpha"] = chain.moments["weights_alpha"]
    return ImportanceDensity(family, chain.variant, G, tuple(factors), moments, rows)


def _to_params(arrays, q):
    """Stacked draws from ``q`` -> (expert arrays, gamma or weights) per the chain layout."""
    expert = {k: v for k, v in arrays.items() if k not in ("gamma_free", "gamma_flat", "weights")}
    L = next(iter(expert.values())).shape[0]
    extra = {}
    if q.G > 1 and q.variant in GATED_VARIANTS:
        free = arrays.get("gamma_free")
        if free is None:
            free = arrays["gamma_flat"].reshape(L, q.G - 1, q.gating_rows)
        extra["gamma_free"] = free
    elif q.G > 1:
        extra["weights"] = arrays["weights"]
    return expert, extra


def log_prior_batch(family, variant, G, expert, extra, prior):
    """Joint log prior for ``L`` stacked parameter sets."""
    lp = family.log_prior(expert, prior.experts)
    if G > 1 and variant in GATED_VARIANTS:
        free = extra["gamma_free"]
        P = free.shape[-1]
        mean = np.broadcast_to(prior.gating_mean, (1, G - 1, P))
        cov = np.broadcast_to(prior.gating_cov, (1, G - 1, P, P))
        lp = lp + _expfam.logpdf((("normal", "g", ("m", "c")),), {"g": free}, {"m": mean, "c": cov})[:, 0]
    elif G > 1:
        alpha = prior.weight_alpha(G)[None]
        lp = lp + _expfam.logpdf((("dirichlet", "w", ("a",)),), {"w": extra["weights"]}, {"a": alpha})[:, 0]
    return lp


def _model(family, variant, G, expert, extra, l):
    experts = family.unstack({k: v[l] for k, v in expert.items()})
    if variant in GATED_VARIANTS:
        free = extra["gamma_free"][l]
        return MEModelSpec(variant, family, experts, gating=Gating(np.vstack([np.zeros_like(free[:1]), free])))
    weights = extra["weights"][l] if G > 1 else np.ones(1)
    return MEModelSpec(variant, family, experts, weights=weights)


@dataclass(frozen=True)
class MarginalLikelihood:
    log_marglik: float
    std_error: float
    ess: float
    n_draws: int


def is_log_marglik(data, prior, q, n_draws, rng):
    """Raw importance-sampling estimate of ``log p(y)`` with delta-method s.e."""
    rng = np.random.default_rng(rng)
    arrays = q.sample(n_draws, rng)
    expert, extra = _to_params(arrays, q)
    logq = q.logpdf(arrays)
    logp = log_prior_batch(q.family, q.variant, q.G, expert, extra, prior)
    loglik = np.full(n_draws, -np.inf)
    for l in range(n_draws):
        if not (np.isfinite(logp[l]) and np.isfinite(logq[l])):
            continue
        try:
            loglik[l] = log_likelihood(_model(q.family, q.variant, q.G, expert, extra, l), data)
        except (NumericalError, InputError, np.linalg.LinAlgError):
            continue
    logw = loglik + logp - logq
    logw = np.where(np.isnan(logw), -np.inf, logw)
    top = logw.max()
    if not np.isfinite(top):
        raise NumericalError("every importance weight is zero")
    w = np.exp(logw - top)
    mean = w.mean()
    se = float(w.std(ddof=1) / math.sqrt(n_draws) / mean) if n_draws > 1 else math.inf
    ess = float(w.sum() ** 2 / (w**2).sum())
    est = float(top + math.log(mean))
    log.info("IS log marginal likelihood %.4f (se %.4f, ESS %.0f of %d)", est, se, ess, n_draws)
    return MarginalLikelihood(est, se, ess, n_draws)


# ------------------------------------------------------------------ reports


def compare(entries, criterion):
    """Rank named criterion values; BIC is minimized, AICM and log-marglik maximized.

    ``entries`` maps model names to values (``None`` for failed runs).
    Returns ``{"criterion", "values", "winner"}``.
    """
    if criterion not in ("bic", "aicm", "log_marglik"):
        raise InputError(f"unknown criterion {criterion!r}")
    ok = {k: v for k, v in entries.items() if v is not None and np.isfinite(v)}
    winner = None
    if ok:
        pick = min if criterion == "bic" else max
        winner = pick(ok, key=ok.get)
    return {"criterion": criterion, "values": dict(entries), "winner": winner}
