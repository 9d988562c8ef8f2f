"""Bayesian estimation by Metropolis-Hastings within Gibbs.

A sweep draws the experts from their conditionally conjugate full
conditionals, then the allocations, then the weights (Dirichlet) or the
gating network. Three gating samplers are available:

* ``mh`` -- random-walk Metropolis on each non-baseline row
* ``drum-mh`` -- difference-of-utilities data augmentation followed by an
  independence Metropolis step with a Gaussian proposal
* ``drum-aux`` -- the same augmentation with the logistic errors replaced by
  a normal scale mixture, giving an exact Gaussian full conditional

Random permutation sampling relabels every sweep, and
:func:`resolve_label_switching` undoes it afterwards by k-means on
per-component features.
"""

import itertools
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import logsumexp
from sklearn.cluster import KMeans

from . import kernels
from .core import GATED_VARIANTS, Allocation, Gating, MEModelSpec, log_gating_probs, log_likelihood
from .em import initial_responsibilities
from .errors import DegenerateComponentError, DegenerateObservationError, InputError
from .experts import RegressionFamily, RegressionPrior
from .scale_mixture import LOGISTIC_VARIANCE, mixture_table

log = logging.getLogger(__name__)

GATING_SAMPLERS = ("mh", "drum-mh", "drum-aux")
MAX_EXHAUSTIVE_G = 6


# --------------------------------------------------------------------- priors


@dataclass(frozen=True)
class PriorSpec:
    """Priors for one model: experts (family-specific), gating rows and weights.

    Every non-baseline gating row gets ``N(gating_mean, gating_cov)``; the
    weights get a symmetric (scalar) or general Dirichlet.
    """

    experts: object
    gating_mean: np.ndarray = None
    gating_cov: np.ndarray = None
    weights: object = 1.0

    @classmethod
    def default(cls, family, data, **overrides):
        P = data.design.shape[1]
        kw = dict(experts=family.default_prior(data), gating_mean=np.zeros(P), gating_cov=np.eye(P), weights=1.0)
        kw.update(overrides)
        return cls(**kw)

    def weight_alpha(self, G):
        return np.broadcast_to(np.asarray(self.weights, float), (G,)).copy()


def regression_preset(data, convention="precision-scale"):
    """D(4, ..., 4) weights, N(0, 100 I) coefficients, IG(2.5, 1.25 s_y^2) variances.

    ``convention`` fixes how the second inverse-gamma argument is read:
    ``"precision-scale"`` takes it as the scale of the Gamma prior on the
    precision (inverse-gamma scale ``1 / (1.25 s_y^2)``), ``"variance-scale"``
    as the inverse-gamma scale itself. Only the former separates the
    aliased slope modes on the two-point regression design.
    """
    s2 = float(np.var(data.outcomes[:, 0], ddof=1))
    if convention == "precision-scale":
        scale = 1.0 / (1.25 * s2)
    elif convention == "variance-scale":
        scale = 1.25 * s2
    else:
        raise InputError(f"unknown inverse-gamma convention {convention!r}")
    P = data.design.shape[1]
    return PriorSpec(
        experts=RegressionPrior(np.zeros(P), 100.0 * np.eye(P), 2.5, scale),
        gating_mean=np.zeros(P),
        gating_cov=np.eye(P),
        weights=4.0,
    )


PRIOR_PRESETS = {"regression-aliasing": regression_preset}


# ---------------------------------------------------------------- allocation


def allocation_probs(model, data):
    """``P(z_i = g | y_i, theta)`` computed directly from the joint densities."""
    lj = model.log_joint(data)
    m = lj.max(axis=1, keepdims=True)
    bad = ~np.isfinite(m[:, 0])
    if np.any(bad):
        raise DegenerateObservationError(int(np.flatnonzero(bad)[0]))
    p = np.exp(lj - m)
    return p / p.sum(axis=1, keepdims=True)


def draw_allocations(model, data, rng):
    """Independent categorical draws from the allocation full conditional."""
    lj = model.log_joint(data)
    bad = ~np.isfinite(lj.max(axis=1))
    if np.any(bad):
        raise DegenerateObservationError(int(np.flatnonzero(bad)[0]))
    return Allocation(kernels.sample_categorical(lj, rng.random(data.n)), model.G)


# -------------------------------------------------------------- gating: MH


def _allocation_loglik(gamma, z, design):
    if z.size == 0:
        return 0.0
    lp = log_gating_probs(Gating(gamma), design)
    return float(lp[np.arange(z.size), z].sum())


def _normal_logpdf(x, mean, prec):
    r = x - mean
    return -0.5 * r @ prec @ r


@dataclass
class MHProposal:
    """Random-walk covariance ``scale * base``; ``scale`` is tuned during burn-in."""

    base: np.ndarray
    scale: float
    accepted: int = 0
    proposed: int = 0

    def rate(self):
        return self.accepted / self.proposed if self.proposed else float("nan")


def default_mh_proposal(design, prior_cov):
    P = design.shape[1]
    xtx = design.T @ design
    if design.shape[0] > P and np.linalg.matrix_rank(xtx) == P:
        base = np.linalg.inv(xtx)
    else:
        base = np.asarray(prior_cov, float)
    return MHProposal(0.5 * (base + base.T), 4.0 * 2.38**2 / P)


def mh_update_gamma(gating, z, design, prior_mean, prior_cov, proposal, rng):
    """One random-walk Metropolis step per non-baseline gating row.

    The target for row ``g`` is ``prod_i eta_{z_i}(x_i) * N(gamma_g; prior)``;
    the proposal is symmetric so its density cancels from the ratio.
    Returns ``(gating, accepted flags)``.
    """
    z = np.asarray(z.z if isinstance(z, Allocation) else z, dtype=np.int64)
    gamma = gating.gamma.copy()
    G, P = gamma.shape
    prec = np.linalg.inv(prior_cov)
    chol = np.linalg.cholesky(proposal.scale * proposal.base)
    current = _allocation_loglik(gamma, z, design)
    accepted = np.zeros(G - 1, dtype=bool)
    for g in range(1, G):
        cand = gamma.copy()
        cand[g] = gamma[g] + chol @ rng.standard_normal(P)
        cand_ll = _allocation_loglik(cand, z, design)
        log_ratio = (cand_ll + _normal_logpdf(cand[g], prior_mean, prec)) - (
            current + _normal_logpdf(gamma[g], prior_mean, prec)
        )
        if np.log(rng.random()) < log_ratio:
            gamma, current = cand, cand_ll
            accepted[g - 1] = True
    proposal.accepted += int(accepted.sum())
    proposal.proposed += G - 1
    return Gating(gamma), accepted


# ------------------------------------------------------------ gating: dRUM


@dataclass
class DrumState:
    """Latent utilities, rates and (auxiliary mode) mixture indicators of the last update."""

    u: np.ndarray
    lam: np.ndarray
    r: np.ndarray = None
    mixture_table: tuple = None


def drum_utilities(eta, g, chosen, rng):
    """Closed-form utility draws ``u_gi`` given the linear predictors and allocations.

    With ``W = E1 / sum_h lambda_h`` and ``V = E2`` for independent unit
    exponentials, ``u = log(W + V / lambda_{-g}) - log W`` when ``z_i = g``
    and ``u = log W - log(W + V / lambda_g)`` otherwise. Also returns
    ``log lambda_{-g}``, the offset of the binary-logit regression.
    """
    n = eta.shape[0]
    log_lam_g = eta[:, g]
    log_rest = logsumexp(np.delete(eta, g, axis=1), axis=1)
    log_all = np.logaddexp(log_lam_g, log_rest)
    log_w = np.log(rng.exponential(size=n)) - log_all
    log_v = np.log(rng.exponential(size=n))
    u = np.where(
        chosen,
        np.logaddexp(log_w, log_v - log_rest) - log_w,
        log_w - np.logaddexp(log_w, log_v - log_lam_g),
    )
    return u, log_rest


def gaussian_regression_posterior(design, response, variances, prior_mean, prior_cov):
    """Posterior ``N(m, V)`` of coefficients in ``response = design @ b + N(0, variances)``."""
    prior_prec = np.linalg.inv(prior_cov)
    wx = design / variances[:, None]
    V = np.linalg.inv(prior_prec + design.T @ wx)
    V = 0.5 * (V + V.T)
    m = V @ (prior_prec @ prior_mean + wx.T @ response)
    return m, V


def _logistic_regression_logtarget(b, design, response, prior_mean, prior_prec):
    e = np.abs(response - design @ b)
    return float((-e - 2.0 * np.log1p(np.exp(-e))).sum()) + _normal_logpdf(b, prior_mean, prior_prec)


def drum_update_gamma(gating, z, design, prior_mean, prior_cov, rng, mode="drum-aux", table=None):
    """Update every non-baseline gating row through its binary-logit utility representation.

    ``mode="drum-mh"``: independence Metropolis with the Gaussian proposal
    obtained by replacing the logistic errors with a normal of equal variance.
    ``mode="drum-aux"``: draw mixture indicators, then the row from its exact
    Gaussian full conditional, then refresh the indicators.

    Returns ``(gating, state, accepted flags, moments)`` where ``moments``
    holds the Gaussian (mean, cov) each row was drawn from or proposed from.
    """
    if mode not in ("drum-mh", "drum-aux"):
        raise InputError(f"unknown dRUM mode {mode!r}")
    if mode == "drum-aux":
        if table is None:
            raise InputError("auxiliary mixture sampling needs a mixture table")
        mix_w, mix_v = table
        log_mix_w = np.log(mix_w)
    z = np.asarray(z.z if isinstance(z, Allocation) else z, dtype=np.int64)
    gamma = gating.gamma.copy()
    G, P = gamma.shape
    n = z.size
    prior_prec = np.linalg.inv(prior_cov)
    us = np.zeros((n, G - 1))
    rs = np.zeros((n, G - 1), dtype=np.int64) if mode == "drum-aux" else None
    means = np.zeros((G - 1, P))
    covs = np.zeros((G - 1, P, P))
    accepted = np.zeros(G - 1, dtype=bool)
    for g in range(1, G):
        eta = design @ gamma.T
        u, log_rest = drum_utilities(eta, g, z == g, rng)
        us[:, g - 1] = u
        target = u + log_rest  # = x_i gamma_g + logistic error
        if mode == "drum-mh":
            m, V = gaussian_regression_posterior(design, target, np.full(n, LOGISTIC_VARIANCE), prior_mean, prior_cov)
            cand = m + np.linalg.cholesky(V) @ rng.standard_normal(P)
            v_prec = np.linalg.inv(V)
            log_ratio = (
                _logistic_regression_logtarget(cand, design, target, prior_mean, prior_prec)
                - _logistic_regression_logtarget(gamma[g], design, target, prior_mean, prior_prec)
                + _normal_logpdf(gamma[g], m, v_prec)
                - _normal_logpdf(cand, m, v_prec)
            )
            if np.log(rng.random()) < log_ratio:
                gamma[g] = cand
                accepted[g - 1] = True
        else:
            eps = target - design @ gamma[g]
            logp = log_mix_w - 0.5 * np.log(mix_v) - 0.5 * eps[:, None] ** 2 / mix_v
            r = kernels.sample_categorical(logp, rng.random(n)) if n else np.zeros(0, dtype=np.int64)
            m, V = gaussian_regression_posterior(design, target, mix_v[r], prior_mean, prior_cov)
            gamma[g] = m + np.linalg.cholesky(V) @ rng.standard_normal(P)
            accepted[g - 1] = True
            eps = target - design @ gamma[g]
            logp = log_mix_w - 0.5 * np.log(mix_v) - 0.5 * eps[:, None] ** 2 / mix_v
            rs[:, g - 1] = kernels.sample_categorical(logp, rng.random(n)) if n else r
        means[g - 1], covs[g - 1] = m, V
    lam = np.exp(design @ gamma.T)
    state = DrumState(us, lam, rs, table)
    return Gating(gamma), state, accepted, {"gamma_mean": means, "gamma_cov": covs}


# --------------------------------------------------------- chain machinery


@dataclass
class MCMCConfig:
    variant: str
    family: object
    G: int
    iters: int = 15000
    burnin: int = 5000
    thin: int = 1
    gating_sampler: str = "drum-aux"
    permute: bool = True
    store_moments: bool = False
    store_allocations: bool = False
    alias_jumps: bool = False
    prior_only: bool = False
    tune_interval: int = 50

    def __post_init__(self):
        if self.gating_sampler not in GATING_SAMPLERS:
            raise InputError(f"gating sampler must be one of {GATING_SAMPLERS}")
        if not 0 <= self.burnin < self.iters:
            raise InputError("need 0 <= burnin < iters")
        if self.thin < 1 or (self.iters - self.burnin) % self.thin:
            raise InputError("thin must be >= 1 and divide iters - burnin")
        if self.alias_jumps and not (isinstance(self.family, RegressionFamily) and self.variant == "b"):
            raise InputError("alias jumps are defined for mixtures of regressions (variant b) only")
        self.family.check_variant(self.variant)

    @property
    def n_draws(self):
        return (self.iters - self.burnin) // self.thin


@dataclass
class ChainState:
    experts: tuple
    z: np.ndarray
    weights: np.ndarray = None
    gating: Gating = None
    moments: dict = field(default_factory=dict)

    def model(self, variant, family):
        if variant in GATED_VARIANTS:
            return MEModelSpec(variant, family, self.experts, gating=self.gating)
        return MEModelSpec(variant, family, self.experts, weights=self.weights)


@dataclass
class SamplerState:
    """Mutable per-chain bookkeeping that is not part of the posterior state."""

    proposal: MHProposal = None
    table: tuple = None
    alias_accepted: int = 0
    alias_proposed: int = 0
    gating_accepted: int = 0
    gating_proposed: int = 0


def _relabel_gamma_array(gamma, sigma):
    out = gamma[..., sigma, :] - gamma[..., sigma[:1], :]
    return out


def random_permutation_step(state, rng, G=None):
    """Relabel a chain state by a uniformly drawn permutation; returns ``(state, sigma)``."""
    G = len(state.experts) if G is None else G
    sigma = rng.permutation(G)
    return permute_state(state, sigma), sigma


def permute_state(state, sigma):
    sigma = np.asarray(sigma)
    inv = np.argsort(sigma)
    gating = None
    if state.gating is not None:
        g = _relabel_gamma_array(state.gating.gamma, sigma)
        g[0] = 0.0
        gating = Gating(g)
    return ChainState(
        experts=tuple(state.experts[s] for s in sigma),
        z=inv[state.z],
        weights=None if state.weights is None else state.weights[sigma],
        gating=gating,
        moments=state.moments,
    )


def _alias_jump(state, data, prior, config, sampler, rng):
    """Swap two components' means at one design point, keeping another point fixed.

    The map acts linearly on the pair of coefficient vectors and is its own
    inverse with unit Jacobian, so it is accepted on the allocation-free
    posterior ratio.
    """
    x = data.covariates[:, 0]
    points = np.unique(x)
    G = len(state.experts)
    if points.size < 2 or G < 2:
        return state
    a, b = rng.choice(points.size, size=2, replace=False)
    g, h = rng.choice(G, size=2, replace=False)
    Xab = np.array([[1.0, points[a]], [1.0, points[b]]])
    beta_g, beta_h = state.experts[g].beta, state.experts[h].beta
    mean_g, mean_h = Xab @ beta_g, Xab @ beta_h
    new_g = np.linalg.solve(Xab, [mean_g[0], mean_h[1]])
    new_h = np.linalg.solve(Xab, [mean_h[0], mean_g[1]])
    experts = list(state.experts)
    experts[g] = replace(experts[g], beta=new_g)
    experts[h] = replace(experts[h], beta=new_h)
    cand = ChainState(tuple(experts), state.z, state.weights, state.gating, state.moments)
    family = config.family
    cur_model = state.model(config.variant, family)
    cand_model = cand.model(config.variant, family)
    arrays_cur = {k: v[None] for k, v in family.stack(state.experts).items()}
    arrays_cand = {k: v[None] for k, v in family.stack(cand.experts).items()}
    log_ratio = (
        log_likelihood(cand_model, data)
        + family.log_prior(arrays_cand, prior.experts)[0]
        - log_likelihood(cur_model, data)
        - family.log_prior(arrays_cur, prior.experts)[0]
    )
    sampler.alias_proposed += 1
    if np.log(rng.random()) < log_ratio:
        sampler.alias_accepted += 1
        z = draw_allocations(cand_model, data, rng).z
        return ChainState(cand.experts, z, cand.weights, cand.gating, cand.moments)
    return state


def gibbs_sweep(state, data, prior, config, rng, sampler=None):
    """One sweep: experts, allocations, then weights or gating rows.

    Returns the new :class:`ChainState`; its ``moments`` hold the parameters
    of every full conditional used in this sweep.
    """
    family, G = config.family, config.G
    sampler = sampler if sampler is not None else init_sampler(data, prior, config)
    coupled = data if not config.prior_only else data.take(np.arange(0))
    z = state.z if not config.prior_only else np.zeros(0, dtype=np.int64)
    experts, moments = family.gibbs(coupled, z, state.experts, prior.experts, rng)
    moments = dict(moments)
    if config.variant in GATED_VARIANTS:
        model = MEModelSpec(config.variant, family, experts, gating=state.gating)
    else:
        model = MEModelSpec(config.variant, family, experts, weights=state.weights)
    if not config.prior_only:
        z = draw_allocations(model, data, rng).z
    weights, gating = state.weights, state.gating
    if config.variant in GATED_VARIANTS:
        design = coupled.design
        if config.gating_sampler == "mh":
            gating, acc = mh_update_gamma(gating, z, design, prior.gating_mean, prior.gating_cov, sampler.proposal, rng)
        else:
            gating, _, acc, gm = drum_update_gamma(
                gating, z, design, prior.gating_mean, prior.gating_cov, rng, config.gating_sampler, sampler.table
            )
            moments.update(gm)
        sampler.gating_accepted += int(acc.sum())
        sampler.gating_proposed += acc.size
    else:
        alpha = prior.weight_alpha(G) + np.bincount(z, minlength=G)
        weights = rng.dirichlet(alpha)
        weights = np.maximum(weights, 1e-300)
        weights /= weights.sum()
        moments["weights_alpha"] = alpha
    out = ChainState(experts, z if not config.prior_only else state.z, weights, gating, moments)
    if config.alias_jumps and not config.prior_only:
        out = _alias_jump(out, data, prior, config, sampler, rng)
    return out


def init_sampler(data, prior, config):
    sampler = SamplerState()
    if config.variant in GATED_VARIANTS:
        design = data.design if not config.prior_only else np.zeros((0, data.design.shape[1]))
        sampler.proposal = default_mh_proposal(design, prior.gating_cov)
        if config.gating_sampler == "drum-aux":
            sampler.table = mixture_table()
    return sampler


def initial_state(data, config, rng):
    family, G = config.family, config.G
    resp = initial_responsibilities(data, family, G, rng)
    z = kernels.sample_categorical(np.log(np.maximum(resp, 1e-300)), rng.random(data.n))
    smooth = 0.5 * resp + 0.5 / G
    try:
        experts = family.mstep(data, smooth, None)
    except DegenerateComponentError:
        experts = family.mstep(data, np.full((data.n, G), 1.0 / G), None)
    P = data.design.shape[1]
    if config.variant in GATED_VARIANTS:
        return ChainState(experts, z, gating=Gating.zeros(G, P))
    return ChainState(experts, z, weights=np.full(G, 1.0 / G))


# ----------------------------------------------------------------- chains


@dataclass
class PosteriorChain:
    """Retained draws stacked along axis 0.

    ``arrays`` maps parameter names to ``(S, G, ...)`` arrays: the family's
    expert parameters plus ``weights`` or ``gamma``. ``permutations[s]`` is
    the relabeling applied at the end of sweep ``s``. ``moments`` (when
    stored) holds the full-conditional parameters of every retained sweep.
    """

    family: object
    variant: str
    G: int
    arrays: dict
    loglik: np.ndarray
    permutations: np.ndarray
    allocations: np.ndarray = None
    moments: dict = None
    meta: dict = field(default_factory=dict)

    @property
    def n_draws(self):
        return self.loglik.size

    def expert_arrays(self):
        return {k: v for k, v in self.arrays.items() if k not in ("weights", "gamma")}

    def model_at(self, s):
        experts = self.family.unstack({k: v[s] for k, v in self.expert_arrays().items()})
        if self.variant in GATED_VARIANTS:
            return MEModelSpec(self.variant, self.family, experts, gating=Gating(self.arrays["gamma"][s]))
        return MEModelSpec(self.variant, self.family, experts, weights=self.arrays["weights"][s])

    def with_arrays(self, arrays, **meta):
        return replace(self, arrays=arrays, meta={**self.meta, **meta})


def _state_arrays(state, family):
    out = dict(family.stack(state.experts))
    if state.gating is not None:
        out["gamma"] = state.gating.gamma.copy()
    else:
        out["weights"] = np.asarray(state.weights).copy()
    return out


def run_chain(data, prior, config, seed=0, init=None):
    """Run one seeded chain and return its retained draws as a :class:`PosteriorChain`."""
    config.family.check_data(data)
    rng = np.random.default_rng(seed)
    sampler = init_sampler(data, prior, config)
    state = init if init is not None else initial_state(data, config, rng)
    S = config.n_draws
    records, perms, lls, zs, moms = [], [], [], [], []
    identity = np.arange(config.G)
    for it in range(config.iters):
        state = gibbs_sweep(state, data, prior, config, rng, sampler)
        sigma = identity
        if config.permute and config.G > 1:
            state, sigma = random_permutation_step(state, rng, config.G)
        if it < config.burnin:
            if (
                sampler.proposal is not None
                and config.gating_sampler == "mh"
                and (it + 1) % config.tune_interval == 0
            ):
                rate = sampler.proposal.rate()
                if rate < 0.2:
                    sampler.proposal.scale *= 0.7
                elif rate > 0.4:
                    sampler.proposal.scale *= 1.4
                sampler.proposal.accepted = sampler.proposal.proposed = 0
            continue
        if (it - config.burnin) % config.thin:
            continue
        records.append(_state_arrays(state, config.family))
        perms.append(sigma)
        model = state.model(config.variant, config.family)
        lls.append(log_likelihood(model, data) if not config.prior_only else 0.0)
        if config.store_allocations:
            zs.append(state.z.copy())
        if config.store_moments:
            moms.append(state.moments)
    arrays = {k: np.stack([r[k] for r in records]) for k in records[0]}
    moments = None
    if config.store_moments:
        moments = {k: np.stack([m[k] for m in moms]) for k in moms[0]}
    meta = {
        "iters": config.iters,
        "burnin": config.burnin,
        "thin": config.thin,
        "seed": seed,
        "gating_sampler": config.gating_sampler if config.variant in GATED_VARIANTS else None,
        "permute": config.permute,
        "gating_acceptance": sampler.gating_accepted / sampler.gating_proposed if sampler.gating_proposed else None,
        "alias_acceptance": sampler.alias_accepted / sampler.alias_proposed if sampler.alias_proposed else None,
        "mh_scale": sampler.proposal.scale if sampler.proposal is not None else None,
    }
    log.info("chain done: %d draws, meta %s", S, meta)
    return PosteriorChain(
        family=config.family,
        variant=config.variant,
        G=config.G,
        arrays=arrays,
        loglik=np.array(lls),
        permutations=np.array(perms),
        allocations=np.array(zs) if zs else None,
        moments=moments,
        meta=meta,
    )


def chain_seeds(seed, n_chains):
    """Independent child seeds: ``SeedSequence(seed).spawn(n_chains)``."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n_chains)]


def _chain_job(args):
    data, prior, config, rng = args
    return run_chain(data, prior, config, seed=rng)


def run_chains(data, prior, config, n_chains, seed=0, n_jobs=1):
    jobs = [(data, prior, config, rng) for rng in chain_seeds(seed, n_chains)]
    if n_jobs == 1:
        return [_chain_job(j) for j in jobs]
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(max_workers=n_jobs) as pool:
        return list(pool.map(_chain_job, jobs))


def gelman_rubin(chains):
    """Potential scale reduction factor for each coordinate of ``m`` chains of shape ``(S, ...)``."""
    x = np.stack([np.asarray(c, float) for c in chains])
    m, n = x.shape[:2]
    means = x.mean(1)
    B = n * means.var(0, ddof=1)
    W = x.var(1, ddof=1).mean(0)
    var = (n - 1) / n * W + B / n
    return np.sqrt(var / W)


# ------------------------------------------------------- label switching


@dataclass
class Relabeling:
    chain: PosteriorChain
    permutations: np.ndarray
    ambiguous: np.ndarray
    centers: np.ndarray


def draw_features(chain):
    """Per-draw, per-component feature vectors ``(S, G, F)`` from the family's feature map."""
    fam = chain.family
    expert = chain.expert_arrays()
    return np.stack([fam.features(fam.unstack({k: v[s] for k, v in expert.items()})) for s in range(chain.n_draws)])


def relabel_arrays(arrays, sigmas):
    """Apply per-draw permutations ``sigmas (S, G)`` to stacked chain arrays."""
    idx = np.arange(sigmas.shape[0])[:, None]
    out = {}
    for k, v in arrays.items():
        if k == "gamma":
            g = v[idx, sigmas] - v[idx, sigmas[:, :1]]
            g[:, 0] = 0.0
            out[k] = g
        else:
            out[k] = v[idx, sigmas]
    return out


def resolve_label_switching(chain, features=None, seed=0, allow_large_G=False):
    """Relabel draws by k-means on pooled component features.

    Each draw's ``G`` feature points are assigned to distinct clusters by
    exhaustive search over permutations (minimum total squared distance).
    Draws whose best assignment ties or whose points share a nearest cluster
    are flagged as ambiguous.
    """
    G = chain.G
    if G > MAX_EXHAUSTIVE_G and not allow_large_G:
        raise InputError(f"exhaustive relabeling over {G}! permutations refused; pass allow_large_G=True")
    if chain.n_draws < 10 * G:
        raise InputError("need at least 10 * G retained draws")
    feats = draw_features(chain) if features is None else np.asarray(features, float)
    S, _, F = feats.shape
    pooled = feats.reshape(S * G, F)
    scale = pooled.std(0)
    scale[scale == 0] = 1.0
    pooled = pooled / scale
    km = KMeans(n_clusters=G, n_init=10, random_state=seed).fit(pooled)
    centers = km.cluster_centers_
    pts = pooled.reshape(S, G, F)
    dist = ((pts[:, :, None, :] - centers[None, None]) ** 2).sum(-1)  # (S, point, cluster)
    perms = np.array(list(itertools.permutations(range(G))))
    totals = dist[:, np.arange(G)[None, :], perms].sum(-1)  # (S, G!)
    order = np.argsort(totals, axis=1)
    best = perms[order[:, 0]]  # component g -> cluster best[g]
    tie = np.zeros(S, dtype=bool)
    if perms.shape[0] > 1:
        t0 = totals[np.arange(S), order[:, 0]]
        t1 = totals[np.arange(S), order[:, 1]]
        tie = t1 - t0 <= 1e-12 * (1.0 + t0)
    nearest = dist.argmin(2)
    shared = np.array([np.unique(r).size < G for r in nearest])
    sigmas = np.argsort(best, axis=1)  # new component k takes old component sigmas[k]
    relabeled = chain.with_arrays(relabel_arrays(chain.arrays, sigmas), resolved=True)
    if chain.allocations is not None:
        inv = np.argsort(sigmas, axis=1)
        relabeled.allocations = np.take_along_axis(inv, chain.allocations, axis=1)
    return Relabeling(relabeled, sigmas, tie | shared, centers * scale)


def symmetrize(chain, rng=None):
    """Copy of a chain with every draw relabeled by a random permutation."""
    rng = np.random.default_rng(rng)
    sig = np.array([rng.permutation(chain.G) for _ in range(chain.n_draws)])
    return chain.with_arrays(relabel_arrays(chain.arrays, sig))


def hpd_interval(draws, mass=0.95):
    """Shortest interval containing ``mass`` of the sorted draws."""
    x = np.sort(np.asarray(draws, float))
    n = x.size
    k = max(int(math.ceil(mass * n)), 1)
    widths = x[k - 1 :] - x[: n - k + 1]
    i = int(np.argmin(widths))
    return float(x[i]), float(x[i + k - 1])
