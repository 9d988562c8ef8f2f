"""Expert families: densities, weighted M-steps, conjugate draws and simulation.

Each family object bundles the operations the estimation engines need for
one kind of outcome. Component parameters are small frozen dataclasses; a
family converts a tuple of them to and from stacked arrays (leading axis =
component) so samplers and the importance density can work on batches.
"""

import itertools
import warnings
import weakref
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize
from scipy.special import logsumexp
from scipy.stats import binom

from . import _expfam, kernels
from .core import GATED_VARIANTS, Allocation, Dataset, gating_probs
from .errors import DegenerateComponentError, InputError, RegularizationWarning

LOG2PI = np.log(2.0 * np.pi)
PL_FLOOR = 1e-10
PROB_FLOOR = 1e-10


def _labels(z):
    return np.asarray(z.z if isinstance(z, Allocation) else z, dtype=np.int64)


def _spd(a, what):
    a = np.atleast_2d(np.asarray(a, dtype=float))
    if a.shape[0] != a.shape[1] or not np.allclose(a, a.T, rtol=1e-10, atol=1e-12):
        raise InputError(f"{what} must be a symmetric square matrix")
    try:
        chol = np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        raise InputError(f"{what} is not positive definite") from None
    return a, chol


# ------------------------------------------------------------------ Gaussian


@dataclass(frozen=True, eq=False)
class GaussianExpert:
    mu: np.ndarray
    Sigma: np.ndarray
    regularized: bool = False
    _chol: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        mu = np.atleast_1d(np.asarray(self.mu, dtype=float))
        Sigma, chol = _spd(self.Sigma, "Sigma")
        if Sigma.shape != (mu.size, mu.size):
            raise InputError("Sigma shape does not match mu")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "Sigma", Sigma)
        object.__setattr__(self, "_chol", chol)


def gaussian_logpdf(y, e):
    """Multivariate normal log density of one vector or each row of a matrix."""
    y = np.asarray(y, dtype=float)
    single = y.ndim <= 1
    resid = np.atleast_2d(y).reshape(-1, e.mu.size) - e.mu
    sol = np.linalg.solve(e._chol, resid.T)
    logdet = 2.0 * np.log(np.diag(e._chol)).sum()
    out = -0.5 * (e.mu.size * LOG2PI + logdet + (sol**2).sum(0))
    return float(out[0]) if single else out


def _weighted_moments(y, w, min_weight=1e-10):
    total = w.sum()
    if not total > min_weight:
        raise DegenerateComponentError(None, float(total))
    mu = w @ y / total
    resid = y - mu
    cov = (w[:, None] * resid).T @ resid / total
    return mu, 0.5 * (cov + cov.T)


def _regularize(cov):
    try:
        np.linalg.cholesky(cov)
        return cov, False
    except np.linalg.LinAlgError:
        pass
    d = cov.shape[0]
    eps = 1e-8 * np.trace(cov) / d
    if not eps > 0:
        eps = 1e-8
    while True:
        out = cov + eps * np.eye(d)
        try:
            np.linalg.cholesky(out)
            break
        except np.linalg.LinAlgError:
            eps *= 10.0
    warnings.warn(f"covariance regularized by {eps:.3g} * I", RegularizationWarning, stacklevel=3)
    return out, True


def gaussian_mstep(data, resp, g):
    """Weighted mean and (biased) covariance for component ``g``."""
    y = data.outcomes if isinstance(data, Dataset) else np.atleast_2d(np.asarray(data, float))
    w = np.asarray(resp, float)
    w = w[:, g] if w.ndim == 2 else w
    try:
        mu, cov = _weighted_moments(y, w)
    except DegenerateComponentError as exc:
        raise DegenerateComponentError(g, exc.effective_size) from None
    cov, flagged = _regularize(cov)
    return GaussianExpert(mu, cov, regularized=flagged)


@dataclass(frozen=True)
class GaussianPrior:
    """Independent conditionally conjugate prior: mu ~ N(mu0, Lambda0), Sigma ~ IW(nu0, S0)."""

    mu0: np.ndarray
    Lambda0: np.ndarray
    nu0: float
    S0: np.ndarray

    def __post_init__(self):
        mu0 = np.atleast_1d(np.asarray(self.mu0, float))
        d = mu0.size
        lam, _ = _spd(self.Lambda0, "Lambda0")
        s0, _ = _spd(self.S0, "S0")
        if lam.shape != (d, d) or s0.shape != (d, d):
            raise InputError("prior matrices must be d x d")
        if not self.nu0 > d - 1:
            raise InputError("nu0 must exceed d - 1")
        object.__setattr__(self, "mu0", mu0)
        object.__setattr__(self, "Lambda0", lam)
        object.__setattr__(self, "S0", s0)


def _gaussian_conditionals(y, z, sigmas, prior):
    G = sigmas.shape[0]
    onehot = (z[:, None] == np.arange(G)).astype(float)
    n_g = onehot.sum(0)
    sums = onehot.T @ y
    lam0_inv = np.linalg.inv(prior.Lambda0)
    prec = np.linalg.inv(sigmas)
    post_cov = np.linalg.inv(lam0_inv + n_g[:, None, None] * prec)
    post_cov = 0.5 * (post_cov + np.swapaxes(post_cov, 1, 2))
    post_mean = np.einsum("gab,gb->ga", post_cov, lam0_inv @ prior.mu0 + np.einsum("gab,gb->ga", prec, sums))
    empty = n_g == 0
    post_cov[empty] = prior.Lambda0
    post_mean[empty] = prior.mu0
    return post_mean, post_cov, n_g, onehot


def gaussian_conjugate_draw(data, z, prior, rng, current):
    """One Gibbs pass: each mu_g given Sigma_g, then each Sigma_g given the new mu_g.

    Returns ``(experts, moments)`` where ``moments`` holds the parameters of
    both full conditionals, stacked over components.
    """
    y = data.outcomes
    z = _labels(z)
    sigmas = np.stack([e.Sigma for e in current])
    mean, cov, n_g, onehot = _gaussian_conditionals(y, z, sigmas, prior)
    mu = _expfam.Normal.sample(rng, mean, cov)
    resid = y[:, None, :] - mu[None]
    scatter = np.einsum("ng,nga,ngb->gab", onehot, resid, resid)
    df = prior.nu0 + n_g
    scale = prior.S0 + scatter
    Sigma = _expfam.InvWishart.sample(rng, df, scale)
    experts = tuple(GaussianExpert(m, s) for m, s in zip(mu, Sigma))
    return experts, {"mu_mean": mean, "mu_cov": cov, "iw_df": df, "iw_scale": scale}


# ---------------------------------------------------------------- regression


@dataclass(frozen=True, eq=False)
class GaussianRegressionExpert:
    beta: np.ndarray
    sigma2: float
    regularized: bool = False

    def __post_init__(self):
        beta = np.atleast_1d(np.asarray(self.beta, float))
        if not (np.isfinite(self.sigma2) and self.sigma2 > 0):
            raise InputError("sigma2 must be positive")
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "sigma2", float(self.sigma2))


@dataclass(frozen=True)
class RegressionPrior:
    """beta ~ N(b0, B0), sigma2 ~ IG(c0, C0)."""

    b0: np.ndarray
    B0: np.ndarray
    c0: float
    C0: float

    def __post_init__(self):
        b0 = np.atleast_1d(np.asarray(self.b0, float))
        B0, _ = _spd(self.B0, "B0")
        if B0.shape != (b0.size, b0.size):
            raise InputError("B0 shape does not match b0")
        if not (self.c0 > 0 and self.C0 > 0):
            raise InputError("inverse-gamma shape and scale must be positive")
        object.__setattr__(self, "b0", b0)
        object.__setattr__(self, "B0", B0)


# ------------------------------------------------------------------ binomial


@dataclass(frozen=True)
class BinomialExpert:
    pi: float
    regularized: bool = False

    def __post_init__(self):
        if not 0.0 < self.pi < 1.0:
            raise InputError("binomial success probability must lie in (0, 1)")
        object.__setattr__(self, "pi", float(self.pi))


@dataclass(frozen=True)
class BinomialPrior:
    """Beta(a, b) on each success probability; a = b = 1 is uniform."""

    a: float = 1.0
    b: float = 1.0


def binomial_mixture_pmf(T, eta, pi, y):
    """Mixture of binomials ``sum_g eta_g Bin(y; T, pi_g)``."""
    y = np.asarray(y)
    if np.any(y < 0) or np.any(y > T) or np.any(y != np.round(y)):
        raise InputError(f"y must be an integer in 0..{T}")
    eta = np.asarray(eta, float)
    pi = np.asarray(pi, float)
    out = binom.pmf(np.asarray(y)[..., None], T, pi) @ eta
    return float(out) if out.ndim == 0 else out


# ------------------------------------------------------------ Plackett-Luce


@dataclass(frozen=True, eq=False)
class PlackettLuceExpert:
    """Support on the simplex; ``beta`` (M x (q+1), row 0 zero) for the covariate-linked form.

    ``scale`` records the total of unnormalized rates in MCMC output and does
    not affect the likelihood.
    """

    p: np.ndarray
    beta: np.ndarray = None
    scale: float = 1.0
    regularized: bool = False

    def __post_init__(self):
        p = np.asarray(self.p, float)
        if p.ndim != 1 or np.any(p <= 0) or abs(p.sum() - 1.0) > 1e-9:
            raise InputError("Plackett-Luce support must be a strictly positive simplex vector")
        object.__setattr__(self, "p", p)
        if self.beta is not None:
            beta = np.atleast_2d(np.asarray(self.beta, float))
            if beta.shape[0] != p.size or np.any(beta[0] != 0):
                raise InputError("covariate-linked coefficients need M rows with a zero baseline row")
            object.__setattr__(self, "beta", beta)

    def supports(self, design):
        """Per-observation supports under the logit link, ``n x M``."""
        eta = design @ self.beta.T
        return np.exp(eta - logsumexp(eta, axis=1, keepdims=True))


@dataclass(frozen=True)
class PlackettLucePrior:
    """Gamma(shape, rate) on the unnormalized support rates."""

    shape: float = 1.0
    rate: float = 1.0


def _ballot_array(ballot, M):
    b = np.asarray(ballot, dtype=np.int64).ravel()
    if np.any(b < 0) or np.any(b >= M):
        raise InputError(f"candidate index outside 0..{M - 1}")
    if np.unique(b).size != b.size:
        raise InputError("repeated candidate in ballot")
    row = -np.ones((1, M), dtype=np.int64)
    row[0, : b.size] = b
    return row


def plackett_luce_logprob(ballot, e):
    """Log probability of one (possibly partial) ballot of 0-based candidates."""
    return float(kernels.pl_loglik(_ballot_array(ballot, e.p.size), e.p[None])[0, 0])


def _pl_rowwise_loglik(ballots, supports):
    active, chosen, avail = kernels.ballot_stage_masks(ballots)
    tails = np.einsum("nsm,nm->ns", avail, supports)
    num = np.take_along_axis(supports, chosen, axis=1)
    terms = np.log(num) - np.log(np.where(active, tails, 1.0))
    return np.where(active, terms, 0.0).sum(1)


def plackett_luce_mstep(ballots, weights, init=None, tol=1e-13, max_iter=20000):
    """Weighted maximum-likelihood support by minorize-maximize iterations.

    Candidates never chosen under positive weight have no finite maximizer;
    their support is pinned to a small floor and the result is flagged.
    """
    ballots = np.asarray(ballots, dtype=np.int64)
    w = np.asarray(weights, float)
    if not w.sum() > 0:
        raise DegenerateComponentError(None, float(w.sum()))
    M = ballots.shape[1]
    wins = kernels.pl_win_counts(ballots, w)
    p = np.full(M, 1.0 / M) if init is None else np.asarray(init, float).copy()
    floored = wins <= 0
    prev = -np.inf
    for _ in range(max_iter):
        tails = kernels.pl_stage_tails(ballots, p)
        v = np.where(tails > 0, w[:, None] / np.where(tails > 0, tails, 1.0), 0.0)
        denom = kernels.pl_avail_weighted_sum(ballots, v)
        new = np.where(denom > 0, wins / np.where(denom > 0, denom, 1.0), 0.0)
        new = np.maximum(new / new.sum(), PL_FLOOR)
        new /= new.sum()
        obj = float(w @ kernels.pl_loglik(ballots, new[None])[:, 0])
        change = np.max(np.abs(new - p))
        p = new
        if abs(obj - prev) <= tol * (1.0 + abs(obj)) or change < 1e-15:
            break
        prev = obj
    if np.any(floored):
        warnings.warn("unranked candidates pinned to the support floor", RegularizationWarning, stacklevel=2)
    return PlackettLuceExpert(p, regularized=bool(np.any(floored)))


def _pl_linked_mstep(ballots, design, w, init):
    """Experimental: weighted L-BFGS for the logit-linked supports."""
    M, P = ballots.shape[1], design.shape[1]
    active, chosen, avail = kernels.ballot_stage_masks(ballots)
    wins = np.einsum("ns,nsm->nm", active.astype(float), (chosen[:, :, None] == np.arange(M)).astype(float))

    def negobj(free):
        beta = np.vstack([np.zeros(P), free.reshape(M - 1, P)])
        eta = design @ beta.T
        sup = np.exp(eta - eta.max(1, keepdims=True))
        tails = np.einsum("nsm,nm->ns", avail, sup)
        tails = np.where(active, tails, 1.0)
        ll = (np.where(active, np.log(np.take_along_axis(sup, chosen, 1)) - np.log(tails), 0.0)).sum(1)
        expo = sup * np.einsum("ns,nsm->nm", np.where(active, 1.0 / tails, 0.0), avail)
        grad = ((w[:, None] * (wins - expo)).T @ design)[1:]
        return -float(w @ ll), -grad.ravel()

    x0 = np.zeros((M - 1) * P) if init is None else init[1:].ravel()
    res = optimize.minimize(negobj, x0, jac=True, method="L-BFGS-B", options={"maxiter": 1000, "gtol": 1e-10})
    beta = np.vstack([np.zeros(P), res.x.reshape(M - 1, P)])
    p0 = np.exp(beta[:, 0] - logsumexp(beta[:, 0]))
    return PlackettLuceExpert(p0 / p0.sum(), beta=beta)


# ------------------------------------------------------------- Markov chain

HISTORIES = ("prev", "prev_x", "prev_t", "prev_t_x")


@dataclass(frozen=True, eq=False)
class MarkovChainExpert:
    xi: np.ndarray
    history: str = "prev"

    def __post_init__(self):
        xi = np.asarray(self.xi, float)
        if xi.ndim != 2 or np.any(xi < 0) or np.any(xi > 1) or not np.allclose(xi.sum(1), 1.0, atol=1e-9):
            raise InputError("transition matrix rows must lie on the simplex")
        if self.history not in HISTORIES:
            raise InputError(f"unknown history spec {self.history!r}")
        object.__setattr__(self, "xi", xi)


@dataclass(frozen=True)
class MarkovPrior:
    """Dirichlet rows ``d0`` (J x K); a scalar is broadcast."""

    d0: object = 1.0


def n_history_rows(history, n_states, n_times=None, n_levels=2):
    """Number of rows J of the generalized transition matrix."""
    if history not in HISTORIES:
        raise InputError(f"unknown history spec {history!r}")
    J = n_states
    if "_t" in history:
        if not n_times:
            raise InputError("time-dependent histories need the series length")
        J *= n_times
    if history.endswith("x"):
        J *= n_levels
    return J


def history_index(series, history, n_states, covariate=None, n_levels=2):
    """``n x T_len`` matrix of history-row indices for every transition."""
    series = np.asarray(series, dtype=np.int64)
    if np.any(series < 0) or np.any(series >= n_states):
        raise InputError(f"states must lie in 0..{n_states - 1}")
    n, T = series.shape[0], series.shape[1] - 1
    h = series[:, :-1].copy()
    if "_t" in history:
        h = h * T + np.arange(T)
    if history.endswith("x"):
        if covariate is None:
            raise InputError(f"history {history!r} needs a categorical covariate")
        x = np.asarray(covariate).ravel()
        if x.size != n or np.any(x != np.round(x)) or np.any(x < 0) or np.any(x >= n_levels):
            raise InputError(f"history covariate must be an integer in 0..{n_levels - 1}")
        h = h * n_levels + x.astype(np.int64)[:, None]
    return h


def markov_counts(series, history, n_states, covariate=None, n_levels=2):
    """Per-series transition counts ``n x J x K`` (first state is conditioned on)."""
    series = np.atleast_2d(np.asarray(series, dtype=np.int64))
    T = series.shape[1] - 1
    hist = history_index(series, history, n_states, covariate, n_levels)
    J = n_history_rows(history, n_states, T, n_levels)
    return kernels.transition_counts(series, hist, J, n_states)


def _markov_loglik(counts, xi):
    n, J, K = counts.shape
    flat = counts.reshape(n, J * K)
    xi = np.asarray(xi, float).reshape(-1, J * K)
    with np.errstate(divide="ignore"):
        logxi = np.log(xi)
    finite = np.isfinite(logxi)
    out = flat @ np.where(finite, logxi, 0.0).T
    forbidden = flat @ (~finite).T.astype(float)
    return np.where(forbidden > 0, -np.inf, out)


def markov_logprob(series, e, covariate=None, n_levels=2):
    counts = markov_counts(series, e.history, e.xi.shape[1], covariate, n_levels)
    if counts.shape[1] != e.xi.shape[0]:
        raise InputError("transition matrix has the wrong number of history rows")
    return float(_markov_loglik(counts, e.xi)[0, 0])


def markov_dirichlet_draw(counts, z, G, d0, rng):
    """Row-wise Dirichlet full conditionals; returns ``(xi draws G x J x K, alpha)``."""
    z = _labels(z)
    onehot = (z[:, None] == np.arange(G)).astype(float)
    pooled = np.einsum("ng,njk->gjk", onehot, counts)
    alpha = np.broadcast_to(np.asarray(d0, float), pooled.shape[1:]) + pooled
    return _expfam.Dirichlet.sample(rng, alpha), alpha


# -------------------------------------------------------------- family API


class Family:
    """Operations shared by the engines; subclasses fill in the specifics."""

    name = None
    kind = None
    variants = "abcd"
    expert_type = object
    factors = ()

    def config(self):
        return {}

    def check_variant(self, variant):
        if variant not in self.variants:
            raise InputError(f"{self.name} experts do not support variant {variant!r}")

    def check_model(self, variant, experts):
        self.check_variant(variant)
        for e in experts:
            if not isinstance(e, self.expert_type):
                raise InputError(f"{self.name} family expects {self.expert_type.__name__} components")

    def check_data(self, data):
        if data.kind != self.kind:
            raise InputError(f"{self.name} family needs {self.kind} data, got {data.kind}")

    def min_effective_size(self, data):
        return 1e-8

    def logpdf(self, experts, data):
        raise NotImplementedError

    def prior_moments(self, prior, G):
        raise NotImplementedError

    def log_prior(self, arrays, prior):
        """Log prior density for a batch of stacked parameters, shape ``(L,)``."""
        G = next(iter(arrays.values())).shape[1]
        moments = {k: np.asarray(v)[None] for k, v in self.prior_moments(prior, G).items()}
        return _expfam.logpdf(self.factors, arrays, moments)[:, 0]

    def describe(self):
        return {"name": self.name, **self.config()}

    def __eq__(self, other):
        return type(self) is type(other) and self.config() == other.config()

    def __hash__(self):
        return hash((type(self), tuple(sorted(self.config().items()))))

    def __repr__(self):
        args = ", ".join(f"{k}={v!r}" for k, v in self.config().items())
        return f"{type(self).__name__}({args})"


class GaussianFamily(Family):
    name = "gaussian"
    kind = "continuous"
    variants = "ac"
    expert_type = GaussianExpert
    factors = (("normal", "mu", ("mu_mean", "mu_cov")), ("inv_wishart", "Sigma", ("iw_df", "iw_scale")))

    def dataset(self, outcomes, covariates=None):
        return Dataset.continuous(outcomes, covariates)

    def min_effective_size(self, data):
        return data.outcomes.shape[1] + 1

    def logpdf(self, experts, data):
        return np.column_stack([gaussian_logpdf(data.outcomes, e) for e in experts])

    def mstep(self, data, resp, previous=None):
        return tuple(gaussian_mstep(data, resp, g) for g in range(resp.shape[1]))

    def n_params(self, data):
        d = data.outcomes.shape[1]
        return d + d * (d + 1) // 2

    def pack(self, e):
        return np.concatenate([e.mu, e.Sigma[np.tril_indices(e.mu.size)]])

    def unpack(self, vec, template):
        d = template.mu.size
        S = np.zeros((d, d))
        S[np.tril_indices(d)] = vec[d:]
        S = S + np.tril(S, -1).T
        return GaussianExpert(vec[:d], S)

    def param_names(self, data):
        d = data.outcomes.shape[1]
        return [f"mu[{a}]" for a in range(d)] + [f"Sigma[{a},{b}]" for a, b in zip(*np.tril_indices(d))]

    def simulate(self, experts, z, covariates, rng):
        mu = np.stack([e.mu for e in experts])[z]
        chol = np.stack([e._chol for e in experts])[z]
        return mu + np.einsum("nab,nb->na", chol, rng.standard_normal(mu.shape))

    def features(self, experts):
        return np.stack([np.concatenate([e.mu, np.log(np.diag(e._chol))]) for e in experts])

    def default_prior(self, data):
        y = data.outcomes
        d = y.shape[1]
        cov = np.atleast_2d(np.cov(y, rowvar=False)) if data.n > 1 else np.eye(d)
        cov = cov + 1e-8 * (np.trace(cov) / d or 1.0) * np.eye(d)
        return GaussianPrior(y.mean(0), 10.0 * np.diag(np.diag(cov)), d + 3.0, cov)

    def prior_moments(self, prior, G):
        d = prior.mu0.size
        return {
            "mu_mean": np.tile(prior.mu0, (G, 1)),
            "mu_cov": np.tile(prior.Lambda0, (G, 1, 1)),
            "iw_df": np.full(G, float(prior.nu0)),
            "iw_scale": np.tile(prior.S0, (G, 1, 1)).reshape(G, d, d),
        }

    def gibbs(self, data, z, experts, prior, rng):
        return gaussian_conjugate_draw(data, z, prior, rng, experts)

    def stack(self, experts):
        return {"mu": np.stack([e.mu for e in experts]), "Sigma": np.stack([e.Sigma for e in experts])}

    def unstack(self, arrays):
        return tuple(GaussianExpert(m, 0.5 * (s + s.T)) for m, s in zip(arrays["mu"], arrays["Sigma"]))

    def to_json(self, e):
        return {"mu": e.mu.tolist(), "Sigma": e.Sigma.tolist()}

    def from_json(self, d):
        return GaussianExpert(d["mu"], d["Sigma"])


class RegressionFamily(Family):
    name = "regression"
    kind = "continuous"
    variants = "bd"
    expert_type = GaussianRegressionExpert
    factors = (("normal", "beta", ("beta_mean", "beta_cov")), ("inv_gamma", "sigma2", ("ig_shape", "ig_scale")))

    def dataset(self, outcomes, covariates=None):
        return Dataset.continuous(outcomes, covariates)

    def check_data(self, data):
        super().check_data(data)
        if data.outcomes.shape[1] != 1:
            raise InputError("regression experts need a univariate response")

    def min_effective_size(self, data):
        return data.design.shape[1] + 1

    def logpdf(self, experts, data):
        y = data.outcomes[:, 0]
        mean = data.design @ np.stack([e.beta for e in experts]).T
        s2 = np.array([e.sigma2 for e in experts])
        return -0.5 * (LOG2PI + np.log(s2) + (y[:, None] - mean) ** 2 / s2)

    def mstep(self, data, resp, previous=None):
        X, y = data.design, data.outcomes[:, 0]
        out = []
        for g in range(resp.shape[1]):
            w = resp[:, g]
            if not w.sum() > 1e-10:
                raise DegenerateComponentError(g, float(w.sum()))
            sw = np.sqrt(w)
            beta = np.linalg.lstsq(sw[:, None] * X, sw * y, rcond=None)[0]
            s2 = float(w @ (y - X @ beta) ** 2 / w.sum())
            floor = 1e-10 * max(np.var(y), 1e-300)
            flagged = s2 < floor
            if flagged:
                warnings.warn("error variance floored", RegularizationWarning, stacklevel=2)
            out.append(GaussianRegressionExpert(beta, max(s2, floor), regularized=flagged))
        return tuple(out)

    def n_params(self, data):
        return data.design.shape[1] + 1

    def pack(self, e):
        return np.append(e.beta, e.sigma2)

    def unpack(self, vec, template):
        return GaussianRegressionExpert(vec[:-1], vec[-1])

    def param_names(self, data):
        return [f"beta[{j}]" for j in range(data.design.shape[1])] + ["sigma2"]

    def simulate(self, experts, z, covariates, rng):
        n = z.size
        design = np.column_stack([np.ones(n), np.zeros((n, 0)) if covariates is None else covariates])
        beta = np.stack([e.beta for e in experts])[z]
        sd = np.sqrt(np.array([e.sigma2 for e in experts]))[z]
        return ((design * beta).sum(1) + sd * rng.standard_normal(n))[:, None]

    def features(self, experts):
        return np.stack([e.beta for e in experts])

    def default_prior(self, data):
        p = data.design.shape[1]
        s2 = float(np.var(data.outcomes[:, 0], ddof=1)) if data.n > 1 else 1.0
        return RegressionPrior(np.zeros(p), 100.0 * np.eye(p), 2.5, 1.25 * s2)

    def prior_moments(self, prior, G):
        return {
            "beta_mean": np.tile(prior.b0, (G, 1)),
            "beta_cov": np.tile(prior.B0, (G, 1, 1)),
            "ig_shape": np.full(G, float(prior.c0)),
            "ig_scale": np.full(G, float(prior.C0)),
        }

    def gibbs(self, data, z, experts, prior, rng):
        X, y = data.design, data.outcomes[:, 0]
        z = _labels(z)
        G, P = len(experts), X.shape[1]
        B0_inv = np.linalg.inv(prior.B0)
        mean, cov = np.empty((G, P)), np.empty((G, P, P))
        for g, e in enumerate(experts):
            Xg, yg = X[z == g], y[z == g]
            if yg.size == 0:
                mean[g], cov[g] = prior.b0, prior.B0
                continue
            V = np.linalg.inv(B0_inv + Xg.T @ Xg / e.sigma2)
            cov[g] = 0.5 * (V + V.T)
            mean[g] = cov[g] @ (B0_inv @ prior.b0 + Xg.T @ yg / e.sigma2)
        beta = _expfam.Normal.sample(rng, mean, cov)
        resid2 = (y - (X * beta[z]).sum(1)) ** 2
        n_g = np.bincount(z, minlength=G)
        shape = prior.c0 + 0.5 * n_g
        scale = prior.C0 + 0.5 * np.bincount(z, weights=resid2, minlength=G)
        s2 = _expfam.InvGamma.sample(rng, shape, scale)
        experts = tuple(GaussianRegressionExpert(b, s) for b, s in zip(beta, s2))
        return experts, {"beta_mean": mean, "beta_cov": cov, "ig_shape": shape, "ig_scale": scale}

    def stack(self, experts):
        return {"beta": np.stack([e.beta for e in experts]), "sigma2": np.array([e.sigma2 for e in experts])}

    def unstack(self, arrays):
        return tuple(GaussianRegressionExpert(b, s) for b, s in zip(arrays["beta"], arrays["sigma2"]))

    def to_json(self, e):
        return {"beta": e.beta.tolist(), "sigma2": e.sigma2}

    def from_json(self, d):
        return GaussianRegressionExpert(d["beta"], d["sigma2"])


class BinomialFamily(Family):
    name = "binomial"
    kind = "binomial"
    variants = "ac"
    expert_type = BinomialExpert
    factors = (("beta", "pi", ("beta_a", "beta_b")),)

    def __init__(self, trials):
        if int(trials) < 1:
            raise InputError("trials must be >= 1")
        self.trials = int(trials)

    def config(self):
        return {"trials": self.trials}

    def dataset(self, outcomes, covariates=None):
        return Dataset.binomial(outcomes, self.trials, covariates)

    def check_data(self, data):
        super().check_data(data)
        if data.trials != self.trials:
            raise InputError(f"data has T={data.trials}, family expects T={self.trials}")

    def logpdf(self, experts, data):
        pi = np.array([e.pi for e in experts])
        return binom.logpmf(data.outcomes[:, None], self.trials, pi)

    def mstep(self, data, resp, previous=None):
        w = resp.sum(0)
        if np.any(w <= 1e-10):
            g = int(np.argmin(w))
            raise DegenerateComponentError(g, float(w[g]))
        pi = (resp.T @ data.outcomes) / (self.trials * w)
        clipped = np.clip(pi, PROB_FLOOR, 1.0 - PROB_FLOOR)
        return tuple(BinomialExpert(p, regularized=bool(p != c)) for p, c in zip(pi, clipped))

    def n_params(self, data):
        return 1

    def pack(self, e):
        return np.array([e.pi])

    def unpack(self, vec, template):
        return BinomialExpert(vec[0])

    def param_names(self, data):
        return ["pi"]

    def simulate(self, experts, z, covariates, rng):
        return rng.binomial(self.trials, np.array([e.pi for e in experts])[z])

    def features(self, experts):
        return np.array([[e.pi] for e in experts])

    def default_prior(self, data):
        return BinomialPrior()

    def prior_moments(self, prior, G):
        return {"beta_a": np.full(G, float(prior.a)), "beta_b": np.full(G, float(prior.b))}

    def gibbs(self, data, z, experts, prior, rng):
        z = _labels(z)
        G = len(experts)
        succ = np.bincount(z, weights=data.outcomes, minlength=G)
        n_g = np.bincount(z, minlength=G)
        a = prior.a + succ
        b = prior.b + self.trials * n_g - succ
        pi = np.clip(_expfam.Beta.sample(rng, a, b), 1e-300, 1.0 - 1e-16)
        return tuple(BinomialExpert(p) for p in pi), {"beta_a": a, "beta_b": b}

    def stack(self, experts):
        return {"pi": np.array([e.pi for e in experts])}

    def unstack(self, arrays):
        return tuple(BinomialExpert(p) for p in arrays["pi"])

    def to_json(self, e):
        return {"pi": e.pi}

    def from_json(self, d):
        return BinomialExpert(d["pi"])


class PlackettLuceFamily(Family):
    """Rankings. With ``linked=True`` supports follow a logit link in the
    covariates (variants b/d); that M-step is experimental."""

    name = "plackett-luce"
    kind = "rankings"
    expert_type = PlackettLuceExpert
    factors = (("gamma", "rate", ("gamma_shape", "gamma_rate")),)

    def __init__(self, n_candidates, linked=False):
        if int(n_candidates) < 2:
            raise InputError("need at least two candidates")
        self.n_candidates = int(n_candidates)
        self.linked = bool(linked)
        self.variants = "bd" if self.linked else "ac"

    def config(self):
        return {"n_candidates": self.n_candidates, "linked": self.linked}

    def dataset(self, outcomes, covariates=None):
        return Dataset.rankings(outcomes, self.n_candidates, covariates)

    def check_model(self, variant, experts):
        super().check_model(variant, experts)
        for e in experts:
            if e.p.size != self.n_candidates:
                raise InputError("support length does not match the candidate count")
            if self.linked != (e.beta is not None):
                raise InputError("expert form does not match the family's link setting")

    def check_data(self, data):
        super().check_data(data)
        if data.n_candidates != self.n_candidates:
            raise InputError("ballots use a different candidate count")

    def logpdf(self, experts, data):
        if not self.linked:
            return kernels.pl_loglik(data.outcomes, np.stack([e.p for e in experts]))
        return np.column_stack([_pl_rowwise_loglik(data.outcomes, e.supports(data.design)) for e in experts])

    def mstep(self, data, resp, previous=None):
        out = []
        for g in range(resp.shape[1]):
            w = resp[:, g]
            if not w.sum() > 1e-10:
                raise DegenerateComponentError(g, float(w.sum()))
            prev = None if previous is None else previous[g]
            if self.linked:
                out.append(_pl_linked_mstep(data.outcomes, data.design, w, None if prev is None else prev.beta))
            else:
                out.append(plackett_luce_mstep(data.outcomes, w, init=None if prev is None else prev.p))
        return tuple(out)

    def n_params(self, data):
        M = self.n_candidates
        return (M - 1) * data.design.shape[1] if self.linked else M - 1

    def pack(self, e):
        return e.beta[1:].ravel() if self.linked else e.p[:-1].copy()

    def unpack(self, vec, template):
        if self.linked:
            beta = np.vstack([np.zeros(template.beta.shape[1]), vec.reshape(template.beta.shape[0] - 1, -1)])
            p0 = np.exp(beta[:, 0] - logsumexp(beta[:, 0]))
            return PlackettLuceExpert(p0 / p0.sum(), beta=beta)
        return PlackettLuceExpert(np.append(vec, 1.0 - vec.sum()))

    def param_names(self, data):
        M = self.n_candidates
        if self.linked:
            return [f"beta[{k},{j}]" for k in range(1, M) for j in range(data.design.shape[1])]
        return [f"p[{k}]" for k in range(M - 1)]

    def simulate(self, experts, z, covariates, rng):
        n, M = z.size, self.n_candidates
        if not self.linked:
            logp = np.log(np.stack([e.p for e in experts]))[z]
        else:
            design = np.column_stack([np.ones(n), np.zeros((n, 0)) if covariates is None else covariates])
            logp = np.empty((n, M))
            for g, e in enumerate(experts):
                logp[z == g] = np.log(e.supports(design[z == g]))
        # Gumbel-max ordering samples a full Plackett-Luce ranking
        return np.argsort(-(logp + rng.gumbel(size=(n, M))), axis=1, kind="stable")

    def features(self, experts):
        return np.log(np.stack([e.p for e in experts]))

    def default_prior(self, data):
        return PlackettLucePrior()

    def prior_moments(self, prior, G):
        M = self.n_candidates
        return {"gamma_shape": np.full((G, M), float(prior.shape)), "gamma_rate": np.full((G, M), float(prior.rate))}

    def gibbs(self, data, z, experts, prior, rng):
        """Gamma data augmentation: one exponential latent per active choice stage."""
        if self.linked:
            raise InputError("MCMC is not available for covariate-linked Plackett-Luce experts")
        z = _labels(z)
        G, M = len(experts), self.n_candidates
        shape = np.empty((G, M))
        rate = np.empty((G, M))
        for g, e in enumerate(experts):
            ballots = data.outcomes[z == g]
            lam = e.p * e.scale
            tails = kernels.pl_stage_tails(ballots, lam)
            latent = np.where(tails > 0, rng.exponential(size=tails.shape) / np.where(tails > 0, tails, 1.0), 0.0)
            shape[g] = prior.shape + kernels.pl_win_counts(ballots, np.ones(ballots.shape[0]))
            rate[g] = prior.rate + kernels.pl_avail_weighted_sum(ballots, latent)
        lam = np.maximum(_expfam.Gamma.sample(rng, shape, rate), 1e-300)
        return self.unstack({"rate": lam}), {"gamma_shape": shape, "gamma_rate": rate}

    def stack(self, experts):
        return {"rate": np.stack([e.p * e.scale for e in experts])}

    def unstack(self, arrays):
        out = []
        for lam in arrays["rate"]:
            total = lam.sum()
            out.append(PlackettLuceExpert(lam / total, scale=float(total)))
        return tuple(out)

    def to_json(self, e):
        d = {"p": e.p.tolist()}
        if e.beta is not None:
            d["beta"] = e.beta.tolist()
        return d

    def from_json(self, d):
        return PlackettLuceExpert(d["p"], beta=d.get("beta"))


_COUNT_CACHE = weakref.WeakKeyDictionary()


class MarkovFamily(Family):
    """Categorical series with a generalized transition matrix per component.

    Histories ``prev_x`` and ``prev_t_x`` read an integer covariate from
    ``covariate_column``; those make the experts covariate-dependent, so they
    pair with variants b/d while the other histories pair with a/c.
    """

    name = "markov"
    kind = "categorical"
    expert_type = MarkovChainExpert
    factors = (("dirichlet", "xi", ("dir_alpha",)),)

    def __init__(self, n_states, history="prev", n_times=None, n_levels=2, covariate_column=0):
        self.n_states = int(n_states)
        self.history = history
        self.n_times = None if n_times is None else int(n_times)
        self.n_levels = int(n_levels)
        self.covariate_column = int(covariate_column)
        self.J = n_history_rows(history, self.n_states, self.n_times, self.n_levels)
        self.variants = "bd" if history.endswith("x") else "ac"

    def config(self):
        return {
            "n_states": self.n_states,
            "history": self.history,
            "n_times": self.n_times,
            "n_levels": self.n_levels,
            "covariate_column": self.covariate_column,
        }

    def dataset(self, outcomes, covariates=None):
        return Dataset.categorical(outcomes, self.n_states, covariates)

    def check_data(self, data):
        super().check_data(data)
        if data.n_states != self.n_states:
            raise InputError("series use a different state count")
        if "_t" in self.history and data.outcomes.shape[1] - 1 != self.n_times:
            raise InputError(f"time-dependent history expects {self.n_times} transitions per series")

    def check_model(self, variant, experts):
        super().check_model(variant, experts)
        for e in experts:
            if e.xi.shape != (self.J, self.n_states) or e.history != self.history:
                raise InputError("transition matrix does not match the family's history spec")

    def counts(self, data):
        key = tuple(self.config().values())
        per_data = _COUNT_CACHE.setdefault(data, {})
        if key not in per_data:
            cov = data.covariates[:, self.covariate_column] if self.history.endswith("x") else None
            per_data[key] = markov_counts(data.outcomes, self.history, self.n_states, cov, self.n_levels)
        return per_data[key]

    def logpdf(self, experts, data):
        return _markov_loglik(self.counts(data), np.stack([e.xi for e in experts]))

    def mstep(self, data, resp, previous=None):
        pooled = np.einsum("ng,njk->gjk", resp, self.counts(data))
        tot = pooled.sum(2, keepdims=True)
        if np.any(resp.sum(0) <= 1e-10):
            g = int(np.argmin(resp.sum(0)))
            raise DegenerateComponentError(g, float(resp[:, g].sum()))
        xi = np.where(tot > 0, pooled / np.where(tot > 0, tot, 1.0), 1.0 / self.n_states)
        return tuple(MarkovChainExpert(x, self.history) for x in xi)

    def n_params(self, data):
        return self.J * (self.n_states - 1)

    def pack(self, e):
        return e.xi[:, :-1].ravel()

    def unpack(self, vec, template):
        head = vec.reshape(self.J, self.n_states - 1)
        return MarkovChainExpert(np.column_stack([head, 1.0 - head.sum(1)]), self.history)

    def param_names(self, data):
        return [f"xi[{j},{k}]" for j in range(self.J) for k in range(self.n_states - 1)]

    def simulate(self, experts, z, covariates, rng):
        n, K = z.size, self.n_states
        T = self.n_times or 4
        x = None
        if self.history.endswith("x"):
            x = np.asarray(covariates)[:, self.covariate_column].astype(np.int64)
        xi = np.stack([e.xi for e in experts])
        series = np.empty((n, T + 1), dtype=np.int64)
        series[:, 0] = rng.integers(K, size=n)
        for t in range(T):
            h = series[:, t]
            if "_t" in self.history:
                h = h * T + t
            if x is not None:
                h = h * self.n_levels + x
            cum = np.cumsum(xi[z, h], axis=1)
            u = rng.random(n)
            series[:, t + 1] = np.minimum((cum < u[:, None] * cum[:, -1:]).sum(1), K - 1)
        return series

    def persistence_rows(self):
        """For every history row, the index of the previous state it conditions on."""
        j = np.arange(self.J)
        if self.history.endswith("x"):
            j = j // self.n_levels
        if "_t" in self.history:
            j = j // self.n_times
        return j

    def features(self, experts):
        prev = self.persistence_rows()
        return np.stack([e.xi[np.arange(self.J), prev] for e in experts])

    def default_prior(self, data):
        return MarkovPrior()

    def prior_alpha(self, prior):
        return np.broadcast_to(np.asarray(prior.d0, float), (self.J, self.n_states)).copy()

    def prior_moments(self, prior, G):
        return {"dir_alpha": np.tile(self.prior_alpha(prior), (G, 1, 1))}

    def gibbs(self, data, z, experts, prior, rng):
        xi, alpha = markov_dirichlet_draw(self.counts(data), z, len(experts), self.prior_alpha(prior), rng)
        return tuple(MarkovChainExpert(x, self.history) for x in xi), {"dir_alpha": alpha}

    def stack(self, experts):
        return {"xi": np.stack([e.xi for e in experts])}

    def unstack(self, arrays):
        return tuple(MarkovChainExpert(x / x.sum(1, keepdims=True), self.history) for x in arrays["xi"])

    def to_json(self, e):
        return {"xi": e.xi.tolist()}

    def from_json(self, d):
        return MarkovChainExpert(d["xi"], self.history)


FAMILIES = {
    "gaussian": GaussianFamily,
    "regression": RegressionFamily,
    "binomial": BinomialFamily,
    "plackett-luce": PlackettLuceFamily,
    "markov": MarkovFamily,
}


def make_family(name, **config):
    try:
        cls = FAMILIES[name]
    except KeyError:
        raise InputError(f"unknown family {name!r}; choose from {sorted(FAMILIES)}") from None
    return cls(**config)


def family_from_json(d):
    d = dict(d)
    return make_family(d.pop("name"), **d)


def simulate(model, design, rng):
    """Draw allocations from the weights or gating network, then outcomes.

    ``design`` is either a covariate matrix (without intercept) or an
    observation count for covariate-free models. Returns ``(Dataset, Allocation)``.
    """
    rng = np.random.default_rng(rng)
    if np.ndim(design) == 0:
        n = int(design)
        covariates = None
    else:
        covariates = np.asarray(design, float)
        covariates = covariates[:, None] if covariates.ndim == 1 else covariates
        n = covariates.shape[0]
    if model.variant in GATED_VARIANTS:
        if covariates is None:
            raise InputError(f"variant {model.variant} needs covariates for the gating network")
        probs = gating_probs(model.gating, np.column_stack([np.ones(n), covariates]))
    else:
        probs = np.broadcast_to(model.weights, (n, model.G))
    with np.errstate(divide="ignore"):
        z = kernels.sample_categorical(np.log(probs), rng.random(n))
    y = model.family.simulate(model.experts, z, covariates, rng)
    return model.family.dataset(y, covariates), Allocation(z, model.G)


def all_rankings(M):
    """Every full ranking of ``M`` candidates as an ``M! x M`` array."""
    return np.array(list(itertools.permutations(range(M))), dtype=np.int64)

