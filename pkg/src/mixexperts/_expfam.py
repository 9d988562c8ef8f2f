"""Conjugate distribution factors written as ``log p(x) = features(x) . coef + const``.

Every factor used for priors, full conditionals and the importance density
is an exponential family, so evaluating ``S`` stored densities at ``L``
points reduces to one ``(L x F) @ (F x S)`` product. Arrays carry a leading
batch axis (``L`` points or ``S`` parameter sets); the remaining axes are
flattened into independent blocks.
"""

import numpy as np
from scipy.special import betaln, gammaln, multigammaln

LOG2PI = np.log(2.0 * np.pi)


def _inv_spd(a):
    chol = np.linalg.cholesky(a)
    eye = np.broadcast_to(np.eye(a.shape[-1]), a.shape)
    inv_chol = np.linalg.solve(chol, eye)
    return np.swapaxes(inv_chol, -1, -2) @ inv_chol, 2.0 * np.log(np.diagonal(chol, axis1=-2, axis2=-1)).sum(-1)


class Normal:
    @staticmethod
    def features(x):
        x = np.asarray(x, float)
        L, d = x.shape[0], x.shape[-1]
        x = x.reshape(L, -1, d)
        outer = (x[..., :, None] * x[..., None, :]).reshape(L, -1)
        return np.hstack([outer, x.reshape(L, -1)])

    @staticmethod
    def terms(mean, cov):
        mean = np.asarray(mean, float)
        S, d = mean.shape[0], mean.shape[-1]
        mean = mean.reshape(S, -1, d)
        prec, logdet = _inv_spd(np.asarray(cov, float).reshape(S, -1, d, d))
        pm = np.einsum("skab,skb->ska", prec, mean)
        coef = np.hstack([-0.5 * prec.reshape(S, -1), pm.reshape(S, -1)])
        const = (-0.5 * (d * LOG2PI + logdet + np.einsum("ska,ska->sk", mean, pm))).sum(1)
        return coef, const

    @staticmethod
    def sample(rng, mean, cov):
        mean = np.asarray(mean, float)
        chol = np.linalg.cholesky(np.asarray(cov, float))
        eps = rng.standard_normal(mean.shape)
        return mean + np.einsum("...ab,...b->...a", chol, eps)


class InvWishart:
    @staticmethod
    def features(x):
        x = np.asarray(x, float)
        L, d = x.shape[0], x.shape[-1]
        inv, logdet = _inv_spd(x.reshape(L, -1, d, d))
        return np.hstack([logdet, inv.reshape(L, -1)])

    @staticmethod
    def terms(df, scale):
        df = np.asarray(df, float)
        S = df.shape[0]
        df = df.reshape(S, -1)
        d = np.shape(scale)[-1]
        scale = np.asarray(scale, float).reshape(S, -1, d, d)
        _, logdet = _inv_spd(scale)
        coef = np.hstack([-0.5 * (df + d + 1), -0.5 * scale.reshape(S, -1)])
        const = (0.5 * df * logdet - 0.5 * df * d * np.log(2.0) - multigammaln(0.5 * df, d)).sum(1)
        return coef, const

    @staticmethod
    def sample(rng, df, scale):
        """Bartlett construction: invert a Wishart(df, scale^-1) draw."""
        df = np.asarray(df, float)
        scale = np.asarray(scale, float)
        d = scale.shape[-1]
        prec, _ = _inv_spd(scale)
        chol = np.linalg.cholesky(prec)
        a = np.zeros(df.shape + (d, d))
        idx = np.arange(d)
        a[..., idx, idx] = np.sqrt(rng.chisquare(df[..., None] - idx))
        low = np.tril_indices(d, -1)
        a[..., low[0], low[1]] = rng.standard_normal(df.shape + (low[0].size,))
        la = chol @ a
        wishart = la @ np.swapaxes(la, -1, -2)
        inv, _ = _inv_spd(wishart)
        return 0.5 * (inv + np.swapaxes(inv, -1, -2))


class InvGamma:
    @staticmethod
    def features(x):
        x = np.asarray(x, float).reshape(np.shape(x)[0], -1)
        return np.hstack([np.log(x), 1.0 / x])

    @staticmethod
    def terms(shape, scale):
        a = np.asarray(shape, float).reshape(np.shape(shape)[0], -1)
        b = np.asarray(scale, float).reshape(a.shape)
        return np.hstack([-(a + 1.0), -b]), (a * np.log(b) - gammaln(a)).sum(1)

    @staticmethod
    def sample(rng, shape, scale):
        return np.asarray(scale, float) / rng.gamma(shape)


class Gamma:
    @staticmethod
    def features(x):
        x = np.asarray(x, float).reshape(np.shape(x)[0], -1)
        return np.hstack([np.log(x), x])

    @staticmethod
    def terms(shape, rate):
        a = np.asarray(shape, float).reshape(np.shape(shape)[0], -1)
        b = np.asarray(rate, float).reshape(a.shape)
        return np.hstack([a - 1.0, -b]), (a * np.log(b) - gammaln(a)).sum(1)

    @staticmethod
    def sample(rng, shape, rate):
        return rng.gamma(shape) / np.asarray(rate, float)


class Beta:
    @staticmethod
    def features(x):
        x = np.asarray(x, float).reshape(np.shape(x)[0], -1)
        return np.hstack([np.log(x), np.log1p(-x)])

    @staticmethod
    def terms(a, b):
        a = np.asarray(a, float).reshape(np.shape(a)[0], -1)
        b = np.asarray(b, float).reshape(a.shape)
        return np.hstack([a - 1.0, b - 1.0]), -betaln(a, b).sum(1)

    @staticmethod
    def sample(rng, a, b):
        return rng.beta(a, b)


class Dirichlet:
    """Dirichlet rows along the last axis."""

    @staticmethod
    def features(x):
        x = np.asarray(x, float)
        with np.errstate(divide="ignore"):
            return np.log(x).reshape(x.shape[0], -1)

    @staticmethod
    def terms(alpha):
        alpha = np.asarray(alpha, float)
        S, K = alpha.shape[0], alpha.shape[-1]
        rows = alpha.reshape(S, -1, K)
        const = (gammaln(rows.sum(-1)) - gammaln(rows).sum(-1)).sum(1)
        return (rows - 1.0).reshape(S, -1), const

    @staticmethod
    def sample(rng, alpha):
        g = rng.gamma(np.asarray(alpha, float))
        return g / g.sum(-1, keepdims=True)


FACTORS = {
    "normal": Normal,
    "inv_wishart": InvWishart,
    "inv_gamma": InvGamma,
    "gamma": Gamma,
    "beta": Beta,
    "dirichlet": Dirichlet,
}


def features(factors, arrays):
    """Stack sufficient statistics of every factor's variable: ``(L, F)``."""
    return np.hstack([FACTORS[kind].features(arrays[name]) for kind, name, _ in factors])


def terms(factors, moments):
    """Natural parameters ``(S, F)`` and log-normalizers ``(S,)``."""
    coefs, const = [], 0.0
    for kind, _, keys in factors:
        c, k = FACTORS[kind].terms(*(moments[key] for key in keys))
        coefs.append(c)
        const = const + k
    return np.hstack(coefs), const


def sample(factors, moments, rng):
    return {name: FACTORS[kind].sample(rng, *(moments[key] for key in keys)) for kind, name, keys in factors}


def logpdf(factors, arrays, moments):
    """``(L, S)`` matrix of log densities of each point under each moment set."""
    coef, const = terms(factors, moments)
    feat = features(factors, arrays)
    with np.errstate(invalid="ignore"):
        out = feat @ coef.T + const
    # 0 * log(0) from boundary points with unit exponents
    return np.where(np.isnan(out), -np.inf, out)
