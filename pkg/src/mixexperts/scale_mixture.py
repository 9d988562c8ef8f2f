"""Ten-component normal scale mixture approximating the standard logistic density.

The table is fitted by minimizing the Kullback-Leibler divergence from the
logistic density to the mixture. A precomputed copy ships as
:data:`LOGISTIC_MIXTURE`; :func:`fit_logistic_scale_mixture` recomputes it.
"""

import functools

import numpy as np
from scipy import optimize
from scipy.special import logsumexp, softmax

N_COMPONENTS = 10
LOGISTIC_VARIANCE = np.pi**2 / 3.0

# (weight, variance) pairs, sorted by variance; output of fit_logistic_scale_mixture()
LOGISTIC_MIXTURE = np.array(
    [
        [0.021446168017835686, 0.7129754066540805],
        [0.11208031118747322, 1.1696856024860298],
        [0.11089741732431083, 1.6941741886497255],
        [0.21270544934851243, 2.0757412745815857],
        [0.2541207026679902, 3.3014295261805393],
        [0.06158252785045879, 3.3892448987856394],
        [0.1599006862755223, 5.433649418863372],
        [0.049275659950796004, 7.835329085736156],
        [0.017112792283000576, 11.396707809244832],
        [0.0008782850941001026, 18.71035183691166],
    ]
)


def logistic_logpdf(x):
    a = np.abs(np.asarray(x, float))
    return -a - 2.0 * np.log1p(np.exp(-a))


def mixture_logpdf(x, weights, variances):
    x = np.asarray(x, float)[..., None]
    comp = np.log(weights) - 0.5 * np.log(2.0 * np.pi * variances) - 0.5 * x**2 / variances
    return logsumexp(comp, axis=-1)


@functools.lru_cache(maxsize=1)
def _quadrature():
    """Gauss-Legendre nodes on [0, 80], doubled for the symmetric integrand."""
    nodes, wts = np.polynomial.legendre.leggauss(400)
    xs, ws = [], []
    for a, b in [(0, 2), (2, 6), (6, 15), (15, 35), (35, 80)]:
        xs.append(0.5 * (b - a) * nodes + 0.5 * (a + b))
        ws.append(0.5 * (b - a) * wts * 2.0)
    return np.concatenate(xs), np.concatenate(ws)


def _cross_entropy(theta, x, wf):
    k = theta.size // 2
    logw = theta[:k] - logsumexp(theta[:k])
    var = np.exp(theta[k:])
    comp = logw - 0.5 * np.log(2.0 * np.pi * var) - 0.5 * x[:, None] ** 2 / var
    lg = logsumexp(comp, axis=1)
    r = wf[:, None] * np.exp(comp - lg[:, None])
    grad_w = -(r.sum(0) - np.exp(logw) * wf.sum())
    grad_v = -(r * (-0.5 + 0.5 * x[:, None] ** 2 / var)).sum(0)
    return -(wf @ lg), np.concatenate([grad_w, grad_v])


def kl_divergence(weights, variances):
    x, w = _quadrature()
    logf = logistic_logpdf(x)
    return float(w @ (np.exp(logf) * (logf - mixture_logpdf(x, weights, variances))))


@functools.lru_cache(maxsize=4)
def fit_logistic_scale_mixture(n_components=N_COMPONENTS, n_starts=3, seed=0):
    """Return ``(weights, variances)`` minimizing KL(logistic || mixture), sorted by variance."""
    x, w = _quadrature()
    wf = w * np.exp(logistic_logpdf(x))
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_starts):
        start = np.concatenate([
            0.5 * rng.standard_normal(n_components),
            np.log(np.geomspace(0.3, 60.0, n_components)) + 0.3 * rng.standard_normal(n_components),
        ])
        res = optimize.minimize(
            _cross_entropy, start, args=(x, wf), jac=True, method="L-BFGS-B",
            options={"maxiter": 20000, "ftol": 1e-15, "gtol": 1e-12},
        )
        if best is None or res.fun < best.fun:
            best = res
    if best is None or not np.isfinite(best.fun):
        raise RuntimeError("scale-mixture optimization failed")
    weights = softmax(best.x[:n_components])
    variances = np.exp(best.x[n_components:])
    order = np.argsort(variances)
    return weights[order], variances[order]


def mixture_table():
    """The shipped table, or a fresh fit if none is shipped."""
    if LOGISTIC_MIXTURE is not None:
        return LOGISTIC_MIXTURE[:, 0].copy(), LOGISTIC_MIXTURE[:, 1].copy()
    return fit_logistic_scale_mixture()


def table_quality(weights, variances, lo=-15.0, hi=15.0, n_grid=30001):
    """Max absolute density error on ``[lo, hi]``, mixture variance and total mass."""
    xs = np.linspace(lo, hi, n_grid)
    err = np.abs(np.exp(mixture_logpdf(xs, weights, variances)) - np.exp(logistic_logpdf(xs))).max()
    return {
        "max_density_error": float(err),
        "variance": float(weights @ variances),
        "mass": float(weights.sum()),
        "kl": kl_divergence(weights, variances),
    }
