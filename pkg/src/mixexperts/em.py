"""Maximum likelihood by EM/ECM for all four variants and every expert family.

One ECM iteration is an E-step followed by two conditional maximizations:
experts first (family M-steps), then the weights (closed form) or the gating
network (Newton-Raphson on the weighted multinomial-logit likelihood).
"""

import logging
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp
from sklearn.cluster import KMeans

from .core import GATED_VARIANTS, Gating, MEModelSpec, log_likelihood, loglik_terms, relabel_model
from .errors import (
    DegenerateComponentError,
    DegenerateObservationError,
    InputError,
    MixExpertsError,
    NumericalError,
    SeparationWarning,
)

log = logging.getLogger(__name__)

GATING_CAP = 30.0


def e_step(model, data):
    """Responsibilities ``n x G``: posterior membership probabilities, rows on the simplex."""
    lj = model.log_joint(data)
    norm = logsumexp(lj, axis=1, keepdims=True)
    bad = ~np.isfinite(norm[:, 0])
    if np.any(bad):
        raise DegenerateObservationError(int(np.flatnonzero(bad)[0]))
    resp = np.exp(lj - norm)
    return resp / resp.sum(axis=1, keepdims=True)


# ------------------------------------------------------------ gating M-step


def gating_objective(gamma_free, resp, design):
    """Gating part of the Q function, ``sum_i sum_g r_ig log eta_g(x_i)``."""
    eta = design @ np.vstack([np.zeros(design.shape[1]), gamma_free]).T
    return float((resp * (eta - logsumexp(eta, axis=1, keepdims=True))).sum())


def _gating_derivatives(free, resp, design):
    G = resp.shape[1]
    eta = design @ np.vstack([np.zeros(design.shape[1]), free]).T
    logpi = eta - logsumexp(eta, axis=1, keepdims=True)
    pi = np.exp(logpi)
    w = resp.sum(1)
    grad = ((resp - w[:, None] * pi)[:, 1:].T @ design).ravel()
    p1 = pi[:, 1:]
    A = w[:, None, None] * (np.einsum("ig,gh->igh", p1, np.eye(G - 1)) - p1[:, :, None] * p1[:, None, :])
    P = design.shape[1]
    H = -np.einsum("igh,ia,ib->gahb", A, design, design).reshape((G - 1) * P, (G - 1) * P)
    return float((resp * logpi).sum()), grad, H


def m_step_gating(resp, design, init=None, cap=GATING_CAP, max_iter=100, tol=1e-12):
    """Weighted multinomial-logit fit by Newton-Raphson with step-halving.

    Each Newton step is halved (at most 30 times) until the objective
    increases; if that fails a gradient-ascent step is tried instead.
    Coefficients are projected onto ``[-cap, cap]``; hitting the box signals
    complete separation and emits a :class:`SeparationWarning`.
    """
    resp = np.asarray(resp, float)
    design = np.asarray(design, float)
    n, G = resp.shape
    P = design.shape[1]
    if G == 1:
        return Gating.zeros(1, P)
    b = np.zeros((G - 1) * P) if init is None else np.asarray(init.gamma[1:], float).ravel().copy()
    b = np.clip(b, -cap, cap)
    obj, grad, H = _gating_derivatives(b.reshape(G - 1, P), resp, design)
    for _ in range(max_iter):
        try:
            step = np.linalg.solve(-H, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(-H, grad, rcond=None)[0]
        improved = False
        for direction in (step, grad):
            t = 1.0
            for _ in range(31):
                cand = np.clip(b + t * direction, -cap, cap)
                cand_obj = gating_objective(cand.reshape(G - 1, P), resp, design)
                if cand_obj > obj:
                    improved = True
                    break
                t *= 0.5
            if improved:
                break
        if not improved:
            break
        gain = cand_obj - obj
        b = cand
        obj, grad, H = _gating_derivatives(b.reshape(G - 1, P), resp, design)
        if gain <= tol * (1.0 + abs(obj)):
            break
    if np.any(np.abs(b) >= cap):
        warnings.warn(
            f"gating coefficients reached the separation cap |gamma| = {cap:g}; "
            "the allocations look completely separated by the covariates",
            SeparationWarning,
            stacklevel=2,
        )
    return Gating.from_free(b.reshape(G - 1, P))


# --------------------------------------------------------------- ECM driver


@dataclass
class EMConfig:
    variant: str
    family: object
    G: int
    tol: float = 1e-8
    max_iter: int = 500
    init: object = "auto"
    seed: int = 0
    on_degenerate: str = "raise"
    max_restarts: int = 10
    compute_se: bool = True
    gating_cap: float = GATING_CAP

    def __post_init__(self):
        if int(self.G) < 1:
            raise InputError("G must be >= 1")
        if self.on_degenerate not in ("raise", "restart"):
            raise InputError("on_degenerate must be 'raise' or 'restart'")
        self.family.check_variant(self.variant)


@dataclass
class StandardErrors:
    names: list
    estimates: np.ndarray
    se: np.ndarray
    rank: int

    @property
    def available(self):
        return np.isfinite(self.se)

    def as_dict(self):
        return {k: (float(v), float(s)) for k, v, s in zip(self.names, self.estimates, self.se)}

    def __getitem__(self, name):
        return float(self.se[self.names.index(name)])


@dataclass
class FitResult:
    model: MEModelSpec
    loglik_trace: np.ndarray
    responsibilities: np.ndarray
    map_assignment: np.ndarray
    converged: bool
    iterations: int
    std_errors: StandardErrors = None
    seed: int = None
    restarts_summary: list = field(default_factory=list)

    @property
    def loglik(self):
        return float(self.loglik_trace[-1])


def _seed_int(seed, restart):
    if restart == 0:
        return seed
    return int(np.random.SeedSequence([seed, restart]).generate_state(1)[0])


def initial_responsibilities(data, family, G, rng, how="auto"):
    """k-means on the outcomes for continuous data, Dirichlet(1) rows otherwise."""
    n = data.n
    if G == 1:
        return np.ones((n, 1))
    if how == "auto":
        how = "kmeans" if data.kind == "continuous" else "random"
    if how == "random":
        return rng.dirichlet(np.ones(G), size=n)
    if how != "kmeans":
        raise InputError(f"unknown initialization {how!r}")
    km = KMeans(n_clusters=G, n_init=10, random_state=int(rng.integers(2**31 - 1)))
    labels = km.fit_predict(data.outcomes)
    onehot = np.eye(G)[labels]
    # a little smoothing keeps every component's first M-step well posed
    return 0.95 * onehot + 0.05 / G


def _m_steps(data, resp, previous, config):
    family = config.family
    floor = family.min_effective_size(data)
    sizes = resp.sum(0)
    if np.any(sizes < floor):
        g = int(np.argmin(sizes))
        raise DegenerateComponentError(g, float(sizes[g]))
    experts = family.mstep(data, resp, None if previous is None else previous.experts)
    if config.variant in GATED_VARIANTS:
        init = None if previous is None else previous.gating
        if previous is None:
            gating = Gating.zeros(config.G, data.design.shape[1])
        else:
            gating = m_step_gating(resp, data.design, init=init, cap=config.gating_cap)
        return MEModelSpec(config.variant, family, experts, gating=gating)
    weights = sizes / sizes.sum()
    return MEModelSpec(config.variant, family, experts, weights=weights)


def _run_em(data, config, resp):
    model = _m_steps(data, resp, None, config)
    trace = [log_likelihood(model, data)]
    converged = False
    it = 0
    for it in range(1, config.max_iter + 1):
        resp = e_step(model, data)
        model = _m_steps(data, resp, model, config)
        trace.append(log_likelihood(model, data))
        if abs(trace[-1] - trace[-2]) < config.tol:
            converged = True
            break
    return model, np.array(trace), converged, it


def ecm_fit(data, config):
    """Fit by ECM from one initialization (restarting on degeneracy if configured)."""
    config.family.check_data(data)
    rng = np.random.default_rng(config.seed)
    attempts = config.max_restarts if config.on_degenerate == "restart" else 1
    last_error = None
    for attempt in range(attempts):
        if isinstance(config.init, np.ndarray) and attempt == 0:
            resp = np.asarray(config.init, float)
        else:
            how = "random" if attempt > 0 else config.init
            how = "auto" if isinstance(how, np.ndarray) else how
            resp = initial_responsibilities(data, config.family, config.G, rng, how)
        try:
            model, trace, converged, iters = _run_em(data, config, resp)
            break
        except DegenerateComponentError as exc:
            last_error = exc
            log.info("degenerate component on attempt %d: %s", attempt, exc)
    else:
        raise last_error
    resp = e_step(model, data)
    fit = FitResult(
        model=model,
        loglik_trace=trace,
        responsibilities=resp,
        map_assignment=map_assignment(resp),
        converged=converged,
        iterations=iters,
        seed=config.seed,
    )
    if config.compute_se:
        fit.std_errors = standard_errors(model, data)
    return fit


def map_assignment(resp):
    """Highest-responsibility component; ties go to the lowest index."""
    return np.argmax(resp, axis=1)


def map_crosstab(labels, covariate, G):
    """Counts of MAP labels (rows) against the levels of a categorical covariate (columns)."""
    covariate = np.asarray(covariate)
    levels = np.unique(covariate)
    table = np.zeros((G, levels.size), dtype=np.int64)
    col = np.searchsorted(levels, covariate)
    np.add.at(table, (np.asarray(labels), col), 1)
    return levels, table


def relabel_fit(fit, sigma):
    """Apply a component permutation to a fit's model, responsibilities and labels."""
    sigma = np.asarray(sigma)
    inv = np.argsort(sigma)
    out = FitResult(**{**fit.__dict__})
    out.model = relabel_model(fit.model, sigma)
    out.responsibilities = fit.responsibilities[:, sigma]
    out.map_assignment = inv[fit.map_assignment]
    out.std_errors = None
    return out


# ------------------------------------------------------- standard errors


def pack_model(model):
    """Free parameters on their natural scale, in a fixed order."""
    parts = []
    if model.variant in GATED_VARIANTS:
        parts.append(model.gating.gamma[1:].ravel())
    else:
        parts.append(model.weights[:-1])
    parts.extend(model.family.pack(e) for e in model.experts)
    return np.concatenate(parts)


def unpack_model(vec, template):
    vec = np.asarray(vec, float)
    G = template.G
    pos = 0
    changes = {}
    if template.variant in GATED_VARIANTS:
        k = (G - 1) * template.gating.n_coef
        changes["gating"] = Gating.from_free(vec[:k].reshape(G - 1, template.gating.n_coef))
        pos = k
    else:
        w = np.append(vec[: G - 1], 1.0 - vec[: G - 1].sum())
        changes["weights"] = w
        pos = G - 1
    experts = []
    for e in template.experts:
        k = template.family.pack(e).size
        experts.append(template.family.unpack(vec[pos : pos + k], e))
        pos += k
    return template.replace(experts=tuple(experts), **changes)


def parameter_names(model, data):
    names = []
    if model.variant in GATED_VARIANTS:
        names += [f"gamma[{g},{j}]" for g in range(1, model.G) for j in range(model.gating.n_coef)]
    else:
        names += [f"eta[{g}]" for g in range(model.G - 1)]
    for g in range(model.G):
        names += [f"expert[{g}].{p}" for p in model.family.param_names(data)]
    return names


def score_matrix(model, data, rel_step=1e-6):
    """Per-observation scores by central differences; unusable columns are NaN."""
    theta = pack_model(model)
    S = np.full((data.n, theta.size), np.nan)
    for k in range(theta.size):
        h = rel_step * (1.0 + abs(theta[k]))
        try:
            up = theta.copy()
            up[k] += h
            dn = theta.copy()
            dn[k] -= h
            with np.errstate(all="ignore"):
                diff = loglik_terms(unpack_model(up, model), data) - loglik_terms(unpack_model(dn, model), data)
        except MixExpertsError:
            continue
        if np.all(np.isfinite(diff)):
            S[:, k] = diff / (2.0 * h)
    return S


def standard_errors(fit_or_model, data, rel_step=1e-6):
    """Square roots of the diagonal of the inverse empirical information ``sum_i s_i s_i^T``."""
    model = fit_or_model.model if isinstance(fit_or_model, FitResult) else fit_or_model
    theta = pack_model(model)
    S = score_matrix(model, data, rel_step)
    usable = np.all(np.isfinite(S), axis=0)
    se = np.full(theta.size, np.nan)
    rank = 0
    if usable.any():
        info = S[:, usable].T @ S[:, usable]
        vals, vecs = np.linalg.eigh(info)
        tol = vals.max() * info.shape[0] * 1e-12
        keep = vals > tol
        rank = int(keep.sum())
        cov = (vecs[:, keep] / vals[keep]) @ vecs[:, keep].T
        # a parameter with any weight on a null direction has unbounded variance
        null_load = (vecs[:, ~keep] ** 2).sum(1)
        sub = np.where(null_load < 1e-8, np.sqrt(np.clip(np.diag(cov), 0, None)), np.nan)
        se[usable] = sub
    return StandardErrors(parameter_names(model, data), theta, se, rank)


# ------------------------------------------------------------- multi-start


def _restart_job(args):
    data, config, r = args
    cfg = EMConfig(**{**config.__dict__, "seed": _seed_int(config.seed, r)})
    try:
        return r, ecm_fit(data, cfg), None
    except (NumericalError, np.linalg.LinAlgError) as exc:
        return r, None, f"{type(exc).__name__}: {exc}"


def multi_start(data, config, n_restarts, n_jobs=1):
    """Best-by-loglik fit over ``n_restarts`` seeded initializations.

    Restart 0 uses ``config.seed``; restart ``r`` uses a seed derived from
    ``SeedSequence([config.seed, r])``. Ties are broken by restart index.
    """
    if n_restarts < 1:
        raise InputError("n_restarts must be >= 1")
    jobs = [(data, config, r) for r in range(n_restarts)]
    if n_jobs == 1:
        results = [_restart_job(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(_restart_job, jobs))
    summary = []
    best = None
    for r, fit, err in results:
        seed = _seed_int(config.seed, r)
        if fit is None:
            summary.append({"restart": r, "seed": seed, "loglik": None, "converged": False, "error": err})
            continue
        summary.append({"restart": r, "seed": seed, "loglik": fit.loglik, "converged": fit.converged, "error": None})
        if best is None or fit.loglik > best.loglik:
            best = fit
    if best is None:
        raise NumericalError("every restart failed: " + "; ".join(s["error"] for s in summary))
    best.restarts_summary = summary
    return best
