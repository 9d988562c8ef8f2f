"""Identifiability checks for mixtures and mixtures of experts.

Three kinds of checks live here. Counting and coverage rules give instant
verdicts from the model structure alone. Alias constructors produce
explicit alternative parameter sets that generate the same sampling
distribution. :func:`diagnose_chain` looks for the footprints of both
problems in posterior draws: more modes than label switching explains,
elongated (non-point) modes, and per-component draws that stay multimodal
after relabeling.

Verdicts are condition checks, not proofs.
"""

import itertools
import logging
import math
from dataclasses import asdict, dataclass, field

import diptest
import numpy as np
from scipy import optimize
from sklearn.cluster import KMeans
from sklearn.metrics import silhouette_score

from .errors import InputError, NoAliasError
from .experts import BinomialFamily, GaussianFamily, RegressionFamily, binomial_mixture_pmf

log = logging.getLogger(__name__)

IDENTIFIED = "identified"
NOT_IDENTIFIED = "not-identified"
UNKNOWN = "unknown"


# ---------------------------------------------------------------- binomial


def binomial_identifiable(G, T):
    """Counting rule for binomial mixtures: ``2G - 1 <= T``. Returns ``(ok, margin)``."""
    if G < 1 or T < 1:
        raise InputError("need G >= 1 and T >= 1")
    margin = T - (2 * G - 1)
    return margin >= 0, margin


def _same_up_to_relabeling(a, b, tol):
    eta_a, p1a, p2a = a
    for cand in (b, (1.0 - b[0], b[2], b[1])):
        if abs(cand[0] - eta_a) < tol and abs(cand[1] - p1a) < tol and abs(cand[2] - p2a) < tol:
            return True
    return False


def _pmf_gap(T, theta, alias):
    y = np.arange(T + 1)
    f0 = binomial_mixture_pmf(T, [theta[0], 1 - theta[0]], theta[1:], y)
    f1 = binomial_mixture_pmf(T, [alias[0], 1 - alias[0]], alias[1:], y)
    return float(np.abs(f0 - f1).max())


def binomial_alias_set(theta, T=2, n_points=50, tol=1e-10, seed=0):
    """Alternative two-component binomial mixtures with the same pmf as ``theta``.

    ``theta = (eta, pi_1, pi_2)`` with ``eta`` the weight of the first
    component. For ``T = 2`` the pmf depends on the first two moments of the
    mixing distribution only, leaving a one-dimensional family of solutions
    that is traced on ``n_points`` values of ``pi_1``. For other ``T`` a
    multi-start bounded least-squares search on the pmf is run. Returns an
    ``(m, 3)`` array of ``(eta, pi_1, pi_2)`` rows, none of which is
    ``theta`` or its relabeling.
    """
    eta, p1, p2 = map(float, theta)
    if not 0.0 < eta < 1.0 or p1 == p2:
        raise InputError("need 0 < eta < 1 and distinct success probabilities")
    if T == 2:
        out = _binomial_alias_t2(eta, p1, p2, n_points)
    else:
        out = _binomial_alias_search(eta, p1, p2, T, seed)
    keep = [
        row
        for row in out
        if not _same_up_to_relabeling((eta, p1, p2), row, 1e-6) and _pmf_gap(T, (eta, p1, p2), row) <= tol
    ]
    if not keep:
        raise NoAliasError(f"no alias of {theta} found for T={T}")
    return np.array(keep)


def _binomial_alias_t2(eta, p1, p2, n_points):
    m1 = eta * p1 + (1 - eta) * p2
    m2 = eta * p1**2 + (1 - eta) * p2**2
    rows = []
    for a in np.linspace(0.0, 1.0, n_points + 2)[1:-1]:
        if abs(m1 - a) < 1e-9:
            continue
        b = (m2 - a * m1) / (m1 - a)
        if not 0.0 < b < 1.0 or abs(a - b) < 1e-9:
            continue
        e = (m1 - b) / (a - b)
        if 0.0 < e < 1.0:
            rows.append((e, a, b))
    return rows


def _binomial_alias_search(eta, p1, p2, T, seed):
    y = np.arange(T + 1)
    target = binomial_mixture_pmf(T, [eta, 1 - eta], [p1, p2], y)

    def resid(v):
        return binomial_mixture_pmf(T, [v[0], 1 - v[0]], v[1:], y) - target

    rng = np.random.default_rng(seed)
    grid = np.linspace(0.05, 0.95, 7)
    starts = np.array(list(itertools.product(grid, grid, grid)))
    starts = starts + 0.01 * rng.standard_normal(starts.shape)
    found = []
    lo, hi = np.full(3, 1e-9), np.full(3, 1 - 1e-9)
    for s in np.clip(starts, lo, hi):
        res = optimize.least_squares(resid, s, bounds=(lo, hi), xtol=1e-15, ftol=1e-15, gtol=1e-15)
        v = res.x
        if np.abs(res.fun).max() > 1e-11 or abs(v[1] - v[2]) < 1e-6:
            continue
        if not any(_same_up_to_relabeling(v, f, 1e-6) for f in found):
            found.append(tuple(v))
    return found


# -------------------------------------------------------------- regression


@dataclass(frozen=True)
class CoverageResult:
    satisfied: object  # True, False or None (unknown)
    n_points: int
    note: str = ""


def regression_coverage_check(design, G):
    """Design-richness condition for mixtures of regressions.

    ``design`` includes the intercept column. With one covariate the rule is
    that the number of distinct covariate values exceeds ``G``. With more
    covariates the minimal-hyperplane-cover condition is only stated.
    """
    design = np.atleast_2d(np.asarray(design, float))
    if design.shape[1] < 1 or not np.allclose(design[:, 0], 1.0):
        raise InputError("design must start with an intercept column")
    rows = np.unique(design, axis=0)
    q = design.shape[1] - 1
    if q == 1:
        p = rows.shape[0]
        note = ""
        if G == 1:
            rank = np.linalg.matrix_rank(design)
            note = f"G = 1 is identified by a full-rank design alone (rank {rank} of 2)"
        return CoverageResult(p > G, p, note)
    return CoverageResult(
        None,
        rows.shape[0],
        f"q = {q}: identified if the design points are not covered by {G} hyperplanes of dimension {q - 1}; "
        "the minimal cover is not computed",
    )


def cross_labeled_coefficients(points, betas, labelings):
    """Coefficients obtained by reading component means through per-point labelings.

    ``labelings[j][g]`` names the original component whose mean at design
    point ``j`` the new component ``g`` takes. The first two points fix the
    new coefficients; returns ``(new_betas, mismatch)`` where ``mismatch``
    holds the largest mean discrepancy at each remaining point.
    """
    x = np.asarray(points, float)
    betas = np.asarray(betas, float)
    if x.size < 2:
        raise InputError("need at least two design points")
    X = np.column_stack([np.ones(x.size), x])
    X12 = X[:2]
    if abs(np.linalg.det(X12)) < 1e-12:
        raise InputError("first two design points coincide; the stacked design is singular")
    means = X @ betas.T  # (points, G)
    lab = [np.asarray(s) for s in labelings]
    target = np.stack([means[0, lab[0]], means[1, lab[1]]])  # (2, G)
    new = np.linalg.solve(X12, target).T
    mismatch = []
    for j in range(2, x.size):
        have = np.sort(X[j] @ new.T)
        want = np.sort(means[j])
        mismatch.append(float(np.abs(have - want).max()))
    return new, np.array(mismatch)


def regression_alias_solutions(points, betas, tol=1e-9):
    """Non-trivial alternative coefficient sets for a mixture of regressions.

    Keeps component labels at the first design point and tries every other
    labeling at the second; a candidate survives when the remaining design
    points see the same multiset of component means.
    """
    betas = np.asarray(betas, float)
    G = betas.shape[0]
    ident = np.arange(G)
    out = []
    for perm in itertools.permutations(range(G)):
        perm = np.array(perm)
        if np.array_equal(perm, ident):
            continue
        new, mismatch = cross_labeled_coefficients(points, betas, [ident, perm])
        if mismatch.size and mismatch.max() > tol:
            continue
        out.append(new)
    return out


# --------------------------------------------------------------- simple ME


def _completely_separated(design, labels, G):
    """LP feasibility of ``x_i (gamma_{z_i} - gamma_h) >= 1`` for every ``i`` and ``h != z_i``."""
    n, P = design.shape
    rows = []
    for i in range(n):
        for h in range(G):
            if h == labels[i]:
                continue
            a = np.zeros((G, P))
            a[labels[i]] -= design[i]
            a[h] += design[i]
            rows.append(a[1:].ravel())
    if not rows:
        return True
    A = np.array(rows)
    res = optimize.linprog(
        np.zeros(A.shape[1]), A_ub=A, b_ub=-np.ones(A.shape[0]), bounds=(None, None), method="highs"
    )
    return res.status == 0


def simple_me_identifiable(family, design, G, labels=None, cond_max=1e10):
    """Condition-based verdict for a simple mixture of experts (gating covariates only).

    Returns an :class:`IdentifiabilityReport` whose ``rule`` names the check
    that decided it.
    """
    design = np.atleast_2d(np.asarray(design, float))
    if isinstance(family, (GaussianFamily, RegressionFamily)):
        base, base_rule = True, "Gaussian mixtures are generically identified"
    elif isinstance(family, BinomialFamily):
        ok, margin = binomial_identifiable(G, family.trials)
        base, base_rule = ok, f"binomial counting rule 2G-1 <= T (margin {margin})"
    else:
        base, base_rule = None, f"no generic identifiability result wired in for {family.name} experts"
    notes = []
    if base is False:
        return IdentifiabilityReport(NOT_IDENTIFIED, base_rule)
    cond = np.linalg.cond(design.T @ design)
    if not np.isfinite(cond) or cond > cond_max:
        return IdentifiabilityReport(NOT_IDENTIFIED, f"gating design is rank deficient (condition number {cond:.3g})")
    if labels is not None and G > 1:
        labels = np.asarray(labels, dtype=np.int64)
        if _completely_separated(design, labels, G):
            return IdentifiabilityReport(
                NOT_IDENTIFIED, "gating covariates completely separate the hard clustering", notes=["heuristic: evaluated at MAP labels"]
            )
        notes.append("no complete separation at the supplied labels (heuristic)")
    if base is None:
        return IdentifiabilityReport(UNKNOWN, base_rule, notes=notes)
    return IdentifiabilityReport(IDENTIFIED, base_rule + "; full-rank gating design", notes=notes)


# ------------------------------------------------------------ chain census


@dataclass
class ModeCensus:
    n_modes: int
    centers: list
    occupancy: list
    silhouettes: dict
    elongation: list
    multimodal_clusters: dict = field(default_factory=dict)


@dataclass
class IdentifiabilityReport:
    verdict: str
    rule: str
    aliases: list = field(default_factory=list)
    mode_census: ModeCensus = None
    intra_switch_flag: bool = None
    intra_switch_evidence: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)


def default_functional(chain):
    """Regression: slopes of the first covariate; otherwise the family's first feature."""
    from .mcmc import draw_features

    if isinstance(chain.family, RegressionFamily):
        return chain.arrays["beta"][:, :, 1]
    return draw_features(chain)[:, :, 0]


def _multimodal_clusters(pts, labels, k, alpha):
    """Clusters whose projection on their principal axis fails the dip test."""
    bad = []
    for c in range(k):
        sub = pts[labels == c]
        if sub.shape[0] < 10:
            continue
        centred = sub - sub.mean(0)
        _, _, vt = np.linalg.svd(centred, full_matrices=False)
        _, p = diptest.diptest(centred @ vt[0])
        if p < alpha:
            bad.append(c)
    return bad


def mode_census(points, G, cap_factor=4, seed=0, sample_size=3000, dip_alpha=0.05):
    """k-means mode count over ``k`` in ``G!, 2 G!, ..., cap_factor G!``.

    The silhouette picks ``k`` first. Silhouette favours merging nearby
    modes that sit far from the rest, so while any selected cluster is
    multimodal along its principal axis (dip test) the next larger candidate
    is taken instead.
    """
    pts = np.asarray(points, float)
    if G < 2:
        raise InputError("a mode census needs G >= 2")
    base = math.factorial(G)
    ks = [m * base for m in range(1, cap_factor + 1) if m * base < pts.shape[0]]
    scores, fits = {}, {}
    for k in ks:
        km = KMeans(n_clusters=k, n_init=10, random_state=seed).fit(pts)
        n_sub = min(sample_size, pts.shape[0])
        scores[k] = float(silhouette_score(pts, km.labels_, sample_size=n_sub, random_state=seed))
        fits[k] = km
    k = max(scores, key=scores.get)
    split = {}
    while True:
        split[k] = _multimodal_clusters(pts, fits[k].labels_, k, dip_alpha)
        larger = [c for c in ks if c > k]
        if not split[k] or not larger:
            break
        k = larger[0]
    km = fits[k]
    occ = np.bincount(km.labels_, minlength=k) / pts.shape[0]
    elong = []
    for c in range(k):
        sub = pts[km.labels_ == c]
        if sub.shape[0] < 3:
            elong.append(float("nan"))
            continue
        ev = np.linalg.eigvalsh(np.atleast_2d(np.cov(sub, rowvar=False)))
        elong.append(float(math.sqrt(ev[-1] / max(ev[0], 1e-300))))
    order = np.lexsort(km.cluster_centers_.T[::-1])
    return ModeCensus(
        n_modes=k,
        centers=km.cluster_centers_[order].tolist(),
        occupancy=occ[order].tolist(),
        silhouettes=scores,
        elongation=[elong[i] for i in order],
        multimodal_clusters={int(kk): len(v) for kk, v in split.items()},
    )


def center_model(chain):
    """Model at the posterior mean of (relabeled) draws."""
    from .core import Gating, MEModelSpec

    means = {k: v.mean(0) for k, v in chain.arrays.items()}
    experts = chain.family.unstack({k: v for k, v in means.items() if k not in ("weights", "gamma")})
    if "gamma" in means:
        return MEModelSpec(chain.variant, chain.family, experts, gating=Gating(means["gamma"]))
    return MEModelSpec(chain.variant, chain.family, experts, weights=means["weights"] / means["weights"].sum())


def information_rank(model, data):
    """``(rank, n_params)`` of the empirical information at ``model``.

    A deficient rank means a direction along which the likelihood is flat to
    second order: the mode is a set, not a point.
    """
    from .em import standard_errors

    se = standard_errors(model, data)
    return se.rank, se.estimates.size


def diagnose_chain(chain, data=None, functional=None, relabeled=None, expected_modes=None, condition=None, dip_alpha=0.05, seed=0):
    """Mode census on raw draws plus checks on relabeled draws.

    ``functional`` maps a chain to ``(S, G)`` or ``(S, d)`` points (default:
    regression slopes, else the first feature per component). ``relabeled``
    is the output of :func:`~mixexperts.mcmc.resolve_label_switching`
    (computed when omitted). With ``data`` the empirical information at the
    relabeled posterior mean is checked for rank deficiency. ``condition`` is
    an optional report from a structural check; a negative verdict there is
    carried over.
    """
    from .mcmc import resolve_label_switching

    if chain.n_draws < 20 * chain.G:
        raise InputError("too few draws for a mode census")
    fn = functional or default_functional
    raw = np.asarray(fn(chain), float).reshape(chain.n_draws, -1)
    census = mode_census(raw, chain.G, seed=seed, dip_alpha=dip_alpha)
    if relabeled is None:
        relabeled = resolve_label_switching(chain, seed=seed)
    rel = np.asarray(fn(relabeled.chain), float).reshape(chain.n_draws, -1)
    evidence = {}
    for j in range(rel.shape[1]):
        dip, p = diptest.diptest(rel[:, j])
        evidence[f"coordinate[{j}]"] = {"dip": float(dip), "p_value": float(p)}
    intra = any(v["p_value"] < dip_alpha for v in evidence.values())
    base = math.factorial(chain.G)
    notes = [f"silhouette candidates {sorted(census.silhouettes)}"]
    if expected_modes is not None and census.n_modes != expected_modes:
        notes.append(f"expected {expected_modes} modes, found {census.n_modes}")
    reasons = []
    if census.n_modes > base:
        reasons.append(f"{census.n_modes} modes exceed the {base} label permutations")
    if data is not None:
        rank, k = information_rank(center_model(relabeled.chain), data)
        notes.append(f"empirical information rank {rank} of {k} at the relabeled posterior mean")
        if rank < k:
            reasons.append(f"non-point modes: information rank {rank} < {k} parameters")
    if intra:
        reasons.append("relabeled component draws remain multimodal (intra-component switching)")
    if condition is not None and condition.verdict == NOT_IDENTIFIED:
        reasons.append(condition.rule)
    if reasons:
        verdict, rule = NOT_IDENTIFIED, "; ".join(reasons)
    elif condition is not None and condition.verdict == UNKNOWN:
        verdict, rule = UNKNOWN, condition.rule
    else:
        verdict, rule = IDENTIFIED, f"{census.n_modes} point modes, as label switching alone explains"
    return IdentifiabilityReport(
        verdict=verdict,
        rule=rule,
        aliases=list(condition.aliases) if condition is not None else [],
        mode_census=census,
        intra_switch_flag=bool(intra),
        intra_switch_evidence=evidence,
        notes=notes,
    )
