"""Domain types, the four model variants and the multinomial-logit gating network.

Component indices are 0-based throughout the library; component 0 is the
gating baseline whose coefficient row is fixed at zero. File formats written
by the CLI use 1-based labels.

Variants:

* ``a`` -- mixture: covariate-free weights and experts
* ``b`` -- mixture of regressions: covariate-free weights, regression experts
* ``c`` -- simple mixture of experts: gating network, covariate-free experts
* ``d`` -- standard mixture of experts: gating network and regression experts
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .errors import InputError, NumericalError

VARIANTS = ("a", "b", "c", "d")
GATED_VARIANTS = frozenset("cd")
REGRESSION_VARIANTS = frozenset("bd")

DATA_KINDS = ("continuous", "rankings", "categorical", "binomial")


def _readonly(a):
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    """Outcomes plus raw covariates; the intercept column is synthesized.

    ``outcomes`` layout depends on ``kind``:

    * continuous: ``n x d`` float
    * rankings: ``n x M`` int, 0-based candidate indices padded with -1
    * categorical: ``n x (T_len + 1)`` int, 0-based states
    * binomial: length-``n`` int counts in ``0..trials``
    """

    outcomes: np.ndarray
    kind: str
    covariates: np.ndarray = None
    trials: int = None
    n_states: int = None
    n_candidates: int = None
    design: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.kind not in DATA_KINDS:
            raise InputError(f"unknown data kind {self.kind!r}")
        y = np.asarray(self.outcomes)
        if self.kind == "continuous":
            y = np.asarray(y, dtype=float)
            if y.ndim == 1:
                y = y[:, None]
            if y.ndim != 2 or not np.all(np.isfinite(y)):
                raise InputError("continuous outcomes must be a finite n x d array")
        elif self.kind == "binomial":
            y = np.asarray(y).ravel()
            if self.trials is None or int(self.trials) < 1:
                raise InputError("binomial data needs trials >= 1")
            if not np.all(y == np.round(y)) or y.min(initial=0) < 0 or y.max(initial=0) > self.trials:
                raise InputError(f"binomial counts must be integers in 0..{self.trials}")
            y = y.astype(np.int64)
        elif self.kind == "categorical":
            y = np.asarray(y, dtype=np.int64)
            if y.ndim != 2 or y.shape[1] < 2:
                raise InputError("categorical series need shape n x (T_len + 1) with T_len >= 1")
            if self.n_states is None or y.min(initial=0) < 0 or y.max(initial=0) >= self.n_states:
                raise InputError(f"categorical states must lie in 0..{self.n_states - 1 if self.n_states else '?'}")
        else:
            y = np.asarray(y, dtype=np.int64)
            if y.ndim != 2:
                raise InputError("rankings must be an n x M array padded with -1")
            M = self.n_candidates if self.n_candidates is not None else y.shape[1]
            if y.shape[1] < M:
                y = np.hstack([y, -np.ones((y.shape[0], M - y.shape[1]), dtype=np.int64)])
            _check_rankings(y, M)
            object.__setattr__(self, "n_candidates", int(M))
        n = y.shape[0]
        x = self.covariates
        x = np.zeros((n, 0)) if x is None else np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if x.shape[0] != n:
            raise InputError(f"covariates have {x.shape[0]} rows, outcomes have {n}")
        if not np.all(np.isfinite(x)):
            raise InputError("covariates must be finite")
        object.__setattr__(self, "outcomes", _readonly(y))
        object.__setattr__(self, "covariates", _readonly(x))
        object.__setattr__(self, "design", _readonly(np.column_stack([np.ones(n), x])))

    @property
    def n(self):
        return self.outcomes.shape[0]

    @property
    def q(self):
        return self.covariates.shape[1]

    def take(self, index):
        """Row subset (or repetition) of the dataset."""
        index = np.asarray(index)
        return Dataset(
            self.outcomes[index],
            self.kind,
            self.covariates[index],
            trials=self.trials,
            n_states=self.n_states,
            n_candidates=self.n_candidates,
        )

    @classmethod
    def continuous(cls, y, covariates=None):
        return cls(y, "continuous", covariates)

    @classmethod
    def binomial(cls, counts, trials, covariates=None):
        return cls(counts, "binomial", covariates, trials=int(trials))

    @classmethod
    def categorical(cls, series, n_states, covariates=None):
        return cls(series, "categorical", covariates, n_states=int(n_states))

    @classmethod
    def rankings(cls, ballots, n_candidates=None, covariates=None):
        """Build from a padded array or from a list of variable-length ballots."""
        if not isinstance(ballots, np.ndarray):
            ballots = list(ballots)
            width = n_candidates or max((len(b) for b in ballots), default=0)
            arr = -np.ones((len(ballots), width), dtype=np.int64)
            for i, b in enumerate(ballots):
                arr[i, : len(b)] = b
            ballots = arr
        return cls(ballots, "rankings", covariates, n_candidates=n_candidates)


def _check_rankings(y, M):
    for i, row in enumerate(y):
        ranked = row[row >= 0]
        m = ranked.size
        if np.any(row[:m] < 0) or np.any(row[m:] >= 0):
            raise InputError(f"ballot {i}: padding must follow the ranked candidates")
        if np.any(ranked >= M):
            raise InputError(f"ballot {i}: unknown candidate index")
        if np.unique(ranked).size != m:
            raise InputError(f"ballot {i}: repeated candidate")


@dataclass(frozen=True)
class Allocation:
    """Hard component labels (0-based)."""

    z: np.ndarray
    G: int

    def __post_init__(self):
        z = np.asarray(self.z, dtype=np.int64)
        if z.size and (z.min() < 0 or z.max() >= self.G):
            raise InputError(f"allocations must lie in 0..{self.G - 1}")
        object.__setattr__(self, "z", _readonly(z))

    @property
    def indicators(self):
        out = np.zeros((self.z.size, self.G))
        out[np.arange(self.z.size), self.z] = 1.0
        return out

    def counts(self):
        return np.bincount(self.z, minlength=self.G)


@dataclass(frozen=True, eq=False)
class Gating:
    """Multinomial-logit gating coefficients, one row per component."""

    gamma: np.ndarray

    def __post_init__(self):
        gamma = np.atleast_2d(np.asarray(self.gamma, dtype=float))
        if np.any(gamma[0] != 0.0):
            raise InputError("baseline gating row (component 0) must be identically zero")
        if not np.all(np.isfinite(gamma)):
            raise InputError("gating coefficients must be finite")
        object.__setattr__(self, "gamma", _readonly(gamma))

    @property
    def G(self):
        return self.gamma.shape[0]

    @property
    def n_coef(self):
        return self.gamma.shape[1]

    @classmethod
    def zeros(cls, G, n_coef):
        return cls(np.zeros((G, n_coef)))

    @classmethod
    def from_free(cls, free):
        """Build from the ``(G-1) x (q+1)`` non-baseline rows."""
        free = np.atleast_2d(np.asarray(free, dtype=float))
        return cls(np.vstack([np.zeros((1, free.shape[1])), free]))


def log_gating_probs(gating, design):
    """``n x G`` matrix of log gating probabilities for each design row."""
    design = np.atleast_2d(np.asarray(design, dtype=float))
    if design.shape[1] != gating.n_coef:
        raise InputError(
            f"design has {design.shape[1]} columns, gating expects {gating.n_coef}"
        )
    eta = design @ gating.gamma.T
    return eta - logsumexp(eta, axis=1, keepdims=True)


def gating_probs(gating, x_tilde):
    """Gating probabilities for one design row (vector) or many (matrix)."""
    x = np.asarray(x_tilde, dtype=float)
    out = np.exp(log_gating_probs(gating, np.atleast_2d(x)))
    out /= out.sum(axis=1, keepdims=True)
    return out[0] if x.ndim == 1 else out


def _check_perm(sigma, G):
    sigma = np.asarray(sigma, dtype=np.int64)
    if sigma.shape != (G,) or not np.array_equal(np.sort(sigma), np.arange(G)):
        raise InputError(f"{sigma.tolist()} is not a permutation of 0..{G - 1}")
    return sigma


def relabel_gating(gating, sigma):
    """Coefficients of the relabeled gating network ``eta*_g = eta_{sigma(g)}``.

    The baseline stays at component 0, so every row is shifted by the row
    that moves into the baseline position.
    """
    sigma = _check_perm(sigma, gating.G)
    g = gating.gamma
    new = g[sigma] - g[sigma[0]]
    new[0] = 0.0
    return Gating(new)


@dataclass(frozen=True, eq=False)
class MEModelSpec:
    """A fully parameterized mixture-of-experts model.

    Variants ``a``/``b`` carry simplex ``weights``; ``c``/``d`` carry a
    :class:`Gating`. ``experts`` is a tuple of per-component parameter
    objects understood by ``family``.
    """

    variant: str
    family: object
    experts: tuple
    weights: np.ndarray = None
    gating: Gating = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise InputError(f"unknown variant {self.variant!r}")
        object.__setattr__(self, "experts", tuple(self.experts))
        self.family.check_model(self.variant, self.experts)
        G = len(self.experts)
        if G < 1:
            raise InputError("a model needs at least one component")
        if self.variant in GATED_VARIANTS:
            if self.gating is None or self.gating.G != G:
                raise InputError(f"variant {self.variant} needs a gating network with {G} rows")
        else:
            w = np.ones(1) if self.weights is None and G == 1 else np.asarray(self.weights, dtype=float)
            if w.shape != (G,) or np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-9:
                raise InputError("weights must be a strictly positive simplex vector of length G")
            object.__setattr__(self, "weights", _readonly(w))

    @property
    def G(self):
        return len(self.experts)

    def log_weights(self, data):
        if self.variant in GATED_VARIANTS:
            return log_gating_probs(self.gating, data.design)
        return np.broadcast_to(np.log(self.weights), (data.n, self.G))

    def component_logpdf(self, data):
        return self.family.logpdf(self.experts, data)

    def log_joint(self, data):
        """``n x G`` matrix of log weight + log expert density."""
        return self.log_weights(data) + self.component_logpdf(data)

    def replace(self, **changes):
        kw = dict(variant=self.variant, family=self.family, experts=self.experts,
                  weights=self.weights, gating=self.gating)
        kw.update(changes)
        return MEModelSpec(**kw)


def relabel_model(model, sigma):
    """Apply ``theta*_g = theta_{sigma(g)}`` to experts and weights/gating."""
    sigma = _check_perm(sigma, model.G)
    experts = tuple(model.experts[s] for s in sigma)
    if model.variant in GATED_VARIANTS:
        return model.replace(experts=experts, gating=relabel_gating(model.gating, sigma))
    return model.replace(experts=experts, weights=model.weights[sigma])


def joint_density(model, y, x, g):
    """Joint density of one outcome and membership in component ``g``."""
    if not 0 <= g < model.G:
        raise InputError(f"component index {g} outside 0..{model.G - 1}")
    data = model.family.dataset([y], None if x is None else np.atleast_2d(x))
    return float(np.exp(model.log_joint(data)[0, g]))


def loglik_terms(model, data):
    """Per-observation log mixture density."""
    lj = model.log_joint(data)
    with np.errstate(invalid="ignore"):
        out = logsumexp(lj, axis=1)
    return out


def log_likelihood(model, data):
    """Observed-data log-likelihood via log-sum-exp over components."""
    terms = loglik_terms(model, data)
    if not np.all(np.isfinite(terms)):
        bad = int(np.flatnonzero(~np.isfinite(terms))[0])
        raise NumericalError(f"non-finite mixture density at observation {bad}")
    return float(terms.sum())
