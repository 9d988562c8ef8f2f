"""Mixture-of-experts models: EM and MCMC fitting, model comparison and
identifiability diagnostics for Gaussian, regression, binomial, ranking and
Markov-chain experts."""

from .core import Allocation, Dataset, Gating, MEModelSpec, log_likelihood, relabel_model
from .em import EMConfig, FitResult, ecm_fit, map_crosstab, multi_start, standard_errors
from .errors import (
    DegenerateComponentError,
    DegenerateObservationError,
    ImportanceSamplingWarning,
    InputError,
    MixExpertsError,
    NoAliasError,
    NumericalError,
)
from .experts import (
    BinomialExpert,
    GaussianExpert,
    GaussianRegressionExpert,
    MarkovChainExpert,
    PlackettLuceExpert,
    make_family,
    simulate,
)
from .identifiability import (
    IdentifiabilityReport,
    binomial_alias_set,
    binomial_identifiable,
    diagnose_chain,
    mode_census,
    regression_alias_solutions,
    regression_coverage_check,
    simple_me_identifiable,
)
from .mcmc import (
    MCMCConfig,
    PosteriorChain,
    PriorSpec,
    gelman_rubin,
    hpd_interval,
    regression_preset,
    resolve_label_switching,
    run_chain,
    run_chains,
)
from .modelsel import (
    aicm,
    bic,
    build_importance_density,
    compare,
    exact_log_marglik_markov_g1,
    is_log_marglik,
)

__version__ = "0.1.0"
