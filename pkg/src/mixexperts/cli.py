"""``mixexperts`` command line: simulate, fit, select, diagnose.

Exit codes: 0 success, 1 numerical failure, 2 input error. ``MOE_LOG``
sets the log level (default WARNING).
"""

import argparse
import dataclasses
import itertools
import logging
import os
import sys
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from . import io
from .core import Gating, MEModelSpec
from .em import EMConfig, map_crosstab, multi_start
from .errors import InputError, MixExpertsError, NumericalError
from .experts import (
    BinomialExpert,
    GaussianExpert,
    GaussianRegressionExpert,
    MarkovFamily,
    family_from_json,
    make_family,
    simulate,
)
from .identifiability import (
    IDENTIFIED,
    NOT_IDENTIFIED,
    UNKNOWN,
    IdentifiabilityReport,
    binomial_alias_set,
    binomial_identifiable,
    center_model,
    default_functional,
    diagnose_chain,
    regression_alias_solutions,
    regression_coverage_check,
    simple_me_identifiable,
)
from .mcmc import (
    GATING_SAMPLERS,
    PRIOR_PRESETS,
    MCMCConfig,
    PosteriorChain,
    PriorSpec,
    draw_features,
    hpd_interval,
    resolve_label_switching,
    run_chain,
)
from .modelsel import aicm, bic, build_importance_density, compare, exact_log_marglik_markov_g1, is_log_marglik

log = logging.getLogger("mixexperts")


# ------------------------------------------------------------------ presets


@dataclass(frozen=True)
class Preset:
    """A simulation truth plus the fit settings that go with it."""

    model: MEModelSpec
    n: int
    covariates: tuple = ()
    prior: str = None
    alias_jumps: bool = False
    # >0: covariate cycles through this many equally used levels; <0: random binary
    levels: int = 0

    def design(self, n, rng):
        if self.levels < 0:
            return rng.integers(2, size=n).astype(float)
        if self.levels > 0:
            return (np.arange(n) % self.levels).astype(float)
        return n


def _preset_table():
    reg = (GaussianRegressionExpert([2.0, 2.0], 0.1), GaussianRegressionExpert([1.0, -2.0], 0.1))
    binom = (BinomialExpert(expit(-1.0)), BinomialExpert(expit(1.5)))
    gauss = (GaussianExpert([0.0, 0.0], np.eye(2)), GaussianExpert([3.0, 3.0], np.eye(2)))
    half = np.array([0.5, 0.5])
    return {
        "gaussian-gated": Preset(
            MEModelSpec("c", make_family("gaussian"), gauss, gating=Gating.from_free([[-1.4, 2.8]])), 200, ("x",), levels=-1
        ),
        "binomial-t2": Preset(MEModelSpec("a", make_family("binomial", trials=2), binom, weights=half), 250),
        "binomial-t5": Preset(MEModelSpec("a", make_family("binomial", trials=5), binom, weights=half), 100),
        "regression-design1": Preset(
            MEModelSpec("b", make_family("regression"), reg, weights=half), 100, ("d",), "regression-aliasing", True, 2
        ),
        "regression-design2": Preset(
            MEModelSpec("b", make_family("regression"), reg, weights=half), 100, ("d",), "regression-aliasing", True, 3
        ),
    }


PRESETS = _preset_table()


def _preset(name):
    try:
        return PRESETS[name]
    except KeyError:
        raise InputError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


def _response_columns(family, preset=None):
    if family.kind == "binomial" or family.name == "regression":
        return ["y"]
    if family.kind == "continuous":
        d = preset.model.experts[0].mu.size if preset is not None and family.name == "gaussian" else 1
        return ["y"] if d == 1 else [f"y{j + 1}" for j in range(d)]
    raise InputError(f"no default response columns for {family.kind} data; pass --response")


# ---------------------------------------------------------------- arguments


def _family_from_args(args, preset=None):
    if args.family is None:
        if preset is None:
            raise InputError("--family is required")
        return preset.model.family
    cfg = {}
    if args.family == "binomial":
        if args.trials is None:
            raise InputError("binomial family needs --trials")
        cfg["trials"] = args.trials
    elif args.family == "markov":
        if args.states is None:
            raise InputError("markov family needs --states")
        cfg.update(n_states=args.states, history=args.history, n_times=args.n_times)
    elif args.family == "plackett-luce":
        if args.candidates is None:
            raise InputError("plackett-luce family needs --candidates")
        cfg["n_candidates"] = args.candidates
    return make_family(args.family, **cfg)


@dataclass
class RunConfig:
    family: object
    variant: str
    G: int
    response: list
    covariates: list
    prior: str = None
    alias_jumps: bool = False
    extras: dict = field(default_factory=dict)


def _run_config(args, G=None):
    preset = _preset(args.preset) if getattr(args, "preset", None) else None
    family = _family_from_args(args, preset)
    variant = args.variant or (preset.model.variant if preset else None)
    if variant is None:
        raise InputError("--variant is required")
    G = G if G is not None else (args.components[0] if args.components else (preset.model.G if preset else None))
    if G is None:
        raise InputError("--components is required")
    response = args.response or _response_columns(family, preset)
    covariates = args.covariates if args.covariates is not None else (list(preset.covariates) if preset else [])
    prior = args.prior or (preset.prior if preset else None)
    alias = args.alias_jumps or bool(preset and preset.alias_jumps)
    return RunConfig(family, variant, int(G), list(response), list(covariates), prior, alias)


def _prior(spec, family, data):
    if spec is None:
        return PriorSpec.default(family, data)
    if spec in PRIOR_PRESETS:
        return PRIOR_PRESETS[spec](data)
    path = Path(spec)
    if not path.exists():
        raise InputError(f"unknown prior preset or file {spec!r}; presets: {sorted(PRIOR_PRESETS)}")
    doc = io.read_json(path)
    prior = PriorSpec.default(family, data)
    kw = {}
    if "gating_mean" in doc:
        kw["gating_mean"] = np.asarray(doc["gating_mean"], float)
    if "gating_cov" in doc:
        kw["gating_cov"] = np.asarray(doc["gating_cov"], float)
    if "weights" in doc:
        kw["weights"] = doc["weights"]
    if "experts" in doc:
        kw["experts"] = type(prior.experts)(**{k: np.asarray(v, float) for k, v in doc["experts"].items()})
    return dataclasses.replace(prior, **kw)


# -------------------------------------------------------------- chain files


def _flat_names(key, shape):
    out = []
    for idx in itertools.product(*(range(s) for s in shape)):
        parts = [str(idx[0] + 1)] + [str(i) for i in idx[1:]]
        out.append(key + "".join(f"[{p}]" for p in parts))
    return out


def chain_table(chain):
    names, cols = [], []
    for key, arr in chain.arrays.items():
        names += _flat_names(key, arr.shape[1:])
        cols.append(arr.reshape(arr.shape[0], -1))
    names.append("loglik")
    cols.append(chain.loglik[:, None])
    return names, np.hstack(cols)


def chain_from_files(directory):
    directory = Path(directory)
    meta = io.read_json(directory / "summary.json")
    header, table = io.read_table(directory / "draws.csv")
    family = family_from_json(meta["family"])
    arrays, pos = {}, 0
    for key, shape in meta["shapes"].items():
        size = int(np.prod(shape)) if shape else 1
        arrays[key] = table[:, pos : pos + size].reshape((-1, *shape))
        pos += size
    if header[pos] != "loglik":
        raise InputError(f"{directory / 'draws.csv'}: columns do not match summary.json shapes")
    G = meta["components"]
    return PosteriorChain(family, meta["variant"], G, arrays, table[:, pos], np.tile(np.arange(G), (table.shape[0], 1)))


# ------------------------------------------------------------- subcommands


def cmd_simulate(args):
    if args.seed is None:
        raise InputError("simulate needs --seed")
    if args.preset is None and args.params is None:
        raise InputError("simulate needs --preset or --params")
    rng = np.random.default_rng(args.seed)
    if args.preset:
        preset = _preset(args.preset)
        model = preset.model
        n = args.n or preset.n
        design = preset.design(n, rng)
        cov_names = list(preset.covariates)
    else:
        doc = io.read_json(args.params)
        model = io.model_from_json(doc["model"])
        n = args.n or doc.get("n")
        if not n:
            raise InputError("--n is required with --params")
        cov_names = doc.get("columns", {}).get("covariates", [])
        design = rng.integers(2, size=(n, len(cov_names))).astype(float) if cov_names else n
    data, z = simulate(model, design, rng)
    out = _outdir(args.out)
    header, rows = io.dataset_table(data, cov_names)
    io.write_table(out / "data.csv", header, rows)
    io.write_table(out / "truth.csv", ["component"], (z.z + 1)[:, None])
    io.write_json(
        out / "params.json",
        {
            "source": f"simulate:{args.preset or 'params'}",
            "n": n,
            "seed": args.seed,
            "columns": {"response": header[: len(header) - len(cov_names)], "covariates": cov_names},
            "model": io.model_to_json(model),
        },
    )
    return 0


def _load(args, cfg):
    if args.data is None:
        raise InputError("--data is required")
    data = io.load_dataset(args.data, cfg.family, cfg.response, cfg.covariates)
    return data


def _fit_em(data, cfg, args, seed):
    config = EMConfig(cfg.variant, cfg.family, cfg.G, tol=args.tol, max_iter=args.max_iter, seed=seed, on_degenerate="restart")
    return multi_start(data, config, args.restarts)


def _fit_mcmc(data, cfg, args, seed, store_moments=False):
    if seed is None:
        raise InputError("MCMC needs --seed")
    config = MCMCConfig(
        cfg.variant,
        cfg.family,
        cfg.G,
        iters=args.iters,
        burnin=args.burnin,
        thin=args.thin,
        gating_sampler=args.gating_sampler,
        alias_jumps=cfg.alias_jumps,
        store_moments=store_moments,
    )
    return run_chain(data, _prior(cfg.prior, cfg.family, data), config, seed=seed)


def _params_doc(model, n, seed, cfg, source):
    return {
        "source": source,
        "n": n,
        "seed": seed,
        "columns": {"response": cfg.response, "covariates": cfg.covariates},
        "model": io.model_to_json(model),
    }


def cmd_fit(args):
    cfg = _run_config(args)
    data = _load(args, cfg)
    out = _outdir(args.out)
    seed = 0 if args.seed is None and args.method == "em" else args.seed
    if args.method == "em":
        fit = _fit_em(data, cfg, args, seed)
        se = fit.std_errors
        doc = {
            "loglik": fit.loglik,
            "converged": fit.converged,
            "iterations": fit.iterations,
            "loglik_trace": fit.loglik_trace.tolist(),
            "bic": bic(fit, data) if fit.converged else None,
            "standard_errors": {k: {"estimate": v, "se": s} for k, (v, s) in se.as_dict().items()} if se else {},
            "map_labels": (fit.map_assignment + 1).tolist(),
            "restarts": fit.restarts_summary,
            "model": io.model_to_json(fit.model),
        }
        if args.crosstab:
            col = cfg.covariates.index(args.crosstab) if args.crosstab in cfg.covariates else None
            if col is None:
                raise InputError(f"--crosstab column {args.crosstab!r} is not among the covariates")
            levels, table = map_crosstab(fit.map_assignment, data.covariates[:, col], cfg.G)
            doc["crosstab"] = {
                "covariate": args.crosstab,
                "levels": levels.tolist(),
                "rows": [f"cluster {g + 1}" for g in range(cfg.G)],
                "counts": table.tolist(),
            }
        io.write_json(out / "fit.json", doc)
        io.write_json(out / "params.json", _params_doc(fit.model, data.n, seed, cfg, "fit:em"))
        return 0
    chain = _fit_mcmc(data, cfg, args, seed)
    _write_chain(out, chain, cfg, data, seed)
    return 0


def _write_chain(out, chain, cfg, data, seed):
    names, table = chain_table(chain)
    io.write_table(out / "draws.csv", names, table)
    summary = {
        "family": cfg.family.describe(),
        "variant": cfg.variant,
        "components": cfg.G,
        "shapes": {k: list(v.shape[1:]) for k, v in chain.arrays.items()},
        "meta": chain.meta,
        "aicm": aicm(chain) if chain.n_draws >= 10 else None,
    }
    relabeled = chain
    if cfg.G > 1 and chain.n_draws >= 10 * cfg.G:
        res = resolve_label_switching(chain, seed=seed)
        relabeled = res.chain
        summary["relabeled"] = True
        summary["ambiguous_fraction"] = float(res.ambiguous.mean())
    rnames, rtable = chain_table(relabeled)
    io.write_table(out / "relabeled_draws.csv", rnames, rtable)
    summary["posterior_mean"] = dict(zip(rnames[:-1], rtable[:, :-1].mean(0).tolist()))
    summary["hpd95"] = {n: list(hpd_interval(rtable[:, j])) for j, n in enumerate(rnames[:-1])}
    io.write_json(out / "summary.json", summary)
    io.write_json(out / "params.json", _params_doc(center_model(relabeled), data.n, seed, cfg, "fit:mcmc"))


def _candidates(args):
    if args.models:
        doc = io.read_json(args.models)
        out = []
        for i, m in enumerate(doc["models"]):
            ns = argparse.Namespace(**{**vars(args), **{k.replace("-", "_"): v for k, v in m.items()}})
            ns.components = [m["components"]] if "components" in m else args.components
            out.append((m.get("name", f"model{i + 1}"), ns))
        return out
    if not args.components or len(args.components) < 2:
        raise InputError("select needs at least two candidates (--components G1 G2 ... or --models FILE)")
    return [(f"G={G}", argparse.Namespace(**{**vars(args), "components": [G]})) for G in args.components]


def cmd_select(args):
    cands = _candidates(args)
    if len(cands) < 2:
        raise InputError("select needs at least two candidates")
    rows, values = [], {}
    for name, ns in cands:
        row = {"name": name, "status": "ok"}
        try:
            cfg = _run_config(ns)
            row.update(family=cfg.family.name, variant=cfg.variant, components=cfg.G)
            data = _load(ns, cfg)
            if args.criterion == "bic":
                fit = _fit_em(data, cfg, ns, ns.seed or 0)
                row["loglik"] = fit.loglik
                row["value"] = bic(fit, data)
            else:
                chain = _fit_mcmc(data, cfg, ns, ns.seed, store_moments=args.criterion == "log-marglik")
                if args.criterion == "aicm":
                    row["value"] = aicm(chain)
                else:
                    prior = _prior(cfg.prior, cfg.family, data)
                    with warnings.catch_warnings(record=True) as caught:
                        warnings.simplefilter("always")
                        q = build_importance_density(chain)
                        res = is_log_marglik(data, prior, q, args.is_draws, ns.seed)
                    row.update(value=res.log_marglik, se=res.std_error, ess=res.ess)
                    row["warnings"] = [str(w.message) for w in caught]
                    if isinstance(cfg.family, MarkovFamily) and cfg.G == 1:
                        row["exact"] = exact_log_marglik_markov_g1(cfg.family, data, prior.experts)
        except (MixExpertsError, ValueError) as exc:
            row.update(status="failed", error=str(exc), value=None)
        rows.append(row)
        values[name] = row.get("value")
    key = "log_marglik" if args.criterion == "log-marglik" else args.criterion
    table = compare(values, key)
    out = _outdir(args.out)
    io.write_json(out / "select.json", {"criterion": args.criterion, "rows": rows, "winner": table["winner"]})
    failed = sum(r["status"] != "ok" for r in rows)
    return 0 if failed < len(rows) else 1


def _condition_report(family, variant, G, design=None, truth=None):
    """Structural verdict plus explicit aliases where the model admits them."""
    name = family.name
    if name == "binomial":
        ok, margin = binomial_identifiable(G, family.trials)
        rep = IdentifiabilityReport(IDENTIFIED if ok else NOT_IDENTIFIED, f"binomial counting rule 2G-1 <= T (margin {margin})")
        if truth is not None and G == 2 and not ok:
            eta = float(truth.weights[0])
            theta = (eta, truth.experts[0].pi, truth.experts[1].pi)
            aliases = binomial_alias_set(theta, family.trials, n_points=20)
            rep.aliases = [{"eta": a[0], "pi": [a[1], a[2]]} for a in aliases]
        return rep
    if name == "regression" and design is not None:
        cov = regression_coverage_check(design, G)
        verdict = {True: IDENTIFIED, False: NOT_IDENTIFIED, None: UNKNOWN}[cov.satisfied]
        rep = IdentifiabilityReport(verdict, f"coverage: {cov.n_points} distinct design points vs G = {G}", notes=[cov.note] if cov.note else [])
        if truth is not None and design.shape[1] == 2:
            points = np.unique(design[:, 1])
            betas = np.stack([e.beta for e in truth.experts])
            try:
                rep.aliases = [{"beta": a.tolist()} for a in regression_alias_solutions(points, betas)]
            except InputError:
                pass
        return rep
    if variant == "c" and design is not None:
        return simple_me_identifiable(family, design, G)
    return IdentifiabilityReport(UNKNOWN, f"no structural rule for {name} experts under variant {variant}")


def _functional_names(chain):
    if chain.family.name == "regression":
        return [f"beta[{g + 1}][1]" for g in range(chain.G)]
    return [f"feature[{g + 1}][0]" for g in range(draw_features(chain).shape[1])]


def cmd_diagnose(args):
    out = _outdir(args.out)
    truth = data = chain = preset = None
    if args.chain:
        chain = chain_from_files(args.chain)
        cfg = RunConfig(chain.family, chain.variant, chain.G, [], [])
    elif args.preset:
        preset = _preset(args.preset)
        truth = preset.model
        cfg = RunConfig(truth.family, truth.variant, truth.G, [], list(preset.covariates), preset.prior, preset.alias_jumps)
    else:
        cfg = _run_config(args)
    if args.params:
        truth = io.model_from_json(io.read_json(args.params)["model"])
    if args.data:
        cfg.response = args.response or _response_columns(cfg.family)
        cfg.covariates = args.covariates or []
        data = _load(args, cfg)
    elif preset is not None and not args.condition_only:
        if args.seed is None:
            raise InputError("diagnose with --preset needs --seed")
        rng = np.random.default_rng(args.seed)
        data, _ = simulate(truth, preset.design(args.n or preset.n, rng), rng)
    design = data.design if data is not None else None
    if args.design_points:
        pts = np.asarray(args.design_points, float)
        design = np.column_stack([np.ones(pts.size), pts])
    elif design is None and preset is not None and preset.levels > 0:
        design = np.column_stack([np.ones(preset.levels), np.arange(preset.levels, dtype=float)])
    condition = _condition_report(cfg.family, cfg.variant, cfg.G, design, truth)
    if args.condition_only or (data is None and chain is None):
        io.write_json(out / "report.json", {"condition": condition.to_dict(), "report": condition.to_dict()})
        return 0
    seed = 0 if args.seed is None else args.seed
    if chain is None:
        if args.seed is None:
            raise InputError("diagnose needs --seed to run a chain")
        chain = _fit_mcmc(data, cfg, args, seed)
    relabeled = resolve_label_switching(chain, seed=seed)
    report = diagnose_chain(chain, data=data, relabeled=relabeled, condition=condition, seed=seed)
    names = _functional_names(chain)
    io.write_table(out / "raw_draws.csv", names, default_functional(chain))
    io.write_table(out / "relabeled_draws.csv", names, default_functional(relabeled.chain))
    io.write_json(out / "report.json", {"condition": condition.to_dict(), "report": report.to_dict()})
    return 0


# ---------------------------------------------------------------------- main


def _outdir(path):
    out = Path(path or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _common(p):
    p.add_argument("--family", choices=["gaussian", "regression", "binomial", "plackett-luce", "markov"])
    p.add_argument("--variant", choices=list("abcd"))
    p.add_argument("--components", type=int, nargs="+", metavar="G")
    p.add_argument("--method", choices=["em", "mcmc"], default="em")
    p.add_argument("--iters", type=int, default=15000)
    p.add_argument("--burnin", type=int, default=5000)
    p.add_argument("--thin", type=int, default=1)
    p.add_argument("--restarts", type=int, default=5)
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--max-iter", type=int, default=500)
    p.add_argument("--seed", type=int)
    p.add_argument("--gating-sampler", choices=GATING_SAMPLERS, default="drum-aux")
    p.add_argument("--prior", help=f"preset ({', '.join(PRIOR_PRESETS)}) or JSON file")
    p.add_argument("--alias-jumps", action="store_true", help="add cross-labelling moves (mixtures of regressions)")
    p.add_argument("--data")
    p.add_argument("--response", nargs="+")
    p.add_argument("--covariates", nargs="*")
    p.add_argument("--out", default=".")
    p.add_argument("--preset", help=f"one of {', '.join(PRESETS)}")
    p.add_argument("--trials", type=int, help="binomial trials T")
    p.add_argument("--states", type=int, help="Markov state count")
    p.add_argument("--history", default="prev", help="Markov history: prev, prev_x, prev_t, prev_t_x")
    p.add_argument("--n-times", type=int, help="transitions per series (time-dependent histories)")
    p.add_argument("--candidates", type=int, help="Plackett-Luce candidate count")


def build_parser():
    parser = argparse.ArgumentParser(prog="mixexperts", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate data from a preset or params file")
    _common(p)
    p.add_argument("--params")
    p.add_argument("--n", type=int)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="EM or MCMC fit")
    _common(p)
    p.add_argument("--crosstab", help="covariate column for a MAP cross-tabulation")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("select", help="compare candidate models")
    _common(p)
    p.add_argument("--models", help="JSON file with a 'models' list of option overrides")
    p.add_argument("--criterion", choices=["bic", "aicm", "log-marglik"], default="bic")
    p.add_argument("--is-draws", type=int, default=10000)
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("diagnose", help="identifiability conditions and chain diagnostics")
    _common(p)
    p.add_argument("--params", help="true parameters (JSON) for alias construction")
    p.add_argument("--chain", help="directory written by 'fit --method mcmc'")
    p.add_argument("--design-points", type=float, nargs="+")
    p.add_argument("--condition-only", action="store_true")
    p.add_argument("--n", type=int)
    p.set_defaults(func=cmd_diagnose)
    return parser


def main(argv=None):
    level = os.environ.get("MOE_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (InputError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (NumericalError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
