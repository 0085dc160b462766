"""Command-line interface: ``disagg <command> [options]``.

Commands pass data through on-disk artifacts:

    simulate -> prepare -> fit -> predict
                                -> mcmc -> compare

Every option can also come from a JSON document given with ``--config``;
flags on the command line take precedence. Exit status is 0 on success,
1 for usage errors, 2 for data errors and 3 for numerical failures.
"""

from __future__ import annotations

import argparse
import json
import sys
import warnings
from pathlib import Path

import jsonschema

from . import geoio, laplace, mcmc, predictor, prepare, simulate
from .errors import DisaggError, UsageError
from .model import FAMILIES, LINKS, ModelSpec, PriorSpec

_NUM = {"type": "number"}
_INT = {"type": "integer"}
_BOOL = {"type": "boolean"}
_STR = {"type": "string"}


def _obj(props: dict) -> dict:
    return {"type": "object", "properties": props, "additionalProperties": False}


CONFIG_SCHEMA = _obj({
    "shapes": _STR,
    "covariates": _STR,
    "aggregation": _STR,
    "id_var": _STR,
    "response_var": _STR,
    "sample_size_var": _STR,
    "na_action": _BOOL,
    "standardize": _BOOL,
    "spacing": {"type": "number", "exclusiveMinimum": 0},
    "pad_nodes": {"type": "integer", "minimum": 0},
    "prepared": _STR,
    "fit": _STR,
    "chains": _STR,
    "newdata": _STR,
    "out": _STR,
    "ncores": {"type": "integer", "minimum": 1},
    "seed": {"type": "integer", "minimum": 0},
    "verbose": _BOOL,
    "model": _obj({
        "family": {"enum": list(FAMILIES)},
        "link": {"enum": list(LINKS)},
        "use_field": _BOOL,
        "use_iid": _BOOL,
        "max_iterations": {"type": "integer", "minimum": 1},
        "fixed": {"type": "object", "additionalProperties": _NUM},
    }),
    "priors": _obj({name: _NUM for name in PriorSpec.__dataclass_fields__}),
    "predict": _obj({
        "n_draws": {"type": "integer", "minimum": 0},
        "ci": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "predict_iid": _BOOL,
    }),
    "mcmc": _obj({
        "chains": {"type": "integer", "minimum": 2},
        "iterations": {"type": "integer", "minimum": 2},
        "warmup": {"type": "integer", "minimum": 0},
        "auto_double": _BOOL,
        "rhat_target": {"type": "number", "exclusiveMinimum": 1},
        "max_iterations": {"type": "integer", "minimum": 2},
        "init_scale": {"type": "number", "exclusiveMinimum": 0},
    }),
    "simulation": _obj({
        "grid_ncols": {"type": "integer", "minimum": 1},
        "grid_nrows": {"type": "integer", "minimum": 1},
        "cellsize": {"type": "number", "exclusiveMinimum": 0},
        "n_polygons": {"type": "integer", "minimum": 1},
        "n_covariates": {"type": "integer", "minimum": 0},
        "true_beta0": _NUM,
        "true_beta": {"type": "array", "items": _NUM},
        "true_sigma": {"type": "number", "exclusiveMinimum": 0},
        "true_rho": {"type": "number", "exclusiveMinimum": 0},
        "true_sigma_u": {"type": "number", "exclusiveMinimum": 0},
        "family": {"enum": list(FAMILIES)},
        "link": {"enum": list(LINKS)},
        "aggregation_mode": {"enum": ["uniform", "lognormal"]},
        "aggregation_mu": _NUM,
        "aggregation_sigma": {"type": "number", "minimum": 0},
        "covariate_smoothing": {"type": "number", "minimum": 0},
        "sample_size": {"type": "number", "minimum": 0},
        "obs_sigma": {"type": "number", "exclusiveMinimum": 0},
    }),
})

DEFAULTS = {
    "id_var": None,
    "response_var": None,
    "sample_size_var": None,
    "na_action": False,
    "standardize": False,
    "spacing": None,
    "pad_nodes": prepare.DEFAULT_PAD_NODES,
    "ncores": 1,
    "seed": 0,
    "verbose": False,
    "n_draws": predictor.DEFAULT_N_DRAWS,
    "ci": predictor.DEFAULT_CI,
    "predict_iid": False,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def load_config(path) -> dict:
    """Read and validate a configuration document.

    Raises:
        UsageError: the file is unreadable or does not match the schema.
    """
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config '{path}': {exc}") from None
    try:
        jsonschema.validate(doc, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise UsageError(f"config '{path}' is invalid at {where}: {exc.message}") from None
    return doc


class Settings:
    """Command-line values layered over the config document and built-in defaults."""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.config = load_config(args.config) if getattr(args, "config", None) else {}

    def get(self, name: str, section: str | None = None, key: str | None = None, required: bool = False):
        value = getattr(self.args, name, None)
        if value is None:
            src = self.config.get(section, {}) if section else self.config
            value = src.get(key or name)
        if value is None:
            value = DEFAULTS.get(name)
        if value is None and required:
            raise UsageError(f"missing required option --{name.replace('_', '-')}")
        return value


# --------------------------------------------------------------------------- #
# Commands
# --------------------------------------------------------------------------- #


def cmd_prepare(s: Settings) -> int:
    polygons = geoio.read_polygons(s.get("shapes", required=True), s.get("id_var", required=True),
                                   s.get("response_var", required=True), s.get("sample_size_var"))
    stack = geoio.load_covariate_dir(s.get("covariates", required=True))
    agg_path = s.get("aggregation")
    aggregation = geoio.read_ascii_grid(agg_path) if agg_path else None
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        prep = prepare.prepare_data(
            polygons, stack, aggregation,
            na_action=s.get("na_action"),
            standardize_covariates=s.get("standardize"),
            spacing=s.get("spacing"),
            pad_nodes=s.get("pad_nodes"),
            ncores=s.get("ncores"),
        )
    _report(caught)
    prepare.save_prepared(prep, s.get("out", required=True))
    print(prepare.summarize(prep))
    return 0


def _model_spec(s: Settings) -> ModelSpec:
    model = dict(s.config.get("model", {}))
    priors = dict(s.config.get("priors", {}))
    for name in PriorSpec.__dataclass_fields__:
        value = getattr(s.args, name, None)
        if value is not None:
            priors[name] = value
    for key in ("family", "link"):
        value = getattr(s.args, key, None)
        if value is not None:
            model[key] = value
    if s.args.no_field:
        model["use_field"] = False
    if s.args.no_iid:
        model["use_iid"] = False
    if s.args.iterations is not None:
        model["max_iterations"] = s.args.iterations
    fixed = dict(model.get("fixed", {}))
    for item in s.args.fix or []:
        name, _, value = item.partition("=")
        try:
            fixed[name] = float(value)
        except ValueError:
            raise UsageError(f"--fix expects NAME=VALUE, got '{item}'") from None
    model["fixed"] = fixed
    model["priors"] = PriorSpec(**priors)
    return ModelSpec(**model)


def cmd_fit(s: Settings) -> int:
    prep = prepare.load_prepared(s.get("prepared", required=True))
    spec = _model_spec(s)
    callback = None
    if s.get("verbose"):
        def callback(it, theta, value, gnorm):
            print(f"iteration {it:4d}  objective {value:.10g}  gradient max-norm {gnorm:.3g}", flush=True)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        result = laplace.fit(prep, spec, ncores=s.get("ncores"), callback=callback)
    result.save(s.get("out", required=True))
    print(laplace.summarize_fit(result, prep))
    _report(caught)
    return 0


def cmd_predict(s: Settings) -> int:
    prep = prepare.load_prepared(s.get("prepared", required=True))
    fit = laplace.FitResult.load(s.get("fit", required=True), prep)
    newdata_dir = s.get("newdata")
    newdata = geoio.load_covariate_dir(newdata_dir) if newdata_dir else None
    n_draws = s.get("n_draws", "predict")
    predict_iid = bool(s.get("predict_iid", "predict"))
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        if n_draws:
            result = predictor.predict_uncertainty(fit, prep, newdata, predict_iid, n_draws=n_draws,
                                                   ci=s.get("ci", "predict"), seed=s.get("seed"),
                                                   ncores=s.get("ncores"))
        else:
            result = predictor.predict_mean(fit, prep, newdata, predict_iid)
    out = Path(s.get("out", required=True))
    result.save(out)
    metrics = predictor.in_sample_metrics(fit, prep)
    predictor.write_metrics(metrics, out / "metrics.json")
    print(metrics.to_json(), end="")
    _report(caught)
    return 0


def cmd_simulate(s: Settings) -> int:
    cfg = dict(s.config.get("simulation", {}))
    a = s.args
    for flag, key in (("ncols", "grid_ncols"), ("nrows", "grid_nrows"), ("cellsize", "cellsize"),
                      ("n_polygons", "n_polygons"), ("n_covariates", "n_covariates"), ("beta0", "true_beta0"),
                      ("beta", "true_beta"), ("sigma", "true_sigma"), ("rho", "true_rho"),
                      ("sigma_u", "true_sigma_u"), ("family", "family"), ("link", "link"),
                      ("aggregation_mode", "aggregation_mode"), ("aggregation_mu", "aggregation_mu"),
                      ("aggregation_sigma", "aggregation_sigma"), ("sample_size", "sample_size"),
                      ("obs_sigma", "obs_sigma")):
        value = getattr(a, flag, None)
        if value is not None:
            cfg[key] = value
    if "true_beta" in cfg:
        cfg["true_beta"] = tuple(cfg["true_beta"])
        cfg.setdefault("n_covariates", len(cfg["true_beta"]))
    elif "n_covariates" in cfg:
        cfg["true_beta"] = tuple(0.0 for _ in range(cfg["n_covariates"]))
    cfg["seed"] = s.get("seed")
    data = simulate.simulate_dataset(simulate.SimulationConfig(**cfg))
    out = Path(s.get("out", required=True))
    data.save(out)
    print(f"wrote {len(data.polygons)} polygons and {len(data.stack)} covariates to {out}")
    return 0


def cmd_mcmc(s: Settings) -> int:
    prep = prepare.load_prepared(s.get("prepared", required=True))
    fit = laplace.FitResult.load(s.get("fit", required=True), prep)
    sec = "mcmc"
    n_chains = s.get("n_chains", sec, "chains") or 4
    iterations = s.get("n_iterations", sec, "iterations") or 8000
    warmup = s.get("n_warmup", sec, "warmup")
    init_scale = s.get("init_scale", sec) or 0.1
    seed, ncores = s.get("seed"), s.get("ncores")
    if s.get("auto_double", sec):
        rhat_target = s.get("rhat_target", sec) or 1.05
        max_iter = s.get("max_mcmc_iterations", sec, "max_iterations") or 256_000
        fraction = warmup / iterations if warmup is not None else 0.25

        def progress(n, r):
            print(f"{n} iterations: max R-hat {r:.4f}", flush=True)

        chains, diag, _ = mcmc.run_until_converged(prep, fit.spec, fit, n_chains, iterations, fraction, rhat_target,
                                                   max_iter, seed, init_scale, ncores, callback=progress)
        if not diag.converged(rhat_target):
            print(f"WARNING: R-hat did not drop below {rhat_target} within {max_iter} iterations", file=sys.stderr)
    else:
        warmup = iterations // 4 if warmup is None else warmup
        chains = mcmc.run_chains(prep, fit.spec, fit, n_chains, iterations, warmup, seed, init_scale, ncores=ncores)
        diag = mcmc.rhat(chains)
    out = Path(s.get("out", required=True))
    chains.save(out)
    (out / "diagnostics.json").write_text(diag.to_json())
    print(f"max R-hat {diag.max_rhat():.4f}; acceptance rates {', '.join(f'{a:.3f}' for a in chains.acceptance_rates)}")
    return 0


def cmd_compare(s: Settings) -> int:
    fit = laplace.FitResult.load(s.get("fit", required=True))
    chains = mcmc.ChainSet.load(s.get("chains", required=True))
    table = mcmc.compare(fit, chains)
    out = Path(s.get("out", required=True))
    out.mkdir(parents=True, exist_ok=True)
    (out / "comparison.csv").write_text(table.to_csv())
    print(table.to_text())
    return 0


def _report(caught) -> None:
    for w in caught:
        print(f"WARNING: {w.message}", file=sys.stderr)


# --------------------------------------------------------------------------- #
# Parser
# --------------------------------------------------------------------------- #


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON configuration document; flags override its values")
    p.add_argument("--ncores", type=int, help="worker threads (results do not depend on it)")
    p.add_argument("--seed", type=int)


def _flag(p, name, help_text):
    p.add_argument(name, action="store_true", default=None, help=help_text)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="disagg", description="Bayesian disaggregation regression")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)

    p = sub.add_parser("prepare", help="extract pixels, apply the NA policy and size the lattice")
    _common(p)
    p.add_argument("--shapes", help="GeoJSON polygons with responses")
    p.add_argument("--covariates", help="directory of aligned .asc covariate rasters")
    p.add_argument("--aggregation", help="aggregation (e.g. population) raster")
    p.add_argument("--id-var", dest="id_var")
    p.add_argument("--response-var", dest="response_var")
    p.add_argument("--sample-size-var", dest="sample_size_var")
    _flag(p, "--na-action", "impute NA covariates, zero NA weights, drop NA responses")
    _flag(p, "--standardize", "center and scale covariates")
    p.add_argument("--spacing", type=float, help="lattice spacing (default: 4 x cellsize)")
    p.add_argument("--pad-nodes", dest="pad_nodes", type=int)
    p.add_argument("--out", help="output directory")
    p.set_defaults(handler=cmd_prepare)

    p = sub.add_parser("fit", help="fit the model by nested Laplace optimization")
    _common(p)
    p.add_argument("--prepared")
    p.add_argument("--out")
    p.add_argument("--family", choices=FAMILIES)
    p.add_argument("--link", choices=LINKS)
    p.add_argument("--no-field", dest="no_field", action="store_true")
    p.add_argument("--no-iid", dest="no_iid", action="store_true")
    p.add_argument("--iterations", type=int, help="maximum outer iterations")
    p.add_argument("--fix", action="append", metavar="NAME=VALUE", help="hold a hyperparameter constant")
    for name in PriorSpec.__dataclass_fields__:
        p.add_argument("--" + name.replace("_", "-"), dest=name, type=float)
    _flag(p, "--verbose", "print the objective at every outer iteration")
    p.set_defaults(handler=cmd_fit)

    p = sub.add_parser("predict", help="prediction rasters, posterior draws and metrics")
    _common(p)
    p.add_argument("--prepared")
    p.add_argument("--fit")
    p.add_argument("--newdata", help="covariate directory to predict over")
    p.add_argument("--out")
    _flag(p, "--predict-iid", "add the polygon iid effect inside training polygons")
    p.add_argument("--n-draws", dest="n_draws", type=int, help="posterior draws (0: mean only)")
    p.add_argument("--ci", type=float)
    p.set_defaults(handler=cmd_predict)

    p = sub.add_parser("simulate", help="synthetic dataset with known parameters")
    _common(p)
    p.add_argument("--out")
    p.add_argument("--ncols", type=int)
    p.add_argument("--nrows", type=int)
    p.add_argument("--cellsize", type=float)
    p.add_argument("--n-polygons", dest="n_polygons", type=int)
    p.add_argument("--n-covariates", dest="n_covariates", type=int)
    p.add_argument("--beta0", type=float)
    p.add_argument("--beta", type=float, nargs="*")
    p.add_argument("--sigma", type=float)
    p.add_argument("--rho", type=float)
    p.add_argument("--sigma-u", dest="sigma_u", type=float)
    p.add_argument("--family", choices=FAMILIES)
    p.add_argument("--link", choices=LINKS)
    p.add_argument("--aggregation-mode", dest="aggregation_mode", choices=("uniform", "lognormal"))
    p.add_argument("--aggregation-mu", dest="aggregation_mu", type=float)
    p.add_argument("--aggregation-sigma", dest="aggregation_sigma", type=float)
    p.add_argument("--sample-size", dest="sample_size", type=float)
    p.add_argument("--obs-sigma", dest="obs_sigma", type=float)
    p.set_defaults(handler=cmd_simulate)

    p = sub.add_parser("mcmc", help="adaptive Metropolis reference chains")
    _common(p)
    p.add_argument("--prepared")
    p.add_argument("--fit")
    p.add_argument("--out")
    p.add_argument("--chains", dest="n_chains", type=int)
    p.add_argument("--iterations", dest="n_iterations", type=int)
    p.add_argument("--warmup", dest="n_warmup", type=int)
    p.add_argument("--init-scale", dest="init_scale", type=float)
    _flag(p, "--auto-double", "double the iterations until R-hat drops below the target")
    p.add_argument("--rhat-target", dest="rhat_target", type=float)
    p.add_argument("--max-iterations", dest="max_mcmc_iterations", type=int)
    p.set_defaults(handler=cmd_mcmc)

    p = sub.add_parser("compare", help="Laplace vs MCMC hyperparameter table")
    _common(p)
    p.add_argument("--fit")
    p.add_argument("--chains", help="directory written by the mcmc command")
    p.add_argument("--out")
    p.set_defaults(handler=cmd_compare)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.handler(Settings(args))
    except DisaggError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (TypeError, ValueError) as exc:
        # configuration values that reach a constructor with the wrong shape
        print(f"error: {exc}", file=sys.stderr)
        return UsageError.exit_code


if __name__ == "__main__":
    sys.exit(main())
