"""Command-line workflows: train, predict, eval, gibbs, gen-toy, grid.

Every command resolves its options from built-in defaults, an optional JSON
config of flat dotted keys (``"train.iters": 50`` or plain ``"seed": 3``) and
command-line flags, in increasing order of precedence. The resolved options
are written next to the outputs so a run can be repeated with
``--config <resolved>.json``. ``LSMGP_OUTPUT_DIR`` overrides the configured
output directory; an explicit ``--output-dir`` flag still wins.

Exit codes: 0 ok, 1 usage, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import cavi, data, gibbs, metrics
from .kernel import KernelConfig
from .likelihood import SAMPLERS, predict_proba
from .sparse import latent_predictive, load_checkpoint, save_checkpoint

logger = logging.getLogger("lsmgp")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3
OUTPUT_ENV = "LSMGP_OUTPUT_DIR"


class UsageError(Exception):
    pass


@dataclass(frozen=True)
class Option:
    name: str
    type: type
    default: object
    help: str
    choices: tuple | None = None
    nargs: str | int | None = None


def _m_value(text):
    if isinstance(text, int) or text is None:
        return text
    if str(text).lower() == "full":
        return "full"
    value = int(text)
    if value < 1:
        raise ValueError("M must be a positive integer or 'full'")
    return value


def _bool(text):
    if isinstance(text, bool):
        return text
    low = str(text).lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


GLOBAL_OPTIONS = [
    Option("seed", int, 0, "root seed for all random substreams"),
    Option("threads", int, 1, "cap on BLAS worker threads"),
    Option("output_dir", str, ".", "directory for all outputs"),
]

COMMAND_OPTIONS = {
    "train": [
        Option("data", str, None, "training data (LIBSVM)"),
        Option("test", str, None, "optional held-out data (LIBSVM) for the trace"),
        Option("test_fraction", float, 0.0, "hold out this stratified fraction of --data"),
        Option("iters", int, 100, "training iterations"),
        Option("m", _m_value, 200, "number of inducing points or 'full'"),
        Option("minibatch", int, 200, "minibatch size"),
        Option("inner_iters", int, 5, "local fixed-point rounds per iteration"),
        Option("rho_delay", float, 1.0, "step size delay"),
        Option("rho_forget", float, 0.6, "step size forgetting rate"),
        Option("hyper_period", int, 10, "iterations between hyperparameter steps (0 = fixed)"),
        Option("hyper_lr", float, 0.01, "Adam learning rate for log-hyperparameters"),
        Option("shared_hyper", _bool, True, "share kernel hyperparameters across classes"),
        Option("class_subsample", int, 0, "classes updated per iteration (0 = all)"),
        Option("variance", float, 1.0, "initial kernel variance"),
        Option("length_scale", float, None, "initial length scale (default: median heuristic)"),
        Option("normalize", _bool, True, "standardize features with training statistics"),
        Option("elbo_every", int, 1, "ELBO evaluation period (0 = never)"),
        Option("eval_every", int, 0, "held-out evaluation period (0 = never)"),
        Option("mc_samples", int, 1000, "Monte Carlo samples for predictions"),
        Option("approx_threshold", float, None, "latent mean below which the count rate uses the sigmoid shortcut (default: exact)"),
        Option("record_wall_time", _bool, False, "fill the wall_time_s trace column"),
        Option("checkpoint", str, "checkpoint.json", "checkpoint file name"),
        Option("trace", str, "trace.csv", "trace file name"),
    ],
    "predict": [
        Option("checkpoint", str, None, "trained checkpoint"),
        Option("data", str, None, "inputs (LIBSVM)"),
        Option("mc_samples", int, 1000, "Monte Carlo samples"),
        Option("sampler", str, "monte-carlo", "latent integration scheme", SAMPLERS),
        Option("predictions", str, "predictions.csv", "predictions file name"),
    ],
    "eval": [
        Option("checkpoint", str, None, "trained checkpoint"),
        Option("data", str, None, "labelled test data (LIBSVM)"),
        Option("mc_samples", int, 1000, "Monte Carlo samples"),
        Option("sampler", str, "monte-carlo", "latent integration scheme", SAMPLERS),
        Option("bins", int, 10, "calibration bins"),
        Option("predictions", str, "predictions.csv", "predictions file name"),
        Option("report", str, "calibration.json", "calibration report file name"),
    ],
    "gibbs": [
        Option("data", str, None, "training data (LIBSVM)"),
        Option("test", str, None, "optional test data (LIBSVM)"),
        Option("test_fraction", float, 0.0, "hold out this stratified fraction of --data"),
        Option("burnin", int, 1000, "burn-in sweeps"),
        Option("samples", int, 1000, "retained samples per chain"),
        Option("thin", int, 5, "sweeps between retained samples"),
        Option("chains", int, 1, "independent chains"),
        Option("variance", float, 1.0, "kernel variance"),
        Option("length_scale", float, None, "length scale (default: median heuristic)"),
        Option("normalize", _bool, True, "standardize features with training statistics"),
        Option("dump_samples", str, None, "optional CSV file name for retained f samples"),
        Option("summary", str, "gibbs_summary.json", "summary file name"),
        Option("predictive", str, "gibbs_predictive.csv", "predictive marginals file name"),
    ],
    "gen-toy": [
        Option("n", int, 500, "number of points"),
        Option("classes", int, 3, "number of classes"),
        Option("sigma2", float, 0.5, "within-class variance"),
        Option("sweep", _bool, False, "write the seven-value variance sweep"),
        Option("out", str, "toy.libsvm", "output file name (single dataset)"),
    ],
    "grid": [
        Option("checkpoint", str, None, "trained 2-D checkpoint"),
        Option("bounds", float, [-3.0, 3.0, -3.0, 3.0], "x0 x1 y0 y1 in raw feature units", nargs=4),
        Option("resolution", int, 50, "cells per axis"),
        Option("mc_samples", int, 1000, "Monte Carlo samples"),
        Option("sampler", str, "monte-carlo", "latent integration scheme", SAMPLERS),
        Option("out", str, "grid.csv", "grid file name"),
    ],
}

REQUIRED = {
    "train": ("data",),
    "predict": ("checkpoint", "data"),
    "eval": ("checkpoint", "data"),
    "gibbs": ("data",),
    "gen-toy": (),
    "grid": ("checkpoint",),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lsmgp", description="Logistic-softmax GP classification.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    for cmd, opts in COMMAND_OPTIONS.items():
        p = sub.add_parser(cmd)
        p.add_argument("--config", default=None, help="JSON config with flat dotted keys")
        p.add_argument("-v", "--verbose", action="store_true")
        for opt in GLOBAL_OPTIONS + opts:
            flag = "--" + opt.name.replace("_", "-")
            kwargs = {"dest": opt.name, "default": argparse.SUPPRESS, "help": opt.help}
            if opt.type is _bool:
                kwargs["type"] = _bool
                kwargs["nargs"] = "?"
                kwargs["const"] = True
            else:
                kwargs["type"] = opt.type
                if opt.nargs is not None:
                    kwargs["nargs"] = opt.nargs
            if opt.choices:
                kwargs["choices"] = opt.choices
            p.add_argument(flag, **kwargs)
    return parser


def _coerce(opt: Option, value):
    if value is None:
        return None
    try:
        if opt.nargs is not None:
            return [opt.type(v) for v in value]
        out = opt.type(value)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad value for {opt.name}: {value!r} ({exc})") from None
    if opt.choices and out not in opt.choices:
        raise UsageError(f"{opt.name} must be one of {opt.choices}")
    return out


def resolve(command: str, flags: dict, config: dict | None = None, environ=None) -> dict:
    """Merge defaults, config keys and flags into one flat dict of options."""
    environ = os.environ if environ is None else environ
    options = GLOBAL_OPTIONS + COMMAND_OPTIONS[command]
    known = {o.name: o for o in options}
    config = dict(config or {})
    config.pop("command", None)
    from_config = {}
    for key, value in config.items():
        scope, _, name = key.rpartition(".")
        if scope and scope != command:
            if scope in COMMAND_OPTIONS:
                continue
            raise UsageError(f"unknown config scope in key {key!r}")
        name = name.replace("-", "_")
        if name not in known:
            raise UsageError(f"unknown config key {key!r} for {command}")
        if scope or name not in from_config:
            from_config[name] = value
    resolved = {}
    for opt in options:
        value = opt.default
        if opt.name in from_config:
            value = from_config[opt.name]
        if opt.name == "output_dir" and environ.get(OUTPUT_ENV):
            value = environ[OUTPUT_ENV]
        if opt.name in flags:
            value = flags[opt.name]
        resolved[opt.name] = _coerce(opt, value)
    missing = [n for n in REQUIRED[command] if resolved.get(n) is None]
    if missing:
        raise UsageError(f"{command}: missing required option(s): {', '.join('--' + m.replace('_', '-') for m in missing)}")
    return resolved


def write_resolved(command: str, resolved: dict, path: Path) -> None:
    doc = {"command": command}
    for opt in GLOBAL_OPTIONS:
        doc[opt.name] = resolved[opt.name]
    for opt in COMMAND_OPTIONS[command]:
        doc[f"{command}.{opt.name}"] = resolved[opt.name]
    path.write_text(json.dumps(doc, indent=1) + "\n")


def limit_threads(n: int) -> None:
    if n < 1:
        raise UsageError("--threads must be >= 1")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        return
    threadpool_limits(n)


# -- helpers -----------------------------------------------------------------------

def _load(path, **kwargs) -> data.LabeledDataset:
    p = Path(path)
    if not p.is_file():
        raise data.DataError(f"no such data file: {p}")
    return data.load_libsvm(p, **kwargs)


def _load_model(path):
    p = Path(path)
    if not p.is_file():
        raise data.DataError(f"no such checkpoint: {p}")
    try:
        return load_checkpoint(p)
    except (ValueError, KeyError) as exc:
        raise data.DataError(f"unreadable checkpoint {p}: {exc}") from None


def _kernel(X: np.ndarray, variance: float, length_scale) -> KernelConfig:
    if length_scale is None:
        return KernelConfig.from_data(X, variance)
    return KernelConfig(variance, np.full(X.shape[1], float(length_scale)))


def _model_inputs(doc: dict, path) -> data.LabeledDataset:
    classes = doc.get("classes")
    ds = _load(path, n_features=doc["n_features"], classes=None if classes is None else tuple(classes))
    if doc.get("normalization") is not None:
        ds = data.normalize(ds, doc["normalization"])
    return ds


def write_predictions(path, probs: np.ndarray, classes, labels=None) -> None:
    C = probs.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "true_label"] + [f"p{k + 1}" for k in range(C)] + ["argmax"])
        top = np.argmax(probs, axis=1)
        for i, row in enumerate(probs):
            true = "" if labels is None else classes[labels[i]]
            w.writerow([i, true] + [repr(float(v)) for v in row] + [classes[top[i]]])


def _split(ds, fraction, rng, out: Path, stem: str):
    if fraction <= 0:
        return ds, None
    train, test = data.train_test_split(ds, fraction, rng)
    data.write_libsvm(out / f"{stem}_train.libsvm", train)
    data.write_libsvm(out / f"{stem}_test.libsvm", test)
    return train, test


# -- commands --------------------------------------------------------------------

def cmd_train(opts: dict, out: Path) -> None:
    streams = cavi.substreams(opts["seed"])
    ds = _load(opts["data"])
    ds, test = _split(ds, opts["test_fraction"], np.random.default_rng(streams["split"]), out, "train")
    if opts["test"] is not None:
        test = _load(opts["test"], n_features=ds.dim, classes=ds.classes)
    if opts["normalize"]:
        ds = data.normalize(ds)
        if test is not None:
            test = data.normalize(test, ds.stats)
    C = ds.n_classes
    m = opts["m"]
    config = cavi.TrainConfig(
        n_iterations=opts["iters"],
        minibatch_size=opts["minibatch"],
        n_inducing=None if m == "full" else m,
        rho_delay=opts["rho_delay"],
        rho_forget=opts["rho_forget"],
        inner_iters=opts["inner_iters"],
        class_subsample=opts["class_subsample"],
        hyper_period=opts["hyper_period"],
        hyper_lr=opts["hyper_lr"],
        shared_hyper=opts["shared_hyper"],
        seed=opts["seed"],
        elbo_every=opts["elbo_every"],
        eval_every=opts["eval_every"],
        mc_samples=opts["mc_samples"],
        approx_threshold=opts["approx_threshold"],
    )
    base = _kernel(ds.X, opts["variance"], opts["length_scale"])
    kernels = [base] if config.shared_hyper else [base.copy() for _ in range(C)]
    fit = cavi.fit_extreme if config.class_subsample else cavi.fit
    kwargs = {}
    if test is not None:
        kwargs = {"X_test": test.X, "y_test": test.y}
    result = fit(ds.X, ds.y, config, n_classes=C, kernels=kernels, **kwargs)
    extra = {"notes": result.notes} if result.notes else None
    save_checkpoint(out / opts["checkpoint"], result.state, ds.stats, ds.classes, extra)
    cavi.write_trace_csv(out / opts["trace"], result.trace, wall_time=opts["record_wall_time"])
    logger.info("trained %d iterations on %d points, %d classes", config.n_iterations, ds.n, C)


def _model_probs(opts, state, doc):
    ds = _model_inputs(doc, opts["data"])
    rng = np.random.default_rng(cavi.substreams(opts["seed"])["mc-predict"])
    mean, var = latent_predictive(state, ds.X)
    probs = predict_proba(mean, var, n_samples=opts["mc_samples"], sampler=opts["sampler"], rng=rng)
    return ds, probs


def cmd_predict(opts: dict, out: Path) -> None:
    state, doc = _load_model(opts["checkpoint"])
    ds, probs = _model_probs(opts, state, doc)
    write_predictions(out / opts["predictions"], probs, ds.classes, ds.y)


def cmd_eval(opts: dict, out: Path) -> None:
    state, doc = _load_model(opts["checkpoint"])
    ds, probs = _model_probs(opts, state, doc)
    write_predictions(out / opts["predictions"], probs, ds.classes, ds.y)
    report = metrics.evaluate(probs, ds.y, n_bins=opts["bins"])
    report_path = out / opts["report"]
    metrics.write_report(report, json_path=report_path)
    stem = report_path.with_suffix("")
    _write_bins(f"{stem}_reliability.csv", report, ("mean_confidence", "accuracy"))
    _write_bins(f"{stem}_confidence_histogram.csv", report, ("count",))
    print(f"accuracy={1.0 - report.test_error:.4f} nll={report.mean_nll:.4f} ece={report.ece:.4f}")


def _write_bins(path, report, columns) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin", "lower", "upper", *columns])
        for row in report.bin_rows():
            w.writerow([row["bin"], repr(row["lower"]), repr(row["upper"])] + [row[c] for c in columns])


def cmd_gibbs(opts: dict, out: Path) -> None:
    if opts["samples"] < 1:
        raise UsageError("gibbs needs --samples >= 1: no retained samples, no posterior summary")
    if opts["chains"] < 1 or opts["thin"] < 1 or opts["burnin"] < 0:
        raise UsageError("gibbs needs --chains >= 1, --thin >= 1 and --burnin >= 0")
    streams = cavi.substreams(opts["seed"])
    ds = _load(opts["data"])
    ds, test = _split(ds, opts["test_fraction"], np.random.default_rng(streams["split"]), out, "gibbs")
    if opts["test"] is not None:
        test = _load(opts["test"], n_features=ds.dim, classes=ds.classes)
    if opts["normalize"]:
        ds = data.normalize(ds)
        if test is not None:
            test = data.normalize(test, ds.stats)
    kernel = _kernel(ds.X, opts["variance"], opts["length_scale"])
    chain_seeds = streams["gibbs"].spawn(opts["chains"])
    runs = [gibbs.run(ds.X, ds.y, [kernel], opts["burnin"], opts["samples"], opts["thin"],
                      seed=s, n_classes=ds.n_classes) for s in chain_seeds]
    pooled = gibbs.GibbsSamples(np.concatenate([r.f for r in runs]), ds.X, [kernel],
                                np.concatenate([r.lam for r in runs]))
    f_mean, f_var = pooled.posterior_mean(), pooled.posterior_var()
    summary = {
        "n_train": ds.n,
        "n_classes": ds.n_classes,
        "classes": list(ds.classes),
        "kernel": kernel.to_dict(),
        "chains": opts["chains"],
        "retained_per_chain": opts["samples"],
        "posterior_f_mean": f_mean.T.tolist(),
        "posterior_f_var": f_var.T.tolist(),
        "posterior_lambda_mean": pooled.lam.mean(axis=0).tolist(),
    }
    if opts["chains"] > 1:
        rhat = gibbs.split_rhat(np.stack([r.f for r in runs]))
        summary["rhat"] = {"max": float(rhat.max()), "mean": float(rhat.mean()),
                           "fraction_below_1.05": float(np.mean(rhat < 1.05)),
                           "per_point": rhat.T.tolist()}
    eval_set = test if test is not None else ds
    rng = np.random.default_rng(streams["mc-predict"])
    probs, lat_mean, lat_var = gibbs.predictive_from_samples(pooled, eval_set.X, rng=rng)
    report = metrics.evaluate(probs, eval_set.y)
    summary["evaluated_on"] = "test" if test is not None else "train"
    summary["accuracy"] = 1.0 - report.test_error
    summary["mean_nll"] = report.mean_nll
    summary["ece"] = report.ece
    summary["predictive_latent_mean"] = lat_mean.tolist()
    summary["predictive_latent_var"] = lat_var.tolist()
    (out / opts["summary"]).write_text(json.dumps(summary, indent=1) + "\n")
    write_predictions(out / opts["predictive"], probs, eval_set.classes, eval_set.y)
    if opts["dump_samples"]:
        _dump_samples(out / opts["dump_samples"], pooled)
    print(f"accuracy={summary['accuracy']:.4f} nll={report.mean_nll:.4f}")


def _dump_samples(path, samples: gibbs.GibbsSamples) -> None:
    S, C, N = samples.f.shape
    with open(path, "w", newline="") as fh:
        fh.write(f"# retained f samples, class-major: row = sample, column f[c,i] at c*{N}+i; S={S} C={C} N={N}\n")
        w = csv.writer(fh)
        w.writerow([f"f_{c}_{i}" for c in range(C) for i in range(N)])
        for s in range(S):
            w.writerow([repr(float(v)) for v in samples.f[s].ravel()])


def cmd_gen_toy(opts: dict, out: Path) -> None:
    toy_seq = cavi.substreams(opts["seed"])["toy"]
    if opts["sweep"]:
        seeds = toy_seq.spawn(len(data.TOY_SWEEP))
        for k, (s2, s) in enumerate(zip(data.TOY_SWEEP, seeds)):
            ds = data.gen_toy(opts["n"], opts["classes"], s2, np.random.default_rng(s))
            data.write_libsvm(out / f"toy_sigma2_{k}of6.libsvm", ds)
        return
    ds = data.gen_toy(opts["n"], opts["classes"], opts["sigma2"], np.random.default_rng(toy_seq))
    data.write_libsvm(out / opts["out"], ds)


def cmd_grid(opts: dict, out: Path) -> None:
    state, doc = _load_model(opts["checkpoint"])
    if opts["resolution"] < 1:
        raise UsageError("--resolution must be >= 1")
    norm = doc.get("normalization")
    transform = None
    if norm is not None:
        mean, std = np.asarray(norm["mean"]), np.asarray(norm["std"])
        transform = lambda pts: (pts - mean) / std  # noqa: E731
    rng = np.random.default_rng(cavi.substreams(opts["seed"])["mc-predict"])
    try:
        pts, probs = metrics.prediction_grid(state, opts["bounds"], opts["resolution"], opts["mc_samples"],
                                             opts["sampler"], rng, transform)
    except ValueError as exc:
        raise data.DataError(str(exc)) from None
    metrics.write_grid_csv(out / opts["out"], pts, probs, opts["resolution"], opts["bounds"])


COMMANDS = {
    "train": cmd_train,
    "predict": cmd_predict,
    "eval": cmd_eval,
    "gibbs": cmd_gibbs,
    "gen-toy": cmd_gen_toy,
    "grid": cmd_grid,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a command is required: " + ", ".join(COMMANDS))
        logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        flags = {k: v for k, v in vars(args).items() if k not in ("command", "config", "verbose")}
        config = None
        if args.config is not None:
            try:
                config = json.loads(Path(args.config).read_text())
            except (OSError, json.JSONDecodeError) as exc:
                raise UsageError(f"cannot read config {args.config}: {exc}") from None
            if not isinstance(config, dict):
                raise UsageError("config must be a JSON object")
        opts = resolve(args.command, flags, config)
        limit_threads(opts["threads"])
        out = Path(opts["output_dir"])
        out.mkdir(parents=True, exist_ok=True)
        write_resolved(args.command, opts, out / f"{args.command}_config.json")
        COMMANDS[args.command](opts, out)
    except UsageError as exc:
        print(f"lsmgp: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (data.DataError, FileNotFoundError) as exc:
        print(f"lsmgp: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"lsmgp: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as exc:
        print(f"lsmgp: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
