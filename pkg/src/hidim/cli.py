"""Command-line pipeline: design, bench, screen, fit, predict, report.

Every command writes its artifacts into ``--out`` together with a JSON run
manifest (``manifest_<command>.json``) recording the effective configuration,
its hash, the seeds and the produced files.  Settings come from an optional
INI file (``--config``) and are overridden by flags.

Exit codes: 0 success, 1 usage or configuration error, 2 data, schema or I/O
error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import json
import logging
import os
import sys
import time
import warnings
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import __version__
from ._exceptions import (
    DegenerateInputError,
    HidimError,
    IllConditionedCovarianceError,
    InvalidArgumentError,
    SchemaError,
)
from ._validation import check_positive_int, check_probability
from .bench import get_benchmark
from .design import (
    InputSpec,
    LearningSample,
    default_sample_size,
    lhs_sample,
    maximin_distance,
    optimize_lhs,
    scale_design,
    unit_inputs,
    write_design_csv,
)
from .jointgp import joint_predict, load_joint_model, save_joint_model, sequential_build
from .screening import TEST_KINDS, read_screening_csv, screen_inputs

logger = logging.getLogger("hidim")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3
VALIDATION_MODES = ("test_sample", "loo")


# --- configuration ----------------------------------------------------------------


@dataclass
class PipelineConfig:
    """Effective settings of a pipeline run."""

    inputs: list = field(default_factory=list)
    n: int | None = None
    seed: int = 0
    optimize_budget: int = 1000
    alpha: float = 0.1
    test_kind: str = "gamma"
    permutations: int = 999
    multi_starts: int = 5
    optimizer_budget: int | None = None
    dispersion_floor_factor: float = 1e-6
    validation: str = "test_sample"
    test_fraction: float = 0.2
    output: str = "y"

    def validate(self):
        check_probability(self.alpha, "alpha")
        if self.test_kind not in TEST_KINDS:
            raise InvalidArgumentError(f"test must be one of {TEST_KINDS}, got {self.test_kind!r}")
        if self.validation not in VALIDATION_MODES:
            raise InvalidArgumentError(f"validation must be one of {VALIDATION_MODES}, got {self.validation!r}")
        if self.validation == "test_sample":
            check_probability(self.test_fraction, "test_fraction")
        check_positive_int(self.permutations, "permutations")
        check_positive_int(self.multi_starts, "multi_starts")
        check_positive_int(self.optimize_budget, "optimize_budget", minimum=0)
        if self.optimizer_budget is not None:
            check_positive_int(self.optimizer_budget, "optimizer_budget")
        if self.n is not None:
            check_positive_int(self.n, "n", minimum=2)
        if not self.dispersion_floor_factor > 0:
            raise InvalidArgumentError("dispersion_floor_factor must be positive")
        return self

    def to_dict(self):
        out = asdict(self)
        out["inputs"] = [[s.name, s.lower, s.upper] for s in self.inputs]
        return out

    def digest(self):
        text = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()


# (section, key, attribute, converter)
_CONFIG_KEYS = [
    ("design", "n", "n", int),
    ("design", "seed", "seed", int),
    ("design", "optimize_budget", "optimize_budget", int),
    ("screening", "alpha", "alpha", float),
    ("screening", "test", "test_kind", str),
    ("screening", "permutations", "permutations", int),
    ("screening", "output", "output", str),
    ("gp", "multi_starts", "multi_starts", int),
    ("gp", "optimizer_budget", "optimizer_budget", int),
    ("gp", "dispersion_floor_factor", "dispersion_floor_factor", float),
    ("validation", "mode", "validation", str),
    ("validation", "test_fraction", "test_fraction", float),
]


def load_config(path):
    """Read an INI file into a :class:`PipelineConfig`.

    ``[inputs]`` lists ``name = lower, upper`` lines in column order; the
    other sections (``design``, ``screening``, ``gp``, ``validation``) hold
    scalar settings.
    """
    parser = configparser.ConfigParser()
    parser.optionxform = str
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except configparser.Error as exc:
        raise InvalidArgumentError(f"{path}: {exc}") from exc
    config = PipelineConfig()
    if parser.has_section("inputs"):
        specs = []
        for name, value in parser.items("inputs"):
            try:
                lower, upper = (float(v) for v in value.split(","))
            except ValueError:
                raise InvalidArgumentError(
                    f"{path}: input {name!r} needs 'lower, upper', got {value!r}"
                ) from None
            specs.append(InputSpec(name, lower, upper))
        config.inputs = specs
    for section, key, attr, convert in _CONFIG_KEYS:
        if parser.has_option(section, key):
            raw = parser.get(section, key).strip()
            if raw == "":
                continue
            try:
                setattr(config, attr, convert(raw))
            except ValueError:
                raise InvalidArgumentError(f"{path}: [{section}] {key} = {raw!r} is not valid") from None
    return config


def _effective_config(args):
    config = load_config(args.config) if getattr(args, "config", None) else PipelineConfig()
    overrides = {}
    for flag, attr in [("n", "n"), ("seed", "seed"), ("alpha", "alpha"), ("test", "test_kind"),
                       ("permutations", "permutations"), ("budget", "optimize_budget"),
                       ("starts", "multi_starts"), ("max_evals", "optimizer_budget"),
                       ("test_fraction", "test_fraction"), ("output", "output")]:
        value = getattr(args, flag, None)
        if value is not None:
            overrides[attr] = value
    if getattr(args, "validation", None) is not None:
        overrides["validation"] = "loo" if args.validation == "loo" else "test_sample"
    return replace(config, **overrides).validate()


# --- tabular I/O --------------------------------------------------------------------


def read_table(path):
    """Read a numeric CSV with a header row.

    Returns ``(names, values)``.  A zero-byte file yields no columns and no
    rows.  Non-numeric cells and ragged rows raise :class:`SchemaError`
    naming the line and column.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        return [], np.empty((0, 0))
    header = [h.strip() for h in rows[0]]
    if len(set(header)) != len(header):
        raise SchemaError(f"{path}: duplicate column names in header")
    values = np.empty((len(rows) - 1, len(header)))
    for i, row in enumerate(rows[1:]):
        line = i + 2
        if len(row) != len(header):
            raise SchemaError(f"{path}, line {line}: expected {len(header)} fields, found {len(row)}")
        for j, cell in enumerate(row):
            try:
                values[i, j] = float(cell)
            except ValueError:
                raise SchemaError(
                    f"{path}, line {line}, column {j + 1} ({header[j]}): cannot parse {cell!r} as a number"
                ) from None
    if not np.all(np.isfinite(values)):
        raise SchemaError(f"{path}: table contains NaN or infinite values")
    return header, values


def read_sample(path, output, inputs=None):
    """Load a learning sample CSV; bounds come from ``inputs`` or the data range."""
    header, values = read_table(path)
    if output not in header:
        raise SchemaError(f"{path}: output column {output!r} not found (columns: {', '.join(header)})")
    j = header.index(output)
    names = [h for h in header if h != output]
    if not names:
        raise SchemaError(f"{path}: no input columns besides {output!r}")
    X = np.delete(values, j, axis=1)
    y = values[:, j]
    if X.shape[0] < 2:
        raise SchemaError(f"{path}: need at least two rows")
    if np.ptp(y) == 0.0:
        raise DegenerateInputError(f"{path}: output column {output!r} is constant")
    if inputs:
        by_name = {s.name: s for s in inputs}
        missing = [nm for nm in names if nm not in by_name]
        if missing:
            raise SchemaError(f"{path}: columns {missing} have no bounds in the configuration")
        specs = [by_name[nm] for nm in names]
    else:
        lo, hi = X.min(axis=0), X.max(axis=0)
        specs = [InputSpec(nm, a, b if b > a else a + 1.0) for nm, a, b in zip(names, lo, hi)]
    return LearningSample(X, y, specs)


def write_table(path, names, values):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(names)
        for row in values:
            writer.writerow([format(float(v), ".17g") for v in row])


# --- manifests ----------------------------------------------------------------------


class RunManifest:
    """Provenance record written next to a command's artifacts."""

    def __init__(self, command, config, out_dir):
        self.command = command
        self.config = config
        self.out_dir = out_dir
        self.started = time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())
        self.artifacts = []
        self.extra = {}

    def add(self, path):
        self.artifacts.append(os.path.relpath(path, self.out_dir))
        return path

    def write(self):
        payload = {
            "command": self.command,
            "tool_version": __version__,
            "config_sha256": self.config.digest(),
            "config": self.config.to_dict(),
            "seeds": {"seed": self.config.seed},
            "started": self.started,
            "finished": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
            "artifacts": sorted(self.artifacts),
            **self.extra,
        }
        path = os.path.join(self.out_dir, f"manifest_{self.command}.json")
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=1)
        return path


def _out_dir(path):
    os.makedirs(path, exist_ok=True)
    return path


# --- commands -------------------------------------------------------------------------


def _design(config, d):
    n = config.n if config.n is not None else default_sample_size(d)
    design = lhs_sample(d, n, seed=config.seed)
    return optimize_lhs(design, budget=config.optimize_budget, seed=config.seed)


def cmd_design(args):
    config = _effective_config(args)
    if config.inputs:
        inputs = config.inputs
    elif args.d is not None:
        inputs = unit_inputs(check_positive_int(args.d, "d"))
    else:
        raise InvalidArgumentError("give the inputs in --config or their number with --d")
    design = _design(config, len(inputs))
    out = _out_dir(args.out)
    manifest = RunManifest("design", config, out)
    names = [s.name for s in inputs]
    write_design_csv(manifest.add(os.path.join(out, "design.csv")), scale_design(design, inputs), names)
    write_design_csv(manifest.add(os.path.join(out, "design_unit.csv")), design, names)
    manifest.extra["scores"] = {
        "centered_l2_discrepancy": design.criterion_value,
        "maximin_distance": maximin_distance(design),
    }
    manifest.write()
    print(f"design: n = {design.n}, d = {design.d}")
    print(f"centered L2 discrepancy (squared): {design.criterion_value:.6g}")
    print(f"maximin distance: {maximin_distance(design):.6g}")
    return EXIT_OK


def cmd_bench(args):
    config = _effective_config(args)
    bench = get_benchmark(args.name)
    names = [s.name for s in bench.bounds]
    if args.design:
        header, X = read_table(args.design)
        if header != names:
            raise SchemaError(f"{args.design}: expected columns {names}, found {header}")
    else:
        X = scale_design(_design(config, bench.dimension), bench.bounds)
    y = np.asarray(bench(X), dtype=float)
    out = _out_dir(args.out)
    manifest = RunManifest("bench", config, out)
    manifest.extra["benchmark"] = bench.name
    write_table(manifest.add(os.path.join(out, "sample.csv")), names + [config.output],
                np.column_stack([X, y]))
    manifest.write()
    print(f"{bench.name}: {X.shape[0]} runs of {bench.dimension} inputs written to {out}")
    return EXIT_OK


def cmd_screen(args):
    config = _effective_config(args)
    sample = read_sample(args.sample, config.output, config.inputs)
    report = screen_inputs(sample, config.alpha, config.test_kind, config.permutations, config.seed)
    out = _out_dir(args.out)
    manifest = RunManifest("screen", config, out)
    report.to_csv(manifest.add(os.path.join(out, "screening.csv")))
    summary = report.summary()
    with open(manifest.add(os.path.join(out, "screening_summary.txt")), "w", encoding="utf-8") as fh:
        fh.write(summary + "\n")
    manifest.extra["selected"] = report.ordered_names
    manifest.write()
    print(summary)
    return EXIT_OK


def _split(sample, fraction, seed):
    rng = np.random.default_rng(seed)
    perm = rng.permutation(sample.n)
    n_test = int(round(fraction * sample.n))
    if n_test < 2 or sample.n - n_test < 2:
        raise InvalidArgumentError(f"test fraction {fraction} leaves too few runs on one side")
    return sample.subset(np.sort(perm[n_test:])), sample.subset(np.sort(perm[:n_test]))


def cmd_fit(args):
    config = _effective_config(args)
    sample = read_sample(args.sample, config.output, config.inputs)
    report = read_screening_csv(args.screening, config.alpha, config.test_kind)
    if report.names != sample.names:
        raise SchemaError(
            f"{args.screening}: screened inputs {report.names} do not match sample columns {sample.names}"
        )
    if not report.ordering:
        raise DegenerateInputError("the screening report selects no input")
    if config.validation == "test_sample":
        learn, test = _split(sample, config.test_fraction, config.seed)
    else:
        learn, test = sample, None
    trajectory = sequential_build(
        learn, report.ordering, test,
        dispersion_floor_factor=config.dispersion_floor_factor,
        n_starts=config.multi_starts, max_evals=config.optimizer_budget, random_state=config.seed,
    )
    out = _out_dir(args.out)
    manifest = RunManifest("fit", config, out)
    trajectory.to_csv(manifest.add(os.path.join(out, "trajectory.csv")))
    for path in save_joint_model(trajectory.best_model, os.path.join(out, "model")):
        manifest.add(path)
    best = trajectory.iterations[trajectory.selected_iteration]
    manifest.extra["selected_iteration"] = trajectory.selected_iteration + 1
    manifest.extra["explanatory_inputs"] = [sample.names[k] for k in best.included_inputs]
    manifest.extra["aborted"] = trajectory.aborted
    manifest.write()
    print(f"sequential joint GP build ({'test sample' if test is not None else 'leave-one-out'} validation)")
    print(trajectory.table())
    if trajectory.aborted:
        print(f"warning: build stopped early ({trajectory.error}); partial trajectory saved", file=sys.stderr)
    return EXIT_OK


def cmd_predict(args):
    out = _out_dir(args.out)
    model = load_joint_model(args.model)
    names = [s.name for s in model.inputs]
    header, values = read_table(args.query)
    manifest = RunManifest("predict", PipelineConfig(inputs=model.inputs), out)
    path = manifest.add(os.path.join(out, "predictions.csv"))
    if values.shape[0] == 0:
        write_table(path, ["mean", "total_variance"], [])
        manifest.write()
        return EXIT_OK
    missing = [nm for nm in names if nm not in header]
    if missing:
        raise SchemaError(f"{args.query}: missing input columns {missing}")
    extra = [h for h in header if h not in names]
    if extra:
        warnings.warn(f"ignoring unknown query columns {extra}", stacklevel=1)
    X = values[:, [header.index(nm) for nm in names]]
    mean, var = joint_predict(model, X)
    write_table(path, ["mean", "total_variance"], np.column_stack([mean, var]))
    manifest.write()
    print(f"{X.shape[0]} predictions written to {path}")
    return EXIT_OK


def cmd_report(args):
    directory = args.directory
    shown = False
    summary = os.path.join(directory, "screening_summary.txt")
    if os.path.exists(summary):
        with open(summary, encoding="utf-8") as fh:
            print(fh.read().rstrip())
        shown = True
    trajectory = os.path.join(directory, "trajectory.csv")
    if os.path.exists(trajectory):
        with open(trajectory, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        if shown:
            print()
        print(f"{'iter':>4}  {'Q2 test':>10}{'Q2 LOO':>10}  inputs")
        for row in rows:
            qt = row["q2_test"] and f"{float(row['q2_test']):.4f}"
            print(f"{row['iteration']:>4}  {qt or '-':>10}{float(row['q2_loo']):>10.4f}  {row['inputs_included']}")
        shown = True
    for name in sorted(os.listdir(directory)):
        if name.startswith("manifest_") and name.endswith(".json"):
            with open(os.path.join(directory, name), encoding="utf-8") as fh:
                payload = json.load(fh)
            print(f"{payload['command']}: {len(payload['artifacts'])} artifacts, finished {payload['finished']}")
            shown = True
    if not shown:
        raise InvalidArgumentError(f"{directory} holds no hidim outputs")
    return EXIT_OK


# --- entry point ------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser():
    parser = _Parser(prog="hidim", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, *, design=False, screening=False, gp=False):
        p.add_argument("--config", help="INI configuration file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int)
        if design:
            p.add_argument("--n", type=int, help="number of runs (default 10 per input)")
            p.add_argument("--budget", type=int, help="annealing steps for the design")
        if screening:
            p.add_argument("--alpha", type=float)
            p.add_argument("--test", choices=TEST_KINDS)
            p.add_argument("--permutations", type=int)
        if screening or gp:
            p.add_argument("--output", help="name of the output column (default y)")
        if gp:
            p.add_argument("--validation", choices=("test", "loo"))
            p.add_argument("--test-fraction", type=float)
            p.add_argument("--starts", type=int, help="optimizer starts per GP fit")
            p.add_argument("--max-evals", type=int, help="likelihood evaluations per start")

    p = sub.add_parser("design", help="generate an optimized Latin hypercube")
    common(p, design=True)
    p.add_argument("--d", type=int, help="number of unit inputs when no config is given")
    p.set_defaults(func=cmd_design)

    p = sub.add_parser("bench", help="evaluate a benchmark function on a design")
    p.add_argument("name")
    common(p, design=True)
    p.add_argument("--design", help="physical-unit design CSV to evaluate instead of a new one")
    p.add_argument("--output", help="name of the output column (default y)")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("screen", help="HSIC screening of a sample CSV")
    p.add_argument("sample")
    common(p, screening=True)
    p.set_defaults(func=cmd_screen)

    p = sub.add_parser("fit", help="sequential joint GP build")
    p.add_argument("sample")
    p.add_argument("--screening", required=True, help="screening.csv from the screen command")
    common(p, gp=True)
    p.add_argument("--alpha", type=float)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("predict", help="predict with a saved joint GP")
    p.add_argument("model", help="model directory written by fit")
    p.add_argument("query", help="CSV with one column per input")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("report", help="summarize the outputs in a directory")
    p.add_argument("directory")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (SchemaError, DegenerateInputError, OSError) as exc:
        print(f"hidim: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except InvalidArgumentError as exc:
        print(f"hidim: invalid argument: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (IllConditionedCovarianceError, np.linalg.LinAlgError) as exc:
        print(f"hidim: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except HidimError as exc:
        print(f"hidim: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
