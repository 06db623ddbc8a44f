"""Command-line pipelines: generate data, train, evaluate, explain, benchmark.

Every command is deterministic for fixed inputs and seeds: rerunning it
produces byte-identical output files.  Exit codes: 0 success, 2 input or
config error, 3 numeric/divergence error.

Run configs are JSON files.  Full schema (every key optional unless noted)::

    {
      "output_dir": "out",          // required
      "seeds": [0, 1, 2, 3, 4],     // required, nonempty
      "data_seed": 0,               // seed for dataset generation
      "methods": ["erm", "mixup", "dre"],   // benchmark only
      "generator": {                // see envdata.GeneratorConfig
        "kind": "tabular_cls", "d_core": 5, "d_spur": 5, "d_noise": 10,
        "rho_train": [0.95, 0.9, 0.8], "rho_test": -0.9,
        "samples_per_env": 2000, "teacher_seed": 0, "sigma": 0.4,
        "label_margin": 0.3, "label_sigma": 0.1,
        "n_classes": 2, "image_size": 16
      },
      "model": {                    // input/output shapes come from the bundle
        "hidden": [16, 16], "activation": "relu", "kind": "mlp"
      },
      "training": {                 // see training.HyperParams
        "method": "dre", "learning_rate": 1e-3, "batch_per_env": 16,
        "steps": 5000, "val_every": 100, "clip_norm": 10.0,
        "mixup_alpha": 0.2
      },
      "mix": {                      // see objective.MixConfig
        "alpha": 0.2, "discrepancy": "l1", "lam": 1.0, "gamma": 0.01,
        "delta": null, "explainer": "input_gradient"
      },
      "metrics": {                  // see metrics.EvalOptions
        "n_pairs": 128, "n_iauc_samples": 128
      },
      "n_dump_samples": 4           // attribution/curve dumps per evaluation
    }

Reports embed the resolved config (``resolved_config.json`` in the output
directory) and name every per-run file by a ``{method}_{test_env}_seed{seed}``
pattern.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .envdata import GeneratorConfig, generate, load_bundle, rotations, save_bundle
from .errors import (
    DivergenceError,
    GraphInputError,
    NumericError,
    SaliencyLabError,
)
from .explainers import (
    Attribution,
    batch_attributions,
    grad_cam,
    input_gradient,
    write_attribution_csv,
    write_attribution_pgm,
)
from .metrics import (
    EvalOptions,
    default_iauc_steps,
    evaluate_model,
    iauc,
    make_reference,
    pooled_env,
)
from .models import Model, ModelSpec, load_params, save_params
from .objective import MixConfig
from .training import METHODS, HyperParams, train

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERIC = 3


# -- run config ----------------------------------------------------------------

@dataclass
class RunConfig:
    """Resolved configuration for a pipeline run."""
    output_dir: str
    seeds: list
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    model: dict = field(default_factory=lambda: {"hidden": [16, 16],
                                                 "activation": "relu"})
    hyper: HyperParams = field(default_factory=HyperParams)
    options: EvalOptions = field(default_factory=EvalOptions)
    methods: list = field(default_factory=lambda: list(METHODS))
    data_seed: int = 0
    n_dump_samples: int = 4

    def __post_init__(self):
        if not self.seeds:
            raise GraphInputError("config field 'seeds' must be a nonempty list")
        for m in self.methods:
            if m not in METHODS:
                raise GraphInputError(f"unknown method {m!r} in config 'methods'")
        if not self.output_dir:
            raise GraphInputError("config field 'output_dir' must be nonempty")


def _build_dataclass(cls, data, context):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise GraphInputError(
            f"unknown {context} field(s): {', '.join(sorted(unknown))}")
    coerced = {}
    for key, value in data.items():
        coerced[key] = tuple(value) if isinstance(value, list) else value
    return cls(**coerced)


def load_run_config(path) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise GraphInputError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise GraphInputError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise GraphInputError(f"config {path} must be a JSON object")
    known = {"output_dir", "seeds", "data_seed", "methods", "generator",
             "model", "training", "mix", "metrics", "n_dump_samples"}
    unknown = set(raw) - known
    if unknown:
        raise GraphInputError(
            f"unknown config field(s): {', '.join(sorted(unknown))}")
    for required in ("output_dir", "seeds"):
        if required not in raw:
            raise GraphInputError(f"config is missing required field '{required}'")

    generator = _build_dataclass(GeneratorConfig, raw.get("generator", {}),
                                 "generator")
    mix = _build_dataclass(MixConfig, raw.get("mix", {}), "mix")
    training = dict(raw.get("training", {}))
    hyper = _build_dataclass(HyperParams, {**training, "mix": mix}, "training")
    metrics = dict(raw.get("metrics", {}))
    options = _build_dataclass(EvalOptions, {**metrics, "mix": mix}, "metrics")

    model = dict(raw.get("model", {"hidden": [16, 16], "activation": "relu"}))
    unknown = set(model) - {"hidden", "activation", "kind"}
    if unknown:
        raise GraphInputError(
            f"unknown model field(s): {', '.join(sorted(unknown))}")

    return RunConfig(output_dir=raw["output_dir"],
                     seeds=[int(s) for s in raw["seeds"]],
                     generator=generator, model=model, hyper=hyper,
                     options=options,
                     methods=list(raw.get("methods", METHODS)),
                     data_seed=int(raw.get("data_seed", 0)),
                     n_dump_samples=int(raw.get("n_dump_samples", 4)))


def resolve_model_spec(config: RunConfig, bundle) -> ModelSpec:
    """Fill input/output shapes from the bundle; hidden/activation from config."""
    shape = bundle.feature_shape()
    kind = config.model.get("kind", "mlp" if len(shape) == 1 else "cnn")
    output_dim = bundle.n_classes if bundle.task == "classification" else 1
    return ModelSpec(kind=kind,
                     hidden=tuple(config.model.get("hidden", (16, 16))),
                     input_shape=shape,
                     output_dim=output_dim,
                     activation=config.model.get("activation", "relu"))


def _resolved_config_json(config: RunConfig) -> str:
    def encode(value):
        if dataclasses.is_dataclass(value) and not isinstance(value, type):
            return {k: encode(v) for k, v in dataclasses.asdict(value).items()}
        if isinstance(value, (list, tuple)):
            return [encode(v) for v in value]
        if isinstance(value, np.integer):
            return int(value)
        if isinstance(value, np.floating):
            return float(value)
        return value
    payload = {f.name: encode(getattr(config, f.name))
               for f in dataclasses.fields(config)}
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def write_resolved_config(config: RunConfig, out_dir: Path):
    (out_dir / "resolved_config.json").write_text(_resolved_config_json(config))


# -- report files ----------------------------------------------------------------

METRIC_COLUMNS = ("method", "test_env", "seed", "task", "accuracy",
                  "mae_residual", "dec_raw", "dec_relative", "iauc",
                  "iauc_skipped", "sc", "n_pairs", "n_samples")


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(float(value))
    return str(value)


def metric_row(report, method, test_env):
    return {"method": method, "test_env": test_env, "seed": report.seed,
            "task": report.task, "accuracy": report.accuracy,
            "mae_residual": report.mae_residual, "dec_raw": report.dec_raw,
            "dec_relative": report.dec_relative, "iauc": report.iauc,
            "iauc_skipped": report.iauc_skipped, "sc": report.sc,
            "n_pairs": report.n_pairs, "n_samples": report.n_samples}


def write_metrics_csv(path, rows):
    with open(path, "w") as fh:
        fh.write(",".join(METRIC_COLUMNS) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(row[c]) for c in METRIC_COLUMNS) + "\n")


def read_metrics_csv(path):
    lines = Path(path).read_text().splitlines()
    header = lines[0].split(",")
    rows = []
    for line in lines[1:]:
        cells = line.split(",")
        rows.append(dict(zip(header, cells)))
    return rows


def write_curve_csv(path, curve):
    with open(path, "w") as fh:
        fh.write("fraction,score\n")
        for f, s in zip(curve.fractions, curve.scores):
            fh.write(f"{float(f)!r},{float(s)!r}\n")


@dataclass
class ReportBundle:
    """Paths of everything a benchmark run produced."""
    metrics_csv: str
    history_csvs: list
    attribution_dumps: list
    curve_csvs: list
    summary_txt: str


def _dump_explanations(model, bundle, env, tag, out_dir, options, n_dump):
    """Attribution CSVs (+PGM for spatial maps) and insertion curves for the
    first few test samples; returns (attribution paths, curve paths)."""
    attr_paths, curve_paths = [], []
    classification = bundle.task == "classification"
    n = min(n_dump, len(env))
    if n == 0:
        return attr_paths, curve_paths
    targets = (env.y[:n].astype(np.int64) if classification
               else np.zeros(n, dtype=np.int64))
    attrs = batch_attributions(model, env.x[:n], targets, options.mix.explainer)
    if model.spec.kind == "cnn":
        ref_kind, means = "blur", None
    else:
        ref_kind = "feature_mean"
        means = pooled_env(bundle.train_envs).x.mean(axis=0)
    n_steps = default_iauc_steps(int(np.prod(model.spec.input_shape)))
    for i in range(n):
        base = out_dir / f"attr_{tag}_sample{i}"
        attr = Attribution(values=attrs[i], method=options.mix.explainer,
                           target=int(targets[i]))
        write_attribution_csv(attr, base.with_suffix(".csv"))
        attr_paths.append(str(base.with_suffix(".csv")))
        if attr.values.ndim == 2:
            write_attribution_pgm(attr, base.with_suffix(".pgm"))
            attr_paths.append(str(base.with_suffix(".pgm")))
        ref = make_reference(env.x[i], ref_kind, means)
        try:
            _, curve = iauc(model, env.x[i], int(targets[i]), attrs[i], ref,
                            n_steps)
        except GraphInputError:
            continue
        cpath = out_dir / f"curve_{tag}_sample{i}.csv"
        write_curve_csv(cpath, curve)
        curve_paths.append(str(cpath))
    return attr_paths, curve_paths


# -- commands ----------------------------------------------------------------

def cmd_generate(args):
    config = load_run_config(args.config)
    seed = config.data_seed if args.seed is None else args.seed
    bundle = generate(config.generator, seed)
    out = Path(args.output) if args.output else (
        Path(config.output_dir) / f"bundle_{config.generator.kind}_seed{seed}.slb")
    out.parent.mkdir(parents=True, exist_ok=True)
    save_bundle(bundle, out)
    digest = hashlib.sha256(out.read_bytes()).hexdigest()
    print(f"{out} sha256 {digest}")
    return EXIT_OK


def cmd_train(args):
    config = load_run_config(args.config)
    bundle = load_bundle(args.bundle)
    spec = resolve_model_spec(config, bundle)
    seed = config.seeds[0] if args.seed is None else args.seed
    method = args.method or config.hyper.method
    hyper = dataclasses.replace(config.hyper, method=method, seed=seed)
    out_dir = Path(args.output_dir or config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_resolved_config(dataclasses.replace(config, hyper=hyper), out_dir)

    model, history = train(bundle, spec, hyper)
    tag = f"{method}_{bundle.test_env.env_id}_seed{seed}"
    ckpt = out_dir / f"model_{tag}.slp"
    hist = out_dir / f"history_{tag}.csv"
    save_params(model, ckpt)
    history.to_csv(hist)
    print(f"{ckpt}\n{hist}\nselected_step {history.selected_step}")
    return EXIT_OK


def cmd_eval(args):
    config = load_run_config(args.config)
    bundle = load_bundle(args.bundle)
    model = load_params(args.checkpoint)
    if model.spec.input_shape != bundle.feature_shape():
        raise GraphInputError(
            f"checkpoint input shape {model.spec.input_shape} does not match "
            f"bundle feature shape {bundle.feature_shape()}")
    seed = config.seeds[0] if args.seed is None else args.seed
    options = dataclasses.replace(config.options, seed=seed)
    out_dir = Path(args.output_dir or config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_resolved_config(config, out_dir)

    report = evaluate_model(model, bundle, options)
    method = args.method or config.hyper.method
    tag = f"{method}_{bundle.test_env.env_id}_seed{seed}"
    metrics_path = out_dir / f"metrics_{tag}.csv"
    write_metrics_csv(metrics_path, [metric_row(report, method,
                                                bundle.test_env.env_id)])
    _dump_explanations(model, bundle, bundle.test_env, tag, out_dir, options,
                       config.n_dump_samples)
    print(f"{metrics_path}\niauc_skipped {report.iauc_skipped}")
    return EXIT_OK


def cmd_explain(args):
    config = load_run_config(args.config)
    bundle = load_bundle(args.bundle)
    model = load_params(args.checkpoint)
    if model.spec.input_shape != bundle.feature_shape():
        raise GraphInputError(
            f"checkpoint input shape {model.spec.input_shape} does not match "
            f"bundle feature shape {bundle.feature_shape()}")
    env = bundle.test_env
    if not 0 <= args.index < len(env):
        raise GraphInputError(
            f"sample index {args.index} out of range for test env of size {len(env)}")
    x = env.x[args.index]
    target = (int(env.y[args.index]) if bundle.task == "classification" else None)
    explainer = args.explainer or config.options.mix.explainer
    if explainer == "grad_cam":
        attr = grad_cam(model, x, target)
    else:
        attr = input_gradient(model, x, target)
    out_dir = Path(args.output_dir or config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tag = f"{explainer}_{env.env_id}_sample{args.index}"
    base = out_dir / f"attr_{tag}"
    write_attribution_csv(attr, base.with_suffix(".csv"))
    written = [str(base.with_suffix(".csv"))]
    if attr.values.ndim == 2:
        write_attribution_pgm(attr, base.with_suffix(".pgm"))
        written.append(str(base.with_suffix(".pgm")))
    print("\n".join(written))
    return EXIT_OK


def _benchmark_cells(config: RunConfig, bundle):
    """Train and evaluate every (test_env, method, seed) cell sequentially;
    each cell is internally deterministic, so order never changes results."""
    cells = []
    for rotated in rotations(bundle):
        spec = resolve_model_spec(config, rotated)
        test_env = rotated.test_env.env_id
        for method in config.methods:
            for seed in config.seeds:
                hyper = dataclasses.replace(config.hyper, method=method,
                                            seed=seed)
                options = dataclasses.replace(config.options, seed=seed)
                model, history = train(rotated, spec, hyper)
                report = evaluate_model(model, rotated, options)
                cells.append({"method": method, "test_env": test_env,
                              "seed": seed, "model": model,
                              "history": history, "report": report,
                              "bundle": rotated})
    return cells


def _summary_lines(task, rows, env_order, methods):
    """Tab.-2-shaped summary: per test env and average, per method."""
    perf_col = "accuracy" if task == "classification" else "mae_residual"
    by = {}
    for row in rows:
        by.setdefault((row["method"], row["test_env"]), []).append(row)

    def mean_of(method, env, key):
        vals = [float(r[key]) for r in by[(method, env)]]
        return float(np.mean(vals))

    lines = [f"{'method':8s} {'test_env':10s} {perf_col:>14s} "
             f"{'dec_relative':>14s} {'iauc':>10s}"]
    for method in methods:
        env_means = []
        for env in env_order:
            perf = mean_of(method, env, perf_col)
            dec_rel = mean_of(method, env, "dec_relative")
            ia = mean_of(method, env, "iauc")
            env_means.append((perf, dec_rel, ia))
            lines.append(f"{method:8s} {env:10s} {perf:14.4f} "
                         f"{dec_rel:14.4f} {ia:10.4f}")
        avg = np.mean(np.array(env_means), axis=0)
        lines.append(f"{method:8s} {'Avg.':10s} {avg[0]:14.4f} "
                     f"{avg[1]:14.4f} {avg[2]:10.4f}")
    return lines


def cmd_benchmark(args):
    config = load_run_config(args.config)
    if "erm" not in config.methods:
        raise GraphInputError(
            "benchmark needs 'erm' among the methods (consistency baseline)")
    if args.bundle:
        bundle = load_bundle(args.bundle)
    else:
        bundle = generate(config.generator, config.data_seed)
    out_dir = Path(args.output_dir or config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_resolved_config(config, out_dir)

    cells = _benchmark_cells(config, bundle)

    # normalize DEC against the ERM baseline of the same test environment
    erm_means = {}
    for cell in cells:
        if cell["method"] == "erm":
            erm_means.setdefault(cell["test_env"], []).append(
                cell["report"].dec_raw)
    erm_means = {env: float(np.mean(v)) for env, v in erm_means.items()}

    rows = []
    history_paths, attr_paths, curve_paths = [], [], []
    for cell in cells:
        report = cell["report"]
        report.dec_relative = report.dec_raw / erm_means[cell["test_env"]]
        tag = f"{cell['method']}_{cell['test_env']}_seed{cell['seed']}"
        hist = out_dir / f"history_{tag}.csv"
        cell["history"].to_csv(hist)
        history_paths.append(str(hist))
        rows.append(metric_row(report, cell["method"], cell["test_env"]))
        if cell["seed"] == config.seeds[0]:
            a, c = _dump_explanations(cell["model"], cell["bundle"],
                                      cell["bundle"].test_env, tag, out_dir,
                                      config.options, config.n_dump_samples)
            attr_paths += a
            curve_paths += c

    metrics_path = out_dir / "metrics.csv"
    write_metrics_csv(metrics_path, rows)

    env_order = [e.env_id for e in bundle.all_envs()]
    lines = _summary_lines(bundle.task, rows, env_order, config.methods)
    summary_path = out_dir / "summary.txt"
    summary_path.write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    print(f"\n{metrics_path}\n{summary_path}")
    return EXIT_OK


# -- entry point ----------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(
        prog="saliencylab",
        description="Generate data, train, evaluate, and benchmark predictors "
                    "with distribution-consistent explanations.")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("generate", help="write a dataset bundle file")
    p.add_argument("config", help="run config JSON path")
    p.add_argument("-o", "--output", help="bundle output path")
    p.add_argument("--seed", type=int, help="override the data seed")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train one model on a bundle")
    p.add_argument("config")
    p.add_argument("bundle", help="dataset bundle path")
    p.add_argument("--method", choices=METHODS, help="override training method")
    p.add_argument("--seed", type=int, help="override the training seed")
    p.add_argument("--output-dir")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="run the metric suite on a checkpoint")
    p.add_argument("config")
    p.add_argument("checkpoint", help="model checkpoint path")
    p.add_argument("bundle")
    p.add_argument("--method", help="method label for the report files")
    p.add_argument("--seed", type=int, help="override the evaluation seed")
    p.add_argument("--output-dir")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("explain", help="dump one sample's attribution")
    p.add_argument("config")
    p.add_argument("checkpoint")
    p.add_argument("bundle")
    p.add_argument("--index", type=int, default=0, help="test-sample index")
    p.add_argument("--explainer", choices=("input_gradient", "grad_cam"))
    p.add_argument("--output-dir")
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("benchmark",
                       help="leave-one-environment-out methods x seeds sweep")
    p.add_argument("config")
    p.add_argument("--bundle", help="reuse an existing bundle file")
    p.add_argument("--output-dir")
    p.set_defaults(func=cmd_benchmark)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (DivergenceError, NumericError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except SaliencyLabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
