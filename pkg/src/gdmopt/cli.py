"""``gdmopt`` command line.

Every flag has a JSON config-file twin (``--config FILE``; keys are the flag
names with ``-`` replaced by ``_``). A flag beats the file, the file beats
the built-in default. Exit status: 0 success, 1 input/usage error, 2 I/O error.
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from ._validation import ConfigurationError, InputError, MetricError
from .baselines import GdConfig, MtfnnConfig, MtfnnParams, mtfnn_train
from .bounds import BoundScenario, bound_gap, bounds_hold, monte_carlo_bounds
from .diffusion import VARIANCE_MODES, DiffusionModel, SampleConfig, TrainConfig, sample, \
    sample_batch, train
from .evaluation import AXES, METHODS, evaluate_model, run_ablation, trace_split
from .neural import read_checkpoint
from .oracle import generate_dataset, load_dataset
from .problems import evaluate_objective, get_problem


def _int_list(s):
    if isinstance(s, (list, tuple)):
        return [int(v) for v in s]
    return [int(v) for v in str(s).replace(";", ",").split(",") if v.strip()]


def _str_list(s):
    if isinstance(s, (list, tuple)):
        return [str(v) for v in s]
    return [v.strip() for v in str(s).replace(";", ",").split(",") if v.strip()]


def _bool(s):
    if isinstance(s, bool):
        return s
    if str(s).lower() in ("1", "true", "yes", "on"):
        return True
    if str(s).lower() in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {s!r}")


_T, _S, _G = TrainConfig(), SampleConfig(), GdConfig()

TRAIN_OPTS = [
    ("--T", int, _T.T, "diffusion steps"),
    ("--p-uncond", float, _T.p_uncond, "probability of dropping the condition"),
    ("--epochs", int, _T.epochs, "training epochs"),
    ("--lr", float, _T.lr, "initial learning rate"),
    ("--milestones", _int_list, list(_T.milestones), "epochs where lr is multiplied by gamma"),
    ("--gamma", float, _T.gamma, "lr decay factor"),
    ("--ema-decay", float, _T.ema_decay, "EMA decay per step"),
    ("--batch-size", int, _T.batch_size, "minibatch size"),
    ("--augment", _bool, _T.augment, "append objective and violation terms to the condition"),
]
SAMPLE_OPTS = [
    ("--omega", float, _S.omega, "guidance strength"),
    ("--num-samples", int, _S.num_samples, "chains per instance (best is kept)"),
    ("--normalize-first-k", int, _S.normalize_first_k, "standardize during the first k steps"),
    ("--variance-mode", str, _S.variance_mode, f"one of {VARIANCE_MODES}"),
]
GD_OPTS = [
    ("--gd-step", float, _G.step, "GD step size"),
    ("--gd-iterations", int, _G.iterations, "GD iterations"),
    ("--gd-restarts", int, None, "GD restarts (default 20 for NU, else 1)"),
    ("--gd-penalty", float, _G.penalty, "GD penalty weight"),
]

COMMANDS = {
    "gen-data": [
        ("--problem", str, None, "co | msr3 | msr80 | nu"),
        ("--n", int, None, "number of instances"),
        ("--seed", int, 0, "random seed"),
        ("--out", str, None, "output directory"),
        ("--workers", int, 1, "parallel solver processes"),
        ("--pos-grid", int, 50, "NU position lattice size"),
        ("--pow-grid", int, 40, "NU power lattice resolution"),
    ],
    "train": [
        ("--data", str, None, "training data directory"),
        ("--method", str, "gdm", "gdm | mtfnn"),
        *TRAIN_OPTS,
        ("--seed", int, 0, "random seed"),
        ("--out", str, None, "checkpoint path (writes PATH.ckpt.json and PATH.ckpt.bin)"),
    ],
    "sample": [
        ("--ckpt", str, None, "denoiser checkpoint"),
        ("--input", str, None, 'instance as JSON, e.g. {"x": [...]}'),
        ("--data", str, None, "dataset directory to solve instead of --input"),
        *SAMPLE_OPTS,
        ("--trace", str, None, "trajectory CSV (with --input) or directory (with --data)"),
        ("--out", str, None, "CSV of solutions when solving --data"),
        ("--seed", int, 0, "random seed"),
    ],
    "eval": [
        ("--ckpt", str, None, "checkpoint (gdm or mtfnn)"),
        ("--data", str, None, "test data directory"),
        ("--method", str, "gdm", "gdm | gd | mtfnn | oracle"),
        ("--report", str, None, "report JSON path"),
        *SAMPLE_OPTS,
        *GD_OPTS,
        ("--seed", int, 0, "random seed"),
    ],
    "ablate": [
        ("--axis", str, None, "omega | T | p_uncond | cond_terms"),
        ("--values", _str_list, None, "comma-separated values"),
        ("--data", str, None, "training data directory"),
        ("--test", str, None, "test data directory (default: last 10%% of --data)"),
        ("--ckpt", str, None, "checkpoint reused by the omega axis"),
        ("--seeds", _int_list, [0, 1, 2], "repeat seeds"),
        *TRAIN_OPTS,
        *SAMPLE_OPTS,
        ("--out", str, None, "ablation CSV path"),
    ],
    "trace": [
        ("--ckpt", str, None, "denoiser checkpoint"),
        ("--data", str, None, "dataset directory"),
        ("--n", int, 100, "number of instances"),
        *SAMPLE_OPTS,
        ("--seed", int, 0, "random seed"),
        ("--out", str, None, "output directory"),
    ],
    "bounds": [
        ("--trials", int, 100_000, "Monte-Carlo trials"),
        ("--f-star", float, 2.0, "objective at the optimum"),
        ("--sigma", float, 1.5, "exceedance factor"),
        ("--p", float, 0.3, "exceedance probability"),
        ("--p-i", float, 0.2, "in-neighbourhood probability"),
        ("--e", float, None, "toy error radius (default sqrt((sigma-1) f_star))"),
        ("--width", float, None, "generative sampler width (default matches p_i)"),
        ("--seed", int, 0, "random seed"),
        ("--out", str, None, "report JSON path"),
    ],
}

REQUIRED = {
    "gen-data": ("problem", "n", "out"),
    "train": ("data", "out"),
    "sample": ("ckpt",),
    "eval": ("data",),
    "ablate": ("axis", "values", "data"),
    "trace": ("ckpt", "data", "out"),
    "bounds": (),
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _dest(flag):
    return flag.lstrip("-").replace("-", "_")


def build_parser():
    parser = _Parser(prog="gdmopt", description="Diffusion-model network optimizer tools.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    for name, opts in COMMANDS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="JSON file with option values")
        for flag, typ, default, help_ in opts:
            shown = "" if default is None else f" (default: {default})"
            p.add_argument(flag, dest=_dest(flag), type=typ, default=None, help=help_ + shown)
    return parser


def resolve_config(command, args):
    """Merge defaults, the --config file and explicit flags (in that order)."""
    opts = {_dest(f): (t, d) for f, t, d, _ in COMMANDS[command]}
    cfg = {k: d for k, (_, d) in opts.items()}
    if args.config:
        with open(args.config) as fh:
            file_cfg = json.load(fh)
        if not isinstance(file_cfg, dict):
            raise InputError("config file must hold a JSON object")
        unknown = sorted(set(file_cfg) - set(opts))
        if unknown:
            raise InputError(f"unknown config keys for {command}: {unknown}")
        for k, v in file_cfg.items():
            t = opts[k][0]
            cfg[k] = v if v is None or t is str else t(v)
    for k in opts:
        v = getattr(args, k)
        if v is not None:
            cfg[k] = v
    missing = [k for k in REQUIRED[command] if cfg.get(k) is None]
    if missing:
        raise UsageError(f"{command}: missing required option(s): "
                         + ", ".join("--" + m.replace("_", "-") for m in missing))
    return cfg


def _train_config(c, seed):
    return TrainConfig(T=c["T"], p_uncond=c["p_uncond"], epochs=c["epochs"], lr=c["lr"],
                       milestones=tuple(c["milestones"]), gamma=c["gamma"],
                       batch_size=c["batch_size"], ema_decay=c["ema_decay"],
                       augment=c["augment"], seed=seed)


def _sample_config(c, seed=None):
    return SampleConfig(omega=c["omega"], num_samples=c["num_samples"],
                        normalize_first_k=c["normalize_first_k"],
                        variance_mode=c["variance_mode"],
                        seed=c["seed"] if seed is None else seed)


def _write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen_data(c):
    spec = get_problem(c["problem"])
    oracle = {"pos_grid": c["pos_grid"], "pow_grid": c["pow_grid"]} if spec.name == "NU" else None
    m = generate_dataset(spec, c["n"], c["seed"], c["out"], workers=c["workers"], oracle=oracle)
    _write_json(Path(c["out"]) / "run_config.json", {"command": "gen-data", **c})
    print(f"gen-data: {m.n_samples} {m.problem} instances -> {c['out']} "
          f"(rejections {m.rejections})")


def cmd_train(c):
    data = load_dataset(c["data"])
    if c["method"] == "gdm":
        model = train(data, _train_config(c, c["seed"]))
        extra = {"run_config": {"command": "train", **c}}
        path = model.save(c["out"])
        _attach_meta(path, extra)
        hist = model.loss_history
    elif c["method"] == "mtfnn":
        cfg = MtfnnConfig(epochs=c["epochs"], lr=c["lr"], milestones=tuple(c["milestones"]),
                          gamma=c["gamma"], batch_size=c["batch_size"], seed=c["seed"])
        params = mtfnn_train(data, cfg=cfg)
        path = params.save(c["out"])
        _attach_meta(path, {"run_config": {"command": "train", **c}})
        hist = params.loss_history
    else:
        raise InputError(f"unknown training method {c['method']!r}")
    first = f"{hist[0]:.6g}" if hist else "n/a"
    last = f"{hist[-1]:.6g}" if hist else "n/a"
    print(f"train: {c['method']} on {len(data)} rows, loss {first} -> {last}, saved {path}")


def _attach_meta(jpath, extra):
    with open(jpath) as fh:
        meta = json.load(fh)
    meta.update(extra)
    _write_json(jpath, meta)


def cmd_sample(c):
    model = DiffusionModel.load(c["ckpt"])
    cfg = _sample_config(c)
    spec = model.spec
    if c["input"] is not None:
        try:
            obj = json.loads(c["input"])
        except json.JSONDecodeError as exc:
            raise InputError(f"--input is not valid JSON: {exc}") from None
        x = np.asarray(obj["x"] if isinstance(obj, dict) else obj, dtype=np.float64)
        if x.shape != (spec.x_dim,):
            raise InputError(f"x must have {spec.x_dim} entries")
        y, traj = sample(model, x, cfg)
        f = evaluate_objective(spec, x, y)
        if c["trace"]:
            traj.write_csv(c["trace"])
        print(json.dumps({"y": [float(v) for v in y], "objective": float(f),
                          "config": {"command": "sample", **c}}, sort_keys=True))
        return
    if c["data"] is None:
        raise UsageError("sample: need --input or --data")
    data = load_dataset(c["data"])
    if c["trace"]:
        rows = trace_split(model, data, len(data), cfg, c["trace"])
        _write_json(Path(c["trace"]) / "run_config.json", {"command": "sample", **c})
        Y = None
        ratio = float(np.mean([r["ratio"] for r in rows]))
    else:
        Y, _ = sample_batch(model, data.X, cfg)
        ratio = float(np.mean(evaluate_objective(spec, data.X, Y) / data.f_star))
    if c["out"]:
        if Y is None:
            Y, _ = sample_batch(model, data.X, cfg)
        out = Path(c["out"])
        out.parent.mkdir(parents=True, exist_ok=True)
        header = "# " + json.dumps({"command": "sample", **c}, sort_keys=True) + "\n" + \
            ",".join(f"y{i}" for i in range(spec.y_dim))
        np.savetxt(out, Y, fmt="%.17g", delimiter=",", header=header, comments="")
    print(f"sample: {len(data)} {spec.name} instances, mean exceed ratio {ratio:.6f}")


def _load_for_method(method, path):
    if method in ("gd", "oracle"):
        return None
    if path is None:
        raise ConfigurationError(f"method {method!r} needs --ckpt")
    meta, _ = read_checkpoint(path)
    kind = meta.get("kind")
    if method == "gdm" and kind == "denoiser":
        return DiffusionModel.load(path)
    if method == "mtfnn" and kind == "mtfnn":
        return MtfnnParams.load(path)
    raise ConfigurationError(f"checkpoint kind {kind!r} does not match method {method!r}")


def cmd_eval(c):
    if c["method"] not in METHODS:
        raise InputError(f"unknown method {c['method']!r}")
    data = load_dataset(c["data"])
    model = _load_for_method(c["method"], c["ckpt"])
    gd = GdConfig(c["gd_step"], c["gd_iterations"], c["gd_restarts"], c["gd_penalty"], c["seed"])
    report = evaluate_model(c["method"], data, model, _sample_config(c), gd)
    report.config["run_config"] = {"command": "eval", **c}
    if c["report"]:
        report.write_json(c["report"])
    print(f"eval: {c['method']} on {report.problem} (n={len(report.ratios)}): "
          f"mean {report.mean:.6f} median {report.median:.6f} "
          f"min {report.min:.6f} max {report.max:.6f}")


def cmd_ablate(c):
    if c["axis"] not in AXES:
        raise InputError(f"unknown axis {c['axis']!r}")
    data = load_dataset(c["data"])
    if c["test"]:
        train_data, test_data = data, load_dataset(c["test"])
    else:
        cut = len(data) - max(1, len(data) // 10)
        if cut < 1:
            raise InputError("need at least two rows to hold out a test split")
        train_data, test_data = data.subset(slice(0, cut)), data.subset(slice(cut, None))
    model = DiffusionModel.load(c["ckpt"]) if c["ckpt"] and c["axis"] == "omega" else None
    rows = run_ablation(c["axis"], c["values"], train_data, test_data,
                        _train_config(c, 0), _sample_config({**c, "seed": 0}),
                        seeds=tuple(c["seeds"]), model=model, out=c["out"])
    if c["out"]:
        # run config goes beside the table
        _write_json(Path(str(c["out"]) + ".config.json"), {"command": "ablate", **c})
    cells = ", ".join(f"{r['value']}: {r['mean_ratio']:.4f}" for r in rows)
    print(f"ablate: {c['axis']} -> {cells}")


def cmd_trace(c):
    model = DiffusionModel.load(c["ckpt"])
    data = load_dataset(c["data"])
    rows = trace_split(model, data, c["n"], _sample_config(c), c["out"])
    _write_json(Path(c["out"]) / "run_config.json", {"command": "trace", **c})
    improved = np.mean([r["improved"] for r in rows])
    ratio = np.mean([r["ratio"] for r in rows])
    print(f"trace: {len(rows)} chains, improved {improved:.1%}, mean final ratio {ratio:.6f}")


def cmd_bounds(c):
    sc = BoundScenario(c["f_star"], c["sigma"], c["p"], c["p_i"], c["e"], c["width"])
    gap = bound_gap(sc)
    report = monte_carlo_bounds(sc, c["trials"], c["seed"])
    report["bounds_hold"] = bounds_hold(report)
    report["config"] = {"command": "bounds", **c}
    if c["out"]:
        _write_json(c["out"], report)
    print(f"bounds: disc_bound {gap.disc_bound:.6g} gen_bound {gap.gen_bound:.6g} "
          f"gap {gap.gap:.6g}; toy disc_mean {report['disc_mean']:.6g} "
          f"gen_mean {report['gen_mean']:.6g} (se {report['se_gen']:.3g})")


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "trace": cmd_trace,
    "bounds": cmd_bounds,
}


def run(argv=None):
    """Parse ``argv``, dispatch, and return the exit status."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            raise UsageError("gdmopt: error: a subcommand is required")
        cfg = resolve_config(args.command, args)
        HANDLERS[args.command](cfg)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except (InputError, ConfigurationError, MetricError, ValueError, KeyError, TypeError) as exc:
        print(f"gdmopt: error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"gdmopt: I/O error: {exc}", file=sys.stderr)
        return 2
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
