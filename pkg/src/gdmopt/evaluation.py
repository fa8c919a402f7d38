"""Exceed_ratio metric, head-to-head evaluation, ablation sweeps and traces.

Ablation CSV columns: ``axis,value,mean_ratio,range_low,range_high,
final_loss,seed_means`` where the range is the min/max of the per-seed means
and ``seed_means`` is a ``;``-joined list. Trace summary CSV columns:
``instance,initial,final,optimal,ratio``.
"""

import csv
import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from ._validation import ConfigurationError, InputError, MetricError
from .baselines import GdConfig, MtfnnParams, gd_solve, mtfnn_predict
from .diffusion import DiffusionModel, SampleConfig, TrainConfig, sample_batch, train
from .problems import evaluate_objective

METHODS = ("gdm", "gd", "mtfnn", "oracle")
AXES = ("omega", "T", "p_uncond", "cond_terms")
ABLATION_COLUMNS = ("axis", "value", "mean_ratio", "range_low", "range_high",
                    "final_loss", "seed_means")
TRACE_COLUMNS = ("instance", "initial", "final", "optimal", "ratio")


def exceed_ratio(spec, x, y, y_true):
    """f(x, y) / f(x, y_true); a scalar for one instance, an array for a batch."""
    f = evaluate_objective(spec, x, y)
    f_true = evaluate_objective(spec, x, y_true)
    if np.any(np.asarray(f_true) == 0):
        raise MetricError("reference objective is zero; ratio undefined")
    return f / f_true


@dataclass
class EvalReport:
    """Per-instance ratios of one method on one test split, plus summary stats."""

    method: str
    problem: str
    ratios: list
    mean: float = None
    median: float = None
    min: float = None
    max: float = None
    config: dict = field(default_factory=dict)
    wall_clock: float = 0.0

    def __post_init__(self):
        r = np.asarray(self.ratios, dtype=np.float64)
        if r.ndim != 1 or r.size == 0:
            raise InputError("ratios must be a non-empty list")
        if not np.all(np.isfinite(r)) or np.any(r < 0):
            raise MetricError("ratios must be finite and non-negative")
        self.ratios = r.tolist()
        self.mean = float(r.mean())
        self.median = float(np.median(r))
        self.min = float(r.min())
        self.max = float(r.max())

    def to_dict(self):
        return asdict(self)

    def write_json(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        return path

    @classmethod
    def read_json(cls, path):
        with open(path) as fh:
            d = json.load(fh)
        return cls(d["method"], d["problem"], d["ratios"], config=d.get("config", {}),
                   wall_clock=d.get("wall_clock", 0.0))


def _load_model(method, model):
    if model is None:
        raise ConfigurationError(f"method {method!r} needs a trained checkpoint")
    if isinstance(model, (str, Path)):
        return DiffusionModel.load(model) if method == "gdm" else MtfnnParams.load(model)
    return model


def solve_split(method, data, model=None, sample_cfg=None, gd_cfg=None):
    """Solutions of ``method`` for every row of ``data.X``."""
    if method not in METHODS:
        raise InputError(f"unknown method {method!r}; choose from {METHODS}")
    spec = data.spec
    if method == "oracle":
        return data.Y.copy()
    if method == "gd":
        cfg = gd_cfg or GdConfig()
        return np.array([gd_solve(spec, x, cfg) for x in data.X])
    model = _load_model(method, model)
    if model.spec.name != spec.name:
        raise InputError(f"checkpoint is for {model.spec.name}, data is {spec.name}")
    if method == "gdm":
        Y, _ = sample_batch(model, data.X, sample_cfg or SampleConfig())
        return Y
    return mtfnn_predict(model, data.X)


def evaluate_model(method, data, model=None, sample_cfg=None, gd_cfg=None, label=None):
    """Run ``method`` on the test split and score it against the stored optima.

    ``model`` is a trained object or a checkpoint path (needed for ``gdm``
    and ``mtfnn``). Ratios use the stored ``f_star``.
    """
    t0 = time.perf_counter()
    Y = solve_split(method, data, model, sample_cfg, gd_cfg)
    f = evaluate_objective(data.spec, data.X, Y)
    if np.any(data.f_star == 0):
        raise MetricError("a stored optimum has zero objective")
    ratios = f / data.f_star
    config = {"n": len(data)}
    if method == "gdm":
        config["sample"] = asdict(sample_cfg or SampleConfig())
    if method == "gd":
        config["gd"] = asdict(gd_cfg or GdConfig())
    return EvalReport(label or method, data.spec.name, ratios, config=config,
                      wall_clock=time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# ablations

def _coerce(axis, v):
    if axis == "T":
        return int(v)
    if axis == "cond_terms":
        if isinstance(v, str):
            return v.strip().lower() in ("1", "true", "yes", "on", "x+terms")
        return bool(v)
    return float(v)


def _train_cached(train_data, cfg, cache):
    key = json.dumps(asdict(cfg), sort_keys=True)
    if cache is not None and key in cache:
        return cache[key]
    model = train(train_data, cfg)
    if cache is not None:
        cache[key] = model
    return model


def run_ablation(axis, values, train_data, test_data, train_cfg=None, sample_cfg=None,
                 seeds=(0, 1, 2), model=None, cache=None, out=None):
    """One table row per value of ``axis``.

    ``omega`` reuses one checkpoint (``model``, trained from ``train_cfg`` if
    absent) and varies the sampling seed. The other axes retrain once per
    seed. Each row holds the mean ratio over seeds, the min/max per-seed
    mean and, for retrained axes, the mean final-epoch training loss.
    ``cache`` (a dict) lets sweeps share identical training runs.
    """
    if axis not in AXES:
        raise InputError(f"unknown axis {axis!r}; choose from {AXES}")
    values = [_coerce(axis, v) for v in values]
    if not values:
        raise InputError("values must be non-empty")
    train_cfg = train_cfg or TrainConfig()
    sample_cfg = sample_cfg or SampleConfig()
    if axis == "omega" and model is None:
        model = _train_cached(train_data, train_cfg, cache)
    rows = []
    for v in values:
        means, losses = [], []
        for s in seeds:
            if axis == "omega":
                m = model
                scfg = replace(sample_cfg, omega=v, seed=int(s))
            else:
                key = {"T": "T", "p_uncond": "p_uncond", "cond_terms": "augment"}[axis]
                m = _train_cached(train_data, replace(train_cfg, **{key: v, "seed": int(s)}), cache)
                losses.append(m.loss_history[-1] if m.loss_history else float("nan"))
                scfg = replace(sample_cfg, seed=int(s))
                if axis == "T":
                    scfg = replace(scfg, normalize_first_k=min(scfg.normalize_first_k, v))
            means.append(evaluate_model("gdm", test_data, m, scfg).mean)
        rows.append({
            "axis": axis,
            "value": v,
            "mean_ratio": float(np.mean(means)),
            "range_low": float(np.min(means)),
            "range_high": float(np.max(means)),
            "final_loss": float(np.mean(losses)) if losses else None,
            "seed_means": [float(m) for m in means],
        })
    if out is not None:
        write_ablation_csv(rows, out, header={
            "problem": test_data.spec.name,
            "train_samples": len(train_data),
            "test_samples": len(test_data),
            "seeds": list(seeds),
            "train_config": asdict(train_cfg),
            "sample_config": asdict(sample_cfg),
        })
    return rows


def write_ablation_csv(rows, path, header=None):
    """Rows as CSV; ``header`` items become leading ``#`` comment lines."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write("# desk-scale sweep; absolute values differ from full-scale training\n")
        for k, v in (header or {}).items():
            fh.write(f"# {k}: {json.dumps(v, sort_keys=True)}\n")
        w = csv.writer(fh)
        w.writerow(ABLATION_COLUMNS)
        for r in rows:
            loss = "" if r["final_loss"] is None else repr(r["final_loss"])
            w.writerow([r["axis"], r["value"], repr(r["mean_ratio"]), repr(r["range_low"]),
                        repr(r["range_high"]), loss, ";".join(map(repr, r["seed_means"]))])
    return path


def read_ablation_csv(path):
    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


# ---------------------------------------------------------------------------
# trajectory traces

def trace_split(model, data, n=100, sample_cfg=None, out_dir=None):
    """Traced sampling on the first ``n`` instances of ``data``.

    Returns a list of summary dicts (``TRACE_COLUMNS`` plus ``improved``).
    With ``out_dir`` each chain goes to ``chain_<i>_<j>.csv`` and the summary
    to ``summary.csv``.
    """
    cfg = sample_cfg or SampleConfig()
    n = min(int(n), len(data))
    X = data.X[:n]
    Y, trajs = sample_batch(model, X, cfg, trace=True)
    spec = data.spec
    sign = 1.0 if spec.sense == "maximize" else -1.0
    f_final = evaluate_objective(spec, X, Y)
    rows = []
    for i in range(n):
        best = int(np.argmin(np.abs([tr.objectives[-1] - f_final[i] for tr in trajs[i]])))
        tr = trajs[i][best]
        initial, final = float(tr.objectives[0]), float(tr.objectives[-1])
        rows.append({
            "instance": i,
            "initial": initial,
            "final": final,
            "optimal": float(data.f_star[i]),
            "ratio": final / float(data.f_star[i]),
            "improved": bool(sign * (final - initial) >= 0.0),
        })
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for i, chains in enumerate(trajs):
            for j, tr in enumerate(chains):
                tr.write_csv(out_dir / f"chain_{i}_{j}.csv")
        with open(out_dir / "summary.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(TRACE_COLUMNS)
            for r in rows:
                w.writerow([r["instance"]] + [repr(r[k]) for k in TRACE_COLUMNS[1:]])
    return rows
