"""Ground-truth solvers and dataset generation.

Each family has an exact or exhaustive solver: closed-form water-filling for
MSR, full enumeration of offloading patterns (with closed-form server shares)
for CO, and a lattice search over UAV position and power split for NU.
Datasets are written as a CSV of ``x, y*, f*`` rows plus a JSON manifest.
"""

import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from itertools import product
from pathlib import Path

import numpy as np

from ._validation import InputError, as_2d
from .problems import (
    Normalizer,
    evaluate_objective,
    get_problem,
    nu_gains,
    problem_from_dict,
    sample_instance,
)

FORMAT_VERSION = "1"
DATA_FILE = "data.csv"
MANIFEST_FILE = "manifest.json"
MAX_RESAMPLES = 100


@dataclass
class SamplePair:
    x: np.ndarray
    y_star: np.ndarray
    f_star: float
    feasible: bool = True


# ---------------------------------------------------------------------------
# MSR

def waterfilling(gains, P):
    """Power split maximizing ``sum(log2(1 + g_i p_i))`` with ``sum(p) == P``.

    The water level is found exactly by sorting the floors ``1/g_i`` and
    growing the support until the next floor sits above the level.

    Parameters
    ----------
    gains : array_like
        Strictly positive effective channel gains.
    P : float
        Total power budget, > 0.

    Returns
    -------
    np.ndarray
        Optimal powers, same order as ``gains``.
    """
    g = np.asarray(gains, dtype=np.float64)
    if g.ndim != 1 or g.size == 0 or not np.all(g > 0):
        raise InputError("gains must be a non-empty vector of positive values")
    if not P > 0:
        raise InputError("power budget must be positive")
    p, _ = _waterfill(g, float(P))
    return p


def water_level(gains, P):
    return _waterfill(np.asarray(gains, dtype=np.float64), float(P))[1]


def _waterfill(g, P):
    floors = 1.0 / g
    srt = np.sort(floors)
    csum = np.cumsum(srt)
    k = len(srt)
    while k > 1:
        mu = (P + csum[k - 1]) / k
        if mu > srt[k - 1]:
            break
        k -= 1
    mu = (P + csum[k - 1]) / k
    return np.maximum(mu - floors, 0.0), mu


# ---------------------------------------------------------------------------
# CO

def co_inner_allocation(x, offload_set):
    """Server shares minimizing ``sum(c_i / s_i)`` over the offloaded tasks.

    The minimizer is ``s_i = sqrt(c_i) / sum_j sqrt(c_j)`` on the set, zero
    elsewhere.
    """
    x = np.asarray(x, dtype=np.float64)
    mask = np.zeros(3, dtype=bool)
    mask[list(offload_set)] = True
    root = np.sqrt(x[3:6]) * mask
    total = root.sum()
    return root / total if total > 0 else np.zeros(3)


_PATTERNS = np.array(list(product((0.0, 1.0), repeat=3)))


def co_exhaustive_batch(spec, X):
    """Vectorized exhaustive CO solve; returns (Y*, f*)."""
    X, _ = as_2d(X, spec.x_dim, "x")
    n = len(X)
    root = np.sqrt(X[:, 3:6])
    best_f = np.full(n, np.inf)
    best_y = np.zeros((n, 6))
    for a in _PATTERNS:
        w = root * a
        tot = w.sum(axis=1, keepdims=True)
        s = np.divide(w, tot, out=np.zeros_like(w), where=tot > 0)
        y = np.hstack([np.broadcast_to(a, (n, 3)), s])
        f = evaluate_objective(spec, X, y)
        better = f < best_f
        best_f = np.where(better, f, best_f)
        best_y[better] = y[better]
    return best_y, best_f


def co_exhaustive(x, spec=None):
    spec = spec or get_problem("CO")
    Y, F = co_exhaustive_batch(spec, x)
    return SamplePair(np.asarray(x, dtype=np.float64), Y[0], float(F[0]))


# ---------------------------------------------------------------------------
# NU

def _power_lattice(pow_grid, budget):
    # full-budget face of the simplex: scaling every power up raises every
    # SINR, so an optimum always spends the whole budget
    pts = [(i, j, pow_grid - i - j) for i in range(pow_grid + 1)
           for j in range(pow_grid + 1 - i)]
    return np.array(pts, dtype=np.float64) * (budget / pow_grid)


def nu_gridsearch(x, pos_grid=50, pow_grid=40, spec=None, chunk=128):
    """Lattice search over UAV position and power split for one NU instance.

    Positions use a ``(pos_grid + 1)**2`` lattice with spacing
    ``region / pos_grid``; powers use the full-budget simplex face with step
    ``P / pow_grid``. Doubling either resolution gives a superset lattice,
    so the result cannot get worse. Returns a pair with ``feasible=False``
    when no lattice point meets the minimum rates.
    """
    if pos_grid < 8 or pow_grid < 8:
        raise InputError("pos_grid and pow_grid must be >= 8")
    spec = spec or get_problem("NU")
    P = spec.params
    x = np.asarray(x, dtype=np.float64)
    axis = np.linspace(0.0, P["region_m"], pos_grid + 1)
    positions = np.stack(np.meshgrid(axis, axis, indexing="ij"), -1).reshape(-1, 2)
    powers = _power_lattice(pow_grid, P["power_budget_w"])
    sigma2 = P["noise_w"]
    gamma = 2.0 ** P["rate_min"] - 1.0
    idx = np.arange(3)
    best = (-np.inf, None, None)
    for start in range(0, len(positions), chunk):
        q = positions[start:start + chunk]
        g = nu_gains(spec, x[None, :], q)
        gj, gk = g[:, :, None], g[:, None, :]
        stronger = (gj > gk) | ((gj == gk) & (idx[:, None] > idx[None, :]))
        interference = powers[None, :, :] @ stronger.astype(float)
        g = g[:, None, :]
        sinr = g * powers[None, :, :] / (g * interference + sigma2)
        ok = np.all(sinr >= gamma, axis=-1)
        # log of a product = sum of per-user rates
        total = np.where(ok, np.log2(np.prod(1.0 + sinr, axis=-1)), -np.inf)
        flat = int(np.argmax(total))
        qi, pi = divmod(flat, len(powers))
        if total[qi, pi] > best[0]:
            best = (float(total[qi, pi]), q[qi], powers[pi])
    if best[1] is None:
        return SamplePair(x, np.full(5, np.nan), -np.inf, feasible=False)
    y = np.concatenate([best[1], best[2]])
    return SamplePair(x, y, float(evaluate_objective(spec, x, y)))


# ---------------------------------------------------------------------------
# dataset generation

@dataclass
class DatasetManifest:
    problem: str
    n_samples: int
    x_dim: int
    y_dim: int
    seed: int
    oracle: dict
    x_mean: list
    x_std: list
    y_min: list
    y_max: list
    rejections: int = 0
    params: dict = field(default_factory=dict)
    format_version: str = FORMAT_VERSION

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})

    def normalizer(self):
        return Normalizer(
            np.asarray(self.x_mean), np.asarray(self.x_std),
            np.asarray(self.y_min), np.asarray(self.y_max),
        )


@dataclass
class Dataset:
    X: np.ndarray
    Y: np.ndarray
    f_star: np.ndarray
    manifest: DatasetManifest

    @property
    def spec(self):
        return problem_from_dict({"name": self.manifest.problem,
                                  "params": self.manifest.params})

    def __len__(self):
        return len(self.X)

    def subset(self, idx):
        return Dataset(self.X[idx], self.Y[idx], self.f_star[idx], self.manifest)


def _sig9(a):
    return np.array([float("%.9g" % v) for v in np.ravel(a)]).reshape(np.shape(a))


def _trim_to_budget(v, budget):
    # walk the largest entry down on the 9-significant-digit grid
    v = v.copy()
    while v.sum() > budget:
        k = int(np.argmax(v))
        step = 10.0 ** (math.floor(math.log10(abs(v[k]))) - 8)
        v[k] = float("%.9g" % (v[k] - step))
    return v


def _snap(spec, x, y):
    """Round to the 9-digit text representation while keeping y* feasible."""
    x, y = _sig9(x), _sig9(y)
    if spec.name == "CO":
        y[3:] = _trim_to_budget(y[3:], 1.0)
    elif spec.family == "MSR":
        y = _trim_to_budget(y, spec.params["power_budget_w"])
    else:
        y[2:] = _trim_to_budget(y[2:], spec.params["power_budget_w"])
    return x, y


def solve_instance(spec, x, oracle=None):
    oracle = oracle or {}
    if spec.name == "CO":
        return co_exhaustive(x, spec)
    if spec.family == "MSR":
        y = waterfilling(x, spec.params["power_budget_w"])
        return SamplePair(x, y, float(evaluate_objective(spec, x, y)))
    return nu_gridsearch(x, oracle.get("pos_grid", 50), oracle.get("pow_grid", 40), spec)


def default_oracle_config(spec):
    if spec.name == "CO":
        return {"method": "exhaustive_patterns_sqrt_shares"}
    if spec.family == "MSR":
        return {"method": "waterfilling"}
    return {"method": "lattice_search", "pos_grid": 50, "pow_grid": 40}


def _make_row(args):
    spec, seed, i, oracle = args
    rng = np.random.default_rng([seed, i])
    rejected = 0
    for _ in range(MAX_RESAMPLES):
        x = sample_instance(spec, rng)
        pair = solve_instance(spec, x, oracle)
        if pair.feasible:
            break
        rejected += 1
    else:
        raise RuntimeError(f"instance {i}: no feasible draw after {MAX_RESAMPLES} tries")
    x, y = _snap(spec, pair.x, pair.y_star)
    return x, y, float(evaluate_objective(spec, x, y)), rejected


def generate_dataset(spec, n, seed, out_path, workers=1, oracle=None):
    """Sample and solve ``n`` instances, then write CSV + manifest to ``out_path``.

    Instance ``i`` draws from its own generator seeded by ``(seed, i)``, so
    the files are identical for any number of workers.
    """
    spec = get_problem(spec)
    if n < 1:
        raise InputError("n must be >= 1")
    oracle = dict(default_oracle_config(spec), **(oracle or {}))
    jobs = [(spec, seed, i, oracle) for i in range(n)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            rows = list(pool.map(_make_row, jobs, chunksize=max(1, n // (4 * workers))))
    else:
        rows = [_make_row(j) for j in jobs]
    X = np.array([r[0] for r in rows])
    Y = np.array([r[1] for r in rows])
    F = np.array([r[2] for r in rows])
    x_std = X.std(axis=0)
    manifest = DatasetManifest(
        problem=spec.name, n_samples=n, x_dim=spec.x_dim, y_dim=spec.y_dim,
        seed=seed, oracle=oracle,
        x_mean=X.mean(axis=0).tolist(),
        x_std=np.where(x_std > 0, x_std, 1.0).tolist(),
        y_min=Y.min(axis=0).tolist(), y_max=Y.max(axis=0).tolist(),
        rejections=int(sum(r[3] for r in rows)), params=spec.params,
    )
    write_dataset(Dataset(X, Y, F, manifest), out_path)
    return manifest


def write_dataset(ds, out_path):
    out = Path(out_path)
    out.mkdir(parents=True, exist_ok=True)
    m = ds.manifest
    header = ",".join([f"x{i}" for i in range(m.x_dim)] + [f"y{i}" for i in range(m.y_dim)]
                      + ["f_star"])
    table = np.hstack([ds.X, ds.Y, ds.f_star[:, None]])
    # f_star keeps full precision so it re-evaluates exactly from the 9-digit x, y
    fmt = ["%.9g"] * (m.x_dim + m.y_dim) + ["%.17g"]
    np.savetxt(out / DATA_FILE, table, fmt=fmt, delimiter=",", header=header, comments="")
    with open(out / MANIFEST_FILE, "w") as fh:
        json.dump(m.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_dataset(path):
    """Read a dataset directory (or the path of its CSV or manifest)."""
    p = Path(path)
    if p.suffix in (".csv", ".json"):
        p = p.parent
    if not (p / MANIFEST_FILE).is_file() or not (p / DATA_FILE).is_file():
        raise FileNotFoundError(f"no dataset at {os.fspath(path)!r}")
    with open(p / MANIFEST_FILE) as fh:
        manifest = DatasetManifest.from_dict(json.load(fh))
    table = np.loadtxt(p / DATA_FILE, delimiter=",", skiprows=1, ndmin=2)
    dx, dy = manifest.x_dim, manifest.y_dim
    if table.shape[1] != dx + dy + 1:
        raise InputError("data columns do not match the manifest dimensions")
    return Dataset(table[:, :dx], table[:, dx:dx + dy], table[:, -1], manifest)


def dataset_from_arrays(spec, X, Y, seed=-1, oracle=None):
    """Wrap in-memory (x, y*) pairs as a Dataset with a manifest."""
    spec = get_problem(spec)
    X, _ = as_2d(X, spec.x_dim, "X")
    Y, _ = as_2d(Y, spec.y_dim, "Y")
    if len(X) != len(Y) or len(X) == 0:
        raise InputError("X and Y must be non-empty with the same number of rows")
    x_std = X.std(axis=0)
    manifest = DatasetManifest(
        problem=spec.name, n_samples=len(X), x_dim=spec.x_dim, y_dim=spec.y_dim,
        seed=seed, oracle=oracle or {"method": "external"},
        x_mean=X.mean(axis=0).tolist(),
        x_std=np.where(x_std > 0, x_std, 1.0).tolist(),
        y_min=Y.min(axis=0).tolist(), y_max=Y.max(axis=0).tolist(), params=spec.params,
    )
    return Dataset(X, Y, evaluate_objective(spec, X, Y), manifest)
