"""Benchmark problem families: computation offloading (CO), multi-channel sum
rate (MSR) and NOMA-UAV sum rate (NU).

Every function here accepts either a single instance (1-D ``x``/``y``) or a
batch (2-D, one row per instance) and returns a matching scalar or array.

Vector layouts
--------------
CO   x = (d_1..d_3 bits, c_1..c_3 cycles, h_1..h_3 gains, f_1..f_3 local Hz)
     y = (a_1..a_3 offload indicators, s_1..s_3 server fractions)
MSR  x = (g_1..g_n effective gains),  y = (p_1..p_n watts)
NU   x = (w_1x, w_1y, .., w_3x, w_3y metres),  y = (q_x, q_y metres, p_1..p_3 watts)
"""

from dataclasses import dataclass, field

import numpy as np

from ._validation import ConfigurationError, InputError, as_2d

MINIMIZE = "minimize"
MAXIMIZE = "maximize"

_CO_PARAMS = {
    "n_terminals": 3,
    "server_hz": 10e9,
    "bandwidth_hz": 1e6,
    "tx_power_w": 0.5,
    "noise_w": 1e-9,
    "energy_weight": 0.5,
    "kappa": 1e-27,
    "bits_range": [1e5, 1e6],
    "cycles_range": [1e8, 1e9],
    "local_hz_range": [0.5e9, 1.5e9],
}

_NU_PARAMS = {
    "n_users": 3,
    "region_m": 100.0,
    "height_m": 50.0,
    "beta0": 1e-3,
    "noise_w": 1e-9,
    "power_budget_w": 1.0,
    "rate_min": 0.5,
}


@dataclass(frozen=True)
class ProblemSpec:
    """Dimensions, objective sense and constants of one problem family."""

    name: str
    x_dim: int
    y_dim: int
    sense: str
    params: dict = field(default_factory=dict)
    constraint_names: tuple = ()

    @property
    def constraint_count(self):
        return len(self.constraint_names)

    @property
    def family(self):
        return "MSR" if self.name.startswith("MSR") else self.name

    def to_dict(self):
        return {
            "name": self.name,
            "x_dim": self.x_dim,
            "y_dim": self.y_dim,
            "sense": self.sense,
            "params": dict(self.params),
        }


def _co_spec():
    names = ["fraction_sum"]
    for kind in ("a_lower", "a_upper", "s_lower", "s_upper", "integrality", "idle_share"):
        names += [f"{kind}_{i}" for i in range(3)]
    return ProblemSpec("CO", 12, 6, MINIMIZE, dict(_CO_PARAMS), tuple(names))


def _msr_spec(n, budget):
    names = ("power_budget",) + tuple(f"p_lower_{i}" for i in range(n))
    params = {"n_channels": n, "power_budget_w": budget, "gain_floor": 0.05}
    return ProblemSpec(f"MSR{n}", n, n, MAXIMIZE, params, names)


def _nu_spec():
    names = (
        ("power_budget",)
        + tuple(f"p_lower_{i}" for i in range(3))
        + ("qx_lower", "qy_lower", "qx_upper", "qy_upper")
        + tuple(f"rate_min_{i}" for i in range(3))
    )
    return ProblemSpec("NU", 6, 5, MAXIMIZE, dict(_NU_PARAMS), names)


_FACTORIES = {
    "CO": _co_spec,
    "MSR3": lambda: _msr_spec(3, 10.0),
    "MSR80": lambda: _msr_spec(80, 20.0),
    "NU": _nu_spec,
}

PROBLEM_NAMES = tuple(_FACTORIES)


def get_problem(name):
    """Look up a problem family by name (case-insensitive)."""
    if isinstance(name, ProblemSpec):
        return name
    key = str(name).upper()
    if key not in _FACTORIES:
        raise InputError(f"unknown problem {name!r}; expected one of {PROBLEM_NAMES}")
    return _FACTORIES[key]()


def problem_from_dict(d):
    """Rebuild a spec from its serialized form, keeping the stored constants."""
    spec = get_problem(d["name"])
    params = dict(spec.params)
    params.update(d.get("params", {}))
    return ProblemSpec(spec.name, spec.x_dim, spec.y_dim, spec.sense, params,
                       spec.constraint_names)


# ---------------------------------------------------------------------------
# instance sampling

def sample_instances(spec, n, rng):
    """Draw ``n`` instances from the family's input distribution."""
    P = spec.params
    if spec.name == "CO":
        d = rng.uniform(*P["bits_range"], size=(n, 3))
        c = rng.uniform(*P["cycles_range"], size=(n, 3))
        h = np.maximum(rng.exponential(1.0, size=(n, 3)), 1e-12)
        f = rng.uniform(*P["local_hz_range"], size=(n, 3))
        return np.hstack([d, c, h, f])
    if spec.family == "MSR":
        g = rng.exponential(1.0, size=(n, spec.x_dim))
        return np.maximum(g, P["gain_floor"])
    if spec.name == "NU":
        return rng.uniform(0.0, P["region_m"], size=(n, 6))
    raise InputError(f"no sampler for {spec.name}")


def sample_instance(spec, rng):
    return sample_instances(spec, 1, rng)[0]


# ---------------------------------------------------------------------------
# objective and constraints

def _co_terms(P, x):
    d, c, h, f = x[:, 0:3], x[:, 3:6], x[:, 6:9], x[:, 9:12]
    rate = P["bandwidth_hz"] * np.log2(1.0 + P["tx_power_w"] * h / P["noise_w"])
    upload = d / rate
    local = c / f + P["energy_weight"] * P["kappa"] * c * f ** 2
    return upload, c, local


def co_costs(spec, x, a, s):
    """Per-terminal CO cost for (possibly relaxed) indicators ``a``."""
    P = spec.params
    upload, c, local = _co_terms(P, x)
    with np.errstate(divide="ignore", invalid="ignore"):
        server = c / (s * P["server_hz"])
        offload = upload * (1.0 + P["energy_weight"] * P["tx_power_w"]) + server
        off_part = np.where(a > 0, a * offload, 0.0)
    return off_part + (1.0 - a) * local


def nu_gains(spec, x, q):
    """Channel gain of each ground user for UAV position(s) ``q``."""
    P = spec.params
    w = x.reshape(x.shape[:-1] + (3, 2))
    dist2 = np.sum((w - q[..., None, :]) ** 2, axis=-1)
    return P["beta0"] / (P["height_m"] ** 2 + dist2)


def _stronger_mask(g):
    # stronger[..., j, k]: user j is decoded after k (higher gain, ties by index)
    idx = np.arange(g.shape[-1])
    gj, gk = g[..., :, None], g[..., None, :]
    return (gj > gk) | ((gj == gk) & (idx[:, None] > idx[None, :]))


def nu_rates_from_gains(spec, g, p):
    sigma2 = spec.params["noise_w"]
    interference = np.einsum("...jk,...j->...k", _stronger_mask(g).astype(float), p)
    return np.log2(1.0 + g * p / (g * interference + sigma2))


def nu_rates(spec, x, y):
    """Per-user NOMA rates (bit/s/Hz), in the user order of ``x``."""
    x2, single = as_2d(x, spec.x_dim, "x")
    y2, _ = as_2d(y, spec.y_dim, "y")
    r = nu_rates_from_gains(spec, nu_gains(spec, x2, y2[:, :2]), y2[:, 2:])
    return r[0] if single else r


def evaluate_objective(spec, x, y):
    """Objective value f(x, y) in the family's own sense.

    CO returns a cost (lower is better) and ``inf`` when an offloaded task
    gets no server share; MSR and NU return sum rates.
    """
    x2, single = as_2d(x, spec.x_dim, "x")
    y2, single_y = as_2d(y, spec.y_dim, "y")
    if spec.name == "CO":
        val = co_costs(spec, x2, y2[:, :3], y2[:, 3:]).sum(axis=1)
    elif spec.family == "MSR":
        val = np.log2(1.0 + x2 * y2).sum(axis=1)
    else:
        g = nu_gains(spec, x2, y2[:, :2])
        val = nu_rates_from_gains(spec, g, y2[:, 2:]).sum(axis=1)
    return float(val[0]) if single and single_y else val


def constraint_violations(spec, x, y):
    """Non-negative violation per constraint; names in ``spec.constraint_names``."""
    x2, single = as_2d(x, spec.x_dim, "x")
    y2, _ = as_2d(y, spec.y_dim, "y")
    pos = lambda v: np.maximum(v, 0.0)
    if spec.name == "CO":
        a, s = y2[:, :3], y2[:, 3:]
        cols = [
            pos((a * s).sum(axis=1, keepdims=True) - 1.0),
            pos(-a), pos(a - 1.0), pos(-s), pos(s - 1.0),
            pos(np.minimum(np.abs(a), np.abs(1.0 - a))),
            pos(np.clip(1.0 - a, 0.0, 1.0) * s),
        ]
    elif spec.family == "MSR":
        P = spec.params["power_budget_w"]
        cols = [pos(y2.sum(axis=1, keepdims=True) - P), pos(-y2)]
    else:
        P = spec.params
        q, p = y2[:, :2], y2[:, 2:]
        rates = nu_rates_from_gains(spec, nu_gains(spec, x2, q), p)
        cols = [
            pos(p.sum(axis=1, keepdims=True) - P["power_budget_w"]),
            pos(-p), pos(-q), pos(q - P["region_m"]),
            pos(P["rate_min"] - rates),
        ]
    v = np.hstack(cols)
    return v[0] if single else v


# ---------------------------------------------------------------------------
# feasibility repair

def _rescale_budget(p, budget):
    """Scale rows summing above ``budget`` down so their sum is <= budget exactly."""
    total = p.sum(axis=1, keepdims=True)
    over = total > budget
    out = np.where(over, p * (budget / np.where(over, total, 1.0)), p)
    # rounding can leave the rescaled sum an ulp or two high; shave the largest entry
    rows = np.flatnonzero(out.sum(axis=1) > budget)
    for i in rows:
        k = int(np.argmax(out[i]))
        while out[i].sum() > budget:
            out[i, k] = np.nextafter(out[i, k], 0.0)
    return out


def _project_co(y):
    a = (y[:, :3] >= 0.5).astype(float)
    s = _rescale_budget(np.clip(y[:, 3:], 0.0, 1.0) * a, 1.0)
    # an offloaded task with no share has unbounded delay: give it what's left,
    # or fall back to an equal split when nothing is left
    starved = (a > 0) & (s <= 0.0)
    for i in np.flatnonzero(starved.any(axis=1)):
        left = 1.0 - s[i].sum()
        k = starved[i].sum()
        if left > 1e-12:
            s[i, starved[i]] = left / k
        else:
            s[i] = a[i] / a[i].sum()
    return np.hstack([a, _rescale_budget(s, 1.0)])


def nu_min_powers(spec, g):
    """Smallest powers meeting every minimum-rate constraint at gains ``g``.

    Solved from the strongest user downwards, each user needing SINR
    ``2**r_min - 1`` against the stronger users' power plus noise.
    """
    P = spec.params
    gamma = (2.0 ** P["rate_min"] - 1.0) * (1.0 + 1e-9)
    order = np.argsort(-g, axis=-1, kind="stable")
    pmin = np.zeros_like(g)
    acc = np.zeros(g.shape[:-1])
    for r in range(g.shape[-1]):
        k = order[..., r]
        gk = np.take_along_axis(g, k[..., None], axis=-1)[..., 0]
        val = gamma * (acc + P["noise_w"] / gk)
        np.put_along_axis(pmin, k[..., None], val[..., None], axis=-1)
        acc = acc + val
    return pmin


def _nu_rates_ok(spec, g, p):
    r = nu_rates_from_gains(spec, g, p)
    return np.all(r >= spec.params["rate_min"], axis=-1)


def _project_nu(spec, x, y):
    P = spec.params
    budget, region = P["power_budget_w"], P["region_m"]
    q = np.clip(y[:, :2], 0.0, region)
    p = _rescale_budget(np.maximum(y[:, 2:], 0.0), budget)
    g = nu_gains(spec, x, q)
    ok = _nu_rates_ok(spec, g, p)
    for i in np.flatnonzero(~ok):
        gi = g[i]
        pmin = nu_min_powers(spec, gi)
        if pmin.sum() > budget:
            q[i] = _nearest_feasible_position(spec, x[i], q[i])
            gi = nu_gains(spec, x[i], q[i])
            pmin = nu_min_powers(spec, gi)
        target = pmin * (budget / pmin.sum())
        lam = np.linspace(0.0, 1.0, 65)[:, None]
        cand = (1.0 - lam) * p[i] + lam * target
        good = np.flatnonzero(_nu_rates_ok(spec, np.broadcast_to(gi, cand.shape), cand))
        p[i] = cand[good[0]] if good.size else target
    return np.hstack([q, _rescale_budget(p, budget)])


def _nearest_feasible_position(spec, x, q):
    P = spec.params
    axis = np.linspace(0.0, P["region_m"], 21)
    grid = np.stack(np.meshgrid(axis, axis, indexing="ij"), -1).reshape(-1, 2)
    grid = grid[np.argsort(np.sum((grid - q) ** 2, axis=1), kind="stable")]
    g = nu_gains(spec, x[None, :], grid)
    need = nu_min_powers(spec, g).sum(axis=1)
    feasible = np.flatnonzero(need <= P["power_budget_w"])
    return grid[feasible[0]] if feasible.size else grid[np.argmin(need)]


def project_feasible(spec, x, y_raw):
    """Map an unconstrained vector to a feasible solution.

    Steps in order: box clipping, indicator thresholding (CO, ``>= 0.5`` is
    offloaded), rescaling fractions/powers down onto their budget, and for NU
    a minimum-rate repair that moves the powers toward the least-power
    feasible allocation. Feasible inputs are returned unchanged.
    """
    x2, single = as_2d(x, spec.x_dim, "x")
    y2, _ = as_2d(y_raw, spec.y_dim, "y_raw")
    y2 = y2.copy()
    if spec.name == "CO":
        out = _project_co(y2)
    elif spec.family == "MSR":
        out = _rescale_budget(np.maximum(y2, 0.0), spec.params["power_budget_w"])
    else:
        out = _project_nu(spec, np.broadcast_to(x2, (len(y2), spec.x_dim)), y2)
    return out[0] if single else out


# ---------------------------------------------------------------------------
# normalization and condition encoding

@dataclass
class Normalizer:
    """z-score stats for x, min-max range for y, and optional stats for the
    two appended condition terms (objective, total violation)."""

    x_mean: np.ndarray
    x_std: np.ndarray
    y_min: np.ndarray
    y_max: np.ndarray
    aug_mean: np.ndarray = None
    aug_std: np.ndarray = None

    @classmethod
    def from_data(cls, X, Y):
        x_std = X.std(axis=0)
        x_std = np.where(x_std > 0, x_std, 1.0)
        y_min, y_max = Y.min(axis=0), Y.max(axis=0)
        flat = y_max - y_min <= 0
        return cls(X.mean(axis=0), x_std, np.where(flat, y_min - 1.0, y_min),
                   np.where(flat, y_max + 1.0, y_max))

    def scale_x(self, X):
        return (X - self.x_mean) / self.x_std

    def scale_y(self, Y):
        return 2.0 * (Y - self.y_min) / (self.y_max - self.y_min) - 1.0

    def unscale_y(self, Yn):
        return (Yn + 1.0) * 0.5 * (self.y_max - self.y_min) + self.y_min

    def to_dict(self):
        out = {k: np.asarray(v).tolist() for k, v in vars(self).items() if v is not None}
        return out

    @classmethod
    def from_dict(cls, d):
        kw = {k: np.asarray(d[k], dtype=np.float64) for k in d}
        return cls(**kw)


def condition_terms(spec, x, y_current):
    """(objective of the repaired solution, total raw violation) per row."""
    x2, _ = as_2d(x, spec.x_dim, "x")
    y2, _ = as_2d(y_current, spec.y_dim, "y_current")
    x2 = np.broadcast_to(x2, (len(y2), spec.x_dim))
    f = evaluate_objective(spec, x2, project_feasible(spec, x2, y2))
    v = constraint_violations(spec, x2, y2).sum(axis=1)
    return np.column_stack([f, v])


def encode_condition(spec, x, stats, augment=False, y_current=None):
    """Normalized conditioning vector for the denoiser.

    Base mode is the z-scored ``x``. With ``augment`` the objective and total
    constraint violation of ``y_current`` (raw units) are appended, each
    z-scored with ``stats.aug_mean``/``stats.aug_std``.
    """
    if stats is None or stats.x_mean is None:
        raise ConfigurationError("normalization stats are required")
    x2, single = as_2d(x, spec.x_dim, "x")
    cond = stats.scale_x(x2)
    if augment:
        if y_current is None:
            raise InputError("augmented condition needs y_current")
        if stats.aug_mean is None:
            raise ConfigurationError("augmented condition needs objective/violation stats")
        terms = condition_terms(spec, x2, y_current)
        cond = np.hstack([np.broadcast_to(cond, (len(terms), spec.x_dim)),
                          (terms - stats.aug_mean) / stats.aug_std])
    return cond[0] if single and len(cond) == 1 else cond
