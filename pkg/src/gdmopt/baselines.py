"""Discriminative baselines: projected gradient methods and a multi-task MLP.

``gd_solve`` works per instance and never sees training data. The MTFNN is
an x -> y regressor with a shared SiLU trunk, a logistic head for CO offload
indicators and a linear head for every continuous variable.
"""

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import expit

from ._validation import ConfigurationError, InputError, as_2d
from .neural import (
    HIDDEN,
    TrainState,
    adam_step,
    advance_epoch,
    mlp_backward,
    mlp_forward,
    mlp_init,
    read_checkpoint,
    write_checkpoint,
)
from .oracle import co_inner_allocation
from .problems import (
    MAXIMIZE,
    Normalizer,
    _co_terms,
    evaluate_objective,
    nu_gains,
    nu_rates_from_gains,
    problem_from_dict,
    project_feasible,
)

LN2 = np.log(2.0)


@dataclass
class GdConfig:
    """Projected gradient settings. ``restarts=None`` means 20 for NU, 1 otherwise."""

    step: float = 1e-2
    iterations: int = 500
    restarts: int = None
    penalty: float = 10.0
    seed: int = 0

    def __post_init__(self):
        if not self.step > 0:
            raise InputError("step size must be positive")
        if int(self.iterations) < 1:
            raise InputError("iterations must be at least 1")
        if self.restarts is not None and int(self.restarts) < 1:
            raise InputError("restarts must be at least 1")
        if self.penalty < 0:
            raise InputError("penalty weight must be non-negative")

    def n_restarts(self, spec):
        if self.restarts is not None:
            return int(self.restarts)
        return 20 if spec.name == "NU" else 1


# ---------------------------------------------------------------------------
# projected gradient machinery

def project_capped_simplex(u, cap=1.0):
    """Euclidean projection of each row onto {u >= 0, sum(u) <= cap}."""
    u = np.atleast_2d(np.asarray(u, dtype=np.float64))
    clipped = np.maximum(u, 0.0)
    out = clipped.copy()
    over = clipped.sum(axis=1) > cap
    if over.any():
        v = u[over]
        srt = -np.sort(-v, axis=1)
        css = np.cumsum(srt, axis=1) - cap
        k = np.arange(1, v.shape[1] + 1)
        rho = np.sum(srt - css / k > 0, axis=1)
        theta = css[np.arange(len(v)), rho - 1] / rho
        out[over] = np.maximum(v - theta[:, None], 0.0)
    return out


def _ascend(fun, grad, proj, z, step, iterations, history=None):
    """Monotone projected ascent on every row of ``z``.

    A row whose trial point does not improve stays put and halves its step.
    """
    val = fun(z)
    steps = np.full(len(z), float(step))
    if history is not None:
        history.append(val.copy())
    for _ in range(iterations):
        trial = proj(z + steps[:, None] * grad(z))
        tv = fun(trial)
        better = tv >= val
        z = np.where(better[:, None], trial, z)
        val = np.where(better, tv, val)
        steps = np.where(better, steps, steps * 0.5)
        if history is not None:
            history.append(val.copy())
    return z, val


def _fd_grad(fun, z, h=1e-6):
    g = np.empty_like(z)
    for j in range(z.shape[1]):
        e = np.zeros(z.shape[1])
        e[j] = h
        g[:, j] = (fun(z + e) - fun(z - e)) / (2.0 * h)
    return g


# ---------------------------------------------------------------------------
# per-family solvers

def _gd_msr(spec, x, cfg, rngs, history):
    P = spec.params["power_budget_w"]
    gP = x * P

    def fun(u):
        return np.log2(1.0 + gP * u).sum(axis=1)

    def grad(u):
        return gP / ((1.0 + gP * u) * LN2)

    n = spec.y_dim
    # the first start is the uniform split, later ones are random
    starts = [np.full(n, 1.0 / n)] + [r.dirichlet(np.ones(n)) for r in rngs[1:]]
    u, _ = _ascend(fun, grad, project_capped_simplex, np.array(starts), cfg.step,
                   cfg.iterations, history)
    return u * P


def _gd_co(spec, x, cfg, rngs, history):
    P = spec.params
    upload, c, local = (v[0] for v in _co_terms(P, x[None, :]))
    A = upload * (1.0 + P["energy_weight"] * P["tx_power_w"])
    B = c / P["server_hz"]
    rho = cfg.penalty
    floor = 1e-3

    # relaxed cost to minimize; ascent runs on its negative
    def cost(z):
        a, s = z[:, :3], np.maximum(z[:, 3:], floor)
        v = np.maximum((a * s).sum(axis=1) - 1.0, 0.0)
        return (a * (A + B / s) + (1.0 - a) * local).sum(axis=1) + rho * v ** 2

    def grad(z):
        a, s = z[:, :3], np.maximum(z[:, 3:], floor)
        v = np.maximum((a * s).sum(axis=1, keepdims=True) - 1.0, 0.0)
        ga = A + B / s - local + 2.0 * rho * v * s
        gs = -a * B / s ** 2 + 2.0 * rho * v * a
        return -np.hstack([ga, gs])

    def proj(z):
        return np.hstack([np.clip(z[:, :3], 0.0, 1.0), np.clip(z[:, 3:], floor, 1.0)])

    z0 = np.array([r.uniform(0.0, 1.0, size=6) for r in rngs])
    z, _ = _ascend(lambda z: -cost(z), grad, proj, proj(z0), cfg.step, cfg.iterations, history)
    out = []
    for row in z:
        a = (row[:3] >= 0.5).astype(float)
        s = co_inner_allocation(x, np.flatnonzero(a))
        out.append(np.concatenate([a, s]))
    return np.array(out)


def _gd_nu(spec, x, cfg, rngs, history):
    P = spec.params
    region, budget, rmin = P["region_m"], P["power_budget_w"], P["rate_min"]
    rho = cfg.penalty
    X = x[None, :]

    def fun(z):
        q, p = z[:, :2] * region, z[:, 2:] * budget
        r = nu_rates_from_gains(spec, nu_gains(spec, np.broadcast_to(X, (len(z), 6)), q), p)
        short = np.maximum(rmin - r, 0.0)
        return r.sum(axis=1) - rho * (short ** 2).sum(axis=1)

    def proj(z):
        return np.hstack([np.clip(z[:, :2], 0.0, 1.0), project_capped_simplex(z[:, 2:])])

    z0 = np.array([np.concatenate([r.uniform(0.0, 1.0, size=2), r.dirichlet(np.ones(3))])
                   for r in rngs])
    z, _ = _ascend(fun, lambda z: _fd_grad(fun, z), proj, z0, cfg.step, cfg.iterations, history)
    return np.hstack([z[:, :2] * region, z[:, 2:] * budget])


_SOLVERS = {"CO": _gd_co, "MSR": _gd_msr, "NU": _gd_nu}


def gd_solve(spec, x, cfg=None, return_history=False):
    """Projected gradient baseline for one instance.

    MSR runs ascent on the power shares over the capped simplex. CO relaxes
    the indicators to [0, 1], penalizes ``sum(a * s) > 1`` quadratically,
    then rounds and re-splits the server shares. NU runs multi-start ascent
    over (position, powers) with a quadratic penalty on rate shortfalls.
    Every candidate is repaired with ``project_feasible`` and the best is
    returned.

    With ``return_history`` the per-iteration objective of the search
    surrogate (one column per restart) is returned as well.
    """
    cfg = cfg or GdConfig()
    x2, _ = as_2d(x, spec.x_dim, "x")
    if len(x2) != 1:
        raise InputError("gd_solve takes a single instance")
    x1 = x2[0]
    restarts = cfg.n_restarts(spec)
    # restart r draws from its own stream, so a run with more restarts
    # repeats every start of a run with fewer
    rngs = [np.random.default_rng([cfg.seed, r]) for r in range(restarts)]
    family = "MSR" if spec.family == "MSR" else spec.name
    history = [] if return_history else None
    cand = project_feasible(spec, np.broadcast_to(x1, (restarts, spec.x_dim)),
                            _SOLVERS[family](spec, x1, cfg, rngs, history))
    f = evaluate_objective(spec, np.broadcast_to(x1, (restarts, spec.x_dim)), cand)
    best = int(np.argmax(f) if spec.sense == MAXIMIZE else np.argmin(f))
    if return_history:
        return cand[best], np.array(history)
    return cand[best]


def gd_solve_batch(spec, X, cfg=None):
    X, _ = as_2d(X, spec.x_dim, "x")
    return np.array([gd_solve(spec, x, cfg) for x in X])


# ---------------------------------------------------------------------------
# multi-task feedforward regressor

def _n_indicators(spec):
    return spec.params.get("n_terminals", 0) if spec.name == "CO" else 0


@dataclass
class MtfnnParams:
    """Trunk and head weights plus the scaling used at training time."""

    spec: object
    trunk: dict
    heads: dict
    normalizer: Normalizer
    config: dict = field(default_factory=dict)
    loss_history: list = field(default_factory=list)

    def layout(self):
        items = [(f"trunk.{k}", v.shape) for k, v in self.trunk.items()]
        for h in sorted(self.heads):
            items += [(f"{h}.{k}", v.shape) for k, v in self.heads[h].items()]
        return items

    def flat(self):
        out = {f"trunk.{k}": v for k, v in self.trunk.items()}
        for h, w in self.heads.items():
            out.update({f"{h}.{k}": v for k, v in w.items()})
        return out

    def save(self, path):
        meta = {
            "kind": "mtfnn",
            "problem": self.spec.to_dict(),
            "normalizer": self.normalizer.to_dict(),
            "train_config": self.config,
            "loss_history": list(self.loss_history),
        }
        return write_checkpoint(path, meta, self.layout(), [self.flat()])

    @classmethod
    def load(cls, path):
        meta, blocks = read_checkpoint(path)
        if meta.get("kind") != "mtfnn":
            raise ConfigurationError(f"{path} is not an MTFNN checkpoint")
        trunk, heads = {}, {}
        for name, arr in blocks[0].items():
            head, key = name.split(".", 1)
            if head == "trunk":
                trunk[key] = arr
            else:
                heads.setdefault(head, {})[key] = arr
        return cls(problem_from_dict(meta["problem"]), trunk, heads,
                   Normalizer.from_dict(meta["normalizer"]), meta["train_config"],
                   meta["loss_history"])


@dataclass
class MtfnnConfig:
    epochs: int = 200
    lr: float = 5e-3
    milestones: tuple = (100, 150)
    gamma: float = 0.1
    batch_size: int = 128
    seed: int = 0

    def __post_init__(self):
        if int(self.epochs) < 0:
            raise InputError("epochs must be non-negative")
        if not self.lr > 0:
            raise InputError("learning rate must be positive")
        if int(self.batch_size) < 1:
            raise InputError("batch size must be at least 1")
        self.milestones = tuple(int(m) for m in self.milestones)


def _init_mtfnn(spec, norm, rng, cfg):
    trunk = mlp_init([spec.x_dim, HIDDEN, HIDDEN, HIDDEN], rng)
    k = _n_indicators(spec)
    heads = {}
    if k:
        heads["cls"] = mlp_init([HIDDEN, k], rng)
    heads["reg"] = mlp_init([HIDDEN, spec.y_dim - k], rng)
    return MtfnnParams(spec, trunk, heads, norm, asdict(cfg))


def _mtfnn_loss_grad(params, Xn, A, Yc):
    """Mean over the batch of summed BCE (indicator logits) + squared error."""
    n = len(Xn)
    h, stash = mlp_forward(params.trunk, Xn, cache=True, act_last=True)
    grads, d_h, loss = {}, 0.0, 0.0
    if "cls" in params.heads:
        logits, hs = mlp_forward(params.heads["cls"], h, cache=True)
        prob = expit(logits)
        loss += float(np.sum(np.logaddexp(0.0, logits) - A * logits) / n)
        g = mlp_backward(params.heads["cls"], hs, (prob - A) / n)
        grads.update({f"cls.{k}": v for k, v in g.items()})
        d_h = d_h + ((prob - A) / n) @ params.heads["cls"]["l0.W"].T
    pred, rs = mlp_forward(params.heads["reg"], h, cache=True)
    resid = pred - Yc
    loss += float(np.sum(resid ** 2) / n)
    g = mlp_backward(params.heads["reg"], rs, 2.0 * resid / n)
    grads.update({f"reg.{k}": v for k, v in g.items()})
    d_h = d_h + (2.0 * resid / n) @ params.heads["reg"]["l0.W"].T
    g = mlp_backward(params.trunk, stash, d_h, act_last=True)
    grads.update({f"trunk.{k}": v for k, v in g.items()})
    return loss, grads


def _targets(spec, norm, Y):
    k = _n_indicators(spec)
    Yn = norm.scale_y(Y)
    return Y[:, :k], Yn[:, k:]


def mtfnn_train(dataset, epochs=200, lr=5e-3, seed=0, cfg=None, log=None):
    """Fit the MTFNN with Adam on minibatches; deterministic given ``seed``."""
    cfg = cfg or MtfnnConfig(epochs=epochs, lr=lr, seed=seed)
    spec = dataset.spec
    X, Y = dataset.X, dataset.Y
    if len(X) == 0:
        raise InputError("dataset is empty")
    rng = np.random.default_rng(cfg.seed)
    norm = Normalizer.from_data(X, Y)
    params = _init_mtfnn(spec, norm, rng, cfg)
    Xn = norm.scale_x(X)
    A, Yc = _targets(spec, norm, Y)
    weights = params.flat()
    state = TrainState(cfg.lr, cfg.milestones, cfg.gamma)
    n = len(X)
    for epoch in range(cfg.epochs):
        advance_epoch(state, epoch)
        perm = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            loss, grads = _mtfnn_loss_grad(params, Xn[idx], A[idx], Yc[idx])
            # weights shares arrays with params, so the update lands in place
            adam_step(state, weights, grads)
            total += loss * len(idx)
        params.loss_history.append(total / n)
        if log is not None:
            log(epoch, params.loss_history[-1], state.lr)
    return params


def mtfnn_raw(params, X):
    """Unprojected prediction: indicator probabilities then continuous values."""
    spec = params.spec
    X, single = as_2d(X, spec.x_dim, "x")
    h = mlp_forward(params.trunk, params.normalizer.scale_x(X), act_last=True)
    k = _n_indicators(spec)
    cont = mlp_forward(params.heads["reg"], h)
    full = np.hstack([np.zeros((len(X), k)), cont])
    y = params.normalizer.unscale_y(full)
    if k:
        y[:, :k] = expit(mlp_forward(params.heads["cls"], h))
    return y[0] if single else y


def mtfnn_predict(params, X):
    """Deterministic feasible prediction for one instance or a batch."""
    spec = params.spec
    X2, single = as_2d(X, spec.x_dim, "x")
    y = project_feasible(spec, X2, mtfnn_raw(params, X2))
    return y[0] if single else y
