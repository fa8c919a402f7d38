"""Conditional DDPM over normalized solution vectors.

Training corrupts min-max normalized optima with the closed-form forward
process and fits the noise predictor, dropping the condition with
probability ``p_uncond``. Sampling runs the reverse chain with
classifier-free guidance ``(1 + w) * eps_cond - w * eps_uncond``.
"""

import csv
from dataclasses import asdict, dataclass, field

import numpy as np

from ._validation import ConfigurationError, InputError, as_2d
from .neural import (
    DenoiserParams,
    TrainState,
    adam_step,
    advance_epoch,
    denoiser_forward,
    ema_update,
    loss_and_grad,
    read_checkpoint,
    write_checkpoint,
)
from .problems import (
    MAXIMIZE,
    Normalizer,
    condition_terms,
    evaluate_objective,
    problem_from_dict,
    project_feasible,
)

VARIANCE_MODES = ("paper_eq13", "ddpm_posterior")


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step retention factors; index 0 holds the identity step (1.0)."""

    T: int
    alpha: np.ndarray
    alpha_bar: np.ndarray


def build_cosine_schedule(T, s=0.008):
    if T < 2:
        raise InputError("T must be >= 2")
    u = np.arange(T + 1, dtype=np.float64)
    f = np.cos(((u / T + s) / (1.0 + s)) * np.pi / 2.0) ** 2
    raw_bar = f / f[0]
    alpha = np.ones(T + 1)
    alpha[1:] = np.clip(raw_bar[1:] / raw_bar[:-1], 0.001, 0.9999)
    # recompute the products so alpha_bar stays consistent with the clipped alphas
    return NoiseSchedule(T, alpha, np.cumprod(alpha))


def forward_noising(y0, t, eps, sched):
    """``sqrt(abar_t) * y0 + sqrt(1 - abar_t) * eps`` (t scalar or per row)."""
    ab = np.asarray(sched.alpha_bar)[np.asarray(t)]
    if np.ndim(ab):
        ab = ab[:, None]
    return np.sqrt(ab) * y0 + np.sqrt(1.0 - ab) * eps


@dataclass
class TrainConfig:
    T: int = 20
    p_uncond: float = 0.1
    epochs: int = 200
    lr: float = 0.005
    milestones: tuple = (100, 150)
    gamma: float = 0.1
    batch_size: int = 128
    ema_decay: float = 0.999
    augment: bool = False
    seed: int = 0

    def __post_init__(self):
        self.milestones = tuple(int(m) for m in self.milestones)
        if not 0.0 <= self.p_uncond <= 1.0:
            raise InputError("p_uncond must lie in [0, 1]")
        if self.T < 2:
            raise InputError("T must be >= 2")
        if self.epochs < 0 or self.batch_size < 1:
            raise InputError("epochs must be >= 0 and batch_size >= 1")


@dataclass
class SampleConfig:
    omega: float = 500.0
    num_samples: int = 1
    normalize_first_k: int = 5
    variance_mode: str = "paper_eq13"
    seed: int = 0

    def __post_init__(self):
        if self.omega < 0:
            raise InputError("omega must be >= 0")
        if self.num_samples < 1:
            raise InputError("num_samples must be >= 1")
        if self.normalize_first_k < 0:
            raise InputError("normalize_first_k must be >= 0")
        if self.variance_mode not in VARIANCE_MODES:
            raise InputError(f"variance_mode must be one of {VARIANCE_MODES}")


@dataclass
class Trajectory:
    """Repaired solution and objective after every reverse step, from the
    initial noise (step T) down to step 0."""

    steps: np.ndarray
    objectives: np.ndarray
    solutions: np.ndarray

    @property
    def final(self):
        return self.solutions[-1]

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "objective"] + [f"y{i}" for i in range(self.solutions.shape[1])])
            for s, f, y in zip(self.steps, self.objectives, self.solutions):
                w.writerow([int(s), "%.9g" % f] + ["%.9g" % v for v in y])


@dataclass
class DiffusionModel:
    """Everything needed to sample: weights, schedule, problem and scaling."""

    spec: object
    params: DenoiserParams
    schedule: NoiseSchedule
    normalizer: Normalizer
    config: TrainConfig
    loss_history: list = field(default_factory=list)

    def save(self, path):
        meta = {
            "kind": "denoiser",
            "problem": self.spec.to_dict(),
            "y_dim": self.params.y_dim,
            "cond_dim": self.params.cond_dim,
            "T": self.schedule.T,
            "normalizer": self.normalizer.to_dict(),
            "train_config": asdict(self.config),
            "ema_decay": self.config.ema_decay,
            "loss_history": list(self.loss_history),
        }
        return write_checkpoint(path, meta, self.params.shapes(),
                                [self.params.live, self.params.ema])

    @classmethod
    def load(cls, path):
        meta, blocks = read_checkpoint(path)
        if meta.get("kind") != "denoiser":
            raise ConfigurationError(f"{path} is not a denoiser checkpoint")
        params = DenoiserParams(meta["y_dim"], meta["cond_dim"], blocks[0], blocks[1])
        cfg = TrainConfig(**meta["train_config"])
        return cls(problem_from_dict(meta["problem"]), params, build_cosine_schedule(meta["T"]),
                   Normalizer.from_dict(meta["normalizer"]), cfg, meta["loss_history"])


# ---------------------------------------------------------------------------
# training

def _augment_stats(spec, X, Yn, norm, sched, rng):
    t = rng.integers(1, sched.T + 1, len(X))
    y_t = forward_noising(Yn, t, rng.standard_normal(Yn.shape), sched)
    terms = condition_terms(spec, X, norm.unscale_y(y_t))
    std = terms.std(axis=0)
    return terms.mean(axis=0), np.where(std > 0, std, 1.0)


def _conditions(spec, norm, X, Xn, y_t, augment):
    if not augment:
        return Xn
    terms = condition_terms(spec, X, norm.unscale_y(y_t))
    return np.hstack([Xn, (terms - norm.aug_mean) / norm.aug_std])


def train(dataset, cfg=None, log=None):
    """Fit the noise predictor on a dataset of (x, y*) pairs.

    Each minibatch draws ``t ~ U{1..T}`` and ``eps ~ N(0, I)``, corrupts the
    normalized optima, replaces the condition by the null condition with
    probability ``p_uncond``, takes one Adam step on the mean squared noise
    error and refreshes the EMA weights. The run is a deterministic function
    of ``cfg.seed``.
    """
    cfg = cfg or TrainConfig()
    spec = dataset.spec
    X, Y = dataset.X, dataset.Y
    if len(X) == 0:
        raise InputError("dataset is empty")
    if X.shape[1] != spec.x_dim or Y.shape[1] != spec.y_dim:
        raise InputError("dataset columns do not match the problem dimensions")
    rng = np.random.default_rng(cfg.seed)
    sched = build_cosine_schedule(cfg.T)
    norm = dataset.manifest.normalizer()
    norm = Normalizer.from_data(X, Y) if norm.x_mean.size != spec.x_dim else norm
    norm.y_min, norm.y_max = _widen(norm.y_min, norm.y_max)
    Xn, Yn = norm.scale_x(X), norm.scale_y(Y)
    cond_dim = spec.x_dim + (2 if cfg.augment else 0)
    params = DenoiserParams.initialize(spec.y_dim, cond_dim, rng)
    if cfg.augment:
        norm.aug_mean, norm.aug_std = _augment_stats(spec, X, Yn, norm, sched, rng)
    state = TrainState(cfg.lr, cfg.milestones, cfg.gamma)
    history = []
    n = len(X)
    for epoch in range(cfg.epochs):
        advance_epoch(state, epoch)
        perm = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            b = len(idx)
            t = rng.integers(1, cfg.T + 1, b)
            eps = rng.standard_normal((b, spec.y_dim))
            y_t = forward_noising(Yn[idx], t, eps, sched)
            mask = (rng.random(b) >= cfg.p_uncond).astype(np.float64)
            cond = _conditions(spec, norm, X[idx], Xn[idx], y_t, cfg.augment)
            loss, grads = loss_and_grad(params.live, y_t, t, cond, eps, mask=mask)
            adam_step(state, params.live, grads)
            ema_update(params.ema, params.live, cfg.ema_decay)
            total += loss * b
        history.append(total / n)
        if log is not None:
            log(epoch, history[-1], state.lr)
    return DiffusionModel(spec, params, sched, norm, cfg, history)


def _widen(lo, hi):
    flat = hi - lo <= 0
    return np.where(flat, lo - 1.0, lo), np.where(flat, hi + 1.0, hi)


# ---------------------------------------------------------------------------
# sampling

def cfg_epsilon(weights, y_t, t, cond, omega):
    """Guided noise estimate ``(1 + omega) * eps_cond - omega * eps_uncond``."""
    if cond is None:
        raise InputError("guidance needs a condition")
    eps_c = denoiser_forward(weights, y_t, t, cond)
    eps_u = denoiser_forward(weights, y_t, t, None)
    return (1.0 + omega) * eps_c - omega * eps_u


def _standardize_wide(y):
    std = y.std(axis=1, keepdims=True)
    wide = std > 1.0
    return np.where(wide, (y - y.mean(axis=1, keepdims=True)) / np.where(wide, std, 1.0), y)


def reverse_step(y_t, t, eps_tilde, sched, rng=None, cfg=None, noise=None):
    """One reverse update from step ``t`` to ``t - 1``.

    The mean is ``(y_t - (1 - a_t) / sqrt(1 - abar_t) * eps_tilde) / sqrt(a_t)``.
    For ``t > 1`` noise is added with coefficient
    ``(1 - abar_{t-1}) / (1 - abar_t)`` (``paper_eq13``) or the square root
    of the posterior variance (``ddpm_posterior``); ``t == 1`` is noise-free.
    During the first ``normalize_first_k`` reverse steps, rows whose standard
    deviation exceeds 1 are standardized.
    """
    cfg = cfg or SampleConfig()
    if not 1 <= t <= sched.T:
        raise InputError(f"step {t} outside 1..{sched.T}")
    a, ab, ab_prev = sched.alpha[t], sched.alpha_bar[t], sched.alpha_bar[t - 1]
    y = (y_t - (1.0 - a) / np.sqrt(1.0 - ab) * eps_tilde) / np.sqrt(a)
    if t > 1:
        if noise is None:
            noise = rng.standard_normal(np.shape(y_t))
        ratio = (1.0 - ab_prev) / (1.0 - ab)
        coef = ratio if cfg.variance_mode == "paper_eq13" else np.sqrt(ratio * (1.0 - a))
        y = y + coef * noise
    if cfg.normalize_first_k and t > sched.T - cfg.normalize_first_k:
        y = _standardize_wide(np.atleast_2d(y)).reshape(np.shape(y))
    return y


def _chain_noise(seed, instance, chain, T, dy):
    rng = np.random.default_rng([seed, instance, chain])
    return rng.standard_normal((T, dy))


def _pick_best(spec, f, n, k):
    f = f.reshape(n, k)
    score = f if spec.sense == MAXIMIZE else -f
    return np.argmax(score, axis=1)


def sample_batch(model, X, cfg=None, trace=False):
    """Run guided reverse chains for every row of ``X``.

    Chain ``j`` of instance ``i`` uses its own generator seeded with
    ``(cfg.seed, i, j)``. The chain itself is never projected; each recorded
    trajectory point and the returned solution are denormalized and repaired
    with ``project_feasible``. With ``num_samples > 1`` the best repaired
    chain per instance is returned.

    Returns
    -------
    Y : ndarray, shape (n, y_dim)
    trajectories : list of list of Trajectory, or None
        ``trajectories[i][j]`` is chain ``j`` of instance ``i`` when ``trace``.
    """
    cfg = cfg or SampleConfig()
    spec, norm, sched = model.spec, model.normalizer, model.schedule
    X, _ = as_2d(X, spec.x_dim, "x")
    n, k, T, dy = len(X), cfg.num_samples, sched.T, spec.y_dim
    if model.params.y_dim != dy:
        raise InputError("checkpoint and problem dimensions differ")
    if cfg.normalize_first_k > T:
        raise InputError(f"normalize_first_k ({cfg.normalize_first_k}) exceeds T ({T})")
    noise = np.stack([_chain_noise(cfg.seed, i, j, T, dy) for i in range(n) for j in range(k)])
    Xr = np.repeat(X, k, axis=0)
    Xn = norm.scale_x(Xr)
    augment = model.config.augment
    weights = model.params.ema

    def repaired(y):
        sol = project_feasible(spec, Xr, norm.unscale_y(y))
        return sol, evaluate_objective(spec, Xr, sol)

    y = noise[:, 0]
    if trace:
        sols, objs = [], []
        s, f = repaired(y)
        sols.append(s)
        objs.append(f)
    for t in range(T, 0, -1):
        cond = _conditions(spec, norm, Xr, Xn, y, augment)
        eps = cfg_epsilon(weights, y, t, cond, cfg.omega)
        z = noise[:, T - t + 1] if t > 1 else None
        y = reverse_step(y, t, eps, sched, cfg=cfg, noise=z)
        if trace:
            s, f = repaired(y)
            sols.append(s)
            objs.append(f)
    final, f_final = repaired(y)
    best = _pick_best(spec, f_final, n, k)
    rows = np.arange(n) * k + best
    trajectories = None
    if trace:
        steps = np.arange(T, -1, -1)
        S, F = np.stack(sols, axis=1), np.stack(objs, axis=1)
        trajectories = [[Trajectory(steps, F[i * k + j], S[i * k + j]) for j in range(k)]
                        for i in range(n)]
    return final[rows], trajectories


def sample(model, x, cfg=None):
    """Generate one solution for a single instance; returns (y, trajectory).

    The trajectory is that of the selected chain.
    """
    cfg = cfg or SampleConfig()
    Y, trajs = sample_batch(model, np.asarray(x, dtype=np.float64)[None, :], cfg, trace=True)
    best = _pick_best(model.spec, np.array([tr.objectives[-1] for tr in trajs[0]]), 1, cfg.num_samples)
    return Y[0], trajs[0][int(best[0])]

