"""Expected-objective lower bounds for discriminative vs generative solvers.

A discriminative map that misses the optimum by ``e`` lands outside the
neighbourhood U(y*, e) and, with probability ``p``, exceeds ``sigma * f*``.
A generative sampler keeps mass ``p_i`` inside the neighbourhood. The lower
bounds on E[f] are

    disc_bound = p * sigma * f* + (1 - p) * f*
    gen_bound  = p_i * f* + (1 - p_i) * disc_bound

and their difference is ``f* (sigma - 1) p_i p``. The Monte-Carlo toy uses
``f(y) = (y - x)**2 + f*`` with ``x = 0``, so ``y* = 0``.
"""

import math
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np
from scipy.stats import norm

from ._validation import InputError

CHUNK = 10_000


@dataclass(frozen=True)
class BoundScenario:
    """Bound parameters plus the toy's error radius and sampler width.

    ``e=None`` picks ``sqrt((sigma - 1) * f_star)`` so the toy's exceedance
    factor equals ``sigma``. ``width=None`` picks the normal width whose mass
    inside the neighbourhood is ``p_i`` (needs ``p_i < 0.5``).
    """

    f_star: float = 2.0
    sigma: float = 1.5
    p: float = 0.3
    p_i: float = 0.2
    e: float = None
    width: float = None

    def __post_init__(self):
        if not self.f_star > 0:
            raise InputError("f_star must be positive")
        if not self.sigma > 1:
            raise InputError("sigma must exceed 1")
        for name in ("p", "p_i"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise InputError(f"{name} must lie in (0, 1), got {v!r}")
        if self.e is not None and self.e < 0:
            raise InputError("e must be non-negative")
        if self.width is not None and self.width < 0:
            raise InputError("width must be non-negative")

    @property
    def p_o(self):
        return 1.0 - self.p_i

    @property
    def radius(self):
        return math.sqrt((self.sigma - 1.0) * self.f_star) if self.e is None else float(self.e)

    @property
    def sampler_width(self):
        if self.width is not None:
            return float(self.width)
        if self.radius == 0.0:
            return 0.0
        if self.p_i >= 0.5:
            raise InputError("a normal centred on the boundary holds < 0.5 inside; pass width")
        return -2.0 * self.radius / norm.ppf(0.5 - self.p_i)


class BoundGap(NamedTuple):
    disc_bound: float
    gen_bound: float
    gap: float
    gap_closed_form: float


def _bounds(f_star, sigma, p, p_i):
    disc = p * f_star * sigma + (1.0 - p) * f_star
    gen = p_i * f_star + (1.0 - p_i) * disc
    return disc, gen


def bound_gap(sc):
    """Both lower bounds, their direct difference and the closed-form gap."""
    if not isinstance(sc, BoundScenario):
        raise InputError("expected a BoundScenario")
    disc, gen = _bounds(sc.f_star, sc.sigma, sc.p, sc.p_i)
    gap = disc - gen
    closed = sc.f_star * (sc.sigma - 1.0) * sc.p_i * sc.p
    if abs(gap - closed) > 1e-12 * max(1.0, abs(disc)):
        raise ArithmeticError(f"bound gap mismatch: {gap!r} vs {closed!r}")
    return BoundGap(disc, gen, gap, closed)


def monte_carlo_bounds(sc, n_trials=100_000, seed=0):
    """Estimate E[f] for the toy's discriminative and generative outputs.

    The discriminative output is always ``y* + e``; generative samples are
    ``N(y* + e, width**2)``. Bounds are evaluated at the measured ``sigma``
    (exceedance factor of the discriminative output), ``p`` (share of
    out-of-neighbourhood samples above ``sigma * f*``) and ``p_i``.
    Trials run in chunks of 10^4, chunk ``k`` seeded with ``(seed, k)``.

    Returns a JSON-ready dict.
    """
    n_trials = int(n_trials)
    if n_trials < 10_000:
        raise InputError("n_trials must be at least 10^4")
    f_star, e, w = sc.f_star, sc.radius, sc.sampler_width
    toy = lambda y: y ** 2 + f_star

    f_disc = toy(e)
    sigma_m = f_disc / f_star
    s1 = s2 = 0.0
    inside = exceed = 0
    for k, start in enumerate(range(0, n_trials, CHUNK)):
        m = min(CHUNK, n_trials - start)
        rng = np.random.default_rng([seed, k])
        y = e + w * rng.standard_normal(m)
        f = toy(y)
        s1 += f.sum()
        s2 += (f ** 2).sum()
        in_u = np.abs(y) <= e
        inside += int(in_u.sum())
        exceed += int(np.sum(~in_u & (f >= sigma_m * f_star)))
    gen_mean = s1 / n_trials
    gen_var = max(s2 / n_trials - gen_mean ** 2, 0.0) * n_trials / (n_trials - 1)
    p_i_m = inside / n_trials
    outside = n_trials - inside
    p_m = exceed / outside if outside else 0.0
    disc_b, gen_b = _bounds(f_star, sigma_m, p_m, p_i_m)
    return {
        "disc_bound": disc_b,
        "gen_bound": gen_b,
        "gap": disc_b - gen_b,
        "disc_mean": float(f_disc),
        "gen_mean": float(gen_mean),
        "se_disc": 0.0,
        "se_gen": math.sqrt(gen_var / n_trials),
        "measured_p": p_m,
        "measured_sigma": sigma_m,
        "measured_p_i": p_i_m,
        "n_trials": n_trials,
        "seed": int(seed),
        "e": e,
        "width": w,
        "scenario": asdict(sc),
        "scenario_bounds": bound_gap(sc)._asdict(),
    }


def bounds_hold(report, k=3.0, rtol=1e-12):
    """Each empirical mean sits at or above its bound, allowing k standard errors."""
    ok_d = report["disc_mean"] >= report["disc_bound"] - k * report["se_disc"] - rtol * abs(report["disc_bound"])
    ok_g = report["gen_mean"] >= report["gen_bound"] - k * report["se_gen"] - rtol * abs(report["gen_bound"])
    return bool(ok_d and ok_g)
