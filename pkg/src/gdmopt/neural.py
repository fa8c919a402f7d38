"""Numpy MLPs with hand-written backprop, Adam, EMA and checkpoint files.

The denoiser predicts the injected noise from (noisy solution, step,
condition). Its layers, in declared order::

    cond     (cond_dim + 1 mask bit) -> 64      SiLU
    fuse     (y_dim + 32 + 64)       -> 256     SiLU
    hidden1  256 -> 256                          SiLU
    hidden2  256 -> 256                          SiLU
    out      256 -> y_dim                        linear

Weights are stored as ``(fan_in, fan_out)`` arrays so a layer is ``h @ W + b``.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from ._validation import InputError, as_2d

TIME_DIM = 32
COND_EMBED = 64
HIDDEN = 256
DENOISER_LAYERS = ("cond", "fuse", "hidden1", "hidden2", "out")


def silu(a):
    return a * expit(a)


def silu_grad(a):
    s = expit(a)
    return s * (1.0 + a * (1.0 - s))


def time_embedding(t, dim=TIME_DIM):
    """Sinusoidal step encoding: entry 2k is sin(t / 10000**(2k/dim)), 2k+1 the cos."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    freqs = 10000.0 ** (-np.arange(0, dim, 2) / dim)
    ang = t[:, None] * freqs[None, :]
    emb = np.empty((len(t), dim))
    emb[:, 0::2] = np.sin(ang)
    emb[:, 1::2] = np.cos(ang)
    return emb


def _init_layer(rng, fan_in, fan_out):
    bound = 1.0 / np.sqrt(fan_in)
    W = rng.uniform(-bound, bound, size=(fan_in, fan_out))
    b = rng.uniform(-bound, bound, size=fan_out)
    return W, b


@dataclass
class DenoiserParams:
    """Live weights of the noise predictor plus their EMA shadow."""

    y_dim: int
    cond_dim: int
    live: dict = field(default_factory=dict)
    ema: dict = field(default_factory=dict)

    def shapes(self):
        ins = {
            "cond": self.cond_dim + 1,
            "fuse": self.y_dim + TIME_DIM + COND_EMBED,
            "hidden1": HIDDEN,
            "hidden2": HIDDEN,
            "out": HIDDEN,
        }
        outs = {"cond": COND_EMBED, "fuse": HIDDEN, "hidden1": HIDDEN,
                "hidden2": HIDDEN, "out": self.y_dim}
        layout = []
        for name in DENOISER_LAYERS:
            layout.append((f"{name}.W", (ins[name], outs[name])))
            layout.append((f"{name}.b", (outs[name],)))
        return layout

    @classmethod
    def initialize(cls, y_dim, cond_dim, rng):
        p = cls(y_dim, cond_dim)
        for (wname, (fi, fo)), (bname, _) in zip(p.shapes()[::2], p.shapes()[1::2]):
            p.live[wname], p.live[bname] = _init_layer(rng, fi, fo)
        p.ema = {k: v.copy() for k, v in p.live.items()}
        return p

    @classmethod
    def zeros(cls, y_dim, cond_dim):
        p = cls(y_dim, cond_dim)
        p.live = {k: np.zeros(s) for k, s in p.shapes()}
        p.ema = {k: np.zeros(s) for k, s in p.shapes()}
        return p

    def copy(self):
        return DenoiserParams(self.y_dim, self.cond_dim,
                              {k: v.copy() for k, v in self.live.items()},
                              {k: v.copy() for k, v in self.ema.items()})


# ---------------------------------------------------------------------------
# denoiser forward / backward

def _denoiser_inputs(weights, y_t, t, cond, mask):
    y_t, _ = as_2d(y_t, name="y_t")
    n = len(y_t)
    cond_dim = weights["cond.W"].shape[0] - 1
    y_dim = weights["out.W"].shape[1]
    if y_t.shape[1] != y_dim:
        raise InputError(f"y_t must have {y_dim} columns, got {y_t.shape[1]}")
    t = np.broadcast_to(np.asarray(t), (n,))
    if cond is None:
        c = np.zeros((n, cond_dim))
        mask = np.zeros(n)
    else:
        c, _ = as_2d(cond, name="cond")
        c = np.broadcast_to(c, (n, c.shape[1]))
        if c.shape[1] != cond_dim:
            raise InputError(f"condition must have {cond_dim} entries, got {c.shape[1]}")
        mask = np.ones(n) if mask is None else np.asarray(mask, dtype=np.float64)
        c = c * mask[:, None]
    return y_t, t, np.hstack([c, mask[:, None]])


def _forward(weights, y_t, t, cond, mask):
    y_t, t, c_in = _denoiser_inputs(weights, y_t, t, cond, mask)
    cache = {"c_in": c_in}
    a = c_in @ weights["cond.W"] + weights["cond.b"]
    cache["cond"] = a
    z = np.hstack([y_t, time_embedding(t), silu(a)])
    cache["fuse_in"] = z
    h = z
    for name in ("fuse", "hidden1", "hidden2"):
        a = h @ weights[f"{name}.W"] + weights[f"{name}.b"]
        cache[name] = (h, a)
        h = silu(a)
    cache["out"] = h
    return h @ weights["out.W"] + weights["out.b"], cache


def denoiser_forward(weights, y_t, t, cond=None, mask=None):
    """Predicted noise for each row of ``y_t``.

    ``cond=None`` runs the unconditional branch (zero condition, mask bit 0).
    ``mask`` optionally drops the condition row-wise (0 = unconditional).
    ``weights`` is a parameter dict such as ``DenoiserParams.ema``.
    """
    out, _ = _forward(weights, y_t, t, cond, mask)
    return out


def loss_and_grad(weights, y_t, t, cond, eps_true, mask=None):
    """Mean squared noise-prediction error over the batch and its gradient."""
    eps_true, _ = as_2d(eps_true, name="eps_true")
    pred, cache = _forward(weights, y_t, t, cond, mask)
    n = len(pred)
    resid = pred - eps_true
    loss = float(np.sum(resid ** 2) / n)
    g = {}
    d = 2.0 * resid / n
    g["out.W"] = cache["out"].T @ d
    g["out.b"] = d.sum(axis=0)
    d = d @ weights["out.W"].T
    for name in ("hidden2", "hidden1", "fuse"):
        h_in, a = cache[name]
        d = d * silu_grad(a)
        g[f"{name}.W"] = h_in.T @ d
        g[f"{name}.b"] = d.sum(axis=0)
        d = d @ weights[f"{name}.W"].T
    y_dim = weights["out.W"].shape[1]
    d_emb = d[:, y_dim + TIME_DIM:] * silu_grad(cache["cond"])
    g["cond.W"] = cache["c_in"].T @ d_emb
    g["cond.b"] = d_emb.sum(axis=0)
    return loss, g


# ---------------------------------------------------------------------------
# plain MLP (trunk + heads for the discriminative baseline)

def mlp_init(sizes, rng):
    w = {}
    for i, (fi, fo) in enumerate(zip(sizes[:-1], sizes[1:])):
        w[f"l{i}.W"], w[f"l{i}.b"] = _init_layer(rng, fi, fo)
    return w


def mlp_layer_names(weights):
    n = len(weights) // 2
    return [f"l{i}" for i in range(n)]


def mlp_forward(weights, x, cache=False, act_last=False):
    """SiLU MLP; the last layer is linear unless ``act_last``."""
    names = mlp_layer_names(weights)
    h, stash = x, []
    for i, name in enumerate(names):
        a = h @ weights[f"{name}.W"] + weights[f"{name}.b"]
        stash.append((h, a))
        h = silu(a) if act_last or i < len(names) - 1 else a
    return (h, stash) if cache else h


def mlp_backward(weights, stash, d_out, act_last=False):
    names = mlp_layer_names(weights)
    g, d = {}, d_out
    for i in range(len(names) - 1, -1, -1):
        h_in, a = stash[i]
        if act_last or i < len(names) - 1:
            d = d * silu_grad(a)
        g[f"{names[i]}.W"] = h_in.T @ d
        g[f"{names[i]}.b"] = d.sum(axis=0)
        d = d @ weights[f"{names[i]}.W"].T
    return g


# ---------------------------------------------------------------------------
# optimizer state

@dataclass
class TrainState:
    """Adam moments plus a multi-step learning-rate schedule."""

    lr: float
    milestones: tuple = ()
    gamma: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    epoch: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.lr > 0:
            raise InputError("learning rate must be positive")


def adam_step(state, weights, grads):
    """Bias-corrected Adam update of ``weights`` in place."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for k, g in grads.items():
        if k not in state.m:
            state.m[k] = np.zeros_like(g)
            state.v[k] = np.zeros_like(g)
        m, v = state.m[k], state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        weights[k] -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return weights, state


def advance_epoch(state, epoch):
    """Move the schedule to ``epoch``, decaying lr by gamma per milestone crossed."""
    for ms in state.milestones:
        if state.epoch < ms <= epoch:
            state.lr *= state.gamma
    state.epoch = epoch
    return state


def ema_update(ema, live, decay=0.999):
    for k, v in live.items():
        ema[k] *= decay
        ema[k] += (1.0 - decay) * v
    return ema


# ---------------------------------------------------------------------------
# checkpoint files

def checkpoint_paths(path):
    """Return (json, bin) paths for a checkpoint given either file or a stem."""
    p = str(path)
    for suffix in (".ckpt.json", ".ckpt.bin"):
        if p.endswith(suffix):
            p = p[: -len(suffix)]
    return Path(p + ".ckpt.json"), Path(p + ".ckpt.bin")


def write_checkpoint(path, meta, layout, blocks):
    """Write metadata JSON and little-endian float64 parameter values.

    ``layout`` lists (name, shape) in file order; every dict in ``blocks``
    (e.g. live then EMA) is written in that order, row-major.
    """
    jpath, bpath = checkpoint_paths(path)
    jpath.parent.mkdir(parents=True, exist_ok=True)
    meta = dict(meta, layout=[[n, list(s)] for n, s in layout], n_blocks=len(blocks))
    flat = np.concatenate([np.ravel(b[n]) for b in blocks for n, _ in layout])
    with open(jpath, "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    flat.astype("<f8").tofile(bpath)
    return jpath


def read_checkpoint(path):
    """Inverse of :func:`write_checkpoint`; returns (meta, [dict per block])."""
    jpath, bpath = checkpoint_paths(path)
    if not jpath.is_file() or not bpath.is_file():
        raise FileNotFoundError(f"checkpoint {jpath} / {bpath} not found")
    with open(jpath) as fh:
        meta = json.load(fh)
    flat = np.fromfile(bpath, dtype="<f8").astype(np.float64)
    blocks, pos = [], 0
    for _ in range(meta["n_blocks"]):
        block = {}
        for name, shape in meta["layout"]:
            size = int(np.prod(shape))
            block[name] = flat[pos:pos + size].reshape(shape).copy()
            pos += size
        blocks.append(block)
    if pos != flat.size:
        raise InputError("checkpoint binary does not match its layout")
    return meta, blocks
