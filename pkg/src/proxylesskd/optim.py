"""Nesterov accelerated gradient with coupled weight decay and cosine LR decay."""

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .errors import ArgumentError, DivergenceError


@dataclass
class OptimConfig:
    lr0: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 4e-5
    total_steps: int = 1

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ArgumentError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ArgumentError(f"weight decay must be >= 0, got {self.weight_decay}")
        if self.lr0 < 0:
            raise ArgumentError(f"lr0 must be >= 0, got {self.lr0}")
        if self.total_steps < 1:
            raise ArgumentError("total_steps must be >= 1")


def cosine_lr(cfg, t):
    """0.5 * lr0 * (1 + cos(pi * t / T)); exactly lr0 at t=0 and 0 at t=T."""
    if not 0 <= t <= cfg.total_steps:
        raise ArgumentError(f"step {t} outside [0, {cfg.total_steps}]")
    if t == cfg.total_steps:
        return 0.0
    return 0.5 * cfg.lr0 * (1.0 + math.cos(math.pi * t / cfg.total_steps))


def nag_step(weights, velocity, grad_fn, cfg, lr, step=None):
    """One NAG update in lookahead form.

    ``grad_fn`` receives the lookahead point ``w + mu * v`` (a list of arrays)
    and returns the data gradient there. Weight decay is added at the same
    point. Returns new ``(weights, velocity)`` lists; inputs are not mutated.
    """
    mu, wd = cfg.momentum, cfg.weight_decay
    look = [w + mu * v for w, v in zip(weights, velocity)]
    grads = grad_fn(look)
    if len(grads) != len(weights):
        raise ArgumentError(f"grad_fn returned {len(grads)} arrays for {len(weights)} weights")
    new_w, new_v = [], []
    for w, v, p, g in zip(weights, velocity, look, grads):
        if not np.all(np.isfinite(g)):
            raise DivergenceError("non-finite gradient", step)
        v = mu * v - lr * (g + wd * p)
        new_v.append(v)
        new_w.append(w + v)
    return new_w, new_v


@njit(cache=True)
def _to_lookahead(p, v, base, mu):
    for i in range(p.size):
        base[i] = p[i]
        p[i] = p[i] + mu * v[i]


@njit(cache=True)
def _finite(g):
    for i in range(g.size):
        if not np.isfinite(g[i]):
            return False
    return True


@njit(cache=True)
def _apply(p, v, g, base, mu, lr, wd):
    # same operation order as nag_step, so both paths agree bit for bit
    for i in range(p.size):
        vi = mu * v[i] - lr * (g[i] + wd * p[i])
        v[i] = vi
        p[i] = base[i] + vi


class NAG:
    """Stateful in-place form of :func:`nag_step` over a model's parameter arrays.

    Parameters are updated in place so models keep referencing the same arrays.
    """

    def __init__(self, params, cfg):
        for p in params:
            if p.dtype != np.float64 or not p.flags.c_contiguous:
                raise ArgumentError("NAG needs C-contiguous float64 parameter arrays")
        self.params = params
        self.cfg = cfg
        self.velocity = [np.zeros_like(p) for p in params]
        self._base = [np.empty_like(p) for p in params]
        self.t = 0

    def _restore(self):
        for p, b in zip(self.params, self._base):
            np.copyto(p, b)

    def step(self, grad_fn):
        """Evaluate ``grad_fn()`` with the parameters at the lookahead point, then update."""
        cfg = self.cfg
        lr = cosine_lr(cfg, min(self.t, cfg.total_steps))
        flat = [p.reshape(-1) for p in self.params]
        for p, v, b in zip(flat, self.velocity, self._base):
            _to_lookahead(p, v.reshape(-1), b.reshape(-1), cfg.momentum)
        try:
            grads = grad_fn()
        except BaseException:
            self._restore()
            raise
        if len(grads) != len(flat):
            self._restore()
            raise ArgumentError(f"grad_fn returned {len(grads)} arrays for {len(flat)} weights")
        grads = [np.ascontiguousarray(g, dtype=np.float64).reshape(-1) for g in grads]
        for g, p in zip(grads, flat):
            if g.size != p.size or not _finite(g):
                self._restore()
                if g.size != p.size:
                    raise ArgumentError("gradient shape does not match its parameter")
                raise DivergenceError("non-finite gradient", self.t)
        for p, v, g, b in zip(flat, self.velocity, grads, self._base):
            _apply(p, v.reshape(-1), g, b.reshape(-1), cfg.momentum, lr, cfg.weight_decay)
        self.t += 1
        return lr
