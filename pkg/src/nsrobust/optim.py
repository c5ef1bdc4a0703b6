"""Adamax, shared by the trainer and the SPSA attack."""

from dataclasses import dataclass, field

import numpy as np

from nsrobust.errors import ArgumentError, TrainingError


@dataclass(frozen=True)
class AdamaxConfig:
    lr: float = 0.001
    beta_m: float = 0.9
    beta_u: float = 0.999
    stab: float = 1e-8


@dataclass
class AdamaxState:
    m: dict = field(default_factory=dict)
    u: dict = field(default_factory=dict)
    t: int = 0


def adamax_step(params, grads, state, t, cfg):
    """One Adamax update at step ``t`` (1-based); modifies ``params`` and ``state`` in place.

    m <- b_m m + (1 - b_m) g;  u <- max(b_u u, |g|);
    theta <- theta - lr / (1 - b_m^t) * m / (u + stab)
    """
    if t < 1:
        raise ArgumentError(f"step index must be >= 1, got {t}")
    step = cfg.lr / (1 - cfg.beta_m ** t)
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name}")
        p = params[name]
        if g.shape != p.shape:
            raise ArgumentError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.u[name] = np.zeros_like(p)
        u = state.u[name]
        m *= cfg.beta_m
        m += (1 - cfg.beta_m) * g
        np.maximum(cfg.beta_u * u, np.abs(g), out=u)
        p -= (step * m / (u + cfg.stab)).astype(p.dtype, copy=False)
    state.t = t
    return params, state
