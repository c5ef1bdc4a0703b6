"""L-infinity adversarial example generators: white-box PGD and black-box SPSA."""

from dataclasses import dataclass, fields, replace

import numpy as np

from nsrobust import network
from nsrobust.errors import ArgumentError
from nsrobust.losses import _ce_terms, _margin_terms, _mse_terms
from nsrobust.optim import AdamaxConfig
from nsrobust.tensor import RandStream

ATTACK_LOSSES = {"ce": _ce_terms, "margin": _margin_terms, "mse": _mse_terms}


def _from_dict(cls, d):
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ArgumentError(f"unknown {cls.__name__} keys {sorted(unknown)}")
    d = dict(d)
    if "bounds" in d:
        d["bounds"] = tuple(d["bounds"])
    return cls(**d)


@dataclass(frozen=True)
class AttackConfig:
    """PGD settings.  ``step_size=None`` means ``2.5 * eps / steps``."""

    eps: float = 0.1
    steps: int = 100
    step_size: float = None
    random_start: bool = True
    bounds: tuple = (0.0, 1.0)
    loss: str = "ce"
    seed: int = 0

    def __post_init__(self):
        if self.eps < 0:
            raise ArgumentError(f"eps must be >= 0, got {self.eps}")
        if self.steps < 1:
            raise ArgumentError(f"steps must be >= 1, got {self.steps}")
        if self.step_size is not None and self.step_size <= 0:
            raise ArgumentError(f"step_size must be > 0, got {self.step_size}")
        if not self.bounds[0] < self.bounds[1]:
            raise ArgumentError(f"bounds must satisfy lo < hi, got {self.bounds}")
        if self.loss not in ATTACK_LOSSES:
            raise ArgumentError(f"unknown attack loss {self.loss!r}")

    @property
    def alpha(self):
        return self.step_size if self.step_size is not None else 2.5 * self.eps / self.steps

    from_dict = classmethod(_from_dict)


@dataclass(frozen=True)
class SpsaConfig:
    eps: float = 0.1
    iterations: int = 100
    delta: float = 0.01
    lr: float = 0.01
    pairs: int = 1024
    bounds: tuple = (0.0, 1.0)
    seed: int = 0
    # upper bound on rows per model evaluation
    eval_rows: int = 16384

    def __post_init__(self):
        if self.eps < 0:
            raise ArgumentError(f"eps must be >= 0, got {self.eps}")
        if self.delta <= 0:
            raise ArgumentError(f"delta must be > 0, got {self.delta}")
        if self.pairs < 1:
            raise ArgumentError(f"pairs must be >= 1, got {self.pairs}")
        if self.iterations < 0:
            raise ArgumentError(f"iterations must be >= 0, got {self.iterations}")
        if not self.bounds[0] < self.bounds[1]:
            raise ArgumentError(f"bounds must satisfy lo < hi, got {self.bounds}")

    from_dict = classmethod(_from_dict)


def _check_bounds(x, bounds):
    lo, hi = bounds
    if np.any(x < lo) or np.any(x > hi):
        raise ArgumentError(f"input outside data bounds [{lo}, {hi}]")


def project(x_adv, x, eps, bounds):
    """Clip into the eps-ball around ``x`` intersected with the data box."""
    out = np.clip(x_adv, x - eps, x + eps)
    return np.clip(out, bounds[0], bounds[1], out=out)


def pgd_attack(model, x, y, cfg, stream=None):
    """K-step sign-gradient ascent on ``cfg.loss`` with eps-ball projection."""
    x = np.asarray(x, dtype=model.dtype)
    y = np.asarray(y, dtype=np.int64)
    _check_bounds(x, cfg.bounds)
    if cfg.eps == 0:
        return x.copy()
    loss_terms = ATTACK_LOSSES[cfg.loss]
    stream = stream or RandStream(cfg.seed, 1)
    eps = np.asarray(cfg.eps, dtype=x.dtype)
    alpha = np.asarray(cfg.alpha, dtype=x.dtype)
    x_adv = x.copy()
    if cfg.random_start:
        x_adv = project(x + stream.uniform(-cfg.eps, cfg.eps, x.shape, dtype=x.dtype), x, eps, cfg.bounds)
    for _ in range(cfg.steps):
        _, g = network.input_gradient(model, x_adv, lambda z: loss_terms(z, y)[1])
        x_adv = project(x_adv + alpha * np.sign(g), x, eps, cfg.bounds)
    return x_adv


def logit_margin(z, y):
    """``z_y - max_{i != y} z_i``; negative means misclassified."""
    rows = np.arange(len(y))
    zy = z[rows, y]
    other = z.copy()
    other[rows, y] = -np.inf
    return zy - other.max(axis=1)


def spsa_gradient(fn, x, delta, pairs, stream):
    """Antithetic Rademacher estimate of the gradient of ``fn`` at each row of ``x``.

    ``fn`` maps ``[M, D]`` to ``[M]``.  Returns ``[N, D]``.
    """
    v = stream.sign_bernoulli((x.shape[0], pairs, x.shape[1]), dtype=x.dtype)
    return _estimate(fn, x, v, delta)


def _estimate(fn, x, v, delta):
    n, pairs, d = v.shape
    probes = np.concatenate([x[:, None] + delta * v, x[:, None] - delta * v], axis=1)
    values = np.asarray(fn(probes.reshape(-1, d))).reshape(n, 2 * pairs)
    diff = (values[:, :pairs] - values[:, pairs:]) / (2 * delta)
    return np.einsum("np,npd->nd", diff, v) / pairs


def _logits_fn(model):
    if isinstance(model, network.Model):
        return lambda x: network.logits(model, x)
    return model


def spsa_attack(model, x, y, cfg, stream=None):
    """Black-box SPSA with Adamax updates; keeps each sample's lowest-margin iterate.

    ``model`` may be a :class:`~nsrobust.network.Model` or any callable
    mapping inputs to logits; only forward evaluations are used.
    """
    f = _logits_fn(model)
    x = np.asarray(x)
    y = np.asarray(y, dtype=np.int64)
    _check_bounds(x, cfg.bounds)
    best = x.copy()
    if cfg.iterations == 0 or cfg.eps == 0 or len(x) == 0:
        return best
    stream = stream or RandStream(cfg.seed, 2)
    shape = x.shape
    flat = x.reshape(len(x), -1)
    group = max(1, cfg.eval_rows // (2 * cfg.pairs))
    opt = AdamaxConfig(lr=cfg.lr)
    out = best.reshape(len(x), -1)
    for start in range(0, len(x), group):
        idx = np.arange(start, min(start + group, len(x)))
        out[idx] = _spsa_group(f, flat[idx], y[idx], cfg, opt, [stream.spawn(i) for i in idx], shape[1:])
    return out.reshape(shape)


def _spsa_group(f, x, y, cfg, opt, streams, sample_shape):
    n, d = x.shape
    eps = np.asarray(cfg.eps, dtype=x.dtype)

    def margin(rows, labels):
        return logit_margin(np.asarray(f(rows.reshape((-1,) + sample_shape))), labels)

    x_t = x.copy()
    best_x = x.copy()
    best_m = margin(x, y)
    m = np.zeros_like(x)
    u = np.zeros_like(x)
    rep = np.repeat(y, 2 * cfg.pairs)
    for t in range(1, cfg.iterations + 1):
        v = np.stack([s.sign_bernoulli((cfg.pairs, d), dtype=x.dtype) for s in streams])
        g = _estimate(lambda rows: margin(rows, rep), x_t, v, cfg.delta)
        m = opt.beta_m * m + (1 - opt.beta_m) * g
        u = np.maximum(opt.beta_u * u, np.abs(g))
        step = opt.lr / (1 - opt.beta_m ** t)
        x_t = project(x_t - (step * m / (u + opt.stab)).astype(x.dtype), x, eps, cfg.bounds)
        cur = margin(x_t, y)
        better = cur < best_m
        best_x[better] = x_t[better]
        best_m = np.where(better, cur, best_m)
    return best_x


def with_eps(cfg, eps):
    return replace(cfg, eps=float(eps))
