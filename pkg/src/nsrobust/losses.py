"""Classification losses, the two noise-to-signal regularizers and baseline defenses.

Per-sample functions (``mse_onehot``, ``margin_loss``, ...) accept a single
logit vector or a batch.  The ``*_batch`` functions return
:class:`~nsrobust.network.LossTerms` so :func:`~nsrobust.network.backprop_frozen`
can differentiate through the effective weights.

The margin sum skips ``i == y``; including it would only add the constant 1.
"""

from dataclasses import dataclass, fields

import numpy as np

from nsrobust import network
from nsrobust.errors import ArgumentError, ContractError
from nsrobust.network import EffectiveLinear, LossTerms

R2_STAB = 1e-8
R1_DEGENERATE = 1e-12
KINDS = ("ce", "mse", "mseMargin", "loss1", "loss2", "jacob", "adv")


@dataclass(frozen=True)
class LossConfig:
    kind: str = "loss2"
    beta1: float = 0.2
    beta2: float = 0.5
    gamma: float = 1.0
    eps_max: float = 1.0
    lambda_jac: float = 0.01
    # Sum the regularizer over every class instead of the true class only.
    class_sum: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ArgumentError(f"unknown loss kind {self.kind!r}; expected one of {KINDS}")
        for name in ("beta1", "beta2", "lambda_jac", "eps_max"):
            if getattr(self, name) < 0:
                raise ArgumentError(f"{name} must be non-negative, got {getattr(self, name)}")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ArgumentError(f"unknown loss keys {sorted(unknown)}")
        return cls(**d)


def _batchify(z, y):
    z = np.asarray(z)
    single = z.ndim == 1
    z = np.atleast_2d(z)
    y = np.atleast_1d(np.asarray(y))
    if y.shape != (z.shape[0],):
        raise ArgumentError(f"labels shape {y.shape} does not match logits {z.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(y == np.round(y)):
            raise ArgumentError("labels must be integers")
        y = y.astype(np.int64)
    if np.any((y < 0) | (y >= z.shape[1])):
        raise ArgumentError(f"label out of range [0, {z.shape[1]})")
    return z, y, single


def _unbatch(v, single):
    return float(v[0]) if single else v


def _onehot(y, c, dtype):
    out = np.zeros((len(y), c), dtype=dtype)
    out[np.arange(len(y)), y] = 1
    return out


def _mse_terms(z, y):
    diff = z - _onehot(y, z.shape[1], z.dtype)
    return (diff ** 2).sum(axis=1), 2 * diff


def _margin_terms(z, y):
    rows = np.arange(len(y))
    zy = z[rows, y]
    slack = 1 - zy[:, None] + z
    slack[rows, y] = 0
    active = slack > 0
    grad = active.astype(z.dtype)
    grad[rows, y] = -active.sum(axis=1)
    return np.where(active, slack, 0).sum(axis=1), grad


def _ce_terms(z, y):
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(len(y))
    value = log_norm - shifted[rows, y]
    grad = np.exp(shifted - log_norm[:, None]) - _onehot(y, z.shape[1], z.dtype)
    return value, grad


def mse_onehot(z, y):
    """Squared distance from the logits to the one-hot code of ``y``."""
    z, y, single = _batchify(z, y)
    return _unbatch(_mse_terms(z, y)[0], single)


def margin_loss(z, y):
    """``sum_{i != y} max(0, 1 - z_y + z_i)``."""
    z, y, single = _batchify(z, y)
    return _unbatch(_margin_terms(z, y)[0], single)


def cross_entropy(z, y):
    z, y, single = _batchify(z, y)
    return _unbatch(_ce_terms(z, y)[0], single)


def reg_r1(w, x, gamma=1.0):
    """``||w - gamma * x / (x.x)||^2``; 0 for (near-)zero ``x``, which callers count separately."""
    w = np.atleast_2d(w)
    x = np.atleast_2d(x).reshape(w.shape)
    value, _, _ = _r1_terms(w, x, gamma)
    return float(value[0]) if value.shape == (1,) else value


def _r1_terms(w, x, gamma):
    xx = (x * x).sum(axis=-1, keepdims=True)
    ok = xx[..., 0] >= R1_DEGENERATE
    target = gamma * x / np.where(ok[..., None], xx, 1)
    diff = np.where(ok[..., None], w - target, 0)
    return (diff ** 2).sum(axis=-1), 2 * diff, ok


def reg_r2(w, z_y, eps_max=1.0):
    """Hölder bound ``||w||_1 * eps_max / |z_y|`` with a 1e-8 stabilizer."""
    w = np.asarray(w)
    return np.abs(w).sum(axis=-1) * eps_max / (np.abs(z_y) + R2_STAB)


def _weights(eff, y, need, all_classes, c):
    """Effective rows needed by a gated regularizer: [N, K, D] plus slot classes."""
    n = len(y)
    if all_classes:
        slots = np.broadcast_to(np.arange(c), (n, c))
        if eff.classes.shape[1] < c or not np.array_equal(np.sort(eff.classes, axis=1), slots):
            raise ContractError("class-summed regularizer needs effective rows for every class")
        order = np.argsort(eff.classes, axis=1)
        return np.take_along_axis(eff.w, order[:, :, None], axis=1), slots.copy()
    hit = eff.classes == y[:, None]
    missing = need & ~hit.any(axis=1)
    if missing.any():
        raise ContractError(
            f"effective weight w_y missing for correctly classified samples "
            f"{np.flatnonzero(missing)[:10].tolist()}")
    slot = hit.argmax(axis=1)
    w = eff.w[np.arange(n), slot][:, None, :]
    return np.where(need[:, None, None], w, 0), y[:, None].copy()


def _gated_base(logits, y):
    z, y, _ = _batchify(logits, y)
    correct = z.argmax(axis=1) == y
    mse_v, mse_g = _mse_terms(z, y)
    mar_v, mar_g = _margin_terms(z, y)
    value = mse_v + np.where(correct, mar_v, 0)
    grad = mse_g + np.where(correct[:, None], mar_g, 0)
    return z, y, correct, value, grad


def loss1_batch(logits, eff, x, y, cfg):
    """Mean of MSE + [correct] (margin + beta1 * R1)."""
    z, y, correct, value, gz = _gated_base(logits, y)
    n, c = z.shape
    stats = {"correct": float(correct.mean()), "r1_skipped": 0}
    gw = slots = None
    if cfg.beta1 > 0:
        if eff is None:
            raise ContractError("loss1 needs effective weights")
        w, slots = _weights(eff, y, correct, cfg.class_sum, c)
        xf = np.asarray(x).reshape(n, 1, -1)
        r1, dr1, ok = _r1_terms(w, np.broadcast_to(xf, w.shape), cfg.gamma)
        use = correct[:, None] & ok
        stats["r1_skipped"] = int((correct & ~ok.all(axis=1)).sum())
        value = value + cfg.beta1 * np.where(use, r1, 0).sum(axis=1)
        gw = cfg.beta1 * np.where(use[:, :, None], dr1, 0) / n
    return LossTerms(float(value.mean()), gz / n, gw, slots, stats)


def loss2_batch(logits, eff, x, y, cfg):
    """Mean of MSE + [correct] (margin + beta2 * log(1 + R2))."""
    z, y, correct, value, gz = _gated_base(logits, y)
    n, c = z.shape
    stats = {"correct": float(correct.mean())}
    gz = gz / n
    gw = slots = None
    if cfg.beta2 > 0:
        if eff is None:
            raise ContractError("loss2 needs effective weights")
        w, slots = _weights(eff, y, correct, cfg.class_sum, c)
        zk = np.take_along_axis(z, slots, axis=1)
        denom = np.abs(zk) + R2_STAB
        l1 = np.abs(w).sum(axis=2)
        r2 = (l1 * cfg.eps_max / denom).sum(axis=1)
        scale = np.where(correct, cfg.beta2 / (1 + r2), 0)
        value = value + np.where(correct, cfg.beta2 * np.log1p(r2), 0)
        gw = (scale[:, None, None] * np.sign(w) * cfg.eps_max / denom[:, :, None]) / n
        dzk = -scale[:, None] * l1 * cfg.eps_max * np.sign(zk) / denom ** 2
        np.add.at(gz, (np.arange(n)[:, None], slots), dzk / n)
        stats["r2_mean"] = float(r2[correct].mean()) if correct.any() else 0.0
    return LossTerms(float(value.mean()), gz, gw, slots, stats)


def mse_margin_batch(logits, y):
    z, y, correct, value, gz = _gated_base(logits, y)
    n = len(y)
    return LossTerms(float(value.mean()), gz / n, stats={"correct": float(correct.mean())})


def mse_batch(logits, y):
    z, y, _ = _batchify(logits, y)
    value, g = _mse_terms(z, y)
    return LossTerms(float(value.mean()), g / len(y),
                     stats={"correct": float((z.argmax(1) == y).mean())})


def ce_batch(logits, y):
    z, y, _ = _batchify(logits, y)
    value, g = _ce_terms(z, y)
    return LossTerms(float(value.mean()), g / len(y),
                     stats={"correct": float((z.argmax(1) == y).mean())})


def jacobian_terms(logits, eff, y, lambda_jac):
    """CE + (lambda/2) * ||dz/dx||_F^2, the Jacobian rows being the effective weights."""
    terms = ce_batch(logits, y)
    n, c = np.shape(logits)
    if lambda_jac == 0:
        return terms
    if eff.classes.shape[1] != c:
        raise ContractError("Jacobian penalty needs effective rows for every class")
    penalty = 0.5 * lambda_jac * (eff.w ** 2).sum(axis=(1, 2))
    terms.value = float(terms.value + penalty.mean())
    terms.grad_weights = lambda_jac * eff.w / n
    terms.weight_classes = eff.classes
    return terms


def jacobian_reg(model, x, y, lambda_jac):
    rec = network.trace(model, x)
    eff = network.effective_linear(model, rec.x, rec.masks)
    return jacobian_terms(rec.logits, eff, y, lambda_jac).value


def adv_loss(model, x, x_adv, y):
    """``0.5 * CE(x, y) + 0.5 * CE(x_adv, y)``."""
    if np.shape(x) != np.shape(x_adv):
        raise ArgumentError(f"x and x_adv shapes differ: {np.shape(x)} vs {np.shape(x_adv)}")
    clean = cross_entropy(network.logits(model, x), y).mean()
    adv = cross_entropy(network.logits(model, x_adv), y).mean()
    return float(0.5 * clean + 0.5 * adv)


def _eff_from_trace(model, rec, slots):
    w = network.effective_weights(model, rec.masks, slots)
    n = rec.x.shape[0]
    zk = np.take_along_axis(rec.logits, slots, axis=1)
    b = zk - np.einsum("nkd,nd->nk", w, rec.x.reshape(n, -1))
    return EffectiveLinear(w, b, slots)


def _add(into, grads, scale=1.0):
    for k, g in grads.items():
        into[k] = into[k] + scale * g if k in into else scale * g
    return into


def batch_terms(model, rec, y, cfg):
    """LossTerms of ``cfg`` on a traced batch (``adv`` evaluates as CE here)."""
    y = np.asarray(y)
    n, c = rec.logits.shape
    kind = cfg.kind
    if kind in ("ce", "adv"):
        return ce_batch(rec.logits, y)
    if kind == "mse":
        return mse_batch(rec.logits, y)
    if kind == "mseMargin":
        return mse_margin_batch(rec.logits, y)
    if kind == "jacob":
        eff = _eff_from_trace(model, rec, np.broadcast_to(np.arange(c), (n, c)).copy()) \
            if cfg.lambda_jac > 0 else None
        return jacobian_terms(rec.logits, eff, y, cfg.lambda_jac)
    beta = cfg.beta1 if kind == "loss1" else cfg.beta2
    eff = None
    if beta > 0:
        slots = np.broadcast_to(np.arange(c), (n, c)).copy() if cfg.class_sum else y[:, None]
        eff = _eff_from_trace(model, rec, slots.astype(np.int64))
    fn = loss1_batch if kind == "loss1" else loss2_batch
    return fn(rec.logits, eff, rec.x, y, cfg)


def objective(model, x, y, cfg, x_adv=None):
    """Loss value, parameter gradients and batch statistics for one step."""
    rec = network.trace(model, x)
    terms = batch_terms(model, rec, y, cfg)
    grads = network.backprop_frozen(model, rec, terms)
    value = terms.value
    stats = dict(terms.stats)
    if cfg.kind == "adv":
        if x_adv is None:
            raise ContractError("adversarial loss needs x_adv")
        if np.shape(x_adv) != np.shape(x):
            raise ArgumentError(f"x and x_adv shapes differ: {np.shape(x)} vs {np.shape(x_adv)}")
        rec_adv = network.trace(model, x_adv)
        adv_terms = ce_batch(rec_adv.logits, y)
        adv_grads = network.backprop_frozen(model, rec_adv, adv_terms)
        grads = _add({k: 0.5 * g for k, g in grads.items()}, adv_grads, 0.5)
        value = 0.5 * value + 0.5 * adv_terms.value
        stats["adv_correct"] = adv_terms.stats["correct"]
    return value, grads, stats
