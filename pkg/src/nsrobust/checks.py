"""Property checks run by ``nsrobust gradcheck`` and the acceptance suite.

Every check compares the fast path against an independent oracle: the
frozen network evaluated at ``x = 0`` for the offsets, central finite
differences for gradients, an explicit Toeplitz matrix for convolution.
"""

import itertools
from dataclasses import dataclass

import numpy as np

from nsrobust import losses, network, tensor
from nsrobust.attacks import AttackConfig, SpsaConfig, pgd_attack, spsa_attack
from nsrobust.network import CNNConfig, build_cnn, build_mlp

TOY_CNN = CNNConfig(blocks=2, channels=4, kernel=3, pool_kernel=2, pool_stride=2, hidden=8,
                    input_length=16, class_count=3)


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    threshold: float
    detail: str = ""

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.name}: {self.value:.3g} (threshold {self.threshold:g}) {self.detail}".rstrip()


def reference_model(arch, seed, dtype):
    if arch == "mlp":
        return build_mlp(seed=seed, dtype=dtype)
    return build_cnn(seed=seed, dtype=dtype)


def toy_model(arch, seed, dtype=np.float64):
    """Small net whose every layer has live ReLUs on random inputs (seeds are skipped until so)."""
    probe = tensor.RandStream(seed, 27).uniform(0.0, 1.0, (8, 16), dtype=dtype)
    for k in range(100):
        if arch == "mlp":
            model = build_mlp((6, 5, 4, 4, 3), seed=seed + k, dtype=dtype)
        else:
            model = build_cnn(TOY_CNN, seed=seed + k, dtype=dtype)
        _, masks = network.forward(model, probe[:, :model.input_dim])
        if all(m.reshape(8, -1).any(axis=0).mean() > 0.5 for m in masks.relu.values()):
            return model
    return model


def _randomize_biases(model, stream):
    for name, p in model.params.items():
        if name.endswith(".bias"):
            p[...] = stream.uniform(-0.1, 0.1, p.shape, dtype=p.dtype)
    return model


def check_linearity(arch, dtype, seed=0, n=100):
    """max |z - (w.x + b)| / (1 + |z|) with ``b`` from the frozen map at x = 0."""
    stream = tensor.RandStream(seed, 21)
    model = _randomize_biases(reference_model(arch, seed, dtype), stream)
    x = stream.uniform(0.0, 1.0, (n, model.input_dim), dtype=dtype)
    z, masks = network.forward(model, x)
    eff = network.effective_linear(model, x, masks)
    b0 = network.frozen_forward(model, np.zeros_like(x), masks)
    pred = np.einsum("nkd,nd->nk", eff.w.astype(np.float64), x.astype(np.float64)) + b0
    err = float(np.max(np.abs(z - pred) / (1 + np.abs(z))))
    limit = 1e-4 if dtype == np.float32 else 1e-9
    name = f"exact linearity {arch} {np.dtype(dtype).name}"
    return CheckResult(name, err < limit, err, limit, f"({n} inputs)")


def check_frozen_region(arch, seed=0, n=100, tol=1e-9):
    """z(x + d) == z(x) + W d for perturbations that keep every mask, in f64."""
    stream = tensor.RandStream(seed, 22)
    model = _randomize_biases(reference_model(arch, seed, np.float64), stream)
    x = stream.uniform(0.2, 0.8, (n, model.input_dim), dtype=np.float64)
    z, masks = network.forward(model, x)
    eff = network.effective_linear(model, x, masks)
    worst, used = 0.0, 0
    scale = 1e-3
    remaining = np.arange(n)
    while len(remaining) and scale > 1e-12:
        d = stream.uniform(-scale, scale, (len(remaining), model.input_dim), dtype=np.float64)
        z2, m2 = network.forward(model, x[remaining] + d)
        same = m2.agrees(masks.select(remaining))
        pred = z[remaining] + np.einsum("nkd,nd->nk", eff.w[remaining], d)
        rel = np.abs(z2 - pred) / (1 + np.abs(z[remaining]))
        if same.any():
            worst = max(worst, float(rel[same].max()))
            used += int(same.sum())
        remaining = remaining[~same]
        scale /= 10
    return CheckResult(f"frozen-region exactness {arch}", worst < tol and used > 0, worst, tol,
                       f"({used} perturbations with unchanged masks)")


def _loss_value(model, x, y, cfg):
    return losses.objective(model, x, y, cfg)[0]


def check_gradients(arch, kind, seed=0, h=1e-5, tol=1e-3, probes=40, n=4, class_sum=False):
    """Analytic parameter gradients vs central differences; probes that flip a mask are skipped."""
    stream = tensor.RandStream(seed, 23)
    model = _randomize_biases(toy_model(arch, seed), stream)
    x = stream.uniform(0.0, 1.0, (n, model.input_dim), dtype=np.float64)
    z = network.logits(model, x)
    y = z.argmax(axis=1)
    y[0] = (y[0] + 1) % model.class_count  # keep one misclassified sample in the batch
    cfg = losses.LossConfig(kind=kind, lambda_jac=0.5, class_sum=class_sum)
    x_adv = np.clip(x + 0.05, 0, 1) if kind == "adv" else None
    _, grads, _ = losses.objective(model, x, y, cfg, x_adv=x_adv)
    base = network.trace(model, x).masks
    base_adv = network.trace(model, x_adv).masks if x_adv is not None else None
    worst, checked = 0.0, 0
    names = model.param_names()
    picks = stream.integers(2**31, (probes, 2))
    for a, b in picks:
        name = names[a % len(names)]
        flat = model.params[name].reshape(-1)
        i = b % flat.size
        old = flat[i]
        values = []
        stable = True
        for sign in (1, -1):
            flat[i] = old + sign * h
            stable &= bool(network.trace(model, x).masks.agrees(base).all())
            if x_adv is not None:
                stable &= bool(network.trace(model, x_adv).masks.agrees(base_adv).all())
            stable &= bool(np.array_equal(network.logits(model, x).argmax(1) == y, z.argmax(1) == y))
            values.append(losses.objective(model, x, y, cfg, x_adv=x_adv)[0])
        flat[i] = old
        if not stable:
            continue
        numeric = (values[0] - values[1]) / (2 * h)
        analytic = grads[name].reshape(-1)[i]
        denom = max(abs(numeric), abs(analytic))
        if denom < 1e-7:
            continue
        worst = max(worst, abs(numeric - analytic) / denom)
        checked += 1
    label = f"double-backprop {kind}{' class-sum' if class_sum else ''} {arch}"
    return CheckResult(label, checked >= probes // 2 and worst < tol, worst, tol, f"({checked} probes)")


def check_holder(seed=0, n=10_000, dim=187):
    stream = tensor.RandStream(seed, 24)
    w = stream.normal(0.0, 1.0, (n, dim), dtype=np.float64)
    eps = stream.uniform(-1.0, 1.0, (n, dim), dtype=np.float64) * stream.uniform(0.0, 1.0, (n, 1), dtype=np.float64)
    lhs = np.abs((w * eps).sum(axis=1))
    rhs = np.abs(w).sum(axis=1) * np.abs(eps).max(axis=1)
    violations = int((lhs > rhs * (1 + 1e-12)).sum())
    # equality at eps = ||eps||_inf * sign(w)
    tight = np.abs(eps).max(axis=1, keepdims=True) * np.sign(w)
    gap = float(np.max(np.abs(np.abs((w * tight).sum(axis=1)) - rhs) / rhs))
    ok = violations == 0 and gap < 1e-12
    return CheckResult("Hölder bound |w.e| <= ||w||_1 ||e||_inf", ok, violations, 0,
                       f"({n} pairs, equality gap {gap:.1e})")


def check_conv_toeplitz():
    """conv1d == Toeplitz matmul, bit-exact in f64 with integer-valued data."""
    stream = tensor.RandStream(0, 25)
    cases = mismatches = 0
    for length, k, stride, pad, cin, cout in itertools.product(
            range(1, 9), range(1, 4), (1, 2), (0, 1), (1, 2), (1, 2)):
        if (length + 2 * pad - k) // stride + 1 < 1:
            continue
        x = np.floor(stream.uniform(-4, 5, (cin, length), dtype=np.float64))
        w = np.floor(stream.uniform(-4, 5, (cout, cin, k), dtype=np.float64))
        got = tensor.conv1d(x, w, stride, pad).ravel()
        want = tensor.matmul(tensor.toeplitz(w, length, stride, pad), x.reshape(-1, 1)).ravel()
        cases += 1
        mismatches += int(not np.array_equal(got, want))
    return CheckResult("conv1d == Toeplitz matmul", mismatches == 0, mismatches, 0, f"({cases} shapes)")


def check_attack_containment(seed=0, cases=10_000, arch="mlp"):
    """Fuzz both attacks; every output must stay in the eps-ball and in [0, 1]."""
    stream = tensor.RandStream(seed, 26)
    model = build_mlp((16, 12, 8, 3), seed=seed) if arch == "mlp" else build_cnn(
        CNNConfig(blocks=1, channels=2, kernel=3, pool_kernel=2, pool_stride=2, hidden=4,
                  input_length=16, class_count=3), seed=seed)
    worst_ball = 0.0
    out_of_box = 0
    done = 0
    batch = 250
    while done < cases:
        n = min(batch, cases - done)
        x = stream.uniform(0.0, 1.0, (n, 16), dtype=model.dtype)
        # push some coordinates onto the box faces
        x[stream.uniform(0, 1, x.shape, dtype=np.float64) < 0.1] = 0.0
        x[stream.uniform(0, 1, x.shape, dtype=np.float64) < 0.1] = 1.0
        y = stream.integers(3, (n,))
        eps = float(stream.uniform(0.0, 0.5, (1,), dtype=np.float64)[0])
        if (done // batch) % 2 == 0:
            steps = int(stream.integers(5, (1,))[0]) + 1
            x_adv = pgd_attack(model, x, y, AttackConfig(eps=eps, steps=steps, seed=done,
                                                         step_size=float(eps) or None), stream=stream.spawn(done))
        else:
            x_adv = spsa_attack(model, x, y, SpsaConfig(eps=eps, iterations=3, pairs=4, lr=0.05),
                                stream=stream.spawn(done))
        worst_ball = max(worst_ball, float(np.max(np.abs(x_adv.astype(np.float64) - x) - eps)))
        out_of_box += int(np.sum((x_adv < 0) | (x_adv > 1)))
        done += n
    ok = worst_ball <= 1e-6 and out_of_box == 0
    return CheckResult(f"attack containment (PGD + SPSA) {arch}", ok, max(worst_ball, 0.0), 1e-6,
                       f"({cases} cases, {out_of_box} box violations)")


GRADIENT_KINDS = ("loss1", "loss2", "jacob", "ce", "mse", "mseMargin", "adv")


def run_suite(arch="mlp", seed=0, containment_cases=10_000):
    results = [
        check_linearity(arch, np.float32, seed),
        check_linearity(arch, np.float64, seed),
        check_frozen_region(arch, seed),
    ]
    results += [check_gradients(arch, kind, seed) for kind in GRADIENT_KINDS]
    results += [check_gradients(arch, kind, seed, class_sum=True) for kind in ("loss1", "loss2")]
    results += [check_holder(seed), check_conv_toeplitz(),
                check_attack_containment(seed, containment_cases, arch)]
    return results
