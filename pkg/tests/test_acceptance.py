"""Acceptance criteria, one test per criterion; each prints a PASS/FAIL line.

The property criteria run everywhere in seconds.  The desk-scale criteria
train on the public MIT-BIH heartbeat CSVs, which are not bundled: point
``NSR_ECG_DIR`` at a directory holding ``mitbih_train.csv`` and
``mitbih_test.csv``.  Without them those criteria fail (they are never
skipped).  Trained models are cached under ``NSR_ACCEPT_CACHE`` (default
``<NSR_ECG_DIR>/acceptance``) so reruns only evaluate.
"""

import os

import numpy as np
import pytest

from nsrobust import checks
from nsrobust.attacks import AttackConfig, SpsaConfig, pgd_attack, spsa_attack
from nsrobust.data import load_heartbeat_csv, prepare
from nsrobust.errors import PersistenceError
from nsrobust.losses import LossConfig
from nsrobust.network import build_mlp
from nsrobust.persist import load_model, save_model
from nsrobust.report import DEFAULT_EPS_GRID, alignment_diagnostic, robustness_curve
from nsrobust.train import TrainConfig, evaluate_clean, train

RESULTS = []


def record(name, passed, detail):
    line = f"[{'PASS' if passed else 'FAIL'}] {name}: {detail}"
    RESULTS.append(line)
    print(line)
    assert passed, line


def record_check(result):
    record(result.name, result.passed, f"{result.value:.3g} (threshold {result.threshold:g}) {result.detail}")


# --- property suite -------------------------------------------------------------

@pytest.mark.parametrize("arch", ["mlp", "cnn"])
@pytest.mark.parametrize("dtype", [np.float32, np.float64], ids=["f32", "f64"])
def test_exact_linearity(arch, dtype):
    record_check(checks.check_linearity(arch, dtype))


@pytest.mark.parametrize("arch", ["mlp", "cnn"])
def test_frozen_region_exactness(arch):
    record_check(checks.check_frozen_region(arch))


@pytest.mark.parametrize("arch", ["mlp", "cnn"])
@pytest.mark.parametrize("kind", ["loss1", "loss2"])
@pytest.mark.parametrize("class_sum", [False, True], ids=["true-class", "class-sum"])
def test_double_backprop(arch, kind, class_sum):
    record_check(checks.check_gradients(arch, kind, seed=0, class_sum=class_sum))


def test_holder_fuzz():
    record_check(checks.check_holder())


@pytest.mark.parametrize("arch", ["mlp", "cnn"])
def test_attack_containment(arch):
    record_check(checks.check_attack_containment(cases=10_000, arch=arch))


def test_conv_toeplitz():
    record_check(checks.check_conv_toeplitz())


# --- desk-scale MLP track -------------------------------------------------------------

METHODS = {
    "ce": dict(kind="ce"),
    "mse": dict(kind="mse"),
    "mseMargin": dict(kind="mseMargin"),
    "loss1": dict(kind="loss1"),
    "loss2": dict(kind="loss2"),
    "jacob": dict(kind="jacob"),
    "adv0.1": dict(kind="adv", adv_eps=0.1),
    "adv0.2": dict(kind="adv", adv_eps=0.2),
    "adv0.3": dict(kind="adv", adv_eps=0.3),
}
EVAL_PER_CLASS = 400  # 2000 balanced test beats
SEED = 0


class Desk:
    def __init__(self, root):
        self.root = root
        self.cache = os.environ.get("NSR_ACCEPT_CACHE") or os.path.join(root, "acceptance")
        split_dir = os.path.join(self.cache, "data")
        if not os.path.exists(os.path.join(split_dir, "manifest.json")):
            prepare(os.path.join(root, "mitbih_train.csv"), os.path.join(root, "mitbih_test.csv"), split_dir, SEED)
        self.train = load_heartbeat_csv(os.path.join(split_dir, "train.csv"))
        self.val = load_heartbeat_csv(os.path.join(split_dir, "val.csv"))
        self.test = load_heartbeat_csv(os.path.join(split_dir, "test.csv"))
        self.eval = self.test.first_per_class(EVAL_PER_CLASS)
        self.models, self.curves = {}, {}

    def model(self, method):
        if method not in self.models:
            path = os.path.join(self.cache, f"mlp_{method}.json")
            try:
                self.models[method] = load_model(path)
            except (OSError, PersistenceError):
                spec = dict(METHODS[method])
                kind = spec.pop("kind")
                cfg = TrainConfig(loss=LossConfig(kind=kind), seed=SEED, **spec)
                model, _ = train(build_mlp(seed=SEED), self.train, self.val, cfg)
                save_model(model, path)
                self.models[method] = model
        return self.models[method]

    def curve(self, method, steps):
        key = (method, steps)
        if key not in self.curves:
            cfg = AttackConfig(steps=steps, seed=SEED)
            self.curves[key] = robustness_curve(self.model(method), pgd_attack, cfg, DEFAULT_EPS_GRID,
                                                self.eval, model_id=method, threads=os.cpu_count() or 1)
        return self.curves[key]


@pytest.fixture(scope="module")
def desk():
    root = os.environ.get("NSR_ECG_DIR", "")
    missing = [f for f in ("mitbih_train.csv", "mitbih_test.csv") if not os.path.exists(os.path.join(root, f))]
    if missing:
        return f"heartbeat data not found (NSR_ECG_DIR={root!r} lacks {', '.join(missing)})"
    return Desk(root)


def _need(desk, name):
    if isinstance(desk, str):
        record(name, False, desk)
    return desk


def test_clean_accuracy(desk):
    name = "clean accuracy (MLP ce >= 0.90/0.90, loss1 >= 0.89, loss2 >= 0.87)"
    d = _need(desk, name)
    got = {m: evaluate_clean(d.model(m), d.test) for m in ("ce", "loss1", "loss2")}
    ok = got["ce"][0] >= 0.90 and got["ce"][1] >= 0.90 and got["loss1"][0] >= 0.89 and got["loss2"][0] >= 0.87
    record(name, ok, ", ".join(f"{m} ACC {a:.3f} PREC {p:.3f}" for m, (a, p) in got.items()))


def test_pgd100_ordering(desk):
    name = "100-PGD ordering at eps 0.1 (loss2 >= ce + 0.30, >= mseMargin + 0.15, |loss2 - 0.61| <= 0.07)"
    d = _need(desk, name)
    acc = {m: d.curve(m, 100).acc(0.1) for m in ("ce", "mseMargin", "loss2")}
    ok = (acc["loss2"] >= acc["ce"] + 0.30 and acc["loss2"] >= acc["mseMargin"] + 0.15
          and abs(acc["loss2"] - 0.61) <= 0.07)
    record(name, ok, ", ".join(f"{m} {a:.3f}" for m, a in acc.items()) + f" (n={len(d.eval)})")


def test_pgd20_vs_pgd100(desk):
    name = "100-PGD ACC <= 20-PGD ACC + 0.02 for every method and eps"
    d = _need(desk, name)
    worst, where = -1.0, None
    for m in METHODS:
        weak, strong = d.curve(m, 20), d.curve(m, 100)
        for eps in DEFAULT_EPS_GRID:
            gap = strong.acc(eps) - weak.acc(eps)
            if gap > worst:
                worst, where = gap, (m, eps)
    record(name, worst <= 0.02, f"largest excess {worst:+.3f} at {where}")


def test_adv_training_curves_cross(desk):
    name = "adv0.1 and adv0.2 ACC curves cross between eps 0.05 and 0.2"
    d = _need(desk, name)
    a, b = d.curve("adv0.1", 100), d.curve("adv0.2", 100)
    grid = [e for e in DEFAULT_EPS_GRID if 0.05 <= e <= 0.2]
    diff = [a.acc(e) - b.acc(e) for e in grid]
    crossed = any(x > 0 > y or x < 0 < y for x, y in zip(diff, diff[1:]))
    record(name, crossed, "ACC(adv0.1) - ACC(adv0.2) = " + ", ".join(f"{e:g}: {v:+.3f}" for e, v in zip(grid, diff)))


def test_spsa_reduced_scale(desk):
    name = "SPSA (20/class, 50 iterations, 512 pairs) at eps 0.1: loss2 > ce and loss2 >= 0.20"
    d = _need(desk, name)
    sub = d.test.first_per_class(20)
    cfg = SpsaConfig(iterations=50, pairs=512, seed=SEED)
    acc = {m: robustness_curve(d.model(m), spsa_attack, cfg, [0.0, 0.1], sub).acc(0.1) for m in ("ce", "loss2")}
    record(name, acc["loss2"] > acc["ce"] and acc["loss2"] >= 0.20, f"ce {acc['ce']:.3f}, loss2 {acc['loss2']:.3f}")


def test_alignment_loss1_over_ce(desk):
    name = "alignment: mean cos(w_y, x) of loss1 MLP > ce MLP"
    d = _need(desk, name)
    cos = {m: alignment_diagnostic(d.model(m), d.eval)[0] for m in ("ce", "loss1")}
    record(name, cos["loss1"] > cos["ce"], f"ce {cos['ce']:.4f}, loss1 {cos['loss1']:.4f}")
