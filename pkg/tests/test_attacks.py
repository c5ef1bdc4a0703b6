import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nsrobust import network
from nsrobust.attacks import (AttackConfig, SpsaConfig, logit_margin, pgd_attack, spsa_attack,
                              spsa_gradient)
from nsrobust.errors import ArgumentError
from nsrobust.losses import cross_entropy
from nsrobust.network import Model, build_mlp, dense
from nsrobust.tensor import RandStream


def _binary_linear(w):
    """z = (w.x, 0)."""
    rows = np.stack([np.asarray(w, dtype=np.float64), np.zeros(len(w))])
    return Model([dense(len(w), 2, bias=False)], {"0.weight": rows}, (len(w),), 2)


def test_zero_eps_returns_input():
    model = build_mlp((5, 4, 3), seed=0)
    x = RandStream(0).uniform(0, 1, (4, 5))
    np.testing.assert_array_equal(pgd_attack(model, x, np.zeros(4, int), AttackConfig(eps=0.0)), x)
    np.testing.assert_array_equal(spsa_attack(model, x, np.zeros(4, int), SpsaConfig(eps=0.0)), x)


@pytest.mark.parametrize("alpha,eps", [(0.05, 0.1), (0.3, 0.1)])
def test_single_step_on_linear_binary_model(alpha, eps):
    w = np.array([1.0, -2.0, 0.5, -0.1])
    model = _binary_linear(w)
    x = np.full((1, 4), 0.5)
    cfg = AttackConfig(eps=eps, steps=1, step_size=alpha, random_start=False)
    x_adv = pgd_attack(model, x, np.array([0]), cfg)
    np.testing.assert_allclose(x_adv[0], 0.5 - min(alpha, eps) * np.sign(w), atol=1e-15)


def test_single_step_respects_box():
    model = _binary_linear([1.0, -1.0])
    x = np.array([[0.02, 0.97]])
    x_adv = pgd_attack(model, x, np.array([0]), AttackConfig(eps=0.1, steps=1, step_size=0.1,
                                                             random_start=False))
    np.testing.assert_allclose(x_adv, [[0.0, 1.0]])


def test_default_step_size():
    assert AttackConfig(eps=0.1, steps=20).alpha == pytest.approx(2.5 * 0.1 / 20)


def test_pgd_is_reproducible_for_a_seed():
    model = build_mlp((5, 4, 3), seed=1)
    x = RandStream(1).uniform(0, 1, (6, 5))
    y = np.arange(6) % 3
    cfg = AttackConfig(eps=0.1, steps=5, seed=3)
    np.testing.assert_array_equal(pgd_attack(model, x, y, cfg), pgd_attack(model, x, y, cfg))


def test_more_steps_do_not_weaken_pgd():
    model = build_mlp((8, 16, 3), seed=2, dtype=np.float64)
    x = RandStream(2).uniform(0.2, 0.8, (200, 8), dtype=np.float64)
    y = network.logits(model, x).argmax(axis=1)
    cfg = dict(eps=0.05, random_start=False)
    fgsm = pgd_attack(model, x, y, AttackConfig(steps=1, step_size=0.05, **cfg))
    strong = pgd_attack(model, x, y, AttackConfig(steps=40, **cfg))
    ce = {k: cross_entropy(network.logits(model, v), y).mean() for k, v in
          (("clean", x), ("fgsm", fgsm), ("strong", strong))}
    assert ce["fgsm"] > ce["clean"]
    # FGSM already sits on a ball corner for a near-linear net; many small steps get close to it
    assert ce["strong"] >= ce["fgsm"] - 1e-3 * ce["fgsm"]


def test_input_outside_box_rejected():
    model = build_mlp((2, 2), seed=0)
    with pytest.raises(ArgumentError):
        pgd_attack(model, np.array([[1.5, 0.0]]), np.array([0]), AttackConfig())


def test_spsa_no_iterations_is_identity():
    model = build_mlp((5, 3), seed=0)
    x = RandStream(0).uniform(0, 1, (2, 5))
    np.testing.assert_array_equal(spsa_attack(model, x, np.array([0, 1]), SpsaConfig(iterations=0)), x)


def test_spsa_gradient_of_squared_norm():
    x = RandStream(3).uniform(-1, 1, (3, 6), dtype=np.float64)
    g = spsa_gradient(lambda rows: (rows ** 2).sum(axis=1), x, 1e-3, 10_000, RandStream(4))
    np.testing.assert_allclose(g, 2 * x, rtol=0, atol=0.05 * np.abs(2 * x).max())
    assert np.linalg.norm(g - 2 * x) / np.linalg.norm(2 * x) < 0.05


def test_spsa_uses_forward_calls_only():
    model = build_mlp((6, 8, 3), seed=5, dtype=np.float64)
    before = {k: v.copy() for k, v in model.params.items()}
    calls = []

    def black_box(rows):
        calls.append(len(rows))
        return network.logits(model, rows)

    x = RandStream(5).uniform(0.2, 0.8, (4, 6), dtype=np.float64)
    y = network.logits(model, x).argmax(axis=1)
    cfg = SpsaConfig(eps=0.2, iterations=6, pairs=32, lr=0.05)
    x_adv = spsa_attack(black_box, x, y, cfg)
    # one clean margin, then per iteration: 2*pairs probes and one margin of the iterate
    assert len(calls) == 1 + 2 * cfg.iterations
    assert sum(calls) == 4 + cfg.iterations * 4 * (2 * cfg.pairs + 1)
    for k, v in model.params.items():
        np.testing.assert_array_equal(v, before[k])
    assert np.all(logit_margin(network.logits(model, x_adv), y) <= logit_margin(network.logits(model, x), y))


def test_spsa_lowers_margin_on_average():
    model = build_mlp((6, 8, 3), seed=6, dtype=np.float64)
    x = RandStream(6).uniform(0.2, 0.8, (20, 6), dtype=np.float64)
    y = network.logits(model, x).argmax(axis=1)
    x_adv = spsa_attack(model, x, y, SpsaConfig(eps=0.1, iterations=20, pairs=64, lr=0.02))
    clean = logit_margin(network.logits(model, x), y)
    adv = logit_margin(network.logits(model, x_adv), y)
    assert adv.mean() < clean.mean()


@settings(max_examples=25, deadline=None)
@given(eps=st.floats(0.0, 0.5), seed=st.integers(0, 2**31), steps=st.integers(1, 4),
       spsa=st.booleans())
def test_attacks_stay_in_ball_and_box(eps, seed, steps, spsa):
    model = build_mlp((6, 5, 3), seed=seed % 7)
    s = RandStream(seed)
    x = s.uniform(0, 1, (5, 6))
    x[:, 0], x[:, 1] = 0.0, 1.0
    y = s.integers(3, (5,))
    if spsa:
        x_adv = spsa_attack(model, x, y, SpsaConfig(eps=eps, iterations=steps, pairs=4, lr=0.1, seed=seed))
    else:
        x_adv = pgd_attack(model, x, y, AttackConfig(eps=eps, steps=steps, step_size=max(eps, 1e-3), seed=seed))
    assert np.all(np.abs(x_adv.astype(np.float64) - x) <= eps + 1e-6)
    assert np.all((x_adv >= 0) & (x_adv <= 1))
