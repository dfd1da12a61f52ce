"""Built-in oracle checks behind the `selftest` CLI verb.

Each check recomputes an expected value through an independent route
(hand arithmetic, brute force, or direct integration) and compares the
library against it. One PASS/FAIL line per check; exit 0 iff all pass.
"""

from __future__ import annotations

import math

import numpy as np

from . import fusion, scheduler, ssm
from . import tensor as tn
from .tensor import Tensor


def _check_matmul() -> None:
    rng = np.random.default_rng(11)
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4, 2))
    out = tn.matmul(Tensor(a), Tensor(b)).data
    ref = np.zeros((3, 2))
    for i in range(3):
        for j in range(2):
            for k in range(4):
                ref[i, j] += a[i, k] * b[k, j]
    assert np.abs(out - ref).max() < 1e-12


def _check_phi1() -> None:
    assert tn.phi1_value(np.array(0.0)) == 1.0
    assert abs(tn.phi1_value(np.array(-0.5)) - 0.7869386805747332) < 1e-14
    lo = tn.phi1_value(np.array(1e-4 * (1 - 1e-9)))
    hi = tn.phi1_value(np.array(1e-4 * (1 + 1e-9)))
    assert abs(hi - lo) < 1e-10


def _check_discretize_ode() -> None:
    rng = np.random.default_rng(5)
    for _ in range(100):
        a = -float(rng.uniform(0.1, 5.0))
        dt = float(rng.uniform(0.01, 1.0))
        b = float(rng.normal())
        x = float(rng.normal())
        h = h0 = float(rng.normal())
        n_sub = 1024
        sub = dt / n_sub
        for _ in range(n_sub):
            k1 = a * h + b * x
            k2 = a * (h + 0.5 * sub * k1) + b * x
            k3 = a * (h + 0.5 * sub * k2) + b * x
            k4 = a * (h + sub * k3) + b * x
            h += sub / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        abar, bbar = ssm.discretize(
            Tensor(np.full((1, 1, 1), dt)), Tensor(np.full((1, 1), a)),
            Tensor(np.full((1, 1, 1), b)))
        one_step = abar.data.item() * h0 + bbar.data.item() * x
        assert abs(one_step - h) / (abs(h) + 1e-12) < 1e-6


def _check_scan_oracle() -> None:
    rng = np.random.default_rng(7)
    bsz, seq, e_dim, n_state = 2, 9, 3, 4
    x = rng.normal(size=(bsz, seq, e_dim))
    delta = rng.uniform(0.01, 1.0, size=(bsz, seq, e_dim))
    bmat = rng.normal(size=(bsz, seq, n_state))
    cmat = rng.normal(size=(bsz, seq, n_state))
    a = -rng.uniform(0.1, 3.0, size=(e_dim, n_state))
    y = ssm.selective_scan(Tensor(x), Tensor(delta), Tensor(bmat), Tensor(cmat),
                           Tensor(a), None, ssm.ScanDirection.FORWARD)
    ref = np.zeros_like(x)
    for b in range(bsz):
        for e in range(e_dim):
            for n in range(n_state):
                h = 0.0
                for t in range(seq):
                    z = delta[b, t, e] * a[e, n]
                    h = math.exp(z) * h + np.expm1(z) / z * delta[b, t, e] * bmat[b, t, n] * x[b, t, e]
                    ref[b, t, e] += cmat[b, t, n] * h
    assert np.abs(y.data - ref).max() < 1e-10


def _check_match_oracle() -> None:
    rng = np.random.default_rng(13)
    for _ in range(100):
        length = int(rng.integers(5, 12))
        r = int(rng.integers(1, 3))
        vals = rng.normal(size=(length, 8))
        set_a, set_b = fusion.partition_even_odd(length)
        if r > min(len(set_a), len(set_b)):
            continue
        sim = fusion.cosine_similarity(vals, set_a, set_b)
        got = fusion.match_pairs(sim, r, set_a, set_b)
        proposals = []
        for i, ai in enumerate(set_a):
            best_j, best = 0, -np.inf
            for j in range(len(set_b)):
                if sim[i, j] > best:
                    best, best_j = sim[i, j], j
            proposals.append((-best, ai, set_b[best_j]))
        proposals.sort()
        expect = [(int(p[1]), int(p[2])) for p in proposals[:r]]
        assert got.pairs == expect


def _check_parity_and_steps() -> None:
    cfg = scheduler.parity_configs(24, 168)
    expect = {"none": (0, 0), "all": (7, 168), "interleaved": (14, 168),
              "lower": (9, 171), "upper": (9, 171)}
    for kind, (r, total) in expect.items():
        entry = cfg[kind]
        assert (entry.r_per_layer, entry.total_reduced) == (r, total), kind
    steps = {}
    for kind in scheduler.STRATEGY_KINDS:
        entry = cfg[kind]
        plan = scheduler.build_plan(entry.strategy, 24, entry.r_per_layer, 197)
        steps[kind], _ = scheduler.token_steps(plan, 197)
    assert steps == {"none": 4728, "all": 2628, "interleaved": 2712,
                     "lower": 2163, "upper": 3018}
    order = sorted(steps, key=steps.get)
    assert order == ["lower", "all", "interleaved", "upper", "none"]


def _check_loss_formula() -> None:
    from .model import classify_loss

    rng = np.random.default_rng(3)
    logits = rng.normal(size=(4, 6))
    targets = rng.integers(0, 6, size=4)
    loss = classify_loss(Tensor(logits), targets, smoothing=0.0)
    probs = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    ref = -np.log(probs[np.arange(4), targets]).mean()
    assert abs(loss.data - ref) < 1e-10


CHECKS = [
    ("matmul vs triple loop", _check_matmul),
    ("phi1 values and continuity", _check_phi1),
    ("discretization vs RK4 integration", _check_discretize_ode),
    ("selective scan vs naive recurrence", _check_scan_oracle),
    ("pair matching vs brute force", _check_match_oracle),
    ("budget parity and token steps", _check_parity_and_steps),
    ("label-smoothing loss formula", _check_loss_formula),
]


def run_selftest() -> int:
    failures = 0
    for name, fn in CHECKS:
        try:
            fn()
        except Exception as exc:  # noqa: BLE001 - report and continue
            failures += 1
            print(f"FAIL {name}: {exc}")
        else:
            print(f"PASS {name}")
    return 1 if failures else 0
