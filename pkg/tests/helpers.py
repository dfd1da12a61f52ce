"""Shared test utilities: finite-difference gradient checking."""

from __future__ import annotations

import numpy as np

from fambav import tensor as tn


def fd_gradcheck(build, tensors, h=1e-5, rel_tol=1e-4, sample=None, seed=0):
    """Compare analytic grads of build() (a scalar-loss thunk) against
    central finite differences. Checks every element unless `sample` caps
    the number of probed elements per tensor. Returns the worst error."""
    loss = build()
    tn.backward(loss)
    grads = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data)
             for t in tensors]
    for t in tensors:
        t.grad = None
    rng = np.random.default_rng(seed)
    worst = 0.0

    def eval_loss():
        with tn.no_grad():
            return float(build().data)

    for t, g in zip(tensors, grads):
        flat = t.data.reshape(-1)
        gflat = g.reshape(-1)
        if sample is None or flat.size <= sample:
            idxs = range(flat.size)
        else:
            idxs = rng.choice(flat.size, size=sample, replace=False)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + h
            up = eval_loss()
            flat[i] = orig - h
            down = eval_loss()
            flat[i] = orig
            fd = (up - down) / (2 * h)
            err = abs(fd - gflat[i]) / max(abs(fd), abs(gflat[i]), 1e-6)
            worst = max(worst, err)
    assert worst < rel_tol, f"worst relative gradient error {worst:.3e} >= {rel_tol}"
    return worst


def naive_scan_reference(x, delta, bmat, cmat, a, skip_d=None):
    """Per-element recurrence oracle: plain Python loops, float64."""
    bsz, seq, e_dim = x.shape
    n_state = a.shape[1]
    y = np.zeros((bsz, seq, e_dim))
    for b in range(bsz):
        for e in range(e_dim):
            for n in range(n_state):
                h = 0.0
                for t in range(seq):
                    z = delta[b, t, e] * a[e, n]
                    if abs(z) >= 1e-4:
                        p1 = np.expm1(z) / z
                    else:
                        p1 = 1 + z / 2 + z * z / 6 + z ** 3 / 24
                    h = np.exp(z) * h + p1 * delta[b, t, e] * bmat[b, t, n] * x[b, t, e]
                    y[b, t, e] += cmat[b, t, n] * h
            if skip_d is not None:
                y[b, :, e] += skip_d[e] * x[b, :, e]
    return y
