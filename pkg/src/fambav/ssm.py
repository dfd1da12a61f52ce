"""Selective state-space layer with bidirectional scanning.

The continuous dynamics h' = a*h + b*x (diagonal negative a per channel)
are discretized per token with a zero-order hold over an input-dependent
step delta:

    abar = exp(delta * a)
    bbar = phi1(delta * a) * delta * b        phi1(z) = (e^z - 1)/z

and unrolled as h_t = abar_t * h_{t-1} + bbar_t * x_t, y_t = c_t . h_t,
optionally plus a per-channel skip term. delta, b and c are projections of
the current token, which is what makes the scan selective.

The scan is implemented as a single taped operation with a hand-derived
reverse pass. The discretization terms are precomputed for the whole
sequence (numpy's vectorized expm1); only the state recurrence itself is
sequential over L, in a compiled kernel when numba is importable and a
numpy loop otherwise.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import tensor as tn
from .errors import ContractError, ShapeError
from .tensor import Tensor

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        return wrap


class ScanDirection(enum.Enum):
    FORWARD = "forward"
    BACKWARD = "backward"


@dataclass
class SsmDirectionParams:
    """Per-direction scan parameters (the two directions do not share them)."""

    a_log: Tensor  # (E, N); state matrix diagonal is -exp(a_log) < 0
    delta_w: Tensor  # (E, E)
    delta_b: Tensor  # (E,)
    b_w: Tensor  # (E, N)
    c_w: Tensor  # (E, N)
    conv_kernel: Tensor  # (E, k_conv) depthwise causal kernel
    skip_d: Tensor  # (E,)

    def named_parameters(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.a_log", self.a_log
        yield f"{prefix}.delta_w", self.delta_w
        yield f"{prefix}.delta_b", self.delta_b
        yield f"{prefix}.b_w", self.b_w
        yield f"{prefix}.c_w", self.c_w
        yield f"{prefix}.conv_kernel", self.conv_kernel
        yield f"{prefix}.skip_d", self.skip_d


@dataclass
class SsmParams:
    """All parameters of one block: shared projections plus two scan sets."""

    norm_gain: Tensor  # (D,)
    norm_bias: Tensor  # (D,)
    in_w: Tensor  # (D, E)
    gate_w: Tensor  # (D, E)
    out_w: Tensor  # (E, D)
    fwd: SsmDirectionParams
    bwd: SsmDirectionParams
    use_skip: bool = True

    def named_parameters(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.norm_gain", self.norm_gain
        yield f"{prefix}.norm_bias", self.norm_bias
        yield f"{prefix}.in_w", self.in_w
        yield f"{prefix}.gate_w", self.gate_w
        yield f"{prefix}.out_w", self.out_w
        yield from self.fwd.named_parameters(f"{prefix}.fwd")
        yield from self.bwd.named_parameters(f"{prefix}.bwd")


def init_direction_params(rng: np.random.Generator, e_dim: int, n_state: int,
                          k_conv: int, dtype) -> SsmDirectionParams:
    # a_log so the state diagonal spans -1 .. -N; delta bias so the initial
    # step sizes are log-uniform in [1e-3, 1e-1].
    a_log = np.tile(np.log(np.arange(1, n_state + 1, dtype=np.float64)), (e_dim, 1))
    dt = np.exp(rng.uniform(np.log(1e-3), np.log(1e-1), size=e_dim))
    delta_b = np.log(np.expm1(dt))
    param = lambda arr: Tensor(np.asarray(arr, dtype=dtype), requires_grad=True)
    return SsmDirectionParams(
        a_log=param(a_log),
        delta_w=param(rng.normal(0.0, 0.1 / np.sqrt(e_dim), size=(e_dim, e_dim))),
        delta_b=param(delta_b),
        b_w=param(rng.normal(0.0, 1.0 / np.sqrt(e_dim), size=(e_dim, n_state))),
        c_w=param(rng.normal(0.0, 1.0 / np.sqrt(e_dim), size=(e_dim, n_state))),
        conv_kernel=param(rng.uniform(-1.0, 1.0, size=(e_dim, k_conv)) / np.sqrt(k_conv)),
        skip_d=param(np.ones(e_dim)),
    )


def init_ssm_params(rng: np.random.Generator, dim: int, e_dim: int, n_state: int,
                    k_conv: int = 4, dtype=np.float32, use_skip: bool = True) -> SsmParams:
    param = lambda arr: Tensor(np.asarray(arr, dtype=dtype), requires_grad=True)
    return SsmParams(
        norm_gain=param(np.ones(dim)),
        norm_bias=param(np.zeros(dim)),
        in_w=param(rng.normal(0.0, 1.0 / np.sqrt(dim), size=(dim, e_dim))),
        gate_w=param(rng.normal(0.0, 1.0 / np.sqrt(dim), size=(dim, e_dim))),
        out_w=param(rng.normal(0.0, 1.0 / np.sqrt(e_dim), size=(e_dim, dim))),
        fwd=init_direction_params(rng, e_dim, n_state, k_conv, dtype),
        bwd=init_direction_params(rng, e_dim, n_state, k_conv, dtype),
        use_skip=use_skip,
    )


def parameterize(tokens: Tensor, dirp: SsmDirectionParams) -> tuple[Tensor, Tensor, Tensor]:
    """Input-dependent (delta, B, C) for a (B, L, E) token stream."""
    delta = tn.softplus(tn.matmul(tokens, dirp.delta_w) + dirp.delta_b)
    bmat = tn.matmul(tokens, dirp.b_w)
    cmat = tn.matmul(tokens, dirp.c_w)
    return delta, bmat, cmat


def discretize(delta: Tensor, a_diag: Tensor, bmat: Tensor) -> tuple[Tensor, Tensor]:
    """Zero-order-hold step: abar = exp(delta*a), bbar = phi1(delta*a)*delta*b.

    delta: (..., E), a_diag: (E, N), bmat: (..., N); both outputs (..., E, N).
    """
    for name, t in (("delta", delta), ("a_diag", a_diag), ("bmat", bmat)):
        if not np.all(np.isfinite(t.data)):
            raise ContractError(f"discretize requires finite {name}")
    d_col = tn.reshape(delta, delta.shape + (1,))
    b_row = tn.reshape(bmat, bmat.shape[:-1] + (1, bmat.shape[-1]))
    z = tn.mul(d_col, a_diag)
    abar = tn.exp(z)
    bbar = tn.mul(tn.mul(tn.phi1(z), d_col), b_row)
    return abar, bbar


# Series/closed-form switch mirrors tensor.phi1_value.
_SWITCH = 1e-4


def _zoh_terms(delta, a, with_grad=False):
    """Per-token ZOH factors, vectorized: abar = e^z and p1 = phi1(z) for
    z = delta*a, plus phi1'(z) when the reverse pass needs it.

    Non-finite inputs flow through as non-finite outputs; the training
    loop's finite-loss contract is the failure point for diverged runs.
    """
    with np.errstate(over="ignore", invalid="ignore"):
        z = delta[:, :, :, None] * a
        em = np.expm1(z)
        small = np.abs(z) < _SWITCH
        if small.any():
            zs = np.where(small, 1.0, z)
            series = 1.0 + z / 2.0 + (z * z) / 6.0 + (z * z * z) / 24.0
            p1 = np.where(small, series, em / zs)
            p1g = None
            if with_grad:
                gseries = 0.5 + z / 3.0 + (z * z) / 8.0 + (z * z * z) / 30.0
                p1g = np.where(small, gseries, p1 + (1.0 - p1) / zs)
        else:
            p1 = em / z
            p1g = (p1 + (1.0 - p1) / z) if with_grad else None
    abar = em
    abar += 1.0
    return abar, p1, p1g


@njit(cache=True)
def _scan_fwd_kernel(x, delta, bmat, cmat, abar, p1, y, hs):  # pragma: no cover
    bsz, seq, e_dim = x.shape
    n_state = abar.shape[3]
    for b in range(bsz):
        h = np.zeros((e_dim, n_state), dtype=np.float64)
        for t in range(seq):
            for e in range(e_dim):
                dx = float(delta[b, t, e]) * float(x[b, t, e])
                acc = 0.0
                for n in range(n_state):
                    hv = abar[b, t, e, n] * h[e, n] + p1[b, t, e, n] * dx * bmat[b, t, n]
                    h[e, n] = hv
                    hs[b, t, e, n] = hv
                    acc += cmat[b, t, n] * hv
                y[b, t, e] = acc


@njit(cache=True)
def _scan_bwd_kernel(g, x, delta, bmat, cmat, a, abar, p1, p1g, hs,
                     gx, gdelta, gb, gc, ga):  # pragma: no cover - jitted
    bsz, seq, e_dim = x.shape
    n_state = a.shape[1]
    for b in range(bsz):
        gh = np.zeros((e_dim, n_state), dtype=np.float64)
        for t in range(seq - 1, -1, -1):
            for e in range(e_dim):
                d = float(delta[b, t, e])
                xv = float(x[b, t, e])
                gyv = float(g[b, t, e])
                gx_acc = 0.0
                gd_acc = 0.0
                for n in range(n_state):
                    ab = abar[b, t, e, n]
                    pv = p1[b, t, e, n]
                    pg = p1g[b, t, e, n]
                    h_prev = hs[b, t - 1, e, n] if t > 0 else 0.0
                    ghv = gh[e, n] + gyv * cmat[b, t, n]
                    gc[b, t, n] += gyv * hs[b, t, e, n]
                    bx = bmat[b, t, n] * xv
                    gz = ghv * (h_prev * ab + pg * d * bx)
                    gd_acc += gz * a[e, n] + ghv * pv * bx
                    ga[e, n] += gz * d
                    gb[b, t, n] += ghv * pv * d * xv
                    gx_acc += ghv * pv * d * bmat[b, t, n]
                    gh[e, n] = ghv * ab
                gx[b, t, e] = gx_acc
                gdelta[b, t, e] = gd_acc


def _scan_forward_arrays(x, delta, bmat, cmat, a):
    """Sequential recurrence; returns outputs y and the state history."""
    y = np.empty_like(x)
    hs = np.empty(x.shape + (a.shape[1],), dtype=x.dtype)
    abar, p1, _ = _zoh_terms(delta, a)
    if HAVE_NUMBA:
        _scan_fwd_kernel(x, delta, bmat, cmat, abar, p1, y, hs)
        return y, hs
    bsz, seq, e_dim = x.shape
    u = p1 * delta[:, :, :, None] * bmat[:, :, None, :] * x[:, :, :, None]
    h = np.zeros((bsz, e_dim, a.shape[1]), dtype=x.dtype)
    for t in range(seq):
        h = abar[:, t] * h + u[:, t]
        hs[:, t] = h
    np.einsum("blen,bln->ble", hs, cmat, out=y)
    return y, hs


def _scan_backward_arrays(g, x, delta, bmat, cmat, a, hs):
    """Reverse pass of the recurrence; recomputes the ZOH terms."""
    gx = np.zeros_like(x)
    gdelta = np.zeros_like(delta)
    gb = np.zeros_like(bmat)
    gc = np.zeros_like(cmat)
    ga = np.zeros_like(a)
    abar, p1, p1g = _zoh_terms(delta, a, with_grad=True)
    if HAVE_NUMBA:
        _scan_bwd_kernel(g, x, delta, bmat, cmat, a, abar, p1, p1g, hs,
                         gx, gdelta, gb, gc, ga)
        return gx, gdelta, gb, gc, ga
    bsz, seq, e_dim = x.shape
    # gh[t] = g_y[t] . c[t] + abar[t+1] * gh[t+1] is the only recurrence.
    ghs = np.empty_like(hs)
    gh = g[:, seq - 1, :, None] * cmat[:, seq - 1, None, :]
    ghs[:, seq - 1] = gh
    for t in range(seq - 2, -1, -1):
        gh = g[:, t, :, None] * cmat[:, t, None, :] + abar[:, t + 1] * gh
        ghs[:, t] = gh
    h_prev = np.empty_like(hs)
    h_prev[:, 0] = 0.0
    h_prev[:, 1:] = hs[:, :-1]
    d_col = delta[:, :, :, None]
    bx = bmat[:, :, None, :] * x[:, :, :, None]
    gz = ghs * (h_prev * abar + p1g * d_col * bx)
    gu_direct = ghs * p1
    gc += np.einsum("ble,blen->bln", g, hs)
    gdelta += (gz * a).sum(axis=-1) + (gu_direct * bx).sum(axis=-1)
    ga += (gz * d_col).sum(axis=(0, 1))
    gb += (gu_direct * d_col * x[:, :, :, None]).sum(axis=2)
    gx += (gu_direct * d_col * bmat[:, :, None, :]).sum(axis=-1)
    return gx, gdelta, gb, gc, ga


def selective_scan(x: Tensor, delta: Tensor, bmat: Tensor, cmat: Tensor,
                   a_diag: Tensor, skip_d: Tensor | None,
                   direction: ScanDirection = ScanDirection.FORWARD) -> Tensor:
    """Run the discrete recurrence over a (B, L, E) stream.

    BACKWARD scans the reversed sequence and re-reverses its output, so
    reverse(scan(reverse(x), FORWARD)) == scan(x, BACKWARD) exactly.
    """
    bsz, seq, e_dim = x.shape
    n_state = a_diag.shape[-1]
    if delta.shape != x.shape:
        raise ShapeError(f"delta shape {delta.shape} != x shape {x.shape}")
    if bmat.shape != (bsz, seq, n_state) or cmat.shape != (bsz, seq, n_state):
        raise ShapeError("bmat/cmat must be (B, L, N)")
    if a_diag.shape != (e_dim, n_state):
        raise ShapeError(f"a_diag must be (E, N), got {a_diag.shape}")

    rev = direction is ScanDirection.BACKWARD
    flip = (lambda arr: np.ascontiguousarray(arr[:, ::-1])) if rev else (lambda arr: arr)
    xd, dd, bd, cd = flip(x.data), flip(delta.data), flip(bmat.data), flip(cmat.data)
    y, hs = _scan_forward_arrays(xd, dd, bd, cd, a_diag.data)
    if skip_d is not None:
        y = y + skip_d.data * xd
    # State history is kept for the reverse pass; wrapping it keeps the
    # live-byte accounting honest about scan activations.
    saved = Tensor(hs)

    inputs = (x, delta, bmat, cmat, a_diag) + ((skip_d,) if skip_d is not None else ())

    def grad_fn(g):
        gd = flip(g)
        gx, gdelta, gb, gc, ga = _scan_backward_arrays(
            gd, xd, dd, bd, cd, a_diag.data, saved.data)
        if skip_d is not None:
            gskip = (gd * xd).sum(axis=(0, 1))
            gx = gx + gd * skip_d.data
        grads = (flip(gx), flip(gdelta), flip(gb), flip(gc), ga)
        if skip_d is not None:
            grads = grads + (gskip,)
        return grads

    return tn.register_op(flip(y), inputs, grad_fn)


@njit(cache=True)
def _conv_fwd_kernel(x, w, y):  # pragma: no cover - jitted
    bsz, seq, e_dim = x.shape
    k = w.shape[1]
    for b in range(bsz):
        for t in range(seq):
            for e in range(e_dim):
                acc = 0.0
                for j in range(k):
                    s = t - (k - 1) + j
                    if s >= 0:
                        acc += w[e, j] * x[b, s, e]
                y[b, t, e] = acc


@njit(cache=True)
def _conv_bwd_kernel(g, x, w, gx, gw):  # pragma: no cover - jitted
    bsz, seq, e_dim = x.shape
    k = w.shape[1]
    for b in range(bsz):
        for t in range(seq):
            for e in range(e_dim):
                gv = g[b, t, e]
                for j in range(k):
                    s = t - (k - 1) + j
                    if s >= 0:
                        gx[b, s, e] += w[e, j] * gv
                        gw[e, j] += x[b, s, e] * gv


def causal_conv(x: Tensor, kernel: Tensor, direction: ScanDirection) -> Tensor:
    """Depthwise causal convolution along L; anticausal for BACKWARD."""
    bsz, seq, e_dim = x.shape
    k = kernel.shape[1]
    if kernel.shape[0] != e_dim:
        raise ShapeError(f"conv kernel channels {kernel.shape[0]} != {e_dim}")
    if not HAVE_NUMBA:
        return _causal_conv_composed(x, kernel, direction)
    rev = direction is ScanDirection.BACKWARD
    flip = (lambda arr: np.ascontiguousarray(arr[:, ::-1])) if rev else (lambda arr: arr)
    xd = flip(x.data)
    y = np.empty_like(xd)
    _conv_fwd_kernel(xd, kernel.data, y)

    def grad_fn(g):
        gx = np.zeros_like(xd)
        gw = np.zeros_like(kernel.data)
        _conv_bwd_kernel(flip(g), xd, kernel.data, gx, gw)
        return flip(gx), gw

    return tn.register_op(flip(y), (x, kernel), grad_fn)


def _causal_conv_composed(x: Tensor, kernel: Tensor, direction: ScanDirection) -> Tensor:
    bsz, seq, e_dim = x.shape
    k = kernel.shape[1]
    if direction is ScanDirection.BACKWARD:
        x = tn.flip_axis(x, 1)
    pad = Tensor(np.zeros((bsz, k - 1, e_dim), dtype=x.data.dtype))
    xp = tn.concat([pad, x], axis=1)
    acc = None
    for j in range(k):
        seg = tn.slice_axis(xp, 1, j, j + seq)
        w_j = tn.reshape(tn.slice_axis(kernel, 1, j, j + 1), (e_dim,))
        term = tn.mul(seg, w_j)
        acc = term if acc is None else tn.add(acc, term)
    if direction is ScanDirection.BACKWARD:
        acc = tn.flip_axis(acc, 1)
    return acc


def mamba_block(values: Tensor, params: SsmParams) -> Tensor:
    """One bidirectional block: norm, expand, conv+scan per direction,
    SiLU gating, sum of directions, project back to model width."""
    if values.shape[1] < 1:
        raise ShapeError("block needs at least one token")
    xn = tn.layernorm(values, params.norm_gain, params.norm_bias)
    xe = tn.matmul(xn, params.in_w)
    gate = tn.silu(tn.matmul(xn, params.gate_w))
    total = None
    for dirp, direction in ((params.fwd, ScanDirection.FORWARD),
                            (params.bwd, ScanDirection.BACKWARD)):
        xc = tn.silu(causal_conv(xe, dirp.conv_kernel, direction))
        delta, bmat, cmat = parameterize(xc, dirp)
        a_diag = tn.neg(tn.exp(dirp.a_log))
        skip = dirp.skip_d if params.use_skip else None
        y = selective_scan(xc, delta, bmat, cmat, a_diag, skip, direction)
        contrib = tn.mul(y, gate)
        total = contrib if total is None else tn.add(total, contrib)
    return tn.matmul(total, params.out_w)
