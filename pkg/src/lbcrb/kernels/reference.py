"""NumPy reference implementations of the hot kernels.

Every function here has a twin in ``_native`` (Cython).  The two backends
must agree to float rounding; ``tests/test_kernels.py`` enforces that.
Shapes follow the network block convention:

    primal activations   (B, n)     batch-major
    tangent activations  (T, B, n)  one slab per differentiation direction
    broadcast tangents   (T, n)     row vectors shared across the batch

All arrays are float64 and C-contiguous.
"""

import numpy as np
from scipy.special import expit


def sigmoid(x):
    return expit(x)


# ---------------------------------------------------------------------------
# Swish activation: y = g * sigmoid(g)
# ---------------------------------------------------------------------------

def swish_fwd(g):
    """Returns (y, sig) with sig cached for the backward pass."""
    sig = expit(g)
    return g * sig, sig


def swish_jvp(g, sig, dg):
    """Tangent of swish: dy_t = phi'(g) * dg_t with phi' = sig*(1 + g*(1-sig))."""
    return (sig * (1.0 + g * (1.0 - sig)))[None] * dg


def swish_bwd(g, sig, dg, ybar, dybar):
    """Adjoints of (y, dy) w.r.t. (g, dg).

    gbar  = ybar * phi'(g) + sum_t dybar_t * phi''(g) * dg_t
    dgbar = dybar * phi'(g)
    with phi'' = sig*(1-sig)*(2 + g*(1-2*sig)).
    """
    d1 = sig * (1.0 + g * (1.0 - sig))
    gbar = ybar * d1
    dgbar = None
    if dg is not None:
        d2 = sig * (1.0 - sig) * (2.0 + g * (1.0 - 2.0 * sig))
        gbar = gbar + d2 * np.einsum("tbn,tbn->bn", dybar, dg)
        dgbar = dybar * d1[None]
    return gbar, dgbar


# ---------------------------------------------------------------------------
# Parameter injection: h = z * sp + tp  (sp, tp are affine images of theta)
# ---------------------------------------------------------------------------

def inject_fwd(z, sp, tp):
    return z * sp + tp


def inject_jvp(z, dz, sp, dsp, dtp):
    """dh_t = dz_t * sp + z * dsp_t + dtp_t; dsp/dtp are (T, n) rows."""
    dh = z[None] * dsp[:, None, :] + dtp[:, None, :]
    if dz is not None:
        dh += dz * sp[None]
    return dh


def inject_bwd(z, dz, sp, dsp, hbar, dhbar, need_dzbar):
    """Adjoints of (h, dh).  tpbar equals hbar and is not returned.

    Returns (zbar, dzbar, spbar, dspbar, dtpbar); dspbar/dtpbar are the
    batch-summed (T, n) adjoints of the broadcast tangent rows.
    """
    if dhbar is None:
        return hbar * sp, None, hbar * z, None, None
    zbar = hbar * sp + np.einsum("tbn,tn->bn", dhbar, dsp)
    spbar = hbar * z
    if dz is not None:
        spbar = spbar + np.einsum("tbn,tbn->bn", dhbar, dz)
    dzbar = dhbar * sp[None] if need_dzbar else None
    dspbar = np.einsum("tbn,bn->tn", dhbar, z)
    dtpbar = dhbar.sum(axis=1)
    return zbar, dzbar, spbar, dspbar, dtpbar


# ---------------------------------------------------------------------------
# Condition injection: g = a * sc  (sc constant w.r.t. theta)
# ---------------------------------------------------------------------------

def scale_fwd(a, sc):
    return a * sc


def scale_jvp(da, sc):
    return da * sc[None]


def scale_bwd(a, da, sc, gbar, dgbar):
    """Adjoints of (g, dg) w.r.t. (a, da, sc)."""
    abar = gbar * sc
    scbar = gbar * a
    dabar = None
    if dgbar is not None:
        dabar = dgbar * sc[None]
        scbar = scbar + np.einsum("tbn,tbn->bn", dgbar, da)
    return abar, dabar, scbar


# ---------------------------------------------------------------------------
# Compensated accumulation
# ---------------------------------------------------------------------------

_KAHAN_BLOCK = 256


def kahan_mean_outer(scores):
    """Mean of s s^T over rows of ``scores`` with compensated summation.

    Rows are reduced in fixed-size blocks (BLAS inside a block, Kahan
    across blocks) so record order perturbs the result only at the
    compensation level, far below 1e-10.
    """
    s = np.ascontiguousarray(scores, dtype=np.float64)
    n, d = s.shape
    total = np.zeros((d, d))
    comp = np.zeros((d, d))
    for start in range(0, n, _KAHAN_BLOCK):
        block = s[start:start + _KAHAN_BLOCK]
        term = block.T @ block - comp
        new_total = total + term
        comp = (new_total - total) - term
        total = new_total
    return total / n


def kahan_colmean(values):
    """Compensated per-column mean of a (N, d) array."""
    v = np.ascontiguousarray(values, dtype=np.float64)
    n, d = v.shape
    total = np.zeros(d)
    comp = np.zeros(d)
    for start in range(0, n, _KAHAN_BLOCK):
        term = v[start:start + _KAHAN_BLOCK].sum(axis=0) - comp
        new_total = total + term
        comp = (new_total - total) - term
        total = new_total
    return total / n


# ---------------------------------------------------------------------------
# AdamW step (decoupled weight decay), in place
# ---------------------------------------------------------------------------

def adamw_update(p, g, m, v, step, lr, beta1, beta2, eps, weight_decay):
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * g * g
    mhat = m / (1.0 - beta1 ** step)
    vhat = v / (1.0 - beta2 ** step)
    if weight_decay != 0.0:
        p *= 1.0 - lr * weight_decay
    p -= lr * mhat / (np.sqrt(vhat) + eps)
