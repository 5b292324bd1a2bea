"""Hot numeric kernels with a numba backend and a pure-numpy fallback.

The fused contrastive forward/backward, batch encoding, and the AdamW update
dominate simulator runtime.  Each kernel has two implementations that agree
to floating-point noise; selection is via the ``CPSIM_BACKEND`` environment
variable ("numba", "numpy", or "auto" — the default, which uses numba when
importable).  ``cpsim bench`` compares the two.
"""

from __future__ import annotations

import os

import numpy as np

_EPS_NORM = 1e-12


# ---------------------------------------------------------------------------
# pure-numpy implementations
# ---------------------------------------------------------------------------

def encode_np(X, W, b, gamma, beta):
    """Project, scale/shift, and L2-normalize a batch of feature rows."""
    H = gamma * (X @ W.T + b) + beta
    r = np.sqrt(np.sum(H * H, axis=1)) + _EPS_NORM
    return H / r[:, None]


def forward_np(Xi, Xt, Wi, bi, gi, Bi, Wt, bt, gt, Bt, log_tau):
    """Contrastive loss and per-sample losses; no gradients."""
    Ei = encode_np(Xi, Wi, bi, gi, Bi)
    Et = encode_np(Xt, Wt, bt, gt, Bt)
    n = Ei.shape[0]
    L = (Ei @ Et.T) / np.exp(log_tau)
    Pr = L - L.max(axis=1)[:, None]
    np.exp(Pr, out=Pr)
    Pr /= Pr.sum(axis=1)[:, None]
    Pc = L - L.max(axis=0)[None, :]
    np.exp(Pc, out=Pc)
    Pc /= Pc.sum(axis=0)[None, :]
    diag = np.arange(n)
    per_sample = -0.5 * (np.log(Pr[diag, diag]) + np.log(Pc[diag, diag]))
    return float(per_sample.mean()), per_sample


def forward_backward_np(Xi, Xt, Wi, bi, gi, Bi, Wt, bt, gt, Bt, log_tau):
    n = Xi.shape[0]
    tau = np.exp(log_tau)

    Zi = Xi @ Wi.T + bi
    Hi = gi * Zi + Bi
    r0i = np.sqrt(np.sum(Hi * Hi, axis=1))
    ri = r0i + _EPS_NORM
    Ei = Hi / ri[:, None]

    Zt = Xt @ Wt.T + bt
    Ht = gt * Zt + Bt
    r0t = np.sqrt(np.sum(Ht * Ht, axis=1))
    rt = r0t + _EPS_NORM
    Et = Ht / rt[:, None]

    L = (Ei @ Et.T) / tau
    Pr = L - L.max(axis=1)[:, None]
    np.exp(Pr, out=Pr)
    Pr /= Pr.sum(axis=1)[:, None]
    Pc = L - L.max(axis=0)[None, :]
    np.exp(Pc, out=Pc)
    Pc /= Pc.sum(axis=0)[None, :]
    diag = np.arange(n)
    per_sample = -0.5 * (np.log(Pr[diag, diag]) + np.log(Pc[diag, diag]))
    loss = float(per_sample.mean())

    G = (Pr + Pc) / (2.0 * n)
    G[diag, diag] -= 1.0 / n
    dlog_tau = float(-np.sum(G * L))
    dS = G / tau

    dEi = dS @ Et
    dEt = dS.T @ Ei
    dHi = dEi / ri[:, None] - Hi * (np.sum(Hi * dEi, axis=1) / (ri * ri * r0i))[:, None]
    dHt = dEt / rt[:, None] - Ht * (np.sum(Ht * dEt, axis=1) / (rt * rt * r0t))[:, None]

    dgi = np.sum(dHi * Zi, axis=0)
    dBi = np.sum(dHi, axis=0)
    dZi = dHi * gi
    dWi = dZi.T @ Xi
    dbi = np.sum(dZi, axis=0)

    dgt = np.sum(dHt * Zt, axis=0)
    dBt = np.sum(dHt, axis=0)
    dZt = dHt * gt
    dWt = dZt.T @ Xt
    dbt = np.sum(dZt, axis=0)

    return loss, per_sample, dWi, dbi, dgi, dBi, dWt, dbt, dgt, dBt, dlog_tau


def adamw_np(p, g, m, v, t, lr, beta1, beta2, eps, weight_decay):
    """One decoupled-weight-decay Adam update, in place on p/m/v."""
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * (g * g)
    mhat = m / (1.0 - beta1 ** t)
    vhat = v / (1.0 - beta2 ** t)
    p -= lr * (mhat / (np.sqrt(vhat) + eps) + weight_decay * p)


# ---------------------------------------------------------------------------
# numba implementations (loop style; installed numba lacks axis reductions)
# ---------------------------------------------------------------------------

try:
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:
    _HAVE_NUMBA = False

if _HAVE_NUMBA:

    @njit(cache=True)
    def encode_nb(X, W, b, gamma, beta):
        n = X.shape[0]
        d = W.shape[0]
        Z = X @ W.T
        E = np.empty((n, d))
        for i in range(n):
            s = 0.0
            for k in range(d):
                h = gamma[k] * (Z[i, k] + b[k]) + beta[k]
                E[i, k] = h
                s += h * h
            r = np.sqrt(s) + _EPS_NORM
            for k in range(d):
                E[i, k] /= r
        return E

    @njit(cache=True)
    def _softmaxes_nb(L):
        n = L.shape[0]
        Pr = np.empty((n, n))
        Pc = np.empty((n, n))
        for i in range(n):
            m = L[i, 0]
            for j in range(1, n):
                if L[i, j] > m:
                    m = L[i, j]
            s = 0.0
            for j in range(n):
                e = np.exp(L[i, j] - m)
                Pr[i, j] = e
                s += e
            for j in range(n):
                Pr[i, j] /= s
        for j in range(n):
            m = L[0, j]
            for i in range(1, n):
                if L[i, j] > m:
                    m = L[i, j]
            s = 0.0
            for i in range(n):
                e = np.exp(L[i, j] - m)
                Pc[i, j] = e
                s += e
            for i in range(n):
                Pc[i, j] /= s
        return Pr, Pc

    @njit(cache=True)
    def forward_nb(Xi, Xt, Wi, bi, gi, Bi, Wt, bt, gt, Bt, log_tau):
        Ei = encode_nb(Xi, Wi, bi, gi, Bi)
        Et = encode_nb(Xt, Wt, bt, gt, Bt)
        n = Ei.shape[0]
        L = (Ei @ Et.T) / np.exp(log_tau)
        Pr, Pc = _softmaxes_nb(L)
        per_sample = np.empty(n)
        total = 0.0
        for i in range(n):
            ps = -0.5 * (np.log(Pr[i, i]) + np.log(Pc[i, i]))
            per_sample[i] = ps
            total += ps
        return total / n, per_sample

    @njit(cache=True)
    def forward_backward_nb(Xi, Xt, Wi, bi, gi, Bi, Wt, bt, gt, Bt, log_tau):
        n, _ = Xi.shape
        d = Wi.shape[0]
        tau = np.exp(log_tau)

        Zi = Xi @ Wi.T
        Zt = Xt @ Wt.T
        Hi = np.empty((n, d))
        Ht = np.empty((n, d))
        Ei = np.empty((n, d))
        Et = np.empty((n, d))
        r0i = np.empty(n)
        r0t = np.empty(n)
        ri = np.empty(n)
        rt = np.empty(n)
        for i in range(n):
            si = 0.0
            st = 0.0
            for k in range(d):
                Zi[i, k] += bi[k]
                Zt[i, k] += bt[k]
                hi = gi[k] * Zi[i, k] + Bi[k]
                ht = gt[k] * Zt[i, k] + Bt[k]
                Hi[i, k] = hi
                Ht[i, k] = ht
                si += hi * hi
                st += ht * ht
            r0i[i] = np.sqrt(si)
            r0t[i] = np.sqrt(st)
            ri[i] = r0i[i] + _EPS_NORM
            rt[i] = r0t[i] + _EPS_NORM
            for k in range(d):
                Ei[i, k] = Hi[i, k] / ri[i]
                Et[i, k] = Ht[i, k] / rt[i]

        L = (Ei @ Et.T) / tau
        Pr, Pc = _softmaxes_nb(L)
        per_sample = np.empty(n)
        total = 0.0
        for i in range(n):
            ps = -0.5 * (np.log(Pr[i, i]) + np.log(Pc[i, i]))
            per_sample[i] = ps
            total += ps
        loss = total / n

        G = np.empty((n, n))
        dlog_tau = 0.0
        inv2n = 1.0 / (2.0 * n)
        for i in range(n):
            for j in range(n):
                g = (Pr[i, j] + Pc[i, j]) * inv2n
                if i == j:
                    g -= 2.0 * inv2n
                G[i, j] = g
                dlog_tau -= g * L[i, j]
        dS = G / tau

        dEi = dS @ Et
        dEt = dS.T @ Ei
        dHi = np.empty((n, d))
        dHt = np.empty((n, d))
        for i in range(n):
            doti = 0.0
            dott = 0.0
            for k in range(d):
                doti += Hi[i, k] * dEi[i, k]
                dott += Ht[i, k] * dEt[i, k]
            ci = doti / (ri[i] * ri[i] * r0i[i])
            ct = dott / (rt[i] * rt[i] * r0t[i])
            for k in range(d):
                dHi[i, k] = dEi[i, k] / ri[i] - Hi[i, k] * ci
                dHt[i, k] = dEt[i, k] / rt[i] - Ht[i, k] * ct

        dgi = np.zeros(d)
        dBi = np.zeros(d)
        dgt = np.zeros(d)
        dBt = np.zeros(d)
        dbi = np.zeros(d)
        dbt = np.zeros(d)
        dZi = np.empty((n, d))
        dZt = np.empty((n, d))
        for i in range(n):
            for k in range(d):
                dgi[k] += dHi[i, k] * Zi[i, k]
                dBi[k] += dHi[i, k]
                dgt[k] += dHt[i, k] * Zt[i, k]
                dBt[k] += dHt[i, k]
                dZi[i, k] = dHi[i, k] * gi[k]
                dZt[i, k] = dHt[i, k] * gt[k]
                dbi[k] += dZi[i, k]
                dbt[k] += dZt[i, k]
        dWi = dZi.T @ Xi
        dWt = dZt.T @ Xt

        return loss, per_sample, dWi, dbi, dgi, dBi, dWt, dbt, dgt, dBt, dlog_tau

    @njit(cache=True)
    def adamw_nb(p, g, m, v, t, lr, beta1, beta2, eps, weight_decay):
        flat_p = p.ravel()
        flat_g = g.ravel()
        flat_m = m.ravel()
        flat_v = v.ravel()
        c1 = 1.0 - beta1 ** t
        c2 = 1.0 - beta2 ** t
        for idx in range(flat_p.size):
            flat_m[idx] = beta1 * flat_m[idx] + (1.0 - beta1) * flat_g[idx]
            flat_v[idx] = beta2 * flat_v[idx] + (1.0 - beta2) * flat_g[idx] * flat_g[idx]
            mhat = flat_m[idx] / c1
            vhat = flat_v[idx] / c2
            flat_p[idx] -= lr * (mhat / (np.sqrt(vhat) + eps) + weight_decay * flat_p[idx])


def _select_backend() -> str:
    requested = os.environ.get("CPSIM_BACKEND", "auto").lower()
    if requested not in ("auto", "numba", "numpy"):
        raise ValueError(f"CPSIM_BACKEND must be auto|numba|numpy, got {requested!r}")
    if requested == "numpy":
        return "numpy"
    if not _HAVE_NUMBA:
        if requested == "numba":
            raise ImportError("CPSIM_BACKEND=numba but numba is not installed")
        return "numpy"
    return "numba"


BACKEND = _select_backend()

numpy_impls = {
    "encode": encode_np,
    "forward": forward_np,
    "forward_backward": forward_backward_np,
    "adamw_update": adamw_np,
}

if BACKEND == "numba":
    encode = encode_nb
    forward = forward_nb
    forward_backward = forward_backward_nb
    adamw_update = adamw_nb
else:
    encode = encode_np
    forward = forward_np
    forward_backward = forward_backward_np
    adamw_update = adamw_np


def numba_impls():
    """Numba kernels regardless of the selected backend (for parity checks)."""
    if not _HAVE_NUMBA:
        raise ImportError("numba is not installed")
    return {
        "encode": encode_nb,
        "forward": forward_nb,
        "forward_backward": forward_backward_nb,
        "adamw_update": adamw_nb,
    }
