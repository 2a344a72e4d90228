"""Hot loops of the integrator: many Heun substeps with a fixed generator.

Two implementations share one contract:

* ``heun_interval(M, x, n_sub, dt)`` advances every row of ``x`` (shape (b, n))
  by ``n_sub`` Heun steps of dx/dt = M[r] x, with M of shape (b, n, n).
* ``heun_interval_vjp(M, x0, g_out, n_sub, dt)`` returns the adjoints of the
  start state and of M for an upstream adjoint ``g_out`` on the end state.  The
  intermediate states are recomputed, so nothing per substep is kept between the
  forward and backward passes.

The numba versions are used unless numba is missing or the environment variable
``DIFFQC_DISABLE_NUMBA`` is set to a non-empty value other than ``0``.
"""
from __future__ import annotations

import os

import numpy as np


def heun_interval_numpy(M, x, n_sub, dt):
    cur = np.array(x, dtype=np.float64)
    half = 0.5 * dt
    for _ in range(n_sub):
        k1 = np.matmul(M, cur[:, :, None])[:, :, 0]
        y = cur + dt * k1
        k2 = np.matmul(M, y[:, :, None])[:, :, 0]
        cur = cur + half * (k1 + k2)
    return cur


def heun_interval_vjp_numpy(M, x0, g_out, n_sub, dt):
    half = 0.5 * dt
    xs = [np.array(x0, dtype=np.float64)]
    for _ in range(n_sub - 1):
        cur = xs[-1]
        k1 = np.matmul(M, cur[:, :, None])[:, :, 0]
        y = cur + dt * k1
        k2 = np.matmul(M, y[:, :, None])[:, :, 0]
        xs.append(cur + half * (k1 + k2))
    Mt = np.swapaxes(M, 1, 2)
    g = np.array(g_out, dtype=np.float64)
    gM = np.zeros_like(M)
    for j in range(n_sub - 1, -1, -1):
        x = xs[j]
        k1 = np.matmul(M, x[:, :, None])[:, :, 0]
        y = x + dt * k1
        g_k = half * g
        # k2 = M y
        gM += g_k[:, :, None] * y[:, None, :]
        g_y = np.matmul(Mt, g_k[:, :, None])[:, :, 0]
        # y = x + dt k1 ; k1 = M x
        g_k1 = g_k + dt * g_y
        gM += g_k1[:, :, None] * x[:, None, :]
        g = g + g_y + np.matmul(Mt, g_k1[:, :, None])[:, :, 0]
    return g, gM


def _numba_disabled() -> bool:
    flag = os.environ.get("DIFFQC_DISABLE_NUMBA", "")
    return flag not in ("", "0")


try:
    import numba as nb
except ImportError:  # pragma: no cover - numba is a declared dependency
    nb = None


if nb is not None:

    @nb.njit(cache=True, nogil=True)
    def _transpose_into(A, out):
        n = A.shape[0]
        for i in range(n):
            for j in range(n):
                out[j, i] = A[i, j]

    @nb.njit(cache=True, nogil=True)
    def _matvec_t(A, v, out):
        # out = A^T v as a sum of scaled rows: the inner loop is contiguous and
        # vectorizes, and each out[i] still accumulates in j order
        n = v.shape[0]
        for i in range(n):
            out[i] = 0.0
        for j in range(n):
            vj = v[j]
            for i in range(n):
                out[i] += A[j, i] * vj

    @nb.njit(cache=True, nogil=True)
    def heun_interval_numba(M, x, n_sub, dt):
        b, n = x.shape
        out = np.empty((b, n))
        cur = np.empty(n)
        k1 = np.empty(n)
        k2 = np.empty(n)
        y = np.empty(n)
        At = np.empty((n, n))
        half = 0.5 * dt
        for r in range(b):
            _transpose_into(M[r], At)
            for i in range(n):
                cur[i] = x[r, i]
            for _ in range(n_sub):
                _matvec_t(At, cur, k1)
                for i in range(n):
                    y[i] = cur[i] + dt * k1[i]
                _matvec_t(At, y, k2)
                for i in range(n):
                    cur[i] = cur[i] + half * (k1[i] + k2[i])
            for i in range(n):
                out[r, i] = cur[i]
        return out

    @nb.njit(cache=True, nogil=True)
    def heun_interval_vjp_numba(M, x0, g_out, n_sub, dt):
        b, n = x0.shape
        g_x = np.empty((b, n))
        gM = np.zeros((b, n, n))
        xs = np.empty((n_sub, n))
        k1 = np.empty(n)
        k2 = np.empty(n)
        y = np.empty(n)
        g = np.empty(n)
        g_k = np.empty(n)
        g_k1 = np.empty(n)
        g_y = np.empty(n)
        tmp = np.empty(n)
        At = np.empty((n, n))
        half = 0.5 * dt
        for r in range(b):
            A = M[r]
            _transpose_into(A, At)
            for i in range(n):
                xs[0, i] = x0[r, i]
            for j in range(n_sub - 1):
                _matvec_t(At, xs[j], k1)
                for i in range(n):
                    y[i] = xs[j, i] + dt * k1[i]
                _matvec_t(At, y, k2)
                for i in range(n):
                    xs[j + 1, i] = xs[j, i] + half * (k1[i] + k2[i])
            for i in range(n):
                g[i] = g_out[r, i]
            for j in range(n_sub - 1, -1, -1):
                _matvec_t(At, xs[j], k1)
                for i in range(n):
                    y[i] = xs[j, i] + dt * k1[i]
                    g_k[i] = half * g[i]
                for p in range(n):
                    gp = g_k[p]
                    for q in range(n):
                        gM[r, p, q] += gp * y[q]
                _matvec_t(A, g_k, g_y)
                for i in range(n):
                    g_k1[i] = g_k[i] + dt * g_y[i]
                for p in range(n):
                    gp = g_k1[p]
                    for q in range(n):
                        gM[r, p, q] += gp * xs[j, q]
                _matvec_t(A, g_k1, tmp)
                for i in range(n):
                    g[i] = g[i] + g_y[i] + tmp[i]
            for i in range(n):
                g_x[r, i] = g[i]
        return g_x, gM


USE_NUMBA = nb is not None and not _numba_disabled()

if USE_NUMBA:
    def heun_interval(M, x, n_sub, dt):
        return heun_interval_numba(
            np.ascontiguousarray(M, dtype=np.float64), np.ascontiguousarray(x, dtype=np.float64), int(n_sub), float(dt)
        )

    def heun_interval_vjp(M, x0, g_out, n_sub, dt):
        return heun_interval_vjp_numba(
            np.ascontiguousarray(M, dtype=np.float64),
            np.ascontiguousarray(x0, dtype=np.float64),
            np.ascontiguousarray(g_out, dtype=np.float64),
            int(n_sub),
            float(dt),
        )
else:
    heun_interval = heun_interval_numpy
    heun_interval_vjp = heun_interval_vjp_numpy


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"
