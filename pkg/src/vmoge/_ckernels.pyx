# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled versions of the kernels in ``_kernels_py``.

Signatures and return values match the numpy module exactly; inputs must
be C-contiguous float64 arrays.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, sqrt

cnp.import_array()

BACKEND = "cython"


def conv1d_forward(const double[:, ::1] x, const double[:, ::1] w, const double[::1] b, Py_ssize_t stride):
    cdef Py_ssize_t M = x.shape[0], T = x.shape[1], D = w.shape[0], K = w.shape[1]
    cdef Py_ssize_t L = (T - K) // stride + 1
    out_arr = np.empty((M, L, D))
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t m, l, d, j, base
    cdef double acc
    with nogil:
        for m in range(M):
            for l in range(L):
                base = l * stride
                for d in range(D):
                    acc = b[d]
                    for j in range(K):
                        acc = acc + w[d, j] * x[m, base + j]
                    out[m, l, d] = acc
    return out_arr


def conv1d_backward(const double[:, :, ::1] g, const double[:, ::1] x, const double[:, ::1] w,
                    Py_ssize_t stride, bint need_x=True):
    cdef Py_ssize_t M = x.shape[0], T = x.shape[1], D = w.shape[0], K = w.shape[1]
    cdef Py_ssize_t L = g.shape[1]
    gw_arr = np.zeros((D, K))
    gb_arr = np.zeros(D)
    cdef double[:, ::1] gw = gw_arr
    cdef double[::1] gb = gb_arr
    cdef double[:, ::1] gx
    gx_arr = None
    if need_x:
        gx_arr = np.zeros((M, T))
        gx = gx_arr
    cdef Py_ssize_t m, l, d, j, base
    cdef double gv
    with nogil:
        for m in range(M):
            for l in range(L):
                base = l * stride
                for d in range(D):
                    gv = g[m, l, d]
                    gb[d] += gv
                    for j in range(K):
                        gw[d, j] += gv * x[m, base + j]
                    if need_x:
                        for j in range(K):
                            gx[m, base + j] += gv * w[d, j]
    return gx_arr, gw_arr, gb_arr


def maxpool2_forward(const double[:, :, ::1] x):
    cdef Py_ssize_t M = x.shape[0], L = x.shape[1], D = x.shape[2]
    cdef Py_ssize_t L2 = L // 2
    out_arr = np.empty((M, L2, D))
    idx_arr = np.empty((M, L2, D), dtype=np.int8)
    cdef double[:, :, ::1] out = out_arr
    cdef signed char[:, :, ::1] idx = idx_arr
    cdef Py_ssize_t m, l, d
    cdef double a, c
    with nogil:
        for m in range(M):
            for l in range(L2):
                for d in range(D):
                    a = x[m, 2 * l, d]
                    c = x[m, 2 * l + 1, d]
                    if c > a:
                        out[m, l, d] = c
                        idx[m, l, d] = 1
                    else:
                        out[m, l, d] = a
                        idx[m, l, d] = 0
    return out_arr, idx_arr


def maxpool2_backward(const double[:, :, ::1] g, const signed char[:, :, ::1] idx, Py_ssize_t L):
    cdef Py_ssize_t M = g.shape[0], L2 = g.shape[1], D = g.shape[2]
    gx_arr = np.zeros((M, L, D))
    cdef double[:, :, ::1] gx = gx_arr
    cdef Py_ssize_t m, l, d
    with nogil:
        for m in range(M):
            for l in range(L2):
                for d in range(D):
                    gx[m, 2 * l + idx[m, l, d], d] = g[m, l, d]
    return gx_arr


def layernorm_forward(x_in, const double[::1] gain, const double[::1] bias, double eps):
    shape = x_in.shape
    cdef Py_ssize_t D = shape[len(shape) - 1]
    cdef const double[:, ::1] x = np.ascontiguousarray(x_in).reshape(-1, D)
    cdef Py_ssize_t R = x.shape[0]
    y_arr = np.empty((R, D))
    xhat_arr = np.empty((R, D))
    rstd_arr = np.empty((R, 1))
    cdef double[:, ::1] y = y_arr
    cdef double[:, ::1] xhat = xhat_arr
    cdef double[:, ::1] rstd = rstd_arr
    cdef Py_ssize_t r, d
    cdef double mu, var, t, rs
    with nogil:
        for r in range(R):
            mu = 0.0
            for d in range(D):
                mu = mu + x[r, d]
            mu = mu / D
            var = 0.0
            for d in range(D):
                t = x[r, d] - mu
                var = var + t * t
            var = var / D
            rs = 1.0 / sqrt(var + eps)
            rstd[r, 0] = rs
            for d in range(D):
                t = (x[r, d] - mu) * rs
                xhat[r, d] = t
                y[r, d] = t * gain[d] + bias[d]
    lead = shape[: len(shape) - 1]
    return (y_arr.reshape(shape), xhat_arr.reshape(shape), rstd_arr.reshape(lead + (1,)))


def layernorm_backward(g_in, xhat_in, rstd_in, const double[::1] gain):
    shape = g_in.shape
    cdef Py_ssize_t D = shape[len(shape) - 1]
    cdef const double[:, ::1] g = np.ascontiguousarray(g_in).reshape(-1, D)
    cdef const double[:, ::1] xhat = np.ascontiguousarray(xhat_in).reshape(-1, D)
    cdef const double[::1] rstd = np.ascontiguousarray(rstd_in).reshape(-1)
    cdef Py_ssize_t R = g.shape[0]
    gx_arr = np.empty((R, D))
    ggain_arr = np.zeros(D)
    gbias_arr = np.zeros(D)
    cdef double[:, ::1] gx = gx_arr
    cdef double[::1] ggain = ggain_arr
    cdef double[::1] gbias = gbias_arr
    cdef Py_ssize_t r, d
    cdef double s1, s2, gh
    with nogil:
        for r in range(R):
            s1 = 0.0
            s2 = 0.0
            for d in range(D):
                ggain[d] += g[r, d] * xhat[r, d]
                gbias[d] += g[r, d]
                gh = g[r, d] * gain[d]
                s1 = s1 + gh
                s2 = s2 + gh * xhat[r, d]
            s1 = s1 / D
            s2 = s2 / D
            for d in range(D):
                gx[r, d] = rstd[r] * (g[r, d] * gain[d] - s1 - xhat[r, d] * s2)
    return gx_arr.reshape(shape), ggain_arr, gbias_arr


def mha_forward(const double[:, :, ::1] q, const double[:, :, ::1] k, const double[:, :, ::1] v,
                Py_ssize_t heads):
    cdef Py_ssize_t M = q.shape[0], L = q.shape[1], D = q.shape[2]
    cdef Py_ssize_t dh = D // heads
    cdef double scale = 1.0 / sqrt(<double>dh)
    ctx_arr = np.zeros((M, L, D))
    p_arr = np.empty((M, heads, L, L))
    if M == 0 or L == 0:
        return ctx_arr, p_arr
    cdef double[:, :, ::1] ctx = ctx_arr
    cdef double[:, :, :, ::1] p = p_arr
    cdef Py_ssize_t m, h, i, j, e, off
    cdef double s, tot, pij
    cdef const double *qi
    cdef const double *kb
    cdef const double *vb
    cdef double *pr
    cdef double *ci
    with nogil:
        for m in range(M):
            kb = &k[m, 0, 0]
            for h in range(heads):
                off = h * dh
                for i in range(L):
                    qi = &q[m, i, off]
                    pr = &p[m, h, i, 0]
                    for j in range(L):
                        s = 0.0
                        for e in range(dh):
                            s += qi[e] * kb[j * D + off + e]
                        pr[j] = s * scale
    # the exponential is vectorized far better by numpy than a scalar libm loop
    p_arr -= p_arr.max(axis=-1, keepdims=True)
    np.exp(p_arr, out=p_arr)
    with nogil:
        for m in range(M):
            vb = &v[m, 0, 0]
            for h in range(heads):
                off = h * dh
                for i in range(L):
                    pr = &p[m, h, i, 0]
                    ci = &ctx[m, i, off]
                    tot = 0.0
                    for j in range(L):
                        tot += pr[j]
                    tot = 1.0 / tot
                    for j in range(L):
                        pij = pr[j] * tot
                        pr[j] = pij
                        for e in range(dh):
                            ci[e] += pij * vb[j * D + off + e]
    return ctx_arr, p_arr


def mha_backward(const double[:, :, ::1] g, const double[:, :, ::1] q, const double[:, :, ::1] k,
                 const double[:, :, ::1] v, const double[:, :, :, ::1] p, Py_ssize_t heads):
    cdef Py_ssize_t M = q.shape[0], L = q.shape[1], D = q.shape[2]
    cdef Py_ssize_t dh = D // heads
    cdef double scale = 1.0 / sqrt(<double>dh)
    gq_arr = np.zeros((M, L, D))
    gk_arr = np.zeros((M, L, D))
    gv_arr = np.zeros((M, L, D))
    cdef double[:, :, ::1] gq = gq_arr
    cdef double[:, :, ::1] gk = gk_arr
    cdef double[:, :, ::1] gv = gv_arr
    gp_arr = np.empty(max(L, 1))
    cdef double[::1] gp = gp_arr
    cdef Py_ssize_t m, h, i, j, e, off, jo
    cdef double s, dot, gs, pij
    cdef const double *gi
    cdef const double *qi
    cdef const double *pr
    cdef const double *kb
    cdef const double *vb
    cdef double *gqi
    cdef double *gkb
    cdef double *gvb
    cdef double *gpp = &gp[0]
    if M == 0 or L == 0:
        return gq_arr, gk_arr, gv_arr
    with nogil:
        for m in range(M):
            kb = &k[m, 0, 0]
            vb = &v[m, 0, 0]
            gkb = &gk[m, 0, 0]
            gvb = &gv[m, 0, 0]
            for h in range(heads):
                off = h * dh
                for i in range(L):
                    gi = &g[m, i, off]
                    qi = &q[m, i, off]
                    gqi = &gq[m, i, off]
                    pr = &p[m, h, i, 0]
                    dot = 0.0
                    for j in range(L):
                        jo = j * D + off
                        pij = pr[j]
                        s = 0.0
                        for e in range(dh):
                            s += gi[e] * vb[jo + e]
                            gvb[jo + e] += pij * gi[e]
                        gpp[j] = s
                        dot += s * pij
                    for j in range(L):
                        jo = j * D + off
                        gs = pr[j] * (gpp[j] - dot) * scale
                        for e in range(dh):
                            gqi[e] += gs * kb[jo + e]
                            gkb[jo + e] += gs * qi[e]
    return gq_arr, gk_arr, gv_arr
