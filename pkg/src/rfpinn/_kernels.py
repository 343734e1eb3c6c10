"""Fused numba kernels for the hot jet operations.

The polynomial convolution and its adjoints are memory-bound; fusing them
into single passes avoids the temporary arrays numpy would allocate per
term. All loops are sequential with a fixed iteration order, so results
are bit-reproducible run to run.
"""

from __future__ import annotations

import math

import numba as nb
import numpy as np

_JIT = dict(cache=True, fastmath=False)

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)
_INV_SQRT_2 = 1.0 / math.sqrt(2.0)

_allocator_tuned = False


def tune_allocator():
    """Keep megabyte-scale buffers on the heap so they get recycled.

    Training allocates many same-sized coefficient blocks per iteration;
    glibc would otherwise mmap/munmap each one, paying page faults on every
    first touch. Safe to call repeatedly; silently does nothing when the
    C library is not glibc.
    """
    global _allocator_tuned
    if _allocator_tuned:
        return
    _allocator_tuned = True
    try:
        import ctypes
        libc = ctypes.CDLL("libc.so.6", use_errno=True)
        libc.mallopt(-3, 1 << 25)     # M_MMAP_THRESHOLD = 32 MB
        libc.mallopt(-1, 1 << 27)     # M_TRIM_THRESHOLD: keep freed heap
    except Exception:
        pass


@nb.njit(**_JIT)
def gelu_table(x, out):
    """f..f''' of x*Phi(x) in one pass; out has shape (4, M)."""
    for m in range(x.size):
        v = x[m]
        cdf = 0.5 * (1.0 + math.erf(v * _INV_SQRT_2))
        pdf = _INV_SQRT_2PI * math.exp(-0.5 * v * v)
        v2 = v * v
        out[0, m] = v * cdf
        out[1, m] = cdf + v * pdf
        out[2, m] = (2.0 - v2) * pdf
        out[3, m] = (v2 - 4.0) * (v * pdf)


@nb.njit(**_JIT)
def tanh_table(x, out):
    for m in range(x.size):
        t = math.tanh(x[m])
        s = 1.0 - t * t
        out[0, m] = t
        out[1, m] = s
        out[2, m] = -2.0 * t * s
        out[3, m] = s * (6.0 * t * t - 2.0)


@nb.njit(**_JIT)
def silu_table(x, out):
    for m in range(x.size):
        v = x[m]
        s = 1.0 / (1.0 + math.exp(-v))
        d1 = s * (1.0 - s)
        d2 = d1 * (1.0 - 2.0 * s)
        d3 = d2 * (1.0 - 2.0 * s) - 2.0 * d1 * d1
        out[0, m] = v * s
        out[1, m] = v * d1 + s
        out[2, m] = v * d2 + 2.0 * d1
        out[3, m] = v * d3 + 3.0 * d2


ACTIVATION_TABLES = {"gelu": gelu_table, "tanh": tanh_table,
                     "silu": silu_table}


def activation_table(kind, values):
    """Stacked f..f''' arrays for an order-2 composition, fused per point."""
    fn = ACTIVATION_TABLES[kind]
    flat = np.ascontiguousarray(values).reshape(-1)
    out = np.empty((4, flat.size))
    fn(flat, out)
    return out.reshape((4,) + values.shape)


@nb.njit(**_JIT)
def poly_mul(a, b, tri, first, out):
    """out[k] = sum a[i] * b[j] over the (k, i, j) triple table; (C, M).

    Term-outer, element-inner loops keep each pass a contiguous fused
    multiply-add that the compiler can vectorize. The first term hitting an
    output row assigns, so `out` may be uninitialized.
    """
    M = a.shape[1]
    T = tri.shape[0]
    for t in range(T):
        k, i, j = tri[t, 0], tri[t, 1], tri[t, 2]
        if first[t, 0]:
            for m in range(M):
                out[k, m] = a[i, m] * b[j, m]
        else:
            for m in range(M):
                out[k, m] += a[i, m] * b[j, m]


@nb.njit(**_JIT)
def poly_mul_adjoint(g, a, b, tri, first, ga, gb, init_a, init_b):
    """Both operand adjoints of the convolution.

    init_* marks uninitialized buffers: first contributions assign.
    """
    M = a.shape[1]
    T = tri.shape[0]
    for t in range(T):
        k, i, j = tri[t, 0], tri[t, 1], tri[t, 2]
        if init_a and first[t, 1]:
            for m in range(M):
                ga[i, m] = b[j, m] * g[k, m]
        else:
            for m in range(M):
                ga[i, m] += b[j, m] * g[k, m]
        if init_b and first[t, 2]:
            for m in range(M):
                gb[j, m] = a[i, m] * g[k, m]
        else:
            for m in range(M):
                gb[j, m] += a[i, m] * g[k, m]


@nb.njit(**_JIT)
def poly_mul_adjoint_left(g, b, tri, first, ga, init):
    """Adjoint for the left operand only (right operand constant)."""
    M = b.shape[1]
    T = tri.shape[0]
    for t in range(T):
        k, i, j = tri[t, 0], tri[t, 1], tri[t, 2]
        if init and first[t, 1]:
            for m in range(M):
                ga[i, m] = b[j, m] * g[k, m]
        else:
            for m in range(M):
                ga[i, m] += b[j, m] * g[k, m]


@nb.njit(**_JIT)
def compose_axpy2(d1, d2h, delta, delta2, out):
    """out = d1*delta + d2h*delta^2 with per-point factors d (shape (M,))."""
    C, M = delta.shape
    for c in range(C):
        for m in range(M):
            out[c, m] = d1[m] * delta[c, m] + d2h[m] * delta2[c, m]


@nb.njit(**_JIT)
def compose2_pair_lap(c, d0, d1, d2, d3, nfirst, nsecond, fwd, fp):
    """Fused order-2 composition of f and f' on a mixed-free spatial layout.

    Component layout: value, nfirst first derivatives, then the pure second
    derivatives of the first nsecond variables. The nilpotent square then
    only touches the pure-second slots, so everything unrolls into
    straight-line vectorizable code.
    """
    C, M = c.shape
    for m in range(M):
        f1 = d1[m]
        f2 = d2[m]
        f2h = 0.5 * f2
        f3h = 0.5 * d3[m]
        fwd[0, m] = d0[m]
        fp[0, m] = f1
        for v in range(nfirst):
            c1 = c[1 + v, m]
            fwd[1 + v, m] = f1 * c1
            fp[1 + v, m] = f2 * c1
        for v in range(nsecond):
            c1 = c[1 + v, m]
            sq = c1 * c1
            c2 = c[1 + nfirst + v, m]
            fwd[1 + nfirst + v, m] = f1 * c2 + f2h * sq
            fp[1 + nfirst + v, m] = f2 * c2 + f3h * sq


def compose2_pair(space, flat, d, fwd, fp):
    """Order-2 f/f' composition; fast path for mixed-free spatial layouts."""
    if getattr(space, "lap_layout", None):
        nfirst, nsecond = space.lap_layout
        compose2_pair_lap(flat, d[0], d[1], d[2], d[3], nfirst, nsecond,
                          fwd, fp)
        return
    delta = flat.copy()
    delta[0] = 0.0
    delta2 = np.empty_like(flat)
    poly_mul(delta, delta, space.triples_arr, space.first_arr, delta2)
    compose_axpy2(d[1], 0.5 * d[2], delta, delta2, fwd)
    compose_axpy2(d[2], 0.5 * d[3], delta, delta2, fp)
    fwd[0] += d[0]
    fp[0] += d[1]


def compose3_pair(space, flat, d, fwd, fp):
    """Order-3 f/f' composition (third-derivative carriers for gPINN)."""
    delta = flat.copy()
    delta[0] = 0.0
    delta2 = np.empty_like(flat)
    poly_mul(delta, delta, space.triples_arr, space.first_arr, delta2)
    delta3 = np.empty_like(flat)
    poly_mul(delta2, delta, space.triples_arr, space.first_arr, delta3)
    compose_axpy3(d[1], 0.5 * d[2], d[3] / 6.0, delta, delta2, delta3, fwd)
    compose_axpy3(d[2], 0.5 * d[3], d[4] / 6.0, delta, delta2, delta3, fp)
    fwd[0] += d[0]
    fp[0] += d[1]


@nb.njit(**_JIT)
def compose_axpy3(d1, d2h, d3s, delta, delta2, delta3, out):
    C, M = delta.shape
    for c in range(C):
        for m in range(M):
            out[c, m] = (d1[m] * delta[c, m] + d2h[m] * delta2[c, m]
                         + d3s[m] * delta3[c, m])


def jet_mul(space, a_coef, b_coef):
    """Fused convolution for same-shape coefficient blocks."""
    out = np.empty_like(a_coef)
    C = a_coef.shape[0]
    poly_mul(a_coef.reshape(C, -1), b_coef.reshape(C, -1),
             space.triples_arr, space.first_arr, out.reshape(C, -1))
    return out


def jet_mul_adjoint(space, g, a_coef, b_coef, ga, gb, init_a, init_b):
    C = g.shape[0]
    poly_mul_adjoint(g.reshape(C, -1), a_coef.reshape(C, -1),
                     b_coef.reshape(C, -1), space.triples_arr,
                     space.first_arr, ga.reshape(C, -1), gb.reshape(C, -1),
                     init_a, init_b)


def jet_mul_adjoint_left(space, g, b_coef, ga, init):
    C = g.shape[0]
    poly_mul_adjoint_left(g.reshape(C, -1), b_coef.reshape(C, -1),
                          space.triples_arr, space.first_arr,
                          ga.reshape(C, -1), init)


def jet_compose_pair(space, coef, derivs):
    """Carriers of f(u) and f'(u) in one fused pass (orders 2 and 3)."""
    order = space.order
    C = coef.shape[0]
    shape = coef.shape
    flat = coef.reshape(C, -1)
    M = flat.shape[1]

    def prep(d):
        return np.ascontiguousarray(
            np.broadcast_to(np.asarray(d, dtype=float), shape[1:]).reshape(M))

    d = [prep(v) for v in derivs[: order + 2]]
    fwd = np.empty_like(flat)
    fp = np.empty_like(flat)
    if order == 2:
        compose2_pair(space, flat, d, fwd, fp)
    elif order == 3:
        compose3_pair(space, flat, d, fwd, fp)
    else:
        raise ValueError("fused composition supports orders 2 and 3")
    return fwd.reshape(shape), fp.reshape(shape)


def jet_compose(space, coef, derivs):
    """Taylor composition out = sum_k derivs[k]/k! * delta^k, order <= 3."""
    order = space.order
    C = coef.shape[0]
    shape = coef.shape
    delta = coef.copy()
    delta[0] = 0.0
    flat = delta.reshape(C, -1)
    M = flat.shape[1]
    d0 = np.broadcast_to(np.asarray(derivs[0], dtype=float),
                         shape[1:]).reshape(M)
    if order == 0:
        out = np.zeros(shape)
        out[0] = d0.reshape(shape[1:])
        return out
    if order == 1:
        out = delta * derivs[1]
        out[0] += np.asarray(derivs[0], dtype=float)
        return out
    d1 = np.ascontiguousarray(
        np.broadcast_to(np.asarray(derivs[1], dtype=float),
                        shape[1:]).reshape(M))
    delta2 = np.empty_like(flat)
    poly_mul(flat, flat, space.triples_arr, space.first_arr, delta2)
    d2h = np.ascontiguousarray(
        np.broadcast_to(np.asarray(derivs[2], dtype=float) * 0.5,
                        shape[1:]).reshape(M))
    out = np.empty_like(flat)
    if order == 2:
        compose_axpy2(d1, d2h, flat, delta2, out)
    else:
        delta3 = np.empty_like(flat)
        poly_mul(delta2, flat, space.triples_arr, space.first_arr, delta3)
        d3s = np.ascontiguousarray(
            np.broadcast_to(np.asarray(derivs[3], dtype=float) / 6.0,
                            shape[1:]).reshape(M))
        compose_axpy3(d1, d2h, d3s, flat, delta2, delta3, out)
    out = out.reshape(shape)
    out[0] += np.asarray(derivs[0], dtype=float)
    return out
