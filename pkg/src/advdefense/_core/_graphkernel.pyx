# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled graph-execution kernel (BLAS-backed hot loop)."""

from libc.math cimport exp as c_exp, isfinite, sqrt as c_sqrt
from libc.string cimport memset

import numpy as np

from scipy.linalg.cython_blas cimport dgemv, dger

from ..errors import DegenerateGradientError, NumericalOverflowError
from . import program as _P

KERNEL_NAME = "compiled"

# opcode mirror; must match program.py (asserted below)
cdef enum:
    INPUT = 0
    PARAM = 1
    CONST = 2
    MATMUL = 3
    ADD = 4
    RELU = 5
    RELU_MASK = 6
    MUL = 7
    DIV = 8
    L2NORM = 9
    SQNORM = 10
    NEG = 11
    EXP = 12
    SCALE = 13
    SUM = 14
    SELECT = 15
    STOPGRAD = 16

assert (_P.INPUT, _P.PARAM, _P.CONST, _P.MATMUL, _P.ADD, _P.RELU, _P.RELU_MASK,
        _P.MUL, _P.DIV, _P.L2NORM, _P.SQNORM, _P.NEG, _P.EXP, _P.SCALE,
        _P.SUM, _P.SELECT, _P.STOPGRAD) == tuple(range(17))

cdef double GUARD = 1e-12
assert GUARD == _P.DIVIDE_GUARD


cdef inline void _gemv(double* pa, int r, int c, double* px, bint trans,
                       double* py, double beta) noexcept nogil:
    # C-order (r, c) buffer seen by Fortran BLAS as the (c, r) transpose.
    cdef int m = c, n = r, inc = 1, i, j
    cdef double alpha = 1.0, xi
    cdef char tt = b'T'
    cdef double* row
    if trans:
        # A.T @ x as row-streaming accumulation: y_j gets one term per
        # row i, in row order, so each output's summation sequence does
        # not depend on how many other columns exist (BLAS gemv kernels
        # change blocking with the column count, which breaks bit-level
        # reproducibility across network widths).
        if beta == 0.0:
            for j in range(c):
                py[j] = 0.0
        for i in range(r):
            row = pa + i * c
            xi = px[i]
            for j in range(c):
                py[j] += row[j] * xi
    else:
        dgemv(&tt, &m, &n, &alpha, pa, &m, px, &inc, &beta, py, &inc)


cdef inline void _ger(double* pa, int r, int c, double* pcol, double* prow) noexcept nogil:
    # pa (C-order r x c) += outer(pcol[r], prow[c])
    cdef int m = c, n = r, inc = 1
    cdef double alpha = 1.0
    dger(&m, &n, &alpha, prow, &inc, pcol, &inc, pa, &m)


def matvec(double[:, ::1] A, double[::1] x, bint trans=False):
    """A @ x (or A.T @ x) through the same dgemv path graph nodes use."""
    cdef int r = A.shape[0], c = A.shape[1]
    out = np.empty(c if trans else r, dtype=np.float64)
    cdef double[::1] o = out
    _gemv(&A[0, 0], r, c, &x[0], trans, &o[0], 0.0)
    return out


def run_forward(int[::1] op, int[::1] a, int[::1] b, int[::1] flag,
                double[::1] aux, long[::1] off, int[::1] length,
                int[::1] rows, int[::1] cols,
                double[::1] values, int start, int stop):
    cdef int i, j, n, code, ai, bi
    cdef double acc, den
    cdef double* pv = &values[0]
    cdef double* out
    cdef double* pa
    cdef double* pb
    for i in range(start, stop):
        code = op[i]
        if code <= CONST:
            continue
        n = length[i]
        out = pv + off[i]
        if code == MATMUL:
            ai = a[i]
            bi = b[i]
            _gemv(pv + off[ai], rows[ai], cols[ai], pv + off[bi], flag[i] != 0, out, 0.0)
        elif code == ADD:
            pa = pv + off[a[i]]
            pb = pv + off[b[i]]
            for j in range(n):
                out[j] = pa[j] + pb[j]
        elif code == RELU:
            pa = pv + off[a[i]]
            for j in range(n):
                out[j] = pa[j] if pa[j] > 0.0 else 0.0
        elif code == RELU_MASK:
            pa = pv + off[a[i]]
            pb = pv + off[b[i]]
            for j in range(n):
                out[j] = pa[j] if pb[j] > 0.0 else 0.0
        elif code == MUL:
            pa = pv + off[a[i]]
            pb = pv + off[b[i]]
            if flag[i] == 0:
                for j in range(n):
                    out[j] = pa[j] * pb[j]
            elif flag[i] == 1:
                for j in range(n):
                    out[j] = pa[j] * pb[0]
            else:
                for j in range(n):
                    out[j] = pa[0] * pb[j]
        elif code == DIV:
            pa = pv + off[a[i]]
            den = (pv + off[b[i]])[0]
            if den < GUARD and den > -GUARD:
                err = DegenerateGradientError(
                    "divide denominator below %g at node %d" % (GUARD, i))
                err.node = i
                raise err
            for j in range(n):
                out[j] = pa[j] / den
        elif code == L2NORM:
            pa = pv + off[a[i]]
            acc = 0.0
            for j in range(length[a[i]]):
                acc += pa[j] * pa[j]
            out[0] = c_sqrt(acc)
        elif code == SQNORM:
            pa = pv + off[a[i]]
            acc = 0.0
            for j in range(length[a[i]]):
                acc += pa[j] * pa[j]
            out[0] = acc
        elif code == NEG:
            pa = pv + off[a[i]]
            for j in range(n):
                out[j] = -pa[j]
        elif code == EXP:
            pa = pv + off[a[i]]
            for j in range(n):
                out[j] = c_exp(pa[j])
        elif code == SCALE:
            pa = pv + off[a[i]]
            den = aux[i]
            for j in range(n):
                out[j] = pa[j] * den
        elif code == SUM:
            pa = pv + off[a[i]]
            acc = 0.0
            for j in range(length[a[i]]):
                acc += pa[j]
            out[0] = acc
        elif code == SELECT:
            out[0] = (pv + off[a[i]])[flag[i]]
        elif code == STOPGRAD:
            pa = pv + off[a[i]]
            for j in range(n):
                out[j] = pa[j]
        for j in range(n):
            if not isfinite(out[j]):
                err = NumericalOverflowError("non-finite value produced at node %d" % i)
                err.node = i
                raise err


def run_backward(int[::1] op, int[::1] a, int[::1] b, int[::1] flag,
                 double[::1] aux, long[::1] off, int[::1] length,
                 int[::1] rows, int[::1] cols,
                 double[::1] values, double[::1] adjoints, int out, double seed):
    cdef int i, j, n, code, ai, bi
    cdef double acc, den, s
    cdef double* pv = &values[0]
    cdef double* pg = &adjoints[0]
    cdef double* go
    cdef double* pa
    cdef double* pb
    cdef double* ga
    cdef double* gb
    memset(pg, 0, (off[out] + length[out]) * sizeof(double))
    pg[off[out]] = seed
    for i in range(out, -1, -1):
        code = op[i]
        if code <= CONST or code == STOPGRAD:
            continue
        n = length[i]
        go = pg + off[i]
        if code == MATMUL:
            ai = a[i]
            bi = b[i]
            if flag[i]:
                _ger(pg + off[ai], rows[ai], cols[ai], pv + off[bi], go)
                _gemv(pv + off[ai], rows[ai], cols[ai], go, False, pg + off[bi], 1.0)
            else:
                _ger(pg + off[ai], rows[ai], cols[ai], go, pv + off[bi])
                _gemv(pv + off[ai], rows[ai], cols[ai], go, True, pg + off[bi], 1.0)
        elif code == ADD:
            ga = pg + off[a[i]]
            gb = pg + off[b[i]]
            for j in range(n):
                ga[j] += go[j]
                gb[j] += go[j]
        elif code == RELU:
            pa = pv + off[a[i]]
            ga = pg + off[a[i]]
            for j in range(n):
                if pa[j] > 0.0:
                    ga[j] += go[j]
        elif code == RELU_MASK:
            pb = pv + off[b[i]]
            ga = pg + off[a[i]]
            for j in range(n):
                if pb[j] > 0.0:
                    ga[j] += go[j]
        elif code == MUL:
            pa = pv + off[a[i]]
            pb = pv + off[b[i]]
            ga = pg + off[a[i]]
            gb = pg + off[b[i]]
            if flag[i] == 0:
                for j in range(n):
                    ga[j] += go[j] * pb[j]
                    gb[j] += go[j] * pa[j]
            elif flag[i] == 1:
                s = pb[0]
                acc = 0.0
                for j in range(n):
                    ga[j] += go[j] * s
                    acc += go[j] * pa[j]
                gb[0] += acc
            else:
                s = pa[0]
                acc = 0.0
                for j in range(n):
                    gb[j] += go[j] * s
                    acc += go[j] * pb[j]
                ga[0] += acc
        elif code == DIV:
            pa = pv + off[a[i]]
            den = (pv + off[b[i]])[0]
            ga = pg + off[a[i]]
            gb = pg + off[b[i]]
            acc = 0.0
            for j in range(n):
                ga[j] += go[j] / den
                acc += go[j] * pa[j]
            gb[0] -= acc / (den * den)
        elif code == L2NORM:
            den = (pv + off[i])[0]
            if den < GUARD:
                err = DegenerateGradientError(
                    "l2-norm below %g at node %d" % (GUARD, i))
                err.node = i
                raise err
            pa = pv + off[a[i]]
            ga = pg + off[a[i]]
            s = go[0] / den
            for j in range(length[a[i]]):
                ga[j] += s * pa[j]
        elif code == SQNORM:
            pa = pv + off[a[i]]
            ga = pg + off[a[i]]
            s = 2.0 * go[0]
            for j in range(length[a[i]]):
                ga[j] += s * pa[j]
        elif code == NEG:
            ga = pg + off[a[i]]
            for j in range(n):
                ga[j] -= go[j]
        elif code == EXP:
            pa = pv + off[i]
            ga = pg + off[a[i]]
            for j in range(n):
                ga[j] += go[j] * pa[j]
        elif code == SCALE:
            ga = pg + off[a[i]]
            s = aux[i]
            for j in range(n):
                ga[j] += go[j] * s
        elif code == SUM:
            ga = pg + off[a[i]]
            s = go[0]
            for j in range(length[a[i]]):
                ga[j] += s
        elif code == SELECT:
            (pg + off[a[i]])[flag[i]] += go[0]
