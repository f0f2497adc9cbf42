"""Pure-numpy execution kernel (fallback when the extension is absent)."""

import numpy as np

from ..errors import DegenerateGradientError, NumericalOverflowError
from . import program as P

KERNEL_NAME = "python"


def matvec(A, x, trans=False):
    """Matrix-vector product with reproducible per-output accumulation.

    The transposed product reduces over rows so each output's summation
    order is independent of how many other columns exist; BLAS gemv
    kernels change blocking with the column count, which would leak
    into bit-level comparisons across network widths.
    """
    if trans:
        if A.shape[1] == 1:
            # single-column arrays hit numpy's contiguous (pairwise)
            # reduction; pad to keep the strided sequential path
            A = np.concatenate((A, np.zeros_like(A)), axis=1)
            return (A * x[:, None]).sum(axis=0)[:1]
        return (A * x[:, None]).sum(axis=0)
    return A @ x


def _raise_overflow(i):
    err = NumericalOverflowError(f"non-finite value produced at node {i}")
    err.node = i
    raise err


def _raise_degenerate(i, what):
    err = DegenerateGradientError(f"{what} below {P.DIVIDE_GUARD:g} at node {i}")
    err.node = i
    raise err


def run_forward(op, a, b, flag, aux, off, length, rows, cols, values, start, stop):
    v = lambda i: values[off[i] : off[i] + length[i]]
    for i in range(start, stop):
        code = op[i]
        if code <= P.CONST:
            continue
        out = v(i)
        if code == P.MATMUL:
            A = values[off[a[i]] : off[a[i]] + length[a[i]]].reshape(rows[a[i]], cols[a[i]])
            x = v(b[i])
            out[:] = matvec(A, x, trans=bool(flag[i]))
        elif code == P.ADD:
            np.add(v(a[i]), v(b[i]), out=out)
        elif code == P.RELU:
            np.maximum(v(a[i]), 0.0, out=out)
        elif code == P.RELU_MASK:
            np.multiply(v(a[i]), v(b[i]) > 0.0, out=out)
        elif code == P.MUL:
            if flag[i] == 0:
                np.multiply(v(a[i]), v(b[i]), out=out)
            elif flag[i] == 1:
                np.multiply(v(a[i]), v(b[i])[0], out=out)
            else:
                np.multiply(v(a[i])[0], v(b[i]), out=out)
        elif code == P.DIV:
            den = v(b[i])[0]
            if abs(den) < P.DIVIDE_GUARD:
                _raise_degenerate(i, "divide denominator")
            np.divide(v(a[i]), den, out=out)
        elif code == P.L2NORM:
            sq = v(a[i])
            out[0] = np.sqrt(sq @ sq)
        elif code == P.SQNORM:
            sq = v(a[i])
            out[0] = sq @ sq
        elif code == P.NEG:
            np.negative(v(a[i]), out=out)
        elif code == P.EXP:
            np.exp(v(a[i]), out=out)
        elif code == P.SCALE:
            np.multiply(v(a[i]), aux[i], out=out)
        elif code == P.SUM:
            out[0] = np.sum(v(a[i]))
        elif code == P.SELECT:
            out[0] = v(a[i])[flag[i]]
        elif code == P.STOPGRAD:
            out[:] = v(a[i])
        if not np.all(np.isfinite(out)):
            _raise_overflow(i)


def run_backward(op, a, b, flag, aux, off, length, rows, cols, values, adjoints, out, seed):
    v = lambda i: values[off[i] : off[i] + length[i]]
    g = lambda i: adjoints[off[i] : off[i] + length[i]]
    adjoints[: off[out] + length[out]] = 0.0
    adjoints[off[out]] = seed
    for i in range(out, -1, -1):
        code = op[i]
        if code <= P.CONST or code == P.STOPGRAD:
            continue
        go = g(i)
        if code == P.MATMUL:
            ai, bi = a[i], b[i]
            A = values[off[ai] : off[ai] + length[ai]].reshape(rows[ai], cols[ai])
            gA = adjoints[off[ai] : off[ai] + length[ai]].reshape(rows[ai], cols[ai])
            x, gx = v(bi), g(bi)
            if flag[i]:
                gA += np.outer(x, go)
                gx += matvec(A, go, trans=False)
            else:
                gA += np.outer(go, x)
                gx += matvec(A, go, trans=True)
        elif code == P.ADD:
            g(a[i])[:] += go
            g(b[i])[:] += go
        elif code == P.RELU:
            g(a[i])[:] += go * (v(a[i]) > 0.0)
        elif code == P.RELU_MASK:
            g(a[i])[:] += go * (v(b[i]) > 0.0)
        elif code == P.MUL:
            if flag[i] == 0:
                g(a[i])[:] += go * v(b[i])
                g(b[i])[:] += go * v(a[i])
            elif flag[i] == 1:
                g(a[i])[:] += go * v(b[i])[0]
                g(b[i])[0] += go @ v(a[i])
            else:
                g(a[i])[0] += go @ v(b[i])
                g(b[i])[:] += go * v(a[i])[0]
        elif code == P.DIV:
            den = v(b[i])[0]
            g(a[i])[:] += go / den
            g(b[i])[0] -= (go @ v(a[i])) / (den * den)
        elif code == P.L2NORM:
            n = v(i)[0]
            if n < P.DIVIDE_GUARD:
                _raise_degenerate(i, "l2-norm")
            g(a[i])[:] += (go[0] / n) * v(a[i])
        elif code == P.SQNORM:
            g(a[i])[:] += (2.0 * go[0]) * v(a[i])
        elif code == P.NEG:
            g(a[i])[:] -= go
        elif code == P.EXP:
            g(a[i])[:] += go * v(i)
        elif code == P.SCALE:
            g(a[i])[:] += aux[i] * go
        elif code == P.SUM:
            g(a[i])[:] += go[0]
        elif code == P.SELECT:
            g(a[i])[flag[i]] += go[0]
