"""Reverse-mode autodiff over explicit computation graphs.

Nodes are appended in topological order and compiled to flat arrays
executed by the active kernel (compiled or pure numpy).  The operation
vocabulary is deliberately small: just enough to express an MLP forward
pass, its input-gradient "reverse" chain, and the perturbation
recursion built on top of them.  There is no general broadcasting; the
one concession is that ``mul`` accepts a scalar on either side (a
scalar product) and ``div`` divides by a scalar node.

A Graph instance is single-writer: forward/backward mutate node state
and must not run concurrently on one instance.  Distinct graphs over
read-only parameter arrays may run in parallel.
"""

from __future__ import annotations

import numpy as np

from . import _core
from ._core import program as P
from .errors import AdvDefenseError, GraphStateError, ShapeError

_INIT_NODES = 64
_INIT_ARENA = 512


def _as_f64(value):
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim > 2:
        raise ShapeError(f"tensors are at most 2-D, got shape {arr.shape}")
    # ascontiguousarray promotes 0-d to 1-d; keep scalars 0-d
    return arr if arr.ndim == 0 else np.ascontiguousarray(arr)


class Graph:
    """Append-only computation graph with a flat value/adjoint arena."""

    def __init__(self):
        self._op = np.zeros(_INIT_NODES, dtype=np.int32)
        self._a = np.full(_INIT_NODES, -1, dtype=np.int32)
        self._b = np.full(_INIT_NODES, -1, dtype=np.int32)
        self._flag = np.zeros(_INIT_NODES, dtype=np.int32)
        self._aux = np.zeros(_INIT_NODES, dtype=np.float64)
        self._off = np.zeros(_INIT_NODES, dtype=np.int64)
        self._len = np.zeros(_INIT_NODES, dtype=np.int32)
        self._rows = np.zeros(_INIT_NODES, dtype=np.int32)
        self._cols = np.zeros(_INIT_NODES, dtype=np.int32)
        self._values = np.zeros(_INIT_ARENA, dtype=np.float64)
        self._adjoints = np.zeros(_INIT_ARENA, dtype=np.float64)
        self._used = 0
        self.n = 0
        self._shapes: list[tuple] = []
        self._labels: list = []
        self.params: dict[str, int] = {}
        self.inputs: dict[str, int] = {}
        self._executed = 0

    # -- construction -------------------------------------------------

    def _append(self, op, shape, a=-1, b=-1, flag=0, aux=0.0, label=None):
        i = self.n
        if i == len(self._op):
            for name in ("_op", "_a", "_b", "_flag", "_aux", "_off", "_len", "_rows", "_cols"):
                old = getattr(self, name)
                new = np.empty(2 * len(old), dtype=old.dtype)
                new[: len(old)] = old
                setattr(self, name, new)
        size = int(np.prod(shape)) if shape else 1
        if self._used + size > len(self._values):
            cap = len(self._values)
            while cap < self._used + size:
                cap *= 2
            for name in ("_values", "_adjoints"):
                old = getattr(self, name)
                new = np.zeros(cap, dtype=np.float64)
                new[: len(old)] = old
                setattr(self, name, new)
        self._op[i] = op
        self._a[i] = a
        self._b[i] = b
        self._flag[i] = flag
        self._aux[i] = aux
        self._off[i] = self._used
        self._len[i] = size
        self._rows[i] = shape[0] if shape else 1
        self._cols[i] = shape[1] if len(shape) == 2 else 0
        self._used += size
        self._shapes.append(tuple(shape))
        self._labels.append(label)
        self.n += 1
        return i

    def describe(self, i):
        label = self._labels[i]
        tag = f" '{label}'" if label else ""
        return f"node {i} ({P.OP_NAMES[self._op[i]]}{tag})"

    def shape(self, i):
        return self._shapes[i]

    def _require(self, cond, op, msg):
        if not cond:
            raise ShapeError(f"{op} (would be node {self.n}): {msg}")

    def _write_leaf(self, i, value):
        arr = _as_f64(value)
        if arr.shape != self._shapes[i]:
            raise ShapeError(
                f"{self.describe(i)}: expected shape {self._shapes[i]}, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ShapeError(f"{self.describe(i)}: non-finite entries rejected")
        self._values[self._off[i] : self._off[i] + self._len[i]] = arr.ravel()
        if i < self._executed:
            # rebinding an already-consumed leaf stales its dependents
            self._executed = 0

    def input(self, name, shape):
        if name in self.inputs or name in self.params:
            raise ShapeError(f"duplicate node name '{name}'")
        i = self._append(P.INPUT, tuple(shape), label=name)
        self.inputs[name] = i
        return i

    def parameter(self, name, value):
        if name in self.inputs or name in self.params:
            raise ShapeError(f"duplicate node name '{name}'")
        arr = _as_f64(value)
        i = self._append(P.PARAM, arr.shape, label=name)
        self.params[name] = i
        self._write_leaf(i, arr)
        return i

    def constant(self, value):
        arr = _as_f64(value)
        i = self._append(P.CONST, arr.shape)
        self._write_leaf(i, arr)
        return i

    def matmul(self, w, x, transpose=False):
        ws, xs = self._shapes[w], self._shapes[x]
        self._require(len(ws) == 2, "matmul", f"left operand must be a matrix, got {ws}")
        self._require(len(xs) == 1, "matmul", f"right operand must be a vector, got {xs}")
        inner, outer = (ws[0], ws[1]) if transpose else (ws[1], ws[0])
        self._require(xs[0] == inner, "matmul", f"inner extents differ: {ws} vs {xs}")
        return self._append(P.MATMUL, (outer,), a=w, b=x, flag=int(transpose))

    def _same_shape(self, op, x, y):
        self._require(self._shapes[x] == self._shapes[y], P.OP_NAMES[op],
                      f"operand shapes differ: {self._shapes[x]} vs {self._shapes[y]}")

    def add(self, x, y):
        self._same_shape(P.ADD, x, y)
        return self._append(P.ADD, self._shapes[x], a=x, b=y)

    def relu(self, x):
        return self._append(P.RELU, self._shapes[x], a=x)

    def relu_mask(self, x, gate):
        """x masked by (gate > 0); the mask is data, no gradient to gate."""
        self._same_shape(P.RELU_MASK, x, gate)
        return self._append(P.RELU_MASK, self._shapes[x], a=x, b=gate)

    def mul(self, x, y):
        xs, ys = self._shapes[x], self._shapes[y]
        if xs == ys:
            flag, shape = 0, xs
        elif ys == ():
            flag, shape = 1, xs
        elif xs == ():
            flag, shape = 2, ys
        else:
            self._require(False, "elementwise-product", f"operand shapes differ: {xs} vs {ys}")
        return self._append(P.MUL, shape, a=x, b=y, flag=flag)

    def div(self, num, den):
        self._require(self._shapes[den] == (), "scalar-divide",
                      f"denominator must be scalar, got {self._shapes[den]}")
        return self._append(P.DIV, self._shapes[num], a=num, b=den)

    def l2_norm(self, x):
        return self._append(P.L2NORM, (), a=x)

    def sq_norm(self, x):
        return self._append(P.SQNORM, (), a=x)

    def neg(self, x):
        return self._append(P.NEG, self._shapes[x], a=x)

    def exp(self, x):
        return self._append(P.EXP, self._shapes[x], a=x)

    def scale(self, x, c):
        return self._append(P.SCALE, self._shapes[x], a=x, aux=float(c))

    def sum(self, x):
        return self._append(P.SUM, (), a=x)

    def select(self, x, index):
        self._require(len(self._shapes[x]) == 1, "select-row",
                      f"needs a vector, got {self._shapes[x]}")
        self._require(0 <= index < self._shapes[x][0], "select-row",
                      f"index {index} out of range for {self._shapes[x]}")
        return self._append(P.SELECT, (), a=x, flag=int(index))

    def stop_gradient(self, x):
        return self._append(P.STOPGRAD, self._shapes[x], a=x)

    # -- execution ----------------------------------------------------

    def set_parameter(self, name, value):
        self._write_leaf(self.params[name], value)

    def bind(self, name, value):
        self._write_leaf(self.inputs[name], value)

    def _execute(self, start, stop):
        try:
            _core.run_forward(self._op, self._a, self._b, self._flag, self._aux,
                              self._off, self._len, self._rows, self._cols,
                              self._values, start, stop)
        except AdvDefenseError as e:
            raise self._enrich(e) from None
        self._executed = stop

    def _enrich(self, e):
        node = getattr(e, "node", None)
        if node is None:
            return e
        err = type(e)(f"{e} [{self.describe(node)}]")
        err.node = node
        return err

    def forward(self, bindings=None, outputs=None):
        """Run the whole graph; returns values of ``outputs`` if given.

        ``bindings`` must cover every input node (parameters and
        constants carry their own data).
        """
        bindings = dict(bindings or {})
        for name in self.inputs:
            if name not in bindings:
                raise ShapeError(f"missing binding for input '{name}'")
        for name, value in bindings.items():
            if name not in self.inputs:
                raise ShapeError(f"binding for unknown input '{name}'")
            self.bind(name, value)
        self._execute(0, self.n)
        if outputs is not None:
            return [self.value(i) for i in outputs]
        return None

    def run_pending(self):
        """Execute any nodes appended since the last run (incremental build)."""
        if self._executed < self.n:
            self._execute(self._executed, self.n)

    def _rerun(self):
        self._execute(0, self.n)

    def backward(self, output, seed=1.0):
        """Accumulate adjoints from a scalar output; returns parameter adjoints."""
        if self._executed < self.n:
            raise GraphStateError("backward before forward")
        if self._shapes[output] != ():
            raise ShapeError(f"{self.describe(output)}: backward needs a scalar output")
        try:
            _core.run_backward(self._op, self._a, self._b, self._flag, self._aux,
                               self._off, self._len, self._rows, self._cols,
                               self._values, self._adjoints, output, float(seed))
        except AdvDefenseError as e:
            raise self._enrich(e) from None
        return {name: self.adjoint(i) for name, i in self.params.items()}

    # -- access -------------------------------------------------------

    def value_view(self, i):
        return self._values[self._off[i] : self._off[i] + self._len[i]]

    def value(self, i):
        if self._executed <= i and self._op[i] > P.CONST:
            raise GraphStateError(f"{self.describe(i)}: value read before forward")
        return self.value_view(i).copy().reshape(self._shapes[i])

    def adjoint(self, i):
        return self._adjoints[self._off[i] : self._off[i] + self._len[i]].copy().reshape(self._shapes[i])

    def scalar(self, i):
        return float(self.value_view(i)[0])


def grad_check(graph, output, wrt, step):
    """Max relative error between analytic and central-difference gradients.

    ``wrt`` must be a leaf node (parameter, input or constant).  The
    relative error is |analytic - numeric| / max(1, |analytic|), maxed
    over the leaf's entries.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    if graph._op[wrt] > P.CONST:
        raise ShapeError(f"{graph.describe(wrt)}: grad_check needs a leaf node")
    graph._rerun()
    graph.backward(output)
    grad = graph.adjoint(wrt).ravel()
    buf = graph._values[graph._off[wrt] : graph._off[wrt] + graph._len[wrt]]
    worst = 0.0
    for j in range(len(buf)):
        saved = buf[j]
        buf[j] = saved + step
        graph._rerun()
        hi = graph.scalar(output)
        buf[j] = saved - step
        graph._rerun()
        lo = graph.scalar(output)
        buf[j] = saved
        numeric = (hi - lo) / (2.0 * step)
        err = abs(grad[j] - numeric) / max(1.0, abs(grad[j]))
        worst = max(worst, err)
    graph._rerun()
    return worst
