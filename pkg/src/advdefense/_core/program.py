"""Opcode vocabulary shared by the graph builder and both kernels.

A graph compiles to parallel arrays (one entry per node):

  op[i]      opcode below
  a[i], b[i] operand node ids (-1 when unused)
  flag[i]    opcode-specific small integer (matmul: 1 = transposed,
             mul: 1 = right operand scalar, 2 = left operand scalar,
             select: row index)
  aux[i]     opcode-specific float payload (scale constant)
  off[i]     start of the node's value in the flat float64 arena
  length[i]  number of float64 elements
  rows/cols[i]  matrix extents (cols == 0 for vectors/scalars)

Kernels execute the arrays directly; all shape validation happens at
build time in the graph layer.
"""

(
    INPUT,
    PARAM,
    CONST,
    MATMUL,
    ADD,
    RELU,
    RELU_MASK,
    MUL,
    DIV,
    L2NORM,
    SQNORM,
    NEG,
    EXP,
    SCALE,
    SUM,
    SELECT,
    STOPGRAD,
) = range(17)

OP_NAMES = (
    "input",
    "parameter",
    "constant",
    "matmul",
    "add",
    "relu",
    "relu-mask-apply",
    "elementwise-product",
    "scalar-divide",
    "l2-norm",
    "squared-l2-norm",
    "negate",
    "exponential",
    "scalar-scale",
    "sum",
    "select-row",
    "stop-gradient",
)

# Denominators / norms below this are treated as degenerate rather than
# silently clamped.
DIVIDE_GUARD = 1e-12
