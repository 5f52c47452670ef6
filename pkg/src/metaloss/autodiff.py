"""Reverse-mode automatic differentiation over dense float64 matrices.

Every value is a 2-D C-contiguous float64 array (scalars are 1x1). Nodes
(:class:`Var`) are created eagerly: building an expression computes its
value immediately and records the operation, so the DAG hanging off a node
is a replayable trace of the computation.

Gradients are themselves built as graph nodes: :func:`grad` expresses each
vector-Jacobian product with the same primitives, so its outputs can be
differentiated once more. That is exactly what :func:`meta_gradient` does
for the one-step-lookahead update: take the gradient of a training
objective, form the virtually updated parameters, splice them into the
evaluation objective with :func:`substitute`, and differentiate the result
with respect to the remaining parameters.

Supported primitives: matrix multiply, elementwise add/multiply, scalar
scaling, transpose, rectifier (with its zero-derivative gate ``step``),
logistic, exp, log, stable row-wise log-sum-exp, row/column/full sums and
the matching row/column broadcasts. No general tensor broadcasting.
"""

from __future__ import annotations

from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass

import numpy as np

from . import kernels


class ShapeError(ValueError):
    """Operand shapes incompatible with the requested operation."""


class NonFiniteError(ArithmeticError):
    """An operation produced NaN or infinity."""


def _as_matrix(value) -> np.ndarray:
    arr = np.ascontiguousarray(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise ShapeError(f"expected a matrix, got {arr.ndim}-d data")
    return arr


def _check_finite(value: np.ndarray, op: str) -> None:
    if not np.isfinite(value).all():
        raise NonFiniteError(f"operation '{op}' produced a non-finite value")


class Var:
    """One node of the computation trace: a value plus how it was made.

    Leaves are either parameters (differentiable) or constants. Interior
    nodes keep their op name, argument nodes and any non-array op settings
    in ``meta`` (scale factor, broadcast width, ...).
    """

    __slots__ = ("value", "op", "args", "meta", "requires_grad")

    def __init__(self, value, op="const", args=(), meta=(), requires_grad=False):
        self.value = value if isinstance(value, np.ndarray) else _as_matrix(value)
        self.op = op
        self.args: tuple[Var, ...] = tuple(args)
        self.meta = tuple(meta)
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape  # type: ignore[return-value]

    def item(self) -> float:
        if self.value.shape != (1, 1):
            raise ShapeError(f"item() needs a 1x1 value, got {self.value.shape}")
        return float(self.value[0, 0])

    def __repr__(self) -> str:
        return f"Var(op={self.op!r}, shape={self.value.shape})"

    # Operators build graph nodes; shapes must match exactly except for the
    # documented 1xK / Nx1 / 1x1 broadcasts handled by add()/mul().
    def __add__(self, other: "Var") -> "Var":
        return add(self, other)

    def __sub__(self, other: "Var") -> "Var":
        return add(self, scale(other, -1.0))

    def __mul__(self, other) -> "Var":
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other) -> "Var":
        return self.__mul__(other)

    def __neg__(self) -> "Var":
        return scale(self, -1.0)

    def __matmul__(self, other: "Var") -> "Var":
        return matmul(self, other)

    @property
    def T(self) -> "Var":
        return transpose(self)


def parameter(value) -> Var:
    """Differentiable leaf. The value is copied, so later in-place updates
    to the source array do not disturb recorded traces."""
    arr = _as_matrix(value).copy()
    _check_finite(arr, "param")
    return Var(arr, op="param", requires_grad=True)


def constant(value) -> Var:
    """Non-differentiable leaf (inputs, targets, detached predictions)."""
    arr = _as_matrix(value).copy()
    _check_finite(arr, "const")
    return Var(arr, op="const")


# --- primitive registry ---------------------------------------------------
#
# forward: computes the output array from argument arrays + meta.
# nondiff argument slots never receive adjoints (the rectifier gate).

def _fwd_add(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"add: {a.shape} vs {b.shape}")
    return a + b


def _fwd_mul(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"mul: {a.shape} vs {b.shape}")
    return a * b


def _fwd_matmul(a, b):
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    return a @ b


def _fwd_scale(a, c):
    return a * c


def _fwd_bcast_rows(a, n):
    if a.shape[0] != 1:
        raise ShapeError(f"bcast_rows needs a 1xK input, got {a.shape}")
    return np.repeat(a, n, axis=0)


def _fwd_bcast_cols(a, k):
    if a.shape[1] != 1:
        raise ShapeError(f"bcast_cols needs an Nx1 input, got {a.shape}")
    return np.repeat(a, k, axis=1)


def _silent(fn, a):
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        return fn(a)


_FORWARD = {
    "add": _fwd_add,
    "mul": _fwd_mul,
    "matmul": _fwd_matmul,
    "scale": _fwd_scale,
    "transpose": lambda a: np.ascontiguousarray(a.T),
    "relu": lambda a: kernels.relu(a),
    "step": lambda a: kernels.step(a),
    "logistic": lambda a: kernels.logistic(a),
    # overflow/domain issues surface as NonFiniteError, not numpy warnings
    "exp": lambda a: _silent(np.exp, a),
    "log": lambda a: _silent(np.log, a),
    "logsumexp_rows": lambda a: kernels.row_logsumexp(a),
    "sum_all": lambda a: np.sum(a).reshape(1, 1),
    "sum_rows": lambda a: np.sum(a, axis=1, keepdims=True),
    "sum_cols": lambda a: np.ascontiguousarray(np.sum(a, axis=0, keepdims=True)),
    "bcast_rows": _fwd_bcast_rows,
    "bcast_cols": _fwd_bcast_cols,
}

_NONDIFF_OPS = {"step"}  # zero derivative everywhere it exists


def _apply(op: str, args: Sequence[Var], meta: tuple = ()) -> Var:
    value = _FORWARD[op](*[a.value for a in args], *meta)
    _check_finite(value, op)
    rg = op not in _NONDIFF_OPS and any(a.requires_grad for a in args)
    return Var(value, op=op, args=args, meta=meta, requires_grad=rg)


def add(a: Var, b: Var) -> Var:
    a, b = _align(a, b)
    return _apply("add", (a, b))


def mul(a: Var, b: Var) -> Var:
    a, b = _align(a, b)
    return _apply("mul", (a, b))


def _align(a: Var, b: Var) -> tuple[Var, Var]:
    """Insert explicit broadcast nodes for the supported mismatches."""
    if a.shape == b.shape:
        return a, b
    a = _expand_to(a, b.shape) if a.value.size < b.value.size else a
    b = _expand_to(b, a.shape)
    if a.shape != b.shape:
        raise ShapeError(f"incompatible shapes {a.shape} and {b.shape}")
    return a, b


def _expand_to(v: Var, shape: tuple[int, int]) -> Var:
    if v.shape == shape:
        return v
    n, k = shape
    if v.shape == (1, 1):
        return bcast_cols(bcast_rows(v, n), k) if n > 1 else bcast_cols(v, k)
    if v.shape == (1, k):
        return bcast_rows(v, n)
    if v.shape == (n, 1):
        return bcast_cols(v, k)
    return v


def matmul(a: Var, b: Var) -> Var:
    return _apply("matmul", (a, b))


def scale(a: Var, c: float) -> Var:
    return _apply("scale", (a,), (float(c),))


def transpose(a: Var) -> Var:
    return _apply("transpose", (a,))


def relu(a: Var) -> Var:
    return _apply("relu", (a,))


def step(a: Var) -> Var:
    return _apply("step", (a,))


def logistic(a: Var) -> Var:
    return _apply("logistic", (a,))


def exp(a: Var) -> Var:
    return _apply("exp", (a,))


def log(a: Var) -> Var:
    return _apply("log", (a,))


def logsumexp_rows(a: Var) -> Var:
    return _apply("logsumexp_rows", (a,))


def sum_all(a: Var) -> Var:
    return _apply("sum_all", (a,))


def sum_rows(a: Var) -> Var:
    return _apply("sum_rows", (a,))


def sum_cols(a: Var) -> Var:
    return _apply("sum_cols", (a,))


def bcast_rows(a: Var, n: int) -> Var:
    return _apply("bcast_rows", (a,), (int(n),))


def bcast_cols(a: Var, k: int) -> Var:
    return _apply("bcast_cols", (a,), (int(k),))


def mean_all(a: Var) -> Var:
    return scale(sum_all(a), 1.0 / a.value.size)


# --- adjoint rules ---------------------------------------------------------
#
# Each rule receives the node and its upstream adjoint (a Var of the node's
# shape) and returns one adjoint Var (or None) per argument. Rules build
# graph nodes only, which keeps the returned gradient differentiable.

def _vjp(node: Var, g: Var) -> tuple[Var | None, ...]:
    op = node.op
    a = node.args
    if op == "add":
        return (g, g)
    if op == "mul":
        return (mul(g, a[1]), mul(g, a[0]))
    if op == "matmul":
        return (matmul(g, transpose(a[1])), matmul(transpose(a[0]), g))
    if op == "scale":
        return (scale(g, node.meta[0]),)
    if op == "transpose":
        return (transpose(g),)
    if op == "relu":
        return (mul(g, step(a[0])),)
    if op == "logistic":
        one = constant(np.ones(node.shape))
        return (mul(g, mul(node, add(one, scale(node, -1.0)))),)
    if op == "exp":
        return (mul(g, node),)
    if op == "log":
        # 1/x written as exp(-log x) so the rule stays inside the primitive set
        return (mul(g, exp(scale(node, -1.0))),)
    if op == "logsumexp_rows":
        soft = exp(add(a[0], scale(bcast_cols(node, a[0].shape[1]), -1.0)))
        return (mul(soft, bcast_cols(g, a[0].shape[1])),)
    if op == "sum_all":
        return (_expand_to(g, a[0].shape),)
    if op == "sum_rows":
        return (bcast_cols(g, a[0].shape[1]),)
    if op == "sum_cols":
        return (bcast_rows(g, a[0].shape[0]),)
    if op == "bcast_rows":
        return (sum_cols(g),)
    if op == "bcast_cols":
        return (sum_rows(g),)
    raise AssertionError(f"no adjoint rule for op '{op}'")


def _topo_order(root: Var) -> list[Var]:
    """Arguments before consumers; iterative DFS to spare the recursion limit."""
    order: list[Var] = []
    seen: set[int] = set()
    stack: list[tuple[Var, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for arg in node.args:
            stack.append((arg, False))
    return order


def grad(output: Var, wrt: Sequence[Var], allow_unused: bool = False) -> list[Var]:
    """Gradient of a scalar output with respect to each leaf in ``wrt``.

    The result is a list of Vars — new graph nodes, so each gradient can be
    replayed or differentiated again. A requested leaf the output does not
    depend on is an error unless ``allow_unused`` is set, in which case its
    gradient is a zero matrix of the leaf's shape.
    """
    if output.shape != (1, 1):
        raise ShapeError(f"grad needs a scalar output, got shape {output.shape}")
    wrt = list(wrt)
    wrt_ids = {id(w) for w in wrt}
    order = _topo_order(output)

    # Nodes through which some requested leaf is reachable along
    # differentiable slots; adjoints are only propagated inside this set.
    active: set[int] = set()
    for node in order:
        if id(node) in wrt_ids:
            active.add(id(node))
        elif node.op not in _NONDIFF_OPS and any(id(a) in active for a in node.args):
            active.add(id(node))

    if not allow_unused:
        present = {id(n) for n in order}
        missing = [w for w in wrt if id(w) not in present]
        if missing:
            raise ValueError(
                f"{len(missing)} requested parameter(s) do not appear in the record"
            )

    adjoint: dict[int, Var] = {}
    if id(output) in active:
        adjoint[id(output)] = constant(np.ones((1, 1)))
    for node in reversed(order):
        g = adjoint.get(id(node))
        if g is None or not node.args:
            continue
        contributions = _vjp(node, g)
        for arg, contrib in zip(node.args, contributions):
            if contrib is None or id(arg) not in active:
                continue
            prev = adjoint.get(id(arg))
            adjoint[id(arg)] = contrib if prev is None else add(prev, contrib)

    out: list[Var] = []
    for w in wrt:
        g = adjoint.get(id(w))
        out.append(g if g is not None else constant(np.zeros(w.shape)))
    return out


def substitute(root: Var, mapping: Mapping[Var, Var]) -> Var:
    """Rebuild the trace under ``root`` with some leaves replaced.

    Nodes untouched by the replacement are shared; every affected node is
    re-created (its value recomputed) with the same op and settings.
    """
    replace = {id(k): v for k, v in mapping.items()}
    rebuilt: dict[int, Var] = {}
    for node in _topo_order(root):
        if id(node) in replace:
            rebuilt[id(node)] = replace[id(node)]
        elif node.args and any(rebuilt.get(id(a), a) is not a for a in node.args):
            new_args = tuple(rebuilt.get(id(a), a) for a in node.args)
            rebuilt[id(node)] = _apply(node.op, new_args, node.meta)
        else:
            rebuilt[id(node)] = node
    return rebuilt[id(root)]


def meta_gradient(
    train_loss: Var,
    meta_loss: Var,
    inner_params: Sequence[Var],
    meta_params: Sequence[Var],
    alpha: float,
) -> list[Var]:
    """One-step-lookahead meta-gradient.

    Virtually updates the inner parameters by one plain gradient-descent
    step on ``train_loss`` (rate ``alpha``), evaluates ``meta_loss`` at the
    virtual parameters, and returns its gradient with respect to each meta
    parameter. Meta parameters that do not influence the training loss get
    zero gradients.
    """
    if alpha <= 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    if train_loss.shape != (1, 1) or meta_loss.shape != (1, 1):
        raise ShapeError("meta_gradient needs scalar-valued objectives")
    inner_grads = grad(train_loss, inner_params, allow_unused=True)
    virtual = {
        w: add(w, scale(g, -alpha)) for w, g in zip(inner_params, inner_grads)
    }
    shifted = substitute(meta_loss, virtual)
    return grad(shifted, meta_params, allow_unused=True)


# --- replayable records -----------------------------------------------------

@dataclass(frozen=True)
class Record:
    """A computation with designated input leaves and a single output node."""

    inputs: tuple[Var, ...]
    output: Var


def make_record(inputs: Iterable[Var], output: Var) -> Record:
    return Record(tuple(inputs), output)


def run_record(record: Record, input_values: Sequence[np.ndarray]) -> np.ndarray:
    """Replay the record on fresh input values.

    Values must match the declared input shapes; leaves not listed in the
    record's inputs keep their stored values. Replaying with the stored
    values reproduces the original outputs bit for bit.
    """
    if len(input_values) != len(record.inputs):
        raise ValueError(
            f"expected {len(record.inputs)} inputs, got {len(input_values)}"
        )
    env: dict[int, np.ndarray] = {}
    for leaf, value in zip(record.inputs, input_values):
        arr = _as_matrix(value)
        if arr.shape != leaf.shape:
            raise ShapeError(
                f"input shape {arr.shape} does not match declared {leaf.shape}"
            )
        _check_finite(arr, "input")
        env[id(leaf)] = arr
    for node in _topo_order(record.output):
        if id(node) in env:
            continue
        if not node.args:
            env[id(node)] = node.value
            continue
        value = _FORWARD[node.op](*[env[id(a)] for a in node.args], *node.meta)
        _check_finite(value, node.op)
        env[id(node)] = value
    return env[id(record.output)]
