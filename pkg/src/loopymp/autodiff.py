"""Reverse-mode differentiation over numpy arrays.

Every operation accepts plain arrays or tape ``Variable`` objects. With only
arrays it simply evaluates; once a ``Variable`` is involved the result is
recorded on that variable's ``Tape`` so that ``backward`` can later
accumulate adjoints in reverse recording order.
"""
from __future__ import annotations
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import dataclasses
import numpy as np
import scipy.special

__all__ = [
    "add",
    "atanh",
    "backward",
    "clamp",
    "exp",
    "log",
    "log_sigmoid",
    "logsumexp",
    "matmul",
    "mean",
    "mul",
    "neg",
    "relu",
    "reshape",
    "softplus",
    "stack",
    "sub",
    "sum",
    "take",
    "tanh",
    "Tape",
    "value",
    "Variable",
]


class _Node:
    __slots__ = ("op", "parents", "forward", "vjps", "value", "name")

    def __init__(self, op, parents, forward, vjps, value, name=None) -> None:
        self.op = op
        # (node index or None, constant value) per input
        self.parents = parents
        self.forward = forward
        self.vjps = vjps
        self.value = value
        self.name = name


class Tape:
    """Ordered record of the primitive operations of one forward pass."""

    def __init__(self) -> None:
        self.nodes: List[_Node] = []
        self._inputs: Dict[str, int] = {}
        self._params = None
        self._param_vars = None

    def __len__(self) -> int:
        return len(self.nodes)

    def _push(self, node: _Node) -> Variable:
        self.nodes.append(node)
        return Variable(self, len(self.nodes) - 1)

    def leaf(self, value: Any, name: Optional[str] = None) -> Variable:
        return self._push(
            _Node("leaf", (), None, (), np.array(value, dtype=float), name=name)
        )

    def variable(self, value: Any, name: str) -> Variable:
        """Register a named input whose adjoint ``backward`` reports."""
        if name in self._inputs:
            raise ValueError(f"Input {name!r} is already registered on this tape.")
        v = self.leaf(value, name=name)
        self._inputs[name] = v.index
        return v

    def parameters(self, params: Any) -> Any:
        """Register a parameter dataclass once; repeated calls return the same leaves.

        Every field of ``params`` becomes one leaf so that a single shared
        parameter set accumulates the adjoints of every use.
        """
        if self._param_vars is not None:
            if params is self._params or params is self._param_vars:
                return self._param_vars
            raise ValueError("A tape holds exactly one parameter set.")

        self._params = params
        self._param_vars = dataclasses.replace(
            params,
            **{
                f.name: self.leaf(getattr(params, f.name), name=f.name)
                for f in dataclasses.fields(params)
            },
        )
        return self._param_vars

    def replay(self) -> List[np.ndarray]:
        """Recompute every recorded value from the leaves."""
        values = []
        for node in self.nodes:
            if node.forward is None:
                values.append(node.value)
            else:
                values.append(
                    node.forward(
                        *(values[p] if p is not None else c for p, c in node.parents)
                    )
                )
        return values


class Variable:
    """Handle on a recorded tape value."""

    __slots__ = ("tape", "index")
    # make numpy defer mixed binary operators to this class
    __array_ufunc__ = None

    def __init__(self, tape: Tape, index: int) -> None:
        self.tape = tape
        self.index = index

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.index].value

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return mul(self, 1.0 / np.asarray(other, dtype=float))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self) -> str:
        return f"Variable(index={self.index}, shape={self.shape})"


ArrayOrVariable = Union[np.ndarray, float, Variable]


def value(x: ArrayOrVariable) -> np.ndarray:
    return x.value if isinstance(x, Variable) else np.asarray(x)


def _apply(op: str, forward: Callable, vjps: Sequence[Callable], *inputs):
    tape = None
    for x in inputs:
        if isinstance(x, Variable):
            if tape is not None and x.tape is not tape:
                raise ValueError("Cannot combine variables from different tapes.")
            tape = x.tape

    values = [value(x) for x in inputs]
    out = forward(*values)
    if tape is None:
        return out

    parents = tuple(
        (x.index, None) if isinstance(x, Variable) else (None, v)
        for x, v in zip(inputs, values)
    )
    return tape._push(_Node(op, parents, forward, tuple(vjps), np.asarray(out)))


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    grad = np.asarray(grad)
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def backward(
    tape: Tape,
    seed_adjoint: Any = 1.0,
    output: Optional[Variable] = None,
) -> Tuple[Any, Dict[str, np.ndarray]]:
    """Accumulate adjoints from ``output`` (default: last recorded value).

    Parameters
    ----------
    tape : Tape
        Tape holding a complete forward pass.
    seed_adjoint : Any, optional
        Adjoint of the output, by default 1.0
    output : Optional[Variable], optional
        Value to differentiate, by default the last one recorded.

    Returns
    -------
    Tuple[Any, Dict[str, numpy.ndarray]]
        Parameter gradients shaped like the registered parameter set (None if
        no parameters were registered) and adjoints of the named inputs.

    Raises
    ------
    ValueError
        If the tape is empty.
    """
    if not tape.nodes:
        raise ValueError("Cannot backpropagate through an empty tape.")

    start = len(tape.nodes) - 1 if output is None else output.index
    nodes = tape.nodes
    adjoints: List[Optional[np.ndarray]] = [None] * len(nodes)
    adjoints[start] = np.array(
        np.broadcast_to(seed_adjoint, nodes[start].value.shape), dtype=float
    )

    for i in range(start, -1, -1):
        g = adjoints[i]
        node = nodes[i]
        if g is None or node.forward is None:
            continue
        values = [nodes[p].value if p is not None else c for p, c in node.parents]
        for (p, _), vjp in zip(node.parents, node.vjps):
            if p is None:
                continue
            grad = _unbroadcast(vjp(g, node.value, *values), nodes[p].value.shape)
            adjoints[p] = grad if adjoints[p] is None else adjoints[p] + grad

    def adjoint(index: int) -> np.ndarray:
        a = adjoints[index]
        return np.zeros_like(nodes[index].value) if a is None else a

    param_grads = None
    if tape._param_vars is not None:
        param_grads = dataclasses.replace(
            tape._params,
            **{
                f.name: adjoint(getattr(tape._param_vars, f.name).index)
                for f in dataclasses.fields(tape._params)
            },
        )
    input_grads = {name: adjoint(idx) for name, idx in tape._inputs.items()}

    return param_grads, input_grads


# ------------------------------------------------------ #
# primitives


def add(a: ArrayOrVariable, b: ArrayOrVariable):
    return _apply("add", np.add, (lambda g, o, a, b: g, lambda g, o, a, b: g), a, b)


def sub(a: ArrayOrVariable, b: ArrayOrVariable):
    return _apply(
        "sub", np.subtract, (lambda g, o, a, b: g, lambda g, o, a, b: -g), a, b
    )


def mul(a: ArrayOrVariable, b: ArrayOrVariable):
    return _apply(
        "mul", np.multiply, (lambda g, o, a, b: g * b, lambda g, o, a, b: g * a), a, b
    )


def neg(a: ArrayOrVariable):
    return _apply("neg", np.negative, (lambda g, o, a: -g,), a)


def _matmul_grad_a(g, o, a, b):
    if b.ndim == 1:
        return np.multiply.outer(g, b)
    return g @ b.T


def _matmul_grad_b(g, o, a, b):
    k = a.shape[-1]
    if b.ndim == 1:
        return (a * np.expand_dims(g, -1)).reshape(-1, k).sum(axis=0)
    return a.reshape(-1, k).T @ np.reshape(g, (-1, b.shape[-1]))


def matmul(a: ArrayOrVariable, b: ArrayOrVariable):
    """a @ b for a of shape (..., k) and b of shape (k,) or (k, j)."""
    if value(b).ndim not in (1, 2):
        raise ValueError("matmul supports only a 1-D or 2-D right operand.")
    return _apply("matmul", np.matmul, (_matmul_grad_a, _matmul_grad_b), a, b)


def tanh(a: ArrayOrVariable):
    return _apply("tanh", np.tanh, (lambda g, o, a: g * (1 - o ** 2),), a)


def relu(a: ArrayOrVariable):
    return _apply(
        "relu", lambda a: np.maximum(a, 0.0), (lambda g, o, a: g * (a > 0),), a
    )


def clamp(a: ArrayOrVariable, lower: float, upper: float):
    """Clip to [lower, upper]; the gradient vanishes outside the interval."""
    return _apply(
        "clamp",
        lambda a: np.clip(a, lower, upper),
        (lambda g, o, a: g * ((a >= lower) & (a <= upper)),),
        a,
    )


def exp(a: ArrayOrVariable):
    return _apply("exp", np.exp, (lambda g, o, a: g * o,), a)


def log(a: ArrayOrVariable):
    return _apply("log", np.log, (lambda g, o, a: g / a,), a)


def atanh(a: ArrayOrVariable):
    return _apply("atanh", np.arctanh, (lambda g, o, a: g / (1 - a ** 2),), a)


def softplus(a: ArrayOrVariable):
    return _apply(
        "softplus",
        lambda a: np.logaddexp(0.0, a),
        (lambda g, o, a: g * scipy.special.expit(a),),
        a,
    )


def log_sigmoid(a: ArrayOrVariable):
    return _apply(
        "log_sigmoid",
        scipy.special.log_expit,
        (lambda g, o, a: g * scipy.special.expit(-a),),
        a,
    )


def logsumexp(
    a: ArrayOrVariable,
    axis: Union[int, Tuple[int, ...]] = -1,
    keepdims: bool = False,
):
    def vjp(g, o, a):
        if not keepdims:
            o = np.expand_dims(o, axis)
            g = np.expand_dims(g, axis)
        return g * np.exp(a - o)

    return _apply(
        "logsumexp",
        lambda a: scipy.special.logsumexp(a, axis=axis, keepdims=keepdims),
        (vjp,),
        a,
    )


def sum(
    a: ArrayOrVariable,
    axis: Optional[Union[int, Tuple[int, ...]]] = None,
    keepdims: bool = False,
):
    def vjp(g, o, a):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, a.shape)

    return _apply("sum", lambda a: np.sum(a, axis=axis, keepdims=keepdims), (vjp,), a)


def mean(
    a: ArrayOrVariable,
    axis: Optional[Union[int, Tuple[int, ...]]] = None,
):
    shape = value(a).shape
    axes = range(len(shape)) if axis is None else np.atleast_1d(axis)
    count = int(np.prod([shape[i] for i in axes]))
    return mul(sum(a, axis=axis), 1.0 / count)


def take(a: ArrayOrVariable, indices: Sequence[int], axis: int = -1):
    """Gather along one axis with a 1-D index array (repeats allowed)."""
    indices = np.asarray(indices, dtype=int)

    def vjp(g, o, a):
        grad = np.zeros_like(a)
        np.add.at(np.moveaxis(grad, axis, 0), indices, np.moveaxis(g, axis, 0))
        return grad

    return _apply("take", lambda a: np.take(a, indices, axis=axis), (vjp,), a)


def stack(arrays: Sequence[ArrayOrVariable], axis: int = -1):
    """Stack after broadcasting all inputs to a common shape."""

    def forward(*values):
        return np.stack(np.broadcast_arrays(*values), axis=axis)

    vjps = [
        (lambda k: lambda g, o, *values: np.take(g, k, axis=axis))(k)
        for k in range(len(arrays))
    ]
    return _apply("stack", forward, vjps, *arrays)


def reshape(a: ArrayOrVariable, shape: Tuple[int, ...]):
    return _apply(
        "reshape",
        lambda a: np.reshape(a, shape),
        (lambda g, o, a: np.reshape(g, a.shape),),
        a,
    )
