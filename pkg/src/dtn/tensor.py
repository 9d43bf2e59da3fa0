"""Dense tensors and a tape-based reverse-mode differentiation engine.

Every value is an immutable float64 array. Operations on tensors that belong
to a :class:`Tape` are recorded as nodes, each with a vector-Jacobian product
closure over the values it needs. :func:`backward` walks the nodes once, in
reverse recording order, and returns the adjoints of the tape's parameters.

The primitive set is fixed: einsum/contract/matmul, elementwise
add/sub/mul/div/neg/exp/log/abs/sigmoid/relu, sum, softmax/log_softmax,
frobenius_norm, matrix_exp_2x2, reshape/transpose, getitem/stack.
"""

from __future__ import annotations

import string
from collections.abc import Callable
from collections.abc import Sequence
from dataclasses import dataclass
from typing import Any

import numpy as np

from dtn.errors import ForeignNodeError
from dtn.errors import NonScalarLossError
from dtn.errors import ShapeMismatchError
from dtn.errors import TensorError

DTYPE = np.float64

# |δ| below which matrix_exp_2x2 switches to its series form
DELTA_SERIES_THRESHOLD = 1e-8
# |δ²| below which the derivative of sinh(δ)/δ uses its series form
DERIVATIVE_SERIES_THRESHOLD = 1e-3

Grads = Sequence["np.ndarray | IndexedGrad | None"]
VJP = Callable[[np.ndarray, tuple[bool, ...]], Grads]


@dataclass(frozen=True, slots=True)
class Node:
    op: str
    inputs: tuple[int | None, ...]
    shape: tuple[int, ...]
    vjp: VJP | None


class Tape:
    """Ordered record of primitive applications.

    Node inputs always reference earlier nodes, so recording order is a
    topological order of the computation.
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self.parameters: dict[str, int] = {}

    def __len__(self) -> int:
        return len(self.nodes)

    def parameter(self, name: str, value: Any) -> Tensor:
        if name in self.parameters:
            raise TensorError(f"parameter {name!r} is already on the tape")
        tensor = self._append("parameter", (), None, _as_array(value))
        self.parameters[name] = tensor.node  # type: ignore[assignment]
        return tensor

    def leaf(self, value: Any) -> Tensor:
        """Record a non-trainable input."""
        return self._append("leaf", (), None, _as_array(value))

    def _append(
        self,
        op: str,
        inputs: tuple[int | None, ...],
        vjp: VJP | None,
        value: np.ndarray,
    ) -> Tensor:
        self.nodes.append(Node(op, inputs, value.shape, vjp))
        return Tensor._wrap(value, self, len(self.nodes) - 1)


class Tensor:
    """An immutable float64 array, optionally tracked by a tape."""

    __slots__ = ("data", "tape", "node")
    __array_ufunc__ = None

    data: np.ndarray
    tape: Tape | None
    node: int | None

    def __init__(self, data: Any) -> None:
        array = _as_array(data)
        if any(extent < 1 for extent in array.shape):
            raise ShapeMismatchError(f"tensor extents must be >= 1, got {array.shape}")
        self.data = array
        self.tape = None
        self.node = None

    @classmethod
    def _wrap(cls, array: np.ndarray, tape: Tape | None, node: int | None) -> Tensor:
        tensor = object.__new__(cls)
        array.setflags(write=False)
        tensor.data = array
        tensor.tape = tape
        tensor.node = node
        return tensor

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def tracked(self) -> bool:
        return self.tape is not None

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.size != 1:
            raise NonScalarLossError(f"tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor._wrap(self.data, None, None)

    def __len__(self) -> int:
        return self.shape[0]

    def __repr__(self) -> str:
        origin = f", node={self.node}" if self.tracked else ""
        return f"Tensor(shape={self.shape}{origin})"

    def __add__(self, other: Any) -> Tensor:
        return add(self, other)

    def __radd__(self, other: Any) -> Tensor:
        return add(other, self)

    def __sub__(self, other: Any) -> Tensor:
        return sub(self, other)

    def __rsub__(self, other: Any) -> Tensor:
        return sub(other, self)

    def __mul__(self, other: Any) -> Tensor:
        return mul(self, other)

    def __rmul__(self, other: Any) -> Tensor:
        return mul(other, self)

    def __truediv__(self, other: Any) -> Tensor:
        return div(self, other)

    def __rtruediv__(self, other: Any) -> Tensor:
        return div(other, self)

    def __neg__(self) -> Tensor:
        return neg(self)

    def __matmul__(self, other: Any) -> Tensor:
        return matmul(self, other)

    def __getitem__(self, index: Any) -> Tensor:
        return getitem(self, index)

    def reshape(self, *shape: int) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)

    def transpose(self, *axes: int) -> Tensor:
        return transpose(self, axes or None)

    def sum(self, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
        return tensor_sum(self, axis, keepdims)


def _as_array(value: Any) -> np.ndarray:
    if isinstance(value, Tensor):
        return value.data
    return np.array(value, dtype=DTYPE)


def as_tensor(value: Any) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor._wrap(np.array(value, dtype=DTYPE), None, None)


def _common_tape(tensors: Sequence[Tensor]) -> Tape | None:
    tape = None
    for tensor in tensors:
        if tensor.tape is None:
            continue
        if tape is None:
            tape = tensor.tape
        elif tensor.tape is not tape:
            raise ForeignNodeError("operands are recorded on different tapes")
    return tape


def _record(op: str, inputs: Sequence[Tensor], value: np.ndarray, vjp: VJP) -> Tensor:
    tape = _common_tape(inputs)
    if tape is None:
        return Tensor._wrap(value, None, None)
    ids = tuple(tensor.node if tensor.tape is tape else None for tensor in inputs)
    return tape._append(op, ids, vjp, value)


def backward(tape: Tape, loss: Tensor) -> dict[str, Tensor]:
    """Adjoints of `loss` with respect to every parameter on `tape`.

    Parameters that do not influence the loss get a zero gradient.
    """
    if loss.tape is not tape or loss.node is None:
        raise ForeignNodeError("loss tensor was not recorded on this tape")
    if loss.size != 1:
        raise NonScalarLossError(f"loss must be a scalar, got shape {loss.shape}")

    adjoints: dict[int, np.ndarray | IndexedGrad] = {
        loss.node: np.ones(loss.shape, dtype=DTYPE)
    }
    owned: set[int] = set()
    leaves: dict[int, np.ndarray] = {}
    for index in range(loss.node, -1, -1):
        pending = adjoints.pop(index, None)
        if pending is None:
            continue
        grad = _densify(pending)
        node = tape.nodes[index]
        if node.vjp is None:
            leaves[index] = grad
            continue
        needs = tuple(input_id is not None for input_id in node.inputs)
        for input_id, input_grad in zip(node.inputs, node.vjp(grad, needs)):
            if input_id is None or input_grad is None:
                continue
            _accumulate(adjoints, owned, input_id, input_grad)

    gradients = {}
    for name, node_id in tape.parameters.items():
        grad = leaves.get(node_id)
        if grad is None:
            grad = np.zeros(tape.nodes[node_id].shape, dtype=DTYPE)
        gradients[name] = Tensor._wrap(np.array(grad, dtype=DTYPE), None, None)
    return gradients


@dataclass(frozen=True, slots=True)
class IndexedGrad:
    """Adjoint that is zero outside `values` placed at `index`."""

    index: Any
    values: np.ndarray
    shape: tuple[int, ...]

    def add_to(self, out: np.ndarray) -> None:
        if _is_basic_index(self.index):
            out[self.index] += self.values
        else:
            np.add.at(out, self.index, self.values)


def _is_basic_index(index: Any) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(
        part is None or part is Ellipsis or isinstance(part, (int, np.integer, slice))
        for part in parts
    )


def _densify(grad: np.ndarray | IndexedGrad) -> np.ndarray:
    if isinstance(grad, IndexedGrad):
        out = np.zeros(grad.shape, dtype=DTYPE)
        grad.add_to(out)
        return out
    return grad


def _accumulate(
    adjoints: dict[int, np.ndarray | IndexedGrad],
    owned: set[int],
    node_id: int,
    grad: np.ndarray | IndexedGrad,
) -> None:
    current = adjoints.get(node_id)
    if current is None:
        adjoints[node_id] = grad
        return
    if node_id not in owned:
        # first write into a buffer the engine owns; later adds are in place
        current = np.array(_densify(current), dtype=DTYPE)
        owned.add(node_id)
    if isinstance(grad, IndexedGrad):
        grad.add_to(current)
    else:
        current += grad
    adjoints[node_id] = current


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a: Any, b: Any) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g: np.ndarray, needs: tuple[bool, ...]) -> Grads:
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record("add", (a, b), a.data + b.data, vjp)


def sub(a: Any, b: Any) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g: np.ndarray, needs: tuple[bool, ...]) -> Grads:
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record("sub", (a, b), a.data - b.data, vjp)


def mul(a: Any, b: Any) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g: np.ndarray, needs: tuple[bool, ...]) -> Grads:
        return (
            _unbroadcast(g * b.data, a.shape) if needs[0] else None,
            _unbroadcast(g * a.data, b.shape) if needs[1] else None,
        )

    return _record("mul", (a, b), a.data * b.data, vjp)


def div(a: Any, b: Any) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    value = a.data / b.data

    def vjp(g: np.ndarray, needs: tuple[bool, ...]) -> Grads:
        return (
            _unbroadcast(g / b.data, a.shape) if needs[0] else None,
            _unbroadcast(-g * value / b.data, b.shape) if needs[1] else None,
        )

    return _record("div", (a, b), value, vjp)


def neg(a: Any) -> Tensor:
    a = as_tensor(a)
    return _record("neg", (a,), -a.data, lambda g, needs: (-g,))


def exp(a: Any) -> Tensor:
    a = as_tensor(a)
    value = np.exp(a.data)
    return _record("exp", (a,), value, lambda g, needs: (g * value,))


def log(a: Any) -> Tensor:
    a = as_tensor(a)
    return _record("log", (a,), np.log(a.data), lambda g, needs: (g / a.data,))


def absolute(a: Any) -> Tensor:
    a = as_tensor(a)
    return _record("abs", (a,), np.abs(a.data), lambda g, needs: (g * np.sign(a.data),))


def sigmoid(a: Any) -> Tensor:
    a = as_tensor(a)
    value = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _record("sigmoid", (a,), value, lambda g, needs: (g * value * (1.0 - value),))


def relu(a: Any) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _record("relu", (a,), np.where(mask, a.data, 0.0), lambda g, needs: (g * mask,))


def _normalize_axes(axis: int | tuple[int, ...] | None, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def _expand_reduced(g: np.ndarray, axes: tuple[int, ...], keepdims: bool) -> np.ndarray:
    if keepdims:
        return g
    for axis in axes:
        g = np.expand_dims(g, axis)
    return g


def tensor_sum(
    a: Any, axis: int | tuple[int, ...] | None = None, keepdims: bool = False
) -> Tensor:
    a = as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)
    value = np.sum(a.data, axis=axes, keepdims=keepdims)

    def vjp(g: np.ndarray, needs: tuple[bool, ...]) -> Grads:
        return (np.broadcast_to(_expand_reduced(g, axes, keepdims), a.shape),)

    return _record("sum", (a,), np.asarray(value, dtype=DTYPE), vjp)


def frobenius_norm(
    a: Any, axis: int | tuple[int, ...] | None = None, keepdims: bool = False
) -> Tensor:
    """Square root of the sum of squares over `axis` (all axes by default)."""
    a = as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)
    norm = np.sqrt(np.sum(a.data * a.data, axis=axes, keepdims=True))

    def vjp(g: np.ndarray, needs: tuple[bool, ...]) -> Grads:
        scale = np.divide(
            _expand_reduced(g, axes, keepdims),
            norm,
            out=np.zeros(norm.shape, dtype=DTYPE),
            where=norm > 0,
        )
        return (a.data * scale,)

    value = norm if keepdims else np.squeeze(norm, axis=axes)
    return _record("norm", (a,), np.asarray(value, dtype=DTYPE), vjp)


def softmax(a: Any, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    weights = np.exp(shifted)
    value = weights / np.sum(weights, axis=axis, keepdims=True)

    def vjp(g: np.ndarray, needs: tuple[bool, ...]) -> Grads:
        return (value * (g - np.sum(g * value, axis=axis, keepdims=True)),)

    return _record("softmax", (a,), value, vjp)


def log_softmax(a: Any, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    value = shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))

    def vjp(g: np.ndarray, needs: tuple[bool, ...]) -> Grads:
        return (g - np.exp(value) * np.sum(g, axis=axis, keepdims=True),)

    return _record("log_softmax", (a,), value, vjp)


def reshape(a: Any, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    return _record(
        "reshape", (a,), a.data.reshape(tuple(shape)), lambda g, needs: (g.reshape(a.shape),)
    )


def transpose(a: Any, axes: Sequence[int] | None = None) -> Tensor:
    a = as_tensor(a)
    order = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(order))
    return _record(
        "transpose", (a,), a.data.transpose(order), lambda g, needs: (g.transpose(inverse),)
    )


def getitem(a: Any, index: Any) -> Tensor:
    a = as_tensor(a)

    def vjp(g: np.ndarray, needs: tuple[bool, ...]) -> Grads:
        return (IndexedGrad(index, g, a.shape),)

    return _record("getitem", (a,), np.asarray(a.data[index], dtype=DTYPE), vjp)


def stack(tensors: Sequence[Any], axis: int = 0) -> Tensor:
    items = [as_tensor(tensor) for tensor in tensors]
    if not items:
        raise ShapeMismatchError("cannot stack an empty sequence")
    value = np.stack([item.data for item in items], axis=axis)

    def vjp(g: np.ndarray, needs: tuple[bool, ...]) -> Grads:
        return [np.take(g, i, axis=axis) if need else None for i, need in enumerate(needs)]

    return _record("stack", items, value, vjp)


def matmul(a: Any, b: Any) -> Tensor:
    """Batched matrix product over the last two axes, with broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatchError(f"matmul needs matrices, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatchError(f"matmul extents differ: {a.shape} @ {b.shape}")

    def vjp(g: np.ndarray, needs: tuple[bool, ...]) -> Grads:
        return (
            _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if needs[0] else None,
            _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if needs[1] else None,
        )

    return _record("matmul", (a, b), np.matmul(a.data, b.data), vjp)


def _parse_subscripts(subscripts: str, count: int) -> tuple[list[str], str]:
    compact = subscripts.replace(" ", "")
    if "->" not in compact or "." in compact:
        raise TensorError(f"einsum needs an explicit output and no ellipsis: {subscripts!r}")
    lhs, output = compact.split("->")
    labels = lhs.split(",")
    if len(labels) != count:
        raise TensorError(f"{subscripts!r} names {len(labels)} operands, got {count}")
    for term in [*labels, output]:
        if len(set(term)) != len(term):
            raise TensorError(f"repeated label inside one operand in {subscripts!r}")
    return labels, output


def einsum(subscripts: str, *operands: Any) -> Tensor:
    """Labelled contraction of any number of operands."""
    items = [as_tensor(operand) for operand in operands]
    labels, output = _parse_subscripts(subscripts, len(items))
    extents: dict[str, int] = {}
    for term, item in zip(labels, items):
        if len(term) != item.ndim:
            raise ShapeMismatchError(f"operand {term!r} has shape {item.shape}")
        for label, extent in zip(term, item.shape):
            if extents.setdefault(label, extent) != extent:
                raise ShapeMismatchError(
                    f"label {label!r} has extents {extents[label]} and {extent}"
                )
    optimize = len(items) > 2
    value = np.einsum(subscripts, *(item.data for item in items), optimize=optimize)

    def vjp(g: np.ndarray, needs: tuple[bool, ...]) -> Grads:
        grads: list[np.ndarray | None] = []
        for k, (term, item) in enumerate(zip(labels, items)):
            if not needs[k]:
                grads.append(None)
                continue
            others = [(labels[i], items[i].data) for i in range(len(items)) if i != k]
            available = set(output).union(*(set(other) for other, _ in others))
            kept = "".join(label for label in term if label in available)
            expression = ",".join([output, *(other for other, _ in others)]) + "->" + kept
            grad = np.einsum(expression, g, *(data for _, data in others), optimize=True)
            if kept != term:
                for position, label in enumerate(term):
                    if label not in available:
                        grad = np.expand_dims(grad, position)
                grad = np.broadcast_to(grad, item.shape)
            grads.append(grad)
        return grads

    return _record("einsum", items, np.asarray(value, dtype=DTYPE), vjp)


def contract(a: Any, b: Any, axes: Sequence[tuple[int, int]]) -> Tensor:
    """Sum over paired axes of `a` and `b`.

    The result keeps the unpaired axes of `a`, then those of `b`, in order.
    """
    a, b = as_tensor(a), as_tensor(b)
    letters = iter(string.ascii_letters)
    a_labels = [next(letters) for _ in range(a.ndim)]
    b_labels = [next(letters) for _ in range(b.ndim)]
    paired_a, paired_b = set(), set()
    for axis_a, axis_b in axes:
        axis_a, axis_b = axis_a % a.ndim, axis_b % b.ndim
        if a.shape[axis_a] != b.shape[axis_b]:
            raise ShapeMismatchError(
                f"cannot pair axis {axis_a} (extent {a.shape[axis_a]}) with "
                f"axis {axis_b} (extent {b.shape[axis_b]})"
            )
        b_labels[axis_b] = a_labels[axis_a]
        paired_a.add(axis_a)
        paired_b.add(axis_b)
    output = [label for i, label in enumerate(a_labels) if i not in paired_a]
    output += [label for i, label in enumerate(b_labels) if i not in paired_b]
    subscripts = f"{''.join(a_labels)},{''.join(b_labels)}->{''.join(output)}"
    return einsum(subscripts, a, b)


def _exp2_coefficients(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """cosh(δ) and sinh(δ)/δ as analytic functions of z = δ²."""
    root = np.sqrt(np.abs(z))
    small = root < DELTA_SERIES_THRESHOLD
    safe = np.where(small, 1.0, root)
    with np.errstate(over="ignore", invalid="ignore"):
        c = np.where(z >= 0, np.cosh(root), np.cos(root))
        s = np.where(z >= 0, np.sinh(safe) / safe, np.sin(safe) / safe)
    c = np.where(small, 1.0 + z / 2.0 + z * z / 24.0, c)
    s = np.where(small, 1.0 + z / 6.0 + z * z / 120.0, s)
    return c, s


def _sinhc_derivative(z: np.ndarray, c: np.ndarray, s: np.ndarray) -> np.ndarray:
    small = np.abs(z) < DERIVATIVE_SERIES_THRESHOLD
    safe = np.where(small, 1.0, z)
    series = 1.0 / 6.0 + z / 60.0 + z * z / 1680.0 + z**3 / 90720.0
    return np.where(small, series, (c - s) / (2.0 * safe))


def matrix_exp_2x2(h: Any) -> Tensor:
    """exp(h) for (a batch of) 2x2 matrices in closed form.

    exp(h) = e^τ (cosh δ · I + sinh δ / δ · (h - τI)), τ = tr(h)/2,
    δ² = τ² - det(h). Negative δ² switches to cos/sin.
    """
    h = as_tensor(h)
    if h.ndim < 2 or h.shape[-2:] != (2, 2):
        raise ShapeMismatchError(f"matrix_exp_2x2 needs trailing 2x2 axes, got {h.shape}")
    m = h.data
    identity = np.eye(2, dtype=DTYPE)
    tau = 0.5 * (m[..., 0, 0] + m[..., 1, 1])
    k00 = 0.5 * (m[..., 0, 0] - m[..., 1, 1])
    z = k00 * k00 + m[..., 0, 1] * m[..., 1, 0]
    c, s = _exp2_coefficients(z)
    scale = np.exp(tau)
    traceless = m - tau[..., None, None] * identity
    value = scale[..., None, None] * (c[..., None, None] * identity + s[..., None, None] * traceless)

    def vjp(g: np.ndarray, needs: tuple[bool, ...]) -> Grads:
        d_tau = np.sum(g * value, axis=(-2, -1))
        d_c = scale * (g[..., 0, 0] + g[..., 1, 1])
        d_s = scale * np.sum(g * traceless, axis=(-2, -1))
        d_z = 0.5 * d_c * s + d_s * _sinhc_derivative(z, c, s)
        d_k = (scale * s)[..., None, None] * g
        d_h = d_k - (0.5 * (d_k[..., 0, 0] + d_k[..., 1, 1]))[..., None, None] * identity
        d_h = d_h + (0.5 * d_tau)[..., None, None] * identity
        dz_dh = np.stack(
            [
                np.stack([k00, m[..., 1, 0]], axis=-1),
                np.stack([m[..., 0, 1], -k00], axis=-1),
            ],
            axis=-2,
        )
        return (d_h + d_z[..., None, None] * dz_dh,)

    return _record("matrix_exp_2x2", (h,), value, vjp)
