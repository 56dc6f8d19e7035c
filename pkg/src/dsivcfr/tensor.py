"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation records its parents and a backward closure; `Tensor.backward`
walks the graph once in reverse topological order and accumulates gradients
into `.grad` of every tensor that requires them.  Storage is row-major
float64 throughout; gradients persist until explicitly zeroed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigurationError, ContractError, DeterminismError, DimensionError, NumericError


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    # ---- construction helpers -------------------------------------------

    @staticmethod
    def _result(data: np.ndarray, parents: Sequence["Tensor"],
                backward: Callable[[np.ndarray], None]) -> "Tensor":
        out = Tensor(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        """Same values, cut off from the graph."""
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data)

    # ---- elementwise arithmetic -----------------------------------------

    @staticmethod
    def _coerce(x) -> "Tensor":
        return x if isinstance(x, Tensor) else Tensor(x)

    def _broadcast_check(self, other: "Tensor", op: str) -> None:
        try:
            np.broadcast_shapes(self.shape, other.shape)
        except ValueError:
            raise DimensionError(f"{op}: shapes {self.shape} and {other.shape} do not broadcast")

    def __add__(self, other):
        other = self._coerce(other)
        self._broadcast_check(other, "add")
        a, b = self, other

        def backward(g):
            if a.requires_grad:
                a._accum(_unbroadcast(g, a.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(g, b.shape))

        return Tensor._result(a.data + b.data, (a, b), backward)

    __radd__ = __add__

    def __neg__(self):
        a = self

        def backward(g):
            a._accum(-g)

        return Tensor._result(-a.data, (a,), backward)

    def __sub__(self, other):
        return self + (-self._coerce(other))

    def __rsub__(self, other):
        return self._coerce(other) + (-self)

    def __mul__(self, other):
        other = self._coerce(other)
        self._broadcast_check(other, "mul")
        a, b = self, other

        def backward(g):
            if a.requires_grad:
                a._accum(_unbroadcast(g * b.data, a.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(g * a.data, b.shape))

        return Tensor._result(a.data * b.data, (a, b), backward)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._coerce(other)
        self._broadcast_check(other, "div")
        a, b = self, other

        def backward(g):
            if a.requires_grad:
                a._accum(_unbroadcast(g / b.data, a.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(-g * a.data / (b.data ** 2), b.shape))

        return Tensor._result(a.data / b.data, (a, b), backward)

    def __rtruediv__(self, other):
        return self._coerce(other) / self

    def square(self):
        a = self

        def backward(g):
            a._accum(2.0 * a.data * g)

        return Tensor._result(a.data ** 2, (a,), backward)

    def sqrt(self):
        if np.any(self.data < 0.0):
            raise NumericError("sqrt: input must be non-negative")
        out_data = np.sqrt(self.data)
        a = self

        def backward(g):
            a._accum(g / (2.0 * out_data))

        return Tensor._result(out_data, (a,), backward)

    def exp(self):
        out_data = np.exp(self.data)
        a = self

        def backward(g):
            a._accum(g * out_data)

        return Tensor._result(out_data, (a,), backward)

    def log(self):
        if np.any(self.data <= 0.0):
            raise NumericError("log: input must be strictly positive")
        a = self

        def backward(g):
            a._accum(g / a.data)

        return Tensor._result(np.log(a.data), (a,), backward)

    def sin(self):
        a = self

        def backward(g):
            a._accum(g * np.cos(a.data))

        return Tensor._result(np.sin(a.data), (a,), backward)

    def cos(self):
        a = self

        def backward(g):
            a._accum(-g * np.sin(a.data))

        return Tensor._result(np.cos(a.data), (a,), backward)

    def relu(self):
        a = self
        mask = a.data > 0.0

        def backward(g):
            a._accum(g * mask)

        return Tensor._result(np.where(mask, a.data, 0.0), (a,), backward)

    def sigmoid(self):
        out_data = 1.0 / (1.0 + np.exp(-self.data))
        a = self

        def backward(g):
            a._accum(g * out_data * (1.0 - out_data))

        return Tensor._result(out_data, (a,), backward)

    def tanh(self):
        out_data = np.tanh(self.data)
        a = self

        def backward(g):
            a._accum(g * (1.0 - out_data ** 2))

        return Tensor._result(out_data, (a,), backward)

    def softplus(self):
        # log(1 + e^x) computed stably; derivative is sigmoid(x)
        x = self.data
        out_data = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
        a = self

        def backward(g):
            a._accum(g / (1.0 + np.exp(-a.data)))

        return Tensor._result(out_data, (a,), backward)

    def clamp(self, lo: float, hi: float):
        a = self
        mask = (a.data >= lo) & (a.data <= hi)

        def backward(g):
            a._accum(g * mask)

        return Tensor._result(np.clip(a.data, lo, hi), (a,), backward)

    # ---- reductions ------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        a = self
        in_shape = a.shape
        self._check_axis(axis)

        def backward(g):
            g = np.asarray(g)
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._accum(np.broadcast_to(g, in_shape).copy())

        return Tensor._result(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)

    def mean(self, axis=None, keepdims: bool = False):
        self._check_axis(axis)
        if axis is None:
            count = self.data.size
        else:
            count = self.shape[axis]
        if count == 0:
            raise DimensionError("mean over empty axis")
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def max(self, axis=None, keepdims: bool = False):
        a = self
        self._check_axis(axis)
        out_data = a.data.max(axis=axis, keepdims=True)
        mask = a.data == out_data
        counts = mask.sum(axis=axis, keepdims=True)

        def backward(g):
            g = np.asarray(g)
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            elif axis is None:
                g = np.broadcast_to(g, counts.shape)
            a._accum(mask * (g / counts))

        result = out_data if keepdims or axis is None else np.squeeze(out_data, axis=axis)
        if axis is None and not keepdims:
            result = result.reshape(())
        return Tensor._result(result, (a,), backward)

    def cumsum(self, axis: int):
        a = self
        self._check_axis(axis)

        def backward(g):
            a._accum(np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis))

        return Tensor._result(np.cumsum(a.data, axis=axis), (a,), backward)

    def _check_axis(self, axis) -> None:
        if axis is None:
            if self.data.size == 0:
                raise DimensionError("reduction over empty tensor")
            return
        if not -self.ndim <= axis < self.ndim:
            raise DimensionError(f"axis {axis} out of range for shape {self.shape}")
        if self.shape[axis] == 0:
            raise DimensionError(f"reduction over empty axis {axis} of shape {self.shape}")

    # ---- softmax ---------------------------------------------------------

    def softmax(self, axis: int = -1):
        if np.any(np.isnan(self.data)):
            raise NumericError("softmax: NaN in input")
        self._check_axis(axis)
        shifted = self.data - self.data.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        out_data = e / e.sum(axis=axis, keepdims=True)
        a = self

        def backward(g):
            inner = (g * out_data).sum(axis=axis, keepdims=True)
            a._accum(out_data * (g - inner))

        return Tensor._result(out_data, (a,), backward)

    # ---- matmul / structure ---------------------------------------------

    def __matmul__(self, other):
        other = self._coerce(other)
        a, b = self, other
        if a.ndim < 2 or b.ndim < 2:
            raise DimensionError(f"matmul requires ndim >= 2, got {a.shape} and {b.shape}")
        if a.shape[-1] != b.shape[-2]:
            raise DimensionError(f"matmul: inner extents differ for shapes {a.shape} and {b.shape}")

        def backward(g):
            if a.requires_grad:
                a._accum(_unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

        return Tensor._result(np.matmul(a.data, b.data), (a, b), backward)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        in_shape = a.shape

        def backward(g):
            a._accum(g.reshape(in_shape))

        return Tensor._result(a.data.reshape(shape), (a,), backward)

    def swapaxes(self, ax1: int, ax2: int):
        a = self

        def backward(g):
            a._accum(np.swapaxes(g, ax1, ax2))

        return Tensor._result(np.swapaxes(a.data, ax1, ax2), (a,), backward)

    def __getitem__(self, idx):
        a = self
        in_shape = a.shape

        def backward(g):
            full = np.zeros(in_shape)
            np.add.at(full, idx, g)
            a._accum(full)

        return Tensor._result(a.data[idx].copy(), (a,), backward)

    # ---- backward pass ---------------------------------------------------

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad = self.grad + g

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar loss; each graph node visited once."""
        if self.data.size != 1:
            raise ContractError(f"backward requires a scalar loss, got shape {self.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))

        self._accum(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                node.grad = None  # interior cotangent; only leaves keep grads


# ---- convenience constructors -----------------------------------------------


def zeros(*shape) -> Tensor:
    return Tensor(np.zeros(shape))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = list(tensors)
    datas = [t.data for t in tensors]
    out_data = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            if t.requires_grad:
                t._accum(piece)

    return Tensor._result(out_data, tensors, backward)


# ---- gradient checking ------------------------------------------------------


@dataclass
class GradReport:
    """Outcome of comparing analytic gradients against central finite differences."""
    max_rel_err: float
    per_param: dict = field(default_factory=dict)
    eps: float = 1e-5
    tol: float = 1e-4
    passed: bool = False


def grad_check(builder: Callable[[], Tensor], params: dict[str, Tensor],
               eps: float = 1e-5, tol: float = 1e-4,
               atol: float = 1e-7) -> GradReport:
    """Compare analytic gradients of `builder()` against central differences.

    `builder` must be a deterministic closure over `params`; it is re-evaluated
    with perturbed parameter values.  Relative error uses denominator
    max(|analytic|, |numeric|, 1e-8); coordinates whose absolute discrepancy
    is below `atol` count as exact (structurally-zero gradients sit in
    floating-point noise where the relative measure is meaningless).
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ConfigurationError(f"grad_check eps {eps} outside [1e-7, 1e-3]")
    v1 = builder()
    v2 = builder()
    if v1.data.size != 1:
        raise ContractError("grad_check builder must return a scalar loss")
    if not np.array_equal(v1.data, v2.data):
        raise DeterminismError("builder returned differing values on re-evaluation")

    for p in params.values():
        p.zero_grad()
    v1.backward()
    analytic = {name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
                for name, p in params.items()}

    per_param: dict[str, float] = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        num = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(builder().data)
            flat[i] = orig - eps
            fm = float(builder().data)
            flat[i] = orig
            num[i] = (fp - fm) / (2.0 * eps)
        ana = analytic[name].reshape(-1)
        denom = np.maximum(np.maximum(np.abs(ana), np.abs(num)), 1e-8)
        err = np.abs(ana - num)
        rel = np.where(err <= atol, 0.0, err / denom)
        per_param[name] = float(np.max(rel)) if flat.size else 0.0
        p.zero_grad()

    max_err = max(per_param.values()) if per_param else 0.0
    return GradReport(max_rel_err=max_err, per_param=per_param, eps=eps, tol=tol,
                      passed=max_err <= tol)
