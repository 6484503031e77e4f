"""Dense tensors with a recorded reverse-mode tape.

Every operation here returns a new :class:`Tensor`. When gradient recording is
enabled and at least one operand requires a gradient, the result remembers its
parents and a closure mapping the upstream gradient to one gradient per parent.
:meth:`Tensor.backward` replays those closures in reverse topological order.

Only the operations the model needs are provided: broadcasting arithmetic, a
handful of pointwise nonlinearities, channel slicing/concatenation, reductions
and strided 2-D cross-correlation with its transpose.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import special

from .errors import ContractViolation

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
ArrayLike = Union["Tensor", np.ndarray, float, int]

_GRAD_STATE = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_GRAD_STATE, "enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording for the current thread."""

    previous = is_grad_enabled()
    _GRAD_STATE.enabled = False
    try:
        yield
    finally:
        _GRAD_STATE.enabled = previous


class Tensor:
    """An ndarray plus the bookkeeping needed for reverse-mode gradients."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(
        self,
        data: np.ndarray | float,
        *,
        requires_grad: bool = False,
        name: Optional[str] = None,
    ) -> None:
        self.data = np.asarray(data)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: Tuple[Tensor, ...] = ()
        self._backward: Optional[BackwardFn] = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf on the tape."""

        if grad is None:
            if self.data.size != 1:
                raise ContractViolation(
                    f"backward() without an explicit gradient needs a scalar, got {self.shape}"
                )
            grad = np.ones_like(self.data)
        pending: Dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(_topological_order(self)):
            upstream = pending.pop(id(node), None)
            if upstream is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = upstream.copy() if node.grad is None else node.grad + upstream
                continue
            for parent, parent_grad in zip(node._parents, node._backward(upstream)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = parent_grad if key not in pending else pending[key] + parent_grad

    # Operator sugar -----------------------------------------------------

    def __add__(self, other: ArrayLike) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return mul(other, self)

    def __neg__(self) -> "Tensor":
        return mul(self, -1.0)


def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited: set[int] = set()
    stack: List[Tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def _record(data: np.ndarray, parents: Sequence[Tensor], backward: BackwardFn) -> Tensor:
    needs_grad = is_grad_enabled() and any(parent.requires_grad for parent in parents)
    out = Tensor(data, requires_grad=needs_grad)
    if needs_grad:
        out._parents = tuple(parents)
        out._backward = backward
    return out


def as_tensor(value: ArrayLike, like: Optional[Tensor] = None) -> Tensor:
    """Wrap ``value`` as a constant tensor, matching ``like``'s dtype for scalars."""

    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(value, dtype=dtype))


def tensor4(data: np.ndarray, dtype: np.dtype | str = np.float64, *, name: Optional[str] = None) -> Tensor:
    """Validate and wrap an N×C×H×W array at an API boundary."""

    array = np.asarray(data, dtype=dtype)
    if array.ndim != 4:
        raise ContractViolation(f"expected an N×C×H×W array, got shape {array.shape}")
    if not np.all(np.isfinite(array)):
        raise ContractViolation(f"non-finite values in tensor of shape {array.shape}")
    return Tensor(array, name=name)


def _pair(a: ArrayLike, b: ArrayLike) -> Tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b_tensor = as_tensor(b)
    return as_tensor(a, like=b_tensor), b_tensor


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# Pointwise arithmetic ------------------------------------------------------


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _pair(a, b)

    def backward(grad: np.ndarray) -> Sequence[np.ndarray]:
        return _unbroadcast(grad, a.shape), _unbroadcast(grad, b.shape)

    return _record(a.data + b.data, (a, b), backward)


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _pair(a, b)

    def backward(grad: np.ndarray) -> Sequence[np.ndarray]:
        return _unbroadcast(grad, a.shape), _unbroadcast(-grad, b.shape)

    return _record(a.data - b.data, (a, b), backward)


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _pair(a, b)

    def backward(grad: np.ndarray) -> Sequence[np.ndarray]:
        return _unbroadcast(grad * b.data, a.shape), _unbroadcast(grad * a.data, b.shape)

    return _record(a.data * b.data, (a, b), backward)


def square(a: Tensor) -> Tensor:
    def backward(grad: np.ndarray) -> Sequence[np.ndarray]:
        return (grad * 2.0 * a.data,)

    return _record(a.data * a.data, (a,), backward)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def backward(grad: np.ndarray) -> Sequence[np.ndarray]:
        return (grad * out_data,)

    return _record(out_data, (a,), backward)


def expm1(a: Tensor) -> Tensor:
    out_data = np.expm1(a.data)

    def backward(grad: np.ndarray) -> Sequence[np.ndarray]:
        return (grad * (out_data + 1.0),)

    return _record(out_data, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    out_data = special.expit(a.data)

    def backward(grad: np.ndarray) -> Sequence[np.ndarray]:
        return (grad * out_data * (1.0 - out_data),)

    return _record(out_data, (a,), backward)


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)

    def backward(grad: np.ndarray) -> Sequence[np.ndarray]:
        return (grad * (1.0 - out_data * out_data),)

    return _record(out_data, (a,), backward)


def softplus(a: Tensor) -> Tensor:
    """log(1 + e^a), computed without overflow."""

    def backward(grad: np.ndarray) -> Sequence[np.ndarray]:
        return (grad * special.expit(a.data),)

    return _record(np.logaddexp(0.0, a.data), (a,), backward)


def clip(a: Tensor, low: Optional[float], high: Optional[float]) -> Tensor:
    """Clamp values; the gradient is zero wherever the clamp is active."""

    out_data = np.clip(a.data, low, high)
    inside = np.ones(a.shape, dtype=bool)
    if low is not None:
        inside &= a.data >= low
    if high is not None:
        inside &= a.data <= high

    def backward(grad: np.ndarray) -> Sequence[np.ndarray]:
        return (np.where(inside, grad, 0.0).astype(grad.dtype, copy=False),)

    return _record(out_data, (a,), backward)


# Shape manipulation --------------------------------------------------------


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    if not tensors:
        raise ContractViolation("concat() needs at least one tensor")
    sizes = [tensor.shape[axis] for tensor in tensors]
    boundaries = np.cumsum(sizes)[:-1]

    def backward(grad: np.ndarray) -> Sequence[np.ndarray]:
        return tuple(np.split(grad, boundaries, axis=axis))

    return _record(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def channel_slice(a: Tensor, start: int, stop: int) -> Tensor:
    def backward(grad: np.ndarray) -> Sequence[np.ndarray]:
        full = np.zeros(a.shape, dtype=grad.dtype)
        full[:, start:stop] = grad
        return (full,)

    return _record(a.data[:, start:stop], (a,), backward)


def reshape(a: Tensor, shape: Tuple[int, ...]) -> Tensor:
    def backward(grad: np.ndarray) -> Sequence[np.ndarray]:
        return (grad.reshape(a.shape),)

    return _record(a.data.reshape(shape), (a,), backward)


def broadcast_to(a: Tensor, shape: Tuple[int, ...]) -> Tensor:
    def backward(grad: np.ndarray) -> Sequence[np.ndarray]:
        return (_unbroadcast(grad, a.shape),)

    return _record(np.array(np.broadcast_to(a.data, shape)), (a,), backward)


def tile_batch(a: Tensor, batch_size: int) -> Tensor:
    """Repeat a 1×C×H×W tensor along the batch axis."""

    if a.shape[0] != 1:
        raise ContractViolation(f"tile_batch expects a leading axis of 1, got {a.shape}")

    def backward(grad: np.ndarray) -> Sequence[np.ndarray]:
        return (grad.sum(axis=0, keepdims=True),)

    return _record(np.repeat(a.data, batch_size, axis=0), (a,), backward)


def sum(a: Tensor, axis: Optional[Union[int, Tuple[int, ...]]] = None) -> Tensor:  # noqa: A001
    axes = tuple(range(a.ndim)) if axis is None else (axis if isinstance(axis, tuple) else (axis,))

    def backward(grad: np.ndarray) -> Sequence[np.ndarray]:
        expanded = np.expand_dims(grad, axes)
        return (np.broadcast_to(expanded, a.shape).astype(grad.dtype, copy=True),)

    return _record(np.asarray(a.data.sum(axis=axes)), (a,), backward)


def mean(a: Tensor) -> Tensor:
    return mul(sum(a), 1.0 / a.data.size)


# Convolutions ---------------------------------------------------------------


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _windows(padded: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    view = sliding_window_view(padded, (kh, kw), axis=(2, 3))
    return view[:, :, ::stride, ::stride]


def _pad(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _correlate(x: np.ndarray, weight: np.ndarray, stride: int, padding: int) -> np.ndarray:
    _, _, kh, kw = weight.shape
    windows = _windows(_pad(x, padding), kh, kw, stride)
    out = np.tensordot(windows, weight, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def _scatter(
    x: np.ndarray, weight: np.ndarray, stride: int, padding: int, out_hw: Tuple[int, int]
) -> np.ndarray:
    """Adjoint of :func:`_correlate` with respect to its input."""

    n, _, h, w = x.shape
    _, c, kh, kw = weight.shape
    cols = np.tensordot(x, weight, axes=([1], [0]))  # N, H, W, C, kh, kw
    padded = np.zeros((n, c, out_hw[0] + 2 * padding, out_hw[1] + 2 * padding), dtype=cols.dtype)
    row_span = stride * (h - 1) + 1
    col_span = stride * (w - 1) + 1
    for i in range(kh):
        for j in range(kw):
            padded[:, :, i : i + row_span : stride, j : j + col_span : stride] += cols[
                :, :, :, :, i, j
            ].transpose(0, 3, 1, 2)
    return padded[:, :, padding : padding + out_hw[0], padding : padding + out_hw[1]]


def _filter_grad(
    upstream: np.ndarray, source: np.ndarray, kh: int, kw: int, stride: int, padding: int
) -> np.ndarray:
    windows = _windows(_pad(source, padding), kh, kw, stride)
    return np.tensordot(upstream, windows, axes=([0, 2, 3], [0, 2, 3]))


def _check_conv(x: Tensor, weight: Tensor, stride: int, padding: int, in_axis: int) -> None:
    if x.ndim != 4 or weight.ndim != 4:
        raise ContractViolation(
            f"convolution needs 4-D input and kernel, got {x.shape} and {weight.shape}"
        )
    if x.shape[1] != weight.shape[in_axis]:
        raise ContractViolation(
            f"channel mismatch: input {x.shape} against kernel {weight.shape}"
        )
    if stride < 1 or padding < 0:
        raise ContractViolation(f"invalid stride {stride} or padding {padding}")


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    *,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """Strided cross-correlation. ``weight`` is (out_c, in_c, kh, kw)."""

    _check_conv(x, weight, stride, padding, in_axis=1)
    _, _, h, w = x.shape
    out_c, _, kh, kw = weight.shape
    out_h = conv_output_size(h, kh, stride, padding)
    out_w = conv_output_size(w, kw, stride, padding)
    if out_h < 1 or out_w < 1:
        raise ContractViolation(
            f"kernel {weight.shape} with stride {stride}, padding {padding} "
            f"does not fit input {x.shape}"
        )
    out = _correlate(x.data, weight.data, stride, padding)
    if bias is not None:
        if bias.shape != (out_c,):
            raise ContractViolation(f"bias shape {bias.shape} does not match kernel {weight.shape}")
        out = out + bias.data.reshape(1, out_c, 1, 1)

    def backward(grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        grad_x = _scatter(grad, weight.data, stride, padding, (h, w)) if x.requires_grad else None
        grad_w = _filter_grad(grad, x.data, kh, kw, stride, padding) if weight.requires_grad else None
        grads: List[Optional[np.ndarray]] = [grad_x, grad_w]
        if bias is not None:
            grads.append(grad.sum(axis=(0, 2, 3)))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _record(out, parents, backward)


def conv_transpose2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    *,
    stride: int = 1,
    padding: int = 0,
    output_padding: int = 0,
) -> Tensor:
    """Adjoint of :func:`conv2d` with the same ``weight`` layout.

    ``x`` carries ``weight.shape[0]`` channels; the result carries
    ``weight.shape[1]`` channels and spatial size
    ``(h - 1) * stride - 2 * padding + kh + output_padding``.
    """

    _check_conv(x, weight, stride, padding, in_axis=0)
    if output_padding < 0 or output_padding >= stride:
        raise ContractViolation(f"output_padding {output_padding} must be below stride {stride}")
    _, _, h, w = x.shape
    _, out_c, kh, kw = weight.shape
    out_h = (h - 1) * stride - 2 * padding + kh + output_padding
    out_w = (w - 1) * stride - 2 * padding + kw + output_padding
    if out_h < 1 or out_w < 1:
        raise ContractViolation(
            f"transposed kernel {weight.shape} with stride {stride}, padding {padding} "
            f"yields an empty output for input {x.shape}"
        )
    out = _scatter(x.data, weight.data, stride, padding, (out_h, out_w))
    if bias is not None:
        if bias.shape != (out_c,):
            raise ContractViolation(f"bias shape {bias.shape} does not match kernel {weight.shape}")
        out = out + bias.data.reshape(1, out_c, 1, 1)

    def backward(grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        grad_x = _correlate(grad, weight.data, stride, padding) if x.requires_grad else None
        grad_w = _filter_grad(x.data, grad, kh, kw, stride, padding) if weight.requires_grad else None
        grads: List[Optional[np.ndarray]] = [grad_x, grad_w]
        if bias is not None:
            grads.append(grad.sum(axis=(0, 2, 3)))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _record(out, parents, backward)


# Likelihood kernels ----------------------------------------------------------


def gaussian_bin_log_mass(x: np.ndarray, mean: Tensor, log_var: Tensor, half_width: float) -> Tensor:
    """log of the Gaussian mass on [x - half_width, x + half_width], elementwise.

    ``x`` is a constant. Differences of normal CDFs are taken in the lower tail
    to keep precision when both bin edges sit far above the mean.
    """

    sigma = np.exp(0.5 * log_var.data)
    lower = (x - half_width - mean.data) / sigma
    upper = (x + half_width - mean.data) / sigma
    flip = lower > 0.0
    a = np.where(flip, -upper, lower)
    b = np.where(flip, -lower, upper)
    log_b = special.log_ndtr(b)
    log_a = special.log_ndtr(a)
    log_mass = log_b + np.log1p(-np.exp(np.minimum(log_a - log_b, 0.0)))
    log_mass = np.maximum(log_mass, np.log(np.finfo(mean.dtype).tiny))
    log_density_lower = -0.5 * lower * lower - 0.5 * np.log(2.0 * np.pi)
    log_density_upper = -0.5 * upper * upper - 0.5 * np.log(2.0 * np.pi)
    ratio_lower = np.exp(log_density_lower - log_mass)
    ratio_upper = np.exp(log_density_upper - log_mass)

    def backward(grad: np.ndarray) -> Sequence[np.ndarray]:
        grad_mean = grad * (ratio_lower - ratio_upper) / sigma
        grad_log_var = grad * 0.5 * (lower * ratio_lower - upper * ratio_upper)
        return grad_mean, grad_log_var

    return _record(log_mass.astype(mean.dtype, copy=False), (mean, log_var), backward)
