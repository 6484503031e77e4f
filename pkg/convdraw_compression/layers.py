"""Convolution kernels and the convolutional LSTM cell."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .errors import ContractViolation
from .params import ParamStore
from .tensor import Tensor

GATE_ORDER = ("input", "forget", "output", "candidate")
FORGET_BIAS = 1.0


@dataclass(slots=True)
class ConvKernel:
    """A weight tensor with optional bias and its stride/padding.

    The weight layout is (out_c, in_c, kh, kw) for both directions. When
    ``transposed`` is set the kernel maps ``out_c`` channels back to ``in_c``
    and the bias has ``in_c`` entries.
    """

    weight: Tensor
    bias: Optional[Tensor] = None
    stride: int = 1
    padding: int = 0
    transposed: bool = False

    def __post_init__(self) -> None:
        if self.weight.ndim != 4:
            raise ContractViolation(f"kernel weight must be 4-D, got {self.weight.shape}")
        if self.stride < 1:
            raise ContractViolation(f"stride must be >= 1, got {self.stride}")
        if self.padding < 0:
            raise ContractViolation(f"padding must be >= 0, got {self.padding}")
        if self.bias is not None:
            channels = self.weight.shape[1] if self.transposed else self.weight.shape[0]
            if self.bias.shape != (channels,):
                raise ContractViolation(
                    f"bias shape {self.bias.shape} does not match kernel {self.weight.shape}"
                )

    @classmethod
    def same(
        cls,
        weight: Tensor,
        bias: Optional[Tensor] = None,
        *,
        stride: int = 1,
        transposed: bool = False,
    ) -> "ConvKernel":
        """Kernel with floor(k/2) padding; only odd kernel sizes qualify."""

        kh, kw = weight.shape[2], weight.shape[3]
        if kh % 2 == 0 or kw % 2 == 0:
            raise ContractViolation(f"'same' padding needs odd kernel sizes, got {kh}x{kw}")
        return cls(weight, bias, stride=stride, padding=kh // 2, transposed=transposed)

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def size(self) -> Tuple[int, int]:
        return self.weight.shape[2], self.weight.shape[3]

    def apply(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)

    def apply_transpose(self, x: Tensor, out_hw: Tuple[int, int]) -> Tensor:
        """Transposed convolution sized to land exactly on ``out_hw``."""

        _, _, h, w = x.shape
        kh, kw = self.size
        extra_h = out_hw[0] - ((h - 1) * self.stride - 2 * self.padding + kh)
        extra_w = out_hw[1] - ((w - 1) * self.stride - 2 * self.padding + kw)
        if extra_h != extra_w:
            raise ContractViolation(
                f"transposed kernel cannot map {x.shape} onto {out_hw} with one output padding"
            )
        return T.conv_transpose2d(
            x,
            self.weight,
            self.bias,
            stride=self.stride,
            padding=self.padding,
            output_padding=extra_h,
        )


@dataclass(slots=True)
class ConvLstmState:
    """Hidden and cell maps of one convolutional LSTM."""

    h: Tensor
    c: Tensor

    def __post_init__(self) -> None:
        if self.h.shape != self.c.shape:
            raise ContractViolation(
                f"hidden map {self.h.shape} and cell map {self.c.shape} differ in shape"
            )

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.h.shape


@dataclass(slots=True)
class ConvLstmGates:
    """Every convolution feeding the four gates of one LSTM.

    ``inputs`` holds one bias-free kernel per input map (each producing
    ``4 * features`` channels), ``recurrent`` acts on the previous hidden map
    and ``bias`` is shared by all gates, chunked in :data:`GATE_ORDER`.
    """

    inputs: Tuple[ConvKernel, ...]
    recurrent: ConvKernel
    bias: Tensor

    @property
    def features(self) -> int:
        return self.recurrent.in_channels


def conv_lstm_step(
    state: ConvLstmState, input_maps: Sequence[Tensor], gates: ConvLstmGates
) -> ConvLstmState:
    """One LSTM update with every linear map replaced by a convolution.

    No peephole connections. c' = σ(f)·c + σ(i)·tanh(g), h' = σ(o)·tanh(c').
    """

    if len(input_maps) != len(gates.inputs):
        raise ContractViolation(
            f"LSTM expects {len(gates.inputs)} input maps, received {len(input_maps)}"
        )
    features = gates.features
    pre = gates.recurrent.apply(state.h)
    expected = (state.h.shape[0], 4 * features, state.h.shape[2], state.h.shape[3])
    if pre.shape != expected:
        raise ContractViolation(f"recurrent gates produced {pre.shape}, expected {expected}")
    for index, (source, kernel) in enumerate(zip(input_maps, gates.inputs)):
        contribution = kernel.apply(source)
        if contribution.shape != expected:
            raise ContractViolation(
                f"input map {index} of shape {source.shape} yields gates {contribution.shape}, "
                f"state needs {expected}"
            )
        pre = pre + contribution
    pre = pre + T.reshape(gates.bias, (1, 4 * features, 1, 1))

    input_gate = T.sigmoid(T.channel_slice(pre, 0, features))
    forget_gate = T.sigmoid(T.channel_slice(pre, features, 2 * features))
    output_gate = T.sigmoid(T.channel_slice(pre, 2 * features, 3 * features))
    candidate = T.tanh(T.channel_slice(pre, 3 * features, 4 * features))

    cell = forget_gate * state.c + input_gate * candidate
    hidden = output_gate * T.tanh(cell)
    return ConvLstmState(h=hidden, c=cell)


# Initialisation ---------------------------------------------------------------


def uniform_weight(
    rng: np.random.Generator, out_c: int, in_c: int, kh: int, kw: int
) -> np.ndarray:
    """Uniform in ±sqrt(3 / fan_in), which keeps unit variance through the layer."""

    fan_in = max(in_c * kh * kw, 1)
    limit = math.sqrt(3.0 / fan_in)
    return rng.uniform(-limit, limit, size=(out_c, in_c, kh, kw))


def lstm_bias(features: int) -> np.ndarray:
    bias = np.zeros(4 * features)
    bias[features : 2 * features] = FORGET_BIAS
    return bias


@dataclass(slots=True)
class GateInput:
    """Describes one input feeding an LSTM: name, channels, kernel size and stride."""

    name: str
    channels: int
    kernel: int
    stride: int = 1


def build_conv_lstm(
    store: ParamStore,
    prefix: str,
    inputs: Sequence[GateInput],
    features: int,
    recurrent_kernel: int,
    rng: np.random.Generator,
) -> ConvLstmGates:
    """Register the parameters of one convolutional LSTM in ``store``."""

    kernels = []
    for spec in inputs:
        weight = store.add(
            f"{prefix}.in.{spec.name}.weight",
            uniform_weight(rng, 4 * features, spec.channels, spec.kernel, spec.kernel),
        )
        kernels.append(ConvKernel.same(weight, stride=spec.stride))
    recurrent = store.add(
        f"{prefix}.rec.weight",
        uniform_weight(rng, 4 * features, features, recurrent_kernel, recurrent_kernel),
    )
    bias = store.add(f"{prefix}.bias", lstm_bias(features))
    return ConvLstmGates(inputs=tuple(kernels), recurrent=ConvKernel.same(recurrent), bias=bias)
