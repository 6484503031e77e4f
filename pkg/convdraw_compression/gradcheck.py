"""Finite-difference verification of tape gradients."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Mapping, Optional, Union

import numpy as np

from .errors import ContractViolation
from .params import ParamStore
from .tensor import Tensor

LOGGER = logging.getLogger(__name__)


@dataclass(slots=True)
class GradCheckReport:
    max_rel_error: float
    worst_param: Optional[str]
    worst_index: Optional[tuple[int, ...]]
    analytic: float
    numeric: float
    checked: int


def grad_check(
    loss_fn: Callable[[], Tensor],
    params: Union[ParamStore, Mapping[str, Tensor]],
    eps: float = 1e-5,
    *,
    floor: float = 1e-3,
    max_elements: Optional[int] = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare reverse-mode gradients with central finite differences.

    ``loss_fn`` must rebuild the scalar loss from the current parameter values
    and be deterministic (any sampling noise frozen by the caller). The relative
    error of one element is ``|a - n| / max(|a| + |n|, floor)``. With
    ``max_elements`` set, at most that many randomly chosen entries of each
    parameter are perturbed.
    """

    named = dict(params.items())
    for tensor in named.values():
        tensor.grad = None
    loss = loss_fn()
    if loss.data.size != 1:
        raise ContractViolation(f"grad_check needs a scalar loss, got shape {loss.shape}")
    loss.backward()
    analytic = {
        name: (tensor.grad.copy() if tensor.grad is not None else np.zeros_like(tensor.data))
        for name, tensor in named.items()
    }

    rng = np.random.default_rng(seed)
    report = GradCheckReport(0.0, None, None, 0.0, 0.0, 0)
    for name, tensor in named.items():
        flat = tensor.data.reshape(-1)
        indices = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            indices = np.sort(rng.choice(flat.size, size=max_elements, replace=False))
        for flat_index in indices:
            original = flat[flat_index]
            flat[flat_index] = original + eps
            plus = float(loss_fn().data)
            flat[flat_index] = original - eps
            minus = float(loss_fn().data)
            flat[flat_index] = original
            numeric = (plus - minus) / (2.0 * eps)
            exact = float(analytic[name].reshape(-1)[flat_index])
            rel = abs(exact - numeric) / max(abs(exact) + abs(numeric), floor)
            report.checked += 1
            if rel > report.max_rel_error or report.worst_param is None:
                report.max_rel_error = rel
                report.worst_param = name
                report.worst_index = tuple(int(i) for i in np.unravel_index(flat_index, tensor.shape))
                report.analytic = exact
                report.numeric = numeric
    LOGGER.debug(
        "Gradient check over %s entries: worst %.3e at %s%s",
        report.checked,
        report.max_rel_error,
        report.worst_param,
        report.worst_index,
    )
    return report
