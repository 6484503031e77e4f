"""Exception hierarchy shared by every module of the package."""
from __future__ import annotations

from typing import Optional


class ConvDrawError(Exception):
    """Base class for errors raised by the toolkit."""


class ContractViolation(ConvDrawError, ValueError):
    """An argument broke a documented precondition (shape, range, finiteness)."""


class NumericFault(ConvDrawError, ArithmeticError):
    """Non-finite values appeared in activations, losses or gradients."""

    def __init__(
        self,
        message: str,
        *,
        step: Optional[int] = None,
        param: Optional[str] = None,
    ) -> None:
        super().__init__(message)
        self.step = step
        self.param = param


class CorruptStreamError(ConvDrawError):
    """A bitstream or checkpoint could not be parsed."""


class ModelMismatchError(ConvDrawError):
    """A bitstream was produced by a different model than the one loaded."""


class DatasetError(ConvDrawError):
    """A dataset file is missing, truncated or inconsistent with its declared layout."""
