"""Exception hierarchy shared by every stage of the pipeline."""

from __future__ import annotations


class MetcrossError(Exception):
    """Base class for all errors raised by this package."""


class DataError(MetcrossError, ValueError):
    """Malformed, misaligned or insufficient input data."""


class ShapeError(MetcrossError, ValueError):
    """Array shapes that do not match a network or operator contract."""


class DivergenceError(MetcrossError, FloatingPointError):
    """Training produced a non-finite loss or parameter."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


def with_context(err: MetcrossError, context: str) -> MetcrossError:
    """Prefix ``err``'s message with ``context`` in place and return it for re-raising."""
    head = f"{context}: {err.args[0]}" if err.args else context
    err.args = (head, *err.args[1:])
    return err
