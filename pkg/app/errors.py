"""
errors.py – Exception hierarchy shared by every layer of the library.
"""

from __future__ import annotations

from typing import Any


class NanoFlowError(Exception):
    """Root of all library errors."""


class ConfigurationError(NanoFlowError):
    pass


class ContractError(NanoFlowError):
    pass


class DimensionError(NanoFlowError):
    pass


class NumericError(NanoFlowError):
    """Numeric failure, optionally tagged with the 1-based flow index it came from."""

    def __init__(self, message: str, flow_index: int | None = None) -> None:
        self.flow_index = flow_index
        self.detail = message
        if flow_index is not None:
            message = f"flow {flow_index}: {message}"
        super().__init__(message)

    def with_flow(self, flow_index: int) -> "NumericError":
        if self.flow_index is not None:
            return self
        return type(self)(self.detail, flow_index=flow_index)


class NumericDomainError(NumericError):
    pass


class NonFiniteError(NumericError):
    pass


class NumericStabilityError(NumericError):
    pass


class InvertibilityError(NumericError):
    pass


class OracleError(NanoFlowError):
    pass


class TopologyError(NanoFlowError):
    pass


class DataError(NanoFlowError):
    pass


class DataFormatError(DataError):
    pass


class DivergenceError(NanoFlowError):
    def __init__(self, message: str, diagnostics: dict[str, Any] | None = None) -> None:
        self.diagnostics = diagnostics or {}
        super().__init__(message)
