"""Custom exceptions and error handling for the IPA ASR toolkit."""

from typing import Optional, Dict, Any, List
from datetime import datetime
from fastapi import Request
from fastapi.responses import JSONResponse
import functools
import logging

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_INTERNAL = 3


# Base exception class
class ToolkitError(Exception):
    """Base exception class for toolkit errors."""

    def __init__(self, message: str, error_code: str = "GENERIC_ERROR", details: Optional[Dict[str, Any]] = None):
        self.message = message
        self.error_code = error_code
        self.details = details or {}
        self.timestamp = datetime.now()
        super().__init__(self.message)


# Inventory-related exceptions
class InventoryError(ToolkitError):
    """Base class for phoneme inventory errors."""

    pass


class DuplicatePhoneme(InventoryError):
    """Raised when an inventory lists the same surface twice."""

    def __init__(self, surface: str, line: Optional[int] = None):
        super().__init__(
            message=f"Duplicate phoneme '{surface}'" + (f" at line {line}" if line else ""),
            error_code="DUPLICATE_PHONEME",
            details={"surface": surface, "line": line},
        )


class MissingSpecialToken(InventoryError):
    """Raised when the blank or separator directive is absent."""

    def __init__(self, token: str):
        super().__init__(
            message=f"Inventory is missing the '{token}' special token",
            error_code="MISSING_SPECIAL_TOKEN",
            details={"token": token},
        )


class NormalizationError(InventoryError):
    """Raised when input text is not NFC-normalized."""

    def __init__(self, text: str, line: Optional[int] = None):
        super().__init__(
            message=f"Text {text!r} is not NFC-normalized" + (f" (line {line})" if line else ""),
            error_code="NORMALIZATION_ERROR",
            details={"text": text, "line": line},
        )


class SegmentationError(ToolkitError):
    """Raised when a string cannot be segmented into inventory phonemes."""

    def __init__(self, text: str, byte_offset: int, grapheme: str):
        self.byte_offset = byte_offset
        self.grapheme = grapheme
        super().__init__(
            message=f"Cannot segment {grapheme!r} at byte offset {byte_offset} in {text!r}",
            error_code="SEGMENTATION_ERROR",
            details={"text": text, "byte_offset": byte_offset, "grapheme": grapheme},
        )


class ParseError(ToolkitError):
    """Raised when an input file is malformed."""

    def __init__(self, message: str, line: Optional[int] = None, source: Optional[str] = None):
        self.line = line
        prefix = f"{source}: " if source else ""
        suffix = f" (line {line})" if line is not None else ""
        super().__init__(
            message=f"{prefix}{message}{suffix}",
            error_code="PARSE_ERROR",
            details={"line": line, "source": source},
        )


# Corpus-related exceptions
class CorpusError(ToolkitError):
    """Base class for corpus and manifest errors."""

    pass


class EmptyCorpus(CorpusError):
    """Raised when no usable utterances or transcripts remain."""

    def __init__(self, what: str = "corpus"):
        super().__init__(message=f"No usable data in {what}", error_code="EMPTY_CORPUS", details={"what": what})


class IdMismatch(CorpusError):
    """Raised when reference and hypothesis ids disagree."""

    def __init__(self, missing: List[str], unexpected: List[str]):
        super().__init__(
            message=f"Id mismatch: {len(missing)} missing, {len(unexpected)} unexpected",
            error_code="ID_MISMATCH",
            details={"missing": missing, "unexpected": unexpected},
        )


class MissingLogits(CorpusError):
    """Raised when logit files are absent for some utterances."""

    def __init__(self, ids: List[str]):
        super().__init__(
            message=f"Missing logits for {len(ids)} utterance(s): {', '.join(ids[:10])}",
            error_code="MISSING_LOGITS",
            details={"ids": ids},
        )


# Decoding-related exceptions
class DecodeError(ToolkitError):
    """Base class for decoding errors."""

    pass


class ShapeError(DecodeError):
    """Raised when matrix dimensions disagree."""

    def __init__(self, expected: Any, actual: Any, what: str = "vocabulary size"):
        super().__init__(
            message=f"Shape mismatch in {what}: expected {expected}, got {actual}",
            error_code="SHAPE_ERROR",
            details={"expected": expected, "actual": actual, "what": what},
        )


class InvalidLogits(DecodeError):
    """Raised when logits contain NaN or are not log-softmax normalized."""

    def __init__(self, reason: str):
        super().__init__(message=f"Invalid logits: {reason}", error_code="INVALID_LOGITS", details={"reason": reason})


# Remapping-related exceptions
class RemapError(ToolkitError):
    """Base class for output-layer remapping errors."""

    pass


class UndecomposablePhoneme(RemapError):
    """Raised when a new phoneme cannot be built from old vocabulary symbols."""

    def __init__(self, surface: str, suffix: str):
        super().__init__(
            message=f"Cannot decompose '{surface}': no old symbols cover '{suffix}'",
            error_code="UNDECOMPOSABLE_PHONEME",
            details={"surface": surface, "suffix": suffix},
        )


class IndexOutOfRange(RemapError):
    """Raised when a composition refers outside the old weight matrix."""

    def __init__(self, index: int, size: int):
        super().__init__(
            message=f"Column index {index} out of range for {size} columns",
            error_code="INDEX_OUT_OF_RANGE",
            details={"index": index, "size": size},
        )


class NonFiniteWeights(RemapError):
    """Raised when a weight bundle contains NaN or infinity."""

    def __init__(self, where: str):
        super().__init__(message=f"Non-finite values in {where}", error_code="NON_FINITE_WEIGHTS", details={"where": where})


# Fitting-related exceptions
class FitError(ToolkitError):
    """Base class for curve fitting errors."""

    pass


class InsufficientPoints(FitError):
    """Raised when too few points are available for a fit."""

    def __init__(self, have: int, need: int):
        super().__init__(
            message=f"Need at least {need} points with distinct x, have {have}",
            error_code="INSUFFICIENT_POINTS",
            details={"have": have, "need": need},
        )


class DegenerateJacobian(FitError):
    """Raised when the Jacobian cannot identify the parameters."""

    def __init__(self, reason: str):
        super().__init__(
            message=f"Degenerate Jacobian: {reason}", error_code="DEGENERATE_JACOBIAN", details={"reason": reason}
        )


class SingularCovariance(FitError):
    """Raised when J^T J cannot be inverted."""

    def __init__(self):
        super().__init__(message="Parameter covariance is singular", error_code="SINGULAR_COVARIANCE")


# Usage and validation exceptions
class UsageError(ToolkitError):
    """Raised for invalid command-line usage."""

    def __init__(self, message: str):
        super().__init__(message=message, error_code="USAGE_ERROR")


class ValidationError(ToolkitError):
    """Raised when data validation fails."""

    def __init__(self, field: str, value: Any, reason: str):
        super().__init__(
            message=f"Validation failed for field '{field}': {reason}",
            error_code="VALIDATION_ERROR",
            details={"field": field, "value": str(value), "reason": reason},
        )


def exit_code_for(exc: BaseException) -> int:
    """Map an exception to the CLI exit code."""
    if isinstance(exc, UsageError):
        return EXIT_USAGE
    if isinstance(exc, ToolkitError):
        return EXIT_INTERNAL if exc.error_code == "INTERNAL_ERROR" else EXIT_DATA
    return EXIT_INTERNAL


# Error handlers
def create_error_response(error: ToolkitError, status_code: int = 500) -> JSONResponse:
    """Create a standardized error response."""
    return JSONResponse(
        status_code=status_code,
        content={
            "error": error.error_code,
            "message": error.message,
            "details": error.details,
            "timestamp": error.timestamp.isoformat(),
        },
    )


async def app_exception_handler(request: Request, exc: ToolkitError) -> JSONResponse:
    """Global exception handler for toolkit exceptions."""
    logger.error(
        f"Toolkit error: {exc.message}",
        extra={"error_code": exc.error_code, "details": exc.details, "path": request.url.path, "method": request.method},
    )

    status_code = 500
    if isinstance(exc, ValidationError):
        status_code = 422
    elif isinstance(exc, (InventoryError, SegmentationError, ParseError, CorpusError, DecodeError, FitError, UsageError)):
        status_code = 400
    return create_error_response(exc, status_code)


async def general_exception_handler(request: Request, exc: Exception) -> JSONResponse:
    """Global exception handler for general exceptions."""
    logger.error(
        f"Unexpected error: {str(exc)}", extra={"path": request.url.path, "method": request.method}, exc_info=True
    )

    error = ToolkitError(
        message="An unexpected error occurred", error_code="INTERNAL_ERROR", details={"original_error": str(exc)}
    )
    return create_error_response(error, 500)


def handle_service_error(func):
    """Decorator that wraps unexpected failures of a pipeline stage into ToolkitError."""

    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except ToolkitError:
            raise
        except Exception as e:
            logger.error(f"Service error in {func.__name__}: {str(e)}", exc_info=True)
            raise ToolkitError(
                message=f"Service error in {func.__name__}: {e}",
                error_code="INTERNAL_ERROR",
                details={"function": func.__name__, "error": str(e)},
            ) from e

    return wrapper

