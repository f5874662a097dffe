"""Exception types shared across the toolkit.

Every error raised by a public operation derives from EchoLensError so the
CLI can map failures to machine-readable JSON with a stable ``code`` field.
"""

from __future__ import annotations


class EchoLensError(Exception):
    """Base class; ``code`` is the stable machine-readable identifier."""

    code = "error"


class SchemaError(EchoLensError):
    code = "schema"

    def __init__(self, message: str, *, line: int | None = None, field: str | None = None):
        self.line = line
        self.field = field
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field!r}")
        suffix = f" ({', '.join(where)})" if where else ""
        super().__init__(f"{message}{suffix}")


# trace_model / segments
class MissingEchoSpan(EchoLensError):
    code = "missing_echo_span"


# probe
class DimensionMismatch(EchoLensError):
    code = "dimension_mismatch"


class NoPositives(EchoLensError):
    code = "no_positives"


class NonFiniteLoss(EchoLensError):
    code = "non_finite_loss"


class SingleClassTestSet(EchoLensError):
    code = "single_class_test_set"


class EmptyPrefixList(EchoLensError):
    code = "empty_prefix_list"


# toy oracle
class StateSpaceTooLarge(EchoLensError):
    code = "state_space_too_large"


class ZeroMass(EchoLensError):
    code = "zero_mass"


class NotTrimSequence(EchoLensError):
    code = "not_trim_sequence"


class RejectionBudgetExceeded(EchoLensError):
    code = "rejection_budget_exceeded"


# likelihood
class EmptySpan(EchoLensError):
    code = "empty_span"


class OutOfBounds(EchoLensError):
    code = "out_of_bounds"


class MissingRescoring(EchoLensError):
    code = "missing_rescoring"


class EmptySuffix(EchoLensError):
    code = "empty_suffix"


class NoRemovedTokens(EchoLensError):
    code = "no_removed_tokens"


class UnlabeledRecord(EchoLensError):
    code = "unlabeled_record"


# attention
class EmptyQuerySet(EchoLensError):
    code = "empty_query_set"


class IndexOutOfRange(EchoLensError):
    code = "index_out_of_range"


class MissingBoundaryConfig(EchoLensError):
    code = "missing_boundary_config"


class MissingGroup(EchoLensError):
    code = "missing_group"


class MissingDetailMode(EchoLensError):
    code = "missing_detail_mode"


class SingleClass(EchoLensError):
    code = "single_class"


# stats
class EmptyClass(EchoLensError):
    code = "empty_class"


class DegenerateVariance(EchoLensError):
    code = "degenerate_variance"


class TooFewSamples(EchoLensError):
    code = "too_few_samples"


class Separation(EchoLensError):
    code = "separation"


class SingularDesign(EchoLensError):
    code = "singular_design"


class NonConvergence(EchoLensError):
    code = "non_convergence"


# orchestrator
class EndpointUnreachable(EchoLensError):
    code = "endpoint_unreachable"


class RateLimited(EchoLensError):
    code = "rate_limited"


class MalformedResponse(EchoLensError):
    code = "malformed_response"


class EmptyTrace(EchoLensError):
    code = "empty_trace"


class NoAnswerFound(EchoLensError):
    code = "no_answer_found"


# sft factory
class ThinkBlockMissing(EchoLensError):
    code = "think_block_missing"


class AnswerChanged(EchoLensError):
    code = "answer_changed"


class EmptyPool(EchoLensError):
    code = "empty_pool"


# cli
class UsageError(EchoLensError):
    code = "usage"
