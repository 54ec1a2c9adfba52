"""Exception types raised across the pipeline modules."""


class FactPipeError(Exception):
    """Base class for every error this package raises deliberately."""


class ContractViolation(FactPipeError):
    """A caller broke a documented precondition or an invariant failed."""


class ConfigError(FactPipeError):
    """Bad or missing configuration (flags, env vars, config file)."""


# --- retrieval ---------------------------------------------------------


class NetworkError(FactPipeError):
    """Transient search-API failure; retried with backoff before surfacing."""


class QuotaExceeded(FactPipeError):
    """Search-API quota or payment failure; never retried."""


class OfflineCacheMiss(FactPipeError):
    """Query not present in the replay cache while running offline."""


class EmptyQuerySet(FactPipeError):
    """A bundle retrieval was asked to run over zero queries."""


class EmptyBundle(FactPipeError):
    """An operation that needs evidence entries received an empty bundle."""


class RetrievalError(FactPipeError):
    """A search error during bundle retrieval, annotated with its position."""

    def __init__(self, index: int, query: str, cause: Exception):
        super().__init__(f"query {index} ({query!r}) failed: {cause}")
        self.index = index
        self.query = query
        self.cause = cause


# --- gateway ------------------------------------------------------------


class BackendTimeout(FactPipeError):
    """The inference backend did not answer within the configured timeout."""


class BackendHTTPError(FactPipeError):
    """HTTP-level failure from the inference backend."""

    def __init__(self, status, message: str = ""):
        super().__init__(f"backend HTTP error (status={status}) {message}".strip())
        self.status = status


class MockFixtureMiss(FactPipeError):
    """The mock backend has no fixture for this prompt and no oracle rule."""


class WhollyUnparseable(FactPipeError):
    """Non-empty model output with no claim line and no sentinel."""


# --- scorer -------------------------------------------------------------


class DegenerateK(FactPipeError):
    """The batch median claim count is zero; no recall target exists."""


class EmptyBatch(FactPipeError):
    """An aggregate was requested over zero reports."""


# --- staged pipeline ----------------------------------------------------


class UnparseableVerdict(FactPipeError):
    """A verification call returned neither label unambiguously."""


class PipelineError(FactPipeError):
    """A stage failed while processing one response; carries a partial trace."""

    def __init__(self, stage: str, cause: Exception, trace=None, index=None):
        where = f" at index {index}" if index is not None else ""
        super().__init__(f"{stage} stage failed{where}: {cause}")
        self.stage = stage
        self.cause = cause
        self.trace = trace
        self.index = index


# --- meta evaluation ----------------------------------------------------


class ConstantInput(FactPipeError):
    """Pearson correlation is undefined for a constant vector."""


class LengthMismatch(FactPipeError):
    """Paired vectors (or paired files) have different lengths."""


class DuplicateSystemId(FactPipeError):
    """Two system scores share an id; ranking would be ambiguous."""


class JudgeGrammarError(FactPipeError):
    """A judge response violated the Thoughts/Justifying Facts/Judgement grammar."""


# --- data generation ----------------------------------------------------


class UnparseableJudgement(FactPipeError):
    """A sieve response contained no Yes/No judgement."""


class UnpairedRecord(FactPipeError):
    """A response id lacks one of the two evidence granularities."""


# --- cli ----------------------------------------------------------------


class IdMismatch(FactPipeError):
    """Two results files do not cover the same response ids."""
