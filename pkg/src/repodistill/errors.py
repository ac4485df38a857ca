"""Exception hierarchy shared across the pipeline."""

from __future__ import annotations


class RepodistillError(Exception):
    """Base class for all pipeline errors."""


# --- gateway ---------------------------------------------------------------

class TransportError(RepodistillError):
    """A provider call failed at the transport level.

    ``retryable`` marks transient failures (timeouts, 429/5xx); the gateway
    retries those with backoff and gives up after the configured count.
    """

    def __init__(self, message: str, *, retryable: bool = True):
        super().__init__(message)
        self.retryable = retryable


class BudgetExceeded(RepodistillError):
    """The pending call would push the cost ledger past its cap."""


class ReplayMiss(RepodistillError):
    """The replay transcript has no recorded response for this fingerprint."""


class TranscriptParseError(RepodistillError):
    """A replay transcript file could not be parsed."""


class PriceTableError(RepodistillError):
    """The price table is missing or malformed for a requested model."""


# --- ingest ----------------------------------------------------------------

class ApiRateLimited(RepodistillError):
    """Hosting API rate limit hit; ``retry_after`` is in seconds when known."""

    def __init__(self, message: str, *, retry_after: float | None = None):
        super().__init__(message)
        self.retry_after = retry_after


class ApiAuthError(RepodistillError):
    """Hosting API rejected the configured credentials."""


class FetchError(RepodistillError):
    """A repository working copy could not be materialized."""


class RepoTooLarge(FetchError):
    """The repository exceeds the configured byte cap."""


# --- analysis / generation -------------------------------------------------

class MalformedResponse(RepodistillError):
    """An LLM response failed structured parsing after the repair retry."""


class PromptOverflow(RepodistillError):
    """An assembled prompt exceeds the configured context budget."""


class BundleParseError(RepodistillError):
    """Base class for bundle wire-format violations."""


class MissingSection(BundleParseError):
    def __init__(self, name: str):
        super().__init__(f"missing or empty bundle section: {name}")
        self.name = name


class MetadataParseError(BundleParseError):
    """The bundle metadata document is invalid."""


class BundleContractError(BundleParseError):
    """A parsed bundle violates a structural invariant (manifest syntax,
    run script not referencing the example file, ...)."""


# --- sandbox ---------------------------------------------------------------

class AdmissionError(RepodistillError):
    """Bundle resource requirements exceed the configured machine caps."""


class SandboxBackendError(RepodistillError):
    """The requested isolation backend is not available."""


# --- loop / library / eval / cli -------------------------------------------

class CorruptRecord(RepodistillError):
    """A persisted distillation record could not be loaded."""


class DuplicateEntry(RepodistillError):
    """A library entry id already exists with a different bundle digest."""


class IncompleteDesign(RepodistillError):
    """An A/B problem is missing one of the two counterbalanced ratings."""


class ConfigError(RepodistillError):
    """Pipeline configuration is invalid."""


class MissingInput(RepodistillError):
    """A report command was pointed at missing or empty inputs."""
