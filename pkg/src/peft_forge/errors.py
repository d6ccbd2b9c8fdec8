"""Exception hierarchy shared across the package.

Everything raised on purpose derives from PeftForgeError so the CLI can map
failures to its exit-code contract without enumerating modules.
"""


class PeftForgeError(Exception):
    """Base class for all peft-forge errors."""


class QuantizationError(PeftForgeError):
    """Input outside the quantizable domain (non-finite values, empty tensor)."""


class IntegrityError(PeftForgeError):
    """Stored quantized data is inconsistent (bad codes, shape mismatch)."""


class ConfigError(PeftForgeError):
    """Invalid model / adapter / optimizer / profile configuration."""


class SchemaError(PeftForgeError):
    """A dataset record violates the corpus schema."""


class ProviderError(PeftForgeError):
    """The text-generation provider failed (network, HTTP status, bad body)."""


class AuthError(ProviderError):
    """Provider credential missing or rejected."""


class DivergenceError(PeftForgeError):
    """Training produced a non-finite loss, gradient, or update."""


class CheckpointError(PeftForgeError):
    """Checkpoint file is unreadable, truncated, or from a different config."""


class ReportError(PeftForgeError):
    """Training log files could not be parsed into a report."""
