"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ContractError(RuntimeError):
    """A documented precondition was violated by the caller."""


class MergeStateError(ContractError):
    """Merge/unmerge called in the wrong state, or a merged projection was
    used with a prompt other than the one folded into its bias."""


class ConfigError(ValueError):
    """Invalid configuration value (bad rank, unknown enum member, ...)."""


class CorpusError(ValueError):
    """Corpus file violates the documented JSON schema or an invariant."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""
