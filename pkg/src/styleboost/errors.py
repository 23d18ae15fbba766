"""Exception types shared across the package."""


class ConfigError(ValueError):
    """A configuration value violates a precondition."""


class VocabularyError(KeyError):
    """A prompt token is not present in the vocabulary."""


class ContractError(RuntimeError):
    """A caller violated an API contract (e.g. training a frozen model)."""


class IntegrityError(RuntimeError):
    """Stored artifacts are inconsistent (duplicate paths, seed overlap, ...)."""
