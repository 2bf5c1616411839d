"""Exception types shared across the package."""


class RegverifyError(Exception):
    """Base class for all package-specific failures."""


class InvalidInputError(RegverifyError, ValueError):
    """An argument violates a documented precondition."""


class ConfigError(RegverifyError, ValueError):
    """A configuration object is internally inconsistent."""


class GenerationError(RegverifyError, RuntimeError):
    """Dataset generation could not satisfy its constraints."""


class TrainingError(RegverifyError, RuntimeError):
    """Training diverged or was asked to run on unusable data."""


class DataLeakageError(RegverifyError, RuntimeError):
    """Sample or specimen overlap detected between splits that must be disjoint."""


class InvalidStateError(RegverifyError, RuntimeError):
    """An operation was invoked on an object in an unusable state."""


class DependencyError(RegverifyError, RuntimeError):
    """A required upstream artifact is missing.  Lists what to build."""

    def __init__(self, missing: list[str]):
        self.missing = list(missing)
        super().__init__("missing required artifacts: " + ", ".join(self.missing))


class ProtocolError(RegverifyError, RuntimeError):
    """A review-session request violated the study protocol."""


class ShortageError(RegverifyError, RuntimeError):
    """A sampling request exceeded the available members of a category."""

    def __init__(self, category: str, requested: int, available: int):
        self.category = category
        self.requested = requested
        self.available = available
        super().__init__(
            f"category {category!r} has only {available} members, {requested} requested"
        )
