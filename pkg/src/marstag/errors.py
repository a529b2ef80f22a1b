"""Exceptions shared across the pipeline.

Every error carries a stable machine-readable ``code`` string (for example
``UNKNOWN_CLASS`` or ``DIMENSION_MISMATCH``) so that callers and the CLI can
react to the failure class without parsing prose.
"""


class MarstagError(Exception):
    """Base error with a stable code and a human-readable message."""

    exit_status = 3  # CLI "data error"

    def __init__(self, code: str, message: str):
        self.code = code
        super().__init__(message)

    def __str__(self) -> str:
        return f"{self.code}: {super().__str__()}"


class ConfigError(MarstagError):
    """Invalid configuration; rejected before any work is attempted."""

    exit_status = 2

    def __init__(self, message: str, code: str = "CONFIG_ERROR"):
        super().__init__(code, message)
