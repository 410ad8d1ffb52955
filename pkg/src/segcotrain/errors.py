"""Exception taxonomy shared by the CLI exit-code mapping."""


class ConfigError(ValueError):
    """Invalid configuration value or file (CLI exit code 2)."""


class DataError(RuntimeError):
    """Missing or unreadable dataset artifact (CLI exit code 3)."""


class TrainerError(RuntimeError):
    """Trainer protocol failure, with any captured trainer log attached (CLI exit code 4)."""

    def __init__(self, message: str, log_tail: str | None = None):
        super().__init__(message if not log_tail else f"{message}\n--- trainer log ---\n{log_tail}")
        self.log_tail = log_tail
