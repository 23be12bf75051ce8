class SplatHumanError(Exception):
    """Base class for errors raised by this package."""


class ParameterDomainError(SplatHumanError, ValueError):
    pass


class FormatError(SplatHumanError, ValueError):
    """A file did not match its binary or text layout.

    ``field`` names the offending header field or ``"record"``; ``record`` is
    the index of the first incomplete record when the file was truncated.
    """

    def __init__(self, field: str, message: str, record: int | None = None):
        super().__init__(f"{field}: {message}")
        self.field = field
        self.record = record


class InputError(SplatHumanError, ValueError):
    pass


class ConfigError(SplatHumanError, ValueError):
    pass


class NumericError(SplatHumanError, FloatingPointError):
    """Non-finite values appeared; ``where`` names the stage or step."""

    def __init__(self, where: str, message: str = "non-finite values"):
        super().__init__(f"{where}: {message}")
        self.where = where


class ExtractionError(SplatHumanError, RuntimeError):
    pass


class IntegrityError(SplatHumanError, RuntimeError):
    def __init__(self, entry_id: str, message: str):
        super().__init__(f"{entry_id}: {message}")
        self.entry_id = entry_id
