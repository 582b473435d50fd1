class EpslError(Exception):
    pass


class ProfileError(EpslError, ValueError):
    """Malformed or inconsistent layer profile."""

    def __init__(self, message, row=None):
        self.row = row
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)


class ScenarioError(EpslError, ValueError):
    """Bad scenario configuration; carries the offending line when known."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class InfeasibleError(EpslError):
    """No allocation satisfies the scenario constraints."""


class UnreachableDeviceError(InfeasibleError):
    """A device has zero link rate but still has data to move."""
