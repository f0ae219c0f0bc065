class AttnSegError(Exception):
    """Base class for every error raised by attnseg."""


class ParameterError(AttnSegError, ValueError):
    pass


class ConfigError(AttnSegError, ValueError):
    pass


class InputError(AttnSegError, ValueError):
    pass


class UsageError(AttnSegError, ValueError):
    pass


class StateError(AttnSegError, RuntimeError):
    pass


class DataError(AttnSegError, ValueError):
    pass


class DegenerateInputError(AttnSegError, ValueError):
    pass


class CheckpointError(AttnSegError, ValueError):
    pass


class TrainingDivergedError(AttnSegError, RuntimeError):
    pass


class LabelParseError(DataError):
    def __init__(self, message, line_number):
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


class LabelConsistencyError(DataError):
    def __init__(self, ids):
        self.ids = list(ids)
        preview = ", ".join(self.ids[:10])
        more = f" (+{len(self.ids) - 10} more)" if len(self.ids) > 10 else ""
        super().__init__(f"any=0 but a subtype flag is set for: {preview}{more}")


class CoverageError(AttnSegError, ValueError):
    def __init__(self, message, ids):
        self.ids = list(ids)
        super().__init__(f"{message}: {', '.join(self.ids[:10])}")


class DependencyError(AttnSegError, FileNotFoundError):
    def __init__(self, path, hint=""):
        self.path = str(path)
        message = f"Missing upstream artifact: {self.path}"
        if hint:
            message += f" ({hint})"
        super().__init__(message)
