"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class KtupError(Exception):
    exit_code = 1


class ConfigError(KtupError):
    exit_code = 2


class DataError(KtupError):
    exit_code = 3


class ParseError(DataError):
    def __init__(self, path, lineno, message):
        self.path = str(path)
        self.lineno = lineno
        super().__init__(f"{self.path}:{lineno}: {message}")


class DatasetExhausted(DataError):
    pass


class FormatError(DataError):
    """Parameter file is truncated, corrupt, or incompatible."""


class NumericError(KtupError):
    exit_code = 4
