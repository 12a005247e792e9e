"""Exception types. CLI exit codes are keyed off these classes."""


class GraphLangError(Exception):
    exit_code = 2


class ConfigError(GraphLangError, ValueError):
    exit_code = 1


class GraphFormatError(GraphLangError, ValueError):
    pass


class SplitError(GraphLangError, ValueError):
    pass


class CorpusFormatError(GraphLangError, ValueError):
    pass


class StageError(GraphLangError, RuntimeError):
    pass


class CheckpointError(GraphLangError, RuntimeError):
    pass


class NumericalError(GraphLangError, FloatingPointError):
    exit_code = 3
