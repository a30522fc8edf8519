"""Exception types. Each carries the CLI exit code it maps to."""


class CdeError(Exception):
    code = "error"
    exit_status = 1


class ConfigError(CdeError, ValueError):
    code = "config"
    exit_status = 2


class DataError(CdeError, ValueError):
    code = "data"
    exit_status = 3


class TrainingError(CdeError, RuntimeError):
    code = "divergence"
    exit_status = 4
