"""Exception hierarchy. Each class carries the CLI error tag and exit code."""


class CurndsError(Exception):
    code = "E_INTERNAL"
    exit_code = 1


class ArgumentError(CurndsError, ValueError):
    code = "E_CONFIG"
    exit_code = 3


class ConfigError(ArgumentError):
    code = "E_CONFIG"


class DataError(CurndsError, ValueError):
    code = "E_DATA"
    exit_code = 3


class SchemaError(DataError):
    code = "E_SCHEMA"


class GapError(DataError):
    code = "E_GAP"


class StateError(CurndsError):
    code = "E_STATE"
    exit_code = 3


class PolicyError(ArgumentError):
    code = "E_POLICY"


class InfeasibleError(CurndsError):
    code = "E_INFEASIBLE"
    exit_code = 4


class DegenerateError(CurndsError):
    code = "E_DEGENERATE"
    exit_code = 4


class FitFailure(CurndsError):
    code = "E_FIT"
    exit_code = 5

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
