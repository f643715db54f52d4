"""Exception types shared by every stage.

Each class carries the process exit code the CLI maps it to.
"""


class ArmSwapError(Exception):
    exit_code = 1


class InvalidArgument(ArmSwapError, ValueError):
    exit_code = 2


class InfeasibleTask(ArmSwapError):
    exit_code = 2


class MissingData(ArmSwapError):
    exit_code = 3


class UndefinedRegion(ArmSwapError, ValueError):
    exit_code = 3


class NumericError(ArmSwapError, ArithmeticError):
    exit_code = 4


class StageError(ArmSwapError):
    """Wraps a failure inside a pipeline stage, keeping the original exit code."""

    def __init__(self, stage, cause):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", 1)
