# scripts/tbqn_errors.py
"""Exception hierarchy shared by every TBQN module.

The runner maps these onto exit codes (see run_tbqn.py):
ConfigError -> 2, DivergenceError -> 3, CheckpointError / OSError -> 4.
"""

from typing import Optional


class TBQNError(Exception):
    """Base class for all errors raised by the TBQN lab."""


class ConfigError(TBQNError, ValueError):
    """Invalid configuration. The message names the offending field."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class ShapeError(TBQNError, ValueError):
    """Tensor shapes do not fit the requested operation."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        shape_text = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {shape_text}")


class ContractError(TBQNError, RuntimeError):
    """A runtime precondition was violated by the caller."""


class DivergenceError(TBQNError, RuntimeError):
    """Training produced a non-finite loss or exploding Q-values."""

    def __init__(self, step: int, reason: str, loss: Optional[float] = None):
        self.step = step
        self.reason = reason
        self.loss = loss
        super().__init__(f"diverged at step {step}: {reason}")


class InsufficientDataError(TBQNError, ValueError):
    """Not enough trial records to fit an importance model."""


class CheckpointError(TBQNError, IOError):
    """Checkpoint files are missing, corrupt or do not match the model."""


EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_IO = 4


def exit_code_for(exc: BaseException) -> int:
    """Process exit code for an exception escaping a command."""
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, DivergenceError):
        return EXIT_DIVERGED
    if isinstance(exc, OSError):
        return EXIT_IO
    return 1
