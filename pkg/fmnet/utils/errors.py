"""
Error hierarchy for fmnet.
Every error carries the process exit code the CLI maps it to.
"""
from typing import Optional


class FmnetError(Exception):
    """Base class for all fmnet errors"""

    exit_code = 1


class UsageError(FmnetError):
    """Wrong call sequence or command-line usage"""

    exit_code = 1


class ConfigurationError(FmnetError):
    """Invalid configuration, spec or parameter shapes"""

    exit_code = 1


class CheckpointMismatchError(ConfigurationError):
    """Checkpoint arrays or config do not fit the requested architecture"""


class InputError(FmnetError):
    """Invalid data: shapes, ranges, missing files"""

    exit_code = 2


class FormatError(InputError):
    """Malformed container, manifest or CSV file"""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class NumericalError(FmnetError):
    """Non-finite values during optimization"""

    exit_code = 3

    def __init__(self, message: str, epoch: Optional[int] = None, batch: Optional[int] = None):
        self.epoch = epoch
        self.batch = batch
        super().__init__(message)
