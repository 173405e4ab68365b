#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Error hierarchy for the SHDL toolkit
Each family carries the process exit code the CLI returns for it
"""

from typing import Optional


class ShdlError(Exception):
    """Base class for every error raised by the toolkit"""

    exit_code: int = 1

    def __init__(self, message: str, stage: Optional[str] = None):
        super().__init__(message)
        self.message = message
        self.stage = stage

    def __str__(self) -> str:
        if self.stage:
            return f"[{self.stage}] {self.message}"
        return self.message


# === Configuration (exit 2) ===

class ConfigError(ShdlError):
    exit_code = 2


class ParameterError(ConfigError):
    """Numeric parameter outside its admissible range"""


# === Data (exit 3) ===

class DataError(ShdlError):
    exit_code = 3


class ValidationError(DataError):
    """Input array is empty, non-finite or malformed"""


class FormatError(DataError):
    """Binary dataset file is corrupted; offset is the first bad byte"""

    def __init__(self, message: str, offset: Optional[int] = None, stage: Optional[str] = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message, stage)
        self.offset = offset


class ModelLoadError(DataError):
    """Model file has a bad magic, version or checksum"""


# === Training (exit 4) ===

class TrainingError(ShdlError):
    exit_code = 4


class DimensionError(TrainingError):
    pass


class ProtocolError(TrainingError):
    """Label layout makes the requested protocol impossible"""


class DegenerateInputError(TrainingError):
    pass


class ConsistencyError(TrainingError):
    pass
