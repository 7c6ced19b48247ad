#!/usr/bin/env python3
"""
Error types shared by every stage of the forecaster.

The CLI maps these onto exit codes (see ldm4ts.py), so raise the most
specific one that fits.
"""

from typing import Dict, Optional


class LDM4TSError(Exception):
    """Base class for every error raised on purpose by this project."""


class DimensionError(LDM4TSError, ValueError):
    """Shapes do not line up, or an input is empty."""


class ConfigurationError(LDM4TSError, ValueError):
    """A configuration value is missing, unknown or out of range."""


class ParseError(LDM4TSError, ValueError):
    """A CSV cell could not be read as a number."""

    def __init__(self, message: str, row: int = None, column: str = None):
        super().__init__(message)
        self.row = row
        self.column = column


class FormatError(LDM4TSError, ValueError):
    """A file is structurally wrong (missing header, unordered timestamps)."""


class ValidationError(LDM4TSError, ValueError):
    """Input is well-formed but does not match what the model expects."""


class InvariantError(LDM4TSError, AssertionError):
    """A value broke an invariant (pixel range, finiteness)."""


class ScheduleIndexError(LDM4TSError, IndexError):
    """Diffusion timestep outside 1..T, or timesteps out of order."""


class CapabilityError(LDM4TSError, RuntimeError):
    """Gradient requested through something that is not differentiable."""


class OptimizerError(LDM4TSError, RuntimeError):
    """The optimizer was handed a non-finite gradient."""

    def __init__(self, message: str, parameter: str = None):
        super().__init__(message)
        self.parameter = parameter


class CalibrationError(LDM4TSError, RuntimeError):
    """Latent scale cannot be estimated from the given sample."""


class TrainingError(LDM4TSError, RuntimeError):
    """Training diverged.

    Carries enough context to debug the failing step and to resume from the
    last parameters that produced a finite loss.
    """

    def __init__(self, message: str, batch_index: int = None,
                 losses: Optional[Dict[str, float]] = None,
                 last_good_state: Optional[dict] = None):
        super().__init__(message)
        self.batch_index = batch_index
        self.losses = losses or {}
        self.last_good_state = last_good_state
