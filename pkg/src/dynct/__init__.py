"""Motion-compensated dynamic CT reconstruction with a neural template and polynomial motion."""

from .errors import NumericFailure, PhantomSpecError, VolumeFormatError
from .volumes import ScanSchedule, Volume3, Volume4, make_schedule

__version__ = "0.1.0"

__all__ = [
    "NumericFailure", "PhantomSpecError", "VolumeFormatError",
    "ScanSchedule", "Volume3", "Volume4", "make_schedule",
]
