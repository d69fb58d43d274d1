"""Event observation type shared by the simulator, engine and IO."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError


@dataclass(frozen=True)
class EventObservation:
    """One asynchronous camera event: pixel, time, polarity and track label.

    Polarity is carried through the pipeline but never consumed by the
    estimator, which weights every event identically.
    """

    pixel: tuple[float, float]
    timestamp: float
    polarity: int
    track_id: int

    def __post_init__(self):
        if self.polarity not in (-1, 1):
            raise InvalidArgumentError(f"polarity must be -1 or +1, got {self.polarity}")
        if not np.isfinite(self.timestamp):
            raise InvalidArgumentError("event timestamp must be finite")

    @property
    def pixel_array(self) -> np.ndarray:
        return np.array(self.pixel, dtype=float)
