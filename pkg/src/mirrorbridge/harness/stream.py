"""Rotating angular filter turning a 2-d target sample into a data stream."""
from dataclasses import dataclass, field

import numpy as np

from .._validation import as_samples


@dataclass
class StreamState:
    """Non-overlapping angular sectors of width ``2 pi * window_width``.

    The sector advances every ``rotation_period`` calls, so with the
    defaults one full rotation takes 200 calls.
    """

    data: np.ndarray
    window_width: float = 0.125
    rotation_period: int = 25
    cursor: int = 0
    angles: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.data = as_samples(self.data, 2, "data")
        n_windows = 1.0 / self.window_width
        if not 0 < self.window_width <= 1 or abs(n_windows - round(n_windows)) > 1e-9:
            raise ValueError("window_width must be 1 / (number of sectors)")
        if self.rotation_period < 1:
            raise ValueError("rotation_period must be positive")
        self.angles = np.mod(np.arctan2(self.data[:, 1], self.data[:, 0]), 2.0 * np.pi)

    @property
    def n_windows(self):
        return int(round(1.0 / self.window_width))

    def window_index(self, cursor=None):
        cursor = self.cursor if cursor is None else cursor
        return (cursor // self.rotation_period) % self.n_windows

    def members(self, cursor=None):
        """Boolean mask of the samples visible at ``cursor``."""
        w = self.window_index(cursor)
        width = 2.0 * np.pi / self.n_windows
        sector = np.minimum(np.floor(self.angles / width).astype(int), self.n_windows - 1)
        return sector == w


def next_window(state):
    """Samples in the current sector; advances the cursor.

    Returns ``(batch, empty)``; ``empty`` flags a sector without samples.
    """
    batch = state.data[state.members()]
    state.cursor += 1
    return batch, batch.shape[0] == 0
