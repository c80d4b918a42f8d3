"""Positivity diagnostics on estimated propensity scores."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DELTA_GRID = (0.01, 0.025, 0.05, 0.10)


@dataclass(frozen=True, eq=False)
class PositivityReport:
    g_min: float
    g_max: float
    share_below: dict
    delta: float
    flagged_units: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    def to_dict(self) -> dict:
        return {
            "g_min": self.g_min,
            "g_max": self.g_max,
            "delta": self.delta,
            "share_below": {format(d, "g"): s for d, s in self.share_below.items()},
            "flagged_count": int(self.flagged_units.size),
            "flagged_units": [int(i) for i in self.flagged_units],
        }


def positivity_report(g1, delta=0.01, grid=DELTA_GRID) -> PositivityReport:
    """Share of units whose less likely arm has probability below each threshold.

    ``delta`` is added to the grid if it is not already there.
    """
    g1 = np.asarray(g1, dtype=float).reshape(-1)
    tail = np.minimum(g1, 1.0 - g1)
    thresholds = sorted(set(grid) | {float(delta)})
    shares = {d: float(np.mean(tail < d)) for d in thresholds}
    return PositivityReport(float(g1.min()), float(g1.max()), shares, float(delta),
                            np.flatnonzero(tail < delta))
