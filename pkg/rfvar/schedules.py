# rfvar/schedules.py
from __future__ import annotations

import math
from typing import Literal, Sequence

from rfvar.errors import ConfigError

Schedule = Literal["practical", "theory"]

PRACTICAL_FRAC = 0.632
THEORY_EXPONENT = 0.45


def subsample_size_for(n: int, schedule: str) -> int:
    """
    a_n for a sample of size n:
      practical -> ceil(0.632 n)
      theory    -> ceil(n^0.45), so a_n^2 / n -> 0
    """
    if n < 2:
        raise ConfigError(f"n must be >= 2, got {n}")
    if schedule == "practical":
        a_n = math.ceil(round(PRACTICAL_FRAC * n, 9))
    elif schedule == "theory":
        a_n = math.ceil(round(n**THEORY_EXPONENT, 9))
    else:
        raise ConfigError(f"unknown a_n schedule '{schedule}' (expected practical or theory)")
    return min(n, max(1, a_n))


def squared_ratio(n: int, a_n: int) -> float:
    return a_n * a_n / n


def check_schedule(n_grid: Sequence[int], schedule: str) -> list[int]:
    """a_n along the grid; the theory schedule must make a_n^2/n strictly decrease."""
    sizes = [subsample_size_for(n, schedule) for n in n_grid]
    if schedule == "theory":
        ratios = [squared_ratio(n, a) for n, a in zip(n_grid, sizes)]
        if any(later >= earlier for earlier, later in zip(ratios, ratios[1:])):
            raise ConfigError(
                f"theory schedule needs a_n^2/n decreasing along n_grid, got {[round(r, 4) for r in ratios]}"
            )
    return sizes
