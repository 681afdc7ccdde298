"""Attack goals: escape the true class, or force a chosen target class."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Untargeted:
    """Push the input out of its current class `label`."""

    label: int


@dataclass(frozen=True, eq=False)
class Targeted:
    """Force classification as `target_label`, starting from a sample of that class."""

    target_label: int
    start_video: np.ndarray


AttackGoal = Untargeted | Targeted
