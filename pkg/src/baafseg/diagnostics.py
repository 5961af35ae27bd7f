"""Per-level compactness of raw vs offset-shifted neighborhoods."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .model import BAAFNet, Geometry
from .spatial import neighborhood_stats


@dataclass(frozen=True)
class LevelStats:
    level: int
    space: str  # "3d" or "feature"
    raw_dist: float
    shifted_dist: float
    raw_var: float
    shifted_var: float

    @property
    def dist_change(self) -> float:
        return self.shifted_dist - self.raw_dist

    @property
    def var_change(self) -> float:
        return self.shifted_var - self.raw_var

    def line(self) -> str:
        return (f"level={self.level} space={self.space} mean_dist={self.raw_dist:.6g} "
                f"shifted_mean_dist={self.shifted_dist:.6g} dist_change={self.dist_change:.6g} "
                f"variance={self.raw_var:.6g} shifted_variance={self.shifted_var:.6g} "
                f"var_change={self.var_change:.6g}")


def diagnose(model: BAAFNet, positions, colors=None, geometry: Geometry | None = None) -> list[LevelStats]:
    """Eval-mode forward pass, then neighborhood statistics for every block.

    Levels are numbered from 1; level m describes the neighborhoods that block m
    builds at its input resolution.
    """
    with T.no_grad():
        out = model.forward(positions, colors, training=False, geometry=geometry)
    pyr = out.pyramid
    rows = []
    for m, nb in enumerate(pyr.geometry.neighbors):
        spaces = (("3d", pyr.geometry.positions[m], pyr.shifted_p[m]),
                  ("feature", pyr.features[m].data, pyr.shifted_f[m]))
        for space, values, shifted in spaces:
            raw = neighborhood_stats(values, nb)
            moved = raw if shifted is None else neighborhood_stats(values, nb, shifted.data)
            rows.append(LevelStats(m + 1, space, raw["mean_dist"], moved["mean_dist"],
                                   raw["variance"], moved["variance"]))
    return rows


def compactness_ok(rows: list[LevelStats]) -> bool:
    """True when no level's 3-D mean neighbor distance grew after shifting."""
    return all(r.dist_change <= 0 for r in rows if r.space == "3d")
