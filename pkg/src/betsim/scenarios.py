"""Ready-made race fields used by the CLI defaults, examples and tests."""
from __future__ import annotations

import numpy as np

from .race import Competitor, RaceConfig, StepDist, random_competitor


def three_horse(interactions: bool = True, race_id: str = "circle-triangle-square"):
    """2000 m race scripted for drama.

    Square starts slowly, surges from about 45 s, gets boxed in behind
    Triangle, passes, fails to reach Circle, then fades from about 90 s.
    """
    circle = Competitor(0, "Circle", StepDist("uniform", 13.0, 16.0),
                        phases=((0.5, 1.0), (1.0, 0.98)), boundary_sd=0.03, level_sd=0.01,
                        theta_ahead=3.0, theta_behind=4.0)
    triangle = Competitor(1, "Triangle", StepDist("uniform", 12.5, 15.0),
                          phases=((0.6, 0.97), (1.0, 1.0)), boundary_sd=0.03, level_sd=0.01,
                          theta_ahead=3.0, theta_behind=4.0)
    square = Competitor(2, "Square", StepDist("uniform", 15.0, 19.0),
                        phases=((0.27, 0.7), (0.62, 1.0), (1.0, 0.7)), boundary_sd=0.01,
                        level_sd=0.01, theta_ahead=6.0, theta_behind=4.0, block_prob=0.9)
    field = [circle, triangle, square]
    cfg = RaceConfig(race_id, 2000.0, (0, 1, 2), interactions=interactions)
    return cfg, field


def random_field(n: int, seed: int, length: float = 2000.0, race_id: str = "race",
                 n_factors: int = 0, interactions: bool = True):
    """Closely matched field of ``n`` competitors with random phase schedules."""
    rng = np.random.default_rng(seed)
    names = ["Red", "Blue", "Green", "Yellow", "Purple", "Orange", "Pink", "Grey", "Black", "White"]
    field = [random_competitor(i, names[i] if i < len(names) else f"C{i}", rng, n_factors,
                               step_lo=(11.5, 12.5), step_width=(2.5, 3.5))
             for i in range(n)]
    factors = tuple(float(x) for x in rng.uniform(0, 1, n_factors))
    cfg = RaceConfig(race_id, length, tuple(range(n)), factors=factors, interactions=interactions)
    return cfg, field


def twins(interactions: bool = False, length: float = 500.0, race_id: str = "twins"):
    """Two identical competitors; any asymmetry in outcomes is a bug."""
    c = dict(step=StepDist("uniform", 10.0, 20.0), phases=((0.5, 0.9), (1.0, 1.0)),
             boundary_sd=0.05, level_sd=0.02)
    field = [Competitor(0, "A", **c), Competitor(1, "B", **c)]
    return RaceConfig(race_id, length, (0, 1), interactions=interactions), field
