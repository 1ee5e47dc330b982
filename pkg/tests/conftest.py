import numpy as np
import pytest

from radio.stats import GroupStats, StatsSet


def random_stats_set(rng, max_groups: int = 6, equal_p_prob: float = 0.7) -> StatsSet:
    """Instance shaped like the planner's output: equal-size groups, with a
    minority of instances mixing group sizes across matrices."""
    n = int(rng.integers(2, max_groups + 1))
    if rng.random() < equal_p_prob:
        ps = [64] * n
    else:
        ps = [int(p) for p in rng.integers(1, 5, n) * 16]
    groups = tuple(
        GroupStats(
            group_id=j,
            P=ps[j],
            G2=float(np.exp(rng.normal(0.0, 2.0))),
            S2=float(np.exp(rng.normal(0.0, 1.0))),
            mu=float(rng.normal(0.0, 0.1)),
        )
        for j in range(n)
    )
    return StatsSet(groups=groups, rate=float(rng.uniform(0.5, 7.5)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
