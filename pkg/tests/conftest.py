"""Shared fixtures: small finite MDPs and exhaustive tabular datasets."""
from __future__ import annotations

import numpy as np
import pytest

from cyclefqi.datasets import StageDataset, Transition
from cyclefqi.tabular import FiniteCyclicMdp, random_layered_mdp


@pytest.fixture
def small_deterministic_mdp() -> FiniteCyclicMdp:
    """Deterministic 2-stage layered MDP: 6 states per stage, 2/3 actions."""
    rng = np.random.default_rng(42)
    return random_layered_mdp(
        rng,
        horizons=(2, 2),
        states_per_layer=3,
        action_counts=(2, 3),
        discounts=(1.0, 0.5),
        deterministic=True,
    )


@pytest.fixture
def three_stage_mdp() -> FiniteCyclicMdp:
    rng = np.random.default_rng(7)
    return random_layered_mdp(rng, horizons=(2, 1, 2), states_per_layer=3, action_counts=(2, 3, 2))


def exhaustive_dataset(mdp: FiniteCyclicMdp) -> list[StageDataset]:
    """One transition per (state, action) pair of a deterministic finite MDP,
    with exact expected rewards and the deterministic next state."""
    out = []
    for k in range(1, mdp.num_stages + 1):
        p, r, t = mdp.transition[k - 1], mdp.reward[k - 1], mdp.terminal[k - 1]
        rows = []
        for s in range(p.shape[0]):
            for a in range(p.shape[1]):
                dest = np.flatnonzero(p[s, a] == 1.0)
                assert dest.size == 1, "exhaustive datasets require deterministic transitions"
                rows.append(
                    Transition(
                        stage=k,
                        state=np.array([float(s)]),
                        action=a,
                        reward=float(r[s, a]),
                        next_state=np.array([float(dest[0])]),
                        terminal=bool(t[s, a]),
                    )
                )
        out.append(StageDataset(k, tuple(rows)))
    return out
