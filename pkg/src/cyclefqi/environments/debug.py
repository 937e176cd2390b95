"""Tiny debug environment: two stages, zero rewards everywhere."""
from __future__ import annotations

import numpy as np

from ..mdp import CyclicMdpSpec, StageSpec

__all__ = ["make_zero_env"]


def make_zero_env(seed: int = 0) -> CyclicMdpSpec:
    """Two-stage pure cycle with scalar states and identically zero rewards.

    Every policy has value zero, which makes this a cheap smoke target for
    experiment drivers.
    """

    def step(k, state, action, rng):
        return 0.0, state + 0.1 * rng.standard_normal(1)

    def batch_step(k, states, actions, rng):
        return np.zeros(states.shape[0]), states + 0.1 * rng.standard_normal(states.shape)

    stages = (
        StageSpec(state_dim=1, action_count=2, horizon=1, discount=1.0, reward_max=0.0),
        StageSpec(state_dim=1, action_count=2, horizon=1, discount=0.5, reward_max=0.0),
    )
    return CyclicMdpSpec(
        stages=stages,
        step=step,
        terminal_predicate=lambda k, s, a: True,
        stage_transition=lambda k, s: s,
        initial_state=lambda k, rng: rng.uniform(-1.0, 1.0, size=1),
        name="zero",
        dataset_mode="iid",
        batch_step=batch_step,
        batch_initial=lambda k, n, rng: rng.uniform(-1.0, 1.0, size=(n, 1)),
        batch_stage_transition=lambda k, s: s,
        params={"name": "zero", "seed": seed, "note": "debug environment, zero rewards"},
    )
