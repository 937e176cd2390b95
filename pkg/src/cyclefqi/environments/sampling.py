"""Offline dataset generation under behavior policies."""
from __future__ import annotations

import numpy as np

from ..datasets import StageDataset, Transition
from ..mdp import CyclicMdpSpec, PolicyVector

__all__ = ["sample_offline_dataset"]


def _sample_iid(
    spec: CyclicMdpSpec, behavior: PolicyVector, n_per_stage: int, rng: np.random.Generator
) -> list[StageDataset]:
    """Independent draws per stage: state from eta_k, action from the behavior
    policy, one environment step."""
    out = []
    for k in range(1, spec.num_stages + 1):
        if spec.batch_initial is not None and spec.batch_step is not None:
            states = np.asarray(spec.batch_initial(k, n_per_stage, rng), dtype=float)
            probs = behavior.action_probs_batch(k, states)
            u = rng.random(n_per_stage)
            actions = (u[:, None] > np.cumsum(probs, axis=1)).sum(axis=1)
            actions = np.minimum(actions, probs.shape[1] - 1).astype(int)
            rewards, next_states = spec.batch_step(k, states, actions, rng)
            transitions = tuple(
                Transition(
                    stage=k,
                    state=states[i],
                    action=int(actions[i]),
                    reward=float(rewards[i]),
                    next_state=np.asarray(next_states[i], dtype=float),
                    terminal=bool(spec.terminal_predicate(k, states[i], int(actions[i]))),
                )
                for i in range(n_per_stage)
            )
        else:
            rows = []
            for _ in range(n_per_stage):
                state = np.asarray(spec.initial_state(k, rng), dtype=float)
                action = behavior.sample(k, state, rng)
                reward, nxt = spec.step(k, state, action, rng)
                rows.append(
                    Transition(
                        stage=k,
                        state=state,
                        action=action,
                        reward=float(reward),
                        next_state=np.asarray(nxt, dtype=float),
                        terminal=bool(spec.terminal_predicate(k, state, action)),
                    )
                )
            transitions = tuple(rows)
        out.append(StageDataset(k, transitions))
    return out


def _sample_trajectories(
    spec: CyclicMdpSpec,
    behavior: PolicyVector,
    n_per_stage: int,
    rng: np.random.Generator,
    warmup_cycles: int,
    cycles_per_trajectory: int,
) -> list[StageDataset]:
    """Roll full cycles from eta_1 and harvest transitions until every stage
    holds n_per_stage samples; warmup cycles are simulated but not recorded."""
    buckets: dict[int, list[Transition]] = {k: [] for k in range(1, spec.num_stages + 1)}

    def done() -> bool:
        return all(len(buckets[k]) >= n_per_stage for k in buckets)

    while not done():
        state = np.asarray(spec.initial_state(1, rng), dtype=float)
        k = 1
        for cycle in range(warmup_cycles + cycles_per_trajectory):
            for _ in range(spec.num_stages):
                horizon = spec.stage(k).horizon
                for step_idx in range(1, horizon + 1):
                    action = behavior.sample(k, state, rng)
                    reward, s_prime = spec.step(k, state, action, rng)
                    terminal = bool(spec.terminal_predicate(k, state, action)) or step_idx == horizon
                    if cycle >= warmup_cycles and len(buckets[k]) < n_per_stage:
                        buckets[k].append(
                            Transition(
                                stage=k,
                                state=state,
                                action=action,
                                reward=float(reward),
                                next_state=np.asarray(s_prime, dtype=float),
                                terminal=terminal,
                            )
                        )
                    state = np.asarray(s_prime, dtype=float)
                    if terminal:
                        state = np.asarray(spec.stage_transition(k, state), dtype=float)
                        break
                k = spec.successor(k)
            if done():
                break
    return [StageDataset(k, tuple(buckets[k])) for k in sorted(buckets)]


def sample_offline_dataset(
    spec: CyclicMdpSpec,
    behavior: PolicyVector,
    n_per_stage: int,
    rng: np.random.Generator,
    warmup_cycles: int = 0,
    cycles_per_trajectory: int = 10,
) -> list[StageDataset]:
    """Collect n_per_stage offline transitions for every stage.

    The spec's dataset_mode picks the harvesting scheme: "iid" draws
    independent (state, action) pairs per stage (the linear environment's
    protocol), "trajectory" rolls multi-cycle trajectories under the behavior
    policy from eta_1 and records transitions stage by stage.
    """
    if n_per_stage < 1:
        raise ValueError(f"n_per_stage must be >= 1, got {n_per_stage}")
    if spec.dataset_mode == "iid":
        return _sample_iid(spec, behavior, n_per_stage, rng)
    return _sample_trajectories(
        spec, behavior, n_per_stage, rng, warmup_cycles, cycles_per_trajectory
    )
