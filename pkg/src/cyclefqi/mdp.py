"""Cyclic MDP core: stage specifications, policies, Bellman targets, rollouts.

A cyclic MDP is a loop of K finite-horizon stages.  Stage k runs until a
terminal state-action pair fires (forced at horizon H_k), then a deterministic
stage-transition map carries the post-terminal state into stage [k+1] and the
stage discount gamma_k is applied.  Stage indices are 1-based throughout,
matching the cyclic index convention [m] = ((m-1) mod K) + 1; actions are
integers 0..A_k-1.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

__all__ = [
    "StageSpec",
    "CyclicMdpSpec",
    "PolicyVector",
    "UpdateSet",
    "cycle_index",
    "cycle_discount",
    "value_upper_bound",
    "constrained_state_value",
    "bellman_target",
    "rollout",
    "cumulative_reward_rollout",
    "monte_carlo_value",
]

PROB_TOL = 1e-12


def cycle_index(m: int, num_stages: int) -> int:
    """Cyclic stage index [m] = ((m - 1) mod K) + 1 for 1-based m."""
    if m < 1 or num_stages < 1:
        raise ValueError(f"cycle_index requires m >= 1 and K >= 1, got m={m}, K={num_stages}")
    return (m - 1) % num_stages + 1


@dataclass(frozen=True)
class StageSpec:
    """Static description of one stage: dimensions, horizon, discount, bound."""

    state_dim: int
    action_count: int
    horizon: int
    discount: float
    reward_max: float = 0.0

    def __post_init__(self) -> None:
        if self.state_dim < 1 or self.action_count < 1 or self.horizon < 1:
            raise ValueError(
                f"state_dim, action_count and horizon must be >= 1, got "
                f"({self.state_dim}, {self.action_count}, {self.horizon})"
            )
        if not 0.0 <= self.discount <= 1.0:
            raise ValueError(f"discount must lie in [0, 1], got {self.discount}")
        if self.reward_max < 0.0:
            raise ValueError(f"reward_max must be nonnegative, got {self.reward_max}")


@dataclass(frozen=True)
class CyclicMdpSpec:
    """Full environment contract for a K-stage cyclic MDP.

    Callables (all take the 1-based stage index k first):
      step(k, state, action, rng) -> (reward, next_state); next_state is the
        pre-transition sample s'.  For terminal pairs, consumers feed s'
        through stage_transition to enter stage [k+1].
      terminal_predicate(k, state, action) -> bool, membership in T_k.
      stage_transition(k, s_prime) -> start state of stage [k+1] (phi_k).
      initial_state(k, rng) -> draw from eta_k.

    Optional batch hooks (used when present to vectorize Monte Carlo work):
      batch_step(k, states, actions, rng) -> (rewards, next_states)
      batch_initial(k, n, rng) -> (n, d_k) array
      batch_stage_transition(k, s_primes) -> (n, d_{[k+1]}) array
    """

    stages: tuple[StageSpec, ...]
    step: Callable[[int, np.ndarray, int, np.random.Generator], tuple[float, np.ndarray]]
    terminal_predicate: Callable[[int, np.ndarray, int], bool]
    stage_transition: Callable[[int, np.ndarray], np.ndarray]
    initial_state: Callable[[int, np.random.Generator], np.ndarray]
    name: str = "custom"
    dataset_mode: str = "trajectory"  # how offline data is harvested: iid | trajectory
    batch_step: Callable | None = None
    batch_initial: Callable | None = None
    batch_stage_transition: Callable | None = None
    params: dict = field(default_factory=dict)  # descriptive parameterization for reporting

    def __post_init__(self) -> None:
        if len(self.stages) < 1:
            raise ValueError("a cyclic MDP needs at least one stage")
        if all(s.discount >= 1.0 for s in self.stages):
            raise ValueError("at least one stage discount must be < 1 (returns unbounded otherwise)")
        if self.dataset_mode not in ("iid", "trajectory"):
            raise ValueError(f"unknown dataset_mode {self.dataset_mode!r}")

    @property
    def num_stages(self) -> int:
        return len(self.stages)

    def stage(self, k: int) -> StageSpec:
        return self.stages[k - 1]

    def successor(self, k: int) -> int:
        """Stage index [k+1]."""
        return cycle_index(k + 1, self.num_stages)


def cycle_discount(spec: CyclicMdpSpec) -> float:
    """Product of the per-stage discounts; the spec guarantees it is < 1."""
    out = 1.0
    for s in spec.stages:
        out *= s.discount
    return out


def value_upper_bound(spec: CyclicMdpSpec) -> float:
    """Return bound Y = (sum_j H_j R_max,j) / (1 - gamma_cycle).

    Meaningful for nonnegative rewards; used for optional target clipping.
    """
    gc = cycle_discount(spec)
    total = sum(s.horizon * s.reward_max for s in spec.stages)
    return total / (1.0 - gc)


@dataclass(frozen=True)
class UpdateSet:
    """Subset of stages whose policies are optimized; the rest stay fixed."""

    members: frozenset[int]
    num_stages: int

    def __post_init__(self) -> None:
        bad = [k for k in self.members if not 1 <= k <= self.num_stages]
        if bad:
            raise ValueError(f"update-set stages {bad} outside 1..{self.num_stages}")

    @classmethod
    def all_stages(cls, num_stages: int) -> "UpdateSet":
        return cls(frozenset(range(1, num_stages + 1)), num_stages)

    @classmethod
    def of(cls, num_stages: int, members: Sequence[int]) -> "UpdateSet":
        return cls(frozenset(int(k) for k in members), num_stages)

    def __contains__(self, k: int) -> bool:
        return k in self.members


class PolicyVector:
    """Composite policy: one state -> action-distribution map per stage.

    kind tags are one of {"greedy-from-Q", "fixed", "uniform-random"} and are
    informational (checkpoints, reports).
    """

    def __init__(
        self,
        prob_fns: Sequence[Callable[[np.ndarray], np.ndarray]],
        kinds: Sequence[str],
        batch_prob_fns: Sequence[Callable[[np.ndarray], np.ndarray] | None] | None = None,
    ):
        if len(prob_fns) != len(kinds):
            raise ValueError("one kind tag per stage is required")
        self._fns = tuple(prob_fns)
        self.kinds = tuple(kinds)
        self._batch_fns = tuple(batch_prob_fns) if batch_prob_fns is not None else (None,) * len(kinds)

    @property
    def num_stages(self) -> int:
        return len(self._fns)

    def action_probs(self, k: int, state: np.ndarray) -> np.ndarray:
        """Probability vector over stage-k actions; validated to sum to one."""
        probs = np.asarray(self._fns[k - 1](state), dtype=float)
        if probs.ndim != 1 or np.any(probs < -PROB_TOL) or abs(probs.sum() - 1.0) > PROB_TOL:
            raise ValueError(
                f"stage {k} policy returned a non-normalized distribution (sum={probs.sum()!r})"
            )
        return probs

    def action_probs_batch(self, k: int, states: np.ndarray) -> np.ndarray:
        """(n, A_k) matrix of action probabilities for a batch of states."""
        fn = self._batch_fns[k - 1]
        if fn is not None:
            return np.asarray(fn(states), dtype=float)
        return np.stack([self.action_probs(k, s) for s in states])

    def sample(self, k: int, state: np.ndarray, rng: np.random.Generator) -> int:
        probs = self.action_probs(k, state)
        return int(rng.choice(len(probs), p=probs / probs.sum()))

    @classmethod
    def uniform(cls, spec: CyclicMdpSpec) -> "PolicyVector":
        fns = []
        batch = []
        for s in spec.stages:
            a = s.action_count
            fns.append(lambda _state, a=a: np.full(a, 1.0 / a))
            batch.append(lambda states, a=a: np.full((len(states), a), 1.0 / a))
        return cls(fns, ["uniform-random"] * spec.num_stages, batch)

    @classmethod
    def constant(cls, spec: CyclicMdpSpec, actions: Sequence[int]) -> "PolicyVector":
        """Fixed policy playing a constant action per stage."""
        fns = []
        batch = []
        for s, act in zip(spec.stages, actions):
            a, act = s.action_count, int(act)
            if not 0 <= act < a:
                raise ValueError(f"constant action {act} outside 0..{a - 1}")

            def point(_state, a=a, act=act):
                out = np.zeros(a)
                out[act] = 1.0
                return out

            def point_batch(states, a=a, act=act):
                out = np.zeros((len(states), a))
                out[:, act] = 1.0
                return out

            fns.append(point)
            batch.append(point_batch)
        return cls(fns, ["fixed"] * spec.num_stages, batch)


def constrained_state_value(
    q_values: np.ndarray,
    k: int,
    update_set: UpdateSet,
    fixed_policy_probs: np.ndarray | None = None,
) -> float:
    """State value under the update-set constraint.

    max over actions when k is updated; expectation under the fixed policy
    otherwise.  Ties in the max resolve to the lowest action index (argmax
    convention), which does not change the value.
    """
    q = np.asarray(q_values, dtype=float)
    if k in update_set:
        return float(np.max(q))
    if fixed_policy_probs is None:
        raise ValueError(f"stage {k} is not in the update set; a fixed policy is required")
    probs = np.asarray(fixed_policy_probs, dtype=float)
    if probs.shape != q.shape or abs(probs.sum() - 1.0) > PROB_TOL or np.any(probs < -PROB_TOL):
        raise ValueError(f"fixed policy for stage {k} is not a distribution over {q.shape[0]} actions")
    return float(probs @ q)


def bellman_target(
    transition,
    q_fn: Callable[[int, np.ndarray], np.ndarray],
    spec: CyclicMdpSpec,
    update_set: UpdateSet,
    fixed_policies: dict[int, Callable[[np.ndarray], np.ndarray]] | None = None,
) -> float:
    """One regression target: r plus the constrained continuation value.

    Non-terminal transitions continue inside stage k at the stored next state;
    terminal ones cross into stage [k+1] through phi_k with discount gamma_k.
    q_fn(k, state) must return the action-value vector of stage k.
    """
    k = transition.stage
    fixed_policies = fixed_policies or {}
    if transition.terminal:
        nxt = spec.successor(k)
        s_next = spec.stage_transition(k, transition.next_state)
        s_next = np.asarray(s_next, dtype=float)
        if s_next.shape != (spec.stage(nxt).state_dim,):
            raise ValueError(
                f"stage transition out of stage {k} produced shape {s_next.shape}, "
                f"expected ({spec.stage(nxt).state_dim},)"
            )
        gamma = spec.stage(k).discount
        if gamma == 0.0:
            return float(transition.reward)
        probs = fixed_policies[nxt](s_next) if nxt not in update_set else None
        cont = constrained_state_value(q_fn(nxt, s_next), nxt, update_set, probs)
        return float(transition.reward + gamma * cont)
    probs = fixed_policies[k](transition.next_state) if k not in update_set else None
    cont = constrained_state_value(q_fn(k, transition.next_state), k, update_set, probs)
    return float(transition.reward + cont)


def _run_cycles(
    spec: CyclicMdpSpec,
    policy: PolicyVector,
    start_stage: int,
    start_state: np.ndarray,
    num_cycles: int,
    rng: np.random.Generator,
    discounted: bool,
) -> float:
    state = np.asarray(start_state, dtype=float)
    if state.shape != (spec.stage(start_stage).state_dim,):
        raise ValueError(
            f"start state has shape {state.shape}, stage {start_stage} expects "
            f"({spec.stage(start_stage).state_dim},)"
        )
    total = 0.0
    gamma_acc = 1.0
    k = start_stage
    for _ in range(num_cycles * spec.num_stages):
        horizon = spec.stage(k).horizon
        for step_idx in range(1, horizon + 1):
            action = policy.sample(k, state, rng)
            reward, s_prime = spec.step(k, state, action, rng)
            total += gamma_acc * reward
            terminal = bool(spec.terminal_predicate(k, state, action))
            if not terminal and step_idx == horizon:
                logger.warning(
                    "stage %d did not signal terminal by horizon %d; forcing stage exit", k, horizon
                )
                terminal = True
            state = np.asarray(s_prime, dtype=float)
            if terminal:
                state = np.asarray(spec.stage_transition(k, state), dtype=float)
                if discounted:
                    gamma_acc *= spec.stage(k).discount
                break
        k = spec.successor(k)
    return total


def rollout(
    spec: CyclicMdpSpec,
    policy: PolicyVector,
    start_stage: int,
    start_state: np.ndarray,
    num_cycles: int,
    rng: np.random.Generator,
) -> float:
    """Simulate `num_cycles` full cycles and return the discounted return.

    Rewards inside a stage are undiscounted; the stage discount applies once
    at each stage exit (cumulative product across exits).
    """
    if num_cycles < 1:
        raise ValueError(f"num_cycles must be >= 1, got {num_cycles}")
    return _run_cycles(spec, policy, start_stage, start_state, num_cycles, rng, discounted=True)


def cumulative_reward_rollout(
    spec: CyclicMdpSpec,
    policy: PolicyVector,
    start_stage: int,
    start_state: np.ndarray,
    num_cycles: int,
    rng: np.random.Generator,
) -> float:
    """Undiscounted total reward over `num_cycles` cycles (benchmark metric)."""
    if num_cycles < 1:
        raise ValueError(f"num_cycles must be >= 1, got {num_cycles}")
    return _run_cycles(spec, policy, start_stage, start_state, num_cycles, rng, discounted=False)


def _batch_value(
    spec: CyclicMdpSpec,
    policy: PolicyVector,
    start_stage: int,
    num_trajectories: int,
    num_cycles: int,
    rng: np.random.Generator,
) -> float:
    """Vectorized Monte Carlo value when the spec provides batch hooks.

    Only valid for pure-cycle specs (every stage horizon 1, every transition
    terminal); callers check those conditions.
    """
    states = np.asarray(spec.batch_initial(start_stage, num_trajectories, rng), dtype=float)
    totals = np.zeros(num_trajectories)
    gamma_acc = 1.0
    k = start_stage
    for _ in range(num_cycles * spec.num_stages):
        probs = policy.action_probs_batch(k, states)
        u = rng.random(num_trajectories)
        actions = (u[:, None] > np.cumsum(probs, axis=1)).sum(axis=1)
        actions = np.minimum(actions, probs.shape[1] - 1)
        rewards, s_prime = spec.batch_step(k, states, actions, rng)
        totals += gamma_acc * np.asarray(rewards, dtype=float)
        states = np.asarray(spec.batch_stage_transition(k, np.asarray(s_prime, dtype=float)))
        gamma_acc *= spec.stage(k).discount
        k = spec.successor(k)
    return float(totals.mean())


def monte_carlo_value(
    spec: CyclicMdpSpec,
    policy: PolicyVector,
    start_stage: int,
    num_trajectories: int,
    num_cycles: int,
    rng: np.random.Generator,
) -> float:
    """Mean discounted return over independent starts drawn from eta_k."""
    if num_trajectories < 1:
        raise ValueError(f"num_trajectories must be >= 1, got {num_trajectories}")
    pure_cycle = all(s.horizon == 1 for s in spec.stages)
    if (
        pure_cycle
        and spec.batch_step is not None
        and spec.batch_initial is not None
        and spec.batch_stage_transition is not None
    ):
        return _batch_value(spec, policy, start_stage, num_trajectories, num_cycles, rng)
    values = np.empty(num_trajectories)
    for i in range(num_trajectories):
        start = spec.initial_state(start_stage, rng)
        values[i] = rollout(spec, policy, start_stage, start, num_cycles, rng)
    return float(values.mean())
