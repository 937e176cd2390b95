"""Exact operators on finite cyclic MDPs.

These tables exist to pin down ground truth: one exact application of the
constrained Bellman operator, its fixed point by iteration, and exact policy
evaluation.  The contraction suite and several oracle tests are built on top.
States of stage k are indexed 0..S_k-1 and are exposed to function
approximators as 1-dimensional vectors [float(index)].
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mdp import CyclicMdpSpec, StageSpec, UpdateSet, cycle_index

__all__ = [
    "FiniteCyclicMdp",
    "apply_bellman_operator_tabular",
    "fixed_point_q",
    "evaluate_policy_q",
    "random_layered_mdp",
]

ROW_SUM_TOL = 1e-10


@dataclass(frozen=True)
class FiniteCyclicMdp:
    """Explicit tables for a K-stage cyclic MDP with finite state spaces.

    transition[k-1]: (S_k, A_k, S_k) row-stochastic kernel P_k
    reward[k-1]:     (S_k, A_k) expected immediate rewards r_k
    terminal[k-1]:   (S_k, A_k) boolean membership in T_k
    phi[k-1]:        (S_k,) integer map from post-terminal states of stage k
                     into state indices of stage [k+1]
    discounts:       per-stage gamma_k
    horizons:        per-stage H_k (layered constructions guarantee
                     termination within H_k steps)
    """

    transition: tuple[np.ndarray, ...]
    reward: tuple[np.ndarray, ...]
    terminal: tuple[np.ndarray, ...]
    phi: tuple[np.ndarray, ...]
    discounts: tuple[float, ...]
    horizons: tuple[int, ...]

    def __post_init__(self) -> None:
        k_count = len(self.transition)
        if not (len(self.reward) == len(self.terminal) == len(self.phi) == k_count):
            raise ValueError("per-stage table counts disagree")
        for k in range(k_count):
            p = self.transition[k]
            rows = p.reshape(-1, p.shape[-1]).sum(axis=1)
            if np.any(np.abs(rows - 1.0) > ROW_SUM_TOL):
                raise ValueError(f"stage {k + 1} transition rows must sum to 1 within {ROW_SUM_TOL}")
            nxt = cycle_index(k + 2, k_count)
            target_states = self.transition[nxt - 1].shape[0]
            if np.any((self.phi[k] < 0) | (self.phi[k] >= target_states)):
                raise ValueError(f"stage {k + 1} phi maps outside stage {nxt}'s state range")

    @property
    def num_stages(self) -> int:
        return len(self.transition)

    def state_counts(self) -> tuple[int, ...]:
        return tuple(p.shape[0] for p in self.transition)

    def action_counts(self) -> tuple[int, ...]:
        return tuple(p.shape[1] for p in self.transition)

    def zero_q(self) -> list[np.ndarray]:
        return [np.zeros(r.shape) for r in self.reward]

    def cycle_discount(self) -> float:
        return float(np.prod(self.discounts))

    def total_horizon(self) -> int:
        return int(sum(self.horizons))


def _state_values(
    mdp: FiniteCyclicMdp,
    q_tables: list[np.ndarray],
    update_set: UpdateSet,
    fixed_policies: dict[int, np.ndarray] | None,
) -> list[np.ndarray]:
    fixed_policies = fixed_policies or {}
    values = []
    for k in range(1, mdp.num_stages + 1):
        q = q_tables[k - 1]
        if k in update_set:
            values.append(q.max(axis=1))
        else:
            pi = fixed_policies[k]
            values.append((q * pi).sum(axis=1))
    return values


def apply_bellman_operator_tabular(
    mdp: FiniteCyclicMdp,
    q_tables: list[np.ndarray],
    update_set: UpdateSet,
    fixed_policies: dict[int, np.ndarray] | None = None,
    skip_discount: bool = False,
) -> list[np.ndarray]:
    """One exact application of the constrained Bellman operator to Q tables.

    fixed_policies maps a non-updated stage k to a (S_k, A_k) row-stochastic
    matrix.  skip_discount drops gamma_k at stage exits; it exists purely as a
    negative control for the contraction suite.
    """
    values = _state_values(mdp, q_tables, update_set, fixed_policies)
    out = []
    for k in range(1, mdp.num_stages + 1):
        nxt = cycle_index(k + 1, mdp.num_stages)
        gamma = 1.0 if skip_discount else mdp.discounts[k - 1]
        v_same = values[k - 1]
        v_next = values[nxt - 1][mdp.phi[k - 1]]
        term = mdp.terminal[k - 1]
        # continuation per (s, a): P_k(.|s,a) @ (within-stage or cross-stage value)
        cont_same = mdp.transition[k - 1] @ v_same
        cont_next = mdp.transition[k - 1] @ v_next
        out.append(mdp.reward[k - 1] + np.where(term, gamma * cont_next, cont_same))
    return out


def fixed_point_q(
    mdp: FiniteCyclicMdp,
    update_set: UpdateSet,
    fixed_policies: dict[int, np.ndarray] | None = None,
    tol: float = 1e-12,
    max_iter: int = 100_000,
) -> list[np.ndarray]:
    """Iterate the operator from zero until the sup-norm step is below tol."""
    q = mdp.zero_q()
    for _ in range(max_iter):
        nxt = apply_bellman_operator_tabular(mdp, q, update_set, fixed_policies)
        delta = max(float(np.max(np.abs(a - b))) for a, b in zip(nxt, q))
        q = nxt
        if delta < tol:
            return q
    raise RuntimeError(f"value iteration did not reach tol={tol} in {max_iter} iterations")


def evaluate_policy_q(
    mdp: FiniteCyclicMdp,
    policies: dict[int, np.ndarray],
    tol: float = 1e-12,
) -> list[np.ndarray]:
    """Exact Q of a fixed composite policy: fixed point with an empty update set."""
    empty = UpdateSet(frozenset(), mdp.num_stages)
    return fixed_point_q(mdp, empty, policies, tol=tol)


def greedy_tables(q_tables: list[np.ndarray]) -> dict[int, np.ndarray]:
    """Greedy row-stochastic policy tables (lowest index wins ties)."""
    out = {}
    for k, q in enumerate(q_tables, start=1):
        pi = np.zeros_like(q)
        pi[np.arange(q.shape[0]), q.argmax(axis=1)] = 1.0
        out[k] = pi
    return out


def random_layered_mdp(
    rng: np.random.Generator,
    horizons: tuple[int, ...] = (2, 1, 2),
    states_per_layer: int = 3,
    action_counts: tuple[int, ...] | None = None,
    discounts: tuple[float, ...] | None = None,
    deterministic: bool = False,
    reward_scale: float = 1.0,
) -> FiniteCyclicMdp:
    """Random finite cyclic MDP with layered states enforcing the horizons.

    Stage k holds H_k layers of `states_per_layer` states.  Transitions always
    advance one layer (wrapping from the last layer back to the first, which
    only matters for the post-terminal sample consumed by phi), and a pair is
    terminal exactly when the state sits in the final layer.  This guarantees
    each stage takes exactly H_k steps, the structural premise of the
    cycle-discount contraction.
    """
    k_count = len(horizons)
    if action_counts is None:
        action_counts = tuple([2] * k_count)
    if discounts is None:
        discounts = tuple([1.0] * (k_count - 1) + [0.8])
    transition, reward, terminal, phi = [], [], [], []
    for k in range(k_count):
        s_count = horizons[k] * states_per_layer
        a_count = action_counts[k]
        p = np.zeros((s_count, a_count, s_count))
        for s in range(s_count):
            layer = s // states_per_layer
            nxt_layer = (layer + 1) % horizons[k]
            lo = nxt_layer * states_per_layer
            for a in range(a_count):
                if deterministic:
                    row = np.zeros(states_per_layer)
                    row[int(rng.integers(states_per_layer))] = 1.0
                else:
                    row = rng.dirichlet(np.ones(states_per_layer))
                p[s, a, lo : lo + states_per_layer] = row
        r = rng.uniform(0.0, reward_scale, size=(s_count, a_count))
        t = np.zeros((s_count, a_count), dtype=bool)
        t[(horizons[k] - 1) * states_per_layer :, :] = True
        transition.append(p)
        reward.append(r)
        terminal.append(t)
    for k in range(k_count):
        nxt_states = horizons[(k + 1) % k_count] * states_per_layer
        # phi targets the first layer of the successor stage
        phi.append(rng.integers(0, states_per_layer, size=transition[k].shape[0]) % nxt_states)
    return FiniteCyclicMdp(
        transition=tuple(transition),
        reward=tuple(reward),
        terminal=tuple(terminal),
        phi=tuple(phi),
        discounts=tuple(float(g) for g in discounts),
        horizons=tuple(int(h) for h in horizons),
    )


def to_spec(mdp: FiniteCyclicMdp, initial: dict[int, np.ndarray] | None = None) -> CyclicMdpSpec:
    """Wrap tables as a CyclicMdpSpec with states encoded as [float(index)].

    initial maps stage -> distribution over its states; uniform by default.
    """
    counts = mdp.state_counts()
    eta = {
        k: (initial[k] if initial and k in initial else np.full(counts[k - 1], 1.0 / counts[k - 1]))
        for k in range(1, mdp.num_stages + 1)
    }

    def step(k, state, action, rng):
        s = int(state[0])
        p = mdp.transition[k - 1][s, action]
        s_next = int(rng.choice(len(p), p=p))
        return float(mdp.reward[k - 1][s, action]), np.array([float(s_next)])

    def terminal_predicate(k, state, action):
        return bool(mdp.terminal[k - 1][int(state[0]), action])

    def stage_transition(k, s_prime):
        return np.array([float(mdp.phi[k - 1][int(s_prime[0])])])

    def initial_state(k, rng):
        return np.array([float(rng.choice(counts[k - 1], p=eta[k]))])

    stages = tuple(
        StageSpec(
            state_dim=1,
            action_count=mdp.action_counts()[k - 1],
            horizon=mdp.horizons[k - 1],
            discount=mdp.discounts[k - 1],
            reward_max=float(np.max(np.abs(mdp.reward[k - 1]))),
        )
        for k in range(1, mdp.num_stages + 1)
    )
    return CyclicMdpSpec(
        stages=stages,
        step=step,
        terminal_predicate=terminal_predicate,
        stage_transition=stage_transition,
        initial_state=initial_state,
        name="finite-tabular",
    )
