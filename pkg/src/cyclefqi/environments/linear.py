"""Three-stage linear-Gaussian cyclic environment for inference studies.

Stage dimensions cycle (1, 2, 2) with binary actions.  Dynamics are a pure
cycle: every transition is terminal on horizon-1 stages, the sampled next
state s' = A_k s + B_k a + noise already lives in stage [k+1]'s coordinates,
and the stage-transition map is the identity.  Rewards are w_k . s + u_{k,a}.

Because values are affine in the state, the constrained-optimal policy plays
a constant action per stage; `optimal_policy` and `affine_optimal_values`
solve the corresponding affine fixed point exactly.  Stage discounts are not
part of the published parameterization; the default of 0.9 per stage is a
configuration choice.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..mdp import CyclicMdpSpec, PolicyVector, StageSpec, cycle_index

__all__ = ["LinearEnvParams", "make_linear_env", "optimal_policy", "affine_optimal_values"]

DIMS = (1, 2, 2)
NUM_ACTIONS = 2
STATE_BOUND = 2.0


@dataclass(frozen=True)
class LinearEnvParams:
    """Sampled coefficients of one environment instance."""

    a_mats: tuple[np.ndarray, ...]   # A_k: (d_{[k+1]}, d_k)
    b_vecs: tuple[np.ndarray, ...]   # B_k: (d_{[k+1]},)
    w_vecs: tuple[np.ndarray, ...]   # w_k: (d_k,)
    u_consts: np.ndarray             # (K, 2) per-action reward constants
    noise_sd: float
    discounts: tuple[float, ...]
    seed: int

    @property
    def num_stages(self) -> int:
        return len(self.a_mats)

    def describe(self) -> dict:
        return {
            "name": "linear",
            "seed": self.seed,
            "dims": list(DIMS),
            "action_count": NUM_ACTIONS,
            "state_bound": STATE_BOUND,
            "noise_sd": self.noise_sd,
            "discounts": list(self.discounts),
            "coefficient_distributions": {
                "A": "uniform[-0.3, 0.3]",
                "B": "uniform[-0.3, 0.3]",
                "w": "uniform[-0.5, 0.5]",
                "u": "normal(0, 0.5^2)",
            },
            "non_source_defaults": {
                "discounts": "per-stage 0.9 (not part of the published setup)",
            },
            "a_mats": [m.tolist() for m in self.a_mats],
            "b_vecs": [v.tolist() for v in self.b_vecs],
            "w_vecs": [v.tolist() for v in self.w_vecs],
            "u_consts": self.u_consts.tolist(),
        }


def draw_params(
    seed: int, noise_sd: float = 0.1, discounts: tuple[float, ...] = (0.9, 0.9, 0.9)
) -> LinearEnvParams:
    rng = np.random.default_rng(seed)
    k_count = len(DIMS)
    a_mats, b_vecs, w_vecs = [], [], []
    for k in range(k_count):
        d_in = DIMS[k]
        d_out = DIMS[(k + 1) % k_count]
        a_mats.append(rng.uniform(-0.3, 0.3, size=(d_out, d_in)))
        b_vecs.append(rng.uniform(-0.3, 0.3, size=d_out))
        w_vecs.append(rng.uniform(-0.5, 0.5, size=d_in))
    u_consts = rng.normal(0.0, 0.5, size=(k_count, NUM_ACTIONS))
    return LinearEnvParams(
        tuple(a_mats), tuple(b_vecs), tuple(w_vecs), u_consts, noise_sd, tuple(discounts), seed
    )


def make_linear_env(
    seed: int, noise_sd: float = 0.1, discounts: tuple[float, ...] = (0.9, 0.9, 0.9)
) -> CyclicMdpSpec:
    """Environment with coefficients drawn once from the fixed distributions."""
    params = draw_params(seed, noise_sd, discounts)
    return spec_from_params(params)


def spec_from_params(params: LinearEnvParams) -> CyclicMdpSpec:
    k_count = params.num_stages

    def step(k, state, action, rng):
        reward = float(params.w_vecs[k - 1] @ state + params.u_consts[k - 1, action])
        nxt = params.a_mats[k - 1] @ state + params.b_vecs[k - 1] * action
        if params.noise_sd > 0:
            nxt = nxt + params.noise_sd * rng.standard_normal(nxt.shape[0])
        return reward, nxt

    def batch_step(k, states, actions, rng):
        rewards = states @ params.w_vecs[k - 1] + params.u_consts[k - 1][actions]
        nxt = states @ params.a_mats[k - 1].T + np.outer(actions, params.b_vecs[k - 1])
        if params.noise_sd > 0:
            nxt = nxt + params.noise_sd * rng.standard_normal(nxt.shape)
        return rewards, nxt

    def terminal_predicate(k, state, action):
        return True  # pure cycle: one decision per stage

    def stage_transition(k, s_prime):
        return s_prime

    def batch_stage_transition(k, s_primes):
        return s_primes

    def initial_state(k, rng):
        return rng.uniform(-STATE_BOUND, STATE_BOUND, size=DIMS[k - 1])

    def batch_initial(k, n, rng):
        return rng.uniform(-STATE_BOUND, STATE_BOUND, size=(n, DIMS[k - 1]))

    stages = tuple(
        StageSpec(
            state_dim=DIMS[k],
            action_count=NUM_ACTIONS,
            horizon=1,
            discount=params.discounts[k],
            reward_max=float(
                STATE_BOUND * np.abs(params.w_vecs[k]).sum() + np.abs(params.u_consts[k]).max()
            ),
        )
        for k in range(k_count)
    )
    return CyclicMdpSpec(
        stages=stages,
        step=step,
        terminal_predicate=terminal_predicate,
        stage_transition=stage_transition,
        initial_state=initial_state,
        name="linear",
        dataset_mode="iid",
        batch_step=batch_step,
        batch_initial=batch_initial,
        batch_stage_transition=batch_stage_transition,
        params=params.describe(),
    )


def _affine_fixed_point(params: LinearEnvParams) -> tuple[list[np.ndarray], np.ndarray, np.ndarray]:
    """Solve V_k(s) = m_k . s + c_k under the optimal constant actions.

    The slope system m_k = w_k + gamma_k A_k^T m_{[k+1]} is action-free, so
    the per-stage optimal action maximizes the constant offset
    u_{k,a} + gamma_k m_{[k+1]} . B_k a; the offsets c then solve a K-dim
    cyclic linear system.  Transition noise is mean zero and drops out.
    """
    k_count = params.num_stages
    dims = [params.w_vecs[k].shape[0] for k in range(k_count)]
    offsets = np.concatenate([[0], np.cumsum(dims)]).astype(int)
    total = offsets[-1]
    lhs = np.eye(total)
    rhs = np.concatenate(params.w_vecs)
    for k in range(k_count):
        nxt = (k + 1) % k_count
        rows = slice(offsets[k], offsets[k + 1])
        cols = slice(offsets[nxt], offsets[nxt + 1])
        lhs[rows, cols] -= params.discounts[k] * params.a_mats[k].T
    m_flat = np.linalg.solve(lhs, rhs)
    m_vecs = [m_flat[offsets[k] : offsets[k + 1]] for k in range(k_count)]

    actions = np.zeros(k_count, dtype=int)
    gains = np.zeros(k_count)
    for k in range(k_count):
        nxt = (k + 1) % k_count
        per_action = [
            params.u_consts[k, a] + params.discounts[k] * (m_vecs[nxt] @ params.b_vecs[k]) * a
            for a in range(NUM_ACTIONS)
        ]
        actions[k] = int(np.argmax(per_action))
        gains[k] = per_action[actions[k]]

    lhs_c = np.eye(k_count)
    for k in range(k_count):
        lhs_c[k, (k + 1) % k_count] -= params.discounts[k]
    c = np.linalg.solve(lhs_c, gains)
    return m_vecs, c, actions


def optimal_policy(params: LinearEnvParams) -> PolicyVector:
    """Exact constrained-optimal policy (constant action per stage)."""
    _, _, actions = _affine_fixed_point(params)
    return PolicyVector.constant(spec_from_params(params), actions)


def affine_optimal_values(params: LinearEnvParams) -> np.ndarray:
    """Exact v*_k = E_{s ~ eta_k}[V*_k(s)]; the uniform eta has mean zero, so
    the expectation equals the affine offset c_k."""
    _, c, _ = _affine_fixed_point(params)
    return c
