"""Stage-wise fitted Q-iteration with update sets, plus the flattened baseline.

Training keeps one fitted model per (stage, action) pair.  Every iteration is
synchronous: all regression targets across all stages are computed from the
previous iterate before any stage is refit, so the per-stage least-squares
problems decouple within an iteration and their fit order is irrelevant.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .datasets import StageDataset, validate_against_spec
from .mdp import CyclicMdpSpec, PolicyVector, UpdateSet, value_upper_bound
from .regressors import ConstantModel, FittedModel, RegressorSpec, fit, model_from_dict

logger = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "QVector",
    "FlattenedProblem",
    "FlattenedQ",
    "train_cyclefqi",
    "greedy_policy",
    "build_flattened_problem",
    "train_flattened_fqi",
    "save_qvector",
    "load_qvector",
]

FixedPolicies = dict[int, Callable[[np.ndarray], np.ndarray]]


@dataclass(frozen=True)
class TrainConfig:
    """Knobs of one training run; the seed drives every stochastic fit.

    `regressor` is either one spec applied to every stage or a sequence with
    one spec per stage (needed when linear-sieve bases must match
    heterogeneous stage dimensions).
    """

    iterations: int
    regressor: RegressorSpec | tuple[RegressorSpec, ...]
    clip_targets: bool = False
    seed: int = 0

    def __post_init__(self) -> None:
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")

    def stage_regressor(self, k: int) -> RegressorSpec:
        if isinstance(self.regressor, tuple):
            if not 1 <= k <= len(self.regressor):
                raise ValueError(f"no regressor configured for stage {k}")
            return self.regressor[k - 1]
        return self.regressor


class QVector:
    """Fitted action-value vector: models[k-1][a] predicts Q_k(s, a).

    A missing model (None) predicts 0, which doubles as the zero initializer.
    """

    def __init__(
        self,
        models: Sequence[Sequence[FittedModel | None]],
        update_set: UpdateSet,
        fixed_policies: FixedPolicies | None = None,
    ):
        self.models = [list(per_stage) for per_stage in models]
        self.update_set = update_set
        self.fixed_policies = dict(fixed_policies or {})

    @classmethod
    def zero(
        cls, spec: CyclicMdpSpec, update_set: UpdateSet, fixed_policies: FixedPolicies | None = None
    ) -> "QVector":
        models = [[None] * s.action_count for s in spec.stages]
        return cls(models, update_set, fixed_policies)

    @property
    def num_stages(self) -> int:
        return len(self.models)

    def q_values_batch(self, k: int, states: np.ndarray) -> np.ndarray:
        """(n, A_k) matrix of action values at a batch of stage-k states."""
        states = np.asarray(states, dtype=float)
        cols = []
        for model in self.models[k - 1]:
            if model is None:
                cols.append(np.zeros(states.shape[0]))
            else:
                cols.append(model.predict_batch(states))
        return np.stack(cols, axis=1)

    def q_values(self, k: int, state: np.ndarray) -> np.ndarray:
        return self.q_values_batch(k, np.asarray(state, dtype=float)[None, :])[0]


def greedy_policy(q: QVector) -> PolicyVector:
    """Greedy composite policy: argmax on updated stages (lowest index wins
    ties), the fixed policy elsewhere."""
    fns, kinds, batch_fns = [], [], []
    for k in range(1, q.num_stages + 1):
        a_count = len(q.models[k - 1])
        if k in q.update_set:

            def probs(state, k=k, a_count=a_count):
                out = np.zeros(a_count)
                out[int(np.argmax(q.q_values(k, state)))] = 1.0
                return out

            def probs_batch(states, k=k, a_count=a_count):
                best = np.argmax(q.q_values_batch(k, states), axis=1)
                out = np.zeros((len(states), a_count))
                out[np.arange(len(states)), best] = 1.0
                return out

            fns.append(probs)
            batch_fns.append(probs_batch)
            kinds.append("greedy-from-Q")
        else:
            fns.append(q.fixed_policies[k])
            batch_fns.append(None)
            kinds.append("fixed")
    return PolicyVector(fns, kinds, batch_fns)


@dataclass(frozen=True)
class _StageArrays:
    """Cached per-stage data views reused across iterations."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    nonterminal_rows: np.ndarray
    terminal_rows: np.ndarray
    next_states_nonterm: np.ndarray
    mapped_next_terminal: np.ndarray  # phi_k(s') for terminal rows, in stage [k+1] coords


def _prepare_stage(ds: StageDataset, spec: CyclicMdpSpec) -> _StageArrays:
    k = ds.stage
    states = ds.states()
    terminals = ds.terminals()
    next_states = [t.next_state for t in ds.transitions]
    nonterm = np.flatnonzero(~terminals)
    term = np.flatnonzero(terminals)
    d_k = spec.stage(k).state_dim
    d_next = spec.stage(spec.successor(k)).state_dim
    nonterm_next = (
        np.stack([next_states[i] for i in nonterm]) if nonterm.size else np.zeros((0, d_k))
    )
    if term.size:
        mapped = np.stack([np.asarray(spec.stage_transition(k, next_states[i]), dtype=float) for i in term])
        if mapped.shape[1] != d_next:
            raise ValueError(
                f"stage transition out of stage {k} produced dim {mapped.shape[1]}, expected {d_next}"
            )
    else:
        mapped = np.zeros((0, d_next))
    return _StageArrays(states, ds.actions(), ds.rewards(), nonterm, term, nonterm_next, mapped)


def _constrained_values_batch(
    q: QVector,
    k: int,
    states: np.ndarray,
    update_set: UpdateSet,
    fixed_policies: FixedPolicies,
) -> np.ndarray:
    if states.shape[0] == 0:
        return np.zeros(0)
    q_vals = q.q_values_batch(k, states)
    if k in update_set:
        return q_vals.max(axis=1)
    probs = np.stack([fixed_policies[k](s) for s in states])
    return (q_vals * probs).sum(axis=1)


def _compute_targets(
    arrays: dict[int, _StageArrays],
    q_prev: QVector,
    spec: CyclicMdpSpec,
    update_set: UpdateSet,
    fixed_policies: FixedPolicies,
    clip_bound: float | None,
) -> dict[int, np.ndarray]:
    targets: dict[int, np.ndarray] = {}
    for k, arr in arrays.items():
        y = arr.rewards.astype(float).copy()
        if arr.nonterminal_rows.size:
            cont = _constrained_values_batch(
                q_prev, k, arr.next_states_nonterm, update_set, fixed_policies
            )
            y[arr.nonterminal_rows] += cont
        if arr.terminal_rows.size:
            gamma = spec.stage(k).discount
            if gamma != 0.0:
                nxt = spec.successor(k)
                cont = _constrained_values_batch(
                    q_prev, nxt, arr.mapped_next_terminal, update_set, fixed_policies
                )
                y[arr.terminal_rows] += gamma * cont
        if clip_bound is not None:
            np.clip(y, -clip_bound, clip_bound, out=y)
        targets[k] = y
    return targets


def _fit_rng(seed: int, iteration: int, stage: int, action: int) -> np.random.Generator:
    # keyed stream: independent of stage fit order, reproducible per (m, k, a)
    return np.random.default_rng(np.random.SeedSequence((seed, iteration, stage, action)))


def _fit_stage_action(
    regressor: RegressorSpec,
    states: np.ndarray,
    rows: np.ndarray,
    y: np.ndarray,
    rng: np.random.Generator,
    where: str,
) -> FittedModel:
    if rows.size == 0:
        logger.warning("no samples for %s; using a constant-zero model", where)
        return ConstantModel(0.0, states.shape[1])
    try:
        return fit(regressor, states[rows], y[rows], rng)
    except Exception as exc:
        raise RuntimeError(f"regression failed at {where}: {exc}") from exc


def train_cyclefqi(
    datasets: Sequence[StageDataset],
    spec: CyclicMdpSpec,
    update_set: UpdateSet,
    fixed_policies: FixedPolicies | None,
    config: TrainConfig,
    callback: Callable[[int, dict[int, np.ndarray], QVector], None] | None = None,
) -> tuple[QVector, PolicyVector]:
    """Run the cyclic fitted Q-iteration loop.

    Each of the `config.iterations` global iterations first computes every
    stage's regression targets from the previous Q-vector (reward plus the
    constrained continuation value, crossing stages through the transition
    map on terminal rows), then refits all (stage, action) models on their
    action subsamples.  Q starts at zero.  `callback(m, targets, q_prev)` is
    invoked after target computation, before any fit, mainly for tests.

    Returns the final Q-vector and its greedy/fixed composite policy.
    """
    fixed_policies = dict(fixed_policies or {})
    by_stage = {ds.stage: ds for ds in datasets}
    for k in range(1, spec.num_stages + 1):
        if k not in by_stage or len(by_stage[k]) == 0:
            raise ValueError(f"training requires a nonempty dataset for stage {k}")
        if k not in update_set and k not in fixed_policies:
            raise ValueError(f"stage {k} is outside the update set but has no fixed policy")
    validate_against_spec(list(by_stage.values()), spec)
    arrays = {k: _prepare_stage(ds, spec) for k, ds in by_stage.items()}
    clip_bound = value_upper_bound(spec) if config.clip_targets else None

    q = QVector.zero(spec, update_set, fixed_policies)
    for m in range(1, config.iterations + 1):
        targets = _compute_targets(arrays, q, spec, update_set, fixed_policies, clip_bound)
        if callback is not None:
            callback(m, targets, q)
        new_models = []
        for k in range(1, spec.num_stages + 1):
            arr = arrays[k]
            per_action = []
            for a in range(spec.stage(k).action_count):
                rows = np.flatnonzero(arr.actions == a)
                model = _fit_stage_action(
                    config.stage_regressor(k),
                    arr.states,
                    rows,
                    targets[k],
                    _fit_rng(config.seed, m, k, a),
                    f"iteration {m}, stage {k}, action {a}",
                )
                per_action.append(model)
            new_models.append(per_action)
        q = QVector(new_models, update_set, fixed_policies)
    return q, greedy_policy(q)


# ---------------------------------------------------------------------------
# flattened baseline
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FlattenedProblem:
    """Joint single-MDP view: zero-padded states, disjoint-union actions.

    The joint state concatenates the per-stage blocks (a stage's coordinates
    sit in its own block, zeros elsewhere) followed by a K-length one-hot
    stage indicator; the indicator is dropped when K = 1, where it would be a
    constant column and the construction must coincide with the single-stage
    problem.  Stage-k action a maps to the joint index action_offsets[k-1]+a,
    which regression inputs carry as a one-hot block after the state, so one
    pooled model covers the whole joint space.
    """

    state_dims: tuple[int, ...]
    action_counts: tuple[int, ...]
    state_offsets: tuple[int, ...]
    action_offsets: tuple[int, ...]
    joint_state_dim: int
    joint_action_count: int
    include_stage_indicator: bool

    @property
    def num_stages(self) -> int:
        return len(self.state_dims)

    @property
    def joint_input_dim(self) -> int:
        return self.joint_state_dim + self.joint_action_count

    def embed_batch(self, k: int, states: np.ndarray) -> np.ndarray:
        states = np.asarray(states, dtype=float)
        out = np.zeros((states.shape[0], self.joint_state_dim))
        off = self.state_offsets[k - 1]
        out[:, off : off + self.state_dims[k - 1]] = states
        if self.include_stage_indicator:
            out[:, sum(self.state_dims) + k - 1] = 1.0
        return out

    def embed(self, k: int, state: np.ndarray) -> np.ndarray:
        return self.embed_batch(k, np.asarray(state, dtype=float)[None, :])[0]

    def joint_action(self, k: int, action: int) -> int:
        if not 0 <= action < self.action_counts[k - 1]:
            raise ValueError(f"action {action} outside stage {k}'s range")
        return self.action_offsets[k - 1] + action

    def action_block(self, k: int) -> range:
        off = self.action_offsets[k - 1]
        return range(off, off + self.action_counts[k - 1])

    def encode_batch(self, k: int, states: np.ndarray, action: int) -> np.ndarray:
        """(n, joint_input_dim) regression inputs: embedded state then the
        one-hot of the joint action index."""
        embedded = self.embed_batch(k, states)
        onehot = np.zeros((embedded.shape[0], self.joint_action_count))
        onehot[:, self.joint_action(k, action)] = 1.0
        return np.concatenate([embedded, onehot], axis=1)


def build_flattened_problem(spec: CyclicMdpSpec, include_stage_indicator: bool = True) -> FlattenedProblem:
    dims = tuple(s.state_dim for s in spec.stages)
    acts = tuple(s.action_count for s in spec.stages)
    indicator = include_stage_indicator and spec.num_stages > 1
    state_offsets = tuple(int(v) for v in np.concatenate([[0], np.cumsum(dims)[:-1]]))
    action_offsets = tuple(int(v) for v in np.concatenate([[0], np.cumsum(acts)[:-1]]))
    return FlattenedProblem(
        state_dims=dims,
        action_counts=acts,
        state_offsets=state_offsets,
        action_offsets=action_offsets,
        joint_state_dim=sum(dims) + (spec.num_stages if indicator else 0),
        joint_action_count=sum(acts),
        include_stage_indicator=indicator,
    )


class FlattenedQ:
    """Joint Q: one pooled model over [embedded state, action one-hot] inputs."""

    def __init__(self, problem: FlattenedProblem, model: FittedModel | None):
        self.problem = problem
        self.model = model

    def q_values_batch(self, k: int, states: np.ndarray) -> np.ndarray:
        """Stage-restricted action values on stage-k states (only that
        stage's action block is eligible)."""
        states = np.asarray(states, dtype=float)
        a_count = self.problem.action_counts[k - 1]
        if self.model is None:
            return np.zeros((states.shape[0], a_count))
        cols = [
            self.model.predict_batch(self.problem.encode_batch(k, states, a)) for a in range(a_count)
        ]
        return np.stack(cols, axis=1)

    def q_values(self, k: int, state: np.ndarray) -> np.ndarray:
        return self.q_values_batch(k, np.asarray(state, dtype=float)[None, :])[0]


def _flattened_policy(
    q: FlattenedQ, update_set: UpdateSet, fixed_policies: FixedPolicies
) -> PolicyVector:
    fns, kinds, batch_fns = [], [], []
    for k in range(1, q.problem.num_stages + 1):
        a_count = q.problem.action_counts[k - 1]
        if k in update_set:

            def probs(state, k=k, a_count=a_count):
                out = np.zeros(a_count)
                out[int(np.argmax(q.q_values(k, state)))] = 1.0
                return out

            def probs_batch(states, k=k, a_count=a_count):
                best = np.argmax(q.q_values_batch(k, states), axis=1)
                out = np.zeros((len(states), a_count))
                out[np.arange(len(states)), best] = 1.0
                return out

            fns.append(probs)
            batch_fns.append(probs_batch)
            kinds.append("greedy-from-Q")
        else:
            fns.append(fixed_policies[k])
            batch_fns.append(None)
            kinds.append("fixed")
    return PolicyVector(fns, kinds, batch_fns)


def train_flattened_fqi(
    datasets: Sequence[StageDataset],
    spec: CyclicMdpSpec,
    config: TrainConfig,
    update_set: UpdateSet | None = None,
    fixed_policies: FixedPolicies | None = None,
    callback: Callable[[int, dict[int, np.ndarray], FlattenedQ], None] | None = None,
) -> tuple[FlattenedQ, PolicyVector]:
    """Standard FQI on the zero-padded joint problem (all stages by default).

    All transitions pool into one regression per iteration on inputs
    [embedded state, joint-action one-hot]; the continuation value at a
    stage-k next state maximizes (or averages, outside the update set) over
    stage k's action block only.  The pooled fit stream is keyed by
    (seed, iteration, 1, 0), which coincides with train_cyclefqi's keying in
    the single-stage single-action reduction.
    """
    fixed_policies = dict(fixed_policies or {})
    update_set = update_set if update_set is not None else UpdateSet.all_stages(spec.num_stages)
    if isinstance(config.regressor, tuple):
        raise ValueError("the flattened baseline fits one joint space; pass a single regressor spec")
    by_stage = {ds.stage: ds for ds in datasets}
    for k in range(1, spec.num_stages + 1):
        if k not in by_stage or len(by_stage[k]) == 0:
            raise ValueError(f"training requires a nonempty dataset for stage {k}")
        if k not in update_set and k not in fixed_policies:
            raise ValueError(f"stage {k} is outside the update set but has no fixed policy")
    validate_against_spec(list(by_stage.values()), spec)
    problem = build_flattened_problem(spec)
    arrays = {k: _prepare_stage(ds, spec) for k, ds in by_stage.items()}
    stage_order = sorted(arrays)
    joint_inputs = np.concatenate(
        [
            np.concatenate(
                [
                    problem.embed_batch(k, arrays[k].states),
                    np.eye(problem.joint_action_count)[
                        [problem.joint_action(k, a) for a in arrays[k].actions]
                    ],
                ],
                axis=1,
            )
            for k in stage_order
        ]
    )
    clip_bound = value_upper_bound(spec) if config.clip_targets else None

    def constrained_next(q: FlattenedQ, k: int, states: np.ndarray) -> np.ndarray:
        if states.shape[0] == 0:
            return np.zeros(0)
        q_vals = q.q_values_batch(k, states)
        if k in update_set:
            return q_vals.max(axis=1)
        probs = np.stack([fixed_policies[k](s) for s in states])
        return (q_vals * probs).sum(axis=1)

    q = FlattenedQ(problem, None)
    for m in range(1, config.iterations + 1):
        targets: dict[int, np.ndarray] = {}
        for k, arr in arrays.items():
            y = arr.rewards.astype(float).copy()
            if arr.nonterminal_rows.size:
                y[arr.nonterminal_rows] += constrained_next(q, k, arr.next_states_nonterm)
            if arr.terminal_rows.size:
                gamma = spec.stage(k).discount
                if gamma != 0.0:
                    nxt = spec.successor(k)
                    y[arr.terminal_rows] += gamma * constrained_next(q, nxt, arr.mapped_next_terminal)
            if clip_bound is not None:
                np.clip(y, -clip_bound, clip_bound, out=y)
            targets[k] = y
        if callback is not None:
            callback(m, targets, q)
        y_joint = np.concatenate([targets[k] for k in stage_order])
        try:
            model = fit(config.regressor, joint_inputs, y_joint, _fit_rng(config.seed, m, 1, 0))
        except Exception as exc:
            raise RuntimeError(f"regression failed at flattened iteration {m}: {exc}") from exc
        q = FlattenedQ(problem, model)
    return q, _flattened_policy(q, update_set, fixed_policies)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_qvector(q: QVector, path: str | Path, config: TrainConfig | None = None) -> None:
    """Write a trained Q-vector with its manifest to a JSON checkpoint."""
    manifest = {
        "num_stages": q.num_stages,
        "update_set": sorted(q.update_set.members),
        "seed": config.seed if config else None,
        "iterations": config.iterations if config else None,
        "regressor": type(config.regressor).__name__ if config else None,
        "clip_targets": config.clip_targets if config else None,
    }
    payload = {
        "format_version": 1,
        "manifest": manifest,
        "models": [
            [None if m is None else m.to_dict() for m in per_stage] for per_stage in q.models
        ],
    }
    Path(path).write_text(json.dumps(payload), encoding="utf-8")


def load_qvector(path: str | Path) -> tuple[QVector, dict]:
    """Load a checkpoint; fixed policies are not serialized and return empty."""
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    if payload.get("format_version") != 1:
        raise ValueError(f"unsupported checkpoint format_version {payload.get('format_version')!r}")
    manifest = payload["manifest"]
    models = [
        [None if m is None else model_from_dict(m) for m in per_stage]
        for per_stage in payload["models"]
    ]
    update_set = UpdateSet.of(manifest["num_stages"], manifest["update_set"])
    return QVector(models, update_set), manifest
