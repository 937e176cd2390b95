"""Sieve-based value estimation and inference for cyclic MDPs.

The Q-function of each (stage, action) pair is approximated on a linear
basis; all coefficients stack into one global vector solved from the
estimating equations H beta = b assembled over the offline data.  Values of
the target policy project beta onto expected policy-weighted features, and a
sandwich covariance over the Bellman residuals yields joint chi-squared
confidence regions, ensembled over sample-split folds.

The quadratic basis carries both symmetric cross terms, so the global system
is structurally rank-deficient: duplicated basis functions produce exactly
duplicated rows/columns.  Solvers here collapse those known duplicate groups
to a reduced full-rank system and expand the solution with an even
coefficient split, which leaves fitted values, policy values and covariances
unchanged; genuinely ill-conditioned data still raises.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .datasets import StageDataset
from .fqi import FixedPolicies, TrainConfig, train_cyclefqi
from .mdp import CyclicMdpSpec, PolicyVector, UpdateSet
from .regressors import BasisSpec, build_basis, build_basis_batch
from .stats import chi2_quantile

logger = logging.getLogger(__name__)

__all__ = [
    "SieveLayout",
    "GlobalSystem",
    "InferenceResult",
    "InferenceConfig",
    "local_feature_psi",
    "policy_weighted_u",
    "assemble_global_system",
    "solve_beta",
    "expected_feature_matrix",
    "estimate_value",
    "estimate_covariance",
    "ensemble_evaluate",
    "aggregate_folds",
    "mahalanobis_d2",
    "confidence_region_contains",
    "partition_folds",
]


@dataclass(frozen=True)
class SieveLayout:
    """Global coefficient layout: block (k, a) holds stage k's basis for action a."""

    bases: tuple[BasisSpec, ...]
    action_counts: tuple[int, ...]

    def __post_init__(self) -> None:
        if len(self.bases) != len(self.action_counts):
            raise ValueError("one basis and one action count per stage are required")

    @classmethod
    def for_spec(cls, spec: CyclicMdpSpec, bases: Sequence[BasisSpec]) -> "SieveLayout":
        return cls(tuple(bases), tuple(s.action_count for s in spec.stages))

    @property
    def num_stages(self) -> int:
        return len(self.bases)

    def feature_length(self, k: int) -> int:
        return self.bases[k - 1].feature_dim

    def stage_width(self, k: int) -> int:
        return self.feature_length(k) * self.action_counts[k - 1]

    def stage_offset(self, k: int) -> int:
        return sum(self.stage_width(j) for j in range(1, k))

    @property
    def total_dim(self) -> int:
        return sum(self.stage_width(k) for k in range(1, self.num_stages + 1))

    def block_slice(self, k: int, action: int) -> slice:
        if not 0 <= action < self.action_counts[k - 1]:
            raise ValueError(f"action {action} outside stage {k}'s range")
        start = self.stage_offset(k) + action * self.feature_length(k)
        return slice(start, start + self.feature_length(k))

    def stage_slice(self, k: int) -> slice:
        start = self.stage_offset(k)
        return slice(start, start + self.stage_width(k))

    def duplication_matrix(self) -> np.ndarray:
        """(L_tot, L_reduced) 0/1 matrix expanding reduced coordinates.

        Column g has ones at the global positions of duplicate-group g; the
        identity when no basis carries duplicated features.
        """
        cols = []
        offset = 0
        total = self.total_dim
        for k in range(1, self.num_stages + 1):
            groups = self.bases[k - 1].duplicate_groups()
            for _a in range(self.action_counts[k - 1]):
                for group in groups:
                    col = np.zeros(total)
                    for j in group:
                        col[offset + j] = 1.0
                    cols.append(col)
                offset += self.feature_length(k)
        return np.stack(cols, axis=1)


@dataclass(frozen=True)
class GlobalSystem:
    """Assembled estimating equations H beta = b over n pooled transitions.

    The private arrays cache the per-sample feature rows (psi and the
    right-hand combination psi - (1-T) U - gamma T U') plus rewards, so the
    covariance step can reuse them without re-assembly.
    """

    h_hat: np.ndarray
    b: np.ndarray
    n: int
    layout: SieveLayout
    _psi: np.ndarray = field(repr=False, default=None)
    _rhs: np.ndarray = field(repr=False, default=None)
    _rewards: np.ndarray = field(repr=False, default=None)


def local_feature_psi(state: np.ndarray, action: int, basis: BasisSpec, action_count: int) -> np.ndarray:
    """Stage-local feature vector: Phi(state) in block `action`, zeros elsewhere."""
    if not 0 <= action < action_count:
        raise ValueError(f"action {action} outside 0..{action_count - 1}")
    phi = build_basis(state, basis)
    out = np.zeros(basis.feature_dim * action_count)
    out[action * basis.feature_dim : (action + 1) * basis.feature_dim] = phi
    return out


def policy_weighted_u(state: np.ndarray, basis: BasisSpec, probs: np.ndarray) -> np.ndarray:
    """Policy-weighted features: block a holds Phi(state) * pi(a | state)."""
    probs = np.asarray(probs, dtype=float)
    if np.any(probs < -1e-12) or abs(probs.sum() - 1.0) > 1e-12:
        raise ValueError(f"policy probabilities are not normalized (sum={probs.sum()!r})")
    phi = build_basis(state, basis)
    return (probs[:, None] * phi[None, :]).reshape(-1)


def _weighted_block_batch(
    states: np.ndarray, basis: BasisSpec, probs: np.ndarray
) -> np.ndarray:
    """(n, L_k * A_k) rows of policy-weighted features for a batch."""
    phi = build_basis_batch(states, basis)
    return (probs[:, :, None] * phi[:, None, :]).reshape(states.shape[0], -1)


def assemble_global_system(
    datasets: Sequence[StageDataset],
    policy: PolicyVector,
    layout: SieveLayout,
    spec: CyclicMdpSpec,
) -> GlobalSystem:
    """Build H and b from offline transitions under the evaluation policy.

    Within-stage continuation rows (non-terminal) weight stage k's own basis
    at s'; terminal rows weight stage [k+1]'s basis at phi_k(s') scaled by
    gamma_k.  Everything else in a row is structurally zero, which confines
    H's nonzero blocks to the diagonal and cyclic-successor positions.
    """
    total = layout.total_dim
    psi_rows, rhs_rows, reward_rows = [], [], []
    n = 0
    for ds in datasets:
        if len(ds) == 0:
            continue
        k = ds.stage
        basis = layout.bases[k - 1]
        l_k = basis.feature_dim
        a_k = layout.action_counts[k - 1]
        states = ds.states()
        actions = ds.actions()
        terminals = ds.terminals()
        m = len(ds)
        n += m

        phi = build_basis_batch(states, basis)
        psi = np.zeros((m, total))
        col0 = layout.stage_offset(k)
        for i in range(m):
            start = col0 + actions[i] * l_k
            psi[i, start : start + l_k] = phi[i]

        rhs = psi.copy()
        nonterm = np.flatnonzero(~terminals)
        term = np.flatnonzero(terminals)
        if nonterm.size:
            s_next = np.stack([ds.transitions[i].next_state for i in nonterm])
            probs = policy.action_probs_batch(k, s_next)
            rhs[np.ix_(nonterm, range(col0, col0 + l_k * a_k))] -= _weighted_block_batch(
                s_next, basis, probs
            )
        if term.size:
            gamma = spec.stage(k).discount
            nxt = spec.successor(k)
            mapped = np.stack(
                [np.asarray(spec.stage_transition(k, ds.transitions[i].next_state), dtype=float) for i in term]
            )
            basis_next = layout.bases[nxt - 1]
            probs = policy.action_probs_batch(nxt, mapped)
            block = _weighted_block_batch(mapped, basis_next, probs)
            col_next = layout.stage_offset(nxt)
            rhs[np.ix_(term, range(col_next, col_next + block.shape[1]))] -= gamma * block
        psi_rows.append(psi)
        rhs_rows.append(rhs)
        reward_rows.append(ds.rewards())
    if n == 0:
        raise ValueError("cannot assemble a system from an empty dataset")
    psi_all = np.concatenate(psi_rows)
    rhs_all = np.concatenate(rhs_rows)
    rewards = np.concatenate(reward_rows)
    h_hat = psi_all.T @ rhs_all / n
    b = psi_all.T @ rewards / n
    return GlobalSystem(h_hat, b, n, layout, psi_all, rhs_all, rewards)


@dataclass(frozen=True)
class _Reduction:
    dup: np.ndarray        # (L_tot, L_red)
    reduce: np.ndarray     # (L_red, L_tot): averages duplicate coordinates
    z: np.ndarray          # reduced system matrix
    z_cond: float
    z_min_sv: float


def _reduce_system(system: GlobalSystem, condition_limit: float) -> _Reduction:
    g = system.layout.duplication_matrix()
    weights = g.sum(axis=0)
    reduce = (g / weights).T
    z = reduce @ system.h_hat @ reduce.T
    svals = np.linalg.svd(z, compute_uv=False)
    cond = float(svals[0] / svals[-1]) if svals[-1] > 0 else np.inf
    if not np.isfinite(cond) or cond > condition_limit:
        raise ValueError(
            f"sieve system is ill-conditioned (condition {cond:.3e} > {condition_limit:.1e}, "
            f"smallest singular value {svals[-1]:.3e}); collect more data or shrink the basis"
        )
    return _Reduction(g, reduce, z, cond, float(svals[-1]))


def solve_beta(system: GlobalSystem, condition_limit: float = 1e12) -> np.ndarray:
    """Solve H beta = b for the global coefficient vector.

    Duplicate basis coordinates are collapsed before the solve and the
    solution mass is split evenly across each duplicate group on the way
    back, so the full-system residual stays at machine precision.
    """
    red = _reduce_system(system, condition_limit)
    beta_r = np.linalg.solve(red.z, red.reduce @ system.b)
    beta = red.reduce.T @ beta_r
    residual = float(np.max(np.abs(system.h_hat @ beta - system.b)))
    bound = 1e-8 * (1.0 + float(np.max(np.abs(system.b))))
    if residual > bound:
        raise RuntimeError(f"solve residual {residual:.3e} exceeds bound {bound:.3e}")
    return beta


def expected_feature_matrix(
    layout: SieveLayout,
    policy: PolicyVector,
    spec: CyclicMdpSpec,
    num_samples: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """(L_tot, K) block-diagonal matrix of E_{s ~ eta_k}[policy-weighted features].

    Column k holds the Monte Carlo mean of U_k(s) in stage k's row block;
    an analytically computed matrix can be supplied instead wherever this
    output is taken as an argument.
    """
    out = np.zeros((layout.total_dim, layout.num_stages))
    chunk = 100_000
    for k in range(1, layout.num_stages + 1):
        width = layout.stage_width(k)
        acc = np.zeros(width)
        done = 0
        while done < num_samples:
            m = min(chunk, num_samples - done)
            if spec.batch_initial is not None:
                draws = np.asarray(spec.batch_initial(k, m, rng), dtype=float)
            else:
                draws = np.stack([spec.initial_state(k, rng) for _ in range(m)])
            probs = policy.action_probs_batch(k, draws)
            acc += _weighted_block_batch(draws, layout.bases[k - 1], probs).sum(axis=0)
            done += m
        out[layout.stage_slice(k), k - 1] = acc / num_samples
    return out


def estimate_value(beta_hat: np.ndarray, expected_u: np.ndarray) -> np.ndarray:
    """Project coefficients onto expected policy-weighted features: v = E[U]^T beta."""
    return expected_u.T @ beta_hat


def estimate_covariance(
    system: GlobalSystem,
    beta_hat: np.ndarray,
    expected_u: np.ndarray,
    condition_limit: float = 1e12,
    residual_correction: str = "leverage",
) -> np.ndarray:
    """Sandwich covariance E[U]^T H^-1 Omega H^-T E[U], symmetrized.

    Omega is the empirical second moment of the per-sample Bellman residuals
    times their psi outer products.  The inverse is applied through the same
    duplicate-collapsed system as solve_beta.

    residual_correction compensates the finite-sample downward bias of the
    plug-in residuals (beta is fit on the same rows, so the estimating
    equations force them toward zero): "leverage" divides each residual by
    (1 - h_i) with h_i the feature-space hat value, "df" rescales by
    n / (n - p), "none" uses the raw plug-in.  Without a correction the
    estimator's true dispersion exceeds the estimate by roughly (n/(n-p))^2
    and joint regions under-cover at small n.
    """
    if system._psi is None:
        raise ValueError("system was assembled without cached rows; re-assemble before covariance")
    if residual_correction not in ("none", "df", "leverage"):
        raise ValueError(f"unknown residual_correction {residual_correction!r}")
    red = _reduce_system(system, condition_limit)
    residuals = system._rewards - system._rhs @ beta_hat
    psi_r = system._psi @ red.reduce.T
    p_eff = psi_r.shape[1]
    if residual_correction == "df":
        if system.n <= p_eff:
            raise ValueError(f"df correction undefined: n={system.n} <= p={p_eff}")
        residuals = residuals * np.sqrt(system.n / (system.n - p_eff))
    elif residual_correction == "leverage":
        gram = psi_r.T @ psi_r
        hat = np.einsum("ij,ji->i", psi_r, np.linalg.solve(gram, psi_r.T))
        residuals = residuals / np.maximum(1.0 - hat, 1e-6)
    omega_r = psi_r.T @ (psi_r * residuals[:, None] ** 2) / system.n
    eu_r = red.reduce @ expected_u
    bread = np.linalg.solve(red.z.T, eu_r)  # H^-T E[U], the sandwich bread
    sigma = bread.T @ omega_r @ bread
    return 0.5 * (sigma + sigma.T)


# ---------------------------------------------------------------------------
# ensemble evaluation and confidence regions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class InferenceResult:
    """Ensembled value estimate with covariance and sample bookkeeping."""

    v_hat: np.ndarray
    sigma_hat: np.ndarray
    n: int
    num_folds: int

    def __post_init__(self) -> None:
        sig = np.asarray(self.sigma_hat, dtype=float)
        scale = max(float(np.max(np.abs(sig))), 1e-300)
        if np.max(np.abs(sig - sig.T)) > 1e-8 * scale:
            raise ValueError("covariance estimate is not symmetric")
        eigs = np.linalg.eigvalsh(0.5 * (sig + sig.T))
        if eigs.min() < -1e-8 * max(float(np.trace(sig)), 1e-300):
            raise ValueError(f"covariance estimate is not numerically PSD (min eig {eigs.min():.3e})")

    @property
    def effective_n(self) -> float:
        return self.n * (self.num_folds - 1) / self.num_folds

    def to_record(self, level: float | None = None, v_star: np.ndarray | None = None) -> dict:
        k = len(self.v_hat)
        record = {
            "v_hat": [float(v) for v in self.v_hat],
            "sigma_hat": [float(v) for v in np.asarray(self.sigma_hat).reshape(-1)],
            "n": self.n,
            "folds": self.num_folds,
        }
        if level is not None:
            record["level"] = level
            record["threshold"] = chi2_quantile(k, level)
        if v_star is not None:
            record["d2"] = mahalanobis_d2(self, np.asarray(v_star, dtype=float))
        return record

    def save(self, path: str | Path, level: float | None = None, v_star=None) -> None:
        Path(path).write_text(json.dumps(self.to_record(level, v_star)), encoding="utf-8")


@dataclass(frozen=True)
class InferenceConfig:
    """Settings for ensemble evaluation."""

    num_eta_samples: int = 10_000
    condition_limit: float = 1e12
    eigenvalue_floor: float = 1e-12
    residual_correction: str = "leverage"
    policy_override: PolicyVector | None = None  # evaluate a fixed policy, skip training


def partition_folds(
    datasets: Sequence[StageDataset], num_folds: int, rng: np.random.Generator
) -> list[list[StageDataset]]:
    """Per-stage round-robin split after a seeded shuffle.

    Every fold receives floor(n_k / N) or ceil(n_k / N) transitions of each
    stage, which keeps each fold's stage balance (and with it the global
    system's invertibility).
    """
    if num_folds < 2:
        raise ValueError(f"at least 2 folds are required, got {num_folds}")
    folds: list[list[StageDataset]] = [[] for _ in range(num_folds)]
    for ds in datasets:
        if len(ds) < num_folds:
            raise ValueError(f"stage {ds.stage} has {len(ds)} samples, fewer than {num_folds} folds")
        order = rng.permutation(len(ds))
        for f in range(num_folds):
            rows = order[f::num_folds]
            folds[f].append(StageDataset(ds.stage, tuple(ds.transitions[i] for i in rows)))
    return folds


def _merge_folds(parts: list[list[StageDataset]]) -> list[StageDataset]:
    by_stage: dict[int, list] = {}
    for fold in parts:
        for ds in fold:
            by_stage.setdefault(ds.stage, []).extend(ds.transitions)
    return [StageDataset(k, tuple(ts)) for k, ts in sorted(by_stage.items())]


def ensemble_evaluate(
    datasets: Sequence[StageDataset],
    spec: CyclicMdpSpec,
    layout: SieveLayout,
    num_folds: int,
    train_config: TrainConfig,
    inference_config: InferenceConfig,
    rng: np.random.Generator,
    update_set: UpdateSet | None = None,
    fixed_policies: FixedPolicies | None = None,
) -> InferenceResult:
    """Fold-ensembled value inference.

    The data splits into `num_folds` folds per stage; for each n < N a policy
    is learned on the cumulative union of folds 1..n (unless a fixed policy
    override is supplied) and evaluated on fold n+1, yielding (v_n, Sigma_n).
    Estimates aggregate by precision weighting: the averaged inverse matrix
    square root defines Sigma, and v = Sigma^{1/2} mean(Sigma_n^{-1/2} v_n).
    """
    update_set = update_set if update_set is not None else UpdateSet.all_stages(spec.num_stages)
    folds = partition_folds(datasets, num_folds, rng)
    n_total = sum(len(ds) for ds in datasets)
    k_count = spec.num_stages

    v_list: list[np.ndarray] = []
    root_list: list[np.ndarray] = []
    for fold_idx in range(num_folds - 1):
        eval_fold = folds[fold_idx + 1]
        n_fold = sum(len(ds) for ds in eval_fold)
        if n_fold < layout.total_dim:
            raise ValueError(
                f"fold {fold_idx + 2} holds {n_fold} samples, fewer than the "
                f"{layout.total_dim} sieve coefficients"
            )
        if inference_config.policy_override is not None:
            policy = inference_config.policy_override
        else:
            train_data = _merge_folds(folds[: fold_idx + 1])
            _, policy = train_cyclefqi(train_data, spec, update_set, fixed_policies, train_config)
        system = assemble_global_system(eval_fold, policy, layout, spec)
        beta = solve_beta(system, inference_config.condition_limit)
        expected_u = expected_feature_matrix(
            layout, policy, spec, inference_config.num_eta_samples, rng
        )
        v_n = estimate_value(beta, expected_u)
        sigma_n = estimate_covariance(
            system,
            beta,
            expected_u,
            inference_config.condition_limit,
            inference_config.residual_correction,
        )
        eigs, vecs = np.linalg.eigh(0.5 * (sigma_n + sigma_n.T))
        floor = inference_config.eigenvalue_floor * max(float(np.trace(sigma_n)), 0.0)
        if eigs.min() <= floor:
            raise ValueError(
                f"fold {fold_idx + 2} produced a non-invertible covariance (min eig {eigs.min():.3e})"
            )
        root_list.append((vecs / np.sqrt(eigs)) @ vecs.T)
        v_list.append(v_n)

    v_hat, sigma_hat = aggregate_folds(v_list, root_list)
    return InferenceResult(v_hat, sigma_hat, n_total, num_folds)


def aggregate_folds(v_list: Sequence[np.ndarray], inv_root_list: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Precision-weighted aggregation of per-fold estimates.

    The averaged inverse matrix square root defines the ensembled covariance
    Sigma = (mean inv_root)^-2, and the estimate is Sigma^{1/2} applied to
    the mean of the whitened per-fold values.  With one fold, or identical
    folds, this returns the common pair.
    """
    inv_root = sum(inv_root_list) / len(inv_root_list)
    sigma_hat = np.linalg.inv(inv_root @ inv_root)
    sigma_hat = 0.5 * (sigma_hat + sigma_hat.T)
    weighted = sum(r @ v for r, v in zip(inv_root_list, v_list)) / len(v_list)
    v_hat = np.linalg.inv(inv_root) @ weighted  # Sigma^{1/2} is the inverse of the aggregated root
    return v_hat, sigma_hat


def mahalanobis_d2(result: InferenceResult, v_star: np.ndarray) -> float:
    """Squared Mahalanobis distance at the effective sample size n(N-1)/N."""
    diff = np.asarray(v_star, dtype=float) - result.v_hat
    try:
        solved = np.linalg.solve(result.sigma_hat, diff)
    except np.linalg.LinAlgError as exc:
        raise ValueError(f"covariance is singular, D^2 undefined: {exc}") from exc
    return float(result.effective_n * diff @ solved)


def confidence_region_contains(result: InferenceResult, candidate: np.ndarray, level: float) -> bool:
    """Membership in the closed joint chi-squared region at confidence `level`."""
    threshold = chi2_quantile(len(result.v_hat), level)
    return mahalanobis_d2(result, candidate) <= threshold
