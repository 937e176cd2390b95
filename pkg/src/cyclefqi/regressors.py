"""Pluggable regression backends for the fitted Q-iteration loop.

Three families: a linear sieve over a fixed feature basis (solved by SVD on
the regularized least-squares problem), a random forest of regression trees,
and an exact tabular mean for finite state spaces.  Forest split search is
delegated to sklearn's tree implementation for speed; bootstrap resampling,
the seeding contract, prediction and serialization are owned here, so fitted
models are plain arrays with no library dependency at load time.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from sklearn.tree import DecisionTreeRegressor

logger = logging.getLogger(__name__)

__all__ = [
    "BasisSpec",
    "LinearSieveSpec",
    "RandomForestSpec",
    "TabularSpec",
    "RegressorSpec",
    "FittedModel",
    "build_basis",
    "build_basis_batch",
    "fit",
    "predict",
    "save_model",
    "load_model",
]

FORMAT_VERSION = 1


# ---------------------------------------------------------------------------
# feature bases
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BasisSpec:
    """Feature basis over a d-dimensional state.

    kinds:
      quadratic:          [1, s, vec(s s^T) row-major] -> 1 + d + d^2 features.
                          The vec block keeps both symmetric cross terms.
      polynomial:         [1] + [s_i^j for each coordinate, j = 1..degree],
                          no cross terms -> 1 + d * degree features.
      tabular-indicator:  one-hot over integer-coded scalar states [i],
                          requires num_states; input_dim must be 1.
    """

    kind: str
    input_dim: int
    degree: int = 2
    num_states: int | None = None

    def __post_init__(self) -> None:
        if self.input_dim < 1:
            raise ValueError(f"input_dim must be >= 1, got {self.input_dim}")
        if self.kind == "polynomial" and self.degree < 1:
            raise ValueError(f"polynomial degree must be >= 1, got {self.degree}")
        if self.kind == "tabular-indicator":
            if self.num_states is None or self.num_states < 1:
                raise ValueError("tabular-indicator basis requires num_states >= 1")
            if self.input_dim != 1:
                raise ValueError("tabular-indicator basis expects integer-coded scalar states")
        elif self.kind not in ("quadratic", "polynomial"):
            raise ValueError(f"unknown basis kind {self.kind!r}")

    @property
    def feature_dim(self) -> int:
        d = self.input_dim
        if self.kind == "quadratic":
            return 1 + d + d * d
        if self.kind == "polynomial":
            return 1 + d * self.degree
        return int(self.num_states)

    def duplicate_groups(self) -> list[list[int]]:
        """Indices of features that are identical functions of the state.

        The quadratic vec block contains s_i s_j twice for i != j; grouping
        them lets downstream linear systems collapse exact collinearity.
        Every feature appears in exactly one group; singletons included.
        """
        if self.kind != "quadratic":
            return [[j] for j in range(self.feature_dim)]
        d = self.input_dim
        groups = [[j] for j in range(1 + d)]
        for i in range(d):
            for j in range(i, d):
                g = [1 + d + i * d + j]
                if j != i:
                    g.append(1 + d + j * d + i)
                groups.append(g)
        return groups


def build_basis(state: np.ndarray, spec: BasisSpec) -> np.ndarray:
    """Feature vector of a single state."""
    return build_basis_batch(np.asarray(state, dtype=float)[None, :], spec)[0]


def build_basis_batch(states: np.ndarray, spec: BasisSpec) -> np.ndarray:
    """(n, feature_dim) feature matrix for a batch of states."""
    s = np.asarray(states, dtype=float)
    if s.ndim != 2 or s.shape[1] != spec.input_dim:
        raise ValueError(f"states have shape {s.shape}, expected (n, {spec.input_dim})")
    n = s.shape[0]
    if spec.kind == "quadratic":
        outer = (s[:, :, None] * s[:, None, :]).reshape(n, -1)
        return np.concatenate([np.ones((n, 1)), s, outer], axis=1)
    if spec.kind == "polynomial":
        powers = [s**j for j in range(1, spec.degree + 1)]
        return np.concatenate([np.ones((n, 1))] + powers, axis=1)
    idx = s[:, 0].astype(int)
    if np.any((idx < 0) | (idx >= spec.num_states)) or np.any(idx != s[:, 0]):
        raise ValueError("tabular-indicator basis needs integer states in range")
    out = np.zeros((n, spec.num_states))
    out[np.arange(n), idx] = 1.0
    return out


# ---------------------------------------------------------------------------
# regressor specifications
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LinearSieveSpec:
    """Least squares over a feature basis; ridge=None means auto jitter 1e-8*n."""

    basis: BasisSpec
    ridge: float | None = None

    def __post_init__(self) -> None:
        if self.ridge is not None and self.ridge < 0:
            raise ValueError(f"ridge must be nonnegative, got {self.ridge}")


@dataclass(frozen=True)
class RandomForestSpec:
    """Bootstrap ensemble of variance-reduction regression trees."""

    num_trees: int = 100
    max_depth: int | None = None
    min_leaf: int = 5
    feature_subsample: float = 1.0 / 3.0

    def __post_init__(self) -> None:
        if self.num_trees < 1:
            raise ValueError(f"num_trees must be >= 1, got {self.num_trees}")
        if self.min_leaf < 1:
            raise ValueError(f"min_leaf must be >= 1, got {self.min_leaf}")
        if not 0.0 < self.feature_subsample <= 1.0:
            raise ValueError(f"feature_subsample must be in (0, 1], got {self.feature_subsample}")


@dataclass(frozen=True)
class TabularSpec:
    """Exact per-cell means over an enumerable state space."""

    default_value: float = 0.0


RegressorSpec = LinearSieveSpec | RandomForestSpec | TabularSpec


# ---------------------------------------------------------------------------
# fitted models
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LinearSieveModel:
    basis: BasisSpec
    coef: np.ndarray
    input_dim: int
    n_samples: int

    def predict_batch(self, states: np.ndarray) -> np.ndarray:
        return build_basis_batch(states, self.basis) @ self.coef

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "kind": "linear-sieve",
            "input_dim": self.input_dim,
            "n_samples": self.n_samples,
            "basis": {
                "kind": self.basis.kind,
                "input_dim": self.basis.input_dim,
                "degree": self.basis.degree,
                "num_states": self.basis.num_states,
            },
            "coef": [float(c) for c in self.coef],
        }


@dataclass(frozen=True)
class ForestModel:
    """Flattened tree arrays: children < 0 marks a leaf holding `values`.

    The per-tree arrays are padded into (num_trees, max_nodes) blocks so one
    descent loop walks every tree of the ensemble simultaneously.
    """

    children_left: tuple[np.ndarray, ...]
    children_right: tuple[np.ndarray, ...]
    features: tuple[np.ndarray, ...]
    thresholds: tuple[np.ndarray, ...]
    values: tuple[np.ndarray, ...]
    input_dim: int
    n_samples: int

    def _stacked(self) -> tuple[np.ndarray, ...]:
        cached = getattr(self, "_stack_cache", None)
        if cached is None:
            t = len(self.children_left)
            width = max(arr.shape[0] for arr in self.children_left)
            left = np.full((t, width), -1, dtype=np.int64)
            right = np.full((t, width), -1, dtype=np.int64)
            feat = np.zeros((t, width), dtype=np.int64)
            thr = np.zeros((t, width))
            val = np.zeros((t, width))
            for i in range(t):
                m = self.children_left[i].shape[0]
                left[i, :m] = self.children_left[i]
                right[i, :m] = self.children_right[i]
                feat[i, :m] = np.maximum(self.features[i], 0)
                thr[i, :m] = self.thresholds[i]
                val[i, :m] = self.values[i]
            cached = (left, right, feat, thr, val)
            object.__setattr__(self, "_stack_cache", cached)
        return cached

    def predict_batch(self, states: np.ndarray) -> np.ndarray:
        x = np.asarray(states, dtype=float)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ValueError(f"inputs have shape {x.shape}, expected (n, {self.input_dim})")
        left, right, feat, thr, val = self._stacked()
        t = left.shape[0]
        n = x.shape[0]
        node = np.zeros((t, n), dtype=np.int64)
        tree_idx = np.arange(t)[:, None]
        while True:
            l_child = left[tree_idx, node]
            interior = l_child >= 0
            if not interior.any():
                break
            f = feat[tree_idx, node]
            go_left = x[np.arange(n)[None, :], f] <= thr[tree_idx, node]
            nxt = np.where(go_left, l_child, right[tree_idx, node])
            node = np.where(interior, nxt, node)
        return val[tree_idx, node].mean(axis=0)

    def to_dict(self) -> dict:
        trees = [
            {
                "children_left": l.tolist(),
                "children_right": r.tolist(),
                "features": f.tolist(),
                "thresholds": t.tolist(),
                "values": v.tolist(),
            }
            for l, r, f, t, v in zip(
                self.children_left, self.children_right, self.features, self.thresholds, self.values
            )
        ]
        return {
            "format_version": FORMAT_VERSION,
            "kind": "random-forest",
            "input_dim": self.input_dim,
            "n_samples": self.n_samples,
            "trees": trees,
        }


@dataclass(frozen=True)
class TabularModel:
    table: dict
    default_value: float
    input_dim: int
    n_samples: int

    def predict_batch(self, states: np.ndarray) -> np.ndarray:
        x = np.asarray(states, dtype=float)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ValueError(f"inputs have shape {x.shape}, expected (n, {self.input_dim})")
        return np.array([self.table.get(tuple(row), self.default_value) for row in x])

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "kind": "tabular",
            "input_dim": self.input_dim,
            "n_samples": self.n_samples,
            "default_value": self.default_value,
            "cells": [[list(k), float(v)] for k, v in sorted(self.table.items())],
        }


@dataclass(frozen=True)
class ConstantModel:
    """Fallback for empty training subsamples: a constant prediction."""

    value: float
    input_dim: int
    n_samples: int = 0

    def predict_batch(self, states: np.ndarray) -> np.ndarray:
        return np.full(np.asarray(states).shape[0], self.value)

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "kind": "constant",
            "input_dim": self.input_dim,
            "n_samples": self.n_samples,
            "value": self.value,
        }


FittedModel = LinearSieveModel | ForestModel | TabularModel | ConstantModel


# ---------------------------------------------------------------------------
# fitting
# ---------------------------------------------------------------------------


def _fit_linear(spec: LinearSieveSpec, x: np.ndarray, y: np.ndarray) -> LinearSieveModel:
    design = build_basis_batch(x, spec.basis)
    ridge = spec.ridge if spec.ridge is not None else 1e-8 * x.shape[0]
    u, s, vt = np.linalg.svd(design, full_matrices=False)
    if ridge == 0.0:
        rank_deficient = design.shape[0] < design.shape[1] or s[-1] <= s[0] * 1e-12
        if rank_deficient:
            raise ValueError(
                "normal equations are singular with ridge=0; pass a positive ridge "
                f"(design {design.shape}, smallest singular value {s[-1]:.3e})"
            )
        coef = vt.T @ ((u.T @ y) / s)
    else:
        coef = vt.T @ ((u.T @ y) * s / (s**2 + ridge))
    return LinearSieveModel(spec.basis, coef, x.shape[1], x.shape[0])


def _fit_forest(
    spec: RandomForestSpec,
    x: np.ndarray,
    y: np.ndarray,
    rng: np.random.Generator,
    bootstrap_indices: Sequence[np.ndarray] | None = None,
    split_seeds: Sequence[int] | None = None,
) -> ForestModel:
    """Fit the ensemble.

    Randomness contract: all bootstrap index arrays are drawn first, tree by
    tree, each array in sample-index order; the per-tree split seeds follow.
    The explicit overrides exist for tests that pin the bootstrap mapping.
    """
    n, d = x.shape
    if bootstrap_indices is None:
        bootstrap_indices = [rng.integers(0, n, size=n) for _ in range(spec.num_trees)]
    if split_seeds is None:
        split_seeds = [int(v) for v in rng.integers(0, 2**31 - 1, size=spec.num_trees)]
    x = np.ascontiguousarray(x)
    # With a full feature scan, constant columns can never be chosen for a
    # split, so dropping them yields identical trees; this matters for
    # zero-padded joint-space inputs.  With subsampling it would change the
    # per-split candidate pool, so the reduction only applies at 1.0.
    col_map = None
    x_fit = x
    if spec.feature_subsample == 1.0:
        varying = np.flatnonzero(np.ptp(x, axis=0) > 0.0)
        if varying.size == 0:
            varying = np.array([0])
        if varying.size < d:
            col_map = varying
            x_fit = np.ascontiguousarray(x[:, varying])
    lefts, rights, feats, thrs, vals = [], [], [], [], []
    for idx, seed in zip(bootstrap_indices, split_seeds):
        tree = DecisionTreeRegressor(
            criterion="squared_error",
            max_depth=spec.max_depth,
            min_samples_leaf=spec.min_leaf,
            max_features=spec.feature_subsample,
            random_state=seed,
        )
        # inputs are validated once in fit(); skip sklearn's per-tree checks
        tree.fit(np.ascontiguousarray(x_fit[idx]), y[idx], check_input=False)
        t = tree.tree_
        feat = t.feature.copy()
        if col_map is not None:
            interior = feat >= 0
            feat[interior] = col_map[feat[interior]]
        lefts.append(t.children_left.copy())
        rights.append(t.children_right.copy())
        feats.append(feat)
        thrs.append(t.threshold.copy())
        vals.append(t.value[:, 0, 0].copy())
    return ForestModel(
        tuple(lefts), tuple(rights), tuple(feats), tuple(thrs), tuple(vals), d, n
    )


def _fit_tabular(spec: TabularSpec, x: np.ndarray, y: np.ndarray) -> TabularModel:
    sums: dict[tuple, list[float]] = {}
    for row, target in zip(x, y):
        cell = sums.setdefault(tuple(row), [0.0, 0.0])
        cell[0] += float(target)
        cell[1] += 1.0
    table = {k: v[0] / v[1] for k, v in sums.items()}
    return TabularModel(table, spec.default_value, x.shape[1], x.shape[0])


def fit(
    spec: RegressorSpec,
    inputs: np.ndarray,
    targets: np.ndarray,
    rng: np.random.Generator | None = None,
    **forest_overrides,
) -> FittedModel:
    """Fit one supervised model; raises on empty or non-finite data."""
    x = np.asarray(inputs, dtype=float)
    y = np.asarray(targets, dtype=float)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError(f"inputs must be a nonempty (n, d) matrix, got shape {x.shape}")
    if y.shape != (x.shape[0],):
        raise ValueError(f"targets shape {y.shape} does not match {x.shape[0]} rows")
    if not (np.isfinite(x).all() and np.isfinite(y).all()):
        raise ValueError("inputs and targets must be finite")
    if isinstance(spec, LinearSieveSpec):
        return _fit_linear(spec, x, y)
    if isinstance(spec, RandomForestSpec):
        if rng is None:
            raise ValueError("random-forest fitting requires a randomness stream")
        return _fit_forest(spec, x, y, rng, **forest_overrides)
    if isinstance(spec, TabularSpec):
        return _fit_tabular(spec, x, y)
    raise TypeError(f"unknown regressor spec {type(spec).__name__}")


def predict(model: FittedModel, state: np.ndarray) -> float:
    """Deterministic evaluation of a fitted model at one input."""
    return float(model.predict_batch(np.asarray(state, dtype=float)[None, :])[0])


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def model_from_dict(payload: dict) -> FittedModel:
    version = payload.get("format_version")
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported model format_version {version!r}")
    kind = payload["kind"]
    if kind == "linear-sieve":
        b = payload["basis"]
        basis = BasisSpec(b["kind"], b["input_dim"], b.get("degree", 2), b.get("num_states"))
        return LinearSieveModel(
            basis, np.array(payload["coef"], dtype=float), payload["input_dim"], payload["n_samples"]
        )
    if kind == "random-forest":
        trees = payload["trees"]
        return ForestModel(
            tuple(np.array(t["children_left"], dtype=np.int64) for t in trees),
            tuple(np.array(t["children_right"], dtype=np.int64) for t in trees),
            tuple(np.array(t["features"], dtype=np.int64) for t in trees),
            tuple(np.array(t["thresholds"], dtype=float) for t in trees),
            tuple(np.array(t["values"], dtype=float) for t in trees),
            payload["input_dim"],
            payload["n_samples"],
        )
    if kind == "tabular":
        table = {tuple(k): float(v) for k, v in payload["cells"]}
        return TabularModel(table, payload["default_value"], payload["input_dim"], payload["n_samples"])
    if kind == "constant":
        return ConstantModel(payload["value"], payload["input_dim"], payload["n_samples"])
    raise ValueError(f"unknown model kind {kind!r}")


def save_model(model: FittedModel, path: str | Path) -> None:
    Path(path).write_text(json.dumps(model.to_dict()), encoding="utf-8")


def load_model(path: str | Path) -> FittedModel:
    return model_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
