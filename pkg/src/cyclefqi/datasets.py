"""Offline transition datasets and their line-delimited JSON file format.

Each record carries exactly the fields `stage`, `state`, `action`, `reward`,
`next_state`, `terminal`.  `next_state` is the raw sampled state s' before any
stage-transition map is applied; consumers apply phi_k themselves when
`terminal` is true, so for pure-cycle environments the stored s' may already
live in the successor stage's coordinates.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .mdp import CyclicMdpSpec

__all__ = ["Transition", "StageDataset", "save_datasets", "load_datasets"]


@dataclass(frozen=True)
class Transition:
    """One offline tuple (s, a, r, s', terminal) collected at a stage."""

    stage: int
    state: np.ndarray
    action: int
    reward: float
    next_state: np.ndarray
    terminal: bool

    def __post_init__(self) -> None:
        object.__setattr__(self, "state", np.asarray(self.state, dtype=float))
        object.__setattr__(self, "next_state", np.asarray(self.next_state, dtype=float))
        if self.stage < 1:
            raise ValueError(f"stage index must be >= 1, got {self.stage}")
        if self.action < 0:
            raise ValueError(f"action must be a nonnegative integer, got {self.action}")


@dataclass(frozen=True)
class StageDataset:
    """All transitions collected at one stage."""

    stage: int
    transitions: tuple[Transition, ...]

    def __post_init__(self) -> None:
        bad = [t.stage for t in self.transitions if t.stage != self.stage]
        if bad:
            raise ValueError(f"dataset for stage {self.stage} contains stages {sorted(set(bad))}")

    def __len__(self) -> int:
        return len(self.transitions)

    def states(self) -> np.ndarray:
        return np.stack([t.state for t in self.transitions])

    def actions(self) -> np.ndarray:
        return np.array([t.action for t in self.transitions], dtype=int)

    def rewards(self) -> np.ndarray:
        return np.array([t.reward for t in self.transitions], dtype=float)

    def next_states(self) -> np.ndarray:
        return np.stack([t.next_state for t in self.transitions])

    def terminals(self) -> np.ndarray:
        return np.array([t.terminal for t in self.transitions], dtype=bool)


def validate_against_spec(datasets: Sequence[StageDataset], spec: CyclicMdpSpec) -> None:
    """Check stage indices, action ranges and state dimensions.

    The next_state dimension is only checked for non-terminal rows: terminal
    rows hold the pre-transition sample, whose dimension is the input
    dimension of phi_k and may differ for pure-cycle environments.
    """
    for ds in datasets:
        if not 1 <= ds.stage <= spec.num_stages:
            raise ValueError(f"dataset stage {ds.stage} outside 1..{spec.num_stages}")
        st = spec.stage(ds.stage)
        for t in ds.transitions:
            if not 0 <= t.action < st.action_count:
                raise ValueError(f"action {t.action} outside 0..{st.action_count - 1} at stage {ds.stage}")
            if t.state.shape != (st.state_dim,):
                raise ValueError(
                    f"state shape {t.state.shape} does not match stage {ds.stage} dim {st.state_dim}"
                )
            if not t.terminal and t.next_state.shape != (st.state_dim,):
                raise ValueError(
                    f"non-terminal next_state shape {t.next_state.shape} does not match "
                    f"stage {ds.stage} dim {st.state_dim}"
                )


def save_datasets(datasets: Iterable[StageDataset], path: str | Path) -> None:
    """Write transitions as line-delimited JSON, one record per transition."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for ds in datasets:
            for t in ds.transitions:
                record = {
                    "stage": t.stage,
                    "state": [float(v) for v in t.state],
                    "action": int(t.action),
                    "reward": float(t.reward),
                    "next_state": [float(v) for v in t.next_state],
                    "terminal": bool(t.terminal),
                }
                fh.write(json.dumps(record) + "\n")


def load_datasets(path: str | Path, num_stages: int | None = None) -> list[StageDataset]:
    """Read a JSONL transition file back into per-stage datasets.

    Returns one StageDataset per stage present (or per stage in 1..num_stages
    when given, with empty stages rejected at training time, not here).
    """
    path = Path(path)
    by_stage: dict[int, list[Transition]] = {}
    with path.open("r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                tr = Transition(
                    stage=int(rec["stage"]),
                    state=np.array(rec["state"], dtype=float),
                    action=int(rec["action"]),
                    reward=float(rec["reward"]),
                    next_state=np.array(rec["next_state"], dtype=float),
                    terminal=bool(rec["terminal"]),
                )
            except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
                raise ValueError(f"{path}:{line_no}: malformed transition record ({exc})") from exc
            by_stage.setdefault(tr.stage, []).append(tr)
    stages = range(1, num_stages + 1) if num_stages else sorted(by_stage)
    return [StageDataset(k, tuple(by_stage.get(k, ()))) for k in stages]
