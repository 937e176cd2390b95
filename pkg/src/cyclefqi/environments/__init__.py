"""Concrete cyclic environments and the name registry used by the CLI."""
from __future__ import annotations

from ..mdp import CyclicMdpSpec
from .debug import make_zero_env
from .glucose import GlucoseConfig, make_glucose_env
from .linear import make_linear_env
from .sampling import sample_offline_dataset

__all__ = [
    "build_environment",
    "environment_names",
    "make_linear_env",
    "make_glucose_env",
    "make_zero_env",
    "GlucoseConfig",
    "sample_offline_dataset",
]

_BUILDERS = {
    "linear": lambda seed, **kw: make_linear_env(seed, **kw),
    "glucose": lambda seed, **kw: make_glucose_env(GlucoseConfig(**kw) if kw else None),
    "zero": lambda seed, **kw: make_zero_env(seed),
}


def environment_names() -> list[str]:
    return sorted(_BUILDERS)


def build_environment(name: str, seed: int = 0, **overrides) -> CyclicMdpSpec:
    """Construct a registered environment by name."""
    if name not in _BUILDERS:
        raise KeyError(f"unknown environment {name!r}; registered: {environment_names()}")
    return _BUILDERS[name](seed, **overrides)
