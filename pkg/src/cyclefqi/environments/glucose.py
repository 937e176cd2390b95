"""Four-stage daily glucose simulator (morning / day / evening / night).

States are 14-vectors: hour of day, glucose, glucose rate of change, nine
cumulative meal-nutrient totals (carb/protein/fat for morning, day, evening),
sex and weight.  Cumulative nutrients reset at 6 AM.  Decisions are hourly in
the three daytime stages and a single 8-hour decision at 22:00 for night, so
one simulated day holds 5 + 6 + 5 + 1 = 17 decision points.  Glucose updates
follow stage-specific affine-plus-modifier equations with Gaussian noise and
a hard clip to [50, 450]; rewards penalize time below 70, between 180 and 250
(inclusive) and above 250 mg/dL, evaluated on ten midpoint samples of the
linear segment between consecutive glucose readings.

Action spaces are the flattened per-stage combination counts (4, 8, 8, 6).
Several knobs are configuration rather than published values; `describe`
flags each one.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..mdp import CyclicMdpSpec, StageSpec

__all__ = [
    "GlucoseConfig",
    "GlucoseAction",
    "make_glucose_env",
    "glucose_step",
    "glucose_reward",
    "decode_action",
    "initial_state_6am",
]

# state vector layout
T, G, DG = 0, 1, 2
CM, PM, FM = 3, 4, 5
CD, PD, FD = 6, 7, 8
CE, PE, FE = 9, 10, 11
SEX, WEIGHT = 12, 13
STATE_DIM = 14

MORNING, DAY, EVENING, NIGHT = 1, 2, 3, 4
STAGE_NAMES = {MORNING: "morning", DAY: "day", EVENING: "evening", NIGHT: "night"}
ACTION_COUNTS = (4, 8, 8, 6)
HORIZONS = (5, 6, 5, 1)
DISCOUNTS = (1.0, 1.0, 1.0, 0.9)
LAST_HOUR = {MORNING: 10, DAY: 16, EVENING: 21, NIGHT: 22}
FIRST_HOUR = {MORNING: 6, DAY: 11, EVENING: 17, NIGHT: 22}
NOISE_SD = {MORNING: 5.5, DAY: 4.5, EVENING: 6.0, NIGHT: 6.0}
STAGE_DURATION_HOURS = {MORNING: 1.0, DAY: 1.0, EVENING: 1.0, NIGHT: 8.0}

# grams of (carbohydrate, protein, fat) per meal type
MEALS = {0: (0.0, 0.0, 0.0), 1: (30.0, 10.0, 10.0), 2: (70.0, 25.0, 25.0)}
BEDTIMES = (22.0, 23.0, 24.0)

G_MIN, G_MAX = 50.0, 450.0


@dataclass(frozen=True)
class GlucoseConfig:
    """Simulator knobs that the source equations leave open.

    meal_flag_type / activity_flag_level define what the binary meal and
    activity action components mean; stress-reduction and hydration are not
    part of the stage action spaces, so they sit at fixed defaults.  The
    defaults (high-calorie meals, light activity, stress reduction and
    hydration on) make uniform-random behavior explore both the hypo- and
    hyperglycemic regimes, which offline training needs for state coverage.
    The minor-cumulative coefficient covers the named low-magnitude
    carryover terms whose sizes are unreported.  The initial-state
    distribution is likewise a configuration choice.
    """

    noise_scale: float = 1.0
    meal_flag_type: int = 2        # binary meal component -> high-calorie meal
    activity_flag_level: int = 1   # binary activity component -> light activity
    stress_reduction_default: int = 1
    hydration_default: int = 1
    minor_cumulative_coef: float = 0.01
    init_glucose_mean: float = 120.0
    init_glucose_sd: float = 30.0
    init_glucose_low: float = 70.0
    init_glucose_high: float = 300.0
    init_weight_low: float = 55.0
    init_weight_high: float = 95.0

    def describe(self) -> dict:
        return {
            "name": "glucose",
            "stages": [STAGE_NAMES[k] for k in (MORNING, DAY, EVENING, NIGHT)],
            "action_counts": list(ACTION_COUNTS),
            "horizons": list(HORIZONS),
            "discounts": list(DISCOUNTS),
            "decision_hours": {STAGE_NAMES[k]: [FIRST_HOUR[k], LAST_HOUR[k]] for k in STAGE_NAMES},
            "glucose_clip": [G_MIN, G_MAX],
            "meal_nutrients": {str(k): list(v) for k, v in MEALS.items()},
            "bedtimes": list(BEDTIMES),
            "noise_sd": {STAGE_NAMES[k]: NOISE_SD[k] for k in NOISE_SD},
            "non_source_defaults": {
                "noise_scale": self.noise_scale,
                "meal_flag_type": self.meal_flag_type,
                "activity_flag_level": self.activity_flag_level,
                "stress_reduction_default": self.stress_reduction_default,
                "hydration_default": self.hydration_default,
                "minor_cumulative_coef": self.minor_cumulative_coef,
                "initial_glucose": f"normal({self.init_glucose_mean}, {self.init_glucose_sd}^2) "
                f"clipped to [{self.init_glucose_low}, {self.init_glucose_high}]",
                "initial_weight": f"uniform[{self.init_weight_low}, {self.init_weight_high}]",
                "initial_sex": "bernoulli(0.5)",
            },
        }


@dataclass(frozen=True)
class GlucoseAction:
    """Decoded action components; stages ignore the components they do not use."""

    insulin: int = 0
    meal: int = 0
    activity: int = 0
    bedtime: float = 22.0
    stress_reduction: int = 0
    hydration: int = 0

    def __post_init__(self) -> None:
        if self.insulin not in (0, 1):
            raise ValueError(f"insulin component must be 0/1, got {self.insulin}")
        if self.meal not in MEALS:
            raise ValueError(f"meal type must be one of {sorted(MEALS)}, got {self.meal}")
        if self.activity not in (0, 1, 2):
            raise ValueError(f"activity level must be 0/1/2, got {self.activity}")
        if self.bedtime not in BEDTIMES:
            raise ValueError(f"bedtime must be one of {BEDTIMES}, got {self.bedtime}")
        if self.stress_reduction not in (0, 1) or self.hydration not in (0, 1):
            raise ValueError("stress_reduction and hydration must be 0/1")


def decode_action(stage: int, index: int, config: GlucoseConfig) -> GlucoseAction:
    """Map a flat action index to components.

    Ordering (insulin fastest): morning index = insulin + 2*meal_flag;
    day/evening index = insulin + 2*meal_flag + 4*activity_flag;
    night index = insulin + 2*bedtime_index.
    """
    if not 0 <= index < ACTION_COUNTS[stage - 1]:
        raise ValueError(f"action index {index} outside stage {stage}'s range")
    sr = config.stress_reduction_default
    hyd = config.hydration_default
    if stage == MORNING:
        meal = config.meal_flag_type if (index >> 1) & 1 else 0
        return GlucoseAction(insulin=index & 1, meal=meal, stress_reduction=sr, hydration=hyd)
    if stage in (DAY, EVENING):
        meal = config.meal_flag_type if (index >> 1) & 1 else 0
        act = config.activity_flag_level if (index >> 2) & 1 else 0
        return GlucoseAction(
            insulin=index & 1, meal=meal, activity=act, stress_reduction=sr, hydration=hyd
        )
    return GlucoseAction(
        insulin=index & 1, bedtime=BEDTIMES[index >> 1], stress_reduction=sr, hydration=hyd
    )


def glucose_reward(g_start: float, g_end: float, duration_hours: float) -> float:
    """Range penalty over the linear segment between consecutive readings.

    Ten midpoint samples at fractions (j - 0.5) / 10; each sample below 70
    costs 3, above 250 costs 2 and in [180, 250] costs 1, per hour.
    """
    fracs = (np.arange(10) + 0.5) / 10.0
    pts = g_start + fracs * (g_end - g_start)
    n_low = int((pts < 70.0).sum())
    n_high = int((pts > 250.0).sum())
    n_mid = int(((pts >= 180.0) & (pts <= 250.0)).sum())
    return -duration_hours * (3.0 * n_low + 2.0 * n_high + 1.0 * n_mid) / 10.0


def _clip(x: float, lo: float, hi: float) -> float:
    return min(max(x, lo), hi)


def _morning_calc(s: np.ndarray, a: GlucoseAction, cfg: GlucoseConfig) -> float:
    # higher insulin resistance, strong sensitivity to food intake
    g, w = s[G], s[WEIGHT]
    c_cur, p_cur, f_cur = MEALS[a.meal]
    early_boost = 5.0 if s[T] < 8 else 0.0
    carb_mod = (1.1 if a.hydration else 0.8) * (1.1 if a.stress_reduction else 0.7)
    time_6am = 0.25 if (s[T] == 6 and a.meal == 0) else 1.0
    h_factor = 1.1 if a.hydration else 0.8
    sr_factor = 1.1 if a.stress_reduction else 0.7
    fat_res = 1.0 + 0.07 * s[FM]
    carb_res = 1.0 + 0.005 * c_cur
    eff = time_6am * h_factor * sr_factor / (fat_res * carb_res)
    return (
        (10.0 + early_boost)
        + 0.93 * g
        + (0.50 + 0.002 * max(0.0, g - 120.0)) * carb_mod * c_cur * (70.0 / w)
        + 0.10 * p_cur
        + 0.03 * f_cur
        - 55.0 * a.insulin * _clip(eff, 0.05, 1.5)
        - 4.0 * a.stress_reduction
        - 2.0 * a.hydration
        + 0.0018 * s[CM] * w
        + 0.04 * s[PM]
        - 0.02 * s[FM]
    )


def _day_calc(s: np.ndarray, a: GlucoseAction, cfg: GlucoseConfig) -> float:
    # higher insulin sensitivity; activity matters
    g, w = s[G], s[WEIGHT]
    c_cur, p_cur, _ = MEALS[a.meal]
    carb_proc_eff = (1.0 if a.stress_reduction else 0.8) * (1.0 if a.hydration else 0.85)
    sr_h_mod = (1.1 if a.stress_reduction else 0.8) * (1.15 if a.hydration else 0.85)
    eff = (1.0 - (0.002 * s[CM] + 0.004 * s[FM])) * sr_h_mod
    act_carb_syn = -0.15 * (c_cur / 50.0) * a.activity
    act_sr_h_mod = (1.1 if a.stress_reduction else 0.9) * (1.2 if a.hydration else 0.8)
    minor = cfg.minor_cumulative_coef * (s[PD] + s[FD] + s[PM] + s[FM])
    return (
        5.0
        + 0.94 * g
        + (0.42 * carb_proc_eff) * c_cur * (70.0 / w)
        + 0.09 * p_cur
        - 80.0 * a.insulin * _clip(eff, 0.1, 1.3)
        + (-20.0 + act_carb_syn) * a.activity * act_sr_h_mod
        - 8.0 * a.insulin * (1.0 if a.activity > 0 else 0.0)
        - 6.0 * a.stress_reduction
        - 4.0 * a.hydration
        + 0.0013 * s[CD] * w
        + 0.020 * s[CM]
        + minor
    )


def _evening_calc(s: np.ndarray, a: GlucoseAction, cfg: GlucoseConfig) -> float:
    # slower metabolism; dietary fat hits harder
    g, w = s[G], s[WEIGHT]
    c_cur, p_cur, f_cur = MEALS[a.meal]
    carb_proc_eff = (1.0 if a.stress_reduction else 0.8) * (1.0 if a.hydration else 0.85)
    sr_h_mod = (1.0 if a.stress_reduction else 0.8) * (1.0 if a.hydration else 0.85)
    fat_res = 0.18 * f_cur + 0.010 * s[FD] + 0.008 * s[FM]
    eff = sr_h_mod / (1.0 + fat_res)
    act_sr_h_mod = (1.0 if a.stress_reduction else 0.7) * (1.0 if a.hydration else 0.75)
    activity_eff = -10.0 * a.activity * act_sr_h_mod
    if a.activity > 0 and (c_cur > 45.0 or f_cur > 12.0):
        activity_eff *= 0.4
    minor = cfg.minor_cumulative_coef * (s[PE] + s[FE] + s[CD] + s[FD] + s[CM] + s[PD])
    return (
        (10.0 + 0.003 * (s[CM] + s[CD]))
        + 0.94 * g
        + (0.40 * carb_proc_eff) * c_cur * (70.0 / w)
        + 0.10 * p_cur
        + 0.18 * f_cur
        - 55.0 * a.insulin * _clip(eff, 0.1, 1.0)
        + activity_eff
        - 3.0 * a.stress_reduction
        - 1.5 * a.hydration
        + 0.0016 * s[CE] * w
        + minor
    )


def _night_calc(s: np.ndarray, a: GlucoseAction, cfg: GlucoseConfig) -> float:
    # overnight drift; sleep timing is the main lever, meals/activity unused
    g = s[G]
    eod_push = (
        0.15 * s[FE]
        - 0.08 * s[PE]
        + (1.5 if a.stress_reduction == 0 else -1.0)
        + (1.0 if a.hydration == 0 else -0.5)
    )
    resist = (
        0.003 * max(0.0, g - 150.0)
        + 0.01 * s[FE]
        + 0.002 * s[CE]
        + (0.3 if a.stress_reduction == 0 else -0.1)
        + (0.2 if a.hydration == 0 else -0.05)
    )
    eff = 1.0 - resist
    eff_sleep_hrs = max(0.0, a.bedtime - 22.0)
    sleep_qual = (
        (1.0 if a.stress_reduction else 0.7)
        * (1.0 if a.hydration else 0.8)
        * max(0.5, 1.0 - 0.004 * max(0.0, g - 140.0))
    )
    linger = 0.03 * s[CE] + 0.025 * s[FE] + 0.02 * s[PE] + 0.001 * s[CM] + 0.002 * s[FD]
    return (
        (5.0 + eod_push)
        + 0.97 * g
        - 30.0 * a.insulin * _clip(eff, 0.05, 1.0)
        + (-2.5 * eff_sleep_hrs * sleep_qual)
        + linger
        - 0.5 * a.stress_reduction
        - 0.2 * a.hydration
    )


_CALC = {MORNING: _morning_calc, DAY: _day_calc, EVENING: _evening_calc, NIGHT: _night_calc}
_CUMULATIVE_SLOTS = {MORNING: (CM, PM, FM), DAY: (CD, PD, FD), EVENING: (CE, PE, FE)}


def glucose_step(
    stage: int,
    state: np.ndarray,
    action: GlucoseAction,
    rng: np.random.Generator,
    config: GlucoseConfig | None = None,
) -> tuple[float, np.ndarray]:
    """Advance one decision step; returns (reward, next state).

    Glucose is clipped to [50, 450] after the stage equation plus noise; the
    consumed meal's nutrients are added to the stage's cumulative totals
    (night consumes nothing); the hour advances by one, wrapping 22:00 to
    6:00 across the night block.  The reward covers the full step duration.
    """
    cfg = config or GlucoseConfig()
    s = np.asarray(state, dtype=float)
    if s.shape != (STATE_DIM,):
        raise ValueError(f"glucose state must have shape ({STATE_DIM},), got {s.shape}")
    hour = s[T]
    if not FIRST_HOUR[stage] <= hour <= LAST_HOUR[stage]:
        raise ValueError(f"hour {hour} outside the {STAGE_NAMES[stage]} window")
    g_calc = _CALC[stage](s, action, cfg)
    noise_sd = NOISE_SD[stage] * cfg.noise_scale
    if noise_sd > 0:
        g_calc += noise_sd * rng.standard_normal()
    g_next = _clip(g_calc, G_MIN, G_MAX)
    duration = STAGE_DURATION_HOURS[stage]
    reward = glucose_reward(s[G], g_next, duration)

    out = s.copy()
    out[G] = g_next
    out[DG] = (g_next - s[G]) / duration
    out[T] = 6.0 if stage == NIGHT else hour + 1.0
    if stage in _CUMULATIVE_SLOTS and action.meal in MEALS:
        c_slot, p_slot, f_slot = _CUMULATIVE_SLOTS[stage]
        c_cur, p_cur, f_cur = MEALS[action.meal]
        out[c_slot] += c_cur
        out[p_slot] += p_cur
        out[f_slot] += f_cur
    return reward, out


def initial_state_6am(rng: np.random.Generator, config: GlucoseConfig | None = None) -> np.ndarray:
    cfg = config or GlucoseConfig()
    s = np.zeros(STATE_DIM)
    s[T] = 6.0
    s[G] = _clip(
        rng.normal(cfg.init_glucose_mean, cfg.init_glucose_sd),
        cfg.init_glucose_low,
        cfg.init_glucose_high,
    )
    s[SEX] = float(rng.integers(0, 2))
    s[WEIGHT] = rng.uniform(cfg.init_weight_low, cfg.init_weight_high)
    return s


def make_glucose_env(config: GlucoseConfig | None = None) -> CyclicMdpSpec:
    """Assemble the four-stage simulator as a cyclic MDP."""
    cfg = config or GlucoseConfig()

    def step(k, state, action_index, rng):
        return glucose_step(k, state, decode_action(k, int(action_index), cfg), rng, cfg)

    def terminal_predicate(k, state, action):
        return float(state[T]) == float(LAST_HOUR[k])

    def stage_transition(k, s_prime):
        if k != NIGHT:
            return s_prime
        out = np.asarray(s_prime, dtype=float).copy()
        out[CM:FE + 1] = 0.0  # 6 AM reset of all cumulative nutrients
        return out

    def initial_state(k, rng):
        # eta_k: a fresh 6 AM start rolled forward under uniform actions
        state = initial_state_6am(rng, cfg)
        for prior in range(MORNING, k):
            for _ in range(HORIZONS[prior - 1]):
                idx = int(rng.integers(ACTION_COUNTS[prior - 1]))
                _, state = step(prior, state, idx, rng)
            state = stage_transition(prior, state)
        return state

    stages = tuple(
        StageSpec(
            state_dim=STATE_DIM,
            action_count=ACTION_COUNTS[k - 1],
            horizon=HORIZONS[k - 1],
            discount=DISCOUNTS[k - 1],
            reward_max=3.0 * STAGE_DURATION_HOURS[k],
        )
        for k in (MORNING, DAY, EVENING, NIGHT)
    )
    return CyclicMdpSpec(
        stages=stages,
        step=step,
        terminal_predicate=terminal_predicate,
        stage_transition=stage_transition,
        initial_state=initial_state,
        name="glucose",
        dataset_mode="trajectory",
        params=cfg.describe(),
    )
