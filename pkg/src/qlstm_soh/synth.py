"""Synthetic cycling data with a known capacity-fade trajectory.

Each cycle is a CC-CV charge, a short rest and a constant-current
discharge.  Capacity follows

    soh(t) = 1 - a t - b (exp(c t) - 1) + noise

and the charge curves deform with it: the electrode's dQ/dV peak drifts up
in voltage, internal resistance grows and the CV tail relaxes more slowly,
so every indicator carries signal.  The discharge is sized so that the
trapezoidal capacity of the generated samples is the target SOH exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy.special import ndtr

from .errors import ConfigError

V_EMPTY = 3.0
V_MAX = 4.2
I_CUT = 0.05


@dataclass(frozen=True)
class SynthSpec:
    n_cells: int = 10
    cycles: tuple[int, int] = (300, 600)
    a: float = 2e-4
    b: float = 0.013
    c: float = 0.006
    sigma: float = 0.002
    # stretch each cell's fade clock to ``ref_life`` cycles (with jitter) so
    # short- and long-lived cells end near the same SOH
    life_normalize: bool = True
    ref_life: float = 450.0
    rate_jitter: float = 0.1
    q_nom: float = 1.1
    charge_c_rate: float = 0.5
    discharge_c_rate: float = 1.0
    dt_charge: float = 10.0
    dt_discharge: float = 30.0
    voltage_noise: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.cycles
        if self.n_cells < 1 or lo < 1 or hi < lo:
            raise ConfigError("need n_cells >= 1 and a cycle range 1 <= lo <= hi")
        if self.sigma < 0 or self.q_nom <= 0:
            raise ConfigError("sigma must be >= 0 and q_nom > 0")


def fade_curve(t, a: float, b: float, c: float) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    return 1.0 - a * t - b * np.expm1(c * t)


class _Electrode:
    """Open-circuit charge/voltage relation with one Gaussian dQ/dV peak."""

    def __init__(self, mu: float, width: float = 0.05, weight: float = 0.45):
        self.grid = np.linspace(V_EMPTY, V_MAX, 1201)
        lin = (self.grid - V_EMPTY) / (V_MAX - V_EMPTY)
        gauss = ndtr((self.grid - mu) / width) - ndtr((V_EMPTY - mu) / width)
        frac = weight * gauss + (1.0 - weight) * lin
        self.frac = frac / frac[-1]

    def charge_fraction(self, v):
        return np.interp(v, self.grid, self.frac)

    def voltage(self, frac):
        return np.interp(frac, self.frac, self.grid)


def _cycle(spec: SynthSpec, soh: float, wear: float, rng: np.random.Generator):
    """Samples of one cycle as (step codes, t, I, V) arrays."""
    q_eff = soh * spec.q_nom
    i_c = spec.charge_c_rate * spec.q_nom
    i_d = spec.discharge_c_rate * spec.q_nom
    r = 0.08 * (1.0 + 2.5 * wear) * (1.0 + 0.01 * rng.standard_normal())
    tau = 600.0 * (1.0 + 1.5 * wear) * (1.0 + 0.02 * rng.standard_normal())
    cell = _Electrode(mu=3.70 + 0.25 * wear)

    # CC until the terminal voltage reaches V_MAX
    q_cc = q_eff * cell.charge_fraction(V_MAX - i_c * r)
    t_cc_end = q_cc / i_c * 3600.0
    t_cc = np.arange(0.0, t_cc_end, spec.dt_charge)
    v_cc = cell.voltage(i_c * t_cc / 3600.0 / q_eff) + i_c * r

    # CV: exponential current decay down to the cut-off
    t_cv_len = tau * np.log(i_c / I_CUT)
    t_cv = np.arange(spec.dt_charge, t_cv_len + spec.dt_charge / 2, spec.dt_charge)
    i_cv = i_c * np.exp(-t_cv / tau)
    t_cv = t_cc[-1] + t_cv

    t_rest = t_cv[-1] + np.array([60.0, 300.0, 600.0])
    v_rest = np.full(3, V_MAX - 0.02 - 0.1 * wear)

    # constant-current discharge, duration chosen so trapz(|I|) = q_eff exactly
    t_dis_len = q_eff * 3600.0 / i_d
    m = max(int(np.ceil(t_dis_len / spec.dt_discharge)), 2)
    t_dis = np.linspace(0.0, t_dis_len, m + 1)
    v_dis = cell.voltage(1.0 - t_dis / t_dis_len) - i_d * r
    t_dis = t_rest[-1] + 60.0 + t_dis

    noise = spec.voltage_noise
    steps = np.concatenate([np.zeros(len(t_cc)), np.ones(len(t_cv)), np.full(3, 3), np.full(len(t_dis), 2)]).astype(np.int8)
    t = np.concatenate([t_cc, t_cv, t_rest, t_dis])
    cur = np.concatenate([np.full(len(t_cc), i_c), i_cv, np.zeros(3), np.full(len(t_dis), -i_d)])
    volt = np.concatenate([v_cc, np.full(len(t_cv), V_MAX), v_rest, v_dis])
    volt = volt + noise * rng.standard_normal(len(volt))
    return steps, t, cur, volt


_STEP_NAMES = np.array(["cc_charge", "cv_charge", "discharge", "rest"], dtype=object)


@dataclass
class SynthCell:
    cell_id: str
    n_cycles: int
    soh: np.ndarray  # target trajectory, one value per cycle


def cell_trajectories(spec: SynthSpec) -> list[SynthCell]:
    """Target SOH per cell and cycle (cycle t = 1..N)."""
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0]))
    lo, hi = spec.cycles
    cells = []
    for k in range(spec.n_cells):
        n = int(rng.integers(lo, hi + 1))
        t = np.arange(1, n + 1, dtype=float)
        rate = 1.0 + spec.rate_jitter * rng.uniform(-1.0, 1.0)
        if spec.life_normalize:
            t = t * spec.ref_life / n * rate
        soh = fade_curve(t, spec.a, spec.b, spec.c)
        if spec.sigma > 0:
            soh = soh + spec.sigma * rng.standard_normal(n)
        cells.append(SynthCell(f"SYN{k + 1:02d}", n, soh))
    return cells


def synth_generate(spec: SynthSpec) -> pd.DataFrame:
    """Raw records ``cell_id, cycle_index, step, t_s, current_a, voltage_v``."""
    cols = {k: [] for k in ("cell_id", "cycle_index", "step", "t_s", "current_a", "voltage_v")}
    for idx, cell in enumerate(cell_trajectories(spec)):
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 1, idx]))
        for j, soh in enumerate(cell.soh):
            wear = max(0.0, 1.0 - soh) / 0.2
            steps, t, cur, volt = _cycle(spec, float(soh), wear, rng)
            cols["cell_id"].append(np.full(len(t), cell.cell_id, dtype=object))
            cols["cycle_index"].append(np.full(len(t), j + 1, dtype=np.int64))
            cols["step"].append(_STEP_NAMES[steps])
            cols["t_s"].append(t)
            cols["current_a"].append(cur)
            cols["voltage_v"].append(volt)
    return pd.DataFrame({k: np.concatenate(v) for k, v in cols.items()})
