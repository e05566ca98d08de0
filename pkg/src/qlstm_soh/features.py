"""Per-cycle health indicators, SOH labels and feature selection.

Raw data is a long table of samples ``cell_id, cycle_index, step, t_s,
current_a, voltage_v`` with charge current positive.  One cycle is cut into
CC-charge, CV-charge and discharge segments; thirteen indicators come from
the charge segments and the SOH label from the discharge.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import pandas as pd
from scipy.stats import rankdata

from .errors import ProvenanceError, SkipCycle, ValidationError

log = logging.getLogger(__name__)

STEPS = ("cc_charge", "cv_charge", "discharge", "rest")
N_HI = 13
HI_NAMES = tuple(f"hi{i}" for i in range(1, N_HI + 1))

CV_PROBE_S = 200.0
CHARGE_PROBE_S = 500.0
ENTROPY_BINS = 30
ICA_GRID_V = 0.002
ICA_WINDOW = 21
ICA_ORDER = 3
# drops in smoothed CC voltage up to this size are smoothing ringing at
# steep segment ends and get flattened; larger ones drop the cycle
ICA_MONOTONE_TOL_V = 0.005


@dataclass
class Segment:
    t: np.ndarray
    current: np.ndarray
    voltage: np.ndarray

    def __len__(self):
        return len(self.t)

    @property
    def duration(self) -> float:
        return float(self.t[-1] - self.t[0]) if len(self.t) else 0.0


@dataclass
class CycleProfile:
    cell_id: str
    cycle_index: int
    cc: Segment | None
    cv: Segment | None
    discharge: Segment | None


def _segment(df: pd.DataFrame) -> Segment:
    return Segment(
        df["t_s"].to_numpy(dtype=float),
        df["current_a"].to_numpy(dtype=float),
        df["voltage_v"].to_numpy(dtype=float),
    )


def segment_cycle(records: pd.DataFrame) -> CycleProfile:
    """Group one cycle's samples by step tag.

    Raises ``SkipCycle`` when the CC or discharge step is absent and
    ``ValidationError`` on non-increasing time inside a step or V <= 0.
    """
    if len(records) == 0:
        raise SkipCycle("no records")
    cells = records["cell_id"].unique()
    cycles = records["cycle_index"].unique()
    if len(cells) != 1 or len(cycles) != 1:
        raise ValidationError("segment_cycle expects the records of exactly one cell and cycle")
    unknown = set(records["step"].unique()) - set(STEPS)
    if unknown:
        raise ValidationError(f"unknown step tags {sorted(unknown)}")
    if (records["voltage_v"] <= 0).any():
        raise ValidationError("voltage must be positive")
    parts = {}
    for step, grp in records.groupby("step", sort=False):
        seg = _segment(grp)
        if np.any(np.diff(seg.t) <= 0):
            raise ValidationError(f"time not strictly increasing in {step} of cell {cells[0]} cycle {cycles[0]}")
        parts[step] = seg
    cell, cycle = str(cells[0]), int(cycles[0])
    if "cc_charge" not in parts:
        raise SkipCycle(f"cell {cell} cycle {cycle}: no CC charge step")
    if "discharge" not in parts:
        raise SkipCycle(f"cell {cell} cycle {cycle}: no discharge step")
    return CycleProfile(cell, cycle, parts["cc_charge"], parts.get("cv_charge"), parts["discharge"])


def compute_soh(profile: CycleProfile, q_nom: float) -> float:
    """Discharged capacity over nominal capacity (trapezoid of |I| dt)."""
    if q_nom <= 0:
        raise ValidationError("nominal capacity must be positive")
    seg = profile.discharge
    if seg is None or len(seg) < 2:
        raise SkipCycle("discharge segment too short for SOH")
    q_ah = np.trapezoid(np.abs(seg.current), seg.t) / 3600.0
    return float(q_ah / q_nom)


# --------------------------------------------------------------------------
# Smoothing
# --------------------------------------------------------------------------

@lru_cache(maxsize=256)
def _savgol_row(left: int, right: int, order: int) -> np.ndarray:
    """Weights giving the LS polynomial value at offset 0 from samples -left..right."""
    x = np.arange(-left, right + 1, dtype=float)
    order = min(order, left + right)
    vander = np.vander(x, order + 1, increasing=True)
    # first row of the pseudo-inverse evaluates the fit at x = 0
    return np.linalg.pinv(vander)[0]


def savgol_smooth(y, window: int, order: int) -> np.ndarray:
    """Savitzky-Golay smoothing.

    Near the ends the window is cut off at the series boundary, so the first
    point is fitted from ``window // 2 + 1`` samples on one side.  If such a
    shortened window has fewer than ``order + 1`` samples the local order
    drops to fit.
    """
    y = np.asarray(y, dtype=float)
    if window < 1 or window % 2 == 0:
        raise ValidationError(f"window must be a positive odd integer, got {window}")
    if not 0 <= order < window:
        raise ValidationError(f"order must satisfy 0 <= order < window, got {order}")
    if y.ndim != 1 or len(y) < window:
        raise ValidationError(f"series of length {len(y)} shorter than window {window}")
    half = window // 2
    n = len(y)
    out = np.empty(n)
    # np.correlate keeps the weight order aligned with the samples
    out[half : n - half] = np.correlate(y, _savgol_row(half, half, order), mode="valid")
    for i in range(half):
        out[i] = _savgol_row(i, half, order) @ y[: i + half + 1]
        out[n - 1 - i] = _savgol_row(half, i, order) @ y[n - 1 - i - half :]
    return out


# --------------------------------------------------------------------------
# Health indicators
# --------------------------------------------------------------------------

def _charge_timeline(cc: Segment, cv: Segment | None) -> Segment:
    """CC then CV on one clock starting at CC start = 0.

    Logs that restart the clock at every step are shifted so CV follows the
    last CC sample by CV's own first sampling interval.
    """
    t_cc = cc.t - cc.t[0]
    if cv is None:
        return Segment(t_cc, cc.current, cc.voltage)
    t_cv = cv.t - cc.t[0]
    if t_cv[0] <= t_cc[-1]:
        step = cv.t[1] - cv.t[0] if len(cv) > 1 else 1.0
        t_cv = cv.t - cv.t[0] + t_cc[-1] + step
    return Segment(
        np.concatenate([t_cc, t_cv]),
        np.concatenate([cc.current, cv.current]),
        np.concatenate([cc.voltage, cv.voltage]),
    )


def _energy_wh(seg: Segment) -> float:
    return float(np.trapezoid(seg.voltage * seg.current, seg.t) / 3600.0)


def lsq_slope(t, v) -> float:
    t = np.asarray(t, dtype=float)
    v = np.asarray(v, dtype=float)
    tc = t - t.mean()
    var = np.dot(tc, tc)
    if var == 0.0:
        return 0.0
    return float(np.dot(tc, v - v.mean()) / var)


def histogram_entropy(v, bins: int = ENTROPY_BINS) -> float:
    """Shannon entropy in bits of a fixed-width histogram over [min, max]."""
    v = np.asarray(v, dtype=float)
    if v.max() == v.min():
        return 0.0
    counts, _ = np.histogram(v, bins=bins, range=(v.min(), v.max()))
    p = counts[counts > 0] / counts.sum()
    return float(-np.sum(p * np.log2(p)))


def skewness(v) -> float:
    """Fisher-Pearson coefficient g1 = m3 / m2**1.5; 0 for constant data."""
    v = np.asarray(v, dtype=float)
    d = v - v.mean()
    m2 = np.mean(d * d)
    if m2 <= 1e-30 * max(1.0, float(np.mean(v * v))):
        return 0.0
    return float(np.mean(d**3) / m2**1.5)


@dataclass
class IcaPeak:
    voltage: float
    area: float
    magnitude: float
    grid: np.ndarray = field(repr=False)
    dqdv: np.ndarray = field(repr=False)


def _odd_window(n: int, preferred: int) -> int:
    w = min(preferred, n if n % 2 else n - 1)
    return max(w, 1)


def compute_ica(cc: Segment, grid_step: float = ICA_GRID_V) -> IcaPeak:
    """Dominant dQ/dV peak of the CC charge: (voltage, half-max area, height)."""
    if len(cc) < 3:
        raise ValidationError("ICA needs at least 3 CC samples")
    q = np.concatenate([[0.0], np.cumsum(0.5 * (cc.current[1:] + cc.current[:-1]) * np.diff(cc.t))]) / 3600.0
    w = _odd_window(len(cc), ICA_WINDOW)
    v = savgol_smooth(cc.voltage, w, min(ICA_ORDER, w - 1))
    running = np.maximum.accumulate(v)
    if np.max(running - v) > ICA_MONOTONE_TOL_V:
        raise SkipCycle("CC voltage not monotone after smoothing")
    v = running
    # flat stretches map several charges onto one voltage; keep the first
    v_u, first = np.unique(v, return_index=True)
    q_u = q[first]
    n_grid = int(np.floor((v_u[-1] - v_u[0]) / grid_step)) + 1
    if n_grid < 3:
        raise SkipCycle("CC voltage span too small for the ICA grid")
    grid = v_u[0] + grid_step * np.arange(n_grid)
    q_grid = np.interp(grid, v_u, q_u)
    dqdv = np.gradient(q_grid, grid_step)
    w = _odd_window(n_grid, ICA_WINDOW)
    dqdv = savgol_smooth(dqdv, w, min(ICA_ORDER, w - 1))

    k = int(np.argmax(dqdv))
    peak = float(dqdv[k])
    above = dqdv >= 0.5 * peak
    lo = k
    while lo > 0 and above[lo - 1]:
        lo -= 1
    hi = k
    while hi < n_grid - 1 and above[hi + 1]:
        hi += 1
    area = float(np.trapezoid(dqdv[lo : hi + 1], grid[lo : hi + 1]))
    return IcaPeak(float(grid[k]), area, peak, grid, dqdv)


def extract_hi_vector(profile: CycleProfile) -> np.ndarray:
    """The 13 indicators of one cycle (see README for definitions)."""
    cc, cv = profile.cc, profile.cv
    if cc is None or len(cc) < 3:
        raise SkipCycle("CC segment missing or too short")
    if cv is None or len(cv) < 2:
        raise SkipCycle("CV segment missing or too short")
    hi = np.empty(N_HI)
    hi[0] = cc.duration
    hi[1] = cv.duration
    if cv.duration < CV_PROBE_S:
        raise SkipCycle(f"CV phase shorter than {CV_PROBE_S:g} s")
    hi[2] = np.interp(cv.t[0] + CV_PROBE_S, cv.t, cv.current)
    charge = _charge_timeline(cc, cv)
    if charge.t[-1] < CHARGE_PROBE_S:
        raise SkipCycle(f"charge shorter than {CHARGE_PROBE_S:g} s")
    hi[3] = np.interp(CHARGE_PROBE_S, charge.t, charge.voltage)
    hi[4] = _energy_wh(charge)
    e_cc, e_cv = _energy_wh(cc), _energy_wh(cv)
    if e_cv == 0.0:
        raise SkipCycle("zero CV energy")
    hi[5] = e_cc / e_cv
    hi[6] = cc.voltage[0]
    hi[7] = lsq_slope(cc.t, cc.voltage)
    hi[8] = histogram_entropy(cc.voltage)
    hi[9] = skewness(cc.voltage)
    peak = compute_ica(cc)
    hi[10], hi[11], hi[12] = peak.voltage, peak.area, peak.magnitude
    if not np.all(np.isfinite(hi)):
        raise SkipCycle("non-finite indicator")
    return hi


# --------------------------------------------------------------------------
# Feature table
# --------------------------------------------------------------------------

@dataclass
class FeatureTable:
    """One row per usable cycle.  ``partition`` tags each row 'train', 'test' or ''."""

    cell_id: np.ndarray
    cycle_index: np.ndarray
    hi: np.ndarray
    soh: np.ndarray
    partition: np.ndarray | None = None
    skipped: list = field(default_factory=list)

    def __post_init__(self):
        self.cell_id = np.asarray(self.cell_id, dtype=object)
        self.cycle_index = np.asarray(self.cycle_index, dtype=int)
        self.hi = np.asarray(self.hi, dtype=float).reshape(-1, N_HI)
        self.soh = np.asarray(self.soh, dtype=float)
        n = len(self.soh)
        if not (len(self.cell_id) == len(self.cycle_index) == len(self.hi) == n):
            raise ValidationError("feature table columns differ in length")
        if self.partition is None:
            self.partition = np.full(n, "", dtype=object)
        else:
            self.partition = np.asarray(self.partition, dtype=object)

    def __len__(self):
        return len(self.soh)

    @property
    def cells(self) -> list[str]:
        return sorted(set(self.cell_id.tolist()))

    def subset(self, mask) -> "FeatureTable":
        mask = np.asarray(mask)
        return FeatureTable(self.cell_id[mask], self.cycle_index[mask], self.hi[mask], self.soh[mask], self.partition[mask])

    def tagged(self, tag: str) -> "FeatureTable":
        return FeatureTable(self.cell_id, self.cycle_index, self.hi, self.soh, np.full(len(self), tag, dtype=object),
                            list(self.skipped))

    def to_frame(self) -> pd.DataFrame:
        df = pd.DataFrame({"cell_id": self.cell_id, "cycle_index": self.cycle_index})
        for j, name in enumerate(HI_NAMES):
            df[name] = self.hi[:, j]
        df["soh"] = self.soh
        return df

    @classmethod
    def from_frame(cls, df: pd.DataFrame) -> "FeatureTable":
        missing = [c for c in ("cell_id", "cycle_index", *HI_NAMES, "soh") if c not in df.columns]
        if missing:
            raise ValidationError(f"feature table lacks columns {missing}")
        return cls(df["cell_id"].astype(str).to_numpy(), df["cycle_index"].to_numpy(),
                   df[list(HI_NAMES)].to_numpy(dtype=float), df["soh"].to_numpy(dtype=float))


def extract_features(records: pd.DataFrame, q_nom: float) -> FeatureTable:
    """Run segmentation, SOH and indicator extraction over every (cell, cycle).

    Unusable cycles are dropped and listed in ``table.skipped`` as
    ``(cell_id, cycle_index, reason)``.
    """
    if q_nom <= 0:
        raise ValidationError("nominal capacity must be positive")
    rows, skipped = [], []
    ordered = records.sort_values(["cell_id", "cycle_index"], kind="stable")
    for (cell, cycle), grp in ordered.groupby(["cell_id", "cycle_index"], sort=True):
        try:
            prof = segment_cycle(grp)
            soh = compute_soh(prof, q_nom)
            hi = extract_hi_vector(prof)
        except (SkipCycle, ValidationError) as exc:
            reason = getattr(exc, "reason", str(exc))
            log.info("skip cell %s cycle %s: %s", cell, cycle, reason)
            skipped.append((str(cell), int(cycle), reason))
            continue
        rows.append((str(cell), int(cycle), hi, soh))
    if not rows:
        return FeatureTable([], [], np.zeros((0, N_HI)), [], skipped=skipped)
    cell_ids, cycles, his, sohs = zip(*rows)
    return FeatureTable(cell_ids, cycles, np.vstack(his), sohs, skipped=skipped)


# --------------------------------------------------------------------------
# Selection statistics
# --------------------------------------------------------------------------

def equal_frequency_bins(x, bins: int) -> np.ndarray:
    """Bin labels from stable ranks: value first, then original position."""
    x = np.asarray(x, dtype=float)
    order = np.argsort(x, kind="stable")
    rank = np.empty(len(x), dtype=np.int64)
    rank[order] = np.arange(len(x))
    return rank * bins // len(x)


def mutual_information(x, y, bins: int = 16) -> float:
    """Plug-in MI (bits) between equal-frequency binnings of x and y."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n = len(x)
    if len(y) != n:
        raise ValidationError("x and y differ in length")
    if bins < 2:
        raise ValidationError("need at least 2 bins")
    if n < bins * bins:
        raise ValidationError(f"need n >= bins**2 = {bins * bins} samples, got {n}")
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        return 0.0
    bx = equal_frequency_bins(x, bins)
    by = equal_frequency_bins(y, bins)
    joint = np.bincount(bx * bins + by, minlength=bins * bins).reshape(bins, bins) / n
    px = joint.sum(axis=1)
    py = joint.sum(axis=0)
    nz = joint > 0
    ratio = joint[nz] / np.outer(px, py)[nz]
    return float(max(0.0, np.sum(joint[nz] * np.log2(ratio))))


def spearman(x, y) -> float:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(x) != len(y):
        raise ValidationError("x and y differ in length")
    if len(x) < 3:
        raise ValidationError("spearman needs at least 3 points")
    rx = rankdata(x) - (len(x) + 1) / 2.0
    ry = rankdata(y) - (len(y) + 1) / 2.0
    den = np.sqrt(np.dot(rx, rx) * np.dot(ry, ry))
    if den == 0.0:
        return 0.0
    return float(np.clip(np.dot(rx, ry) / den, -1.0, 1.0))


def selection_bins(n: int, preferred: int = 16) -> int:
    """Largest bin count <= ``preferred`` that the sample size supports (n >= B**2)."""
    b = min(preferred, int(np.floor(np.sqrt(n))))
    if b < 2:
        raise ValidationError(f"{n} rows are too few for binned mutual information")
    return b


@dataclass
class SelectionReport:
    mi_scores: np.ndarray
    spearman: np.ndarray
    retained: list[int]  # best first
    bins: int
    n_rows: int
    train_cells: list[str]

    @property
    def spearman_abs(self) -> np.ndarray:
        return np.abs(self.spearman)


def check_train_provenance(table: FeatureTable, what: str) -> None:
    bad = table.partition != "train"
    if np.any(bad):
        cells = sorted(set(table.cell_id[bad].tolist()))
        tags = sorted(set(str(t) or "<untagged>" for t in table.partition[bad]))
        raise ProvenanceError(f"{what} must see training rows only; rows tagged {tags} from cells {cells}")


def select_features(table: FeatureTable, k_sel: int = 10, bins: int = 16) -> SelectionReport:
    """Rank indicators by MI with SOH; keep the top ``k_sel`` (ties -> lower index)."""
    if not 1 <= k_sel <= N_HI:
        raise ValidationError(f"k_sel must be in 1..{N_HI}, got {k_sel}")
    check_train_provenance(table, "feature selection")
    n = len(table)
    b = selection_bins(n, bins)
    if b != bins:
        log.info("feature selection: %d rows support %d bins, not %d", n, b, bins)
    mi = np.array([mutual_information(table.hi[:, j], table.soh, b) for j in range(N_HI)])
    rho = np.array([spearman(table.hi[:, j], table.soh) for j in range(N_HI)])
    order = np.lexsort((np.arange(N_HI), -mi))
    return SelectionReport(mi, rho, order[:k_sel].tolist(), b, n, table.cells)
