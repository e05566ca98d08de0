import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.signal import savgol_filter
from scipy.stats import norm

from qlstm_soh import features as F
from qlstm_soh.errors import ProvenanceError, SkipCycle, ValidationError
from qlstm_soh.features import CycleProfile, FeatureTable, Segment

from oracles import mi_count_oracle, savgol_normal_equations


def seg(t, i, v):
    t = np.asarray(t, float)
    return Segment(t, np.broadcast_to(np.asarray(i, float), t.shape).copy(), np.broadcast_to(np.asarray(v, float), t.shape).copy())


def discharge(current, seconds, n=101):
    t = np.linspace(0, seconds, n)
    return seg(t, -current, 3.5)


def records(steps):
    rows = []
    for step, t, i, v in steps:
        for a, b, c in zip(t, i, v):
            rows.append(("C1", 1, step, a, b, c))
    return pd.DataFrame(rows, columns=["cell_id", "cycle_index", "step", "t_s", "current_a", "voltage_v"])


# ---------------------------------------------------------------- SOH

def test_soh_examples():
    prof = CycleProfile("c", 1, None, None, discharge(1.0, 3600))
    assert F.compute_soh(prof, 1.0) == pytest.approx(1.0, abs=1e-15)
    prof = CycleProfile("c", 1, None, None, discharge(1.0, 2880))
    assert F.compute_soh(prof, 1.0) == pytest.approx(0.8, abs=1e-15)
    with pytest.raises(ValidationError):
        F.compute_soh(prof, 0.0)


def test_soh_ramp_and_grid_refinement():
    # 1 A -> 0 A over 7200 s holds 1 Ah; trapezoid is exact for linear current
    for n in (2, 3, 50, 7201):
        t = np.linspace(0, 7200, n)
        prof = CycleProfile("c", 1, None, None, Segment(t, -(1 - t / 7200), np.full(n, 3.5)))
        assert F.compute_soh(prof, 1.0) == pytest.approx(1.0, rel=1e-9)


def test_soh_piecewise_linear_refinement_invariance():
    knots_t = np.array([0.0, 600, 1500, 3000, 3600])
    knots_i = np.array([-1.2, -1.0, -0.4, -0.9, -0.1])
    coarse = F.compute_soh(CycleProfile("c", 1, None, None, Segment(knots_t, knots_i, np.ones(5))), 1.0)
    fine_t = np.unique(np.concatenate([knots_t, np.linspace(0, 3600, 997)]))
    fine = F.compute_soh(CycleProfile("c", 1, None, None, Segment(fine_t, np.interp(fine_t, knots_t, knots_i), np.ones(len(fine_t)))), 1.0)
    assert fine == pytest.approx(coarse, rel=1e-9)


# ---------------------------------------------------------------- segmentation

def test_segment_three_steps():
    t = np.arange(5.0)
    df = records([("cc_charge", t, [1] * 5, 3.5 + 0.1 * t), ("cv_charge", t + 10, [0.5] * 5, [4.2] * 5),
                  ("discharge", t + 20, [-1] * 5, [3.6] * 5)])
    prof = F.segment_cycle(df)
    assert len(prof.cc) == len(prof.cv) == len(prof.discharge) == 5


def test_segment_rest_only_skips():
    df = records([("rest", np.arange(3.0), [0] * 3, [3.8] * 3)])
    with pytest.raises(SkipCycle):
        F.segment_cycle(df)


def test_segment_out_of_order_time():
    df = records([("cc_charge", [0.0, 2.0, 1.0], [1] * 3, [3.5] * 3), ("discharge", [5.0, 6.0], [-1] * 2, [3.5] * 2)])
    with pytest.raises(ValidationError):
        F.segment_cycle(df)


# ---------------------------------------------------------------- indicators

def ramp_profile(cv_seconds=1000.0, cc_v=None):
    t = np.arange(0.0, 3601.0)
    v = 3.0 + 1e-4 * t if cc_v is None else cc_v(t)
    cc = seg(t, 1.0, v)
    tcv = 3601.0 + np.arange(0.0, cv_seconds + 1)
    cv = seg(tcv, 1.0 * np.exp(-(tcv - tcv[0]) / 500.0), 3.4)
    return CycleProfile("c", 1, cc, cv, discharge(1.0, 3600))


def test_ramp_indicators():
    hi = F.extract_hi_vector(ramp_profile())
    assert hi[0] == 3600.0
    assert hi[1] == 1000.0
    assert hi[2] == pytest.approx(np.exp(-200 / 500), rel=1e-12)
    assert hi[3] == pytest.approx(3.05, abs=1e-12)
    assert hi[6] == 3.0
    assert hi[7] == pytest.approx(1e-4, rel=1e-10)
    assert hi[8] == pytest.approx(np.log2(30), abs=1e-4)
    assert abs(hi[9]) < 1e-10


def test_ramp_energy_indicators():
    prof = ramp_profile()
    hi = F.extract_hi_vector(prof)
    e_cc = (3.0 * 3600 + 0.5e-4 * 3600**2) / 3600  # integral of V * 1 A, in Wh
    e_cv = 3.4 * 500 * (1 - np.exp(-1000 / 500)) / 3600
    e_gap = 0.5 * (3.36 + 3.4) / 3600  # the 1 s step joining CC and CV
    assert hi[5] == pytest.approx(e_cc / e_cv, rel=1e-4)
    assert hi[4] == pytest.approx(e_cc + e_gap + e_cv, rel=1e-4)


def test_entropy_count_oracle():
    v = np.repeat(np.arange(30.0), 7)
    # 30 distinct values, one per bin
    assert F.histogram_entropy(v) == pytest.approx(np.log2(30), abs=1e-12)
    assert F.histogram_entropy(np.array([0.0, 0, 0, 1])) == pytest.approx(-(0.75 * np.log2(0.75) + 0.25 * np.log2(0.25)))


def test_degenerate_constant_cc():
    t = np.arange(0.0, 3601.0)
    assert F.lsq_slope(t, np.full_like(t, 3.7)) == 0.0
    assert F.histogram_entropy(np.full_like(t, 3.7)) == 0.0
    assert F.skewness(np.full_like(t, 3.7)) == 0.0


def test_zero_cv_energy_drops_cycle():
    prof = ramp_profile()
    prof.cv.current[:] = 0.0
    with pytest.raises(SkipCycle):
        F.extract_hi_vector(prof)


def test_short_cv_drops_cycle():
    with pytest.raises(SkipCycle):
        F.extract_hi_vector(ramp_profile(cv_seconds=150))


def test_skewness_matches_scipy():
    from scipy.stats import skew
    x = np.random.default_rng(0).gamma(2.0, size=500)
    assert F.skewness(x) == pytest.approx(skew(x), rel=1e-12)


# ---------------------------------------------------------------- savgol

@pytest.mark.parametrize("order", [0, 1, 2, 3])
def test_savgol_reproduces_polynomials(order):
    rng = np.random.default_rng(order)
    x = np.arange(60.0)
    y = np.polyval(rng.normal(size=order + 1), x / 10)
    out = F.savgol_smooth(y, 11, order)
    assert np.max(np.abs(out - y)) < 1e-9 * max(1, np.max(np.abs(y)))


def test_savgol_constant_unchanged():
    y = np.full(40, 2.5)
    assert np.allclose(F.savgol_smooth(y, 21, 3), y, atol=1e-13)


def test_savgol_noisy_sine():
    rng = np.random.default_rng(1)
    x = np.linspace(0, 4 * np.pi, 400)
    amp = 0.05
    clean = np.sin(x)
    out = F.savgol_smooth(clean + rng.uniform(-amp, amp, x.size), 21, 3)
    assert np.max(np.abs(out - clean)) < amp


def test_savgol_matches_normal_equations_everywhere():
    rng = np.random.default_rng(2)
    y = rng.normal(size=50)
    out = F.savgol_smooth(y, 9, 3)
    ref = np.array([savgol_normal_equations(y, 9, 3, i) for i in range(50)])
    assert np.max(np.abs(out - ref)) < 1e-12


def test_savgol_interior_matches_scipy():
    y = np.random.default_rng(3).normal(size=80)
    assert np.allclose(F.savgol_smooth(y, 21, 3)[10:-10], savgol_filter(y, 21, 3)[10:-10], atol=1e-13)


def test_savgol_errors():
    with pytest.raises(ValidationError):
        F.savgol_smooth(np.zeros(10), 4, 2)
    with pytest.raises(ValidationError):
        F.savgol_smooth(np.zeros(10), 5, 5)
    with pytest.raises(ValidationError):
        F.savgol_smooth(np.zeros(3), 5, 2)


# ---------------------------------------------------------------- ICA

def gaussian_cc(amplitude, mu, sigma, current=0.5, dt=1.0):
    total = amplitude * sigma * np.sqrt(2 * np.pi)
    lo, hi = norm.cdf(-4), norm.cdf(4)
    t_end = total * (hi - lo) / current * 3600
    t = np.arange(0.0, t_end, dt)
    q = current * t / 3600
    v = mu + sigma * norm.ppf(lo + q / total)
    return seg(t, current, v)


@pytest.mark.parametrize("amplitude,mu,sigma", [(2.0, 3.70, 0.05), (1.2, 3.85, 0.08), (5.0, 3.60, 0.04)])
def test_ica_gaussian_oracle(amplitude, mu, sigma):
    peak = F.compute_ica(gaussian_cc(amplitude, mu, sigma))
    assert peak.voltage == pytest.approx(mu, rel=0.02)
    assert peak.magnitude == pytest.approx(amplitude, rel=0.02)
    half_max_mass = amplitude * sigma * np.sqrt(2 * np.pi) * 0.7611
    assert peak.area == pytest.approx(half_max_mass, rel=0.05)


def test_half_max_mass_fraction():
    # fraction of a Gaussian's mass within its half-maximum width
    w = np.sqrt(2 * np.log(2))
    assert norm.cdf(w) - norm.cdf(-w) == pytest.approx(0.7611, abs=2e-4)


def test_ica_linear_q_of_v():
    t = np.arange(0.0, 3601.0)
    k = 1e-4
    cc = seg(t, 1.0, 3.0 + k * t)
    peak = F.compute_ica(cc)
    slope = 1.0 / 3600 / k  # Ah per volt
    assert np.allclose(peak.dqdv, slope, rtol=1e-9)
    span = peak.grid[-1] - peak.grid[0]
    assert peak.area == pytest.approx(slope * span, rel=1e-9)


def test_ica_too_short():
    with pytest.raises(ValidationError):
        F.compute_ica(seg([0.0, 1.0], 1.0, [3.0, 3.1]))


def test_ica_small_ringing_is_flattened():
    t = np.arange(0.0, 400.0)
    v = 3.5 + 1e-3 * t
    v[200:] -= 0.002
    peak = F.compute_ica(seg(t, 1.0, v))
    assert np.all(np.diff(peak.grid) > 0)


def test_ica_non_monotone_skips():
    t = np.arange(0.0, 400.0)
    with pytest.raises(SkipCycle):
        F.compute_ica(seg(t, 1.0, 3.5 + 0.2 * np.sin(t / 20)))


# ---------------------------------------------------------------- MI / spearman

def test_mi_identity_exact():
    x = np.random.default_rng(0).permutation(256).astype(float)
    assert F.mutual_information(x, x, 16) == 4.0
    assert mi_count_oracle(x, x, 16) == pytest.approx(4.0, abs=1e-12)


def test_mi_permutation_null():
    rng = np.random.default_rng(1)
    x = rng.normal(size=256)
    vals = [F.mutual_information(x, rng.permutation(x), 4) for _ in range(1000)]
    assert np.percentile(vals, 99) < 0.15


def test_mi_constant_is_zero():
    assert F.mutual_information(np.ones(64), np.arange(64.0), 8) == 0.0


def test_mi_matches_count_oracle():
    rng = np.random.default_rng(2)
    for _ in range(5):
        x = rng.normal(size=200)
        y = x**2 + rng.normal(scale=0.3, size=200)
        assert F.mutual_information(x, y, 8) == pytest.approx(mi_count_oracle(x, y, 8), abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_mi_symmetric_and_bounded(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=100)
    y = x * rng.normal() + rng.normal(size=100)
    a, b = F.mutual_information(x, y, 8), F.mutual_information(y, x, 8)
    assert 0.0 <= a <= np.log2(8) + 1e-12
    assert abs(a - b) < 1e-12


def test_mi_sample_size_guard():
    with pytest.raises(ValidationError):
        F.mutual_information(np.arange(10.0), np.arange(10.0), 4)


def test_spearman_examples():
    x = np.arange(10.0)
    assert F.spearman(x, x**3) == 1.0
    assert F.spearman(x, -np.exp(x)) == -1.0
    assert F.spearman([1, 1, 2], [1, 2, 3]) == pytest.approx(np.sqrt(3) / 2, abs=1e-12)
    assert F.spearman([1, 1, 1], [1, 2, 3]) == 0.0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_spearman_monotone_invariance(seed):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=30), rng.normal(size=30)
    r = F.spearman(x, y)
    assert abs(r) <= 1.0
    assert F.spearman(np.exp(x), y**3) == r


# ---------------------------------------------------------------- selection

def table(hi, soh, tag="train"):
    n = len(soh)
    return FeatureTable(np.array(["A"] * (n // 2) + ["B"] * (n - n // 2)), np.arange(n), hi, soh, np.full(n, tag, dtype=object))


def test_selection_target_copy_first():
    rng = np.random.default_rng(0)
    soh = rng.uniform(0.8, 1.0, 300)
    hi = rng.normal(size=(300, 13))
    hi[:, 0] = soh
    rep = F.select_features(table(hi, soh))
    assert rep.retained[0] == 0
    assert len(rep.retained) == 10


def test_selection_ties_keep_lower_index():
    soh = np.linspace(0.8, 1.0, 300)
    hi = np.tile(np.sin(np.arange(300.0))[:, None], (1, 13))
    rep = F.select_features(table(hi, soh), k_sel=10)
    assert rep.retained == list(range(10))


def test_selection_keeps_nonlinear_feature():
    rng = np.random.default_rng(4)
    n = 400
    soh = rng.uniform(0.8, 1.0, n)
    u = (soh - 0.9) / 0.1
    hi = rng.normal(size=(n, 13))
    hi[:, 0] = u**2 + 0.01 * rng.normal(size=n)  # symmetric in u: near-zero rank correlation
    hi[:, 1] = soh + 0.3 * rng.normal(size=n)  # monotone but noisy
    rep = F.select_features(table(hi, soh), k_sel=3)
    assert abs(rep.spearman[0]) < 0.2
    assert 0 in rep.retained
    assert rep.mi_scores[0] == pytest.approx(mi_count_oracle(hi[:, 0], soh, rep.bins), abs=1e-12)


def test_selection_bin_adaptation():
    assert F.selection_bins(300) == 16
    assert F.selection_bins(100) == 10
    with pytest.raises(ValidationError):
        F.selection_bins(3)


def test_selection_rejects_test_rows():
    soh = np.linspace(0.8, 1.0, 300)
    hi = np.random.default_rng(0).normal(size=(300, 13))
    t = table(hi, soh)
    t.partition[5] = "test"
    with pytest.raises(ProvenanceError):
        F.select_features(t)
    with pytest.raises(ProvenanceError):
        F.select_features(table(hi, soh, tag=""))


def test_selection_k_range():
    soh = np.linspace(0.8, 1.0, 300)
    with pytest.raises(ValidationError):
        F.select_features(table(np.zeros((300, 13)), soh), k_sel=14)


# ---------------------------------------------------------------- table

def test_extract_features_skips_and_logs():
    t = np.arange(0.0, 3601.0)
    steps = [("cc_charge", t, np.ones_like(t), 3.0 + 1e-4 * t),
             ("cv_charge", 3601 + np.arange(0.0, 1001.0), np.exp(-np.arange(0.0, 1001.0) / 500), np.full(1001, 3.4)),
             ("discharge", 5000 + np.linspace(0, 3600, 50), -np.ones(50), np.full(50, 3.5))]
    good = records(steps)
    bad = records(steps[:1]).assign(cycle_index=2)
    tab = F.extract_features(pd.concat([good, bad]), 1.0)
    assert len(tab) == 1 and tab.soh[0] == pytest.approx(1.0)
    assert tab.skipped[0][:2] == ("C1", 2)
    back = FeatureTable.from_frame(tab.to_frame())
    assert np.array_equal(back.hi, tab.hi)
