import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from staggerdid.aggregate import (
    AggregationScheme,
    aggregate,
    aggregate_balanced,
    aggregate_unbalanced,
    balanced_cohort_set,
    event_time_weights,
    to_relative_time,
)
from staggerdid.did import CellEstimate, CellIndex, TreatmentSpec, estimate_all_cells
from staggerdid.errors import ConfigError, InputError
from staggerdid.synth import DgpConfig, EffectFamily, simulate_panel


def _cell(g, t, beta=1.0):
    return CellEstimate(CellIndex(g, t), beta, 1.0, 0.3, 10, 10)


@pytest.fixture(scope="module")
def baseline_grid(small_sim):
    return estimate_all_cells(small_sim.panel, small_sim.cohorts, TreatmentSpec())


def test_relative_time_labels():
    rel = to_relative_time([_cell(2000, 2005), _cell(2001, 1999)])
    assert set(rel) == {(2000, 5), (2001, -2)}
    with pytest.raises(InputError, match="g=2000, t=2005"):
        to_relative_time([_cell(2000, 2005), _cell(2000, 2005, 3.0)])


def test_baseline_grid_support(baseline_grid):
    rel = to_relative_time(baseline_grid.estimates)
    s = sorted({k[1] for k in rel})
    assert (s[0], s[-1]) == (-21, 18)
    assert -3 not in s
    assert (2000, -3) not in rel


def test_two_cohort_weighting_example():
    curve = aggregate_unbalanced({(1, 2): -10.0, (2, 2): -20.0}, {1: 100, 2: 300},
                                 display_range=(-3, 3))
    row = curve.row(2)
    assert row["estimate"] == pytest.approx(-17.5, abs=1e-12)
    assert row["n_cohorts"] == 2 and row["n_persons"] == 400
    assert curve.row(1)["supported"] == False  # noqa: E712
    assert np.isnan(curve.row(1)["estimate"])


def test_single_cohort_and_reference_row():
    curve = aggregate_unbalanced({(5, 0): 3.25}, {5: 17}, display_range=(-4, 2))
    assert curve.row(0)["estimate"] == 3.25
    ref = curve.row(-3)
    assert (ref["estimate"], ref["ci_low"], ref["ci_high"]) == (0.0, 0.0, 0.0)


def _random_cells(rng, n_cohorts=6, span=(-8, 8)):
    cells, sizes = {}, {}
    for g in range(n_cohorts):
        sizes[g] = int(rng.integers(1, 500))
        for s in range(*span):
            if s != -3 and rng.random() < 0.7:
                cells[(g, s)] = float(rng.normal(0, 10))
    return cells, sizes


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), c=st.floats(-100, 100))
def test_weights_normalized_constant_and_linear(seed, c):
    rng = np.random.default_rng(seed)
    cells, sizes = _random_cells(rng)
    scheme = AggregationScheme(display_range=(-8, 7))
    weights = event_time_weights({k: True for k in cells}, sizes, scheme)
    for w in weights.values():
        assert abs(sum(w.values()) - 1.0) <= 1e-12
    base = aggregate(cells, sizes, scheme).estimates()
    scaled = aggregate({k: c * v for k, v in cells.items()}, sizes, scheme).estimates()
    flat = aggregate({k: c for k in cells}, sizes, scheme).estimates()
    for s, v in base.items():
        assert scaled[s] == pytest.approx(c * v, rel=1e-9, abs=1e-9)
        if s != -3:
            assert flat[s] == pytest.approx(c, rel=1e-12, abs=1e-12)


@pytest.mark.parametrize("a,b,expected", [
    (-10, 10, [2003, 2004]),
    (-5, 10, list(range(1998, 2005))),
    (-3, 15, list(range(1996, 2000))),
])
def test_balanced_sets_on_baseline_shape(baseline_grid, a, b, expected):
    assert balanced_cohort_set(baseline_grid.estimable(), a, b) == expected


def test_balanced_set_errors(baseline_grid):
    with pytest.raises(ConfigError, match=r"\[-21, 18\]"):
        balanced_cohort_set(baseline_grid.estimable(), -21, 18)
    with pytest.raises(ConfigError):
        balanced_cohort_set({}, 2, 1)
    with pytest.raises(ConfigError):
        AggregationScheme("balanced", a=1, b=4)


def test_balanced_cohort_set_constant_across_horizon(baseline_grid):
    by = {(e.cell.g, e.cell.s): e for e in baseline_grid.estimates}
    curve = aggregate_balanced(by, baseline_grid.cohort_sizes, -5, 10,
                               estimable=baseline_grid.estimable())
    sets = {curve.cohort_sets[s] for s in range(-5, 11)}
    assert sets == {tuple(range(1998, 2005))}
    assert curve.fixed_cohorts() == list(range(1998, 2005))


def test_balanced_equals_unbalanced_on_full_support():
    rng = np.random.default_rng(1)
    cells = {(g, s): float(rng.normal()) for g in (1, 2, 3) for s in range(-4, 5) if s != -3}
    sizes = {1: 10, 2: 20, 3: 70}
    bal = aggregate_balanced(cells, sizes, -4, 4).estimates()
    unb = aggregate_unbalanced(cells, sizes, (-4, 4)).estimates()
    assert bal == pytest.approx(unb, rel=1e-14)


def test_three_cohort_toy_missing_last_lag():
    cells = {}
    beta = {1: -5.0, 2: -10.0, 3: -30.0}
    for g in (1, 2, 3):
        for s in range(-2, 4):
            if not (g == 3 and s == 3):
                cells[(g, s)] = beta[g] - s
    sizes = {1: 100, 2: 100, 3: 200}
    bal = aggregate_balanced(cells, sizes, -2, 3).estimates()
    unb = aggregate_unbalanced(cells, sizes, (-2, 3)).estimates()
    # cohort 3 leaves the balanced set entirely
    for s in (-2, -1, 0, 1, 2, 3):
        assert bal[s] == pytest.approx(-7.5 - s)
    assert unb[0] == pytest.approx((100 * -5 + 100 * -10 + 200 * -30) / 400)
    assert unb[3] == pytest.approx(-7.5 - 3)


def test_homogeneous_noiseless_effect_schemes_agree():
    cfg = DgpConfig(years=(1993, 2017), cohorts={g: 8 for g in range(1996, 2018)},
                    tau=EffectFamily(level=-20), noise_sd=0.0, person_sd=0.0,
                    sex_effect=0.0, education_effect=0.0, seed=5)
    sim = simulate_panel(cfg)
    grid = estimate_all_cells(sim.panel, sim.cohorts, TreatmentSpec())
    by = {(e.cell.g, e.cell.s): e for e in grid.estimates}
    bal = aggregate_balanced(by, grid.cohort_sizes, -10, 10).estimates()
    unb = aggregate_unbalanced(by, grid.cohort_sizes, (-10, 10)).estimates()
    for s in range(-10, 11):
        expected = -20.0 if s >= 0 else 0.0
        assert bal[s] == pytest.approx(expected, abs=1e-8)
        assert unb[s] == pytest.approx(bal[s], abs=1e-8)


def test_display_range_checked_against_span():
    scheme = AggregationScheme(display_range=(-30, 5))
    with pytest.raises(ConfigError, match="exceeds"):
        scheme.check_display((1993, 2017))
    AggregationScheme().check_display((1993, 2017))
