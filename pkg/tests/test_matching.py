import math

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import logit

from conftest import make_panel
from oracles import logit_2x2
from staggerdid.errors import ConfigError, EstimationError
from staggerdid.matching import (
    MatchSpec,
    control_pool,
    fit_propensity,
    ihs,
    match_scores,
    matched_event_estimates,
    run_matching,
)
from staggerdid.synth import DgpConfig, EffectFamily, simulate_panel


def test_ihs_examples():
    assert ihs(0.0) == 0.0
    assert abs(ihs(1.0) - 0.881374) <= 1e-6
    assert ihs(1.0) == pytest.approx(math.log(1 + math.sqrt(2)), rel=1e-15)


@given(st.floats(-1e6, 1e6))
def test_ihs_odd(x):
    assert ihs(-x) == -ihs(x)


# --------------------------------------------------------------------------
# Propensity model
# --------------------------------------------------------------------------


def test_saturated_binary_logit_matches_hand_counts():
    n11, n10, n01, n00 = 30, 45, 20, 80
    Xt = np.array([[1.0]] * n11 + [[0.0]] * n01)
    Xp = np.array([[1.0]] * n10 + [[0.0]] * n00)
    fit = fit_propensity(Xt, Xp, ["x"])
    a, b = logit_2x2(n11, n10, n01, n00)
    assert fit.converged
    assert fit.coefficients == pytest.approx([a, b], abs=1e-8)


def test_uninformative_covariate_gives_intercept_only_fit():
    # the same covariate distribution in both groups
    x = np.arange(10.0)[:, None]
    Xt, Xp = np.tile(x, (3, 1)), np.tile(x, (7, 1))
    fit = fit_propensity(Xt, Xp, ["x"])
    assert abs(fit.coefficients[1]) < 1e-10
    assert fit.coefficients[0] == pytest.approx(math.log(30 / 70), abs=1e-10)


def test_replicated_data_gives_identical_fit(rng):
    Xt = rng.normal(0.5, 1, (40, 2))
    Xp = rng.normal(0, 1, (90, 2))
    one = fit_propensity(Xt, Xp)
    two = fit_propensity(np.vstack([Xt, Xt]), np.vstack([Xp, Xp]))
    assert two.coefficients == pytest.approx(one.coefficients, rel=1e-9, abs=1e-12)


def test_loglik_path_monotone(rng):
    for _ in range(20):
        # shifts this small keep the groups overlapping
        Xt = rng.normal(rng.uniform(-0.8, 0.8), 1, (int(rng.integers(15, 60)), 3))
        Xp = rng.normal(0, 1, (int(rng.integers(20, 200)), 3))
        fit = fit_propensity(Xt, Xp)
        assert np.all(np.diff(fit.loglik_path) >= 0)
        p = fit.predict(np.vstack([Xt, Xp]))
        assert ((p > 0) & (p < 1)).all()


def test_separation_names_covariate(rng):
    Xt = np.column_stack([rng.normal(size=20), rng.uniform(5, 6, 20)])
    Xp = np.column_stack([rng.normal(size=50), rng.uniform(0, 4, 50)])
    with pytest.raises(EstimationError, match="'wage'"):
        fit_propensity(Xt, Xp, ["age", "wage"])


def test_joint_separation_detected():
    # no single covariate separates, the diagonal direction does
    rng = np.random.default_rng(5)
    Xt = rng.uniform(0, 1, (30, 2))
    Xp = rng.uniform(0, 1, (60, 2))
    Xt = Xt[Xt.sum(1) > 1.1]
    Xp = Xp[Xp.sum(1) < 0.9]
    with pytest.raises(EstimationError, match="separation"):
        fit_propensity(Xt, Xp, ["a", "b"])


def test_empty_groups_rejected():
    with pytest.raises(EstimationError):
        fit_propensity(np.zeros((0, 1)), np.ones((3, 1)))


# --------------------------------------------------------------------------
# Nearest-one matching
# --------------------------------------------------------------------------


def test_nearest_examples():
    pairs, _ = match_scores([0.49], [1], [0.2, 0.5], [10, 11])
    assert pairs["control"].tolist() == [11]
    pairs, _ = match_scores([0.3, 0.7], [1, 2], [0.5], [10])
    assert pairs["control"].tolist() == [10, 10]
    pairs, _ = match_scores([0.5], [1], [0.6, 0.4, 0.6, 0.4], [13, 12, 9, 11])
    assert pairs["control"].tolist() == [9]


def test_without_replacement_and_caliper():
    pairs, dropped = match_scores([0.3, 0.31], [1, 2], [0.3, 0.9], [10, 11],
                                  replacement=False)
    assert pairs["control"].tolist() == [10, 11] and dropped == 0
    pairs, dropped = match_scores([0.3, 0.31], [1, 2], [0.3, 0.9], [10, 11],
                                  replacement=False, caliper=0.1)
    assert pairs["control"].tolist() == [10] and dropped == 1
    with pytest.raises(EstimationError, match="empty control pool"):
        match_scores([0.3], [1], [], [])


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), a=st.integers(1, 1000), b=st.integers(-1000, 1000))
def test_matching_invariant_to_increasing_affine_maps(seed, a, b):
    rng = np.random.default_rng(seed)
    # integer-valued scores keep ties and the affine map exact in floating point
    ts = rng.integers(0, 50, 15).astype(float)
    ps = rng.integers(0, 50, 25).astype(float)
    tid, pid = rng.permutation(15), rng.permutation(np.arange(100, 125))
    base, _ = match_scores(ts, tid, ps, pid)
    moved, _ = match_scores(ts * a + b, tid, ps * a + b, pid)
    assert base["control"].tolist() == moved["control"].tolist()
    brute = []
    for t, i in sorted(zip(ts, tid), key=lambda z: z[1]):
        d = np.abs(ps - t)
        brute.append(min(zip(d, pid))[1])
    assert base["control"].tolist() == brute


def test_nonlinear_monotone_map_can_change_the_match():
    # on the probability scale 0.3 is nearer 0.1, on the logit scale nearer 0.6
    prob, _ = match_scores([0.3], [1], [0.1, 0.6], [10, 11])
    lin, _ = match_scores(logit([0.3]), [1], logit([0.1, 0.6]), [10, 11])
    assert prob["control"].tolist() == [10]
    assert lin["control"].tolist() == [11]


# --------------------------------------------------------------------------
# Outcome differences and the full design
# --------------------------------------------------------------------------


def test_identical_paths_give_zero():
    rows = []
    for p in (1, 2, 3, 4):
        for y in range(2000, 2011):
            rows.append(dict(person=p, year=y, wage=100.0 + 3 * y % 11,
                             business_income=0.0, birth_year=1960,
                             transfer_amount=0.0))
    panel = make_panel(rows)
    pairs = pd.DataFrame({"cohort": [2004, 2005], "treated": [1, 2], "control": [3, 4]})
    est = matched_event_estimates(panel, pairs, window=(-6, 6))
    assert (est["estimate"].dropna() == 0).all()
    row = est.set_index("s").loc[6]
    assert row["n_pairs"] == 1 and row["n_dropped"] == 1


@pytest.fixture(scope="module")
def selection_sim():
    cfg = DgpConfig(years=(1993, 2012), cohorts={g: 80 for g in range(2000, 2005)},
                    never_treated=800, tau=EffectFamily(level=-20),
                    selection_sex=1.5, selection_education=0.4, seed=17)
    return simulate_panel(cfg)


def test_run_matching_design(selection_sim):
    spec = MatchSpec(covariates=("age", "sex", "education_level", "wage@-1"))
    res = run_matching(selection_sim.panel, selection_sim.cohorts, spec)
    assert len(res.pairs) == 400 and res.n_dropped == 0
    assert res.balance["covariate"].tolist() == list(spec.covariates)
    treated = set(res.pairs["treated"])
    assert treated.isdisjoint(set(res.pairs["control"]))
    for fit in res.fits.values():
        assert np.all(np.diff(fit.loglik_path) >= 0)
    sex = res.balance.set_index("covariate").loc["sex"]
    assert abs(sex["std_diff_after"]) < abs(sex["std_diff_before"])
    est = matched_event_estimates(selection_sim.panel, res.pairs, window=(-6, 6))
    assert len(est) == 13


def test_match_spec_validation():
    with pytest.raises(ConfigError):
        MatchSpec(match_offset=0)
    with pytest.raises(ConfigError):
        MatchSpec(pool="everyone")
    with pytest.raises(ConfigError, match="does not fit"):
        MatchSpec(cohort_window=(1994, 2000)).check_panel((1993, 2012))


def test_pool_excludes_recipients_in_clean_window():
    rows = []
    for p in range(1, 5):
        for y in range(2000, 2011):
            amt = 900.0 if (p == 3 and y == 2009) else 0.0
            rows.append(dict(person=p, year=y, wage=float(100 + p * y % 17),
                             business_income=0.0, birth_year=1960 + p,
                             transfer_amount=amt))
    panel = make_panel(rows)
    spec = MatchSpec(cohort_window=(2004, 2005), clean_before=2, clean_after=4)
    assert control_pool(panel, spec).tolist() == [0, 1, 3]
    spec = MatchSpec(cohort_window=(2004, 2005), clean_before=2, clean_after=3)
    assert control_pool(panel, spec).tolist() == [0, 1, 2, 3]
