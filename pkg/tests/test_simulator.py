import math
from collections import defaultdict

import numpy as np
import pytest
from scipy import stats

from msmsfit.ingest import build_spells, check_censoring_rules, write_spell_csv
from msmsfit.model import ParamLayout, ParamVector, PiecewiseBaseline, State
from msmsfit.rng import keyed_rng
from msmsfit.simulator import (
    DEFAULT_SHARE_TARGETS,
    ScenarioSpec,
    analytic_shares,
    calibrate,
    competing_probabilities,
    sample_latent,
    sample_spell,
    simulate_population,
)

from oracles import toy_scenario


def flat_params(rates=(0.2, 0.05, 0.01, 0.004)):
    grids = {1: [1, math.inf], 2: [1, math.inf], 3: [1, 30], 4: [1, 365]}
    lay = ParamLayout(grids, {r: [] for r in grids}, frailty=False)
    return ParamVector(lay, np.log(rates))


def test_constant_hazard_mean():
    rng = np.random.default_rng(0)
    t = sample_latent([1.0, math.inf], [0.25], np.ones(200_000), 1.0 - rng.random(200_000))
    se = 4.0 / math.sqrt(len(t))
    assert abs((t - 1.0).mean() - 4.0) < 4 * se


def test_inversion_identity():
    rng = np.random.default_rng(1)
    base = PiecewiseBaseline([1, 3, 8, 20, math.inf], [0.1, 0.4, 0.05, 0.2])
    u = 1.0 - rng.random(1000)
    k = np.exp(rng.normal(0, 1, 1000))
    t = sample_latent(base.breakpoints, base.steps, k, u)
    np.testing.assert_allclose(k * base.cumulative(t), -np.log(u), rtol=1e-12, atol=1e-12)


def test_latent_durations_follow_their_distribution():
    rng = np.random.default_rng(2)
    for _ in range(20):
        n_int = int(rng.integers(1, 6))
        b = np.concatenate([[1.0], 1.0 + np.cumsum(rng.uniform(0.5, 20, n_int - 1)), [math.inf]])
        base = PiecewiseBaseline(b, rng.uniform(0.01, 0.5, n_int))
        t = sample_latent(base.breakpoints, base.steps, np.ones(4000), 1.0 - rng.random(4000))
        p = stats.kstest(t, lambda x: 1.0 - np.exp(-base.cumulative(np.maximum(x, 0.0)))).pvalue
        assert p > 1e-3


def test_competing_shares_match_closed_form():
    params = flat_params()
    rng = np.random.default_rng(3)
    x = {r: np.zeros(0) for r in (1, 2, 3, 4)}
    for origin in (State.HOSPITAL, State.HOME):
        expect = competing_probabilities(params, origin, x)
        assert sum(expect.values()) == pytest.approx(1.0, abs=1e-12)
        draws = [sample_spell(origin, params, x, (0.0, 0.0), rng)[1] for _ in range(20_000)]
        for r, p in expect.items():
            share = np.mean([d == r for d in draws])
            assert abs(share - p) < 4 * math.sqrt(p * (1 - p) / len(draws)) + 1e-9


def test_home_spells_respect_horizons():
    params = flat_params()
    rng = np.random.default_rng(4)
    x = {r: np.zeros(0) for r in (1, 2, 3, 4)}
    for _ in range(2000):
        t, r = sample_spell(State.HOME, params, x, (0.0, 0.0), rng)
        assert 1.0 <= t <= 365.0
        if r == 3:
            assert t <= 30.0
        if r == 0:
            assert t == 365.0


@pytest.fixture(scope="module")
def small():
    scn = toy_scenario(n=3000, seed=5)
    return simulate_population(scn)


def test_simulation_is_deterministic(small):
    again = simulate_population(small.scenario)
    assert list(map(repr, again.spells)) == list(map(repr, small.spells))
    assert list(map(repr, again.events)) == list(map(repr, small.events))


def test_patient_trajectory_does_not_depend_on_population_size(small):
    fewer = simulate_population(toy_scenario(n=50, seed=5))
    first = {s.patient_id for s in fewer.spells}
    mine = [s for s in small.spells if s.patient_id in first]
    assert list(map(repr, mine)) == list(map(repr, fewer.spells))


def test_events_reproduce_spells_exactly(small, tmp_path):
    rules = small.scenario.ingest_rules()
    spells, exclusions = build_spells(small.events, rules)
    assert exclusions == []
    check_censoring_rules(spells, rules)
    write_spell_csv(spells, tmp_path / "a.csv")
    write_spell_csv(small.spells, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_hospital_stay_and_home_outcome_are_independent_without_frailty():
    # each spell must use fresh uniforms, also when a patient changes state
    scn = ScenarioSpec(n_patients=20_000, seed=6, other_admission_rate=0.0)
    sim = simulate_population(scn)
    by = defaultdict(list)
    for s in sim.spells:
        by[s.patient_id].append(s)
    los, home = [], []
    for sp in by.values():
        if sp[0].transition == 1 and len(sp) > 1:
            los.append(sp[0].duration)
            home.append(sp[1].transition)
    los, home = np.array(los), np.array(home)
    short = los < np.median(los)
    table = [[np.sum(short & (home == r)), np.sum(~short & (home == r))] for r in (0, 3, 4)]
    assert stats.chi2_contingency(table).pvalue > 1e-3


def test_calibration_hits_analytic_targets():
    scn = calibrate(toy_scenario(n=10, seed=7, loadings=None), n_sample=5000)
    shares = analytic_shares(scn, n_sample=5000)
    for k, v in DEFAULT_SHARE_TARGETS.items():
        assert shares[k] == pytest.approx(v, rel=1e-6)


def test_truth_record(small):
    t = small.truth
    assert t["covariate_clock"] == "entry"
    assert t["rng"]["generator"].startswith("numpy.PCG64")
    lay = ParamLayout.from_json(t["layout"])
    assert lay.keys == small.scenario.layout().keys


def test_scenario_json_roundtrip_and_unknown_keys():
    scn = toy_scenario(n=10, seed=1)
    again = ScenarioSpec.from_json(scn.to_json())
    np.testing.assert_array_equal(again.true_params().values, scn.true_params().values)
    with pytest.raises(ValueError, match="unknown"):
        ScenarioSpec.from_json({**scn.to_json(), "colour": 1})
    with pytest.raises(ValueError, match="unknown"):
        ScenarioSpec.from_json({"population": {"height": 2}})


def test_keyed_streams_are_independent_of_order():
    a = keyed_rng(1, "patient", "P1").random(3)
    keyed_rng(1, "patient", "P2").random(5)
    np.testing.assert_array_equal(a, keyed_rng(1, "patient", "P1").random(3))
    assert not np.array_equal(a, keyed_rng(1, "frailty", "P1").random(3))
