import math

import numpy as np
import pytest
from scipy import integrate

from msmsfit.att import (
    ATT_COLUMNS,
    att_duration,
    density,
    expected_duration,
    krinsky_robb_sd,
    mean_duration,
    psd_factor,
    write_att_csv,
)
from msmsfit.design import build_design
from msmsfit.model import ParamLayout, ParamVector, PiecewiseBaseline, hazard
from msmsfit.simulator import direct_att_contrast, simulate_population

from oracles import toy_scenario, toy_spec


def random_baseline(rng, horizon=False):
    n = int(rng.integers(1, 7))
    b = np.concatenate([[1.0], 1.0 + np.cumsum(rng.uniform(0.5, 40.0, n))])
    if not horizon:
        b[-1] = math.inf
    return PiecewiseBaseline(b, rng.uniform(0.005, 0.5, n))


def quad_mean(base, k, horizon=None):
    """Integral of the survival function by adaptive quadrature."""
    b = base.breakpoints
    end = horizon if horizon is not None else (b[-1] if np.isfinite(b[-1]) else math.inf)
    pts = [x for x in b if np.isfinite(x) and x < end]
    total = 1.0  # no hazard before the grid start
    for lo, hi in zip(pts, pts[1:] + [end]):
        f = lambda t: math.exp(-k * float(base.cumulative(t)))  # noqa: E731
        val, _ = integrate.quad(f, lo, hi, epsabs=0, epsrel=1e-12, limit=200)
        total += val
    return total


def test_mean_duration_matches_quadrature():
    rng = np.random.default_rng(0)
    for _ in range(30):
        base = random_baseline(rng)
        k = float(np.exp(rng.normal()))
        assert mean_duration(base, np.array([k]))[0] == pytest.approx(quad_mean(base, k), rel=1e-8)


def test_restricted_mean_matches_quadrature():
    rng = np.random.default_rng(1)
    for _ in range(30):
        base = random_baseline(rng, horizon=True)
        k = float(np.exp(rng.normal()))
        h = float(base.breakpoints[-1])
        assert mean_duration(base, np.array([k]), h)[0] == pytest.approx(quad_mean(base, k, h), rel=1e-8)
        cut = float(rng.uniform(1.5, h))
        assert mean_duration(base, np.array([k]), cut)[0] == pytest.approx(quad_mean(base, k, cut), rel=1e-8)


def test_constant_rate_closed_form():
    base = PiecewiseBaseline([1, math.inf], [0.2])
    assert mean_duration(base, np.array([1.0]))[0] == pytest.approx(1.0 + 5.0, rel=1e-15)
    assert mean_duration(base, np.array([1.0]), 11.0)[0] == pytest.approx(1.0 + 5.0 * (1 - math.exp(-2.0)),
                                                                          rel=1e-14)


def test_density_integrates_to_one():
    rng = np.random.default_rng(2)
    for _ in range(5):
        base = random_baseline(rng)
        b = [x for x in base.breakpoints if np.isfinite(x)]
        total = 0.0
        for lo, hi in zip(b, b[1:] + [math.inf]):
            total += integrate.quad(lambda t: float(density(base, 1.3, t)), lo, hi, limit=200)[0]
        assert total == pytest.approx(1.0, abs=1e-8)


def test_mean_decreases_with_rate():
    rng = np.random.default_rng(3)
    base = random_baseline(rng)
    k = np.sort(np.exp(rng.normal(size=50)))
    m = mean_duration(base, k)
    assert np.all(np.diff(m) < 0)


def test_unbounded_zero_hazard_is_rejected():
    base = PiecewiseBaseline([1, math.inf], [0.2])
    with pytest.raises(FloatingPointError):
        mean_duration(base, np.array([0.0]))


def one_transition_params(theta=0.3, loading=0.5):
    grids = {1: [1, 4, math.inf], 2: [1, math.inf], 3: [1, 30], 4: [1, 365]}
    lay = ParamLayout(grids, {r: ["mc", "x"] for r in grids}, frailty=True)
    pv = ParamVector.from_dict(lay, {}, default=0.0)
    for r in grids:
        pv.values[lay.alpha_slice(r)] = -3.0
        pv.values[lay.index(r, "beta", "mc")] = theta
        pv.values[lay.index(r, "beta", "x")] = 0.2
        pv.values[lay.loading_index(r)] = loading
    return pv


def test_log_hazard_difference_is_theta():
    rng = np.random.default_rng(4)
    pv = one_transition_params(theta=-0.37)
    for _ in range(100):
        r = int(rng.integers(1, 5))
        x = rng.normal(size=2)
        eps = rng.normal(size=2)
        t = float(rng.uniform(1.0, 30.0))
        h1 = hazard(pv, r, t, np.array([1.0, x[1]]), eps)
        h0 = hazard(pv, r, t, np.array([0.0, x[1]]), eps)
        assert abs((math.log(h1) - math.log(h0)) - (-0.37)) <= 1e-12


def test_expected_duration_zero_effect_is_exactly_zero():
    pv = one_transition_params(theta=0.0)
    z = np.linspace(-1, 1, 7)
    eps = np.random.default_rng(5).standard_normal((20, 2))
    assert expected_duration(pv, 1, z, eps, 1) - expected_duration(pv, 1, z, eps, 0) == 0.0


def test_krinsky_robb_zero_and_linear():
    pv = one_transition_params()
    n = len(pv.values)
    assert krinsky_robb_sd(pv, np.zeros((n, n)), lambda p: p["1:mc"], 10, 0) == 0.0
    rng = np.random.default_rng(6)
    A = rng.normal(size=(n, n)) * 0.1
    cov = A @ A.T
    a = rng.normal(size=n)
    sd = krinsky_robb_sd(pv, cov, lambda p: float(a @ p.values), 20_000, 1)
    assert sd == pytest.approx(math.sqrt(a @ cov @ a), rel=0.03)


def test_psd_factor():
    rng = np.random.default_rng(7)
    A = rng.normal(size=(5, 3))
    cov = A @ A.T  # rank deficient
    F = psd_factor(cov)
    np.testing.assert_allclose(F @ F.T, cov, atol=1e-12)
    with pytest.raises(np.linalg.LinAlgError):
        psd_factor(-np.eye(3))


@pytest.fixture(scope="module")
def sim_design():
    scn = toy_scenario(n=4000, seed=31)
    sim = simulate_population(scn)
    d = build_design(sim.spells, toy_spec())
    truth = scn.true_params()
    pv = ParamVector.from_dict(d.layout, truth.to_dict())
    return scn, d, pv


def test_att_zero_when_treatment_effect_is_zero(sim_design):
    _, d, pv = sim_design
    pv = ParamVector(pv.layout, pv.values.copy())
    pv.values[d.layout.index(2, "beta", "mc")] = 0.0
    res = att_duration(pv, d, 2, eps_draws=20, seed=1)[0]
    assert res.estimate == 0.0
    assert res.hazard_att == 0.0


def test_att_matches_direct_simulation(sim_design):
    _, d, pv = sim_design
    res = att_duration(pv, d, 1, eps_draws=400, seed=2, max_rows=300)[0]
    from msmsfit.att import treated_rows

    tr = treated_rows(d, 1, max_rows=300, seed=2)[0]
    z, tau = tr.split(pv, d.X[1])
    diff, se = direct_att_contrast(pv, 1, z, tau, reps=400, seed=3)
    assert abs(res.estimate - diff) < 3 * se
    assert res.estimate > 0  # a lower discharge hazard lengthens stays


def test_att_by_specialty_and_csv(sim_design, tmp_path):
    _, d0, pv0 = sim_design
    spec = toy_spec(n_specialties=3)
    d = build_design(d0.frame.spells, spec)
    pv = ParamVector.from_dict(d.layout, pv0.to_dict(), default=0.0)
    out = att_duration(pv, d, 3, group="specialty", eps_draws=10, seed=1)
    assert {r.group for r in out} <= {"S01", "S02", "S03", "other"} | set(d.evaluator().spec_cat.tolist())
    write_att_csv(out, tmp_path / "att.csv")
    lines = (tmp_path / "att.csv").read_text().splitlines()
    assert lines[0] == ",".join(ATT_COLUMNS)
    assert len(lines) == len(out) + 1
    assert ",NA," in lines[1]
