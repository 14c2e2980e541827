"""Synthetic patient trajectories from a fully specified hazard model.

Each patient draws from its own keyed stream, so a dataset depends only on
the scenario and its seed.  Spells are generated with covariates evaluated at
spell entry; fit them with ``covariate_clock="entry"`` for an exactly
specified model.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import optimize, special, stats

from .design import ColumnEvaluator, ModelSpec, SpellFrame
from .ingest import (
    DEATH_WINDOW,
    DAYS_PER_YEAR,
    IngestRules,
    RawEvent,
    SpellRecord,
    date_to_day,
)
from .model import (
    DEFAULT_BREAKPOINTS,
    TRANSITIONS,
    ParamLayout,
    ParamVector,
    State,
    transitions_from,
)
from .rng import generator_info, keyed_rng

# event days are multiples of 2**-16 so that entry + duration - entry is exact
DAY_RESOLUTION = 2.0**16

DEFAULT_SHARE_TARGETS = {"hospital_death": 0.025, "readmission": 0.020, "home_death": 0.031}

DEFAULT_ALPHA = {
    1: [0.10, 0.16, 0.18, 0.17, 0.16, 0.15, 0.14, 0.13, 0.12],
    2: [0.0020, 0.0030, 0.0028, 0.0024, 0.0020, 0.0015],
    3: [0.0016, 0.0012, 0.0009, 0.0008, 0.0007, 0.0006, 0.0005, 0.0005, 0.0004],
    4: [0.00040, 0.00025, 0.00015, 0.00012, 0.00010, 0.00009, 0.00008, 0.00007, 0.00006],
}


def _reject_unknown(d: Mapping, cls) -> None:
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")


@dataclass
class Population:
    female_share: float = 0.57
    age_mean: float = 49.3
    age_sd: float = 22.0
    age_min: float = 18.0
    age_max: float = 100.0
    cci_mean: float = 1.12
    cci_max: int = 12
    n_hospitals: int = 20
    hospital_zipf: float = 1.0
    n_specialties: int = 12
    n_regions: int = 19
    n_drgs: int = 40
    dept_size_median: float = 15.0
    dept_size_sigma: float = 0.5


@dataclass
class Adoption:
    treated_share: float = 0.4
    first: str = "1999-10-01"
    spread_years: float = 6.0


@dataclass
class ScenarioSpec:
    """Population, adoption schedule, window and true parameters.

    ``beta`` maps each transition to ``{column name: coefficient}`` using the
    column names of :mod:`msmsfit.design`.  ``loadings`` holds the free
    loadings (phi for 1, 2 and psi for 3, 4); ``None`` means no frailty.
    """

    n_patients: int = 10000
    seed: int = 0
    start: str = "1996-01-01"
    end: str = "2006-12-31"
    population: Population = field(default_factory=Population)
    adoption: Adoption = field(default_factory=Adoption)
    other_admission_rate: float = 0.0005
    grids: dict | None = None
    alpha: dict = field(default_factory=lambda: {r: list(a) for r, a in DEFAULT_ALPHA.items()})
    beta: dict = field(default_factory=lambda: {r: {} for r in TRANSITIONS})
    loadings: dict | None = None

    def __post_init__(self):
        self.alpha = {int(r): [float(v) for v in a] for r, a in self.alpha.items()}
        self.beta = {int(r): {str(k): float(v) for k, v in b.items()} for r, b in self.beta.items()}
        for r in TRANSITIONS:
            self.beta.setdefault(r, {})
        if self.loadings is not None:
            self.loadings = {int(r): float(v) for r, v in self.loadings.items()}
        if self.grids is not None:
            self.grids = {int(r): list(b) for r, b in self.grids.items()}
        bps = self.breakpoints()
        for r in TRANSITIONS:
            a = np.asarray(self.alpha.get(r, []))
            if len(a) != len(bps[r]) - 1:
                raise ValueError(f"transition {r}: need {len(bps[r]) - 1} baseline steps, got {len(a)}")
            if np.any(~(a > 0)):
                raise ValueError(f"transition {r}: baseline steps must be positive")
        if date_to_day(self.adoption.first) > self.end_day:
            raise ValueError("adoption dates must fall inside the window")
        if self.n_patients < 1:
            raise ValueError("n_patients must be positive")

    @property
    def start_day(self) -> float:
        return date_to_day(self.start)

    @property
    def end_day(self) -> float:
        return date_to_day(self.end)

    @property
    def frailty(self) -> bool:
        return self.loadings is not None

    def breakpoints(self) -> dict[int, np.ndarray]:
        out = {r: np.asarray(b, dtype=float) for r, b in DEFAULT_BREAKPOINTS.items()}
        for r, b in (self.grids or {}).items():
            out[int(r)] = np.array([math.inf if x is None else float(x) for x in b])
        return out

    def layout(self) -> ParamLayout:
        return ParamLayout(
            self.breakpoints(), {r: list(self.beta[r]) for r in TRANSITIONS}, frailty=self.frailty
        )

    def true_params(self) -> ParamVector:
        lay = self.layout()
        d = {}
        for r in TRANSITIONS:
            row = {f"log_alpha_{k + 1}": math.log(a) for k, a in enumerate(self.alpha[r])}
            row.update(self.beta[r])
            if self.frailty:
                row[lay.entries[lay.loading_index(r)].name] = self.loadings.get(r, 0.0)
            d[str(r)] = row
        return ParamVector.from_dict(lay, d)

    def ingest_rules(self) -> IngestRules:
        return IngestRules(start_day=self.start_day, end_day=self.end_day)

    def to_json(self) -> dict:
        d = dataclasses.asdict(self)
        d["alpha"] = {str(r): a for r, a in self.alpha.items()}
        d["beta"] = {str(r): b for r, b in self.beta.items()}
        if self.loadings is not None:
            d["loadings"] = {str(r): v for r, v in self.loadings.items()}
        if self.grids is not None:
            d["grids"] = {str(r): b for r, b in self.grids.items()}
        return d

    @classmethod
    def from_json(cls, d: Mapping) -> "ScenarioSpec":
        _reject_unknown(d, cls)
        d = dict(d)
        if "population" in d:
            _reject_unknown(d["population"], Population)
            d["population"] = Population(**d["population"])
        if "adoption" in d:
            _reject_unknown(d["adoption"], Adoption)
            d["adoption"] = Adoption(**d["adoption"])
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ScenarioSpec":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


# ---------------------------------------------------------------------------
# competing risks with step hazards


@dataclass
class _Competing:
    """Several step-hazard risks merged on one grid.

    ``rates[c, j]`` is the baseline of risk ``c`` on union interval ``j``.
    """

    edges: np.ndarray  # union breakpoints, last may be inf
    rates: np.ndarray  # (C, J)

    @classmethod
    def build(cls, components: Sequence[tuple[np.ndarray, np.ndarray]], horizon: float | None):
        pts = sorted({float(x) for b, _ in components for x in b if np.isfinite(x)})
        if horizon is not None:
            pts = [p for p in pts if p < horizon] + [horizon]
        else:
            pts = pts + [math.inf]
        edges = np.array(pts)
        mids = np.where(np.isfinite(edges[1:]), 0.5 * (edges[:-1] + edges[1:]), edges[:-1] + 1.0)
        rates = np.zeros((len(components), len(mids)))
        for c, (b, a) in enumerate(components):
            b = np.asarray(b, float)
            k = np.searchsorted(b, mids, side="right") - 1
            inside = (k >= 0) & (k < len(a))
            rates[c, inside] = np.asarray(a, float)[k[inside]]
        return cls(edges, rates)

    def total(self, mult: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Per-row total rate ``(n, J)`` and cumulative hazard at the edges ``(n, J+1)``."""
        R = mult @ self.rates
        lengths = np.diff(self.edges)
        with np.errstate(invalid="ignore"):
            seg = np.where(R > 0, R * lengths, 0.0)
        H = np.concatenate([np.zeros((len(R), 1)), np.cumsum(seg, axis=1)], axis=1)
        return R, H

    def sample(self, mult: np.ndarray, u: np.ndarray, v: np.ndarray):
        """Inverse-transform draw of duration and cause.

        Returns ``(t, cause)`` with ``cause == -1`` when no risk fires before
        the last edge (then ``t`` is that edge).
        """
        mult = np.atleast_2d(mult)
        n = len(mult)
        R, H = self.total(mult)
        E = -np.log(u)
        j = np.sum(H[:, 1:] <= E[:, None], axis=1)  # first interval whose end exceeds E
        J = R.shape[1]
        cens = j >= J
        t = np.full(n, self.edges[-1])
        cause = np.full(n, -1)
        rows = np.flatnonzero(~cens)
        if len(rows):
            jj = j[rows]
            t[rows] = self.edges[jj] + (E[rows] - H[rows, jj]) / R[rows, jj]
            comp = mult[rows] * self.rates[:, jj].T  # (n, C)
            cum = np.cumsum(comp, axis=1)
            pick = np.sum(cum < (v[rows] * cum[:, -1])[:, None], axis=1)
            cause[rows] = np.minimum(pick, comp.shape[1] - 1)
        return t, cause

    def probabilities(self, mult: np.ndarray, upto: np.ndarray | None = None):
        """Cumulative incidence of each cause and survival at the end.

        The end is the last edge, or per row ``min(upto, last edge)``.
        """
        mult = np.atleast_2d(mult)
        R, H = self.total(mult)
        if upto is not None:
            lo = self.edges[:-1]
            span = np.clip(np.minimum(np.asarray(upto, float)[:, None], self.edges[1:]) - lo, 0.0, None)
            with np.errstate(invalid="ignore"):
                seg = np.where(R > 0, R * span, 0.0)
            H = np.concatenate([np.zeros((len(R), 1)), np.cumsum(seg, axis=1)], axis=1)
        S = np.exp(-H)
        drop = S[:, :-1] - S[:, 1:]
        with np.errstate(invalid="ignore", divide="ignore"):
            share = np.where(R > 0, drop / R, 0.0)
        P = np.einsum("nj,cj,nc->nc", share, self.rates, mult)
        return P, S[:, -1]


def _components(params: ParamVector, origin) -> list[tuple[np.ndarray, np.ndarray]]:
    return [(params.layout.breakpoints[r], params.alpha(r)) for r in transitions_from(origin)]


def origin_horizon(params: ParamVector, origin) -> float | None:
    """Largest finite grid end among the risks leaving ``origin`` (None if any is unbounded)."""
    ends = [params.layout.breakpoints[r][-1] for r in transitions_from(origin)]
    return None if any(math.isinf(e) for e in ends) else float(max(ends))


def sample_spell(origin, params: ParamVector, x: Mapping[int, np.ndarray], eps, rng: np.random.Generator):
    """Draw one spell duration and outcome from ``origin``.

    Returns ``(duration, transition)`` with transition 0 for a spell censored
    at the horizon of its state.
    """
    trans = transitions_from(origin)
    comp = _Competing.build(_components(params, origin), origin_horizon(params, origin))
    mult = np.array([[_multiplier(params, r, x[r], eps) for r in trans]])
    u, v = rng.random(2)
    t, c = comp.sample(mult, np.array([u]), np.array([v]))
    return float(t[0]), (trans[c[0]] if c[0] >= 0 else 0)


def _multiplier(params: ParamVector, r: int, x, eps) -> float:
    psi, phi = params.loadings(r)
    return math.exp(float(np.asarray(x, float) @ params.beta(r)) + psi * eps[0] + phi * eps[1])


def competing_probabilities(params: ParamVector, origin, x: Mapping[int, np.ndarray],
                            eps=(0.0, 0.0)) -> dict:
    """Analytic probability of each exit from ``origin`` (and of reaching its horizon)."""
    trans = transitions_from(origin)
    comp = _Competing.build(_components(params, origin), origin_horizon(params, origin))
    mult = np.array([[_multiplier(params, r, x[r], eps) for r in trans]])
    P, S = comp.probabilities(mult)
    out = {r: float(P[0, i]) for i, r in enumerate(trans)}
    out[0] = float(S[0])
    return out


def sample_latent(baseline_breakpoints, alpha, mult: np.ndarray, u: np.ndarray, horizon=None):
    """Single-risk latent durations, cut at ``horizon`` (or the grid end)."""
    b = np.asarray(baseline_breakpoints, float)
    if horizon is None and np.isfinite(b[-1]):
        horizon = float(b[-1])
    comp = _Competing.build([(b, alpha)], horizon)
    t, _ = comp.sample(np.asarray(mult, float)[:, None], u, np.zeros(len(u)))
    return t


# ---------------------------------------------------------------------------
# population


@dataclass
class Departments:
    ids: list[str]
    hospital: list[str]
    specialty: list[str]
    region: list[str]
    size: np.ndarray
    adoption_day: np.ndarray  # nan for never-adopters
    weight: np.ndarray

    def to_rows(self) -> list[dict]:
        return [
            {"department": d, "hospital": h, "specialty": s, "region": g, "dept_size": float(z),
             "mc_adoption_day": None if math.isnan(a) else float(a)}
            for d, h, s, g, z, a in zip(self.ids, self.hospital, self.specialty, self.region,
                                        self.size, self.adoption_day)
        ]


def make_departments(scn: ScenarioSpec) -> Departments:
    pop, adp = scn.population, scn.adoption
    g = keyed_rng(scn.seed, "departments")
    hw = 1.0 / np.arange(1, pop.n_hospitals + 1) ** pop.hospital_zipf
    hw /= hw.sum()
    sw = g.dirichlet(np.full(pop.n_specialties, 4.0))
    regions = g.integers(0, pop.n_regions, pop.n_hospitals)
    first = date_to_day(adp.first)
    last = min(scn.end_day, first + adp.spread_years * DAYS_PER_YEAR)
    ids, hosp, spec, reg, size, adopt, w = [], [], [], [], [], [], []
    for h in range(pop.n_hospitals):
        for s in range(pop.n_specialties):
            ids.append(f"H{h + 1:03d}S{s + 1:02d}")
            hosp.append(f"H{h + 1:03d}")
            spec.append(f"S{s + 1:02d}")
            reg.append(f"R{regions[h] + 1:02d}")
            size.append(round(pop.dept_size_median * math.exp(pop.dept_size_sigma * g.standard_normal())))
            treated = g.random() < adp.treated_share
            day = math.floor(first + g.random() * (last - first))
            adopt.append(float(day) if treated else math.nan)
            w.append(hw[h] * sw[s])
    return Departments(ids, hosp, spec, reg, np.array(size, float), np.array(adopt), np.array(w))


def _quantize(t: np.ndarray) -> np.ndarray:
    return np.maximum(1.0, np.floor(t * DAY_RESOLUTION) / DAY_RESOLUTION)


@dataclass
class _Patients:
    ids: list[str]
    gens: list[np.random.Generator]
    female: np.ndarray
    birth: np.ndarray
    cci: np.ndarray
    eps: np.ndarray
    first_day: np.ndarray
    dept: np.ndarray
    drg: np.ndarray


def _patient_ids(n: int) -> list[str]:
    width = max(6, len(str(n)))
    return [f"P{i:0{width}d}" for i in range(n)]


def _draw_patients(scn: ScenarioSpec, deps: Departments, ids: list[str], stream: str) -> _Patients:
    pop = scn.population
    gens = [keyed_rng(scn.seed, stream, pid) for pid in ids]
    U = np.array([g.random(6) for g in gens]).reshape(len(ids), 6)
    eps = np.array([g.standard_normal(2) for g in gens]).reshape(len(ids), 2)
    female = (U[:, 0] < pop.female_share).astype(int)
    age = np.clip(pop.age_mean + pop.age_sd * special.ndtri(U[:, 1]), pop.age_min, pop.age_max)
    cci = np.minimum(stats.poisson.ppf(U[:, 2], pop.cci_mean), pop.cci_max)
    first = scn.start_day + np.floor(U[:, 3] * (scn.end_day - scn.start_day) * DAY_RESOLUTION) / DAY_RESOLUTION
    cw = np.cumsum(deps.weight) / deps.weight.sum()
    dept = np.minimum(np.searchsorted(cw, U[:, 4], side="right"), len(cw) - 1)
    drg = np.floor(U[:, 5] * pop.n_drgs).astype(int)
    birth = np.floor(first - age * DAYS_PER_YEAR)
    return _Patients(ids, gens, female, birth, cci, eps, first, dept, drg)


def _drg_code(j: int) -> str:
    return f"D{j + 1:03d}"


def _diagnosis(j: int) -> int:
    return j % 18 + 1


@dataclass
class SimulationResult:
    scenario: ScenarioSpec
    events: list[RawEvent]
    spells: list[SpellRecord]
    departments: Departments
    truth: dict


class _Linear:
    """Evaluates the true linear predictors through the design column names."""

    def __init__(self, scn: ScenarioSpec, params: ParamVector):
        self.params = params
        self.names = {r: list(scn.beta[r]) for r in TRANSITIONS}
        self.spec = ModelSpec(sample_start=scn.start)

    def eta(self, records: list[SpellRecord], r: int) -> np.ndarray:
        if not self.names[r]:
            return np.zeros(len(records))
        frame = SpellFrame(records)
        ev = ColumnEvaluator(frame, frame.entry, self.spec)
        return ev.matrix(self.names[r]) @ self.params.beta(r)


def _records(P: _Patients, deps: Departments, rows: np.ndarray, origin: np.ndarray,
             entry: np.ndarray, dept: np.ndarray, drg: np.ndarray, count: np.ndarray) -> list[SpellRecord]:
    out = []
    for i in rows:
        d, j = int(dept[i]), int(drg[i])
        out.append(SpellRecord(
            patient_id=P.ids[i], spell_index=int(count[i]), origin=State(int(origin[i])),
            entry_day=float(entry[i]), duration=1.0, transition=0, female=int(P.female[i]),
            birth_day=float(P.birth[i]), department=deps.ids[d], hospital=deps.hospital[d],
            specialty=deps.specialty[d], drg=_drg_code(j), diagnosis=_diagnosis(j),
            cci=float(P.cci[i]), region=deps.region[d], dept_size=float(deps.size[d]),
            mc_adoption_day=float(deps.adoption_day[d]),
        ))
    return out


def _admit_event(P, deps, i, day, d, j) -> RawEvent:
    return RawEvent(
        patient_id=P.ids[i], kind="admit", day=float(day), department=deps.ids[d],
        hospital=deps.hospital[d], specialty=deps.specialty[d], drg=_drg_code(j),
        diagnosis=_diagnosis(j), cci=float(P.cci[i]), female=int(P.female[i]),
        birth_day=float(P.birth[i]), region=deps.region[d], dept_size=float(deps.size[d]),
        mc_adoption_day=float(deps.adoption_day[d]),
    )


def simulate_population(scn: ScenarioSpec) -> SimulationResult:
    """Simulate trajectories Hospital -> Home -> ... until death or censoring.

    A Home spell ends by readmission (same department and DRG within 30
    days), death, an unrelated admission (constant ``other_admission_rate``,
    different DRG, which censors the Home spell), 365 days without event
    (the trajectory stops there) or the end of the window.
    """
    params = scn.true_params()
    deps = make_departments(scn)
    ids = _patient_ids(scn.n_patients)
    P = _draw_patients(scn, deps, ids, "patient")
    lin = _Linear(scn, params)
    n = len(ids)
    end = scn.end_day
    other = scn.other_admission_rate

    hosp_comp = _Competing.build(_components(params, State.HOSPITAL), None)
    home_parts = _components(params, State.HOME)
    if other > 0:
        home_parts = home_parts + [(np.array([1.0, math.inf]), np.array([other]))]
    home_comp = _Competing.build(home_parts, DEATH_WINDOW)

    origin = np.zeros(n, dtype=int)
    entry = P.first_day.copy()
    dept = P.dept.copy()
    drg = P.drg.copy()
    count = np.zeros(n, dtype=int)
    active = np.ones(n, dtype=bool)
    events: list[list[RawEvent]] = [[_admit_event(P, deps, i, entry[i], dept[i], drg[i])] for i in range(n)]
    spells: list[list[SpellRecord]] = [[] for _ in range(n)]

    def record(i, o, start, duration, transition):
        d, j = int(dept[i]), int(drg[i])
        spells[i].append(SpellRecord(
            patient_id=P.ids[i], spell_index=len(spells[i]), origin=State(o), entry_day=float(start),
            duration=float(duration), transition=int(transition), female=int(P.female[i]),
            birth_day=float(P.birth[i]), department=deps.ids[d], hospital=deps.hospital[d],
            specialty=deps.specialty[d], drg=_drg_code(j), diagnosis=_diagnosis(j),
            cci=float(P.cci[i]), region=deps.region[d], dept_size=float(deps.size[d]),
            mc_adoption_day=float(deps.adoption_day[d]),
        ))

    while active.any():
        rows = np.flatnonzero(active)
        U = np.array([P.gens[i].random(4) for i in rows]).reshape(len(rows), 4)
        at = origin[rows].copy()  # a spell that ends now must not reuse this round's draws
        for o, comp in ((State.HOSPITAL, hosp_comp), (State.HOME, home_comp)):
            sel = at == int(o)
            if not sel.any():
                continue
            idx = rows[sel]
            recs = _records(P, deps, idx, origin, entry, dept, drg, count)
            trans = transitions_from(o)
            mult = np.empty((len(idx), len(comp.rates)))
            for c, r in enumerate(trans):
                psi, phi = params.loadings(r)
                omega = psi * P.eps[idx, 0] + phi * P.eps[idx, 1]
                mult[:, c] = np.exp(lin.eta(recs, r) + omega)
            if len(comp.rates) > len(trans):
                mult[:, len(trans):] = 1.0
            t, cause = comp.sample(mult, 1.0 - U[sel, 0], U[sel, 1])
            d = _quantize(t)
            for k, i in enumerate(idx):
                start = entry[i]
                exit_day = start + d[k]
                count[i] += 1
                if exit_day > end:
                    dur = end - start if o is State.HOSPITAL else min(DEATH_WINDOW, end - start)
                    if dur >= 1.0:
                        record(i, o, start, dur, 0)
                    active[i] = False
                    continue
                c = int(cause[k])
                if o is State.HOSPITAL:
                    r = trans[c]
                    record(i, o, start, d[k], r)
                    if r == 1:
                        events[i].append(RawEvent(P.ids[i], "discharge", float(exit_day)))
                        origin[i], entry[i] = int(State.HOME), exit_day
                    else:
                        events[i].append(RawEvent(P.ids[i], "death", float(exit_day)))
                        active[i] = False
                    continue
                if c < 0:  # 365 days at home without event
                    record(i, o, start, d[k], 0)
                    active[i] = False
                    continue
                if c < len(trans):
                    r = trans[c]
                    record(i, o, start, d[k], r)
                    if r == 3:
                        events[i].append(_admit_event(P, deps, i, exit_day, dept[i], drg[i]))
                        origin[i], entry[i] = int(State.HOSPITAL), exit_day
                    else:
                        events[i].append(RawEvent(P.ids[i], "death", float(exit_day)))
                        active[i] = False
                    continue
                # unrelated admission: new department draw and a different DRG
                record(i, o, start, d[k], 0)
                cw = np.cumsum(deps.weight) / deps.weight.sum()
                dept[i] = min(int(np.searchsorted(cw, U[sel, 2][k], side="right")), len(cw) - 1)
                nd = scn.population.n_drgs
                drg[i] = (drg[i] + 1 + int(U[sel, 3][k] * (nd - 1))) % nd
                events[i].append(_admit_event(P, deps, i, exit_day, dept[i], drg[i]))
                origin[i], entry[i] = int(State.HOSPITAL), exit_day

    truth = {
        "scenario": scn.to_json(),
        "layout": params.layout.to_json(),
        "params": params.to_dict(),
        "rng": generator_info(),
        "covariate_clock": "entry",
        "departments": deps.to_rows(),
    }
    return SimulationResult(
        scenario=scn,
        events=[e for evs in events for e in evs],
        spells=[s for sp in spells for s in sp],
        departments=deps,
        truth=truth,
    )


# ---------------------------------------------------------------------------
# calibration to target transition shares


def _first_spell_multipliers(scn: ScenarioSpec, params: ParamVector, n_sample: int) -> dict[int, np.ndarray]:
    deps = make_departments(scn)
    P = _draw_patients(scn, deps, _patient_ids(n_sample), "calibration")
    lin = _Linear(scn, params)
    out = {0: scn.end_day - P.first_day}
    idx = np.arange(n_sample)
    zeros = np.zeros(n_sample, int)
    for r in TRANSITIONS:
        o = TRANSITIONS[r][0]
        recs = _records(P, deps, idx, np.full(n_sample, int(o)), P.first_day, P.dept, P.drg, zeros)
        psi, phi = params.loadings(r)
        out[r] = np.exp(lin.eta(recs, r) + psi * P.eps[:, 0] + phi * P.eps[:, 1])
    return out


def analytic_shares(scn: ScenarioSpec, n_sample: int = 20000, mult=None) -> dict:
    """Spell-level exit shares implied by the scenario.

    Averages the closed-form cumulative incidences over the covariate and
    frailty distribution of first admissions; Home shares weight patients by
    their discharge probability.  Window-end censoring is counted from the
    first admission day, which slightly understates it for Home spells.
    """
    params = scn.true_params()
    if mult is None:
        mult = _first_spell_multipliers(scn, params, n_sample)
    hosp = _Competing.build(_components(params, State.HOSPITAL), None)
    room = mult[0]  # days between first admission and the end of the window
    Ph, _ = hosp.probabilities(np.column_stack([mult[1], mult[2]]), room)
    parts = _components(params, State.HOME)
    m = [mult[3], mult[4]]
    if scn.other_admission_rate > 0:
        parts = parts + [(np.array([1.0, math.inf]), np.array([scn.other_admission_rate]))]
        m.append(np.ones_like(mult[3]))
    home = _Competing.build(parts, DEATH_WINDOW)
    Pm, _ = home.probabilities(np.column_stack(m), room)
    w = Ph[:, 0]
    return {
        "hospital_home": float(Ph[:, 0].mean()),
        "hospital_death": float(Ph[:, 1].mean()),
        "hospital_censored": float(1.0 - Ph.sum(axis=1).mean()),
        "readmission": float(np.sum(w * Pm[:, 0]) / w.sum()),
        "home_death": float(np.sum(w * Pm[:, 1]) / w.sum()),
    }


def calibrate(scn: ScenarioSpec, targets: Mapping[str, float] | None = None,
              n_sample: int = 20000) -> ScenarioSpec:
    """Rescale the baselines of transitions 2, 3 and 4 to hit target shares."""
    targets = dict(DEFAULT_SHARE_TARGETS if targets is None else targets)
    keys = {2: "hospital_death", 3: "readmission", 4: "home_death"}
    base_params = scn.true_params()
    mult = _first_spell_multipliers(scn, base_params, n_sample)

    def shifted(s):
        alpha = dict(scn.alpha)
        for (r, _), v in zip(keys.items(), s):
            alpha[r] = [a * math.exp(v) for a in scn.alpha[r]]
        return dataclasses.replace(scn, alpha=alpha)

    def resid(s):
        sh = analytic_shares(shifted(s), mult=mult)
        return [math.log(sh[k]) - math.log(targets[k]) for k in keys.values()]

    sol = optimize.root(resid, np.zeros(3), method="hybr")
    if not sol.success or np.max(np.abs(sol.fun)) > 1e-8:
        raise RuntimeError(f"calibration failed: {sol.message}")
    return shifted(sol.x)


# ---------------------------------------------------------------------------
# duration contrast by direct simulation


def direct_att_contrast(params: ParamVector, r: int, z: np.ndarray, tau: np.ndarray,
                        reps: int, seed: int, horizon: float | None = None) -> tuple[float, float]:
    """Mean latent duration under treatment minus control, by simulation.

    For every treated row, ``reps`` independent frailty and duration draws
    are made in each arm (rate multiplier ``exp(z + tau + omega)`` versus
    ``exp(z + omega)``).  Returns the contrast and its simulation SE.
    """
    g = keyed_rng(seed, "att-oracle", str(r))
    psi, phi = params.loadings(r)
    b = params.layout.breakpoints[r]
    a = params.alpha(r)
    z = np.repeat(np.asarray(z, float), reps)
    tau = np.repeat(np.asarray(tau, float), reps)
    arms = []
    for shift in (tau, np.zeros_like(tau)):
        e = g.standard_normal((len(z), 2))
        mult = np.exp(z + shift + psi * e[:, 0] + phi * e[:, 1])
        arms.append(sample_latent(b, a, mult, 1.0 - g.random(len(z)), horizon))
    t1, t0 = arms
    diff = t1.mean() - t0.mean()
    se = math.sqrt(t1.var(ddof=1) / len(t1) + t0.var(ddof=1) / len(t0))
    return float(diff), se
