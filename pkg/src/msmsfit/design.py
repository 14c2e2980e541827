"""Covariate rows and parameter layout for a chosen specification.

Columns are identified by name and evaluated at the clock time ``T`` of each
spell (by default the exit time, i.e. entry plus duration).  The names are:

``mc``                         treatment indicator (overall effect)
``mc:spec=<s>``                treatment x specialty category
``mc:exp=<bin>``               treatment x years since the department adopted
``female age age_sq cci dept_size``
``spec=<s> hosp=<h> diag=<g> region=<g> year=<y>``   category dummies
``q q2``                       quarterly trend and its square
``q:spec=<s>``                 specialty-specific linear trend
``pre_mc pre_mc_q pre_mc_q2 pre_mc_q3``   later-adopter trend interactions

``age_sq`` is ``(age / 150) ** 2``.  The baseline steps act as transition
intercepts, so one category of every dummy block is dropped.
"""

from __future__ import annotations

import dataclasses
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .ingest import DAYS_PER_YEAR, SAMPLE_ORIGIN, SpellRecord, date_to_day
from .model import (
    DEFAULT_BREAKPOINTS,
    TRANSITIONS,
    ParamLayout,
    SpellObs,
    State,
    interval_exposures,
    interval_index,
)

BASIC_COVARIATES = ("female", "age", "age_sq", "cci", "dept_size")
MC_MODES = ("overall", "by_specialty", "by_experience", "none")


class DesignError(ValueError):
    pass


@dataclass
class ModelSpec:
    """Everything that decides the columns and the layout of a fit."""

    mc_mode: str = "overall"
    experience_bins: list[float] = field(default_factory=lambda: [2.0, 5.0, 10.0])
    covariates: list[str] = field(default_factory=lambda: list(BASIC_COVARIATES))
    n_specialties: int = 12
    n_hospitals: int = 10
    diagnosis_dummies: bool = True
    region_dummies: bool = True
    year_dummies: bool = True
    trends: bool = True
    specialty_trends: bool = True
    frailty: bool = True
    draws: int = 100
    seed: int = 0
    covariate_clock: str = "exit"
    sample_start: str = "1996-01-01"
    reference: dict = field(default_factory=dict)
    grids: dict | None = None
    pretrend_cutoff: str = "1999-08-31"
    pretrend_degree: int = 2
    pretrend_level: bool = False

    def __post_init__(self):
        if self.mc_mode not in MC_MODES:
            raise DesignError(f"mc_mode must be one of {MC_MODES}")
        if self.covariate_clock not in ("exit", "entry"):
            raise DesignError("covariate_clock must be 'exit' or 'entry'")
        bad = set(self.covariates) - set(BASIC_COVARIATES)
        if bad:
            raise DesignError(f"unknown covariates {sorted(bad)}")
        if sorted(self.experience_bins) != list(self.experience_bins) or any(
            b <= 0 for b in self.experience_bins
        ):
            raise DesignError("experience_bins must be positive and increasing")
        if set(self.reference) - {"specialty", "hospital"}:
            raise DesignError("reference overrides exist for 'specialty' and 'hospital' only")
        if self.pretrend_degree not in (1, 2, 3):
            raise DesignError("pretrend_degree must be 1, 2 or 3")

    def breakpoints(self) -> dict[int, np.ndarray]:
        out = {r: np.asarray(b, dtype=float) for r, b in DEFAULT_BREAKPOINTS.items()}
        for r, b in (self.grids or {}).items():
            out[int(r)] = np.array([math.inf if x is None else float(x) for x in b])
        return out

    @property
    def start_day(self) -> float:
        return date_to_day(self.sample_start)

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, d: Mapping) -> "ModelSpec":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise DesignError(f"unknown model keys: {sorted(unknown)}")
        return cls(**dict(d))

    @classmethod
    def load(cls, path) -> "ModelSpec":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


def experience_labels(bins: Sequence[float]) -> list[str]:
    edges = [0.0, *bins]
    labels = [f"<{bins[0]:g}"]
    for lo, hi in zip(edges[1:-1], edges[2:]):
        labels.append(f"{lo:g}-{hi - 1:g}" if float(lo).is_integer() and float(hi).is_integer() else f"{lo:g}-{hi:g}")
    labels.append(f">={bins[-1]:g}")
    return labels


# ---------------------------------------------------------------------------
# columnar view of spells


class SpellFrame:
    """Columnar arrays for a list of spells, sorted by patient and spell index."""

    def __init__(self, spells: Sequence[SpellRecord]):
        if not spells:
            raise DesignError("no spells")
        order = sorted(range(len(spells)), key=lambda i: (spells[i].patient_id, spells[i].spell_index))
        sp = [spells[i] for i in order]
        self.spells = sp
        pids = [s.patient_id for s in sp]
        self.patient_ids, self.patient = np.unique(np.array(pids), return_inverse=True)
        self.spell_index = np.array([s.spell_index for s in sp])
        self.origin = np.array([int(s.origin) for s in sp])
        self.entry = np.array([s.entry_day for s in sp])
        self.duration = np.array([s.duration for s in sp])
        self.transition = np.array([s.transition for s in sp])
        self.female = np.array([s.female for s in sp], dtype=float)
        self.birth = np.array([s.birth_day for s in sp])
        self.department = np.array([s.department for s in sp])
        self.hospital = np.array([s.hospital for s in sp])
        self.specialty = np.array([s.specialty for s in sp])
        self.drg = np.array([s.drg for s in sp])
        self.diagnosis = np.array([s.diagnosis for s in sp])
        self.cci = np.array([s.cci for s in sp])
        self.region = np.array([s.region for s in sp])
        self.dept_size = np.array([s.dept_size for s in sp])
        self.adoption = np.array([s.mc_adoption_day for s in sp])

    def __len__(self) -> int:
        return len(self.spells)

    @property
    def n_patients(self) -> int:
        return len(self.patient_ids)


def calendar(day: np.ndarray, sample_start: str = "1996-01-01") -> tuple[np.ndarray, np.ndarray]:
    """Calendar year and quarter index since ``sample_start`` for day counts."""
    d = np.datetime64(SAMPLE_ORIGIN) + np.floor(day).astype("int64").astype("timedelta64[D]")
    months = d.astype("datetime64[M]").astype(int)
    year = months // 12 + 1970
    s = np.datetime64(sample_start, "M").astype(int)
    quarter = (months // 3) - (s // 3)
    return year, quarter


class ColumnEvaluator:
    """Evaluates named columns for a set of spells at clock times ``T``."""

    def __init__(self, frame: SpellFrame, T: np.ndarray, spec: ModelSpec,
                 specialty_map: Mapping[str, str] | None = None,
                 hospital_map: Mapping[str, str] | None = None):
        self.f = frame
        self.T = np.asarray(T, dtype=float)
        self.spec = spec
        self.spec_cat = (
            np.array([specialty_map.get(s, "other") for s in frame.specialty])
            if specialty_map is not None else frame.specialty
        )
        self.hosp_cat = (
            np.array([hospital_map.get(h, "other") for h in frame.hospital])
            if hospital_map is not None else frame.hospital
        )
        self.year, self.quarter = calendar(self.T, spec.sample_start)
        self.quarter = self.quarter.astype(float)
        adopt = np.nan_to_num(frame.adoption, nan=np.inf)
        self.mc = (adopt <= self.T).astype(float)
        self.treated = np.isfinite(frame.adoption).astype(float)
        with np.errstate(invalid="ignore"):
            self.experience = np.where(self.mc > 0, (self.T - frame.adoption) / DAYS_PER_YEAR, np.nan)

    @property
    def age(self) -> np.ndarray:
        return (self.T - self.f.birth) / DAYS_PER_YEAR

    def __call__(self, name: str) -> np.ndarray:
        f = self.f
        if name == "mc":
            return self.mc
        if name.startswith("mc:spec="):
            return self.mc * (self.spec_cat == name[8:])
        if name.startswith("mc:exp="):
            labels = experience_labels(self.spec.experience_bins)
            i = labels.index(name[7:])
            edges = [0.0, *self.spec.experience_bins, math.inf]
            e = np.nan_to_num(self.experience, nan=-1.0)
            return self.mc * ((e >= edges[i]) & (e < edges[i + 1]))
        if name == "female":
            return f.female
        if name == "age":
            return self.age
        if name == "age_sq":
            return (self.age / 150.0) ** 2
        if name == "cci":
            return f.cci
        if name == "dept_size":
            return f.dept_size
        if name == "q":
            return self.quarter
        if name == "q2":
            return self.quarter**2
        if name.startswith("q:spec="):
            return self.quarter * (self.spec_cat == name[7:])
        if name.startswith("spec="):
            return (self.spec_cat == name[5:]).astype(float)
        if name.startswith("hosp="):
            return (self.hosp_cat == name[5:]).astype(float)
        if name.startswith("diag="):
            return (f.diagnosis == int(name[5:])).astype(float)
        if name.startswith("region="):
            return (f.region == name[7:]).astype(float)
        if name.startswith("year="):
            return (self.year == int(name[5:])).astype(float)
        if name == "pre_mc":
            return self.treated
        if name.startswith("pre_mc_q"):
            power = {"pre_mc_q": 1, "pre_mc_q2": 2, "pre_mc_q3": 3}[name]
            return self.treated * self.quarter**power
        raise DesignError(f"unknown column {name!r}")

    def matrix(self, names: Sequence[str], rows: np.ndarray | None = None) -> np.ndarray:
        cols = [np.asarray(self(n), dtype=float) for n in names]
        X = np.column_stack(cols) if cols else np.zeros((len(self.T), 0))
        return X if rows is None else X[rows]


def _top_categories(values: np.ndarray, k: int) -> tuple[dict[str, str], Counter]:
    counts = Counter(values.tolist())
    ranked = sorted(counts, key=lambda c: (-counts[c], str(c)))
    keep = ranked if len(ranked) <= k else ranked[: k - 1]
    mapping = {c: str(c) for c in keep}
    pooled = Counter()
    for c, n in counts.items():
        pooled[mapping.get(c, "other")] += n
    return mapping, pooled


def _reference(pooled: Counter, override: str | None, what: str) -> str:
    if override is not None:
        if override not in pooled:
            raise DesignError(f"reference {what} {override!r} not present")
        return override
    return sorted(pooled, key=lambda c: (-pooled[c], str(c)))[0]


@dataclass
class Design:
    """Per-transition covariate matrices plus the parameter layout."""

    spec: ModelSpec
    frame: SpellFrame
    T: np.ndarray
    columns: dict[int, list[str]]
    rows: dict[int, np.ndarray]
    X: dict[int, np.ndarray]
    layout: ParamLayout
    specialty_map: dict[str, str] | None
    hospital_map: dict[str, str] | None
    dropped: dict[int, list[str]] = field(default_factory=dict)

    @property
    def breakpoints(self) -> dict[int, np.ndarray]:
        return self.layout.breakpoints

    def evaluator(self) -> ColumnEvaluator:
        return ColumnEvaluator(self.frame, self.T, self.spec, self.specialty_map, self.hospital_map)

    def treatment_columns(self, r: int) -> list[int]:
        return [j for j, n in enumerate(self.columns[r]) if n == "mc" or n.startswith("mc:")]

    def events(self, r: int) -> np.ndarray:
        return self.frame.transition[self.rows[r]] == r

    def exposures(self, r: int) -> np.ndarray:
        return interval_exposures(self.breakpoints[r], self.frame.duration[self.rows[r]])

    def event_interval(self, r: int) -> np.ndarray:
        """Interval index of the duration for every row at risk of ``r``."""
        return interval_index(self.breakpoints[r], self.frame.duration[self.rows[r]])

    def observation(self, i: int) -> SpellObs:
        """Spell ``i`` of the (sorted) frame as a :class:`SpellObs`."""
        f = self.frame
        origin = State(int(f.origin[i]))
        x = {}
        for r, (o, _) in TRANSITIONS.items():
            if o is origin:
                pos = np.searchsorted(self.rows[r], i)
                x[r] = self.X[r][pos]
        return SpellObs(origin, float(f.duration[i]), int(f.transition[i]), x)

    def column_scales(self) -> dict[int, np.ndarray]:
        out = {}
        for r, X in self.X.items():
            sd = X.std(axis=0) if len(X) else np.ones(X.shape[1])
            out[r] = np.where(sd > 0, sd, 1.0)
        return out

    def rank_report(self) -> dict[int, dict]:
        """Column rank of ``[1, X_r]`` per transition with null-space columns named."""
        out = {}
        for r, X in self.X.items():
            names = ["<baseline>", *self.columns[r]]
            if len(X) == 0:
                out[r] = {"rank": 0, "n_columns": len(names), "null_columns": []}
                continue
            A = np.column_stack([np.ones(len(X)), X])
            scale = np.where(A.std(axis=0) > 0, A.std(axis=0), 1.0)
            scale[0] = 1.0
            A = A / scale
            _, s, vt = np.linalg.svd(A, full_matrices=False)
            tol = s.max() * max(A.shape) * np.finfo(float).eps if len(s) else 0.0
            rank = int(np.sum(s > tol))
            null = []
            for v in vt[rank:]:
                null.extend(names[j] for j in np.flatnonzero(np.abs(v) > 1e-6))
            out[r] = {"rank": rank, "n_columns": A.shape[1], "null_columns": sorted(set(null))}
        return out


def _column_names(spec: ModelSpec, ev: ColumnEvaluator, spec_cats, spec_ref,
                  hosp_cats, hosp_ref, pretrend: bool) -> list[str]:
    f = ev.f
    names: list[str] = []
    if not pretrend:
        if spec.mc_mode == "overall":
            names.append("mc")
        elif spec.mc_mode == "by_specialty":
            if not spec_cats:
                raise DesignError("by_specialty mode needs specialty categories (n_specialties > 0)")
            names += [f"mc:spec={c}" for c in spec_cats]
        elif spec.mc_mode == "by_experience":
            names += [f"mc:exp={lab}" for lab in experience_labels(spec.experience_bins)]
    else:
        if spec.pretrend_level:
            names.append("pre_mc")
        names += ["pre_mc_q", "pre_mc_q2", "pre_mc_q3"][: spec.pretrend_degree]
    names += list(spec.covariates)
    names += [f"spec={c}" for c in spec_cats if c != spec_ref]
    names += [f"hosp={c}" for c in hosp_cats if c != hosp_ref]
    if spec.diagnosis_dummies:
        groups = sorted(set(f.diagnosis.tolist()))
        names += [f"diag={g}" for g in groups[1:]]
    if spec.region_dummies:
        regions = sorted(set(f.region.tolist()))
        names += [f"region={g}" for g in regions[1:]]
    if spec.year_dummies:
        years = sorted(set(ev.year.tolist()))
        names += [f"year={y}" for y in years[1:]]
    if spec.trends:
        names += ["q", "q2"]
    if spec.specialty_trends and spec.trends:
        names += [f"q:spec={c}" for c in spec_cats if c != spec_ref]
    return names


def _make_design(spells: Sequence[SpellRecord], spec: ModelSpec, pretrend: bool) -> Design:
    frame = SpellFrame(spells)
    if np.any(np.isnan(frame.birth)) and {"age", "age_sq"} & set(spec.covariates):
        raise DesignError("age covariates need a birth day for every spell")
    T = frame.entry + frame.duration if spec.covariate_clock == "exit" else frame.entry.copy()

    spec_map = hosp_map = None
    spec_cats: list[str] = []
    hosp_cats: list[str] = []
    spec_ref = hosp_ref = None
    if spec.n_specialties > 0:
        spec_map, pooled = _top_categories(frame.specialty, spec.n_specialties)
        spec_cats = sorted(pooled)
        spec_ref = _reference(pooled, spec.reference.get("specialty"), "specialty")
    if spec.n_hospitals > 0:
        hosp_map, pooled = _top_categories(frame.hospital, spec.n_hospitals + 1)
        hosp_cats = sorted(pooled)
        hosp_ref = _reference(pooled, spec.reference.get("hospital"), "hospital")

    ev = ColumnEvaluator(frame, T, spec, spec_map, hosp_map)
    if pretrend and not np.any(ev.treated > 0):
        raise DesignError("no later-adopting department in the pre-reform window")
    names = _column_names(spec, ev, spec_cats, spec_ref, hosp_cats, hosp_ref, pretrend)
    full = ev.matrix(names)
    if not np.all(np.isfinite(full)):
        bad = sorted({names[j] for j in np.flatnonzero(~np.all(np.isfinite(full), axis=0))})
        rows = np.flatnonzero(~np.all(np.isfinite(full), axis=1))[:10]
        raise DesignError(
            f"non-finite values in column(s) {bad}; first offending spells: "
            + ", ".join(f"{frame.patient_ids[frame.patient[i]]}#{frame.spell_index[i]}" for i in rows)
        )

    columns, rows, X, dropped = {}, {}, {}, {}
    for r, (origin, _) in TRANSITIONS.items():
        idx = np.flatnonzero(frame.origin == int(origin))
        Xr = full[idx]
        keep = np.any(Xr != 0, axis=0) if len(idx) else np.zeros(len(names), bool)
        dropped[r] = [n for n, k in zip(names, keep) if not k]
        columns[r] = [n for n, k in zip(names, keep) if k]
        rows[r] = idx
        X[r] = np.ascontiguousarray(Xr[:, keep])
    layout = ParamLayout(spec.breakpoints(), columns, frailty=spec.frailty)
    return Design(spec, frame, T, columns, rows, X, layout, spec_map, hosp_map, dropped)


def build_design(spells: Sequence[SpellRecord], spec: ModelSpec) -> Design:
    """Covariate matrices and layout for the treatment-effect specification."""
    return _make_design(spells, spec, pretrend=False)


def restrict_window(spells: Sequence[SpellRecord], end_day: float) -> list[SpellRecord]:
    """Spells started before ``end_day``, censored there if they run past it."""
    out = []
    for s in spells:
        if s.entry_day >= end_day:
            continue
        if s.entry_day + s.duration > end_day:
            d = end_day - s.entry_day
            if d < 1.0:
                continue
            s = dataclasses.replace(s, duration=d, transition=0)
        out.append(s)
    return out


def build_pretrend_design(spells: Sequence[SpellRecord], spec: ModelSpec,
                          cutoff: str | None = None, degree: int | None = None) -> Design:
    """Design for the pre-reform differential-trend test.

    Spells are cut at the end of ``cutoff`` (inclusive date), the treatment
    level block is removed and later-adopter x trend columns are added.
    """
    spec = dataclasses.replace(
        spec,
        pretrend_cutoff=cutoff or spec.pretrend_cutoff,
        pretrend_degree=degree or spec.pretrend_degree,
    )
    end = date_to_day(spec.pretrend_cutoff) + 1.0
    window = restrict_window(spells, end)
    if not window:
        raise DesignError("no spells in the pre-reform window")
    return _make_design(window, spec, pretrend=True)
