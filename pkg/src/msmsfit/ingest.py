"""Raw hospital events to spells, spell CSV I/O and descriptive tables.

Clock time is stored as days since :data:`SAMPLE_ORIGIN` (1996-01-01) and may
be fractional.  CSV readers accept either that day count or an ISO date.
"""

from __future__ import annotations

import csv
import datetime as dt
import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .model import State, transitions_from

SAMPLE_ORIGIN = dt.date(1996, 1, 1)
REFORM_DATE = dt.date(1999, 10, 1)
READMISSION_WINDOW = 30.0
DEATH_WINDOW = 365.0
MIN_DURATION = 1.0
DAYS_PER_YEAR = 365.25

# ICD-9 chapter groups used for the 18 diagnosis dummies
DIAGNOSIS_GROUPS = {
    1: "infectious and parasitic diseases",
    2: "neoplasms",
    3: "endocrine, nutritional and metabolic diseases, immunity disorders",
    4: "diseases of the blood and blood-forming organs",
    5: "mental disorders",
    6: "diseases of the nervous system and sense organs",
    7: "diseases of the circulatory system",
    8: "diseases of the respiratory system",
    9: "diseases of the digestive system",
    10: "diseases of the genitourinary system",
    11: "complications of pregnancy, childbirth and the puerperium",
    12: "diseases of the skin and subcutaneous tissue",
    13: "diseases of the musculoskeletal system and connective tissue",
    14: "congenital anomalies",
    15: "certain conditions originating in the perinatal period",
    16: "symptoms, signs and ill-defined conditions",
    17: "injury and poisoning",
    18: "external causes of injury and supplemental classification",
}


def date_to_day(d: dt.date | str) -> float:
    if isinstance(d, str):
        d = dt.date.fromisoformat(d)
    return float((d - SAMPLE_ORIGIN).days)


def day_to_date(day: float) -> dt.date:
    return SAMPLE_ORIGIN + dt.timedelta(days=math.floor(day))


def parse_day(value: str) -> float:
    """Day count or ISO date -> days since the sample origin."""
    value = value.strip()
    try:
        return float(value)
    except ValueError:
        return date_to_day(value)


def fmt_float(x: float) -> str:
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else repr(float(x))


class InputError(ValueError):
    """Bad input data; ``errors`` holds ``(row, message)`` pairs."""

    def __init__(self, message: str, errors: Sequence[tuple[int, str]] = ()):
        self.errors = list(errors)
        detail = "; ".join(f"row {r}: {m}" for r, m in self.errors[:20])
        more = f" (+{len(self.errors) - 20} more)" if len(self.errors) > 20 else ""
        super().__init__(f"{message}: {detail}{more}" if self.errors else message)


# ---------------------------------------------------------------------------
# records


@dataclass(slots=True)
class RawEvent:
    patient_id: str
    kind: str  # admit | discharge | death
    day: float
    department: str = ""
    hospital: str = ""
    specialty: str = ""
    drg: str = ""
    diagnosis: int = 0
    cci: float = 0.0
    female: int = 0
    birth_day: float = math.nan
    region: str = ""
    dept_size: float = 0.0
    mc_adoption_day: float = math.nan


EVENT_COLUMNS = [f.name for f in fields(RawEvent)]


@dataclass(slots=True)
class SpellRecord:
    """One stay in Hospital or Home.

    ``transition`` is 0 for a censored spell.  Home spells carry the
    attributes of the preceding hospital stay (department, DRG, CCI...).
    """

    patient_id: str
    spell_index: int
    origin: State
    entry_day: float
    duration: float
    transition: int
    female: int
    birth_day: float
    department: str
    hospital: str
    specialty: str
    drg: str
    diagnosis: int
    cci: float
    region: str
    dept_size: float
    mc_adoption_day: float = math.nan

    @property
    def exit_day(self) -> float:
        return self.entry_day + self.duration

    @property
    def censored(self) -> bool:
        return self.transition == 0


SPELL_COLUMNS = [f.name for f in fields(SpellRecord)]


# ---------------------------------------------------------------------------
# spell construction


@dataclass
class IngestRules:
    start_day: float = 0.0
    end_day: float = date_to_day("2016-12-31")
    readmission_window: float = READMISSION_WINDOW
    death_window: float = DEATH_WINDOW

    @classmethod
    def from_json(cls, d: dict) -> "IngestRules":
        known = {"start", "end", "readmission_window", "death_window"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown rule keys: {sorted(unknown)}")
        out = cls()
        if "start" in d:
            out.start_day = parse_day(str(d["start"]))
        if "end" in d:
            out.end_day = parse_day(str(d["end"]))
        out.readmission_window = float(d.get("readmission_window", out.readmission_window))
        out.death_window = float(d.get("death_window", out.death_window))
        return out


def event_duration(start: float, stop: float) -> float:
    """Length of a spell ended by an observed transition (at least one day)."""
    return max(MIN_DURATION, stop - start)


def censored_home_duration(entry: float, end_day: float, death_window: float = DEATH_WINDOW):
    return min(death_window, end_day - entry)


class _Exclude(Exception):
    def __init__(self, reason: str, day: float, detail: str = ""):
        self.reason, self.day, self.detail = reason, day, detail


_PREF_IN_HOSPITAL = {"discharge": 0, "death": 1, "admit": 2}
_PREF_AT_HOME = {"admit": 0, "death": 1, "discharge": 2}


def _same_day_order(group: list[RawEvent], in_hospital: bool) -> list[RawEvent]:
    """Order same-day events so that each one is valid in the running state.

    In hospital a discharge goes first, at home an admission goes first, and
    a death always closes the day.  The result does not depend on the input
    order.
    """
    pending = sorted(group, key=lambda e: (e.kind, e.department, e.drg, e.hospital))
    out = []
    state = in_hospital
    while pending:
        pref = _PREF_IN_HOSPITAL if state else _PREF_AT_HOME
        pending.sort(key=lambda e: pref.get(e.kind, 9))
        e = pending.pop(0)
        out.append(e)
        if e.kind == "admit":
            state = True
        elif e.kind == "discharge":
            state = False
    return out


def _patient_spells(pid: str, events: list[RawEvent], rules: IngestRules) -> list[SpellRecord]:
    spells: list[SpellRecord] = []
    female, birth = 0, math.nan
    for e in events:
        if not math.isnan(e.birth_day):
            female, birth = int(e.female), e.birth_day
            break

    state = None  # None | "hospital" | "home" | "dead"
    stay: RawEvent | None = None  # admit event of the current or last stay
    entry = 0.0
    pre_start_open = False

    def add(origin, start, duration, transition):
        spells.append(
            SpellRecord(
                patient_id=pid, spell_index=len(spells), origin=origin, entry_day=start,
                duration=duration, transition=transition, female=female, birth_day=birth,
                department=stay.department, hospital=stay.hospital, specialty=stay.specialty,
                drg=stay.drg, diagnosis=int(stay.diagnosis), cci=float(stay.cci),
                region=stay.region, dept_size=float(stay.dept_size),
                mc_adoption_day=stay.mc_adoption_day,
            )
        )

    by_day: dict[float, list[RawEvent]] = defaultdict(list)
    for e in events:
        by_day[e.day].append(e)

    for day in sorted(by_day):
        if day > rules.end_day:
            break
        for e in _same_day_order(by_day[day], state == "hospital"):
            if e.kind not in ("admit", "discharge", "death"):
                raise _Exclude("unknown_event_kind", day, e.kind)
            if state == "dead":
                reason = "death_before_discharge" if e.kind == "discharge" else "event_after_death"
                raise _Exclude(reason, day)
            if day < rules.start_day:
                if e.kind == "admit":
                    pre_start_open = True
                elif e.kind == "discharge":
                    pre_start_open = False
                elif e.kind == "death":
                    state = "dead"
                continue

            if e.kind == "admit":
                if state == "hospital":
                    raise _Exclude("overlapping_stays", day, f"admitted while in stay from day {entry!r}")
                if state == "home":
                    gap = day - entry
                    readmit = (
                        gap <= rules.readmission_window
                        and e.department == stay.department
                        and e.drg == stay.drg
                    )
                    if readmit:
                        add(State.HOME, entry, event_duration(entry, day), 3)
                    else:
                        d = min(rules.death_window, gap)
                        if d >= 1.0:
                            add(State.HOME, entry, d, 0)
                state, stay, entry = "hospital", e, day
                pre_start_open = False
            elif e.kind == "discharge":
                if state == "hospital":
                    add(State.HOSPITAL, entry, event_duration(entry, day), 1)
                    state, entry = "home", day
                elif state is None and pre_start_open:
                    pre_start_open = False
                else:
                    raise _Exclude("discharge_without_admission", day)
            else:  # death
                if state == "hospital":
                    add(State.HOSPITAL, entry, event_duration(entry, day), 2)
                elif state == "home":
                    gap = day - entry
                    if gap < 1.0:
                        # died on the discharge day: in-hospital death
                        last = spells[-1]
                        last.duration = event_duration(last.entry_day, day)
                        last.transition = 2
                    elif gap <= rules.death_window:
                        add(State.HOME, entry, gap, 4)
                    else:
                        add(State.HOME, entry, rules.death_window, 0)
                state = "dead"

    if state == "hospital":
        d = rules.end_day - entry
        if d >= 1.0:
            add(State.HOSPITAL, entry, d, 0)
    elif state == "home":
        d = censored_home_duration(entry, rules.end_day, rules.death_window)
        if d >= 1.0:
            add(State.HOME, entry, d, 0)
    return spells


def build_spells(
    events: Iterable[RawEvent], rules: IngestRules | None = None
) -> tuple[list[SpellRecord], list[dict]]:
    """Turn raw admissions, discharges and deaths into spells.

    Returns the spells (sorted by patient id, then spell index) and an
    exclusion report with one dict per excluded patient.
    """
    rules = rules or IngestRules()
    per_patient: dict[str, list[RawEvent]] = defaultdict(list)
    for e in events:
        per_patient[e.patient_id].append(e)
    spells: list[SpellRecord] = []
    exclusions: list[dict] = []
    for pid in sorted(per_patient):
        try:
            out = _patient_spells(pid, per_patient[pid], rules)
        except _Exclude as ex:
            exclusions.append(
                {"patient_id": pid, "reason": ex.reason, "day": ex.day, "detail": ex.detail}
            )
            continue
        spells.extend(out)
    check_censoring_rules(spells, rules)
    return spells, exclusions


def check_censoring_rules(spells: Sequence[SpellRecord], rules: IngestRules | None = None) -> None:
    rules = rules or IngestRules()
    for s in spells:
        if s.transition == 3 and s.duration > rules.readmission_window:
            raise AssertionError(f"{s.patient_id}#{s.spell_index}: readmission after {s.duration} days")
        if s.origin == State.HOME and s.duration > rules.death_window:
            raise AssertionError(f"{s.patient_id}#{s.spell_index}: home spell of {s.duration} days")
        if s.duration < MIN_DURATION:
            raise AssertionError(f"{s.patient_id}#{s.spell_index}: duration {s.duration} < 1")


# ---------------------------------------------------------------------------
# CSV


def _event_row(e: RawEvent) -> list[str]:
    return [
        e.patient_id, e.kind, fmt_float(e.day), e.department, e.hospital, e.specialty, e.drg,
        str(int(e.diagnosis)), fmt_float(e.cci), str(int(e.female)), fmt_float(e.birth_day),
        e.region, fmt_float(e.dept_size), fmt_float(e.mc_adoption_day),
    ]


def write_events_csv(events: Iterable[RawEvent], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EVENT_COLUMNS)
        for e in events:
            w.writerow(_event_row(e))


def _opt_float(v: str, default=math.nan) -> float:
    return default if v.strip() == "" else parse_day(v)


def load_events_csv(path) -> list[RawEvent]:
    errors: list[tuple[int, str]] = []
    out: list[RawEvent] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = {"patient_id", "kind", "day"} - set(reader.fieldnames or [])
        if missing:
            raise InputError(f"events file lacks columns {sorted(missing)}")
        for i, row in enumerate(reader, start=2):
            try:
                g = lambda k: (row.get(k) or "").strip()  # noqa: E731
                out.append(
                    RawEvent(
                        patient_id=g("patient_id"), kind=g("kind"), day=parse_day(g("day")),
                        department=g("department"), hospital=g("hospital"),
                        specialty=g("specialty"), drg=g("drg"),
                        diagnosis=int(g("diagnosis") or 0), cci=float(g("cci") or 0),
                        female=int(g("female") or 0), birth_day=_opt_float(g("birth_day")),
                        region=g("region"), dept_size=float(g("dept_size") or 0),
                        mc_adoption_day=_opt_float(g("mc_adoption_day")),
                    )
                )
                if out[-1].kind not in ("admit", "discharge", "death"):
                    errors.append((i, f"unknown event kind {out[-1].kind!r}"))
            except (ValueError, TypeError) as ex:
                errors.append((i, str(ex)))
    if errors:
        raise InputError(f"{path}: {len(errors)} bad row(s)", errors)
    return out


def _spell_row(s: SpellRecord) -> list[str]:
    return [
        s.patient_id, str(s.spell_index), State(s.origin).name.lower(), fmt_float(s.entry_day),
        fmt_float(s.duration), str(s.transition), str(s.female), fmt_float(s.birth_day),
        s.department, s.hospital, s.specialty, s.drg, str(s.diagnosis), fmt_float(s.cci),
        s.region, fmt_float(s.dept_size), fmt_float(s.mc_adoption_day),
    ]


def write_spell_csv(spells: Iterable[SpellRecord], path) -> None:
    """Write spells in :data:`SPELL_COLUMNS` order; floats use ``repr``."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SPELL_COLUMNS)
        for s in spells:
            w.writerow(_spell_row(s))


def _parse_spell(row: dict, horizons) -> SpellRecord:
    origin_name = row["origin"].strip().upper()
    if origin_name not in ("HOSPITAL", "HOME"):
        raise ValueError(f"origin must be hospital or home, got {row['origin']!r}")
    origin = State[origin_name]
    s = SpellRecord(
        patient_id=row["patient_id"], spell_index=int(row["spell_index"]), origin=origin,
        entry_day=parse_day(row["entry_day"]), duration=float(row["duration"]),
        transition=int(row["transition"]), female=int(row["female"]),
        birth_day=_opt_float(row["birth_day"]), department=row["department"],
        hospital=row["hospital"], specialty=row["specialty"], drg=row["drg"],
        diagnosis=int(row["diagnosis"]), cci=float(row["cci"]), region=row["region"],
        dept_size=float(row["dept_size"] or 0), mc_adoption_day=_opt_float(row["mc_adoption_day"]),
    )
    if not s.duration >= MIN_DURATION:
        raise ValueError(f"duration {row['duration']} < 1")
    if s.transition and s.transition not in transitions_from(origin):
        raise ValueError(f"transition {s.transition} cannot leave {origin.name.lower()}")
    if s.transition and horizons.get(s.transition) is not None and s.duration > horizons[s.transition]:
        raise ValueError(f"duration {s.duration} beyond horizon of transition {s.transition}")
    if origin == State.HOME and s.duration > DEATH_WINDOW:
        raise ValueError(f"home spell of {s.duration} days exceeds {DEATH_WINDOW:g}")
    return s


def load_spell_csv(path, spec=None) -> list[SpellRecord]:
    """Read a spells file, validating every row before failing.

    ``spec`` (a :class:`~msmsfit.design.ModelSpec`) adds a check that every
    realised transition falls inside that transition's interval grid.
    """
    horizons = {r: b[-1] for r, b in spec.breakpoints().items()} if spec is not None else {}
    horizons = {r: (None if math.isinf(h) else h) for r, h in horizons.items()}
    errors: list[tuple[int, str]] = []
    out: list[SpellRecord] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in SPELL_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise InputError(f"{path}: missing column(s) {missing}")
        for i, row in enumerate(reader, start=2):
            try:
                out.append(_parse_spell(row, horizons))
            except (ValueError, KeyError, TypeError) as ex:
                errors.append((i, str(ex)))
    if errors:
        raise InputError(f"{path}: {len(errors)} bad row(s)", errors)
    return out


def write_exclusions(exclusions: Iterable[dict], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for x in exclusions:
            fh.write(json.dumps(x, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# descriptive tables

OUTCOME_COLUMNS = {
    "hospital_to_home": (State.HOSPITAL, 1),
    "hospital_to_death": (State.HOSPITAL, 2),
    "home_to_readmission": (State.HOME, 3),
    "home_to_death": (State.HOME, 4),
    "censored_at_home": (State.HOME, 0),
    "censored_in_hospital": (State.HOSPITAL, 0),
}


def _stats(x: np.ndarray) -> dict:
    if len(x) == 0:
        return {"mean": math.nan, "sd": math.nan, "min": math.nan, "max": math.nan}
    return {
        "mean": float(np.mean(x)),
        "sd": float(np.std(x, ddof=1)) if len(x) > 1 else 0.0,
        "min": float(np.min(x)),
        "max": float(np.max(x)),
    }


def summarize(spells: Sequence[SpellRecord], reform_day: float | None = None) -> dict:
    """Transition shares by origin state and per-outcome descriptive stats."""
    if not spells:
        raise ValueError("no spells to summarize")
    reform_day = date_to_day(REFORM_DATE) if reform_day is None else reform_day
    origin = np.array([int(s.origin) for s in spells])
    trans = np.array([s.transition for s in spells])
    table = {}
    for state in (State.HOSPITAL, State.HOME):
        mask = origin == state
        n = int(mask.sum())
        row = {"n": n}
        for r in transitions_from(state):
            row[str(r)] = float(np.mean(trans[mask] == r)) if n else math.nan
        row["censored"] = float(np.mean(trans[mask] == 0)) if n else math.nan
        table[state.name.lower()] = row

    dur = np.array([s.duration for s in spells])
    exit_day = np.array([s.exit_day for s in spells])
    birth = np.array([s.birth_day for s in spells])
    adopt = np.array([s.mc_adoption_day for s in spells])
    covs = {
        "female": np.array([s.female for s in spells], dtype=float),
        "age": (exit_day - birth) / DAYS_PER_YEAR,
        "cci": np.array([s.cci for s in spells]),
        "mixed_compensation": (np.nan_to_num(adopt, nan=np.inf) <= exit_day).astype(float),
        "treatment": np.isfinite(adopt).astype(float),
        "post_reform": (exit_day >= reform_day).astype(float),
    }
    pid = np.array([s.patient_id for s in spells])
    columns = {}
    for label, (state, r) in OUTCOME_COLUMNS.items():
        mask = (origin == state) & (trans == r)
        col = {"length_of_stay": _stats(dur[mask])}
        for name, v in covs.items():
            col[name] = _stats(v[mask])
        n_stays = int(mask.sum())
        n_pat = int(len(np.unique(pid[mask])))
        col["n_stays"] = n_stays
        col["n_patients"] = n_pat
        col["stays_per_patient"] = n_stays / n_pat if n_pat else math.nan
        columns[label] = col
    return {
        "transitions": table,
        "outcomes": columns,
        "n_spells": len(spells),
        "n_patients": int(len(np.unique(pid))),
    }


def format_summary(summary: dict) -> str:
    lines = ["Transition shares"]
    for origin, row in summary["transitions"].items():
        parts = [f"{k}={v:.3f}" for k, v in row.items() if k != "n"]
        lines.append(f"  {origin:<9} n={row['n']:<8} " + " ".join(parts))
    lines.append("Length of stay by outcome")
    for label, col in summary["outcomes"].items():
        s = col["length_of_stay"]
        if col["n_stays"]:
            lines.append(
                f"  {label:<22} n={col['n_stays']:<8} mean={s['mean']:.2f} sd={s['sd']:.2f} "
                f"min={s['min']:g} max={s['max']:g}"
            )
    return "\n".join(lines)


def spell_as_dict(s: SpellRecord) -> dict:
    d = asdict(s)
    d["origin"] = State(s.origin).name.lower()
    return d

