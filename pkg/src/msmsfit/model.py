"""Hazard kernel for the recurrent hospital/home/death model.

Everything here is a pure function of its arguments.  Durations are measured
in days; every baseline grid starts at day 1 and the hazard is zero on
``[0, 1)``, so survival at ``t = 1`` is exactly one.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Iterable, Mapping

import numpy as np

logger = logging.getLogger(__name__)

EXP_CLAMP = 700.0


class State(IntEnum):
    HOSPITAL = 0
    HOME = 1
    DEATH = 2


# transition id -> (origin, destination); Ad and RAd are both HOSPITAL
TRANSITIONS: dict[int, tuple[State, State]] = {
    1: (State.HOSPITAL, State.HOME),
    2: (State.HOSPITAL, State.DEATH),
    3: (State.HOME, State.HOSPITAL),
    4: (State.HOME, State.DEATH),
}

TRANSITION_LABELS = {
    1: "Ad(RAd) -> Home",
    2: "Ad(RAd) -> Death",
    3: "Home -> RAd",
    4: "Home -> Death",
}

# Piecewise intervals per transition, in days.  The last breakpoint of the
# home-origin transitions is the censoring horizon (30 and 365 days).
DEFAULT_BREAKPOINTS: dict[int, tuple[float, ...]] = {
    1: (1, 2, 3, 4, 5, 6, 8, 11, 18, math.inf),
    2: (1, 2, 5, 10, 16, 29, math.inf),
    3: (1, 3, 6, 8, 12, 16, 19, 22, 26, 30),
    4: (1, 4, 16, 31, 51, 81, 121, 181, 261, 365),
}

# loadings fixed to one for identification: psi for 1, 2 and phi for 3, 4
FIXED_LOADING = {1: "psi", 2: "psi", 3: "phi", 4: "phi"}
FREE_LOADING = {1: "phi", 2: "phi", 3: "psi", 4: "psi"}


def transitions_from(origin: State | int) -> tuple[int, ...]:
    origin = State(origin)
    if origin is State.DEATH:
        raise ValueError("no transition originates from Death")
    return tuple(r for r, (o, _) in TRANSITIONS.items() if o is origin)


def clamped_exp(v):
    """``exp(clip(v, -700, 700))`` and the number of clipped entries."""
    v = np.asarray(v, dtype=float)
    n = int(np.count_nonzero(np.abs(v) > EXP_CLAMP))
    if n:
        logger.debug("clamped %d exponent(s)", n)
        v = np.clip(v, -EXP_CLAMP, EXP_CLAMP)
    return np.exp(v), n


@dataclass(frozen=True)
class PiecewiseBaseline:
    """Step baseline hazard on ``[b_0, b_1), [b_1, b_2), ...``.

    ``breakpoints`` has one more entry than ``steps``.  A finite last
    breakpoint is a horizon: the hazard is zero beyond it and the last
    interval is closed at the horizon so that an event recorded exactly on
    the horizon day still has positive hazard.
    """

    breakpoints: np.ndarray
    steps: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.breakpoints, dtype=float)
        a = np.asarray(self.steps, dtype=float)
        if b.ndim != 1 or a.ndim != 1 or len(b) != len(a) + 1:
            raise ValueError("need len(breakpoints) == len(steps) + 1")
        if np.any(np.diff(b) <= 0):
            raise ValueError("breakpoints must be strictly increasing")
        if np.any(~np.isfinite(b[:-1])):
            raise ValueError("only the last breakpoint may be infinite")
        if np.any(~(a > 0)) or np.any(~np.isfinite(a)):
            raise ValueError("baseline steps must be positive and finite")
        object.__setattr__(self, "breakpoints", b)
        object.__setattr__(self, "steps", a)

    @property
    def n_intervals(self) -> int:
        return len(self.steps)

    @property
    def horizon(self) -> float | None:
        last = self.breakpoints[-1]
        return None if math.isinf(last) else float(last)

    def exposures(self, t) -> np.ndarray:
        """Time spent in each interval by a spell of length ``t``; shape (n, K)."""
        return interval_exposures(self.breakpoints, t)

    def interval_index(self, t) -> np.ndarray:
        return interval_index(self.breakpoints, t)

    def rate(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        k = self.interval_index(t)
        inside = k >= 0
        out = np.zeros(t.shape)
        out[inside] = self.steps[k[inside]]
        return out

    def cumulative(self, t) -> np.ndarray:
        return cumulative_baseline(self, t)


def interval_exposures(breakpoints, t) -> np.ndarray:
    b = np.asarray(breakpoints, dtype=float)
    t = np.atleast_1d(np.asarray(t, dtype=float))
    lo, hi = b[:-1], b[1:]
    return np.clip(np.minimum(t[:, None], hi[None, :]) - lo[None, :], 0.0, None)


def interval_index(breakpoints, t) -> np.ndarray:
    """Index of the interval containing ``t``; -1 outside the support.

    Intervals are left-closed, right-open, except that a finite horizon
    belongs to the last interval.
    """
    b = np.asarray(breakpoints, dtype=float)
    t = np.asarray(t, dtype=float)
    k = np.searchsorted(b, t, side="right") - 1
    k = np.where(t == b[-1], len(b) - 2, k)
    k = np.where((t < b[0]) | (t > b[-1]) | (k > len(b) - 2), -1, k)
    return k.astype(int)


def cumulative_baseline(baseline: PiecewiseBaseline, t):
    """Integrated baseline hazard from 0 to ``t``.

    Closed form ``sum_s a_s (min(t, b_s+) - b_s-)`` over the intervals that
    ``t`` has reached.  Scalar in, scalar out.
    """
    scalar = np.ndim(t) == 0
    tt = np.asarray(t, dtype=float)
    if np.any(tt < 0):
        raise ValueError("duration must be nonnegative")
    out = interval_exposures(baseline.breakpoints, tt.ravel()) @ baseline.steps
    return float(out[0]) if scalar else out.reshape(tt.shape)


# ---------------------------------------------------------------------------
# parameter layout


@dataclass(frozen=True)
class Entry:
    transition: int
    block: str  # "log_alpha" | "beta" | "loading"
    name: str

    @property
    def key(self) -> str:
        return f"{self.transition}:{self.name}"


@dataclass
class ParamLayout:
    """Deterministic flat layout of all free parameters.

    Per transition: log baseline steps, then regression coefficients.  The
    free frailty loadings (phi for 1, 2 and psi for 3, 4) come last.
    """

    breakpoints: dict[int, np.ndarray]
    covariates: dict[int, list[str]]
    frailty: bool = True
    entries: list[Entry] = field(init=False)
    _index: dict[tuple[int, str, str], int] = field(init=False, repr=False)

    def __post_init__(self):
        self.breakpoints = {
            int(r): np.asarray(b, dtype=float) for r, b in sorted(self.breakpoints.items())
        }
        self.covariates = {int(r): list(c) for r, c in sorted(self.covariates.items())}
        if sorted(self.breakpoints) != sorted(TRANSITIONS):
            raise ValueError("layout needs a grid for each of transitions 1-4")
        entries = []
        for r in TRANSITIONS:
            for k in range(len(self.breakpoints[r]) - 1):
                entries.append(Entry(r, "log_alpha", f"log_alpha_{k + 1}"))
            for name in self.covariates.get(r, []):
                entries.append(Entry(r, "beta", name))
        if self.frailty:
            for r in TRANSITIONS:
                entries.append(Entry(r, "loading", FREE_LOADING[r]))
        self.entries = entries
        self._index = {(e.transition, e.block, e.name): i for i, e in enumerate(entries)}
        if len(self._index) != len(entries):
            raise ValueError("duplicate parameter names in layout")

    def __len__(self) -> int:
        return len(self.entries)

    def index(self, transition: int, block: str, name: str) -> int:
        return self._index[(int(transition), block, name)]

    def find(self, key: str) -> int:
        """Index of ``"r:name"`` (e.g. ``"3:mc"`` or ``"1:log_alpha_2"``)."""
        r, name = key.split(":", 1)
        r = int(r)
        for block in ("beta", "log_alpha", "loading"):
            if (r, block, name) in self._index:
                return self._index[(r, block, name)]
        raise KeyError(key)

    def alpha_slice(self, r: int) -> slice:
        start = self.index(r, "log_alpha", "log_alpha_1")
        return slice(start, start + len(self.breakpoints[r]) - 1)

    def beta_slice(self, r: int) -> slice:
        start = self.alpha_slice(r).stop
        return slice(start, start + len(self.covariates.get(r, [])))

    def loading_index(self, r: int) -> int | None:
        if not self.frailty:
            return None
        return self.index(r, "loading", FREE_LOADING[r])

    @property
    def keys(self) -> list[str]:
        return [e.key for e in self.entries]

    def to_json(self) -> dict:
        return {
            "breakpoints": {
                str(r): [None if math.isinf(x) else float(x) for x in b]
                for r, b in self.breakpoints.items()
            },
            "covariates": {str(r): c for r, c in self.covariates.items()},
            "frailty": self.frailty,
        }

    @classmethod
    def from_json(cls, d: Mapping) -> "ParamLayout":
        return cls(
            breakpoints={
                int(r): [math.inf if x is None else float(x) for x in b]
                for r, b in d["breakpoints"].items()
            },
            covariates={int(r): list(c) for r, c in d["covariates"].items()},
            frailty=bool(d["frailty"]),
        )


@dataclass
class ParamVector:
    layout: ParamLayout
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float).copy()
        if self.values.shape != (len(self.layout),):
            raise ValueError(
                f"expected {len(self.layout)} parameters, got {self.values.shape}"
            )

    def log_alpha(self, r: int) -> np.ndarray:
        return self.values[self.layout.alpha_slice(r)]

    def alpha(self, r: int) -> np.ndarray:
        return np.exp(self.log_alpha(r))

    def beta(self, r: int) -> np.ndarray:
        return self.values[self.layout.beta_slice(r)]

    def baseline(self, r: int) -> PiecewiseBaseline:
        return PiecewiseBaseline(self.layout.breakpoints[r], self.alpha(r))

    def loadings(self, r: int) -> tuple[float, float]:
        """(psi, phi) for transition ``r``; (0, 0) without frailty."""
        i = self.layout.loading_index(r)
        if i is None:
            return 0.0, 0.0
        free = float(self.values[i])
        return (1.0, free) if FIXED_LOADING[r] == "psi" else (free, 1.0)

    def __getitem__(self, key: str) -> float:
        return float(self.values[self.layout.find(key)])

    def to_dict(self) -> dict:
        out: dict = {}
        for e, v in zip(self.layout.entries, self.values):
            out.setdefault(str(e.transition), {})[e.name] = float(v)
        return out

    @classmethod
    def from_dict(cls, layout: ParamLayout, d: Mapping, default: float | None = None):
        """Fill ``layout`` from ``{"r": {name: value}}``.

        Names missing from ``d`` take ``default``; with ``default=None`` a
        missing name is an error.
        """
        vals = np.empty(len(layout))
        for i, e in enumerate(layout.entries):
            row = d.get(str(e.transition), d.get(e.transition, {}))
            if e.name in row:
                vals[i] = row[e.name]
            elif default is None:
                raise KeyError(f"missing parameter {e.key}")
            else:
                vals[i] = default
        return cls(layout, vals)


# ---------------------------------------------------------------------------
# scalar kernel


@dataclass
class SpellObs:
    """One spell ready for evaluation: covariate rows already built."""

    origin: State
    duration: float
    transition: int  # 0 when censored
    x: dict[int, np.ndarray]


def _log_multiplier(params: ParamVector, r: int, x, eps) -> float:
    psi, phi = params.loadings(r)
    x = np.asarray(x, dtype=float)
    beta = params.beta(r)
    if x.shape != beta.shape:
        raise ValueError(f"covariate row for transition {r} has length {len(x)}, need {len(beta)}")
    return float(x @ beta) + psi * eps[0] + phi * eps[1]


def hazard(params: ParamVector, r: int, t: float, x, eps=(0.0, 0.0)) -> float:
    """Hazard of transition ``r`` at duration ``t``; zero outside the grid."""
    k = int(interval_index(params.layout.breakpoints[r], t))
    if k < 0:
        return 0.0
    v = params.log_alpha(r)[k] + _log_multiplier(params, r, x, eps)
    return float(clamped_exp(v)[0])


def log_survival(params: ParamVector, origin, t: float, x_per_transition, eps=(0.0, 0.0)) -> float:
    total = 0.0
    for s in transitions_from(origin):
        lam = cumulative_baseline(params.baseline(s), t)
        if lam == 0.0:
            continue
        m, _ = clamped_exp(_log_multiplier(params, s, x_per_transition[s], eps))
        total -= float(m) * lam
    return total


def log_spell_density(params: ParamVector, spell: SpellObs, eps=(0.0, 0.0)) -> float:
    """``c log hazard + log survival`` for one spell."""
    out = log_survival(params, spell.origin, spell.duration, spell.x, eps)
    if spell.transition:
        r = spell.transition
        if r not in transitions_from(spell.origin):
            raise ValueError(f"transition {r} does not leave state {State(spell.origin).name}")
        k = int(interval_index(params.layout.breakpoints[r], spell.duration))
        if k < 0:
            raise ValueError(f"duration {spell.duration} outside the grid of transition {r}")
        out += params.log_alpha(r)[k] + _log_multiplier(params, r, spell.x[r], eps)
    return out


def frailty_correlation(psi: Iterable[float], phi: Iterable[float]) -> np.ndarray:
    """Correlation of the log-frailties ``psi_r e1 + phi_r e2`` across transitions."""
    L = np.column_stack([np.asarray(list(psi), float), np.asarray(list(phi), float)])
    norms = np.sqrt(np.sum(L**2, axis=1))
    if np.any(norms == 0):
        bad = [i + 1 for i in np.flatnonzero(norms == 0)]
        raise ValueError(f"correlation undefined: zero loadings for transition(s) {bad}")
    U = L / norms[:, None]
    C = U @ U.T
    np.fill_diagonal(C, 1.0)
    return np.clip(C, -1.0, 1.0)


def loading_vectors(params: ParamVector) -> tuple[np.ndarray, np.ndarray]:
    pairs = [params.loadings(r) for r in TRANSITIONS]
    return np.array([p[0] for p in pairs]), np.array([p[1] for p in pairs])
