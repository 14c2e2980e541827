"""Treatment effects on expected durations.

For transition ``r`` the latent duration has hazard
``alpha_k * exp(theta * mc + z) * nu`` on the step grid.  Its mean is a sum
of closed-form segment integrals; transitions whose grid ends at a horizon
use the restricted mean ``E[min(T, H)]``.  Averaging is first over frailty
draws and then over the treated rows.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from .design import Design
from .model import TRANSITIONS, ParamVector, PiecewiseBaseline
from .rng import keyed_rng

ROW_CHUNK = 4096


def _grid(baseline: PiecewiseBaseline, horizon: float | None):
    b = baseline.breakpoints
    a = baseline.steps
    if horizon is None:
        return b, a
    if horizon <= b[0]:
        raise ValueError(f"horizon {horizon} is not beyond the grid start {b[0]}")
    keep = int(np.searchsorted(b, horizon, side="left"))
    b = np.concatenate([b[:keep], [horizon]])
    return b, a[: len(b) - 1]


def mean_duration(baseline: PiecewiseBaseline, k: np.ndarray, horizon: float | None = None) -> np.ndarray:
    """Expected (restricted) duration for rate multipliers ``k``.

    The hazard is ``k * alpha`` after the grid start and zero before it, so
    the duration is at least the grid start.
    """
    b, a = _grid(baseline, horizon)
    k = np.asarray(k, dtype=float)
    out = np.full(k.shape, b[0])
    logS = np.zeros(k.shape)
    for j in range(len(a)):
        rho = k * a[j]
        S = np.exp(logS)
        L = b[j + 1] - b[j]
        if math.isinf(L):
            if np.any(rho <= 0):
                raise FloatingPointError("non-integrable tail: zero hazard on an unbounded interval")
            out += S / rho
        else:
            with np.errstate(invalid="ignore", divide="ignore"):
                seg = np.where(rho > 0, -np.expm1(-rho * L) / rho, L)
            out += S * seg
            logS -= rho * L
    return out


def density(baseline: PiecewiseBaseline, k: float, t) -> np.ndarray:
    """Latent duration density ``k alpha(t) S(t)`` (zero past a horizon)."""
    t = np.asarray(t, dtype=float)
    return k * baseline.rate(t) * np.exp(-k * baseline.cumulative(t))


def survival(baseline: PiecewiseBaseline, k: float, t) -> np.ndarray:
    return np.exp(-k * np.asarray(baseline.cumulative(t)))


def frailty_omega(params: ParamVector, r: int, eps: np.ndarray) -> np.ndarray:
    psi, phi = params.loadings(r)
    eps = np.atleast_2d(eps)
    return psi * eps[:, 0] + phi * eps[:, 1]


def expected_duration(params: ParamVector, r: int, z_values, eps_draws, mc: int,
                      horizon: float | None = None, theta=None) -> float:
    """Average expected duration of transition ``r`` over rows and frailty draws.

    ``z_values`` are the treated rows' linear predictors without the
    treatment contribution; ``theta`` is that contribution (scalar or one per
    row, defaulting to the ``mc`` coefficient) and is switched on by ``mc``.
    """
    z = np.asarray(z_values, dtype=float)
    if theta is None:
        theta = params[f"{r}:mc"] if "mc" in params.layout.covariates[r] else 0.0
    th = np.broadcast_to(np.asarray(theta, dtype=float), z.shape)
    omega = frailty_omega(params, r, eps_draws)
    base = params.baseline(r)
    total = 0.0
    for s in range(0, len(z), ROW_CHUNK):
        lin = z[s:s + ROW_CHUNK] + (th[s:s + ROW_CHUNK] if mc else 0.0)
        k = np.exp(lin[:, None] + omega[None, :])
        total += mean_duration(base, k, horizon).mean(axis=1).sum()
    return total / len(z)


# ---------------------------------------------------------------------------


@dataclass
class AttResult:
    transition: int
    group: str
    estimate: float  # duration scale, days
    se: float | None
    hazard_att: float
    hazard_se: float | None
    d1: float
    d0: float
    n_rows: int
    eps_draws: int
    param_draws: int
    horizon: float | None
    sign_check: str = ""

    def to_row(self) -> dict:
        return asdict(self)


@dataclass
class TreatedRows:
    """Treated rows of one transition and group with their MC contribution."""

    transition: int
    group: str
    rows: np.ndarray  # indices into design.X[r]
    mc_weights: np.ndarray  # treatment-block columns of those rows
    mc_index: np.ndarray  # layout indices of the treatment block

    def split(self, params: ParamVector, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        eta = X[self.rows] @ params.beta(self.transition)
        tau = self.mc_weights @ params.values[self.mc_index]
        return eta - tau, tau


def treated_rows(design: Design, r: int, group: str = "overall", max_rows: int | None = None,
                 seed: int = 0) -> list[TreatedRows]:
    """Rows with an active treatment indicator, overall or by specialty category."""
    cols = design.treatment_columns(r)
    if not cols:
        raise ValueError(f"transition {r} has no treatment column")
    X = design.X[r]
    W = X[:, cols]
    treated = np.flatnonzero(np.any(W != 0, axis=1))
    names = [design.columns[r][j] for j in cols]
    idx = np.array([design.layout.index(r, "beta", n) for n in names])
    if group == "overall":
        groups = {"overall": treated}
    elif group == "specialty":
        cat = design.evaluator().spec_cat[design.rows[r]]
        groups = {str(c): treated[cat[treated] == c] for c in sorted(set(cat[treated].tolist()))}
    else:
        raise ValueError("group must be 'overall' or 'specialty'")
    out = []
    for g, rows in groups.items():
        if len(rows) == 0:
            raise ValueError(f"no treated rows for transition {r}, group {g!r}")
        if max_rows is not None and len(rows) > max_rows:
            pick = keyed_rng(seed, "att-rows", f"{r}:{g}").choice(len(rows), max_rows, replace=False)
            rows = rows[np.sort(pick)]
        out.append(TreatedRows(r, g, rows, W[rows], idx))
    return out


def duration_att(params: ParamVector, X: np.ndarray, tr: TreatedRows, eps: np.ndarray,
                 horizon: float | None = None) -> tuple[float, float]:
    """``(D(1), D(0))`` for one set of treated rows."""
    z, tau = tr.split(params, X)
    d1 = expected_duration(params, tr.transition, z, eps, 1, horizon, theta=tau)
    d0 = expected_duration(params, tr.transition, z, eps, 0, horizon, theta=tau)
    return d1, d0


def psd_factor(cov: np.ndarray) -> np.ndarray:
    """``F`` with ``F @ F.T == cov`` from the eigen-decomposition."""
    cov = 0.5 * (np.asarray(cov, float) + np.asarray(cov, float).T)
    w, Q = np.linalg.eigh(cov)
    scale = max(1.0, float(np.max(np.abs(w)))) if len(w) else 1.0
    if len(w) and w.min() < -1e-8 * scale:
        raise np.linalg.LinAlgError(f"covariance is not positive semidefinite (min eigenvalue {w.min():.3g})")
    return Q * np.sqrt(np.clip(w, 0.0, None))


def krinsky_robb_sd(params: ParamVector, covariance: np.ndarray,
                    functional: Callable[[ParamVector], float], n_draws: int, seed: int) -> float:
    """Sample SD of ``functional`` over parameter draws from ``N(estimate, cov)``."""
    if n_draws < 2:
        raise ValueError("need at least two parameter draws")
    F = psd_factor(covariance)
    g = keyed_rng(seed, "krinsky-robb")
    Z = g.standard_normal((n_draws, F.shape[1]))
    vals = np.empty(n_draws)
    for d in range(n_draws):
        vals[d] = functional(ParamVector(params.layout, params.values + F @ Z[d]))
    return float(np.std(vals - vals[0], ddof=1))  # shift keeps a constant functional at exactly 0


def att_duration(params: ParamVector, design: Design, r: int, *, covariance: np.ndarray | None = None,
                 group: str = "overall", horizon: float | None = None, eps_draws: int = 100,
                 param_draws: int = 0, seed: int = 0, max_rows: int | None = None) -> list[AttResult]:
    """Duration-scale ATT ``D(1) - D(0)`` for transition ``r``.

    ``D(mc)`` averages the expected duration over the treated rows' realized
    linear predictors, with the treatment contribution on (``mc=1``) or off.
    Frailty draws come from the ``att-frailty`` stream and stay fixed across
    parameter draws.
    """
    if r not in TRANSITIONS:
        raise ValueError(f"unknown transition {r}")
    if list(params.layout.covariates[r]) != list(design.columns[r]):
        raise ValueError(f"parameter layout does not match the design columns of transition {r}")
    eps = keyed_rng(seed, "att-frailty", str(r)).standard_normal((eps_draws, 2))
    if not params.layout.frailty:
        eps = np.zeros((1, 2))
    X = design.X[r]
    out = []
    for tr in treated_rows(design, r, group, max_rows, seed):
        d1, d0 = duration_att(params, X, tr, eps, horizon)
        gbar = tr.mc_weights.mean(axis=0)
        h_att = float(gbar @ params.values[tr.mc_index])
        h_se = se = None
        if covariance is not None:
            V = covariance[np.ix_(tr.mc_index, tr.mc_index)]
            h_se = float(math.sqrt(max(0.0, gbar @ V @ gbar)))
            if param_draws >= 2:
                se = krinsky_robb_sd(
                    params, covariance,
                    lambda p, tr=tr: float(np.subtract(*duration_att(p, X, tr, eps, horizon))),
                    param_draws, seed,
                )
        diff = d1 - d0
        check = ""
        if h_se and abs(h_att) > 2 * h_se and diff != 0 and np.sign(diff) == np.sign(h_att):
            check = "duration effect has the same sign as the hazard effect"
        out.append(AttResult(
            transition=r, group=tr.group, estimate=float(diff), se=se, hazard_att=h_att,
            hazard_se=h_se, d1=float(d1), d0=float(d0), n_rows=len(tr.rows),
            eps_draws=len(eps), param_draws=param_draws if se is not None else 0,
            horizon=horizon if horizon is not None else params.baseline(r).horizon,
            sign_check=check,
        ))
    return out


ATT_COLUMNS = ["transition", "group", "estimate", "se", "hazard_att", "hazard_se", "d1", "d0",
               "n_rows", "eps_draws", "param_draws", "horizon", "sign_check"]


def _cell(v) -> str:
    if v is None:
        return "NA"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_att_csv(results: Sequence[AttResult], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ATT_COLUMNS)
        for res in results:
            row = res.to_row()
            w.writerow([_cell(row[c]) for c in ATT_COLUMNS])


def write_att_json(results: Sequence[AttResult], path, meta: dict | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"results": [r.to_row() for r in results], "meta": meta or {}}, fh, indent=2)
        fh.write("\n")
