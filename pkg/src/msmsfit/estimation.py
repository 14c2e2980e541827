"""Simulated maximum likelihood for the multi-spell hazard model.

Per patient ``i`` and frailty draw ``m`` the log-likelihood of all spells
collapses to::

    l_im = B_i + sum_r ( C_ir * w_rim - A_ir * exp(w_rim) )

with ``w_rim = psi_r e1_im + phi_r e2_im``, ``C_ir`` the number of observed
``r`` transitions, ``A_ir`` the summed ``exp(x'b) * Lambda_r(t)`` over the
patient's spells and ``B_i`` the summed ``log alpha + x'b`` of the observed
transitions.  The patient contribution is ``log(mean_m exp(l_im))``.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import optimize, stats

from .design import Design, DesignError, ModelSpec, build_design
from .ingest import SpellRecord
from .model import (
    FREE_LOADING,
    TRANSITIONS,
    ParamLayout,
    ParamVector,
    clamped_exp,
    frailty_correlation,
)
from .rng import keyed_rng

logger = logging.getLogger(__name__)

CHUNK_PATIENTS = 2048


class NonFiniteLikelihood(FloatingPointError):
    pass


@dataclass
class FrailtyDraws:
    """Standard normal pairs per patient, frozen for the whole fit."""

    patient_ids: np.ndarray
    eps: np.ndarray  # (n_patients, M, 2)
    seed: int | None = None

    @property
    def M(self) -> int:
        return self.eps.shape[1]

    @classmethod
    def generate(cls, patient_ids: Sequence[str], M: int, seed: int) -> "FrailtyDraws":
        ids = np.asarray(patient_ids)
        eps = np.empty((len(ids), M, 2))
        for i, pid in enumerate(ids):
            eps[i] = keyed_rng(seed, "frailty", str(pid)).standard_normal((M, 2))
        return cls(ids, eps, seed)

    @classmethod
    def zeros(cls, patient_ids: Sequence[str], M: int = 1) -> "FrailtyDraws":
        ids = np.asarray(patient_ids)
        return cls(ids, np.zeros((len(ids), M, 2)), None)


# ---------------------------------------------------------------------------
# likelihood


@dataclass
class _Block:
    X: np.ndarray
    expo: np.ndarray
    pat: np.ndarray
    ev_X_sum: np.ndarray
    ev_pat: np.ndarray
    ev_rows: np.ndarray
    ev_k: np.ndarray
    ev_per_interval: np.ndarray


@dataclass
class _Chunk:
    n: int
    blocks: dict[int, _Block]
    C: np.ndarray  # (n, 4) observed transitions per patient
    eps: np.ndarray  # (n, M, 2)
    first_spell: np.ndarray  # frame row of each patient's first spell


class SimulatedLikelihood:
    """Simulated log-likelihood and its analytic gradient.

    Patients are split into fixed chunks of :data:`CHUNK_PATIENTS`; partial
    sums are reduced in chunk order, so the result does not depend on the
    thread count.
    """

    def __init__(self, design: Design, draws: FrailtyDraws | None = None, threads: int = 1):
        self.design = design
        self.layout = design.layout
        self.frailty = design.layout.frailty
        f = design.frame
        if draws is None:
            draws = FrailtyDraws.zeros(f.patient_ids)
        if len(draws.patient_ids) != f.n_patients or np.any(draws.patient_ids != f.patient_ids):
            raise ValueError("frailty draws are not aligned with the patients of the design")
        self.draws = draws
        self.threads = max(1, int(threads))
        self.n_patients = f.n_patients
        self.last_clamps = 0
        self.n_evals = 0
        self._chunks = self._build_chunks()

    def _build_chunks(self) -> list[_Chunk]:
        d, f = self.design, self.design.frame
        patient = f.patient
        chunks = []
        starts = list(range(0, self.n_patients, CHUNK_PATIENTS))
        per_r = {}
        for r in TRANSITIONS:
            rows = d.rows[r]
            per_r[r] = (rows, d.X[r], d.exposures(r), d.events(r), d.event_interval(r))
        first_spell = np.searchsorted(patient, np.arange(self.n_patients))
        for p0 in starts:
            p1 = min(p0 + CHUNK_PATIENTS, self.n_patients)
            blocks = {}
            C = np.zeros((p1 - p0, 4))
            for r in TRANSITIONS:
                rows, X, expo, ev, k = per_r[r]
                pr = patient[rows]
                lo, hi = np.searchsorted(pr, p0), np.searchsorted(pr, p1)
                sl = slice(lo, hi)
                pat = pr[sl] - p0
                evm = ev[sl]
                kk = k[sl][evm]
                if np.any(kk < 0):
                    bad = rows[sl][evm][kk < 0][0]
                    raise DesignError(
                        f"spell {f.patient_ids[patient[bad]]}#{f.spell_index[bad]}: "
                        f"duration {f.duration[bad]} outside the grid of transition {r}"
                    )
                Xs = X[sl]
                blocks[r] = _Block(
                    X=Xs, expo=expo[sl], pat=pat, ev_X_sum=Xs[evm].sum(axis=0),
                    ev_pat=pat[evm], ev_rows=np.flatnonzero(evm), ev_k=kk,
                    ev_per_interval=np.bincount(kk, minlength=expo.shape[1]).astype(float),
                )
                C[:, r - 1] = np.bincount(pat[evm], minlength=p1 - p0)
            chunks.append(_Chunk(p1 - p0, blocks, C, self.draws.eps[p0:p1], first_spell[p0:p1]))
        return chunks

    # -- evaluation -------------------------------------------------------

    def _chunk_eval(self, ch: _Chunk, theta: np.ndarray, want_grad: bool):
        lay = self.layout
        n = ch.n
        A = np.zeros((n, 4))
        B = np.zeros(n)
        clamps = 0
        cache = {}
        for r, blk in ch.blocks.items():
            la = theta[lay.alpha_slice(r)]
            alpha = np.exp(la)
            eta = blk.X @ theta[lay.beta_slice(r)]
            em, c = clamped_exp(eta)
            clamps += c
            lam = blk.expo @ alpha
            a = em * lam
            A[:, r - 1] = np.bincount(blk.pat, weights=a, minlength=n)
            if len(blk.ev_rows):
                B += np.bincount(blk.ev_pat, weights=la[blk.ev_k] + eta[blk.ev_rows], minlength=n)
            cache[r] = (alpha, em, a)

        if self.frailty:
            psi = np.empty(4)
            phi = np.empty(4)
            for r in TRANSITIONS:
                i = lay.loading_index(r)
                if FREE_LOADING[r] == "phi":
                    psi[r - 1], phi[r - 1] = 1.0, theta[i]
                else:
                    psi[r - 1], phi[r - 1] = theta[i], 1.0
            e1, e2 = ch.eps[:, :, 0], ch.eps[:, :, 1]
            omega = e1[:, :, None] * psi + e2[:, :, None] * phi  # (n, M, 4)
            E, c = clamped_exp(omega)
            clamps += c
            ell = B[:, None] + np.einsum("nmr,nr->nm", omega, ch.C) - np.einsum("nmr,nr->nm", E, A)
            mx = ell.max(axis=1)
            w = np.exp(ell - mx[:, None])
            s = w.sum(axis=1)
            li = mx + np.log(s) - math.log(ch.eps.shape[1])
        else:
            li = B - A.sum(axis=1)

        if not np.all(np.isfinite(li)):
            self._raise_nonfinite(ch, li)
        if not want_grad:
            return float(li.sum()), None, clamps

        grad = np.zeros(len(lay))
        if self.frailty:
            w /= s[:, None]
            Ebar = np.einsum("nm,nmr->nr", w, E)
            for r in TRANSITIONS:
                i = lay.loading_index(r)
                j = 1 if FREE_LOADING[r] == "phi" else 0
                ej = ch.eps[:, :, j]
                term = ch.C[:, r - 1] * np.einsum("nm,nm->n", w, ej) - A[:, r - 1] * np.einsum(
                    "nm,nm,nm->n", w, E[:, :, r - 1], ej
                )
                grad[i] = term.sum()
        else:
            Ebar = np.ones((n, 4))
        for r, blk in ch.blocks.items():
            alpha, em, a = cache[r]
            wrow = Ebar[blk.pat, r - 1]
            grad[lay.beta_slice(r)] = blk.ev_X_sum - blk.X.T @ (a * wrow)
            grad[lay.alpha_slice(r)] = blk.ev_per_interval - alpha * (blk.expo.T @ (em * wrow))
        return float(li.sum()), grad, clamps

    def _raise_nonfinite(self, ch: _Chunk, li: np.ndarray):
        f = self.design.frame
        j = int(np.flatnonzero(~np.isfinite(li))[0])
        row = ch.first_spell[j]
        pid = f.patient_ids[f.patient[row]]
        spells = np.flatnonzero(f.patient == f.patient[row])
        raise NonFiniteLikelihood(
            f"non-finite likelihood contribution for patient {pid} "
            f"(spells {', '.join(str(f.spell_index[k]) for k in spells)})"
        )

    def _evaluate(self, theta, want_grad: bool):
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (len(self.layout),):
            raise ValueError(f"expected {len(self.layout)} parameters")
        self.n_evals += 1
        def fn(ch):
            # non-finite contributions are detected and reported per patient
            with np.errstate(invalid="ignore", over="ignore"):
                return self._chunk_eval(ch, theta, want_grad)

        if self.threads > 1 and len(self._chunks) > 1:
            with ThreadPoolExecutor(self.threads) as pool:
                parts = list(pool.map(fn, self._chunks))
        else:
            parts = [fn(ch) for ch in self._chunks]
        ll = 0.0
        grad = np.zeros(len(self.layout)) if want_grad else None
        clamps = 0
        for v, g, c in parts:
            ll += v
            clamps += c
            if want_grad:
                grad += g
        self.last_clamps = clamps
        return ll, grad

    def loglik(self, theta) -> float:
        return self._evaluate(theta, False)[0]

    def gradient(self, theta) -> np.ndarray:
        return self._evaluate(theta, True)[1]

    def loglik_and_grad(self, theta) -> tuple[float, np.ndarray]:
        return self._evaluate(theta, True)

    def start_values(self) -> np.ndarray:
        """Empirical occurrence/exposure log-rates, zero betas, loadings 0.1."""
        d = self.design
        theta = np.zeros(len(self.layout))
        for r in TRANSITIONS:
            expo = d.exposures(r).sum(axis=0)
            k = d.event_interval(r)[d.events(r)]
            events = np.bincount(k[k >= 0], minlength=len(expo)).astype(float)
            if np.any(expo <= 0):
                empty = np.flatnonzero(expo <= 0) + 1
                raise DesignError(f"transition {r}: no exposure in interval(s) {empty.tolist()}")
            theta[self.layout.alpha_slice(r)] = np.log(np.maximum(events, 0.5) / expo)
            i = self.layout.loading_index(r)
            if i is not None:
                theta[i] = 0.1
        return theta


def simulated_loglik(params: ParamVector, design: Design, draws: FrailtyDraws | None = None,
                     threads: int = 1) -> float:
    return SimulatedLikelihood(design, draws, threads).loglik(params.values)


def gradient(params: ParamVector, design: Design, draws: FrailtyDraws | None = None,
             threads: int = 1) -> np.ndarray:
    return SimulatedLikelihood(design, draws, threads).gradient(params.values)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class _BfgsResult:
    x: np.ndarray
    f: float
    g: np.ndarray
    n_iter: int
    converged: bool
    message: str
    trace: list[float]


def _bfgs(fg, x0, converged, max_iter):
    """Minimize with BFGS and a strong-Wolfe line search.

    ``fg(x) -> (f, g)``; ``converged(f, g) -> bool`` is the stopping rule.
    Every accepted step decreases ``f``.
    """
    cache = {}

    def both(x):
        key = x.tobytes()
        if key not in cache:
            cache.clear()
            cache[key] = fg(x)
        return cache[key]

    x = np.array(x0, dtype=float)
    f, g = both(x)
    trace = [f]
    n = len(x)
    H = np.eye(n) / max(1.0, np.linalg.norm(g))
    first = True
    for it in range(max_iter):
        if converged(f, g):
            return _BfgsResult(x, f, g, it, True, "converged", trace)
        p = -H @ g
        if not np.all(np.isfinite(p)) or g @ p >= 0:
            H = np.eye(n) / max(1.0, np.linalg.norm(g))
            p = -H @ g
        with np.errstate(all="ignore"), warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)  # non-convergence falls back to Armijo
            ls = optimize.line_search(
                lambda z: both(z)[0], lambda z: both(z)[1], x, p, gfk=g, old_fval=f, maxiter=30
            )
        step = ls[0]
        if step is None:
            step = 1.0
            while step > 1e-12:
                fn, _ = both(x + step * p)
                if np.isfinite(fn) and fn <= f + 1e-4 * step * (g @ p):
                    break
                step *= 0.5
            else:
                return _BfgsResult(x, f, g, it, False, "line search failed", trace)
        x_new = x + step * p
        f_new, g_new = both(x_new)
        if not f_new <= f:
            return _BfgsResult(x, f, g, it, False, "no decrease along search direction", trace)
        s, y = x_new - x, g_new - g
        x, f, g = x_new, f_new, g_new
        trace.append(f)
        sy = s @ y
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            if first:
                H = np.eye(n) * (sy / (y @ y))
                first = False
            rho = 1.0 / sy
            Hy = H @ y
            H = H - rho * (np.outer(s, Hy) + np.outer(Hy, s)) + (rho * rho * (y @ Hy) + rho) * np.outer(s, s)
    return _BfgsResult(x, f, g, max_iter, converged(f, g), "maximum iterations reached", trace)


# ---------------------------------------------------------------------------
# results


@dataclass
class FitResult:
    layout: ParamLayout
    params: ParamVector
    covariance: np.ndarray | None
    loglik: float
    converged: bool
    n_iter: int
    grad_sup_norm: float
    tol: float
    message: str
    clamps: int
    trace: list[float]
    n_patients: int
    n_spells: int
    draws: int
    seed: int | None
    spec: dict
    diagnostics: dict = field(default_factory=dict)

    @property
    def se(self) -> np.ndarray:
        if self.covariance is None:
            return np.full(len(self.layout), np.nan)
        return np.sqrt(np.clip(np.diag(self.covariance), 0.0, None))

    def correlation(self) -> np.ndarray | None:
        if not self.layout.frailty:
            return None
        psi, phi = zip(*(self.params.loadings(r) for r in TRANSITIONS))
        return frailty_correlation(psi, phi)

    def correlation_se(self) -> np.ndarray | None:
        """Delta-method standard errors of the frailty correlations."""
        if not self.layout.frailty or self.covariance is None:
            return None
        idx = [self.layout.loading_index(r) for r in TRANSITIONS]
        V = self.covariance[np.ix_(idx, idx)]

        def corr(free):
            psi, phi = [], []
            for r, v in zip(TRANSITIONS, free):
                if FREE_LOADING[r] == "phi":
                    psi.append(1.0), phi.append(v)
                else:
                    psi.append(v), phi.append(1.0)
            return frailty_correlation(psi, phi).ravel()

        x0 = self.params.values[idx]
        J = np.empty((16, 4))
        for j in range(4):
            h = 1e-6 * max(1.0, abs(x0[j]))
            e = np.zeros(4)
            e[j] = h
            J[:, j] = (corr(x0 + e) - corr(x0 - e)) / (2 * h)
        return np.sqrt(np.clip(np.diag(J @ V @ J.T), 0, None)).reshape(4, 4)

    def coefficient_rows(self) -> list[dict]:
        se = self.se
        return [
            {"transition": e.transition, "block": e.block, "name": e.name,
             "estimate": float(v), "sd": float(s)}
            for e, v, s in zip(self.layout.entries, self.params.values, se)
        ]

    def to_json(self) -> dict:
        corr = self.correlation()
        corr_se = self.correlation_se()
        return {
            "converged": self.converged,
            "message": self.message,
            "loglik": self.loglik,
            "n_iter": self.n_iter,
            "grad_sup_norm": self.grad_sup_norm,
            "tol": self.tol,
            "clamps": self.clamps,
            "n_patients": self.n_patients,
            "n_spells": self.n_spells,
            "draws": self.draws,
            "seed": self.seed,
            "layout": self.layout.to_json(),
            "coefficients": self.coefficient_rows(),
            "covariance_file": "covariance.npy" if self.covariance is not None else None,
            "correlation": None if corr is None else corr.tolist(),
            "correlation_se": None if corr_se is None else corr_se.tolist(),
            "trace": self.trace,
            "spec": self.spec,
            "diagnostics": self.diagnostics,
        }

    def save(self, outdir) -> list[Path]:
        out = Path(outdir)
        out.mkdir(parents=True, exist_ok=True)
        paths = [out / "fit.json", out / "coefficients.csv"]
        with open(paths[0], "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        write_coefficients_csv(self, paths[1])
        if self.covariance is not None:
            np.save(out / "covariance.npy", self.covariance)
            paths.append(out / "covariance.npy")
        return paths

    @classmethod
    def load(cls, outdir) -> "FitResult":
        out = Path(outdir)
        with open(out / "fit.json", encoding="utf-8") as fh:
            d = json.load(fh)
        layout = ParamLayout.from_json(d["layout"])
        values = np.array([c["estimate"] for c in d["coefficients"]])
        cov = np.load(out / d["covariance_file"]) if d.get("covariance_file") else None
        return cls(
            layout=layout, params=ParamVector(layout, values), covariance=cov,
            loglik=d["loglik"], converged=d["converged"], n_iter=d["n_iter"],
            grad_sup_norm=d["grad_sup_norm"], tol=d["tol"], message=d["message"],
            clamps=d["clamps"], trace=d["trace"], n_patients=d["n_patients"],
            n_spells=d["n_spells"], draws=d["draws"], seed=d["seed"], spec=d["spec"],
            diagnostics=d.get("diagnostics", {}),
        )


def write_coefficients_csv(fit: FitResult, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["transition", "name", "estimate", "sd"])
        for row in fit.coefficient_rows():
            w.writerow([row["transition"], row["name"], repr(row["estimate"]), repr(row["sd"])])


def numerical_hessian(grad_fn, x: np.ndarray, rel_step: float = 1e-4) -> np.ndarray:
    """Central differences of an analytic gradient, symmetrized."""
    n = len(x)
    H = np.empty((n, n))
    for j in range(n):
        h = rel_step * max(1.0, abs(x[j]))
        e = np.zeros(n)
        e[j] = h
        H[:, j] = (grad_fn(x + e) - grad_fn(x - e)) / (2 * h)
    return 0.5 * (H + H.T)


def fit(
    spells: Sequence[SpellRecord] | None,
    spec: ModelSpec,
    *,
    draws: int | None = None,
    seed: int | None = None,
    tol: float = 1e-6,
    max_iter: int = 1000,
    threads: int = 1,
    design: Design | None = None,
    frailty_draws: FrailtyDraws | None = None,
    start: np.ndarray | None = None,
    covariance: bool = True,
) -> FitResult:
    """Maximize the simulated log-likelihood.

    Convergence means a gradient sup-norm of at most ``tol * (1 + |logL|)``.
    The covariance is the inverse of the negative Hessian, obtained by
    central differences of the analytic gradient; it is omitted (with a
    diagnostic) when that matrix is not positive definite.
    """
    if design is None:
        design = build_design(spells, spec)
    M = spec.draws if draws is None else int(draws)
    seed = spec.seed if seed is None else int(seed)
    if frailty_draws is None:
        if design.layout.frailty:
            frailty_draws = FrailtyDraws.generate(design.frame.patient_ids, M, seed)
        else:
            frailty_draws = FrailtyDraws.zeros(design.frame.patient_ids)
    lik = SimulatedLikelihood(design, frailty_draws, threads)
    lay = design.layout

    # beta_j = u_j / sd_j keeps the optimizer in standardized units
    D = np.ones(len(lay))
    for r, sc in design.column_scales().items():
        D[lay.beta_slice(r)] = 1.0 / sc
    theta0 = lik.start_values() if start is None else np.asarray(start, float)
    scale = 1.0 / max(1, lik.n_patients)

    def fg(u):
        ll, g = lik.loglik_and_grad(u * D)
        return -ll * scale, -g * D * scale

    def converged(fval, gval):
        ll = -fval / scale
        g_theta = -gval / scale / D
        return np.max(np.abs(g_theta)) <= tol * (1.0 + abs(ll))

    res = _bfgs(fg, theta0 / D, converged, max_iter)
    theta = res.x * D
    ll, g = lik.loglik_and_grad(theta)
    clamps = lik.last_clamps
    grad_sup = float(np.max(np.abs(g))) if len(g) else 0.0
    diagnostics: dict = {"n_evals": lik.n_evals, "dropped_columns": design.dropped}
    cov = None
    if covariance:
        H_u = numerical_hessian(lambda u: lik.gradient(u * D) * D, res.x)
        try:
            w = np.linalg.eigvalsh(-H_u)
            if w.min() <= w.max() * 1e-12:
                raise np.linalg.LinAlgError(f"negative Hessian not positive definite (min eig {w.min():.3g})")
            cov_u = np.linalg.inv(-H_u)
            cov = D[:, None] * (0.5 * (cov_u + cov_u.T)) * D[None, :]
            diagnostics["hessian_min_eig"] = float(w.min())
        except np.linalg.LinAlgError as ex:
            diagnostics["covariance_error"] = str(ex)
            logger.warning("covariance omitted: %s", ex)
    trace = [-t / scale for t in res.trace]
    return FitResult(
        layout=lay, params=ParamVector(lay, theta), covariance=cov, loglik=ll,
        converged=bool(res.converged), n_iter=res.n_iter, grad_sup_norm=grad_sup, tol=tol,
        message=res.message, clamps=clamps, trace=trace, n_patients=lik.n_patients,
        n_spells=len(design.frame), draws=frailty_draws.M if lay.frailty else 0,
        seed=seed if lay.frailty else None, spec=spec.to_json(), diagnostics=diagnostics,
    )


def wald_test(fit_result: FitResult, names: Sequence[str]) -> dict:
    """Joint chi-square test that the named coefficients (``"r:name"``) are zero."""
    if fit_result.covariance is None:
        raise ValueError("fit has no covariance matrix")
    idx = [fit_result.layout.find(n) for n in names]
    est = fit_result.params.values[idx]
    V = fit_result.covariance[np.ix_(idx, idx)]
    try:
        L = np.linalg.cholesky(V)
    except np.linalg.LinAlgError as ex:
        raise ValueError(f"singular covariance for {list(names)}") from ex
    z = np.linalg.solve(L, est)
    stat = float(z @ z)
    df = len(idx)
    return {"statistic": stat, "df": df, "p_value": float(stats.chi2.sf(stat, df))}


PRETREND_COLUMNS = ("pre_mc_q", "pre_mc_q2", "pre_mc_q3")


def pretrend_table(fit_result: FitResult | None, design: Design | None, degree: int) -> list[dict]:
    """Per-transition joint Wald test of the later-adopter trend terms.

    ``design`` is the pre-reform design the fit was run on; ``None`` for
    either argument means the test could not be run and yields NA rows.
    """
    names = PRETREND_COLUMNS[:degree]
    rows = []
    for r in TRANSITIONS:
        row = {"transition": r, "statistic": None, "df": None, "p_value": None, "note": ""}
        if design is None or fit_result is None:
            row["note"] = "no later-adopting department in the window"
        else:
            keys = [f"{r}:{n}" for n in names if n in design.columns[r]]
            if len(keys) < len(names):
                row["note"] = "trend interaction not identified"
            elif fit_result.covariance is None:
                row["note"] = "covariance unavailable"
            else:
                try:
                    row.update(wald_test(fit_result, keys))
                except ValueError as ex:
                    row["note"] = str(ex)
        rows.append(row)
    return rows
