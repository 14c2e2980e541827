"""Multi-state multi-spell hazard models with correlated frailty.

Piecewise-constant baselines, difference-in-differences treatment
coefficients, simulated maximum likelihood and expected-duration effects.
"""

from .att import AttResult, att_duration, expected_duration, krinsky_robb_sd
from .design import Design, ModelSpec, build_design, build_pretrend_design
from .estimation import FitResult, FrailtyDraws, SimulatedLikelihood, fit, simulated_loglik, wald_test
from .ingest import RawEvent, SpellRecord, build_spells, load_spell_csv, summarize, write_spell_csv
from .model import (
    ParamLayout,
    ParamVector,
    PiecewiseBaseline,
    State,
    cumulative_baseline,
    frailty_correlation,
    hazard,
    log_spell_density,
    log_survival,
)
from .simulator import ScenarioSpec, calibrate, sample_spell, simulate_population

__all__ = [
    "AttResult", "Design", "FitResult", "FrailtyDraws", "ModelSpec", "ParamLayout", "ParamVector",
    "PiecewiseBaseline", "RawEvent", "ScenarioSpec", "SimulatedLikelihood", "SpellRecord", "State",
    "att_duration", "build_design", "build_pretrend_design", "build_spells", "calibrate",
    "cumulative_baseline", "expected_duration", "fit", "frailty_correlation", "hazard",
    "krinsky_robb_sd", "load_spell_csv", "log_spell_density", "log_survival", "sample_spell",
    "simulate_population", "simulated_loglik", "summarize", "wald_test", "write_spell_csv",
]
