"""Calibration toolkit for score-guided beam search.

Closed-form overestimation bias and maximum useful beam width for noisy
scorers, Monte Carlo checks of those formulas, and diagnostics for real or
simulated beam-selection traces.
"""

__version__ = "0.1.0"

from .evt_bias import (  # noqa: E402
    BiasReport,
    GumbelParams,
    PoolGeometry,
    TwoClassScorerModel,
    bias_approx,
    bias_exact,
    bias_report,
    effective_gap,
    gev_params,
    max_useful_beam_width,
    max_useful_pool,
    search_benefit_criterion,
    suboptimal_bound,
)
from .stats_core import RandomStream  # noqa: E402
