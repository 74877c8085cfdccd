"""Closed-form overestimation bias and beam-width limits for noisy scorers.

Model: one correct-type candidate with true quality ``mu_w + delta`` and
``m = n - 1`` incorrect-type candidates with true quality ``mu_w``; every score
carries independent N(0, sigma^2) noise. The maximum of the incorrect scores is
approximated by its Gumbel limit, whose mean gives the bias ``B(sigma, m)``.
"""
from __future__ import annotations

import math
import sys
from dataclasses import dataclass, field

from .stats_core import EULER_MASCHERONI, EULER_NUMBER, normal_quantile

# exp() overflows just past 709; report saturation before that.
SATURATION_EXPONENT = 700.0
MAX_BEAM_WIDTH = sys.maxsize


@dataclass(frozen=True)
class TwoClassScorerModel:
    """Quality gap, scorer noise and incorrect-type quality, in score units.

    ``simulation_only`` relaxes the strict positivity checks to ``>= 0`` so the
    simulator can run the degenerate noiseless or zero-gap cases. Closed-form
    functions reject such models.
    """

    delta: float
    sigma: float
    mu_w: float = 0.0
    simulation_only: bool = field(default=False, compare=False)

    def __post_init__(self):
        for name in ("delta", "sigma", "mu_w"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        if self.simulation_only:
            if self.delta < 0 or self.sigma < 0:
                raise ValueError("delta and sigma must be non-negative")
        elif not (self.delta > 0 and self.sigma > 0):
            raise ValueError(f"need delta > 0 and sigma > 0, got delta={self.delta}, sigma={self.sigma}")

    @property
    def mu_c(self) -> float:
        return self.mu_w + self.delta

    @property
    def snr(self) -> float:
        return self.delta / self.sigma


@dataclass(frozen=True)
class GumbelParams:
    location: float
    scale: float

    def mean(self) -> float:
        return self.location + EULER_MASCHERONI * self.scale


@dataclass(frozen=True)
class PoolGeometry:
    """Beam width and candidate pool size; the pool defaults to ``k**2``."""

    beam_width: int
    pool_size: int | None = None

    def __post_init__(self):
        if self.beam_width < 1:
            raise ValueError(f"beam_width must be >= 1, got {self.beam_width}")
        if self.pool_size is None:
            object.__setattr__(self, "pool_size", self.beam_width**2)
        if self.pool_size < 1:
            raise ValueError(f"pool_size must be >= 1, got {self.pool_size}")

    @property
    def incorrect_count(self) -> int:
        return self.pool_size - 1


@dataclass(frozen=True)
class BiasReport:
    bias_exact: float
    bias_approx: float
    effective_gap: float
    bound: float
    bound_vacuous: bool
    criterion_holds: bool
    n_hat: float
    k_hat: int
    n_hat_saturated: bool = False

    def as_dict(self) -> dict:
        return {
            "bias_exact": self.bias_exact,
            "bias_approx": self.bias_approx,
            "effective_gap": self.effective_gap,
            "bound": self.bound,
            "bound_vacuous": self.bound_vacuous,
            "criterion_holds": self.criterion_holds,
            "n_hat": self.n_hat,
            "k_hat": self.k_hat,
            "n_hat_saturated": self.n_hat_saturated,
        }


def _check_sigma(sigma: float) -> float:
    sigma = float(sigma)
    if not (sigma > 0 and math.isfinite(sigma)):
        raise ValueError(f"sigma must be a positive finite number, got {sigma}")
    return sigma


def _check_m(m: int) -> int:
    if int(m) != m or m < 2:
        raise ValueError(f"m must be an integer >= 2, got {m}")
    return int(m)


def _check_n(n: int) -> int:
    if int(n) != n or n < 3:
        raise ValueError(f"pool size n must be an integer >= 3, got {n}")
    return int(n)


def gev_params(sigma: float, m: int) -> GumbelParams:
    """Gumbel location and scale for the max of ``m`` N(0, sigma^2) draws.

    The location is measured relative to the common mean of the draws.
    """
    sigma = _check_sigma(sigma)
    m = _check_m(m)
    q_loc = normal_quantile(1.0 - 1.0 / m)
    q_scale = normal_quantile(1.0 - 1.0 / (EULER_NUMBER * m))
    return GumbelParams(location=sigma * q_loc, scale=sigma * (q_scale - q_loc))


def bias_exact(sigma: float, m: int) -> float:
    return gev_params(sigma, m).mean()


def bias_approx(sigma: float, m: int) -> float:
    sigma = _check_sigma(sigma)
    m = _check_m(m)
    return sigma * math.sqrt(2.0 * math.log(m))


def _bias_or_zero(sigma: float, m: int) -> float:
    # m <= 1: a single draw (or none) has no maximisation bias
    return bias_exact(sigma, m) if m >= 2 else 0.0


def effective_gap(model: TwoClassScorerModel, n: int) -> float:
    n = _check_n(n)
    return model.delta - bias_exact(model.sigma, n - 1)


def _cantelli(gap: float, sigma: float) -> tuple[float, bool]:
    if not gap > 0:
        return 1.0, True
    bound = 1.0 / (1.0 + gap * gap / (2.0 * sigma * sigma))
    # keep inside (0, 1]
    return max(bound, sys.float_info.min), False


def suboptimal_bound(model: TwoClassScorerModel, n: int) -> tuple[float, bool]:
    """Cantelli bound on Pr(best incorrect score beats the correct score).

    Returns ``(bound, vacuous)``; ``vacuous`` is set (and the bound is 1) when
    the effective gap is not positive.
    """
    return _cantelli(effective_gap(model, n), model.sigma)


def search_benefit_criterion(model: TwoClassScorerModel, n: int) -> bool:
    n = _check_n(n)
    return model.delta > bias_approx(model.sigma, n - 1)


def log_max_useful_pool_excess(model: TwoClassScorerModel) -> float:
    """``log(n_hat - 1)``, i.e. ``delta^2 / (2 sigma^2)``."""
    ratio = model.delta / model.sigma
    return 0.5 * ratio * ratio


def pool_is_saturated(model: TwoClassScorerModel) -> bool:
    return log_max_useful_pool_excess(model) > SATURATION_EXPONENT


def max_useful_pool(model: TwoClassScorerModel) -> float:
    """Largest pool size at which search is still expected to help.

    Returns ``math.inf`` when the exponent passes the saturation threshold; use
    :func:`pool_is_saturated` to tell that case apart.
    """
    _check_sigma(model.sigma)
    exponent = log_max_useful_pool_excess(model)
    if exponent > SATURATION_EXPONENT:
        return math.inf
    return 1.0 + math.exp(exponent)


def beam_width_for_pool(n_hat: float) -> int:
    """``floor(sqrt(n_hat))`` under the symmetric ``n = k**2`` expansion, at least 1."""
    if math.isinf(n_hat):
        return MAX_BEAM_WIDTH
    return max(1, min(MAX_BEAM_WIDTH, math.isqrt(math.floor(n_hat))))


def max_useful_beam_width(model: TwoClassScorerModel) -> int:
    return beam_width_for_pool(max_useful_pool(model))


def bias_report(model: TwoClassScorerModel, geometry: PoolGeometry) -> BiasReport:
    """Bundle bias, effective gap, bound, criterion and limits for one configuration.

    Pools of one or two candidates are accepted: the bias is taken as 0 there
    (no maximisation over incorrect candidates), so the gap is the full delta.
    """
    n = geometry.pool_size
    m = n - 1
    b_exact = _bias_or_zero(model.sigma, m)
    b_approx = bias_approx(model.sigma, m) if m >= 2 else 0.0
    gap = model.delta - b_exact
    bound, vacuous = _cantelli(gap, model.sigma)
    n_hat = max_useful_pool(model)
    return BiasReport(
        bias_exact=b_exact,
        bias_approx=b_approx,
        effective_gap=gap,
        bound=bound,
        bound_vacuous=vacuous,
        criterion_holds=model.delta > b_approx,
        n_hat=n_hat,
        k_hat=beam_width_for_pool(n_hat),
        n_hat_saturated=math.isinf(n_hat),
    )
