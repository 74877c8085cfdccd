"""Brute-force checks of the closed-form results, as run by ``beamcal validate``."""
from __future__ import annotations

from dataclasses import asdict, dataclass

from .beam_sim import estimate_max_variance, estimate_suboptimal_prob
from .evt_bias import TwoClassScorerModel, bias_exact, effective_gap, suboptimal_bound
from .stats_core import RandomStream, expected_max_normal_numeric

SUITES = ("gev", "cantelli", "variance")
GEV_TOLERANCE = 0.02
GEV_RANGE = range(3, 65)
CANTELLI_SNR = (1.5, 2.0, 2.5, 3.0)
CANTELLI_POOLS = (4, 9, 16)
VARIANCE_M = (1, 2, 4, 8, 16)
N_SE = 3.0


@dataclass
class Check:
    suite: str
    name: str
    value: float
    limit: float
    passed: bool

    @property
    def margin(self) -> float:
        return self.limit - self.value

    def as_dict(self) -> dict:
        return {**asdict(self), "margin": self.margin}


def check_gev(ms=GEV_RANGE, tolerance: float = GEV_TOLERANCE) -> list[Check]:
    """Relative error of the Gumbel-mean bias against the quadrature value."""
    checks = []
    for m in ms:
        exact = expected_max_normal_numeric(m)
        rel = abs(bias_exact(1.0, m) - exact) / exact
        checks.append(Check("gev", f"m={m}", rel, tolerance, rel <= tolerance))
    return checks


def check_cantelli(trials: int, seed: int, snrs=CANTELLI_SNR, pools=CANTELLI_POOLS) -> list[Check]:
    """Empirical suboptimal-selection rate against the bound plus 3 standard errors."""
    checks = []
    base = RandomStream(seed)
    for i, snr in enumerate(snrs):
        model = TwoClassScorerModel(delta=snr, sigma=1.0)
        for j, n in enumerate(pools):
            if effective_gap(model, n) <= 0:
                continue
            bound, _ = suboptimal_bound(model, n)
            est = estimate_suboptimal_prob(model, n, trials, base.child(i * len(pools) + j))
            limit = bound + N_SE * est.mc_standard_error
            checks.append(Check("cantelli", f"snr={snr},n={n}", est.value, limit, est.value <= limit))
    return checks


def check_variance(trials: int, seed: int, ms=VARIANCE_M) -> list[Check]:
    """Variance of the max of m unit-variance draws stays at or below 1."""
    checks = []
    base = RandomStream(seed)
    for m in ms:
        est = estimate_max_variance(1.0, m, trials, base.child(m))
        limit = 1.0 + N_SE * est.mc_standard_error
        checks.append(Check("variance", f"m={m}", est.value, limit, est.value <= limit))
    return checks


def run_suite(suite: str, trials: int, seed: int) -> list[Check]:
    if suite == "all":
        return [c for s in SUITES for c in run_suite(s, trials, seed)]
    if suite == "gev":
        return check_gev()
    if suite == "cantelli":
        return check_cantelli(trials, seed)
    if suite == "variance":
        return check_variance(trials, seed)
    raise ValueError(f"unknown suite {suite!r}")
