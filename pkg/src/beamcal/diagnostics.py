"""Diagnostics for deciding whether a scorer can support a wider beam."""
from __future__ import annotations

import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .evt_bias import MAX_BEAM_WIDTH, TwoClassScorerModel, max_useful_beam_width, max_useful_pool
from .stats_core import RandomStream
from .trace_io import RunResult, SelectionRecord

logger = logging.getLogger(__name__)

DEFAULT_MARGIN_THRESHOLD = 0.1
HISTOGRAM_BINS = 50
BOOTSTRAP_CHUNK = 256

DISPERSION_CAVEAT = (
    "score dispersion mixes genuine quality differences with scorer noise; "
    "treat the estimate as a rough indication of scorer reliability, not a measurement of noise"
)


@dataclass
class MarginReport:
    total_selections: int
    margin_threshold: float
    fraction_below: float
    histogram: list[tuple[float, float, int]]
    skipped: int = 0
    margins: list[float] = field(default_factory=list, repr=False)

    def as_dict(self) -> dict:
        return {
            "total_selections": self.total_selections,
            "margin_threshold": self.margin_threshold,
            "fraction_below": self.fraction_below,
            "skipped": self.skipped,
            "histogram": [{"bin_lower": lo, "bin_upper": hi, "count": c} for lo, hi, c in self.histogram],
        }


@dataclass(frozen=True)
class InversionRow:
    problem_id: str
    low_k_reward: float
    low_k_correct: bool
    high_k_reward: float
    high_k_correct: bool


@dataclass
class InversionTable:
    rows: list[InversionRow]
    low_k: int
    high_k: int
    unmatched: int = 0


@dataclass(frozen=True)
class SnrEstimate:
    delta_hat: float
    sigma_hat: float
    n_correct: int
    n_incorrect: int

    @property
    def ratio(self) -> float:
        return self.delta_hat / self.sigma_hat if self.sigma_hat > 0 else math.inf


@dataclass
class Recommendation:
    k_hat: int
    n_hat: float
    caveats: list[str]


@dataclass
class PilotComparison:
    delta_percent: float
    ci_low: float
    ci_high: float
    verdict: str
    problems: int


def margin_distribution(records: Iterable[SelectionRecord],
                        threshold: float = DEFAULT_MARGIN_THRESHOLD,
                        bins: int = HISTOGRAM_BINS) -> MarginReport:
    """Distribution of the gap between the two best rewards at each selection.

    Records with fewer than two rewards are skipped and counted in ``skipped``.
    ``fraction_below`` uses a strict ``margin < threshold``.
    """
    if not threshold > 0:
        raise ValueError(f"threshold must be positive, got {threshold}")
    margins = []
    skipped = 0
    for rec in records:
        if len(rec.rewards) < 2:
            skipped += 1
            continue
        margins.append(rec.rewards[0] - rec.rewards[1])
    if not margins:
        return MarginReport(0, threshold, 0.0, [], skipped)
    arr = np.asarray(margins)
    upper = float(arr.max())
    if upper < np.finfo(float).eps * threshold:
        upper = threshold  # margins indistinguishable from zero cannot be split into bins
    counts, edges = np.histogram(arr, bins=bins, range=(0.0, upper))
    histogram = [(float(edges[i]), float(edges[i + 1]), int(counts[i])) for i in range(bins)]
    below = int(np.count_nonzero(arr < threshold))
    return MarginReport(len(margins), threshold, below / len(margins), histogram, skipped, margins)


def detect_inversions(results: Sequence[RunResult], low_k: int, high_k: int) -> InversionTable:
    """Problems the narrow beam solved that the wide beam missed with a higher reward.

    Runs are paired on ``(model, scorer, problem_id, seed)``; runs without a
    partner at the other width are counted in ``unmatched``.
    """
    if not low_k < high_k:
        raise ValueError(f"need low_k < high_k, got {low_k} and {high_k}")
    low = {}
    high = {}
    for r in results:
        key = (r.model_name, r.scorer, r.problem_id, r.seed)
        if r.beam_width == low_k:
            low[key] = r
        elif r.beam_width == high_k:
            high[key] = r
    unmatched = len(low.keys() ^ high.keys())
    rows = []
    for key, a in low.items():
        b = high.get(key)
        if b is None:
            continue
        if a.correct and not b.correct and b.final_reward > a.final_reward:
            row = InversionRow(a.problem_id, a.final_reward, a.correct, b.final_reward, b.correct)
            assert row.low_k_correct and not row.high_k_correct and row.high_k_reward > row.low_k_reward
            rows.append(row)
    if unmatched:
        logger.info("%d run(s) without a partner at the other beam width", unmatched)
    return InversionTable(rows, low_k, high_k, unmatched)


def estimate_snr(labeled: Iterable[tuple[float, bool]]) -> SnrEstimate:
    """Gap between mean correct and mean incorrect score, and pooled within-class spread.

    ``labeled`` yields ``(score, correct)`` pairs (or mappings with those keys).
    """
    correct, incorrect = [], []
    for item in labeled:
        if isinstance(item, dict):
            score, ok = item["score"], item["correct"]
        else:
            score, ok = item
        (correct if ok else incorrect).append(float(score))
    if len(correct) < 2 or len(incorrect) < 2:
        raise ValueError("need at least 2 scores in each class")
    c = np.asarray(correct)
    w = np.asarray(incorrect)
    pooled = ((c.size - 1) * c.var(ddof=1) + (w.size - 1) * w.var(ddof=1)) / (c.size + w.size - 2)
    return SnrEstimate(float(c.mean() - w.mean()), math.sqrt(pooled), c.size, w.size)


def recommend_beam_width(estimate: SnrEstimate) -> Recommendation:
    caveats = [DISPERSION_CAVEAT]
    if estimate.delta_hat <= 0:
        caveats.append("correct candidates do not outscore incorrect ones on average; search is not expected to help")
        return Recommendation(1, 2.0, caveats)
    if estimate.sigma_hat == 0:
        caveats.append("zero within-class spread: the scorer looks noiseless, so the width limit is unbounded")
        return Recommendation(MAX_BEAM_WIDTH, math.inf, caveats)
    model = TwoClassScorerModel(estimate.delta_hat, estimate.sigma_hat)
    n_hat = max_useful_pool(model)
    if math.isinf(n_hat):
        caveats.append("signal-to-noise ratio is so large that the width limit saturates")
    return Recommendation(max_useful_beam_width(model), n_hat, caveats)


def _per_problem(results: Sequence[RunResult], k_a: int, k_b: int) -> tuple[list, np.ndarray, np.ndarray]:
    by_problem = defaultdict(lambda: ({}, {}))
    for r in results:
        if r.beam_width == k_a:
            by_problem[r.problem_id][0].setdefault(r.seed, []).append(r.correct)
        elif r.beam_width == k_b:
            by_problem[r.problem_id][1].setdefault(r.seed, []).append(r.correct)
    ids, a_rates, b_rates = [], [], []
    for pid in sorted(by_problem):
        a, b = by_problem[pid]
        seeds = sorted(a.keys() & b.keys())
        if not seeds:
            continue
        ids.append(pid)
        a_rates.append(np.mean([np.mean(a[s]) for s in seeds]))
        b_rates.append(np.mean([np.mean(b[s]) for s in seeds]))
    return ids, np.asarray(a_rates), np.asarray(b_rates)


def pilot_compare(results: Sequence[RunResult], k_a: int = 1, k_b: int = 2, resamples: int = 2000,
                  seed: int = 0, confidence: float = 0.95) -> PilotComparison:
    """Paired bootstrap comparison of two beam widths on the same problems.

    Per-problem success is averaged over the seeds run at both widths; the
    bootstrap resamples problems with replacement. The verdict is ``widen``
    when the whole interval is above zero, ``do-not-widen`` when it is below
    zero, and ``inconclusive`` otherwise.
    """
    if resamples < 100:
        raise ValueError("resamples must be >= 100")
    _, a, b = _per_problem(results, k_a, k_b)
    if a.size == 0:
        raise ValueError(f"no problems were run at both k={k_a} and k={k_b}")
    diff = 100.0 * (b - a)
    stats = []
    base = RandomStream(seed)
    for chunk, start in enumerate(range(0, resamples, BOOTSTRAP_CHUNK)):
        size = min(BOOTSTRAP_CHUNK, resamples - start)
        idx = base.child(chunk).generator().integers(0, diff.size, size=(size, diff.size))
        stats.append(diff[idx].mean(axis=1))
    boot = np.concatenate(stats)
    alpha = 1.0 - confidence
    lo, hi = np.quantile(boot, [alpha / 2, 1 - alpha / 2])
    if lo > 0:
        verdict = "widen"
    elif hi < 0:
        verdict = "do-not-widen"
    else:
        verdict = "inconclusive"
    return PilotComparison(float(diff.mean()), float(lo), float(hi), verdict, int(diff.size))


def labeled_scores(records: Iterable[SelectionRecord]) -> list[tuple[float, bool]]:
    """``(score, correct)`` pairs from records that carry correctness labels."""
    pairs = []
    for rec in records:
        if rec.correctness:
            pairs.extend(zip(rec.rewards, rec.correctness))
    return pairs
