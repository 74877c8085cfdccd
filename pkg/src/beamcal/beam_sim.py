"""Monte Carlo simulation of score-guided selection under the two-class model.

Single-step estimators draw whole blocks of pools at once. Multi-depth beam
search is simulated trial by trial. In both cases trials are grouped into
fixed-size blocks and block ``b`` always draws from ``stream.child(b)``, so
totals do not depend on how many workers share the blocks.

Multi-depth model
-----------------
Each surviving path spawns ``k`` children. A child of an incorrect path is
incorrect (errors are absorbing). A correct path draws ``k`` policy samples,
each correct with probability ``policy_accuracy``. The first correct sample
keeps correct type and the rest are scored as incorrect, so every pool holds
at most one correct candidate. With ``policy_accuracy = 1`` a correct parent
therefore always has exactly one correct child, and ``k = 1`` (no selection)
always stays correct. Children are scored by their own quality plus fresh
noise (last-step scoring). The top ``k`` survive, and a trial succeeds when
the top-ranked terminal path is correct.
"""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .evt_bias import TwoClassScorerModel, bias_exact
from .stats_core import RandomStream
from .trace_io import SelectionRecord

BLOCK_TRIALS = 1 << 16
BEAM_BLOCK_TRIALS = 256
MAX_BEAM_WIDTH = 64
CORRECTIONS = ("none", "bias_corrected")


@dataclass
class CandidatePool:
    scores: np.ndarray
    correct_index: int | None
    true_qualities: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=float)
        self.true_qualities = np.asarray(self.true_qualities, dtype=float)
        if self.scores.shape != self.true_qualities.shape or self.scores.ndim != 1 or self.scores.size < 1:
            raise ValueError("scores and true_qualities must be equal-length, non-empty 1-D arrays")

    @property
    def size(self) -> int:
        return int(self.scores.size)


@dataclass(frozen=True)
class BeamConfig:
    beam_width: int
    max_depth: int = 24
    correction: str = "none"
    margin_log_enabled: bool = False
    policy_accuracy: float = 1.0

    def __post_init__(self):
        if not 1 <= self.beam_width <= MAX_BEAM_WIDTH:
            raise ValueError(f"beam_width must lie in [1, {MAX_BEAM_WIDTH}], got {self.beam_width}")
        if self.max_depth < 1:
            raise ValueError(f"max_depth must be >= 1, got {self.max_depth}")
        if self.correction not in CORRECTIONS:
            raise ValueError(f"correction must be one of {CORRECTIONS}, got {self.correction!r}")
        if not 0.0 <= self.policy_accuracy <= 1.0:
            raise ValueError("policy_accuracy must lie in [0, 1]")


@dataclass
class SweepCell:
    beam_width: int
    success_rate: float
    standard_error: float
    trials: int
    seed: int
    fell_back_rate: float | None = None


@dataclass
class SweepResult:
    cells: list[SweepCell]
    records: list[SelectionRecord] = field(default_factory=list)

    def cell(self, beam_width: int) -> SweepCell:
        return next(c for c in self.cells if c.beam_width == beam_width)


@dataclass
class MonteCarloEstimate:
    value: float
    mc_standard_error: float
    trials: int


@dataclass
class BeamSearchOutcome:
    success: bool
    selection_records: list[SelectionRecord]
    fell_back_steps: int = 0
    selection_steps: int = 0


def binomial_se(p: float, trials: int) -> float:
    return math.sqrt(max(p * (1.0 - p), 0.0) / trials)


# ---------------------------------------------------------------- single step


def sample_pool(model: TwoClassScorerModel, n: int, stream: RandomStream) -> CandidatePool:
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    rng = stream.generator()
    correct = int(rng.integers(n))
    qualities = np.full(n, model.mu_w)
    qualities[correct] = model.mu_c
    scores = qualities + model.sigma * rng.standard_normal(n)
    return CandidatePool(scores=scores, correct_index=correct, true_qualities=qualities)


def _scores_of(pool) -> np.ndarray:
    if isinstance(pool, CandidatePool):
        return pool.scores
    return np.asarray(pool, dtype=float)


def select_top(pool, k: int) -> list[int]:
    """Indices of the ``k`` highest scores, best first; ties go to the lower index."""
    scores = _scores_of(pool)
    if not 1 <= k <= scores.size:
        raise ValueError(f"k must lie in [1, {scores.size}], got {k}")
    return [int(i) for i in np.argsort(-scores, kind="stable")[:k]]


def _blocks(trials: int, block: int):
    start = 0
    b = 0
    while start < trials:
        size = min(block, trials - start)
        yield b, size
        start += size
        b += 1


def estimate_overestimation(
    model: TwoClassScorerModel, n: int, trials: int, stream: RandomStream
) -> MonteCarloEstimate:
    """Mean over trials of the best of the ``n - 1`` incorrect-type scores."""
    if n < 2:
        raise ValueError(f"n must be >= 2, got {n}")
    if trials < 1:
        raise ValueError("trials must be >= 1")
    total = 0.0
    total_sq = 0.0
    for b, size in _blocks(trials, BLOCK_TRIALS):
        rng = stream.child(b).generator()
        best = (model.mu_w + model.sigma * rng.standard_normal((size, n - 1))).max(axis=1)
        total += float(best.sum())
        total_sq += float(np.square(best).sum())
    mean = total / trials
    var = max(total_sq / trials - mean * mean, 0.0) * trials / max(trials - 1, 1)
    return MonteCarloEstimate(mean, math.sqrt(var / trials), trials)


def estimate_max_variance(sigma: float, m: int, trials: int, stream: RandomStream) -> MonteCarloEstimate:
    """Sample variance of the max of ``m`` N(0, sigma^2) draws, with its standard error."""
    if m < 1 or trials < 2:
        raise ValueError("need m >= 1 and trials >= 2")
    maxima = np.concatenate([
        (sigma * stream.child(b).generator().standard_normal((size, m))).max(axis=1)
        for b, size in _blocks(trials, BLOCK_TRIALS)
    ])
    dev2 = np.square(maxima - maxima.mean())
    var = float(dev2.sum() / (trials - 1))
    return MonteCarloEstimate(var, float(dev2.std(ddof=1) / math.sqrt(trials)), trials)


def estimate_suboptimal_prob(
    model: TwoClassScorerModel, n: int, trials: int, stream: RandomStream
) -> MonteCarloEstimate:
    """Fraction of pools where some incorrect score reaches the correct one.

    Ties count as a win for the incorrect side.
    """
    if n < 2:
        raise ValueError(f"n must be >= 2, got {n}")
    if trials < 1:
        raise ValueError("trials must be >= 1")
    losses = 0
    for b, size in _blocks(trials, BLOCK_TRIALS):
        rng = stream.child(b).generator()
        correct = model.mu_c + model.sigma * rng.standard_normal(size)
        best_wrong = (model.mu_w + model.sigma * rng.standard_normal((size, n - 1))).max(axis=1)
        losses += int(np.count_nonzero(best_wrong >= correct))
    p = losses / trials
    return MonteCarloEstimate(p, binomial_se(p, trials), trials)


# ---------------------------------------------------------------- bias correction


def estimate_sigma_online(scores: Sequence[float]) -> float:
    """Sample standard deviation of one pool's scores.

    This mixes genuine quality spread with scorer noise, so it is a rough
    proxy for the noise level rather than an estimate of it.
    """
    arr = np.asarray(scores, dtype=float)
    if arr.size < 2:
        raise ValueError("need at least 2 scores")
    return float(arr.std(ddof=1))


@dataclass
class CorrectedSelection:
    indices: list[int]
    fell_back: bool


def bias_corrected_select(pool, k: int, sigma_hat: float) -> CorrectedSelection:
    """Top-``k`` selection guarded by a bias-penalised best score.

    The best score minus ``bias_exact(sigma_hat, size - 1)`` is compared with
    the score of candidate 0, which stands for the unselected single draw. If
    the penalised best no longer reaches it, candidate 0 is returned (repeated
    ``k`` times) instead of the top ``k``. A reference that is itself the
    maximum also falls back whenever the penalty is positive.
    """
    if sigma_hat < 0:
        raise ValueError(f"sigma_hat must be non-negative, got {sigma_hat}")
    scores = _scores_of(pool)
    if scores.size < 1 or k < 1:
        raise ValueError("need a non-empty pool and k >= 1")
    m = scores.size - 1
    penalty = bias_exact(sigma_hat, m) if (m >= 2 and sigma_hat > 0) else 0.0
    if scores.max() - penalty >= scores[0]:
        return CorrectedSelection(select_top(scores, min(k, scores.size)), False)
    return CorrectedSelection([0] * k, True)


# ---------------------------------------------------------------- beam search


def _beam_trial(model: TwoClassScorerModel, config: BeamConfig, rng: np.random.Generator,
                log: bool) -> BeamSearchOutcome:
    k = config.beam_width
    beams = [True]  # correctness of each surviving path, best first
    records = []
    fell_back = 0
    steps = 0
    for depth in range(1, config.max_depth + 1):
        labels = np.zeros(len(beams) * k, dtype=bool)
        for j, ok in enumerate(beams):
            if ok:
                hits = np.flatnonzero(rng.random(k) < config.policy_accuracy)
                if hits.size:
                    labels[j * k + hits[0]] = True
        scores = np.where(labels, model.mu_c, model.mu_w) + model.sigma * rng.standard_normal(labels.size)
        if k == 1:
            beams = [bool(labels[0])]
            continue

        steps += 1
        if config.correction == "bias_corrected":
            choice = bias_corrected_select(scores, k, estimate_sigma_online(scores))
        else:
            choice = CorrectedSelection(select_top(scores, k), False)
        if choice.fell_back:
            fell_back += 1
            chosen = [0]  # repeated indices are a single path
        else:
            chosen = choice.indices
        if log:
            order = np.argsort(-scores, kind="stable")
            parents = np.repeat(beams, k)
            records.append(SelectionRecord(
                depth=depth,
                candidate_count=int(scores.size),
                rewards=[float(s) for s in scores[order]],
                selected_rank=int(np.flatnonzero(order == chosen[0])[0]),
                correctness=[bool(c) for c in labels[order]],
                extra={"parent_correct": [bool(p) for p in parents[order]],
                       "fell_back": choice.fell_back},
            ))
        beams = [bool(labels[i]) for i in chosen]
    return BeamSearchOutcome(beams[0], records, fell_back, steps)


def run_beam_search(model: TwoClassScorerModel, config: BeamConfig, stream: RandomStream) -> BeamSearchOutcome:
    """One simulated beam search; see the module docstring for the dynamics."""
    return _beam_trial(model, config, stream.generator(), config.margin_log_enabled)


def _run_block(args):
    model, config, stream, size = args
    rng = stream.generator()
    wins = 0
    fell_back = 0
    steps = 0
    records = []
    for _ in range(size):
        out = _beam_trial(model, config, rng, config.margin_log_enabled)
        wins += out.success
        fell_back += out.fell_back_steps
        steps += out.selection_steps
        records.extend(out.selection_records)
    return wins, fell_back, steps, records


def simulate_beam_width(model: TwoClassScorerModel, config: BeamConfig, trials: int,
                        stream: RandomStream, workers: int = 1):
    """Run ``trials`` beam searches; returns a :class:`SweepCell` plus any logged records."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    jobs = [(model, config, stream.child(b), size) for b, size in _blocks(trials, BEAM_BLOCK_TRIALS)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_run_block, jobs))
    else:
        parts = [_run_block(job) for job in jobs]
    wins = sum(p[0] for p in parts)
    fell_back = sum(p[1] for p in parts)
    steps = sum(p[2] for p in parts)
    records = [r for p in parts for r in p[3]]
    rate = wins / trials
    cell = SweepCell(
        beam_width=config.beam_width,
        success_rate=rate,
        standard_error=binomial_se(rate, trials),
        trials=trials,
        seed=stream.seed,
        fell_back_rate=(fell_back / steps if steps else 0.0) if config.correction == "bias_corrected" else None,
    )
    return cell, records


def sweep_beam_width(
    model: TwoClassScorerModel,
    ks: Sequence[int],
    depth: int,
    trials: int,
    stream: RandomStream,
    *,
    correction: str = "none",
    policy_accuracy: float = 1.0,
    margin_log_enabled: bool = False,
    workers: int = 1,
) -> SweepResult:
    """Success rate for each beam width; width ``k`` draws from ``stream.child(k)``."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    ks = sorted(set(int(k) for k in ks))
    if not ks or ks[0] < 1:
        raise ValueError("beam widths must be >= 1")
    cells = []
    records = []
    for k in ks:
        config = BeamConfig(k, depth, correction, margin_log_enabled, policy_accuracy)
        cell, recs = simulate_beam_width(model, config, trials, stream.child(k), workers)
        cells.append(cell)
        records.extend(recs)
    return SweepResult(cells, records)
