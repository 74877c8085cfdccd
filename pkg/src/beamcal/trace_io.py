"""Reading, writing and aggregating beam-selection traces and per-run results.

Three formats are handled:

* the bracketed text log emitted by beam search runs (import only, plus a
  writer used for round-trip checks)::

      [BEAM_SELECT] depth=2 | candidates=12
        top_rewards=[-3.04, -3.05, -3.18, ...]
        #1: reward=-3.0405 [ANS:C] <- SELECTED
        #2: reward=-3.0496 [ANS:A] <- REJECTED

* JSON lines, one selection record per line, with the fields ``depth``,
  ``candidates``, ``rewards``, ``selected_rank``, ``answer_tags`` and
  ``correctness``;
* a comma-separated results table, one row per (problem, width, seed) run.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import re
import warnings
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import IO, Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

JSONL_FIELDS = ("depth", "candidates", "rewards", "selected_rank", "answer_tags", "correctness")
RESULT_FIELDS = (
    "problem_id", "model_name", "scorer", "beam_width", "seed", "subject", "correct", "final_reward",
)
SCORERS = ("perplexity", "prm", "synthetic")


class TraceFormatError(ValueError):
    """Malformed trace or table input; ``line`` is 1-based when known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class TraceWarning(UserWarning):
    pass


@dataclass
class SelectionRecord:
    """One beam-selection event.

    ``rewards`` are sorted in descending order and may be a truncated prefix of
    the ``candidate_count`` scored candidates. ``answer_tags`` and
    ``correctness``, when present, align with the leading ranks. A record whose
    log carried no SELECTED line has ``selected_rank = None``.
    """

    depth: int
    candidate_count: int
    rewards: list[float]
    selected_rank: int | None = 0
    answer_tags: list[str | None] | None = None
    correctness: list[bool] | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if self.candidate_count < 1:
            raise ValueError(f"candidate_count must be >= 1, got {self.candidate_count}")
        if len(self.rewards) > self.candidate_count:
            raise ValueError("more rewards than candidates")
        if any(a < b for a, b in zip(self.rewards, self.rewards[1:])):
            raise ValueError("rewards must be sorted in descending order")
        if self.selected_rank is not None and not 0 <= self.selected_rank < self.candidate_count:
            raise ValueError(f"selected_rank {self.selected_rank} out of range")

    @property
    def complete(self) -> bool:
        return self.selected_rank is not None

    @property
    def margin(self) -> float | None:
        if len(self.rewards) < 2:
            return None
        return self.rewards[0] - self.rewards[1]


@dataclass(frozen=True)
class RunResult:
    problem_id: str
    model_name: str
    scorer: str
    beam_width: int
    seed: int
    subject: str
    correct: bool
    final_reward: float

    def __post_init__(self):
        if self.beam_width < 1:
            raise ValueError(f"beam_width must be >= 1, got {self.beam_width}")
        if not math.isfinite(self.final_reward):
            raise ValueError("final_reward must be finite")
        if self.scorer not in SCORERS:
            raise ValueError(f"scorer must be one of {SCORERS}, got {self.scorer!r}")


@dataclass
class MacroCell:
    mean_percent: float
    standard_error_percent: float
    count: int


@dataclass
class MacroSummary:
    cells: dict[tuple[str, str, int], MacroCell]
    deltas: dict[tuple[str, str], float]
    warnings: list[str] = field(default_factory=list)


# ---------------------------------------------------------------- text logs

_HEADER = re.compile(r"\[BEAM_SELECT\]\s*depth\s*=\s*(-?\d+)\s*\|\s*candidates\s*=\s*(-?\d+)\s*$")
_TOP = re.compile(r"top_rewards\s*=\s*\[(.*)\]\s*$")
_RANK = re.compile(
    r"#(\d+)\s*:\s*reward\s*=\s*(\S+?)(?:\s*\[ANS:([^\]]*)\])?\s*(?:<-\s*(SELECTED|REJECTED))?\s*$"
)


def _parse_float(token: str, lineno: int) -> float:
    try:
        value = float(token)
    except ValueError:
        raise TraceFormatError(f"not a number: {token!r}", lineno) from None
    if not math.isfinite(value):
        raise TraceFormatError(f"non-finite reward {token!r}", lineno)
    return value


def _finish_block(block: dict) -> SelectionRecord:
    ranked = sorted(block["ranked"].items())
    rewards = [r for _, (r, _) in ranked]
    tags = [t for _, (_, t) in ranked]
    # top_rewards only extends past the ranks given at full precision
    for value in block["top"][len(rewards):]:
        if rewards and value > rewards[-1]:
            break
        rewards.append(value)
    while tags and tags[-1] is None:
        tags.pop()
    if block["selected"] is None:
        logger.warning("record at line %d has no SELECTED line", block["line"])
    return SelectionRecord(
        depth=block["depth"],
        candidate_count=block["candidates"],
        rewards=rewards,
        selected_rank=block["selected"],
        answer_tags=tags or None,
    )


def parse_beam_select_text(text: str) -> list[SelectionRecord]:
    records = []
    block = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("[BEAM_SELECT]"):
            match = _HEADER.match(line)
            if not match:
                raise TraceFormatError(f"malformed header: {line!r}", lineno)
            depth, candidates = int(match[1]), int(match[2])
            if candidates < 1:
                raise TraceFormatError(f"candidates must be >= 1, got {candidates}", lineno)
            if depth < 1:
                raise TraceFormatError(f"depth must be >= 1, got {depth}", lineno)
            if block is not None:
                records.append(_finish_block(block))
            block = {"depth": depth, "candidates": candidates, "top": [], "ranked": {},
                     "selected": None, "line": lineno}
            continue
        if block is None:
            continue  # chatter before the first header
        if match := _TOP.match(line):
            block["top"] = [
                _parse_float(tok, lineno)
                for tok in (t.strip() for t in match[1].split(","))
                if tok and tok != "..."
            ]
        elif match := _RANK.match(line):
            rank = int(match[1]) - 1
            if not 0 <= rank < block["candidates"]:
                raise TraceFormatError(f"rank #{rank + 1} out of range", lineno)
            block["ranked"][rank] = (_parse_float(match[2], lineno), match[3])
            if match[4] == "SELECTED":
                block["selected"] = rank
    if block is not None:
        records.append(_finish_block(block))
    return records


def format_beam_select_text(records: Iterable[SelectionRecord]) -> str:
    out = []
    for rec in records:
        out.append(f"[BEAM_SELECT] depth={rec.depth} | candidates={rec.candidate_count}")
        if rec.rewards:
            out.append("  top_rewards=[" + ", ".join(f"{r:.2f}" for r in rec.rewards[:3]) + ", ...]")
        tags = rec.answer_tags or []
        for rank, reward in enumerate(rec.rewards):
            tag = tags[rank] if rank < len(tags) else None
            mark = "SELECTED" if rank == rec.selected_rank else "REJECTED"
            ans = f" [ANS:{tag}]" if tag is not None else ""
            out.append(f"  #{rank + 1}: reward={reward!r}{ans} <- {mark}")
    return "\n".join(out) + ("\n" if out else "")


# ---------------------------------------------------------------- JSONL


def _reject_constant(token: str):
    raise ValueError(f"non-finite number {token}")


def _record_to_json(rec: SelectionRecord) -> dict:
    obj = dict(rec.extra)
    obj.update(
        depth=rec.depth,
        candidates=rec.candidate_count,
        rewards=list(map(float, rec.rewards)),
        selected_rank=rec.selected_rank,
        answer_tags=rec.answer_tags,
        correctness=None if rec.correctness is None else [bool(c) for c in rec.correctness],
    )
    return obj


def _record_from_json(obj: dict, lineno: int) -> SelectionRecord:
    if not isinstance(obj, dict):
        raise TraceFormatError("expected a JSON object", lineno)
    for name in ("depth", "candidates", "rewards"):
        if name not in obj:
            raise TraceFormatError(f"missing field {name!r}", lineno)
    rewards = obj["rewards"]
    if not isinstance(rewards, list) or not all(
        isinstance(r, (int, float)) and not isinstance(r, bool) for r in rewards
    ):
        raise TraceFormatError("rewards must be a list of numbers", lineno)
    if not all(math.isfinite(r) for r in rewards):
        raise TraceFormatError("numeric overflow in rewards", lineno)
    extra = {k: v for k, v in obj.items() if k not in JSONL_FIELDS}
    try:
        return SelectionRecord(
            depth=int(obj["depth"]),
            candidate_count=int(obj["candidates"]),
            rewards=[float(r) for r in rewards],
            selected_rank=obj.get("selected_rank"),
            answer_tags=obj.get("answer_tags"),
            correctness=obj.get("correctness"),
            extra=extra,
        )
    except (TypeError, ValueError) as exc:
        raise TraceFormatError(str(exc), lineno) from None


def _open_text(source, mode: str):
    if isinstance(source, (str, os.PathLike)):
        return open(source, mode, encoding="utf-8", newline="" if "w" in mode else None), True
    return source, False


def read_selection_jsonl(source: str | os.PathLike | IO[str]) -> list[SelectionRecord]:
    fh, owned = _open_text(source, "r")
    try:
        records = []
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line, parse_constant=_reject_constant)
            except ValueError as exc:
                raise TraceFormatError(f"invalid JSON: {exc}", lineno) from None
            records.append(_record_from_json(obj, lineno))
        return records
    finally:
        if owned:
            fh.close()


def write_selection_jsonl(records: Iterable[SelectionRecord], sink: str | os.PathLike | IO[str]) -> None:
    fh, owned = _open_text(sink, "w")
    try:
        for rec in records:
            fh.write(json.dumps(_record_to_json(rec), allow_nan=False) + "\n")
    finally:
        if owned:
            fh.close()


# ---------------------------------------------------------------- results table

_TRUE = {"true", "1", "yes"}
_FALSE = {"false", "0", "no"}


def _parse_bool(value: str) -> bool:
    v = value.strip().lower()
    if v in _TRUE:
        return True
    if v in _FALSE:
        return False
    raise ValueError(f"not a boolean: {value!r}")


def read_results_table(source: str | os.PathLike | IO[str]) -> list[RunResult]:
    """Parse a comma-separated results table with a header row.

    Rows repeating a ``(model_name, scorer, problem_id, beam_width, seed)`` key
    are kept and reported with a :class:`TraceWarning` giving their count.
    """
    fh, owned = _open_text(source, "r")
    try:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in RESULT_FIELDS if c not in header]
        if missing:
            raise TraceFormatError(f"missing required column(s): {', '.join(missing)}", 1)
        converters = {
            "beam_width": int, "seed": int, "correct": _parse_bool, "final_reward": float,
        }
        results = []
        for row in reader:
            lineno = reader.line_num
            values = {}
            for col in RESULT_FIELDS:
                cell = row[col]
                if cell is None:
                    raise TraceFormatError(f"row too short, column {col!r} empty", lineno)
                try:
                    values[col] = converters.get(col, str.strip)(cell)
                except ValueError:
                    raise TraceFormatError(f"column {col!r}: cannot parse {cell!r}", lineno) from None
            try:
                results.append(RunResult(**values))
            except ValueError as exc:
                raise TraceFormatError(str(exc), lineno) from None
    finally:
        if owned:
            fh.close()
    dups = duplicate_count(results)
    if dups:
        warnings.warn(f"{dups} duplicate run row(s) kept", TraceWarning, stacklevel=2)
    return results


def write_results_table(results: Iterable[RunResult], sink) -> None:
    fh, owned = _open_text(sink, "w")
    try:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(RESULT_FIELDS)
        for r in results:
            writer.writerow([r.problem_id, r.model_name, r.scorer, r.beam_width, r.seed, r.subject,
                             "true" if r.correct else "false", repr(r.final_reward)])
    finally:
        if owned:
            fh.close()


def duplicate_count(results: Sequence[RunResult]) -> int:
    counts = Counter((r.model_name, r.scorer, r.problem_id, r.beam_width, r.seed) for r in results)
    return sum(c - 1 for c in counts.values() if c > 1)


# ---------------------------------------------------------------- aggregation


def aggregate_macro(results: Sequence[RunResult]) -> MacroSummary:
    """Macro success rate per (model, scorer, beam width).

    Success rates are first computed per (subject, seed) cell; the reported
    mean and standard error are taken across those cells. ``deltas`` hold the
    widest width's mean minus the ``k = 1`` mean, in percentage points.
    """
    if not results:
        raise ValueError("aggregate_macro needs at least one result")
    tallies: dict = defaultdict(lambda: defaultdict(lambda: [0, 0]))
    for r in results:
        cell = tallies[(r.model_name, r.scorer, r.beam_width)][(r.subject, r.seed)]
        cell[0] += bool(r.correct)
        cell[1] += 1

    notes = []
    cells = {}
    for key in sorted(tallies):
        # sort for an order-independent floating-point sum
        rates = np.array(sorted(100.0 * c / n for c, n in tallies[key].values()))
        if rates.size > 1:
            se = float(rates.std(ddof=1) / math.sqrt(rates.size))
        else:
            se = 0.0
            notes.append(f"{key}: single (subject, seed) cell, standard error set to 0")
        cells[key] = MacroCell(float(rates.mean()), se, int(rates.size))

    widths = defaultdict(list)
    for model, scorer, k in cells:
        widths[(model, scorer)].append(k)
    deltas = {}
    for pair, ks in sorted(widths.items()):
        if 1 not in ks:
            notes.append(f"{pair}: no k=1 runs, delta omitted")
            continue
        k_max = max(ks)
        deltas[pair] = cells[(*pair, k_max)].mean_percent - cells[(*pair, 1)].mean_percent
    for note in notes:
        warnings.warn(note, TraceWarning, stacklevel=2)
    return MacroSummary(cells=cells, deltas=deltas, warnings=notes)


def macro_rows(summary: MacroSummary) -> list[dict]:
    return [
        {"model_name": m, "scorer": s, "beam_width": k, "mean_percent": c.mean_percent,
         "se_percent": c.standard_error_percent, "count": c.count}
        for (m, s, k), c in sorted(summary.cells.items())
    ]


def read_text(source) -> str:
    if isinstance(source, (str, os.PathLike)):
        with open(source, encoding="utf-8") as fh:
            return fh.read()
    if isinstance(source, io.TextIOBase) or hasattr(source, "read"):
        return source.read()
    raise TypeError(f"cannot read from {type(source).__name__}")
