import io
import json
import logging
import math
import random
import warnings

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from beamcal.stats_core import RandomStream
from beamcal.trace_io import (
    RunResult,
    SelectionRecord,
    TraceFormatError,
    TraceWarning,
    aggregate_macro,
    duplicate_count,
    format_beam_select_text,
    macro_rows,
    parse_beam_select_text,
    read_results_table,
    read_selection_jsonl,
    read_text,
    write_results_table,
    write_selection_jsonl,
)

from table_fixtures import PUBLISHED_CELLS, PUBLISHED_DELTAS, macro_fixture


class TestTextLog:
    def test_snippet(self, snippet_path):
        (rec,) = parse_beam_select_text(read_text(snippet_path))
        assert rec.depth == 2 and rec.candidate_count == 12
        assert rec.rewards[:2] == [-3.0405, -3.0496]
        assert rec.rewards[2] == -3.18
        assert rec.selected_rank == 0
        assert rec.answer_tags == ["C", "A"]
        assert rec.margin == pytest.approx(0.0091, abs=1e-12)

    def test_empty_and_chatter(self):
        assert parse_beam_select_text("") == []
        assert parse_beam_select_text("loading model...\nstep 1\n") == []

    def test_zero_candidates(self):
        with pytest.raises(TraceFormatError) as exc:
            parse_beam_select_text("[BEAM_SELECT] depth=1 | candidates=0\n")
        assert exc.value.line == 1

    def test_malformed_header_reports_line(self):
        text = "noise\n[BEAM_SELECT] depth=1 | candidates=3\n  #1: reward=-1.0 <- SELECTED\n[BEAM_SELECT] depth=x\n"
        with pytest.raises(TraceFormatError) as exc:
            parse_beam_select_text(text)
        assert exc.value.line == 4

    def test_bad_reward_reports_line(self):
        with pytest.raises(TraceFormatError) as exc:
            parse_beam_select_text("[BEAM_SELECT] depth=1 | candidates=3\n  #1: reward=nan <- SELECTED\n")
        assert exc.value.line == 2

    def test_zero_depth(self):
        with pytest.raises(TraceFormatError):
            parse_beam_select_text("[BEAM_SELECT] depth=0 | candidates=2\n")

    def test_rank_out_of_range(self):
        with pytest.raises(TraceFormatError):
            parse_beam_select_text("[BEAM_SELECT] depth=1 | candidates=2\n  #3: reward=-1.0 <- SELECTED\n")

    def test_missing_selected_is_incomplete(self, caplog):
        text = "[BEAM_SELECT] depth=3 | candidates=4\n  #1: reward=-1.0 <- REJECTED\n  #2: reward=-1.5 <- REJECTED\n"
        with caplog.at_level(logging.WARNING):
            (rec,) = parse_beam_select_text(text)
        assert not rec.complete and rec.selected_rank is None
        assert "no SELECTED" in caplog.text

    def test_multiple_blocks(self):
        text = (
            "[BEAM_SELECT] depth=1 | candidates=2\n  #1: reward=0.5 <- SELECTED\n  #2: reward=0.25 <- REJECTED\n"
            "other line\n"
            "[BEAM_SELECT] depth=2 | candidates=4\n  top_rewards=[1.0, 0.5]\n  #2: reward=0.9 <- SELECTED\n"
            "  #1: reward=1.0 [ANS:B] <- REJECTED\n"
        )
        a, b = parse_beam_select_text(text)
        assert a.rewards == [0.5, 0.25] and a.answer_tags is None
        assert b.rewards == [1.0, 0.9] and b.selected_rank == 1 and b.answer_tags == ["B"]

    def test_top_rewards_alone(self):
        (rec,) = parse_beam_select_text("[BEAM_SELECT] depth=1 | candidates=5\n top_rewards=[2, 1, 0, ...]\n")
        assert rec.rewards == [2.0, 1.0, 0.0] and rec.margin == 1.0

    def test_round_trip(self):
        recs = [
            SelectionRecord(1, 6, [0.3, 0.1, -0.7], 0, ["A", "B"]),
            SelectionRecord(2, 3, [-1.25, -2.5], 1, None),
        ]
        assert parse_beam_select_text(format_beam_select_text(recs)) == recs


class TestRecord:
    def test_validation(self):
        with pytest.raises(ValueError):
            SelectionRecord(1, 0, [])
        with pytest.raises(ValueError):
            SelectionRecord(1, 2, [1.0, 2.0])
        with pytest.raises(ValueError):
            SelectionRecord(1, 2, [1.0], selected_rank=2)
        with pytest.raises(ValueError):
            SelectionRecord(0, 2, [1.0])

    def test_margin(self):
        assert SelectionRecord(1, 3, [1.0]).margin is None
        assert SelectionRecord(1, 3, [1.0, 0.25]).margin == 0.75


def _random_record(rng: random.Random) -> SelectionRecord:
    n = rng.randint(1, 12)
    shown = rng.randint(0, n)
    rewards = sorted((rng.uniform(-10, 0) for _ in range(shown)), reverse=True)
    labelled = rng.random() < 0.5
    return SelectionRecord(
        depth=rng.randint(1, 30),
        candidate_count=n,
        rewards=rewards,
        selected_rank=rng.randrange(n),
        answer_tags=[rng.choice("ABCD") for _ in rewards] if rewards and rng.random() < 0.5 else None,
        correctness=[rng.random() < 0.3 for _ in rewards] if labelled else None,
    )


class TestJsonl:
    def test_round_trip_thousand_records(self, tmp_path):
        rng = random.Random(1234)
        recs = [_random_record(rng) for _ in range(1000)]
        path = tmp_path / "sel.jsonl"
        write_selection_jsonl(recs, path)
        assert read_selection_jsonl(path) == recs
        # re-serialising is byte-stable
        again = tmp_path / "again.jsonl"
        write_selection_jsonl(read_selection_jsonl(path), again)
        assert path.read_bytes() == again.read_bytes()

    def test_field_names(self):
        buf = io.StringIO()
        write_selection_jsonl([SelectionRecord(1, 2, [0.5], 0, None, [True])], buf)
        obj = json.loads(buf.getvalue())
        assert set(obj) == {"depth", "candidates", "rewards", "selected_rank", "answer_tags", "correctness"}
        assert obj["correctness"] == [True]

    def test_unknown_fields_preserved(self):
        line = '{"depth": 1, "candidates": 2, "rewards": [1.0], "run": "x7"}\n'
        (rec,) = read_selection_jsonl(io.StringIO(line))
        assert rec.extra == {"run": "x7"}
        buf = io.StringIO()
        write_selection_jsonl([rec], buf)
        assert json.loads(buf.getvalue())["run"] == "x7"

    def test_missing_rewards(self):
        with pytest.raises(TraceFormatError) as exc:
            read_selection_jsonl(io.StringIO('\n{"depth": 1, "candidates": 2}\n'))
        assert exc.value.line == 2 and "rewards" in str(exc.value)

    @pytest.mark.parametrize("token", ["NaN", "Infinity", "-Infinity", "1e999"])
    def test_non_finite(self, token):
        line = '{"depth": 1, "candidates": 2, "rewards": [%s]}' % token
        with pytest.raises(TraceFormatError):
            read_selection_jsonl(io.StringIO(line))

    def test_writer_rejects_nan(self):
        with pytest.raises(ValueError):
            write_selection_jsonl([SelectionRecord(1, 2, [math.nan])], io.StringIO())

    def test_invalid_json(self):
        with pytest.raises(TraceFormatError) as exc:
            read_selection_jsonl(io.StringIO("{not json"))
        assert exc.value.line == 1

    def test_correctness_passthrough(self):
        line = '{"depth": 1, "candidates": 3, "rewards": [0.2, 0.1], "correctness": [false, true]}'
        (rec,) = read_selection_jsonl(io.StringIO(line))
        assert rec.correctness == [False, True]


class TestResultsTable:
    def test_fixture(self, inversion_csv):
        rows = read_results_table(inversion_csv)
        assert len(rows) == 8
        assert rows[0] == RunResult("cf68a215", "Mistral-7B-Instruct-v0.3", "perplexity", 1, 0,
                                    "high_school_biology", True, -6.71)
        assert duplicate_count(rows) == 0

    def test_header_only(self):
        assert read_results_table(io.StringIO(",".join(RunResult.__dataclass_fields__) + "\n")) == []

    def test_duplicates_warn(self, inversion_csv):
        text = inversion_csv.read_text()
        doubled = text + "\n".join(text.splitlines()[1:3]) + "\n"
        with pytest.warns(TraceWarning, match="2 duplicate"):
            rows = read_results_table(io.StringIO(doubled))
        assert len(rows) == 10

    def test_missing_column(self):
        with pytest.raises(TraceFormatError, match="final_reward"):
            read_results_table(io.StringIO("problem_id,model_name,scorer,beam_width,seed,subject,correct\n"))

    @pytest.mark.parametrize("cell, col", [("maybe", "correct"), ("two", "beam_width"), ("x", "final_reward")])
    def test_bad_cell(self, cell, col):
        values = {"problem_id": "p", "model_name": "m", "scorer": "prm", "beam_width": "2", "seed": "0",
                  "subject": "s", "correct": "true", "final_reward": "-1"}
        values[col] = cell
        text = ",".join(values) + "\n" + ",".join(values.values()) + "\n"
        with pytest.raises(TraceFormatError) as exc:
            read_results_table(io.StringIO(text))
        assert exc.value.line == 2 and col in str(exc.value)

    def test_unknown_scorer(self):
        text = ",".join(RunResult.__dataclass_fields__) + "\np,m,oracle,1,0,s,true,0\n"
        with pytest.raises(TraceFormatError):
            read_results_table(io.StringIO(text))

    def test_round_trip(self, inversion_csv):
        rows = read_results_table(inversion_csv)
        buf = io.StringIO()
        write_results_table(rows, buf)
        assert read_results_table(io.StringIO(buf.getvalue())) == rows


class TestAggregate:
    def test_reproduces_published_cells(self):
        summary = aggregate_macro(macro_fixture())
        for (model, scorer), means in PUBLISHED_CELLS.items():
            for k, mean in zip((1, 2, 3, 4), means):
                cell = summary.cells[(model, scorer, k)]
                assert cell.mean_percent == pytest.approx(mean, abs=0.05)
                assert cell.count == 6 and cell.standard_error_percent > 0
        for pair, delta in PUBLISHED_DELTAS.items():
            assert summary.deltas[pair] == pytest.approx(delta, abs=0.05)

    def test_order_invariant(self):
        rows = macro_fixture({("Qwen", "prm"): PUBLISHED_CELLS[("Qwen", "prm")]})
        shuffled = rows[:]
        random.Random(5).shuffle(shuffled)
        assert aggregate_macro(rows) == aggregate_macro(shuffled)

    def test_single_cell(self):
        rows = [RunResult(f"p{i}", "m", "prm", k, 0, "s", i < 3, 0.0) for k in (1, 2) for i in range(4)]
        with pytest.warns(TraceWarning, match="single"):
            summary = aggregate_macro(rows)
        assert summary.cells[("m", "prm", 1)].standard_error_percent == 0.0
        assert summary.cells[("m", "prm", 2)].mean_percent == 75.0
        assert summary.deltas[("m", "prm")] == 0.0

    def test_missing_k1(self):
        rows = [RunResult(f"p{i}", "m", "prm", 4, s, "s", True, 0.0) for i in range(2) for s in (0, 1)]
        with pytest.warns(TraceWarning, match="k=1"):
            summary = aggregate_macro(rows)
        assert summary.deltas == {}

    def test_empty(self):
        with pytest.raises(ValueError):
            aggregate_macro([])

    def test_rows(self):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", TraceWarning)
            summary = aggregate_macro([RunResult("p", "m", "prm", 1, 0, "s", True, 0.0)])
        assert macro_rows(summary) == [{"model_name": "m", "scorer": "prm", "beam_width": 1,
                                        "mean_percent": 100.0, "se_percent": 0.0, "count": 1}]

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.tuples(st.integers(1, 3), st.integers(0, 2), st.sampled_from("xy"), st.booleans()),
                    min_size=1, max_size=60), st.integers(0, 2**32 - 1))
    def test_means_are_percentages(self, draws, seed):
        rows = [RunResult(f"p{i}", "m", "synthetic", k, s, subj, ok, 0.0) for i, (k, s, subj, ok) in enumerate(draws)]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", TraceWarning)
            summary = aggregate_macro(rows)
            order = RandomStream(seed).generator().permutation(len(rows))
            assert aggregate_macro([rows[i] for i in order]) == summary
        for cell in summary.cells.values():
            assert 0.0 <= cell.mean_percent <= 100.0 and cell.standard_error_percent >= 0.0
