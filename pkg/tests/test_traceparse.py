"""Tests for traceparse module."""
import json
import random
import tempfile
from pathlib import Path

import pytest

from genperf.archspec import default_hardware, preset
from genperf.costmodel import CATEGORIES, model_cost
from genperf.roofline import amdahl
from genperf.traceparse import (
    BreakdownError,
    EmptyTraceError,
    OperatorBreakdown,
    RuleError,
    TraceEvent,
    TraceParseError,
    attention_speedup_from_traces,
    breakdown_from_trace,
    build_spans,
    compare_breakdown,
    default_rules,
    link_kernels,
    load_rules,
    match_category,
    parse_trace,
    rank_agreement,
    write_breakdown_csv,
    write_trace,
)

FIXTURES = Path(__file__).parent / "fixtures"
TWO_KERNEL = FIXTURES / "two_kernel.json"


def _kernel(name, ts, dur, correlation=None):
    return TraceEvent(name, "X", ts, dur, process_id=0, thread_id=7, correlation=correlation, category="kernel")


def _launch(ts, correlation):
    return TraceEvent("cudaLaunchKernel", "X", ts, 2, process_id=1, thread_id=1, correlation=correlation, category="cuda_runtime")


def _span(name, ts, dur):
    return TraceEvent(name, "X", ts, dur, process_id=1, thread_id=1, category="user_annotation")


def _write_json(directory, name, document):
    path = Path(directory) / name
    path.write_text(json.dumps(document), encoding="utf-8")
    return path


class TestParsing:
    """Test trace parsing."""

    def test_parse_fixture(self):
        """Test that metadata events are dropped and the rest kept in order."""
        events = parse_trace(TWO_KERNEL)
        assert len(events) == 6
        assert events[0].name == "attn_block"
        assert sum(1 for event in events if event.is_kernel) == 2

    def test_bare_array(self):
        """Test that a bare event array is accepted."""
        events = parse_trace(FIXTURES / "no_kernels.json")
        assert [event.name for event in events] == ["attn_block", "cudaLaunchKernel"]
        assert events[1].correlation == 1

    def test_write_round_trip_gzip(self):
        """Test that written traces, compressed or not, parse back unchanged."""
        events = parse_trace(TWO_KERNEL)
        with tempfile.TemporaryDirectory() as temp_dir:
            for name in ("trace.json", "trace.json.gz"):
                path = write_trace(events, Path(temp_dir) / name)
                assert parse_trace(path) == events

    def test_malformed_json_offset(self):
        """Test that decode failures report a byte offset."""
        text = '{"traceEvents": [{"name": "a", "ph": "X", "ts": 1,'
        with tempfile.TemporaryDirectory() as temp_dir:
            path = Path(temp_dir) / "broken.json"
            path.write_text(text, encoding="utf-8")
            with pytest.raises(TraceParseError) as exc_info:
                parse_trace(path)
        assert exc_info.value.offset is not None
        assert 0 < exc_info.value.offset <= len(text.encode("utf-8"))

    def test_missing_field_reports_index(self):
        """Test that an event without ts reports its index."""
        with tempfile.TemporaryDirectory() as temp_dir:
            path = _write_json(
                temp_dir, "missing.json",
                [{"name": "a", "ph": "X", "ts": 0, "dur": 1}, {"name": "b", "ph": "X"}],
            )
            with pytest.raises(TraceParseError) as exc_info:
                parse_trace(path)
        assert exc_info.value.offset == 1
        assert "ts" in str(exc_info.value)

    def test_negative_duration(self):
        """Test that negative durations are rejected."""
        with tempfile.TemporaryDirectory() as temp_dir:
            path = _write_json(temp_dir, "neg.json", [{"name": "k", "ph": "X", "ts": 0, "dur": -1}])
            with pytest.raises(TraceParseError):
                parse_trace(path)

    def test_missing_event_array(self):
        """Test that a document without events is rejected."""
        with tempfile.TemporaryDirectory() as temp_dir:
            path = _write_json(temp_dir, "empty.json", {"otherData": {}})
            with pytest.raises(TraceParseError):
                parse_trace(path)


class TestRules:
    """Test category rules."""

    def test_default_rules_order(self):
        """Test that implicit_gemm beats the generic gemm rule."""
        rules = default_rules()
        assert match_category("sm80_xmma_fprop_implicit_gemm", rules) == "convolution"
        assert match_category("ampere_sgemm_128x64", rules) == "linear"
        assert match_category("fmha_cutlassF_flash_fwd", rules) == "attention"
        assert match_category("GroupNorm", rules) == "groupnorm"
        assert match_category("elementwise_kernel", rules) is None

    def test_custom_rules(self):
        """Test loading a custom rules file."""
        with tempfile.TemporaryDirectory() as temp_dir:
            path = Path(temp_dir) / "rules.yaml"
            path.write_text("- {pattern: Elementwise, category: other}\n", encoding="utf-8")
            rules = load_rules(path)
        assert match_category("elementwise_kernel", rules) == "other"

    def test_invalid_rules(self):
        """Test that unknown categories and empty files are rejected."""
        with tempfile.TemporaryDirectory() as temp_dir:
            bad = Path(temp_dir) / "bad.yaml"
            bad.write_text("rules:\n  - {pattern: x, category: softmax}\n", encoding="utf-8")
            with pytest.raises(RuleError):
                load_rules(bad)
            empty = Path(temp_dir) / "empty.yaml"
            empty.write_text("rules: []\n", encoding="utf-8")
            with pytest.raises(RuleError):
                load_rules(empty)
            with pytest.raises(RuleError):
                load_rules(Path(temp_dir) / "missing.yaml")


class TestAttribution:
    """Test kernel-to-category attribution."""

    def test_two_kernel_fixture(self):
        """Test the golden two-kernel fractions."""
        breakdown = breakdown_from_trace(TWO_KERNEL)
        assert breakdown.fraction("attention") == 0.8
        assert breakdown.fraction("convolution") == 0.2
        assert breakdown.fraction("linear") == 0.0
        assert breakdown.kernel_count == 2
        assert breakdown.unattributed == 0

    def test_category_times_sum_to_total(self):
        """Test that category times add up to total kernel time exactly."""
        breakdown = breakdown_from_trace(TWO_KERNEL)
        assert sum(breakdown.times_ns.values()) == breakdown.total_ns == 100_000
        assert breakdown.total_time == 100.0
        assert breakdown.wall_ns == 140_000

    def test_permutation_invariance(self):
        """Test that event order does not change the breakdown."""
        events = parse_trace(TWO_KERNEL)
        reference = link_kernels(events)
        rng = random.Random(7)
        for _ in range(20):
            shuffled = list(events)
            rng.shuffle(shuffled)
            assert link_kernels(shuffled) == reference

    def test_kernel_name_fallback(self):
        """Test attribution by kernel name without annotations."""
        breakdown = link_kernels([_kernel("cudnn_conv_fwd", 0, 10), _kernel("elementwise_add", 20, 5)])
        assert breakdown.times_ns["convolution"] == 10_000
        assert breakdown.times_ns["other"] == 5_000
        assert breakdown.unattributed == 1

    def test_annotation_overrides_kernel_name(self):
        """Test that the enclosing annotation wins over the kernel name."""
        events = [_span("softmax_block", 0, 50), _launch(5, 1), _kernel("ampere_sgemm", 10, 30, correlation=1)]
        assert link_kernels(events).times_ns["attention"] == 30_000

    def test_innermost_span_wins(self):
        """Test nested annotation spans."""
        events = [
            _span("conv_block", 0, 200),
            _span("attention", 10, 40),
            _launch(20, 1),
            _kernel("ampere_sgemm", 100, 30, correlation=1),
            _launch(150, 2),
            _kernel("ampere_sgemm", 160, 10, correlation=2),
        ]
        breakdown = link_kernels(events)
        assert breakdown.times_ns["attention"] == 30_000
        assert breakdown.times_ns["convolution"] == 10_000

    def test_begin_end_spans(self):
        """Test that B/E pairs act as annotation spans."""
        events = [
            TraceEvent("attention_fwd", "B", 0, process_id=1, thread_id=1),
            _launch(5, 9),
            TraceEvent("attention_fwd", "E", 50, process_id=1, thread_id=1),
            _kernel("ampere_sgemm", 60, 25, correlation=9),
        ]
        spans = build_spans(events, default_rules())
        assert [(span.label, span.start, span.end) for span in spans] == [("attention_fwd", 0, 50)]
        assert link_kernels(events).times_ns["attention"] == 25_000

    def test_flow_events_link_launches(self):
        """Test correlation through flow start events."""
        events = [
            _span("group_norm", 0, 20),
            TraceEvent("ac2g", "s", 5, process_id=1, thread_id=1, correlation=3),
            _kernel("vectorized_elementwise", 40, 8, correlation=3),
        ]
        assert link_kernels(events).times_ns["groupnorm"] == 8_000

    def test_empty_trace(self):
        """Test that traces without kernels are rejected."""
        with pytest.raises(EmptyTraceError) as exc_info:
            breakdown_from_trace(FIXTURES / "no_kernels.json")
        assert str(exc_info.value) == "no accelerator kernels found"


class TestComparison:
    """Test breakdown comparison and trace speedups."""

    def test_rank_agreement(self):
        """Test pairwise ordering agreement."""
        first = {"attention": 0.5, "convolution": 0.3, "linear": 0.2, "groupnorm": 0.0, "other": 0.0}
        swapped = dict(first, attention=0.3, convolution=0.5)
        assert rank_agreement(first, first) == 1.0
        assert rank_agreement(first, swapped) == 0.9

    def test_compare_with_model(self):
        """Test measured against modeled fractions."""
        measured = breakdown_from_trace(TWO_KERNEL)
        comparison = compare_breakdown(measured, model_cost(preset("stable-diffusion"), steps=1), default_hardware())
        assert [row.category for row in comparison.categories] == list(CATEGORIES)
        row = comparison["attention"]
        assert row.delta == pytest.approx(row.measured_fraction - row.modeled_fraction)
        assert 0.0 <= comparison.rank_agreement <= 1.0
        assert comparison["groupnorm"].relative_delta is None

    def test_speedup_from_traces(self):
        """Test module and end-to-end speedups of a flash-only change."""
        baseline = OperatorBreakdown.from_microseconds({"attention": 80, "convolution": 20})
        optimized = OperatorBreakdown.from_microseconds({"attention": 40, "convolution": 20})
        speedup = attention_speedup_from_traces(baseline, optimized)
        assert speedup.module_speedup == 2.0
        assert speedup.end_to_end == pytest.approx(100 / 60)
        assert speedup.consistent
        assert speedup.feasible

    def test_amdahl_consistency_on_synthetic_pairs(self):
        """Test agreement with Amdahl's law when only attention changes."""
        rng = random.Random(11)
        for _ in range(100):
            attention = rng.uniform(1, 1000)
            rest = {"convolution": rng.uniform(0, 500), "linear": rng.uniform(0, 500)}
            baseline = OperatorBreakdown.from_microseconds(dict(rest, attention=attention))
            optimized = OperatorBreakdown.from_microseconds(dict(rest, attention=attention / rng.uniform(1, 8)))
            speedup = attention_speedup_from_traces(baseline, optimized)
            predicted = amdahl(baseline.fraction("attention"), speedup.module_speedup).end_to_end
            assert abs(speedup.end_to_end - predicted) <= 1e-9
            assert speedup.consistent

    def test_inconsistent_when_other_time_changes(self):
        """Test that changes outside attention are flagged."""
        baseline = OperatorBreakdown.from_microseconds({"attention": 80, "convolution": 20})
        optimized = OperatorBreakdown.from_microseconds({"attention": 40, "convolution": 10})
        assert not attention_speedup_from_traces(baseline, optimized).consistent

    def test_zero_optimized_attention(self):
        """Test that a vanished attention time cannot yield a speedup."""
        baseline = OperatorBreakdown.from_microseconds({"attention": 80, "convolution": 20})
        optimized = OperatorBreakdown.from_microseconds({"convolution": 20})
        with pytest.raises(BreakdownError):
            attention_speedup_from_traces(baseline, optimized)

    def test_unknown_category(self):
        """Test that breakdowns only hold known categories."""
        with pytest.raises(BreakdownError):
            OperatorBreakdown.from_microseconds({"softmax": 1.0})

    def test_write_breakdown_csv(self):
        """Test the breakdown CSV."""
        breakdown = breakdown_from_trace(TWO_KERNEL)
        with tempfile.TemporaryDirectory() as temp_dir:
            path = write_breakdown_csv(breakdown, str(Path(temp_dir) / "breakdown.csv"))
            with open(path, newline="", encoding="utf-8") as handle:
                lines = handle.read().split("\r\n")
        assert lines[0] == "category,microseconds,fraction"
        assert lines[1] == "attention,80.0,0.8"
        assert lines[2] == "convolution,20.0,0.2"
