"""Report assembly and rendering.

Reports are plain documents (dicts of JSON types) so one structure backs the
text, CSV and structured-document outputs. Every report embeds the spec
schema version, the toolkit version and the fully resolved config.
"""
import logging
import math
from typing import Any, Dict, List, Optional, Sequence, Tuple

from jinja2 import Environment, PackageLoader, StrictUndefined, TemplateError

from . import __version__
from .archspec import SPEC_VERSION, HardwareSpec, ImageSize, ModelSpec, resize, spec_document, with_steps
from .costmodel import CATEGORIES, CostBreakdown, model_cost
from .roofline import (
    amdahl,
    bytes_intensity,
    category_fractions,
    category_times,
    estimate_time,
    measured_flash_speedup,
    output_units,
    prefill_decode_census,
    project_speedups,
    roofline_point,
)
from .seqprofile import SeqLenTrace, model_trace, seq_len_histogram, sequence_ratios
from .traceparse import BreakdownComparison, OperatorBreakdown, TraceSpeedup

logger = logging.getLogger(__name__)

ANALYSIS_CSV_HEADER = (
    "mode", "category", "flops", "bytes_moved", "footprint", "param_bytes", "time_s", "time_fraction"
)
COMPARISON_CSV_HEADER = (
    "category", "measured_fraction", "modeled_fraction", "delta", "relative_delta"
)


class ReportError(Exception):
    """Custom exception for report rendering errors."""

    def __init__(self, message: str, template: Optional[str] = None):
        super().__init__(message)
        self.template = template


def _number(value: Optional[float]) -> Any:
    """JSON-safe number: infinities and NaN become strings."""
    if value is None:
        return None
    if isinstance(value, float) and not math.isfinite(value):
        return str(value)
    return value


def report_header(spec: ModelSpec) -> Dict[str, Any]:
    return {
        "spec_version": SPEC_VERSION,
        "toolkit_version": __version__,
        "model": spec.name,
        "config": spec_document(spec),
    }


def cost_section(breakdown: CostBreakdown, hw: HardwareSpec) -> Dict[str, Any]:
    times = category_times(breakdown, hw)
    fractions = category_fractions(breakdown, hw)
    categories = {}
    for category in CATEGORIES:
        cost = breakdown[category]
        categories[category] = {
            "flops": cost.flops,
            "bytes_moved": cost.bytes_moved,
            "footprint": cost.footprint,
            "param_bytes": cost.param_bytes,
            "time_s": times[category],
            "time_fraction": fractions[category],
        }
    totals = breakdown.totals
    return {
        "categories": categories,
        "totals": {
            "flops": totals.flops,
            "bytes_moved": totals.bytes_moved,
            "footprint": totals.footprint,
            "param_bytes": totals.param_bytes,
            "time_s": estimate_time(totals, hw),
        },
        "peak_footprint": breakdown.peak_footprint,
    }


def sequence_section(trace: SeqLenTrace) -> Dict[str, Any]:
    """Trace summary; a trace without attention calls reports only its length."""
    if not trace.calls:
        return {"calls": 0, "prefill_decode": prefill_decode_census(trace)}
    ratios = sequence_ratios(trace)
    return {
        "calls": len(trace),
        "max_q_len": max(trace.q_lens()),
        "min_q_len": min(trace.q_lens()),
        "per_stage_ratio": ratios.per_stage,
        "whole_trace_ratio": ratios.whole_trace,
        "histogram": {str(q_len): count for q_len, count in seq_len_histogram(trace).items()},
        "prefill_decode": prefill_decode_census(trace),
    }


def build_analysis(
    spec: ModelSpec,
    hw: HardwareSpec,
    image: Optional[ImageSize] = None,
    mode: str = "baseline",
    batch: int = 1,
    steps: Optional[int] = None,
) -> Dict[str, Any]:
    """Full analysis report: sequence profile, costs in both modes, roofline and projections."""
    resolved = with_steps(resize(spec, image), steps)
    trace = model_trace(resolved)
    costs = {name: model_cost(resolved, mode=name) for name in ("baseline", "flash")}

    point = roofline_point(resolved, hw, batch=batch)

    baseline_times = category_times(costs["baseline"], hw)
    flash_attention = estimate_time(costs["flash"]["attention"], hw)
    fraction = category_fractions(costs["baseline"], hw)["attention"]
    modeled_module = baseline_times["attention"] / flash_attention if flash_attention else 1.0
    logger.debug("analysis of %s: ai=%.3f attention fraction=%.3f", resolved.name, point.arithmetic_intensity, fraction)

    document = report_header(resolved)
    document.update(
        {
            "hardware": {**hw.to_document(), "ridge_point": hw.ridge_point},
            "image_size": str(resolved.native_image) if resolved.native_image else None,
            "mode": mode,
            "batch": batch,
            "sequence": sequence_section(trace),
            "costs": {name: cost_section(breakdown, hw) for name, breakdown in costs.items()},
            "roofline": {
                "arithmetic_intensity": point.arithmetic_intensity,
                "attainable_flops": point.attainable_flops,
                "bound": point.bound,
                "ridge_point": point.ridge_point,
                "output_units": output_units(resolved),
                "bytes_intensity": _number(bytes_intensity(resolved, mode=mode)),
            },
            "speedups": {
                "attention_fraction": fraction,
                "modeled_flash_module_speedup": _number(modeled_module),
                "modeled_flash_end_to_end": _number(amdahl(fraction, modeled_module).end_to_end),
                "measured_flash_end_to_end": measured_flash_speedup(resolved.name),
                "projections": [
                    {
                        "module_speedup": _number(projection.module_speedup),
                        "end_to_end": _number(projection.end_to_end),
                    }
                    for projection in project_speedups(fraction)
                ],
            },
        }
    )
    return document


def analysis_rows(document: Dict[str, Any]) -> List[Tuple[Any, ...]]:
    rows = []
    for mode, section in document["costs"].items():
        for category in CATEGORIES:
            values = section["categories"][category]
            rows.append(
                (
                    mode,
                    category,
                    values["flops"],
                    values["bytes_moved"],
                    values["footprint"],
                    values["param_bytes"],
                    values["time_s"],
                    values["time_fraction"],
                )
            )
    return rows


def build_comparison(
    measured: OperatorBreakdown,
    comparison: BreakdownComparison,
    spec: ModelSpec,
    hw: HardwareSpec,
    trace_path: str,
    speedup: Optional[TraceSpeedup] = None,
) -> Dict[str, Any]:
    """Measured-versus-modeled comparison report."""
    document = report_header(spec)
    document.update(
        {
            "hardware": {**hw.to_document(), "ridge_point": hw.ridge_point},
            "trace": trace_path,
            "measured": {
                "total_us": measured.total_time,
                "wall_us": measured.wall_ns / 1000,
                "kernels": measured.kernel_count,
                "unattributed": measured.unattributed,
            },
            "categories": [
                {
                    "category": row.category,
                    "measured_fraction": row.measured_fraction,
                    "modeled_fraction": row.modeled_fraction,
                    "delta": row.delta,
                    "relative_delta": row.relative_delta,
                }
                for row in comparison.categories
            ],
            "rank_agreement": comparison.rank_agreement,
            "speedup": speedup_section(speedup) if speedup else None,
        }
    )
    return document


def speedup_section(speedup: TraceSpeedup) -> Dict[str, Any]:
    return {
        "module_speedup": speedup.module_speedup,
        "end_to_end": speedup.end_to_end,
        "attention_fraction": speedup.fraction,
        "amdahl_end_to_end": _number(speedup.predicted_end_to_end),
        "consistent": speedup.consistent,
        "feasible": speedup.feasible,
    }


def comparison_rows(document: Dict[str, Any]) -> List[Tuple[Any, ...]]:
    return [
        (row["category"], row["measured_fraction"], row["modeled_fraction"], row["delta"], row["relative_delta"])
        for row in document["categories"]
    ]


def _environment() -> Environment:
    environment = Environment(
        loader=PackageLoader("genperf", "templates"),
        undefined=StrictUndefined,
        keep_trailing_newline=True,
        trim_blocks=True,
        lstrip_blocks=True,
    )
    environment.filters["si"] = format_si
    return environment


def format_si(value: Any, unit: str = "") -> str:
    """Compact engineering notation, ``1.23e+12`` style numbers as ``1.23 T``."""
    if isinstance(value, str) or value is None:
        return str(value)
    magnitude = abs(value)
    for threshold, prefix in ((1e18, "E"), (1e15, "P"), (1e12, "T"), (1e9, "G"), (1e6, "M"), (1e3, "k")):
        if magnitude >= threshold:
            return f"{value / threshold:.3g} {prefix}{unit}"
    return f"{value:.3g} {unit}".rstrip()


def render_text(template_name: str, document: Dict[str, Any], categories: Sequence[str] = CATEGORIES) -> str:
    """Render a report document through a text template.

    Raises:
        ReportError: If the template is missing or references an absent field
    """
    try:
        template = _environment().get_template(template_name)
        return template.render(report=document, categories=categories)
    except TemplateError as e:
        raise ReportError(f"Failed to render {template_name}: {e}", template=template_name)
