"""Roofline placement, prefill/decode classification and Amdahl speedup projection."""
import logging
import math
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Tuple

from .archspec import HardwareSpec, ImageSize, ModelSpec, TransformerSpec, resize, with_steps
from .costmodel import CATEGORIES, CostBreakdown, OpCost, attention_cost, model_cost
from .file_operations import write_csv
from .seqprofile import AttentionCall, SeqLenTrace

logger = logging.getLogger(__name__)

AMDAHL_PROJECTIONS = (1.5, 2.0, 4.0, math.inf)

# Measured end-to-end Flash Attention speedups, used as annotations and audit inputs only.
MEASURED_FLASH_SPEEDUPS: Dict[str, float] = {
    "llama": 1.52,
    "imagen": 1.22,
    "stable-diffusion": 1.67,
    "muse": 1.11,
    "parti": 1.17,
    "prod-image": 1.04,
    "make-a-video": 1.06,
    "phenaki": 1.15,
}

PREFILL_LIKE = "prefill-like"
DECODE_LIKE = "decode-like"
ROOFLINE_CSV_HEADER = ("model", "arithmetic_intensity", "attainable_flops", "bound")


class RooflineError(Exception):
    """Raised for arguments outside the domain of a roofline or Amdahl computation."""

    def __init__(self, message: str, argument: Optional[str] = None):
        super().__init__(message)
        self.argument = argument


@dataclass(frozen=True)
class RooflinePoint:
    arithmetic_intensity: float
    attainable_flops: float
    bound: str
    ridge_point: float
    model: Optional[str] = None


@dataclass(frozen=True)
class SpeedupProjection:
    """End-to-end speedup from accelerating a fraction of execution time."""

    fraction: float
    module_speedup: float
    end_to_end: float

    @property
    def ceiling(self) -> float:
        """Limit of the end-to-end speedup as the module speedup grows without bound."""
        return math.inf if self.fraction >= 1.0 else 1.0 / (1.0 - self.fraction)


@dataclass(frozen=True)
class SpeedupAudit:
    """Whether an end-to-end speedup is reachable by speeding up a fraction of time alone."""

    end_to_end: float
    fraction: float
    ceiling: float
    feasible: bool
    required_module_speedup: Optional[float]
    label: Optional[str] = None


def output_units(spec: ModelSpec) -> int:
    """Generated units per sample: image tokens for transformer generators, else one image or video."""
    variant = spec.variant
    if isinstance(variant, TransformerSpec) and variant.decode_mode != "encode":
        return variant.gen_tokens
    return 1


def arithmetic_intensity(
    spec: ModelSpec,
    image: Optional[ImageSize] = None,
    batch: int = 1,
    mode: str = "baseline",
    steps: Optional[int] = None,
) -> float:
    """FLOPs per output unit over the bytes of model capacity.

    Samples in a batch share one read of the weights, so the intensity grows
    linearly with ``batch``.

    Raises:
        RooflineError: If the spec holds no parameter bytes or the batch is below 1
    """
    if batch < 1:
        raise RooflineError(f"batch ≥ 1 (got {batch})", argument="batch")
    if spec.param_bytes <= 0:
        raise RooflineError(f"{spec.name} has no parameters", argument="total_params")
    resolved = with_steps(resize(spec, image), steps)
    flops = model_cost(resolved, mode=mode).totals.flops
    return batch * flops / output_units(resolved) / resolved.param_bytes


def bytes_intensity(
    spec: ModelSpec, image: Optional[ImageSize] = None, mode: str = "baseline", steps: Optional[int] = None
) -> float:
    """FLOPs over total bytes moved, the traffic-based alternative to ``arithmetic_intensity``."""
    totals = model_cost(spec, image, mode, steps).totals
    if totals.bytes_moved == 0:
        return math.inf
    return totals.flops / totals.bytes_moved


def classify_bound(ai: float, hw: HardwareSpec, model: Optional[str] = None) -> RooflinePoint:
    """Place an arithmetic intensity on the roofline; a tie at the ridge counts as compute-bound."""
    ridge = hw.ridge_point
    bound = "compute" if ai >= ridge else "memory"
    attainable = min(hw.peak_flops, ai * hw.mem_bandwidth)
    return RooflinePoint(
        arithmetic_intensity=ai, attainable_flops=attainable, bound=bound, ridge_point=ridge, model=model
    )


def roofline_point(
    spec: ModelSpec,
    hw: HardwareSpec,
    image: Optional[ImageSize] = None,
    batch: int = 1,
    steps: Optional[int] = None,
) -> RooflinePoint:
    return classify_bound(arithmetic_intensity(spec, image, batch, steps=steps), hw, model=spec.name)


def estimate_time(cost: OpCost, hw: HardwareSpec) -> float:
    """Seconds under the max-of-two-roofs bound."""
    return max(cost.flops / hw.peak_flops, cost.bytes_moved / hw.mem_bandwidth)


def category_times(breakdown: CostBreakdown, hw: HardwareSpec) -> Dict[str, float]:
    return {category: estimate_time(breakdown[category], hw) for category in CATEGORIES}


def category_fractions(breakdown: CostBreakdown, hw: HardwareSpec) -> Dict[str, float]:
    """Modeled share of time per category; all zero when nothing takes time."""
    times = category_times(breakdown, hw)
    total = sum(times.values())
    if total == 0:
        return {category: 0.0 for category in CATEGORIES}
    return {category: time / total for category, time in times.items()}


def _check_fraction(fraction: float) -> None:
    if math.isnan(fraction) or not 0.0 <= fraction <= 1.0:
        raise RooflineError(f"fraction must lie in [0, 1] (got {fraction})", argument="fraction")


def amdahl(fraction: float, module_speedup: float) -> SpeedupProjection:
    """Amdahl's law, ``1 / ((1 - p) + p / s)``; ``s`` may be infinite.

    Raises:
        RooflineError: If ``fraction`` is outside [0, 1] or ``module_speedup`` is below 1
    """
    _check_fraction(fraction)
    if math.isnan(module_speedup) or module_speedup < 1.0:
        raise RooflineError(f"module_speedup must be ≥ 1 (got {module_speedup})", argument="module_speedup")

    accelerated = 0.0 if math.isinf(module_speedup) else fraction / module_speedup
    denominator = (1.0 - fraction) + accelerated
    end_to_end = math.inf if denominator == 0 else 1.0 / denominator
    return SpeedupProjection(fraction=fraction, module_speedup=module_speedup, end_to_end=end_to_end)


def project_speedups(fraction: float, speedups: Iterable[float] = AMDAHL_PROJECTIONS) -> List[SpeedupProjection]:
    return [amdahl(fraction, speedup) for speedup in speedups]


def audit_speedup(end_to_end: float, fraction: float, label: Optional[str] = None) -> SpeedupAudit:
    """Check an end-to-end speedup against the Amdahl ceiling ``1 / (1 - p)``.

    For a feasible pair the module speedup needed to reach it is also
    reported: ``p / (1 / e - (1 - p))``.

    Raises:
        RooflineError: If ``fraction`` is outside [0, 1] or ``end_to_end`` is below 1
    """
    _check_fraction(fraction)
    if math.isnan(end_to_end) or end_to_end < 1.0:
        raise RooflineError(f"end_to_end must be ≥ 1 (got {end_to_end})", argument="end_to_end")

    ceiling = math.inf if fraction == 1.0 else 1.0 / (1.0 - fraction)
    feasible = end_to_end <= ceiling
    required: Optional[float] = None
    if feasible:
        if end_to_end == 1.0:
            required = 1.0
        else:
            slack = 1.0 / end_to_end - (1.0 - fraction)
            required = fraction / slack if slack > 0 else math.inf
    else:
        logger.warning(
            "%s: end-to-end %.3fx exceeds the %.3fx ceiling for fraction %.3f",
            label or "speedup", end_to_end, ceiling, fraction,
        )
    return SpeedupAudit(
        end_to_end=end_to_end,
        fraction=fraction,
        ceiling=ceiling,
        feasible=feasible,
        required_module_speedup=required,
        label=label,
    )


def audit_measured(fraction: float) -> List[SpeedupAudit]:
    """Audit every measured Flash Attention speedup at one attention fraction."""
    return [audit_speedup(speedup, fraction, label=name) for name, speedup in MEASURED_FLASH_SPEEDUPS.items()]


def measured_flash_speedup(model_name: str) -> Optional[float]:
    """Measured end-to-end speedup for a preset name, ``-like`` suffix ignored."""
    key = model_name.lower()
    if key.endswith("-like"):
        key = key[: -len("-like")]
    return MEASURED_FLASH_SPEEDUPS.get(key)


def prefill_decode_classify(call: AttentionCall) -> str:
    """Decode-like iff a single query attends to more than one key."""
    return DECODE_LIKE if call.q_len == 1 and call.kv_len > 1 else PREFILL_LIKE


def prefill_decode_census(trace: SeqLenTrace) -> Dict[str, int]:
    census = {PREFILL_LIKE: 0, DECODE_LIKE: 0}
    for call in trace:
        census[prefill_decode_classify(call)] += 1
    return census


def flash_speedup_model(call: AttentionCall, hw: HardwareSpec, bytes_per_el: int = 2) -> float:
    """Modeled attention speedup of the flash traffic model over the baseline."""
    baseline = estimate_time(attention_cost(call, "baseline", bytes_per_el), hw)
    flash = estimate_time(attention_cost(call, "flash", bytes_per_el), hw)
    return baseline / flash


def attention_fraction(
    spec: ModelSpec, hw: HardwareSpec, image: Optional[ImageSize] = None, steps: Optional[int] = None
) -> float:
    """Modeled share of baseline execution time spent in attention."""
    spec = with_steps(resize(spec, image), steps)
    return category_fractions(model_cost(spec, mode="baseline"), hw)["attention"]


def roofline_rows(points: Iterable[RooflinePoint]) -> List[Tuple[object, ...]]:
    return [(point.model, point.arithmetic_intensity, point.attainable_flops, point.bound) for point in points]


def write_roofline_csv(points: Iterable[RooflinePoint], path: str) -> str:
    """Write roofline plot data, one row per model."""
    return write_csv(path, ROOFLINE_CSV_HEADER, roofline_rows(points))
