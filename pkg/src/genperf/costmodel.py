"""FLOP, byte-traffic and memory-footprint models for attention, convolution and linear operators.

Every count is an exact Python integer; floating point only enters in the
log-log fits and in roofline time estimates.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .archspec import (
    DiffusionSpec,
    ImageSize,
    ModelSpec,
    TransformerSpec,
    VideoSpec,
    replace,
    resize,
    with_steps,
)
from .seqprofile import AttentionCall, SeqLenTrace, model_trace, single_traversal, transformer_trace

logger = logging.getLogger(__name__)

SIM_TRAVERSALS = 3
MAX_REPRESENTABLE = 2**63 - 1
CATEGORIES = ("attention", "convolution", "linear", "groupnorm", "other")
MODES = ("baseline", "flash")
CONV_KERNEL = 3
FEED_FORWARD_MULT = 4


class CostModelError(Exception):
    """Raised for invalid cost-model inputs and degenerate fits."""

    def __init__(self, message: str, quantity: Optional[str] = None):
        super().__init__(message)
        self.quantity = quantity


class CostOverflowError(CostModelError):
    """Raised when a count exceeds the signed 64-bit range of every emitted format."""


def _checked(value: int, quantity: str) -> int:
    if value < 0:
        raise CostModelError(f"{quantity} must be ≥ 0 (got {value})", quantity=quantity)
    if value > MAX_REPRESENTABLE:
        raise CostOverflowError(f"{quantity} {value} exceeds 2**63 - 1", quantity=quantity)
    return value


@dataclass(frozen=True)
class OpCost:
    """Cost of one operator instance or a category aggregate.

    ``footprint`` is the intermediate bytes allocated, additive across
    operators. ``param_bytes`` counts distinct weights and is not multiplied
    when a pass repeats.
    """

    flops: int = 0
    bytes_moved: int = 0
    footprint: int = 0
    param_bytes: int = 0

    def __post_init__(self) -> None:
        for name in ("flops", "bytes_moved", "footprint", "param_bytes"):
            _checked(getattr(self, name), name)

    def __add__(self, other: "OpCost") -> "OpCost":
        return OpCost(
            flops=self.flops + other.flops,
            bytes_moved=self.bytes_moved + other.bytes_moved,
            footprint=self.footprint + other.footprint,
            param_bytes=self.param_bytes + other.param_bytes,
        )

    def scaled(self, factor: int) -> "OpCost":
        """Repeat the work ``factor`` times over the same weights."""
        return OpCost(
            flops=self.flops * factor,
            bytes_moved=self.bytes_moved * factor,
            footprint=self.footprint * factor,
            param_bytes=self.param_bytes,
        )


def _empty_categories() -> Dict[str, OpCost]:
    return {category: OpCost() for category in CATEGORIES}


@dataclass(frozen=True)
class CostBreakdown:
    """Per-category costs of a full inference pass."""

    categories: Dict[str, OpCost] = field(default_factory=_empty_categories)
    peak_footprint: int = 0

    @property
    def totals(self) -> OpCost:
        total = OpCost()
        for category in CATEGORIES:
            total = total + self.categories[category]
        return total

    def __getitem__(self, category: str) -> OpCost:
        return self.categories[category]

    def __add__(self, other: "CostBreakdown") -> "CostBreakdown":
        return CostBreakdown(
            categories={category: self[category] + other[category] for category in CATEGORIES},
            peak_footprint=max(self.peak_footprint, other.peak_footprint),
        )

    def scaled(self, factor: int) -> "CostBreakdown":
        return CostBreakdown(
            categories={category: self[category].scaled(factor) for category in CATEGORIES},
            peak_footprint=self.peak_footprint,
        )

    def with_cost(self, category: str, cost: OpCost, peak: int = 0) -> "CostBreakdown":
        categories = dict(self.categories)
        categories[category] = categories[category] + cost
        return CostBreakdown(categories=categories, peak_footprint=max(self.peak_footprint, peak))


def sim_matrix_memory(height: int, width: int, text_encode: int, bytes_per_el: int = 2) -> int:
    """Bytes of one similarity matrix over an ``height x width`` latent plus the text tokens.

    Raises:
        CostModelError: If an argument is negative or the element size is not 1, 2 or 4
        CostOverflowError: If the result exceeds 2**63 - 1
    """
    for name, value in (("height", height), ("width", width), ("text_encode", text_encode)):
        if value < 0:
            raise CostModelError(f"{name} must be ≥ 0 (got {value})", quantity=name)
    if bytes_per_el not in (1, 2, 4):
        raise CostModelError(f"bytes_per_el ∈ {{1, 2, 4}} (got {bytes_per_el})", quantity="bytes_per_el")
    tokens = height * width
    return _checked(bytes_per_el * tokens * (tokens + text_encode), "sim_matrix_memory")


def cumulative_sim_memory(spec: DiffusionSpec, bytes_per_el: int = 2, per_head: bool = False) -> int:
    """Similarity-matrix bytes summed over one UNet traversal.

    Self-attention stages contribute ``q^2`` and cross-attention stages
    ``q * text_encode`` per visit, times ``blocks_per_stage``. With attention
    at every stage this is the closed form
    ``b * [2 * sum_{n<depth} q_n (q_n + t) + q_depth (q_depth + t)]``.
    Heads multiply the result only when ``per_head`` is set.
    """
    total = 0
    for stage in spec.visits():
        tokens = spec.stage_tokens(stage)
        if stage in spec.self_attn_stages:
            total += tokens * tokens
        if stage in spec.cross_attn_stages:
            total += tokens * spec.text_encode
    heads = spec.num_heads if per_head else 1
    return _checked(total * spec.blocks_per_stage * bytes_per_el * heads, "cumulative_sim_memory")


def attn_flops(call: AttentionCall) -> int:
    """FLOPs of the two attention matmuls, ``QK^T`` and ``PV``."""
    return 4 * call.batch * call.num_heads * call.q_len * call.kv_len * call.head_dim


def sim_bytes(call: AttentionCall, bytes_per_el: int = 2) -> int:
    """Bytes of the similarity matrices of one call, all heads and batch entries."""
    return bytes_per_el * call.batch * call.num_heads * call.q_len * call.kv_len


def attn_bytes(call: AttentionCall, mode: str = "baseline", bytes_per_el: int = 2) -> int:
    """Main-memory traffic of one attention call.

    Both modes read Q, K, V and write the output. Baseline additionally
    writes the similarity matrix, reads it back for softmax and reads the
    probabilities for ``PV``: ``SIM_TRAVERSALS`` passes over ``q_len * kv_len``.
    """
    if mode not in MODES:
        raise CostModelError(f"Unknown attention mode '{mode}'", quantity="mode")
    io_elements = 2 * (call.q_len + call.kv_len) * call.head_dim
    traffic = bytes_per_el * call.batch * call.num_heads * io_elements
    if mode == "baseline":
        traffic += SIM_TRAVERSALS * sim_bytes(call, bytes_per_el)
    return traffic


def attention_cost(call: AttentionCall, mode: str = "baseline", bytes_per_el: int = 2) -> OpCost:
    footprint = sim_bytes(call, bytes_per_el) if mode == "baseline" else 0
    return OpCost(
        flops=attn_flops(call),
        bytes_moved=attn_bytes(call, mode, bytes_per_el),
        footprint=footprint,
    )


def conv_flops(in_h: int, in_w: int, k: int, c_in: int, c_out: int) -> int:
    """FLOPs of a stride-1, same-padded ``k x k`` convolution."""
    return 2 * in_h * in_w * k * k * c_in * c_out


def conv_cost(
    in_h: int, in_w: int, k: int, c_in: int, c_out: int, bytes_per_el: int = 2, batch: int = 1
) -> OpCost:
    """Convolution over ``batch`` images sharing one read of the weights."""
    weights = k * k * c_in * c_out
    pixels = batch * in_h * in_w
    return OpCost(
        flops=batch * conv_flops(in_h, in_w, k, c_in, c_out),
        bytes_moved=bytes_per_el * (pixels * c_in + pixels * c_out + weights),
        footprint=bytes_per_el * pixels * c_out,
        param_bytes=bytes_per_el * weights,
    )


def linear_cost(tokens: int, d_in: int, d_out: int, bytes_per_el: int = 2) -> OpCost:
    """Dense layer applied to ``tokens`` rows."""
    return OpCost(
        flops=2 * tokens * d_in * d_out,
        bytes_moved=bytes_per_el * (tokens * d_in + tokens * d_out + d_in * d_out),
        footprint=bytes_per_el * tokens * d_out,
        param_bytes=bytes_per_el * d_in * d_out,
    )


def _attention_site_linear(call: AttentionCall, context_dim: int, bytes_per_el: int) -> OpCost:
    width = call.num_heads * call.head_dim
    rows = call.q_len * call.batch
    if call.kind == "cross":
        context_rows = call.kv_len * call.batch
        return (
            linear_cost(rows, width, width, bytes_per_el)
            + linear_cost(context_rows, context_dim or width, 2 * width, bytes_per_el)
            + linear_cost(rows, width, width, bytes_per_el)
        )
    cost = linear_cost(rows, width, 3 * width, bytes_per_el) + linear_cost(rows, width, width, bytes_per_el)
    if call.kind != "temporal":
        hidden = FEED_FORWARD_MULT * width
        cost = cost + linear_cost(rows, width, hidden, bytes_per_el) + linear_cost(rows, hidden, width, bytes_per_el)
    return cost


def _traversal_breakdown(variant: Union[DiffusionSpec, VideoSpec], mode: str, bytes_per_el: int) -> CostBreakdown:
    base = variant.base if isinstance(variant, VideoSpec) else variant
    frames = variant.num_frames if isinstance(variant, VideoSpec) else 1
    breakdown = CostBreakdown()

    for call in single_traversal(variant):
        attention = attention_cost(call, mode, bytes_per_el)
        breakdown = breakdown.with_cost("attention", attention, peak=attention.footprint)
        breakdown = breakdown.with_cost("linear", _attention_site_linear(call, base.context_dim, bytes_per_el))

    if base.base_channels and base.num_res_blocks:
        for stage in base.visits():
            height, width = base.stage_side(stage)
            channels = base.stage_channels(stage)
            conv = conv_cost(height, width, CONV_KERNEL, channels, channels, bytes_per_el, batch=frames)
            for _ in range(2 * base.num_res_blocks):
                breakdown = breakdown.with_cost("convolution", conv, peak=conv.footprint)

    if base.extra_flops_per_pass:
        breakdown = breakdown.with_cost("other", OpCost(flops=base.extra_flops_per_pass))
    return breakdown


def _diffusion_breakdown(variant: Union[DiffusionSpec, VideoSpec], mode: str, bytes_per_el: int) -> CostBreakdown:
    base = variant.base if isinstance(variant, VideoSpec) else variant
    passes = base.denoising_steps * base.guidance_multiplier
    return _traversal_breakdown(variant, mode, bytes_per_el).scaled(passes)


def _transformer_breakdown(spec: TransformerSpec, mode: str, bytes_per_el: int) -> CostBreakdown:
    layers = spec.num_layers
    width = spec.model_dim
    hidden = FEED_FORWARD_MULT * width
    breakdown = CostBreakdown()

    for call in transformer_trace(spec):
        attention = attention_cost(call, mode, bytes_per_el)
        breakdown = breakdown.with_cost("attention", attention.scaled(layers), peak=attention.footprint)
        tokens = call.q_len * call.batch
        dense = (
            linear_cost(tokens, width, 3 * width, bytes_per_el)
            + linear_cost(tokens, width, width, bytes_per_el)
            + linear_cost(tokens, width, hidden, bytes_per_el)
            + linear_cost(tokens, hidden, width, bytes_per_el)
        )
        breakdown = breakdown.with_cost("linear", OpCost(dense.flops, dense.bytes_moved, dense.footprint).scaled(layers))

    weights = OpCost(param_bytes=bytes_per_el * spec.dense_params)
    return breakdown.with_cost("linear", weights)


def component_cost(spec: ModelSpec, mode: str = "baseline") -> CostBreakdown:
    """Cost of a single component's headline generator."""
    if mode not in MODES:
        raise CostModelError(f"Unknown attention mode '{mode}'", quantity="mode")
    if isinstance(spec.variant, TransformerSpec):
        return _transformer_breakdown(spec.variant, mode, spec.bytes_per_param)
    return _diffusion_breakdown(spec.variant, mode, spec.bytes_per_param)


def model_cost(
    spec: ModelSpec,
    image: Optional[ImageSize] = None,
    mode: str = "baseline",
    steps: Optional[int] = None,
) -> CostBreakdown:
    """Per-category cost of one full inference pass.

    The spec is rescaled to ``image`` first; pipelines sum over their
    components.

    Raises:
        CostOverflowError: If any count exceeds 2**63 - 1
    """
    spec = with_steps(resize(spec, image), steps)
    breakdown = CostBreakdown()
    for component in spec.components():
        breakdown = breakdown + component_cost(component, mode)
    logger.debug("%s (%s): %d FLOPs", spec.name, mode, breakdown.totals.flops)
    return breakdown


def trace_attention_cost(trace: SeqLenTrace, mode: str = "baseline", bytes_per_el: int = 2) -> OpCost:
    """Attention cost summed over every call of a trace, layers included."""
    total = OpCost()
    for call in trace:
        total = total + attention_cost(call, mode, bytes_per_el).scaled(call.repeat)
    return total


@dataclass(frozen=True)
class FrameSweepRow:
    """Spatial and temporal attention cost of one traversal at ``frames`` frames."""

    frames: int
    spatial: OpCost
    temporal: OpCost

    @property
    def spatial_flops(self) -> int:
        return self.spatial.flops

    @property
    def temporal_flops(self) -> int:
        return self.temporal.flops


def _frame_row(spec: VideoSpec, frames: int, bytes_per_el: int) -> FrameSweepRow:
    spatial = OpCost()
    temporal = OpCost()
    for call in single_traversal(replace(spec, num_frames=frames)):
        cost = attention_cost(call, "baseline", bytes_per_el)
        if call.kind == "spatial":
            spatial = spatial + cost
        elif call.kind == "temporal":
            temporal = temporal + cost
    return FrameSweepRow(frames=frames, spatial=spatial, temporal=temporal)


def temporal_spatial_sweep(
    spec: VideoSpec, frames: Sequence[int], bytes_per_el: int = 2, max_workers: Optional[int] = None
) -> List[FrameSweepRow]:
    """Spatial versus temporal attention cost over frame counts, one traversal each.

    Raises:
        CostModelError: If ``frames`` is empty or holds a count below 1
    """
    if not frames:
        raise CostModelError("frames must be non-empty", quantity="frames")
    if any(count < 1 for count in frames):
        raise CostModelError("every frame count must be ≥ 1", quantity="frames")
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        return list(pool.map(lambda count: _frame_row(spec, count, bytes_per_el), frames))


def crossover_frames(spec: VideoSpec) -> Optional[Fraction]:
    """Frame count at which temporal attention FLOPs equal spatial ones.

    Spatial FLOPs grow as ``F * S`` and temporal FLOPs as ``F^2 * T``, so the
    crossover is ``S / T`` with both measured at one frame. None when the
    spec has no temporal attention.
    """
    row = _frame_row(spec, 1, 2)
    if row.temporal_flops == 0:
        return None
    return Fraction(row.spatial_flops, row.temporal_flops)


def loglog_slope(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Least-squares slope of ``log(ys)`` against ``log(xs)``.

    Raises:
        CostModelError: If fewer than two distinct x values are given or a value is not positive
    """
    if len(xs) != len(ys):
        raise CostModelError("x and y series differ in length")
    if len(set(xs)) < 2:
        raise CostModelError("degenerate fit: fewer than 2 distinct sizes", quantity="sizes")
    if any(value <= 0 for value in list(xs) + list(ys)):
        raise CostModelError("log-log fit needs strictly positive values")
    slope, _ = np.polyfit(np.log(np.asarray(xs, dtype=float)), np.log(np.asarray(ys, dtype=float)), 1)
    return float(slope)


def memory_scaling_exponent(spec: DiffusionSpec, sizes: Sequence[int], bytes_per_el: int = 2) -> float:
    """Fitted exponent of cumulative similarity memory against latent side ``L``.

    Raises:
        CostModelError: If fewer than two distinct sizes are given
        SpecValidationError: If a size is not divisible by ``d^unet_depth``
    """
    if len(set(sizes)) < 2:
        raise CostModelError("degenerate fit: fewer than 2 distinct sizes", quantity="sizes")
    memory = [latent_memory(spec, side, bytes_per_el) for side in sizes]
    return loglog_slope(list(sizes), memory)


def latent_memory(spec: DiffusionSpec, side: int, bytes_per_el: int = 2) -> int:
    return cumulative_sim_memory(replace(spec, latent_height=side, latent_width=side), bytes_per_el)


@dataclass(frozen=True)
class SweepRow:
    """One (x, category) point of a sweep, as written to the sweep CSV."""

    x: int
    category: str
    cost: OpCost
    extra: Tuple[object, ...] = ()


def _image_rows(spec: ModelSpec, side: int, mode: str) -> List[SweepRow]:
    sized = resize(spec, ImageSize(height=side, width=side))
    breakdown = model_cost(sized, mode=mode)
    max_q = max(model_trace(sized, steps=1).q_lens(), default=0)
    return [SweepRow(side, category, breakdown[category], (max_q,)) for category in CATEGORIES]


def image_size_sweep(
    spec: ModelSpec, sides: Iterable[int], mode: str = "baseline", max_workers: Optional[int] = None
) -> List[SweepRow]:
    """Per-category cost over square output sizes; extra column is the largest query length.

    Raises:
        CostModelError: If the model produces no image to resize
    """
    if spec.native_image is None:
        raise CostModelError(f"{spec.name} generates no image; an image-size sweep does not apply", quantity="image_size")
    sides = list(sides)
    logger.debug("image-size sweep of %s over %s", spec.name, sides)
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        per_point = list(pool.map(lambda side: _image_rows(spec, side, mode), sides))
    return [row for rows in per_point for row in rows]


def headline_diffusion(spec: ModelSpec) -> DiffusionSpec:
    variant = spec.variant
    if isinstance(variant, VideoSpec):
        return variant.base
    if isinstance(variant, DiffusionSpec):
        return variant
    raise CostModelError(f"{spec.name} has no diffusion generator", quantity="variant")


def latent_sweep(
    spec: ModelSpec, sides: Sequence[int], text_encode: Optional[int] = None
) -> Tuple[List[SweepRow], float]:
    """Attention cost and cumulative similarity memory over square latent sides.

    Returns:
        Rows (footprint holds the cumulative similarity bytes) and the fitted
        memory exponent
    """
    diffusion = headline_diffusion(spec)
    if text_encode is not None:
        diffusion = replace(diffusion, text_encode=text_encode)
    exponent = memory_scaling_exponent(diffusion, sides, spec.bytes_per_param)

    rows = []
    for side in sides:
        sized = replace(diffusion, latent_height=side, latent_width=side)
        attention = trace_attention_cost(single_traversal(sized), "baseline", spec.bytes_per_param)
        footprint = cumulative_sim_memory(sized, spec.bytes_per_param)
        cost = OpCost(flops=attention.flops, bytes_moved=attention.bytes_moved, footprint=footprint)
        rows.append(SweepRow(side, "attention", cost, (exponent,)))
    return rows, exponent
