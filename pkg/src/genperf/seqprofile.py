"""Sequence-length traces of every attention call over one inference pass."""
import logging
from collections import Counter
from dataclasses import dataclass
from typing import Dict, FrozenSet, Iterator, List, Optional, Tuple

from .archspec import DiffusionSpec, ModelSpec, TransformerSpec, VideoSpec
from .file_operations import companion_path, write_csv

logger = logging.getLogger(__name__)

CALL_KINDS = ("self", "cross", "spatial", "temporal")
TRACE_CSV_HEADER = ("index", "step", "stage", "kind", "q_len", "kv_len", "batch", "heads", "head_dim")
HISTOGRAM_CSV_HEADER = ("q_len", "count")


class TraceError(Exception):
    """Raised for invalid attention calls and empty traces."""

    def __init__(self, message: str, model: Optional[str] = None):
        super().__init__(message)
        self.model = model


@dataclass(frozen=True)
class AttentionCall:
    """One attention invocation.

    ``repeat`` counts identically shaped invocations the record stands for;
    transformer traces hold one record per decode step covering every layer.
    """

    kind: str
    q_len: int
    kv_len: int
    head_dim: int
    num_heads: int = 1
    batch: int = 1
    stage: Optional[int] = None
    step: int = 0
    repeat: int = 1

    def __post_init__(self) -> None:
        if self.kind not in CALL_KINDS:
            raise TraceError(f"Unknown attention kind '{self.kind}'")
        for name in ("q_len", "kv_len", "head_dim", "num_heads", "batch", "repeat"):
            if getattr(self, name) < 1:
                raise TraceError(f"AttentionCall {name} ≥ 1 (got {getattr(self, name)})")


@dataclass(frozen=True)
class SeqLenTrace:
    """Attention calls of one inference pass, in execution order."""

    model_name: str
    calls: Tuple[AttentionCall, ...]

    def __len__(self) -> int:
        return len(self.calls)

    def __iter__(self) -> Iterator[AttentionCall]:
        return iter(self.calls)

    def q_lens(self, kinds: Optional[Tuple[str, ...]] = None) -> List[int]:
        return [call.q_len for call in self.calls if kinds is None or call.kind in kinds]

    def kv_lens(self, kinds: Optional[Tuple[str, ...]] = None) -> List[int]:
        return [call.kv_len for call in self.calls if kinds is None or call.kind in kinds]

    def for_step(self, step: int) -> "SeqLenTrace":
        return SeqLenTrace(self.model_name, tuple(call for call in self.calls if call.step == step))


@dataclass(frozen=True)
class SequenceRatios:
    """Spread of query lengths within a trace.

    ``per_stage`` is the largest ratio between adjacent stage visits,
    ``whole_trace`` the ratio of the longest to the shortest query.
    """

    per_stage: float
    whole_trace: float


def _traversal_calls(
    spec: DiffusionSpec,
    step: int,
    frames: Optional[int] = None,
    temporal_stages: FrozenSet[int] = frozenset(),
) -> List[AttentionCall]:
    video = frames is not None
    batch = frames if video else 1
    first_kind = "spatial" if video else "self"
    calls: List[AttentionCall] = []

    for stage in spec.visits():
        tokens = spec.stage_tokens(stage)
        shape = dict(head_dim=spec.head_dim, num_heads=spec.num_heads, stage=stage, step=step)
        for _ in range(spec.blocks_per_stage):
            if stage in spec.self_attn_stages:
                calls.append(AttentionCall(first_kind, tokens, tokens, batch=batch, **shape))
            if video and stage in temporal_stages:
                calls.append(AttentionCall("temporal", frames, frames, batch=tokens, **shape))
            if stage in spec.cross_attn_stages and spec.text_encode > 0:
                calls.append(AttentionCall("cross", tokens, spec.text_encode, batch=batch, **shape))
    return calls


def _repeat_traversal(
    spec: DiffusionSpec,
    steps: int,
    frames: Optional[int] = None,
    temporal_stages: FrozenSet[int] = frozenset(),
) -> List[AttentionCall]:
    if steps < 1:
        raise TraceError(f"steps ≥ 1 (got {steps})")
    calls: List[AttentionCall] = []
    for step in range(steps):
        traversal = _traversal_calls(spec, step, frames, temporal_stages)
        for _ in range(spec.guidance_multiplier):
            calls.extend(traversal)
    return calls


def diffusion_trace(spec: DiffusionSpec, steps: Optional[int] = None, model_name: str = "diffusion") -> SeqLenTrace:
    """Attention calls of a UNet diffusion model over ``steps`` denoising steps.

    Each step repeats one traversal (down stages, bottleneck, up stages)
    ``guidance_multiplier`` times.
    """
    steps = spec.denoising_steps if steps is None else steps
    return SeqLenTrace(model_name, tuple(_repeat_traversal(spec, steps)))


def video_trace(spec: VideoSpec, steps: Optional[int] = None, model_name: str = "video") -> SeqLenTrace:
    """Diffusion trace with frames folded into the batch of spatial calls.

    Temporal calls follow the spatial call at each temporal stage, with the
    frame count as sequence length and the stage's pixels as batch.
    """
    steps = spec.base.denoising_steps if steps is None else steps
    calls = _repeat_traversal(
        spec.base, steps, frames=spec.num_frames, temporal_stages=spec.temporal_attn_stages
    )
    return SeqLenTrace(model_name, tuple(calls))


def transformer_trace(spec: TransformerSpec, model_name: str = "transformer") -> SeqLenTrace:
    """One call per decode step; each call stands for all ``num_layers`` layers."""
    shape = dict(head_dim=spec.head_dim, num_heads=spec.num_heads, repeat=spec.num_layers)
    prompt = spec.prompt_len

    if spec.decode_mode == "encode":
        calls = [AttentionCall("self", prompt, prompt, step=0, **shape)]
    elif spec.decode_mode == "parallel":
        total = prompt + spec.gen_tokens
        calls = [AttentionCall("self", total, total, step=step, **shape) for step in range(spec.parallel_steps)]
    else:
        calls = [AttentionCall("self", prompt, prompt, step=0, **shape)]
        calls.extend(
            AttentionCall("self", 1, prompt + step, step=step, **shape) for step in range(1, spec.gen_tokens)
        )
    return SeqLenTrace(model_name, tuple(calls))


def model_trace(spec: ModelSpec, steps: Optional[int] = None) -> SeqLenTrace:
    """Trace of the headline generator of a model."""
    variant = spec.variant
    if isinstance(variant, DiffusionSpec):
        trace = diffusion_trace(variant, steps, model_name=spec.name)
    elif isinstance(variant, VideoSpec):
        trace = video_trace(variant, steps, model_name=spec.name)
    else:
        trace = transformer_trace(variant, model_name=spec.name)
    logger.debug("trace for %s: %d attention calls", spec.name, len(trace))
    return trace


def single_traversal(variant: object, model_name: str = "traversal") -> SeqLenTrace:
    """One UNet traversal (one step, one guidance pass) of a diffusion or video spec."""
    if isinstance(variant, VideoSpec):
        calls = _traversal_calls(
            variant.base, 0, frames=variant.num_frames, temporal_stages=variant.temporal_attn_stages
        )
    elif isinstance(variant, DiffusionSpec):
        calls = _traversal_calls(variant, 0)
    else:
        raise TraceError("single_traversal needs a diffusion or video spec", model=model_name)
    return SeqLenTrace(model_name, tuple(calls))


def seq_len_histogram(trace: SeqLenTrace) -> Dict[int, int]:
    """Occurrences of each distinct query length, keys ascending.

    Raises:
        TraceError: If the trace holds no calls
    """
    if not trace.calls:
        raise TraceError(f"Trace of {trace.model_name} has no attention calls", model=trace.model_name)
    counts = Counter(call.q_len for call in trace.calls)
    return dict(sorted(counts.items()))


def sequence_ratios(trace: SeqLenTrace) -> SequenceRatios:
    """Per-stage and whole-trace query-length ratios."""
    if not trace.calls:
        raise TraceError(f"Trace of {trace.model_name} has no attention calls", model=trace.model_name)

    primary = [call for call in trace.calls if call.kind in ("self", "spatial")] or list(trace.calls)
    lengths = [call.q_len for call in primary]
    per_stage = 1.0
    for previous, current in zip(primary, primary[1:]):
        if previous.stage is None or previous.stage == current.stage:
            continue
        low, high = sorted((previous.q_len, current.q_len))
        per_stage = max(per_stage, high / low)
    return SequenceRatios(per_stage=per_stage, whole_trace=max(lengths) / min(lengths))


def trace_rows(trace: SeqLenTrace) -> List[Tuple[object, ...]]:
    return [
        (index, call.step, call.stage, call.kind, call.q_len, call.kv_len, call.batch, call.num_heads, call.head_dim)
        for index, call in enumerate(trace.calls)
    ]


def write_trace_csv(trace: SeqLenTrace, path: str) -> str:
    """Write the trace as plot-data CSV."""
    return write_csv(path, TRACE_CSV_HEADER, trace_rows(trace))


def write_histogram_csv(trace: SeqLenTrace, path: str) -> str:
    """Write the query-length histogram next to a trace CSV.

    Returns:
        The path written, ``<stem>_histogram.csv`` for a trace at ``<stem>.csv``
    """
    histogram = seq_len_histogram(trace)
    return write_csv(companion_path(path, "histogram"), HISTOGRAM_CSV_HEADER, histogram.items())
