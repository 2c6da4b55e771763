"""Profiler trace ingestion and kernel-to-operator attribution.

Traces are Chrome trace-event documents, either a bare event array or an
object with a ``traceEvents`` array, optionally gzip-compressed. Timestamps
are microseconds regardless of any display-unit metadata. Kernel durations
are aggregated as integer nanoseconds so that category sums are exact and
independent of event order; kernels overlapping on distinct streams are
summed as busy time, with the wall-clock span reported separately.
"""
import gzip
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import yaml

from .archspec import PACKAGE_DIR, HardwareSpec
from .costmodel import CATEGORIES, CostBreakdown
from .file_operations import FileOperationError, render_document, write_csv, write_file_safe
from .roofline import RooflineError, amdahl, category_fractions

logger = logging.getLogger(__name__)

RETAINED_PHASES = ("X", "B", "E", "s", "t", "f")
FLOW_PHASES = ("s", "t", "f")
KERNEL_CATEGORIES = ("kernel", "gpu_memcpy", "gpu_memset")
RUNTIME_CATEGORIES = ("cuda_runtime", "cuda_driver")
CONSISTENCY_TOLERANCE = 1e-9
BREAKDOWN_CSV_HEADER = ("category", "microseconds", "fraction")
DEFAULT_RULES_PATH = PACKAGE_DIR / "rules" / "default.yaml"

EventId = Union[int, str]


class TraceParseError(Exception):
    """Raised for malformed traces; ``offset`` is a byte offset or an event index."""

    def __init__(self, message: str, offset: Optional[int] = None):
        super().__init__(message)
        self.offset = offset


class EmptyTraceError(TraceParseError):
    """Raised when a trace holds no accelerator kernels."""


class RuleError(Exception):
    """Raised for unreadable or invalid category rules files."""

    def __init__(self, message: str, path: Optional[str] = None):
        super().__init__(message)
        self.path = path


class BreakdownError(Exception):
    """Raised when breakdowns cannot be compared."""

    def __init__(self, message: str, category: Optional[str] = None):
        super().__init__(message)
        self.category = category


@dataclass(frozen=True)
class TraceEvent:
    name: str
    phase: str
    timestamp: float
    duration: float = 0.0
    process_id: Optional[EventId] = None
    thread_id: Optional[EventId] = None
    correlation: Optional[EventId] = None
    category: Optional[str] = None

    @property
    def end(self) -> float:
        return self.timestamp + self.duration

    @property
    def is_kernel(self) -> bool:
        return self.phase == "X" and (self.category or "").lower() in KERNEL_CATEGORIES


@dataclass(frozen=True)
class AnnotationSpan:
    label: str
    start: float
    end: float
    thread_id: Optional[EventId] = None
    process_id: Optional[EventId] = None

    def contains(self, timestamp: float) -> bool:
        return self.start <= timestamp <= self.end

    @property
    def nesting_key(self) -> Tuple[float, float, str]:
        # innermost first: shortest, then latest start, then label
        return (self.end - self.start, -self.start, self.label)


@dataclass(frozen=True)
class CategoryRule:
    pattern: str
    category: str

    def matches(self, text: str) -> bool:
        return self.pattern in text.lower()


@dataclass(frozen=True)
class OperatorBreakdown:
    """Kernel busy time per category, in integer nanoseconds."""

    times_ns: Dict[str, int] = field(default_factory=lambda: {category: 0 for category in CATEGORIES})
    kernel_count: int = 0
    unattributed: int = 0
    wall_ns: int = 0

    @classmethod
    def from_microseconds(cls, times: Dict[str, float], **counts: int) -> "OperatorBreakdown":
        unknown = sorted(set(times) - set(CATEGORIES))
        if unknown:
            raise BreakdownError(f"Unknown categories: {', '.join(unknown)}", category=unknown[0])
        times_ns = {category: _to_ns(times.get(category, 0)) for category in CATEGORIES}
        return cls(times_ns=times_ns, **counts)

    @property
    def total_ns(self) -> int:
        return sum(self.times_ns.values())

    @property
    def total_time(self) -> float:
        """Total kernel busy time in microseconds."""
        return self.total_ns / 1000

    def time_us(self, category: str) -> float:
        return self.times_ns[category] / 1000

    def fraction(self, category: str) -> float:
        total = self.total_ns
        return self.times_ns[category] / total if total else 0.0

    @property
    def fractions(self) -> Dict[str, float]:
        return {category: self.fraction(category) for category in CATEGORIES}


@dataclass(frozen=True)
class CategoryComparison:
    category: str
    measured_fraction: float
    modeled_fraction: float
    delta: float
    relative_delta: Optional[float]


@dataclass(frozen=True)
class BreakdownComparison:
    """Measured against modeled time fractions; ``delta`` is measured minus modeled."""

    categories: Tuple[CategoryComparison, ...]
    rank_agreement: float

    def __getitem__(self, category: str) -> CategoryComparison:
        for row in self.categories:
            if row.category == category:
                return row
        raise KeyError(category)


@dataclass(frozen=True)
class TraceSpeedup:
    """Attention and end-to-end speedups between a baseline and an optimized trace."""

    module_speedup: float
    end_to_end: float
    fraction: float
    predicted_end_to_end: float
    consistent: bool
    feasible: bool


def _to_ns(microseconds: float) -> int:
    return int(round(microseconds * 1000))


def _byte_offset(text: str, position: int) -> int:
    return len(text[:position].encode("utf-8"))


def _read_text(path: Path) -> str:
    try:
        if path.suffix == ".gz":
            with gzip.open(path, "rt", encoding="utf-8") as handle:
                return handle.read()
        return path.read_text(encoding="utf-8")
    except (OSError, EOFError, UnicodeDecodeError) as e:
        raise TraceParseError(f"Cannot read trace {path}: {e}")


def _number(event: Dict[str, Any], key: str, index: int) -> float:
    value = event[key]
    if isinstance(value, bool) or not isinstance(value, (int, float)) or math.isnan(value):
        raise TraceParseError(f"event {index}: field '{key}' must be a number", offset=index)
    return value


def _event_from_json(raw: Any, index: int) -> Optional[TraceEvent]:
    if not isinstance(raw, dict):
        raise TraceParseError(f"event {index} is not an object", offset=index)
    for key in ("name", "ph", "ts"):
        if key not in raw:
            raise TraceParseError(f"event {index} missing required field '{key}'", offset=index)

    phase = str(raw["ph"])
    if phase not in RETAINED_PHASES:
        return None

    timestamp = _number(raw, "ts", index)
    if timestamp < 0:
        raise TraceParseError(f"event {index}: negative timestamp {timestamp}", offset=index)
    duration = 0.0
    if phase == "X":
        duration = _number(raw, "dur", index) if "dur" in raw else 0.0
        if duration < 0:
            raise TraceParseError(f"event {index}: negative duration {duration}", offset=index)

    args = raw.get("args") if isinstance(raw.get("args"), dict) else {}
    correlation = args.get("correlation")
    if correlation is None and phase in FLOW_PHASES:
        correlation = raw.get("id")

    return TraceEvent(
        name=str(raw["name"]),
        phase=phase,
        timestamp=timestamp,
        duration=duration,
        process_id=raw.get("pid"),
        thread_id=raw.get("tid"),
        correlation=correlation,
        category=raw.get("cat"),
    )


def parse_trace(path: Union[str, Path]) -> List[TraceEvent]:
    """Parse complete, duration and flow events of a trace file, in document order.

    Raises:
        TraceParseError: If the document is malformed (offset is the byte
            offset of the failure) or an event misses ``name``, ``ph`` or
            ``ts`` (offset is the event index)
    """
    path = Path(path)
    text = _read_text(path)
    try:
        document = json.loads(text)
    except json.JSONDecodeError as e:
        offset = _byte_offset(text, e.pos)
        raise TraceParseError(f"Malformed trace {path} at byte offset {offset}: {e.msg}", offset=offset)

    if isinstance(document, dict):
        raw_events = document.get("traceEvents")
    else:
        raw_events = document
    if not isinstance(raw_events, list):
        raise TraceParseError(f"Trace {path} has no event array")

    events = []
    for index, raw in enumerate(raw_events):
        event = _event_from_json(raw, index)
        if event is not None:
            events.append(event)
    logger.debug("parsed %s: %d of %d events retained", path, len(events), len(raw_events))
    return events


def _event_to_json(event: TraceEvent) -> Dict[str, Any]:
    raw: Dict[str, Any] = {"name": event.name, "ph": event.phase, "ts": event.timestamp}
    if event.phase == "X":
        raw["dur"] = event.duration
    if event.process_id is not None:
        raw["pid"] = event.process_id
    if event.thread_id is not None:
        raw["tid"] = event.thread_id
    if event.category is not None:
        raw["cat"] = event.category
    if event.correlation is not None:
        if event.phase in FLOW_PHASES:
            raw["id"] = event.correlation
        else:
            raw["args"] = {"correlation": event.correlation}
    return raw


def write_trace(events: Sequence[TraceEvent], path: Union[str, Path]) -> str:
    """Write events as a ``traceEvents`` document that ``parse_trace`` reads back unchanged."""
    path = Path(path)
    content = render_document({"traceEvents": [_event_to_json(event) for event in events]})
    if path.suffix != ".gz":
        write_file_safe(str(path), content, overwrite=True)
        return str(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with gzip.open(path, "wt", encoding="utf-8") as handle:
            handle.write(content)
    except OSError as e:
        raise FileOperationError(f"Failed to write file {path}: {e}", path=str(path))
    return str(path)


def load_rules(path: Union[str, Path]) -> Tuple[CategoryRule, ...]:
    """Load ordered ``{pattern, category}`` rules.

    Raises:
        RuleError: If the file is unreadable or a rule is invalid
    """
    path = Path(path)
    try:
        document = yaml.safe_load(path.read_text(encoding="utf-8"))
    except (OSError, yaml.YAMLError) as e:
        raise RuleError(f"Cannot load rules {path}: {e}", path=str(path))

    entries = document.get("rules") if isinstance(document, dict) else document
    if not isinstance(entries, list) or not entries:
        raise RuleError(f"Rules file {path} must hold a non-empty list of rules", path=str(path))

    rules = []
    for position, entry in enumerate(entries):
        if not isinstance(entry, dict) or not entry.get("pattern") or "category" not in entry:
            raise RuleError(f"Rule {position} in {path} needs a pattern and a category", path=str(path))
        category = str(entry["category"])
        if category not in CATEGORIES:
            raise RuleError(
                f"Rule {position} in {path}: unknown category '{category}' (use {', '.join(CATEGORIES)})",
                path=str(path),
            )
        rules.append(CategoryRule(pattern=str(entry["pattern"]).lower(), category=category))
    return tuple(rules)


def default_rules() -> Tuple[CategoryRule, ...]:
    return load_rules(DEFAULT_RULES_PATH)


def match_category(text: str, rules: Sequence[CategoryRule]) -> Optional[str]:
    """Category of the first rule whose pattern occurs in ``text``."""
    for rule in rules:
        if rule.matches(text):
            return rule.category
    return None


def _ordered(events: Sequence[TraceEvent]) -> List[TraceEvent]:
    # End before Begin at equal timestamps; the rest breaks ties for determinism.
    return sorted(
        events,
        key=lambda e: (e.timestamp, 0 if e.phase == "E" else 1, e.name, e.phase, str(e.thread_id), e.duration),
    )


def build_spans(events: Sequence[TraceEvent], rules: Sequence[CategoryRule]) -> List[AnnotationSpan]:
    """Annotation spans from host events whose name matches a rule."""
    spans = []
    stacks: Dict[Tuple[str, str], List[TraceEvent]] = {}

    for event in _ordered(events):
        if event.is_kernel or (event.category or "").lower() in RUNTIME_CATEGORIES:
            continue
        if event.phase == "X":
            if match_category(event.name, rules):
                spans.append(AnnotationSpan(event.name, event.timestamp, event.end, event.thread_id, event.process_id))
        elif event.phase in ("B", "E"):
            key = (str(event.process_id), str(event.thread_id))
            stack = stacks.setdefault(key, [])
            if event.phase == "B":
                stack.append(event)
            elif stack:
                begin = stack.pop()
                if match_category(begin.name, rules):
                    spans.append(
                        AnnotationSpan(begin.name, begin.timestamp, event.timestamp, begin.thread_id, begin.process_id)
                    )
            else:
                logger.warning("unmatched end event '%s' at %s", event.name, event.timestamp)
    return spans


def _launch_sites(events: Sequence[TraceEvent]) -> Dict[EventId, TraceEvent]:
    sites: Dict[EventId, TraceEvent] = {}
    for event in _ordered(events):
        if event.correlation is None or event.is_kernel:
            continue
        if event.phase == "X" or event.phase == "s":
            current = sites.get(event.correlation)
            # a host complete event wins over a flow start
            if current is None or (current.phase == "s" and event.phase == "X"):
                sites[event.correlation] = event
    return sites


def _innermost(spans: List[AnnotationSpan]) -> Optional[AnnotationSpan]:
    return min(spans, key=lambda span: span.nesting_key) if spans else None


def _attribute(
    kernel: TraceEvent,
    launches: Dict[EventId, TraceEvent],
    spans: List[AnnotationSpan],
    rules: Sequence[CategoryRule],
) -> Optional[str]:
    launch = launches.get(kernel.correlation) if kernel.correlation is not None else None
    if launch is not None:
        enclosing = [
            span for span in spans
            if span.thread_id == launch.thread_id and span.process_id == launch.process_id
            and span.contains(launch.timestamp)
        ]
        span = _innermost(enclosing)
        if span is not None:
            return match_category(span.label, rules)

    span = _innermost([span for span in spans if span.contains(kernel.timestamp)])
    if span is not None:
        return match_category(span.label, rules)
    return match_category(kernel.name, rules)


def link_kernels(events: Sequence[TraceEvent], rules: Optional[Sequence[CategoryRule]] = None) -> OperatorBreakdown:
    """Attribute accelerator kernel time to operator categories.

    A kernel takes the category of the innermost annotation span enclosing
    its launch on the launching thread (matched through the correlation id),
    else of the innermost span enclosing the kernel itself, else of its own
    name. Kernels left over count as ``other`` and as unattributed.
    """
    rules = default_rules() if rules is None else rules
    kernels = [event for event in events if event.is_kernel]
    spans = build_spans(events, rules)
    launches = _launch_sites(events)

    times = {category: 0 for category in CATEGORIES}
    unattributed = 0
    for kernel in kernels:
        category = _attribute(kernel, launches, spans, rules)
        if category is None:
            category = "other"
            unattributed += 1
        times[category] += _to_ns(kernel.duration)

    wall_ns = 0
    if kernels:
        wall_ns = _to_ns(max(kernel.end for kernel in kernels)) - _to_ns(min(kernel.timestamp for kernel in kernels))
    if unattributed:
        logger.warning("%d of %d kernels could not be attributed and count as other", unattributed, len(kernels))
    logger.debug("linked %d kernels against %d annotation spans", len(kernels), len(spans))
    return OperatorBreakdown(times_ns=times, kernel_count=len(kernels), unattributed=unattributed, wall_ns=wall_ns)


def require_kernels(breakdown: OperatorBreakdown) -> OperatorBreakdown:
    """Raises EmptyTraceError for a breakdown built from no kernels."""
    if breakdown.kernel_count == 0 and breakdown.total_ns == 0:
        raise EmptyTraceError("no accelerator kernels found")
    return breakdown


def breakdown_from_trace(path: Union[str, Path], rules: Optional[Sequence[CategoryRule]] = None) -> OperatorBreakdown:
    return require_kernels(link_kernels(parse_trace(path), rules))


def _ordering(a: float, b: float) -> int:
    return (a > b) - (a < b)


def rank_agreement(first: Dict[str, float], second: Dict[str, float]) -> float:
    """Share of category pairs ordered the same way in both fraction maps."""
    pairs = [(a, b) for i, a in enumerate(CATEGORIES) for b in CATEGORIES[i + 1:]]
    agreeing = sum(
        1 for a, b in pairs if _ordering(first[a], first[b]) == _ordering(second[a], second[b])
    )
    return agreeing / len(pairs)


def compare_breakdown(measured: OperatorBreakdown, modeled: CostBreakdown, hw: HardwareSpec) -> BreakdownComparison:
    """Per-category measured and modeled time fractions with their deltas."""
    measured_fractions = measured.fractions
    modeled_fractions = category_fractions(modeled, hw)
    rows = []
    for category in CATEGORIES:
        delta = measured_fractions[category] - modeled_fractions[category]
        relative = delta / modeled_fractions[category] if modeled_fractions[category] > 0 else None
        rows.append(
            CategoryComparison(
                category=category,
                measured_fraction=measured_fractions[category],
                modeled_fraction=modeled_fractions[category],
                delta=delta,
                relative_delta=relative,
            )
        )
    return BreakdownComparison(
        categories=tuple(rows), rank_agreement=rank_agreement(measured_fractions, modeled_fractions)
    )


def attention_speedup_from_traces(baseline: OperatorBreakdown, optimized: OperatorBreakdown) -> TraceSpeedup:
    """Attention-module and end-to-end speedups, cross-checked against Amdahl's law.

    ``consistent`` holds when the end-to-end speedup matches Amdahl's law at
    the baseline attention fraction within 1e-9, which is the case whenever
    only attention time changed.

    Raises:
        BreakdownError: If the optimized attention time or either total is zero
    """
    if optimized.times_ns["attention"] == 0:
        raise BreakdownError("optimized trace has zero attention time", category="attention")
    if baseline.total_ns == 0 or optimized.total_ns == 0:
        raise BreakdownError("breakdown has zero total time")

    module = baseline.times_ns["attention"] / optimized.times_ns["attention"]
    end_to_end = baseline.total_ns / optimized.total_ns
    fraction = baseline.fraction("attention")
    try:
        predicted = amdahl(fraction, module).end_to_end
    except RooflineError:
        # slower attention: Amdahl's formula still applies, outside the projection domain
        predicted = 1.0 / ((1.0 - fraction) + fraction / module)

    ceiling = math.inf if fraction >= 1.0 else 1.0 / (1.0 - fraction)
    consistent = abs(end_to_end - predicted) <= CONSISTENCY_TOLERANCE
    if not consistent:
        logger.warning(
            "end-to-end %.6fx differs from Amdahl %.6fx: time outside attention changed", end_to_end, predicted
        )
    return TraceSpeedup(
        module_speedup=module,
        end_to_end=end_to_end,
        fraction=fraction,
        predicted_end_to_end=predicted,
        consistent=consistent,
        feasible=end_to_end <= ceiling,
    )


def breakdown_rows(breakdown: OperatorBreakdown) -> List[Tuple[object, ...]]:
    return [
        (category, breakdown.time_us(category), breakdown.fraction(category)) for category in CATEGORIES
    ]


def write_breakdown_csv(breakdown: OperatorBreakdown, path: str) -> str:
    """Write (category, microseconds, fraction) rows."""
    return write_csv(path, BREAKDOWN_CSV_HEADER, breakdown_rows(breakdown))
