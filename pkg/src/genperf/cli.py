"""Command-line interface for genperf."""
import logging
from contextlib import contextmanager
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple

import click
from rich.console import Console
from rich.logging import RichHandler
from rich.table import Table
from rich.traceback import install

from . import __version__
from .archspec import (
    SpecError,
    VideoSpec,
    list_presets,
    load_hardware,
    preset,
    resize,
    resolve_spec,
    with_frames,
    with_steps,
)
from .costmodel import (
    CostModelError,
    crossover_frames,
    image_size_sweep,
    latent_sweep,
    loglog_slope,
    model_cost,
    temporal_spatial_sweep,
)
from .file_operations import (
    FileOperationError,
    cleanup_on_error,
    render_csv,
    render_document,
    write_document,
    write_file_safe,
)
from .reports import (
    ANALYSIS_CSV_HEADER,
    COMPARISON_CSV_HEADER,
    ReportError,
    analysis_rows,
    build_analysis,
    build_comparison,
    comparison_rows,
    render_text,
    report_header,
    speedup_section,
)
from .roofline import RooflineError, RooflinePoint, audit_measured, audit_speedup, write_roofline_csv
from .seqprofile import (
    TraceError,
    model_trace,
    seq_len_histogram,
    write_histogram_csv,
    write_trace_csv,
)
from .traceparse import (
    BREAKDOWN_CSV_HEADER,
    BreakdownError,
    RuleError,
    TraceParseError,
    attention_speedup_from_traces,
    breakdown_from_trace,
    breakdown_rows,
    compare_breakdown,
    load_rules,
)
from .validators import (
    ValidationError,
    parse_image_size,
    parse_range,
    validate_fraction,
    validate_sweep_points,
)

# Install rich traceback handler
install(show_locals=True)

console = Console()
err_console = Console(stderr=True)

VALID_MODES = ["baseline", "flash"]
VALID_FORMATS = ["table", "csv", "doc"]
VALID_AXES = ["image-size", "frames", "latent"]

LIBRARY_ERRORS = (
    SpecError,
    TraceError,
    CostModelError,
    RooflineError,
    TraceParseError,
    RuleError,
    BreakdownError,
    ValidationError,
    FileOperationError,
    ReportError,
)


@contextmanager
def reporting_errors() -> Iterator[None]:
    """Convert library errors into click exceptions with a red message."""
    try:
        yield
    except click.ClickException:
        raise
    except LIBRARY_ERRORS as e:
        err_console.print(f"[red]❌ Error: {e}[/red]")
        raise click.ClickException(str(e))


def _image_size(ctx: click.Context, param: click.Parameter, value: Optional[str]) -> Any:
    if value is None:
        return None
    try:
        return parse_image_size(value)
    except ValidationError as e:
        raise click.BadParameter(str(e) + (f". {e.details}" if e.details else ""))


def _range(ctx: click.Context, param: click.Parameter, value: str) -> List[int]:
    try:
        points = parse_range(value)
        validate_sweep_points(points)
    except ValidationError as e:
        raise click.BadParameter(str(e) + (f". {e.details}" if e.details else ""))
    return points


def _fraction(ctx: click.Context, param: click.Parameter, value: float) -> float:
    try:
        validate_fraction(value)
    except ValidationError as e:
        raise click.BadParameter(str(e))
    return value


def emit(content: str, out: Optional[str]) -> None:
    """Write output to ``out`` or to stdout."""
    if out:
        write_file_safe(out, content, overwrite=True)
        err_console.print(f"[green]✅ Wrote {out}[/green]")
    else:
        click.echo(content, nl=False)


def emit_document(document: Dict[str, Any], out: Optional[str]) -> None:
    """Write a structured document to ``out`` or to stdout."""
    if out:
        write_document(out, document)
        err_console.print(f"[green]✅ Wrote {out}[/green]")
    else:
        click.echo(render_document(document), nl=False)


def _table(title: str, header: Sequence[str], rows: Sequence[Sequence[Any]]) -> Table:
    table = Table(title=title)
    for column in header:
        table.add_column(column)
    for row in rows:
        table.add_row(*["" if value is None else str(value) for value in row])
    return table


spec_option = click.option(
    "--spec", "-s", "spec_ref", required=True, help="Spec file path or preset:<name>"
)
image_option = click.option(
    "--image-size", "-i", "image", callback=_image_size, help="Output image size HxW (default: native)"
)
steps_option = click.option(
    "--steps", type=click.IntRange(min=1), help="Override denoising steps"
)
hw_option = click.option(
    "--hw", "hw_ref", help="Hardware spec path or preset:<name> (default: preset:a100)"
)
mode_option = click.option(
    "--mode", "-m", type=click.Choice(VALID_MODES), default="baseline", show_default=True,
    help="Attention implementation"
)
frames_option = click.option(
    "--frames", type=click.IntRange(min=1), help="Override the frame count of a video model"
)
out_option = click.option("--out", "-o", help="Output path (default: stdout)")


@click.group(name="genperf")
@click.option("--verbose", "-v", is_flag=True, help="Enable debug logging")
@click.version_option(version=__version__, prog_name="genperf")
def main(verbose: bool) -> None:
    """Analytical performance models for multi-modal generative inference.

    Presets are addressed as --spec preset:<name>; GENPERF_PRESET_DIR
    replaces the built-in preset directory.

    Examples:

        genperf seqlen --spec preset:stable-diffusion --out sd.csv

        genperf analyze --spec preset:parti --format doc

        genperf sweep --spec preset:stable-diffusion --axis latent --range 8:64*2
    """
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.WARNING,
        format="%(message)s",
        handlers=[RichHandler(console=err_console, show_path=False)],
        force=True,
    )


@main.command()
def presets() -> None:
    """List the available presets."""
    with reporting_errors():
        rows = []
        for name in list_presets():
            spec = preset(name)
            rows.append((name, spec.variant.kind, f"{spec.total_params:.3g}", len(spec.pipeline), len(spec.assumed)))
        console.print(_table("Presets", ("name", "kind", "params", "components", "assumed"), rows))


@main.command()
@spec_option
@image_option
@steps_option
@frames_option
@click.option("--out", "-o", required=True, help="Trace CSV path; the histogram goes next to it")
def seqlen(spec_ref: str, image: Any, steps: Optional[int], frames: Optional[int], out: str) -> None:
    """Write the sequence-length trace and its histogram as CSV."""
    with reporting_errors():
        spec = with_frames(with_steps(resize(resolve_spec(spec_ref), image), steps), frames)
        trace = model_trace(spec)
        histogram = seq_len_histogram(trace)
        created: List[str] = []
        try:
            created.append(write_trace_csv(trace, out))
            histogram_path = write_histogram_csv(trace, out)
        except FileOperationError:
            cleanup_on_error(created)
            raise
        err_console.print(f"[green]✅ {len(trace)} attention calls written to {out}[/green]")
        err_console.print(f"[green]✅ Histogram over {len(histogram)} query lengths written to {histogram_path}[/green]")


def _print_analysis(document: Dict[str, Any]) -> None:
    for mode, section in document["costs"].items():
        rows = [
            (
                category,
                values["flops"],
                values["bytes_moved"],
                values["footprint"],
                f"{values['time_s']:.4g}",
                f"{100 * values['time_fraction']:.1f}%",
            )
            for category, values in section["categories"].items()
        ]
        console.print(
            _table(
                f"{document['model']} cost breakdown ({mode})",
                ("category", "flops", "bytes_moved", "footprint", "time_s", "share"),
                rows,
            )
        )
    roofline = document["roofline"]
    console.print(
        f"arithmetic intensity [bold]{roofline['arithmetic_intensity']:.2f}[/bold] FLOP/B, "
        f"ridge {roofline['ridge_point']:.1f}: [bold]{roofline['bound']}-bound[/bold]"
    )
    speedups = document["speedups"]
    rows = [(p["module_speedup"], p["end_to_end"]) for p in speedups["projections"]]
    console.print(
        _table(
            f"Amdahl projections (attention fraction {speedups['attention_fraction']:.3f})",
            ("module speedup", "end-to-end"),
            rows,
        )
    )


@main.command()
@spec_option
@image_option
@hw_option
@mode_option
@click.option("--batch", "-b", type=click.IntRange(min=1), default=1, show_default=True, help="Batch size")
@steps_option
@frames_option
@click.option("--format", "-f", "output_format", type=click.Choice(VALID_FORMATS), default="table", show_default=True)
@out_option
@click.option("--roofline-out", help="Also write roofline plot data as CSV")
def analyze(
    spec_ref: str,
    image: Any,
    hw_ref: Optional[str],
    mode: str,
    batch: int,
    steps: Optional[int],
    frames: Optional[int],
    output_format: str,
    out: Optional[str],
    roofline_out: Optional[str],
) -> None:
    """Cost breakdown, roofline placement and speedup projections for one model."""
    with reporting_errors():
        document = build_analysis(with_frames(resolve_spec(spec_ref), frames), load_hardware(hw_ref), image, mode, batch, steps)
        if roofline_out:
            roofline = document["roofline"]
            point = RooflinePoint(
                arithmetic_intensity=roofline["arithmetic_intensity"],
                attainable_flops=roofline["attainable_flops"],
                bound=roofline["bound"],
                ridge_point=roofline["ridge_point"],
                model=document["model"],
            )
            write_roofline_csv([point], roofline_out)
            err_console.print(f"[green]✅ Wrote {roofline_out}[/green]")
        if output_format == "csv":
            emit(render_csv(ANALYSIS_CSV_HEADER, analysis_rows(document)), out)
        elif output_format == "doc":
            emit_document(document, out)
        else:
            _print_analysis(document)
            if out:
                emit(render_text("analysis.txt.j2", document), out)


def _sweep_table(axis: str, spec_ref: str, points: List[int], mode: str, text_encode: Optional[int]) -> Tuple[List[str], List[Tuple[Any, ...]], Dict[str, Any]]:
    spec = resolve_spec(spec_ref)
    summary: Dict[str, Any] = {}

    if axis == "image-size":
        rows = image_size_sweep(spec, points, mode)
        header = ["image_size", "category", "flops", "bytes_moved", "footprint", "max_q_len"]
    elif axis == "frames":
        if not isinstance(spec.variant, VideoSpec):
            raise click.ClickException(f"--axis frames needs a video spec; {spec.name} is {spec.variant.kind}")
        frame_rows = temporal_spatial_sweep(spec.variant, points)
        crossover = crossover_frames(spec.variant)
        crossover_value = float(crossover) if crossover is not None else None
        header = ["frames", "category", "flops", "bytes_moved", "footprint", "crossover_frames"]
        table = []
        for row in frame_rows:
            for category, cost in (("spatial", row.spatial), ("temporal", row.temporal)):
                table.append((row.frames, category, cost.flops, cost.bytes_moved, cost.footprint, crossover_value))
        summary["crossover_frames"] = crossover_value
        for category in ("spatial", "temporal"):
            flops = [getattr(row, f"{category}_flops") for row in frame_rows]
            if all(flops):
                summary[f"{category}_slope"] = loglog_slope([row.frames for row in frame_rows], flops)
        return header, table, summary
    else:
        rows, exponent = latent_sweep(spec, points, text_encode)
        header = ["latent", "category", "flops", "bytes_moved", "footprint", "memory_exponent"]
        summary["memory_exponent"] = exponent

    table = [(row.x, row.category, row.cost.flops, row.cost.bytes_moved, row.cost.footprint, *row.extra) for row in rows]
    return header, table, summary


@main.command()
@spec_option
@click.option("--axis", "-a", type=click.Choice(VALID_AXES), required=True, help="Swept quantity")
@click.option("--range", "-r", "points", required=True, callback=_range, help="64,128,256 | 64:512:64 | 8:256*2")
@mode_option
@click.option("--text-encode", type=click.IntRange(min=0), help="Override text tokens for the latent sweep")
@click.option("--format", "-f", "output_format", type=click.Choice(["csv", "doc"]), default="csv", show_default=True)
@out_option
def sweep(
    spec_ref: str,
    axis: str,
    points: List[int],
    mode: str,
    text_encode: Optional[int],
    output_format: str,
    out: Optional[str],
) -> None:
    """Per-point costs over image size, frame count or latent size."""
    with reporting_errors():
        header, rows, summary = _sweep_table(axis, spec_ref, points, mode, text_encode)
        if output_format == "doc":
            document = report_header(resolve_spec(spec_ref))
            document.update({"axis": axis, "mode": mode, "summary": summary, "header": header, "rows": [list(row) for row in rows]})
            emit_document(document, out)
        else:
            emit(render_csv(header, rows), out)
        for key, value in summary.items():
            err_console.print(f"{key}: {value if value is None else f'{value:.3f}'}")


@main.command()
@click.argument("trace_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--rules", "rules_path", type=click.Path(exists=True, dir_okay=False), help="Category rules file")
@click.option("--optimized", type=click.Path(exists=True, dir_okay=False), help="Trace of the optimized run")
@click.option("--format", "-f", "output_format", type=click.Choice(VALID_FORMATS), default="csv", show_default=True)
@out_option
def trace(trace_path: str, rules_path: Optional[str], optimized: Optional[str], output_format: str, out: Optional[str]) -> None:
    """Measured operator breakdown of a profiler trace."""
    if output_format == "table" and out:
        raise click.BadParameter("--out needs --format csv or doc", param_hint="--out")
    with reporting_errors():
        rules = load_rules(rules_path) if rules_path else None
        breakdown = breakdown_from_trace(trace_path, rules)
        speedup = attention_speedup_from_traces(breakdown, breakdown_from_trace(optimized, rules)) if optimized else None
        rows = breakdown_rows(breakdown)

        if output_format == "doc":
            document: Dict[str, Any] = {
                "trace": trace_path,
                "categories": [dict(zip(BREAKDOWN_CSV_HEADER, row)) for row in rows],
                "kernels": breakdown.kernel_count,
                "unattributed": breakdown.unattributed,
                "wall_us": breakdown.wall_ns / 1000,
                "speedup": speedup_section(speedup) if speedup else None,
            }
            emit_document(document, out)
        elif output_format == "table":
            console.print(_table(f"Operator breakdown of {trace_path}", BREAKDOWN_CSV_HEADER, rows))
        else:
            emit(render_csv(BREAKDOWN_CSV_HEADER, rows), out)

        if breakdown.unattributed:
            err_console.print(f"[yellow]{breakdown.unattributed} kernels unattributed (counted as other)[/yellow]")
        if speedup:
            err_console.print(
                f"attention module speedup {speedup.module_speedup:.3f}x, "
                f"end-to-end {speedup.end_to_end:.3f}x "
                f"(Amdahl {speedup.predicted_end_to_end:.3f}x, consistent: {speedup.consistent})"
            )


@main.command()
@click.argument("trace_path", type=click.Path(exists=True, dir_okay=False))
@spec_option
@hw_option
@image_option
@steps_option
@mode_option
@click.option("--rules", "rules_path", type=click.Path(exists=True, dir_okay=False), help="Category rules file")
@click.option("--optimized", type=click.Path(exists=True, dir_okay=False), help="Trace of the optimized run")
@click.option("--format", "-f", "output_format", type=click.Choice(VALID_FORMATS), default="table", show_default=True)
@out_option
def compare(
    trace_path: str,
    spec_ref: str,
    hw_ref: Optional[str],
    image: Any,
    steps: Optional[int],
    mode: str,
    rules_path: Optional[str],
    optimized: Optional[str],
    output_format: str,
    out: Optional[str],
) -> None:
    """Compare a measured breakdown against the modeled one."""
    with reporting_errors():
        rules = load_rules(rules_path) if rules_path else None
        measured = breakdown_from_trace(trace_path, rules)
        spec = with_steps(resize(resolve_spec(spec_ref), image), steps)
        hw = load_hardware(hw_ref)
        comparison = compare_breakdown(measured, model_cost(spec, mode=mode), hw)
        speedup = attention_speedup_from_traces(measured, breakdown_from_trace(optimized, rules)) if optimized else None
        document = build_comparison(measured, comparison, spec, hw, trace_path, speedup)

        if output_format == "csv":
            emit(render_csv(COMPARISON_CSV_HEADER, comparison_rows(document)), out)
        elif output_format == "doc":
            emit_document(document, out)
        else:
            console.print(_table(f"{spec.name}: measured vs modeled", COMPARISON_CSV_HEADER, comparison_rows(document)))
            console.print(f"rank agreement {comparison.rank_agreement:.2f}")
            if out:
                emit(render_text("comparison.txt.j2", document), out)


@main.command()
@click.option("--fraction", "-p", type=float, required=True, callback=_fraction, help="Attention share of execution time")
@click.option("--speedup", "-e", type=float, help="End-to-end speedup to audit (default: measured table)")
@click.option("--format", "-f", "output_format", type=click.Choice(["table", "csv"]), default="table", show_default=True)
@out_option
def audit(fraction: float, speedup: Optional[float], output_format: str, out: Optional[str]) -> None:
    """Check end-to-end speedups against the Amdahl ceiling 1 / (1 - p)."""
    with reporting_errors():
        audits = [audit_speedup(speedup, fraction)] if speedup is not None else audit_measured(fraction)
        header = ("model", "end_to_end", "fraction", "ceiling", "feasible", "required_module_speedup")
        rows = [
            (a.label or "-", a.end_to_end, a.fraction, a.ceiling, a.feasible, a.required_module_speedup)
            for a in audits
        ]
        if output_format == "csv":
            emit(render_csv(header, rows), out)
        else:
            console.print(_table(f"Amdahl audit at attention fraction {fraction}", header, rows))
        infeasible = [a.label or str(a.end_to_end) for a in audits if not a.feasible]
        if infeasible:
            err_console.print(f"[yellow]⚠ infeasible at p={fraction}: {', '.join(infeasible)}[/yellow]")


if __name__ == "__main__":
    main()
