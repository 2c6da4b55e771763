"""File operations for reports, plot data and spec files."""
import csv
import io
import json
import logging
import shutil
from pathlib import Path
from typing import Any, Iterable, List, Optional, Sequence

logger = logging.getLogger(__name__)


class FileOperationError(Exception):
    """Custom exception for file operation errors."""

    def __init__(self, message: str, path: Optional[str] = None):
        super().__init__(message)
        self.path = path


def write_file_safe(file_path: str, content: str, overwrite: bool = False) -> None:
    """Write content to a file safely.

    Args:
        file_path: Path to the file to write
        content: Content to write to the file
        overwrite: Whether to overwrite existing files

    Raises:
        FileOperationError: If file operation fails
    """
    file_path_obj = Path(file_path)

    if file_path_obj.exists() and not overwrite:
        raise FileOperationError(f"File already exists: {file_path}", path=str(file_path))

    try:
        file_path_obj.parent.mkdir(parents=True, exist_ok=True)
        # newline="" keeps CSV line terminators byte-exact on every platform
        with open(file_path_obj, "w", encoding="utf-8", newline="") as handle:
            handle.write(content)
    except OSError as e:
        raise FileOperationError(f"Failed to write file {file_path}: {e}", path=str(file_path))

    logger.debug("wrote %s (%d chars)", file_path, len(content))


def render_csv(header: Sequence[str], rows: Iterable[Sequence[Any]]) -> str:
    """Render rows as RFC 4180 CSV text with a mandatory header.

    Args:
        header: Column names
        rows: Row values, one sequence per row

    Returns:
        CSV text with CRLF line endings
    """
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\r\n", quoting=csv.QUOTE_MINIMAL)
    writer.writerow(header)
    for row in rows:
        writer.writerow(["" if value is None else value for value in row])
    return buffer.getvalue()


def write_csv(file_path: str, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> str:
    """Write plot data as CSV, replacing any previous file.

    Returns:
        The path written
    """
    write_file_safe(file_path, render_csv(header, rows), overwrite=True)
    return str(file_path)


def render_document(document: Any) -> str:
    """Render a structured document as stable, indented JSON."""
    return json.dumps(document, indent=2, ensure_ascii=False, allow_nan=True) + "\n"


def write_document(file_path: str, document: Any) -> str:
    """Write a structured document, replacing any previous file.

    Returns:
        The path written

    Raises:
        FileOperationError: If the document cannot be serialized or written
    """
    try:
        content = render_document(document)
    except (TypeError, ValueError) as e:
        raise FileOperationError(f"Failed to serialize document {file_path}: {e}", path=str(file_path))
    write_file_safe(file_path, content, overwrite=True)
    return str(file_path)


def companion_path(file_path: str, suffix: str) -> str:
    """Path of a companion output next to ``file_path``.

    ``out/trace.csv`` with suffix ``histogram`` becomes ``out/trace_histogram.csv``.
    """
    path = Path(file_path)
    return str(path.with_name(f"{path.stem}_{suffix}{path.suffix or '.csv'}"))


def cleanup_on_error(created_paths: List[str]) -> None:
    """Clean up created files and directories on error.

    Args:
        created_paths: List of file/directory paths to clean up
    """
    paths_to_clean = sorted(created_paths, key=lambda p: len(Path(p).parts), reverse=True)

    for path in paths_to_clean:
        try:
            path_obj = Path(path)
            if path_obj.exists():
                if path_obj.is_dir():
                    shutil.rmtree(path_obj)
                else:
                    path_obj.unlink()
        except OSError:
            # Ignore errors during cleanup
            pass
