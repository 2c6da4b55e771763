"""Tests for file operations module."""
import json
import os
import tempfile
from pathlib import Path
from unittest.mock import patch

import pytest

from genperf.file_operations import (
    FileOperationError,
    cleanup_on_error,
    companion_path,
    render_csv,
    render_document,
    write_csv,
    write_document,
    write_file_safe,
)


class TestFileOperations:
    """Test file operations functionality."""

    def test_write_file_safe_success(self):
        """Test successful file writing into a new directory."""
        with tempfile.TemporaryDirectory() as temp_dir:
            file_path = Path(temp_dir) / "out" / "report.txt"
            write_file_safe(str(file_path), "content")
            assert file_path.read_text() == "content"

    def test_write_file_safe_existing_file(self):
        """Test that existing files are kept unless overwrite is set."""
        with tempfile.TemporaryDirectory() as temp_dir:
            file_path = Path(temp_dir) / "report.txt"
            file_path.write_text("old")
            with pytest.raises(FileOperationError) as exc_info:
                write_file_safe(str(file_path), "new")
            assert exc_info.value.path == str(file_path)
            write_file_safe(str(file_path), "new", overwrite=True)
            assert file_path.read_text() == "new"

    def test_write_file_safe_permission_error(self):
        """Test that OS errors become FileOperationError."""
        with tempfile.TemporaryDirectory() as temp_dir:
            with patch("builtins.open", side_effect=PermissionError("denied")):
                with pytest.raises(FileOperationError):
                    write_file_safe(os.path.join(temp_dir, "x.csv"), "a")

    def test_render_csv(self):
        """Test header, CRLF line endings, quoting and empty cells."""
        text = render_csv(("name", "value"), [("a,b", 1), ("c", None)])
        assert text == 'name,value\r\n"a,b",1\r\nc,\r\n'

    def test_render_csv_header_only(self):
        """Test that the header is written even without rows."""
        assert render_csv(("x",), []) == "x\r\n"

    def test_write_csv_keeps_line_endings(self):
        """Test that CSV bytes on disk match the rendered text."""
        with tempfile.TemporaryDirectory() as temp_dir:
            path = write_csv(os.path.join(temp_dir, "sweep.csv"), ("x", "y"), [(1, 2)])
            assert Path(path).read_bytes() == b"x,y\r\n1,2\r\n"
            write_csv(path, ("x", "y"), [(3, 4)])
            assert Path(path).read_bytes() == b"x,y\r\n3,4\r\n"

    def test_render_document(self):
        """Test stable JSON rendering."""
        text = render_document({"b": 1, "a": [1, 2]})
        assert text.endswith("\n")
        assert json.loads(text) == {"b": 1, "a": [1, 2]}

    def test_write_document_unserializable(self):
        """Test that documents must be JSON-serializable."""
        with tempfile.TemporaryDirectory() as temp_dir:
            with pytest.raises(FileOperationError):
                write_document(os.path.join(temp_dir, "doc.json"), {"value": object()})

    def test_companion_path(self):
        """Test companion output naming."""
        assert companion_path("out/trace.csv", "histogram") == str(Path("out/trace_histogram.csv"))
        assert companion_path("trace", "histogram") == "trace_histogram.csv"

    def test_cleanup_on_error(self):
        """Test cleanup of created files and directories."""
        with tempfile.TemporaryDirectory() as temp_dir:
            directory = Path(temp_dir) / "reports"
            directory.mkdir()
            file_path = directory / "a.csv"
            file_path.write_text("x")
            cleanup_on_error([str(file_path), str(directory), str(Path(temp_dir) / "missing")])
            assert not directory.exists()
