"""Integration tests for genperf."""
import json
import os
import tempfile
from pathlib import Path

import pytest
from click.testing import CliRunner

from genperf.archspec import BUILTIN_PRESETS, preset, write_spec
from genperf.cli import main

TWO_KERNEL = str(Path(__file__).parent / "fixtures" / "two_kernel.json")


class TestIntegration:
    """Test end-to-end functionality."""

    @pytest.mark.parametrize("name", BUILTIN_PRESETS)
    def test_every_preset_end_to_end(self, name):
        """Test seqlen and analyze on every built-in preset."""
        runner = CliRunner()

        with tempfile.TemporaryDirectory() as temp_dir:
            original_cwd = os.getcwd()
            os.chdir(temp_dir)

            try:
                result = runner.invoke(main, ["seqlen", "--spec", f"preset:{name}", "--steps", "1", "--out", "trace.csv"])
                assert result.exit_code == 0
                assert Path("trace.csv").exists()
                assert Path("trace_histogram.csv").exists()

                for mode in ["baseline", "flash"]:
                    result = runner.invoke(
                        main, ["analyze", "--spec", f"preset:{name}", "--mode", mode, "-f", "doc", "-o", f"{mode}.json"]
                    )
                    assert result.exit_code == 0

                baseline = json.loads(Path("baseline.json").read_text())
                flash = json.loads(Path("flash.json").read_text())
                assert baseline["model"] == name
                assert baseline["roofline"]["bound"] in ("compute", "memory")
                assert baseline["costs"] == flash["costs"]
                for section in baseline["costs"].values():
                    fractions = [values["time_fraction"] for values in section["categories"].values()]
                    assert sum(fractions) == pytest.approx(1.0)

            finally:
                os.chdir(original_cwd)

    def test_spec_file_round_trip(self):
        """Test that a written spec file analyzes like its preset."""
        runner = CliRunner()

        with tempfile.TemporaryDirectory() as temp_dir:
            path = os.path.join(temp_dir, "sd.yaml")
            write_spec(preset("stable-diffusion"), path)

            from_file = runner.invoke(main, ["analyze", "--spec", path, "-f", "csv"])
            from_preset = runner.invoke(main, ["analyze", "--spec", "preset:stable-diffusion", "-f", "csv"])

            assert from_file.exit_code == 0
            assert from_file.output == from_preset.output

    def test_measure_then_compare(self):
        """Test the trace, compare and audit workflow."""
        runner = CliRunner()

        with tempfile.TemporaryDirectory() as temp_dir:
            original_cwd = os.getcwd()
            os.chdir(temp_dir)

            try:
                result = runner.invoke(main, ["trace", TWO_KERNEL, "-o", "breakdown.csv"])
                assert result.exit_code == 0
                assert Path("breakdown.csv").read_text().splitlines()[0] == "category,microseconds,fraction"

                result = runner.invoke(
                    main, ["compare", TWO_KERNEL, "-s", "preset:stable-diffusion", "-o", "comparison.txt"]
                )
                assert result.exit_code == 0
                assert "rank agreement" in Path("comparison.txt").read_text()

                result = runner.invoke(main, ["audit", "-p", "0.8", "-f", "csv", "-o", "audit.csv"])
                assert result.exit_code == 0
                rows = Path("audit.csv").read_text().splitlines()[1:]
                assert rows and all(",True," in row for row in rows)

            finally:
                os.chdir(original_cwd)
