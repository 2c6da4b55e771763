"""Tests for genperf package."""
