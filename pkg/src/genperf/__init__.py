"""genperf: analytical performance models and profiler-trace analysis for multi-modal generative inference."""

__version__ = "0.1.0"
__author__ = "genperf"
__description__ = "Performance models, roofline placement and trace breakdowns for text-to-image and text-to-video inference"
