"""Tests for seqprofile module."""
import csv
import tempfile
from pathlib import Path

import pytest

from genperf.archspec import DiffusionSpec, ImageSize, TransformerSpec, VideoSpec, preset, replace, resize
from genperf.seqprofile import (
    AttentionCall,
    SeqLenTrace,
    TraceError,
    diffusion_trace,
    model_trace,
    seq_len_histogram,
    sequence_ratios,
    single_traversal,
    transformer_trace,
    video_trace,
    write_histogram_csv,
    write_trace_csv,
)

DIFFUSION_PRESETS = ("stable-diffusion", "imagen", "make-a-video-like")


def _self_lens(trace):
    return trace.q_lens(kinds=("self", "spatial"))


class TestAttentionCall:
    """Test attention call validation."""

    def test_unknown_kind(self):
        """Test that unknown call kinds are rejected."""
        with pytest.raises(TraceError):
            AttentionCall("global", 4, 4, head_dim=8)

    def test_non_positive_lengths(self):
        """Test that lengths must be positive."""
        with pytest.raises(TraceError):
            AttentionCall("self", 0, 4, head_dim=8)
        with pytest.raises(TraceError):
            AttentionCall("cross", 4, 4, head_dim=8, batch=0)


class TestDiffusionTrace:
    """Test diffusion sequence-length profiles."""

    def test_stable_diffusion_support(self):
        """Test the query-length support of Stable Diffusion at 512x512."""
        spec = resize(preset("stable-diffusion"), ImageSize(height=512, width=512))
        trace = model_trace(spec)
        assert set(_self_lens(trace)) == {4096, 1024, 256, 64}
        assert max(trace.q_lens()) == 4096

    def test_traversal_is_palindromic(self):
        """Test that each traversal goes down and back up symmetrically."""
        trace = model_trace(preset("stable-diffusion"))
        step = _self_lens(trace.for_step(0))
        assert step == [4096, 1024, 256, 64, 256, 1024, 4096]
        assert step == step[::-1]

    def test_every_step_repeats_the_traversal(self):
        """Test that the trace holds one traversal per denoising step."""
        spec = preset("stable-diffusion")
        trace = model_trace(spec)
        per_step = len(trace.for_step(0))
        assert len(trace) == per_step * spec.variant.denoising_steps
        assert len(model_trace(spec, steps=3)) == per_step * 3

    def test_cross_attention_kv_is_text(self):
        """Test that cross-attention attends to the text tokens."""
        trace = model_trace(preset("stable-diffusion"), steps=1)
        cross = [call for call in trace if call.kind == "cross"]
        assert cross
        assert {call.kv_len for call in cross} == {77}

    def test_no_cross_calls_without_text(self):
        """Test that text_encode = 0 emits no cross-attention calls."""
        variant = replace(preset("stable-diffusion").variant, text_encode=0)
        trace = diffusion_trace(variant, steps=1)
        assert all(call.kind == "self" for call in trace)

    def test_visit_order_within_stage(self):
        """Test that self-attention precedes cross-attention at each visit."""
        trace = model_trace(preset("stable-diffusion"), steps=1)
        kinds = [call.kind for call in trace]
        assert kinds[:2] == ["self", "cross"]

    def test_guidance_multiplier_repeats_traversals(self):
        """Test that guidance doubles the calls of each step."""
        variant = preset("stable-diffusion").variant
        single = diffusion_trace(variant, steps=2)
        guided = diffusion_trace(replace(variant, guidance_multiplier=2), steps=2)
        assert len(guided) == 2 * len(single)

    def test_blocks_per_stage(self):
        """Test that blocks_per_stage repeats the calls of every visit."""
        variant = preset("stable-diffusion").variant
        doubled = replace(variant, blocks_per_stage=2)
        assert len(single_traversal(doubled)) == 2 * len(single_traversal(variant))

    def test_image_size_doubling_quadruples_queries(self):
        """Test that doubling the output size multiplies every query length by 4."""
        for name in DIFFUSION_PRESETS:
            spec = preset(name)
            native = spec.native_image
            doubled = resize(spec, ImageSize(height=2 * native.height, width=2 * native.width))
            before = _self_lens(model_trace(spec, steps=1))
            after = _self_lens(model_trace(doubled, steps=1))
            assert len(before) == len(after)
            assert all(b * 4 == a for b, a in zip(before, after)), name

    def test_one_level_unet(self):
        """Test the query lengths of a 16x16 latent through one downsampling level."""
        variant = DiffusionSpec(latent_height=16, latent_width=16, unet_depth=1, self_attn_stages=[0, 1])
        assert single_traversal(variant).q_lens() == [256, 64, 256]

    def test_depth_zero_is_constant(self):
        """Test that a UNet without downsampling keeps one query length."""
        variant = DiffusionSpec(latent_height=8, latent_width=8, unet_depth=0, self_attn_stages=[0])
        trace = diffusion_trace(variant, steps=3)
        assert trace.q_lens() == [64, 64, 64]

    def test_invalid_steps(self):
        """Test that the step count must be positive."""
        with pytest.raises(TraceError):
            diffusion_trace(preset("stable-diffusion").variant, steps=0)


class TestVideoTrace:
    """Test video traces."""

    def test_frames_fold_into_batch(self):
        """Test spatial and temporal call shapes."""
        variant = preset("make-a-video-like").variant
        trace = video_trace(variant, steps=1)
        spatial = [call for call in trace if call.kind == "spatial"]
        temporal = [call for call in trace if call.kind == "temporal"]
        assert all(call.batch == variant.num_frames for call in spatial)
        assert all(call.q_len == call.kv_len == variant.num_frames for call in temporal)
        assert {call.batch for call in temporal} == {variant.base.stage_tokens(n) for n in (1, 2, 3)}

    def test_temporal_follows_spatial(self):
        """Test the per-visit order spatial, temporal, cross."""
        trace = model_trace(preset("make-a-video-like"), steps=1)
        assert [call.kind for call in trace][:3] == ["spatial", "temporal", "cross"]

    def test_temporal_only_at_temporal_stages(self):
        """Test that temporal calls follow the temporal stage set."""
        base = DiffusionSpec(latent_height=8, latent_width=8, unet_depth=1, self_attn_stages=[0, 1])
        video = VideoSpec(base=base, num_frames=4, temporal_attn_stages=[1])
        temporal = [call for call in single_traversal(video) if call.kind == "temporal"]
        assert [call.stage for call in temporal] == [1]


    def test_single_frame(self):
        """Test that one frame gives temporal calls of length 1."""
        base = DiffusionSpec(latent_height=8, latent_width=8, unet_depth=1, self_attn_stages=[0, 1])
        video = VideoSpec(base=base, num_frames=1, temporal_attn_stages=[0, 1])
        temporal = [call for call in single_traversal(video) if call.kind == "temporal"]
        assert temporal
        assert {(call.q_len, call.kv_len) for call in temporal} == {(1, 1)}

    def test_no_temporal_stages(self):
        """Test that a video without temporal stages is the diffusion trace batched over frames."""
        base = DiffusionSpec(
            latent_height=8, latent_width=8, unet_depth=1, self_attn_stages=[0, 1], text_encode=7, cross_attn_stages=[1]
        )
        video = VideoSpec(base=base, num_frames=6)
        frames = video_trace(video, steps=2)
        image = diffusion_trace(base, steps=2)
        assert len(frames) == len(image)
        assert all(call.batch == 6 for call in frames)
        assert [(c.q_len, c.kv_len) for c in frames] == [(c.q_len, c.kv_len) for c in image]
        assert [c.kind for c in frames] == ["spatial" if c.kind == "self" else c.kind for c in image]


class TestTransformerTrace:
    """Test transformer traces."""

    def test_autoregressive_kv_increases(self):
        """Test that autoregressive decoding grows the key-value length."""
        trace = model_trace(preset("parti"))
        kv = trace.kv_lens()
        assert len(trace) == preset("parti").variant.gen_tokens
        assert all(later > earlier for earlier, later in zip(kv, kv[1:]))
        assert trace.calls[0].q_len == 128
        assert all(call.q_len == 1 for call in trace.calls[1:])

    def test_parallel_kv_constant(self):
        """Test that parallel decoding keeps the sequence length fixed."""
        trace = model_trace(preset("muse"))
        assert len(trace) == 24
        assert set(trace.kv_lens()) == {128 + 256}

    def test_encode_single_pass(self):
        """Test that text encoders take one pass over the prompt."""
        encoder = preset("imagen").components()[0]
        trace = transformer_trace(encoder.variant)
        assert len(trace) == 1
        assert trace.calls[0].q_len == trace.calls[0].kv_len == 128

    def test_short_autoregressive_decode(self):
        """Test key lengths of a five-token prompt decoding four tokens."""
        spec = TransformerSpec(num_layers=2, model_dim=8, prompt_len=5, gen_tokens=4)
        trace = transformer_trace(spec)
        assert trace.kv_lens() == [5, 6, 7, 8]
        assert trace.q_lens() == [5, 1, 1, 1]

    def test_single_generated_token(self):
        """Test that one generated token is a single prompt pass."""
        spec = TransformerSpec(num_layers=2, model_dim=8, prompt_len=5, gen_tokens=1)
        trace = transformer_trace(spec)
        assert [(call.q_len, call.kv_len) for call in trace] == [(5, 5)]

    def test_calls_cover_all_layers(self):
        """Test that each call stands for every layer."""
        trace = model_trace(preset("llama-like"))
        assert {call.repeat for call in trace} == {32}
        assert {call.head_dim for call in trace} == {128}


class TestProfiles:
    """Test histograms, ratios and CSV export."""

    def test_histogram(self):
        """Test query-length counts of one Stable Diffusion step."""
        trace = model_trace(preset("stable-diffusion"), steps=1)
        assert seq_len_histogram(trace) == {64: 2, 256: 4, 1024: 4, 4096: 4}

    def test_histogram_keys_ascending(self):
        """Test that histogram keys are sorted."""
        histogram = seq_len_histogram(model_trace(preset("imagen"), steps=1))
        assert list(histogram) == sorted(histogram)

    def test_empty_trace_histogram(self):
        """Test that a trace without attention has no histogram."""
        variant = DiffusionSpec(latent_height=8, latent_width=8, unet_depth=1)
        trace = diffusion_trace(variant, steps=2)
        assert len(trace) == 0
        with pytest.raises(TraceError):
            seq_len_histogram(trace)

    def test_sequence_ratios(self):
        """Test per-stage and whole-trace ratios of Stable Diffusion."""
        ratios = sequence_ratios(model_trace(preset("stable-diffusion"), steps=1))
        assert ratios.per_stage == 4.0
        assert ratios.whole_trace == 64.0

    def test_write_csvs(self):
        """Test the trace and histogram CSV files."""
        trace = model_trace(preset("stable-diffusion"), steps=1)
        with tempfile.TemporaryDirectory() as temp_dir:
            path = str(Path(temp_dir) / "sd.csv")
            write_trace_csv(trace, path)
            histogram_path = write_histogram_csv(trace, path)

            assert histogram_path == str(Path(temp_dir) / "sd_histogram.csv")
            with open(path, newline="", encoding="utf-8") as handle:
                rows = list(csv.reader(handle))
            assert rows[0] == ["index", "step", "stage", "kind", "q_len", "kv_len", "batch", "heads", "head_dim"]
            assert len(rows) == len(trace) + 1
            with open(histogram_path, newline="", encoding="utf-8") as handle:
                text = handle.read()
            assert text == "q_len,count\r\n64,2\r\n256,4\r\n1024,4\r\n4096,4\r\n"

    def test_trace_iteration(self):
        """Test that a trace iterates over its calls in order."""
        calls = (AttentionCall("self", 4, 4, head_dim=2), AttentionCall("self", 1, 5, head_dim=2, step=1))
        trace = SeqLenTrace("manual", calls)
        assert list(trace) == list(calls)
        assert trace.q_lens() == [4, 1]
        assert len(trace.for_step(1)) == 1
