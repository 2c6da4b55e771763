"""Architecture and hardware descriptions, spec files and built-in presets.

Spec files are YAML documents with a mandatory ``spec_version: 1`` key. Any
scalar field may be written plainly or wrapped as ``{value: ..., assumed: true}``
to mark values that are configuration assumptions rather than published
numbers; the wrapped names are collected into each model's ``assumed`` set and
written back wrapped, so a spec survives a write/load cycle unchanged.
"""
import logging
import os
from fractions import Fraction
from pathlib import Path
from typing import Any, Dict, FrozenSet, List, Literal, Optional, Tuple, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .file_operations import write_file_safe

logger = logging.getLogger(__name__)

SPEC_VERSION = 1
PRESET_DIR_ENV = "GENPERF_PRESET_DIR"
PACKAGE_DIR = Path(__file__).parent
BUILTIN_PRESETS = (
    "imagen",
    "stable-diffusion",
    "muse",
    "parti",
    "make-a-video-like",
    "phenaki-like",
    "llama-like",
)
DEFAULT_HARDWARE = "a100"
VALID_BYTES_PER_PARAM = (1, 2, 4)


class SpecError(Exception):
    """Raised when a spec, preset or hardware file cannot be read or parsed."""

    def __init__(self, message: str, path: Optional[str] = None):
        super().__init__(message)
        self.path = path


class SpecValidationError(SpecError):
    """Raised when a spec violates one of its invariants."""

    def __init__(self, message: str, field: Optional[str] = None, path: Optional[str] = None):
        super().__init__(message, path)
        self.field = field


class UnknownPresetError(SpecError):
    """Raised for a preset name with no preset file."""


def _require(condition: bool, invariant: str) -> None:
    if not condition:
        raise ValueError(invariant)


def _is_wrapped(value: Any) -> bool:
    return isinstance(value, dict) and "value" in value and set(value) <= {"value", "assumed"}


def _plain(value: Any) -> Any:
    if isinstance(value, SpecModel):
        return value.to_document()
    if isinstance(value, frozenset):
        return sorted(value)
    if isinstance(value, (tuple, list)):
        return [_plain(item) for item in value]
    return value


class SpecModel(BaseModel):
    """Immutable base for every spec type, carrying the ``assumed`` field set."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    assumed: FrozenSet[str] = frozenset()

    @model_validator(mode="before")
    @classmethod
    def unwrap_assumed(cls, data: Any) -> Any:
        if not isinstance(data, dict):
            return data
        unwrapped = dict(data)
        assumed = set(unwrapped.get("assumed") or ())
        for key, value in data.items():
            if key != "assumed" and _is_wrapped(value):
                unwrapped[key] = value["value"]
                if value.get("assumed"):
                    assumed.add(key)
        unwrapped["assumed"] = frozenset(assumed)
        return unwrapped

    @model_validator(mode="after")
    def check_assumed_names(self) -> "SpecModel":
        unknown = sorted(set(self.assumed) - set(type(self).model_fields))
        _require(not unknown, f"assumed flags name unknown fields: {', '.join(unknown)}")
        return self

    def to_document(self) -> Dict[str, Any]:
        """Plain document form, assumed fields wrapped."""
        document: Dict[str, Any] = {}
        for name in type(self).model_fields:
            if name == "assumed":
                continue
            value = _plain(getattr(self, name))
            if name in self.assumed:
                value = {"value": value, "assumed": True}
            document[name] = value
        return document


class ImageSize(SpecModel):
    """Output image size in pixels."""

    height: int
    width: int

    @model_validator(mode="after")
    def check_invariants(self) -> "ImageSize":
        _require(self.height >= 1, "height ≥ 1")
        _require(self.width >= 1, "width ≥ 1")
        return self

    @property
    def pixels(self) -> int:
        return self.height * self.width

    def same_size(self, other: "ImageSize") -> bool:
        return (self.height, self.width) == (other.height, other.width)

    def __str__(self) -> str:
        return f"{self.height}x{self.width}"


class DiffusionSpec(SpecModel):
    """UNet diffusion generator.

    Stage ``n = 0`` is the full-resolution latent stage and ``n = unet_depth``
    the bottleneck; every stage except the bottleneck is visited twice per UNet
    traversal (down and up).
    """

    kind: Literal["diffusion"] = "diffusion"
    latent_height: int
    latent_width: int
    downsample_factor: int = 2
    unet_depth: int
    text_encode: int = 0
    denoising_steps: int = 50
    self_attn_stages: FrozenSet[int] = frozenset()
    cross_attn_stages: FrozenSet[int] = frozenset()
    blocks_per_stage: int = 1
    head_dim: int = 64
    num_heads: int = 1
    space: Literal["pixel", "latent"] = "latent"
    latent_downsample: int = 1
    guidance_multiplier: int = 1
    base_channels: int = 0
    channel_mult: Tuple[int, ...] = ()
    num_res_blocks: int = 0
    context_dim: int = 0
    extra_flops_per_pass: int = 0
    attn_res: Tuple[int, ...] = ()
    attn_res_semantics: Literal["none", "resolution", "multiple"] = "none"

    @model_validator(mode="after")
    def check_invariants(self) -> "DiffusionSpec":
        _require(self.latent_height >= 1, "latent_height ≥ 1")
        _require(self.latent_width >= 1, "latent_width ≥ 1")
        _require(self.downsample_factor >= 1, "downsample_factor ≥ 1")
        _require(self.unet_depth >= 0, "unet_depth ≥ 0")
        _require(self.text_encode >= 0, "text_encode ≥ 0")
        _require(self.denoising_steps >= 1, "denoising_steps ≥ 1")
        _require(self.blocks_per_stage >= 1, "blocks_per_stage ≥ 1")
        _require(self.head_dim >= 1, "head_dim ≥ 1")
        _require(self.num_heads >= 1, "num_heads ≥ 1")
        _require(self.latent_downsample >= 1, "latent_downsample ≥ 1")
        _require(self.guidance_multiplier >= 1, "guidance_multiplier ≥ 1")
        _require(self.base_channels >= 0, "base_channels ≥ 0")
        _require(self.num_res_blocks >= 0, "num_res_blocks ≥ 0")
        _require(self.context_dim >= 0, "context_dim ≥ 0")
        _require(self.extra_flops_per_pass >= 0, "extra_flops_per_pass ≥ 0")
        for name in ("self_attn_stages", "cross_attn_stages"):
            stages = getattr(self, name)
            _require(
                all(0 <= stage <= self.unet_depth for stage in stages),
                f"every stage index in {name} is ≤ unet_depth",
            )
        _require(
            not self.channel_mult or len(self.channel_mult) == self.unet_depth + 1,
            "channel_mult has one entry per stage (unet_depth + 1)",
        )
        _require(all(mult >= 1 for mult in self.channel_mult), "channel_mult entries ≥ 1")
        scale = self.downsample_factor ** self.unet_depth
        _require(
            self.latent_height % scale == 0 and self.latent_width % scale == 0,
            f"latent dims divisible by downsample_factor^unet_depth ({scale})",
        )
        return self

    @property
    def image_size(self) -> ImageSize:
        return ImageSize(
            height=self.latent_height * self.latent_downsample,
            width=self.latent_width * self.latent_downsample,
        )

    @property
    def attention_width(self) -> int:
        return self.num_heads * self.head_dim

    @property
    def attention_stages(self) -> FrozenSet[int]:
        return self.self_attn_stages | self.cross_attn_stages

    def visits(self) -> List[int]:
        """Stage indices in UNet traversal order: down, bottleneck, up."""
        down = list(range(self.unet_depth))
        return down + [self.unet_depth] + down[::-1]

    def stage_side(self, stage: int) -> Tuple[int, int]:
        scale = self.downsample_factor ** stage
        return self.latent_height // scale, self.latent_width // scale

    def stage_tokens(self, stage: int) -> int:
        height, width = self.stage_side(stage)
        return height * width

    def stage_channels(self, stage: int) -> int:
        mult = self.channel_mult[stage] if self.channel_mult else 1
        return self.base_channels * mult


class TransformerSpec(SpecModel):
    """Token-generating transformer (or a text encoder in ``encode`` mode)."""

    kind: Literal["transformer"] = "transformer"
    num_layers: int
    model_dim: int
    num_heads: int = 1
    prompt_len: int
    gen_tokens: int
    decode_mode: Literal["autoregressive", "parallel", "encode"] = "autoregressive"
    parallel_steps: int = 1
    native_image: Optional[ImageSize] = None

    @model_validator(mode="after")
    def check_invariants(self) -> "TransformerSpec":
        _require(self.num_layers >= 1, "num_layers ≥ 1")
        _require(self.model_dim >= 1, "model_dim ≥ 1")
        _require(self.num_heads >= 1, "num_heads ≥ 1")
        _require(self.model_dim % self.num_heads == 0, "model_dim divisible by num_heads")
        _require(self.prompt_len >= 1, "prompt_len ≥ 1")
        _require(self.gen_tokens >= 1, "gen_tokens ≥ 1")
        _require(self.parallel_steps >= 1, "parallel_steps ≥ 1")
        return self

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads

    @property
    def dense_params(self) -> int:
        """Attention projections plus a 4x feed-forward, per the usual 12·d² per layer."""
        return 12 * self.num_layers * self.model_dim * self.model_dim


class VideoSpec(SpecModel):
    """Diffusion video generator with temporal attention after spatial attention."""

    kind: Literal["video"] = "video"
    base: DiffusionSpec
    num_frames: int = 16
    temporal_attn_stages: FrozenSet[int] = frozenset()

    @model_validator(mode="after")
    def check_invariants(self) -> "VideoSpec":
        _require(self.num_frames >= 1, "num_frames ≥ 1")
        _require(
            all(0 <= stage <= self.base.unet_depth for stage in self.temporal_attn_stages),
            "every stage index in temporal_attn_stages is ≤ unet_depth",
        )
        return self


Variant = Union[DiffusionSpec, TransformerSpec, VideoSpec]


class ModelSpec(SpecModel):
    """A generative model: one generator variant and an optional component pipeline.

    When ``pipeline`` is non-empty it lists every component (text encoder, base
    generator, super-resolution stages, decoder) and is authoritative for cost
    totals; ``variant`` names the headline generator used for traces.
    """

    name: str
    total_params: int
    bytes_per_param: int = 2
    variant: Variant = Field(discriminator="kind")
    pipeline: Tuple["ModelSpec", ...] = ()
    output_image: Optional[ImageSize] = None

    @model_validator(mode="after")
    def check_invariants(self) -> "ModelSpec":
        _require(bool(self.name), "name is non-empty")
        _require(self.total_params >= 1, "total_params ≥ 1")
        _require(self.bytes_per_param in VALID_BYTES_PER_PARAM, "bytes_per_param ∈ {1, 2, 4}")
        return self

    @property
    def param_bytes(self) -> int:
        return self.total_params * self.bytes_per_param

    @property
    def native_image(self) -> Optional[ImageSize]:
        if self.output_image is not None:
            return self.output_image
        if isinstance(self.variant, DiffusionSpec):
            return self.variant.image_size
        if isinstance(self.variant, VideoSpec):
            return self.variant.base.image_size
        return self.variant.native_image

    def components(self) -> Tuple["ModelSpec", ...]:
        return self.pipeline if self.pipeline else (self,)


ModelSpec.model_rebuild()


class HardwareSpec(SpecModel):
    """Accelerator rates used for roofline placement."""

    name: str
    peak_flops: float
    mem_bandwidth: float
    mem_capacity: float

    @model_validator(mode="after")
    def check_invariants(self) -> "HardwareSpec":
        _require(self.peak_flops > 0, "peak_flops > 0")
        _require(self.mem_bandwidth > 0, "mem_bandwidth > 0")
        _require(self.mem_capacity > 0, "mem_capacity > 0")
        return self

    @property
    def ridge_point(self) -> float:
        return self.peak_flops / self.mem_bandwidth


def _validation_error(exc: ValidationError, path: Optional[str]) -> SpecValidationError:
    messages = []
    first_field = None
    for error in exc.errors():
        location = ".".join(str(part) for part in error.get("loc", ()))
        message = str(error.get("msg", "")).replace("Value error, ", "", 1)
        if first_field is None and location:
            first_field = location
        messages.append(f"{location}: {message}" if location else message)
    return SpecValidationError("; ".join(messages), field=first_field, path=path)


def _read_yaml(path: Path) -> Any:
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise SpecError(f"Cannot read {path}: {e}", path=str(path))
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise SpecError(f"Malformed file {path}: {e}", path=str(path))


def spec_from_document(document: Any, source: Optional[str] = None) -> ModelSpec:
    """Validate a parsed spec document.

    Raises:
        SpecError: If the document is not a mapping
        SpecValidationError: If a field or invariant is violated
    """
    if not isinstance(document, dict):
        raise SpecError(f"Spec {source or '<document>'} must be a mapping", path=source)
    body = dict(document)
    version = body.pop("spec_version", None)
    if version != SPEC_VERSION:
        raise SpecValidationError(
            f"spec_version: {SPEC_VERSION} required (got {version!r})",
            field="spec_version",
            path=source,
        )
    try:
        return ModelSpec.model_validate(body)
    except ValidationError as e:
        raise _validation_error(e, source)


def spec_document(spec: ModelSpec) -> Dict[str, Any]:
    """Versioned document form of a spec, as written to disk and embedded in reports."""
    return {"spec_version": SPEC_VERSION, **spec.to_document()}


def load_spec(path: Union[str, Path]) -> ModelSpec:
    """Load and validate a spec file.

    Args:
        path: YAML spec file

    Returns:
        Validated ModelSpec

    Raises:
        SpecError: If the file is missing or malformed
        SpecValidationError: If the spec violates an invariant
    """
    path = Path(path)
    logger.debug("loading spec %s", path)
    return spec_from_document(_read_yaml(path), source=str(path))


def write_spec(spec: ModelSpec, path: Union[str, Path]) -> None:
    """Write a spec file that ``load_spec`` reads back unchanged."""
    content = yaml.safe_dump(spec_document(spec), sort_keys=False, allow_unicode=True)
    write_file_safe(str(path), content, overwrite=True)


def preset_dir() -> Path:
    override = os.environ.get(PRESET_DIR_ENV)
    return Path(override) if override else PACKAGE_DIR / "presets"


def list_presets() -> List[str]:
    """Names of the presets in the active preset directory."""
    directory = preset_dir()
    if not directory.is_dir():
        return []
    return sorted(path.stem for path in directory.glob("*.yaml"))


def preset(name: str) -> ModelSpec:
    """Load a built-in (or ``GENPERF_PRESET_DIR``) preset by name.

    Raises:
        UnknownPresetError: If no preset file has that name
    """
    path = preset_dir() / f"{name.strip().lower()}.yaml"
    if not path.is_file():
        available = ", ".join(list_presets()) or "none"
        raise UnknownPresetError(f"Unknown preset '{name}'. Available: {available}", path=str(path))
    return load_spec(path)


def resolve_spec(reference: str) -> ModelSpec:
    """Load ``preset:<name>`` references or spec file paths."""
    if reference.startswith("preset:"):
        return preset(reference.split(":", 1)[1])
    return load_spec(reference)


def load_hardware(reference: Optional[str] = None) -> HardwareSpec:
    """Load a hardware spec file, a ``preset:<name>`` hardware spec, or the default.

    Raises:
        SpecError: If the file is missing or malformed
        SpecValidationError: If a rate is not strictly positive
    """
    if reference is None:
        reference = f"preset:{DEFAULT_HARDWARE}"
    if reference.startswith("preset:"):
        path = PACKAGE_DIR / "hardware" / f"{reference.split(':', 1)[1]}.yaml"
        if not path.is_file():
            raise UnknownPresetError(f"Unknown hardware preset '{reference}'", path=str(path))
    else:
        path = Path(reference)

    document = _read_yaml(path)
    if not isinstance(document, dict):
        raise SpecError(f"Hardware spec {path} must be a mapping", path=str(path))
    body = dict(document)
    body.pop("spec_version", None)
    try:
        return HardwareSpec.model_validate(body)
    except ValidationError as e:
        raise _validation_error(e, str(path))


def default_hardware() -> HardwareSpec:
    """The shipped A100-like hardware spec (rates flagged as assumed)."""
    return load_hardware(None)


def replace(model: Any, **changes: Any) -> Any:
    """Copy of a spec model with fields changed, re-validated.

    Raises:
        SpecValidationError: If the changed model violates an invariant
    """
    data = {name: getattr(model, name) for name in type(model).model_fields}
    data.update(changes)
    try:
        return type(model).model_validate(data)
    except ValidationError as e:
        raise _validation_error(e, None)


def _scaled(value: int, factor: Fraction, what: str) -> int:
    result = value * factor
    if result.denominator != 1:
        raise SpecValidationError(
            f"{what} {value} does not scale to a whole number for the requested image size",
            field=what,
        )
    return int(result)


def _resize_variant(variant: Variant, scale_h: Fraction, scale_w: Fraction) -> Variant:
    if isinstance(variant, DiffusionSpec):
        return replace(
            variant,
            latent_height=_scaled(variant.latent_height, scale_h, "latent_height"),
            latent_width=_scaled(variant.latent_width, scale_w, "latent_width"),
        )
    if isinstance(variant, VideoSpec):
        return replace(variant, base=_resize_variant(variant.base, scale_h, scale_w))
    if variant.native_image is None or variant.decode_mode == "encode":
        return variant
    native = variant.native_image
    return replace(
        variant,
        gen_tokens=_scaled(variant.gen_tokens, scale_h * scale_w, "gen_tokens"),
        native_image=ImageSize(
            height=_scaled(native.height, scale_h, "height"),
            width=_scaled(native.width, scale_w, "width"),
        ),
    )


def _resize_model(spec: ModelSpec, scale_h: Fraction, scale_w: Fraction) -> ModelSpec:
    output_image = spec.output_image
    if output_image is not None:
        output_image = ImageSize(
            height=_scaled(output_image.height, scale_h, "height"),
            width=_scaled(output_image.width, scale_w, "width"),
        )
    return replace(
        spec,
        variant=_resize_variant(spec.variant, scale_h, scale_w),
        pipeline=tuple(_resize_model(component, scale_h, scale_w) for component in spec.pipeline),
        output_image=output_image,
    )


def resize(spec: ModelSpec, image: Optional[ImageSize]) -> ModelSpec:
    """Rescale every image-producing component to a requested output size.

    Diffusion latents scale with the output side, transformer image-token
    counts with the output area; text encoders are left alone.

    Raises:
        SpecValidationError: If a rescaled dimension is not a whole number or
            breaks a divisibility invariant
    """
    native = spec.native_image
    if image is None or native is None or image.same_size(native):
        return spec
    scale_h = Fraction(image.height, native.height)
    scale_w = Fraction(image.width, native.width)
    logger.debug("resizing %s from %s to %s", spec.name, native, image)
    return _resize_model(spec, scale_h, scale_w)


def _with_steps_variant(variant: Variant, steps: int) -> Variant:
    if isinstance(variant, DiffusionSpec):
        return replace(variant, denoising_steps=steps)
    if isinstance(variant, VideoSpec):
        return replace(variant, base=_with_steps_variant(variant.base, steps))
    return variant


def with_steps(spec: ModelSpec, steps: Optional[int]) -> ModelSpec:
    """Override the denoising step count of every diffusion component."""
    if steps is None:
        return spec
    return replace(
        spec,
        variant=_with_steps_variant(spec.variant, steps),
        pipeline=tuple(with_steps(component, steps) for component in spec.pipeline),
    )


def with_frames(spec: ModelSpec, frames: Optional[int]) -> ModelSpec:
    """Override the frame count of a video model.

    Raises:
        SpecValidationError: If ``frames`` is given for a model without a video generator
    """
    if frames is None:
        return spec
    if not isinstance(spec.variant, VideoSpec):
        raise SpecValidationError(f"{spec.name} generates no video; --frames does not apply", field="num_frames")
    return replace(spec, variant=replace(spec.variant, num_frames=frames))
