"""Parsing and validation of command-line values."""
import math
import re
from typing import List, Optional

from .archspec import ImageSize


class ValidationError(Exception):
    """Custom exception for validation errors."""

    def __init__(self, message: str, details: Optional[str] = None):
        super().__init__(message)
        self.details = details


_IMAGE_SIZE = re.compile(r"^(\d+)(?:[xX*](\d+))?$")


def parse_image_size(value: str) -> ImageSize:
    """Parse an image size given as ``HxW`` or a single side length.

    Args:
        value: Image size string, e.g. ``512x512`` or ``512``

    Returns:
        Parsed ImageSize

    Raises:
        ValidationError: If the value is not a positive size
    """
    sanitized = sanitize_input(value) or ""
    match = _IMAGE_SIZE.match(sanitized)
    if not match:
        raise ValidationError(
            f"Invalid image size '{value}'", details="Expected HxW, e.g. 512x512"
        )

    height = int(match.group(1))
    width = int(match.group(2) or match.group(1))
    if height < 1 or width < 1:
        raise ValidationError(f"Invalid image size '{value}': sides must be ≥ 1")
    return ImageSize(height=height, width=width)


def parse_range(value: str) -> List[int]:
    """Parse a sweep range.

    Accepted forms:
        ``64,128,256``   explicit list
        ``64:512:64``    arithmetic, stop inclusive
        ``8:256*2``      geometric, stop inclusive

    Args:
        value: Range expression

    Returns:
        Ordered list of points

    Raises:
        ValidationError: If the expression is malformed or empty
    """
    sanitized = (sanitize_input(value) or "").replace(" ", "")
    if not sanitized:
        raise ValidationError("Invalid range: cannot be empty")

    try:
        if "," in sanitized or ":" not in sanitized:
            points = [int(part) for part in sanitized.split(",") if part]
        elif "*" in sanitized:
            bounds, factor_text = sanitized.split("*", 1)
            start_text, stop_text = bounds.split(":", 1)
            start, stop, factor = int(start_text), int(stop_text), int(factor_text)
            if start < 1 or factor < 2:
                raise ValidationError(
                    f"Invalid range '{value}': geometric ranges need start ≥ 1 and factor ≥ 2"
                )
            points = []
            point = start
            while point <= stop:
                points.append(point)
                point *= factor
        else:
            parts = [int(part) for part in sanitized.split(":")]
            if len(parts) not in (2, 3):
                raise ValueError(value)
            start, stop = parts[0], parts[1]
            step = parts[2] if len(parts) == 3 else 1
            if step < 1:
                raise ValidationError(f"Invalid range '{value}': step must be ≥ 1")
            points = list(range(start, stop + 1, step))
    except ValueError:
        raise ValidationError(
            f"Invalid range '{value}'",
            details="Use a list (64,128), start:stop:step or start:stop*factor",
        )

    if not points:
        raise ValidationError(f"Invalid range '{value}': no points")
    if any(point < 1 for point in points):
        raise ValidationError(f"Invalid range '{value}': points must be ≥ 1")
    return points


def validate_sweep_points(points: List[int]) -> None:
    """Validate that a sweep has at least two distinct points.

    Args:
        points: Sweep points

    Raises:
        ValidationError: If fewer than two distinct points are given
    """
    if len(set(points)) < 2:
        raise ValidationError("Invalid range: a sweep needs at least 2 distinct points")


def validate_fraction(value: float, name: str = "fraction") -> None:
    """Validate that a value lies in [0, 1].

    Args:
        value: Value to check
        name: Name of the value for error messages

    Raises:
        ValidationError: If value is outside [0, 1]
    """
    if math.isnan(value) or not 0.0 <= value <= 1.0:
        raise ValidationError(f"Invalid {name} {value}: must lie in [0, 1]")


def sanitize_input(input_val: Optional[str]) -> Optional[str]:
    """Sanitize user input by trimming whitespace and normalizing.

    Args:
        input_val: Input value to sanitize

    Returns:
        Sanitized input or None if input was None
    """
    if input_val is None:
        return None

    sanitized = str(input_val).strip()
    sanitized = sanitized.lower()
    sanitized = re.sub(r'\s+', ' ', sanitized)

    return sanitized
