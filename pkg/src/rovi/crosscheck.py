"""Per-instance verification: crop, ask a one-token yes/no question, gate.

Each resampled instance is cropped (with a small context margin), shown to
a verifier VLM with a yes/no question capped at one output token, and kept
only when the summed probability of all "yes" token variants sufficiently
dominates that of "no".
"""

from __future__ import annotations

import math
import string
from dataclasses import dataclass

from PIL import Image

from .geometry import Box
from .modelgateway import ChatRequest, image_part, text_part
from .recaption import PromptTemplates


class CrosscheckError(ValueError):
    pass


@dataclass
class CrosscheckConfig:
    margin: float = 0.10  # box expansion per side, fraction of the side length
    min_crop_side: int = 224  # upscale smaller crops
    keep_ratio: float = 0.75  # tau: p_yes / (p_yes + p_no) needed to verify
    min_mass: float = 0.5  # below this total yes+no mass -> indeterminate
    normalize_punctuation: bool = True
    yes_variants: frozenset = frozenset({"yes"})
    no_variants: frozenset = frozenset({"no"})

    def __post_init__(self):
        if not 0.5 < self.keep_ratio < 1.0:
            raise CrosscheckError("keep_ratio must be in (0.5, 1)")
        if self.margin < 0:
            raise CrosscheckError("margin must be >= 0")


def expand_region(
    box: Box, width: int, height: int, cfg: CrosscheckConfig
) -> tuple[int, int, int, int]:
    """Grow the box by margin * (side length) per side, clamped to the image."""
    x1, y1, x2, y2 = box
    dx = cfg.margin * (x2 - x1)
    dy = cfg.margin * (y2 - y1)
    left = max(0, int(round(x1 - dx)))
    top = max(0, int(round(y1 - dy)))
    right = min(width, int(round(x2 + dx)))
    bottom = min(height, int(round(y2 + dy)))
    if right - left < 1 or bottom - top < 1:
        raise CrosscheckError(f"degenerate_box: clamped region {(left, top, right, bottom)}")
    return left, top, right, bottom


def crop_region(image: Image.Image, box: Box, cfg: CrosscheckConfig) -> Image.Image:
    """Crop the box expanded by the margin, upscaling small crops.

    Crops whose shorter side is below min_crop_side are bilinear-upscaled
    preserving aspect ratio.
    """
    crop = image.crop(expand_region(box, image.width, image.height, cfg))
    short = min(crop.width, crop.height)
    if short < cfg.min_crop_side:
        scale = cfg.min_crop_side / short
        crop = crop.resize(
            (max(1, round(crop.width * scale)), max(1, round(crop.height * scale))),
            Image.BILINEAR,
        )
    return crop


def build_verify_request(
    caption: str, crop_bytes: bytes, templates: PromptTemplates
) -> ChatRequest:
    """One-token yes/no question over the crop, with logprob alternatives."""
    if not caption:
        raise CrosscheckError("caption is empty")
    text = templates.verify.format(caption=caption)
    return ChatRequest(
        messages=[{"role": "user", "parts": [image_part(crop_bytes), text_part(text)]}],
        max_tokens=1,
        logprobs=True,
        top_alternatives=10,
    )


def _normalize_token(token: str, cfg: CrosscheckConfig) -> str:
    strip_chars = string.whitespace + (string.punctuation if cfg.normalize_punctuation else "")
    return token.strip(strip_chars).lower()


def aggregate_yes_no(
    alternatives: list[tuple[str, float]], cfg: CrosscheckConfig
) -> tuple[float, float]:
    """Sum probabilities over yes / no token variants; no renormalization."""
    p_yes = 0.0
    p_no = 0.0
    for token, logprob in alternatives:
        norm = _normalize_token(token, cfg)
        if norm in cfg.yes_variants:
            p_yes += math.exp(logprob)
        elif norm in cfg.no_variants:
            p_no += math.exp(logprob)
    return p_yes, p_no


def verdict(p_yes: float, p_no: float, cfg: CrosscheckConfig) -> str:
    """Gate: indeterminate below the mass floor, else ratio against keep_ratio."""
    mass = p_yes + p_no
    if mass < cfg.min_mass:
        return "indeterminate"
    return "verified" if p_yes / mass >= cfg.keep_ratio else "rejected"
