"""Pre-detection re-captioning: VLM description and two-pass LLM summarization.

This module only builds chat requests and parses text; it never inspects
image pixels.  The describe request deliberately excludes the web caption,
which is introduced only at the pass-1 summarization step so both the
generated description and the caption's wording reach the detectors.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from .datamodel import CategorySet, _dedup_lower
from .modelgateway import ChatRequest, image_part, text_part


class RecaptionError(ValueError):
    pass


DEFAULT_STYLE_PREFIX_INSTRUCTION = (
    'Begin your answer with "This is" followed by the overall style of the image, '
    'for example "This is a black and white photograph".'
)
DEFAULT_NO_SPECULATION_CLAUSE = (
    "Describe only what is visually present. Do not speculate about moods, "
    "atmosphere, intentions, or anything that cannot be seen directly."
)
DEFAULT_NO_TRANSCRIPTION_CLAUSE = (
    "Do not transcribe, quote, or read out any text, signs, logos, or writing "
    "that appears inside the image."
)

DEFAULT_DESCRIBE_TEMPLATE = (
    "Describe this image with a comprehensive inventory of its visual contents. "
    "{style_prefix_instruction} {no_speculation_clause} {no_transcription_clause}"
)
DEFAULT_SUMMARIZE_PASS1_TEMPLATE = (
    "Below are a detailed description of an image and the original caption it "
    "was published with. Extract a flat list of concise object categories that "
    "could be located in the image. Output one category per line with no "
    "numbering and no extra commentary.\n\n"
    "Description:\n{description}\n\nOriginal caption:\n{web_caption}"
)
DEFAULT_SUMMARIZE_PASS2_TEMPLATE = (
    "Break each of the following phrases into its constituent parts, such as "
    "standalone nouns. Output one part per line with no numbering and no "
    "extra commentary.\n\nPhrases:\n{phrase_list}"
)
DEFAULT_VERIFY_TEMPLATE = "Does this image show {caption}? Answer yes or no."

_SLOTS = {
    "describe": ("style_prefix_instruction", "no_speculation_clause", "no_transcription_clause"),
    "summarize_pass1": ("description", "web_caption"),
    "summarize_pass2": ("phrase_list",),
    "verify": ("caption",),
}


@dataclass
class PromptTemplates:
    describe: str = DEFAULT_DESCRIBE_TEMPLATE
    summarize_pass1: str = DEFAULT_SUMMARIZE_PASS1_TEMPLATE
    summarize_pass2: str = DEFAULT_SUMMARIZE_PASS2_TEMPLATE
    verify: str = DEFAULT_VERIFY_TEMPLATE
    style_prefix_instruction: str = DEFAULT_STYLE_PREFIX_INSTRUCTION
    no_speculation_clause: str = DEFAULT_NO_SPECULATION_CLAUSE
    no_transcription_clause: str = DEFAULT_NO_TRANSCRIPTION_CLAUSE

    def __post_init__(self):
        for name, slots in _SLOTS.items():
            template = getattr(self, name)
            for slot in slots:
                if template.count("{" + slot + "}") != 1:
                    raise RecaptionError(
                        f"template {name!r} must contain slot {{{slot}}} exactly once"
                    )

    @classmethod
    def from_files(cls, directory) -> "PromptTemplates":
        """Load templates from plain-text files; missing files keep defaults."""
        directory = Path(directory)
        kwargs = {}
        for name in _SLOTS:
            path = directory / f"{name}.txt"
            if path.exists():
                kwargs[name] = path.read_text(encoding="utf-8").strip()
        return cls(**kwargs)


DEFAULT_NEGATIVE_PATTERNS = [
    r"there (is|are) no",
    r"no (visible|other)",
    r"without any",
    r"not (visible|present)",
    r"(is|are) not",
]


@dataclass
class RecaptionConfig:
    max_description_tokens: int = 256
    negative_patterns: list[str] = field(default_factory=lambda: list(DEFAULT_NEGATIVE_PATTERNS))
    category_cap: int = 120
    max_category_words: int = 8

    def __post_init__(self):
        if self.max_description_tokens < 1 or self.category_cap < 1 or self.max_category_words < 1:
            raise RecaptionError("caps must be >= 1")


def build_describe_request(
    image_bytes: bytes, templates: PromptTemplates, cfg: RecaptionConfig
) -> ChatRequest:
    """Single-turn multimodal describe request; excludes the web caption."""
    instruction = templates.describe.format(
        style_prefix_instruction=templates.style_prefix_instruction,
        no_speculation_clause=templates.no_speculation_clause,
        no_transcription_clause=templates.no_transcription_clause,
    )
    return ChatRequest(
        messages=[{"role": "user", "parts": [image_part(image_bytes), text_part(instruction)]}],
        max_tokens=cfg.max_description_tokens,
    )


def _compile_patterns(patterns: list[str]) -> list[re.Pattern]:
    return [re.compile(rf"\b(?:{p})\b", re.IGNORECASE) for p in patterns]


_SENTENCE_SPLIT = re.compile(r"(?<=[.?!])\s+")
_THIS_IS = re.compile(r"^this is\s+", re.IGNORECASE)


def postprocess_description(text: str, cfg: RecaptionConfig) -> str:
    """Strip the leading "This is" style prefix and drop negative sentences.

    Iterates to a fixed point so the result is idempotent even when the
    first surviving sentence itself begins with "This is".
    """
    patterns = _compile_patterns(cfg.negative_patterns)
    current = text.strip()
    for _ in range(4):
        stripped = _THIS_IS.sub("", current, count=1)
        if stripped != current and stripped:
            stripped = stripped[0].upper() + stripped[1:]
        sentences = [s.strip() for s in _SENTENCE_SPLIT.split(stripped) if s.strip()]
        kept = [s for s in sentences if not any(p.search(s) for p in patterns)]
        result = " ".join(kept)
        if result == current:
            return result
        current = result
    return current


def build_summarize_requests(
    description: str, web_caption: str, templates: PromptTemplates
) -> tuple[ChatRequest, Callable[[list[str]], ChatRequest]]:
    """Pass-1 request over description + web caption, and a pass-2 builder."""
    if not description and not web_caption:
        raise RecaptionError("description and web caption are both empty")
    pass1_text = templates.summarize_pass1.format(
        description=description, web_caption=web_caption
    )
    pass1 = ChatRequest(messages=[{"role": "user", "parts": [text_part(pass1_text)]}])

    def pass2(phrases: list[str]) -> ChatRequest:
        phrase_list = "\n".join(f"- {p}" for p in phrases)
        pass2_text = templates.summarize_pass2.format(phrase_list=phrase_list)
        return ChatRequest(messages=[{"role": "user", "parts": [text_part(pass2_text)]}])

    return pass1, pass2


_BULLET = re.compile(r"^\s*(?:[-*•]+|\d+[.)])\s*")


def parse_category_list(llm_output: str, cfg: RecaptionConfig) -> list[str]:
    """Parse a one-per-line category list out of raw LLM output."""
    out: list[str] = []
    seen: set[str] = set()
    for line in llm_output.splitlines():
        entry = _BULLET.sub("", line).strip().strip("\"'").strip()
        entry = re.sub(r"\s+", " ", entry).lower()
        if not entry or len(entry) > 64 or len(entry.split()) > cfg.max_category_words:
            continue
        if entry in seen:
            continue
        seen.add(entry)
        out.append(entry)
    return out


def merge_categories(pass1: list[str], pass2: list[str], cfg: RecaptionConfig) -> CategorySet:
    """Combine both passes; pass-1 phrases keep priority under the cap."""
    merged = _dedup_lower(list(pass1) + list(pass2))[: cfg.category_cap]
    return CategorySet(phrases=list(pass1), terms=list(pass2), merged=merged)
