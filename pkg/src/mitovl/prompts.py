"""Text side of every sample: class texts, captions, VQA questions and answers."""

from __future__ import annotations

import string
from dataclasses import dataclass
from enum import Enum

from mitovl.ingest import Label


class PromptMode(str, Enum):
    CLIP_LABEL = "CLIP_LABEL"
    BLIP_BINARY_CAPTION = "BLIP_BINARY_CAPTION"
    BLIP_COMPLETE_CAPTION = "BLIP_COMPLETE_CAPTION"
    BLIP_VQA = "BLIP_VQA"


class PromptError(ValueError):
    pass


LABEL_TEXT = {Label.MITOTIC: "mitotic", Label.HARD_NEGATIVE: "nonmitotic"}
ANSWER_TEXT = {Label.MITOTIC: "yes", Label.HARD_NEGATIVE: "no"}


@dataclass(frozen=True)
class PromptTemplates:
    """Templates use ``str.format`` fields ``{species}``, ``{tumor_type}``, ``{scanner}``, ``{label}``."""

    vqa_question: str = (
        "This is an image of {species} {tumor_type} taken using scanner {scanner}. Is there mitosis in the image?"
    )
    complete_caption: str = "{label}, {tumor_type}, {species}, {scanner}"

    def to_dict(self) -> dict:
        return {"vqa_question": self.vqa_question, "complete_caption": self.complete_caption}


NO_METADATA_QUESTION = "Is there mitosis in the image?"


@dataclass(frozen=True)
class PromptBundle:
    mode: PromptMode
    question: str | None
    target_text: str
    label: Label


def _fields(template: str) -> set[str]:
    return {name for _, name, _, _ in string.Formatter().parse(template) if name}


def _fill(template: str, values: dict, mode: PromptMode) -> str:
    needed = _fields(template) - {"label"}
    missing = sorted(f for f in needed if not str(values.get(f) or "").strip())
    if missing:
        raise PromptError(f"{mode.value} needs metadata field(s) {', '.join(missing)}")
    return template.format(**{k: str(v).strip() for k, v in values.items() if v is not None})


def build_prompt(mode, label, metadata=None, templates: PromptTemplates = PromptTemplates()) -> PromptBundle:
    mode, label = PromptMode(mode), Label(label)
    metadata = dict(metadata or {})
    if mode in (PromptMode.CLIP_LABEL, PromptMode.BLIP_BINARY_CAPTION):
        return PromptBundle(mode, None, LABEL_TEXT[label], label)
    if mode is PromptMode.BLIP_COMPLETE_CAPTION:
        text = _fill(templates.complete_caption, {**metadata, "label": LABEL_TEXT[label]}, mode)
        return PromptBundle(mode, None, text, label)
    question = _fill(templates.vqa_question, metadata, mode)
    return PromptBundle(mode, question, ANSWER_TEXT[label], label)


def candidate_bundles(mode, metadata=None, templates: PromptTemplates = PromptTemplates()):
    """``(negative, positive)`` bundles sharing the same question/metadata."""
    return (
        build_prompt(mode, Label.HARD_NEGATIVE, metadata, templates),
        build_prompt(mode, Label.MITOTIC, metadata, templates),
    )


def _norm(text: str) -> str:
    return " ".join(text.strip().casefold().split())


_WORD_LABEL = {"mitotic": Label.MITOTIC, "nonmitotic": Label.HARD_NEGATIVE}
_ANSWER_LABEL = {"yes": Label.MITOTIC, "no": Label.HARD_NEGATIVE}


def parse_prediction(mode, generated_text: str) -> tuple[Label, bool]:
    """Map generated text to a label; unparseable text gives ``(HARD_NEGATIVE, False)``."""
    mode = PromptMode(mode)
    text = _norm(generated_text or "")
    if mode is PromptMode.BLIP_VQA:
        head = text.split(" ", 1)[0].strip(string.punctuation) if text else ""
        lab = _ANSWER_LABEL.get(head)
    else:
        lab = _WORD_LABEL.get(text.split(",", 1)[0].strip())
    if lab is None:
        return Label.HARD_NEGATIVE, False
    return lab, True


def caption_fields(text: str) -> list[str]:
    return [_norm(f) for f in text.split(",")]


def caption_exact_match(generated: str, target: str) -> bool:
    return generated.strip().casefold() == target.strip().casefold()


def caption_field_matches(generated: str, target: str) -> list[bool]:
    """Per-field agreement, padded to the target's field count."""
    g, t = caption_fields(generated), caption_fields(target)
    return [i < len(g) and g[i] == f for i, f in enumerate(t)]
