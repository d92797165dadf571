"""Two-round feature-alignment sample generation.

Each image yields a fixed four-turn conversation: a describe question (image
slot attached), a brief symptom description, an identify question, and the
category name followed by the full symptom text. Question choice is a pure
function of (seed, file_name), so regeneration is reproducible per image and
independent of processing order. Answers are composed only from the knowledge
record, so the strict grounding check scores them 1.0 by construction.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

from .corpus_model import (
    IMAGE_TOKEN,
    ConversationSample,
    ConversationTurn,
    ImageRef,
    KnowledgeRecord,
    loads_bytes,
)
from .errors import ParseError, ValidationError

DEFAULT_STOP_TOKEN = "###"

DEFAULT_DESCRIBE_POOL = (
    "Can you briefly describe what is shown in the image?",
    "Give a short description of the condition visible in the image.",
    "What signs of trouble can you see in this image?",
    "Please describe the notable features in the image.",
    "Summarize what the image shows about the plant's condition.",
    "What stands out in this image of the crop?",
    "Offer a quick description of the symptoms in the image.",
    "Describe the visible damage in the image.",
)

DEFAULT_IDENTIFY_POOL = (
    "Which pest or disease is this, and what are its detailed symptoms?",
    "Identify the category shown and describe its symptoms in detail.",
    "What is the name of this condition, and how does it present?",
    "Name the pest or disease and give a full account of its symptoms.",
    "What category does this belong to, and what are the detailed signs?",
    "Classify this condition and describe its symptoms thoroughly.",
    "What pest or disease is affecting the crop, and what symptoms does it cause?",
    "State the exact category and detail the symptoms it produces.",
)

_WORD_IMAGE_RE = re.compile(r"(?<!\w)image(?!\w)", re.IGNORECASE)
_SENTENCE_SPLIT_RE = re.compile(r"(?<=[.!?])\s+")


@dataclass(frozen=True)
class TemplatePool:
    describe_pool: tuple[str, ...] = DEFAULT_DESCRIBE_POOL
    identify_pool: tuple[str, ...] = DEFAULT_IDENTIFY_POOL
    stop_token: str = DEFAULT_STOP_TOKEN

    def violations(self) -> list[str]:
        out = []
        if not self.describe_pool:
            out.append("describe_pool is empty")
        if not self.identify_pool:
            out.append("identify_pool is empty")
        for label, pool in (("describe_pool", self.describe_pool),
                            ("identify_pool", self.identify_pool)):
            if len(set(pool)) != len(pool):
                out.append(f"{label} contains duplicates")
        for template in self.describe_pool:
            if not _WORD_IMAGE_RE.search(template):
                out.append(f"describe template lacks the word 'image': {template!r}")
        if not self.stop_token:
            out.append("stop_token is empty")
        else:
            for template in self.describe_pool + self.identify_pool:
                if self.stop_token in template:
                    out.append(f"stop_token {self.stop_token!r} appears in template {template!r}")
        return out

    def validate(self) -> None:
        problems = self.violations()
        if problems:
            raise ValidationError("template pool: " + "; ".join(problems))


def load_template_pool(path) -> TemplatePool:
    payload = loads_bytes(Path(path).read_bytes())
    if not isinstance(payload, dict):
        raise ParseError("template file must be a JSON object")
    for key in ("describe_pool", "identify_pool"):
        if key not in payload:
            raise ParseError(f"template file: missing field {key!r}")
    pool = TemplatePool(
        describe_pool=tuple(payload["describe_pool"]),
        identify_pool=tuple(payload["identify_pool"]),
        stop_token=payload.get("stop_token", DEFAULT_STOP_TOKEN),
    )
    pool.validate()
    return pool


@dataclass(frozen=True)
class AlignConfig:
    """Knobs for answer composition.

    answer_sentence_limit bounds the brief first answer; category_separator
    is the only connective text the generator may add around the record
    name, so grounding stays exact.
    """

    answer_sentence_limit: int = 2
    category_separator: str = ". "


DEFAULT_ALIGN_CONFIG = AlignConfig()


def split_sentences(text: str) -> list[str]:
    return [part for part in _SENTENCE_SPLIT_RE.split(text.strip()) if part]


def first_sentences(text: str, limit: int) -> str:
    return " ".join(split_sentences(text)[:max(limit, 1)])


def _pick(seed: int, file_name: str, role: str, pool: tuple[str, ...]) -> str:
    payload = f"{seed}|{file_name}|{role}".encode("utf-8")
    digest = hashlib.sha256(payload).digest()
    return pool[int.from_bytes(digest[:8], "big") % len(pool)]


@dataclass(frozen=True)
class AnswerPlan:
    answer_q1: str
    answer_q2: str


def plan_answers(record: KnowledgeRecord, config: AlignConfig = DEFAULT_ALIGN_CONFIG) -> AnswerPlan:
    symptoms = record.section("symptoms").strip()
    if not symptoms:
        raise ValidationError(f"knowledge record {record.name!r} has an empty symptoms section")
    return AnswerPlan(
        answer_q1=first_sentences(symptoms, config.answer_sentence_limit),
        answer_q2=f"{record.name}{config.category_separator}{symptoms}",
    )


def generate_alignment_sample(image: ImageRef, record: KnowledgeRecord,
                              pool: TemplatePool, seed: int,
                              config: AlignConfig = DEFAULT_ALIGN_CONFIG) -> ConversationSample:
    """Build one four-turn alignment sample, reproducibly."""
    pool.validate()
    image.validate()
    if image.ailment_name.casefold() != record.name.casefold():
        raise ValidationError(
            f"image ailment {image.ailment_name!r} does not match knowledge record {record.name!r}"
        )
    plan = plan_answers(record, config)
    q1 = _pick(seed, image.file_name, "describe", pool.describe_pool)
    q2 = _pick(seed, image.file_name, "identify", pool.identify_pool)
    return ConversationSample(
        image=image,
        turns=(
            ConversationTurn("human", q1, has_image_slot=True),
            ConversationTurn("assistant", plan.answer_q1),
            ConversationTurn("human", q2),
            ConversationTurn("assistant", plan.answer_q2),
        ),
        origin="alignment",
    )


def render_training_text(sample: ConversationSample, stop_token: str = DEFAULT_STOP_TOKEN) -> str:
    """Render the flat training-text form with exactly four stop tokens."""
    if sample.origin != "alignment":
        raise ValidationError(f"render_training_text expects an alignment sample, got {sample.origin!r}")
    sample.validate()
    if not stop_token:
        raise ValidationError("stop_token is empty")
    for i, turn in enumerate(sample.turns):
        if stop_token in turn.text:
            raise ValidationError(f"stop_token {stop_token!r} occurs inside turn {i}")
    q1, a1, q2, a2 = (t.text for t in sample.turns)
    return (
        f"Human:{q1},{IMAGE_TOKEN}{stop_token}"
        f"Assistant:{a1}{stop_token}"
        f"Human:{q2}{stop_token}"
        f"Assistant:{a2}{stop_token}"
    )


def generate_alignment_corpus(images: Iterable[ImageRef],
                              records: Iterable[KnowledgeRecord],
                              pool: TemplatePool, seed: int,
                              config: AlignConfig = DEFAULT_ALIGN_CONFIG,
                              ) -> tuple[list[ConversationSample], list[tuple[str, str]]]:
    """Generate samples for every image with usable knowledge.

    Returns (samples, skipped) where skipped pairs each passed-over
    file_name with the reason (healthy image, missing record, empty
    symptoms). Output order follows input order.
    """
    by_key: dict[tuple[str, str], KnowledgeRecord] = {}
    by_name: dict[str, list[KnowledgeRecord]] = {}
    for record in records:
        by_key[(record.name.casefold(), record.crop.casefold())] = record
        by_name.setdefault(record.name.casefold(), []).append(record)

    samples: list[ConversationSample] = []
    skipped: list[tuple[str, str]] = []
    for image in images:
        if image.ailment_kind == "healthy":
            skipped.append((image.file_name, "healthy image has no knowledge record"))
            continue
        record = by_key.get((image.ailment_name.casefold(), image.crop.casefold()))
        if record is None:
            candidates = by_name.get(image.ailment_name.casefold(), [])
            record = candidates[0] if len(candidates) == 1 else None
        if record is None:
            skipped.append((image.file_name, "no knowledge record"))
            continue
        if not record.section("symptoms").strip():
            skipped.append((image.file_name, "knowledge record has empty symptoms"))
            continue
        samples.append(generate_alignment_sample(image, record, pool, seed, config))
    return samples, skipped


def template_pool_to_json(pool: TemplatePool) -> dict:
    return {
        "describe_pool": list(pool.describe_pool),
        "identify_pool": list(pool.identify_pool),
        "stop_token": pool.stop_token,
    }
