"""Shared domain types and their canonical serialized forms.

Every persisted artifact (alignment/instruction corpora, VQA benches,
manifests, knowledge bases) flows through the dataclasses here, so field
names and byte-level layout are defined once. Serializers are pure
functions: equal inputs produce byte-equal outputs on every run and
platform (UTF-8, fixed key order, no locale-dependent formatting).

Conventions:
    - Types are plain frozen dataclasses. Construction never validates;
      ``violations()`` returns rule names and ``validate()`` raises, so
      invalid fixtures can be built in tests and rejected at the
      serialization boundary with a named rule.
    - Corpus JSON stores an image only by its canonical file name (two
      fields per conversation element, six per VQA element). Deserializers
      accept an optional file_name -> ImageRef index (normally built from
      a manifest) to restore full refs; without one, refs are
      reconstructed from the name itself.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping

from .errors import ParseError, ValidationError

AILMENT_KINDS = ("disease", "pest", "healthy")
KNOWLEDGE_KINDS = ("disease", "pest")
ORIGINS = ("alignment", "instruction", "bench_chatbot")
ANSWER_TYPES = ("open", "closed")
THEMES = (
    "damaged_organs",
    "abnormal_symptoms",
    "attributes",
    "hazards",
    "nomenclature",
    "causes",
    "prevention_control",
    "transmission",
    "other_relevant",
)
SECTION_KEYS = ("symptoms", "pathogen", "transmission", "control", "other")

IMAGE_TOKEN = "<image>"
_IMAGE_PREFIX = IMAGE_TOKEN + "\n"

SPEAKER_TO_TAG = {"human": "human", "assistant": "gpt"}
TAG_TO_SPEAKER = {"human": "human", "gpt": "assistant", "assistant": "assistant"}

_HEX_DIGEST_RE = re.compile(r"^[0-9a-f]{64}$")


# ---------------------------------------------------------------------------
# Canonical image naming
# ---------------------------------------------------------------------------

def normalize_component(part: str) -> str:
    """Lowercase and collapse internal whitespace runs to single spaces."""
    return " ".join(part.split()).lower()


def canonical_name(crop: str, ailment: str, ordinal: int) -> str:
    """Build the canonical image file name "<crop>_<ailment>_<ordinal>.jpg".

    Components are lowercased with internal whitespace preserved as single
    spaces. Raises ValidationError for empty components, embedded
    underscores, or a non-positive ordinal.
    """
    crop_n = normalize_component(crop)
    ailment_n = normalize_component(ailment)
    if not crop_n:
        raise ValidationError("canonical_name: crop is empty")
    if not ailment_n:
        raise ValidationError("canonical_name: ailment is empty")
    if "_" in crop_n or "_" in ailment_n:
        raise ValidationError(
            f"canonical_name: underscore not allowed in components: {crop_n!r}, {ailment_n!r}"
        )
    if not isinstance(ordinal, int) or isinstance(ordinal, bool) or ordinal <= 0:
        raise ValidationError(f"canonical_name: ordinal must be a positive integer, got {ordinal!r}")
    return f"{crop_n}_{ailment_n}_{ordinal}.jpg"


def parse_canonical_name(file_name: str) -> tuple[str, str, int]:
    """Invert canonical_name; raises ParseError for anything off-grammar."""
    if not file_name.endswith(".jpg"):
        raise ParseError(f"file name {file_name!r} does not end with .jpg")
    stem = file_name[: -len(".jpg")]
    parts = stem.split("_")
    if len(parts) != 3:
        raise ParseError(f"file name {file_name!r} is not <crop>_<ailment>_<n>.jpg")
    crop, ailment, tail = parts
    for label, part in (("crop", crop), ("ailment", ailment)):
        if not part or part != normalize_component(part):
            raise ParseError(f"file name {file_name!r}: {label} component {part!r} is not normalized")
    if not tail.isdigit() or tail != str(int(tail)) or int(tail) <= 0:
        raise ParseError(f"file name {file_name!r}: ordinal {tail!r} is not a positive integer")
    return crop, ailment, int(tail)


def is_canonical_name(file_name: str) -> bool:
    try:
        parse_canonical_name(file_name)
    except ParseError:
        return False
    return True


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ImageRef:
    """One image, identified by canonical file name and content hash."""

    file_name: str
    crop: str
    ailment_name: str
    ailment_kind: str
    content_hash: str

    @classmethod
    def build(cls, crop: str, ailment_name: str, ailment_kind: str, ordinal: int,
              content_hash: str) -> "ImageRef":
        crop_n = normalize_component(crop)
        ailment_n = normalize_component(ailment_name)
        return cls(
            file_name=canonical_name(crop, ailment_name, ordinal),
            crop=crop_n,
            ailment_name=ailment_n,
            ailment_kind=ailment_kind,
            content_hash=content_hash,
        )

    @classmethod
    def from_file_name(cls, file_name: str, ailment_kind: str | None = None,
                       content_hash: str | None = None) -> "ImageRef":
        """Reconstruct a ref from the canonical name alone.

        Used when a corpus file is loaded without its manifest. The kind is
        inferred ("healthy" for the healthy label, otherwise "disease" as a
        neutral default) and the hash falls back to a name-derived
        placeholder; supply a manifest index wherever the real values
        matter.
        """
        crop, ailment, _ = parse_canonical_name(file_name)
        if ailment_kind is None:
            ailment_kind = "healthy" if ailment == "healthy" else "disease"
        if content_hash is None:
            content_hash = hashlib.sha256(b"file-name:" + file_name.encode("utf-8")).hexdigest()
        return cls(file_name, crop, ailment, ailment_kind, content_hash)

    def violations(self) -> list[str]:
        out = []
        try:
            crop, ailment, _ = parse_canonical_name(self.file_name)
        except ParseError as exc:
            out.append(f"file_name: {exc}")
        else:
            if crop != self.crop:
                out.append(f"crop {self.crop!r} disagrees with file_name component {crop!r}")
            if ailment != self.ailment_name:
                out.append(
                    f"ailment_name {self.ailment_name!r} disagrees with file_name component {ailment!r}"
                )
        if self.ailment_kind not in AILMENT_KINDS:
            out.append(f"ailment_kind {self.ailment_kind!r} not in {AILMENT_KINDS}")
        if self.ailment_kind == "healthy" and self.ailment_name != "healthy":
            out.append('ailment_kind "healthy" requires ailment_name "healthy"')
        if not _HEX_DIGEST_RE.match(self.content_hash):
            out.append(f"content_hash {self.content_hash!r} is not a 64-char lowercase hex digest")
        return out

    def validate(self) -> None:
        problems = self.violations()
        if problems:
            raise ValidationError(f"image {self.file_name!r}: " + "; ".join(problems))


@dataclass(frozen=True)
class KnowledgeRecord:
    """One pest or disease entry with keyword-segmented sections."""

    name: str
    kind: str
    crop: str
    sections: dict[str, str] = field(default_factory=dict)
    provenance: str = ""

    def section(self, key: str) -> str:
        return self.sections.get(key, "")

    def all_text(self) -> str:
        """All section texts joined in canonical key order."""
        return "\n".join(self.sections.get(k, "") for k in SECTION_KEYS if self.sections.get(k, ""))

    def violations(self) -> list[str]:
        out = []
        if not self.name:
            out.append("name is empty")
        if self.kind not in KNOWLEDGE_KINDS:
            out.append(f"kind {self.kind!r} not in {KNOWLEDGE_KINDS}")
        unknown = sorted(set(self.sections) - set(SECTION_KEYS))
        if unknown:
            out.append(f"unknown section keys {unknown}")
        if not any(self.sections.get(k, "") for k in SECTION_KEYS):
            out.append("all sections are empty")
        for key in SECTION_KEYS:
            text = self.sections.get(key, "")
            if text != text.strip():
                out.append(f"section {key!r} has leading/trailing whitespace")
        return out

    def validate(self) -> None:
        problems = self.violations()
        if problems:
            raise ValidationError(f"knowledge record {self.name!r}: " + "; ".join(problems))


@dataclass(frozen=True)
class ConversationTurn:
    speaker: str
    text: str
    has_image_slot: bool = False

    def violations(self) -> list[str]:
        out = []
        if self.speaker not in SPEAKER_TO_TAG:
            out.append(f"speaker {self.speaker!r} not in {tuple(SPEAKER_TO_TAG)}")
        if not self.text:
            out.append("text is empty")
        if IMAGE_TOKEN in self.text:
            out.append(f"text contains the reserved token {IMAGE_TOKEN!r}")
        if self.has_image_slot and self.speaker != "human":
            out.append("image slot on a non-human turn")
        return out


@dataclass(frozen=True)
class ConversationSample:
    """Ordered human/assistant turns bound to one image reference."""

    image: ImageRef
    turns: tuple[ConversationTurn, ...]
    origin: str

    def __post_init__(self):
        object.__setattr__(self, "turns", tuple(self.turns))

    @property
    def rounds(self) -> int:
        return len(self.turns) // 2

    def violations(self) -> list[str]:
        out = [f"image: {v}" for v in self.image.violations()]
        if self.origin not in ORIGINS:
            out.append(f"origin {self.origin!r} not in {ORIGINS}")
        if not self.turns:
            out.append("no turns")
            return out
        for i, turn in enumerate(self.turns):
            for v in turn.violations():
                out.append(f"turn {i}: {v}")
            expected = "human" if i % 2 == 0 else "assistant"
            if turn.speaker in SPEAKER_TO_TAG and turn.speaker != expected:
                out.append(f"turn {i}: expected {expected}, got {turn.speaker} (alternation)")
        if len(self.turns) % 2 != 0:
            out.append("dangling human turn without an assistant reply")
        slots = [i for i, t in enumerate(self.turns) if t.has_image_slot]
        if slots != [0]:
            out.append(f"image slot must sit on the first turn only, found at {slots}")
        if self.origin == "alignment" and len(self.turns) != 4:
            out.append(f"alignment samples need exactly 4 turns, got {len(self.turns)}")
        return out

    def validate(self) -> None:
        problems = self.violations()
        if problems:
            raise ValidationError(f"sample {self.image.file_name!r}: " + "; ".join(problems))


@dataclass(frozen=True)
class VQAItem:
    """One benchmark question with open/closed label, theme, and gold answer."""

    image: ImageRef
    question: str
    gold_answer: str
    answer_type: str
    theme: str
    item_id: str

    def violations(self) -> list[str]:
        from .textnorm import normalize_closed

        out = [f"image: {v}" for v in self.image.violations()]
        if not self.question:
            out.append("question is empty")
        if not self.gold_answer:
            out.append("gold_answer is empty")
        if not self.item_id:
            out.append("item_id is empty")
        if self.answer_type not in ANSWER_TYPES:
            out.append(f"answer_type {self.answer_type!r} not in {ANSWER_TYPES}")
        if self.theme not in THEMES:
            out.append(f"theme {self.theme!r} not one of the 9 themes")
        if self.answer_type == "closed" and normalize_closed(self.gold_answer) is None:
            out.append(f"closed gold_answer {self.gold_answer!r} does not normalize to yes/no")
        return out

    def validate(self) -> None:
        problems = self.violations()
        if problems:
            raise ValidationError(f"vqa item {self.item_id!r}: " + "; ".join(problems))


# ---------------------------------------------------------------------------
# Canonical JSON emission
# ---------------------------------------------------------------------------

def dumps_bytes(value) -> bytes:
    """Serialize a JSON value with the canonical layout (2-space indent, UTF-8)."""
    return json.dumps(value, ensure_ascii=False, indent=2).encode("utf-8")


def loads_bytes(data: bytes | str):
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    try:
        return json.loads(data)
    except json.JSONDecodeError as exc:
        raise ParseError(f"malformed JSON: {exc}") from exc


def write_artifact(path, payload: bytes) -> None:
    """Write an artifact file, guaranteeing a single trailing newline."""
    from pathlib import Path

    data = payload if payload.endswith(b"\n") else payload + b"\n"
    Path(path).write_bytes(data)


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


# ---------------------------------------------------------------------------
# Conversation corpus serialization
# ---------------------------------------------------------------------------

def sample_to_element(sample: ConversationSample) -> dict:
    conversations = []
    for turn in sample.turns:
        value = turn.text
        if turn.has_image_slot:
            value = _IMAGE_PREFIX + value
        conversations.append({"from": SPEAKER_TO_TAG[turn.speaker], "value": value})
    return {"image": sample.image.file_name, "conversations": conversations}


def serialize_samples(samples: Iterable[ConversationSample]) -> bytes:
    """Emit the two-field corpus JSON array, byte-deterministically.

    Every sample is validated first; the error names the offending sample
    and the violated rule.
    """
    elements = []
    for i, sample in enumerate(samples):
        problems = sample.violations()
        if problems:
            raise ValidationError(
                f"sample {i} ({sample.image.file_name!r}): " + "; ".join(problems)
            )
        elements.append(sample_to_element(sample))
    return dumps_bytes(elements)


def _element_to_sample(index: int, element, origin: str,
                       images: Mapping[str, ImageRef] | None) -> ConversationSample:
    if not isinstance(element, dict):
        raise ParseError(f"element {index}: expected an object, got {type(element).__name__}")
    extra = sorted(set(element) - {"image", "conversations"})
    if extra:
        raise ParseError(f"element {index}: unexpected fields {extra}")
    for key in ("image", "conversations"):
        if key not in element:
            raise ParseError(f"element {index}: missing field {key!r}")
    file_name = element["image"]
    if not isinstance(file_name, str):
        raise ParseError(f"element {index}: field 'image' must be a string")
    conversations = element["conversations"]
    if not isinstance(conversations, list) or not conversations:
        raise ParseError(f"element {index}: field 'conversations' must be a non-empty list")

    turns = []
    slot_positions = []
    for j, turn_obj in enumerate(conversations):
        if not isinstance(turn_obj, dict) or set(turn_obj) != {"from", "value"}:
            raise ParseError(f"element {index}: conversation turn {j} must have fields from/value")
        tag, value = turn_obj["from"], turn_obj["value"]
        if tag not in TAG_TO_SPEAKER:
            raise ParseError(f"element {index}: turn {j} has unknown speaker tag {tag!r}")
        if not isinstance(value, str):
            raise ParseError(f"element {index}: turn {j} value must be a string")
        speaker = TAG_TO_SPEAKER[tag]
        has_slot = value.startswith(_IMAGE_PREFIX)
        if has_slot:
            value = value[len(_IMAGE_PREFIX):]
            slot_positions.append(j)
        expected = "human" if j % 2 == 0 else "assistant"
        if speaker != expected:
            raise ParseError(
                f"element {index}: turn {j} breaks alternation (expected {expected}, got {tag!r})"
            )
        turns.append(ConversationTurn(speaker=speaker, text=value, has_image_slot=has_slot))
    if len(slot_positions) > 1:
        raise ParseError(f"element {index}: multiple image slots at turns {slot_positions}")

    if images is not None and file_name in images:
        image = images[file_name]
    else:
        try:
            image = ImageRef.from_file_name(file_name)
        except ParseError as exc:
            raise ParseError(f"element {index}: {exc}") from exc
    sample = ConversationSample(image=image, turns=tuple(turns), origin=origin)
    problems = sample.violations()
    if problems:
        raise ParseError(f"element {index}: " + "; ".join(problems))
    return sample


def deserialize_samples(data: bytes | str, origin: str = "instruction",
                        images: Mapping[str, ImageRef] | None = None
                        ) -> list[ConversationSample]:
    """Parse a corpus file back into samples, validating every invariant.

    ``origin`` tags the loaded samples (a corpus file is homogeneous per
    pipeline stage); ``images`` restores full refs from a manifest index.
    """
    if origin not in ORIGINS:
        raise ValidationError(f"origin {origin!r} not in {ORIGINS}")
    payload = loads_bytes(data)
    if not isinstance(payload, list):
        raise ParseError("corpus file must be a JSON array")
    return [_element_to_sample(i, el, origin, images) for i, el in enumerate(payload)]


# ---------------------------------------------------------------------------
# VQA serialization (six fields per element)
# ---------------------------------------------------------------------------

_VQA_FIELDS = ("image", "question", "answer", "answer_type", "theme", "item_id")


def vqa_to_element(item: VQAItem) -> dict:
    return {
        "image": item.image.file_name,
        "question": item.question,
        "answer": item.gold_answer,
        "answer_type": item.answer_type,
        "theme": item.theme,
        "item_id": item.item_id,
    }


def serialize_vqa(items: Iterable[VQAItem]) -> bytes:
    elements = []
    for i, item in enumerate(items):
        problems = item.violations()
        if problems:
            raise ValidationError(f"vqa item {i} ({item.item_id!r}): " + "; ".join(problems))
        elements.append(vqa_to_element(item))
    return dumps_bytes(elements)


def deserialize_vqa(data: bytes | str,
                    images: Mapping[str, ImageRef] | None = None) -> list[VQAItem]:
    payload = loads_bytes(data)
    if not isinstance(payload, list):
        raise ParseError("vqa file must be a JSON array")
    items = []
    for i, element in enumerate(payload):
        if not isinstance(element, dict):
            raise ParseError(f"element {i}: expected an object")
        extra = sorted(set(element) - set(_VQA_FIELDS))
        if extra:
            raise ParseError(f"element {i}: unexpected fields {extra}")
        for key in _VQA_FIELDS:
            if key not in element:
                raise ParseError(f"element {i}: missing field {key!r}")
            if not isinstance(element[key], str):
                raise ParseError(f"element {i}: field {key!r} must be a string")
        file_name = element["image"]
        if images is not None and file_name in images:
            image = images[file_name]
        else:
            try:
                image = ImageRef.from_file_name(file_name)
            except ParseError as exc:
                raise ParseError(f"element {i}: {exc}") from exc
        item = VQAItem(
            image=image,
            question=element["question"],
            gold_answer=element["answer"],
            answer_type=element["answer_type"],
            theme=element["theme"],
            item_id=element["item_id"],
        )
        problems = item.violations()
        if problems:
            raise ParseError(f"element {i}: " + "; ".join(problems))
        items.append(item)
    return items


def image_index(refs: Iterable[ImageRef]) -> dict[str, ImageRef]:
    """Build the file_name -> ImageRef lookup deserializers accept."""
    return {ref.file_name: ref for ref in refs}
