"""Keyword segmentation of raw knowledge text and knowledge-base persistence.

Raw pages arrive as plain text (one document per file plus a metadata
sidecar, or a combined JSON array). Header phrases are matched only at
line starts, either as a whole heading line ("Control methods") or as an
inline "phrase: content" prefix, so mid-sentence mentions of "symptoms"
never split a section. Text before the first header lands in ``other``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from .corpus_model import (
    SECTION_KEYS,
    KnowledgeRecord,
    dumps_bytes,
    loads_bytes,
)
from .errors import ParseError, ValidationError

DEFAULT_KEYWORDS: dict[str, tuple[str, ...]] = {
    "symptoms": ("symptoms", "symptom", "damage symptoms"),
    "pathogen": ("pathogen", "pathogens", "causal agent", "morphology"),
    "transmission": ("transmission", "transmission conditions", "transmission routes", "spread"),
    "control": ("control", "control methods", "prevention and control", "prevention"),
}


@dataclass(frozen=True)
class RawKnowledgeDoc:
    name: str
    kind: str
    crop: str
    body: str
    provenance: str = ""

    def validate(self) -> None:
        if not self.body:
            raise ValidationError(f"raw document {self.name!r}: body is empty")


@dataclass(frozen=True)
class KeywordTable:
    """Section key -> header phrases, matched case-insensitively at line starts."""

    phrases: dict[str, tuple[str, ...]] = field(
        default_factory=lambda: dict(DEFAULT_KEYWORDS)
    )

    def validate(self) -> None:
        seen: dict[str, str] = {}
        for key, plist in self.phrases.items():
            if key not in SECTION_KEYS:
                raise ValidationError(f"keyword table: unknown section key {key!r}")
            if not plist:
                raise ValidationError(f"keyword table: section {key!r} has no phrases")
            for phrase in plist:
                low = phrase.lower().strip()
                if not low:
                    raise ValidationError(f"keyword table: empty phrase under {key!r}")
                if low in seen and seen[low] != key:
                    raise ValidationError(
                        f"keyword table: phrase {low!r} appears under both "
                        f"{seen[low]!r} and {key!r}"
                    )
                seen[low] = key

    def ordered_phrases(self) -> list[tuple[str, str]]:
        """(phrase, section) pairs, longest phrase first.

        Longest-first matching makes segmentation independent of the order
        phrases are listed in the table.
        """
        pairs = [
            (phrase.lower().strip(), key)
            for key, plist in self.phrases.items()
            for phrase in plist
        ]
        return sorted(pairs, key=lambda p: (-len(p[0]), p[0]))


def _match_header(line: str, pairs: list[tuple[str, str]]) -> tuple[str, str] | None:
    """Return (section, inline_content) when the line is a header line."""
    stripped = line.strip()
    low = stripped.lower()
    for phrase, section in pairs:
        if low == phrase:
            return section, ""
        if low.startswith(phrase):
            rest = stripped[len(phrase):]
            lstripped = rest.lstrip()
            if lstripped.startswith(":") or lstripped.startswith("："):
                return section, lstripped[1:].strip()
    return None


def segment_knowledge(doc: RawKnowledgeDoc, table: KeywordTable | None = None,
                      strict: bool = False) -> KnowledgeRecord:
    """Partition a raw document into sections at matched header phrases.

    Text between a header and the next header belongs to that header's
    section, header stripped; text before any header goes to ``other``.
    Repeated headers concatenate in order with a blank-line separator.
    Lenient mode is total (a headerless body lands whole in ``other``);
    under ``strict``, a document with zero matched headers is rejected as
    unsegmentable.
    """
    doc.validate()
    table = table or KeywordTable()
    table.validate()
    pairs = table.ordered_phrases()

    chunks: dict[str, list[str]] = {key: [] for key in SECTION_KEYS}
    current = "other"
    matched_any = False
    for raw_line in doc.body.splitlines():
        hit = _match_header(raw_line, pairs)
        if hit is not None:
            section, inline = hit
            matched_any = True
            if chunks[section] and chunks[section][-1] != "":
                chunks[section].append("")
            current = section
            if inline:
                chunks[section].append(inline)
        else:
            chunks[current].append(raw_line)

    sections = {key: "\n".join(lines).strip() for key, lines in chunks.items()}
    if strict and not matched_any:
        raise ParseError(f"unsegmentable document {doc.name!r}: no header matched")

    return KnowledgeRecord(
        name=doc.name,
        kind=doc.kind,
        crop=doc.crop,
        sections=sections,
        provenance=doc.provenance,
    )


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def knowledge_element(record: KnowledgeRecord) -> dict:
    return {
        "name": record.name,
        "kind": record.kind,
        "crop": record.crop,
        "sections": {key: record.sections.get(key, "") for key in SECTION_KEYS},
        "provenance": record.provenance,
    }


def knowledge_payload(record: KnowledgeRecord) -> str:
    """Canonical single-record JSON, embedded verbatim in teacher prompts."""
    return json.dumps(knowledge_element(record), ensure_ascii=False, indent=2)


def store_knowledge(records: Iterable[KnowledgeRecord]) -> bytes:
    records = list(records)
    seen: dict[tuple[str, str], int] = {}
    for i, record in enumerate(records):
        problems = record.violations()
        if problems:
            raise ValidationError(f"record {i} ({record.name!r}): " + "; ".join(problems))
        key = (record.name.casefold(), record.crop.casefold())
        if key in seen:
            raise ValidationError(
                f"records {seen[key]} and {i} share (name, crop) = "
                f"({record.name!r}, {record.crop!r})"
            )
        seen[key] = i
    return dumps_bytes([knowledge_element(r) for r in records])


def load_knowledge(data: bytes | str) -> list[KnowledgeRecord]:
    payload = loads_bytes(data)
    if not isinstance(payload, list):
        raise ParseError("knowledge file must be a JSON array")
    records = []
    for i, element in enumerate(payload):
        if not isinstance(element, dict):
            raise ParseError(f"record {i}: expected an object")
        for key in ("name", "kind", "crop", "sections", "provenance"):
            if key not in element:
                raise ParseError(f"record {i}: missing field {key!r}")
        for key in ("name", "kind", "crop", "provenance"):
            if not isinstance(element[key], str):
                raise ParseError(f"record {i}: field {key!r} must be a string")
        if not isinstance(element["sections"], dict):
            raise ParseError(f"record {i}: sections must be an object")
        for key, value in element["sections"].items():
            if not isinstance(value, str):
                raise ParseError(f"record {i}: section {key!r} must be a string")
        record = KnowledgeRecord(
            name=element["name"],
            kind=element["kind"],
            crop=element["crop"],
            sections={k: v for k, v in element["sections"].items()},
            provenance=element["provenance"],
        )
        problems = record.violations()
        if problems:
            raise ParseError(f"record {i}: " + "; ".join(problems))
        records.append(record)
    seen: dict[tuple[str, str], int] = {}
    for i, record in enumerate(records):
        key = (record.name.casefold(), record.crop.casefold())
        if key in seen:
            raise ParseError(
                f"records {seen[key]} and {i} share (name, crop) = "
                f"({record.name!r}, {record.crop!r})"
            )
        seen[key] = i
    return records


def load_raw_docs(path) -> list[RawKnowledgeDoc]:
    """Load raw documents from a JSON array file or a directory.

    Directory layout: one ``<stem>.txt`` body per document with a
    ``<stem>.json`` sidecar carrying name/kind/crop/provenance.
    """
    path = Path(path)
    docs = []
    if path.is_dir():
        for body_path in sorted(path.glob("*.txt")):
            sidecar = body_path.with_suffix(".json")
            if not sidecar.exists():
                raise ParseError(f"{body_path.name}: missing metadata sidecar {sidecar.name}")
            meta = loads_bytes(sidecar.read_bytes())
            for key in ("name", "kind", "crop"):
                if key not in meta:
                    raise ParseError(f"{sidecar.name}: missing field {key!r}")
            docs.append(
                RawKnowledgeDoc(
                    name=meta["name"],
                    kind=meta["kind"],
                    crop=meta["crop"],
                    body=body_path.read_text(encoding="utf-8"),
                    provenance=meta.get("provenance", str(body_path.name)),
                )
            )
        return docs
    payload = loads_bytes(path.read_bytes())
    if not isinstance(payload, list):
        raise ParseError("raw knowledge file must be a JSON array")
    for i, element in enumerate(payload):
        for key in ("name", "kind", "crop", "body"):
            if key not in element:
                raise ParseError(f"raw document {i}: missing field {key!r}")
        docs.append(
            RawKnowledgeDoc(
                name=element["name"],
                kind=element["kind"],
                crop=element["crop"],
                body=element["body"],
                provenance=element.get("provenance", ""),
            )
        )
    return docs


def load_keyword_table(path) -> KeywordTable:
    payload = loads_bytes(Path(path).read_bytes())
    if not isinstance(payload, dict):
        raise ParseError("keyword file must be a JSON object of section -> phrases")
    table = KeywordTable(phrases={k: tuple(v) for k, v in payload.items()})
    table.validate()
    return table
