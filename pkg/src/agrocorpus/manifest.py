"""Image manifest management: naming, validation, hash dedup, split records.

The manifest is the authority on image metadata. It never touches pixels;
content hashes either arrive from upstream or come from ``sha256_file``
applied to the image bytes.
"""

from __future__ import annotations

import hashlib
from collections import defaultdict
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable

from .corpus_model import (
    ImageRef,
    canonical_name,
    dumps_bytes,
    is_canonical_name,
    loads_bytes,
    parse_canonical_name,
)
from .errors import ParseError, ValidationError

__all__ = [
    "ManifestEntry",
    "canonical_name",
    "parse_canonical_name",
    "is_canonical_name",
    "active_entries",
    "validate_manifest",
    "dedup",
    "store_manifest",
    "load_manifest",
    "sha256_file",
    "manifest_from_directory",
]


@dataclass(frozen=True)
class ManifestEntry:
    image: ImageRef
    source_dataset: str = ""
    split_of: str | None = None
    excluded: bool = False
    exclude_reason: str = ""

    def to_element(self) -> dict:
        return {
            "file_name": self.image.file_name,
            "crop": self.image.crop,
            "ailment_name": self.image.ailment_name,
            "ailment_kind": self.image.ailment_kind,
            "content_hash": self.image.content_hash,
            "source_dataset": self.source_dataset,
            "split_of": self.split_of,
            "excluded": self.excluded,
            "exclude_reason": self.exclude_reason,
        }

    @classmethod
    def from_element(cls, element: dict, index: int = -1) -> "ManifestEntry":
        where = f"entry {index}" if index >= 0 else "entry"
        if not isinstance(element, dict):
            raise ParseError(f"{where}: expected an object")
        required = ("file_name", "crop", "ailment_name", "ailment_kind", "content_hash")
        for key in required:
            if key not in element:
                raise ParseError(f"{where}: missing field {key!r}")
            if not isinstance(element[key], str):
                raise ParseError(f"{where}: field {key!r} must be a string")
        if element.get("split_of") is not None and not isinstance(element["split_of"], str):
            raise ParseError(f"{where}: field 'split_of' must be a string or null")
        image = ImageRef(
            file_name=element["file_name"],
            crop=element["crop"],
            ailment_name=element["ailment_name"],
            ailment_kind=element["ailment_kind"],
            content_hash=element["content_hash"],
        )
        return cls(
            image=image,
            source_dataset=element.get("source_dataset", ""),
            split_of=element.get("split_of"),
            excluded=bool(element.get("excluded", False)),
            exclude_reason=element.get("exclude_reason", ""),
        )


def active_entries(entries: Iterable[ManifestEntry]) -> list[ManifestEntry]:
    return [e for e in entries if not e.excluded]


def validate_manifest(entries: list[ManifestEntry]) -> list[str]:
    """Report violations; the empty list means the manifest is valid.

    Violations are data, not failures: naming-grammar breaks, duplicate
    hashes among non-excluded entries, and dangling split_of references.
    """
    violations: list[str] = []
    names = {e.image.file_name for e in entries}
    by_hash: dict[str, list[str]] = defaultdict(list)

    for i, entry in enumerate(entries):
        for problem in entry.image.violations():
            violations.append(f"entry {i} ({entry.image.file_name!r}): {problem}")
        if entry.split_of is not None and entry.split_of not in names:
            violations.append(
                f"entry {i} ({entry.image.file_name!r}): split_of {entry.split_of!r} "
                "names no entry in this manifest"
            )
        if not entry.excluded:
            by_hash[entry.image.content_hash].append(entry.image.file_name)

    for digest in sorted(by_hash):
        files = sorted(by_hash[digest])
        if len(files) > 1:
            violations.append(
                f"duplicate content_hash {digest[:12]}... shared by non-excluded entries {files}"
            )
    return violations


def dedup(entries: list[ManifestEntry]) -> list[ManifestEntry]:
    """Mark duplicate-hash entries excluded, keeping the lexicographically
    smallest file_name per hash class. Idempotent; already-excluded entries
    are left untouched."""
    survivors: dict[str, str] = {}
    for entry in entries:
        if entry.excluded:
            continue
        digest = entry.image.content_hash
        name = entry.image.file_name
        if digest not in survivors or name < survivors[digest]:
            survivors[digest] = name

    out = []
    for entry in entries:
        if not entry.excluded and survivors[entry.image.content_hash] != entry.image.file_name:
            entry = replace(entry, excluded=True, exclude_reason="duplicate")
        out.append(entry)
    return out


def store_manifest(entries: Iterable[ManifestEntry]) -> bytes:
    return dumps_bytes([e.to_element() for e in entries])


def load_manifest(data: bytes | str) -> list[ManifestEntry]:
    payload = loads_bytes(data)
    if not isinstance(payload, list):
        raise ParseError("manifest file must be a JSON array")
    return [ManifestEntry.from_element(el, i) for i, el in enumerate(payload)]


def sha256_file(path) -> str:
    """Hash file bytes (never decodes pixels)."""
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def manifest_from_directory(path, kinds: dict[str, str] | None = None,
                            source_dataset: str | None = None) -> list[ManifestEntry]:
    """Build a manifest from a directory of canonically named .jpg files.

    File bytes supply the content hashes; the names supply crop and
    ailment. ``kinds`` maps ailment names to disease/pest (a bare listing
    cannot tell them apart); unmatched non-healthy ailments default to
    disease.
    """
    path = Path(path)
    kinds = {k.casefold(): v for k, v in (kinds or {}).items()}
    entries = []
    for file in sorted(path.glob("*.jpg")):
        crop, ailment, _ = parse_canonical_name(file.name)
        if ailment == "healthy":
            kind = "healthy"
        else:
            kind = kinds.get(ailment.casefold(), "disease")
        entries.append(
            ManifestEntry(
                image=ImageRef(
                    file_name=file.name,
                    crop=crop,
                    ailment_name=ailment,
                    ailment_kind=kind,
                    content_hash=sha256_file(file),
                ),
                source_dataset=source_dataset if source_dataset is not None else path.name,
            )
        )
    return entries
