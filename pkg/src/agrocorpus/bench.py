"""Benchmark construction with kind quotas, unseen preference, and
train/test disjointness.

Selection ranks candidates by a seeded hash of the file name (unseen types
first when requested), so a build is a pure function of the pool contents
and the seed, independent of pool ordering. Quotas can still displace a
previously selected image when a higher-priority one joins the pool; the
summary records the selection rule for that reason.
"""

from __future__ import annotations

import hashlib
import logging
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable

from .corpus_model import (
    AILMENT_KINDS,
    THEMES,
    ConversationSample,
    ImageRef,
    VQAItem,
    deserialize_samples,
    deserialize_vqa,
    dumps_bytes,
    image_index,
    loads_bytes,
)
from .errors import ParseError, ValidationError
from .manifest import ManifestEntry, active_entries, load_manifest

logger = logging.getLogger(__name__)

HEALTHY_ALLOWED_THEMES = frozenset({"nomenclature", "attributes"})


@dataclass(frozen=True)
class BenchSpec:
    target_image_count: int
    rounds_per_image: tuple[int, int]
    kind_mix: dict[str, int]
    prefer_unseen: bool = True
    themes_required: tuple[str, ...] = ()

    def validate(self) -> None:
        if self.target_image_count < 0:
            raise ValidationError("target_image_count must be non-negative")
        lo, hi = self.rounds_per_image
        if lo < 1 or hi < lo:
            raise ValidationError(f"rounds_per_image ({lo}, {hi}) must satisfy 1 <= min <= max")
        for kind, count in self.kind_mix.items():
            if kind not in AILMENT_KINDS:
                raise ValidationError(f"kind_mix has unknown kind {kind!r}")
            if count < 0:
                raise ValidationError(f"kind_mix[{kind!r}] is negative")
        if sum(self.kind_mix.values()) != self.target_image_count:
            raise ValidationError(
                f"kind_mix sums to {sum(self.kind_mix.values())}, "
                f"expected target_image_count {self.target_image_count}"
            )
        for theme in self.themes_required:
            if theme not in THEMES:
                raise ValidationError(f"themes_required has unknown theme {theme!r}")


def load_bench_spec(path) -> BenchSpec:
    payload = loads_bytes(Path(path).read_bytes())
    for key in ("target_image_count", "rounds_per_image", "kind_mix"):
        if key not in payload:
            raise ParseError(f"bench spec: missing field {key!r}")
    try:
        lo, hi = payload["rounds_per_image"]
        spec = BenchSpec(
            target_image_count=int(payload["target_image_count"]),
            rounds_per_image=(int(lo), int(hi)),
            kind_mix={k: int(v) for k, v in payload["kind_mix"].items()},
            prefer_unseen=bool(payload.get("prefer_unseen", True)),
            themes_required=tuple(payload.get("themes_required", ())),
        )
    except (TypeError, ValueError, AttributeError) as exc:
        raise ParseError(f"malformed bench spec: {exc}") from exc
    spec.validate()
    return spec


@dataclass(frozen=True)
class DisjointnessProof:
    checked_hash_count: int
    overlapping: tuple[tuple[str, str], ...]

    @property
    def is_disjoint(self) -> bool:
        return not self.overlapping

    def to_dict(self) -> dict:
        return {
            "checked_hash_count": self.checked_hash_count,
            "overlapping": [list(pair) for pair in self.overlapping],
        }


def check_disjointness(bench_manifest: Iterable[ManifestEntry],
                       training_manifest: Iterable[ManifestEntry]) -> DisjointnessProof:
    """List every content-hash collision between the two manifests."""
    bench_by_hash: dict[str, list[str]] = {}
    for entry in active_entries(list(bench_manifest)):
        bench_by_hash.setdefault(entry.image.content_hash, []).append(entry.image.file_name)
    train_by_hash: dict[str, list[str]] = {}
    for entry in active_entries(list(training_manifest)):
        train_by_hash.setdefault(entry.image.content_hash, []).append(entry.image.file_name)

    overlapping = []
    for digest in sorted(set(bench_by_hash) & set(train_by_hash)):
        for bench_file in sorted(bench_by_hash[digest]):
            for train_file in sorted(train_by_hash[digest]):
                overlapping.append((bench_file, train_file))
    checked = len(set(bench_by_hash) | set(train_by_hash))
    return DisjointnessProof(checked_hash_count=checked, overlapping=tuple(overlapping))


# ---------------------------------------------------------------------------
# Pools
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ChatbotPoolImage:
    ref: ImageRef
    sample: ConversationSample


@dataclass(frozen=True)
class VQAPoolImage:
    ref: ImageRef
    items: tuple[VQAItem, ...]


def load_chatbot_pool(data: bytes | str) -> list[ChatbotPoolImage]:
    """Parse a pool file: {"manifest": [...], "conversations": [...]}."""
    payload = loads_bytes(data)
    if not isinstance(payload, dict) or "manifest" not in payload or "conversations" not in payload:
        raise ParseError("chatbot pool file needs fields 'manifest' and 'conversations'")
    entries = [ManifestEntry.from_element(el, i) for i, el in enumerate(payload["manifest"])]
    refs = image_index(e.image for e in active_entries(entries))
    samples = deserialize_samples(
        dumps_bytes(payload["conversations"]), origin="bench_chatbot", images=refs
    )
    by_file: dict[str, ConversationSample] = {}
    for i, sample in enumerate(samples):
        name = sample.image.file_name
        if name not in refs:
            raise ParseError(f"conversation {i}: image {name!r} not in the pool manifest")
        if name in by_file:
            raise ParseError(f"conversation {i}: duplicate conversation for image {name!r}")
        by_file[name] = sample
    pool = []
    for entry in active_entries(entries):
        name = entry.image.file_name
        if name in by_file:
            pool.append(ChatbotPoolImage(ref=entry.image, sample=by_file[name]))
    return pool


def load_vqa_pool(data: bytes | str) -> list[VQAPoolImage]:
    """Parse a pool file: {"manifest": [...], "items": [...]}."""
    payload = loads_bytes(data)
    if not isinstance(payload, dict) or "manifest" not in payload or "items" not in payload:
        raise ParseError("vqa pool file needs fields 'manifest' and 'items'")
    entries = [ManifestEntry.from_element(el, i) for i, el in enumerate(payload["manifest"])]
    refs = image_index(e.image for e in active_entries(entries))
    items = deserialize_vqa(dumps_bytes(payload["items"]), images=refs)
    by_file: dict[str, list[VQAItem]] = {}
    for i, item in enumerate(items):
        name = item.image.file_name
        if name not in refs:
            raise ParseError(f"item {i} ({item.item_id!r}): image {name!r} not in the pool manifest")
        by_file.setdefault(name, []).append(item)
    return [
        VQAPoolImage(ref=entry.image, items=tuple(by_file[entry.image.file_name]))
        for entry in active_entries(entries)
        if entry.image.file_name in by_file
    ]


# ---------------------------------------------------------------------------
# Selection
# ---------------------------------------------------------------------------

def _priority(seed: int, file_name: str) -> str:
    return hashlib.sha256(f"{seed}|{file_name}".encode("utf-8")).hexdigest()


def _training_types(training_manifest: Iterable[ManifestEntry]) -> set[str]:
    return {
        entry.image.ailment_name.casefold()
        for entry in active_entries(list(training_manifest))
    }


def _unseen_type_count(selected_refs: list[ImageRef], training_types: set[str]) -> int:
    bench_types = {ref.ailment_name.casefold() for ref in selected_refs}
    return len(bench_types - training_types)


@dataclass(frozen=True)
class ChatbotBench:
    samples: tuple[ConversationSample, ...]
    summary: dict


@dataclass(frozen=True)
class VQABench:
    items: tuple[VQAItem, ...]
    summary: dict


def build_chatbot_bench(pool: list[ChatbotPoolImage], spec: BenchSpec,
                        training_manifest: Iterable[ManifestEntry],
                        seed: int) -> ChatbotBench:
    """Select images honoring the kind mix; unseen ailment types first when
    spec.prefer_unseen. Deterministic given the seed."""
    spec.validate()
    lo, hi = spec.rounds_per_image
    for image in pool:
        if not lo <= image.sample.rounds <= hi:
            raise ValidationError(
                f"pool image {image.ref.file_name!r} carries {image.sample.rounds} rounds, "
                f"outside [{lo}, {hi}]"
            )
    training_types = _training_types(training_manifest)

    selected: list[ChatbotPoolImage] = []
    for kind in AILMENT_KINDS:
        quota = spec.kind_mix.get(kind, 0)
        if quota == 0:
            continue
        candidates = [img for img in pool if img.ref.ailment_kind == kind]
        if len(candidates) < quota:
            raise ValidationError(
                f"kind_mix unsatisfiable: need {quota} {kind}, pool has {len(candidates)}"
            )
        candidates.sort(key=lambda img: (
            0 if spec.prefer_unseen and img.ref.ailment_name.casefold() not in training_types else 1,
            _priority(seed, img.ref.file_name),
        ))
        selected.extend(candidates[:quota])

    samples = tuple(
        replace(img.sample, origin="bench_chatbot") for img in selected
    )
    refs = [img.ref for img in selected]
    summary = {
        "image_count": len(selected),
        "round_total": sum(s.rounds for s in samples),
        "unseen_type_count": _unseen_type_count(refs, training_types),
        "kind_counts": {k: sum(1 for r in refs if r.ailment_kind == k) for k in AILMENT_KINDS},
        "selection_rule": "seeded-hash priority per kind, unseen types first",
    }
    return ChatbotBench(samples=samples, summary=summary)


def build_vqa_bench(pool: list[VQAPoolImage], spec: BenchSpec,
                    training_manifest: Iterable[ManifestEntry],
                    seed: int) -> tuple[VQABench, DisjointnessProof]:
    """Select VQA images under the spec; enforce zero hash overlap with the
    training manifest and cover required themes when the pool allows."""
    spec.validate()
    lo, hi = spec.rounds_per_image
    training_manifest = list(training_manifest)
    training_types = _training_types(training_manifest)
    training_hashes = {e.image.content_hash for e in active_entries(training_manifest)}

    overlap = sorted(
        img.ref.file_name for img in pool if img.ref.content_hash in training_hashes
    )
    if overlap:
        raise ValidationError(
            "pool images appear in the training manifest (hash overlap): " + ", ".join(overlap)
        )
    for img in pool:
        if not lo <= len(img.items) <= hi:
            raise ValidationError(
                f"pool image {img.ref.file_name!r} carries {len(img.items)} items, "
                f"outside [{lo}, {hi}]"
            )
        if img.ref.ailment_kind == "healthy":
            bad = sorted(
                item.item_id for item in img.items
                if item.theme not in HEALTHY_ALLOWED_THEMES
            )
            if bad:
                raise ValidationError(
                    f"healthy image {img.ref.file_name!r} carries themes outside "
                    f"{sorted(HEALTHY_ALLOWED_THEMES)}: items {bad}"
                )

    def sort_key(img: VQAPoolImage) -> tuple[int, str]:
        unseen = spec.prefer_unseen and img.ref.ailment_name.casefold() not in training_types
        return (0 if unseen else 1, _priority(seed, img.ref.file_name))

    remaining_quota = {k: spec.kind_mix.get(k, 0) for k in AILMENT_KINDS}
    available = {k: sum(1 for img in pool if img.ref.ailment_kind == k) for k in AILMENT_KINDS}
    for kind, quota in remaining_quota.items():
        if available[kind] < quota:
            raise ValidationError(
                f"kind_mix unsatisfiable: need {quota} {kind}, pool has {available[kind]}"
            )

    selected: list[VQAPoolImage] = []
    selected_names: set[str] = set()

    # Cover required themes first so quota exhaustion cannot starve them.
    covered: set[str] = set()
    for theme in sorted(spec.themes_required):
        if theme in covered:
            continue
        candidates = [
            img for img in pool
            if img.ref.file_name not in selected_names
            and remaining_quota[img.ref.ailment_kind] > 0
            and any(item.theme == theme for item in img.items)
        ]
        if not candidates:
            continue
        choice = min(candidates, key=sort_key)
        selected.append(choice)
        selected_names.add(choice.ref.file_name)
        remaining_quota[choice.ref.ailment_kind] -= 1
        covered.update(item.theme for item in choice.items)

    for kind in AILMENT_KINDS:
        quota = remaining_quota[kind]
        if quota == 0:
            continue
        candidates = sorted(
            (img for img in pool
             if img.ref.ailment_kind == kind and img.ref.file_name not in selected_names),
            key=sort_key,
        )
        for img in candidates[:quota]:
            selected.append(img)
            selected_names.add(img.ref.file_name)

    items = tuple(item for img in selected for item in img.items)
    present_themes = {item.theme for item in items}
    missing = sorted(set(spec.themes_required) - present_themes)
    if missing:
        logger.warning("vqa bench misses required themes: %s", ", ".join(missing))

    theme_counts = {
        theme: {
            "open": sum(1 for i in items if i.theme == theme and i.answer_type == "open"),
            "closed": sum(1 for i in items if i.theme == theme and i.answer_type == "closed"),
        }
        for theme in THEMES
        if any(i.theme == theme for i in items)
    }
    refs = [img.ref for img in selected]
    bench_entries = [ManifestEntry(image=ref, source_dataset="bench") for ref in refs]
    proof = check_disjointness(bench_entries, training_manifest)

    summary = {
        "image_count": len(selected),
        "item_total": len(items),
        "unseen_type_count": _unseen_type_count(refs, training_types),
        "kind_counts": {k: sum(1 for r in refs if r.ailment_kind == k) for k in AILMENT_KINDS},
        "theme_counts": theme_counts,
        "missing_themes": missing,
        "disjointness": proof.to_dict(),
        "selection_rule": "seeded-hash priority per kind, unseen types first, "
                          "required themes covered before quota fill",
    }
    return VQABench(items=items, summary=summary), proof
