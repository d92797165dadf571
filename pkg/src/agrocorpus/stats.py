"""Corpus statistics: taxonomy counts, word frequencies, question starters.

All statistics are pure functions of their inputs and invariant under input
permutation; ties break lexicographically so outputs are reproducible.
"""

from __future__ import annotations

from collections import Counter, defaultdict
from dataclasses import dataclass
from typing import Iterable

from .errors import ValidationError
from .manifest import ManifestEntry, active_entries
from .textnorm import tokens


@dataclass(frozen=True)
class TaxonomyReport:
    crops: dict
    grand_total: int

    def to_dict(self) -> dict:
        return {"crops": self.crops, "grand_total": self.grand_total}


def taxonomy_counts(entries: Iterable[ManifestEntry]) -> TaxonomyReport:
    """Nested crop -> kind -> ailment image counts over non-excluded entries."""
    leaves: dict[str, dict[str, Counter]] = defaultdict(lambda: defaultdict(Counter))
    for entry in active_entries(list(entries)):
        image = entry.image
        leaves[image.crop][image.ailment_kind][image.ailment_name] += 1

    crops = {}
    grand_total = 0
    for crop in sorted(leaves):
        kinds = {}
        crop_total = 0
        for kind in sorted(leaves[crop]):
            ailments = {name: leaves[crop][kind][name] for name in sorted(leaves[crop][kind])}
            kind_total = sum(ailments.values())
            kinds[kind] = {"total": kind_total, "ailments": ailments}
            crop_total += kind_total
        crops[crop] = {"total": crop_total, "kinds": kinds}
        grand_total += crop_total
    return TaxonomyReport(crops=crops, grand_total=grand_total)


def word_frequency(texts: Iterable[str], stoplist: frozenset[str] | set[str] = frozenset(),
                   k: int = 50) -> list[tuple[str, int]]:
    """Top-k (word, count) using the shared normalizer; ties lexicographic."""
    if k < 1:
        raise ValidationError("k must be >= 1")
    counts = Counter()
    for text in texts:
        counts.update(t for t in tokens(text) if t not in stoplist)
    ranked = sorted(counts.items(), key=lambda pair: (-pair[1], pair[0]))
    return ranked[:k]


@dataclass(frozen=True)
class StarterEntry:
    starter: str
    count: int
    following: tuple[tuple[str, int], ...]

    def to_dict(self) -> dict:
        return {
            "starter": self.starter,
            "count": self.count,
            "following": [list(pair) for pair in self.following],
        }


def question_starter_analysis(questions: Iterable[str], top_q: int = 3,
                              top_w: int = 4) -> list[StarterEntry]:
    """Rank first-word starters, then the top words at positions 2..5 of the
    questions under each starter. Defaults show the top 4 words of the top 3
    starters."""
    if top_q < 1 or top_w < 1:
        raise ValidationError("top_q and top_w must be >= 1")
    by_starter: dict[str, list[list[str]]] = defaultdict(list)
    for question in questions:
        toks = tokens(question)
        if not toks:
            continue
        by_starter[toks[0]].append(toks[1:5])

    ranked_starters = sorted(
        by_starter.items(), key=lambda pair: (-len(pair[1]), pair[0])
    )[:top_q]

    out = []
    for starter, windows in ranked_starters:
        counts = Counter(word for window in windows for word in window)
        following = sorted(counts.items(), key=lambda pair: (-pair[1], pair[0]))[:top_w]
        out.append(
            StarterEntry(starter=starter, count=len(windows), following=tuple(following))
        )
    return out


# ---------------------------------------------------------------------------
# Plain-text renderings
# ---------------------------------------------------------------------------

def render_taxonomy(report: TaxonomyReport) -> str:
    lines = [f"total images: {report.grand_total}"]
    for crop, crop_entry in report.crops.items():
        lines.append(f"{crop}  ({crop_entry['total']})")
        for kind, kind_entry in crop_entry["kinds"].items():
            lines.append(f"  {kind}  ({kind_entry['total']})")
            for name, count in kind_entry["ailments"].items():
                lines.append(f"    {name}: {count}")
    return "\n".join(lines)


def render_word_frequency(ranked: list[tuple[str, int]]) -> str:
    if not ranked:
        return "(no words)"
    width = max(len(word) for word, _ in ranked)
    return "\n".join(f"{word.ljust(width)}  {count}" for word, count in ranked)


def render_starters(entries: list[StarterEntry]) -> str:
    lines = []
    for entry in entries:
        lines.append(f"{entry.starter}  ({entry.count} questions)")
        for word, count in entry.following:
            lines.append(f"  {word}: {count}")
    return "\n".join(lines) if lines else "(no questions)"
