"""Rule-based cleaning: per-sample checks and corpus-level theme balancing.

All checks are pure. Grounding is a lexical-overlap proxy (share of answer
content tokens found in the knowledge token set), not a semantic judgment;
it exists so regressions are catchable automatically.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable, Iterable

from .corpus_model import (
    ConversationSample,
    KnowledgeRecord,
    VQAItem,
    loads_bytes,
)
from .errors import ValidationError
from .textnorm import tokens

DEFAULT_STOPLIST = frozenset(
    """a an the and or but of in on at to from with for by as is are was were be
    been being it its this that these those they their there then than not no
    nor do does did done can could may might must shall should will would have
    has had having about into over under between during while also such very
    more most some any each""".split()
)

DEFAULT_ROUND_BOUNDS = {
    "alignment": (2, 2),
    "instruction": (4, 6),
    "bench_chatbot": (4, 6),
}


@dataclass(frozen=True)
class Violation:
    rule_id: str
    detail: str


@dataclass(frozen=True)
class ThemeFinding:
    theme: str
    count: int
    surplus: int


@dataclass(frozen=True)
class CleanReport:
    violations: tuple[Violation, ...] = ()
    theme_findings: tuple[ThemeFinding, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations and not self.theme_findings

    def to_dict(self) -> dict:
        return {
            "violations": [{"rule_id": v.rule_id, "detail": v.detail} for v in self.violations],
            "theme_findings": [
                {"theme": f.theme, "count": f.count, "surplus": f.surplus}
                for f in self.theme_findings
            ],
        }


@dataclass(frozen=True)
class CleanPolicy:
    grounding_threshold: float = 0.6
    required_word: str = "image"
    theme_max_fraction: float = 0.4
    round_bounds: dict[str, tuple[int, int]] = field(
        default_factory=lambda: dict(DEFAULT_ROUND_BOUNDS)
    )
    stoplist: frozenset[str] = DEFAULT_STOPLIST
    balance_themes: bool = False

    def validate(self) -> None:
        if not 0.0 <= self.grounding_threshold <= 1.0:
            raise ValidationError(f"grounding_threshold {self.grounding_threshold} outside [0, 1]")
        if not 0.0 < self.theme_max_fraction <= 1.0:
            raise ValidationError(f"theme_max_fraction {self.theme_max_fraction} outside (0, 1]")
        if not self.required_word:
            raise ValidationError("required_word is empty")


DEFAULT_POLICY = CleanPolicy()


def load_policy(path) -> CleanPolicy:
    from .errors import ParseError

    payload = loads_bytes(Path(path).read_bytes())
    try:
        kwargs = {}
        for key in ("grounding_threshold", "required_word", "theme_max_fraction",
                    "balance_themes"):
            if key in payload:
                kwargs[key] = payload[key]
        if "round_bounds" in payload:
            kwargs["round_bounds"] = {
                origin: (int(lo), int(hi))
                for origin, (lo, hi) in payload["round_bounds"].items()
            }
        if "stoplist" in payload:
            kwargs["stoplist"] = frozenset(payload["stoplist"])
        policy = CleanPolicy(**kwargs)
    except (TypeError, ValueError, AttributeError) as exc:
        raise ParseError(f"malformed policy file: {exc}") from exc
    policy.validate()
    return policy


class KnowledgeIndex:
    """Resolve a sample's ailment to its knowledge record.

    Exact (name, crop) match first, then a name-only match when unique.
    """

    def __init__(self, records: Iterable[KnowledgeRecord]):
        self._by_key: dict[tuple[str, str], KnowledgeRecord] = {}
        self._by_name: dict[str, list[KnowledgeRecord]] = {}
        for record in records:
            self._by_key[(record.name.casefold(), record.crop.casefold())] = record
            self._by_name.setdefault(record.name.casefold(), []).append(record)

    def lookup(self, ailment_name: str, crop: str | None = None) -> KnowledgeRecord | None:
        if crop is not None:
            record = self._by_key.get((ailment_name.casefold(), crop.casefold()))
            if record is not None:
                return record
        candidates = self._by_name.get(ailment_name.casefold(), [])
        return candidates[0] if len(candidates) == 1 else None

    def __len__(self) -> int:
        return len(self._by_key)


def word_boundary_contains(text: str, word: str) -> bool:
    return re.search(rf"(?<!\w){re.escape(word)}(?!\w)", text, re.IGNORECASE) is not None


def check_contains_required_word(sample: ConversationSample,
                                 policy: CleanPolicy = DEFAULT_POLICY) -> list[Violation]:
    """Alignment rule: the first question must mention the required word."""
    if sample.origin != "alignment":
        raise ValidationError("required-word check applies to alignment samples only")
    first = sample.turns[0]
    if not word_boundary_contains(first.text, policy.required_word):
        return [
            Violation(
                "required_word",
                f"first question lacks the word {policy.required_word!r}: {first.text!r}",
            )
        ]
    return []


def grounding_score(answer: str, record: KnowledgeRecord,
                    policy: CleanPolicy = DEFAULT_POLICY) -> float:
    """Share of the answer's content tokens found in the knowledge token set.

    Content tokens exclude the stoplist and the record's own name tokens.
    An answer with no content tokens scores 1.0.
    """
    name_tokens = set(tokens(record.name))
    content = [
        t for t in tokens(answer)
        if t not in policy.stoplist and t not in name_tokens
    ]
    if not content:
        return 1.0
    knowledge_tokens = set(tokens(record.all_text()))
    hits = sum(1 for t in content if t in knowledge_tokens)
    return hits / len(content)


def check_grounding(sample: ConversationSample, record: KnowledgeRecord,
                    policy: CleanPolicy = DEFAULT_POLICY) -> list[Violation]:
    out = []
    for i, turn in enumerate(sample.turns):
        if turn.speaker != "assistant":
            continue
        score = grounding_score(turn.text, record, policy)
        if score < policy.grounding_threshold:
            out.append(
                Violation(
                    "grounding",
                    f"turn {i} grounding {score:.3f} below threshold "
                    f"{policy.grounding_threshold:.3f}",
                )
            )
    return out


def check_round_bounds(sample: ConversationSample,
                       policy: CleanPolicy = DEFAULT_POLICY,
                       bounds: tuple[int, int] | None = None) -> list[Violation]:
    if bounds is None:
        bounds = policy.round_bounds.get(sample.origin)
    if bounds is None:
        return []
    lo, hi = bounds
    if not lo <= sample.rounds <= hi:
        return [Violation("round_bounds", f"{sample.rounds} rounds outside [{lo}, {hi}]")]
    return []


def clean_sample(sample: ConversationSample, index: KnowledgeIndex,
                 policy: CleanPolicy = DEFAULT_POLICY) -> CleanReport:
    structural = sample.violations()
    if structural:
        return CleanReport(tuple(Violation("structure", v) for v in structural))
    violations: list[Violation] = []
    record = index.lookup(sample.image.ailment_name, sample.image.crop)
    if record is None:
        return CleanReport(
            (Violation("no_knowledge", f"no knowledge record for {sample.image.ailment_name!r}"),)
        )
    if sample.origin == "alignment":
        violations.extend(check_contains_required_word(sample, policy))
    violations.extend(check_round_bounds(sample, policy))
    violations.extend(check_grounding(sample, record, policy))
    return CleanReport(tuple(violations))


def clean_corpus(samples: Iterable[ConversationSample], index: KnowledgeIndex,
                 policy: CleanPolicy = DEFAULT_POLICY,
                 ) -> tuple[list[ConversationSample], list[tuple[ConversationSample, CleanReport]]]:
    """Split samples into (kept, rejected-with-reports). Deterministic and
    idempotent: cleaning the kept set again removes nothing."""
    kept: list[ConversationSample] = []
    rejected: list[tuple[ConversationSample, CleanReport]] = []
    for sample in samples:
        report = clean_sample(sample, index, policy)
        if report.ok:
            kept.append(sample)
        else:
            rejected.append((sample, report))
    return kept, rejected


# ---------------------------------------------------------------------------
# Theme balancing (themed items, e.g. VQA questions)
# ---------------------------------------------------------------------------

def theme_allowance(total: int, max_fraction: float) -> int:
    """Largest per-theme count whose fraction does not exceed the cap.

    Exact decimal arithmetic; a float cap like 0.3 must not under-count
    0.3 * 10.
    """
    return int(Fraction(str(max_fraction)) * total)


def theme_balance(items: Iterable[VQAItem], policy: CleanPolicy = DEFAULT_POLICY
                  ) -> list[ThemeFinding]:
    """Report each theme whose frequency fraction exceeds the cap, with the
    surplus count to remove relative to the current corpus size."""
    items = list(items)
    if not items:
        return []
    allowed = theme_allowance(len(items), policy.theme_max_fraction)
    counts = Counter(item.theme for item in items)
    return [
        ThemeFinding(theme, counts[theme], counts[theme] - allowed)
        for theme in sorted(counts)
        if counts[theme] > allowed
    ]


def trim_theme_surplus(items: list[VQAItem], policy: CleanPolicy = DEFAULT_POLICY,
                       score_fn: Callable[[VQAItem], float] | None = None,
                       ) -> tuple[list[VQAItem], list[VQAItem], list[ThemeFinding]]:
    """Drop surplus items per overloaded theme, lowest score first.

    Removal order is the total order (score, item_id), so results are
    reproducible. Returns (kept, removed, findings).
    """
    findings = theme_balance(items, policy)
    if not findings:
        return list(items), [], []
    score_of = score_fn or (lambda item: 0.0)
    to_remove: set[str] = set()
    for finding in findings:
        themed = [item for item in items if item.theme == finding.theme]
        themed.sort(key=lambda item: (score_of(item), item.item_id))
        to_remove.update(item.item_id for item in themed[: finding.surplus])
    kept = [item for item in items if item.item_id not in to_remove]
    removed = [item for item in items if item.item_id in to_remove]
    return kept, removed, findings


def vqa_grounding_score_fn(index: KnowledgeIndex,
                           policy: CleanPolicy = DEFAULT_POLICY
                           ) -> Callable[[VQAItem], float]:
    """Score a VQA item by the grounding of its gold answer; items whose
    ailment resolves to no record score 0.0 (removed first)."""

    def score(item: VQAItem) -> float:
        record = index.lookup(item.image.ailment_name, item.image.crop)
        if record is None:
            return 0.0
        return grounding_score(item.gold_answer, record, policy)

    return score
