"""Evaluation protocols: judge-based relative scoring and open/closed VQA
metrics.

Metric computation is pure. Reported percentages are rounded with ties away
from zero at the stated precision; machine reports always retain the raw
values. Displayed averages are derived from the displayed (rounded)
components in exact decimal arithmetic, so a rendered table is internally
consistent.
"""

from __future__ import annotations

import logging
import re
from collections import Counter
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from typing import Iterable, Mapping

from .cleaner import KnowledgeIndex
from .corpus_model import ConversationSample, KnowledgeRecord, VQAItem
from .errors import ParseError, ValidationError
from .knowledge import knowledge_payload
from .teacher import ChatPrompt, TeacherBackend
from .textnorm import normalize_closed, round_half_away, tokens

logger = logging.getLogger(__name__)

JUDGE_CRITERIA = ("helpfulness", "relevance", "accuracy", "level of detail")

_SECTION_MENTIONS = {
    "symptoms": ("symptom", "symptoms"),
    "pathogen": ("pathogen", "pathogens"),
    "transmission": ("transmission", "spread", "transmit"),
    "control": ("control", "prevention", "prevent", "treat", "treatment"),
}


# ---------------------------------------------------------------------------
# Reference answers and judge prompts
# ---------------------------------------------------------------------------

_REFERENCE_SYSTEM = (
    "You are an agricultural expert. Answer the user's question using ONLY "
    "the structured knowledge entry provided. If the knowledge does not "
    "cover the question, say what the knowledge does cover instead of "
    "guessing."
)


def build_reference_prompt(record: KnowledgeRecord, question: str) -> ChatPrompt:
    return ChatPrompt(
        system_text=_REFERENCE_SYSTEM,
        user_text=f"Knowledge entry:\n{knowledge_payload(record)}\n\nQuestion: {question}",
    )


def build_reference_answer(record: KnowledgeRecord, question: str,
                           backend: TeacherBackend) -> str:
    """Ask the language-only backend for the knowledge-grounded reference.

    When the question clearly targets a section the record leaves empty,
    the gap is flagged in the run log; the reference is generated either
    way.
    """
    question_tokens = set(tokens(question))
    for section, mentions in _SECTION_MENTIONS.items():
        if question_tokens & set(mentions) and not record.section(section).strip():
            logger.warning(
                "question mentions %s but knowledge record %r has an empty %s section",
                section, record.name, section,
            )
    return backend.send(build_reference_prompt(record, question))


_JUDGE_SYSTEM = (
    "You are grading two assistant answers to the same question about an "
    "image of a crop pest or disease. Judge the {criteria} of each answer "
    "against the provided knowledge entry. Reply with a first line of "
    "exactly 'Scores: <first> <second>' where each score is an integer "
    "from 1 to 10, then explain your scores."
).format(criteria=", ".join(JUDGE_CRITERIA))


def build_judge_prompt(question: str, knowledge_payload_text: str,
                       answer_a: str, answer_b: str) -> ChatPrompt:
    """Judge prompt presenting both answers in the given order. Identical
    answers are still submitted; scoring is the backend's job."""
    user = (
        f"Question: {question}\n\n"
        f"Knowledge entry:\n{knowledge_payload_text}\n\n"
        f"Answer 1:\n{answer_a}\n\n"
        f"Answer 2:\n{answer_b}"
    )
    return ChatPrompt(system_text=_JUDGE_SYSTEM, user_text=user)


@dataclass(frozen=True)
class JudgeVerdict:
    item_id: str
    score_candidate: int
    score_reference: int
    explanation: str

    def validate(self) -> None:
        for label, score in (("candidate", self.score_candidate),
                             ("reference", self.score_reference)):
            if not isinstance(score, int) or not 1 <= score <= 10:
                raise ValidationError(f"{label} score {score!r} outside 1..10")


_SCORES_RE = re.compile(r"^\s*Scores:\s*(.*)$", re.IGNORECASE)


def parse_judge_verdict(text: str, item_id: str,
                        candidate_first: bool = True) -> JudgeVerdict:
    """Parse 'Scores: <a> <b>' plus explanation; validates the 1..10 range.

    Raises ParseError for anything malformed; never anything else.
    """
    if not isinstance(text, str) or not text.strip():
        raise ParseError(f"verdict for {item_id!r}: empty response")
    lines = text.splitlines()
    first_idx = next((i for i, line in enumerate(lines) if line.strip()), 0)
    match = _SCORES_RE.match(lines[first_idx])
    if not match:
        raise ParseError(
            f"verdict for {item_id!r}: first line must be 'Scores: <a> <b>', "
            f"got {lines[first_idx]!r}"
        )
    parts = match.group(1).split()
    if len(parts) != 2:
        raise ParseError(
            f"verdict for {item_id!r}: expected exactly 2 scores, got {len(parts)}"
        )
    try:
        first, second = (int(p) for p in parts)
    except ValueError as exc:
        raise ParseError(f"verdict for {item_id!r}: non-numeric score in {parts}") from exc
    for score in (first, second):
        if not 1 <= score <= 10:
            raise ParseError(f"verdict for {item_id!r}: score {score} outside 1..10")
    explanation = "\n".join(lines[first_idx + 1:]).strip()
    cand, ref = (first, second) if candidate_first else (second, first)
    return JudgeVerdict(
        item_id=item_id,
        score_candidate=cand,
        score_reference=ref,
        explanation=explanation,
    )


# ---------------------------------------------------------------------------
# Relative scores (chatbot protocol)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RelativeScoreReport:
    by_kind: dict[str, float]
    overall: float
    n_items: dict[str, int]
    agg: str = "ratio_of_sums"

    def rounded(self) -> dict:
        out = {kind: round_half_away(value, 1) for kind, value in self.by_kind.items()}
        out["overall"] = round_half_away(self.overall, 1)
        return out

    def to_dict(self) -> dict:
        return {
            "agg": self.agg,
            "by_kind": dict(self.by_kind),
            "overall": self.overall,
            "n_items": dict(self.n_items),
            "rounded": self.rounded(),
        }


def _group_percentage(verdicts: list[JudgeVerdict], agg: str) -> float:
    if agg == "ratio_of_sums":
        ref_total = sum(v.score_reference for v in verdicts)
        assert ref_total > 0, "scores are >= 1, so a non-empty group cannot sum to 0"
        return 100.0 * sum(v.score_candidate for v in verdicts) / ref_total
    if agg == "mean_of_ratios":
        return 100.0 * sum(
            v.score_candidate / v.score_reference for v in verdicts
        ) / len(verdicts)
    raise ValidationError(f"unknown aggregation {agg!r}")


def relative_score(verdicts: Iterable[JudgeVerdict],
                   kinds: Mapping[str, str],
                   agg: str = "ratio_of_sums") -> RelativeScoreReport:
    """Aggregate verdicts into per-kind and pooled-overall percentages.

    Overall is computed from the pooled verdicts, not from the per-kind
    values. Permutation of verdict order never changes any output.
    """
    verdicts = list(verdicts)
    if not verdicts:
        raise ValidationError("no verdicts to aggregate")
    for verdict in verdicts:
        verdict.validate()
        if verdict.item_id not in kinds:
            raise ValidationError(f"item {verdict.item_id!r} has no kind mapping")
    groups: dict[str, list[JudgeVerdict]] = {}
    for verdict in verdicts:
        groups.setdefault(kinds[verdict.item_id], []).append(verdict)
    by_kind = {kind: _group_percentage(group, agg) for kind, group in sorted(groups.items())}
    return RelativeScoreReport(
        by_kind=by_kind,
        overall=_group_percentage(verdicts, agg),
        n_items={kind: len(group) for kind, group in sorted(groups.items())},
        agg=agg,
    )


# ---------------------------------------------------------------------------
# VQA metrics
# ---------------------------------------------------------------------------

def f1_from_counts(tp: int, fp: int, fn: int) -> float:
    """Harmonic-mean F1 from confusion counts; 0.0 when precision and
    recall are both undefined or zero."""
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def open_f1(prediction: str, gold: str) -> float:
    """Token-multiset F1 over the shared normalizer's tokens.

    Both empty after normalization scores 1.0; disjoint token multisets
    score 0.0.
    """
    pred_counts = Counter(tokens(prediction))
    gold_counts = Counter(tokens(gold))
    if not pred_counts and not gold_counts:
        return 1.0
    tp = sum((pred_counts & gold_counts).values())
    fp = sum(pred_counts.values()) - tp
    fn = sum(gold_counts.values()) - tp
    return f1_from_counts(tp, fp, fn)


def closed_accuracy(predictions: list[str], golds: list[str]) -> float:
    """Exact-match accuracy over normalized yes/no labels.

    A prediction that fails normalization counts as wrong and is logged.
    Golds must normalize; aligned lists must be non-empty.
    """
    if len(predictions) != len(golds):
        raise ValidationError(
            f"aligned lists differ in length: {len(predictions)} vs {len(golds)}"
        )
    if not golds:
        raise ValidationError("closed_accuracy needs at least one item")
    correct = 0
    failures = 0
    for i, (pred, gold) in enumerate(zip(predictions, golds)):
        gold_label = normalize_closed(gold)
        if gold_label is None:
            raise ValidationError(f"gold answer {i} ({gold!r}) does not normalize to yes/no")
        pred_label = normalize_closed(pred)
        if pred_label is None:
            failures += 1
            logger.warning("closed prediction %d (%r) does not normalize to yes/no", i, pred)
            continue
        if pred_label == gold_label:
            correct += 1
    if failures:
        logger.warning("%d/%d closed predictions failed normalization", failures, len(golds))
    return correct / len(golds)


@dataclass(frozen=True)
class VQAReport:
    open_f1_percent: float | None
    closed_accuracy_percent: float | None
    average_percent: float | None
    per_theme: dict[str, dict]
    open_count: int
    closed_count: int
    invalid_closed_count: int
    f1_average: str = "macro"

    def rounded(self) -> dict:
        """Display values: components rounded to 2 decimals, average derived
        from the rounded components in exact decimal arithmetic."""
        def round2(value: float | None) -> float | None:
            return None if value is None else round_half_away(value, 2)

        out = {
            "open_f1_percent": round2(self.open_f1_percent),
            "closed_accuracy_percent": round2(self.closed_accuracy_percent),
        }
        if self.open_f1_percent is None or self.closed_accuracy_percent is None:
            out["average_percent"] = None
        else:
            mean = (
                Decimal(str(out["open_f1_percent"])) + Decimal(str(out["closed_accuracy_percent"]))
            ) / 2
            out["average_percent"] = float(
                mean.quantize(Decimal("0.01"), rounding=ROUND_HALF_UP)
            )
        return out

    def to_dict(self) -> dict:
        return {
            "f1_average": self.f1_average,
            "open_f1_percent": self.open_f1_percent,
            "closed_accuracy_percent": self.closed_accuracy_percent,
            "average_percent": self.average_percent,
            "average_defined": self.average_percent is not None,
            "open_count": self.open_count,
            "closed_count": self.closed_count,
            "invalid_closed_count": self.invalid_closed_count,
            "per_theme": self.per_theme,
            "rounded": self.rounded(),
        }


def _open_percent(pairs: list[tuple[VQAItem, str]], f1_average: str) -> float:
    if f1_average == "macro":
        return 100.0 * sum(open_f1(pred, item.gold_answer) for item, pred in pairs) / len(pairs)
    if f1_average == "micro":
        tp = fp = fn = 0
        for item, pred in pairs:
            pred_counts = Counter(tokens(pred))
            gold_counts = Counter(tokens(item.gold_answer))
            hit = sum((pred_counts & gold_counts).values())
            tp += hit
            fp += sum(pred_counts.values()) - hit
            fn += sum(gold_counts.values()) - hit
        return 100.0 * f1_from_counts(tp, fp, fn)
    raise ValidationError(f"unknown f1_average {f1_average!r}")


def vqa_report(pairs: Iterable[tuple[VQAItem, str]],
               f1_average: str = "macro") -> VQAReport:
    """Score (item, prediction) pairs into the open/closed/average report.

    With zero open or zero closed items, the missing component and the
    average are reported as None, never silently computed.
    """
    pairs = sorted(pairs, key=lambda pair: pair[0].item_id)
    if not pairs:
        raise ValidationError("no items to score")
    seen: set[str] = set()
    for item, _ in pairs:
        if item.item_id in seen:
            raise ValidationError(f"duplicate item_id {item.item_id!r}")
        seen.add(item.item_id)

    open_pairs = [(i, p) for i, p in pairs if i.answer_type == "open"]
    closed_pairs = [(i, p) for i, p in pairs if i.answer_type == "closed"]

    open_percent = _open_percent(open_pairs, f1_average) if open_pairs else None
    closed_percent = None
    invalid_closed = 0
    if closed_pairs:
        preds = [p for _, p in closed_pairs]
        golds = [i.gold_answer for i, _ in closed_pairs]
        closed_percent = 100.0 * closed_accuracy(preds, golds)
        invalid_closed = sum(1 for p in preds if normalize_closed(p) is None)

    average = None
    if open_percent is not None and closed_percent is not None:
        average = (open_percent + closed_percent) / 2.0

    per_theme: dict[str, dict] = {}
    for theme in sorted({item.theme for item, _ in pairs}):
        theme_open = [(i, p) for i, p in open_pairs if i.theme == theme]
        theme_closed = [(i, p) for i, p in closed_pairs if i.theme == theme]
        entry: dict = {"open_count": len(theme_open), "closed_count": len(theme_closed)}
        entry["open_f1_percent"] = (
            _open_percent(theme_open, f1_average) if theme_open else None
        )
        entry["closed_accuracy_percent"] = (
            100.0 * closed_accuracy([p for _, p in theme_closed],
                                    [i.gold_answer for i, _ in theme_closed])
            if theme_closed else None
        )
        per_theme[theme] = entry

    return VQAReport(
        open_f1_percent=open_percent,
        closed_accuracy_percent=closed_percent,
        average_percent=average,
        per_theme=per_theme,
        open_count=len(open_pairs),
        closed_count=len(closed_pairs),
        invalid_closed_count=invalid_closed,
        f1_average=f1_average,
    )


# ---------------------------------------------------------------------------
# Chatbot evaluation driver
# ---------------------------------------------------------------------------

def chatbot_items(samples: Iterable[ConversationSample]) -> list[dict]:
    """Flatten bench conversations into judgeable items.

    Item ids are "<file_name>#r<round>" (1-based); each item carries the
    question and the bench's own assistant turn as the default reference.
    """
    items = []
    for sample in samples:
        for round_no in range(sample.rounds):
            human = sample.turns[2 * round_no]
            assistant = sample.turns[2 * round_no + 1]
            items.append({
                "item_id": f"{sample.image.file_name}#r{round_no + 1}",
                "image": sample.image,
                "question": human.text,
                "reference": assistant.text,
            })
    return items


def evaluate_chatbot(samples: list[ConversationSample],
                     predictions: Mapping[str, str],
                     index: KnowledgeIndex,
                     backend: TeacherBackend,
                     references: Mapping[str, str] | None = None,
                     candidate_first: bool = True,
                     agg: str = "ratio_of_sums",
                     concurrency: int = 1,
                     ) -> tuple[RelativeScoreReport, list[JudgeVerdict]]:
    """Judge candidate answers item by item and aggregate relative scores.

    References default to the bench's own assistant turns (they were
    generated from the knowledge); pass ``references`` to override.
    ``concurrency`` bounds in-flight judge requests; verdict order always
    follows bench order.
    """
    items = chatbot_items(samples)
    if not items:
        raise ValidationError("bench contains no conversation rounds")
    kinds: dict[str, str] = {}
    prompts: list[tuple[str, object]] = []
    for item in items:
        item_id = item["item_id"]
        if item_id not in predictions:
            raise ValidationError(f"missing prediction for item {item_id!r}")
        record = index.lookup(item["image"].ailment_name, item["image"].crop)
        if record is None:
            raise ValidationError(
                f"item {item_id!r}: no knowledge record for {item['image'].ailment_name!r}"
            )
        kinds[item_id] = record.kind
        reference = (references or {}).get(item_id, item["reference"])
        candidate = predictions[item_id]
        first, second = (candidate, reference) if candidate_first else (reference, candidate)
        prompts.append(
            (item_id,
             build_judge_prompt(item["question"], knowledge_payload(record), first, second))
        )

    def judge(task):
        item_id, prompt = task
        return parse_judge_verdict(backend.send(prompt), item_id,
                                   candidate_first=candidate_first)

    if concurrency <= 1:
        verdicts = [judge(task) for task in prompts]
    else:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=concurrency) as pool:
            verdicts = list(pool.map(judge, prompts))
    return relative_score(verdicts, kinds, agg=agg), verdicts


# ---------------------------------------------------------------------------
# Human-readable tables
# ---------------------------------------------------------------------------

def render_chatbot_table(report: RelativeScoreReport) -> str:
    rounded = report.rounded()
    kinds = [k for k in report.by_kind]
    header = ["Issue type"] + [k.capitalize() for k in kinds] + ["Overall"]
    values = ["Relative score (%)"] + [f"{rounded[k]:.1f}" for k in kinds]
    values.append(f"{rounded['overall']:.1f}")
    counts = ["N"] + [str(report.n_items[k]) for k in kinds]
    counts.append(str(sum(report.n_items.values())))
    widths = [max(len(row[i]) for row in (header, values, counts)) for i in range(len(header))]
    lines = [
        "  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)).rstrip()
        for row in (header, values, counts)
    ]
    return "\n".join(lines)


def render_vqa_table(report: VQAReport) -> str:
    rounded = report.rounded()

    def show(value: float | None) -> str:
        return "-" if value is None else f"{value:.2f}"

    rows = [["Question type", "Open", "Closed", "Average"]]
    rows.append([
        "Score (%)",
        show(rounded["open_f1_percent"]),
        show(rounded["closed_accuracy_percent"]),
        show(rounded["average_percent"]),
    ])
    rows.append(["N", str(report.open_count), str(report.closed_count), ""])
    for theme, entry in report.per_theme.items():
        open_pct = entry["open_f1_percent"]
        closed_pct = entry["closed_accuracy_percent"]
        rows.append([
            f"  {theme}",
            show(None if open_pct is None else round_half_away(open_pct, 2)),
            show(None if closed_pct is None else round_half_away(closed_pct, 2)),
            "",
        ])
    widths = [max(len(row[i]) for row in rows) for i in range(4)]
    return "\n".join(
        "  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)).rstrip()
        for row in rows
    )
