import dataclasses
import itertools
from fractions import Fraction

import pytest
from hypothesis import given, settings
import hypothesis.strategies as st

from agrocorpus.cleaner import (
    CleanPolicy,
    KnowledgeIndex,
    check_contains_required_word,
    check_round_bounds,
    clean_corpus,
    grounding_score,
    theme_allowance,
    theme_balance,
    trim_theme_surplus,
)
from agrocorpus.corpus_model import (
    ConversationSample,
    ConversationTurn,
    ImageRef,
    KnowledgeRecord,
    VQAItem,
)
from agrocorpus.errors import ValidationError

import strategies as strat


def alignment_sample(q1, image=None):
    image = image or ImageRef.build("apple", "apple rust", "disease", 1, "aa" * 32)
    return ConversationSample(
        image=image,
        turns=(
            ConversationTurn("human", q1, has_image_slot=True),
            ConversationTurn("assistant", "Orange spots appear on the upper leaf surface."),
            ConversationTurn("human", "Which disease is this?"),
            ConversationTurn("assistant",
                             "apple rust. Orange spots appear on the upper leaf surface."),
        ),
        origin="alignment",
    )


class TestRequiredWord:
    def test_image_word_passes(self):
        assert check_contains_required_word(alignment_sample("What is shown in the image?")) == []

    def test_picture_fails(self):
        violations = check_contains_required_word(
            alignment_sample("What is shown in the picture?")
        )
        assert [v.rule_id for v in violations] == ["required_word"]

    def test_imagery_fails_word_boundary(self):
        violations = check_contains_required_word(
            alignment_sample("imagery of leaves with spots")
        )
        assert [v.rule_id for v in violations] == ["required_word"]

    def test_case_insensitive(self):
        assert check_contains_required_word(alignment_sample("IMAGE of what?")) == []

    def test_punctuation_boundary_passes(self):
        assert check_contains_required_word(alignment_sample("In this image, what?")) == []

    def test_non_alignment_sample_rejected(self):
        sample = dataclasses.replace(alignment_sample("image?"), origin="instruction")
        with pytest.raises(ValidationError, match="alignment"):
            check_contains_required_word(sample)


class TestGroundingScore:
    def test_verbatim_copy_scores_one(self, leaf_record):
        assert grounding_score(leaf_record.sections["symptoms"], leaf_record) == 1.0

    def test_disjoint_scores_zero(self, leaf_record):
        assert grounding_score("quantum blockchain synergy", leaf_record) == 0.0

    def test_three_of_four_content_tokens(self, leaf_record):
        # content tokens: spots, leaf, surface (present) + tractor (absent);
        # "the" and "on" fall to the stoplist
        assert grounding_score("spots on the leaf surface tractor", leaf_record) == 0.75

    def test_record_name_tokens_do_not_count(self, leaf_record):
        # "apple rust" is the record name; remaining content token is grounded
        assert grounding_score("apple rust spots", leaf_record) == 1.0

    def test_empty_content_scores_one(self, leaf_record):
        assert grounding_score("the of and", leaf_record) == 1.0
        assert grounding_score("", leaf_record) == 1.0

    @settings(max_examples=60)
    @given(strat.knowledge_records(), st.text(max_size=80), strat.section_text)
    def test_monotone_under_knowledge_growth(self, record, answer, extra):
        grown = dataclasses.replace(
            record,
            sections={
                **record.sections,
                "other": (record.sections.get("other", "") + " " + extra).strip(),
            },
        )
        assert grounding_score(answer, grown) >= grounding_score(answer, record)


class TestRoundBounds:
    def test_alignment_two_rounds_pass(self):
        assert check_round_bounds(alignment_sample("image?")) == []

    def test_instruction_bounds(self):
        sample = dataclasses.replace(alignment_sample("image?"), origin="instruction")
        violations = check_round_bounds(sample)
        assert [v.rule_id for v in violations] == ["round_bounds"]
        assert "2 rounds outside [4, 6]" in violations[0].detail


def items_with_themes(themes):
    image = ImageRef.build("apple", "apple rust", "disease", 1, "aa" * 32)
    return [
        VQAItem(image, "q?", "yes", "closed", theme, f"item{i:03d}")
        for i, theme in enumerate(themes)
    ]


def brute_force_min_removals(themes, cap):
    """Smallest removal count such that every remaining theme count stays
    within the allowance computed at the original corpus size."""
    allowed = int(Fraction(str(cap)) * len(themes))
    counts = {}
    for theme in themes:
        counts[theme] = counts.get(theme, 0) + 1
    for total_removed in range(len(themes) + 1):
        for combo in itertools.combinations(range(len(themes)), total_removed):
            remaining = dict(counts)
            for idx in combo:
                remaining[themes[idx]] -= 1
            if all(v <= allowed for v in remaining.values()):
                return total_removed
    return len(themes)


class TestThemeBalance:
    def test_six_of_ten_cap_half_surplus_one(self):
        items = items_with_themes(["abnormal_symptoms"] * 6 + ["hazards"] * 4)
        findings = theme_balance(items, CleanPolicy(theme_max_fraction=0.5))
        assert len(findings) == 1
        assert findings[0].theme == "abnormal_symptoms"
        assert findings[0].count == 6
        assert findings[0].surplus == 1

    def test_uniform_nine_themes_no_findings(self):
        from agrocorpus.corpus_model import THEMES

        items = items_with_themes(list(THEMES))
        assert theme_balance(items, CleanPolicy(theme_max_fraction=0.5)) == []

    def test_exact_cap_is_not_excessive(self):
        items = items_with_themes(["hazards"] * 5 + ["causes"] * 5)
        assert theme_balance(items, CleanPolicy(theme_max_fraction=0.5)) == []

    def test_allowance_avoids_float_floor_artifacts(self):
        assert theme_allowance(10, 0.3) == 3
        assert theme_allowance(10, 0.5) == 5
        assert theme_allowance(3, 1.0) == 3

    @settings(max_examples=80)
    @given(st.lists(st.sampled_from(("hazards", "causes", "attributes")),
                    min_size=1, max_size=20),
           st.sampled_from((0.3, 0.4, 0.5, 0.7)))
    def test_surplus_sum_matches_brute_force_minimum(self, themes, cap):
        items = items_with_themes(themes)
        findings = theme_balance(items, CleanPolicy(theme_max_fraction=cap))
        assert sum(f.surplus for f in findings) == brute_force_min_removals(themes, cap)

    def test_trim_removes_lowest_scores_first(self):
        items = items_with_themes(["hazards"] * 4 + ["causes"])
        scores = {"item000": 0.9, "item001": 0.2, "item002": 0.5, "item003": 0.2}
        kept, removed, findings = trim_theme_surplus(
            items, CleanPolicy(theme_max_fraction=0.4),
            score_fn=lambda item: scores.get(item.item_id, 1.0),
        )
        assert findings[0].surplus == 2
        # ties break on item_id, so the two 0.2-scored items go first
        assert [i.item_id for i in removed] == ["item001", "item003"]
        assert [i.item_id for i in kept] == ["item000", "item002", "item004"]


class TestCleanCorpus:
    def test_generated_alignment_corpus_all_kept(self, leaf_record):
        from agrocorpus.align import TemplatePool, generate_alignment_sample

        index = KnowledgeIndex([leaf_record])
        images = [
            ImageRef.build("apple", "apple rust", "disease", i + 1, f"{i:02x}" * 32)
            for i in range(25)
        ]
        samples = [
            generate_alignment_sample(image, leaf_record, TemplatePool(), 13)
            for image in images
        ]
        kept, rejected = clean_corpus(samples, index)
        assert rejected == []
        assert kept == samples

    def test_unresolvable_ailment_rejected_no_knowledge(self, leaf_record):
        index = KnowledgeIndex([leaf_record])
        stranger = alignment_sample(
            "image?", ImageRef.build("pear", "pear blight", "disease", 1, "bb" * 32)
        )
        kept, rejected = clean_corpus([stranger], index)
        assert kept == []
        assert [v.rule_id for v in rejected[0][1].violations] == ["no_knowledge"]

    def test_fabricated_pesticide_answer_rejected(self):
        # 31 knowledge words + 19 fabricated ones: grounding 31/50 = 0.62
        known = [f"kw{i}" for i in range(31)]
        fabricated = [f"zineb{i}" for i in range(19)]
        record = KnowledgeRecord(
            name="apple rust", kind="disease", crop="apple",
            sections={"symptoms": " ".join(known)}, provenance="t",
        )
        sample = ConversationSample(
            image=ImageRef.build("apple", "apple rust", "disease", 1, "aa" * 32),
            turns=(
                ConversationTurn("human", "What is in the image?", has_image_slot=True),
                ConversationTurn("assistant", " ".join(known + fabricated)),
            ),
            origin="instruction",
        )
        policy = CleanPolicy(grounding_threshold=0.8,
                             round_bounds={"instruction": (1, 6)})
        assert grounding_score(sample.turns[1].text, record, policy) == 0.62
        kept, rejected = clean_corpus([sample], KnowledgeIndex([record]), policy)
        assert kept == []
        report = rejected[0][1]
        assert [v.rule_id for v in report.violations] == ["grounding"]
        assert "0.620" in report.violations[0].detail

    @settings(max_examples=40)
    @given(st.data())
    def test_idempotent_on_random_corpora(self, data):
        records = data.draw(st.lists(strat.knowledge_records(), min_size=1, max_size=3,
                                     unique_by=lambda r: (r.name, r.crop)))
        index = KnowledgeIndex(records)
        samples = []
        for _ in range(data.draw(st.integers(0, 6))):
            record = data.draw(st.sampled_from(records))
            use_knowledge_text = data.draw(st.booleans())
            rounds = data.draw(st.integers(1, 7))
            turns = []
            for i in range(rounds):
                answer = (record.all_text() if use_knowledge_text
                          else data.draw(strat.turn_text))
                turns.append(ConversationTurn("human", data.draw(strat.turn_text),
                                              has_image_slot=(i == 0)))
                turns.append(ConversationTurn("assistant", answer))
            image = ImageRef.build(record.crop, record.name, record.kind,
                                   data.draw(st.integers(1, 99)),
                                   data.draw(strat.hex_hash))
            samples.append(ConversationSample(image=image, turns=tuple(turns),
                                              origin="instruction"))
        kept, rejected = clean_corpus(samples, index)
        kept_again, rejected_again = clean_corpus(kept, index)
        assert kept_again == kept
        assert rejected_again == []
