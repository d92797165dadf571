import itertools
import logging
import random

import pytest
from hypothesis import given, settings
import hypothesis.strategies as st

from agrocorpus.cleaner import KnowledgeIndex
from agrocorpus.corpus_model import ImageRef, VQAItem
from agrocorpus.errors import ParseError, ValidationError
from agrocorpus.evaluator import (
    JUDGE_CRITERIA,
    JudgeVerdict,
    build_judge_prompt,
    build_reference_answer,
    build_reference_prompt,
    chatbot_items,
    closed_accuracy,
    evaluate_chatbot,
    f1_from_counts,
    open_f1,
    parse_judge_verdict,
    relative_score,
    render_chatbot_table,
    render_vqa_table,
    vqa_report,
)
from agrocorpus.textnorm import round_half_away

import strategies as strat


class RecordingBackend:
    kind = "recording"

    def __init__(self, response="Scores: 5 10\nok"):
        self.response = response
        self.prompts = []
        self.request_count = 0

    def send(self, prompt):
        self.prompts.append(prompt)
        self.request_count += 1
        return self.response


def open_item(idx, gold, theme="causes"):
    image = ImageRef.build("apple", "apple rust", "disease", idx + 1, "aa" * 32)
    return VQAItem(image, f"q{idx}?", gold, "open", theme, f"open{idx:05d}")


def closed_item(idx, gold, theme="hazards"):
    image = ImageRef.build("apple", "apple rust", "disease", idx + 1, "aa" * 32)
    return VQAItem(image, f"q{idx}?", gold, "closed", theme, f"closed{idx:05d}")


class TestOpenF1:
    def test_identical_strings(self):
        assert open_f1("orange spots on leaves", "orange spots on leaves") == 1.0

    def test_disjoint_strings(self):
        assert open_f1("alpha beta", "gamma delta") == 0.0

    def test_hand_computed_four_sevenths(self):
        # prediction {a,b,c,d}, gold {a,b,e}: P=1/2, R=2/3, F1=4/7
        assert open_f1("a b c d", "a b e") == pytest.approx(4 / 7, abs=1e-15)

    def test_both_empty_after_normalization(self):
        assert open_f1("...", "!!!") == 1.0

    def test_one_empty_scores_zero(self):
        assert open_f1("", "words here") == 0.0
        assert open_f1("words here", "") == 0.0

    def test_multiset_not_set(self):
        # prediction repeats a token; multiset TP counts it once per copy
        # pred {a,a}, gold {a}: TP=1, FP=1, FN=0 -> P=1/2, R=1, F1=2/3
        assert open_f1("a a", "a") == pytest.approx(2 / 3, abs=1e-15)

    def test_symmetry(self):
        assert open_f1("a b c d", "a b e") == open_f1("a b e", "a b c d")

    def test_normalization_shared(self):
        assert open_f1("Orange, spots!", "orange spots") == 1.0

    @settings(max_examples=200)
    @given(st.integers(0, 40), st.integers(0, 40), st.integers(0, 40))
    def test_algebraic_identity_of_formulas(self, tp, fp, fn):
        from fractions import Fraction

        lhs = f1_from_counts(tp, fp, fn)
        if tp == 0:
            assert lhs == 0.0
        else:
            rhs = Fraction(2 * tp, 2 * tp + fp + fn)
            assert abs(lhs - float(rhs)) <= 1e-12


class TestClosedAccuracy:
    def test_all_correct(self):
        assert closed_accuracy(["yes", "no"], ["yes", "no"]) == 1.0

    def test_hand_confusion_counts(self):
        # TP=2, TN=3, FP=1, FN=2 over 8 items -> 5/8
        preds = ["yes", "yes", "yes", "no", "no", "no", "no", "no"]
        golds = ["yes", "yes", "no", "no", "no", "no", "yes", "yes"]
        assert closed_accuracy(preds, golds) == 0.625

    def test_all_maybe_scores_zero_and_logs(self, caplog):
        with caplog.at_level(logging.WARNING):
            assert closed_accuracy(["maybe", "maybe"], ["yes", "no"]) == 0.0
        assert "2/2 closed predictions failed normalization" in caplog.text

    def test_normalization_tolerates_case_and_punct(self):
        assert closed_accuracy(["Yes.", "NO"], ["yes", "no"]) == 1.0

    def test_length_mismatch(self):
        with pytest.raises(ValidationError, match="differ in length"):
            closed_accuracy(["yes"], ["yes", "no"])

    def test_invalid_gold_raises(self):
        with pytest.raises(ValidationError, match="gold"):
            closed_accuracy(["yes"], ["maybe"])

    def test_equals_exact_match_rate(self):
        rng = random.Random(5)
        preds = [rng.choice(["yes", "no", "maybe"]) for _ in range(100)]
        golds = [rng.choice(["yes", "no"]) for _ in range(100)]
        from agrocorpus.textnorm import normalize_closed

        exact = sum(
            1 for p, g in zip(preds, golds) if normalize_closed(p) == normalize_closed(g)
        ) / 100
        assert closed_accuracy(preds, golds) == exact


class TestParseJudgeVerdict:
    def test_basic(self):
        verdict = parse_judge_verdict("Scores: 7 9\nGood detail.", "i1")
        assert (verdict.score_candidate, verdict.score_reference) == (7, 9)
        assert verdict.explanation == "Good detail."

    def test_out_of_range(self):
        with pytest.raises(ParseError, match="outside 1..10"):
            parse_judge_verdict("Scores: 11 9", "i1")

    def test_missing_score(self):
        with pytest.raises(ParseError, match="exactly 2 scores"):
            parse_judge_verdict("Scores: 7", "i1")

    def test_extra_scores(self):
        with pytest.raises(ParseError, match="exactly 2 scores"):
            parse_judge_verdict("Scores: 7 8 9", "i1")

    def test_non_numeric(self):
        with pytest.raises(ParseError, match="non-numeric"):
            parse_judge_verdict("Scores: seven nine", "i1")

    def test_missing_prefix(self):
        with pytest.raises(ParseError, match="first line"):
            parse_judge_verdict("7 9", "i1")

    def test_candidate_first_flag_swaps_assignment(self):
        swapped = parse_judge_verdict("Scores: 7 9", "i1", candidate_first=False)
        assert (swapped.score_candidate, swapped.score_reference) == (9, 7)

    def test_leading_blank_lines_tolerated(self):
        verdict = parse_judge_verdict("\n\nScores: 3 4\nwhy", "i1")
        assert verdict.score_candidate == 3

    def test_fuzz_never_raises_anything_but_parse_error(self):
        rng = random.Random(17)
        bits = ["Scores:", "scores:", "7", "9", "11", "-1", "x", "\n", " ", ":"]
        for _ in range(10_000):
            if rng.random() < 0.5:
                blob = "".join(rng.choice(bits) for _ in range(rng.randint(0, 8)))
            else:
                blob = rng.randbytes(rng.randint(0, 30)).decode("latin-1")
            try:
                verdict = parse_judge_verdict(blob, "fuzz")
                verdict.validate()
            except ParseError:
                pass


class TestJudgePrompt:
    def test_contains_all_four_criteria(self):
        prompt = build_judge_prompt("q?", "{}", "a", "b")
        for criterion in JUDGE_CRITERIA:
            assert criterion in prompt.system_text

    def test_identical_answers_still_emitted(self):
        prompt = build_judge_prompt("q?", "{}", "same", "same")
        assert prompt.user_text.count("same") == 2

    def test_order_swap_swaps_answers_only(self):
        forward = build_judge_prompt("q?", "{}", "AAA", "BBB")
        backward = build_judge_prompt("q?", "{}", "BBB", "AAA")
        assert forward.system_text == backward.system_text
        assert forward.user_text.index("AAA") < forward.user_text.index("BBB")
        assert backward.user_text.index("BBB") < backward.user_text.index("AAA")


class TestReferenceAnswers:
    def test_replay_deterministic(self, tmp_path, leaf_record):
        from agrocorpus.teacher import ReplayBackend

        backend = ReplayBackend(tmp_path)
        prompt = build_reference_prompt(leaf_record, "how to control it?")
        backend.store(prompt, "Remove nearby juniper hosts.")
        first = build_reference_answer(leaf_record, "how to control it?", backend)
        second = build_reference_answer(leaf_record, "how to control it?", backend)
        assert first == second == "Remove nearby juniper hosts."

    def test_empty_section_flagged_in_log(self, caplog, leaf_record):
        import dataclasses

        gap = dataclasses.replace(
            leaf_record, sections={**leaf_record.sections, "control": ""}
        )
        backend = RecordingBackend(response="anyway answered")
        with caplog.at_level(logging.WARNING):
            answer = build_reference_answer(gap, "What control methods exist?", backend)
        assert answer == "anyway answered"
        assert "empty control section" in caplog.text

    def test_distinct_questions_distinct_digests(self, leaf_record):
        first = build_reference_prompt(leaf_record, "q one?")
        second = build_reference_prompt(leaf_record, "q two?")
        assert first.digest() != second.digest()


def verdict(item_id, cand, ref):
    return JudgeVerdict(item_id=item_id, score_candidate=cand,
                        score_reference=ref, explanation="")


class TestRelativeScore:
    def test_identical_scores_give_100_everywhere(self):
        verdicts = [verdict(f"i{k}", s, s) for k, s in enumerate([3, 7, 10, 1])]
        kinds = {f"i{k}": ("disease" if k % 2 else "pest") for k in range(4)}
        report = relative_score(verdicts, kinds)
        assert report.overall == 100.0
        assert all(v == 100.0 for v in report.by_kind.values())

    def test_hand_computed_three_verdict_example(self):
        verdicts = [
            verdict("d1", 5, 10),
            verdict("d2", 6, 10),
            verdict("p1", 4, 10),
        ]
        kinds = {"d1": "disease", "d2": "disease", "p1": "pest"}
        report = relative_score(verdicts, kinds)
        assert report.by_kind["disease"] == pytest.approx(55.0)
        assert report.by_kind["pest"] == pytest.approx(40.0)
        assert report.overall == pytest.approx(50.0)
        assert report.n_items == {"disease": 2, "pest": 1}

    def test_overall_is_pooled_not_mean_of_kinds(self):
        verdicts = [verdict("d1", 10, 10), verdict("p1", 1, 10), verdict("p2", 1, 10)]
        kinds = {"d1": "disease", "p1": "pest", "p2": "pest"}
        report = relative_score(verdicts, kinds)
        assert report.overall == pytest.approx(100.0 * 12 / 30)

    def test_permutation_invariance(self):
        base = [verdict("a", 5, 10), verdict("b", 7, 8), verdict("c", 2, 9),
                verdict("d", 10, 10)]
        kinds = {"a": "disease", "b": "pest", "c": "disease", "d": "pest"}
        reports = {
            str(relative_score(list(perm), kinds).to_dict())
            for perm in itertools.permutations(base)
        }
        assert len(reports) == 1

    def test_mean_of_ratios_flag(self):
        verdicts = [verdict("a", 5, 10), verdict("b", 9, 9)]
        kinds = {"a": "disease", "b": "disease"}
        report = relative_score(verdicts, kinds, agg="mean_of_ratios")
        assert report.by_kind["disease"] == pytest.approx(100.0 * (0.5 + 1.0) / 2)

    def test_missing_kind_mapping_rejected(self):
        with pytest.raises(ValidationError, match="no kind mapping"):
            relative_score([verdict("a", 5, 10)], {})

    def test_candidate_can_outscore_reference(self):
        report = relative_score([verdict("a", 10, 1)], {"a": "disease"})
        assert report.overall == pytest.approx(1000.0)

    def test_rounded_to_one_decimal(self):
        report = relative_score(
            [verdict("a", 5, 9)], {"a": "disease"}
        )
        assert report.rounded()["overall"] == round_half_away(100 * 5 / 9, 1)

    def test_constructed_set_reaching_55_4_overall(self):
        # 100 verdicts, references all 10: candidate points 54*6 + 46*5 = 554,
        # so the pooled ratio of sums lands exactly on 55.4%
        verdicts = [verdict(f"v{i}", 6 if i < 54 else 5, 10) for i in range(100)]
        kinds = {f"v{i}": ("pest" if i % 5 == 0 else "disease") for i in range(100)}
        report = relative_score(verdicts, kinds)
        assert report.rounded()["overall"] == 55.4
        assert report.overall == pytest.approx(55.4, abs=1e-12)


class TestVQAReport:
    def test_perfect_predictions(self):
        pairs = [(open_item(0, "a b"), "a b"), (closed_item(1, "yes"), "yes")]
        report = vqa_report(pairs)
        assert report.open_f1_percent == 100.0
        assert report.closed_accuracy_percent == 100.0
        assert report.average_percent == 100.0

    def test_documented_table_row_consistency(self):
        # open macro mean 3077/10000, closed 2233/2500 -> rounded 30.77 and
        # 89.32; the displayed average is their decimal mean 60.045 -> 60.05
        pairs = []
        for i in range(10_000):
            gold = "token match here"
            pred = gold if i < 3077 else "zz qq"
            pairs.append((open_item(i, gold), pred))
        for i in range(2500):
            gold = "yes"
            pred = "yes" if i < 2233 else "no"
            pairs.append((closed_item(i + 10_000, gold), pred))
        report = vqa_report(pairs)
        rounded = report.rounded()
        assert rounded["open_f1_percent"] == 30.77
        assert rounded["closed_accuracy_percent"] == 89.32
        assert rounded["average_percent"] == 60.05
        assert report.average_percent == pytest.approx(60.045, abs=5e-3)

    def test_average_is_mean_of_components(self):
        pairs = [(open_item(0, "a b c"), "a b"), (closed_item(1, "yes"), "no")]
        report = vqa_report(pairs)
        assert report.average_percent == pytest.approx(
            (report.open_f1_percent + report.closed_accuracy_percent) / 2, abs=5e-3
        )

    def test_zero_closed_items_average_undefined(self):
        report = vqa_report([(open_item(0, "a"), "a")])
        assert report.closed_accuracy_percent is None
        assert report.average_percent is None
        assert report.to_dict()["average_defined"] is False

    def test_zero_open_items_average_undefined(self):
        report = vqa_report([(closed_item(0, "yes"), "yes")])
        assert report.open_f1_percent is None
        assert report.average_percent is None

    def test_duplicate_item_ids_rejected(self):
        item = open_item(0, "a")
        with pytest.raises(ValidationError, match="duplicate item_id"):
            vqa_report([(item, "a"), (item, "b")])

    def test_per_theme_breakdown(self):
        pairs = [
            (open_item(0, "a b", theme="causes"), "a b"),
            (open_item(1, "a b", theme="transmission"), "zz"),
            (closed_item(2, "yes", theme="causes"), "yes"),
        ]
        report = vqa_report(pairs)
        assert report.per_theme["causes"]["open_f1_percent"] == 100.0
        assert report.per_theme["causes"]["closed_accuracy_percent"] == 100.0
        assert report.per_theme["transmission"]["open_f1_percent"] == 0.0
        assert report.per_theme["transmission"]["closed_accuracy_percent"] is None

    def test_micro_flag_changes_aggregation(self):
        pairs = [
            (open_item(0, "a"), "a"),
            (open_item(1, "b c d e f g h i j k"), "zz"),
        ]
        macro = vqa_report(pairs, f1_average="macro")
        micro = vqa_report(pairs, f1_average="micro")
        assert macro.open_f1_percent == pytest.approx(50.0)
        # micro pools counts: TP=1, FP=1, FN=10 -> 2TP/(2TP+FP+FN) = 2/13
        assert micro.open_f1_percent == pytest.approx(100 * 2 / 13)

    def test_brute_force_recomputation_on_random_sets(self):
        rng = random.Random(31)
        vocab = ["spot", "leaf", "wilt", "mold", "rot", "stem"]
        pairs = []
        for i in range(300):
            if rng.random() < 0.5:
                gold = " ".join(rng.choices(vocab, k=rng.randint(1, 5)))
                pred = " ".join(rng.choices(vocab, k=rng.randint(0, 5)))
                pairs.append((open_item(i, gold), pred))
            else:
                pairs.append((closed_item(i, rng.choice(["yes", "no"])),
                              rng.choice(["yes", "no", "maybe"])))
        report = vqa_report(pairs)

        def oracle_f1(pred, gold):
            from fractions import Fraction

            pred_toks = gold_toks = None
            pred_toks = pred.lower().split()
            gold_toks = gold.lower().split()
            remaining = list(gold_toks)
            tp = 0
            for tok in pred_toks:
                if tok in remaining:
                    remaining.remove(tok)
                    tp += 1
            fp, fn = len(pred_toks) - tp, len(gold_toks) - tp
            if not pred_toks and not gold_toks:
                return Fraction(1)
            if tp == 0:
                return Fraction(0)
            precision = Fraction(tp, tp + fp)
            recall = Fraction(tp, tp + fn)
            return 2 * precision * recall / (precision + recall)

        open_pairs = [(i, p) for i, p in pairs if i.answer_type == "open"]
        closed_pairs = [(i, p) for i, p in pairs if i.answer_type == "closed"]
        expected_open = 100 * sum(oracle_f1(p, i.gold_answer) for i, p in open_pairs) \
            / len(open_pairs)
        assert report.open_f1_percent == pytest.approx(float(expected_open), abs=1e-12)
        expected_closed = 100 * sum(
            1 for i, p in closed_pairs if p in ("yes", "no") and p == i.gold_answer
        ) / len(closed_pairs)
        assert report.closed_accuracy_percent == pytest.approx(expected_closed, abs=1e-12)


class TestEvaluateChatbot:
    def make_bench(self, leaf_record):
        from agrocorpus.corpus_model import ConversationSample, ConversationTurn

        image = ImageRef.build("apple", "apple rust", "disease", 1, "aa" * 32)
        sample = ConversationSample(
            image=image,
            turns=(
                ConversationTurn("human", "what is wrong?", has_image_slot=True),
                ConversationTurn("assistant", "Orange spots appear."),
                ConversationTurn("human", "how to control?"),
                ConversationTurn("assistant", "Remove juniper hosts."),
            ),
            origin="bench_chatbot",
        )
        return [sample]

    def test_items_are_rounds_with_stable_ids(self, leaf_record):
        items = chatbot_items(self.make_bench(leaf_record))
        assert [i["item_id"] for i in items] == [
            "apple_apple rust_1.jpg#r1", "apple_apple rust_1.jpg#r2",
        ]

    def test_end_to_end_with_recording_backend(self, leaf_record):
        backend = RecordingBackend("Scores: 5 10\nref better")
        samples = self.make_bench(leaf_record)
        preds = {
            "apple_apple rust_1.jpg#r1": "some spots",
            "apple_apple rust_1.jpg#r2": "remove hosts",
        }
        report, verdicts = evaluate_chatbot(
            samples, preds, KnowledgeIndex([leaf_record]), backend
        )
        assert report.overall == pytest.approx(50.0)
        assert len(verdicts) == 2
        assert backend.request_count == 2
        # candidate answer appears before the bench reference in the prompt
        assert backend.prompts[0].user_text.index("some spots") < \
            backend.prompts[0].user_text.index("Orange spots appear.")

    def test_missing_prediction_names_first_offender(self, leaf_record):
        with pytest.raises(ValidationError, match="apple_apple rust_1.jpg#r1"):
            evaluate_chatbot(self.make_bench(leaf_record), {},
                             KnowledgeIndex([leaf_record]), RecordingBackend())

    def test_references_file_overrides_bench_turns(self, leaf_record):
        backend = RecordingBackend("Scores: 5 10\nok")
        samples = self.make_bench(leaf_record)
        preds = {
            "apple_apple rust_1.jpg#r1": "p1",
            "apple_apple rust_1.jpg#r2": "p2",
        }
        refs = {
            "apple_apple rust_1.jpg#r1": "OVERRIDDEN reference one",
        }
        evaluate_chatbot(samples, preds, KnowledgeIndex([leaf_record]), backend,
                         references=refs)
        assert "OVERRIDDEN reference one" in backend.prompts[0].user_text
        # the second item falls back to the bench's own assistant turn
        assert "Remove juniper hosts." in backend.prompts[1].user_text

    def test_swap_order_reverses_prompt_and_parsing(self, leaf_record):
        backend = RecordingBackend("Scores: 9 5\nfirst listed wins")
        samples = self.make_bench(leaf_record)
        preds = {
            "apple_apple rust_1.jpg#r1": "candidate text",
            "apple_apple rust_1.jpg#r2": "candidate text",
        }
        report, verdicts = evaluate_chatbot(
            samples, preds, KnowledgeIndex([leaf_record]), backend,
            candidate_first=False,
        )
        assert backend.prompts[0].user_text.index("Orange spots appear.") < \
            backend.prompts[0].user_text.index("candidate text")
        assert verdicts[0].score_candidate == 5
        assert verdicts[0].score_reference == 9


class TestRounding:
    def test_half_away_from_zero(self):
        assert round_half_away(60.045, 2) == 60.05
        assert round_half_away(0.125, 2) == 0.13
        assert round_half_away(-0.125, 2) == -0.13
        assert round_half_away(55.44, 1) == 55.4
        assert round_half_away(55.45, 1) == 55.5

    def test_tables_render(self):
        report = relative_score(
            [verdict("a", 5, 10), verdict("b", 4, 10)],
            {"a": "disease", "b": "pest"},
        )
        table = render_chatbot_table(report)
        assert "Disease" in table and "Pest" in table and "Overall" in table
        vqa = vqa_report([(open_item(0, "a"), "a"), (closed_item(1, "yes"), "yes")])
        assert "Open" in render_vqa_table(vqa)
