import random
from collections import Counter

import pytest

from agrocorpus.align import (
    AlignConfig,
    TemplatePool,
    first_sentences,
    generate_alignment_corpus,
    generate_alignment_sample,
    load_template_pool,
    render_training_text,
    template_pool_to_json,
)
from agrocorpus.cleaner import check_contains_required_word, grounding_score
from agrocorpus.corpus_model import (
    ImageRef,
    dumps_bytes,
    serialize_samples,
    write_artifact,
)
from agrocorpus.errors import ValidationError


def singleton_pool():
    return TemplatePool(
        describe_pool=("Describe the image briefly.",),
        identify_pool=("Which pest or disease is this?",),
    )


class TestTemplatePool:
    def test_default_pool_valid(self):
        TemplatePool().validate()

    def test_describe_template_must_mention_image(self):
        pool = TemplatePool(describe_pool=("Describe the picture.",))
        with pytest.raises(ValidationError, match="lacks the word 'image'"):
            pool.validate()

    def test_imagery_is_not_the_word_image(self):
        pool = TemplatePool(describe_pool=("Describe the imagery.",))
        with pytest.raises(ValidationError, match="lacks the word 'image'"):
            pool.validate()

    def test_stop_token_in_template_rejected(self):
        pool = TemplatePool(
            describe_pool=("Describe the ### image.",), stop_token="###"
        )
        with pytest.raises(ValidationError, match="stop_token"):
            pool.validate()

    def test_duplicate_templates_rejected(self):
        pool = TemplatePool(identify_pool=("Name it.", "Name it."))
        with pytest.raises(ValidationError, match="duplicates"):
            pool.validate()

    def test_load_from_file(self, tmp_path):
        path = tmp_path / "templates.json"
        write_artifact(path, dumps_bytes(template_pool_to_json(TemplatePool())))
        assert load_template_pool(path) == TemplatePool()


class TestGeneration:
    def test_singleton_pools_force_questions(self, leaf_image, leaf_record):
        pool = singleton_pool()
        for seed in (0, 1, 99):
            sample = generate_alignment_sample(leaf_image, leaf_record, pool, seed)
            assert sample.turns[0].text == "Describe the image briefly."
            assert sample.turns[2].text == "Which pest or disease is this?"

    def test_structure(self, leaf_image, leaf_record):
        sample = generate_alignment_sample(leaf_image, leaf_record, singleton_pool(), 0)
        assert sample.origin == "alignment"
        assert [t.speaker for t in sample.turns] == ["human", "assistant",
                                                     "human", "assistant"]
        assert sample.turns[0].has_image_slot
        assert sample.violations() == []

    def test_same_inputs_byte_identical(self, leaf_image, leaf_record):
        pool = TemplatePool()
        first = generate_alignment_sample(leaf_image, leaf_record, pool, 42)
        second = generate_alignment_sample(leaf_image, leaf_record, pool, 42)
        assert serialize_samples([first]) == serialize_samples([second])

    def test_answers_come_from_knowledge(self, leaf_image, leaf_record):
        sample = generate_alignment_sample(leaf_image, leaf_record, TemplatePool(), 5)
        a1, a2 = sample.turns[1].text, sample.turns[3].text
        assert a1 == first_sentences(leaf_record.sections["symptoms"], 2)
        assert a2 == f"{leaf_record.name}. {leaf_record.sections['symptoms']}"
        assert leaf_record.name in a2
        assert grounding_score(a1, leaf_record) == 1.0
        assert grounding_score(a2, leaf_record) == 1.0

    def test_first_question_passes_required_word_check(self, leaf_image, leaf_record):
        sample = generate_alignment_sample(leaf_image, leaf_record, TemplatePool(), 5)
        assert check_contains_required_word(sample) == []

    def test_answer_sentence_limit(self, leaf_image, leaf_record):
        config = AlignConfig(answer_sentence_limit=1)
        sample = generate_alignment_sample(leaf_image, leaf_record, TemplatePool(), 5,
                                           config)
        assert sample.turns[1].text == \
            "Orange spots appear on the upper leaf surface."

    def test_empty_symptoms_rejected(self, leaf_image, leaf_record):
        import dataclasses

        bare = dataclasses.replace(
            leaf_record,
            sections={**leaf_record.sections, "symptoms": ""},
        )
        with pytest.raises(ValidationError, match="symptoms"):
            generate_alignment_sample(leaf_image, bare, TemplatePool(), 0)

    def test_name_mismatch_rejected(self, leaf_record):
        other = ImageRef.build("apple", "apple scab", "disease", 1, "cd" * 32)
        with pytest.raises(ValidationError, match="does not match"):
            generate_alignment_sample(other, leaf_record, TemplatePool(), 0)

    def test_selection_uniform_over_seeds(self, leaf_image, leaf_record):
        pool = TemplatePool()
        assert len(pool.describe_pool) == 8
        counts = Counter(
            generate_alignment_sample(leaf_image, leaf_record, pool, seed).turns[0].text
            for seed in range(10_000)
        )
        for template in pool.describe_pool:
            assert abs(counts[template] / 10_000 - 0.125) <= 0.02

    def test_corpus_skips_and_order(self, leaf_record):
        images = [
            ImageRef.build("apple", "apple rust", "disease", 1, "aa" * 32),
            ImageRef.build("rice", "healthy", "healthy", 1, "bb" * 32),
            ImageRef.build("apple", "unknown rot", "disease", 1, "cc" * 32),
            ImageRef.build("apple", "apple rust", "disease", 2, "dd" * 32),
        ]
        samples, skipped = generate_alignment_corpus(images, [leaf_record],
                                                     TemplatePool(), 3)
        assert [s.image.file_name for s in samples] == [
            "apple_apple rust_1.jpg", "apple_apple rust_2.jpg",
        ]
        assert [name for name, _ in skipped] == [
            "rice_healthy_1.jpg", "apple_unknown rot_1.jpg",
        ]


class TestRenderTrainingText:
    def test_exactly_four_stop_tokens(self, leaf_image, leaf_record):
        sample = generate_alignment_sample(leaf_image, leaf_record, TemplatePool(), 0)
        rendered = render_training_text(sample, "###")
        assert rendered.count("###") == 4
        assert rendered.startswith("Human:")
        assert ",<image>###" in rendered

    def test_layout(self, leaf_image, leaf_record):
        sample = generate_alignment_sample(leaf_image, leaf_record, singleton_pool(), 0)
        q1, a1, q2, a2 = (t.text for t in sample.turns)
        assert render_training_text(sample, "$") == \
            f"Human:{q1},<image>$Assistant:{a1}$Human:{q2}$Assistant:{a2}$"

    def test_stop_token_inside_turn_rejected(self, leaf_image, leaf_record):
        sample = generate_alignment_sample(leaf_image, leaf_record, TemplatePool(), 0)
        with pytest.raises(ValidationError, match="occurs inside turn"):
            render_training_text(sample, "the")

    def test_non_alignment_sample_rejected(self, leaf_image, leaf_record):
        import dataclasses

        sample = generate_alignment_sample(leaf_image, leaf_record, TemplatePool(), 0)
        wrong = dataclasses.replace(sample, origin="instruction")
        with pytest.raises(ValidationError, match="alignment"):
            render_training_text(wrong)

    def test_injective_over_random_corpus(self):
        # Distinct samples (by turn texts) must render to distinct strings,
        # provided the stop token never occurs in content.
        rng = random.Random(404)
        words = ["spots", "wilt", "mold", "rust", "larvae", "lesions", "halo",
                 "rot", "curl", "scab"]

        def text():
            return " ".join(rng.choice(words) for _ in range(rng.randint(1, 6)))

        renders: dict[str, tuple] = {}
        image = ImageRef.build("apple", "apple rust", "disease", 1, "aa" * 32)
        for _ in range(10_000):
            from agrocorpus.corpus_model import ConversationSample, ConversationTurn

            key = (f"{text()} image", text(), text(), text())
            sample = ConversationSample(
                image=image,
                turns=(
                    ConversationTurn("human", key[0], has_image_slot=True),
                    ConversationTurn("assistant", key[1]),
                    ConversationTurn("human", key[2]),
                    ConversationTurn("assistant", key[3]),
                ),
                origin="alignment",
            )
            rendered = render_training_text(sample, "###")
            assert renders.setdefault(rendered, key) == key

