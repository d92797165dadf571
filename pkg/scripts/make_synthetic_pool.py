#!/usr/bin/env python3
"""Generate a deterministic synthetic workspace for pipeline runs.

Writes, under --out-dir:
    knowledge.json        structured knowledge base
    manifest.json         training-image manifest (alignment + instruct pool)
    train_manifest.json   copy used as the disjointness reference
    vqa_pool.json         bench pool: {"manifest": [...], "items": [...]}
    templates.json        alignment template pools
    bench_spec_vqa.json   vqa bench spec sized to the pool
    bench_spec_chatbot.json
    preds_vqa.json        predictions covering every pool item
    preds_chatbot.json    predictions covering every conversation round
    replay/               teacher + judge responses keyed by prompt digest

Everything is a pure function of --seed and the counts, so two runs with the
same arguments produce byte-identical files.
"""

import argparse
import hashlib
import random
import sys
from pathlib import Path

from agrocorpus import align, teacher
from agrocorpus.corpus_model import (
    THEMES,
    ImageRef,
    KnowledgeRecord,
    VQAItem,
    dumps_bytes,
    serialize_vqa,
    write_artifact,
)
from agrocorpus.evaluator import build_judge_prompt
from agrocorpus.knowledge import knowledge_payload, store_knowledge
from agrocorpus.manifest import ManifestEntry, store_manifest

CROPS = ["apple", "rice", "wheat", "tomato", "grape", "potato", "corn", "citrus",
         "soybean", "cucumber", "mango", "tea"]
DISEASE_WORDS = ["leaf spot", "rust", "wilt", "mosaic", "blight", "rot", "mildew", "canker"]
PEST_WORDS = ["aphid", "moth", "beetle", "mite", "weevil", "borer", "thrips", "leafminer"]

SUBJECTS = ["leaves", "stems", "fruit", "roots", "shoots", "ears"]
FEATURES = ["brown lesions", "yellow halos", "dark tunnels", "white powder patches",
            "water soaked spots", "curled edges", "stunted growth", "sticky residue",
            "gray mold layers", "sunken cankers"]
AGENTS = ["a soil borne fungus", "a leaf feeding insect", "a sap sucking insect",
          "a seed borne bacterium", "an airborne virus"]
SPREADS = ["wind and rain splash", "infected seedlings", "contaminated tools",
           "adult flights between fields", "irrigation water"]
CONTROLS = ["rotate crops every season", "remove and burn infected debris",
            "release natural predators", "spray a protectant at first sign",
            "use certified clean seed", "install sticky traps between rows"]

ROUND_QUESTIONS = [
    ("symptoms", "What can be seen on the plant in the image?"),
    ("pathogen", "What causes this problem?"),
    ("transmission", "How does it spread between plants?"),
    ("control", "How can this condition be controlled?"),
    ("symptoms", "Which parts of the plant are affected?"),
    ("control", "What should a grower do first?"),
]

VQA_QUESTIONS = {
    "damaged_organs": ("Which organ of the plant is damaged?", "open"),
    "abnormal_symptoms": ("What abnormal symptoms are visible?", "open"),
    "attributes": ("Is this condition visible on the plant surface?", "closed"),
    "hazards": ("Can this condition reduce the harvest?", "closed"),
    "nomenclature": ("What is the name of this condition?", "open"),
    "causes": ("What causes this condition?", "open"),
    "prevention_control": ("Can this condition be controlled by field management?", "closed"),
    "transmission": ("How does this condition spread?", "open"),
    "other_relevant": ("Does this condition affect more than one crop?", "closed"),
}


def fake_hash(namespace: str, file_name: str) -> str:
    return hashlib.sha256(f"{namespace}|{file_name}".encode("utf-8")).hexdigest()


def make_records(count: int, rng: random.Random) -> list[KnowledgeRecord]:
    records = []
    names = set()
    while len(records) < count:
        crop = rng.choice(CROPS)
        if len(records) % 2 == 0:
            kind, word = "disease", rng.choice(DISEASE_WORDS)
        else:
            kind, word = "pest", rng.choice(PEST_WORDS)
        name = f"{crop} {word}"
        if name in names:
            continue
        names.add(name)
        symptoms = " ".join(
            f"{rng.choice(SUBJECTS).capitalize()} develop {rng.choice(FEATURES)}."
            for _ in range(rng.randint(2, 4))
        )
        sections = {
            "symptoms": symptoms,
            "pathogen": f"Caused by {rng.choice(AGENTS)}.",
            "transmission": f"It spreads through {rng.choice(SPREADS)}.",
            "control": f"Growers should {rng.choice(CONTROLS)} and {rng.choice(CONTROLS)}.",
            "other": "",
        }
        records.append(
            KnowledgeRecord(name=name, kind=kind, crop=crop, sections=sections,
                            provenance="synthetic")
        )
    return records


def make_entries(records, image_count, namespace, rng, healthy_every=0,
                 start_ordinal=1):
    entries = []
    ordinals = {}
    for i in range(image_count):
        if healthy_every and i % healthy_every == healthy_every - 1:
            crop = rng.choice(CROPS)
            key = (crop, "healthy")
            ordinals[key] = ordinals.get(key, start_ordinal - 1) + 1
            ref = ImageRef.build(crop, "healthy", "healthy", ordinals[key],
                                 fake_hash(namespace, f"{crop}|healthy|{ordinals[key]}"))
        else:
            record = records[i % len(records)]
            key = (record.crop, record.name)
            ordinals[key] = ordinals.get(key, start_ordinal - 1) + 1
            ref = ImageRef.build(record.crop, record.name, record.kind, ordinals[key],
                                 fake_hash(namespace, f"{record.crop}|{record.name}|{ordinals[key]}"))
        entries.append(ManifestEntry(image=ref, source_dataset=namespace))
    return entries


def teacher_response(record: KnowledgeRecord, rounds: int) -> str:
    lines = []
    for i in range(rounds):
        section, question = ROUND_QUESTIONS[i % len(ROUND_QUESTIONS)]
        answer = record.sections.get(section, "") or record.sections["symptoms"]
        lines.append(f"Question: {question}")
        lines.append(f"Answer: {answer}")
    return "\n".join(lines)


def make_vqa_items(ref: ImageRef, record: KnowledgeRecord | None,
                   count: int, rng: random.Random) -> list[VQAItem]:
    if record is None:
        theme_pool = ["nomenclature", "attributes"]
    else:
        offset = rng.randrange(len(THEMES))
        theme_pool = [THEMES[(offset + j) % len(THEMES)] for j in range(count)]
    items = []
    for j in range(count):
        theme = theme_pool[j % len(theme_pool)]
        question, answer_type = VQA_QUESTIONS[theme]
        if answer_type == "closed":
            gold = "yes" if rng.random() < 0.7 else "no"
        elif record is None:
            gold = "the plant is healthy"
        elif theme == "nomenclature":
            gold = record.name
        elif theme == "causes":
            gold = record.sections["pathogen"]
        elif theme == "transmission":
            gold = record.sections["transmission"]
        else:
            gold = align.first_sentences(record.sections["symptoms"], 1)
        items.append(
            VQAItem(image=ref, question=question, gold_answer=gold,
                    answer_type=answer_type, theme=theme,
                    item_id=f"{ref.file_name}#q{j + 1}")
        )
    return items


def make_prediction(item: VQAItem, index: int) -> str:
    if item.answer_type == "closed":
        if index % 9 == 0:
            return "maybe"
        if index % 4 == 0:
            return "no" if item.gold_answer == "yes" else "yes"
        return item.gold_answer
    if index % 3 == 0:
        return item.gold_answer
    if index % 3 == 1:
        words = item.gold_answer.split()
        return " ".join(words[: max(1, len(words) // 2)]) + " on the crop"
    return "unrelated speculation about weather"


def judge_response(item_id: str) -> str:
    digest = hashlib.sha256(item_id.encode("utf-8")).digest()
    cand = 4 + digest[0] % 5       # 4..8
    ref = 7 + digest[1] % 3        # 7..9
    return f"Scores: {cand} {ref}\nReference answer tracks the knowledge more closely."


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out-dir", required=True)
    parser.add_argument("--images", type=int, default=60)
    parser.add_argument("--records", type=int, default=24)
    parser.add_argument("--seed", type=int, default=11)
    args = parser.parse_args()

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = random.Random(args.seed)

    records = make_records(args.records, rng)
    write_artifact(out / "knowledge.json", store_knowledge(records))

    train_entries = make_entries(records, args.images, "train", rng, healthy_every=0)
    write_artifact(out / "manifest.json", store_manifest(train_entries))
    write_artifact(out / "train_manifest.json", store_manifest(train_entries))

    # Bench pool: separate hash namespace, fresh ordinals, a few healthy shots.
    pool_entries = make_entries(records, args.images, "bench", rng,
                                healthy_every=10, start_ordinal=1000)
    by_key = {(r.crop, r.name): r for r in records}
    pool_items = []
    for entry in pool_entries:
        ref = entry.image
        record = by_key.get((ref.crop, ref.ailment_name))
        pool_items.append((ref, make_vqa_items(ref, record, rng.randint(4, 5), rng)))
    vqa_pool = {
        "manifest": [e.to_element() for e in pool_entries],
        "items": [
            {
                "image": item.image.file_name,
                "question": item.question,
                "answer": item.gold_answer,
                "answer_type": item.answer_type,
                "theme": item.theme,
                "item_id": item.item_id,
            }
            for _, items in pool_items for item in items
        ],
    }
    write_artifact(out / "vqa_pool.json", dumps_bytes(vqa_pool))

    write_artifact(out / "templates.json",
                   dumps_bytes(align.template_pool_to_json(align.TemplatePool())))

    # Bench specs sized to what the pools actually contain.
    pool_kind_counts = {"disease": 0, "pest": 0, "healthy": 0}
    for entry in pool_entries:
        pool_kind_counts[entry.image.ailment_kind] += 1
    vqa_mix = {k: (2 * v) // 3 for k, v in pool_kind_counts.items()}
    write_artifact(out / "bench_spec_vqa.json", dumps_bytes({
        "target_image_count": sum(vqa_mix.values()),
        "rounds_per_image": [4, 5],
        "kind_mix": vqa_mix,
        "prefer_unseen": True,
        "themes_required": list(THEMES),
    }))
    train_kind_counts = {"disease": 0, "pest": 0, "healthy": 0}
    for entry in train_entries:
        train_kind_counts[entry.image.ailment_kind] += 1
    chat_mix = {k: (2 * v) // 3 for k, v in train_kind_counts.items()}
    write_artifact(out / "bench_spec_chatbot.json", dumps_bytes({
        "target_image_count": sum(chat_mix.values()),
        "rounds_per_image": [4, 6],
        "kind_mix": chat_mix,
        "prefer_unseen": True,
    }))

    # Replay store: teacher conversations keyed by instruct-prompt digest,
    # judge verdicts keyed by judge-prompt digest.
    replay = teacher.ReplayBackend(out / "replay")
    config = teacher.TeacherConfig()
    conversations = {}
    for record in records:
        rounds = 4 + hashlib.sha256(
            f"{args.seed}|{record.name}".encode("utf-8")
        ).digest()[0] % 3
        response = teacher_response(record, rounds)
        conversations[(record.crop, record.name)] = response
        replay.store(teacher.build_instruct_prompt(record, config), response)

    preds_vqa = []
    for i, (_, items) in enumerate(pool_items):
        for item in items:
            preds_vqa.append({
                "item_id": item.item_id,
                "prediction": make_prediction(item, i + len(preds_vqa)),
            })
    write_artifact(out / "preds_vqa.json", dumps_bytes(preds_vqa))

    preds_chatbot = []
    for entry in train_entries:
        ref = entry.image
        record = by_key.get((ref.crop, ref.ailment_name))
        if record is None:
            continue
        response = conversations[(record.crop, record.name)]
        turns = teacher.parse_conversation(response)
        payload = knowledge_payload(record)
        for round_no in range(len(turns) // 2):
            item_id = f"{ref.file_name}#r{round_no + 1}"
            question = turns[2 * round_no].text
            reference = turns[2 * round_no + 1].text
            candidate = align.first_sentences(reference, 1)
            preds_chatbot.append({"item_id": item_id, "prediction": candidate})
            prompt = build_judge_prompt(question, payload, candidate, reference)
            replay.store(prompt, judge_response(item_id))
    write_artifact(out / "preds_chatbot.json", dumps_bytes(preds_chatbot))

    print(f"synthetic workspace written to {out}", file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())
