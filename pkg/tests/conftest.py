import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from agrocorpus.corpus_model import ImageRef, KnowledgeRecord  # noqa: E402


@pytest.fixture
def leaf_record():
    return KnowledgeRecord(
        name="apple rust",
        kind="disease",
        crop="apple",
        sections={
            "symptoms": "Orange spots appear on the upper leaf surface. "
            "Spots enlarge and develop black dots in their centers.",
            "pathogen": "Caused by a rust fungus that alternates between hosts.",
            "transmission": "Spores travel on wind currents in spring.",
            "control": "Remove nearby juniper hosts and spray protectant early.",
            "other": "",
        },
        provenance="unit fixture",
    )


@pytest.fixture
def leaf_image(leaf_record):
    return ImageRef.build("apple", "apple rust", "disease", 1, "ab" * 32)
