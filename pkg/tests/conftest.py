from __future__ import annotations

import random

import pytest

from tracedistill.distill import DistillExample
from tracedistill.scenes import Scene, SceneObject, full_canvas_patch

CORRELATION_LABELS = ["red", "blue", "green", "yellow", "white", "black"]


def build_correlation_task(seed: int, n: int = 300, rationale_fraction: float = 0.9):
    """Synthetic task whose rationale keywords carry the answer token.

    Each noun determines a label; questions bury the noun among random
    distractor tokens, and most rows carry a short rationale mentioning the
    answer. Under the tied answer rows, rationale supervision then speeds up
    the label head, which the directional acceptance criterion measures.
    """
    rng = random.Random(seed)
    nouns = [f"obj{i}" for i in range(24)]
    noun_label = {noun: CORRELATION_LABELS[i % len(CORRELATION_LABELS)] for i, noun in enumerate(nouns)}
    pool = [f"blotch{i}" for i in range(40)]
    examples = []
    for i in range(n):
        noun = rng.choice(nouns)
        label = noun_label[noun]
        distractors = rng.sample(pool, 4)
        question = f"what color is the {noun} near the {' and the '.join(distractors)}"
        rationale = f"answer {label}" if rng.random() < rationale_fraction else None
        examples.append(DistillExample(f"q{i}", question, label, rationale))
    return examples


def make_muffin_scene(count: int, scene_id: str = "muffins") -> Scene:
    objs = tuple(
        SceneObject(
            id=f"o{i}",
            name="muffin",
            box=(10 * i + 5, 10, 10 * i + 13, 20),
            attributes=frozenset({"red", "small", "ceramic"}),
            depth=1.0 + i,
        )
        for i in range(count)
    )
    return Scene(scene_id=scene_id, objects=objs, relations=())


@pytest.fixture
def muffins3() -> Scene:
    return make_muffin_scene(3)


@pytest.fixture
def muffins8() -> Scene:
    return make_muffin_scene(8)


@pytest.fixture
def table_scene() -> Scene:
    """Cup left of plate, with a relation and distinct attributes."""
    cup = SceneObject(
        id="cup", name="cup", box=(20, 40, 40, 60), attributes=frozenset({"red", "small", "ceramic"}),
        depth=2.0,
    )
    plate = SceneObject(
        id="plate", name="plate", box=(90, 30, 110, 50),
        attributes=frozenset({"blue", "large", "metal"}), depth=4.0,
    )
    return Scene(scene_id="table", objects=(cup, plate), relations=(("cup", "on", "plate"),))


@pytest.fixture
def canvas(table_scene):
    return full_canvas_patch(table_scene)
