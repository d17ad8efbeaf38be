"""Synthetic scene model, ground-truth answer oracle, and the patch tool API.

Scenes stand in for images: each object carries a box on a fixed 224x224
canvas, a noun name, one attribute per attribute class, and a depth value.
All tool calls made by visual programs resolve against this scene graph, so
program outputs can be checked exactly.

Coordinates are y-up: ``lower < upper`` and "above" means a larger vertical
center.
"""

from __future__ import annotations

import math
import random
import re
from dataclasses import dataclass
from hashlib import sha256
from pathlib import Path
from typing import Iterable, Sequence

from .errors import SceneLookupError, SchemaError
from .jsonlio import read_json, write_json

CANVAS = (224, 224)

NOUNS = [
    "muffin", "cup", "plate", "dog", "cat", "book", "bottle", "phone",
    "laptop", "fork", "spoon", "apple", "chair", "lamp",
]

ATTRIBUTE_CLASSES = {
    "color": ["red", "blue", "green", "yellow", "white", "black"],
    "material": ["wooden", "metal", "plastic", "ceramic"],
    "size": ["small", "large"],
}

PREDICATES = ["on", "under", "near", "behind", "beside"]


@dataclass(frozen=True)
class SceneObject:
    id: str
    name: str
    box: tuple[int, int, int, int]  # (left, lower, right, upper) px
    attributes: frozenset[str]
    depth: float

    @property
    def center(self) -> tuple[float, float]:
        l, lo, r, u = self.box
        return ((l + r) / 2, (lo + u) / 2)


@dataclass(frozen=True)
class Scene:
    scene_id: str
    objects: tuple[SceneObject, ...]
    relations: tuple[tuple[str, str, str], ...]  # (subject_id, predicate, object_id)
    canvas: tuple[int, int] = CANVAS

    def object_by_id(self, oid: str) -> SceneObject:
        for obj in self.objects:
            if obj.id == oid:
                return obj
        raise SceneLookupError(f"no object {oid!r} in scene {self.scene_id!r}")


@dataclass(frozen=True)
class Patch:
    """A rectangular region of a scene, optionally matched to an object."""

    scene_ref: str
    box: tuple[int, int, int, int]
    matched_object: str | None = None

    @property
    def left(self) -> int:
        return self.box[0]

    @property
    def lower(self) -> int:
        return self.box[1]

    @property
    def right(self) -> int:
        return self.box[2]

    @property
    def upper(self) -> int:
        return self.box[3]

    @property
    def width(self) -> int:
        return self.box[2] - self.box[0]

    @property
    def height(self) -> int:
        return self.box[3] - self.box[1]

    @property
    def horizontal_center(self) -> float:
        return (self.box[0] + self.box[2]) / 2

    @property
    def vertical_center(self) -> float:
        return (self.box[1] + self.box[3]) / 2


@dataclass(frozen=True)
class Query:
    query_id: str
    scene_id: str
    question: str
    expected_answer: str


@dataclass
class ToolConfig:
    """Detector-noise knob: flips exists/verify_property results with
    probability ``noise_p``, seeded and deterministic per call site."""

    noise_p: float = 0.0
    noise_seed: int = 0

    def flips(self, *key_parts: object) -> bool:
        if self.noise_p <= 0.0:
            return False
        key = "|".join(str(p) for p in key_parts) + f"|{self.noise_seed}"
        digest = sha256(key.encode("utf-8")).digest()
        draw = int.from_bytes(digest[:8], "big") / 2**64
        return draw < self.noise_p


def full_canvas_patch(scene: Scene) -> Patch:
    w, h = scene.canvas
    return Patch(scene_ref=scene.scene_id, box=(0, 0, w, h))


# ---------------------------------------------------------------------------
# validation / persistence

def _validate_box(box: Sequence[int], where: str) -> tuple[int, int, int, int]:
    if len(box) != 4 or not all(isinstance(v, (int, float)) for v in box):
        raise SchemaError(f"{where}: box must be four numbers")
    l, lo, r, u = (int(v) for v in box)
    if not (0 <= l < r <= CANVAS[0]):
        raise SchemaError(f"{where}: box horizontal extent invalid ({l}, {r})")
    if not (0 <= lo < u <= CANVAS[1]):
        raise SchemaError(f"{where}: box vertical extent invalid ({lo}, {u})")
    return (l, lo, r, u)


def scene_from_record(rec: dict) -> Scene:
    for key in ("scene_id", "objects", "relations"):
        if key not in rec:
            raise SchemaError(f"scene record missing field {key!r}")
    sid = rec["scene_id"]
    objects = []
    seen_ids: set[str] = set()
    for obj in rec["objects"]:
        for key in ("id", "name", "box", "attributes", "depth"):
            if key not in obj:
                raise SchemaError(f"scene {sid!r}: object missing field {key!r}")
        if not obj["name"]:
            raise SchemaError(f"scene {sid!r}: object {obj['id']!r} has empty name")
        if obj["id"] in seen_ids:
            raise SchemaError(f"scene {sid!r}: duplicate object id {obj['id']!r}")
        seen_ids.add(obj["id"])
        attrs = obj["attributes"]
        if len(attrs) != len(set(attrs)):
            raise SchemaError(f"scene {sid!r}: object {obj['id']!r} has duplicate attributes")
        depth = float(obj["depth"])
        if not math.isfinite(depth) or depth < 0:
            raise SchemaError(f"scene {sid!r}: object {obj['id']!r} depth must be finite and >= 0")
        objects.append(
            SceneObject(
                id=obj["id"],
                name=obj["name"],
                box=_validate_box(obj["box"], f"scene {sid!r} object {obj['id']!r}"),
                attributes=frozenset(attrs),
                depth=depth,
            )
        )
    relations = []
    for rel in rec["relations"]:
        if len(rel) != 3:
            raise SchemaError(f"scene {sid!r}: relation must be [subject, predicate, object]")
        subj, pred, obj_id = rel
        if subj not in seen_ids or obj_id not in seen_ids:
            raise SchemaError(f"scene {sid!r}: relation endpoint missing from objects")
        relations.append((subj, pred, obj_id))
    return Scene(scene_id=sid, objects=tuple(objects), relations=tuple(relations))


def scene_to_record(scene: Scene) -> dict:
    return {
        "scene_id": scene.scene_id,
        "objects": [
            {
                "id": o.id,
                "name": o.name,
                "box": list(o.box),
                "attributes": sorted(o.attributes),
                "depth": o.depth,
            }
            for o in scene.objects
        ],
        "relations": [list(r) for r in scene.relations],
    }


def load_scenes(path: str | Path) -> list[Scene]:
    """Load and validate a scenes.json file (top-level list of records)."""
    raw = read_json(path)
    if not isinstance(raw, list):
        raise SchemaError("scenes file must hold a top-level list")
    scenes = []
    seen: set[str] = set()
    for rec in raw:
        scene = scene_from_record(rec)
        if scene.scene_id in seen:
            raise SchemaError(f"duplicate scene_id {scene.scene_id!r}")
        seen.add(scene.scene_id)
        scenes.append(scene)
    return scenes


def save_scenes(path: str | Path, scenes: Iterable[Scene]) -> None:
    write_json(path, [scene_to_record(s) for s in scenes])


# ---------------------------------------------------------------------------
# generation

def generate_scenes(n: int, seed: int) -> list[Scene]:
    """Deterministically generate ``n`` scenes with 2-8 objects each.

    Object centers are pairwise distinct in both coordinates, which makes
    spatial comparisons strict, and every object carries exactly one
    attribute from each attribute class.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = random.Random(seed)
    scenes = []
    for i in range(n):
        sid = f"scene_{i:04d}"
        count = rng.randint(2, 8)
        # A small per-scene name pool makes repeated nouns common, so
        # counting loops usually iterate more than once.
        pool = rng.sample(NOUNS, max(2, count // 2 + 1))
        xs = rng.sample(range(20, 205), count)
        ys = rng.sample(range(20, 205), count)
        objects = []
        for j in range(count):
            cx, cy = xs[j], ys[j]
            half_w = rng.randint(5, min(30, cx, CANVAS[0] - cx))
            half_h = rng.randint(5, min(30, cy, CANVAS[1] - cy))
            attrs = frozenset(
                rng.choice(values) for values in ATTRIBUTE_CLASSES.values()
            )
            objects.append(
                SceneObject(
                    id=f"o{j}",
                    name=rng.choice(pool),
                    box=(cx - half_w, cy - half_h, cx + half_w, cy + half_h),
                    attributes=attrs,
                    depth=round(rng.uniform(0.5, 10.0), 3),
                )
            )
        relations = []
        n_rel = rng.randint(1, min(3, count))
        for _ in range(n_rel):
            subj, obj = rng.sample(objects, 2)
            pred = rng.choice(PREDICATES)
            triple = (subj.id, pred, obj.id)
            if triple not in relations:
                relations.append(triple)
        scenes.append(Scene(scene_id=sid, objects=tuple(objects), relations=tuple(relations)))
    return scenes


# ---------------------------------------------------------------------------
# patch tool API

def _check_patch(scene: Scene, patch: Patch) -> None:
    if patch.scene_ref != scene.scene_id:
        raise SceneLookupError(
            f"patch belongs to scene {patch.scene_ref!r}, not {scene.scene_id!r}"
        )


def _center_inside(obj: SceneObject, patch: Patch) -> bool:
    cx, cy = obj.center
    l, lo, r, u = patch.box
    return l <= cx <= r and lo <= cy <= u


def _find_order(obj: SceneObject) -> tuple:
    return (obj.box[0], obj.box[1], obj.id)


def tool_find(scene: Scene, within: Patch, name: str) -> list[Patch]:
    """Patches for objects named ``name`` whose box center lies inside
    ``within``, ordered by ascending left then lower."""
    _check_patch(scene, within)
    hits = [
        obj
        for obj in scene.objects
        if obj.name.lower() == name.lower() and _center_inside(obj, within)
    ]
    hits.sort(key=_find_order)
    return [Patch(scene_ref=scene.scene_id, box=o.box, matched_object=o.id) for o in hits]


def tool_exists(scene: Scene, within: Patch, name: str, config: ToolConfig | None = None) -> bool:
    result = len(tool_find(scene, within, name)) > 0
    if config is not None and config.flips("exists", scene.scene_id, within.box, name):
        result = not result
    return result


def tool_verify_property(
    scene: Scene, within: Patch, name: str, prop: str, config: ToolConfig | None = None
) -> bool:
    result = any(
        prop.lower() in {a.lower() for a in obj.attributes}
        for obj in scene.objects
        if obj.name.lower() == name.lower() and _center_inside(obj, within)
    )
    if config is not None and config.flips("verify", scene.scene_id, within.box, name, prop):
        result = not result
    return result


def tool_best_text_match(scene: Scene, patch: Patch, options: list[str]) -> str:
    """Option with maximal shared-lowercase-token overlap against the matched
    object's name + attributes; ties break toward the earlier option."""
    _check_patch(scene, patch)
    if not options:
        raise ValueError("best_text_match requires a non-empty options list")
    obj = None
    if patch.matched_object is not None:
        obj = scene.object_by_id(patch.matched_object)
    else:
        contained = sorted(
            (o for o in scene.objects if _center_inside(o, patch)), key=_find_order
        )
        obj = contained[0] if contained else None
    if obj is None:
        return options[0]
    target = {obj.name.lower()} | {a.lower() for a in obj.attributes}
    best, best_score = options[0], -1
    for opt in options:
        score = len(set(opt.lower().split()) & target)
        if score > best_score:
            best, best_score = opt, score
    return best


def tool_simple_query(scene: Scene, patch: Patch, question: str) -> str:
    _check_patch(scene, patch)
    return answer_oracle(scene, question)


def tool_compute_depth(scene: Scene, patch: Patch) -> float:
    """Matched object's depth, else the area-weighted mean depth of objects
    overlapping the patch (0.0 when nothing overlaps)."""
    _check_patch(scene, patch)
    if patch.matched_object is not None:
        return scene.object_by_id(patch.matched_object).depth
    total_area = 0.0
    acc = 0.0
    pl, plo, pr, pu = patch.box
    for obj in scene.objects:
        l, lo, r, u = obj.box
        w = min(r, pr) - max(l, pl)
        h = min(u, pu) - max(lo, plo)
        if w > 0 and h > 0:
            area = w * h
            total_area += area
            acc += area * obj.depth
    return acc / total_area if total_area > 0 else 0.0


def tool_distance(a: Patch, b: Patch) -> float:
    return math.hypot(
        a.horizontal_center - b.horizontal_center,
        a.vertical_center - b.vertical_center,
    )


# ---------------------------------------------------------------------------
# question grammar and answer oracle

_RE_EXISTS = re.compile(r"^is there an? ([a-z ]+)$")
_RE_COUNT = re.compile(r"^how many ([a-z ]+)$")
_RE_ATTR = re.compile(r"^what (color|material|size) is the ([a-z ]+)$")
_RE_SPATIAL = re.compile(r"^is the ([a-z ]+?) (left of|right of|above|below) the ([a-z ]+)$")
_RE_RELATION = re.compile(r"^what is the ([a-z ]+?) (" + "|".join(PREDICATES) + r")$")


def _singular(noun: str) -> str:
    return noun[:-1] if noun.endswith("s") else noun


def _first_named(scene: Scene, name: str) -> SceneObject | None:
    hits = sorted(
        (o for o in scene.objects if o.name.lower() == name.lower()), key=_find_order
    )
    return hits[0] if hits else None


def answer_oracle(scene: Scene, question: str) -> str:
    """Ground-truth answer for the restricted question grammar.

    Supported forms: existence ("is there a X"), counting ("how many Xs"),
    attribute ("what color is the X"), spatial comparison ("is the X left of
    the Y", also right of / above / below), and relation ("what is the X
    on"). Anything else returns the fixed token "unknown".
    """
    q = question.strip().lower().rstrip("?").strip()

    m = _RE_EXISTS.match(q)
    if m:
        name = m.group(1).strip()
        return "yes" if _first_named(scene, name) else "no"

    m = _RE_COUNT.match(q)
    if m:
        name = _singular(m.group(1).strip())
        return str(sum(1 for o in scene.objects if o.name.lower() == name))

    m = _RE_ATTR.match(q)
    if m:
        attr_class, name = m.group(1), m.group(2).strip()
        obj = _first_named(scene, name)
        if obj is None:
            return "unknown"
        for attr in sorted(obj.attributes):
            if attr in ATTRIBUTE_CLASSES[attr_class]:
                return attr
        return "unknown"

    m = _RE_SPATIAL.match(q)
    if m:
        a = _first_named(scene, m.group(1).strip())
        b = _first_named(scene, m.group(3).strip())
        if a is None or b is None:
            return "unknown"
        rel = m.group(2)
        ax, ay = a.center
        bx, by = b.center
        if rel == "left of":
            return "yes" if ax < bx else "no"
        if rel == "right of":
            return "yes" if ax > bx else "no"
        if rel == "above":
            return "yes" if ay > by else "no"
        return "yes" if ay < by else "no"

    m = _RE_RELATION.match(q)
    if m:
        name, pred = m.group(1).strip(), m.group(2)
        subj = _first_named(scene, name)
        if subj is None:
            return "unknown"
        for s, p, o in scene.relations:
            if s == subj.id and p == pred:
                return scene.object_by_id(o).name
        return "unknown"

    return "unknown"


# ---------------------------------------------------------------------------
# query generation (pipeline plumbing: one query per scene)

def _unique_names(scene: Scene) -> list[str]:
    counts: dict[str, int] = {}
    for o in scene.objects:
        counts[o.name] = counts.get(o.name, 0) + 1
    return sorted(n for n, c in counts.items() if c == 1)


def generate_queries(scenes: Sequence[Scene], seed: int) -> list[Query]:
    """One well-posed query per scene, cycling through the five question
    forms; expected answers come from the oracle by construction."""
    rng = random.Random(seed)
    queries = []
    forms = ["count", "exists", "attribute", "spatial", "relation"]
    for i, scene in enumerate(scenes):
        order = forms[i % len(forms):] + forms[: i % len(forms)]
        question = None
        for form in order:
            question = _plan_question(scene, form, rng)
            if question is not None:
                break
        if question is None:  # every scene supports counting, so unreachable
            question = f"how many {scene.objects[0].name}s"
        queries.append(
            Query(
                query_id=f"q{i:04d}",
                scene_id=scene.scene_id,
                question=question,
                expected_answer=answer_oracle(scene, question),
            )
        )
    return queries


def _plan_question(scene: Scene, form: str, rng: random.Random) -> str | None:
    names_present = sorted({o.name for o in scene.objects})
    unique = _unique_names(scene)
    if form == "count":
        name = rng.choice(names_present)
        return f"how many {name}s"
    if form == "exists":
        # Mix present and absent names for yes/no balance.
        pool = names_present if rng.random() < 0.5 else NOUNS
        name = rng.choice(sorted(pool))
        article = "an" if name[0] in "aeiou" else "a"
        return f"is there {article} {name}"
    if form == "attribute":
        if not unique:
            return None
        name = rng.choice(unique)
        attr_class = rng.choice(sorted(ATTRIBUTE_CLASSES))
        return f"what {attr_class} is the {name}"
    if form == "spatial":
        if len(unique) < 2:
            return None
        a, b = rng.sample(unique, 2)
        rel = rng.choice(["left of", "right of", "above", "below"])
        return f"is the {a} {rel} the {b}"
    if form == "relation":
        candidates = []
        for s, p, o in scene.relations:
            subj = scene.object_by_id(s)
            if subj.name not in unique:
                continue
            # Require a unique (subject, predicate) pair for well-posedness.
            if sum(1 for s2, p2, _ in scene.relations if s2 == s and p2 == p) == 1:
                candidates.append((subj.name, p))
        if not candidates:
            return None
        name, pred = rng.choice(sorted(candidates))
        return f"what is the {name} {pred}"
    return None


def load_queries(path: str | Path) -> list[Query]:
    from .jsonlio import read_jsonl

    queries = []
    for i, row in enumerate(read_jsonl(path)):
        for key in ("query_id", "scene_id", "question", "expected_answer"):
            if key not in row:
                raise SchemaError(f"queries row {i}: missing field {key!r}")
        queries.append(Query(**{k: row[k] for k in (
            "query_id", "scene_id", "question", "expected_answer")}))
    return queries


def save_queries(path: str | Path, queries: Iterable[Query]) -> int:
    from .jsonlio import write_jsonl

    return write_jsonl(
        path,
        (
            {
                "query_id": q.query_id,
                "scene_id": q.scene_id,
                "question": q.question,
                "expected_answer": q.expected_answer,
            }
            for q in queries
        ),
    )
