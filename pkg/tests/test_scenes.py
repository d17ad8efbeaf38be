from __future__ import annotations

import json
import math

import pytest
from hypothesis import given, settings, strategies as st

from tracedistill.errors import SchemaError
from tracedistill.scenes import (
    NOUNS,
    Patch,
    answer_oracle,
    full_canvas_patch,
    generate_queries,
    generate_scenes,
    load_scenes,
    save_scenes,
    tool_best_text_match,
    tool_compute_depth,
    tool_distance,
    tool_exists,
    tool_find,
    tool_simple_query,
    tool_verify_property,
    ToolConfig,
)


def write_scene_file(tmp_path, records):
    path = tmp_path / "scenes.json"
    path.write_text(json.dumps(records))
    return path


GOOD_SCENE = {
    "scene_id": "s0",
    "objects": [
        {"id": "a", "name": "cup", "box": [10, 10, 30, 30], "attributes": ["red"], "depth": 1.0},
        {"id": "b", "name": "plate", "box": [50, 50, 80, 80], "attributes": ["blue"], "depth": 2.0},
    ],
    "relations": [["a", "on", "b"]],
}


class TestLoadScenes:
    def test_load_single_scene(self, tmp_path):
        scenes = load_scenes(write_scene_file(tmp_path, [GOOD_SCENE]))
        assert len(scenes) == 1
        assert len(scenes[0].objects) == 2

    def test_degenerate_box_rejected(self, tmp_path):
        bad = json.loads(json.dumps(GOOD_SCENE))
        bad["objects"][0]["box"] = [30, 10, 10, 30]  # right <= left
        with pytest.raises(SchemaError, match="horizontal"):
            load_scenes(write_scene_file(tmp_path, [bad]))

    def test_duplicate_scene_id_rejected(self, tmp_path):
        with pytest.raises(SchemaError, match="duplicate scene_id"):
            load_scenes(write_scene_file(tmp_path, [GOOD_SCENE, GOOD_SCENE]))

    def test_missing_field_named(self, tmp_path):
        bad = json.loads(json.dumps(GOOD_SCENE))
        del bad["objects"][1]["depth"]
        with pytest.raises(SchemaError, match="depth"):
            load_scenes(write_scene_file(tmp_path, [bad]))

    def test_dangling_relation_rejected(self, tmp_path):
        bad = json.loads(json.dumps(GOOD_SCENE))
        bad["relations"] = [["a", "on", "zzz"]]
        with pytest.raises(SchemaError, match="endpoint"):
            load_scenes(write_scene_file(tmp_path, [bad]))

    def test_duplicate_attributes_rejected(self, tmp_path):
        bad = json.loads(json.dumps(GOOD_SCENE))
        bad["objects"][0]["attributes"] = ["red", "red"]
        with pytest.raises(SchemaError, match="duplicate attributes"):
            load_scenes(write_scene_file(tmp_path, [bad]))

    def test_save_load_round_trip_byte_identical(self, tmp_path):
        scenes = generate_scenes(50, seed=123)
        first = tmp_path / "a.json"
        second = tmp_path / "b.json"
        save_scenes(first, scenes)
        save_scenes(second, load_scenes(first))
        assert first.read_bytes() == second.read_bytes()


class TestGenerateScenes:
    def test_deterministic(self):
        assert generate_scenes(5, seed=7) == generate_scenes(5, seed=7)

    def test_invariant_sweep(self):
        for scene in generate_scenes(200, seed=1):
            ids = [o.id for o in scene.objects]
            assert len(ids) == len(set(ids))
            for obj in scene.objects:
                l, lo, r, u = obj.box
                assert 0 <= l < r <= 224 and 0 <= lo < u <= 224
                assert obj.name
                assert math.isfinite(obj.depth)
            for subj, _, obj in scene.relations:
                assert subj in ids and obj in ids

    def test_object_count_range(self):
        scene = generate_scenes(1, seed=3)[0]
        assert 2 <= len(scene.objects) <= 8

    def test_distinct_centers(self):
        # Spatial questions need strict comparisons.
        for scene in generate_scenes(50, seed=9):
            xs = [o.center[0] for o in scene.objects]
            ys = [o.center[1] for o in scene.objects]
            assert len(set(xs)) == len(xs)
            assert len(set(ys)) == len(ys)

    def test_zero_count_rejected(self):
        with pytest.raises(ValueError):
            generate_scenes(0, seed=1)


class TestTools:
    def test_find_counts_muffins(self, muffins3):
        patches = tool_find(muffins3, full_canvas_patch(muffins3), "muffin")
        assert len(patches) == 3

    def test_find_absent_name(self, muffins3):
        assert tool_find(muffins3, full_canvas_patch(muffins3), "dragon") == []

    def test_find_order_by_left(self, table_scene):
        canvas = full_canvas_patch(table_scene)
        found = tool_find(table_scene, canvas, "cup") + tool_find(table_scene, canvas, "plate")
        boxes = [p.box[0] for p in found]
        assert boxes == sorted(boxes)

    def test_exists_matches_find(self, table_scene, muffins3):
        for scene in (table_scene, muffins3, *generate_scenes(20, seed=5)):
            canvas = full_canvas_patch(scene)
            for name in NOUNS:
                assert tool_exists(scene, canvas, name) == bool(tool_find(scene, canvas, name))

    def test_verify_property_reads_attributes(self, table_scene, canvas):
        assert tool_verify_property(table_scene, canvas, "cup", "red")
        assert not tool_verify_property(table_scene, canvas, "cup", "blue")

    def test_best_text_match_picks_attribute(self, table_scene):
        patch = tool_find(table_scene, full_canvas_patch(table_scene), "cup")[0]
        assert tool_best_text_match(table_scene, patch, ["blue", "red", "green"]) == "red"

    def test_best_text_match_tie_prefers_first(self, table_scene):
        patch = tool_find(table_scene, full_canvas_patch(table_scene), "cup")[0]
        assert tool_best_text_match(table_scene, patch, ["green", "yellow"]) == "green"

    def test_best_text_match_empty_options(self, table_scene, canvas):
        with pytest.raises(ValueError):
            tool_best_text_match(table_scene, canvas, [])

    def test_distance_345(self):
        a = Patch(scene_ref="s", box=(0, 0, 0 + 2, 0 + 2))
        b = Patch(scene_ref="s", box=(3, 4, 3 + 2, 4 + 2))
        assert tool_distance(a, b) == 5.0

    def test_distance_symmetric_zero(self, table_scene):
        patches = tool_find(table_scene, full_canvas_patch(table_scene), "cup")
        a = patches[0]
        b = tool_find(table_scene, full_canvas_patch(table_scene), "plate")[0]
        assert tool_distance(a, b) == tool_distance(b, a)
        assert tool_distance(a, a) == 0.0

    def test_compute_depth_matched(self, table_scene):
        patch = tool_find(table_scene, full_canvas_patch(table_scene), "plate")[0]
        assert tool_compute_depth(table_scene, patch) == 4.0

    def test_compute_depth_weighted_mean(self, table_scene, canvas):
        value = tool_compute_depth(table_scene, canvas)
        assert 2.0 <= value <= 4.0  # area-weighted mean of the two depths

    def test_simple_query_delegates_to_oracle(self, table_scene, canvas):
        assert tool_simple_query(table_scene, canvas, "how many cups") == "1"
        assert tool_simple_query(table_scene, canvas, "what time is it") == "unknown"

    def test_noise_flips_exists(self, table_scene, canvas):
        noisy = ToolConfig(noise_p=1.0, noise_seed=1)
        assert tool_exists(table_scene, canvas, "cup", noisy) is False
        assert tool_exists(table_scene, canvas, "cup", ToolConfig()) is True


class TestAnswerOracle:
    def test_counting(self, muffins3):
        assert answer_oracle(muffins3, "how many muffins") == "3"

    def test_missing_existence(self):
        for scene in generate_scenes(10, seed=2):
            names = {o.name for o in scene.objects}
            assert "unicorn" not in names
            assert answer_oracle(scene, "is there a unicorn") == "no"

    def test_spatial_left_of(self, table_scene):
        assert answer_oracle(table_scene, "is the cup left of the plate") == "yes"
        assert answer_oracle(table_scene, "is the cup right of the plate") == "no"

    def test_attribute(self, table_scene):
        assert answer_oracle(table_scene, "what color is the plate") == "blue"
        assert answer_oracle(table_scene, "what material is the cup") == "ceramic"

    def test_relation(self, table_scene):
        assert answer_oracle(table_scene, "what is the cup on") == "plate"
        assert answer_oracle(table_scene, "what is the plate on") == "unknown"

    def test_out_of_grammar(self, table_scene):
        assert answer_oracle(table_scene, "describe the picture") == "unknown"

    def test_counting_matches_brute_force(self):
        for scene in generate_scenes(40, seed=11):
            for name in NOUNS:
                want = str(sum(1 for o in scene.objects if o.name == name))
                assert answer_oracle(scene, f"how many {name}s") == want
                present = any(o.name == name for o in scene.objects)
                article = "an" if name[0] in "aeiou" else "a"
                assert answer_oracle(scene, f"is there {article} {name}") == (
                    "yes" if present else "no"
                )

    @given(st.integers(min_value=0, max_value=2**32 - 1))
    @settings(max_examples=25, deadline=None)
    def test_generated_queries_match_oracle(self, seed):
        scenes = generate_scenes(3, seed=seed)
        for query in generate_queries(scenes, seed=seed):
            scene = next(s for s in scenes if s.scene_id == query.scene_id)
            assert answer_oracle(scene, query.question) == query.expected_answer
