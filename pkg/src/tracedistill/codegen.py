"""Deterministic offline program generator and the optional external client.

Five program sketches cover the question grammar: count-loop,
existence-check, attribute-lookup, spatial-comparison, and relation-lookup.
Each sketch includes a couple of statements whose values feed nothing, so
that pruning has real work to do. A seeded, exact-count fraction of a batch
can be emitted as deliberately wrong variants (flipped comparison,
off-by-one count, mangled answer) to exercise the faithfulness filter.
"""

from __future__ import annotations

import json
import math
import random
import urllib.request
from dataclasses import dataclass, field

from . import scenes as sw
from .dsl import Ast, parse
from .errors import GenerationError
from .scenes import Query, Scene


@dataclass
class Program:
    program_id: str
    query_id: str
    source: str
    ast: Ast = field(repr=False, compare=False, default=None)
    corrupted: bool = False


@dataclass
class TemplateBank:
    """Knobs for the offline generator; the sketches themselves are fixed."""

    corruption_rate: float = 0.0


def _count_source(name: str, corrupted: bool) -> str:
    ret = "count + 1" if corrupted else "count"
    return "\n".join(
        [
            "count = 0",
            "width = 224",
            f"patches = image.find('{name}')",
            "num = len(patches)",
            "for p in patches:",
            "    count = count + 1",
            f"return str({ret})",
        ]
    )


def _exists_source(name: str, corrupted: bool) -> str:
    arg = "not flag" if corrupted else "flag"
    return "\n".join(
        [
            f"flag = image.exists('{name}')",
            "checked = 224",
            f"return bool_to_yesno({arg})",
        ]
    )


def _attribute_source(attr_class: str, name: str, corrupted: bool) -> str:
    options = ", ".join(f"'{v}'" for v in sw.ATTRIBUTE_CLASSES[attr_class])
    ret = "answer + '?'" if corrupted else "answer"
    return "\n".join(
        [
            f"patches = image.find('{name}')",
            "target = patches[0]",
            "hint = target.compute_depth()",
            f"answer = target.best_text_match([{options}])",
            f"return {ret}",
        ]
    )


_SPATIAL_OPS = {
    "left of": ("horizontal_center", "<"),
    "right of": ("horizontal_center", ">"),
    "above": ("vertical_center", ">"),
    "below": ("vertical_center", "<"),
}


def _spatial_source(a: str, rel: str, b: str, corrupted: bool) -> str:
    axis, op = _SPATIAL_OPS[rel]
    if corrupted:
        op = {"<": ">", ">": "<"}[op]
    return "\n".join(
        [
            f"a_patches = image.find('{a}')",
            "a = a_patches[0]",
            f"b_patches = image.find('{b}')",
            "b = b_patches[0]",
            "gap = distance(a, b)",
            f"if a.{axis} {op} b.{axis}:",
            "    answer = 'yes'",
            "else:",
            "    answer = 'no'",
            "return answer",
        ]
    )


def _relation_source(question: str, name: str, corrupted: bool) -> str:
    ret = "answer + '?'" if corrupted else "answer"
    return "\n".join(
        [
            f"patches = image.find('{name}')",
            "anchor = patches[0]",
            "probe = anchor.compute_depth()",
            f"answer = image.simple_query('{question}')",
            f"return {ret}",
        ]
    )


def template_source(question: str, corrupted: bool = False) -> str:
    """Instantiate the sketch matching the question; raises GenerationError
    when no template matches."""
    q = question.strip().lower().rstrip("?").strip()
    m = sw._RE_COUNT.match(q)
    if m:
        return _count_source(sw._singular(m.group(1).strip()), corrupted)
    m = sw._RE_EXISTS.match(q)
    if m:
        return _exists_source(m.group(1).strip(), corrupted)
    m = sw._RE_ATTR.match(q)
    if m:
        return _attribute_source(m.group(1), m.group(2).strip(), corrupted)
    m = sw._RE_SPATIAL.match(q)
    if m:
        return _spatial_source(m.group(1).strip(), m.group(2), m.group(3).strip(), corrupted)
    m = sw._RE_RELATION.match(q)
    if m:
        return _relation_source(q, m.group(1).strip(), corrupted)
    raise GenerationError(f"no template matches question {question!r}")


def generate_program(
    query: Query, bank: TemplateBank, seed: int, *, corrupted: bool = False
) -> Program:
    """Deterministic program for one query. Whether a query in a batch is
    corrupted is decided by generate_programs so the corrupted count over a
    batch is exact; the flag here makes a single corrupted instance."""
    del bank, seed  # sketches are deterministic in the question alone
    source = template_source(query.question, corrupted)
    return Program(
        program_id=f"p{query.query_id}",
        query_id=query.query_id,
        source=source,
        ast=parse(source),
        corrupted=corrupted,
    )


def generate_programs(queries: list[Query], bank: TemplateBank, seed: int) -> list[Program]:
    """Batch generation with exactly ceil(corruption_rate * n) corrupted
    programs, chosen by seeded sampling."""
    n = len(queries)
    k = math.ceil(bank.corruption_rate * n) if bank.corruption_rate > 0 else 0
    rng = random.Random(seed)
    corrupted_idx = set(rng.sample(range(n), k)) if k else set()
    return [
        generate_program(q, bank, seed, corrupted=(i in corrupted_idx))
        for i, q in enumerate(queries)
    ]


# ---------------------------------------------------------------------------
# external generator client (the LLM role; disabled by default)

@dataclass
class ExternalGeneratorConfig:
    enabled: bool = False
    endpoint: str = ""
    api_doc_version: str = "v1"
    timeout: float = 5.0


def scene_summary(scene: Scene) -> str:
    parts = [f"{o.name}@{o.box}" for o in scene.objects]
    return f"scene {scene.scene_id}: " + "; ".join(parts)


def external_generate(config: ExternalGeneratorConfig, query: Query, summary: str) -> Program:
    """Fetch a program from a remote generator; the returned source must
    parse or the example is rejected with a GenerationError."""
    if not config.enabled:
        raise GenerationError("external generator is disabled")
    request = urllib.request.Request(
        config.endpoint,
        data=json.dumps(
            {
                "question": query.question,
                "scene_summary": summary,
                "api_doc_version": config.api_doc_version,
            }
        ).encode("utf-8"),
        headers={"Content-Type": "application/json"},
    )
    try:
        with urllib.request.urlopen(request, timeout=config.timeout) as resp:
            payload = json.loads(resp.read().decode("utf-8"))
    except Exception as exc:
        raise GenerationError(f"external generator transport failure: {exc}") from exc
    source = payload.get("source", "")
    try:
        ast = parse(source)
    except Exception as exc:
        raise GenerationError(f"external generator returned unparseable source: {exc}") from exc
    return Program(
        program_id=f"p{query.query_id}",
        query_id=query.query_id,
        source=source,
        ast=ast,
    )
