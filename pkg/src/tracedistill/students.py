"""Utility scoring of rationales against an ensemble of student oracles.

Each student is asked the bare question first, then the question with the
rationale prepended as context. Per-student verdicts follow the fixed table
(wrong-to-right +1, wrong-to-wrong -1, right-to-right 0; right-to-wrong is
configurable between -1 and 0) and the ensemble score is their sum.
Rationales with score >= min_score (default 0) are retained.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from hashlib import sha256
from typing import Protocol

from .editing import CotRationale
from .errors import ConfigError
from .interp import normalize_answer
from .scenes import Query, Scene, answer_oracle

VERDICT_VALUES = {"useful": 1, "non_useful": -1, "unsure": 0, "harmful": -1, "abstained": 0}


class StudentOracle(Protocol):
    name: str

    def answer(self, question: str, context: str | None = None) -> str:
        """Deterministic answer; ``context`` carries the rationale text."""
        ...


@dataclass
class UtilityOutcome:
    student: str
    before_correct: bool
    after_correct: bool
    verdict: str  # useful | non_useful | unsure | harmful | abstained
    value: int


@dataclass
class ScoredRationale:
    rationale: CotRationale
    outcomes: list[UtilityOutcome]
    score: int


def verdict_for(before: bool, after: bool, harm_value: int = -1) -> tuple[str, int]:
    """The verdict table; total over all four (before, after) combinations."""
    if not before and after:
        return "useful", 1
    if not before and not after:
        return "non_useful", -1
    if before and after:
        return "unsure", 0
    return "harmful", harm_value


def utility_score(
    rationale: CotRationale,
    query: Query,
    students: list[StudentOracle],
    harm_value: int = -1,
) -> ScoredRationale:
    """Probe each student before/after seeing the rationale and sum verdicts.

    A student that raises scores 0 and is recorded as abstained.
    """
    if not students:
        raise ValueError("utility_score needs at least one student")
    expected = normalize_answer(query.expected_answer)
    outcomes = []
    for student in students:
        try:
            before = normalize_answer(student.answer(query.question)) == expected
            after = normalize_answer(student.answer(query.question, rationale.text)) == expected
        except Exception:
            outcomes.append(UtilityOutcome(student.name, False, False, "abstained", 0))
            continue
        verdict, value = verdict_for(before, after, harm_value)
        outcomes.append(UtilityOutcome(student.name, before, after, verdict, value))
    return ScoredRationale(
        rationale=rationale,
        outcomes=outcomes,
        score=sum(o.value for o in outcomes),
    )


def filter_by_score(
    scored: list[ScoredRationale], min_score: int = 0
) -> tuple[list[ScoredRationale], list[ScoredRationale]]:
    """Exhaustive, disjoint partition into (kept, rejected)."""
    kept = [s for s in scored if s.score >= min_score]
    rejected = [s for s in scored if s.score < min_score]
    return kept, rejected


# ---------------------------------------------------------------------------
# built-in students (deterministic stand-ins for end-to-end models)

def _tokens(text: str) -> set[str]:
    return set(re.findall(r"[a-z0-9_]+", text.lower()))


@dataclass
class NoisyOracleStudent:
    """Answers from the ground-truth oracle, but fails on a seeded
    per-question subset; context cannot sway it."""

    scenes_by_query: dict[str, Scene]
    questions_by_id: dict[str, str] = field(default_factory=dict)
    seed: int = 0
    failure_rate: float = 0.0
    name: str = "noisy_oracle"

    def _fails(self, question: str) -> bool:
        digest = sha256(f"noisy|{self.seed}|{question}".encode("utf-8")).digest()
        return int.from_bytes(digest[:8], "big") / 2**64 < self.failure_rate

    def answer(self, question: str, context: str | None = None) -> str:
        scene = self._scene_for(question)
        truth = answer_oracle(scene, question) if scene is not None else "unknown"
        if self._fails(question):
            return "unknown" if truth != "unknown" else "yes"
        return truth

    def _scene_for(self, question: str) -> Scene | None:
        qid = self.questions_by_id.get(question)
        return self.scenes_by_query.get(qid) if qid else None


@dataclass
class RationaleSensitiveStudent:
    """Fails by default; succeeds when the rationale mentions the expected
    answer (trigger_mode "answer") or any question content token
    (trigger_mode "fact"). An optional token budget models a short attention
    span: the trigger must appear within the first ``token_budget`` tokens."""

    expected_by_question: dict[str, str]
    trigger_mode: str = "answer"
    token_budget: int | None = None
    name: str = "rationale_sensitive"

    def answer(self, question: str, context: str | None = None) -> str:
        expected = self.expected_by_question.get(question)
        if expected is None or not context:
            return "unknown"
        window = context.split()
        if self.token_budget is not None:
            window = window[: self.token_budget]
        seen = _tokens(" ".join(window))
        if self.trigger_mode == "answer":
            hit = normalize_answer(expected) in seen
        elif self.trigger_mode == "fact":
            hit = bool(_tokens(question) & seen)
        else:
            raise ConfigError(f"unknown trigger_mode {self.trigger_mode!r}")
        return expected if hit else "unknown"


@dataclass
class StubbornStudent:
    """Ignores context entirely; answers a fixed token, so its verdicts can
    only be unsure (0) or non-useful (-1)."""

    fixed_answer: str = "yes"
    name: str = "stubborn"

    def answer(self, question: str, context: str | None = None) -> str:
        return self.fixed_answer


def builtin_students(
    specs: list[dict],
    *,
    scenes_by_id: dict[str, Scene],
    queries: list[Query],
) -> list[StudentOracle]:
    """Build the configured ensemble. Spec keys: kind (required), seed,
    failure_rate, trigger_mode, token_budget, fixed_answer, name."""
    scenes_by_query = {q.query_id: scenes_by_id[q.scene_id] for q in queries}
    questions_by_id = {q.question: q.query_id for q in queries}
    expected_by_question = {q.question: q.expected_answer for q in queries}
    students: list[StudentOracle] = []
    for i, spec in enumerate(specs):
        kind = spec.get("kind")
        name = spec.get("name", f"{kind}_{i}")
        if kind == "noisy_oracle":
            students.append(
                NoisyOracleStudent(
                    scenes_by_query=scenes_by_query,
                    questions_by_id=questions_by_id,
                    seed=int(spec.get("seed", 0)),
                    failure_rate=float(spec.get("failure_rate", 0.0)),
                    name=name,
                )
            )
        elif kind == "rationale_sensitive":
            students.append(
                RationaleSensitiveStudent(
                    expected_by_question=expected_by_question,
                    trigger_mode=spec.get("trigger_mode", "answer"),
                    token_budget=spec.get("token_budget"),
                    name=name,
                )
            )
        elif kind == "stubborn":
            students.append(StubbornStudent(fixed_answer=spec.get("fixed_answer", "yes"), name=name))
        else:
            raise ConfigError(f"unknown student kind {kind!r}")
    return students
