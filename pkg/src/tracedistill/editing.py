"""Trace editing: dynamic pruning, symbolic merging, and logical bridging.

Pruning takes the backward closure of the return event under data dependence
(def-use links) and control dependence (enclosing taken branches and loops).
Merging collapses loop-repeated events into single operation records.
Bridging tags adjacent rationale sentences as <gap>/<no-gap> and fills gaps
with connective text.

A symbolic record renders to one line of the fixed grammar::

    assigned <name>:<value>[ <invocation>]
    called <callee>(<args>) -> <value>[ xK]
    looped <var> over <N> items
    branch arm <i>
    returned <value>

and to one English sentence via the fixed template table (frozen by golden
files under tests/).
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field as dc_field

from .dsl import Ast, if_arms, render_expr
from .errors import TraceDistillError
from .interp import ExecutionTrace, TraceEvent, value_text


# ---------------------------------------------------------------------------
# dynamic pruning

@dataclass
class PrunedTrace:
    base: ExecutionTrace
    kept_seqs: list[int]  # ascending
    slice_root: int  # seq of the return event

    def kept_events(self) -> list[TraceEvent]:
        return [self.base.events[s] for s in self.kept_seqs]


def _return_seq(trace: ExecutionTrace) -> int:
    if not trace.events or trace.events[-1].kind != "return":
        raise TraceDistillError("trace has no return event; cannot prune")
    return trace.events[-1].seq


def prune(trace: ExecutionTrace, ast: Ast) -> PrunedTrace:
    """Backward dynamic slice from the return event.

    An event survives if a kept event uses one of its bindings (data
    dependence) or if a kept event executed inside its arm or body (control
    dependence, via each event's enclosing-control pointer). Untaken
    branches never produced events, so nothing else is needed.
    """
    if trace.status != "ok":
        raise TraceDistillError(f"can only prune ok traces, got status {trace.status!r}")
    root_seq = _return_seq(trace)
    events = trace.events
    kept: set[int] = set()
    stack = [root_seq]
    while stack:
        seq = stack.pop()
        if seq in kept or seq < 0:
            continue
        kept.add(seq)
        event = events[seq]
        for _, def_seq in event.uses:
            stack.append(def_seq)
        ctrl = event.detail.get("ctrl", -1)
        if ctrl >= 0:
            stack.append(ctrl)
    # A loop's exit bracket survives with its loop.
    for event in events:
        if event.kind == "loop_exit" and event.detail.get("enter", -1) in kept:
            kept.add(event.seq)
    return PrunedTrace(base=trace, kept_seqs=sorted(kept), slice_root=root_seq)


def keep_all(trace: ExecutionTrace) -> PrunedTrace:
    """Identity 'pruning' used when the prune stage is toggled off."""
    return PrunedTrace(
        base=trace,
        kept_seqs=[e.seq for e in trace.events],
        slice_root=_return_seq(trace),
    )


# ---------------------------------------------------------------------------
# slice rebuild (for slice-replay verification)

def slice_source(ast: Ast, pruned: PrunedTrace) -> str:
    """Rebuild the sliced statements as runnable source.

    Kept statements are emitted verbatim; a control node survives when any
    of its events survived. Arms that were taken during execution but kept
    no statements are preserved as guards (with a no-op body) whenever a
    later arm survives, so re-execution cannot fall through into a
    different arm.
    """
    events = pruned.base.events
    kept = set(pruned.kept_seqs)
    kept_stmts: set[int] = set()
    kept_arms: dict[int, set[int]] = {}
    kept_loops: set[int] = set()
    taken_arms: dict[int, set[int]] = {}
    for event in events:
        if event.kind == "branch_taken":
            taken_arms.setdefault(event.node_id, set()).add(event.detail["arm"])
        if event.seq not in kept:
            continue
        if event.kind in ("assign", "tool_call", "builtin_call", "return"):
            kept_stmts.add(event.node_id)
        elif event.kind == "branch_taken":
            kept_arms.setdefault(event.node_id, set()).add(event.detail["arm"])
        elif event.kind in ("loop_enter", "loop_iter", "loop_exit"):
            kept_loops.add(event.node_id)

    lines: list[str] = []
    _emit_slice(ast, ast.node(ast.root).children, 0, kept_stmts, kept_arms, kept_loops,
                taken_arms, lines)
    return "\n".join(lines)


def _emit_slice(ast, stmt_ids, depth, kept_stmts, kept_arms, kept_loops, taken_arms, lines):
    pad = " " * (4 * depth)
    for sid in stmt_ids:
        node = ast.node(sid)
        if node.kind == "Assign":
            if sid in kept_stmts:
                lines.append(f"{pad}{node.payload['target']} = {render_expr(ast, node.children[0])}")
        elif node.kind == "Return":
            if sid in kept_stmts:
                lines.append(f"{pad}return {render_expr(ast, node.children[0])}")
        elif node.kind == "ExprStmt":
            if sid in kept_stmts:
                lines.append(f"{pad}{render_expr(ast, node.children[0])}")
        elif node.kind == "For":
            if sid in kept_loops:
                lines.append(f"{pad}for {node.payload['var']} in {render_expr(ast, node.children[0])}:")
                body: list[str] = []
                _emit_slice(ast, node.children[1:], depth + 1, kept_stmts, kept_arms,
                            kept_loops, taken_arms, body)
                lines.extend(body if body else [f"{pad}    0"])
        elif node.kind == "If":
            _emit_if_slice(ast, node, depth, kept_stmts, kept_arms, kept_loops, taken_arms, lines)


def _emit_if_slice(ast, node, depth, kept_stmts, kept_arms, kept_loops, taken_arms, lines):
    pad = " " * (4 * depth)
    arms, else_stmts = if_arms(ast, node)
    arm_bodies: list[list[str]] = []
    for _, stmts in arms:
        body: list[str] = []
        _emit_slice(ast, stmts, depth + 1, kept_stmts, kept_arms, kept_loops, taken_arms, body)
        arm_bodies.append(body)
    else_body: list[str] = []
    _emit_slice(ast, else_stmts, depth + 1, kept_stmts, kept_arms, kept_loops, taken_arms, else_body)

    surviving = [i for i, b in enumerate(arm_bodies) if b]
    else_survives = bool(else_body)
    if not surviving and not else_survives:
        return
    # Everything up to `boundary` that was ever taken needs its guard kept,
    # otherwise re-execution could fall through into a later surviving arm.
    boundary = len(arms) if else_survives else max(surviving)
    ever = taken_arms.get(node.id, set())
    emit = [bool(arm_bodies[i]) or (i in ever and i < boundary) for i in range(len(arms))]
    if else_survives and not any(emit):
        emit[0] = True  # syntactic host for the else arm; its condition is pure
    emitted_any = False
    for i, (cond, _) in enumerate(arms):
        if not emit[i]:
            continue
        keyword = "if" if not emitted_any else "elif"
        lines.append(f"{pad}{keyword} {render_expr(ast, cond)}:")
        lines.extend(arm_bodies[i] if arm_bodies[i] else [f"{pad}    0"])
        emitted_any = True
    if else_survives:
        lines.append(f"{pad}else:")
        lines.extend(else_body)


# ---------------------------------------------------------------------------
# symbolic records and merging

_LINE_KEYWORDS = {
    "assigned", "called", "looped", "branch", "arm", "over", "items",
    "returned", "patch", "true", "false", "none",
}


@dataclass
class SymbolicRecord:
    """Operation / Arguments / Invocation record; equality covers only the
    three schema fields so the rendered line round-trips to an equal record."""

    operation: str  # assigned | called | looped | branch | returned
    arguments: dict[str, str]
    invocation: str | None = None
    reads: set[str] = dc_field(default_factory=set, compare=False)
    defines: set[str] = dc_field(default_factory=set, compare=False)
    mentions: set[str] = dc_field(default_factory=set, compare=False)
    source_seqs: list[int] = dc_field(default_factory=list, compare=False)
    ctrl_seqs: set[int] = dc_field(default_factory=set, compare=False)

    def finish(self) -> "SymbolicRecord":
        self.mentions = _line_tokens(record_to_line(self))
        return self


@dataclass
class SymbolicTrace:
    program_id: str
    records: list[SymbolicRecord]


def _line_tokens(line: str) -> set[str]:
    return {t for t in re.findall(r"[A-Za-z_]\w*", line.lower()) if t not in _LINE_KEYWORDS}


def _loop_var_of_ctrl(events: list[TraceEvent], seq: int) -> str | None:
    ctrl = events[seq].detail.get("ctrl", -1)
    while ctrl >= 0:
        parent = events[ctrl]
        if parent.kind == "loop_iter":
            return next(iter(parent.bindings))
        ctrl = parent.detail.get("ctrl", -1)
    return None


def _base_record(events: list[TraceEvent], event: TraceEvent) -> SymbolicRecord | None:
    reads = {name for name, _ in event.uses}
    loop_var = _loop_var_of_ctrl(events, event.seq)
    if loop_var is not None:
        reads.add(loop_var)
    ctrl = event.detail.get("ctrl", -1)
    ctrl_seqs = {ctrl} if ctrl >= 0 else set()
    common = dict(reads=reads, source_seqs=[event.seq], ctrl_seqs=ctrl_seqs)
    if event.kind == "assign":
        name, value = next(iter(event.bindings.items()))
        callee = event.invocation[0] if event.invocation else None
        return SymbolicRecord(
            "assigned", {name: value_text(value)}, callee, defines={name}, **common
        ).finish()
    if event.kind in ("tool_call", "builtin_call"):
        callee, args, result = event.invocation
        arguments = {
            "args": ",".join(value_text(a) for a in args),
            "value": value_text(result),
        }
        return SymbolicRecord("called", arguments, callee, **common).finish()
    if event.kind == "branch_taken":
        return SymbolicRecord("branch", {"arm": str(event.detail["arm"])}, None, **common).finish()
    if event.kind == "loop_enter":
        var = _loop_var_name(events, event)
        return SymbolicRecord(
            "looped",
            {"var": var, "items": str(event.detail["items"])},
            None,
            defines={var},
            **common,
        ).finish()
    if event.kind == "loop_iter":
        name, value = next(iter(event.bindings.items()))
        return SymbolicRecord(
            "assigned", {name: value_text(value)}, None, defines={name}, **common
        ).finish()
    if event.kind == "return":
        return SymbolicRecord(
            "returned", {"value": value_text(event.detail.get("value"))}, None, **common
        ).finish()
    return None  # loop_exit carries only the iteration count


def _loop_var_name(events: list[TraceEvent], enter: TraceEvent) -> str:
    for event in events[enter.seq + 1 :]:
        if event.kind == "loop_iter" and event.detail.get("ctrl") == enter.seq:
            return next(iter(event.bindings))
        if event.kind == "loop_exit" and event.detail.get("enter") == enter.seq:
            break
    return "_"


def raw_records(pruned: PrunedTrace) -> SymbolicTrace:
    """One record per surviving event, with no collapsing (merge toggled off)."""
    events = pruned.base.events
    records = []
    for seq in pruned.kept_seqs:
        rec = _base_record(events, events[seq])
        if rec is not None:
            records.append(rec)
    return SymbolicTrace(program_id=pruned.base.program_id, records=records)


def merge(pruned: PrunedTrace) -> SymbolicTrace:
    """Collapse repetition in the surviving events.

    Assignments to one variable from one AST node across loop iterations
    keep only the last value; each loop becomes a single ``looped`` record;
    tool calls repeated with identical callee and arguments collapse to one
    ``called`` record annotated xK. Record order follows first occurrence.
    """
    events = pruned.base.events
    records: list[SymbolicRecord] = []
    assign_slot: dict[tuple[int, str], int] = {}
    called_slot: dict[tuple[str, str], int] = {}
    called_times: dict[int, int] = {}
    for seq in pruned.kept_seqs:
        event = events[seq]
        if event.kind in ("loop_iter", "loop_exit"):
            continue  # subsumed by the loop's single record
        rec = _base_record(events, event)
        if rec is None:
            continue
        if event.kind == "assign":
            name = next(iter(event.bindings))
            key = (event.node_id, name)
            if key in assign_slot:
                idx = assign_slot[key]
                old = records[idx]
                old.arguments[name] = rec.arguments[name]
                old.reads |= rec.reads
                old.source_seqs.extend(rec.source_seqs)
                old.ctrl_seqs |= rec.ctrl_seqs
                old.finish()
                continue
            assign_slot[key] = len(records)
        elif event.kind == "tool_call":
            key = (rec.invocation, rec.arguments["args"])
            if key in called_slot:
                idx = called_slot[key]
                called_times[idx] = called_times.get(idx, 1) + 1
                records[idx].arguments["times"] = str(called_times[idx])
                records[idx].source_seqs.extend(rec.source_seqs)
                records[idx].finish()
                continue
            called_slot[key] = len(records)
        records.append(rec)
    return SymbolicTrace(program_id=pruned.base.program_id, records=records)


# ---------------------------------------------------------------------------
# symbolic line grammar (External Interface; bit-exact)

def record_to_line(record: SymbolicRecord) -> str:
    op = record.operation
    if op == "assigned":
        (name, value), = record.arguments.items()
        suffix = f" {record.invocation}" if record.invocation else ""
        return f"assigned {name}:{value}{suffix}"
    if op == "called":
        times = record.arguments.get("times")
        suffix = f" x{times}" if times else ""
        return (
            f"called {record.invocation}({record.arguments['args']})"
            f" -> {record.arguments['value']}{suffix}"
        )
    if op == "looped":
        return f"looped {record.arguments['var']} over {record.arguments['items']} items"
    if op == "branch":
        return f"branch arm {record.arguments['arm']}"
    if op == "returned":
        return f"returned {record.arguments['value']}"
    raise ValueError(f"unknown operation {op!r}")


def _scan_literal(text: str, i: int) -> tuple[str, int]:
    n = len(text)
    if i < n and text[i] == "'":
        j = i + 1
        while j < n:
            if text[j] == "\\":
                j += 2
                continue
            if text[j] == "'":
                return text[i : j + 1], j + 1
            j += 1
        raise ValueError("unterminated string in symbolic line")
    if i < n and text[i] == "[":
        depth = 0
        j = i
        while j < n:
            ch = text[j]
            if ch == "'":
                _, j = _scan_literal(text, j)
                continue
            if ch == "[":
                depth += 1
            elif ch == "]":
                depth -= 1
                if depth == 0:
                    return text[i : j + 1], j + 1
            j += 1
        raise ValueError("unterminated list in symbolic line")
    if text.startswith("patch(", i):
        j = text.index(")", i)
        return text[i : j + 1], j + 1
    j = i
    while j < n and text[j] != " ":
        j += 1
    return text[i:j], j


def record_from_line(line: str) -> SymbolicRecord:
    """Parse one symbolic line back to a record (inverse of record_to_line
    on the schema fields)."""
    if line.startswith("assigned "):
        rest = line[len("assigned "):]
        name, _, rest = rest.partition(":")
        value, i = _scan_literal(rest, 0)
        tail = rest[i:].strip()
        invocation = tail if tail else None
        return SymbolicRecord("assigned", {name: value}, invocation)
    if line.startswith("called "):
        rest = line[len("called "):]
        callee, _, rest = rest.partition("(")
        depth = 1
        j = 0
        while j < len(rest) and depth:
            ch = rest[j]
            if ch == "'":
                _, j = _scan_literal(rest, j)
                continue
            if ch == "(":
                depth += 1
            elif ch == ")":
                depth -= 1
                if depth == 0:
                    break
            j += 1
        args = rest[:j]
        rest = rest[j + 1 :]
        if not rest.startswith(" -> "):
            raise ValueError(f"malformed called line: {line!r}")
        rest = rest[4:]
        value, i = _scan_literal(rest, 0)
        arguments = {"args": args, "value": value}
        tail = rest[i:].strip()
        if tail:
            m = re.fullmatch(r"x(\d+)", tail)
            if not m:
                raise ValueError(f"malformed called suffix: {tail!r}")
            arguments["times"] = m.group(1)
        return SymbolicRecord("called", arguments, callee)
    m = re.fullmatch(r"looped (\w+) over (\d+) items", line)
    if m:
        return SymbolicRecord("looped", {"var": m.group(1), "items": m.group(2)}, None)
    m = re.fullmatch(r"branch arm (\d+)", line)
    if m:
        return SymbolicRecord("branch", {"arm": m.group(1)}, None)
    if line.startswith("returned "):
        value, i = _scan_literal(line, len("returned "))
        if line[i:].strip():
            raise ValueError(f"trailing text after returned value: {line!r}")
        return SymbolicRecord("returned", {"value": value}, None)
    raise ValueError(f"unparseable symbolic line: {line!r}")


# ---------------------------------------------------------------------------
# natural-language rendering

_VERBS = {
    "len": "Counting",
    "find": "Searching",
    "exists": "Checking",
    "verify_property": "Verifying",
    "best_text_match": "Matching",
    "simple_query": "Asking",
    "compute_depth": "Measuring",
    "distance": "Measuring",
    "sorted": "Sorting",
}


def _display(value: str) -> str:
    if value.startswith("'") and value.endswith("'") and len(value) >= 2:
        return value[1:-1]
    return value


def render_sentence(record: SymbolicRecord) -> str:
    op = record.operation
    if op == "assigned":
        (name, value), = record.arguments.items()
        if record.invocation:
            verb = _VERBS.get(record.invocation, "Computing")
            return f"{verb} gives {name} = {_display(value)} (via {record.invocation})."
        return f"Set {name} = {_display(value)}."
    if op == "called":
        times = record.arguments.get("times")
        suffix = f" ({times} times)" if times else ""
        return (
            f"Called {record.invocation}({record.arguments['args']}) and got "
            f"{_display(record.arguments['value'])}{suffix}."
        )
    if op == "looped":
        return f"Checked each of the {record.arguments['items']} items in turn."
    if op == "branch":
        return f"Took branch {record.arguments['arm']}."
    if op == "returned":
        return f"Therefore the answer is {_display(record.arguments['value'])}."
    raise ValueError(f"unknown operation {op!r}")


def render(trace: SymbolicTrace) -> list[str]:
    """One deterministic sentence per record."""
    return [render_sentence(r) for r in trace.records]


# ---------------------------------------------------------------------------
# gap tagging

GAP = "<gap>"
NO_GAP = "<no-gap>"


@dataclass
class TaggedDraft:
    sentences: list[str]
    joints: list[str]  # len == len(sentences) - 1


class ReferentialTagger:
    """Default deterministic tagger: a joint is <no-gap> when the later
    record references a variable or entity the earlier record defined or
    mentioned, or is directly control-dependent on it."""

    name = "referential"

    def tag(self, sentences: list[str], records: list[SymbolicRecord]) -> list[str]:
        joints = []
        for earlier, later in zip(records, records[1:]):
            refs = later.reads | later.mentions
            anchors = earlier.defines | earlier.reads | earlier.mentions
            ctrl_link = bool(later.ctrl_seqs & set(earlier.source_seqs))
            joints.append(NO_GAP if (refs & anchors) or ctrl_link else GAP)
        return joints


def tag_gaps(sentences: list[str], context: SymbolicTrace, tagger=None) -> TaggedDraft:
    """Tag each adjacent sentence pair; sentences must align 1:1 with the
    context records (the pre-bridge draft)."""
    if not sentences:
        raise ValueError("tag_gaps needs at least one sentence")
    if len(sentences) != len(context.records):
        raise ValueError("draft sentences must align with symbolic records")
    tagger = tagger or ReferentialTagger()
    return TaggedDraft(sentences=list(sentences), joints=tagger.tag(sentences, context.records))


# ---------------------------------------------------------------------------
# bridging

@dataclass
class BridgeRequest:
    prev: str
    next: str
    facts: list[str]
    next_index: int = -1  # record index of the sentence after the gap
    prev_record: SymbolicRecord | None = None
    next_record: SymbolicRecord | None = None
    trace: SymbolicTrace | None = None


class DefaultBridger:
    """Deterministic bridger: restates the nearest fact shared with the next
    sentence, preferring the latest earlier definition of a variable the
    next record reads."""

    name = "default"

    def fill(self, request: BridgeRequest) -> str:
        rec = request.next_record
        trace = request.trace
        if rec is not None and trace is not None and request.next_index >= 0:
            for name in sorted(rec.reads):
                for earlier in reversed(trace.records[: request.next_index]):
                    if name in earlier.defines and earlier.operation == "assigned":
                        value = _display(earlier.arguments[name])
                        return f"Recall that {name} = {value}."
            if rec.invocation:
                return f"Next, {rec.invocation} comes into play."
        return "With that settled, the next step follows."


class HttpBridger:
    """Client for an external bridging model.

    Wire contract: POST {prev, next, facts: [...]} and read {bridge_text}.
    Any failure raises, which bridge() turns into a default-bridger fallback
    recorded in the lineage.
    """

    name = "http"

    def __init__(self, endpoint: str, timeout: float = 5.0):
        self.endpoint = endpoint
        self.timeout = timeout

    def fill(self, request: BridgeRequest) -> str:
        import json
        import urllib.request

        wire = urllib.request.Request(
            self.endpoint,
            data=json.dumps(
                {"prev": request.prev, "next": request.next, "facts": request.facts}
            ).encode("utf-8"),
            headers={"Content-Type": "application/json"},
        )
        with urllib.request.urlopen(wire, timeout=self.timeout) as resp:
            payload = json.loads(resp.read().decode("utf-8"))
        text = payload.get("bridge_text", "")
        if not isinstance(text, str) or not text:
            raise ValueError("external bridger returned no bridge_text")
        return text


@dataclass
class Lineage:
    pruned: bool
    merged: bool
    bridged: bool
    bridge_fallback: bool = False

    def to_dict(self) -> dict:
        return {"pruned": self.pruned, "merged": self.merged, "bridged": self.bridged}


@dataclass
class CotRationale:
    query_id: str
    program_id: str
    text: str
    lineage: Lineage
    sentences: list[str]
    joints: list[str]
    source_records: list[list[int]]  # record indices per sentence; [] marks a bridge insertion


def bridge(
    tagged: TaggedDraft,
    trace: SymbolicTrace,
    bridger=None,
    *,
    query_id: str = "",
    lineage: Lineage | None = None,
) -> CotRationale:
    """Insert connective text at every <gap> joint.

    External bridger failures fall back to the default bridger and are
    recorded in the lineage.
    """
    primary = bridger or DefaultBridger()
    fallback = DefaultBridger()
    lineage = lineage or Lineage(pruned=False, merged=False, bridged=True)
    facts = [record_to_line(r) for r in trace.records]
    sentences: list[str] = [tagged.sentences[0]]
    source_records: list[list[int]] = [[0]]
    fell_back = False
    for i, joint in enumerate(tagged.joints):
        if joint == GAP:
            request = BridgeRequest(
                prev=tagged.sentences[i],
                next=tagged.sentences[i + 1],
                facts=facts,
                next_index=i + 1,
                prev_record=trace.records[i],
                next_record=trace.records[i + 1],
                trace=trace,
            )
            try:
                text = primary.fill(request)
            except Exception:
                text = fallback.fill(request)
                fell_back = True
            sentences.append(text)
            source_records.append([])
        sentences.append(tagged.sentences[i + 1])
        source_records.append([i + 1])
    lineage.bridge_fallback = fell_back
    return CotRationale(
        query_id=query_id,
        program_id=trace.program_id,
        text=" ".join(sentences),
        lineage=lineage,
        sentences=sentences,
        joints=list(tagged.joints),
        source_records=source_records,
    )


def no_bridge(
    tagged: TaggedDraft,
    trace: SymbolicTrace,
    *,
    query_id: str = "",
    lineage: Lineage | None = None,
) -> CotRationale:
    """Assemble a rationale without filling gaps (bridge toggled off)."""
    lineage = lineage or Lineage(pruned=False, merged=False, bridged=False)
    return CotRationale(
        query_id=query_id,
        program_id=trace.program_id,
        text=" ".join(tagged.sentences),
        lineage=lineage,
        sentences=list(tagged.sentences),
        joints=list(tagged.joints),
        source_records=[[i] for i in range(len(tagged.sentences))],
    )
