"""Instrumented tree-walking interpreter for visual programs.

Execution emits one trace event per executed statement-level action: an
assignment, a bare tool/builtin call, a taken branch, a loop enter /
iteration / exit, or a return. Each event carries the variable snapshot it
wrote, the (callee, arguments, result) of the outermost call evaluated by
the statement, def-use links to the defining events of every variable it
read, and the seq of its innermost enclosing control event.

Failures never raise: they are encoded in the trace status (ok /
runtime_error / step_limit) for the faithfulness filter to consume.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from typing import Any

from . import scenes as sw
from .dsl import Ast, AstNode, TOOL_METHODS, if_arms
from .scenes import Patch, Query, Scene, ToolConfig

Value = Any  # int | float | bool | str | list[Value] | Patch


@dataclass
class StepLimits:
    max_steps: int = 10_000
    max_list_len: int = 10_000
    snapshot_list_cap: int = 64


@dataclass
class TraceEvent:
    seq: int
    node_id: int
    kind: str  # assign, tool_call, builtin_call, branch_taken, loop_enter, loop_iter, loop_exit, return
    bindings: dict[str, Value] = field(default_factory=dict)
    invocation: tuple[str, list[Value], Value] | None = None
    uses: list[tuple[str, int]] = field(default_factory=list)
    detail: dict = field(default_factory=dict)  # arm, iteration(s), enter, ctrl, value


@dataclass
class ExecutionTrace:
    program_id: str
    events: list[TraceEvent]
    result: Value | None
    status: str  # ok, runtime_error, step_limit
    error: dict | None = None  # {node_id, message} when status == runtime_error

    def event_by_seq(self, seq: int) -> TraceEvent:
        return self.events[seq]


class _Fault(Exception):
    def __init__(self, node_id: int, message: str):
        super().__init__(message)
        self.node_id = node_id


class _StepLimit(Exception):
    pass


class _Return(Exception):
    def __init__(self, value: Value):
        self.value = value


def _snapshot(value: Value, cap: int) -> Value:
    if isinstance(value, list):
        return [_snapshot(v, cap) for v in value[:cap]]
    return copy.deepcopy(value)


def value_text(value: Value) -> str:
    """Canonical space-free text for symbolic trace lines."""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, str):
        escaped = value.replace("\\", "\\\\").replace("'", "\\'")
        return f"'{escaped}'"
    if isinstance(value, list):
        return "[" + ",".join(value_text(v) for v in value) + "]"
    if isinstance(value, Patch):
        l, lo, r, u = value.box
        return f"patch({l},{lo},{r},{u})"
    if value is None:
        return "none"
    raise TypeError(f"unsupported runtime value {type(value)!r}")


def plain_text(value: Value) -> str:
    """Program-result text as the str() builtin produces it."""
    if isinstance(value, bool):
        return "True" if value else "False"
    if isinstance(value, str):
        return value
    if isinstance(value, (int, float)):
        return str(value) if isinstance(value, int) else repr(value)
    return value_text(value)


def value_to_json(value: Value) -> Any:
    if isinstance(value, Patch):
        return {
            "__patch__": {
                "scene": value.scene_ref,
                "box": list(value.box),
                "matched": value.matched_object,
            }
        }
    if isinstance(value, list):
        return [value_to_json(v) for v in value]
    return value


def value_from_json(obj: Any) -> Value:
    if isinstance(obj, dict) and "__patch__" in obj:
        p = obj["__patch__"]
        return Patch(scene_ref=p["scene"], box=tuple(p["box"]), matched_object=p["matched"])
    if isinstance(obj, list):
        return [value_from_json(v) for v in obj]
    return obj


def _truthy(value: Value) -> bool:
    if isinstance(value, bool):
        return value
    if isinstance(value, (int, float)):
        return value != 0
    if isinstance(value, (str, list)):
        return len(value) > 0
    return True


class _Interp:
    def __init__(self, ast: Ast, scene: Scene, limits: StepLimits, tools: ToolConfig | None):
        self.ast = ast
        self.scene = scene
        self.limits = limits
        self.tools = tools
        self.env: dict[str, tuple[Value, int]] = {}
        self.events: list[TraceEvent] = []
        self.steps = 0
        # Per-statement evaluation context.
        self._uses: list[tuple[str, int]] = []
        self._invocation: tuple[str, list[Value], Value] | None = None
        self._last_args: list[Value] = []

    # -- event plumbing

    def emit(self, node_id: int, kind: str, ctrl: int, **kw) -> TraceEvent:
        event = TraceEvent(seq=len(self.events), node_id=node_id, kind=kind, **kw)
        event.detail["ctrl"] = ctrl
        self.events.append(event)
        return event

    def snap(self, value: Value) -> Value:
        return _snapshot(value, self.limits.snapshot_list_cap)

    def tick(self, node_id: int) -> None:
        self.steps += 1
        if self.steps > self.limits.max_steps:
            raise _StepLimit()

    def _dedup_uses(self) -> list[tuple[str, int]]:
        seen = []
        for u in self._uses:
            if u not in seen:
                seen.append(u)
        return seen

    # -- statement execution

    def run(self) -> tuple[Value, None]:
        root = self.ast.node(self.ast.root)
        self.env[root.payload["param"]] = (sw.full_canvas_patch(self.scene), -1)
        for stmt in root.children:
            self.exec_stmt(stmt, ctrl=-1)
        raise _Fault(self.ast.root, "program ended without return")

    def exec_stmt(self, node_id: int, ctrl: int) -> None:
        node = self.ast.node(node_id)
        self.tick(node_id)
        if node.kind == "Assign":
            self._begin_stmt()
            value = self.eval_expr(node.children[0], top=True)
            snap = self.snap(value)
            event = self.emit(
                node_id,
                "assign",
                ctrl,
                bindings={node.payload["target"]: snap},
                invocation=self._invocation,
                uses=self._dedup_uses(),
            )
            self.env[node.payload["target"]] = (value, event.seq)
            return
        if node.kind == "Return":
            self._begin_stmt()
            value = self.eval_expr(node.children[0], top=True)
            event = self.emit(
                node_id,
                "return",
                ctrl,
                invocation=self._invocation,
                uses=self._dedup_uses(),
            )
            event.detail["value"] = self.snap(value)
            raise _Return(value)
        if node.kind == "ExprStmt":
            self._begin_stmt()
            expr = self.ast.node(node.children[0])
            value = self.eval_expr(node.children[0], top=True)
            if self._invocation is not None and expr.kind in ("Call", "MethodCall"):
                kind = "tool_call" if self._is_tool(expr) else "builtin_call"
                self.emit(
                    node_id,
                    kind,
                    ctrl,
                    invocation=self._invocation,
                    uses=self._dedup_uses(),
                )
            return
        if node.kind == "If":
            self.exec_if(node, ctrl)
            return
        if node.kind == "For":
            self.exec_for(node, ctrl)
            return
        raise _Fault(node_id, f"cannot execute node kind {node.kind}")

    def exec_if(self, node: AstNode, ctrl: int) -> None:
        arms, else_stmts = if_arms(self.ast, node)
        cond_uses: list[tuple[str, int]] = []
        for arm_index, (cond, stmts) in enumerate(arms):
            self._begin_stmt()
            value = self.eval_expr(cond, top=True)
            cond_uses.extend(self._dedup_uses())
            if _truthy(value):
                event = self.emit(
                    node.id,
                    "branch_taken",
                    ctrl,
                    invocation=self._invocation,
                    uses=self._dedup_uses(),
                )
                event.detail["arm"] = arm_index
                for stmt in stmts:
                    self.exec_stmt(stmt, ctrl=event.seq)
                return
        if else_stmts:
            event = self.emit(node.id, "branch_taken", ctrl, uses=_dedup(cond_uses))
            event.detail["arm"] = len(arms)
            for stmt in else_stmts:
                self.exec_stmt(stmt, ctrl=event.seq)
        # All conditions false and no else arm: no event at all.

    def exec_for(self, node: AstNode, ctrl: int) -> None:
        var = node.payload["var"]
        self._begin_stmt()
        iterable = self.eval_expr(node.children[0], top=True)
        if not isinstance(iterable, list):
            raise _Fault(node.id, "for-loop iterable must be a list")
        enter = self.emit(
            node.id,
            "loop_enter",
            ctrl,
            invocation=self._invocation,
            uses=self._dedup_uses(),
        )
        enter.detail["items"] = len(iterable)
        count = 0
        for i, item in enumerate(iterable):
            self.tick(node.id)
            iter_event = self.emit(
                node.id, "loop_iter", enter.seq, bindings={var: self.snap(item)}
            )
            iter_event.detail["iteration"] = i
            self.env[var] = (item, iter_event.seq)
            count += 1
            for stmt in node.children[1:]:
                self.exec_stmt(stmt, ctrl=iter_event.seq)
        exit_event = self.emit(node.id, "loop_exit", ctrl)
        exit_event.detail["iterations"] = count
        exit_event.detail["enter"] = enter.seq

    def _begin_stmt(self) -> None:
        self._uses = []
        self._invocation = None

    def _is_tool(self, node: AstNode) -> bool:
        if node.kind == "MethodCall":
            return node.payload["method"] in TOOL_METHODS
        return node.payload.get("func") == "distance"

    # -- expression evaluation

    def eval_expr(self, node_id: int, top: bool = False) -> Value:
        node = self.ast.node(node_id)
        kind = node.kind
        if kind == "Literal":
            return node.payload["value"]
        if kind == "Name":
            name = node.payload["id"]
            if name not in self.env:
                raise _Fault(node_id, f"undefined name {name!r}")
            value, def_seq = self.env[name]
            if def_seq >= 0:
                self._uses.append((name, def_seq))
            return value
        if kind == "ListLit":
            if len(node.children) > self.limits.max_list_len:
                raise _Fault(node_id, "list literal too long")
            return [self.eval_expr(c) for c in node.children]
        if kind == "Attribute":
            return self.eval_attribute(node)
        if kind == "Index":
            return self.eval_index(node)
        if kind == "Unary":
            value = self.eval_expr(node.children[0])
            if node.payload["op"] == "not":
                return not _truthy(value)
            if not isinstance(value, (int, float)) or isinstance(value, bool):
                raise _Fault(node.id, "unary minus needs a number")
            return -value
        if kind == "Binary":
            return self.eval_binary(node)
        if kind == "Call":
            result = self.eval_call(node)
            if top:
                self._record_invocation(node.payload["func"], self._last_args, result)
            return result
        if kind == "MethodCall":
            result = self.eval_method(node)
            if top:
                self._record_invocation(node.payload["method"], self._last_args, result)
            return result
        raise _Fault(node_id, f"cannot evaluate node kind {kind}")

    def _record_invocation(self, callee: str, args: list[Value], result: Value) -> None:
        self._invocation = (callee, [self.snap(a) for a in args], self.snap(result))

    def eval_attribute(self, node: AstNode) -> Value:
        obj = self.eval_expr(node.children[0])
        attr = node.payload["attr"]
        if isinstance(obj, Patch):
            if attr in ("left", "lower", "right", "upper", "width", "height",
                        "horizontal_center", "vertical_center"):
                return getattr(obj, attr)
            raise _Fault(node.id, f"patch has no attribute {attr!r}")
        raise _Fault(node.id, "attribute access on non-patch value")

    def eval_index(self, node: AstNode) -> Value:
        obj = self.eval_expr(node.children[0])
        index = self.eval_expr(node.children[1])
        if not isinstance(obj, list) or not isinstance(index, int) or isinstance(index, bool):
            raise _Fault(node.id, "indexing needs a list and an integer")
        if index < -len(obj) or index >= len(obj):
            raise _Fault(node.id, f"index {index} out of range for list of {len(obj)}")
        return obj[index]

    def eval_binary(self, node: AstNode) -> Value:
        op = node.payload["op"]
        if op in ("and", "or"):
            left = _truthy(self.eval_expr(node.children[0]))
            if op == "and" and not left:
                return False
            if op == "or" and left:
                return True
            return _truthy(self.eval_expr(node.children[1]))
        left = self.eval_expr(node.children[0])
        right = self.eval_expr(node.children[1])
        if op == "==":
            return left == right
        if op == "!=":
            return left != right
        if op == "in":
            if isinstance(right, list):
                return any(left == item for item in right)
            if isinstance(right, str) and isinstance(left, str):
                return left in right
            raise _Fault(node.id, "'in' needs a list or string on the right")
        if op in ("<", "<=", ">", ">="):
            if not _comparable(left, right):
                raise _Fault(node.id, f"cannot order {type(left).__name__} and {type(right).__name__}")
            return {"<": left < right, "<=": left <= right, ">": left > right, ">=": left >= right}[op]
        if op == "+":
            if _is_num(left) and _is_num(right):
                result = left + right
                if isinstance(result, float) and not math.isfinite(result):
                    raise _Fault(node.id, "arithmetic produced a non-finite value")
                return result
            if isinstance(left, str) and isinstance(right, str):
                return left + right
            if isinstance(left, list) and isinstance(right, list):
                joined = left + right
                if len(joined) > self.limits.max_list_len:
                    raise _Fault(node.id, "list too long")
                return joined
            raise _Fault(node.id, f"cannot add {type(left).__name__} and {type(right).__name__}")
        if not (_is_num(left) and _is_num(right)):
            raise _Fault(node.id, f"arithmetic needs numbers, got {type(left).__name__}")
        if op == "-":
            result = left - right
        elif op == "*":
            result = left * right
        elif op == "/":
            if right == 0:
                raise _Fault(node.id, "division by zero")
            result = left / right
        else:
            raise _Fault(node.id, f"unknown operator {op!r}")
        if isinstance(result, float) and not math.isfinite(result):
            raise _Fault(node.id, "arithmetic produced a non-finite value")
        return result

    def eval_call(self, node: AstNode) -> Value:
        func = node.payload["func"]
        args = [self.eval_expr(c) for c in node.children]
        self._last_args = args
        if func == "len":
            if isinstance(args[0], (list, str)) and len(args) == 1:
                return len(args[0])
            raise _Fault(node.id, "len needs one list or string")
        if func == "str":
            if len(args) != 1:
                raise _Fault(node.id, "str needs one argument")
            return plain_text(args[0])
        if func == "int":
            if len(args) != 1:
                raise _Fault(node.id, "int needs one argument")
            try:
                return int(args[0])
            except (TypeError, ValueError):
                raise _Fault(node.id, "cannot convert to int")
        if func == "abs":
            if len(args) == 1 and _is_num(args[0]):
                return abs(args[0])
            raise _Fault(node.id, "abs needs one number")
        if func == "bool_to_yesno":
            if len(args) != 1:
                raise _Fault(node.id, "bool_to_yesno needs one argument")
            return "yes" if _truthy(args[0]) else "no"
        if func == "sorted":
            if len(args) != 1 or not isinstance(args[0], list):
                raise _Fault(node.id, "sorted needs one list")
            try:
                return sorted(args[0], key=_sort_key)
            except TypeError:
                raise _Fault(node.id, "list elements are not orderable")
        if func in ("min", "max"):
            pool = args[0] if len(args) == 1 and isinstance(args[0], list) else args
            if not pool:
                raise _Fault(node.id, f"{func} of empty sequence")
            try:
                return min(pool, key=_sort_key) if func == "min" else max(pool, key=_sort_key)
            except TypeError:
                raise _Fault(node.id, "values are not orderable")
        if func == "distance":
            if len(args) == 2 and isinstance(args[0], Patch) and isinstance(args[1], Patch):
                return sw.tool_distance(args[0], args[1])
            raise _Fault(node.id, "distance needs two patches")
        raise _Fault(node.id, f"unknown builtin {func!r}")

    def eval_method(self, node: AstNode) -> Value:
        receiver = self.eval_expr(node.children[0])
        args = [self.eval_expr(c) for c in node.children[1:]]
        self._last_args = args
        if not isinstance(receiver, Patch):
            raise _Fault(node.id, "method call on non-patch value")
        method = node.payload["method"]
        try:
            if method == "find" and len(args) == 1 and isinstance(args[0], str):
                return sw.tool_find(self.scene, receiver, args[0])
            if method == "exists" and len(args) == 1 and isinstance(args[0], str):
                return sw.tool_exists(self.scene, receiver, args[0], self.tools)
            if method == "verify_property" and len(args) == 2:
                return sw.tool_verify_property(self.scene, receiver, args[0], args[1], self.tools)
            if method == "best_text_match" and len(args) == 1 and isinstance(args[0], list):
                return sw.tool_best_text_match(self.scene, receiver, args[0])
            if method == "simple_query" and len(args) == 1 and isinstance(args[0], str):
                return sw.tool_simple_query(self.scene, receiver, args[0])
            if method == "compute_depth" and len(args) == 0:
                return sw.tool_compute_depth(self.scene, receiver)
        except (ValueError, sw.SceneLookupError) as exc:
            raise _Fault(node.id, str(exc))
        raise _Fault(node.id, f"unknown or misused tool method {method!r}")


def _dedup(pairs: list[tuple[str, int]]) -> list[tuple[str, int]]:
    out = []
    for p in pairs:
        if p not in out:
            out.append(p)
    return out


def _is_num(v: Value) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _comparable(a: Value, b: Value) -> bool:
    if _is_num(a) and _is_num(b):
        return True
    return isinstance(a, str) and isinstance(b, str)


def _sort_key(v: Value):
    if isinstance(v, Patch):
        return v.box
    return v


def execute(
    ast: Ast,
    scene: Scene,
    limits: StepLimits | None = None,
    tools: ToolConfig | None = None,
    program_id: str = "",
) -> ExecutionTrace:
    """Run a program against a scene, producing an ExecutionTrace.

    Never raises for program-level failures: name errors, type errors, bad
    indexing, division by zero and the like yield status ``runtime_error``,
    and exceeding ``limits.max_steps`` yields ``step_limit``.
    """
    limits = limits or StepLimits()
    if limits.max_steps < 1:
        raise ValueError("max_steps must be >= 1")
    interp = _Interp(ast, scene, limits, tools)
    try:
        interp.run()
    except _Return as ret:
        return ExecutionTrace(program_id=program_id, events=interp.events, result=ret.value, status="ok")
    except _Fault as fault:
        return ExecutionTrace(
            program_id=program_id,
            events=interp.events,
            result=None,
            status="runtime_error",
            error={"node_id": fault.node_id, "message": str(fault)},
        )
    except _StepLimit:
        return ExecutionTrace(program_id=program_id, events=interp.events, result=None, status="step_limit")
    raise AssertionError("unreachable")


# ---------------------------------------------------------------------------
# answer normalization and the faithfulness filter

_NUMBER_WORDS = {
    word: str(i)
    for i, word in enumerate(
        "zero one two three four five six seven eight nine ten eleven twelve "
        "thirteen fourteen fifteen sixteen seventeen eighteen nineteen twenty".split()
    )
}

_ARTICLES = {"a", "an", "the"}


def normalize_answer(raw: str) -> str:
    """Lowercase, trim, strip leading articles, map number words zero-twenty
    to digits, and canonicalize yes/true and no/false."""
    text = raw.strip().lower()
    words = text.split()
    while words and words[0] in _ARTICLES:
        words = words[1:]
    if len(words) == 1 and words[0] in ("yes", "true"):
        return "yes"
    if len(words) == 1 and words[0] in ("no", "false"):
        return "no"
    return " ".join(_NUMBER_WORDS.get(w, w) for w in words)


@dataclass
class RejectedTrace:
    trace: ExecutionTrace
    query: Query
    reason: str  # wrong_answer | runtime_error | step_limit


def faithfulness_filter(
    pairs: list[tuple[ExecutionTrace, Query]],
) -> tuple[list[tuple[ExecutionTrace, Query]], list[RejectedTrace]]:
    """Keep traces that finished ok with the expected normalized answer."""
    kept = []
    rejected = []
    for trace, query in pairs:
        if trace.status != "ok":
            rejected.append(RejectedTrace(trace, query, trace.status))
            continue
        got = normalize_answer(plain_text(trace.result))
        want = normalize_answer(query.expected_answer)
        if got == want:
            kept.append((trace, query))
        else:
            rejected.append(RejectedTrace(trace, query, "wrong_answer"))
    return kept, rejected


# ---------------------------------------------------------------------------
# trace (de)serialization for traces.jsonl

def trace_to_record(trace: ExecutionTrace, query_id: str) -> dict:
    return {
        "program_id": trace.program_id,
        "query_id": query_id,
        "status": trace.status,
        "error": trace.error,
        "result": value_to_json(trace.result),
        "events": [
            {
                "seq": e.seq,
                "node_id": e.node_id,
                "kind": e.kind,
                "bindings": {k: value_to_json(v) for k, v in e.bindings.items()},
                "invocation": (
                    None
                    if e.invocation is None
                    else {
                        "callee": e.invocation[0],
                        "args": [value_to_json(a) for a in e.invocation[1]],
                        "result": value_to_json(e.invocation[2]),
                    }
                ),
                "uses": [[name, seq] for name, seq in e.uses],
                "detail": {k: value_to_json(v) for k, v in e.detail.items()},
            }
            for e in trace.events
        ],
    }


def trace_from_record(rec: dict) -> ExecutionTrace:
    events = []
    for ev in rec["events"]:
        invocation = None
        if ev["invocation"] is not None:
            inv = ev["invocation"]
            invocation = (
                inv["callee"],
                [value_from_json(a) for a in inv["args"]],
                value_from_json(inv["result"]),
            )
        events.append(
            TraceEvent(
                seq=ev["seq"],
                node_id=ev["node_id"],
                kind=ev["kind"],
                bindings={k: value_from_json(v) for k, v in ev["bindings"].items()},
                invocation=invocation,
                uses=[(name, seq) for name, seq in ev["uses"]],
                detail={k: value_from_json(v) for k, v in ev["detail"].items()},
            )
        )
    return ExecutionTrace(
        program_id=rec["program_id"],
        events=events,
        result=value_from_json(rec["result"]),
        status=rec["status"],
        error=rec.get("error"),
    )
