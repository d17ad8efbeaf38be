"""Lexer, recursive-descent parser, and AST for the visual-program DSL.

The language is a closed imperative subset: assignments, ``if``/``elif``/
``else``, ``for`` over lists, ``return``, and expression statements, with
4-space indentation delimiting blocks. A program source is the body of an
implicit entry function whose single parameter (``image``) is bound to the
full-canvas patch at execution time; the AST root is that entry node.

Parenthesized grouping is accepted (and emitted by the renderer where
precedence requires it) even though parentheses never appear as AST nodes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

from .errors import DslSyntaxError, LexError

KEYWORDS = {"if", "elif", "else", "for", "in", "return", "and", "or", "not", "True", "False"}

BUILTIN_CALLABLES = {"len", "sorted", "min", "max", "abs", "str", "int", "bool_to_yesno", "distance"}

TOOL_METHODS = {"find", "exists", "verify_property", "best_text_match", "simple_query", "compute_depth"}

_COMPARISONS = {"==", "!=", "<", "<=", ">", ">=", "in"}
_INDENT_WIDTH = 4


# ---------------------------------------------------------------------------
# tokens

@dataclass(frozen=True)
class Token:
    kind: str  # NAME, INT, FLOAT, STRING, OP, KEYWORD, NEWLINE, INDENT, DEDENT, EOF
    value: Any
    line: int
    col: int


_TWO_CHAR_OPS = {"==", "!=", "<=", ">="}
_ONE_CHAR_OPS = set("()[],.:=+-*/<>")


def tokenize(source: str) -> list[Token]:
    tokens: list[Token] = []
    indent_stack = [0]
    lines = source.split("\n")
    for lineno, raw in enumerate(lines, start=1):
        if raw.strip() == "":
            continue
        if "\t" in raw[: len(raw) - len(raw.lstrip())]:
            raise LexError("tabs are not allowed in indentation", lineno, 1)
        stripped = raw.lstrip(" ")
        indent = len(raw) - len(stripped)
        if indent % _INDENT_WIDTH != 0:
            raise LexError(f"indentation must be a multiple of {_INDENT_WIDTH} spaces", lineno, 1)
        level = indent // _INDENT_WIDTH
        if level > indent_stack[-1]:
            if level != indent_stack[-1] + 1:
                raise LexError("indentation increased by more than one level", lineno, 1)
            indent_stack.append(level)
            tokens.append(Token("INDENT", None, lineno, 1))
        else:
            while level < indent_stack[-1]:
                indent_stack.pop()
                tokens.append(Token("DEDENT", None, lineno, 1))
            if level != indent_stack[-1]:
                raise LexError("dedent does not match any outer level", lineno, 1)
        _lex_line(stripped, lineno, indent, tokens)
        tokens.append(Token("NEWLINE", None, lineno, len(raw) + 1))
    while indent_stack[-1] > 0:
        indent_stack.pop()
        tokens.append(Token("DEDENT", None, len(lines) + 1, 1))
    tokens.append(Token("EOF", None, len(lines) + 1, 1))
    return tokens


def _lex_line(text: str, lineno: int, offset: int, out: list[Token]) -> None:
    i = 0
    n = len(text)
    while i < n:
        ch = text[i]
        col = offset + i + 1
        if ch == " ":
            i += 1
            continue
        if ch.isdigit():
            j = i
            while j < n and text[j].isdigit():
                j += 1
            if j < n and text[j] == "." and j + 1 < n and text[j + 1].isdigit():
                j += 1
                while j < n and text[j].isdigit():
                    j += 1
                out.append(Token("FLOAT", float(text[i:j]), lineno, col))
            else:
                out.append(Token("INT", int(text[i:j]), lineno, col))
            i = j
            continue
        if ch.isalpha() or ch == "_":
            j = i
            while j < n and (text[j].isalnum() or text[j] == "_"):
                j += 1
            word = text[i:j]
            if word in KEYWORDS:
                out.append(Token("KEYWORD", word, lineno, col))
            else:
                out.append(Token("NAME", word, lineno, col))
            i = j
            continue
        if ch in "'\"":
            value, j = _lex_string(text, i, lineno, col)
            out.append(Token("STRING", value, lineno, col))
            i = j
            continue
        two = text[i : i + 2]
        if two in _TWO_CHAR_OPS:
            out.append(Token("OP", two, lineno, col))
            i += 2
            continue
        if ch in _ONE_CHAR_OPS:
            out.append(Token("OP", ch, lineno, col))
            i += 1
            continue
        raise LexError(f"unknown character {ch!r}", lineno, col)


def _lex_string(text: str, start: int, lineno: int, col: int) -> tuple[str, int]:
    quote = text[start]
    i = start + 1
    parts: list[str] = []
    while i < len(text):
        ch = text[i]
        if ch == "\\":
            if i + 1 >= len(text):
                raise LexError("unterminated escape", lineno, col)
            esc = text[i + 1]
            mapping = {"n": "\n", "t": "\t", "\\": "\\", "'": "'", '"': '"'}
            if esc not in mapping:
                raise LexError(f"unknown escape \\{esc}", lineno, col)
            parts.append(mapping[esc])
            i += 2
            continue
        if ch == quote:
            return "".join(parts), i + 1
        parts.append(ch)
        i += 1
    raise LexError("unterminated string literal", lineno, col)


# ---------------------------------------------------------------------------
# AST

@dataclass
class AstNode:
    id: int
    kind: str
    children: list[int] = field(default_factory=list)
    payload: dict = field(default_factory=dict)
    span: tuple[int, int, int, int] = (0, 0, 0, 0)  # start line/col, end line/col


@dataclass
class Ast:
    nodes: list[AstNode]
    root: int

    def node(self, node_id: int) -> AstNode:
        return self.nodes[node_id]

    @property
    def edges(self) -> list[tuple[int, int]]:
        return [(n.id, c) for n in self.nodes for c in n.children]

    def parent_map(self) -> dict[int, int]:
        return {c: p for p, c in self.edges}

    def validate(self) -> None:
        """Check tree shape: unique ids, |E| = |V| - 1, all reachable, arity."""
        ids = [n.id for n in self.nodes]
        if len(ids) != len(set(ids)):
            raise ValueError("duplicate node ids")
        if len(self.edges) != len(self.nodes) - 1:
            raise ValueError("edge count must be |V| - 1")
        seen: set[int] = set()
        stack = [self.root]
        while stack:
            nid = stack.pop()
            if nid in seen:
                raise ValueError(f"node {nid} reached twice")
            seen.add(nid)
            stack.extend(self.node(nid).children)
        if len(seen) != len(self.nodes):
            raise ValueError("unreachable nodes present")
        for n in self.nodes:
            _check_arity(n)


def _check_arity(node: AstNode) -> None:
    k = node.kind
    n = len(node.children)
    if k == "Binary" and n != 2:
        raise ValueError(f"Binary node {node.id} must have 2 children, has {n}")
    if k in ("Unary", "Assign", "Return", "ExprStmt", "Attribute") and n != 1:
        raise ValueError(f"{k} node {node.id} must have 1 child, has {n}")
    if k == "Index" and n != 2:
        raise ValueError(f"Index node {node.id} must have 2 children, has {n}")
    if k in ("Literal", "Name") and n != 0:
        raise ValueError(f"{k} node {node.id} must be a leaf")
    if k == "For" and n < 2:
        raise ValueError(f"For node {node.id} needs an iterable and a body")
    if k == "MethodCall" and n < 1:
        raise ValueError(f"MethodCall node {node.id} needs a receiver")
    if k == "If":
        counts = node.payload["arm_stmt_counts"]
        expected = len(counts) + sum(counts) + node.payload.get("else_count", 0)
        if n != expected:
            raise ValueError(f"If node {node.id} child count {n} != expected {expected}")
        if any(c < 1 for c in counts):
            raise ValueError(f"If node {node.id} has an empty arm")
    if k == "Entry" and n < 1:
        raise ValueError("Entry node needs at least one statement")


def if_arms(ast: Ast, node: AstNode) -> tuple[list[tuple[int, list[int]]], list[int]]:
    """Decode an If node's children into [(cond_id, [stmt_ids]), ...] plus
    the else statement ids."""
    counts = node.payload["arm_stmt_counts"]
    else_count = node.payload.get("else_count", 0)
    arms = []
    i = 0
    for count in counts:
        cond = node.children[i]
        stmts = node.children[i + 1 : i + 1 + count]
        arms.append((cond, list(stmts)))
        i += 1 + count
    else_stmts = list(node.children[i : i + else_count])
    return arms, else_stmts


def ast_equal(a: Ast, b: Ast) -> bool:
    """Structural equality ignoring node ids and spans."""

    def eq(na: int, nb: int) -> bool:
        x, y = a.node(na), b.node(nb)
        if x.kind != y.kind or x.payload != y.payload:
            return False
        if len(x.children) != len(y.children):
            return False
        return all(eq(ca, cb) for ca, cb in zip(x.children, y.children))

    return eq(a.root, b.root)


# ---------------------------------------------------------------------------
# parser

class _Parser:
    def __init__(self, tokens: list[Token]):
        self.tokens = tokens
        self.pos = 0
        self.nodes: list[AstNode] = []

    # -- token plumbing

    def peek(self, ahead: int = 0) -> Token:
        return self.tokens[min(self.pos + ahead, len(self.tokens) - 1)]

    def advance(self) -> Token:
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def expect(self, kind: str, value: Any = None) -> Token:
        tok = self.peek()
        if tok.kind != kind or (value is not None and tok.value != value):
            want = value if value is not None else kind
            got = tok.value if tok.value is not None else tok.kind
            raise DslSyntaxError(f"expected {want!r}, got {got!r}", tok.line, tok.col)
        return self.advance()

    def at(self, kind: str, value: Any = None) -> bool:
        tok = self.peek()
        return tok.kind == kind and (value is None or tok.value == value)

    def make(self, kind: str, children: list[int], payload: dict, span: tuple) -> int:
        node = AstNode(id=len(self.nodes), kind=kind, children=children, payload=payload, span=span)
        self.nodes.append(node)
        return node.id

    def span_of(self, node_id: int) -> tuple[int, int, int, int]:
        return self.nodes[node_id].span

    # -- grammar

    def parse_program(self) -> Ast:
        stmts = []
        while not self.at("EOF"):
            stmts.append(self.parse_statement())
        if not stmts:
            tok = self.peek()
            raise DslSyntaxError("expected at least one statement", tok.line, tok.col)
        first = self.span_of(stmts[0])
        last = self.span_of(stmts[-1])
        root = self.make("Entry", stmts, {"param": "image"}, (first[0], first[1], last[2], last[3]))
        return Ast(nodes=self.nodes, root=root)

    def parse_statement(self) -> int:
        tok = self.peek()
        if tok.kind == "KEYWORD" and tok.value == "if":
            return self.parse_if()
        if tok.kind == "KEYWORD" and tok.value == "for":
            return self.parse_for()
        if tok.kind == "KEYWORD" and tok.value == "return":
            start = self.advance()
            value = self.parse_expr()
            end = self.span_of(value)
            self.expect("NEWLINE")
            return self.make("Return", [value], {}, (start.line, start.col, end[2], end[3]))
        if tok.kind == "NAME" and self.peek(1).kind == "OP" and self.peek(1).value == "=":
            name = self.advance()
            self.advance()  # '='
            value = self.parse_expr()
            end = self.span_of(value)
            self.expect("NEWLINE")
            return self.make(
                "Assign", [value], {"target": name.value}, (name.line, name.col, end[2], end[3])
            )
        expr = self.parse_expr()
        end = self.span_of(expr)
        self.expect("NEWLINE")
        return self.make("ExprStmt", [expr], {}, end)

    def parse_block(self) -> list[int]:
        self.expect("NEWLINE")
        self.expect("INDENT")
        stmts = [self.parse_statement()]
        while not self.at("DEDENT"):
            stmts.append(self.parse_statement())
        self.expect("DEDENT")
        return stmts

    def parse_if(self) -> int:
        start = self.expect("KEYWORD", "if")
        children: list[int] = []
        counts: list[int] = []
        cond = self.parse_expr()
        self.expect("OP", ":")
        stmts = self.parse_block()
        children.append(cond)
        children.extend(stmts)
        counts.append(len(stmts))
        else_count = 0
        while self.at("KEYWORD", "elif"):
            self.advance()
            cond = self.parse_expr()
            self.expect("OP", ":")
            stmts = self.parse_block()
            children.append(cond)
            children.extend(stmts)
            counts.append(len(stmts))
        if self.at("KEYWORD", "else"):
            self.advance()
            self.expect("OP", ":")
            stmts = self.parse_block()
            children.extend(stmts)
            else_count = len(stmts)
        end = self.span_of(children[-1])
        payload = {"arm_stmt_counts": counts, "else_count": else_count}
        return self.make("If", children, payload, (start.line, start.col, end[2], end[3]))

    def parse_for(self) -> int:
        start = self.expect("KEYWORD", "for")
        var = self.expect("NAME")
        self.expect("KEYWORD", "in")
        iterable = self.parse_expr()
        self.expect("OP", ":")
        body = self.parse_block()
        end = self.span_of(body[-1])
        return self.make(
            "For",
            [iterable] + body,
            {"var": var.value},
            (start.line, start.col, end[2], end[3]),
        )

    # expressions, lowest precedence first

    def parse_expr(self) -> int:
        return self.parse_or()

    def _binary_chain(self, parse_sub, ops: set[str], kinds: tuple[str, ...]) -> int:
        left = parse_sub()
        while (self.peek().kind in kinds and self.peek().value in ops):
            op = self.advance()
            right = parse_sub()
            ls, rs = self.span_of(left), self.span_of(right)
            left = self.make("Binary", [left, right], {"op": op.value}, (ls[0], ls[1], rs[2], rs[3]))
        return left

    def parse_or(self) -> int:
        return self._binary_chain(self.parse_and, {"or"}, ("KEYWORD",))

    def parse_and(self) -> int:
        return self._binary_chain(self.parse_not, {"and"}, ("KEYWORD",))

    def parse_not(self) -> int:
        if self.at("KEYWORD", "not"):
            tok = self.advance()
            operand = self.parse_not()
            end = self.span_of(operand)
            return self.make("Unary", [operand], {"op": "not"}, (tok.line, tok.col, end[2], end[3]))
        return self.parse_comparison()

    def parse_comparison(self) -> int:
        left = self.parse_arith()
        while (self.peek().kind == "OP" and self.peek().value in _COMPARISONS) or self.at(
            "KEYWORD", "in"
        ):
            op = self.advance()
            right = self.parse_arith()
            ls, rs = self.span_of(left), self.span_of(right)
            left = self.make("Binary", [left, right], {"op": op.value}, (ls[0], ls[1], rs[2], rs[3]))
        return left

    def parse_arith(self) -> int:
        return self._binary_chain(self.parse_term, {"+", "-"}, ("OP",))

    def parse_term(self) -> int:
        return self._binary_chain(self.parse_factor, {"*", "/"}, ("OP",))

    def parse_factor(self) -> int:
        if self.at("OP", "-"):
            tok = self.advance()
            operand = self.parse_factor()
            end = self.span_of(operand)
            return self.make("Unary", [operand], {"op": "-"}, (tok.line, tok.col, end[2], end[3]))
        return self.parse_postfix()

    def parse_postfix(self) -> int:
        node = self.parse_atom()
        while True:
            if self.at("OP", "."):
                self.advance()
                attr = self.expect("NAME")
                if self.at("OP", "("):
                    args = self.parse_args()
                    start = self.span_of(node)
                    node = self.make(
                        "MethodCall",
                        [node] + args,
                        {"method": attr.value},
                        (start[0], start[1], attr.line, attr.col),
                    )
                else:
                    start = self.span_of(node)
                    node = self.make(
                        "Attribute", [node], {"attr": attr.value}, (start[0], start[1], attr.line, attr.col)
                    )
                continue
            if self.at("OP", "["):
                tok = self.advance()
                index = self.parse_expr()
                self.expect("OP", "]")
                start = self.span_of(node)
                end = self.span_of(index)
                node = self.make("Index", [node, index], {}, (start[0], start[1], end[2], end[3]))
                continue
            if self.at("OP", "("):
                base = self.nodes[node]
                if base.kind != "Name":
                    tok = self.peek()
                    raise DslSyntaxError("only named built-ins are callable", tok.line, tok.col)
                func = base.payload["id"]
                if func not in BUILTIN_CALLABLES:
                    raise DslSyntaxError(
                        f"unknown function {func!r} (builtins: {', '.join(sorted(BUILTIN_CALLABLES))})",
                        base.span[0],
                        base.span[1],
                    )
                args = self.parse_args()
                start = base.span
                # Reuse the Name node's slot as the Call to keep the tree clean.
                self.nodes[node].kind = "Call"
                self.nodes[node].payload = {"func": func}
                self.nodes[node].children = args
                continue
            break
        return node

    def parse_args(self) -> list[int]:
        self.expect("OP", "(")
        args = []
        if not self.at("OP", ")"):
            args.append(self.parse_expr())
            while self.at("OP", ","):
                self.advance()
                args.append(self.parse_expr())
        self.expect("OP", ")")
        return args

    def parse_atom(self) -> int:
        tok = self.peek()
        if tok.kind == "INT" or tok.kind == "FLOAT":
            self.advance()
            return self.make("Literal", [], {"value": tok.value}, (tok.line, tok.col, tok.line, tok.col))
        if tok.kind == "STRING":
            self.advance()
            return self.make("Literal", [], {"value": tok.value}, (tok.line, tok.col, tok.line, tok.col))
        if tok.kind == "KEYWORD" and tok.value in ("True", "False"):
            self.advance()
            return self.make(
                "Literal", [], {"value": tok.value == "True"}, (tok.line, tok.col, tok.line, tok.col)
            )
        if tok.kind == "NAME":
            self.advance()
            return self.make("Name", [], {"id": tok.value}, (tok.line, tok.col, tok.line, tok.col))
        if tok.kind == "OP" and tok.value == "[":
            self.advance()
            items = []
            if not self.at("OP", "]"):
                items.append(self.parse_expr())
                while self.at("OP", ","):
                    self.advance()
                    items.append(self.parse_expr())
            end = self.expect("OP", "]")
            return self.make("ListLit", items, {}, (tok.line, tok.col, end.line, end.col))
        if tok.kind == "OP" and tok.value == "(":
            self.advance()
            inner = self.parse_expr()
            self.expect("OP", ")")
            return inner
        got = tok.value if tok.value is not None else tok.kind
        raise DslSyntaxError(f"expected an expression, got {got!r}", tok.line, tok.col)


def parse(source: str) -> Ast:
    """Parse DSL source into an AST; raises LexError / DslSyntaxError."""
    if not source.strip():
        raise DslSyntaxError("empty source", 1, 1)
    ast = _Parser(tokenize(source)).parse_program()
    ast.validate()
    return ast


# ---------------------------------------------------------------------------
# renderer

_PREC = {"or": 1, "and": 2, "not": 3, "cmp": 4, "add": 5, "mul": 6, "neg": 7, "postfix": 8}


def _op_prec(op: str) -> int:
    if op == "or":
        return _PREC["or"]
    if op == "and":
        return _PREC["and"]
    if op in _COMPARISONS:
        return _PREC["cmp"]
    if op in ("+", "-"):
        return _PREC["add"]
    return _PREC["mul"]


def render_source(ast: Ast) -> str:
    """Canonical pretty-printer; ``parse(render_source(a))`` is structurally
    equal to ``a``."""
    lines: list[str] = []
    root = ast.node(ast.root)
    for stmt in root.children:
        _render_stmt(ast, stmt, 0, lines)
    return "\n".join(lines)


def _render_stmt(ast: Ast, node_id: int, depth: int, lines: list[str]) -> None:
    node = ast.node(node_id)
    pad = " " * (_INDENT_WIDTH * depth)
    if node.kind == "Assign":
        lines.append(f"{pad}{node.payload['target']} = {_render_expr(ast, node.children[0])}")
    elif node.kind == "Return":
        lines.append(f"{pad}return {_render_expr(ast, node.children[0])}")
    elif node.kind == "ExprStmt":
        lines.append(f"{pad}{_render_expr(ast, node.children[0])}")
    elif node.kind == "For":
        iterable = _render_expr(ast, node.children[0])
        lines.append(f"{pad}for {node.payload['var']} in {iterable}:")
        for child in node.children[1:]:
            _render_stmt(ast, child, depth + 1, lines)
    elif node.kind == "If":
        arms, else_stmts = if_arms(ast, node)
        for i, (cond, stmts) in enumerate(arms):
            keyword = "if" if i == 0 else "elif"
            lines.append(f"{pad}{keyword} {_render_expr(ast, cond)}:")
            for s in stmts:
                _render_stmt(ast, s, depth + 1, lines)
        if else_stmts:
            lines.append(f"{pad}else:")
            for s in else_stmts:
                _render_stmt(ast, s, depth + 1, lines)
    else:
        raise ValueError(f"not a statement kind: {node.kind}")


def render_expr(ast: Ast, node_id: int) -> str:
    """Render a single expression subtree (used by the slice rebuilder)."""
    return _render_expr(ast, node_id)


def _literal_text(value: Any) -> str:
    if isinstance(value, bool):
        return "True" if value else "False"
    if isinstance(value, (int, float)):
        return repr(value)
    escaped = value.replace("\\", "\\\\").replace("'", "\\'").replace("\n", "\\n").replace("\t", "\\t")
    return f"'{escaped}'"


def _render_expr(ast: Ast, node_id: int) -> str:
    text, _ = _render_prec(ast, node_id)
    return text


def _render_prec(ast: Ast, node_id: int) -> tuple[str, int]:
    node = ast.node(node_id)
    atom = 10
    if node.kind == "Literal":
        return _literal_text(node.payload["value"]), atom
    if node.kind == "Name":
        return node.payload["id"], atom
    if node.kind == "ListLit":
        items = ", ".join(_render_expr(ast, c) for c in node.children)
        return f"[{items}]", atom
    if node.kind == "Call":
        args = ", ".join(_render_expr(ast, c) for c in node.children)
        return f"{node.payload['func']}({args})", _PREC["postfix"]
    if node.kind == "MethodCall":
        recv = _wrap(ast, node.children[0], _PREC["postfix"])
        args = ", ".join(_render_expr(ast, c) for c in node.children[1:])
        return f"{recv}.{node.payload['method']}({args})", _PREC["postfix"]
    if node.kind == "Attribute":
        recv = _wrap(ast, node.children[0], _PREC["postfix"])
        return f"{recv}.{node.payload['attr']}", _PREC["postfix"]
    if node.kind == "Index":
        recv = _wrap(ast, node.children[0], _PREC["postfix"])
        return f"{recv}[{_render_expr(ast, node.children[1])}]", _PREC["postfix"]
    if node.kind == "Unary":
        op = node.payload["op"]
        prec = _PREC["not"] if op == "not" else _PREC["neg"]
        operand = _wrap(ast, node.children[0], prec)
        joint = " " if op == "not" else ""
        return f"{op}{joint}{operand}", prec
    if node.kind == "Binary":
        op = node.payload["op"]
        prec = _op_prec(op)
        left = _wrap(ast, node.children[0], prec)
        right = _wrap(ast, node.children[1], prec + 1)  # left-associative
        return f"{left} {op} {right}", prec
    raise ValueError(f"not an expression kind: {node.kind}")


def _wrap(ast: Ast, node_id: int, min_prec: int) -> str:
    text, prec = _render_prec(ast, node_id)
    if prec < min_prec:
        return f"({text})"
    return text
