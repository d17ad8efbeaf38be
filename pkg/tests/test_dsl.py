from __future__ import annotations

import pytest
from hypothesis import given, settings, strategies as st

from tracedistill.codegen import TemplateBank, generate_program
from tracedistill.dsl import ast_equal, parse, render_source
from tracedistill.errors import DslSyntaxError, LexError
from tracedistill.scenes import generate_queries, generate_scenes


class TestParse:
    def test_smallest_program(self):
        ast = parse("x = 1\nreturn x")
        root = ast.node(ast.root)
        assert root.kind == "Entry"
        kinds = [ast.node(c).kind for c in root.children]
        assert kinds == ["Assign", "Return"]

    def test_if_with_trailing_return(self):
        ast = parse("if a == 1:\n    return 'yes'\nreturn 'no'")
        root = ast.node(ast.root)
        kinds = [ast.node(c).kind for c in root.children]
        assert kinds == ["If", "Return"]
        if_node = ast.node(root.children[0])
        assert if_node.payload["arm_stmt_counts"] == [1]
        assert if_node.payload["else_count"] == 0

    def test_elif_else_arms(self):
        source = (
            "if a < 1:\n    x = 1\nelif a < 2:\n    x = 2\n    y = 3\nelse:\n    x = 4\nreturn x"
        )
        ast = parse(source)
        if_node = ast.node(ast.node(ast.root).children[0])
        assert if_node.payload["arm_stmt_counts"] == [1, 2]
        assert if_node.payload["else_count"] == 1

    def test_for_loop(self):
        ast = parse("for p in xs:\n    y = p\nreturn y")
        for_node = ast.node(ast.node(ast.root).children[0])
        assert for_node.kind == "For"
        assert for_node.payload["var"] == "p"

    def test_expressions(self):
        ast = parse("return sorted(xs)[0].find('a')[1].depth")
        assert ast.node(ast.root).children  # parses

    def test_empty_source_rejected(self):
        with pytest.raises(DslSyntaxError):
            parse("   \n  ")

    def test_bad_indent_width(self):
        with pytest.raises(LexError) as err:
            parse("if a:\n   x = 1\nreturn x")
        assert err.value.line == 2

    def test_tab_indent_rejected(self):
        with pytest.raises(LexError):
            parse("if a:\n\tx = 1")

    def test_unknown_character(self):
        with pytest.raises(LexError, match="unknown character"):
            parse("x = 1 $ 2")

    def test_syntax_error_reports_expected(self):
        with pytest.raises(DslSyntaxError, match="expected"):
            parse("for p xs:\n    y = p")

    def test_unknown_builtin_rejected(self):
        with pytest.raises(DslSyntaxError, match="unknown function"):
            parse("x = foo(1)")

    def test_tree_shape(self):
        ast = parse("x = 1\nif x == 1:\n    y = x + 2\nreturn y")
        assert len(ast.edges) == len(ast.nodes) - 1
        ast.validate()


class TestRender:
    def test_assign(self):
        assert render_source(parse("x = 1")) == "x = 1"

    def test_nested_blocks_indent(self):
        source = "for p in xs:\n    if p == 1:\n        y = p\nreturn y"
        assert render_source(parse(source)) == source

    def test_precedence_parens_preserved(self):
        source = "return (a + b) * c"
        ast = parse(source)
        assert ast_equal(parse(render_source(ast)), ast)

    def test_round_trip_generated_corpus(self):
        scenes = generate_scenes(100, seed=21)
        queries = generate_queries(scenes, seed=22)
        bank = TemplateBank()
        for query in queries:
            program = generate_program(query, bank, seed=1)
            again = parse(render_source(program.ast))
            assert ast_equal(program.ast, again)

    def test_generator_determinism(self):
        scenes = generate_scenes(5, seed=3)
        query = generate_queries(scenes, seed=4)[0]
        bank = TemplateBank()
        a = generate_program(query, bank, seed=9)
        b = generate_program(query, bank, seed=9)
        assert a.source == b.source


# Random-AST round-trip: build source snippets bottom-up so every sample is valid.

_names = st.sampled_from(["x", "y", "zz", "patches", "count"])
_ints = st.integers(min_value=0, max_value=999).map(str)
_strings = st.sampled_from(["'a'", "'muffin'", "'b c'"])


def _exprs(depth: int) -> st.SearchStrategy[str]:
    base = st.one_of(_names, _ints, _strings, st.sampled_from(["True", "False"]))
    if depth <= 0:
        return base
    sub = _exprs(depth - 1)
    return st.one_of(
        base,
        st.tuples(sub, st.sampled_from(["+", "-", "*", "==", "<", "and", "or", "in"]), sub).map(
            lambda t: f"({t[0]} {t[1]} {t[2]})"
        ),
        st.tuples(st.sampled_from(["not ", "-"]), sub).map(lambda t: f"({t[0]}({t[1]}))"),
        st.lists(sub, min_size=0, max_size=3).map(lambda xs: "[" + ", ".join(xs) + "]"),
        sub.map(lambda e: f"len([{e}])"),
        st.tuples(sub, sub).map(lambda t: f"({t[0]})[{t[1]}]"),
        sub.map(lambda e: f"({e}).depth"),
        st.tuples(sub, sub).map(lambda t: f"({t[0]}).find({t[1]})"),
    )


@st.composite
def _programs(draw) -> str:
    statements = []
    for _ in range(draw(st.integers(min_value=1, max_value=4))):
        form = draw(st.sampled_from(["assign", "if", "for", "expr"]))
        expr = draw(_exprs(2))
        name = draw(_names)
        if form == "assign":
            statements.append(f"{name} = {expr}")
        elif form == "expr":
            statements.append(expr)
        elif form == "for":
            inner = draw(_exprs(1))
            statements.append(f"for {name} in {expr}:\n    {name} = {inner}")
        else:
            inner = draw(_exprs(1))
            arm = f"if {expr}:\n    {name} = {inner}"
            if draw(st.booleans()):
                arm += f"\nelse:\n    {name} = {inner}"
            statements.append(arm)
    statements.append(f"return {draw(_exprs(1))}")
    return "\n".join(statements)


@given(_programs())
@settings(max_examples=120, deadline=None)
def test_parse_render_round_trip_random(source):
    ast = parse(source)
    rendered = render_source(ast)
    again = parse(rendered)
    assert ast_equal(ast, again)
    # Rendering is canonical: a second round trip is a fixed point.
    assert render_source(again) == rendered
