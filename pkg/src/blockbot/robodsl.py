"""The constrained robot programming language bot replies are written in.

A program is a flat list of statements: assignments, expressions, `for`
loops over lists, `if/else`, and `return`. Blocks are indented with spaces.
There are no user-defined functions and no while loops, so every program
terminates (a global iteration cap guards pathological loop nests).

Every statement carries its source line; the first failure aborts execution
and is reported as a DslError with that line, the offending source text,
and the partial action trace.
"""

from __future__ import annotations

import hashlib
import math
import re
from dataclasses import dataclass

import numpy as np

from . import blockworld
from .blockworld import Observation, RobotFault, Scene
from .geometry import norm_angle_pi, rect_contains

# API surfaces
ACTOR = "actor"
QUERY = "query"

# error kinds
PARSE = "PARSE"
UNKNOWN_IDENT = "UNKNOWN_IDENT"
ARITY = "ARITY"
TYPE = "TYPE"
ROBOT_FAULT = "ROBOT_FAULT"
DIV_ZERO = "DIV_ZERO"
LOOP_LIMIT = "LOOP_LIMIT"

DEFAULT_LOOP_LIMIT = 1000
_MAX_DEPTH = 60

KEYWORDS = {"for", "in", "if", "else", "return", "and", "or", "not",
            "True", "False"}


class DslError(Exception):
    """Located program failure; `trace` holds actions completed before it."""

    def __init__(self, kind: str, line: int, message: str,
                 source_line: str = "", subkind: str | None = None,
                 trace: list | None = None):
        super().__init__(f"{kind} at line {line}: {message}")
        self.kind = kind
        self.line = line
        self.message = message
        self.source_line = source_line
        self.subkind = subkind
        self.trace = trace if trace is not None else []


class NoCodeFound(Exception):
    """A bot reply contained no extractable program."""


# ---------------------------------------------------------------------------
# AST

@dataclass(frozen=True)
class Num:
    value: float
    line: int


@dataclass(frozen=True)
class Str:
    value: str
    line: int


@dataclass(frozen=True)
class Bool:
    value: bool
    line: int


@dataclass(frozen=True)
class Name:
    id: str
    line: int


@dataclass(frozen=True)
class ListExpr:
    items: tuple
    line: int


@dataclass(frozen=True)
class Call:
    func: str
    args: tuple
    line: int


@dataclass(frozen=True)
class Field:
    obj: object
    name: str
    line: int


@dataclass(frozen=True)
class BinOp:
    op: str
    left: object
    right: object
    line: int


@dataclass(frozen=True)
class UnOp:
    op: str
    operand: object
    line: int


@dataclass(frozen=True)
class Assign:
    target: str
    value: object
    line: int


@dataclass(frozen=True)
class ExprStmt:
    value: object
    line: int


@dataclass(frozen=True)
class For:
    var: str
    iterable: object
    body: tuple
    line: int


@dataclass(frozen=True)
class If:
    cond: object
    body: tuple
    orelse: tuple
    line: int


@dataclass(frozen=True)
class Return:
    value: object | None
    line: int


@dataclass(frozen=True)
class Program:
    statements: tuple
    source: str
    source_hash: str

    def source_line(self, line: int) -> str:
        lines = self.source.splitlines()
        return lines[line - 1] if 1 <= line <= len(lines) else ""


# ---------------------------------------------------------------------------
# lexer

_TOKEN_RE = re.compile("|".join(f"(?P<{name}>{pat})" for name, pat in [
    ("NUMBER", r"\d+(\.\d+)?"),
    ("NAME", r"[A-Za-z_]\w*"),
    ("STRING", r'"[^"\n]*"'),
    ("BADSTRING", r'"'),
    ("OP", r"==|!=|<=|>=|<|>|\+|-|\*|/|="),
    ("DOT", r"\."),
    ("COMMA", r","),
    ("COLON", r":"),
    ("LPAREN", r"\("),
    ("RPAREN", r"\)"),
    ("LBRACK", r"\["),
    ("RBRACK", r"\]"),
    ("SKIP", r"[ \t]+"),
    ("MISMATCH", r"."),
]))


def _lex_line(text: str, lineno: int) -> list[tuple[str, str]]:
    tokens = []
    for m in _TOKEN_RE.finditer(text):
        kind = m.lastgroup
        value = m.group()
        if kind == "SKIP":
            continue
        if kind == "BADSTRING":
            raise DslError(PARSE, lineno, "unterminated string", text)
        if kind == "MISMATCH":
            raise DslError(PARSE, lineno, f"unexpected character {value!r}", text)
        if kind == "NAME" and value in KEYWORDS:
            kind = "KW"
        tokens.append((kind, value))
    return tokens


@dataclass
class _Line:
    lineno: int
    indent: int
    tokens: list
    raw: str


def _logical_lines(source: str) -> list[_Line]:
    lines = []
    for lineno, raw in enumerate(source.splitlines(), start=1):
        body = raw.split("#", 1)[0]
        if not body.strip():
            continue
        stripped = body.lstrip(" ")
        indent = len(body) - len(stripped)
        if stripped.startswith("\t"):
            raise DslError(PARSE, lineno, "indent with spaces, not tabs", raw)
        tokens = _lex_line(stripped, lineno)
        if tokens:
            lines.append(_Line(lineno, indent, tokens, raw))
    return lines


# ---------------------------------------------------------------------------
# parser

class _Parser:
    def __init__(self, lines: list[_Line]):
        self.lines = lines

    def parse_block(self, i: int, indent: int) -> tuple[list, int]:
        stmts = []
        while i < len(self.lines) and self.lines[i].indent == indent:
            stmt, i = self.parse_statement(i)
            stmts.append(stmt)
        if i < len(self.lines) and self.lines[i].indent > indent:
            ln = self.lines[i]
            raise DslError(PARSE, ln.lineno, "unexpected indent", ln.raw)
        return stmts, i

    def _child_block(self, i: int, parent_indent: int, header: _Line) -> tuple[list, int]:
        if i >= len(self.lines) or self.lines[i].indent <= parent_indent:
            raise DslError(PARSE, header.lineno,
                           "expected an indented block", header.raw)
        return self.parse_block(i, self.lines[i].indent)

    def parse_statement(self, i: int) -> tuple[object, int]:
        ln = self.lines[i]
        toks = ln.tokens
        expr_parser = _ExprParser(toks, ln)
        first = toks[0]

        if first == ("KW", "for"):
            expr_parser.pos = 1
            var = expr_parser.expect_name("loop variable")
            expr_parser.expect_kw("in")
            iterable = expr_parser.parse_expr()
            expr_parser.expect_colon()
            expr_parser.expect_end()
            body, j = self._child_block(i + 1, ln.indent, ln)
            return For(var, iterable, tuple(body), ln.lineno), j

        if first == ("KW", "if"):
            expr_parser.pos = 1
            cond = expr_parser.parse_expr()
            expr_parser.expect_colon()
            expr_parser.expect_end()
            body, j = self._child_block(i + 1, ln.indent, ln)
            orelse: list = []
            if j < len(self.lines) and self.lines[j].indent == ln.indent \
                    and self.lines[j].tokens[0] == ("KW", "else"):
                else_ln = self.lines[j]
                ep = _ExprParser(else_ln.tokens, else_ln)
                ep.pos = 1
                ep.expect_colon()
                ep.expect_end()
                orelse, j = self._child_block(j + 1, ln.indent, else_ln)
            return If(cond, tuple(body), tuple(orelse), ln.lineno), j

        if first == ("KW", "else"):
            raise DslError(PARSE, ln.lineno, "'else' without a matching 'if'", ln.raw)

        if first == ("KW", "return"):
            expr_parser.pos = 1
            value = None
            if not expr_parser.at_end():
                value = expr_parser.parse_expr()
            expr_parser.expect_end()
            return Return(value, ln.lineno), i + 1

        if first[0] == "NAME" and len(toks) > 1 and toks[1] == ("OP", "="):
            expr_parser.pos = 2
            value = expr_parser.parse_expr()
            expr_parser.expect_end()
            return Assign(first[1], value, ln.lineno), i + 1

        value = expr_parser.parse_expr()
        expr_parser.expect_end()
        return ExprStmt(value, ln.lineno), i + 1


class _ExprParser:
    def __init__(self, tokens: list, line: _Line):
        self.tokens = tokens
        self.pos = 0
        self.line = line
        self.depth = 0

    def _err(self, message: str) -> DslError:
        return DslError(PARSE, self.line.lineno, message, self.line.raw)

    def peek(self):
        return self.tokens[self.pos] if self.pos < len(self.tokens) else None

    def advance(self):
        tok = self.peek()
        if tok is None:
            raise self._err("unexpected end of line")
        self.pos += 1
        return tok

    def at_end(self) -> bool:
        return self.pos >= len(self.tokens)

    def expect_end(self):
        if not self.at_end():
            raise self._err(f"unexpected token {self.peek()[1]!r}")

    def expect_colon(self):
        tok = self.peek()
        if tok != ("COLON", ":"):
            raise self._err("expected ':'")
        self.pos += 1

    def expect_kw(self, kw: str):
        tok = self.peek()
        if tok != ("KW", kw):
            raise self._err(f"expected '{kw}'")
        self.pos += 1

    def expect_name(self, what: str) -> str:
        tok = self.peek()
        if tok is None or tok[0] != "NAME":
            raise self._err(f"expected {what}")
        self.pos += 1
        return tok[1]

    def _enter(self):
        self.depth += 1
        if self.depth > _MAX_DEPTH:
            raise self._err("expression too deeply nested")

    def parse_expr(self):
        self._enter()
        try:
            return self._parse_or()
        finally:
            self.depth -= 1

    def _parse_or(self):
        node = self._parse_and()
        while self.peek() == ("KW", "or"):
            self.advance()
            node = BinOp("or", node, self._parse_and(), self.line.lineno)
        return node

    def _parse_and(self):
        node = self._parse_not()
        while self.peek() == ("KW", "and"):
            self.advance()
            node = BinOp("and", node, self._parse_not(), self.line.lineno)
        return node

    def _parse_not(self):
        if self.peek() == ("KW", "not"):
            self._enter()
            try:
                self.advance()
                return UnOp("not", self._parse_not(), self.line.lineno)
            finally:
                self.depth -= 1
        return self._parse_comparison()

    def _parse_comparison(self):
        node = self._parse_arith()
        tok = self.peek()
        if tok is not None and tok[0] == "OP" and tok[1] in ("==", "!=", "<", "<=", ">", ">="):
            self.advance()
            node = BinOp(tok[1], node, self._parse_arith(), self.line.lineno)
        return node

    def _parse_arith(self):
        node = self._parse_term()
        while True:
            tok = self.peek()
            if tok is not None and tok[0] == "OP" and tok[1] in ("+", "-"):
                self.advance()
                node = BinOp(tok[1], node, self._parse_term(), self.line.lineno)
            else:
                return node

    def _parse_term(self):
        node = self._parse_unary()
        while True:
            tok = self.peek()
            if tok is not None and tok[0] == "OP" and tok[1] in ("*", "/"):
                self.advance()
                node = BinOp(tok[1], node, self._parse_unary(), self.line.lineno)
            else:
                return node

    def _parse_unary(self):
        tok = self.peek()
        if tok == ("OP", "-"):
            self._enter()
            try:
                self.advance()
                return UnOp("-", self._parse_unary(), self.line.lineno)
            finally:
                self.depth -= 1
        return self._parse_postfix()

    def _parse_postfix(self):
        node = self._parse_atom()
        while self.peek() == ("DOT", "."):
            self.advance()
            tok = self.peek()
            if tok is None or tok[0] != "NAME":
                raise self._err("expected a field name after '.'")
            self.advance()
            node = Field(node, tok[1], self.line.lineno)
        return node

    def _parse_atom(self):
        self._enter()
        try:
            tok = self.advance()
            kind, value = tok
            if kind == "NUMBER":
                return Num(float(value), self.line.lineno)
            if kind == "STRING":
                return Str(value[1:-1], self.line.lineno)
            if kind == "KW" and value in ("True", "False"):
                return Bool(value == "True", self.line.lineno)
            if kind == "NAME":
                if self.peek() == ("LPAREN", "("):
                    self.advance()
                    args = []
                    if self.peek() != ("RPAREN", ")"):
                        args.append(self.parse_expr())
                        while self.peek() == ("COMMA", ","):
                            self.advance()
                            args.append(self.parse_expr())
                    if self.peek() != ("RPAREN", ")"):
                        raise self._err("expected ')' or ',' in call")
                    self.advance()
                    return Call(value, tuple(args), self.line.lineno)
                return Name(value, self.line.lineno)
            if kind == "LPAREN":
                node = self.parse_expr()
                if self.peek() != ("RPAREN", ")"):
                    raise self._err("expected ')'")
                self.advance()
                return node
            if kind == "LBRACK":
                items = []
                if self.peek() != ("RBRACK", "]"):
                    items.append(self.parse_expr())
                    while self.peek() == ("COMMA", ","):
                        self.advance()
                        items.append(self.parse_expr())
                if self.peek() != ("RBRACK", "]"):
                    raise self._err("expected ']' or ',' in list")
                self.advance()
                return ListExpr(tuple(items), self.line.lineno)
            raise self._err(f"unexpected token {value!r}")
        finally:
            self.depth -= 1


def parse(text: str) -> Program:
    """Parse source text; raises DslError(PARSE) with the offending line."""
    lines = _logical_lines(text)
    if lines and lines[0].indent != 0:
        raise DslError(PARSE, lines[0].lineno, "unexpected indent", lines[0].raw)
    stmts = _Parser(lines).parse_block(0, 0)[0] if lines else []
    digest = hashlib.sha256(text.encode()).hexdigest()
    return Program(tuple(stmts), text, digest)


# ---------------------------------------------------------------------------
# interpreter

@dataclass(frozen=True)
class Rec:
    """Read-only record returned by pose()/size()."""
    fields: tuple


@dataclass(frozen=True)
class TraceStep:
    skill: str          # "PICK" or "PLACE"
    x: float
    y: float
    theta: float
    line: int
    pre: Observation
    post: Observation


@dataclass
class ExecResult:
    scene: Scene
    trace: list
    value: object


class _Ctx:
    def __init__(self, program: Program, scene: Scene, api: str, loop_limit: int):
        self.program = program
        self.scene = scene
        self.api = api
        self.loop_limit = loop_limit
        self.iterations = 0
        self.trace: list[TraceStep] = []

    def err(self, kind: str, line: int, message: str, subkind=None) -> DslError:
        return DslError(kind, line, message, self.program.source_line(line),
                        subkind=subkind, trace=self.trace)

    # -- shared builtins ----------------------------------------------------
    def _object(self, oid, line) -> blockworld.ObjectState:
        if not isinstance(oid, str):
            raise self.err(TYPE, line, "object id must be a string")
        try:
            return self.scene.object(oid)
        except KeyError:
            raise self.err(TYPE, line, f"unknown object {oid!r}") from None

    def bi_objects(self, line):
        return [o.id for o in self.scene.objects]

    def bi_pose(self, line, oid):
        o = self._object(oid, line)
        return Rec((("x", o.x), ("y", o.y), ("z", o.z), ("theta", o.theta)))

    def bi_size(self, line, oid):
        o = self._object(oid, line)
        return Rec((("w", o.w), ("l", o.l), ("h", o.h)))

    # -- actor builtins -----------------------------------------------------
    def _number(self, v, line, what):
        if isinstance(v, bool) or not isinstance(v, float):
            raise self.err(TYPE, line, f"{what} must be a number")
        return v

    def _do_pick(self, line, x, y, theta):
        pre = blockworld.observe(self.scene)
        try:
            self.scene = blockworld.pick(self.scene, x, y, theta)
        except RobotFault as fault:
            raise self.err(ROBOT_FAULT, line, fault.message, subkind=fault.kind)
        post = blockworld.observe(self.scene)
        self.trace.append(TraceStep("PICK", x, y, norm_angle_pi(theta), line, pre, post))

    def _do_place(self, line, x, y, theta):
        pre = blockworld.observe(self.scene)
        try:
            self.scene = blockworld.place(self.scene, x, y, theta)
        except RobotFault as fault:
            raise self.err(ROBOT_FAULT, line, fault.message, subkind=fault.kind)
        post = blockworld.observe(self.scene)
        self.trace.append(TraceStep("PLACE", x, y, norm_angle_pi(theta), line, pre, post))

    def bi_pick(self, line, oid):
        o = self._object(oid, line)
        self._do_pick(line, o.x, o.y, o.theta)

    def bi_pick_at(self, line, x, y, theta):
        self._do_pick(line,
                      self._number(x, line, "x"),
                      self._number(y, line, "y"),
                      self._number(theta, line, "theta"))

    def bi_place(self, line, x, y, theta):
        self._do_place(line,
                       self._number(x, line, "x"),
                       self._number(y, line, "y"),
                       self._number(theta, line, "theta"))

    def bi_place_on(self, line, oid):
        o = self._object(oid, line)
        self._do_place(line, o.x, o.y, o.theta)

    # -- query builtins -----------------------------------------------------
    def bi_is_on(self, line, a, b):
        oa = self._object(a, line)
        if not isinstance(b, str):
            raise self.err(TYPE, line, "object id must be a string")
        return oa.support == b

    def bi_dist_xy(self, line, a, b):
        oa = self._object(a, line)
        ob = self._object(b, line)
        return math.hypot(oa.x - ob.x, oa.y - ob.y)

    def bi_inside(self, line, oid, container_id):
        o = self._object(oid, line)
        c = self._object(container_id, line)
        corners = o.corners()
        return bool(np.all(rect_contains(c.x, c.y, c.w, c.l, c.theta,
                                         corners[:, 0], corners[:, 1])))


_ACTOR_BUILTINS = {
    "objects": ("bi_objects", 0),
    "pose": ("bi_pose", 1),
    "size": ("bi_size", 1),
    "pick": ("bi_pick", 1),
    "pick_at": ("bi_pick_at", 3),
    "place": ("bi_place", 3),
    "place_on": ("bi_place_on", 1),
}

_QUERY_BUILTINS = {
    "objects": ("bi_objects", 0),
    "pose": ("bi_pose", 1),
    "size": ("bi_size", 1),
    "is_on": ("bi_is_on", 2),
    "dist_xy": ("bi_dist_xy", 2),
    "inside": ("bi_inside", 2),
}

BUILTIN_TABLES = {ACTOR: _ACTOR_BUILTINS, QUERY: _QUERY_BUILTINS}


class _ReturnSignal(Exception):
    def __init__(self, value):
        self.value = value


def _type_name(v) -> str:
    if isinstance(v, bool):
        return "bool"
    if isinstance(v, float):
        return "number"
    if isinstance(v, str):
        return "string"
    if isinstance(v, list):
        return "list"
    if isinstance(v, Rec):
        return "record"
    return "none"


def _eval(node, env: dict, ctx: _Ctx):
    if isinstance(node, Num):
        return node.value
    if isinstance(node, Str):
        return node.value
    if isinstance(node, Bool):
        return node.value
    if isinstance(node, Name):
        if node.id in env:
            return env[node.id]
        raise ctx.err(UNKNOWN_IDENT, node.line, f"unknown name {node.id!r}")
    if isinstance(node, ListExpr):
        return [_eval(item, env, ctx) for item in node.items]
    if isinstance(node, Field):
        value = _eval(node.obj, env, ctx)
        if isinstance(value, Rec):
            for key, v in value.fields:
                if key == node.name:
                    return v
            raise ctx.err(TYPE, node.line, f"record has no field {node.name!r}")
        raise ctx.err(TYPE, node.line,
                      f"cannot access field {node.name!r} on a {_type_name(value)}")
    if isinstance(node, Call):
        table = BUILTIN_TABLES[ctx.api]
        if node.func not in table:
            raise ctx.err(UNKNOWN_IDENT, node.line,
                          f"unknown function {node.func!r}")
        method, arity = table[node.func]
        args = [_eval(a, env, ctx) for a in node.args]
        if len(args) != arity:
            raise ctx.err(ARITY, node.line,
                          f"{node.func}() takes {arity} argument(s), got {len(args)}")
        return getattr(ctx, method)(node.line, *args)
    if isinstance(node, UnOp):
        value = _eval(node.operand, env, ctx)
        if node.op == "-":
            if isinstance(value, bool) or not isinstance(value, float):
                raise ctx.err(TYPE, node.line, "unary '-' needs a number")
            return -value
        if not isinstance(value, bool):
            raise ctx.err(TYPE, node.line, "'not' needs a boolean")
        return not value
    if isinstance(node, BinOp):
        op = node.op
        left = _eval(node.left, env, ctx)
        if op in ("and", "or"):
            if not isinstance(left, bool):
                raise ctx.err(TYPE, node.line, f"'{op}' needs booleans")
            # short circuit
            if op == "and" and not left:
                return False
            if op == "or" and left:
                return True
            right = _eval(node.right, env, ctx)
            if not isinstance(right, bool):
                raise ctx.err(TYPE, node.line, f"'{op}' needs booleans")
            return right
        right = _eval(node.right, env, ctx)
        if op in ("==", "!="):
            same = _type_name(left) == _type_name(right) and left == right
            return same if op == "==" else not same
        if op in ("<", "<=", ">", ">="):
            for v in (left, right):
                if isinstance(v, bool) or not isinstance(v, float):
                    raise ctx.err(TYPE, node.line, f"'{op}' needs numbers")
            return {"<": left < right, "<=": left <= right,
                    ">": left > right, ">=": left >= right}[op]
        for v in (left, right):
            if isinstance(v, bool) or not isinstance(v, float):
                raise ctx.err(TYPE, node.line,
                              f"'{op}' needs numbers, got {_type_name(v)}")
        if op == "+":
            return left + right
        if op == "-":
            return left - right
        if op == "*":
            return left * right
        if right == 0.0:
            raise ctx.err(DIV_ZERO, node.line, "division by zero")
        return left / right
    raise AssertionError(f"unhandled node {node!r}")


def _exec_block(stmts, env: dict, ctx: _Ctx):
    for stmt in stmts:
        if isinstance(stmt, Assign):
            env[stmt.target] = _eval(stmt.value, env, ctx)
        elif isinstance(stmt, ExprStmt):
            _eval(stmt.value, env, ctx)
        elif isinstance(stmt, Return):
            value = None if stmt.value is None else _eval(stmt.value, env, ctx)
            raise _ReturnSignal(value)
        elif isinstance(stmt, If):
            cond = _eval(stmt.cond, env, ctx)
            if not isinstance(cond, bool):
                raise ctx.err(TYPE, stmt.line, "'if' condition must be a boolean")
            _exec_block(stmt.body if cond else stmt.orelse, env, ctx)
        elif isinstance(stmt, For):
            iterable = _eval(stmt.iterable, env, ctx)
            if not isinstance(iterable, list):
                raise ctx.err(TYPE, stmt.line, "'for' needs a list")
            for item in iterable:
                ctx.iterations += 1
                if ctx.iterations > ctx.loop_limit:
                    raise ctx.err(LOOP_LIMIT, stmt.line,
                                  f"more than {ctx.loop_limit} loop iterations")
                env[stmt.var] = item
                _exec_block(stmt.body, env, ctx)
        else:
            raise AssertionError(f"unhandled statement {stmt!r}")


def execute(program: Program, scene: Scene, api: str = ACTOR,
            loop_limit: int = DEFAULT_LOOP_LIMIT) -> ExecResult:
    """Run `program` against `scene` on the given API surface.

    Returns the final scene, the pick/place trace, and the `return` value
    (None when the program falls off the end). The input scene is never
    mutated. Raises DslError on the first failure; the partial trace rides
    on the exception.
    """
    if api not in BUILTIN_TABLES:
        raise ValueError(f"unknown api surface {api!r}")
    ctx = _Ctx(program, scene, api, loop_limit)
    env: dict = {}
    try:
        _exec_block(program.statements, env, ctx)
    except _ReturnSignal as ret:
        return ExecResult(ctx.scene, ctx.trace, ret.value)
    return ExecResult(ctx.scene, ctx.trace, None)


# ---------------------------------------------------------------------------
# reply handling

_FENCE_RE = re.compile(r"```[ \t]*[A-Za-z0-9_+-]*[ \t]*\r?\n(.*?)```", re.DOTALL)


def extract_code(llm_response: str) -> str:
    """First fenced code block, or the whole reply if it already parses."""
    m = _FENCE_RE.search(llm_response)
    if m:
        return m.group(1).strip("\n")
    try:
        parse(llm_response)
    except DslError:
        raise NoCodeFound("no fenced code block and the reply does not parse") \
            from None
    return llm_response
