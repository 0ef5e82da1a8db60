"""JDL-style descriptors: parsing, evaluation, symmetric matching.

A descriptor is an ordered list of ``Name = expression;`` entries. The
expression language is a small ClassAd subset: literals (booleans,
integers, reals, strings, lists), attribute references (``Attr`` in the
descriptor itself, ``other.Attr`` in the counterpart), ``!`` and unary
``-``, the usual binary operators and ``member(list, value)``.

Evaluation is total. Anything that cannot be computed (missing
attribute, type mismatch, division by zero) yields ``UNDEFINED``; only a
runaway chain of attribute references raises ``ReferenceDepthError``.
"""

from __future__ import annotations

import logging
import re
from collections.abc import Mapping
from typing import Any, Callable, Iterable, Iterator

log = logging.getLogger(__name__)

MAX_REFERENCE_DEPTH = 32


class _Undefined:
    __slots__ = ()
    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "UNDEFINED"

    def __reduce__(self):
        return (_Undefined, ())


UNDEFINED = _Undefined()


class DescriptorError(ValueError):
    pass


class DescriptorSyntaxError(DescriptorError):
    def __init__(self, message, line, column):
        super().__init__("%s at line %d, column %d" % (message, line, column))
        self.line = line
        self.column = column


class DuplicateAttributeError(DescriptorError):
    def __init__(self, name):
        super().__init__("duplicate attribute %r" % name)
        self.name = name


class ReferenceDepthError(DescriptorError):
    """Attribute resolution nested deeper than MAX_REFERENCE_DEPTH."""


# -- values -----------------------------------------------------------------

def _is_num(v):
    t = type(v)
    return t is int or t is float


def _values_equal(a, b):
    if a is UNDEFINED or b is UNDEFINED:
        return UNDEFINED
    ta, tb = type(a), type(b)
    if (ta is int or ta is float) and (tb is int or tb is float):
        return a == b
    if ta is tb and (ta is str or ta is bool):
        return a == b
    return UNDEFINED


def _cmp_eq(a, b):
    return _values_equal(a, b)


def _cmp_ne(a, b):
    r = _values_equal(a, b)
    return r if r is UNDEFINED else not r


def _ordered(fn):
    def cmp(a, b):
        ta, tb = type(a), type(b)
        if (ta is int or ta is float) and (tb is int or tb is float):
            return fn(a, b)
        if ta is str and tb is str:
            return fn(a, b)
        return UNDEFINED
    return cmp


def _to_floats(a, b):
    try:
        return float(a), float(b)
    except OverflowError:
        return None


def _arith(int_fn, float_fn):
    def op(a, b):
        ta, tb = type(a), type(b)
        if not ((ta is int or ta is float) and (tb is int or tb is float)):
            return UNDEFINED
        if ta is int and tb is int:
            return int_fn(a, b)
        pair = _to_floats(a, b)
        if pair is None:
            return UNDEFINED
        return float_fn(*pair)
    return op


def _int_div(a, b):
    if b == 0:
        return UNDEFINED
    q = abs(a) // abs(b)
    return q if (a < 0) == (b < 0) else -q


def _float_div(a, b):
    if b == 0.0:
        return UNDEFINED
    return a / b


_COMPARE = {
    "==": _cmp_eq,
    "!=": _cmp_ne,
    "<": _ordered(lambda a, b: a < b),
    "<=": _ordered(lambda a, b: a <= b),
    ">": _ordered(lambda a, b: a > b),
    ">=": _ordered(lambda a, b: a >= b),
}

_ARITH = {
    "+": _arith(lambda a, b: a + b, lambda a, b: a + b),
    "-": _arith(lambda a, b: a - b, lambda a, b: a - b),
    "*": _arith(lambda a, b: a * b, lambda a, b: a * b),
    "/": _arith(_int_div, _float_div),
}

_PRECEDENCE = {
    "||": 1, "&&": 2,
    "==": 3, "!=": 3,
    "<": 4, "<=": 4, ">": 4, ">=": 4,
    "+": 5, "-": 5,
    "*": 6, "/": 6,
}
_UNARY_PREC = 7
_ATOM_PREC = 8


# -- expression tree ----------------------------------------------------------

class Expr:
    """Base class of expression nodes. Nodes are immutable and hashable."""

    __slots__ = ()
    precedence = _ATOM_PREC

    def ev(self, me: "Descriptor", you: "Descriptor", depth: int) -> Any:
        raise NotImplementedError

    def __str__(self):
        return to_text(self)


class Literal(Expr):
    __slots__ = ("value",)

    def __init__(self, value):
        if type(value) not in (bool, int, float, str):
            raise TypeError("unsupported literal %r" % (value,))
        object.__setattr__(self, "value", value)

    def __setattr__(self, name, value):
        raise AttributeError("immutable")

    def ev(self, me, you, depth):
        return self.value

    def __eq__(self, other):
        return (type(other) is Literal and type(other.value) is type(self.value)
                and other.value == self.value)

    def __hash__(self):
        return hash((Literal, type(self.value), self.value))

    def __repr__(self):
        return "Literal(%r)" % (self.value,)


class ListExpr(Expr):
    __slots__ = ("items",)

    def __init__(self, items):
        object.__setattr__(self, "items", tuple(items))

    def __setattr__(self, name, value):
        raise AttributeError("immutable")

    def ev(self, me, you, depth):
        return tuple(item.ev(me, you, depth) for item in self.items)

    def __eq__(self, other):
        return type(other) is ListExpr and other.items == self.items

    def __hash__(self):
        return hash((ListExpr, self.items))

    def __repr__(self):
        return "ListExpr(%r)" % (list(self.items),)


class AttrRef(Expr):
    __slots__ = ("name", "other", "key")

    def __init__(self, name, other=False):
        object.__setattr__(self, "name", name)
        object.__setattr__(self, "other", bool(other))
        object.__setattr__(self, "key", name.lower())

    def __setattr__(self, name, value):
        raise AttributeError("immutable")

    def ev(self, me, you, depth):
        scope = you if self.other else me
        target = scope._index.get(self.key)
        if target is None:
            return UNDEFINED
        if depth >= MAX_REFERENCE_DEPTH:
            raise ReferenceDepthError(
                "reference depth limit %d exceeded at %s"
                % (MAX_REFERENCE_DEPTH, to_text(self)))
        if self.other:
            return target.ev(you, me, depth + 1)
        return target.ev(me, you, depth + 1)

    def __eq__(self, other):
        return (type(other) is AttrRef and other.name == self.name
                and other.other == self.other)

    def __hash__(self):
        return hash((AttrRef, self.name, self.other))

    def __repr__(self):
        return "AttrRef(%r, other=%r)" % (self.name, self.other)


class Unary(Expr):
    __slots__ = ("op", "operand")
    precedence = _UNARY_PREC

    def __init__(self, op, operand):
        if op not in ("!", "-"):
            raise ValueError("unknown unary operator %r" % op)
        object.__setattr__(self, "op", op)
        object.__setattr__(self, "operand", operand)

    def __setattr__(self, name, value):
        raise AttributeError("immutable")

    def ev(self, me, you, depth):
        v = self.operand.ev(me, you, depth)
        if self.op == "!":
            return (not v) if type(v) is bool else UNDEFINED
        return -v if _is_num(v) else UNDEFINED

    def __eq__(self, other):
        return (type(other) is Unary and other.op == self.op
                and other.operand == self.operand)

    def __hash__(self):
        return hash((Unary, self.op, self.operand))

    def __repr__(self):
        return "Unary(%r, %r)" % (self.op, self.operand)


class Binary(Expr):
    __slots__ = ("op", "left", "right", "_fn")

    def __init__(self, op, left, right):
        if op not in _PRECEDENCE:
            raise ValueError("unknown binary operator %r" % op)
        object.__setattr__(self, "op", op)
        object.__setattr__(self, "left", left)
        object.__setattr__(self, "right", right)
        object.__setattr__(self, "_fn", _COMPARE.get(op) or _ARITH.get(op))

    def __setattr__(self, name, value):
        raise AttributeError("immutable")

    @property
    def precedence(self):
        return _PRECEDENCE[self.op]

    def ev(self, me, you, depth):
        op = self.op
        if op == "&&":
            a = self.left.ev(me, you, depth)
            if a is False:
                return False
            b = self.right.ev(me, you, depth)
            if b is False:
                return False
            if a is True and b is True:
                return True
            return UNDEFINED
        if op == "||":
            a = self.left.ev(me, you, depth)
            if a is True:
                return True
            b = self.right.ev(me, you, depth)
            if b is True:
                return True
            if a is False and b is False:
                return False
            return UNDEFINED
        a = self.left.ev(me, you, depth)
        b = self.right.ev(me, you, depth)
        if a is UNDEFINED or b is UNDEFINED:
            return UNDEFINED
        return self._fn(a, b)

    def __eq__(self, other):
        return (type(other) is Binary and other.op == self.op
                and other.left == self.left and other.right == self.right)

    def __hash__(self):
        return hash((Binary, self.op, self.left, self.right))

    def __repr__(self):
        return "Binary(%r, %r, %r)" % (self.op, self.left, self.right)


class Member(Expr):
    __slots__ = ("collection", "value")

    def __init__(self, collection, value):
        object.__setattr__(self, "collection", collection)
        object.__setattr__(self, "value", value)

    def __setattr__(self, name, value):
        raise AttributeError("immutable")

    def ev(self, me, you, depth):
        coll = self.collection.ev(me, you, depth)
        val = self.value.ev(me, you, depth)
        if type(coll) is not tuple or val is UNDEFINED:
            return UNDEFINED
        for el in coll:
            if _values_equal(el, val) is True:
                return True
        return False

    def __eq__(self, other):
        return (type(other) is Member and other.collection == self.collection
                and other.value == self.value)

    def __hash__(self):
        return hash((Member, self.collection, self.value))

    def __repr__(self):
        return "Member(%r, %r)" % (self.collection, self.value)


TRUE = Literal(True)


def lit(value) -> Expr:
    """Build an expression from a plain Python value (lists become ListExpr)."""
    if isinstance(value, Expr):
        return value
    if isinstance(value, (list, tuple)):
        return ListExpr(lit(v) for v in value)
    return Literal(value)


def conjoin(exprs: Iterable[Expr]) -> Expr:
    """Left-nested ``&&`` of the given expressions; ``true`` when empty."""
    out = None
    for e in exprs:
        out = e if out is None else Binary("&&", out, e)
    return TRUE if out is None else out


def disjoin(exprs: Iterable[Expr]) -> Expr:
    out = None
    for e in exprs:
        out = e if out is None else Binary("||", out, e)
    return Literal(False) if out is None else out


def member_of(attr: str, value) -> Expr:
    """``member(other.<attr>, value)``."""
    return Member(AttrRef(attr, other=True), lit(value))


# -- descriptor -----------------------------------------------------------------

class Descriptor(Mapping):
    """Ordered attribute map with case-insensitive lookup.

    Iteration yields attribute names as written. Two descriptors are equal
    when they hold the same entries, in the same order, with the same
    spelling.
    """

    __slots__ = ("_items", "_index")

    def __init__(self, items: Iterable[tuple[str, Expr]] | Mapping = ()):
        if isinstance(items, Mapping):
            items = items.items()
        entries = []
        index = {}
        for name, expr in items:
            key = name.lower()
            if key in index:
                raise DuplicateAttributeError(name)
            if not isinstance(expr, Expr):
                expr = lit(expr)
            entries.append((name, expr))
            index[key] = expr
        req = index.get("requirements")
        if req is not None and _static_kind(req) not in ("bool", "any"):
            raise DescriptorError("Requirements must be a boolean expression")
        self._items = tuple(entries)
        self._index = index

    def __getitem__(self, name):
        return self._index[name.lower()]

    def __iter__(self) -> Iterator[str]:
        return (name for name, _ in self._items)

    def __len__(self):
        return len(self._items)

    def __contains__(self, name):
        return isinstance(name, str) and name.lower() in self._index

    def __eq__(self, other):
        if not isinstance(other, Descriptor):
            return NotImplemented
        return self._items == other._items

    def __hash__(self):
        return hash(self._items)

    def __repr__(self):
        return "Descriptor(%s)" % serialize_descriptor(self).replace("\n", " ")

    def items(self):
        return list(self._items)

    def replace(self, **updates) -> "Descriptor":
        """Copy with attributes set; existing names keep their position."""
        return self.updated(updates)

    def updated(self, updates: Mapping) -> "Descriptor":
        pending = {k.lower(): (k, v) for k, v in updates.items()}
        out = []
        for name, expr in self._items:
            hit = pending.pop(name.lower(), None)
            out.append((name, hit[1]) if hit else (name, expr))
        out.extend(pending.values())
        return Descriptor(out)

    def value(self, name, other: "Descriptor | None" = None, default=UNDEFINED):
        """Evaluate attribute ``name`` in this descriptor."""
        expr = self._index.get(name.lower())
        if expr is None:
            return default
        return expr.ev(self, other if other is not None else EMPTY, 0)


EMPTY = Descriptor()


def _static_kind(expr):
    t = type(expr)
    if t is Literal:
        v = expr.value
        if type(v) is bool:
            return "bool"
        return "str" if type(v) is str else "num"
    if t is ListExpr:
        return "list"
    if t is Member:
        return "bool"
    if t is Unary:
        return "bool" if expr.op == "!" else "num"
    if t is Binary:
        return "num" if expr.op in _ARITH else "bool"
    return "any"


# -- evaluation and matching ----------------------------------------------------

def evaluate(expr: Expr, self_d: Descriptor = EMPTY, other_d: Descriptor = EMPTY):
    """Evaluate ``expr`` with bare names resolved in ``self_d``.

    Raises ReferenceDepthError on a reference cycle.
    """
    return expr.ev(self_d, other_d, 0)


def requirements_hold(me: Descriptor, you: Descriptor) -> bool:
    req = me._index.get("requirements")
    if req is None:
        return True
    return req.ev(me, you, 0) is True


def symmetric_match(a: Descriptor, b: Descriptor,
                    diagnostics: Callable[[str], None] | None = None) -> bool:
    """True iff each side's Requirements is true against the other.

    A missing Requirements counts as true; UNDEFINED, non-boolean results
    and evaluation errors count as a non-match.
    """
    try:
        return requirements_hold(a, b) and requirements_hold(b, a)
    except ReferenceDepthError as exc:
        msg = "match aborted: %s" % exc
        log.debug(msg)
        if diagnostics is not None:
            diagnostics(msg)
        return False


# -- text form --------------------------------------------------------------------

_TOKEN_RE = re.compile(r"""
    (?P<ws>[ \t\r\f\v]+)
  | (?P<nl>\n)
  | (?P<comment>\#[^\n]*)
  | (?P<real>(?:\d+\.\d*|\.\d+)(?:[eE][+-]?\d+)?|\d+[eE][+-]?\d+)
  | (?P<int>\d+)
  | (?P<string>"(?:[^"\\\n]|\\.)*")
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<op>&&|\|\||==|!=|<=|>=|[<>+\-*/!()\[\],;=.])
""", re.VERBOSE)

_ESCAPES = {"n": "\n", "t": "\t", "r": "\r", "\\": "\\", '"': '"'}
_KEYWORDS = {"true", "false", "other", "member"}


class _Token:
    __slots__ = ("kind", "text", "line", "col")

    def __init__(self, kind, text, line, col):
        self.kind, self.text, self.line, self.col = kind, text, line, col


def _tokenize(text):
    tokens = []
    pos, line, line_start = 0, 1, 0
    n = len(text)
    while pos < n:
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise DescriptorSyntaxError(
                "unexpected character %r" % text[pos], line, pos - line_start + 1)
        kind = m.lastgroup
        if kind == "nl":
            line += 1
            line_start = m.end()
        elif kind not in ("ws", "comment"):
            tokens.append(_Token(kind, m.group(), line, pos - line_start + 1))
        pos = m.end()
    tokens.append(_Token("eof", "", line, pos - line_start + 1))
    return tokens


def _unquote(tok):
    body = tok.text[1:-1]
    if "\\" not in body:
        return body
    out = []
    i = 0
    while i < len(body):
        c = body[i]
        if c == "\\":
            nxt = body[i + 1]
            if nxt not in _ESCAPES:
                raise DescriptorSyntaxError(
                    "unknown escape \\%s" % nxt, tok.line, tok.col + i + 1)
            out.append(_ESCAPES[nxt])
            i += 2
        else:
            out.append(c)
            i += 1
    return "".join(out)


class _Parser:
    _LEVELS = (("||",), ("&&",), ("==", "!="), ("<", "<=", ">", ">="),
               ("+", "-"), ("*", "/"))

    def __init__(self, text):
        self.toks = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.toks[self.i]

    def advance(self):
        tok = self.toks[self.i]
        self.i += 1
        return tok

    def error(self, message, tok=None):
        tok = tok or self.peek()
        found = tok.text if tok.kind != "eof" else "end of input"
        return DescriptorSyntaxError("%s (found %r)" % (message, found),
                                     tok.line, tok.col)

    def expect_op(self, text):
        tok = self.peek()
        if tok.kind != "op" or tok.text != text:
            raise self.error("expected %r" % text)
        return self.advance()

    def is_op(self, *texts):
        tok = self.peek()
        return tok.kind == "op" and tok.text in texts

    def descriptor(self):
        entries = []
        seen = set()
        while self.peek().kind != "eof":
            tok = self.peek()
            if tok.kind != "ident" or tok.text.lower() in _KEYWORDS:
                raise self.error("expected attribute name")
            self.advance()
            if tok.text.lower() in seen:
                raise DuplicateAttributeError(tok.text)
            seen.add(tok.text.lower())
            self.expect_op("=")
            expr = self.expression()
            self.expect_op(";")
            entries.append((tok.text, expr))
        try:
            return Descriptor(entries)
        except DuplicateAttributeError:
            raise
        except DescriptorError as exc:
            first = self.toks[0]
            raise DescriptorSyntaxError(str(exc), first.line, first.col) from None

    def expression(self, level=0):
        if level == len(self._LEVELS):
            return self.unary()
        ops = self._LEVELS[level]
        left = self.expression(level + 1)
        while self.is_op(*ops):
            op = self.advance().text
            right = self.expression(level + 1)
            left = Binary(op, left, right)
        return left

    def unary(self):
        if self.is_op("!", "-"):
            op = self.advance().text
            operand = self.unary()
            if op == "-" and type(operand) is Literal and _is_num(operand.value):
                return Literal(-operand.value)
            return Unary(op, operand)
        return self.primary()

    def primary(self):
        tok = self.peek()
        if tok.kind == "int":
            self.advance()
            return Literal(int(tok.text))
        if tok.kind == "real":
            self.advance()
            value = float(tok.text)
            if value in (float("inf"), float("-inf")):
                raise self.error("real literal out of range", tok)
            return Literal(value)
        if tok.kind == "string":
            self.advance()
            return Literal(_unquote(tok))
        if tok.kind == "ident":
            low = tok.text.lower()
            self.advance()
            if low == "true":
                return Literal(True)
            if low == "false":
                return Literal(False)
            if low == "other":
                self.expect_op(".")
                name = self.advance()
                if name.kind != "ident" or name.text.lower() in _KEYWORDS:
                    raise self.error("expected attribute name after 'other.'", name)
                return AttrRef(name.text, other=True)
            if low == "member":
                self.expect_op("(")
                coll = self.expression()
                self.expect_op(",")
                val = self.expression()
                self.expect_op(")")
                return Member(coll, val)
            if self.is_op("("):
                raise self.error("unknown function %r" % tok.text, tok)
            return AttrRef(tok.text)
        if self.is_op("("):
            self.advance()
            inner = self.expression()
            self.expect_op(")")
            return inner
        if self.is_op("["):
            self.advance()
            items = []
            if not self.is_op("]"):
                items.append(self.expression())
                while self.is_op(","):
                    self.advance()
                    items.append(self.expression())
            self.expect_op("]")
            return ListExpr(items)
        raise self.error("expected expression")


def parse_descriptor(text: str) -> Descriptor:
    """Parse descriptor source text.

    >>> parse_descriptor('Executable = "sim.sh";')["executable"]
    Literal('sim.sh')
    """
    return _Parser(text).descriptor()


def parse_expression(text: str) -> Expr:
    p = _Parser(text)
    expr = p.expression()
    if p.peek().kind != "eof":
        raise p.error("unexpected trailing input")
    return expr


def _quote(s):
    s = s.replace("\\", "\\\\").replace('"', '\\"')
    s = s.replace("\n", "\\n").replace("\t", "\\t").replace("\r", "\\r")
    return '"' + s + '"'


def to_text(expr: Expr) -> str:
    t = type(expr)
    if t is Literal:
        v = expr.value
        if v is True:
            return "true"
        if v is False:
            return "false"
        if type(v) is str:
            return _quote(v)
        return repr(v)
    if t is ListExpr:
        return "[" + ", ".join(to_text(i) for i in expr.items) + "]"
    if t is AttrRef:
        return ("other." if expr.other else "") + expr.name
    if t is Member:
        return "member(%s, %s)" % (to_text(expr.collection), to_text(expr.value))
    if t is Unary:
        inner = to_text(expr.operand)
        if expr.operand.precedence < _UNARY_PREC:
            inner = "(" + inner + ")"
        elif expr.op == "-" and inner.startswith("-"):
            inner = "(" + inner + ")"
        return expr.op + inner
    if t is Binary:
        prec = expr.precedence
        left = to_text(expr.left)
        if expr.left.precedence < prec:
            left = "(" + left + ")"
        right = to_text(expr.right)
        if expr.right.precedence <= prec:
            right = "(" + right + ")"
        return "%s %s %s" % (left, expr.op, right)
    raise TypeError("not an expression: %r" % (expr,))


def serialize_descriptor(d: Descriptor) -> str:
    """Canonical text, one ``Name = expr;`` line per attribute."""
    return "".join("%s = %s;\n" % (name, to_text(expr)) for name, expr in d.items())
