"""A small ClassAd dialect used both for job descriptions and resource ads.

Text form::

    [ Executable = "sim"; Requirements = member(other.CloseSE, "SE_CERN"); ]

Evaluation is total: type confusion, missing attributes and runaway reference
chains all produce :data:`UNDEFINED`, which flows through arithmetic and
comparisons and is handled by ``&&``/``||``/``!`` with three-valued logic.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Any, Iterable, Mapping

from .errors import ParseError

MAX_DEPTH = 32


class _Undefined:
    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "undefined"

    def __bool__(self):
        return False

    def __reduce__(self):
        return (_Undefined, ())


UNDEFINED = _Undefined()


# ---------------------------------------------------------------- expression tree


class Expr:
    __slots__ = ()


@dataclass(frozen=True, eq=False)
class Literal(Expr):
    value: Any  # int, float, str, bool or UNDEFINED

    def __eq__(self, other):
        return (
            isinstance(other, Literal)
            and type(self.value) is type(other.value)
            and self.value == other.value
        )

    def __hash__(self):
        return hash((type(self.value).__name__, self.value))


@dataclass(frozen=True)
class ListExpr(Expr):
    items: tuple


@dataclass(frozen=True)
class AttrRef(Expr):
    scope: str | None  # "self", "other" or None (bare name, same as self)
    name: str


@dataclass(frozen=True)
class UnaryOp(Expr):
    op: str
    operand: Expr


@dataclass(frozen=True)
class BinOp(Expr):
    op: str
    left: Expr
    right: Expr


@dataclass(frozen=True)
class Call(Expr):
    name: str
    args: tuple


TRUE = Literal(True)


class ClassAd:
    """Attribute -> expression map with case-insensitive, case-preserving names."""

    def __init__(self, attrs: Mapping[str, Any] | Iterable[tuple[str, Any]] = ()):
        self._attrs: dict[str, tuple[str, Expr]] = {}
        items = attrs.items() if isinstance(attrs, Mapping) else attrs
        for name, value in items:
            self[name] = value

    def __setitem__(self, name: str, value):
        if not isinstance(value, Expr):
            value = to_expr(value)
        self._attrs[name.lower()] = (name, value)

    def __getitem__(self, name: str) -> Expr:
        return self._attrs[name.lower()][1]

    def __contains__(self, name) -> bool:
        return name.lower() in self._attrs

    def __delitem__(self, name):
        del self._attrs[name.lower()]

    def __len__(self):
        return len(self._attrs)

    def __iter__(self):
        return (n for n, _ in self._attrs.values())

    def get(self, name: str, default=None):
        hit = self._attrs.get(name.lower())
        return default if hit is None else hit[1]

    def items(self):
        return list(self._attrs.values())

    def copy(self) -> "ClassAd":
        ad = ClassAd()
        ad._attrs = dict(self._attrs)
        return ad

    def value(self, name: str, other: "ClassAd | None" = None):
        """Evaluate attribute ``name`` with this ad as ``self``."""
        expr = self.get(name)
        if expr is None:
            return UNDEFINED
        return evaluate(expr, self, other if other is not None else EMPTY_AD)

    def __eq__(self, other):
        if not isinstance(other, ClassAd):
            return NotImplemented
        return {k: v for k, v in self._attrs.items()} == {k: v for k, v in other._attrs.items()}

    def __repr__(self):
        return f"ClassAd({unparse(self)})"

    def __str__(self):
        return unparse(self)


EMPTY_AD = ClassAd()


def to_expr(value) -> Expr:
    """Lift a python value (scalar or list) into a literal expression."""
    if isinstance(value, Expr):
        return value
    if isinstance(value, (list, tuple)):
        return ListExpr(tuple(to_expr(v) for v in value))
    if value is None or value is UNDEFINED:
        return Literal(UNDEFINED)
    if isinstance(value, (bool, int, float, str)):
        return Literal(value)
    raise TypeError(f"cannot express {value!r} in a ClassAd")


# ---------------------------------------------------------------- lexer / parser

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>[ \t\r\n]+)
  | (?P<comment>\#[^\n]*)
  | (?P<float>(?:\d+\.\d*|\.\d+)(?:[eE][+-]?\d+)?|\d+[eE][+-]?\d+)
  | (?P<int>\d+)
  | (?P<string>"(?:[^"\\\n]|\\.)*")
  | (?P<name>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<op>&&|\|\||==|!=|<=|>=|[<>!+\-*/()\[\]{};,=.])
    """,
    re.VERBOSE,
)

_ESCAPES = {"n": "\n", "t": "\t", '"': '"', "\\": "\\"}


@dataclass
class _Tok:
    kind: str
    text: str
    line: int
    col: int


def _tokenize(text: str) -> list[_Tok]:
    toks = []
    pos, line, line_start = 0, 1, 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise ParseError(f"unexpected character {text[pos]!r}", line, pos - line_start + 1)
        kind = m.lastgroup
        chunk = m.group()
        if kind not in ("ws", "comment"):
            toks.append(_Tok(kind, chunk, line, pos - line_start + 1))
        nl = chunk.count("\n")
        if nl:
            line += nl
            line_start = pos + chunk.rindex("\n") + 1
        pos = m.end()
    toks.append(_Tok("eof", "", line, pos - line_start + 1))
    return toks


def _unescape(body: str) -> str:
    out = []
    i = 0
    while i < len(body):
        c = body[i]
        if c == "\\" and i + 1 < len(body):
            out.append(_ESCAPES.get(body[i + 1], body[i + 1]))
            i += 2
        else:
            out.append(c)
            i += 1
    return "".join(out)


_BINARY_LEVELS = [
    ("||",),
    ("&&",),
    ("==", "!="),
    ("<", "<=", ">", ">="),
    ("+", "-"),
    ("*", "/"),
]

_KEYWORDS = {"true": True, "false": False, "undefined": UNDEFINED}


class _Parser:
    def __init__(self, text: str):
        self.toks = _tokenize(text)
        self.i = 0

    @property
    def tok(self) -> _Tok:
        return self.toks[self.i]

    def error(self, msg: str, tok: _Tok | None = None):
        tok = tok or self.tok
        found = tok.text or "end of input"
        raise ParseError(f"{msg} (found {found!r})", tok.line, tok.col)

    def accept(self, text: str) -> bool:
        if self.tok.kind == "op" and self.tok.text == text:
            self.i += 1
            return True
        return False

    def expect(self, text: str):
        if not self.accept(text):
            self.error(f"expected {text!r}")

    def parse_ad(self) -> ClassAd:
        self.expect("[")
        ad = ClassAd()
        while not self.accept("]"):
            if self.tok.kind == "eof":
                self.error("unbalanced '['")
            if self.tok.kind != "name":
                self.error("expected attribute name")
            name_tok = self.tok
            self.i += 1
            if name_tok.text in ad:
                self.error(f"duplicate attribute {name_tok.text!r}", name_tok)
            self.expect("=")
            ad[name_tok.text] = self.parse_expr()
            if not self.accept(";"):
                if not (self.tok.kind == "op" and self.tok.text == "]"):
                    self.error("expected ';'")
        if self.tok.kind != "eof":
            self.error("trailing input after ']'")
        return ad

    def parse_expr(self, level: int = 0) -> Expr:
        if level == len(_BINARY_LEVELS):
            return self.parse_unary()
        left = self.parse_expr(level + 1)
        ops = _BINARY_LEVELS[level]
        while self.tok.kind == "op" and self.tok.text in ops:
            op = self.tok.text
            self.i += 1
            left = BinOp(op, left, self.parse_expr(level + 1))
        return left

    def parse_unary(self) -> Expr:
        if self.accept("!"):
            return UnaryOp("!", self.parse_unary())
        if self.accept("-"):
            if self.tok.kind in ("int", "float"):
                return self._number(negate=True)
            return UnaryOp("-", self.parse_unary())
        return self.parse_primary()

    def _number(self, negate=False) -> Literal:
        tok = self.tok
        self.i += 1
        value = int(tok.text) if tok.kind == "int" else float(tok.text)
        return Literal(-value if negate else value)

    def parse_primary(self) -> Expr:
        tok = self.tok
        if tok.kind in ("int", "float"):
            return self._number()
        if tok.kind == "string":
            self.i += 1
            return Literal(_unescape(tok.text[1:-1]))
        if self.accept("("):
            e = self.parse_expr()
            self.expect(")")
            return e
        if self.accept("{"):
            items = []
            if not self.accept("}"):
                while True:
                    items.append(self.parse_expr())
                    if self.accept("}"):
                        break
                    self.expect(",")
            return ListExpr(tuple(items))
        if tok.kind == "name":
            self.i += 1
            low = tok.text.lower()
            if low in _KEYWORDS:
                return Literal(_KEYWORDS[low])
            if low in ("self", "other") and self.accept("."):
                if self.tok.kind != "name":
                    self.error("expected attribute name after '.'")
                name = self.tok.text
                self.i += 1
                return AttrRef(low, name)
            if self.accept("("):
                args = []
                if not self.accept(")"):
                    while True:
                        args.append(self.parse_expr())
                        if self.accept(")"):
                            break
                        self.expect(",")
                return Call(low, tuple(args))
            return AttrRef(None, tok.text)
        self.error("expected expression")


def parse(text: str) -> ClassAd:
    """Parse a ``[ name = expr; ... ]`` advertisement."""
    return _Parser(text).parse_ad()


def parse_expr(text: str) -> Expr:
    p = _Parser(text)
    e = p.parse_expr()
    if p.tok.kind != "eof":
        p.error("trailing input")
    return e


# ---------------------------------------------------------------- printer


def _quote(s: str) -> str:
    return '"' + s.replace("\\", "\\\\").replace('"', '\\"').replace("\n", "\\n").replace("\t", "\\t") + '"'


def unparse_expr(e: Expr) -> str:
    if isinstance(e, Literal):
        v = e.value
        if v is UNDEFINED:
            return "undefined"
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, str):
            return _quote(v)
        if isinstance(v, float):
            r = repr(v)
            return r if any(c in r for c in ".en") else r + ".0"
        return str(v)
    if isinstance(e, ListExpr):
        return "{" + ", ".join(unparse_expr(i) for i in e.items) + "}"
    if isinstance(e, AttrRef):
        return f"{e.scope}.{e.name}" if e.scope else e.name
    if isinstance(e, UnaryOp):
        return f"{e.op}({unparse_expr(e.operand)})"
    if isinstance(e, BinOp):
        return f"({unparse_expr(e.left)} {e.op} {unparse_expr(e.right)})"
    if isinstance(e, Call):
        return f"{e.name}(" + ", ".join(unparse_expr(a) for a in e.args) + ")"
    raise TypeError(e)


def unparse(ad: ClassAd) -> str:
    """Canonical text: attributes sorted case-insensitively, one per line."""
    lines = [f"  {name} = {unparse_expr(expr)};" for name, expr in sorted(ad.items(), key=lambda kv: kv[0].lower())]
    if not lines:
        return "[ ]"
    return "[\n" + "\n".join(lines) + "\n]"


# ---------------------------------------------------------------- evaluation


def _is_num(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _scalar_eq(a, b):
    if _is_num(a) and _is_num(b):
        return a == b
    if type(a) is type(b) and isinstance(a, (str, bool)):
        return a == b
    return UNDEFINED


def _arith(op, a, b):
    if not (_is_num(a) and _is_num(b)):
        return UNDEFINED
    if op == "+":
        return a + b
    if op == "-":
        return a - b
    if op == "*":
        return a * b
    if b == 0:
        return UNDEFINED
    if isinstance(a, int) and isinstance(b, int):
        q = abs(a) // abs(b)
        return q if (a >= 0) == (b >= 0) else -q
    return a / b


def _compare(op, a, b):
    if op in ("==", "!="):
        r = _scalar_eq(a, b)
        if r is UNDEFINED:
            return r
        return r if op == "==" else not r
    if _is_num(a) and _is_num(b) or (isinstance(a, str) and isinstance(b, str)):
        if op == "<":
            return a < b
        if op == "<=":
            return a <= b
        if op == ">":
            return a > b
        return a >= b
    return UNDEFINED


def _logic_and(a, b):
    a = a if isinstance(a, bool) else UNDEFINED
    b = b if isinstance(b, bool) else UNDEFINED
    if a is False or b is False:
        return False
    if a is True and b is True:
        return True
    return UNDEFINED


def _logic_or(a, b):
    a = a if isinstance(a, bool) else UNDEFINED
    b = b if isinstance(b, bool) else UNDEFINED
    if a is True or b is True:
        return True
    if a is False and b is False:
        return False
    return UNDEFINED


def _member(lst, value):
    if not isinstance(lst, list) or value is UNDEFINED or isinstance(value, list):
        return UNDEFINED
    for item in lst:
        if _scalar_eq(item, value) is True:
            return True
    return False


def _eval(e: Expr, me: ClassAd, other: ClassAd, depth: int):
    if depth > MAX_DEPTH:
        return UNDEFINED
    if isinstance(e, Literal):
        return e.value
    if isinstance(e, AttrRef):
        if e.scope == "other":
            target = other.get(e.name)
            if target is None:
                return UNDEFINED
            return _eval(target, other, me, depth + 1)
        target = me.get(e.name)
        if target is None:
            return UNDEFINED
        return _eval(target, me, other, depth + 1)
    if isinstance(e, BinOp):
        a = _eval(e.left, me, other, depth + 1)
        op = e.op
        # short circuit only on definite booleans, keeps three-valued semantics intact
        if op == "&&" and a is False:
            return False
        if op == "||" and a is True:
            return True
        b = _eval(e.right, me, other, depth + 1)
        if op == "&&":
            return _logic_and(a, b)
        if op == "||":
            return _logic_or(a, b)
        if a is UNDEFINED or b is UNDEFINED:
            return UNDEFINED
        if op in ("+", "-", "*", "/"):
            return _arith(op, a, b)
        return _compare(op, a, b)
    if isinstance(e, UnaryOp):
        v = _eval(e.operand, me, other, depth + 1)
        if e.op == "!":
            return (not v) if isinstance(v, bool) else UNDEFINED
        return -v if _is_num(v) else UNDEFINED
    if isinstance(e, ListExpr):
        return [_eval(i, me, other, depth + 1) for i in e.items]
    if isinstance(e, Call):
        args = [_eval(a, me, other, depth + 1) for a in e.args]
        if e.name == "member" and len(args) == 2:
            return _member(args[0], args[1])
        return UNDEFINED
    return UNDEFINED


def evaluate(expr: Expr, self_ad: ClassAd, other_ad: ClassAd | None = None):
    """Evaluate ``expr`` with ``self_ad`` as self and ``other_ad`` as other."""
    return _eval(expr, self_ad, other_ad if other_ad is not None else EMPTY_AD, 0)


def requires(a: ClassAd, b: ClassAd) -> bool:
    """One-directional check: a's Requirements hold against b."""
    req = a.get("Requirements")
    if req is None:
        return True
    return evaluate(req, a, b) is True


def matches(job: ClassAd, resource: ClassAd) -> bool:
    return requires(job, resource) and requires(resource, job)


def rank(job: ClassAd, resource: ClassAd) -> float:
    expr = job.get("Rank")
    if expr is None:
        return 0.0
    v = evaluate(expr, job, resource)
    return float(v) if _is_num(v) else 0.0


def conjoin(a: Expr, b: Expr) -> Expr:
    return BinOp("&&", a, b)


def any_member(attr: str, values: Iterable[str]) -> Expr | None:
    """``member(other.<attr>, v1) || member(other.<attr>, v2) || ...``"""
    clause = None
    for v in values:
        term = Call("member", (AttrRef("other", attr), Literal(v)))
        clause = term if clause is None else BinOp("||", clause, term)
    return clause


def to_python(value):
    """Evaluated value -> plain python (UNDEFINED becomes None)."""
    if value is UNDEFINED:
        return None
    if isinstance(value, list):
        return [to_python(v) for v in value]
    return value


# ---------------------------------------------------------------- job / resource conventions


def job_ad_errors(ad: ClassAd) -> list[str]:
    errs = []
    exe = ad.value("Executable")
    if not isinstance(exe, str) or not exe:
        errs.append("Executable must be a nonempty string")
    for name in ("Arguments", "Packages", "InputData", "OutputFiles"):
        if name in ad and not isinstance(ad.value(name), list):
            errs.append(f"{name} must be a list")
    return errs


def normalize_job_ad(ad: ClassAd) -> ClassAd:
    """Fill in defaults required of a job description."""
    ad = ad.copy()
    if "Requirements" not in ad:
        ad["Requirements"] = TRUE
    for name in ("Arguments", "Packages", "InputData", "OutputFiles"):
        if name not in ad:
            ad[name] = []
    return ad


def resource_ad(
    name: str,
    site: str,
    platform: str = "linux",
    free_slots: int = 0,
    max_slots: int = 0,
    installed_packages: Iterable[str] = (),
    close_se: Iterable[str] = (),
    partition: str = "default",
    requirements: Expr | str | None = None,
    **extra,
) -> ClassAd:
    ad = ClassAd(
        {
            "Name": name,
            "Site": site,
            "Platform": platform,
            "FreeSlots": int(free_slots),
            "MaxSlots": int(max_slots),
            "InstalledPackages": list(installed_packages),
            "CloseSE": list(close_se),
            "GridPartition": partition,
        }
    )
    if requirements is not None:
        ad["Requirements"] = parse_expr(requirements) if isinstance(requirements, str) else requirements
    for k, v in extra.items():
        ad[k] = v
    return ad
