"""Parser and evaluator for ``lfn://host/pattern?Tag:predicate`` queries."""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from ..errors import ParseError

COMPARATORS = (">=", "<=", "!=", "==", "=", ">", "<")

_PRED_TOKEN = re.compile(
    r"""\s*(?:
        (?P<op>>=|<=|!=|==|=|>|<)
      | (?P<string>"(?:[^"\\]|\\.)*"|'(?:[^'\\]|\\.)*')
      | (?P<number>[+-]?(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?(?![A-Za-z_]))
      | (?P<word>[A-Za-z_][\w.\-]*)
    )""",
    re.VERBOSE,
)


@dataclass(frozen=True)
class Comparison:
    attr: str
    op: str
    value: object  # int, float or str

    def test(self, row: dict) -> bool:
        if self.attr not in row:
            return False
        v = row[self.attr]
        if v is None:
            return False
        lhs_num = isinstance(v, (int, float)) and not isinstance(v, bool)
        rhs_num = isinstance(self.value, (int, float))
        if lhs_num != rhs_num:
            return False
        op = self.op
        if op in ("=", "=="):
            return v == self.value
        if op == "!=":
            return v != self.value
        if op == ">":
            return v > self.value
        if op == "<":
            return v < self.value
        if op == ">=":
            return v >= self.value
        return v <= self.value


@dataclass(frozen=True)
class Predicate:
    """Comparisons joined by and/or, evaluated strictly left to right."""

    first: Comparison
    rest: tuple = ()  # ((connective, Comparison), ...)

    def test(self, row: dict) -> bool:
        result = self.first.test(row)
        for conn, cmp in self.rest:
            if conn == "and":
                result = result and cmp.test(row)
            else:
                result = result or cmp.test(row)
        return result

    def __str__(self):
        parts = [_fmt(self.first)] + [f"{c} {_fmt(cmp)}" for c, cmp in self.rest]
        return " ".join(parts)


def _fmt(c: Comparison) -> str:
    v = c.value
    return f"{c.attr}{c.op}{v!r}" if isinstance(v, str) else f"{c.attr}{c.op}{v}"


@dataclass(frozen=True)
class LfnQuery:
    path_pattern: str
    tag: str | None = None
    predicate: Predicate | None = None
    host: str = ""
    segments: tuple = field(default=(), compare=False)

    @property
    def regexes(self):
        return tuple(segment_regex(s) for s in self.segments)

    def match_path(self, path: str) -> bool:
        return pattern_regex(self.path_pattern).fullmatch(path) is not None


def segment_regex(seg: str) -> re.Pattern:
    out = []
    for ch in seg:
        out.append("[^/]*" if ch in "*%" else re.escape(ch))
    return re.compile("".join(out))


def pattern_regex(pattern: str) -> re.Pattern:
    return re.compile("/" + "/".join(segment_regex(s).pattern for s in pattern.strip("/").split("/")))


def parse_predicate(text: str) -> Predicate:
    toks = []
    pos = 0
    text = text.strip()
    while pos < len(text):
        m = _PRED_TOKEN.match(text, pos)
        if m is None or m.end() == pos:
            raise ParseError(f"bad predicate near {text[pos:]!r}", 1, pos + 1)
        toks.append((m.lastgroup, m.group(m.lastgroup), pos + 1))
        pos = m.end()
        while pos < len(text) and text[pos].isspace():
            pos += 1
    if not toks:
        raise ParseError("empty predicate")

    i = 0

    def comparison():
        nonlocal i
        if i + 3 > len(toks):
            raise ParseError("incomplete comparison", 1, toks[i][2] if i < len(toks) else len(text))
        (k1, attr, c1), (k2, op, c2), (k3, val, c3) = toks[i : i + 3]
        if k1 != "word":
            raise ParseError(f"expected attribute name, got {attr!r}", 1, c1)
        if k2 != "op":
            raise ParseError(f"expected comparator, got {op!r}", 1, c2)
        if k3 == "number":
            value = float(val) if any(ch in val for ch in ".eE") else int(val)
        elif k3 == "string":
            value = bytes(val[1:-1], "utf-8").decode("unicode_escape")
        elif k3 == "word" and val.lower() not in ("and", "or"):
            value = val
        else:
            raise ParseError(f"expected value, got {val!r}", 1, c3)
        i += 3
        return Comparison(attr, op, value)

    first = comparison()
    rest = []
    while i < len(toks):
        kind, word, col = toks[i]
        if kind != "word" or word.lower() not in ("and", "or"):
            raise ParseError(f"expected 'and'/'or', got {word!r}", 1, col)
        i += 1
        rest.append((word.lower(), comparison()))
    return Predicate(first, tuple(rest))


def parse_query(text: str) -> LfnQuery:
    """Parse the concrete query syntax.  A bare ``/pattern`` is also accepted."""
    text = text.strip()
    host = ""
    if text.startswith("lfn://"):
        rest = text[len("lfn://") :]
        slash = rest.find("/")
        if slash < 0:
            raise ParseError("query has no path pattern", 1, len(text))
        host, rest = rest[:slash], rest[slash:]
    elif text.startswith("/"):
        rest = text
    else:
        raise ParseError("query must start with 'lfn://' or '/'", 1, 1)
    pattern, _, meta = rest.partition("?")
    if not pattern or pattern == "/":
        segments = ()
    else:
        segments = tuple(pattern.strip("/").split("/"))
        if any(s == "" for s in segments):
            raise ParseError("empty path segment in pattern", 1, text.find("//", 6) + 1)
    tag = pred = None
    if meta:
        tag, colon, ptext = meta.partition(":")
        tag = tag.strip()
        if not tag or not re.fullmatch(r"[A-Za-z_][\w\-]*", tag):
            raise ParseError(f"bad tag name {tag!r}", 1, text.find("?") + 2)
        if colon and ptext.strip():
            pred = parse_predicate(ptext)
    return LfnQuery(pattern or "/", tag, pred, host, segments)
