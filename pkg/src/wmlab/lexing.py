"""Deterministic lexer for a Python subset and token-stream metrics.

One shared tokenizer feeds watermark embedding, detection, and the
token-change metric, so "is this token green" means the same thing before
and after a program is rewritten.  The lexer is hand-rolled rather than
stdlib ``tokenize`` so that byte spans, error offsets, and the exact token
stream are pinned by this module and nothing else.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

__all__ = [
    "TokenKind",
    "CodeToken",
    "TokenStream",
    "LexError",
    "tokenize",
    "token_change_proportion",
    "levenshtein",
    "stream_from_texts",
]


class LexError(ValueError):
    """Raised on malformed input; carries the byte offset of the fault."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at byte {offset}")
        self.offset = offset


class TokenKind(enum.Enum):
    IDENTIFIER = "identifier"
    KEYWORD = "keyword"
    INTEGER = "integer"
    FLOAT = "float"
    STRING = "string-literal"
    OPERATOR = "operator"
    PUNCT = "punctuation"
    NEWLINE = "newline"
    INDENT = "indent"
    DEDENT = "dedent"
    COMMENT = "comment"


@dataclass(frozen=True)
class CodeToken:
    """One lexical token with its byte span in the source.

    ``text`` is the exact source slice, except for two structural cases:
    a dedent owns no bytes (empty text, zero-width span) and a final
    newline synthesized to close an open block has text "\\n" with a
    zero-width span at EOF.
    """

    text: str
    kind: TokenKind
    start: int
    end: int

    @property
    def span(self) -> tuple[int, int]:
        return (self.start, self.end)


@dataclass(frozen=True)
class TokenStream:
    tokens: tuple[CodeToken, ...]
    source: str

    def __len__(self) -> int:
        return len(self.tokens)

    def __iter__(self):
        return iter(self.tokens)

    def texts(self) -> list[str]:
        return [t.text for t in self.tokens]

    def kinds(self) -> list[TokenKind]:
        return [t.kind for t in self.tokens]


# Pinned keyword set (hard keywords of CPython 3.10); a frozen copy rather
# than keyword.kwlist so the stream never shifts under a new interpreter.
KEYWORDS = frozenset(
    """False None True and as assert async await break class continue def
    del elif else except finally for from global if import in is lambda
    nonlocal not or pass raise return try while with yield""".split()
)

# Multi-character operators/delimiters, longest first for maximal munch.
_MULTI = [
    "**=", "//=", ">>=", "<<=", "...", "->", ":=",
    "==", "!=", "<=", ">=", "+=", "-=", "*=", "/=", "%=",
    "@=", "&=", "|=", "^=", "<<", ">>", "**", "//",
]
_PUNCT = frozenset(["(", ")", "[", "]", "{", "}", ",", ":", ";", ".", "->", "..."])
_SINGLE_OPS = frozenset("+-*/%@&|^~<>=")
_OPENERS = frozenset("([{")
_CLOSERS = frozenset(")]}")
_STRING_PREFIXES = frozenset(
    ["r", "b", "f", "u", "rb", "br", "fr", "rf", "bf", "fb"]
)


def _op_kind(text: str) -> TokenKind:
    return TokenKind.PUNCT if text in _PUNCT else TokenKind.OPERATOR


class _Lexer:
    def __init__(self, source: str):
        self.s = source
        self.n = len(source)
        self.pos = 0
        self.tokens: list[CodeToken] = []
        self.indent_stack = [""]
        self.depth = 0  # bracket nesting
        self.at_line_start = True
        if source.isascii():
            self._byte_of = None
        else:
            offsets = [0]
            for ch in source:
                offsets.append(offsets[-1] + len(ch.encode("utf-8")))
            self._byte_of = offsets

    def byte(self, char_pos: int) -> int:
        if self._byte_of is None:
            return char_pos
        return self._byte_of[char_pos]

    def emit(self, text: str, kind: TokenKind, start: int, end: int) -> None:
        self.tokens.append(CodeToken(text, kind, self.byte(start), self.byte(end)))

    def run(self) -> list[CodeToken]:
        s, n = self.s, self.n
        while self.pos < n:
            if self.at_line_start and self.depth == 0:
                self._handle_indentation()
                if self.pos >= n:
                    break
            c = s[self.pos]
            if c in " \t\f":
                self.pos += 1
            elif c == "\\" and self.pos + 1 < n and s[self.pos + 1] in "\r\n":
                self.pos += 2  # explicit line join: backslash + line break
                if s[self.pos - 1] == "\r" and self.pos < n and s[self.pos] == "\n":
                    self.pos += 1
            elif c in "\r\n":
                self._newline()
            elif c == "#":
                self._comment()
            elif self._string_start():
                pass  # token emitted by _string_start
            elif c.isdigit() or (c == "." and self.pos + 1 < n and s[self.pos + 1].isdigit()):
                self._number()
            elif c.isalpha() or c == "_":
                self._word()
            else:
                self._operator()
        self._finish()
        return self.tokens

    # -- line structure ------------------------------------------------

    def _handle_indentation(self) -> None:
        s, n = self.s, self.n
        start = self.pos
        while self.pos < n and s[self.pos] in " \t\f":
            self.pos += 1
        # Blank and comment-only lines do not open or close blocks.
        if self.pos >= n or s[self.pos] in "\r\n#":
            self.at_line_start = False
            return
        ws = s[start : self.pos]
        top = self.indent_stack[-1]
        if ws != top:
            if ws.startswith(top):
                self.indent_stack.append(ws)
                self.emit(ws, TokenKind.INDENT, start, self.pos)
            else:
                while len(self.indent_stack) > 1 and self.indent_stack[-1] != ws:
                    self.indent_stack.pop()
                    self.emit("", TokenKind.DEDENT, self.pos, self.pos)
                if self.indent_stack[-1] != ws:
                    raise LexError("inconsistent indentation", self.byte(start))
        self.at_line_start = False

    def _newline(self) -> None:
        s = self.s
        start = self.pos
        if s[self.pos] == "\r" and self.pos + 1 < self.n and s[self.pos + 1] == "\n":
            self.pos += 2
        else:
            self.pos += 1
        if self.depth == 0:
            self.emit(s[start : self.pos], TokenKind.NEWLINE, start, self.pos)
            self.at_line_start = True
        # Inside brackets a line break is plain whitespace.

    def _comment(self) -> None:
        s, n = self.s, self.n
        start = self.pos
        while self.pos < n and s[self.pos] not in "\r\n":
            self.pos += 1
        self.emit(s[start : self.pos], TokenKind.COMMENT, start, self.pos)

    def _finish(self) -> None:
        end = self.n
        # A source ending mid-statement gets a closing newline only when
        # open blocks force one; "a = 1" stays three tokens.
        if not self.at_line_start and len(self.indent_stack) > 1:
            self.emit("\n", TokenKind.NEWLINE, end, end)
        while len(self.indent_stack) > 1:
            self.indent_stack.pop()
            self.emit("", TokenKind.DEDENT, end, end)

    # -- atoms -----------------------------------------------------------

    def _string_start(self) -> bool:
        s, n = self.s, self.n
        pos = self.pos
        prefix_end = pos
        while prefix_end < n and prefix_end - pos < 2 and (s[prefix_end].isalpha()):
            prefix_end += 1
        if prefix_end > pos:
            if s[pos:prefix_end].lower() not in _STRING_PREFIXES:
                return False
        if prefix_end >= n or s[prefix_end] not in "'\"":
            return False
        self._string(pos, prefix_end)
        return True

    def _string(self, start: int, quote_pos: int) -> None:
        s, n = self.s, self.n
        q = s[quote_pos]
        if s[quote_pos : quote_pos + 3] == q * 3:
            pos = quote_pos + 3
            closer = q * 3
            while pos < n:
                if s[pos] == "\\":
                    pos += 2
                elif s[pos : pos + 3] == closer:
                    pos += 3
                    self.pos = pos
                    self.emit(s[start:pos], TokenKind.STRING, start, pos)
                    return
                else:
                    pos += 1
            raise LexError("unterminated string literal", self.byte(start))
        pos = quote_pos + 1
        while pos < n:
            c = s[pos]
            if c == "\\":
                pos += 2
            elif c == q:
                pos += 1
                self.pos = pos
                self.emit(s[start:pos], TokenKind.STRING, start, pos)
                return
            elif c in "\r\n":
                break
            else:
                pos += 1
        raise LexError("unterminated string literal", self.byte(start))

    def _number(self) -> None:
        s, n = self.s, self.n
        start = self.pos
        pos = self.pos
        is_float = False
        if s[pos] == "0" and pos + 1 < n and s[pos + 1] in "xXoObB":
            base_chars = {
                "x": "0123456789abcdefABCDEF_",
                "o": "01234567_",
                "b": "01_",
            }[s[pos + 1].lower()]
            pos += 2
            while pos < n and s[pos] in base_chars:
                pos += 1
        else:
            while pos < n and (s[pos].isdigit() or s[pos] == "_"):
                pos += 1
            if pos < n and s[pos] == ".":
                nxt = s[pos + 1] if pos + 1 < n else ""
                if nxt.isdigit() or not (nxt.isalpha() or nxt == "." or nxt == "_"):
                    is_float = True
                    pos += 1
                    while pos < n and (s[pos].isdigit() or s[pos] == "_"):
                        pos += 1
            if pos < n and s[pos] in "eE":
                look = pos + 1
                if look < n and s[look] in "+-":
                    look += 1
                if look < n and s[look].isdigit():
                    is_float = True
                    pos = look
                    while pos < n and s[pos].isdigit():
                        pos += 1
        self.pos = pos
        kind = TokenKind.FLOAT if is_float else TokenKind.INTEGER
        self.emit(s[start:pos], kind, start, pos)

    def _word(self) -> None:
        s, n = self.s, self.n
        start = self.pos
        pos = self.pos
        while pos < n and (s[pos].isalnum() or s[pos] == "_"):
            pos += 1
        text = s[start:pos]
        if not text.isascii():
            raise LexError(f"non-ASCII identifier {text!r}", self.byte(start))
        self.pos = pos
        kind = TokenKind.KEYWORD if text in KEYWORDS else TokenKind.IDENTIFIER
        self.emit(text, kind, start, pos)

    def _operator(self) -> None:
        s = self.s
        start = self.pos
        for op in _MULTI:
            if s.startswith(op, start):
                self.pos = start + len(op)
                self.emit(op, _op_kind(op), start, self.pos)
                return
        c = s[start]
        if c in _OPENERS:
            self.depth += 1
        elif c in _CLOSERS:
            self.depth = max(0, self.depth - 1)
        elif c not in _SINGLE_OPS and c not in _PUNCT:
            raise LexError(f"unexpected character {c!r}", self.byte(start))
        self.pos = start + 1
        self.emit(c, _op_kind(c), start, self.pos)


def tokenize(source: str) -> TokenStream:
    """Lex source into a TokenStream; pure function of the input text."""
    return TokenStream(tuple(_Lexer(source).run()), source)


def levenshtein(a: list[str], b: list[str]) -> int:
    """Token-sequence edit distance (insert/delete/substitute, unit cost)."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, start=1):
        cur = [i]
        for j, y in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def token_change_proportion(before: TokenStream, after: TokenStream) -> float:
    """Normalized token-text edit distance in [0, 1]; symmetric."""
    a, b = before.texts(), after.texts()
    return levenshtein(a, b) / max(len(a), len(b), 1)


def _classify(text: str) -> TokenKind:
    if text in KEYWORDS:
        return TokenKind.KEYWORD
    if text == "\n" or text == "\r\n":
        return TokenKind.NEWLINE
    if text and (text[0].isalpha() or text[0] == "_"):
        return TokenKind.IDENTIFIER
    if text and text[0] in "'\"":
        return TokenKind.STRING
    try:
        int(text)
        return TokenKind.INTEGER
    except ValueError:
        pass
    try:
        float(text)
        return TokenKind.FLOAT
    except ValueError:
        pass
    if text.startswith("#"):
        return TokenKind.COMMENT
    return _op_kind(text)


def stream_from_texts(texts: list[str]) -> TokenStream:
    """Wrap raw token texts as a TokenStream (space-joined synthetic source).

    Used for streams that come from a sampler rather than from lexing a
    file; kinds are classified from the token shape.
    """
    tokens = []
    pieces = []
    at = 0
    for text in texts:
        if pieces:
            at += 1  # single-space separator
        tokens.append(CodeToken(text, _classify(text), at, at + len(text.encode("utf-8"))))
        pieces.append(text)
        at += len(text.encode("utf-8"))
    return TokenStream(tuple(tokens), " ".join(pieces))
