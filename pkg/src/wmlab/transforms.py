"""Semantic-preserving rewrites over a lossless syntax tree.

The tree is line-structured: every byte of the source (comments and blank
lines included) is owned by exactly one node, so unparsing an untouched
tree reproduces the input byte for byte.  Statement validity is delegated
to ``ast.parse`` (which also supplies error line/column), and rename scope
analysis to ``symtable``; the tree itself only needs to know where
statements, suites, and function bodies are, which is what the rewrites
address.

Rewrites assume space-indented source (the generator only emits spaces);
a wrapped statement gains one four-space level.
"""
from __future__ import annotations

import ast
import enum
import json
import symtable as _symtable
from dataclasses import dataclass, field
from importlib import resources

from .lexing import KEYWORDS, LexError, TokenKind, tokenize
from .rng import SplitMix64

__all__ = [
    "ParseError",
    "SiteMismatchError",
    "LexiconExhaustedError",
    "TransformKind",
    "SyntaxTree",
    "Site",
    "TransformFiller",
    "TraceStep",
    "PerturbTrace",
    "WordLexicon",
    "parse_program",
    "unparse",
    "enumerate_sites",
    "sample_identifier",
    "apply_transform",
    "apply_filled",
    "perturb",
    "perturb_prefixes",
    "replay_trace",
]


class ParseError(ValueError):
    def __init__(self, message: str, line: int, col: int):
        super().__init__(f"{message} (line {line}, column {col})")
        self.line = line
        self.col = col


class SiteMismatchError(ValueError):
    """The site does not address this tree (or was made for another kind)."""


class LexiconExhaustedError(RuntimeError):
    """Fresh-identifier sampling exceeded its draw budget."""


class TransformKind(enum.Enum):
    ADD_DEAD_CODE = "AddDeadCode"
    RENAME = "Rename"
    INSERT_PRINT = "InsertPrint"
    WRAP_TRY_CATCH = "WrapTryCatch"
    MIXED = "Mixed"

    @classmethod
    def from_name(cls, name: str) -> "TransformKind":
        for kind in cls:
            if kind.value == name:
                return kind
        raise ValueError(f"unknown transform {name!r}")


SINGLE_KINDS = (
    TransformKind.ADD_DEAD_CODE,
    TransformKind.RENAME,
    TransformKind.INSERT_PRINT,
    TransformKind.WRAP_TRY_CATCH,
)

_CONTINUATION = frozenset(["elif", "else", "except", "finally"])
INDENT_UNIT = "    "


# --------------------------------------------------------------------------
# Tree model: nodes own exact source text.


@dataclass(frozen=True)
class SimpleStmt:
    text: str  # one logical line (may span physical lines), newline included


@dataclass(frozen=True)
class Filler:
    text: str  # blank or comment-only lines; never a statement


@dataclass(frozen=True)
class Clause:
    header: str  # "def f(x):\n" etc., exact slice
    body: tuple  # nested items; empty for an inline suite
    line: int  # 1-based source line of the header


@dataclass(frozen=True)
class CompoundStmt:
    kind: str  # first keyword of the first clause ("def", "if", "try", ...)
    name: str | None  # function name for def-like compounds
    clauses: tuple[Clause, ...]


@dataclass(frozen=True)
class SyntaxTree:
    items: tuple
    source: str


def _node_text(node) -> str:
    if isinstance(node, (SimpleStmt, Filler)):
        return node.text
    return "".join(
        clause.header + "".join(_node_text(child) for child in clause.body)
        for clause in node.clauses
    )


def unparse(tree: SyntaxTree) -> str:
    """Concatenate owned text; byte-identical to the parsed source."""
    return "".join(_node_text(node) for node in tree.items)


def _is_statement(node) -> bool:
    return not isinstance(node, Filler)


def _stmt_positions(items) -> list[int]:
    return [i for i, node in enumerate(items) if _is_statement(node)]


# --------------------------------------------------------------------------
# Parsing.


class _Builder:
    def __init__(self, source: str):
        self.src = source.encode("utf-8")
        self.tokens = tokenize(source).tokens
        self.i = 0
        self.cursor = 0
        self.line_starts = [0]
        for off, byte in enumerate(self.src):
            if byte == 0x0A:
                self.line_starts.append(off + 1)

    def _line_of(self, offset: int) -> int:
        lo, hi = 0, len(self.line_starts) - 1
        while lo < hi:
            mid = (lo + hi + 1) // 2
            if self.line_starts[mid] <= offset:
                lo = mid
            else:
                hi = mid - 1
        return lo + 1

    def peek(self):
        return self.tokens[self.i] if self.i < len(self.tokens) else None

    def take_through(self, byte_end: int) -> str:
        text = self.src[self.cursor : byte_end].decode("utf-8")
        self.cursor = byte_end
        return text

    def parse_module(self) -> tuple:
        items = list(self.parse_block(top=True))
        if self.cursor < len(self.src):
            items.append(Filler(self.take_through(len(self.src))))
        return tuple(items)

    def parse_block(self, top: bool = False) -> list:
        items: list = []
        while True:
            tok = self.peek()
            if tok is None:
                return items
            if tok.kind is TokenKind.DEDENT:
                if top:  # stray dedent cannot happen in validated source
                    self.i += 1
                    continue
                self.i += 1
                return items
            if tok.kind is TokenKind.NEWLINE:
                self.i += 1
                items.append(Filler(self.take_through(tok.end)))
                continue
            if tok.kind is TokenKind.COMMENT:
                self.i += 1
                end = tok.end
                nxt = self.peek()
                if nxt is not None and nxt.kind is TokenKind.NEWLINE:
                    self.i += 1
                    end = nxt.end
                items.append(Filler(self.take_through(end)))
                continue
            if tok.kind is TokenKind.INDENT:
                self.i += 1  # bytes stay for the statement that follows
                continue
            items.append(self.parse_statement())

    def _scan_logical_line(self):
        """Advance over tokens to the line's NEWLINE (or EOF).

        Returns (first, last_meaningful, end_byte, ends_with_colon).
        """
        first = self.tokens[self.i]
        last = None
        end = first.end
        while self.i < len(self.tokens):
            tok = self.tokens[self.i]
            if tok.kind is TokenKind.NEWLINE:
                self.i += 1
                end = tok.end
                break
            if tok.kind is not TokenKind.COMMENT:
                last = tok
            end = tok.end
            self.i += 1
        else:
            end = len(self.src)
        if self.i >= len(self.tokens) and self.tokens[self.i - 1].kind is not TokenKind.NEWLINE:
            end = len(self.src)  # sweep trailing bytes of an unterminated file
        colon = last is not None and last.text == ":" and last.kind is TokenKind.PUNCT
        return first, end, colon

    def _indent_follows(self) -> bool:
        """Lookahead past blank/comment lines for the suite's INDENT."""
        j = self.i
        while j < len(self.tokens) and self.tokens[j].kind in (
            TokenKind.COMMENT,
            TokenKind.NEWLINE,
        ):
            j += 1
        return j < len(self.tokens) and self.tokens[j].kind is TokenKind.INDENT

    def parse_statement(self):
        first, end, colon = self._scan_logical_line()
        if not (colon and self._indent_follows()):
            return SimpleStmt(self.take_through(end))
        header = self.take_through(end)
        line = self._line_of(first.start)
        # Leading blank/comment lines and the INDENT marker are consumed
        # by parse_block itself; their bytes land in the body's items.
        body = tuple(self.parse_block())
        clauses = [Clause(header, body, line)]
        kind, name = self._kind_and_name(first)
        while True:
            tok = self.peek()
            if (
                tok is None
                or tok.kind is not TokenKind.KEYWORD
                or tok.text not in _CONTINUATION
            ):
                break
            cfirst, cend, ccolon = self._scan_logical_line()
            copens = ccolon and self._indent_follows()
            cheader = self.take_through(cend)
            cline = self._line_of(cfirst.start)
            cbody = tuple(self.parse_block()) if copens else ()
            clauses.append(Clause(cheader, cbody, cline))
        return CompoundStmt(kind, name, tuple(clauses))

    def _kind_and_name(self, first):
        kind = first.text
        name = None
        if kind in ("def", "async"):
            idx = self.tokens.index(first)
            toks = self.tokens[idx : idx + 3]
            if kind == "async" and len(toks) > 1 and toks[1].text == "def":
                kind = "def"
                toks = toks[1:]
            if kind == "def" and len(toks) > 1:
                name = toks[1].text
        return kind, name


def parse_program(source: str) -> SyntaxTree:
    """Validate with ast.parse, then build the lossless line tree."""
    try:
        ast.parse(source)
    except SyntaxError as exc:
        raise ParseError(exc.msg or "invalid syntax", exc.lineno or 0, exc.offset or 0) from exc
    except ValueError as exc:  # e.g. NUL bytes
        raise ParseError(str(exc), 0, 0) from exc
    try:
        items = _Builder(source).parse_module()
    except LexError as exc:
        raise ParseError(str(exc), 0, 0) from exc
    return SyntaxTree(items, source)


# --------------------------------------------------------------------------
# Sites.


@dataclass(frozen=True)
class Site:
    """Address of one rewrite opportunity in a specific tree.

    ``path`` alternates (statement index, clause index) pairs from the
    module root down to the block that contains the site.  For insertion
    kinds ``index`` is a boundary (0..n statements); for wrapping it is a
    statement index; renames address the def statement itself via
    ``path`` + ``binding``.
    """

    kind: TransformKind
    path: tuple[int, ...]
    index: int = -1
    binding: str | None = None

    def to_json(self) -> dict:
        return {
            "kind": self.kind.value,
            "path": list(self.path),
            "index": self.index,
            "binding": self.binding,
        }

    @classmethod
    def from_json(cls, data: dict) -> "Site":
        return cls(
            TransformKind.from_name(data["kind"]),
            tuple(data["path"]),
            data.get("index", -1),
            data.get("binding"),
        )


def _resolve_block(tree: SyntaxTree, path: tuple[int, ...]):
    items = tree.items
    if len(path) % 2 != 0:
        raise SiteMismatchError(f"odd block path {path}")
    for at in range(0, len(path), 2):
        stmt_idx, clause_idx = path[at], path[at + 1]
        positions = _stmt_positions(items)
        if stmt_idx >= len(positions):
            raise SiteMismatchError(f"no statement {stmt_idx} under {path[:at]}")
        node = items[positions[stmt_idx]]
        if not isinstance(node, CompoundStmt) or clause_idx >= len(node.clauses):
            raise SiteMismatchError(f"path {path} does not address a suite")
        items = node.clauses[clause_idx].body
    return items


def _rebuild_block(items, path: tuple[int, ...], edit):
    if not path:
        return edit(items)
    stmt_idx, clause_idx = path[0], path[1]
    pos = _stmt_positions(items)[stmt_idx]
    node = items[pos]
    clause = node.clauses[clause_idx]
    new_body = _rebuild_block(clause.body, path[2:], edit)
    new_clause = Clause(clause.header, new_body, clause.line)
    new_clauses = node.clauses[:clause_idx] + (new_clause,) + node.clauses[clause_idx + 1 :]
    return items[:pos] + (CompoundStmt(node.kind, node.name, new_clauses),) + items[pos + 1 :]


def _first_word(node) -> str:
    text = node.text if isinstance(node, SimpleStmt) else node.clauses[0].header
    return text.lstrip()[:12].split("(")[0].split(":")[0].strip().split(" ")[0]


def _is_decorator(node) -> bool:
    return isinstance(node, SimpleStmt) and node.text.lstrip().startswith("@")


def _is_dangling_clause(node) -> bool:
    word = _first_word(node)
    return word in _CONTINUATION or (
        isinstance(node, CompoundStmt) and node.kind in _CONTINUATION
    )


def _walk_blocks(tree: SyntaxTree):
    """Yield (path, items, in_function) for every suite, document order."""

    def rec(items, path, in_function):
        yield path, items, in_function
        for stmt_idx, pos in enumerate(_stmt_positions(items)):
            node = items[pos]
            if isinstance(node, CompoundStmt):
                inside = in_function
                if node.kind == "def":
                    inside = True
                elif node.kind == "class":
                    inside = False
                for clause_idx in range(len(node.clauses)):
                    yield from rec(
                        node.clauses[clause_idx].body,
                        path + (stmt_idx, clause_idx),
                        inside,
                    )

    yield from rec(tree.items, (), False)


def _walk_functions(tree: SyntaxTree):
    """Yield (path-to-def, node, start_byte, end_byte) in document order."""
    found = []

    def length(node) -> int:
        return len(_node_text(node).encode("utf-8"))

    def rec(items, path, offset):
        for i, node in enumerate(items):
            if isinstance(node, CompoundStmt):
                stmt_idx = _stmt_positions(items).index(i)
                if node.kind == "def":
                    found.append((path + (stmt_idx,), node, offset, offset + length(node)))
                inner = offset
                for clause_idx, clause in enumerate(node.clauses):
                    inner += len(clause.header.encode("utf-8"))
                    rec(clause.body, path + (stmt_idx, clause_idx), inner)
                    inner += sum(length(child) for child in clause.body)
            offset += length(node)

    rec(tree.items, (), 0)
    return found


def enumerate_sites(tree: SyntaxTree, kind: TransformKind) -> list[Site]:
    """All applicable sites for one transform, ordered by source position."""
    if kind is TransformKind.MIXED:
        raise ValueError("Mixed selects a concrete kind per iteration; enumerate those")
    sites: list[Site] = []
    if kind in (TransformKind.ADD_DEAD_CODE, TransformKind.INSERT_PRINT):
        for path, items, in_function in _walk_blocks(tree):
            if not in_function:
                continue
            positions = _stmt_positions(items)
            for boundary in range(len(positions) + 1):
                if boundary < len(positions) and _is_dangling_clause(items[positions[boundary]]):
                    continue  # never split a clause chain
                if boundary > 0 and _is_decorator(items[positions[boundary - 1]]):
                    continue  # never split decorator from target
                sites.append(Site(kind, path, boundary))
    elif kind is TransformKind.WRAP_TRY_CATCH:
        for path, items, in_function in _walk_blocks(tree):
            if not in_function:
                continue
            for stmt_idx, pos in enumerate(_stmt_positions(items)):
                node = items[pos]
                if not isinstance(node, SimpleStmt):
                    continue
                word = _first_word(node)
                if word in _CONTINUATION or _is_decorator(node):
                    continue
                nxt = stmt_idx + 1
                positions = _stmt_positions(items)
                if word in ("if", "for", "while", "try", "with") and (
                    nxt < len(positions) and _is_dangling_clause(items[positions[nxt]])
                ):
                    continue  # inline compound with a dangling clause
                sites.append(Site(kind, path, stmt_idx))
    elif kind is TransformKind.RENAME:
        tables = _function_tables(tree)
        functions = _walk_functions(tree)
        spans_by_key = {(n.name, n.clauses[0].line): (s, e) for _, n, s, e in functions}
        for path, node, start, end in functions:
            info = tables.get((node.name, node.clauses[0].line))
            if info is None:
                continue
            for binding in _renameable_bindings(tree, info, start, end, spans_by_key):
                sites.append(Site(kind, path, -1, binding))
    else:  # pragma: no cover - exhaustive enum
        raise ValueError(f"unhandled kind {kind}")
    return sites


def _function_tables(tree: SyntaxTree):
    try:
        root = _symtable.symtable(tree.source, "<module>", "exec")
    except SyntaxError:  # unreachable after parse_program validation
        return {}
    tables = {}
    stack = [root]
    while stack:
        entry = stack.pop()
        for child in entry.get_children():
            stack.append(child)
            if child.get_type() == "function":
                tables[(child.get_name(), child.get_lineno())] = child
    return tables


def _renameable_bindings(tree: SyntaxTree, table, start: int, end: int, spans_by_key) -> list[str]:
    span_tokens = [
        t
        for t in tokenize(tree.source).tokens
        if t.kind is TokenKind.IDENTIFIER and start <= t.start < end
    ]
    out = []
    first_seen: dict[str, int] = {}
    for pos, tok in enumerate(span_tokens):
        first_seen.setdefault(tok.text, pos)
    for sym in table.get_symbols():
        name = sym.get_name()
        if not sym.is_local():
            continue
        if not (sym.is_parameter() or sym.is_assigned()):
            continue
        if sym.is_imported() or sym.is_namespace():
            continue
        if name not in first_seen:
            continue
        if _rename_exclusions(table, name, spans_by_key) is None:
            continue  # shadowed somewhere we cannot delimit; leave it alone
        if not _binds_first(tree, name, start, end):
            continue
        out.append((first_seen[name], name))
    out.sort()
    return [name for _, name in out]


def _binds_first(tree: SyntaxTree, name: str, start: int, end: int) -> bool:
    """Cheap store-first check: the first occurrence must be a binding."""
    toks = [t for t in tokenize(tree.source).tokens if start <= t.start < end]
    params_span = _param_list_span(toks)
    for i, tok in enumerate(toks):
        if tok.kind is not TokenKind.IDENTIFIER or tok.text != name:
            continue
        prev = _prev_code_token(toks, i)
        nxt = _next_code_token(toks, i)
        if prev is not None and prev.text == ".":
            continue  # attribute, not this name at all
        if params_span and params_span[0] <= tok.start < params_span[1]:
            return True  # parameter
        if prev is not None and prev.text in ("for", "as"):
            return True
        if nxt is not None and nxt.text in ("=", ":="):
            return True
        if nxt is not None and nxt.text == "," :
            # tuple-assignment targets are possible but ambiguous at token
            # level; treat as a read and keep the site set conservative.
            return False
        return False
    return False


def _param_list_span(toks) -> tuple[int, int] | None:
    """Byte span of the def header's parameter parentheses."""
    toks = [
        t
        for t in toks
        if t.kind not in (TokenKind.COMMENT, TokenKind.NEWLINE, TokenKind.INDENT, TokenKind.DEDENT)
    ]
    if not toks or toks[0].text not in ("def", "async"):
        return None
    depth = 0
    open_at = None
    for tok in toks:
        if tok.text == "(" and tok.kind is TokenKind.PUNCT:
            if depth == 0:
                open_at = tok.start
            depth += 1
        elif tok.text == ")" and tok.kind is TokenKind.PUNCT:
            depth -= 1
            if depth == 0 and open_at is not None:
                return (open_at, tok.end)
    return None


def _prev_code_token(toks, i):
    for j in range(i - 1, -1, -1):
        if toks[j].kind not in (TokenKind.COMMENT, TokenKind.NEWLINE, TokenKind.INDENT, TokenKind.DEDENT):
            return toks[j]
    return None


def _next_code_token(toks, i):
    for j in range(i + 1, len(toks)):
        if toks[j].kind not in (TokenKind.COMMENT, TokenKind.NEWLINE, TokenKind.INDENT, TokenKind.DEDENT):
            return toks[j]
    return None


# --------------------------------------------------------------------------
# Lexicon and fillers.


@dataclass(frozen=True)
class WordLexicon:
    """Ordered, deduplicated identifier vocabulary; sampling uses an
    external seeded stream so the lexicon itself stays immutable."""

    words: tuple[str, ...]

    def __post_init__(self):
        if not self.words:
            raise ValueError("empty lexicon")

    @staticmethod
    def _valid(word: str) -> bool:
        if not word or word in KEYWORDS or word in _SHADOWABLE_BUILTINS:
            return False
        if not ("a" <= word[0] <= "z"):
            return False
        return all("a" <= c <= "z" or "0" <= c <= "9" or c == "_" for c in word)

    @classmethod
    def from_words(cls, words) -> "WordLexicon":
        seen = []
        for word in words:
            word = word.strip()
            if cls._valid(word) and word not in seen:
                seen.append(word)
        return cls(tuple(seen))

    @classmethod
    def from_file(cls, path) -> "WordLexicon":
        with open(path, "r", encoding="utf-8") as fh:
            lines = [ln.split("#", 1)[0].strip() for ln in fh]
        return cls.from_words(ln for ln in lines if ln)

    @classmethod
    def bundled(cls) -> "WordLexicon":
        text = resources.files("wmlab").joinpath("data/words.txt").read_text("utf-8")
        lines = [ln.split("#", 1)[0].strip() for ln in text.splitlines()]
        return cls.from_words(ln for ln in lines if ln)

    def word(self, rng: SplitMix64) -> str:
        return rng.choice(self.words)


# Names whose shadowing would break an inserted print call or common code.
_SHADOWABLE_BUILTINS = frozenset(
    """abs all any ascii bin bool breakpoint bytearray bytes callable chr
    classmethod compile complex delattr dict dir divmod enumerate eval exec
    exit filter float format frozenset getattr globals hasattr hash help hex
    id input int isinstance issubclass iter len list locals map max
    memoryview min next object oct open ord pow print property quit range
    repr reversed round set setattr slice sorted staticmethod str sum super
    tuple type vars zip self""".split()
)


def sample_identifier(lexicon: WordLexicon, rng: SplitMix64, forbidden) -> str:
    """Draw lexicon words until one misses the forbidden set (<= 1000 draws)."""
    for _ in range(1000):
        word = lexicon.word(rng)
        if word not in forbidden:
            return word
    raise LexiconExhaustedError(
        f"no admissible identifier in 1000 draws ({len(forbidden)} names forbidden)"
    )


@dataclass(frozen=True)
class TransformFiller:
    """Sampled material that completes one transform application."""

    names: tuple[str, ...] = ()
    words: tuple[str, ...] = ()
    literal: int | None = None

    def to_json(self) -> dict:
        return {"names": list(self.names), "words": list(self.words), "literal": self.literal}

    @classmethod
    def from_json(cls, data: dict) -> "TransformFiller":
        return cls(tuple(data.get("names", ())), tuple(data.get("words", ())), data.get("literal"))


def _identifiers_in(source: str) -> set[str]:
    return {t.text for t in tokenize(source).tokens if t.kind is TokenKind.IDENTIFIER}


def sample_filler(
    tree: SyntaxTree,
    kind: TransformKind,
    site: Site,
    lexicon: WordLexicon,
    rng: SplitMix64,
) -> TransformFiller:
    if kind is TransformKind.ADD_DEAD_CODE:
        forbidden = _identifiers_in(tree.source)
        first = sample_identifier(lexicon, rng, forbidden)
        second = sample_identifier(lexicon, rng, forbidden | {first})
        return TransformFiller(names=(first, second), literal=rng.randint(0, 9))
    if kind is TransformKind.RENAME:
        forbidden = _identifiers_in(tree.source)
        return TransformFiller(names=(sample_identifier(lexicon, rng, forbidden),))
    if kind is TransformKind.INSERT_PRINT:
        count = rng.randint(1, 3)
        return TransformFiller(words=tuple(lexicon.word(rng) for _ in range(count)))
    if kind is TransformKind.WRAP_TRY_CATCH:
        return TransformFiller()
    raise ValueError(f"no filler for {kind}")


# --------------------------------------------------------------------------
# Application.


def _indent_of(node) -> str:
    text = node.text if isinstance(node, SimpleStmt) else node.clauses[0].header
    body = text.lstrip(" \t")
    return text[: len(text) - len(body)]


def _block_indent(items, boundary: int) -> str:
    positions = _stmt_positions(items)
    if not positions:
        return ""
    anchor = positions[boundary] if boundary < len(positions) else positions[-1]
    return _indent_of(items[anchor])


def _insert_lines(tree: SyntaxTree, site: Site, lines: list[str]) -> str:
    items = _resolve_block(tree, site.path)
    positions = _stmt_positions(items)
    if not 0 <= site.index <= len(positions):
        raise SiteMismatchError(f"boundary {site.index} out of range")
    if site.index < len(positions):
        at = positions[site.index]
    else:
        at = positions[-1] + 1 if positions else len(items)

    def edit(block):
        block = list(block)
        new_lines = list(lines)
        if at > 0 and not _node_text(block[at - 1]).endswith("\n"):
            new_lines[0] = "\n" + new_lines[0]  # file ended without a newline
        return tuple(block[:at]) + tuple(SimpleStmt(ln) for ln in new_lines) + tuple(block[at:])

    new_items = _rebuild_block(tree.items, site.path, edit)
    return "".join(_node_text(node) for node in new_items)


def _apply_dead_code(tree: SyntaxTree, site: Site, filler: TransformFiller) -> str:
    items = _resolve_block(tree, site.path)
    ind = _block_indent(items, site.index)
    first, second = filler.names
    lines = [
        f"{ind}{second} = 0\n",
        f"{ind}{first} = {filler.literal}\n",
        f"{ind}if ({first} != {second}): {second} = 0\n",
    ]
    return _insert_lines(tree, site, lines)


def _apply_insert_print(tree: SyntaxTree, site: Site, filler: TransformFiller) -> str:
    items = _resolve_block(tree, site.path)
    ind = _block_indent(items, site.index)
    message = " ".join(filler.words)
    return _insert_lines(tree, site, [f'{ind}print("{message}")\n'])


def _apply_wrap(tree: SyntaxTree, site: Site) -> str:
    items = _resolve_block(tree, site.path)
    positions = _stmt_positions(items)
    if not 0 <= site.index < len(positions):
        raise SiteMismatchError(f"statement {site.index} out of range")
    pos = positions[site.index]
    node = items[pos]
    if not isinstance(node, SimpleStmt):
        raise SiteMismatchError("wrap target is not a simple statement")
    ind = _indent_of(node)
    stmt_text = node.text if node.text.endswith("\n") else node.text + "\n"
    indented = "".join(
        INDENT_UNIT + ln if ln.strip() else ln
        for ln in stmt_text.splitlines(keepends=True)
    )
    wrapped = (
        f"{ind}try:\n"
        + indented
        + f"{ind}except Exception:\n{ind}{INDENT_UNIT}raise\n"
    )

    def edit(block):
        block = list(block)
        block[pos] = SimpleStmt(wrapped)  # reparse restores real structure
        return tuple(block)

    new_items = _rebuild_block(tree.items, site.path, edit)
    return "".join(_node_text(n) for n in new_items)


def _subtree_mentions(table, name: str) -> bool:
    for child in table.get_children():
        if any(s.get_name() == name for s in child.get_symbols()):
            return True
        if _subtree_mentions(child, name):
            return True
    return False


def _rename_exclusions(table, name: str, spans_by_key) -> list[tuple[int, int]] | None:
    """Byte spans where the name means something else; None if undecidable.

    Nested defs that rebind the name are excluded wholesale; scopes we
    cannot delimit (lambdas, comprehensions) force a refusal whenever the
    name appears anywhere under them.
    """
    excluded: list[tuple[int, int]] = []
    for child in table.get_children():
        symbols = {s.get_name(): s for s in child.get_symbols()}
        sym = symbols.get(name)
        key = (child.get_name(), child.get_lineno())
        span = spans_by_key.get(key)
        if span is None:
            if sym is not None or _subtree_mentions(child, name):
                return None
            continue
        if sym is not None and not sym.is_free():
            excluded.append(span)
            continue
        deeper = _rename_exclusions(child, name, spans_by_key)
        if deeper is None:
            return None
        excluded.extend(deeper)
    return excluded


def _apply_rename(tree: SyntaxTree, site: Site, filler: TransformFiller) -> str:
    new_name = filler.names[0]
    functions = _walk_functions(tree)
    match = [f for f in functions if f[0] == site.path]
    if not match:
        raise SiteMismatchError(f"path {site.path} is not a function")
    _, node, start, end = match[0]
    tables = _function_tables(tree)
    table = tables.get((node.name, node.clauses[0].line))
    if table is None:
        raise SiteMismatchError(f"no scope entry for function at {site.path}")
    name = site.binding
    if name is None or name not in {s.get_name() for s in table.get_symbols()}:
        raise SiteMismatchError(f"{name!r} is not bound in this function")
    spans_by_key = {
        (n.name, n.clauses[0].line): (s, e) for _, n, s, e in functions
    }
    excluded = _rename_exclusions(table, name, spans_by_key)
    if excluded is None:
        raise SiteMismatchError(
            f"binding {name!r} is shadowed in a scope this tree cannot delimit"
        )

    toks = tokenize(tree.source).tokens
    span_toks = [t for t in toks if start <= t.start < end]
    params_span = _param_list_span(span_toks)
    src = tree.source.encode("utf-8")
    pieces = []
    cursor = 0
    for i, tok in enumerate(toks):
        if tok.kind is not TokenKind.IDENTIFIER or tok.text != name:
            continue
        if not start <= tok.start < end:
            continue
        if any(lo <= tok.start < hi for lo, hi in excluded):
            continue
        prev = _prev_code_token(toks, i)
        nxt = _next_code_token(toks, i)
        if prev is not None and prev.text == ".":
            continue  # attribute name
        in_params = params_span and params_span[0] <= tok.start < params_span[1]
        if not in_params and prev is not None and nxt is not None:
            if prev.text in ("(", ",") and nxt.text == "=":
                continue  # keyword argument in a call
        pieces.append(src[cursor : tok.start])
        pieces.append(new_name.encode("utf-8"))
        cursor = tok.end
    pieces.append(src[cursor:])
    return b"".join(pieces).decode("utf-8")


def apply_filled(
    tree: SyntaxTree, kind: TransformKind, site: Site, filler: TransformFiller
) -> SyntaxTree:
    """Apply one transform with pre-sampled filler; reparses the result."""
    if site.kind is not kind:
        raise SiteMismatchError(f"site was produced for {site.kind}, not {kind}")
    if kind is TransformKind.ADD_DEAD_CODE:
        source = _apply_dead_code(tree, site, filler)
    elif kind is TransformKind.INSERT_PRINT:
        source = _apply_insert_print(tree, site, filler)
    elif kind is TransformKind.WRAP_TRY_CATCH:
        source = _apply_wrap(tree, site)
    elif kind is TransformKind.RENAME:
        source = _apply_rename(tree, site, filler)
    else:
        raise ValueError(f"cannot apply {kind} directly")
    return parse_program(source)


def apply_transform(
    tree: SyntaxTree,
    kind: TransformKind,
    site: Site,
    lexicon: WordLexicon,
    seed: int,
) -> SyntaxTree:
    """Sample filler from the seed and apply; output always reparses."""
    rng = SplitMix64(seed)
    filler = sample_filler(tree, kind, site, lexicon, rng)
    return apply_filled(tree, kind, site, filler)


# --------------------------------------------------------------------------
# The perturbation loop.


@dataclass(frozen=True)
class TraceStep:
    k: int
    kind: TransformKind
    site: Site | None
    filler: TransformFiller | None
    skip: bool = False

    def to_json(self) -> dict:
        return {
            "k": self.k,
            "kind": self.kind.value,
            "skip": self.skip,
            "site": None if self.site is None else self.site.to_json(),
            "filler": None if self.filler is None else self.filler.to_json(),
        }

    @classmethod
    def from_json(cls, data: dict) -> "TraceStep":
        return cls(
            data["k"],
            TransformKind.from_name(data["kind"]),
            None if data.get("site") is None else Site.from_json(data["site"]),
            None if data.get("filler") is None else TransformFiller.from_json(data["filler"]),
            data.get("skip", False),
        )


@dataclass(frozen=True)
class PerturbTrace:
    steps: tuple[TraceStep, ...] = field(default_factory=tuple)

    def __len__(self) -> int:
        return len(self.steps)

    def to_jsonl(self) -> str:
        return "\n".join(json.dumps(step.to_json(), sort_keys=True) for step in self.steps)

    @classmethod
    def from_jsonl(cls, text: str) -> "PerturbTrace":
        steps = [
            TraceStep.from_json(json.loads(line))
            for line in text.splitlines()
            if line.strip()
        ]
        return cls(tuple(steps))


def _perturb_tree(tree, k, kind, lexicon, rng):
    """One iteration; returns (new_tree, step record)."""
    concrete = rng.choice(SINGLE_KINDS) if kind is TransformKind.MIXED else kind
    sites = enumerate_sites(tree, concrete)
    if not sites:
        return tree, TraceStep(k, concrete, None, None, skip=True)
    site = sites[rng.randint(0, len(sites) - 1)]
    filler = sample_filler(tree, concrete, site, lexicon, rng)
    return apply_filled(tree, concrete, site, filler), TraceStep(k, concrete, site, filler)


def perturb(
    source: str,
    d: int,
    kind: TransformKind,
    lexicon: WordLexicon,
    seed: int,
) -> tuple[str, PerturbTrace]:
    """Apply d randomized transforms; deterministic in (source, d, kind, seed)."""
    if d < 0:
        raise ValueError("d must be non-negative")
    tree = parse_program(source)
    if d == 0:
        return source, PerturbTrace()
    rng = SplitMix64(seed)
    steps = []
    for k in range(1, d + 1):
        tree, step = _perturb_tree(tree, k, kind, lexicon, rng)
        steps.append(step)
    return unparse(tree), PerturbTrace(tuple(steps))


def perturb_prefixes(
    source: str,
    d_values: list[int],
    kind: TransformKind,
    lexicon: WordLexicon,
    seed: int,
) -> dict[int, str]:
    """Outputs at several d in one pass: d' < d is a prefix of the same run,
    so sweep points are paired by construction."""
    if any(d < 0 for d in d_values):
        raise ValueError("d must be non-negative")
    wanted = set(d_values)
    out: dict[int, str] = {}
    tree = parse_program(source)
    if 0 in wanted:
        out[0] = source
    rng = SplitMix64(seed)
    for k in range(1, max(wanted, default=0) + 1):
        tree, _ = _perturb_tree(tree, k, kind, lexicon, rng)
        if k in wanted:
            out[k] = unparse(tree)
    return out


def replay_trace(source: str, trace: PerturbTrace) -> str:
    """Re-apply a recorded trace; reproduces the perturbed output exactly."""
    tree = parse_program(source)
    for step in trace.steps:
        if step.skip:
            continue
        tree = apply_filled(tree, step.kind, step.site, step.filler)
    return unparse(tree)
