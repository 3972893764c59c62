"""Turn raw Solidity source into symbolized token sequences.

The stages are deliberately shallow: there is no AST. ``clean_source`` strips
comments, blank lines and non-ASCII bytes; ``extract_snippets`` splits the
cleaned text into logical statements and slices around external calls;
``symbolize`` renames user identifiers to VARi/FUNi; ``tokenize`` lexes the
result.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, replace
from typing import Iterator

from .errors import LexError, ValidationError

# --------------------------------------------------------------------------
# Vocabulary of reserved names
# --------------------------------------------------------------------------

_INT_TYPES = {f"uint{n}" for n in range(8, 257, 8)} | {f"int{n}" for n in range(8, 257, 8)}
_BYTES_TYPES = {f"bytes{n}" for n in range(1, 33)}

KEYWORDS = frozenset(
    {
        "function", "returns", "require", "if", "else", "mapping", "address",
        "uint", "int", "bool", "public", "private", "payable", "memory",
        "storage", "modifier", "contract", "emit", "return", "while", "for",
        # the rest of the language that never names user state
        "abstract", "anonymous", "assembly", "assert", "break", "byte", "bytes",
        "calldata", "catch", "constant", "constructor", "continue", "delete",
        "do", "enum", "error", "event", "external", "fallback", "false",
        "fixed", "immutable", "import", "indexed", "interface", "internal",
        "is", "library", "new", "override", "pragma", "pure", "receive",
        "revert", "solidity", "string", "struct", "throw", "true", "try",
        "type", "ufixed", "unchecked", "using", "var", "view", "virtual",
        "wei", "gwei", "szabo", "finney", "ether", "seconds", "minutes",
        "hours", "days", "weeks", "years", "let", "hex", "unicode",
    }
    | _INT_TYPES
    | _BYTES_TYPES
)

BUILTINS = frozenset(
    {
        "msg", "sender", "value", "call", "send", "transfer", "balance", "this",
        "block", "now", "tx", "gasleft",
        "data", "sig", "gas", "origin", "gasprice", "timestamp", "number",
        "coinbase", "difficulty", "gaslimit", "chainid", "basefee", "prevrandao",
        "blockhash", "delegatecall", "staticcall", "callcode", "code", "codehash",
        "selfdestruct", "suicide", "keccak256", "sha3", "sha256", "ripemd160",
        "ecrecover", "addmod", "mulmod", "abi", "encode", "encodePacked",
        "encodeWithSelector", "encodeWithSignature", "encodeCall", "decode",
        "length", "push", "pop", "super", "selector", "min", "max",
    }
)

PLACEHOLDERS = frozenset({"NUM", "STR"})
RESERVED = KEYWORDS | BUILTINS | PLACEHOLDERS

_SYMBOL_RE = re.compile(r"^(VAR|FUN)[1-9][0-9]*$")

# --------------------------------------------------------------------------
# Lexer
# --------------------------------------------------------------------------

_PUNCT = sorted(
    [
        ">>>=", "<<=", ">>=", ">>>", "...", "**", "=>", "==", "!=", "<=", ">=",
        "&&", "||", "++", "--", "+=", "-=", "*=", "/=", "%=", "|=", "&=", "^=",
        "<<", ">>", "->", ":=",
        "(", ")", "{", "}", "[", "]", ";", ",", ".", ":", "?", "+", "-", "*",
        "/", "%", "!", "~", "&", "|", "^", "<", ">", "=",
    ],
    key=len,
    reverse=True,
)

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<string>(?:hex|unicode)?(?:"(?:[^"\\\n]|\\.)*"|'(?:[^'\\\n]|\\.)*'))
  | (?P<number>0[xX][0-9a-fA-F_]+|(?:[0-9][0-9_]*(?:\.[0-9][0-9_]*)?|\.[0-9][0-9_]*)(?:[eE]-?[0-9][0-9_]*)?)
  | (?P<ident>[A-Za-z_$][A-Za-z0-9_$]*)
  | (?P<punct>"""
    + "|".join(re.escape(p) for p in _PUNCT)
    + ")",
    re.VERBOSE,
)


@dataclass(frozen=True)
class Lexeme:
    kind: str  # ident | number | string | punct
    text: str
    start: int


def lex(text: str, line: int | None = None) -> Iterator[Lexeme]:
    """Yield lexemes of ``text``, skipping whitespace.

    Raises LexError at the first character outside the Solidity alphabet.
    """
    pos = 0
    n = len(text)
    while pos < n:
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise LexError(f"unexpected character {text[pos]!r}", line=line, column=pos)
        kind = m.lastgroup
        if kind != "ws":
            yield Lexeme(kind, m.group(), pos)
        pos = m.end()


def token_class(token: str) -> str:
    """Lexical class of a tokenized, symbolized token."""
    if token == "NUM":
        return "number"
    if token == "STR":
        return "string"
    if _SYMBOL_RE.match(token):
        return "symbol"
    if token in KEYWORDS:
        return "keyword"
    if token in BUILTINS:
        return "builtin"
    if token in _PUNCT:
        return "punct"
    return "identifier"


# --------------------------------------------------------------------------
# Cleaning
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class CleanSource:
    text: str
    line_map: dict[int, int]

    @property
    def lines(self) -> list[str]:
        return self.text.split("\n") if self.text else []


def _strip_comments(text: str) -> str:
    out: list[str] = []
    i, n = 0, len(text)
    line = 0
    quote = None
    while i < n:
        ch = text[i]
        if quote:
            out.append(ch)
            if ch == "\\" and i + 1 < n and text[i + 1] != "\n":
                out.append(text[i + 1])
                i += 2
                continue
            if ch == quote or ch == "\n":
                quote = None
                if ch == "\n":
                    line += 1
            i += 1
            continue
        if ch in "\"'":
            quote = ch
            out.append(ch)
            i += 1
        elif text.startswith("//", i):
            end = text.find("\n", i)
            i = n if end == -1 else end
        elif text.startswith("/*", i):
            end = text.find("*/", i + 2)
            if end == -1:
                raise LexError("unterminated block comment opened", line=line)
            body = text[i : end + 2]
            newlines = body.count("\n")
            # a removed comment still separates the tokens around it
            out.append(" " if newlines == 0 else "\n" * newlines)
            line += newlines
            i = end + 2
        else:
            if ch == "\n":
                line += 1
            out.append(ch)
            i += 1
    return "".join(out)


def clean_source(raw: bytes | str) -> CleanSource:
    """Remove non-ASCII bytes, comments and blank lines.

    ``line_map`` maps each kept line (0-based) to its 0-based line number in
    the original source. Comment markers inside string literals are left
    alone; a ``/*`` without a closing ``*/`` raises LexError naming the
    (0-based) line where it opened.
    """
    if isinstance(raw, str):
        raw = raw.encode("utf-8", errors="surrogatepass")
    ascii_text = raw.decode("ascii", errors="ignore")
    ascii_text = ascii_text.replace("\r\n", "\n").replace("\r", "\n")
    stripped = _strip_comments(ascii_text)
    kept: list[str] = []
    line_map: dict[int, int] = {}
    for orig, line in enumerate(stripped.split("\n")):
        line = line.rstrip()
        if line.strip():
            line_map[len(kept)] = orig
            kept.append(line)
    return CleanSource(text="\n".join(kept), line_map=line_map)


# --------------------------------------------------------------------------
# Statement splitting and slicing
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Statement:
    text: str
    line: int  # original line of the first character
    end: str  # ";", "{", "}" or "" for an unterminated tail


_CALL_OPTIONS_RE = re.compile(r"\{\s*(?:value|gas|salt)\s*:")


def split_statements(clean: CleanSource) -> list[Statement]:
    """Split cleaned source into logical statements.

    A statement ends at ``;`` (outside parentheses), at ``{`` (a block
    header) or is a lone ``}``. Physical lines of one statement are joined
    with single spaces. Call-option braces like ``.call{value: x}`` stay
    inside their statement.
    """
    text = clean.text
    out: list[Statement] = []
    buf: list[str] = []
    buf_line: int | None = None
    line = 0
    depth = 0  # ( and [
    option_depth = 0
    quote = None

    def flush(end: str, closer: str = "") -> None:
        nonlocal buf, buf_line
        raw = "".join(buf) + closer
        joined = " ".join(p.strip() for p in raw.split("\n") if p.strip())
        if joined:
            out.append(Statement(joined, clean.line_map.get(buf_line, 0), end))
        buf = []
        buf_line = None

    i, n = 0, len(text)
    while i < n:
        ch = text[i]
        if ch == "\n":
            line += 1
            buf.append(ch)
            quote = None
            i += 1
            continue
        if buf_line is None and not ch.isspace():
            buf_line = line
        if quote:
            buf.append(ch)
            if ch == "\\" and i + 1 < n and text[i + 1] != "\n":
                buf.append(text[i + 1])
                i += 2
                continue
            if ch == quote:
                quote = None
            i += 1
            continue
        if ch in "\"'":
            quote = ch
        elif ch in "([":
            depth += 1
        elif ch in ")]":
            depth = max(0, depth - 1)
        elif ch == "{":
            if depth > 0 or option_depth > 0 or _CALL_OPTIONS_RE.match(text, i):
                option_depth += depth == 0
            else:
                flush("{", "{")
                i += 1
                continue
        elif ch == "}":
            if option_depth > 0 and depth == 0:
                option_depth -= 1
            elif depth == 0:
                flush("", "")
                buf_line = line
                buf.append("}")
                flush("}")
                i += 1
                continue
        elif ch == ";" and depth == 0 and option_depth == 0:
            flush(";", ";")
            i += 1
            continue
        buf.append(ch)
        i += 1
    flush("")
    return out


ANCHOR_PATTERNS = (
    re.compile(r"\.\s*call\s*\.\s*value\s*\("),
    re.compile(r"\.\s*call\s*\{\s*value\s*:"),
    re.compile(r"\.\s*send\s*\("),
    re.compile(r"\.\s*transfer\s*\("),
    re.compile(r"\.\s*call\s*\("),
)

_STRING_BODY_RE = re.compile(r""""(?:[^"\\]|\\.)*"|'(?:[^'\\]|\\.)*'""")
_CONTRACT_HEADER_RE = re.compile(r"^(?:abstract\s+)?(?:contract|interface|library)\b")
_FUNCTION_HEADER_RE = re.compile(r"^(?:function|constructor|fallback|receive|modifier)\b")
_NOT_STATE_VAR_RE = re.compile(
    r"^(?:function|event|error|using|modifier|constructor|fallback|receive|struct|enum|type|pragma|import)\b"
)


def is_anchor(statement: str) -> bool:
    """True if the statement performs an external call that moves control."""
    blanked = _STRING_BODY_RE.sub('""', statement)
    return any(p.search(blanked) for p in ANCHOR_PATTERNS)


def _identifiers(statement: str) -> list[str]:
    """Identifiers not in member position (``a.b`` yields only ``a``)."""
    names = []
    prev = None
    for lx in lex(statement):
        if lx.kind == "ident" and not (prev is not None and prev.text == "."):
            names.append(lx.text)
        prev = lx
    return names


def declared_name(statement: str) -> str | None:
    """Name declared by a state-variable declaration statement."""
    body = statement.rstrip(";")
    lexemes = list(lex(body))
    depth = 0
    cut = len(lexemes)
    for idx, lx in enumerate(lexemes):
        if lx.text in ("(", "["):
            depth += 1
        elif lx.text in (")", "]"):
            depth -= 1
        elif lx.text == "=" and depth == 0:
            cut = idx
            break
    idents = [lx.text for lx in lexemes[:cut] if lx.kind == "ident"]
    if len(idents) < 2:
        return None
    return idents[-1]


@dataclass(frozen=True)
class ContractSnippet:
    contract_id: str
    statements: tuple[str, ...]
    anchor_index: int
    origin_lines: tuple[int, ...]

    @property
    def anchor(self) -> str:
        return self.statements[self.anchor_index]

    @property
    def anchor_line(self) -> int:
        return self.origin_lines[self.anchor_index]


@dataclass
class _Frame:
    kind: str  # contract | function | block
    function: int | None  # index of the enclosing function, if any


def extract_snippets(clean: CleanSource, contract_id: str = "") -> list[ContractSnippet]:
    """One snippet per external-call statement.

    A snippet holds, in source order, every statement of the enclosing
    function (signature through closing brace) plus the declarations of
    contract-level state variables that the function mentions. An anchor
    outside any function yields the anchor plus the state variables it
    mentions.
    """
    statements = split_statements(clean)
    stack: list[_Frame] = []
    owner: list[int | None] = []  # function index per statement
    functions: list[list[int]] = []
    state_vars: dict[str, int] = {}

    for idx, st in enumerate(statements):
        enclosing = stack[-1].function if stack else None
        if st.end == "{":
            if enclosing is not None:
                stack.append(_Frame("block", enclosing))
            elif _CONTRACT_HEADER_RE.match(st.text):
                stack.append(_Frame("contract", None))
            elif _FUNCTION_HEADER_RE.match(st.text):
                functions.append([])
                enclosing = len(functions) - 1
                stack.append(_Frame("function", enclosing))
            else:
                stack.append(_Frame("block", None))
        elif st.end == "}":
            if stack:
                stack.pop()
        elif enclosing is None and stack and stack[-1].kind == "contract":
            if not _NOT_STATE_VAR_RE.match(st.text):
                name = declared_name(st.text)
                if name is not None:
                    state_vars.setdefault(name, idx)
        owner.append(enclosing)
        if enclosing is not None:
            functions[enclosing].append(idx)

    snippets = []
    for idx, st in enumerate(statements):
        if not is_anchor(st.text):
            continue
        fn = owner[idx]
        members = set(functions[fn]) if fn is not None else {idx}
        mentioned = set()
        for m in members:
            mentioned.update(_identifiers(statements[m].text))
        members.update(state_vars[name] for name in mentioned if name in state_vars)
        order = sorted(members)
        snippets.append(
            ContractSnippet(
                contract_id=contract_id,
                statements=tuple(statements[m].text for m in order),
                anchor_index=order.index(idx),
                origin_lines=tuple(statements[m].line for m in order),
            )
        )
    return snippets


# --------------------------------------------------------------------------
# Symbolization and tokenization
# --------------------------------------------------------------------------


@dataclass
class SymbolMap:
    var_map: dict[str, str] = field(default_factory=dict)
    fun_map: dict[str, str] = field(default_factory=dict)

    def lookup(self, name: str) -> str | None:
        return self.var_map.get(name) or self.fun_map.get(name)


def symbolize(snippet: ContractSnippet) -> tuple[ContractSnippet, SymbolMap]:
    """Rename user-defined identifiers to VAR<i> / FUN<i>.

    An identifier is a function if it follows ``function``/``modifier`` or
    is immediately called; everything else user-defined is a variable. The
    class is fixed at first occurrence, numbering is by first occurrence
    within the snippet and starts at 1 for each class.
    """
    symbols = SymbolMap()
    out = []
    for statement in snippet.statements:
        lexemes = list(lex(statement))
        pieces = []
        last = 0
        for pos, lx in enumerate(lexemes):
            if lx.kind != "ident" or lx.text in RESERVED:
                continue
            name = symbols.lookup(lx.text)
            if name is None:
                prev = lexemes[pos - 1].text if pos > 0 else None
                nxt = lexemes[pos + 1].text if pos + 1 < len(lexemes) else None
                if prev in ("function", "modifier") or nxt == "(":
                    name = f"FUN{len(symbols.fun_map) + 1}"
                    symbols.fun_map[lx.text] = name
                else:
                    name = f"VAR{len(symbols.var_map) + 1}"
                    symbols.var_map[lx.text] = name
            pieces.append(statement[last : lx.start])
            pieces.append(name)
            last = lx.start + len(lx.text)
        pieces.append(statement[last:])
        out.append("".join(pieces))
    return replace(snippet, statements=tuple(out)), symbols


@dataclass(frozen=True)
class TokenSequence:
    contract_id: str
    tokens: tuple[str, ...]
    anchor_line: int | None = None

    def __len__(self) -> int:
        return len(self.tokens)


def tokenize_statement(statement: str, line: int | None = None) -> list[str]:
    tokens = []
    for lx in lex(statement, line=line):
        if lx.kind == "number":
            tokens.append("NUM")
        elif lx.kind == "string":
            tokens.append("STR")
        else:
            tokens.append(lx.text)
    return tokens


def tokenize(snippet: ContractSnippet) -> TokenSequence:
    tokens: list[str] = []
    for statement, line in zip(snippet.statements, snippet.origin_lines):
        tokens.extend(tokenize_statement(statement, line=line))
    return TokenSequence(snippet.contract_id, tuple(tokens), snippet.anchor_line)


def preprocess_source(raw: bytes | str, contract_id: str = "") -> list[TokenSequence]:
    """clean -> extract -> symbolize -> tokenize for one contract."""
    clean = clean_source(raw)
    return [tokenize(symbolize(s)[0]) for s in extract_snippets(clean, contract_id)]


# --------------------------------------------------------------------------
# Snippet interchange records
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SnippetRecord:
    """One line of the snippet file passed between pipeline stages."""

    contract_id: str
    tokens: tuple[str, ...]
    anchor_line: int
    label: int
    index: int = 0  # position among the contract's snippets

    @property
    def id(self) -> str:
        return f"{self.contract_id}#{self.index}"

    def to_json(self) -> dict:
        return {
            "contract_id": self.contract_id,
            "tokens": list(self.tokens),
            "anchor_line": self.anchor_line,
            "label": self.label,
        }


def snippet_records(contract_id: str, raw: bytes | str, label: int) -> list[SnippetRecord]:
    return [
        SnippetRecord(contract_id, seq.tokens, seq.anchor_line, label, k)
        for k, seq in enumerate(preprocess_source(raw, contract_id))
    ]


def read_snippet_records(lines) -> list[SnippetRecord]:
    """Parse snippet-file lines, numbering snippets within each contract."""
    out = []
    seen: dict[str, int] = {}
    for line_no, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            doc = json.loads(line)
            cid = str(doc["contract_id"])
            tokens = tuple(str(t) for t in doc["tokens"])
            label = doc["label"]
            anchor_line = int(doc["anchor_line"])
        except (ValueError, KeyError, TypeError) as exc:
            raise ValidationError(f"snippet line {line_no} is malformed ({exc})") from None
        if isinstance(label, bool) or label not in (0, 1):
            raise ValidationError(f"snippet line {line_no}: label must be 0 or 1")
        index = seen.get(cid, 0)
        seen[cid] = index + 1
        out.append(SnippetRecord(cid, tokens, anchor_line, label, index))
    return out
