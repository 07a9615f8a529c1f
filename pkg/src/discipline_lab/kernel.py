"""Kernel imperative object language: syntax tree, parser, printer.

The grammar is documented in ``docs/kernel.ebnf``.  Commands are statements
typed flow-sensitively (``env |- C -| env'``); expressions are restricted to
variables and calls.  Inner ``let`` binders that shadow an enclosing binder
are renamed at parse time to ``name#n`` so every checker sees distinct names.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterator

from .diagnostics import Span


class Qualifier(str, Enum):
    ISOLATED = "isolated"
    READABLE = "readable"
    WRITABLE = "writable"
    IMMUTABLE = "immutable"

    def __str__(self) -> str:
        return self.value


QUALIFIERS = tuple(q.value for q in Qualifier)


@dataclass(frozen=True)
class QualType:
    qual: Qualifier
    cls: str

    def __str__(self) -> str:
        return f"{self.qual.value} {self.cls}"


# ---------------------------------------------------------------------------
# Commands


def _span() -> Span | None:
    return field(default=None, compare=False, repr=False)


@dataclass(frozen=True)
class Command:
    pass


@dataclass(frozen=True)
class Skip(Command):
    span: Span | None = _span()


@dataclass(frozen=True)
class VarAssign(Command):
    target: str
    source: str
    span: Span | None = _span()


@dataclass(frozen=True)
class FieldRead(Command):
    target: str
    base: str
    field: str
    span: Span | None = _span()


@dataclass(frozen=True)
class FieldWrite(Command):
    base: str
    field: str
    source: str
    span: Span | None = _span()


@dataclass(frozen=True)
class Alloc(Command):
    target: str
    cls: str
    span: Span | None = _span()


@dataclass(frozen=True)
class Let(Command):
    name: str
    qual: Qualifier
    cls: str
    body: Command
    span: Span | None = _span()


@dataclass(frozen=True)
class Seq(Command):
    first: Command
    second: Command
    span: Span | None = _span()


@dataclass(frozen=True)
class Par(Command):
    left: Command
    right: Command
    span: Span | None = _span()


@dataclass(frozen=True)
class Recover(Command):
    name: str
    body: Command
    span: Span | None = _span()


@dataclass(frozen=True)
class Call(Command):
    """``target = receiver.method(args)``; target and receiver are optional."""

    target: str | None
    receiver: str | None
    method: str
    args: tuple[str, ...] = ()
    span: Span | None = _span()


@dataclass(frozen=True)
class Spawn(Command):
    body: Command
    span: Span | None = _span()


@dataclass(frozen=True)
class AsyncUi(Command):
    body: Command
    span: Span | None = _span()


def seq(*cmds: Command) -> Command:
    """Right-nested sequence; the canonical shape produced by the parser."""
    flat: list[Command] = []
    for c in cmds:
        flat.extend(iter_seq(c))
    if not flat:
        return Skip()
    out = flat[-1]
    for c in reversed(flat[:-1]):
        out = Seq(c, out)
    return out


def iter_seq(c: Command) -> Iterator[Command]:
    while isinstance(c, Seq):
        yield from iter_seq(c.first)
        c = c.second
    yield c


# ---------------------------------------------------------------------------
# Declarations


@dataclass(frozen=True)
class FieldDecl:
    name: str
    qual: Qualifier
    cls: str


@dataclass(frozen=True)
class Param:
    name: str
    qual: Qualifier
    cls: str

    @property
    def type(self) -> QualType:
        return QualType(self.qual, self.cls)


@dataclass(frozen=True)
class MethodDecl:
    name: str
    params: tuple[Param, ...]
    ret: QualType | None  # None is unit
    body: Command
    ret_var: str | None = None
    effect: str | None = None  # "ui" | "safe" | None (defaulted per class)
    receiver: Qualifier | None = None  # None for top-level functions
    span: Span | None = _span()


@dataclass(frozen=True)
class ClassDecl:
    name: str
    fields: tuple[FieldDecl, ...] = ()
    methods: tuple[MethodDecl, ...] = ()
    ui: bool = False
    span: Span | None = _span()

    def field_decl(self, name: str) -> FieldDecl | None:
        for f in self.fields:
            if f.name == name:
                return f
        return None

    def method(self, name: str) -> MethodDecl | None:
        for m in self.methods:
            if m.name == name:
                return m
        return None


@dataclass(frozen=True)
class Program:
    classes: tuple[ClassDecl, ...] = ()
    main: Command = Skip()
    functions: tuple[MethodDecl, ...] = ()
    file: str = field(default="<input>", compare=False)

    def cls(self, name: str) -> ClassDecl | None:
        for c in self.classes:
            if c.name == name:
                return c
        return None

    def function(self, name: str) -> MethodDecl | None:
        for f in self.functions:
            if f.name == name:
                return f
        return None

    def resolve_call(self, receiver_cls: str | None, method: str) -> tuple[ClassDecl | None, MethodDecl | None]:
        if receiver_cls is None:
            return None, self.function(method)
        c = self.cls(receiver_cls)
        return c, (c.method(method) if c else None)

    def ui_classes(self) -> frozenset[str]:
        """Classes whose instances are, or transitively reach, UI objects."""
        ui = {c.name for c in self.classes if c.ui}
        changed = True
        while changed:
            changed = False
            for c in self.classes:
                if c.name not in ui and any(f.cls in ui for f in c.fields):
                    ui.add(c.name)
                    changed = True
        return frozenset(ui)


# ---------------------------------------------------------------------------
# Free variables


def free_vars(c: Command) -> frozenset[str]:
    """Variables read or written by ``c``, excluding its own ``let`` binders."""
    match c:
        case Skip():
            return frozenset()
        case VarAssign(target=x, source=y):
            return frozenset((x, y))
        case FieldRead(target=x, base=y):
            return frozenset((x, y))
        case FieldWrite(base=x, source=y):
            return frozenset((x, y))
        case Alloc(target=x):
            return frozenset((x,))
        case Let(name=x, body=body):
            return free_vars(body) - {x}
        case Seq(first=a, second=b) | Par(left=a, right=b):
            return free_vars(a) | free_vars(b)
        case Recover(name=x, body=body):
            return free_vars(body) | {x}
        case Call(target=t, receiver=r, args=args):
            return frozenset(v for v in (t, r, *args) if v is not None)
        case Spawn(body=body) | AsyncUi(body=body):
            return free_vars(body)
    raise TypeError(f"not a command: {c!r}")


def subcommands(c: Command) -> Iterator[Command]:
    """Pre-order walk over ``c`` and every command nested in it."""
    yield c
    match c:
        case Let(body=b) | Recover(body=b) | Spawn(body=b) | AsyncUi(body=b):
            yield from subcommands(b)
        case Seq(first=a, second=b) | Par(left=a, right=b):
            yield from subcommands(a)
            yield from subcommands(b)


def let_binders(c: Command) -> list[str]:
    return [s.name for s in subcommands(c) if isinstance(s, Let)]


# ---------------------------------------------------------------------------
# Lexer


class ParseError(Exception):
    def __init__(self, message: str, line: int, column: int, expected: frozenset[str] = frozenset(), file: str = "<input>"):
        self.message = message
        self.line = line
        self.column = column
        self.expected = expected
        self.file = file
        super().__init__(self.__str__())

    def __str__(self) -> str:
        exp = f" (expected one of: {', '.join(sorted(self.expected))})" if self.expected else ""
        return f"{self.file}:{self.line}:{self.column}: {self.message}{exp}"


KEYWORDS = frozenset(
    {"class", "def", "let", "par", "recover", "spawn", "async_ui", "new", "skip", "return", "unit"}
    | set(QUALIFIERS)
)

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>[ \t\r\n]+)
  | (?P<comment>//[^\n]*|/\*.*?\*/)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*(?:\#[0-9]+)?)
  | (?P<punct>:=|[{}();,.:=@])
    """,
    re.VERBOSE | re.DOTALL,
)


@dataclass(frozen=True)
class Token:
    kind: str  # "ident" | "kw" | "punct" | "eof"
    text: str
    line: int
    col: int
    offset: int


def tokenize(source: str, file: str = "<input>") -> list[Token]:
    toks: list[Token] = []
    pos, line, line_start = 0, 1, 0
    while pos < len(source):
        m = _TOKEN_RE.match(source, pos)
        if m is None:
            raise ParseError(f"unexpected character {source[pos]!r}", line, pos - line_start + 1, file=file)
        kind = m.lastgroup
        text = m.group()
        if kind == "ident":
            toks.append(Token("kw" if text in KEYWORDS else "ident", text, line, pos - line_start + 1, pos))
        elif kind == "punct":
            toks.append(Token("punct", text, line, pos - line_start + 1, pos))
        nl = text.count("\n")
        if nl:
            line += nl
            line_start = pos + text.rindex("\n") + 1
        pos = m.end()
    toks.append(Token("eof", "<eof>", line, pos - line_start + 1, pos))
    return toks


# ---------------------------------------------------------------------------
# Parser


class _Parser:
    def __init__(self, source: str, file: str):
        self.source = source
        self.file = file
        self.toks = tokenize(source, file)
        self.i = 0
        # alpha-renaming state
        self.scopes: list[dict[str, str]] = [{}]
        self.used_names = {t.text for t in self.toks if t.kind == "ident"}
        self.rename_counter: dict[str, int] = {}

    # token helpers -------------------------------------------------------
    @property
    def tok(self) -> Token:
        return self.toks[self.i]

    def error(self, message: str, expected: set[str] | frozenset[str] = frozenset()) -> ParseError:
        t = self.tok
        return ParseError(message, t.line, t.col, frozenset(expected), self.file)

    def at(self, *texts: str) -> bool:
        return self.tok.kind in ("kw", "punct") and self.tok.text in texts

    def accept(self, text: str) -> Token | None:
        if self.at(text):
            t = self.tok
            self.i += 1
            return t
        return None

    def expect(self, text: str) -> Token:
        t = self.accept(text)
        if t is None:
            raise self.error(f"unexpected {self.tok.text!r}", {text})
        return t

    def ident(self) -> str:
        t = self.tok
        if t.kind != "ident":
            raise self.error(f"unexpected {t.text!r}", {"identifier"})
        self.i += 1
        return t.text

    def qualifier(self) -> Qualifier:
        t = self.tok
        if t.kind == "kw" and t.text in QUALIFIERS:
            self.i += 1
            return Qualifier(t.text)
        raise self.error(f"unexpected {t.text!r}", set(QUALIFIERS))

    def span_from(self, start: Token) -> Span:
        end = self.toks[self.i - 1]
        length = end.offset + len(end.text) - start.offset
        return Span(self.file, start.line, start.col, max(length, 1))

    # scope helpers -------------------------------------------------------
    def resolve(self, name: str) -> str:
        for scope in reversed(self.scopes):
            if name in scope:
                return scope[name]
        return name

    def bind(self, name: str) -> str:
        """Introduce a binder; rename it when it shadows a visible binder."""
        visible = any(name in s for s in self.scopes)
        new = name
        if visible:
            n = self.rename_counter.get(name, 0)
            while True:
                n += 1
                new = f"{name}#{n}"
                if new not in self.used_names:
                    break
            self.rename_counter[name] = n
            self.used_names.add(new)
        self.scopes[-1][name] = new
        return new

    # program -------------------------------------------------------------
    def program(self, validate: bool = True) -> Program:
        classes: list[ClassDecl] = []
        functions: list[MethodDecl] = []
        stmts: list[Command] = []
        while self.tok.kind != "eof":
            if self.at("class") or (self.tok.kind == "ident" and self.tok.text == "ui" and self._peek_text(1) == "class"):
                classes.append(self.class_decl())
            elif self.at("def", "@"):
                functions.append(self.method_decl(owner=None))
            else:
                stmts.append(self.statement_or_sugar(top_level=True))
                self.accept(";")
        prog = Program(tuple(classes), seq(*stmts) if stmts else Skip(), tuple(functions), file=self.file)
        if validate:
            _validate(prog, self.file)
        return prog

    def _peek_text(self, k: int) -> str:
        j = min(self.i + k, len(self.toks) - 1)
        return self.toks[j].text

    def class_decl(self) -> ClassDecl:
        start = self.tok
        ui = False
        if self.tok.kind == "ident" and self.tok.text == "ui":
            self.i += 1
            ui = True
        self.expect("class")
        name = self.ident()
        self.expect("{")
        fields: list[FieldDecl] = []
        methods: list[MethodDecl] = []
        while not self.at("}"):
            if self.at("def", "@"):
                methods.append(self.method_decl(owner=name))
            elif self.tok.kind == "ident":
                fname = self.ident()
                self.expect(":")
                q = self.qualifier()
                if q is Qualifier.ISOLATED:
                    raise ParseError("isolated fields are not supported", self.toks[self.i - 1].line,
                                     self.toks[self.i - 1].col, file=self.file)
                fields.append(FieldDecl(fname, q, self.ident()))
                self.expect(";")
            else:
                raise self.error(f"unexpected {self.tok.text!r}", {"def", "@", "identifier", "}"})
        self.expect("}")
        return ClassDecl(name, tuple(fields), tuple(methods), ui, self.span_from(start))

    def method_decl(self, owner: str | None) -> MethodDecl:
        start = self.tok
        effect = None
        if self.accept("@"):
            t = self.tok
            if t.text not in ("ui", "safe"):
                raise self.error(f"unknown effect annotation {t.text!r}", {"ui", "safe"})
            effect = t.text
            self.i += 1
        self.expect("def")
        receiver = None
        if self.tok.kind == "kw" and self.tok.text in QUALIFIERS:
            if owner is None:
                raise self.error("top-level functions take no receiver qualifier", {"identifier"})
            receiver = self.qualifier()
        elif owner is not None:
            receiver = Qualifier.READABLE
        name = self.ident()
        self.scopes.append({})
        if owner is not None:
            self.scopes[-1]["this"] = "this"
        self.expect("(")
        params: list[Param] = []
        if not self.at(")"):
            while True:
                pname = self.ident()
                self.expect(":")
                q = self.qualifier()
                params.append(Param(self.bind(pname), q, self.ident()))
                if not self.accept(","):
                    break
        self.expect(")")
        self.expect(":")
        if self.accept("unit"):
            ret = None
        else:
            q = self.qualifier()
            ret = QualType(q, self.ident())
        self.expect("{")
        body, ret_var = self.block_contents(allow_return=True)
        self.expect("}")
        self.scopes.pop()
        if ret is not None and ret_var is None:
            raise self.error("method with a non-unit return type must end with 'return x'", {"return"})
        if ret is None and ret_var is not None:
            raise self.error("unit method cannot return a value")
        return MethodDecl(name, tuple(params), ret, body, ret_var, effect, receiver, self.span_from(start))

    # statements ----------------------------------------------------------
    def block(self) -> Command:
        self.expect("{")
        self.scopes.append({})
        body, _ = self.block_contents(allow_return=False)
        self.scopes.pop()
        self.expect("}")
        return body

    def block_contents(self, allow_return: bool) -> tuple[Command, str | None]:
        stmts: list[Command] = []
        ret_var = None
        while not self.at("}"):
            if self.at("return"):
                if not allow_return:
                    raise self.error("'return' is only allowed at the end of a method body")
                self.i += 1
                ret_var = self.resolve(self.ident())
                self.accept(";")
                if not self.at("}"):
                    raise self.error("'return' must be the last statement", {"}"})
                break
            stmts.append(self.statement_or_sugar(top_level=False))
            self.accept(";")
        return seq(*stmts) if stmts else Skip(), ret_var

    def statement_or_sugar(self, top_level: bool) -> Command:
        """A statement; ``let x : q C;`` scopes over the rest of the block."""
        if self.at("let"):
            start = self.tok
            self.i += 1
            name = self.ident()
            self.expect(":")
            q = self.qualifier()
            cls = self.ident()
            if self.at("{"):
                self.expect("{")
                self.scopes.append({})
                new = self.bind(name)
                body, _ = self.block_contents(allow_return=False)
                self.scopes.pop()
                self.expect("}")
                return Let(new, q, cls, body, self.span_from(start))
            if self.accept(";"):
                span = self.span_from(start)
                self.scopes.append({})
                new = self.bind(name)
                rest: list[Command] = []
                while not (self.tok.kind == "eof" or self.at("}", "return")):
                    rest.append(self.statement_or_sugar(top_level))
                    self.accept(";")
                self.scopes.pop()
                return Let(new, q, cls, seq(*rest) if rest else Skip(), span)
            raise self.error(f"unexpected {self.tok.text!r}", {"{", ";"})
        return self.statement()

    def statement(self) -> Command:
        start = self.tok
        if self.accept("skip"):
            return Skip(self.span_from(start))
        if self.accept("par"):
            left = self.block()
            right = self.block()
            return Par(left, right, self.span_from(start))
        if self.accept("recover"):
            name = self.resolve(self.ident())
            body = self.block()
            if name not in free_vars(body):
                raise ParseError(f"recovered variable {name!r} does not occur in the block",
                                 start.line, start.col, file=self.file)
            return Recover(name, body, self.span_from(start))
        if self.accept("spawn"):
            return Spawn(self.block(), self.span_from(start))
        if self.accept("async_ui"):
            return AsyncUi(self.block(), self.span_from(start))
        if self.tok.kind != "ident":
            raise self.error(f"unexpected {self.tok.text!r}",
                             {"skip", "let", "par", "recover", "spawn", "async_ui", "identifier"})
        raw = self.ident()
        if self.accept("("):
            args = self.args()
            return Call(None, None, raw, args, self.span_from(start))
        first = self.resolve(raw)
        if self.accept("."):
            member = self.ident()
            if self.accept(":="):
                src = self.resolve(self.ident())
                return FieldWrite(first, member, src, self.span_from(start))
            if self.accept("("):
                args = self.args()
                return Call(None, first, member, args, self.span_from(start))
            raise self.error(f"unexpected {self.tok.text!r}", {":=", "("})
        if self.accept("="):
            return self.rhs(first, start)
        raise self.error(f"unexpected {self.tok.text!r}", {"=", ".", "("})

    def args(self) -> tuple[str, ...]:
        out: list[str] = []
        if not self.at(")"):
            while True:
                out.append(self.resolve(self.ident()))
                if not self.accept(","):
                    break
        self.expect(")")
        return tuple(out)

    def rhs(self, target: str, start: Token) -> Command:
        if self.accept("new"):
            cls = self.ident()
            self.expect("(")
            self.expect(")")
            return Alloc(target, cls, self.span_from(start))
        name = self.ident()
        if self.accept("("):
            return Call(target, None, name, self.args(), self.span_from(start))
        name = self.resolve(name)
        if self.accept("."):
            member = self.ident()
            if self.accept("("):
                return Call(target, name, member, self.args(), self.span_from(start))
            return FieldRead(target, name, member, self.span_from(start))
        return VarAssign(target, name, self.span_from(start))


def _validate(p: Program, file: str) -> None:
    """Program invariants: unique names, resolvable class references."""

    def fail(msg: str, span: Span | None) -> ParseError:
        return ParseError(msg, span.line if span else 1, span.column if span else 1, file=file)

    names = set()
    for c in p.classes:
        if c.name in names:
            raise fail(f"duplicate class {c.name!r}", c.span)
        names.add(c.name)
    fnames = set()
    for fn in p.functions:
        if fn.name in fnames:
            raise fail(f"duplicate function {fn.name!r}", fn.span)
        fnames.add(fn.name)

    def need(cls: str, span: Span | None) -> None:
        if cls not in names:
            raise fail(f"unknown class {cls!r}", span)

    def check_cmd(c: Command) -> None:
        for s in subcommands(c):
            if isinstance(s, Alloc):
                need(s.cls, s.span)
            elif isinstance(s, Let):
                need(s.cls, s.span)

    def check_method(m: MethodDecl) -> None:
        for prm in m.params:
            need(prm.cls, m.span)
        if m.ret is not None:
            need(m.ret.cls, m.span)
        check_cmd(m.body)

    for c in p.classes:
        seen = set()
        for f in c.fields:
            if f.name in seen:
                raise fail(f"duplicate field {f.name!r} in class {c.name!r}", c.span)
            seen.add(f.name)
            need(f.cls, c.span)
        mseen = set()
        for m in c.methods:
            if m.name in mseen:
                raise fail(f"duplicate method {m.name!r} in class {c.name!r}", m.span)
            mseen.add(m.name)
            check_method(m)
    for fn in p.functions:
        check_method(fn)
    check_cmd(p.main)


def parse(source: str, file: str = "<input>") -> Program:
    """Parse a kernel-language source text into a :class:`Program`."""
    return _Parser(source, file).program()


def parse_command(source: str, file: str = "<input>") -> Command:
    """Parse a bare command sequence (no declarations, so classes are not resolved)."""
    prog = _Parser(source, file).program(validate=False)
    if prog.classes or prog.functions:
        raise ParseError("declarations are not allowed here", 1, 1, file=file)
    return prog.main


# ---------------------------------------------------------------------------
# Printer


def print_command(c: Command) -> str:
    match c:
        case Skip():
            return "skip"
        case VarAssign(target=x, source=y):
            return f"{x} = {y}"
        case FieldRead(target=x, base=y, field=f):
            return f"{x} = {y}.{f}"
        case FieldWrite(base=x, field=f, source=y):
            return f"{x}.{f} := {y}"
        case Alloc(target=x, cls=cls):
            return f"{x} = new {cls}()"
        case Let(name=x, qual=q, cls=cls, body=body):
            return f"let {x} : {q.value} {cls} {_block(body)}"
        case Seq():
            return "; ".join(print_command(s) for s in iter_seq(c))
        case Par(left=a, right=b):
            return f"par {_block(a)} {_block(b)}"
        case Recover(name=x, body=body):
            return f"recover {x} {_block(body)}"
        case Call(target=t, receiver=r, method=m, args=args):
            callee = f"{r}.{m}" if r is not None else m
            text = f"{callee}({', '.join(args)})"
            return f"{t} = {text}" if t is not None else text
        case Spawn(body=body):
            return f"spawn {_block(body)}"
        case AsyncUi(body=body):
            return f"async_ui {_block(body)}"
    raise TypeError(f"not a command: {c!r}")


def _block(c: Command) -> str:
    return "{ " + print_command(c) + " }"


def _print_method(m: MethodDecl) -> str:
    ann = f"@{m.effect} " if m.effect else ""
    recv = f"{m.receiver.value} " if m.receiver is not None else ""
    params = ", ".join(f"{p.name} : {p.qual.value} {p.cls}" for p in m.params)
    ret = "unit" if m.ret is None else str(m.ret)
    if m.ret_var is not None:
        inner = f"return {m.ret_var}" if isinstance(m.body, Skip) else f"{print_command(m.body)}; return {m.ret_var}"
    else:
        inner = print_command(m.body)
    return f"{ann}def {recv}{m.name}({params}) : {ret} {{ {inner} }}"


def print_program(p: Program) -> str:
    """Canonical text; ``parse(print_program(p)) == p`` for parsed programs."""
    lines: list[str] = []
    for c in p.classes:
        head = ("ui " if c.ui else "") + f"class {c.name} {{"
        members = [f"  {f.name} : {f.qual.value} {f.cls};" for f in c.fields]
        members += [f"  {_print_method(m)}" for m in c.methods]
        if members:
            lines.append(head)
            lines.extend(members)
            lines.append("}")
        else:
            lines.append(head + " }")
    for fn in p.functions:
        lines.append(_print_method(fn))
    if not (isinstance(p.main, Skip) and (p.classes or p.functions)):
        lines.extend(print_command(s) for s in iter_seq(p.main))
    return "\n".join(lines) + "\n"
