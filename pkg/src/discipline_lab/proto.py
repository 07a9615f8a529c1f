"""Fixed object layout for a prototype-based object calculus.

Object types split fields into ``r`` (present somewhere, possibly inherited,
safe to read) and ``w`` (definitely local, safe to write).  Prototypal types
additionally carry the method-accessed rows ``mr`` and ``mw``: a single
bound on what any method of the object may read or write.  ``concretize``
checks that bound against the physical rows once and yields a concrete
(NC) type, on which any visible method may be invoked.

The effect variant instead annotates each method with the set of receiver
fields it writes and checks that set at every call.  It is kept as a
contrast: it breaks down as soon as two implementations are joined.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Union

from .diagnostics import Diagnostic, Span, note, reject

# ---------------------------------------------------------------------------
# types


@dataclass(frozen=True)
class NumberT:
    def __str__(self) -> str:
        return "number"


@dataclass(frozen=True)
class UnitT:
    """Return type of methods without a value; never a field type."""

    def __str__(self) -> str:
        return "()"


@dataclass(frozen=True)
class MethodT:
    params: tuple["FieldType", ...] = ()
    ret: "FieldType" = UnitT()
    wr_eff: frozenset[str] | None = None

    def __str__(self) -> str:
        ps = "(" + ", ".join(map(str, self.params)) + ")"
        if self.wr_eff is None:
            return f"{ps}->{self.ret}"
        return f"{ps}-{{{','.join(sorted(self.wr_eff))}}}->{self.ret}"


FieldType = Union[NumberT, UnitT, MethodT]
NUMBER = NumberT()
UNIT = UnitT()


def field_subtype(a: FieldType, b: FieldType) -> bool:
    """Parameters invariant, results covariant, written sets covariant."""
    if a == b:
        return True
    if isinstance(a, MethodT) and isinstance(b, MethodT):
        if a.params != b.params or not field_subtype(a.ret, b.ret):
            return False
        if a.wr_eff is None or b.wr_eff is None:
            return a.wr_eff is None and b.wr_eff is None
        return a.wr_eff <= b.wr_eff
    return False


def field_lub(a: FieldType, b: FieldType) -> FieldType | None:
    if a == b:
        return a
    if isinstance(a, MethodT) and isinstance(b, MethodT) and a.params == b.params:
        ret = field_lub(a.ret, b.ret)
        if ret is None or (a.wr_eff is None) != (b.wr_eff is None):
            return None
        wr = None if a.wr_eff is None else a.wr_eff | b.wr_eff
        return MethodT(a.params, ret, wr)
    return None


@dataclass(frozen=True)
class Row:
    entries: tuple[tuple[str, FieldType], ...] = ()

    @classmethod
    def of(cls, mapping: Mapping[str, FieldType] | Iterable[tuple[str, FieldType]] = ()) -> "Row":
        items = dict(mapping.items() if isinstance(mapping, Mapping) else mapping)
        return cls(tuple(sorted(items.items())))

    def as_dict(self) -> dict[str, FieldType]:
        return dict(self.entries)

    def names(self) -> frozenset[str]:
        return frozenset(n for n, _ in self.entries)

    def get(self, name: str) -> FieldType | None:
        return self.as_dict().get(name)

    def __contains__(self, name: str) -> bool:
        return name in self.names()

    def __len__(self) -> int:
        return len(self.entries)

    def with_entry(self, name: str, t: FieldType) -> "Row":
        d = self.as_dict()
        d[name] = t
        return Row.of(d)

    def without(self, names: Iterable[str]) -> "Row":
        drop = set(names)
        return Row.of((n, t) for n, t in self.entries if n not in drop)

    def __str__(self) -> str:
        return ", ".join(f"{n}:{t}" for n, t in self.entries) if self.entries else "∅"


EMPTY_ROW = Row()


@dataclass(frozen=True)
class ObjType:
    r: Row = EMPTY_ROW
    w: Row = EMPTY_ROW
    macc: tuple[Row, Row] | None = None
    concrete: bool = False

    def __post_init__(self) -> None:
        if self.r.names() & self.w.names():
            raise ValueError(f"r and w overlap on {sorted(self.r.names() & self.w.names())}")
        if self.concrete and self.macc is not None:
            raise ValueError("a concrete type carries no method-accessed rows")

    @property
    def prototypal(self) -> bool:
        return self.macc is not None

    @property
    def mr(self) -> Row:
        return self.macc[0] if self.macc else EMPTY_ROW

    @property
    def mw(self) -> Row:
        return self.macc[1] if self.macc else EMPTY_ROW

    def fields(self) -> dict[str, FieldType]:
        return {**self.r.as_dict(), **self.w.as_dict()}

    def __str__(self) -> str:
        parts = [str(self.r), str(self.w)]
        if self.macc is not None:
            parts += [str(self.mr), str(self.mw)]
        return "{" + " | ".join(parts) + "}" + ("^NC" if self.concrete else "")


class ProtoError(Exception):
    """A failed type operation; ``rule`` names the diagnostic to emit."""

    def __init__(self, rule: str, message: str, names: Iterable[str] = ()):
        super().__init__(message)
        self.rule = rule
        self.names = tuple(names)


# ---------------------------------------------------------------------------
# operations on types


def check_field_write(t: ObjType, f: str) -> bool:
    return f in t.w


def check_field_read(t: ObjType, f: str) -> FieldType:
    ft = t.fields().get(f)
    if ft is None:
        raise ProtoError("ABSENT", f"field {f} is not present on {t}", [f])
    return ft


def concretize(t: ObjType) -> ObjType:
    """Certify that every method-accessed field is physically available."""
    if t.macc is None:
        raise ValueError("concretize expects a prototypal type")
    w, rw = t.w.as_dict(), t.fields()
    missing = []
    for n, ft in t.mw.entries:
        if n not in w or w[n] != ft:
            missing.append(n)
    for n, ft in t.mr.entries:
        if n not in rw or not field_subtype(rw[n], ft):
            missing.append(n)
    if missing:
        names = sorted(set(missing))
        raise ProtoError("NOT-CONCRETE", "method-accessed fields not physically available: " + ", ".join(names), names)
    return ObjType(t.r, t.w, None, True)


def _check_args(m: str, mt: MethodT, args: list[FieldType]) -> None:
    if len(args) != len(mt.params) or not all(field_subtype(a, p) for a, p in zip(args, mt.params)):
        got = "(" + ", ".join(map(str, args)) + ")"
        raise ProtoError("ARG-MISMATCH", f"{m} expects {mt} but got arguments {got}", [m])


def _method(t: ObjType, m: str) -> MethodT:
    mt = t.fields().get(m)
    if not isinstance(mt, MethodT):
        raise ProtoError("NO-SUCH-METHOD", f"{t} has no method {m}", [m])
    return mt


def check_method_call(t: ObjType, m: str, args: Iterable[FieldType] = ()) -> FieldType:
    """Invoke ``m`` on a concrete receiver; returns the result type."""
    if not t.concrete:
        raise ProtoError("NOT-CONCRETE-RECEIVER", f"receiver {t} is not known to be concrete", [m])
    mt = _method(t, m)
    _check_args(m, mt, list(args))
    return mt.ret


def check_method_call_effect(t: ObjType, m: str, args: Iterable[FieldType] = ()) -> FieldType:
    """Effect-variant call: the method's written fields must be local."""
    mt = _method(t, m)
    _check_args(m, mt, list(args))
    wr = mt.wr_eff or frozenset()
    if not wr <= t.w.names():
        missing = sorted(wr - t.w.names())
        raise ProtoError("NOT-CALLABLE", f"{m} writes {', '.join(missing)}, not local to {t}", [m])
    return mt.ret


def subtype_np(a: ObjType, b: ObjType) -> bool:
    """Width subtyping on concrete types, depth subtyping on ``r`` only."""
    if not (a.concrete and b.concrete):
        raise ValueError("subtype_np compares concrete types")
    af, aw = a.fields(), a.w.as_dict()
    for n, ft in b.r.entries:
        if n not in af or not field_subtype(af[n], ft):
            return False
    for n, ft in b.w.entries:
        if aw.get(n) != ft:
            return False
    return True


def _lub_rows(a: ObjType, b: ObjType) -> tuple[Row, Row]:
    aw, bw = a.w.as_dict(), b.w.as_dict()
    w = {n: t for n, t in aw.items() if bw.get(n) == t}
    af, bf = a.fields(), b.fields()
    r = {}
    for n in sorted(af.keys() & bf.keys()):
        if n in w:
            continue
        lub = field_lub(af[n], bf[n])
        if lub is not None:
            r[n] = lub
    return Row.of(r), Row.of(w)


def lub_nc(a: ObjType, b: ObjType) -> ObjType:
    """Least common concrete supertype."""
    if not (a.concrete and b.concrete):
        raise ValueError("lub_nc joins concrete types")
    r, w = _lub_rows(a, b)
    return ObjType(r, w, None, True)


def not_callable(t: ObjType) -> list[str]:
    """Methods whose written fields are not all local to ``t``."""
    w = t.w.names()
    return sorted(n for n, ft in t.fields().items()
                  if isinstance(ft, MethodT) and not (ft.wr_eff or frozenset()) <= w)


def lub_effect_variant(a: ObjType, b: ObjType) -> tuple[ObjType, list[str]]:
    """Width/depth join with unioned write effects, plus uncallable methods."""
    r, w = _lub_rows(a, b)
    t = ObjType(r, w, None, False)
    return t, not_callable(t)


def attach_method(t: ObjType, m: str, receiver_assumed: ObjType, sig: MethodT) -> ObjType:
    """Install ``m`` on a prototype if its demands stay within the bound."""
    if t.macc is None:
        raise ValueError("attach_method expects a prototypal type")
    bound = {**t.mr.as_dict(), **t.mw.as_dict()}
    mw = t.mw.as_dict()
    excess = [n for n, ft in receiver_assumed.r.entries if n not in bound or not field_subtype(bound[n], ft)]
    excess += [n for n, ft in receiver_assumed.w.entries if mw.get(n) != ft]
    if excess:
        names = sorted(set(excess))
        raise ProtoError("ATTACH-EXCEEDS", f"{m} accesses fields outside the prototype's bound: {', '.join(names)}", names)
    old = t.r.get(m)
    if old is not None and old != sig:
        raise ProtoError("ATTACH-SIG", f"replacing {m} : {old} with {sig}", [m])
    if m in t.w:
        raise ProtoError("PL-TYPE", f"{m} is a data field of the prototype", [m])
    return ObjType(t.r.with_entry(m, sig), t.w, t.macc, False)


# ---------------------------------------------------------------------------
# surface syntax


@dataclass(frozen=True)
class Num:
    value: int
    span: Span = field(compare=False)


@dataclass(frozen=True)
class Name:
    id: str
    span: Span = field(compare=False)


@dataclass(frozen=True)
class This:
    span: Span = field(compare=False)


@dataclass(frozen=True)
class New:
    ctor: str
    args: tuple
    span: Span = field(compare=False)


@dataclass(frozen=True)
class Get:
    obj: object
    name: str
    span: Span = field(compare=False)


@dataclass(frozen=True)
class CallE:
    obj: object | None
    name: str
    args: tuple
    span: Span = field(compare=False)


@dataclass(frozen=True)
class Incr:
    target: object
    span: Span = field(compare=False)


@dataclass(frozen=True)
class Binary:
    op: str
    left: object
    right: object
    span: Span = field(compare=False)


@dataclass(frozen=True)
class FuncExpr:
    params: tuple[str, ...]
    body: tuple
    span: Span = field(compare=False)


@dataclass(frozen=True)
class FuncDecl:
    name: str
    params: tuple[str, ...]
    body: tuple
    span: Span = field(compare=False)


@dataclass(frozen=True)
class Attach:
    ctor: str
    method: str
    fn: FuncExpr
    span: Span = field(compare=False)


@dataclass(frozen=True)
class VarDecl:
    name: str
    init: object
    span: Span = field(compare=False)


@dataclass(frozen=True)
class Assign:
    target: Get
    value: object
    span: Span = field(compare=False)


@dataclass(frozen=True)
class ExprStmt:
    expr: object
    span: Span = field(compare=False)


@dataclass(frozen=True)
class Return:
    value: object | None
    span: Span = field(compare=False)


@dataclass(frozen=True)
class ProtoProgram:
    statements: tuple
    file: str = "<input>"

    @property
    def constructors(self) -> list[FuncDecl]:
        return [s for s in self.statements if isinstance(s, FuncDecl)]


class ProtoParseError(Exception):
    def __init__(self, message: str, span: Span):
        super().__init__(f"{span.file}:{span.line}:{span.column}: {message}")
        self.message = message
        self.span = span


_TOKEN = re.compile(r"""
    (?P<ws>\s+|//[^\n]*|/\*.*?\*/)
  | (?P<num>\d+)
  | (?P<id>[A-Za-z_$][A-Za-z0-9_$]*)
  | (?P<p>\+\+|\|\||[(){}.,;=+])
""", re.VERBOSE | re.DOTALL)
_KEYWORDS = {"function", "var", "new", "this", "return"}


@dataclass(frozen=True)
class _Tok:
    kind: str
    text: str
    span: Span


def _tokenize(src: str, file: str) -> list[_Tok]:
    out, pos, line, col = [], 0, 1, 1
    while pos < len(src):
        m = _TOKEN.match(src, pos)
        if not m:
            raise ProtoParseError(f"unexpected character {src[pos]!r}", Span(file, line, col))
        text = m.group()
        if m.lastgroup != "ws":
            kind = "kw" if m.lastgroup == "id" and text in _KEYWORDS else m.lastgroup
            out.append(_Tok(kind, text, Span(file, line, col, len(text))))
        nl = text.count("\n")
        if nl:
            line += nl
            col = len(text) - text.rfind("\n")
        else:
            col += len(text)
        pos = m.end()
    out.append(_Tok("eof", "", Span(file, line, col, 0)))
    return out


class _ProtoParser:
    def __init__(self, src: str, file: str):
        self.toks = _tokenize(src, file)
        self.i = 0
        self.file = file

    @property
    def tok(self) -> _Tok:
        return self.toks[self.i]

    def at(self, *texts: str) -> bool:
        return self.tok.kind != "eof" and self.tok.text in texts

    def accept(self, text: str) -> _Tok | None:
        if self.at(text):
            t = self.tok
            self.i += 1
            return t
        return None

    def expect(self, text: str) -> _Tok:
        t = self.accept(text)
        if t is None:
            shown = self.tok.text or "end of input"
            raise ProtoParseError(f"expected {text!r}, found {shown!r}", self.tok.span)
        return t

    def ident(self) -> str:
        if self.tok.kind != "id":
            raise ProtoParseError(f"expected an identifier, found {self.tok.text or 'end of input'!r}", self.tok.span)
        t = self.tok
        self.i += 1
        return t.text

    def program(self) -> ProtoProgram:
        stmts = []
        while self.tok.kind != "eof":
            stmts.append(self.statement(top=True))
        return ProtoProgram(tuple(stmts), self.file)

    def params(self) -> tuple[str, ...]:
        self.expect("(")
        ps: list[str] = []
        if not self.at(")"):
            ps.append(self.ident())
            while self.accept(","):
                ps.append(self.ident())
        self.expect(")")
        return tuple(ps)

    def body(self) -> tuple:
        self.expect("{")
        stmts = []
        while not self.at("}"):
            if self.tok.kind == "eof":
                raise ProtoParseError("unterminated function body", self.tok.span)
            stmts.append(self.statement(top=False))
        self.expect("}")
        return tuple(stmts)

    def statement(self, top: bool):
        start = self.tok.span
        if self.at("function"):
            if not top:
                raise ProtoParseError("nested function declarations are not supported", start)
            self.i += 1
            name = self.ident()
            ps = self.params()
            return FuncDecl(name, ps, self.body(), start)
        if self.accept("var"):
            name = self.ident()
            self.expect("=")
            init = self.expr()
            self.accept(";")
            return VarDecl(name, init, start)
        if self.accept("return"):
            if top:
                raise ProtoParseError("return outside a function", start)
            value = None if self.at(";", "}") else self.expr()
            self.accept(";")
            return Return(value, start)
        e = self.expr()
        if self.accept("="):
            if not isinstance(e, Get):
                raise ProtoParseError("only field assignments are supported", start)
            if self.at("function"):
                fstart = self.tok.span
                self.i += 1
                fn = FuncExpr(self.params(), self.body(), fstart)
                self.accept(";")
                proto = e.obj
                if not (top and isinstance(proto, Get) and proto.name == "prototype" and isinstance(proto.obj, Name)):
                    raise ProtoParseError("functions may only be attached as C.prototype.m", start)
                return Attach(proto.obj.id, e.name, fn, start)
            value = self.expr()
            self.accept(";")
            return Assign(e, value, start)
        self.accept(";")
        return ExprStmt(e, start)

    def expr(self):
        left = self.additive()
        while self.at("||"):
            sp = self.tok.span
            self.i += 1
            left = Binary("||", left, self.additive(), sp)
        return left

    def additive(self):
        left = self.postfix()
        while self.at("+"):
            sp = self.tok.span
            self.i += 1
            left = Binary("+", left, self.postfix(), sp)
        return left

    def args(self) -> tuple:
        self.expect("(")
        out = []
        if not self.at(")"):
            out.append(self.expr())
            while self.accept(","):
                out.append(self.expr())
        self.expect(")")
        return tuple(out)

    def postfix(self):
        e = self.primary()
        while True:
            if self.at("."):
                self.i += 1
                name = self.ident()
                e = CallE(e, name, self.args(), _span_of(e)) if self.at("(") else Get(e, name, _span_of(e))
            elif self.at("++"):
                if not isinstance(e, Get):
                    raise ProtoParseError("'++' applies to field accesses only", self.tok.span)
                self.i += 1
                return Incr(e, _span_of(e))
            else:
                return e

    def primary(self):
        t = self.tok
        if t.kind == "num":
            self.i += 1
            return Num(int(t.text), t.span)
        if self.accept("this"):
            return This(t.span)
        if self.accept("new"):
            ctor = self.ident()
            return New(ctor, self.args(), t.span)
        if self.accept("("):
            e = self.expr()
            self.expect(")")
            return e
        if t.kind == "id":
            self.i += 1
            if self.at("("):
                return CallE(None, t.text, self.args(), t.span)
            return Name(t.text, t.span)
        raise ProtoParseError(f"unexpected {t.text or 'end of input'!r}", t.span)


def _span_of(e) -> Span:
    return e.span


def parse_proto(source: str, file: str = "<input>") -> ProtoProgram:
    return _ProtoParser(source, file).program()


# ---------------------------------------------------------------------------
# method analysis


@dataclass
class MethodInfo:
    """What one attached function demands of its receiver."""

    attach: Attach
    reads: set[str] = field(default_factory=set)
    writes: set[str] = field(default_factory=set)
    calls: set[str] = field(default_factory=set)
    escapes: list[Span] = field(default_factory=list)
    errors: list[Diagnostic] = field(default_factory=list)
    ret: FieldType | None = None
    sig: MethodT | None = None
    all_reads: set[str] = field(default_factory=set)
    all_writes: set[str] = field(default_factory=set)


def _scan(info: MethodInfo, node, parent_is_member: bool = False) -> None:
    """Collect direct receiver accesses and escapes of ``this``."""
    match node:
        case This(span=sp):
            if not parent_is_member:
                info.escapes.append(sp)
        case Get(obj=This(), name=f):
            info.reads.add(f)
        case CallE(obj=This(), name=m, args=args):
            info.calls.add(m)
            for a in args:
                _scan(info, a)
        case Incr(target=Get(obj=This(), name=f)):
            info.reads.add(f)
            info.writes.add(f)
        case Assign(target=Get(obj=This(), name=f), value=v):
            info.writes.add(f)
            _scan(info, v)
        case Get(obj=o) | Incr(target=Get(obj=o)):
            _scan(info, o)
        case Assign(target=t, value=v):
            _scan(info, t)
            _scan(info, v)
        case CallE(obj=o, args=args):
            if o is not None:
                _scan(info, o)
            for a in args:
                _scan(info, a)
        case Binary(left=a, right=b):
            _scan(info, a)
            _scan(info, b)
        case New(args=args):
            for a in args:
                _scan(info, a)
        case VarDecl(init=e) | ExprStmt(expr=e):
            _scan(info, e)
        case Return(value=v):
            if v is not None:
                _scan(info, v)


class _BodyTyper:
    """Types method and constructor bodies; all parameters are numbers."""

    def __init__(self, methods: Mapping[str, MethodInfo], errors: list[Diagnostic], what: str):
        self.methods = methods
        self.errors = errors
        self.what = what

    def err(self, rule: str, sp: Span, msg: str) -> None:
        self.errors.append(reject(rule, sp, msg))

    def expr(self, e, local: dict[str, FieldType]) -> FieldType | None:
        """Type of ``e``; ``None`` means not yet known (or already reported)."""
        match e:
            case Num():
                return NUMBER
            case Name(id=x, span=sp):
                if x not in local:
                    self.err("PL-UNBOUND", sp, f"{x} is not bound in {self.what}")
                    return None
                return local[x]
            case This():
                return None  # escape, reported by the scan
            case Get(obj=This(), name=f):
                info = self.methods.get(f)
                return info.sig if info is not None else NUMBER
            case CallE(obj=This(), name=m, args=args, span=sp):
                for a in args:
                    self.expr(a, local)
                info = self.methods.get(m)
                if info is None:
                    self.err("PL-UNBOUND", sp, f"this.{m} is never attached to the prototype")
                    return None
                if info.sig is not None and len(args) != len(info.sig.params):
                    self.err("ARG-MISMATCH", sp, f"{m} expects {len(info.sig.params)} arguments")
                return info.ret
            case Incr(target=Get(obj=This(), name=f), span=sp):
                if f in self.methods:
                    self.err("PL-TYPE", sp, f"cannot increment method {f}")
                return NUMBER
            case Binary(op="+", left=a, right=b, span=sp):
                ta, tb = self.expr(a, local), self.expr(b, local)
                if (ta is not None and ta != NUMBER) or (tb is not None and tb != NUMBER):
                    self.err("PL-TYPE", sp, "'+' needs numbers")
                return NUMBER
            case _:
                self.err("PL-TYPE", e.span, f"unsupported expression in {self.what}")
                return None

    def body(self, stmts: tuple, params: tuple[str, ...]) -> tuple[FieldType | None, bool]:
        """Returns (result type, all returns known)."""
        local: dict[str, FieldType] = {p: NUMBER for p in params}
        rets: list[FieldType | None] = []
        for s in stmts:
            match s:
                case VarDecl(name=x, init=e):
                    t = self.expr(e, local)
                    local[x] = t if t is not None else NUMBER
                case Assign(target=Get(obj=This(), name=f), value=v, span=sp):
                    t = self.expr(v, local)
                    if f in self.methods:
                        self.err("PL-TYPE", sp, f"method bodies cannot overwrite method {f}")
                    elif t is not None and t != NUMBER:
                        self.err("PL-TYPE", sp, f"this.{f} must hold a number")
                case ExprStmt(expr=e):
                    self.expr(e, local)
                case Return(value=v):
                    rets.append(UNIT if v is None else self.expr(v, local))
                case _:
                    self.err("PL-TYPE", s.span, f"unsupported statement in {self.what}")
        if not rets:
            return UNIT, True
        if any(r is None for r in rets):
            return None, False
        if len(set(rets)) > 1:
            self.err("PL-TYPE", stmts[-1].span, f"inconsistent return types in {self.what}")
        return rets[0], True


def analyze_methods(attaches: list[Attach], effect_variant: bool = False) -> tuple[dict[int, MethodInfo], list[Diagnostic]]:
    """Signatures and transitive receiver demands of one prototype's methods.

    ``this.m()`` resolves to the first attachment of ``m``.  Demands close
    over every attachment of each called name.
    """
    infos = {i: MethodInfo(a) for i, a in enumerate(attaches)}
    for info in infos.values():
        for s in info.attach.fn.body:
            _scan(info, s)
    by_name: dict[str, MethodInfo] = {}
    all_by_name: dict[str, list[MethodInfo]] = {}
    for info in infos.values():
        by_name.setdefault(info.attach.method, info)
        all_by_name.setdefault(info.attach.method, []).append(info)

    # transitive demands
    for info in infos.values():
        info.all_reads, info.all_writes = set(info.reads), set(info.writes)
        info.all_reads |= info.calls
    changed = True
    while changed:
        changed = False
        for info in infos.values():
            for m in list(info.calls):
                for callee in all_by_name.get(m, []):
                    r = info.all_reads | callee.all_reads
                    w = info.all_writes | callee.all_writes
                    if r != info.all_reads or w != info.all_writes:
                        info.all_reads, info.all_writes = r, w
                        changed = True

    def make_sig(info: MethodInfo) -> MethodT:
        params = (NUMBER,) * len(info.attach.fn.params)
        wr = frozenset(info.all_writes) if effect_variant else None
        return MethodT(params, info.ret if info.ret is not None else UNIT, wr)

    # return types: iterate to a fixpoint, silencing errors until the last pass
    for _ in range(len(infos) + 1):
        changed = False
        for info in infos.values():
            info.sig = make_sig(info)
        for info in infos.values():
            ret, _known = _BodyTyper(by_name, [], "a method body").body(info.attach.fn.body, info.attach.fn.params)
            if ret != info.ret:
                info.ret = ret
                changed = True
        if not changed:
            break
    diags: list[Diagnostic] = []
    for info in infos.values():
        info.sig = make_sig(info)
    for info in infos.values():
        errs: list[Diagnostic] = []
        ret, known = _BodyTyper(by_name, errs, "a method body").body(info.attach.fn.body, info.attach.fn.params)
        if not known and not errs:
            errs.append(reject("PL-TYPE", info.attach.span, f"cannot infer the result type of {info.attach.method}"))
        for sp in info.escapes:
            errs.append(reject("ESCAPE", sp, f"{info.attach.method} lets the receiver escape"))
        info.errors = errs
        diags.extend(errs)
    return infos, diags


# ---------------------------------------------------------------------------
# whole programs


@dataclass
class _Proto:
    ctor: FuncDecl
    fields: Row
    methods: Row = EMPTY_ROW
    bound_r: dict[str, FieldType] = field(default_factory=dict)
    bound_w: dict[str, FieldType] = field(default_factory=dict)
    frozen: bool = False
    infos: dict[int, MethodInfo] = field(default_factory=dict)

    def macc(self) -> tuple[Row, Row]:
        mr = {n: t for n, t in self.bound_r.items() if n not in self.bound_w}
        return Row.of(mr), Row.of(self.bound_w)

    def proto_type(self, effect_variant: bool) -> ObjType:
        if effect_variant:
            return ObjType(self.methods, EMPTY_ROW, None, False)
        return ObjType(self.methods, EMPTY_ROW, self.macc(), False)

    def instance_type(self, effect_variant: bool) -> ObjType:
        r = self.methods.without(self.fields.names())
        if effect_variant:
            return ObjType(r, self.fields, None, False)
        return ObjType(r, self.fields, self.macc(), False)


@dataclass
class ProtoResult:
    diagnostics: list[Diagnostic]
    env: dict[str, object]
    prototypes: dict[str, ObjType]
    demands: dict[str, tuple[Row, Row]]

    @property
    def accepted(self) -> bool:
        return not any(d.is_reject for d in self.diagnostics)


class _ProtoChecker:
    def __init__(self, program: ProtoProgram, effect_variant: bool):
        self.program = program
        self.ev = effect_variant
        self.diags: list[Diagnostic] = []
        self.protos: dict[str, _Proto] = {}
        self.env: dict[str, object] = {}
        self.method_of: dict[int, MethodInfo] = {}
        self.demands: dict[str, tuple[Row, Row]] = {}

    def err(self, rule: str, sp: Span, msg: str) -> None:
        self.diags.append(reject(rule, sp, msg))

    def run(self) -> ProtoResult:
        attaches: dict[str, list[Attach]] = {}
        for s in self.program.statements:
            if isinstance(s, Attach):
                attaches.setdefault(s.ctor, []).append(s)
        for ctor, items in attaches.items():
            infos, diags = analyze_methods(items, self.ev)
            self.diags.extend(diags)
            for info in infos.values():
                self.method_of[id(info.attach)] = info
        for s in self.program.statements:
            self.statement(s)
        protos = {n: p.proto_type(self.ev) for n, p in self.protos.items()}
        return ProtoResult(self.diags, self.env, protos, self.demands)

    def demands_of(self, info: MethodInfo, proto: _Proto) -> tuple[Row, Row]:
        sigs: dict[str, FieldType] = {}
        for other in self.method_of.values():
            if other.attach.ctor == info.attach.ctor and other.attach.method not in sigs:
                sigs[other.attach.method] = other.sig
        writes = {f: NUMBER for f in info.all_writes}
        reads = {f: sigs.get(f, NUMBER) for f in info.all_reads}
        return Row.of(reads), Row.of(writes)

    # statements -----------------------------------------------------------
    def statement(self, s) -> None:
        match s:
            case FuncDecl(name=name, params=ps, body=body, span=sp):
                if name in self.protos:
                    self.err("PL-TYPE", sp, f"constructor {name} is declared twice")
                    return
                fields: dict[str, FieldType] = {}
                errs: list[Diagnostic] = []
                typer = _BodyTyper({}, errs, f"constructor {name}")
                local = {p: NUMBER for p in ps}
                for st in body:
                    match st:
                        case Assign(target=Get(obj=This(), name=f), value=v):
                            typer.expr(_ctor_reads(v, fields, errs), local)
                            fields[f] = NUMBER
                        case VarDecl(name=x, init=e):
                            typer.expr(_ctor_reads(e, fields, errs), local)
                            local[x] = NUMBER
                        case _:
                            errs.append(reject("PL-TYPE", st.span, "constructor bodies only initialise fields"))
                self.diags.extend(errs)
                self.protos[name] = _Proto(s, Row.of(fields))
            case Attach(ctor=ctor, method=m, span=sp):
                self.attach(s)
            case VarDecl(name=x, init=e):
                t = self.expr(e)
                if t is not None:
                    self.env[x] = t
                else:
                    self.env.pop(x, None)
                    self.env[x] = None
            case Assign(target=Get(obj=o, name=f), value=v, span=sp):
                ot = self.expr(o)
                vt = self.expr(v)
                if isinstance(ot, ObjType):
                    if not check_field_write(ot, f):
                        self.err("NOT-WRITABLE", sp, f"{f} is not a local field of {ot}")
                    elif vt is not None and ot.w.get(f) != vt:
                        self.err("PL-TYPE", sp, f"{f} holds {ot.w.get(f)}, not {vt}")
                elif ot is not None:
                    self.err("PL-TYPE", sp, f"cannot assign a field of a {ot}")
            case ExprStmt(expr=e):
                self.expr(e)
            case Return(span=sp):
                self.err("PL-PARSE", sp, "return outside a function")

    def attach(self, s: Attach) -> None:
        proto = self.protos.get(s.ctor)
        if proto is None:
            self.err("PL-UNBOUND", s.span, f"{s.ctor} is not a constructor")
            return
        info = self.method_of[id(s)]
        reads, writes = self.demands_of(info, proto)
        self.demands.setdefault(f"{s.ctor}.{s.method}", (reads, writes))
        if not proto.frozen:
            for n, t in writes.entries:
                proto.bound_w[n] = t
            for n, t in reads.entries:
                proto.bound_r.setdefault(n, t)
        recv = ObjType(reads.without(writes.names()), writes)
        t = ObjType(proto.methods, EMPTY_ROW, proto.macc(), False)
        try:
            t = attach_method(t, s.method, recv, info.sig)
        except ProtoError as e:
            self.err(e.rule, s.span, str(e))
            return
        proto.methods = t.r

    # expressions ----------------------------------------------------------
    def expr(self, e) -> object | None:
        match e:
            case Num():
                return NUMBER
            case Name(id=x, span=sp):
                if x not in self.env:
                    kind = "a constructor, not a value" if x in self.protos else "not bound"
                    self.err("PL-UNBOUND", sp, f"{x} is {kind}")
                    return None
                return self.env[x]
            case This(span=sp):
                self.err("PL-UNBOUND", sp, "this is only bound inside methods")
                return None
            case Get(obj=Name(id=c), name="prototype") if c in self.protos and c not in self.env:
                return self.protos[c].proto_type(self.ev)
            case New(ctor=c, args=args, span=sp):
                return self.new(c, args, sp)
            case Get(obj=o, name=f, span=sp):
                ot = self.expr(o)
                if not isinstance(ot, ObjType):
                    if ot is not None:
                        self.err("PL-TYPE", sp, f"cannot read {f} from a {ot}")
                    return None
                try:
                    return check_field_read(ot, f)
                except ProtoError as err:
                    self.err(err.rule, sp, str(err))
                    return None
            case CallE(obj=None, name=m, span=sp):
                self.err("PL-TYPE", sp, f"{m} is not a method call")
                return None
            case CallE(obj=o, name=m, args=args, span=sp):
                ot = self.expr(o)
                ats = [self.expr(a) for a in args]
                if not isinstance(ot, ObjType):
                    if ot is not None:
                        self.err("PL-TYPE", sp, f"cannot call {m} on a {ot}")
                    return None
                if any(a is None for a in ats):
                    return None
                if any(isinstance(a, ObjType) for a in ats):
                    self.err("ARG-MISMATCH", sp, f"{m} takes numbers only")
                    return None
                try:
                    if self.ev:
                        return check_method_call_effect(ot, m, ats)
                    return check_method_call(ot, m, ats)
                except ProtoError as err:
                    self.err(err.rule, sp, str(err))
                    return None
            case Incr(target=Get(obj=o, name=f), span=sp):
                ot = self.expr(o)
                if isinstance(ot, ObjType):
                    if not check_field_write(ot, f):
                        self.err("NOT-WRITABLE", sp, f"{f} is not a local field of {ot}")
                    elif ot.w.get(f) != NUMBER:
                        self.err("PL-TYPE", sp, f"{f} is not a number")
                elif ot is not None:
                    self.err("PL-TYPE", sp, f"cannot increment a field of a {ot}")
                return NUMBER
            case Binary(op="+", left=a, right=b, span=sp):
                ta, tb = self.expr(a), self.expr(b)
                if (ta is not None and ta != NUMBER) or (tb is not None and tb != NUMBER):
                    self.err("PL-TYPE", sp, "'+' needs numbers")
                return NUMBER
            case Binary(op="||", left=a, right=b, span=sp):
                ta, tb = self.expr(a), self.expr(b)
                if ta is None or tb is None:
                    return None
                if not (isinstance(ta, ObjType) and isinstance(tb, ObjType)):
                    self.err("PL-TYPE", sp, "'||' joins objects only")
                    return None
                if self.ev:
                    return lub_effect_variant(ta, tb)[0]
                if not (ta.concrete and tb.concrete):
                    self.err("PL-TYPE", sp, "'||' joins concrete objects only")
                    return None
                return lub_nc(ta, tb)
        self.err("PL-TYPE", e.span, "unsupported expression")
        return None

    def new(self, c: str, args: tuple, sp: Span) -> ObjType | None:
        proto = self.protos.get(c)
        if proto is None:
            self.err("PL-UNBOUND", sp, f"{c} is not a constructor")
            return None
        ats = [self.expr(a) for a in args]
        if len(args) != len(proto.ctor.params) or any(a is not None and a != NUMBER for a in ats):
            self.err("ARG-MISMATCH", sp, f"new {c} expects {len(proto.ctor.params)} numbers")
        proto.frozen = True
        t = proto.instance_type(self.ev)
        if self.ev:
            return t
        try:
            return concretize(t)
        except ProtoError as err:
            self.diags.append(note("NOT-CONCRETE", sp, f"new {c}(): {err}"))
            return t


def _ctor_reads(e, fields: dict[str, FieldType], errs: list[Diagnostic]):
    """Constructor expressions may read fields already initialised."""
    match e:
        case Get(obj=This(), name=f, span=sp):
            if f not in fields:
                errs.append(reject("ABSENT", sp, f"this.{f} is read before it is initialised"))
            return Num(0, sp)
        case Binary(op=op, left=a, right=b, span=sp):
            return Binary(op, _ctor_reads(a, fields, errs), _ctor_reads(b, fields, errs), sp)
    return e


def analyze_proto_program(p: ProtoProgram, effect_variant: bool = False) -> ProtoResult:
    return _ProtoChecker(p, effect_variant).run()


def check_proto_program(p: ProtoProgram, effect_variant: bool = False) -> list[Diagnostic]:
    return analyze_proto_program(p, effect_variant).diagnostics
