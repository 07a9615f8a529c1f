"""Join-semilattice effect inference over kernel commands.

Two instantiations share the machinery: a heap-write lattice
(``NoHeapWrite <= HeapWrite``) deciding whether parallel branches are
race-free, and a UI-threading lattice (``SafeEffect <= UIEffect``) keeping
UI calls on the UI thread.  Effects are computed bottom-up: primitive
commands get a fixed effect and compound commands take the join of their
parts.  Holding or passing a reference is never an effect by itself.

``ui_capbound_verdict`` implements the capability-bound alternative for the
UI problem (no UI reference may enter a background thread), kept here for
contrast.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import product
from typing import Iterable

from .capability import TypeEnv
from .diagnostics import Diagnostic, Span, any_reject, reject
from .kernel import (
    Alloc,
    AsyncUi,
    Call,
    Command,
    FieldRead,
    FieldWrite,
    Let,
    MethodDecl,
    Par,
    Program,
    Recover,
    Seq,
    Skip,
    Spawn,
    VarAssign,
    free_vars,
    print_command,
    subcommands,
)


class EffectLattice:
    """A finite join-semilattice given by its covering pairs ``(lower, upper)``."""

    def __init__(self, name: str, elements: Iterable[str], covers: Iterable[tuple[str, str]]):
        self.name = name
        self.elements: tuple[str, ...] = tuple(elements)
        leq = {(e, e) for e in self.elements} | set(covers)
        # transitive closure
        changed = True
        while changed:
            changed = False
            for (a, b), (c, d) in product(list(leq), list(leq)):
                if b == c and (a, d) not in leq:
                    leq.add((a, d))
                    changed = True
        self._leq = frozenset(leq)
        for a, b in self._leq:
            if a != b and (b, a) in self._leq:
                raise ValueError(f"{name}: order is not antisymmetric at {a}, {b}")
        self._join: dict[tuple[str, str], str] = {}
        for a, b in product(self.elements, self.elements):
            ubs = [u for u in self.elements if self.leq(a, u) and self.leq(b, u)]
            least = [u for u in ubs if all(self.leq(u, v) for v in ubs)]
            if len(least) != 1:
                raise ValueError(f"{name}: no least upper bound for {a}, {b}")
            self._join[a, b] = least[0]
        bottoms = [e for e in self.elements if all(self.leq(e, x) for x in self.elements)]
        if len(bottoms) != 1:
            raise ValueError(f"{name}: no bottom element")
        self.bottom = bottoms[0]

    def leq(self, a: str, b: str) -> bool:
        return (a, b) in self._leq

    def join(self, a: str, b: str) -> str:
        return self._join[a, b]

    def join_all(self, effects: Iterable[str]) -> str:
        out = self.bottom
        for e in effects:
            out = self.join(out, e)
        return out

    def __repr__(self) -> str:
        return f"EffectLattice({self.name!r}, {self.elements!r})"


NO_HEAP_WRITE, HEAP_WRITE = "NoHeapWrite", "HeapWrite"
SAFE, UI = "SafeEffect", "UIEffect"

HEAP_LATTICE = EffectLattice("heap-write", (NO_HEAP_WRITE, HEAP_WRITE), [(NO_HEAP_WRITE, HEAP_WRITE)])
UI_LATTICE = EffectLattice("ui", (SAFE, UI), [(SAFE, UI)])


@dataclass(frozen=True)
class Effect:
    lattice: EffectLattice
    value: str

    def __post_init__(self) -> None:
        if self.value not in self.lattice.elements:
            raise ValueError(f"{self.value!r} is not in {self.lattice.name}")

    def join(self, other: "Effect") -> "Effect":
        return Effect(self.lattice, self.lattice.join(self.value, other.value))

    def __le__(self, other: "Effect") -> bool:
        return self.lattice.leq(self.value, other.value)

    def __str__(self) -> str:
        return self.value


@dataclass
class EffVerdict:
    effect: Effect
    diagnostics: list[Diagnostic] = field(default_factory=list)
    accepted: bool = True


def _verdict(lattice: EffectLattice, value: str, diags: list[Diagnostic]) -> EffVerdict:
    return EffVerdict(Effect(lattice, value), diags, not any_reject(diags))


# ---------------------------------------------------------------------------
# variable scoping shared by both inferences


class _Scope:
    """Tracks which variables are bound and at which class."""

    def __init__(self, program: Program, classes: dict[str, str | None]):
        self.program = program
        self.classes = classes

    def copy(self) -> "_Scope":
        return _Scope(self.program, dict(self.classes))

    def bind(self, name: str, cls: str | None) -> None:
        if name not in self.classes or self.classes[name] is None:
            self.classes[name] = cls

    def field_class(self, base: str, f: str) -> str | None:
        c = self.program.cls(self.classes.get(base) or "")
        fd = c.field_decl(f) if c else None
        return fd.cls if fd else None


def _scope_from(program: Program | None, env: TypeEnv | None) -> _Scope:
    return _Scope(program or Program(), {n: t.cls for n, t in (env or TypeEnv()).bindings})


def _method_scope(program: Program, owner: str | None, m: MethodDecl) -> _Scope:
    s = _Scope(program, {p.name: p.cls for p in m.params})
    if owner is not None:
        s.classes["this"] = owner
    return s


# ---------------------------------------------------------------------------
# heap-write effects


class _HeapInference:
    def __init__(self, program: Program | None, file_span: Span | None = None):
        self.program = program or Program()
        self.diags: list[Diagnostic] = []
        self._latent: dict[tuple[str | None, str], str] = {}
        self._active: set[tuple[str | None, str]] = set()
        self.check_pars = False

    def need(self, scope: _Scope, name: str, sp: Span | None) -> None:
        if name not in scope.classes:
            self.diags.append(reject("EFF-UNBOUND", sp, f"variable {name} is not bound"))

    def latent(self, owner: str | None, m: MethodDecl) -> str:
        key = (owner, m.name)
        if key in self._latent:
            return self._latent[key]
        if key in self._active:
            return HEAP_WRITE  # recursive: assume the worst
        self._active.add(key)
        sub = _HeapInference(self.program)
        sub._latent, sub._active = self._latent, self._active
        eff = sub.infer(_method_scope(self.program, owner, m), m.body)
        self._active.discard(key)
        self._latent[key] = eff
        return eff

    def infer(self, scope: _Scope, c: Command) -> str:
        match c:
            case Skip():
                return NO_HEAP_WRITE
            case VarAssign(target=x, source=y, span=sp):
                self.need(scope, y, sp)
                scope.bind(x, scope.classes.get(y))
                return NO_HEAP_WRITE
            case FieldRead(target=x, base=y, field=f, span=sp):
                self.need(scope, y, sp)
                scope.bind(x, scope.field_class(y, f))
                return NO_HEAP_WRITE
            case FieldWrite(base=x, source=y, span=sp):
                self.need(scope, x, sp)
                self.need(scope, y, sp)
                return HEAP_WRITE
            case Alloc(target=x, cls=cls):
                scope.bind(x, cls)
                return NO_HEAP_WRITE
            case Let(name=x, cls=cls, body=body):
                inner = scope.copy()
                inner.classes[x] = cls
                eff = self.infer(inner, body)
                for n, k in inner.classes.items():
                    if n != x:
                        scope.bind(n, k)
                return eff
            case Seq(first=a, second=b):
                return HEAP_LATTICE.join(self.infer(scope, a), self.infer(scope, b))
            case Par(left=a, right=b, span=sp):
                sa, sb = scope.copy(), scope.copy()
                ea, eb = self.infer(sa, a), self.infer(sb, b)
                if self.check_pars:
                    self.diags.extend(_par_write_diags(a, b, ea, eb, sp, self, scope))
                for s in (sa, sb):
                    for n, k in s.classes.items():
                        scope.bind(n, k)
                return HEAP_LATTICE.join(ea, eb)
            case Recover(name=x, body=body):
                return self.infer(scope, body)
            case Call(target=t, receiver=r, method=m, args=args, span=sp):
                for v in ([r] if r else []) + list(args):
                    self.need(scope, v, sp)
                owner = scope.classes.get(r) if r else None
                _, decl = self.program.resolve_call(owner, m)
                if decl is None:
                    self.diags.append(reject("EFF-NO-METHOD", sp, f"cannot resolve {m}"))
                    eff = HEAP_WRITE
                else:
                    eff = self.latent(owner, decl)
                if t is not None:
                    scope.bind(t, decl.ret.cls if decl and decl.ret else None)
                return eff
            case Spawn(span=sp) | AsyncUi(span=sp):
                kw = "spawn" if isinstance(c, Spawn) else "async_ui"
                self.diags.append(reject("KL-CONSTRUCT", sp, f"{kw} is only meaningful under the ui disciplines"))
                return NO_HEAP_WRITE
        raise TypeError(f"not a command: {c!r}")


def _first_heap_write(c: Command, inference: _HeapInference, scope: _Scope) -> Command | None:
    for s in subcommands(c):
        if isinstance(s, FieldWrite):
            return s
        if isinstance(s, Call):
            owner = scope.classes.get(s.receiver) if s.receiver else None
            _, decl = inference.program.resolve_call(owner, s.method)
            if decl is None or inference.latent(owner, decl) == HEAP_WRITE:
                return s
    return None


def _par_write_diags(a: Command, b: Command, ea: str, eb: str, sp: Span | None, inf: _HeapInference,
                     scope: _Scope | None = None) -> list[Diagnostic]:
    out = []
    scope = scope or _Scope(inf.program, {})
    for label, body, eff in (("left", a, ea), ("right", b, eb)):
        if eff == HEAP_WRITE:
            w = _first_heap_write(body, inf, scope)
            where = f" at `{print_command(w)}`" if w is not None else ""
            wspan = (w.span if w is not None and w.span is not None else sp)
            out.append(reject("EFF-PAR-WRITE", wspan, f"{label} branch writes the heap{where}"))
    return out


def infer_heap_write(env: TypeEnv, c: Command, program: Program | None = None) -> EffVerdict:
    """Heap-write effect of ``c``; field writes are the only primitive writes."""
    inf = _HeapInference(program)
    eff = inf.infer(_scope_from(program, env), c)
    return _verdict(HEAP_LATTICE, eff, inf.diags)


def par_race_verdict(env: TypeEnv, c1: Command, c2: Command, program: Program | None = None) -> EffVerdict:
    """Accept ``par {c1} {c2}`` iff neither branch may write the heap."""
    inf = _HeapInference(program)
    scope = _scope_from(program, env)
    e1 = inf.infer(scope.copy(), c1)
    e2 = inf.infer(scope.copy(), c2)
    diags = list(inf.diags)
    diags += _par_write_diags(c1, c2, e1, e2, None, inf, scope)
    return _verdict(HEAP_LATTICE, HEAP_LATTICE.join(e1, e2), diags)


def check_heapwrite_program(program: Program, env: TypeEnv | None = None) -> EffVerdict:
    """Whole-program heap-write discipline: every ``par`` must be write-free."""
    inf = _HeapInference(program)
    inf.check_pars = True
    for cdecl in program.classes:
        for m in cdecl.methods:
            inf.infer(_method_scope(program, cdecl.name, m), m.body)
    for fn in program.functions:
        inf.infer(_method_scope(program, None, fn), fn.body)
    eff = inf.infer(_scope_from(program, env), program.main)
    return _verdict(HEAP_LATTICE, eff, inf.diags)


# ---------------------------------------------------------------------------
# UI effects

UI_THREAD, BACKGROUND = "ui-thread", "background"


def method_annotation(program: Program, owner: str | None, m: MethodDecl) -> str:
    """Declared effect; unannotated methods default to their class's kind."""
    if m.effect is not None:
        return UI if m.effect == "ui" else SAFE
    c = program.cls(owner) if owner else None
    return UI if c is not None and c.ui else SAFE


class _UiInference:
    def __init__(self, program: Program):
        self.program = program
        self.diags: list[Diagnostic] = []

    def infer(self, scope: _Scope, c: Command, ctx: str) -> str:
        match c:
            case Skip():
                return SAFE
            case VarAssign(target=x, source=y, span=sp):
                self._need(scope, y, sp)
                scope.bind(x, scope.classes.get(y))
                return SAFE
            case FieldRead(target=x, base=y, field=f, span=sp):
                self._need(scope, y, sp)
                scope.bind(x, scope.field_class(y, f))
                return SAFE
            case FieldWrite(base=x, source=y, span=sp):
                self._need(scope, x, sp)
                self._need(scope, y, sp)
                return SAFE
            case Alloc(target=x, cls=cls):
                scope.bind(x, cls)
                return SAFE
            case Let(name=x, cls=cls, body=body):
                inner = scope.copy()
                inner.classes[x] = cls
                eff = self.infer(inner, body, ctx)
                for n, k in inner.classes.items():
                    if n != x:
                        scope.bind(n, k)
                return eff
            case Seq(first=a, second=b) | Par(left=a, right=b):
                return UI_LATTICE.join(self.infer(scope, a, ctx), self.infer(scope, b, ctx))
            case Recover(body=body):
                return self.infer(scope, body, ctx)
            case Call(target=t, receiver=r, method=m, args=args, span=sp):
                for v in ([r] if r else []) + list(args):
                    self._need(scope, v, sp)
                owner = scope.classes.get(r) if r else None
                _, decl = self.program.resolve_call(owner, m)
                if decl is None:
                    self.diags.append(reject("EFF-NO-METHOD", sp, f"cannot resolve {m}"))
                    return SAFE
                eff = method_annotation(self.program, owner, decl)  # arguments are variables: bottom
                if t is not None:
                    scope.bind(t, decl.ret.cls if decl.ret else None)
                if eff == UI and ctx == BACKGROUND:
                    callee = f"{r}.{m}" if r else m
                    self.diags.append(reject("EFF-UI-CALL", sp, f"{callee} has UIEffect but runs on a background thread"))
                return eff
            case Spawn(body=body):
                self.infer(scope.copy(), body, BACKGROUND)
                return SAFE
            case AsyncUi(body=body):
                self.infer(scope.copy(), body, UI_THREAD)
                return SAFE
        raise TypeError(f"not a command: {c!r}")

    def _need(self, scope: _Scope, name: str, sp: Span | None) -> None:
        if name not in scope.classes:
            self.diags.append(reject("EFF-UNBOUND", sp, f"variable {name} is not bound"))

    def method(self, owner: str | None, m: MethodDecl) -> None:
        ann = method_annotation(self.program, owner, m)
        eff = self.infer(_method_scope(self.program, owner, m), m.body, UI_THREAD)
        if ann == SAFE and eff == UI:
            self.diags.append(reject("EFF-UI-ANNOT", m.span, f"{m.name} is safe but its body has UIEffect"))


def infer_ui(program: Program, c: Command, context: str = UI_THREAD, env: TypeEnv | None = None) -> EffVerdict:
    """UI effect of ``c`` run on ``context``; UI calls off the UI thread are rejected."""
    if context not in (UI_THREAD, BACKGROUND):
        raise ValueError(f"unknown thread context {context!r}")
    inf = _UiInference(program)
    eff = inf.infer(_scope_from(program, env), c, context)
    return _verdict(UI_LATTICE, eff, inf.diags)


def check_ui_program(program: Program, env: TypeEnv | None = None) -> EffVerdict:
    """Check method annotations, then the main command on the UI thread."""
    inf = _UiInference(program)
    for cdecl in program.classes:
        for m in cdecl.methods:
            inf.method(cdecl.name, m)
    for fn in program.functions:
        inf.method(None, fn)
    eff = inf.infer(_scope_from(program, env), program.main, UI_THREAD)
    return _verdict(UI_LATTICE, eff, inf.diags)


def ui_capbound_verdict(program: Program, c: Command | None = None, env: TypeEnv | None = None) -> EffVerdict:
    """Reject any background body whose free variables reach a UI object.

    With ``c`` omitted the whole program is scanned: every method body and
    then the main command.
    """
    ui_classes = program.ui_classes()
    diags: list[Diagnostic] = []

    def walk(scope: _Scope, cmd: Command) -> None:
        match cmd:
            case VarAssign(target=x, source=y):
                scope.bind(x, scope.classes.get(y))
            case FieldRead(target=x, base=y, field=f):
                scope.bind(x, scope.field_class(y, f))
            case Alloc(target=x, cls=cls):
                scope.bind(x, cls)
            case Call(target=t, receiver=r, method=m):
                if t is not None:
                    _, decl = program.resolve_call(scope.classes.get(r) if r else None, m)
                    scope.bind(t, decl.ret.cls if decl and decl.ret else None)
            case Let(name=x, cls=cls, body=body):
                inner = scope.copy()
                inner.classes[x] = cls
                walk(inner, body)
                for n, k in inner.classes.items():
                    if n != x:
                        scope.bind(n, k)
            case Seq(first=a, second=b) | Par(left=a, right=b):
                walk(scope, a)
                walk(scope, b)
            case Recover(body=body) | AsyncUi(body=body):
                walk(scope, body)
            case Spawn(body=body, span=sp):
                for v in sorted(free_vars(body)):
                    if scope.classes.get(v) in ui_classes:
                        diags.append(reject("EFF-UIBOUND-FLOW", sp,
                                            f"UI reference {v} : {scope.classes[v]} flows into a background thread"))
                walk(scope.copy(), body)

    if c is None:
        for cdecl in program.classes:
            for m in cdecl.methods:
                walk(_method_scope(program, cdecl.name, m), m.body)
        for fn in program.functions:
            walk(_method_scope(program, None, fn), fn.body)
        c = program.main
    walk(_scope_from(program, env), c)
    return _verdict(UI_LATTICE, SAFE, diags)
