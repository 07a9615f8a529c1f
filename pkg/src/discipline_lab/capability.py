"""Flow-sensitive reference-capability checker.

Judgments have the shape ``env |- C -| env'``.  Qualifiers form the order
generated by ``immutable <= readable``, ``writable <= readable`` and
``isolated <= writable``; isolated variables are destructively read
(consumed) whenever they flow anywhere.  Parallel composition admits no
writable variable into either thread, and a recovery block promotes a
readable result to immutable when its context is isolated-or-immutable.
Bindings a command never mentions are framed away automatically around
recovery blocks.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping

from .diagnostics import Diagnostic, Span, any_reject, note, reject
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
    QualType,
    Qualifier,
    Recover,
    Seq,
    Skip,
    Spawn,
    VarAssign,
    free_vars,
)

I, R, W, M = Qualifier.ISOLATED, Qualifier.READABLE, Qualifier.WRITABLE, Qualifier.IMMUTABLE

# generator pairs of the subqualifier order
GENERATORS: tuple[tuple[Qualifier, Qualifier], ...] = ((M, R), (W, R), (I, W))

_UP: dict[Qualifier, frozenset[Qualifier]] = {
    I: frozenset({I, W, R}),
    W: frozenset({W, R}),
    M: frozenset({M, R}),
    R: frozenset({R}),
}


def sub_qualifier(a: Qualifier, b: Qualifier) -> bool:
    return b in _UP[a]


class IsolatedBaseRead(Exception):
    """Field read through an isolated reference that was not consumed first."""


def adapt_field(base: Qualifier, declared: Qualifier) -> Qualifier:
    """Qualifier of ``y.f`` given the qualifier of ``y`` and of ``f``'s declaration."""
    if base is I:
        raise IsolatedBaseRead("field read through an isolated base")
    if base is M or declared is M:
        return M
    if base is R:
        return R
    return declared


@dataclass(frozen=True)
class TypeEnv:
    """Ordered map from variables to qualified types, plus consumed variables."""

    bindings: tuple[tuple[str, QualType], ...] = ()
    consumed: frozenset[str] = frozenset()

    @classmethod
    def of(cls, mapping: Mapping[str, QualType] | Iterable[tuple[str, QualType]] = (), consumed: Iterable[str] = ()) -> "TypeEnv":
        items = tuple(mapping.items()) if isinstance(mapping, Mapping) else tuple(mapping)
        return cls(items, frozenset(consumed))

    def as_dict(self) -> dict[str, QualType]:
        return dict(self.bindings)

    def __contains__(self, name: str) -> bool:
        return any(n == name for n, _ in self.bindings)

    def get(self, name: str) -> QualType | None:
        for n, t in self.bindings:
            if n == name:
                return t
        return None

    def names(self) -> list[str]:
        return [n for n, _ in self.bindings]

    def live(self) -> dict[str, QualType]:
        return {n: t for n, t in self.bindings if n not in self.consumed}

    def bind(self, name: str, t: QualType) -> "TypeEnv":
        out, found = [], False
        for n, old in self.bindings:
            if n == name:
                out.append((n, t))
                found = True
            else:
                out.append((n, old))
        if not found:
            out.append((name, t))
        return TypeEnv(tuple(out), self.consumed - {name})

    def consume(self, name: str) -> "TypeEnv":
        return TypeEnv(self.bindings, self.consumed | {name})

    def drop(self, name: str) -> "TypeEnv":
        return TypeEnv(tuple((n, t) for n, t in self.bindings if n != name), self.consumed - {name})

    def restrict(self, names: Iterable[str]) -> "TypeEnv":
        keep = set(names)
        return TypeEnv(tuple((n, t) for n, t in self.bindings if n in keep), self.consumed & keep)

    def without(self, names: Iterable[str]) -> "TypeEnv":
        gone = set(names)
        return TypeEnv(tuple((n, t) for n, t in self.bindings if n not in gone), self.consumed - gone)

    def union(self, other: "TypeEnv") -> "TypeEnv":
        """Disjoint union; ``other`` wins on overlap."""
        env = self
        for n, t in other.bindings:
            env = env.bind(n, t)
        return TypeEnv(env.bindings, (env.consumed - set(other.names())) | other.consumed)

    def render(self) -> dict[str, str]:
        return {n: ("consumed " if n in self.consumed else "") + str(t) for n, t in self.bindings}

    def __str__(self) -> str:
        return ", ".join(f"{n}: {v}" for n, v in self.render().items()) or "(empty)"


@dataclass
class CapVerdict:
    accepted: bool
    out_env: TypeEnv | None
    diagnostics: list[Diagnostic] = field(default_factory=list)


def frame_env(env: TypeEnv, c: Command) -> tuple[TypeEnv, TypeEnv]:
    """Split ``env`` into the bindings ``c`` mentions and the rest."""
    fv = free_vars(c)
    kept = env.restrict(fv)
    framed = env.without(fv)
    return kept, framed


# rules that signal a malformed program rather than a discipline violation
ILL_FORMED_RULES = frozenset(
    {"CAP-UNBOUND", "CAP-CONSUMED", "CAP-CLASS", "CAP-NO-FIELD", "CAP-NO-METHOD", "CAP-ARITY", "KL-CONSTRUCT"}
)


class _Checker:
    def __init__(self, program: Program | None, auto_frame: bool):
        self.program = program or Program()
        self.auto_frame = auto_frame
        self.diags: list[Diagnostic] = []

    def err(self, rule: str, span: Span | None, msg: str) -> None:
        self.diags.append(reject(rule, span, msg))

    # variable access ------------------------------------------------------
    def use(self, env: TypeEnv, name: str, span: Span | None) -> QualType | None:
        t = env.get(name)
        if t is None:
            self.err("CAP-UNBOUND", span, f"variable {name} is not bound")
            return None
        if name in env.consumed:
            self.err("CAP-CONSUMED", span, f"isolated variable {name} was already consumed")
            return None
        return t

    def flow(self, env: TypeEnv, name: str, t: QualType) -> TypeEnv:
        """Reading ``name`` as a value destroys it when isolated."""
        return env.consume(name) if t.qual is I else env

    def assign(self, env: TypeEnv, target: str, t: QualType, span: Span | None) -> TypeEnv:
        old = env.get(target)
        if old is None:
            return env.bind(target, t)
        if old.cls != t.cls:
            self.err("CAP-CLASS", span, f"cannot assign {t} to {target} : {old}")
        elif not sub_qualifier(t.qual, old.qual):
            self.err("CAP-SUBQ", span, f"cannot assign {t} to {target} : {old}")
        return env.bind(target, old)

    def field_decl(self, cls: str, name: str, span: Span | None):
        c = self.program.cls(cls)
        f = c.field_decl(name) if c else None
        if f is None:
            self.err("CAP-NO-FIELD", span, f"class {cls} has no field {name}")
        return f

    # commands -------------------------------------------------------------
    def check(self, env: TypeEnv, c: Command) -> TypeEnv:
        match c:
            case Skip():
                return env
            case VarAssign(target=x, source=y, span=sp):
                t = self.use(env, y, sp)
                if t is None:
                    return env
                env = self.flow(env, y, t)
                return self.assign(env, x, t, sp)
            case FieldRead(target=x, base=y, field=f, span=sp):
                t = self.use(env, y, sp)
                if t is None:
                    return env
                fd = self.field_decl(t.cls, f, sp)
                if fd is None:
                    return env
                try:
                    q = adapt_field(t.qual, fd.qual)
                except IsolatedBaseRead:
                    self.err("CAP-ISO-BASE", sp, f"{y} is isolated; bind it with a let before reading {y}.{f}")
                    return env
                return self.assign(env, x, QualType(q, fd.cls), sp)
            case FieldWrite(base=x, field=f, source=y, span=sp):
                tb = self.use(env, x, sp)
                ts = self.use(env, y, sp)
                if tb is None or ts is None:
                    return env
                if tb.qual is not W:
                    self.err("CAP-FIELD-WRITE", sp, f"{x}.{f} := {y} needs writable {x}, found {tb.qual}")
                fd = self.field_decl(tb.cls, f, sp)
                if fd is not None:
                    if ts.cls != fd.cls:
                        self.err("CAP-CLASS", sp, f"field {tb.cls}.{f} holds {fd.cls}, not {ts.cls}")
                    elif not sub_qualifier(ts.qual, fd.qual):
                        self.err("CAP-SUBQ", sp, f"cannot store {ts} into field {f} : {fd.qual} {fd.cls}")
                return self.flow(env, y, ts)
            case Alloc(target=x, cls=cls, span=sp):
                old = env.get(x)
                if old is None:
                    return env.bind(x, QualType(W, cls))
                if old.cls != cls:
                    self.err("CAP-CLASS", sp, f"cannot assign new {cls} to {x} : {old}")
                return env.bind(x, old)
            case Let(name=x, qual=q, cls=cls, body=body):
                outer = env.get(x)
                was_consumed = x in env.consumed
                out = self.check(env.bind(x, QualType(q, cls)), body)
                out = out.drop(x)
                if outer is not None:
                    out = out.bind(x, outer)
                    if was_consumed:
                        out = out.consume(x)
                return out
            case Seq(first=a, second=b):
                return self.check(self.check(env, a), b)
            case Par(left=a, right=b, span=sp):
                return self.par(env, a, b, sp)
            case Recover(name=x, body=body, span=sp):
                return self.recover(env, x, body, sp)
            case Call():
                return self.call(env, c)
            case Spawn(span=sp) | AsyncUi(span=sp):
                kw = "spawn" if isinstance(c, Spawn) else "async_ui"
                self.err("KL-CONSTRUCT", sp, f"{kw} is only meaningful under the ui disciplines")
                return env
        raise TypeError(f"not a command: {c!r}")

    def call(self, env: TypeEnv, c: Call) -> TypeEnv:
        sp = c.span
        recv_t = None
        if c.receiver is not None:
            recv_t = self.use(env, c.receiver, sp)
            if recv_t is None:
                return env
        owner, m = self.program.resolve_call(recv_t.cls if recv_t else None, c.method)
        if m is None:
            where = f"class {recv_t.cls}" if recv_t else "the program"
            self.err("CAP-NO-METHOD", sp, f"{where} declares no method {c.method}")
            return env
        if recv_t is not None:
            if recv_t.qual is I:
                self.err("CAP-ISO-BASE", sp, f"{c.receiver} is isolated; bind it with a let before calling {c.method}")
            elif m.receiver is not None and not sub_qualifier(recv_t.qual, m.receiver):
                self.err("CAP-SUBQ", sp, f"{c.method} needs a {m.receiver} receiver, {c.receiver} is {recv_t.qual}")
        if len(c.args) != len(m.params):
            self.err("CAP-ARITY", sp, f"{c.method} takes {len(m.params)} arguments, got {len(c.args)}")
            return env
        for a, p in zip(c.args, m.params):
            ta = self.use(env, a, sp)
            if ta is None:
                continue
            if ta.cls != p.cls:
                self.err("CAP-CLASS", sp, f"argument {a} : {ta} does not match parameter {p.name} : {p.type}")
            elif not sub_qualifier(ta.qual, p.qual):
                self.err("CAP-SUBQ", sp, f"argument {a} : {ta} does not match parameter {p.name} : {p.type}")
            env = self.flow(env, a, ta)
        if c.target is not None:
            if m.ret is None:
                self.err("CAP-CLASS", sp, f"{c.method} returns unit")
                return env
            env = self.assign(env, c.target, m.ret, sp)
        return env

    def par(self, env: TypeEnv, a: Command, b: Command, sp: Span | None) -> TypeEnv:
        fa, fb = free_vars(a), free_vars(b)
        side_a: list[str] = []
        side_b: list[str] = []
        for name in env.names():
            in_a, in_b = name in fa, name in fb
            if not (in_a or in_b):
                continue
            t = env.get(name)
            if name not in env.consumed:
                if t.qual is W:
                    where = " and ".join(s for s, hit in (("left", in_a), ("right", in_b)) if hit)
                    self.err("CAP-PAR-WRITABLE", sp, f"{name} : {t} is required by the {where} branch")
                elif t.qual is I and in_a and in_b:
                    self.err("CAP-PAR-ISO-CONFLICT", sp, f"isolated {name} is used by both branches")
            # after a reported conflict both sides still see the binding,
            # so the error does not cascade into CAP-UNBOUND
            if in_a:
                side_a.append(name)
            if in_b:
                side_b.append(name)
        out_a = self.check(env.restrict(side_a), a)
        out_b = self.check(env.restrict(side_b), b)
        out = env.without(set(side_a) | set(side_b))
        da, db = out_a.as_dict(), out_b.as_dict()
        for n in out_a.names():
            if n in db and (da[n] != db[n] or (n in out_a.consumed) != (n in out_b.consumed)):
                self.err("CAP-PAR-JOIN", sp, f"branches disagree on {n}")
        return out.union(out_a).union(out_b)

    def recover(self, env: TypeEnv, x: str, body: Command, sp: Span | None) -> TypeEnv:
        if self.auto_frame:
            kept, framed = frame_env(env, body)
            if framed.bindings:
                self.diags.append(note("CAP-FRAME", sp, "framed away: " + ", ".join(framed.names())))
        else:
            kept, framed = env, TypeEnv()
        bad_in = [f"{n} : {t}" for n, t in kept.live().items() if t.qual not in (I, M)]
        if bad_in:
            self.err("CAP-RECOVER-ENV", sp, "recovery input is not isolated-or-immutable: " + ", ".join(bad_in))
        out = self.check(kept, body)
        tx = out.live().get(x)
        if tx is None:
            self.err("CAP-RECOVER-TARGET", sp, f"{x} is not bound after the recovery block")
            return framed.union(out)
        bad_out = [f"{n} : {t}" for n, t in out.live().items() if n != x and t.qual not in (I, M)]
        if bad_out:
            self.err("CAP-RECOVER-ENV", sp, "recovery output is not isolated-or-immutable: " + ", ".join(bad_out))
        if not sub_qualifier(tx.qual, R):
            self.err("CAP-RECOVER-TARGET", sp, f"{x} : {tx} is not readable")
        out = out.bind(x, QualType(M, tx.cls))
        return framed.union(out)

    def method(self, owner: str | None, m: MethodDecl) -> None:
        env = TypeEnv()
        if owner is not None:
            env = env.bind("this", QualType(m.receiver or R, owner))
        for p in m.params:
            env = env.bind(p.name, p.type)
        out = self.check(env, m.body)
        if m.ret is not None and m.ret_var is not None:
            t = self.use(out, m.ret_var, m.span)
            if t is not None and (t.cls != m.ret.cls or not sub_qualifier(t.qual, m.ret.qual)):
                self.err("CAP-RETURN", m.span, f"{m.name} returns {m.ret_var} : {t}, declared {m.ret}")


def _verdict(ch: _Checker, out: TypeEnv) -> CapVerdict:
    return CapVerdict(not any_reject(ch.diags), out, ch.diags)


def check_command(env: TypeEnv, c: Command, program: Program | None = None, *, auto_frame: bool = True) -> CapVerdict:
    ch = _Checker(program, auto_frame)
    out = ch.check(env, c)
    return _verdict(ch, out)


def check_par(env: TypeEnv, c1: Command, c2: Command, program: Program | None = None, *, auto_frame: bool = True) -> CapVerdict:
    ch = _Checker(program, auto_frame)
    out = ch.par(env, c1, c2, None)
    return _verdict(ch, out)


def check_recover(env: TypeEnv, x: str, c: Command, program: Program | None = None, *, auto_frame: bool = True) -> CapVerdict:
    ch = _Checker(program, auto_frame)
    out = ch.recover(env, x, c, None)
    return _verdict(ch, out)


def check_program(program: Program, env: TypeEnv | None = None, *, auto_frame: bool = True) -> CapVerdict:
    """Check every method body, then the main command."""
    ch = _Checker(program, auto_frame)
    for c in program.classes:
        for m in c.methods:
            ch.method(c.name, m)
    for fn in program.functions:
        ch.method(None, fn)
    out = ch.check(env or TypeEnv(), program.main)
    return _verdict(ch, out)
