"""Differential comparison of capability-bound and effect-based par safety.

Random ``par`` programs are checked by both the capability checker and the
heap-write effect discipline, and each program lands in one of four cells.
``effectOnly`` programs merely mention writable references; ``capOnly``
programs write to state partitioned through isolated references.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from importlib import resources
from typing import Iterator

from .capability import ILL_FORMED_RULES, TypeEnv, check_par, sub_qualifier
from .effects import par_race_verdict
from .kernel import (
    Alloc,
    Command,
    FieldRead,
    FieldWrite,
    Let,
    Par,
    Program,
    QualType,
    Qualifier,
    Recover,
    Seq,
    Skip,
    VarAssign,
    parse,
    print_command,
    seq,
)

CELLS = ("bothAccept", "bothReject", "effectOnly", "capOnly")
ILL_FORMED = "illFormed"
MAX_WITNESSES = 5
CLASS_SOURCE = "class T { f : writable T; }"
PROGRAM = parse(CLASS_SOURCE, "<generated>")
_EFFECT_ILL_FORMED = frozenset({"EFF-UNBOUND", "EFF-NO-METHOD", "KL-CONSTRUCT"})
_SHAREABLE = (Qualifier.READABLE, Qualifier.WRITABLE, Qualifier.IMMUTABLE)
_PREFIX = {"isolated": "i", "readable": "r", "writable": "w", "immutable": "m"}


def load_weights() -> dict:
    text = resources.files("discipline_lab").joinpath("data/gen_weights.json").read_text()
    return json.loads(text)


@dataclass(frozen=True)
class GenConfig:
    seed: int = 42
    max_depth: int = 2
    pool: tuple[tuple[str, int], ...] = (("isolated", 2), ("readable", 1), ("writable", 2), ("immutable", 1))
    count: int = 1000
    weights: tuple[tuple[str, float], ...] | None = None

    def __post_init__(self) -> None:
        if self.max_depth < 1:
            raise ValueError("max_depth must be at least 1")
        if self.count < 0 or any(n < 0 for _, n in self.pool):
            raise ValueError("counts must be non-negative")
        if any(q not in _PREFIX for q, _ in self.pool):
            raise ValueError("unknown qualifier in pool")

    @classmethod
    def default(cls, seed: int = 42, count: int = 1000) -> "GenConfig":
        w = load_weights()
        return cls(seed, w["max_depth"], tuple(w["pool"].items()), count, tuple(w["productions"].items()))

    def production_weights(self) -> dict[str, float]:
        return dict(self.weights) if self.weights is not None else dict(load_weights()["productions"])

    def env(self) -> TypeEnv:
        bindings = []
        for q, n in self.pool:
            for k in range(n):
                bindings.append((f"{_PREFIX[q]}{k}", QualType(Qualifier(q), "T")))
        return TypeEnv.of(bindings)


class _Gen:
    def __init__(self, cfg: GenConfig, rng: random.Random, env: TypeEnv):
        self.cfg = cfg
        self.rng = rng
        self.weights = cfg.production_weights()
        self.vars = {n: t.qual for n, t in env.bindings}
        self.fresh = 0

    def new_name(self, stem: str) -> str:
        self.fresh += 1
        return f"{stem}{self.fresh}"

    def of(self, *quals: Qualifier) -> list[str]:
        return [n for n, q in self.vars.items() if q in quals]

    def applicable(self, depth: int) -> dict[str, float]:
        ok = {
            "skip": True,
            "var_assign": len(self.of(*_SHAREABLE)) >= 1 and len(self.vars) >= 2,
            "field_read": bool(self.of(*_SHAREABLE)),
            "field_write": bool(self.of(*_SHAREABLE)) and bool(self.of(Qualifier.WRITABLE, Qualifier.ISOLATED)),
            "consume_write": bool(self.of(Qualifier.ISOLATED)),
            "alloc": True,
            "seq": depth < self.cfg.max_depth,
        }
        return {p: w for p, w in self.weights.items() if ok.get(p) and w > 0}

    def body(self, depth: int) -> Command:
        choices = self.applicable(depth)
        names, ws = zip(*sorted(choices.items()))
        prod = self.rng.choices(names, ws)[0]
        return getattr(self, "p_" + prod)(depth)

    def p_skip(self, depth: int) -> Command:
        return Skip()

    def p_seq(self, depth: int) -> Command:
        return seq(self.body(depth + 1), self.body(depth + 1))

    def p_var_assign(self, depth: int) -> Command:
        target = self.rng.choice(sorted(self.of(*_SHAREABLE)))
        sources = sorted(n for n, q in self.vars.items() if n != target and sub_qualifier(q, self.vars[target]))
        if not sources:
            sources = sorted(n for n in self.vars if n != target)
        return VarAssign(target, self.rng.choice(sources))

    def p_field_read(self, depth: int) -> Command:
        base = self.rng.choice(sorted(self.of(*_SHAREABLE)))
        return FieldRead(self.new_name("t"), base, "f")

    def p_field_write(self, depth: int) -> Command:
        base = self.rng.choice(sorted(self.of(*_SHAREABLE)))
        src = self.rng.choice(sorted(self.of(Qualifier.WRITABLE)) or [base])
        return FieldWrite(base, "f", src)

    def p_consume_write(self, depth: int) -> Command:
        i = self.rng.choice(sorted(self.of(Qualifier.ISOLATED)))
        k = self.new_name("k")
        inner = [VarAssign(k, i)]
        if self.rng.random() < 0.5:
            n = self.new_name("n")
            inner += [Alloc(n, "T"), FieldWrite(k, "f", n)]
        else:
            inner.append(FieldWrite(k, "f", k))
        return Let(k, Qualifier.WRITABLE, "T", seq(*inner))

    def p_alloc(self, depth: int) -> Command:
        return Alloc(self.new_name("n"), "T")


def generate(cfg: GenConfig) -> list[tuple[TypeEnv, Par]]:
    """Deterministic in ``cfg``: program ``k`` draws from its own seeded stream."""
    env = cfg.env()
    out = []
    for k in range(cfg.count):
        rng = random.Random(f"{cfg.seed}:{k}")
        g = _Gen(cfg, rng, env)
        out.append((env, Par(g.body(1), g.body(1))))
    return out


@dataclass(frozen=True)
class Classified:
    cell: str
    cap_rules: tuple[str, ...]
    eff_rules: tuple[str, ...]


def classify(env: TypeEnv, c: Par, program: Program = PROGRAM) -> Classified:
    cap = check_par(env, c.left, c.right, program)
    eff = par_race_verdict(env, c.left, c.right, program)
    cap_rules = tuple(d.rule for d in cap.diagnostics if d.is_reject)
    eff_rules = tuple(d.rule for d in eff.diagnostics if d.is_reject)
    if set(cap_rules) & ILL_FORMED_RULES or set(eff_rules) & _EFFECT_ILL_FORMED:
        return Classified(ILL_FORMED, cap_rules, eff_rules)
    cell = {
        (True, True): "bothAccept",
        (False, False): "bothReject",
        (False, True): "effectOnly",
        (True, False): "capOnly",
    }[cap.accepted, eff.accepted]
    return Classified(cell, cap_rules, eff_rules)


def witness_text(env: TypeEnv, c: Command) -> str:
    """A complete kernel program: class, environment, then the command."""
    lines = [CLASS_SOURCE, ""]
    lines += [f"let {n} : {t};" for n, t in env.bindings]
    lines.append(print_command(c))
    return "\n".join(lines) + "\n"


def _write_roots(c: Command, roots: dict[str, str]) -> Iterator[tuple[str, str]]:
    """Yield (written variable, its root) in order; roots track aliasing."""
    match c:
        case VarAssign(target=x, source=y) | FieldRead(target=x, base=y):
            roots[x] = roots.get(y, y)
        case Alloc(target=x):
            roots[x] = f"new:{x}"
        case FieldWrite(base=x):
            yield x, roots.get(x, x)
        case Let(name=x, body=b):
            roots[x] = f"let:{x}"
            yield from _write_roots(b, roots)
        case Seq(first=a, second=b) | Par(left=a, right=b):
            yield from _write_roots(a, roots)
            yield from _write_roots(b, roots)
        case Recover(body=b):
            yield from _write_roots(b, roots)


def disjoint_writes(env: TypeEnv, c: Par) -> bool:
    """Syntactic spot-check: each branch writes only through its own
    isolated roots, objects it allocated, or its own ``let`` locals."""
    isolated = {n for n, t in env.bindings if t.qual is Qualifier.ISOLATED}
    seen: list[set[str]] = []
    for branch in (c.left, c.right):
        roots = set()
        for _, root in _write_roots(branch, {}):
            if root in isolated:
                roots.add(root)
            elif not root.startswith(("new:", "let:")):
                return False
        seen.append(roots)
    return not (seen[0] & seen[1])


@dataclass
class GapReport:
    seed: int
    program_count: int
    counts: dict[str, int] = field(default_factory=lambda: {c: 0 for c in (*CELLS, ILL_FORMED)})
    witnesses: dict[str, list[str]] = field(default_factory=lambda: {c: [] for c in (*CELLS, ILL_FORMED)})
    spot_check_failures: int = 0

    @property
    def both_accept(self) -> int:
        return self.counts["bothAccept"]

    @property
    def both_reject(self) -> int:
        return self.counts["bothReject"]

    @property
    def effect_only(self) -> int:
        return self.counts["effectOnly"]

    @property
    def cap_only(self) -> int:
        return self.counts["capOnly"]

    @property
    def ill_formed(self) -> int:
        return self.counts[ILL_FORMED]

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "programCount": self.program_count,
            "counts": dict(self.counts),
            "witnesses": {k: list(v) for k, v in self.witnesses.items()},
            "spotCheckFailures": self.spot_check_failures,
        }


def run_diff(cfg: GenConfig) -> GapReport:
    report = GapReport(cfg.seed, cfg.count)
    for env, c in generate(cfg):
        cell = classify(env, c).cell
        report.counts[cell] += 1
        if cell in ("bothAccept", "capOnly") and not disjoint_writes(env, c):
            report.spot_check_failures += 1
        if len(report.witnesses[cell]) < MAX_WITNESSES:
            report.witnesses[cell].append(witness_text(env, c))
    return report
