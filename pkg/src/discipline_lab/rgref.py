"""Rely-guarantee references over the naturals.

A reference type ``ref{N | p}[R, G]`` refines its referent by ``p``, assumes
aliases only perform updates in the rely ``R`` and promises its own updates
stay in the guarantee ``G``.  Predicates and relations come from a small
closed catalog so containment and stability are decidable without a solver.

Every catalog relation is translation invariant: it holds of ``(a, b)``
exactly when ``b - a`` lies in a fixed integer interval, its *difference
set*.  Because every difference is realised by some pair of naturals,
relation containment is containment of difference sets, and stability of an
interval predicate reduces to interval arithmetic.  ``BoundedOracle``
re-derives both tables by enumeration over ``[0, 64]^2``.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from itertools import product
from typing import Iterable

import numpy as np

INF = math.inf
MAX_CONST = 32
ORACLE_BOUND = 64


@dataclass(frozen=True)
class Pred:
    tag: str
    k: int | None = None

    TAGS = ("gtK", "geK", "ltK", "leK", "eqK", "even", "odd", "trueP")

    def __post_init__(self) -> None:
        if self.tag not in self.TAGS:
            raise ValueError(f"unknown predicate {self.tag!r}")
        needs_k = self.tag.endswith("K")
        if needs_k and (self.k is None or self.k < 0):
            raise ValueError(f"{self.tag} needs a natural constant")
        if not needs_k and self.k is not None:
            raise ValueError(f"{self.tag} takes no constant")

    @property
    def parity(self) -> int | None:
        return {"even": 0, "odd": 1}.get(self.tag)

    @property
    def interval(self) -> tuple[float, float] | None:
        """``(lo, hi)`` for interval predicates, ``None`` for parity or empty."""
        k = self.k
        match self.tag:
            case "gtK":
                return (k + 1, INF)
            case "geK":
                return (k, INF)
            case "ltK":
                return None if k == 0 else (0, k - 1)
            case "leK":
                return (0, k)
            case "eqK":
                return (k, k)
            case "trueP":
                return (0, INF)
        return None

    @property
    def is_empty(self) -> bool:
        return self.tag == "ltK" and self.k == 0

    def holds(self, n: int) -> bool:
        if self.is_empty:
            return False
        if self.parity is not None:
            return n % 2 == self.parity
        lo, hi = self.interval
        return lo <= n <= hi

    def __str__(self) -> str:
        sym = {"gtK": ">", "geK": ">=", "ltK": "<", "leK": "<=", "eqK": "="}
        return f"{sym[self.tag]}{self.k}" if self.tag in sym else {"trueP": "true"}.get(self.tag, self.tag)


@dataclass(frozen=True)
class Rel:
    tag: str
    k: int | None = None

    TAGS = ("eq", "le", "ge", "lt", "gt", "any", "incBy")

    def __post_init__(self) -> None:
        if self.tag not in self.TAGS:
            raise ValueError(f"unknown relation {self.tag!r}")
        if self.tag == "incBy" and (self.k is None or self.k < 0):
            raise ValueError("incBy needs a natural constant")
        if self.tag != "incBy" and self.k is not None:
            raise ValueError(f"{self.tag} takes no constant")

    @property
    def diffs(self) -> tuple[float, float]:
        """Interval of ``new - old`` permitted by the relation."""
        return {
            "eq": (0, 0),
            "le": (0, INF),
            "ge": (-INF, 0),
            "lt": (1, INF),
            "gt": (-INF, -1),
            "any": (-INF, INF),
            "incBy": (self.k, self.k),
        }[self.tag]

    def holds(self, old: int, new: int) -> bool:
        lo, hi = self.diffs
        return lo <= new - old <= hi

    def __str__(self) -> str:
        sym = {"eq": "=", "le": "<=", "ge": ">=", "lt": "<", "gt": ">", "any": "any"}
        return sym.get(self.tag) or f"+{self.k}"


@dataclass(frozen=True)
class RGRefType:
    pred: Pred
    rely: Rel
    guarantee: Rel

    def __str__(self) -> str:
        return f"ref{{N|{self.pred}}}[{self.rely},{self.guarantee}]"


# ---------------------------------------------------------------------------
# symbolic decisions


def rel_contains(a: Rel, b: Rel) -> bool:
    """``[[a]] <= [[b]]`` as sets of pairs."""
    (alo, ahi), (blo, bhi) = a.diffs, b.diffs
    return blo <= alo and ahi <= bhi


def rel_union_contains(parts: Iterable[Rel], b: Rel) -> bool:
    """``union of [[parts]] <= [[b]]``; union containment splits pointwise."""
    return all(rel_contains(a, b) for a in parts)


def pred_implies(p: Pred, q: Pred) -> bool:
    """``[[p]] <= [[q]]``."""
    if p.is_empty:
        return True
    if q.is_empty:
        return False
    if q.parity is not None:
        if p.parity is not None:
            return p.parity == q.parity
        lo, hi = p.interval
        return lo == hi and lo % 2 == q.parity
    qlo, qhi = q.interval
    if p.parity is not None:
        return qhi == INF and qlo <= p.parity
    plo, phi = p.interval
    return qlo <= plo and phi <= qhi


def pred_stable(p: Pred, r: Rel) -> bool:
    """Every ``r`` step from a ``p`` value lands on a ``p`` value."""
    if p.is_empty:
        return True
    dlo, dhi = r.diffs
    if p.parity is not None:
        # parity survives only fixed even steps
        return dlo == dhi and dlo % 2 == 0
    lo, hi = p.interval
    # reachable values: the integer interval [lo+dlo, hi+dhi] cut to N
    reach_hi = hi + dhi
    if reach_hi < 0:
        return True
    reach_lo = max(lo + dlo, 0)
    return reach_lo >= lo and reach_hi <= hi


def well_formed(t: RGRefType) -> bool:
    """The refinement is stable under both the rely and the guarantee."""
    return pred_stable(t.pred, t.rely) and pred_stable(t.pred, t.guarantee)


SPLIT_PREMISES = ("RG-SPLIT-WF", "RG-SPLIT-PRED", "RG-SPLIT-TOLERATE", "RG-SPLIT-GUARANTEE", "RG-SPLIT-RELY")


def split_failures(t: RGRefType, t1: RGRefType, t2: RGRefType) -> list[tuple[str, str]]:
    """Failed premises of splitting ``t`` into ``t1`` and ``t2``, as (rule, detail)."""
    out: list[tuple[str, str]] = []
    for name, part in (("left", t1), ("right", t2)):
        if not well_formed(part):
            out.append(("RG-SPLIT-WF", f"{name} component {part} is not well formed"))
    for name, part in (("left", t1), ("right", t2)):
        if not pred_implies(t.pred, part.pred):
            out.append(("RG-SPLIT-PRED", f"{t.pred} does not imply the {name} refinement {part.pred}"))
    for name, g, other, r in (("left", t1.guarantee, "right", t2.rely), ("right", t2.guarantee, "left", t1.rely)):
        if not rel_contains(g, r):
            out.append(("RG-SPLIT-TOLERATE", f"{name} guarantee {g} is not tolerated by the {other} rely {r}"))
    if not rel_union_contains((t1.guarantee, t2.guarantee), t.guarantee):
        out.append(("RG-SPLIT-GUARANTEE",
                    f"guarantees {t1.guarantee} and {t2.guarantee} together exceed {t.guarantee}"))
    for name, part in (("left", t1), ("right", t2)):
        if not rel_contains(t.rely, part.rely):
            out.append(("RG-SPLIT-RELY", f"{name} rely {part.rely} assumes less than {t.rely}"))
    return out


def split_check(t: RGRefType, t1: RGRefType, t2: RGRefType) -> bool:
    return not split_failures(t, t1, t2)


def write_check(t: RGRefType, old: int, new: int) -> bool:
    """Whether a reference of type ``t`` may replace ``old`` with ``new``."""
    return t.guarantee.holds(old, new)


# ---------------------------------------------------------------------------
# catalog and bounded oracle


def catalog_preds(consts: Iterable[int] = (0, 1, 5, 32)) -> list[Pred]:
    out = [Pred(tag, k) for tag in ("gtK", "geK", "ltK", "leK", "eqK") for k in consts]
    return out + [Pred("even"), Pred("odd"), Pred("trueP")]


def catalog_rels(consts: Iterable[int] = (0, 1, 2, 5, 32)) -> list[Rel]:
    out = [Rel(tag) for tag in ("eq", "le", "ge", "lt", "gt", "any")]
    return out + [Rel("incBy", k) for k in consts]


class BoundedOracle:
    """Brute-force denotations on ``[0, bound]`` using numpy masks."""

    def __init__(self, bound: int = ORACLE_BOUND):
        self.bound = bound
        n = np.arange(bound + 1)
        self._old, self._new = np.meshgrid(n, n, indexing="ij")
        self._n = n

    # denotations written out per tag, independent of the interval encoding
    def pred_mask(self, p: Pred) -> np.ndarray:
        n, k = self._n, p.k
        return {
            "gtK": lambda: n > k,
            "geK": lambda: n >= k,
            "ltK": lambda: n < k,
            "leK": lambda: n <= k,
            "eqK": lambda: n == k,
            "even": lambda: n % 2 == 0,
            "odd": lambda: n % 2 == 1,
            "trueP": lambda: np.ones_like(n, dtype=bool),
        }[p.tag]()

    def rel_mask(self, r: Rel) -> np.ndarray:
        a, b = self._old, self._new
        return {
            "eq": lambda: a == b,
            "le": lambda: a <= b,
            "ge": lambda: a >= b,
            "lt": lambda: a < b,
            "gt": lambda: a > b,
            "any": lambda: np.ones_like(a, dtype=bool),
            "incBy": lambda: b == a + r.k,
        }[r.tag]()

    def rel_contains(self, a: Rel, b: Rel) -> bool:
        return bool(np.all(~self.rel_mask(a) | self.rel_mask(b)))

    def pred_implies(self, p: Pred, q: Pred) -> bool:
        return bool(np.all(~self.pred_mask(p) | self.pred_mask(q)))

    def pred_stable(self, p: Pred, r: Rel) -> bool:
        pm = self.pred_mask(p)
        step = pm[:, None] & self.rel_mask(r)
        return bool(np.all(~step | pm[None, :]))


@dataclass(frozen=True)
class Mismatch:
    table: str
    left: str
    right: str
    symbolic: bool
    oracle: bool


def compare_tables(preds: list[Pred] | None = None, rels: list[Rel] | None = None,
                   oracle: BoundedOracle | None = None) -> list[Mismatch]:
    """Every disagreement between the symbolic tables and the oracle."""
    preds = catalog_preds() if preds is None else preds
    rels = catalog_rels() if rels is None else rels
    oracle = oracle or BoundedOracle()
    out = []
    for a, b in product(rels, rels):
        s, o = rel_contains(a, b), oracle.rel_contains(a, b)
        if s != o:
            out.append(Mismatch("containment", str(a), str(b), s, o))
    for p, r in product(preds, rels):
        s, o = pred_stable(p, r), oracle.pred_stable(p, r)
        if s != o:
            out.append(Mismatch("stability", str(p), str(r), s, o))
    for p, q in product(preds, preds):
        s, o = pred_implies(p, q), oracle.pred_implies(p, q)
        if s != o:
            out.append(Mismatch("implication", str(p), str(q), s, o))
    return out


# ---------------------------------------------------------------------------
# declaration files

_PRED_RE = re.compile(r"^(?:(?:N|ℕ)\s*\|\s*)?(>=|<=|≥|≤|>|<|=)\s*(\d+)$")
_REL_SYMS = {"=": "eq", "<=": "le", "≤": "le", ">=": "ge", "≥": "ge", "<": "lt", ">": "gt", "any": "any"}


class RgParseError(ValueError):
    pass


def parse_pred(text: str) -> Pred:
    s = text.strip()
    bare = re.sub(r"^(?:N|ℕ)\s*\|\s*", "", s)
    if bare in ("even", "odd"):
        return Pred(bare)
    if bare == "true":
        return Pred("trueP")
    m = _PRED_RE.match(s)
    if not m:
        raise RgParseError(f"bad predicate {text!r}")
    op, k = m.group(1), int(m.group(2))
    tag = {">": "gtK", ">=": "geK", "≥": "geK", "<": "ltK", "<=": "leK", "≤": "leK", "=": "eqK"}[op]
    return Pred(tag, k)


def parse_rel(text: str) -> Rel:
    s = text.strip()
    if s in _REL_SYMS:
        return Rel(_REL_SYMS[s])
    m = re.fullmatch(r"\+\s*(\d+)", s)
    if m:
        return Rel("incBy", int(m.group(1)))
    raise RgParseError(f"bad relation {text!r}")


_TYPE_RE = re.compile(r"^type\s+([A-Za-z_]\w*)\s*=\s*ref\s*\{(.*)\}\s*\[(.*),(.*)\]$")
_SPLIT_RE = re.compile(r"^split\s+([A-Za-z_]\w*)\s*->\s*([A-Za-z_]\w*)\s*,\s*([A-Za-z_]\w*)$")
_WRITE_RE = re.compile(r"^write\s+([A-Za-z_]\w*)\s+(\d+)\s+(\d+)$")


@dataclass(frozen=True)
class TypeDecl:
    line: int
    name: str
    type: RGRefType


@dataclass(frozen=True)
class SplitDecl:
    line: int
    source: str
    left: str
    right: str


@dataclass(frozen=True)
class WriteDecl:
    line: int
    name: str
    old: int
    new: int


def parse_decl_line(text: str, line: int) -> TypeDecl | SplitDecl | WriteDecl:
    if m := _TYPE_RE.match(text):
        t = RGRefType(parse_pred(m.group(2)), parse_rel(m.group(3)), parse_rel(m.group(4)))
        return TypeDecl(line, m.group(1), t)
    if m := _SPLIT_RE.match(text):
        return SplitDecl(line, *m.groups())
    if m := _WRITE_RE.match(text):
        return WriteDecl(line, m.group(1), int(m.group(2)), int(m.group(3)))
    raise RgParseError(f"unrecognised declaration {text!r}")


def enumerate_writes(t: RGRefType, bound: int = ORACLE_BOUND) -> Iterable[tuple[int, int]]:
    for a, b in product(range(bound + 1), repeat=2):
        if t.pred.holds(a) and write_check(t, a, b):
            yield a, b
