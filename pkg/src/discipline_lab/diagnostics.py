"""Machine-readable verdicts shared by every discipline.

Each diagnostic names a rule from the closed registry below.  The registry
is the documented set of rule names the CLI can emit; constructing a
:class:`Diagnostic` with an unknown rule is a programming error.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Sequence

SCHEMA_VERSION = 1

REJECT = "reject"
NOTE = "note"

RULES: dict[str, str] = {
    # kernel language
    "KL-PARSE": "source text does not match the kernel grammar",
    "KL-CONSTRUCT": "construct is not available under the selected discipline",
    # reference capabilities
    "CAP-UNBOUND": "variable is not bound in the type environment",
    "CAP-CONSUMED": "isolated variable was already destructively read",
    "CAP-CLASS": "class mismatch between source and target",
    "CAP-NO-FIELD": "class declares no such field",
    "CAP-NO-METHOD": "no such method or function",
    "CAP-ARITY": "wrong number of arguments",
    "CAP-SUBQ": "qualifier is not a subqualifier of the required one",
    "CAP-ISO-BASE": "isolated reference used as a base before being consumed",
    "CAP-FIELD-WRITE": "field write through a non-writable reference",
    "CAP-RETURN": "returned variable does not match the declared return type",
    "CAP-PAR-WRITABLE": "parallel branch requires a writable variable",
    "CAP-PAR-ISO-CONFLICT": "both parallel branches use the same isolated variable",
    "CAP-PAR-JOIN": "parallel branches produce incompatible bindings for a variable",
    "CAP-RECOVER-ENV": "recovery context holds a binding that is neither isolated nor immutable",
    "CAP-RECOVER-TARGET": "recovered variable is absent from the body's output",
    "CAP-FRAME": "bindings framed away around a recovery block",
    # effects
    "EFF-UNBOUND": "variable is not bound",
    "EFF-NO-METHOD": "call target cannot be resolved",
    "EFF-PAR-WRITE": "parallel branch writes the heap",
    "EFF-UI-CALL": "UI-effect call reachable from a background thread",
    "EFF-UI-ANNOT": "method annotated safe has a UI-effect body",
    "EFF-UIBOUND-FLOW": "UI reference flows into a background thread",
    # rely-guarantee references
    "RG-PARSE": "declaration line is malformed",
    "RG-UNDEFINED": "reference type name is not declared",
    "RG-ILL-FORMED": "refinement is not stable under the rely or guarantee",
    "RG-SPLIT-WF": "a split component is not well formed",
    "RG-SPLIT-PRED": "a split component's refinement does not follow from the original",
    "RG-SPLIT-TOLERATE": "a split component's guarantee exceeds the other component's rely",
    "RG-SPLIT-GUARANTEE": "combined guarantees exceed the original guarantee",
    "RG-SPLIT-RELY": "a split component assumes less interference than the original",
    "RG-WRITE-PRE": "old value does not satisfy the refinement",
    "RG-WRITE-DENIED": "write is not permitted by the guarantee",
    # prototype layout
    "PL-PARSE": "source text does not match the prototype grammar",
    "PL-UNBOUND": "name is not bound",
    "PL-TYPE": "operand has the wrong kind of type",
    "ABSENT": "field is not present on the object",
    "NOT-WRITABLE": "field is not definitely local, writing it would change the layout",
    "NOT-CONCRETE": "method-accessed fields are not all physically present",
    "NOT-CONCRETE-RECEIVER": "method invoked on a receiver that is not known to be concrete",
    "NO-SUCH-METHOD": "receiver has no such method",
    "ARG-MISMATCH": "argument types do not match the method signature",
    "ATTACH-EXCEEDS": "attached method accesses fields outside the prototype's bound",
    "ATTACH-SIG": "replacement method changes the signature of an existing method",
    "ESCAPE": "method body lets the receiver escape",
    "NOT-CALLABLE": "method's written fields are not all local to the receiver",
}


@dataclass(frozen=True, order=True)
class Span:
    file: str
    line: int
    column: int
    length: int = 1

    def to_json(self) -> dict:
        return {"file": self.file, "line": self.line, "column": self.column, "length": self.length}


NO_SPAN = Span("<unknown>", 1, 1, 0)


@dataclass(frozen=True)
class Diagnostic:
    rule: str
    severity: str
    span: Span
    message: str

    def __post_init__(self) -> None:
        if self.rule not in RULES:
            raise ValueError(f"unregistered rule {self.rule!r}")
        if self.severity not in (REJECT, NOTE):
            raise ValueError(f"bad severity {self.severity!r}")

    @property
    def is_reject(self) -> bool:
        return self.severity == REJECT

    def to_json(self) -> dict:
        return {
            "rule": self.rule,
            "severity": self.severity,
            "span": self.span.to_json(),
            "message": self.message,
        }

    def render(self) -> str:
        s = self.span
        return f"{s.file}:{s.line}:{s.column}: {self.severity} {self.rule}: {self.message}"


def reject(rule: str, span: Span | None, message: str) -> Diagnostic:
    return Diagnostic(rule, REJECT, span or NO_SPAN, message)


def note(rule: str, span: Span | None, message: str) -> Diagnostic:
    return Diagnostic(rule, NOTE, span or NO_SPAN, message)


def any_reject(diags: Iterable[Diagnostic]) -> bool:
    return any(d.is_reject for d in diags)


def reject_rules(diags: Iterable[Diagnostic]) -> list[str]:
    return [d.rule for d in diags if d.is_reject]


def dumps_report(payload: dict) -> str:
    """Stable JSON: sorted keys, no timestamps, schema tag first-class."""
    body = dict(payload)
    body["schema"] = SCHEMA_VERSION
    return json.dumps(body, sort_keys=True, indent=2, ensure_ascii=False)


def diagnostics_json(diags: Sequence[Diagnostic]) -> list[dict]:
    return [d.to_json() for d in diags]
