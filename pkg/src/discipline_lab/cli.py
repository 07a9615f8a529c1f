"""Command-line driver: ``check``, ``diff`` and ``corpus``.

Exit codes: 0 accept/success, 1 reject or mismatch, 2 usage or parse error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from . import capability, effects, proto, rgref
from .diagnostics import Diagnostic, Span, any_reject, diagnostics_json, dumps_report, reject
from .diff import CELLS, ILL_FORMED, GenConfig, run_diff
from .kernel import ParseError, parse

KERNEL_DISCIPLINES = ("refcap", "heapwrite", "ui", "ui-capbound")
DISCIPLINES = KERNEL_DISCIPLINES + ("rgref", "protolayout", "protolayout-effect")

EXIT_OK, EXIT_REJECT, EXIT_USAGE = 0, 1, 2


@dataclass
class Outcome:
    discipline: str
    file: str
    diagnostics: list[Diagnostic] = field(default_factory=list)
    result: dict = field(default_factory=dict)
    parse_failed: bool = False

    @property
    def accepted(self) -> bool:
        return not self.parse_failed and not any_reject(self.diagnostics)

    @property
    def exit_code(self) -> int:
        if self.parse_failed:
            return EXIT_USAGE
        return EXIT_OK if self.accepted else EXIT_REJECT

    def to_json(self) -> dict:
        return {
            "discipline": self.discipline,
            "file": self.file,
            "accepted": self.accepted,
            "diagnostics": diagnostics_json(self.diagnostics),
            "result": self.result,
        }


def _check_kernel(discipline: str, text: str, file: str) -> Outcome:
    out = Outcome(discipline, file)
    try:
        program = parse(text, file)
    except ParseError as e:
        out.parse_failed = True
        exp = f" (expected one of: {', '.join(sorted(e.expected))})" if e.expected else ""
        out.diagnostics.append(reject("KL-PARSE", Span(file, e.line, e.column), e.message + exp))
        return out
    if discipline == "refcap":
        v = capability.check_program(program)
        out.result = {"env": v.out_env.render()}
    elif discipline == "heapwrite":
        v = effects.check_heapwrite_program(program)
        out.result = {"effect": v.effect.value}
    elif discipline == "ui":
        v = effects.check_ui_program(program)
        out.result = {"effect": v.effect.value}
    else:
        v = effects.ui_capbound_verdict(program)
        out.result = {}
    out.diagnostics = list(v.diagnostics)
    return out


def _check_rgref(text: str, file: str) -> Outcome:
    out = Outcome("rgref", file)
    types: dict[str, rgref.RGRefType] = {}
    verdicts = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].split("//", 1)[0].strip()
        if not line:
            continue
        sp = Span(file, lineno, len(raw) - len(raw.lstrip()) + 1, len(line))
        try:
            decl = rgref.parse_decl_line(line, lineno)
        except (rgref.RgParseError, ValueError) as e:
            out.parse_failed = True
            out.diagnostics.append(reject("RG-PARSE", sp, str(e)))
            continue
        diags: list[Diagnostic] = []
        verdict: dict = {"line": lineno, "text": line}
        match decl:
            case rgref.TypeDecl(name=name, type=t):
                verdict.update(kind="type", name=name, type=str(t))
                types[name] = t
                if not rgref.well_formed(t):
                    unstable = [str(r) for r in (t.rely, t.guarantee) if not rgref.pred_stable(t.pred, r)]
                    diags.append(reject("RG-ILL-FORMED", sp, f"{t}: {t.pred} is not stable under {', '.join(unstable)}"))
            case rgref.SplitDecl(source=src, left=a, right=b):
                verdict.update(kind="split", source=src, parts=[a, b])
                missing = [n for n in (src, a, b) if n not in types]
                if missing:
                    diags += [reject("RG-UNDEFINED", sp, f"type {n} is not declared") for n in dict.fromkeys(missing)]
                else:
                    for rule, detail in rgref.split_failures(types[src], types[a], types[b]):
                        diags.append(reject(rule, sp, detail))
            case rgref.WriteDecl(name=name, old=old, new=new):
                verdict.update(kind="write", name=name, old=old, new=new)
                t = types.get(name)
                if t is None:
                    diags.append(reject("RG-UNDEFINED", sp, f"type {name} is not declared"))
                elif not t.pred.holds(old):
                    diags.append(reject("RG-WRITE-PRE", sp, f"{old} does not satisfy {t.pred}"))
                elif not rgref.write_check(t, old, new):
                    diags.append(reject("RG-WRITE-DENIED", sp, f"{old} -> {new} is outside the guarantee {t.guarantee}"))
        verdict["accepted"] = not diags
        verdict["rules"] = [d.rule for d in diags]
        verdicts.append(verdict)
        out.diagnostics += diags
    out.result = {"verdicts": verdicts}
    return out


def _check_proto(discipline: str, text: str, file: str) -> Outcome:
    out = Outcome(discipline, file)
    try:
        program = proto.parse_proto(text, file)
    except proto.ProtoParseError as e:
        out.parse_failed = True
        out.diagnostics.append(reject("PL-PARSE", e.span, e.message))
        return out
    res = proto.analyze_proto_program(program, effect_variant=discipline == "protolayout-effect")
    out.diagnostics = res.diagnostics
    out.result = {"env": {k: str(v) for k, v in res.env.items() if v is not None},
                  "prototypes": {k: str(v) for k, v in res.prototypes.items()}}
    return out


def check_source(discipline: str, text: str, file: str) -> Outcome:
    if discipline in KERNEL_DISCIPLINES:
        return _check_kernel(discipline, text, file)
    if discipline == "rgref":
        return _check_rgref(text, file)
    if discipline in ("protolayout", "protolayout-effect"):
        return _check_proto(discipline, text, file)
    raise ValueError(f"unknown discipline {discipline!r}")


def check_file(discipline: str, path: str) -> Outcome:
    return check_source(discipline, Path(path).read_text(encoding="utf-8"), path)


# ---------------------------------------------------------------------------
# output


def _color_enabled(stream) -> bool:
    return os.environ.get("DISCIPLINE_LAB_COLOR", "1") != "0" and hasattr(stream, "isatty") and stream.isatty()


def _paint(text: str, code: str, stream) -> str:
    return f"\033[{code}m{text}\033[0m" if _color_enabled(stream) else text


def _print_human(o: Outcome, stream) -> None:
    for d in o.diagnostics:
        print(d.render(), file=stream)
    for k, v in sorted(o.result.items()):
        if k == "verdicts":
            continue
        print(f"{k}: {json.dumps(v, sort_keys=True, ensure_ascii=False)}", file=stream)
    if o.parse_failed:
        verdict = _paint("error", "33", stream)
    elif o.accepted:
        verdict = _paint("accept", "32", stream)
    else:
        verdict = _paint("reject", "31", stream)
    print(f"{o.file}: {o.discipline}: {verdict}", file=stream)


# ---------------------------------------------------------------------------
# corpus


@dataclass(frozen=True)
class CorpusCase:
    path: str
    discipline: str
    expect: str
    rule: str | None = None

    def describe(self) -> str:
        exp = self.expect if self.rule is None else f"{self.expect}({self.rule})"
        return f"{self.path} [{self.discipline}] expect {exp}"


def load_manifest(path: Path) -> list[CorpusCase]:
    data = json.loads(path.read_text(encoding="utf-8"))
    cases = []
    for entry in data.get("cases", []):
        if entry.get("discipline") not in DISCIPLINES or entry.get("expect") not in ("accept", "reject"):
            raise ValueError(f"bad manifest entry {entry!r}")
        cases.append(CorpusCase(entry["path"], entry["discipline"], entry["expect"], entry.get("rule")))
    return cases


def case_matches(case: CorpusCase, o: Outcome) -> bool:
    if o.parse_failed:
        return False
    if case.expect == "accept":
        return o.accepted
    if o.accepted:
        return False
    return case.rule is None or case.rule in {d.rule for d in o.diagnostics if d.is_reject}


def run_corpus(manifest: Path, stream=None) -> int:
    stream = stream or sys.stdout
    try:
        cases = load_manifest(manifest)
    except (OSError, ValueError) as e:
        print(f"error: cannot read manifest {manifest}: {e}", file=sys.stderr)
        return EXIT_USAGE
    base = manifest.parent
    paths = [base / c.path for c in cases]
    missing = [str(p) for p in paths if not p.is_file()]
    if missing:
        print("error: missing corpus files: " + ", ".join(missing), file=sys.stderr)
        return EXIT_USAGE
    with ThreadPoolExecutor() as pool:
        outcomes = list(pool.map(lambda cp: check_file(cp[0].discipline, str(cp[1])), zip(cases, paths)))
    mismatches = 0
    for case, o in zip(cases, outcomes):
        ok = case_matches(case, o)
        mismatches += not ok
        got = "accept" if o.accepted else ("error" if o.parse_failed else
                                          "reject(" + ",".join(sorted({d.rule for d in o.diagnostics if d.is_reject})) + ")")
        tag = _paint("ok", "32", stream) if ok else _paint("MISMATCH", "31", stream)
        print(f"{tag} {case.describe()}: got {got}", file=stream)
    print(f"{len(cases)} cases, {len(cases) - mismatches} matched, {mismatches} mismatched", file=stream)
    return EXIT_OK if mismatches == 0 else EXIT_REJECT


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="discipline-lab", description="Static discipline laboratory.")
    sub = ap.add_subparsers(dest="command", required=True)
    c = sub.add_parser("check", help="check one file under one discipline")
    c.add_argument("--discipline", required=True, choices=DISCIPLINES)
    c.add_argument("--json", action="store_true", help="emit machine-readable diagnostics")
    c.add_argument("file")
    d = sub.add_parser("diff", help="compare capability and effect par verdicts on random programs")
    d.add_argument("--seed", type=int, default=42)
    d.add_argument("--count", type=int, default=1000)
    d.add_argument("--out", help="write the JSON report here instead of standard output")
    m = sub.add_parser("corpus", help="run a manifest of expected verdicts")
    m.add_argument("manifest")
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK

    if args.command == "check":
        try:
            o = check_file(args.discipline, args.file)
        except OSError as e:
            print(f"error: {e}", file=sys.stderr)
            return EXIT_USAGE
        if args.json:
            print(dumps_report(o.to_json()))
        else:
            _print_human(o, sys.stdout)
        return o.exit_code

    if args.command == "diff":
        if args.count < 0:
            print("error: --count must be non-negative", file=sys.stderr)
            return EXIT_USAGE
        report = run_diff(GenConfig.default(args.seed, args.count))
        text = dumps_report(report.to_json())
        if args.out:
            Path(args.out).write_text(text + "\n", encoding="utf-8")
            summary = ", ".join(f"{c}={report.counts[c]}" for c in (*CELLS, ILL_FORMED))
            print(f"seed {args.seed}, {args.count} programs: {summary}")
        else:
            print(text)
        return EXIT_OK if report.spot_check_failures == 0 else EXIT_REJECT

    return run_corpus(Path(args.manifest))


if __name__ == "__main__":
    sys.exit(main())
