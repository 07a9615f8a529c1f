import json
import re
import subprocess
import sys
from pathlib import Path

import pytest

from discipline_lab.cli import (
    DISCIPLINES,
    check_file,
    check_source,
    load_manifest,
    main,
)
from discipline_lab.diagnostics import RULES, Diagnostic, Span, dumps_report

ROOT = Path(__file__).resolve().parent.parent
CORPUS = ROOT / "corpus"
SRC = ROOT / "src" / "discipline_lab"


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def test_recover_frame_accepts(capsys):
    code, out, _ = run(capsys, "check", "--discipline", "refcap", str(CORPUS / "recover_frame.kl"))
    assert code == 0
    assert "accept" in out


def test_background_ui_flow_rejected_by_capbound(capsys):
    code, out, _ = run(capsys, "check", "--discipline", "ui-capbound", "--json", str(CORPUS / "fig2.kl"))
    assert code == 1
    report = json.loads(out)
    assert report["schema"] == 1
    assert [d["rule"] for d in report["diagnostics"]] == ["EFF-UIBOUND-FLOW"]


def test_prototype_call_single_reject(capsys):
    code, out, _ = run(capsys, "check", "--discipline", "protolayout", "--json", str(CORPUS / "fig3.pl"))
    assert code == 1
    rejects = [d for d in json.loads(out)["diagnostics"] if d["severity"] == "reject"]
    assert len(rejects) == 1 and rejects[0]["span"]["line"] == 14


def test_parse_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.kl"
    bad.write_text("par { skip }")
    code, out, _ = run(capsys, "check", "--discipline", "refcap", "--json", str(bad))
    assert code == 2
    d = json.loads(out)["diagnostics"][0]
    assert d["rule"] == "KL-PARSE" and d["span"]["line"] == 1


def test_usage_errors(capsys):
    assert run(capsys, "check", "--discipline", "nope", "x.kl")[0] == 2
    assert run(capsys)[0] == 2
    assert run(capsys, "check", "--discipline", "refcap", "/no/such/file.kl")[0] == 2
    assert run(capsys, "diff", "--count", "-1")[0] == 2


def test_json_is_byte_stable(capsys):
    args = ("check", "--discipline", "rgref", "--json", str(CORPUS / "rg_split_ok.rg"))
    first = run(capsys, *args)[1]
    second = run(capsys, *args)[1]
    assert first == second
    # re-serialising the parsed report reproduces it exactly: keys sorted, nothing volatile
    assert first.rstrip("\n") == dumps_report(json.loads(first))


def test_rgref_verdicts_per_line():
    o = check_file("rgref", str(CORPUS / "rg_naive_dup.rg"))
    verdicts = o.result["verdicts"]
    split = next(v for v in verdicts if v["kind"] == "split")
    assert not split["accepted"] and "RG-SPLIT-TOLERATE" in split["rules"]
    assert not o.accepted


def test_rgref_undefined_and_parse():
    o = check_source("rgref", "split A -> A, A\n", "x.rg")
    assert [d.rule for d in o.diagnostics] == ["RG-UNDEFINED"]
    o = check_source("rgref", "frobnicate\n", "x.rg")
    assert o.parse_failed and o.exit_code == 2


def test_unknown_discipline():
    with pytest.raises(ValueError):
        check_source("optimism", "", "x")


def test_no_color_when_disabled(monkeypatch, capsys):
    monkeypatch.setenv("DISCIPLINE_LAB_COLOR", "0")
    _, out, _ = run(capsys, "check", "--discipline", "refcap", str(CORPUS / "recover.kl"))
    assert "\033[" not in out


# -- diff --------------------------------------------------------------------


def test_diff_writes_report(tmp_path, capsys):
    out_file = tmp_path / "r.json"
    code, out, _ = run(capsys, "diff", "--seed", "42", "--count", "200", "--out", str(out_file))
    assert code == 0
    report = json.loads(out_file.read_text())
    assert report["programCount"] == 200 and sum(report["counts"].values()) == 200
    assert "bothAccept=" in out


def test_diff_stdout_is_deterministic(capsys):
    a = run(capsys, "diff", "--seed", "7", "--count", "50")[1]
    b = run(capsys, "diff", "--seed", "7", "--count", "50")[1]
    assert a == b


# -- corpus ------------------------------------------------------------------


def test_shipped_manifest_matches(capsys):
    code, out, _ = run(capsys, "corpus", str(CORPUS / "manifest.json"))
    assert code == 0
    assert "0 mismatched" in out


def test_manifest_order_preserved(capsys):
    _, out, _ = run(capsys, "corpus", str(CORPUS / "manifest.json"))
    paths = [line.split(" ")[1] for line in out.splitlines() if line.startswith("ok ")]
    assert paths == [c.path for c in load_manifest(CORPUS / "manifest.json")]


def test_empty_manifest(tmp_path, capsys):
    m = tmp_path / "m.json"
    m.write_text('{"cases": []}')
    code, out, _ = run(capsys, "corpus", str(m))
    assert code == 0 and "0 cases" in out


def test_flipped_expectation(tmp_path, capsys):
    data = json.loads((CORPUS / "manifest.json").read_text())
    case = data["cases"][0]
    case["expect"] = "accept" if case["expect"] == "reject" else "reject"
    case.pop("rule", None)
    for c in data["cases"]:
        c["path"] = str(CORPUS / c["path"])
    m = tmp_path / "m.json"
    m.write_text(json.dumps(data))
    code, out, _ = run(capsys, "corpus", str(m))
    assert code == 1
    assert out.count("MISMATCH") == 1 and "1 mismatched" in out


def test_missing_corpus_file(tmp_path, capsys):
    m = tmp_path / "m.json"
    m.write_text('{"cases": [{"path": "gone.kl", "discipline": "refcap", "expect": "accept"}]}')
    assert run(capsys, "corpus", str(m))[0] == 2


def test_every_corpus_file_has_a_case():
    cases = load_manifest(CORPUS / "manifest.json")
    listed = {c.path for c in cases}
    shipped = {p.name for p in CORPUS.iterdir() if p.suffix in (".kl", ".pl", ".rg")}
    assert shipped == listed
    assert {c.discipline for c in cases} == set(DISCIPLINES)


# -- registry ----------------------------------------------------------------


def _emitted_rule_names() -> set[str]:
    names = set()
    for path in SRC.glob("*.py"):
        if path.name in ("cli.py", "diagnostics.py"):
            continue
        names |= set(re.findall(r'"([A-Z]{2,}(?:-[A-Z]+)*)"', path.read_text()))
    names |= {"KL-PARSE", "RG-PARSE", "PL-PARSE", "RG-UNDEFINED", "RG-ILL-FORMED", "RG-WRITE-PRE", "RG-WRITE-DENIED"}
    return names


def test_every_emitted_rule_is_registered_and_documented():
    docs = (ROOT / "docs" / "rules.md").read_text()
    emitted = _emitted_rule_names()
    assert emitted <= set(RULES)
    assert set(RULES) <= emitted
    for rule in RULES:
        assert f"`{rule}`" in docs


def test_cli_rule_literals_are_registered():
    text = (SRC / "cli.py").read_text()
    for rule in re.findall(r'reject\("([A-Z-]+)"', text):
        assert rule in RULES


def test_unknown_rule_is_refused():
    with pytest.raises(ValueError):
        Diagnostic("MADE-UP", "reject", Span("f", 1, 1), "nope")


def test_console_script_runs():
    proc = subprocess.run([sys.executable, "-m", "discipline_lab.cli", "check", "--discipline", "heapwrite",
                           str(CORPUS / "par_varassign.kl")], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
