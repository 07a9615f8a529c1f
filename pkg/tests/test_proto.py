import random
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from discipline_lab.proto import (
    EMPTY_ROW,
    NUMBER,
    UNIT,
    MethodT,
    ObjType,
    ProtoError,
    ProtoParseError,
    Row,
    analyze_proto_program,
    attach_method,
    check_field_read,
    check_field_write,
    check_method_call,
    check_method_call_effect,
    check_proto_program,
    concretize,
    lub_effect_variant,
    lub_nc,
    parse_proto,
    subtype_np,
)

from strategies import concrete_types, effect_method_types

CORPUS = Path(__file__).resolve().parent.parent / "corpus"
INC = MethodT((), UNIT)
F_NC = ObjType(Row.of({"inc": INC}), Row.of({"x": NUMBER}), None, True)
G_NC = ObjType(Row.of({"inc": INC}), Row.of({"y": NUMBER}), None, True)
COMMON = ObjType(Row.of({"inc": INC}), EMPTY_ROW, None, True)
F_PROTO = ObjType(Row.of({"inc": INC}), EMPTY_ROW, (EMPTY_ROW, Row.of({"x": NUMBER})))
F_INSTANCE = ObjType(Row.of({"inc": INC}), Row.of({"x": NUMBER}), (EMPTY_ROW, Row.of({"x": NUMBER})))


def rejects(diags):
    return [d for d in diags if d.is_reject]


def load(name):
    return parse_proto((CORPUS / name).read_text(), name)


# -- type operations ---------------------------------------------------------


def test_field_write_examples():
    assert check_field_write(F_NC, "x")
    assert not check_field_write(F_NC, "y")
    assert not check_field_write(F_PROTO, "x")


def test_field_read_examples():
    assert check_field_read(F_NC, "inc") == INC
    assert check_field_read(F_NC, "x") == NUMBER
    with pytest.raises(ProtoError) as e:
        check_field_read(ObjType(), "x")
    assert e.value.rule == "ABSENT"


def test_concretize_examples():
    assert concretize(F_INSTANCE) == F_NC
    with pytest.raises(ProtoError) as e:
        concretize(F_PROTO)
    assert e.value.rule == "NOT-CONCRETE" and e.value.names == ("x",)
    assert concretize(ObjType(macc=(EMPTY_ROW, EMPTY_ROW))) == ObjType(concrete=True)


def test_method_call_examples():
    assert check_method_call(F_NC, "inc") == UNIT
    with pytest.raises(ProtoError) as e:
        check_method_call(F_PROTO, "inc")
    assert e.value.rule == "NOT-CONCRETE-RECEIVER"
    rich = ObjType(Row.of({"inc": INC, "incAndCount": MethodT((), NUMBER)}), Row.of({"x": NUMBER}), None, True)
    assert check_method_call(rich, "incAndCount") == NUMBER
    with pytest.raises(ProtoError) as e:
        check_method_call(F_NC, "inc", [NUMBER])
    assert e.value.rule == "ARG-MISMATCH"
    with pytest.raises(ProtoError) as e:
        check_method_call(F_NC, "x")
    assert e.value.rule == "NO-SUCH-METHOD"


def test_subtype_examples():
    assert subtype_np(F_NC, COMMON)
    assert subtype_np(G_NC, COMMON)
    xm = ObjType(EMPTY_ROW, Row.of({"x": INC}), None, True)
    assert not subtype_np(ObjType(EMPTY_ROW, Row.of({"x": NUMBER}), None, True), xm)
    assert lub_nc(F_NC, G_NC) == COMMON


def test_subtype_requires_concrete_types():
    with pytest.raises(ValueError):
        subtype_np(F_PROTO, COMMON)


def test_attach_examples():
    assume_x = ObjType(EMPTY_ROW, Row.of({"x": NUMBER}))
    out = attach_method(F_PROTO, "count", assume_x, MethodT((), NUMBER))
    assert out.r.get("count") == MethodT((), NUMBER)
    with pytest.raises(ProtoError) as e:
        attach_method(F_PROTO, "bad", ObjType(EMPTY_ROW, Row.of({"q": NUMBER})), INC)
    assert e.value.rule == "ATTACH-EXCEEDS" and e.value.names == ("q",)
    assert attach_method(F_PROTO, "pure", ObjType(), MethodT((), NUMBER)).r.get("pure")
    with pytest.raises(ProtoError) as e:
        attach_method(F_PROTO, "inc", ObjType(), MethodT((), NUMBER))
    assert e.value.rule == "ATTACH-SIG"


# -- effect variant ----------------------------------------------------------

F_EFF = ObjType(Row.of({"inc": MethodT((), UNIT, frozenset({"x"}))}), Row.of({"x": NUMBER}))
G_EFF = ObjType(Row.of({"inc": MethodT((), UNIT, frozenset({"y"}))}), Row.of({"y": NUMBER}))


def test_effect_variant_lub_is_not_callable():
    t, bad = lub_effect_variant(F_EFF, G_EFF)
    assert bad == ["inc"]
    assert t.r.get("inc") == MethodT((), UNIT, frozenset({"x", "y"}))
    with pytest.raises(ProtoError) as e:
        check_method_call_effect(t, "inc")
    assert e.value.rule == "NOT-CALLABLE"


def test_effect_variant_contrast_with_nc_pipeline():
    f = concretize(F_INSTANCE)
    g = concretize(ObjType(Row.of({"inc": INC}), Row.of({"y": NUMBER}), (EMPTY_ROW, Row.of({"y": NUMBER}))))
    assert subtype_np(f, COMMON) and subtype_np(g, COMMON)
    assert check_method_call(COMMON, "inc") == UNIT
    _, bad = lub_effect_variant(F_EFF, G_EFF)
    assert bad == ["inc"]


def test_effect_variant_idempotent_and_local():
    t, bad = lub_effect_variant(F_EFF, F_EFF)
    assert t == F_EFF and bad == []
    assert check_method_call_effect(F_EFF, "inc") == UNIT


# -- whole programs ----------------------------------------------------------


def test_single_reject_at_prototype_call():
    r = rejects(check_proto_program(load("fig3.pl")))
    assert len(r) == 1
    assert r[0].span.line == 14 and r[0].rule == "NOT-CONCRETE-RECEIVER"


def test_program_without_prototype_call_is_clean():
    assert rejects(check_proto_program(load("fig3_prefix.pl"))) == []


def test_instance_calls_check():
    assert rejects(check_proto_program(load("fig3_calls.pl"))) == []


def test_joined_counters_under_both_variants():
    assert rejects(check_proto_program(load("fg.pl"))) == []
    r = rejects(check_proto_program(load("fg.pl"), effect_variant=True))
    assert [d.rule for d in r] == ["NOT-CALLABLE"]


def test_empty_program():
    assert check_proto_program(parse_proto("")) == []


def test_parse_error_has_position():
    with pytest.raises(ProtoParseError) as e:
        parse_proto("function F( {")
    assert e.value.span.line == 1


def test_method_demands_are_transitive():
    res = analyze_proto_program(load("fig3.pl"))
    mr, mw = res.demands["F.incAndCount"]
    assert "x" in mw.names()


# -- properties --------------------------------------------------------------


@settings(max_examples=200)
@given(concrete_types())
def test_subtype_reflexive(a):
    assert subtype_np(a, a)


@settings(max_examples=300)
@given(concrete_types(), concrete_types(), concrete_types())
def test_subtype_transitive(a, b, c):
    if subtype_np(a, b) and subtype_np(b, c):
        assert subtype_np(a, c)


def _weaken(t: ObjType, rng: random.Random) -> ObjType:
    """A supertype of ``t``: drop fields and move some w entries to r."""
    r = {n: ft for n, ft in t.r.entries if rng.random() < 0.7}
    w = {}
    for n, ft in t.w.entries:
        roll = rng.random()
        if roll < 0.4:
            w[n] = ft
        elif roll < 0.7:
            r[n] = ft
    return ObjType(Row.of(r), Row.of(w), None, True)


@settings(max_examples=200)
@given(concrete_types(), st.integers(0, 2**32))
def test_subtype_chains_are_transitive(a, seed):
    rng = random.Random(seed)
    b = _weaken(a, rng)
    c = _weaken(b, rng)
    assert subtype_np(a, b) and subtype_np(b, c) and subtype_np(a, c)


@settings(max_examples=200)
@given(concrete_types(), st.integers(0, 2**32))
def test_subtyping_preserves_callability(a, seed):
    b = _weaken(a, random.Random(seed))
    assert subtype_np(a, b)
    for m, ft in a.fields().items():
        if isinstance(ft, MethodT) and m in b.fields():
            args = list(ft.params)
            assert check_method_call(a, m, args) == ft.ret
            check_method_call(b, m, args)


@settings(max_examples=200)
@given(concrete_types(), concrete_types())
def test_lub_is_upper_bound(a, b):
    j = lub_nc(a, b)
    assert subtype_np(a, j) and subtype_np(b, j)


@settings(max_examples=200)
@given(st.lists(effect_method_types(), min_size=2, max_size=2), st.sets(st.sampled_from(("x", "y", "z"))))
def test_effect_lub_callability(ms, local):
    w = Row.of({n: NUMBER for n in sorted(local)})
    a = ObjType(Row.of({"run": ms[0]}), w)
    b = ObjType(Row.of({"run": ms[1]}), w)
    t, bad = lub_effect_variant(a, b)
    union = (ms[0].wr_eff or frozenset()) | (ms[1].wr_eff or frozenset())
    assert (bad == []) == (union <= local)


# -- concretization soundness by re-scan ------------------------------------

FIELDS = ("a", "b", "c")
METHODS = ("m0", "m1", "m2")


@st.composite
def proto_programs(draw):
    """A constructor, attached methods and one instantiation, plus the plan."""
    ctor_fields = draw(st.sets(st.sampled_from(FIELDS)))
    n = draw(st.integers(1, len(METHODS)))
    plan = {}
    for m in METHODS[:n]:
        ops = draw(st.lists(st.one_of(
            st.tuples(st.just("read"), st.sampled_from(FIELDS)),
            st.tuples(st.just("incr"), st.sampled_from(FIELDS)),
            st.tuples(st.just("call"), st.sampled_from(METHODS[:n])),
        ), max_size=3))
        plan[m] = ops
    lines = ["function F() {"] + [f"  this.{f} = 0;" for f in sorted(ctor_fields)] + ["}"]
    for m, ops in plan.items():
        body = []
        for k, (op, arg) in enumerate(ops):
            body.append({"read": f"var t{k} = this.{arg};", "incr": f"this.{arg}++;", "call": f"this.{arg}();"}[op])
        lines.append(f"F.prototype.{m} = function() {{ {' '.join(body)} }}")
    lines.append("var o = new F();")
    return "\n".join(lines) + "\n", ctor_fields, plan


def _rescan_demands(plan):
    """Fields each method touches, following this-calls to a fixpoint."""
    direct = {m: {arg for op, arg in ops if op != "call"} for m, ops in plan.items()}
    calls = {m: {arg for op, arg in ops if op == "call"} for m, ops in plan.items()}
    total = {m: set(fs) for m, fs in direct.items()}
    changed = True
    while changed:
        changed = False
        for m in plan:
            for callee in calls[m]:
                if not total[callee] <= total[m]:
                    total[m] |= total[callee]
                    changed = True
    return total


@settings(max_examples=200, deadline=None)
@given(proto_programs())
def test_concretization_soundness(prog):
    src, ctor_fields, plan = prog
    res = analyze_proto_program(parse_proto(src))
    o = res.env["o"]
    needed = set().union(*_rescan_demands(plan).values())
    if o is not None and o.concrete:
        assert needed <= ctor_fields
    else:
        assert not needed <= ctor_fields
