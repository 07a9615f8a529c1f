import itertools
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from discipline_lab.rgref import (
    MAX_CONST,
    ORACLE_BOUND,
    BoundedOracle,
    Pred,
    Rel,
    RGRefType,
    RgParseError,
    SplitDecl,
    TypeDecl,
    WriteDecl,
    catalog_preds,
    catalog_rels,
    compare_tables,
    enumerate_writes,
    parse_decl_line,
    parse_pred,
    parse_rel,
    pred_implies,
    pred_stable,
    rel_contains,
    rel_union_contains,
    split_check,
    split_failures,
    well_formed,
    write_check,
)

from strategies import preds, rels, rg_types

ORACLE = BoundedOracle()
GT5 = Pred("gtK", 5)
EQ, LE, ANY = Rel("eq"), Rel("le"), Rel("any")
READER = RGRefType(GT5, LE, EQ)
INCREMENTER = RGRefType(GT5, EQ, LE)
TOP = RGRefType(Pred("trueP"), ANY, ANY)


def test_rel_contains_examples():
    assert rel_contains(EQ, LE)
    assert not rel_contains(LE, EQ)
    assert rel_contains(Rel("incBy", 0), EQ)
    assert rel_contains(Rel("incBy", 3), Rel("lt"))
    assert not rel_contains(Rel("incBy", 0), Rel("lt"))


def test_pred_stable_examples():
    assert pred_stable(GT5, EQ)
    assert pred_stable(GT5, LE)
    assert not pred_stable(Pred("ltK", 5), LE)
    assert pred_stable(Pred("even"), Rel("incBy", 2))
    assert not pred_stable(Pred("even"), Rel("incBy", 1))


def test_well_formed_examples():
    assert well_formed(READER)
    assert not well_formed(RGRefType(GT5, ANY, EQ))
    assert well_formed(TOP)


def test_split_examples():
    assert split_check(READER, READER, READER)
    assert not split_check(INCREMENTER, INCREMENTER, INCREMENTER)
    assert split_check(TOP, TOP, TOP)
    assert split_check(INCREMENTER, INCREMENTER, READER)


def test_naive_duplication_names_the_tolerance_premise():
    rules = {r for r, _ in split_failures(INCREMENTER, INCREMENTER, INCREMENTER)}
    assert "RG-SPLIT-TOLERATE" in rules


def test_write_examples():
    assert write_check(INCREMENTER, 6, 9)
    assert not write_check(READER, 6, 9)
    for t in (READER, INCREMENTER, TOP):
        assert write_check(t, 7, 7)


def test_union_containment():
    assert rel_union_contains((Rel("lt"), EQ), LE)
    assert not rel_union_contains((Rel("lt"), Rel("gt")), EQ)
    assert rel_union_contains((Rel("lt"), Rel("gt"), EQ), ANY)


# -- oracle agreement --------------------------------------------------------


def test_symbolic_tables_agree_with_bounded_oracle():
    assert compare_tables() == []


def test_oracle_agreement_for_every_constant_up_to_cap():
    ks = range(MAX_CONST + 1)
    assert compare_tables(catalog_preds(ks), catalog_rels(ks), ORACLE) == []


def test_oracle_is_sensitive_to_a_wrong_table():
    # a deliberately wrong relation denotation must show up as mismatches
    class Broken(BoundedOracle):
        def rel_mask(self, r):
            m = super().rel_mask(r)
            return ~m if r.tag == "le" else m

    assert compare_tables(oracle=Broken())


@settings(max_examples=300)
@given(rels, rels)
def test_rel_contains_matches_oracle(a, b):
    assert rel_contains(a, b) == ORACLE.rel_contains(a, b)


@settings(max_examples=300)
@given(preds, rels)
def test_pred_stable_matches_oracle(p, r):
    assert pred_stable(p, r) == ORACLE.pred_stable(p, r)


@settings(max_examples=200)
@given(preds, preds)
def test_pred_implies_matches_oracle(p, q):
    assert pred_implies(p, q) == ORACLE.pred_implies(p, q)


# -- split properties --------------------------------------------------------


@st.composite
def split_candidates(draw):
    """Triples biased towards valid splits: parts share the source refinement."""
    t = draw(rg_types)
    parts = []
    for _ in range(2):
        pred = draw(st.one_of(st.just(t.pred), preds))
        parts.append(RGRefType(pred, draw(rels), draw(st.one_of(st.just(t.guarantee), rels))))
    return t, parts[0], parts[1]


@settings(max_examples=300)
@given(split_candidates())
def test_split_is_symmetric(tri):
    t, a, b = tri
    assert split_check(t, a, b) == split_check(t, b, a)


@settings(max_examples=300)
@given(split_candidates())
def test_split_safety(tri):
    t, t1, t2 = tri
    if split_check(t, t1, t2):
        writes = ORACLE.rel_mask(t1.guarantee)
        assert not np.any(writes & ~ORACLE.rel_mask(t2.rely))
        writes = ORACLE.rel_mask(t2.guarantee)
        assert not np.any(writes & ~ORACLE.rel_mask(t1.rely))


def test_split_safety_is_not_vacuous():
    rng = random.Random(7)
    ps, rs = catalog_preds(), catalog_rels()
    hits = 0
    for _ in range(2000):
        t = RGRefType(rng.choice(ps), rng.choice(rs), rng.choice(rs))
        # relies that assume at least the source's, guarantees within its own
        relies = [r for r in rs if rel_contains(t.rely, r)]
        guars = [g for g in rs if rel_contains(g, t.guarantee)]
        t1 = RGRefType(t.pred, rng.choice(relies), rng.choice(guars))
        t2 = RGRefType(t.pred, rng.choice(relies), rng.choice(guars))
        if split_check(t, t1, t2):
            hits += 1
            for a, b in enumerate_writes(t1, 12):
                assert t2.rely.holds(a, b)
    assert hits >= 20


@settings(max_examples=300)
@given(rg_types)
def test_predicate_preservation(t):
    if well_formed(t):
        p = ORACLE.pred_mask(t.pred)
        step = ORACLE.rel_mask(t.rely) | ORACLE.rel_mask(t.guarantee)
        assert not np.any(p[:, None] & step & ~p[None, :])


@settings(max_examples=200)
@given(rg_types, st.integers(0, ORACLE_BOUND), st.integers(0, ORACLE_BOUND))
def test_write_check_is_the_guarantee(t, a, b):
    assert write_check(t, a, b) == bool(ORACLE.rel_mask(t.guarantee)[a, b])


# -- declarations ------------------------------------------------------------


@pytest.mark.parametrize("text, pred", [
    ("N|>5", GT5), ("ℕ|>5", GT5), (">=3", Pred("geK", 3)), ("≤ 4", Pred("leK", 4)),
    ("=0", Pred("eqK", 0)), ("even", Pred("even")), ("N|true", Pred("trueP")),
])
def test_parse_pred(text, pred):
    assert parse_pred(text) == pred


@pytest.mark.parametrize("text, rel", [
    ("=", EQ), ("<=", LE), ("≥", Rel("ge")), ("any", ANY), ("+3", Rel("incBy", 3)),
])
def test_parse_rel(text, rel):
    assert parse_rel(text) == rel


@pytest.mark.parametrize("bad", ["~5", "> -1", "sometimes"])
def test_parse_pred_rejects(bad):
    with pytest.raises(RgParseError):
        parse_pred(bad)


def test_parse_decl_lines():
    assert parse_decl_line("type A = ref{N|>5}[<=,=]", 1) == TypeDecl(1, "A", READER)
    assert parse_decl_line("split A -> A, B", 2) == SplitDecl(2, "A", "A", "B")
    assert parse_decl_line("write A 6 9", 3) == WriteDecl(3, "A", 6, 9)
    with pytest.raises(RgParseError):
        parse_decl_line("merge A B", 4)


def test_printed_types_reparse():
    for p, r, g in itertools.product(catalog_preds(), catalog_rels()[:7], catalog_rels()[:7]):
        t = RGRefType(p, r, g)
        decl = parse_decl_line(f"type X = {t}", 1)
        assert decl.type == t
