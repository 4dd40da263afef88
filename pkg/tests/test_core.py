import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from civicgraph.core import (
    BACKGROUND,
    SEEN,
    UNSEEN,
    BoundingBox,
    DomainPartition,
    ObjectVocabulary,
    PredicateVocabulary,
    ScoredRelation,
    VocabularyError,
    filter_civic_relations,
    load_reference_resources,
    map_to_target_class,
    partition_triples,
    rank_relations,
    read_object_vocabulary,
    read_partition,
    read_predicate_vocabulary,
    read_triple_records,
    read_triples,
    write_object_vocabulary,
    write_partition,
    write_predicate_vocabulary,
    write_triples,
)


@pytest.fixture(scope="module")
def ref():
    return load_reference_resources()


def box(x=0.5, y=0.5, w=0.1, h=0.1):
    return BoundingBox(x, y, w, h)


def rel(s, p, o, score):
    return ScoredRelation(s, box(), p, o, box(), score)


# -- types ---------------------------------------------------------------

def test_box_rejects_bad_sizes():
    with pytest.raises(ValueError):
        BoundingBox(0, 0, 0, 1)
    with pytest.raises(ValueError):
        BoundingBox(0, 0, 1, -1)
    with pytest.raises(ValueError):
        BoundingBox(math.nan, 0, 1, 1)


def test_box_corners():
    assert box(0.5, 0.5, 0.2, 0.4).corners() == pytest.approx((0.4, 0.3, 0.6, 0.7))


def test_vocabulary_must_be_disjoint_cover():
    with pytest.raises(VocabularyError):
        ObjectVocabulary(("a", "b"), frozenset({0, 1}), frozenset({1}))
    with pytest.raises(VocabularyError):
        ObjectVocabulary(("a", "b", "c"), frozenset({0}), frozenset({1}))
    with pytest.raises(VocabularyError):
        ObjectVocabulary(("a", "a"), frozenset({0}), frozenset({1}))


def test_predicate_vocabulary_reserves_background():
    pv = PredicateVocabulary(("on", "near"))
    assert pv.predicates[0] == BACKGROUND
    assert pv.index("on") == 1
    assert pv.num_relations == 2
    with pytest.raises(VocabularyError):
        pv.index(BACKGROUND)
    # already-prefixed input is not doubled
    assert PredicateVocabulary(pv.predicates) == pv


def test_relation_rejects_background():
    with pytest.raises(ValueError):
        rel(0, 0, 1, 0.5)
    with pytest.raises(ValueError):
        rel(0, 1, 1, math.inf)


def test_partition_overlap_rejected():
    with pytest.raises(ValueError):
        DomainPartition(frozenset({(0, 1)}), frozenset({(0, 1)}))


def test_partition_label():
    part = DomainPartition(frozenset({(0, 1)}), frozenset({(2, 1)}))
    assert part.label((0, 1)) == SEEN
    assert part.label((2, 1)) == UNSEEN
    assert part.label((1, 0)) is None


def test_reference_vocabulary_sizes(ref):
    assert len(ref.objects) == 19
    assert ref.predicates.num_relations == 32
    assert len(ref.civic_triples) == 130


# -- partition_triples ---------------------------------------------------

def test_seen_example(ref):
    part = partition_triples([("tree", "over", "fence")], ref.source_pairs, ref.objects)
    o = ref.objects
    assert part.seen_pairs == {(o.index("tree"), o.index("fence"))}
    assert not part.unseen_pairs


def test_unseen_example(ref):
    part = partition_triples([("garbage", "on", "street")], ref.source_pairs, ref.objects)
    o = ref.objects
    assert part.unseen_pairs == {(o.index("garbage"), o.index("street"))}


def test_empty_source_vocab_all_unseen(ref):
    part = partition_triples(ref.civic_triples, [], ref.objects)
    assert not part.seen_pairs
    assert len(part.unseen_pairs) == len({(a, b) for a, _, b in ref.civic_triples})


def test_unknown_class_names_triple(ref):
    triples = [("tree", "over", "fence"), ("dragon", "on", "street")]
    with pytest.raises(VocabularyError, match=r"#1.*dragon"):
        partition_triples(triples, ref.source_pairs, ref.objects)


def test_reference_split_is_80_50(ref):
    part = partition_triples(ref.civic_triples, ref.source_pairs, ref.objects, ref.predicates)
    assert len(part.seen_triples) == 80
    assert len(part.unseen_triples) == 50


def test_partition_is_ordered(ref):
    o = ref.objects
    part = partition_triples([("fence", "near", "tree")], [("tree", "fence")], o)
    assert part.unseen_pairs == {(o.index("fence"), o.index("tree"))}


names = st.sampled_from(["a", "b", "c", "d", "e"])


@settings(max_examples=200, deadline=None)
@given(
    st.lists(st.tuples(names, st.sampled_from(["on", "near"]), names), max_size=20),
    st.lists(st.tuples(names, names), max_size=10),
)
def test_partition_covers_distinct_pairs(triples, source):
    vocab = ObjectVocabulary(("a", "b", "c", "d", "e"), frozenset({0, 1}), frozenset({2, 3, 4}))
    part = partition_triples(triples, source, vocab)
    pairs = {(vocab.index(a), vocab.index(b)) for a, _, b in triples}
    assert not part.seen_pairs & part.unseen_pairs
    assert part.seen_pairs | part.unseen_pairs == pairs


# -- map_to_target_class -------------------------------------------------

def _sim(table):
    return lambda a, b: table.get(b, 0.0)


def test_map_exact_match(ref):
    assert map_to_target_class("pothole", ref.objects, lambda a, b: float(a == b)) == ref.objects.index("pothole")


def test_map_below_threshold(ref):
    assert map_to_target_class("rubbish", ref.objects, _sim({"garbage": 0.39})) is None


def test_map_threshold_is_exclusive(ref):
    assert map_to_target_class("rubbish", ref.objects, _sim({"garbage": 0.4})) is None
    assert map_to_target_class("rubbish", ref.objects, _sim({"garbage": 0.41})) == ref.objects.index("garbage")


def test_map_tie_prefers_lower_index():
    for classes in (("x", "y", "z"), ("z", "y", "x")):
        vocab = ObjectVocabulary(classes, frozenset({0}), frozenset({1, 2}))
        got = map_to_target_class("q", vocab, _sim({"x": 0.8, "z": 0.8}))
        assert got == min(vocab.index("x"), vocab.index("z"))


@given(st.lists(st.floats(0.0, 0.4), min_size=3, max_size=3))
def test_map_none_when_all_at_or_below(sims):
    vocab = ObjectVocabulary(("x", "y", "z"), frozenset({0}), frozenset({1, 2}))
    table = dict(zip(vocab.classes, sims))
    assert map_to_target_class("q", vocab, _sim(table)) is None


# -- filtering and ranking -----------------------------------------------

VOCAB = ObjectVocabulary(("garbage", "pothole", "street", "wall"), frozenset({0, 1}), frozenset({2, 3}))


def test_filter_keeps_first_five():
    ranked = rank_relations([rel(0, 1, 2, 0.9 - 0.1 * k) for k in range(7)])
    out = filter_civic_relations(ranked, VOCAB)
    assert out == ranked[:5]


def test_filter_drops_context_context():
    ranked = rank_relations([rel(2, 1, 3, 0.99), rel(0, 1, 2, 0.5)])
    assert filter_civic_relations(ranked, VOCAB) == [ranked[1]]


def test_filter_fewer_than_k():
    ranked = rank_relations([rel(0, 1, 2, 0.3), rel(2, 2, 1, 0.2), rel(1, 1, 3, 0.1)])
    assert filter_civic_relations(ranked, VOCAB) == ranked


def test_rank_tie_break():
    a, b, c = rel(1, 1, 2, 0.5), rel(0, 2, 2, 0.5), rel(0, 1, 2, 0.5)
    assert rank_relations([a, b, c]) == [c, b, a]


rels = st.builds(
    rel,
    st.integers(0, 3),
    st.integers(1, 3),
    st.integers(0, 3),
    st.floats(0, 1),
)


@given(st.lists(rels, max_size=15), st.integers(0, 8))
def test_filter_properties(items, k):
    ranked = rank_relations(items)
    out = filter_civic_relations(ranked, VOCAB, k)
    assert len(out) <= k
    assert all(r.predicate != 0 for r in out)
    assert filter_civic_relations(out, VOCAB, k) == out
    idx = [ranked.index(r) for r in out]
    assert idx == sorted(idx)


# -- files ---------------------------------------------------------------

def test_triple_file_roundtrip(tmp_path, ref):
    p = tmp_path / "t.tsv"
    write_triples(p, ref.civic_triples)
    assert read_triples(p) == ref.civic_triples


def test_triple_file_image_id(tmp_path):
    p = tmp_path / "t.tsv"
    p.write_text("# header\ngarbage\ton\tstreet\timg7\n\npothole\tin\tstreet\n")
    assert read_triple_records(p) == [("garbage", "on", "street", "img7"), ("pothole", "in", "street", None)]


def test_triple_file_bad_line(tmp_path):
    p = tmp_path / "t.tsv"
    p.write_text("garbage\ton\n")
    with pytest.raises(ValueError, match=":1:"):
        read_triples(p)


def test_vocab_and_partition_roundtrip(tmp_path, ref):
    write_object_vocabulary(tmp_path / "o.tsv", ref.objects)
    write_predicate_vocabulary(tmp_path / "p.tsv", ref.predicates)
    assert read_object_vocabulary(tmp_path / "o.tsv") == ref.objects
    assert read_predicate_vocabulary(tmp_path / "p.tsv") == ref.predicates
    part = partition_triples(ref.civic_triples, ref.source_pairs, ref.objects)
    write_partition(tmp_path / "part.tsv", part, ref.objects)
    back = read_partition(tmp_path / "part.tsv", ref.objects)
    assert back.seen_pairs == part.seen_pairs and back.unseen_pairs == part.unseen_pairs
