import json
import warnings

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from relcorrel.corpus import (
    LABEL_SEGMENT,
    Document,
    Entity,
    Fact,
    InputLengthError,
    LoadError,
    Mention,
    MentionOverlapError,
    RelationSchema,
    SchemaError,
    Vocab,
    build_joint_input,
    document_to_record,
    dump_dataset,
    enumerate_entity_pairs,
    insert_mention_markers,
    load_dataset,
    parse_records,
)

SCHEMA = RelationSchema.from_mapping({"P1": "one", "P2": "two", "P3": "three", "P4": "four"})


def record(**overrides):
    rec = {
        "title": "fixture",
        "sents": [["Alice", "was", "born", "in", "Paris", "."], ["She", "left", "Paris", "."]],
        "vertexSet": [
            [{"name": "Alice", "sent_id": 0, "pos": [0, 1], "type": "PER"}],
            [
                {"name": "Paris", "sent_id": 0, "pos": [4, 5], "type": "LOC"},
                {"name": "Paris", "sent_id": 1, "pos": [2, 3], "type": "LOC"},
            ],
        ],
        "labels": [{"h": 0, "t": 1, "r": "P2", "evidence": [0]}],
    }
    rec.update(overrides)
    return rec


def doc_from_spans(sentences, spans, facts=()):
    """spans: list of entities, each a list of (sent_id, start, end)."""
    entities = tuple(
        Entity(tuple(Mention(s, a, b, " ".join(sentences[s][a:b]), "T") for s, a, b in ent)) for ent in spans
    )
    return Document("d", tuple(tuple(s) for s in sentences), entities, tuple(facts))


class TestLoading:
    def test_two_sentence_fixture_field_by_field(self):
        (doc,) = parse_records([record()], SCHEMA)
        assert doc.id == "fixture"
        assert len(doc.sentences) == 2
        assert len(doc.entities) == 2
        assert doc.entities[1].mentions[1] == Mention(1, 2, 3, "Paris", "LOC")
        assert doc.facts == (Fact(0, 1, 1, (0,)),)
        assert doc.relation_set == frozenset({1})

    def test_empty_list(self, tmp_path):
        path = tmp_path / "empty.json"
        path.write_text("[]")
        assert load_dataset(path, SCHEMA) == []

    def test_duplicate_facts_merge_evidence(self):
        labels = [{"h": 0, "t": 1, "r": "P2", "evidence": [1]}, {"h": 0, "t": 1, "r": "P2", "evidence": [0]}]
        (doc,) = parse_records([record(labels=labels)], SCHEMA)
        assert doc.facts == (Fact(0, 1, 1, (0, 1)),)

    def test_unknown_relation(self):
        with pytest.raises(SchemaError, match="P9"):
            parse_records([record(labels=[{"h": 0, "t": 1, "r": "P9"}])], SCHEMA)

    @pytest.mark.parametrize(
        "overrides, field",
        [
            ({"sents": "oops"}, "sents"),
            ({"vertexSet": [[{"sent_id": 0, "pos": [0, 9]}]]}, "vertexSet[0][0].pos"),
            ({"labels": [{"h": 0, "t": 5, "r": "P1"}]}, "labels[0].t"),
            ({"labels": [{"h": 1, "t": 1, "r": "P1"}]}, "labels[0].t"),
        ],
    )
    def test_malformed_record_names_index_and_field(self, overrides, field):
        with pytest.raises(LoadError) as err:
            parse_records([record(), record(**overrides)], SCHEMA)
        assert err.value.record == 1
        assert err.value.field == field

    def test_round_trip(self, tmp_path):
        docs = parse_records([record(), record(title="second", labels=[])], SCHEMA)
        path = tmp_path / "out.json"
        dump_dataset(docs, path, SCHEMA)
        assert load_dataset(path, SCHEMA) == docs
        assert document_to_record(docs[0], SCHEMA)["labels"][0]["r"] == "P2"

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{not json")
        with pytest.raises(LoadError):
            load_dataset(path, SCHEMA)


class TestSchema:
    def test_na_is_not_a_member(self):
        with pytest.raises(SchemaError):
            RelationSchema.from_mapping({"Na": "none", "P1": "x"})

    def test_duplicate_ids(self):
        with pytest.raises(SchemaError):
            RelationSchema(("P1", "P1"), ("a", "b"))

    def test_load_preserves_order(self, tmp_path):
        path = tmp_path / "rel.json"
        path.write_text(json.dumps({"P9": "z", "P1": "a"}))
        schema = RelationSchema.load(path)
        assert schema.ids == ("P9", "P1")
        assert schema.index("P1") == 1


class TestMarkers:
    def test_single_mention_offsets(self):
        doc = doc_from_spans([["a", "b", "c", "d", "e", "f"]], [[(0, 2, 4)]])
        vocab = Vocab("abcdef", 1)
        marked = insert_mention_markers(doc, vocab)
        assert marked.entity_markers == ((2,),)
        assert marked.marker_positions == (2, 5)
        assert len(marked.token_ids) == 8
        assert marked.token_ids[2] == marked.token_ids[5] == vocab.marker_id

    def test_zero_entities_is_identity(self):
        doc = doc_from_spans([["a", "b", "c"]], [])
        vocab = Vocab("abc", 1)
        marked = insert_mention_markers(doc, vocab)
        assert list(marked.token_ids) == [vocab.word_ids(w)[0] for w in "abc"]
        assert marked.entity_markers == ()

    def test_two_mentions_two_leading_markers(self):
        doc = doc_from_spans([["a", "b", "c"], ["d", "e"]], [[(0, 0, 1), (1, 1, 2)]])
        marked = insert_mention_markers(doc, Vocab("abcde", 1))
        # a -> * a * b c d * e *
        assert marked.entity_markers == ((0, 6),)

    def test_adjacent_mentions(self):
        doc = doc_from_spans([["a", "b"]], [[(0, 0, 1)], [(0, 1, 2)]])
        marked = insert_mention_markers(doc, Vocab("ab", 1))
        assert marked.entity_markers == ((0,), (3,))
        assert marked.marker_positions == (0, 2, 3, 5)

    @pytest.mark.parametrize("spans", [[[(0, 0, 3)], [(0, 1, 2)]], [[(0, 0, 2)], [(0, 1, 3)]]])
    def test_overlap_rejected(self, spans):
        doc = doc_from_spans([["a", "b", "c"]], spans)
        with pytest.raises(MentionOverlapError):
            insert_mention_markers(doc, Vocab("abc", 1))

    @settings(max_examples=100, deadline=None)
    @given(st.data())
    def test_markers_wrap_every_mention_and_strip_back(self, data):
        n_words = data.draw(st.integers(1, 20))
        words = [f"w{i}" for i in range(n_words)]
        cuts = sorted(data.draw(st.sets(st.integers(0, n_words), min_size=2, max_size=n_words + 1)))
        intervals = [(a, b) for a, b in zip(cuts, cuts[1:]) if b > a]
        intervals = data.draw(st.lists(st.sampled_from(intervals), unique=True)) if intervals else []
        owners = [data.draw(st.integers(0, 2)) for _ in intervals]
        spans = [[(0, a, b) for (a, b), o in zip(intervals, owners) if o == e] for e in range(3)]
        spans = [s for s in spans if s]
        doc = doc_from_spans([words], spans)
        vocab = Vocab(words, 1)
        marked = insert_mention_markers(doc, vocab)
        n_mentions = sum(len(s) for s in spans)
        assert len(marked.marker_positions) == 2 * n_mentions
        stripped = [t for i, t in enumerate(marked.token_ids) if i not in set(marked.marker_positions)]
        assert stripped == [vocab.word_ids(w)[0] for w in words]
        for ent, positions in zip(spans, marked.entity_markers):
            assert len(positions) == len(ent)
            for (_, a, _), p in zip(ent, positions):
                assert marked.token_ids[p] == vocab.marker_id
                assert marked.token_ids[p + 1] == vocab.word_ids(words[a])[0]


class TestJointInput:
    def setup_method(self):
        self.vocab = Vocab([f"w{i}" for i in range(10)], 4)
        self.doc = doc_from_spans([[f"w{i}" for i in range(10)]], [[(0, 3, 5)]])

    def test_layout(self):
        marked = insert_mention_markers(self.doc, self.vocab)
        joint = build_joint_input(marked, 4, self.vocab, 64)
        v = self.vocab
        # 10 words + 2 markers, CLS, SEP, 4 relations, SEP
        assert joint.length == 12 + 1 + 1 + 4 + 1
        assert joint.token_ids[0] == v.cls_id and joint.token_ids[13] == v.sep_id and joint.token_ids[-1] == v.sep_id
        assert joint.relation_positions == (14, 15, 16, 17)
        assert [joint.token_ids[p] for p in joint.relation_positions] == [v.relation_token_id(r) for r in range(4)]
        assert joint.doc_span == (1, 13)
        assert joint.entity_markers == ((4,),)
        assert joint.position_ids[14:18] == (LABEL_SEGMENT,) * 4
        assert joint.position_ids[:14] == tuple(range(14))

    def test_docred_sized_schema(self):
        vocab = Vocab([f"w{i}" for i in range(10)], 96)
        joint = build_joint_input(insert_mention_markers(self.doc, vocab), 96, vocab, 512)
        assert len(joint.relation_positions) == 96

    def test_empty_schema_rejected(self):
        marked = insert_mention_markers(self.doc, self.vocab)
        with pytest.raises(SchemaError):
            build_joint_input(marked, 0, self.vocab, 64)

    def test_truncation_warns_and_strict_raises(self):
        marked = insert_mention_markers(self.doc, self.vocab)
        with pytest.warns(UserWarning, match="truncating"):
            joint = build_joint_input(marked, 4, self.vocab, 4 + 3 + 5)
        assert joint.length == 12
        assert joint.relation_positions == (7, 8, 9, 10)
        # the entity's marker at doc position 3 survives the cut at 5
        assert joint.entity_markers == ((4,),)
        with pytest.raises(InputLengthError):
            build_joint_input(marked, 4, self.vocab, 12, strict=True)

    def test_entity_cut_entirely_falls_back_to_cls(self):
        marked = insert_mention_markers(self.doc, self.vocab)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            joint = build_joint_input(marked, 4, self.vocab, 4 + 3 + 2)
        assert joint.entity_markers == ((0,),)


class TestPairs:
    def test_counts(self):
        doc = doc_from_spans([["a", "b", "c"]], [[(0, 0, 1)], [(0, 1, 2)], [(0, 2, 3)]], [Fact(0, 2, 1)])
        pairs = enumerate_entity_pairs(doc)
        assert len(pairs) == 6
        assert [(h, t) for h, t, labels in pairs if labels] == [(0, 2)]

    def test_single_entity(self):
        assert enumerate_entity_pairs(doc_from_spans([["a"]], [[(0, 0, 1)]])) == []

    def test_multi_label_pair(self):
        doc = doc_from_spans([["a", "b"]], [[(0, 0, 1)], [(0, 1, 2)]], [Fact(0, 1, 0), Fact(0, 1, 3)])
        labelled = [labels for _, _, labels in enumerate_entity_pairs(doc) if labels]
        assert labelled == [frozenset({0, 3})]

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 7), st.data())
    def test_every_fact_in_exactly_one_pair(self, p, data):
        spans = [[(0, i, i + 1)] for i in range(p)]
        possible = [(h, t, r) for h in range(p) for t in range(p) if h != t for r in range(3)]
        chosen = data.draw(st.lists(st.sampled_from(possible), unique=True)) if possible else []
        doc = doc_from_spans([[f"w{i}" for i in range(p)]], spans, [Fact(h, t, r) for h, t, r in chosen])
        pairs = enumerate_entity_pairs(doc)
        assert len(pairs) == p * (p - 1)
        for h, t, r in chosen:
            assert sum(1 for a, b, labels in pairs if (a, b) == (h, t) and r in labels) == 1
