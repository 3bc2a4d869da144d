import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from gradcheck import check_gradients
from relcorrel.batching import collate, prepare_document
from relcorrel.corpus import Document, Entity, Fact, Mention, Vocab
from relcorrel.encoder import EncoderConfig, init_parameters
from relcorrel.repmodel import (
    DocREModel,
    PairClassifier,
    context_vector,
    document_pair_features,
    entity_attention,
    grouped_bilinear,
    pair_logits,
    pool_entity,
    relation_aggregated_embedding,
    sum_normalize,
)

D = torch.float64


def brute_aggregate(values, att_s, att_o):
    """Loop oracle for H^T Norm(sum_k A_s^k * A_o^k)."""
    heads, n = att_s.shape
    w = [sum(float(att_s[k, i]) * float(att_o[k, i]) for k in range(heads)) for i in range(n)]
    total = sum(w)
    w = [x / total for x in w]
    return torch.tensor([sum(w[i] * float(values[i, j]) for i in range(n)) for j in range(values.shape[1])], dtype=D)


class TestPooling:
    def test_single_mention_is_identity(self):
        h = torch.randn(5, 4, dtype=D)
        assert torch.equal(pool_entity(h, [3]), h[3])

    def test_identical_mentions_add_ln2(self):
        h = torch.randn(1, 4, dtype=D).repeat(3, 1)
        assert torch.allclose(pool_entity(h, [0, 2]), h[0] + math.log(2), atol=1e-12)

    def test_scalar_value(self):
        h = torch.tensor([[0.0], [1.0]], dtype=D)
        assert float(pool_entity(h, [0, 1])) == pytest.approx(math.log(1 + math.e), abs=1e-12)
        assert round(float(pool_entity(h, [0, 1])), 4) == 1.3133

    def test_large_values_stay_finite(self):
        h = torch.tensor([[1000.0], [1000.0]], dtype=D)
        assert float(pool_entity(h, [0, 1])) == pytest.approx(1000 + math.log(2))

    def test_empty(self):
        with pytest.raises(ValueError):
            pool_entity(torch.zeros(2, 2), [])

    @settings(max_examples=200, deadline=None)
    @given(hnp.arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 4)), elements=st.floats(-50, 50)))
    def test_bounds(self, arr):
        h = torch.from_numpy(arr)
        pooled = pool_entity(h, list(range(h.shape[0])))
        mx = h.max(dim=0).values
        assert torch.all(pooled >= mx - 1e-12)
        assert torch.all(pooled <= mx + math.log(h.shape[0]) + 1e-12)


class TestEntityAttention:
    def test_single_row_unchanged(self):
        a = torch.softmax(torch.randn(2, 5, 5, dtype=D), -1)
        assert torch.equal(entity_attention(a, [1]), a[:, 1])

    def test_mean_of_two_rows(self):
        a = torch.softmax(torch.randn(2, 5, 5, dtype=D), -1)
        out = entity_attention(a, [1, 4])
        assert torch.allclose(out, (a[:, 1] + a[:, 4]) / 2)
        assert torch.allclose(out.sum(-1), torch.ones(2, dtype=D))

    def test_empty(self):
        with pytest.raises(ValueError):
            entity_attention(torch.ones(1, 2, 2), [])


class TestNormalization:
    def test_zero_sum_falls_back_to_uniform(self):
        assert torch.equal(sum_normalize(torch.zeros(4, dtype=D)), torch.full((4,), 0.25, dtype=D))

    @settings(max_examples=200, deadline=None)
    @given(hnp.arrays(np.float64, st.integers(1, 12), elements=st.floats(0, 1e6)))
    def test_simplex(self, arr):
        out = sum_normalize(torch.from_numpy(arr))
        assert torch.all(out >= 0)
        assert abs(float(out.sum()) - 1.0) <= 1e-8


class TestAggregation:
    def test_uniform_single_head_is_mean(self):
        h = torch.randn(4, 3, dtype=D)
        a = torch.full((1, 4), 0.25, dtype=D)
        assert torch.allclose(context_vector(h, a, a), h.mean(0))

    def test_delta_mass(self):
        h = torch.randn(4, 3, dtype=D)
        a = torch.zeros(1, 4, dtype=D)
        a[0, 2] = 1.0
        assert torch.allclose(context_vector(h, a, a), h[2])
        assert torch.allclose(relation_aggregated_embedding(h, a, a), h[2])

    def test_hand_weights_two_heads(self):
        h = torch.randn(3, 5, dtype=D)
        w = torch.tensor([0.2, 0.3, 0.5], dtype=D)
        a = torch.stack([w, w])
        out = context_vector(h, a, a)
        expected = (w**2 / (w**2).sum()) @ h
        assert torch.allclose(out, expected, atol=1e-12)
        assert torch.allclose(out, brute_aggregate(h, a, a), atol=1e-10)

    def test_relation_fixture(self):
        h_r = torch.tensor([[1.0, 0.0], [0.0, 2.0], [3.0, 3.0]], dtype=D)
        a_s = torch.tensor([[0.5, 0.25, 0.25]], dtype=D)
        a_o = torch.tensor([[0.2, 0.6, 0.2]], dtype=D)
        # weights 0.1, 0.15, 0.05 -> 1/3, 1/2, 1/6
        expected = torch.tensor([1 / 3 + 0.5, 1.0 + 0.5], dtype=D)
        assert torch.allclose(relation_aggregated_embedding(h_r, a_s, a_o), expected, atol=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 8), st.integers(1, 3), st.integers(0, 10_000))
    def test_matches_loop_oracle(self, n, heads, seed):
        g = torch.Generator().manual_seed(seed)
        h = torch.randn(n, 4, generator=g, dtype=D)
        a_s = torch.softmax(torch.randn(heads, n, generator=g, dtype=D), -1)
        a_o = torch.softmax(torch.randn(heads, n, generator=g, dtype=D), -1)
        assert torch.allclose(context_vector(h, a_s, a_o), brute_aggregate(h, a_s, a_o), atol=1e-10)
        assert torch.allclose(relation_aggregated_embedding(h, a_s, a_o), brute_aggregate(h, a_s, a_o), atol=1e-10)


class TestBilinear:
    def test_hand_fixture(self):
        w = torch.tensor([[[[0.0, 1.0], [0.0, 0.0]]]], dtype=D)
        logit = grouped_bilinear(torch.tensor([[1.0, 0.0]], dtype=D), torch.tensor([[0.0, 1.0]], dtype=D), w, torch.zeros(1, dtype=D))
        assert float(logit) == 1.0
        assert round(float(torch.sigmoid(logit)), 4) == 0.7311

    def test_zero_parameters(self):
        clf = PairClassifier(8, 3, 2).double()
        for p in clf.parameters():
            torch.nn.init.zeros_(p)
        x = torch.randn(4, 8, dtype=D)
        logits = clf(x, x, x, x)
        assert torch.equal(logits, torch.zeros(4, 3, dtype=D))
        assert torch.equal(torch.sigmoid(logits), torch.full((4, 3), 0.5, dtype=D))

    def test_groups_equal_block_diagonal(self):
        g = torch.Generator().manual_seed(0)
        w = torch.randn(3, 2, 4, 4, generator=g, dtype=D)
        fs, fo = torch.randn(5, 8, generator=g, dtype=D), torch.randn(5, 8, generator=g, dtype=D)
        b = torch.randn(3, generator=g, dtype=D)
        block = torch.zeros(3, 1, 8, 8, dtype=D)
        block[:, 0, :4, :4] = w[:, 0]
        block[:, 0, 4:, 4:] = w[:, 1]
        diff = grouped_bilinear(fs, fo, w, b) - grouped_bilinear(fs, fo, block, b)
        assert diff.abs().max() < 1e-10

    def test_width_mismatch(self):
        with pytest.raises(ValueError):
            grouped_bilinear(torch.zeros(1, 6), torch.zeros(1, 6), torch.zeros(2, 2, 4, 4), torch.zeros(2))

    def test_group_count_must_divide(self):
        with pytest.raises(ValueError):
            PairClassifier(10, 2, 4)


class TestClassifier:
    def test_shapes_of_fusion_maps(self):
        with_corr = PairClassifier(8, 3, 2, use_correlation=True)
        base = PairClassifier(8, 3, 2, use_correlation=False)
        assert with_corr.w_ctx_s.weight.shape == (8, 16)
        assert base.w_ctx_s.weight.shape == (8, 8)

    def test_formula(self):
        torch.manual_seed(1)
        clf = PairClassifier(4, 2, 2).double()
        hs, ho, c, r = (torch.randn(3, 4, dtype=D) for _ in range(4))
        ctx = torch.cat([c, r], -1)
        fs = torch.tanh(hs @ clf.w_s.weight.T + ctx @ clf.w_ctx_s.weight.T)
        fo = torch.tanh(ho @ clf.w_o.weight.T + ctx @ clf.w_ctx_o.weight.T)
        expected = torch.stack(
            [
                sum(fs[:, 2 * i : 2 * i + 2] @ clf.bilinear[rel, i] * fo[:, 2 * i : 2 * i + 2] for i in range(2)).sum(-1)
                + clf.bias[rel]
                for rel in range(2)
            ],
            -1,
        )
        assert torch.allclose(pair_logits(hs, ho, c, r, clf, True), expected, atol=1e-12)

    def test_base_variant_ignores_relation_feature(self):
        clf = PairClassifier(4, 2, 2, use_correlation=False).double()
        x = torch.randn(2, 4, dtype=D)
        assert torch.equal(pair_logits(x, x, x, None, clf, False), pair_logits(x, x, x, 5 * x, clf, False))

    def test_missing_relation_feature(self):
        clf = PairClassifier(4, 2, 2)
        with pytest.raises(ValueError):
            clf(torch.zeros(1, 4), torch.zeros(1, 4), torch.zeros(1, 4))

    def test_setting_mismatch(self):
        clf = PairClassifier(4, 2, 2, use_correlation=True)
        x = torch.zeros(1, 4)
        with pytest.raises(ValueError):
            pair_logits(x, x, x, x, clf, False)

    def test_gradients_bilinear_bce(self):
        torch.manual_seed(2)
        clf = PairClassifier(8, 3, 2).double()
        hs, ho, c, r = (torch.randn(5, 8, dtype=D) for _ in range(4))
        labels = (torch.rand(5, 3) > 0.5).to(D)

        def loss():
            return F.binary_cross_entropy_with_logits(clf(hs, ho, c, r), labels, reduction="sum")

        assert check_gradients(loss, list(clf.parameters())) < 1e-4


def small_document():
    sents = [["a", "b", "c", "d"], ["e", "a", "f"]]
    ents = [
        Entity((Mention(0, 0, 1, "a", "T"), Mention(1, 1, 2, "a", "T"))),
        Entity((Mention(0, 2, 3, "c", "T"),)),
        Entity((Mention(1, 2, 3, "f", "T"),)),
    ]
    return Document("doc", tuple(tuple(s) for s in sents), tuple(ents), (Fact(0, 1, 1), Fact(2, 0, 0)))


class TestDocumentFeatures:
    def setup_method(self):
        self.vocab = Vocab("abcdef", 3)
        self.item = prepare_document(small_document(), self.vocab, 3, 64)
        torch.manual_seed(0)
        self.encoder = init_parameters(EncoderConfig(len(self.vocab), 8, 2, 1, 16, 64, 0.0), 0).double().eval()
        self.clf = PairClassifier(8, 3, 2).double()

    def test_matches_per_pair_functions(self):
        out = self.encoder(**{k: v for k, v in zip(("input_ids", "position_ids", "attention_mask"), collate([self.item]).values())})
        hidden, att = out.hidden[0], out.attention[0]
        feats = document_pair_features(hidden, att, self.item, self.clf)
        assert feats.logits.shape == (6, 3)
        joint = self.item.joint
        d0, d1 = joint.doc_span
        rel = list(joint.relation_positions)
        for p in range(self.item.num_pairs):
            h, t = int(self.item.heads[p]), int(self.item.tails[p])
            ms, mo = joint.entity_markers[h], joint.entity_markers[t]
            a_s, a_o = entity_attention(att, ms), entity_attention(att, mo)
            assert torch.allclose(feats.h_s[p], pool_entity(hidden, ms))
            assert torch.allclose(feats.c[p], context_vector(hidden[d0:d1], a_s[:, d0:d1], a_o[:, d0:d1]))
            assert torch.allclose(feats.r_so[p], relation_aggregated_embedding(hidden[rel], a_s[:, rel], a_o[:, rel]))
        assert torch.equal(feats.relation_embeddings, hidden[rel])

    def test_model_forward_and_labels(self):
        model = DocREModel(self.encoder, self.clf)
        (feats,) = model(collate([self.item]), [self.item])
        assert torch.isfinite(feats.logits).all()
        pairs = list(zip(self.item.heads.tolist(), self.item.tails.tolist()))
        assert self.item.labels[pairs.index((0, 1)), 1] == 1
        assert self.item.labels[pairs.index((2, 0)), 0] == 1
        assert int(self.item.labels.sum()) == 2
        assert self.item.non_na.tolist().count(True) == 2
