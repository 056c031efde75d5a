import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dmnplus import autodiff as ad
from dmnplus.autodiff import grad_check
from dmnplus.errors import InputError, ShapeError, VocabularyError
from dmnplus.nn import GruCell, apply_dropout, gru_step, init_weights, run_gru
from dmnplus.text import (EmbeddingTable, Vocabulary, encode_question, encode_sentence_pe,
                          encode_sentences_pe, encode_story_word_gru, pad_sentences,
                          positional_weights)


def gru_reference(cell, x, h):
    """Scalar-loop GRU written directly from the gate equations."""
    W = {k: getattr(cell, k).data for k in ("W_u", "U_u", "b_u", "W_r", "U_r", "b_r", "W_c", "U_c", "b_c")}
    sig = lambda z: 1 / (1 + np.exp(-z))
    u = sig(W["W_u"] @ x + W["U_u"] @ h + W["b_u"])
    r = sig(W["W_r"] @ x + W["U_r"] @ h + W["b_r"])
    c = np.tanh(W["W_c"] @ x + r * (W["U_c"] @ h) + W["b_c"])
    return u * c + (1 - u) * h


class TestVocabulary:
    def test_reserved(self):
        v = Vocabulary(["b", "a"])
        assert v.encode(["b", "a", "zzz"]) == [2, 3, 1]
        assert v.decode([0, 1]) == ["<pad>", "<unk>"]

    def test_bijective(self):
        v = Vocabulary(["x", "y", "x"])
        assert len(v) == 4
        assert v.decode(v.encode(["x", "y"])) == ["x", "y"]
        assert Vocabulary.from_list(v.to_list()) == v


class TestEmbedding:
    def test_pad_row_zero(self, rng):
        emb = EmbeddingTable.create(5, 4, rng)
        assert not emb.weight.data[0].any()
        assert emb.weight.shape == (5, 4)

    def test_out_of_range(self, rng):
        emb = EmbeddingTable.create(5, 4, rng)
        with pytest.raises(VocabularyError):
            emb.lookup([5])
        with pytest.raises(IndexError):
            emb.lookup([-1])


class TestPositional:
    def test_closed_form(self):
        l = positional_weights(2, 2)
        # j=1: (1-1/2) - (d/2)(1-1); j=2: 0 - (d/2)(-1)
        np.testing.assert_allclose(l, [[0.5, 0.5], [0.5, 1.0]], rtol=1e-15)

    def test_single_word_identity_weights(self):
        # M=1: l_d = 0 - (d/D)(-1) = d/D
        np.testing.assert_allclose(positional_weights(1, 4)[0], [0.25, 0.5, 0.75, 1.0])

    def test_order_sensitive(self, rng):
        emb = EmbeddingTable.create(6, 5, rng)
        a = encode_sentence_pe([2, 3, 4], emb).data
        b = encode_sentence_pe([4, 3, 2], emb).data
        assert not np.allclose(a, b)

    def test_matches_manual_sum(self, rng):
        emb = EmbeddingTable.create(6, 5, rng)
        ids = [2, 5, 3]
        l = positional_weights(3, 5)
        manual = sum(l[j] * emb.weight.data[i] for j, i in enumerate(ids))
        np.testing.assert_allclose(encode_sentence_pe(ids, emb).data, manual, rtol=1e-14)

    def test_padding_uses_true_length(self, rng):
        emb = EmbeddingTable.create(6, 5, rng)
        sents = [[2, 3], [4, 5, 2, 3]]
        batch = encode_sentences_pe(pad_sentences(sents), emb).data
        for row, s in zip(batch, sents):
            np.testing.assert_allclose(row, encode_sentence_pe(s, emb).data, rtol=1e-14)

    def test_empty(self, rng):
        with pytest.raises(InputError):
            encode_sentence_pe([], EmbeddingTable.create(3, 2, rng))


class TestGru:
    def test_matches_reference(self, rng):
        cell = GruCell.create(3, 4, rng)
        for p in cell.parameters().values():
            p.data[...] = rng.normal(size=p.shape)
        x, h = rng.normal(size=3), rng.normal(size=4)
        np.testing.assert_allclose(gru_step(cell, ad.const(x), ad.const(h)).data,
                                   gru_reference(cell, x, h), rtol=1e-13)

    def test_zero_cell_halves_state(self):
        # all-zero parameters: u = 1/2, candidate 0, so h -> h/2
        h = np.array([1.0, -2.0])
        out = gru_step(GruCell.zeros(3, 2), ad.const(np.ones(3)), ad.const(h))
        np.testing.assert_array_equal(out.data, h / 2)

    def test_shape_errors(self, rng):
        cell = GruCell.create(3, 4, rng)
        with pytest.raises(ShapeError):
            gru_step(cell, ad.const(np.zeros(2)), ad.const(np.zeros(4)))
        with pytest.raises(ShapeError):
            gru_step(cell, ad.const(np.zeros(3)), ad.const(np.zeros(5)))

    def test_mask_carries_state(self, rng):
        cell = GruCell.create(2, 3, rng)
        xs = rng.normal(size=(4, 2))
        states = run_gru(cell, ad.const(xs), mask=np.array([True, True, False, False]))
        assert np.array_equal(states[1].data, states[3].data)

    def test_gradients(self, rng):
        cell = GruCell.create(3, 4, rng)
        xs = ad.tensor(rng.normal(size=(5, 3)), requires_grad=True)
        report = grad_check(lambda: ad.reduce_sum(ad.tanh(run_gru(cell, xs)[-1])),
                            {**cell.parameters(), "xs": xs})
        assert report.passed, report.summary()

    def test_update_free_cell_has_no_update_params(self, rng):
        cell = GruCell.create(3, 4, rng, update_gate=False)
        assert not cell.has_update_gate
        assert not any("_u" in k for k in cell.parameters())


class TestEncoders:
    def test_question_is_final_state(self, rng):
        emb = EmbeddingTable.create(6, 3, rng)
        cell = GruCell.create(3, 4, rng)
        ids = [2, 4, 5]
        h = ad.const(np.zeros(4))
        for i in ids:
            h = gru_step(cell, ad.const(emb.weight.data[i]), h)
        np.testing.assert_allclose(encode_question(ids, emb, cell).data, h.data, rtol=1e-13)

    def test_word_gru_one_fact_per_sentence_end(self, rng):
        emb = EmbeddingTable.create(6, 3, rng)
        cell = GruCell.create(3, 4, rng)
        sents = [[2, 3], [4], [5, 2, 3]]
        facts = encode_story_word_gru(sents, emb, cell)
        h, ends = ad.const(np.zeros(4)), []
        for s in sents:
            for i in s:
                h = gru_step(cell, ad.const(emb.weight.data[i]), h)
            ends.append(h.data)
        assert len(facts) == 3
        for f, e in zip(facts, ends):
            np.testing.assert_allclose(f.data, e, rtol=1e-13)

    def test_empty_inputs(self, rng):
        emb = EmbeddingTable.create(6, 3, rng)
        cell = GruCell.create(3, 4, rng)
        with pytest.raises(InputError):
            encode_question([], emb, cell)
        with pytest.raises(InputError):
            encode_story_word_gru([], emb, cell)


class TestDropout:
    def test_identity_at_eval(self, rng):
        x = ad.const(rng.normal(size=10))
        assert apply_dropout(x, 0.5, rng, training=False) is x
        assert apply_dropout(x, 1.0, rng, training=True) is x

    def test_inverted_scaling(self, rng):
        y = apply_dropout(ad.const(np.ones(20000)), 0.9, rng, training=True).data
        assert set(np.unique(y)) <= {0.0, 1 / 0.9}
        assert abs(y.mean() - 1.0) < 0.02

    def test_bad_keep(self, rng):
        with pytest.raises(ValueError):
            apply_dropout(ad.const(np.ones(2)), 0.0, rng, training=True)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6))
def test_xavier_bounds(fan_in, fan_out):
    w = init_weights("xavier_uniform", (fan_out, fan_in), np.random.default_rng(0))
    assert np.abs(w).max() <= np.sqrt(6 / (fan_in + fan_out))
