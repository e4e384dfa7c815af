import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from drft import autograd as ag
from drft.autograd import Parameter, Tensor
from drft.encoders import EncodedQuery, QueryTokens, TextEncoder, encode_text
from drft.gradcheck import grad_check
from drft.lgi import LGI, LocalGlobal, SequentialQueryAttention, local_global_interaction, \
    sequential_query_attention


def query(rng, N=5, c=8):
    return EncodedQuery(Tensor(rng.normal(size=(N, c))), Tensor(rng.normal(size=c)))


class TestSequentialQueryAttention:
    def test_single_word_gives_all_ones(self, rng):
        sqa = SequentialQueryAttention(rng, 8, 3)
        _, qa = sequential_query_attention(query(rng, N=1), sqa)
        assert qa.A.data.tolist() == [[1.0, 1.0, 1.0]]

    @given(st.integers(1, 7), st.integers(1, 4), st.integers(0, 1000))
    def test_columns_are_distributions(self, N, S, seed):
        r = np.random.default_rng(seed)
        sqa = SequentialQueryAttention(r, 8, S)
        _, qa = sequential_query_attention(query(r, N=N), sqa)
        A = qa.A.data
        assert A.shape == (N, S) and (A >= 0).all()
        np.testing.assert_allclose(A.sum(axis=0), 1.0, atol=1e-6)

    def test_phrase_is_attention_weighted_words(self, rng):
        sqa = SequentialQueryAttention(rng, 8, 3)
        eq = query(rng, N=6)
        phrases, qa = sequential_query_attention(eq, sqa)
        A, W = qa.A.data, eq.word_features.data
        for s in range(3):
            oracle = sum(A[n, s] * W[n] for n in range(6))
            np.testing.assert_allclose(phrases.data[s], oracle, atol=1e-12)

    def test_steps_condition_on_previous_phrase(self, rng):
        sqa = SequentialQueryAttention(rng, 8, 2)
        eq = query(rng)
        _, qa = sequential_query_attention(eq, sqa)
        base = qa.A.data[:, 1].copy()
        sqa.prev_proj.weight.data *= 3.0
        _, qa2 = sequential_query_attention(eq, sqa)
        np.testing.assert_array_equal(qa2.A.data[:, 0], qa.A.data[:, 0])  # step 1 has no previous phrase
        assert not np.allclose(qa2.A.data[:, 1], base)

    def test_padding_gets_no_attention(self, rng):
        sqa = SequentialQueryAttention(rng, 8, 2)
        words = Tensor(rng.normal(size=(2, 4, 8)))
        mask = np.array([[1, 1, 1, 1], [1, 1, 0, 0]], dtype=bool)
        _, qa = sqa(EncodedQuery(words, Tensor(rng.normal(size=(2, 8))), mask))
        assert np.all(qa.A.data[1, 2:] < 1e-12)

    def test_zero_steps_rejected(self, rng):
        with pytest.raises(ValueError):
            SequentialQueryAttention(rng, 8, 0)


class TestLocalGlobal:
    def test_shape(self, rng):
        lg = LocalGlobal(rng, 8)
        out = local_global_interaction(rng.normal(size=(6, 8)), rng.normal(size=(3, 8)), lg, "flow")
        assert out.M.shape == (6, 8) and out.modality == "flow"

    def test_phrase_order_invariant(self, rng):
        lg = LocalGlobal(rng, 8)
        seg, ph = rng.normal(size=(5, 8)), rng.normal(size=(3, 8))
        a = local_global_interaction(seg, ph, lg).M.data
        b = local_global_interaction(seg, ph[[2, 0, 1]], lg).M.data
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_single_phrase_equals_unaveraged_path(self, rng):
        lg = LocalGlobal(rng, 8)
        seg, ph = Tensor(rng.normal(size=(1, 5, 8))), Tensor(rng.normal(size=(1, 1, 8)))
        np.testing.assert_array_equal(lg(seg, ph).data, lg.per_phrase(seg, ph).data[:, 0])

    def test_mean_over_phrases(self, rng):
        lg = LocalGlobal(rng, 8)
        seg, ph = Tensor(rng.normal(size=(2, 5, 8))), Tensor(rng.normal(size=(2, 3, 8)))
        per = lg.per_phrase(seg, ph).data
        np.testing.assert_allclose(lg(seg, ph).data, per.mean(axis=1), atol=1e-12)

    def test_query_dependence(self):
        rng = np.random.default_rng(11)
        text = TextEncoder(rng, 12, 8)
        lgi = LGI(rng, 8, 2, "rgb")
        seg = Tensor(rng.normal(size=(1, 6, 8)))
        outs = []
        for ids in ([1, 2, 3], [4, 5, 6]):
            eq = text(np.array([ids]))
            outs.append(lgi(seg, eq)[0].M.data)
        assert not np.allclose(outs[0], outs[1])

    def test_feature_size_mismatch(self, rng):
        with pytest.raises(ag.DimensionError):
            local_global_interaction(rng.normal(size=(4, 8)), rng.normal(size=(2, 6)), LocalGlobal(rng, 8))

    def test_gradient_finite_difference(self, rng):
        """T=4, c=8, S=2 through sequential attention and local-global interaction."""
        lgi = LGI(rng, 8, 2, "depth")
        seg = Parameter(rng.normal(size=(1, 4, 8)))
        eq = EncodedQuery(Tensor(rng.normal(size=(1, 5, 8))), Tensor(rng.normal(size=(1, 8))))
        r = rng.normal(size=(1, 4, 8))

        def f():
            return (lgi(seg, eq)[0].M * r).sum()

        assert grad_check(f, lgi.parameters() + [seg], max_coords=10) < 1e-3
