import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from drft import autograd as ag
from drft.autograd import Parameter, Tensor
from drft.contrastive import (
    ContrastiveBatch,
    ProjectionHead,
    SamplingError,
    contrastive_loss,
    loss_from_similarities,
    pool_gt_batch,
    pool_gt_segment,
    sample_contrastive_batch,
    sample_contrastive_indices,
    segment_mask,
    segment_range,
    total_contrastive,
)
from drft.gradcheck import grad_check


def head(rng, c=6):
    return ProjectionHead(rng, c, c, c)


def scalar_oracle(h, anchor, pos, neg, tau):
    """Loop-based evaluation of the contrastive objective on plain floats."""

    def embed(x):
        z = np.maximum(x @ h.fc1.weight.data + h.fc1.bias.data, 0)
        z = z @ h.fc2.weight.data + h.fc2.bias.data
        return z / math.sqrt(sum(v * v for v in z))

    a = embed(anchor)
    num = sum(math.exp(float(a @ embed(p)) / tau) for p in pos)
    den = num + sum(math.exp(float(a @ embed(n)) / tau) for n in neg)
    return -math.log(num / den)


class TestSegmentPooling:
    def test_middle_half(self):
        m = np.arange(8.0).reshape(4, 2)
        assert segment_range(0.25, 0.75, 4) == (1, 2)
        np.testing.assert_allclose(pool_gt_segment(m, (0.25, 0.75)).data, m[1:3].mean(0))

    def test_full_span(self):
        m = np.arange(8.0).reshape(4, 2)
        np.testing.assert_allclose(pool_gt_segment(m, (0.0, 1.0)).data, m.mean(0))

    def test_degenerate_interval_uses_one_segment(self):
        m = np.arange(8.0).reshape(4, 2)
        assert segment_range(0.5, 0.5, 4) == (2, 2)
        assert np.array_equal(pool_gt_segment(m, (0.5, 0.5)).data, m[2])

    def test_end_clamped(self):
        assert segment_range(1.0, 1.0, 4) == (3, 3)
        assert segment_range(0.9, 1.0, 10) == (9, 9)

    def test_rounding_noise_snapped(self):
        # 0.3 * 10 is 3.0000000000000004 in floating point
        assert segment_range(0.1, 0.3, 10) == (1, 2)

    def test_reversed_interval_rejected(self):
        with pytest.raises(ValueError):
            segment_range(0.6, 0.4, 4)

    @given(st.floats(0, 1), st.floats(0, 1), st.integers(1, 64))
    def test_range_is_valid(self, a, b, T):
        s, e = min(a, b), max(a, b)
        lo, hi = segment_range(s, e, T)
        assert 0 <= lo <= hi <= T - 1

    def test_batch_matches_single(self, rng):
        M = rng.normal(size=(3, 5, 4))
        iv = np.array([[0.0, 0.4], [0.2, 1.0], [0.5, 0.5]])
        got = pool_gt_batch(Tensor(M), iv).data
        for i in range(3):
            np.testing.assert_allclose(got[i], pool_gt_segment(M[i], iv[i]).data, atol=1e-12)
        assert segment_mask(iv, 5).sum(1).tolist() == [2, 4, 1]


class TestContrastiveLoss:
    def test_equal_similarities(self, rng):
        x = rng.normal(size=6)
        batch = ContrastiveBatch(x, np.tile(x, (3, 1)), np.tile(x, (4, 1)), 0.1)
        loss = contrastive_loss(batch, head(rng)).item()
        assert loss == pytest.approx(-math.log(3 / 7), abs=1e-12)
        assert loss == pytest.approx(0.8473, abs=1e-4)

    def test_saturation(self):
        loss = loss_from_similarities(np.ones(3), -np.ones(4), 0.1).item()
        assert 0 < loss < 1e-8

    def test_matches_scalar_oracle(self, rng):
        h = head(rng)
        for _ in range(5):
            a, p, n = rng.normal(size=6), rng.normal(size=(3, 6)), rng.normal(size=(4, 6))
            got = contrastive_loss(ContrastiveBatch(a, p, n, 0.1), h).item()
            assert got == pytest.approx(scalar_oracle(h, a, p, n, 0.1), abs=1e-10)

    def test_batched_anchors_match_single(self, rng):
        h = head(rng)
        a, p, n = rng.normal(size=(4, 6)), rng.normal(size=(4, 3, 6)), rng.normal(size=(4, 4, 6))
        got = contrastive_loss(ContrastiveBatch(a, p, n), h).data
        for i in range(4):
            single = contrastive_loss(ContrastiveBatch(a[i], p[i], n[i]), h).item()
            assert got[i] == pytest.approx(single, abs=1e-12)

    @given(st.integers(0, 10**6), st.integers(0, 6), st.booleans())
    def test_monotone_in_similarities(self, seed, k, positive):
        r = np.random.default_rng(seed)
        pos, neg = r.uniform(-1, 1, 3), r.uniform(-1, 1, 4)
        base = loss_from_similarities(pos, neg, 0.1).item()
        if positive:
            pos[k % 3] += 0.05
            assert loss_from_similarities(pos, neg, 0.1).item() < base
        else:
            neg[k % 4] += 0.05
            assert loss_from_similarities(pos, neg, 0.1).item() > base

    @given(st.integers(0, 10**6))
    def test_strictly_positive(self, seed):
        r = np.random.default_rng(seed)
        assert loss_from_similarities(r.uniform(-1, 1, 3), r.uniform(-1, 1, 4), 0.1).item() > 0

    def test_order_invariance(self, rng):
        h = head(rng)
        a, p, n = rng.normal(size=6), rng.normal(size=(3, 6)), rng.normal(size=(4, 6))
        base = contrastive_loss(ContrastiveBatch(a, p, n), h).item()
        shuffled = contrastive_loss(ContrastiveBatch(a, p[[2, 0, 1]], n[[3, 1, 0, 2]]), h).item()
        assert shuffled == pytest.approx(base, abs=1e-12)

    def test_embeddings_unit_norm(self, rng):
        h = head(rng)
        e = h.embed(Tensor(rng.normal(size=(20, 6)) * 10)).data
        np.testing.assert_allclose(np.linalg.norm(e, axis=-1), 1.0, atol=1e-6)

    def test_contract_errors(self, rng):
        with pytest.raises(ValueError):
            ContrastiveBatch(np.zeros(4), np.zeros((0, 4)), np.ones((4, 4)))
        with pytest.raises(ValueError):
            ContrastiveBatch(np.zeros(4), np.ones((3, 4)), np.zeros((0, 4)))
        with pytest.raises(ValueError):
            ContrastiveBatch(np.zeros(4), np.ones((3, 4)), np.ones((4, 4)), tau=0.0)

    def test_gradient(self, rng):
        h = head(rng, c=4)
        # nonzero output bias keeps rows with every hidden unit off away from the
        # zero vector, where normalization is undefined
        h.fc2.bias.data[:] = rng.normal(size=4)
        a = Parameter(rng.normal(size=(2, 4)))
        p, n = rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 4, 4))

        def f():
            return contrastive_loss(ContrastiveBatch(a, p, n), h).sum()

        assert grad_check(f, h.parameters() + [a], epsilon=1e-5) < 1e-6

    def test_no_gradient_into_sampled_videos(self, rng):
        h = head(rng)
        p = Parameter(rng.normal(size=(3, 6)))
        a = Parameter(rng.normal(size=6))
        contrastive_loss(ContrastiveBatch(a, p.detach(), rng.normal(size=(4, 6))), h).backward()
        assert a.grad is not None and p.grad is None


class TestSampling:
    labels = np.array([0, 0, 1, 1, 2, 0, 2, 1])

    def test_sizes_and_labels(self):
        rng = np.random.default_rng(0)
        for anchor in range(len(self.labels)):
            pos, neg = sample_contrastive_indices(self.labels, anchor, rng)
            assert pos.shape == (3,) and neg.shape == (4,)
            assert (self.labels[pos] == self.labels[anchor]).all()
            assert (self.labels[neg] != self.labels[anchor]).all()
            assert anchor not in pos

    def test_deterministic(self):
        a = sample_contrastive_indices(self.labels, 2, np.random.default_rng(7))
        b = sample_contrastive_indices(self.labels, 2, np.random.default_rng(7))
        assert all(np.array_equal(x, y) for x, y in zip(a, b))

    def test_distinct_when_enough_candidates(self):
        labels = np.array([0] * 6 + [1] * 6)
        pos, neg = sample_contrastive_indices(labels, 0, np.random.default_rng(3))
        assert len(set(pos)) == 3 and len(set(neg)) == 4

    def test_no_positive_raises(self):
        with pytest.raises(SamplingError):
            sample_contrastive_indices(np.array([0, 1, 1]), 0, np.random.default_rng(0))

    def test_no_negative_raises(self):
        with pytest.raises(SamplingError):
            sample_contrastive_indices(np.array([1, 1, 1]), 0, np.random.default_rng(0))

    def test_pool_restricts_candidates(self):
        pos, neg = sample_contrastive_indices(self.labels, 0, np.random.default_rng(0),
                                              pool=[0, 1, 2, 3])
        assert set(pos) <= {1} and set(neg) <= {2, 3}

    def test_same_indices_for_every_stream(self, rng):
        pooled = {m: rng.normal(size=(8, 6)) for m in ("rgb", "flow", "depth")}
        batches, pos, neg = sample_contrastive_batch(pooled, self.labels, 3, np.random.default_rng(1))
        for m, b in batches.items():
            assert np.array_equal(b.positives, pooled[m][pos])
            assert np.array_equal(b.negatives, pooled[m][neg])
            assert np.array_equal(b.anchor, pooled[m][3])


class TestTotalContrastive:
    def _setup(self, rng):
        heads = {m: head(rng) for m in ("rgb", "depth", "flow")}
        batches = {
            m: ContrastiveBatch(rng.normal(size=6), rng.normal(size=(3, 6)), rng.normal(size=(4, 6)))
            for m in heads
        }
        return heads, batches

    def test_additivity_of_equal_terms(self, rng):
        h = head(rng)
        b = ContrastiveBatch(rng.normal(size=6), rng.normal(size=(3, 6)), rng.normal(size=(4, 6)))
        single = contrastive_loss(b, h).item()
        total = total_contrastive({"rgb": b, "depth": b, "flow": b}, {m: h for m in ("rgb", "depth", "flow")})
        assert total.item() == pytest.approx(3 * single, abs=1e-12)

    def test_matches_per_stream_oracle(self, rng):
        heads, batches = self._setup(rng)
        oracle = sum(scalar_oracle(heads[m], b.anchor, b.positives, b.negatives, b.tau)
                     for m, b in batches.items())
        assert total_contrastive(batches, heads).item() == pytest.approx(oracle, abs=1e-10)

    def test_skipped_stream(self, rng):
        heads, batches = self._setup(rng)
        two = sum(contrastive_loss(batches[m], heads[m]).item() for m in ("rgb", "flow"))
        batches["depth"] = None
        assert total_contrastive(batches, heads).item() == pytest.approx(two, abs=1e-12)

    def test_all_skipped_is_zero(self, rng):
        assert total_contrastive({"rgb": None}, {}).item() == 0.0

    def test_heads_are_independent(self, rng):
        from drft.config import RunConfig
        from drft.model import DRFT

        model = DRFT(RunConfig({"model.c": 8, "model.heads": 2}), 10, {m: 4 for m in ("rgb", "flow", "depth")})
        ids = {id(model.heads[m]) for m in ("rgb", "flow", "depth")}
        assert len(ids) == 3
