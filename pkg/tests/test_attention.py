import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from multipose.attention import AttentionParams, check_partition, cross_attention_block, spatial_aligned_cross_attention
from multipose.errors import MaskPartitionError, ShapeError
from multipose.prompts import TextEmbedding

C, D_TEXT, L = 8, 6, 5


def params(seed=0, dtype=torch.float64):
    return AttentionParams(C, D_TEXT, generator=torch.Generator().manual_seed(seed)).to(dtype)


def embedding(rng, count=L, length=L):
    vals = np.zeros((length, D_TEXT))
    vals[:count] = rng.standard_normal((count, D_TEXT))
    return TextEmbedding(torch.tensor(vals), count)


def softmax_masks(rng, n, h, w):
    logits = rng.standard_normal((n, h, w)) * 3
    e = np.exp(logits - logits.max(0))
    return torch.tensor(e / e.sum(0))


def brute_force(h, embeddings, masks, p):
    """Per-pixel, per-branch scalar loop of the masked multi-prompt attention."""
    h = h.detach().numpy()
    wq, wk, wv, wo = (w.detach().numpy() for w in (p.wq, p.wk, p.wv, p.wo))
    masks = masks.numpy()
    f, c, hh, ww = h.shape
    d = wq.shape[1]
    out = np.zeros_like(h)
    for fi in range(f):
        for y in range(hh):
            for x in range(ww):
                q = h[fi, :, y, x] @ wq
                for i, e in enumerate(embeddings):
                    vals = e.values.numpy()[: e.count]
                    k, v = vals @ wk, vals @ wv
                    logits = [float(q @ k[j]) / math.sqrt(d) for j in range(e.count)]
                    m = max(logits)
                    wts = np.array([math.exp(z - m) for z in logits])
                    wts /= wts.sum()
                    o = (wts[:, None] * v).sum(0) @ wo
                    out[fi, :, y, x] += o * masks[i, y, x]
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def test_single_branch_ones_mask_is_plain_attention(rng):
    p = params()
    h = torch.tensor(rng.standard_normal((2, C, 4, 4)))
    e = embedding(rng)
    plain = cross_attention_block(h, e, p)
    masked = spatial_aligned_cross_attention(h, [e], torch.ones(1, 4, 4, dtype=torch.float64), p)
    assert torch.equal(plain, masked)


def test_identical_prompts_reduce_to_plain(rng):
    p = params()
    h = torch.tensor(rng.standard_normal((1, C, 4, 4)))
    e = embedding(rng)
    masks = softmax_masks(rng, 3, 4, 4)
    out = spatial_aligned_cross_attention(h, [e, e, e], masks, p)
    torch.testing.assert_close(out, cross_attention_block(h, e, p), atol=1e-12, rtol=0)


def test_one_hot_masks_select_branch(rng):
    p = params()
    h = torch.tensor(rng.standard_normal((1, C, 4, 4)))
    es = [embedding(rng), embedding(rng)]
    masks = torch.zeros(2, 4, 4, dtype=torch.float64)
    masks[0, :, :2] = 1
    masks[1, :, 2:] = 1
    out = spatial_aligned_cross_attention(h, es, masks, p)
    torch.testing.assert_close(out[..., :2], cross_attention_block(h, es[0], p)[..., :2], atol=1e-12, rtol=0)
    torch.testing.assert_close(out[..., 2:], cross_attention_block(h, es[1], p)[..., 2:], atol=1e-12, rtol=0)


def test_locality(rng):
    """Changing prompt 2 leaves pixels where its mask is zero untouched."""
    p = params()
    h = torch.tensor(rng.standard_normal((1, C, 4, 4)))
    masks = torch.zeros(2, 4, 4, dtype=torch.float64)
    masks[0, :2] = 1
    masks[1, 2:] = 1
    e1 = embedding(rng)
    a = spatial_aligned_cross_attention(h, [e1, embedding(rng)], masks, p)
    b = spatial_aligned_cross_attention(h, [e1, embedding(rng)], masks, p)
    assert torch.equal(a[..., :2, :], b[..., :2, :])
    assert not torch.allclose(a[..., 2:, :], b[..., 2:, :])


@given(st.integers(0, 10_000), st.integers(1, 4))
@settings(max_examples=25, deadline=None)
def test_matches_brute_force(seed, n):
    rng = np.random.default_rng(seed)
    p = params(seed)
    h = torch.tensor(rng.standard_normal((2, C, 3, 3)))
    es = [embedding(rng, count=int(rng.integers(1, L + 1))) for _ in range(n)]
    masks = softmax_masks(rng, n, 3, 3)
    out = spatial_aligned_cross_attention(h, es, masks, p)
    np.testing.assert_allclose(out.detach().numpy(), brute_force(h, es, masks, p), atol=1e-6)


@given(st.integers(0, 10_000))
@settings(max_examples=25, deadline=None)
def test_convex_combination(seed):
    rng = np.random.default_rng(seed)
    p = params(seed)
    h = torch.tensor(rng.standard_normal((1, C, 3, 3)))
    es = [embedding(rng) for _ in range(3)]
    masks = softmax_masks(rng, 3, 3, 3)
    per = torch.stack([cross_attention_block(h, e, p) for e in es])
    out = spatial_aligned_cross_attention(h, es, masks, p)
    assert torch.all(out <= per.max(0).values + 1e-9) and torch.all(out >= per.min(0).values - 1e-9)


def test_linear_in_masks(rng):
    p = params()
    h = torch.tensor(rng.standard_normal((1, C, 4, 4)))
    es = [embedding(rng), embedding(rng)]
    m1, m2 = softmax_masks(rng, 2, 4, 4), softmax_masks(rng, 2, 4, 4)
    lam = 0.3
    mix = spatial_aligned_cross_attention(h, es, lam * m1 + (1 - lam) * m2, p)
    parts = lam * spatial_aligned_cross_attention(h, es, m1, p) + (1 - lam) * spatial_aligned_cross_attention(h, es, m2, p)
    torch.testing.assert_close(mix, parts, atol=1e-12, rtol=0)


def test_padding_is_ignored(rng):
    p = params()
    h = torch.tensor(rng.standard_normal((1, C, 2, 2)))
    e = embedding(rng, count=2)
    noisy = TextEmbedding(e.values.clone(), 2)
    noisy.values[2:] = 100.0
    torch.testing.assert_close(cross_attention_block(h, e, p), cross_attention_block(h, noisy, p))


def test_per_frame_masks(rng):
    p = params()
    h = torch.tensor(rng.standard_normal((2, C, 3, 3)))
    es = [embedding(rng), embedding(rng)]
    masks = torch.stack([softmax_masks(rng, 2, 3, 3), softmax_masks(rng, 2, 3, 3)])
    out = spatial_aligned_cross_attention(h, es, masks, p)
    for f in range(2):
        torch.testing.assert_close(out[f:f + 1], spatial_aligned_cross_attention(h[f:f + 1], es, masks[f], p))


def test_branch_outputs_captured(rng):
    p = params()
    h = torch.tensor(rng.standard_normal((1, C, 2, 2)))
    es = [embedding(rng), embedding(rng)]
    got = []
    spatial_aligned_cross_attention(h, es, softmax_masks(rng, 2, 2, 2), p, branch_outputs=got)
    assert len(got) == 2 and torch.equal(got[1], cross_attention_block(h, es[1], p))


class TestErrors:
    def test_partition_violation(self, rng):
        with pytest.raises(MaskPartitionError):
            spatial_aligned_cross_attention(torch.zeros(1, C, 2, 2, dtype=torch.float64), [embedding(rng)] * 2,
                                            torch.full((2, 2, 2), 0.6, dtype=torch.float64), params())

    def test_partition_tolerance(self):
        m = torch.full((2, 2, 2), 0.5 + 4e-4)
        check_partition(m, (2, 2))
        with pytest.raises(MaskPartitionError):
            check_partition(m, (2, 2), tol=1e-4)

    def test_mask_size_mismatch(self, rng):
        with pytest.raises(ShapeError):
            spatial_aligned_cross_attention(torch.zeros(1, C, 4, 4, dtype=torch.float64), [embedding(rng)],
                                            torch.ones(1, 2, 2, dtype=torch.float64), params())

    def test_count_mismatch(self, rng):
        with pytest.raises(ShapeError):
            spatial_aligned_cross_attention(torch.zeros(1, C, 2, 2, dtype=torch.float64), [embedding(rng)] * 3,
                                            torch.ones(2, 2, 2, dtype=torch.float64) / 2, params())

    def test_text_width_mismatch(self):
        with pytest.raises(ShapeError):
            cross_attention_block(torch.zeros(1, C, 2, 2, dtype=torch.float64),
                                  TextEmbedding(torch.zeros(L, D_TEXT + 1, dtype=torch.float64), 1), params())

    def test_channel_mismatch(self, rng):
        with pytest.raises(ShapeError):
            cross_attention_block(torch.zeros(1, C + 1, 2, 2, dtype=torch.float64), embedding(rng), params())
