import itertools

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from wtmvs.attention import (AttentionConfigError, SwinBlock, SwinBlockPair, WindowAttention, WindowSpec,
                             merge_windows, partition_windows, scaled_dot_attention, swin_block_pair, zero_)
from wtmvs.numeric import DTYPE, finite_difference_check


def randomized(module, gen, scale=0.4):
    module.double()
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=DTYPE) * scale)
    return module


def dense_attention_oracle(x, attn: WindowAttention, extents):
    """Plain numpy multi-head attention over every token of the grid, bias looked up offset by offset."""
    tokens = x.reshape(-1, x.shape[-1])
    coords = list(itertools.product(*[range(e) for e in extents]))
    W = {n: getattr(attn, n).weight.detach().numpy() for n in ("q", "k", "v", "proj")}
    b = {n: getattr(attn, n).bias.detach().numpy() for n in ("q", "k", "v", "proj")}
    table = attn.bias_table.detach().numpy()
    q, k, v = (tokens @ W[n].T + b[n] for n in ("q", "k", "v"))
    hd = attn.head_dim
    out = np.zeros_like(tokens)
    T = len(coords)
    for h in range(attn.heads):
        sl = slice(h * hd, (h + 1) * hd)
        logits = np.zeros((T, T))
        for i in range(T):
            for j in range(T):
                idx = 0
                for axis, e in enumerate(extents):
                    idx = idx * (2 * e - 1) + (coords[i][axis] - coords[j][axis] + e - 1)
                logits[i, j] = q[i, sl] @ k[j, sl] / np.sqrt(hd) + table[idx, h]
        logits -= logits.max(axis=1, keepdims=True)
        w = np.exp(logits)
        w /= w.sum(axis=1, keepdims=True)
        out[:, sl] = w @ v[:, sl]
    return (out @ W["proj"].T + b["proj"]).reshape(x.shape)


@pytest.mark.parametrize("shape", [(4, 5), (2, 3, 4)])
def test_full_grid_window_equals_dense_attention(shape, gen):
    C = 4
    attn = randomized(WindowAttention(C, shape, heads=2), gen)
    x = torch.randn(*shape, C, generator=gen, dtype=DTYPE)
    windows, layout = partition_windows(x, WindowSpec(shape))
    assert windows.shape[0] == 1 and layout.mask is None
    out = merge_windows(attn(windows), layout)
    want = dense_attention_oracle(x.numpy(), attn, shape)
    assert np.abs(out.detach().numpy() - want).max() < 1e-10


def test_window_counts():
    w, _ = partition_windows(torch.zeros(32, 32, 1, dtype=DTYPE), WindowSpec((16, 16)))
    assert w.shape[:2] == (4, 256)
    w, _ = partition_windows(torch.zeros(8, 16, 20, 1, dtype=DTYPE), WindowSpec((2, 8, 10)))
    assert w.shape[:2] == (16, 160)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(1, 9), min_size=2, max_size=3), st.data())
def test_partition_merge_roundtrip(shape, data):
    ext = [data.draw(st.integers(1, s)) for s in shape]
    shift = [data.draw(st.integers(0, e - 1)) for e in ext]
    x = torch.randn(*shape, 2, dtype=DTYPE)
    windows, layout = partition_windows(x, WindowSpec(tuple(ext), tuple(shift)))
    assert torch.equal(merge_windows(windows, layout), x)
    perm = torch.randperm(windows.shape[0])
    inv = torch.argsort(perm)
    assert torch.equal(merge_windows(windows[perm][inv], layout), x)


def pre_roll_neighbours(shape, spec):
    """For every window, which token pairs were within one window extent of each other before the roll."""
    n = len(shape)
    padded = [-(-s // e) * e for s, e in zip(shape, spec.extents)]
    coords = np.stack(np.meshgrid(*[np.arange(p) for p in padded], indexing="ij"), -1)
    index = torch.as_tensor(coords.reshape(*padded, n)).to(DTYPE)
    windows, _ = partition_windows(index, WindowSpec(spec.extents, spec.shift))
    c = windows.numpy()
    valid = np.all(c < np.array(shape), axis=-1)
    close = np.all(np.abs(c[:, :, None, :] - c[:, None, :, :]) <= np.array(spec.extents) - 1, axis=-1)
    return close & valid[:, None, :], valid


@pytest.mark.parametrize("shape,ext", [((8, 8), (4, 4)), ((6, 10), (3, 4)), ((4, 8, 6), (2, 4, 3)),
                                       ((7, 9), (4, 4))])
def test_shift_mask_forbids_cross_boundary_weights(shape, ext, gen):
    spec = WindowSpec(ext).fitted(shape, shifted=True)
    assert any(spec.shift)
    x = torch.randn(*shape, 3, generator=gen, dtype=DTYPE)
    windows, layout = partition_windows(x, spec)
    logits = torch.randn(windows.shape[0], windows.shape[1], windows.shape[1], generator=gen, dtype=DTYPE)
    weights = torch.softmax(logits + layout.mask, dim=-1)
    allowed, real = (torch.as_tensor(a) for a in pre_roll_neighbours(shape, spec))
    # rows of padding queries are cropped after the merge; only real queries matter
    w = weights[real]
    assert bool((w[~allowed[real]] == 0).all())
    assert bool((w[allowed[real]] > 0).all())
    assert (weights.sum(-1) - 1).abs().max().item() < 1e-10


def test_shifted_block_ignores_tokens_outside_neighbourhood(gen):
    block = randomized(SwinBlock(4, (4, 4), 2, shifted=True), gen)
    x = torch.randn(8, 8, 4, generator=gen, dtype=DTYPE)
    y = x.clone()
    y[0, 0] += torch.tensor([3.0, -1.0, 0.5, 2.0], dtype=DTYPE)  # wraps to the bottom-right window after the roll
    a, b = block(x), block(y)
    # (7, 7) shares that window after rolling but was never adjacent to (0, 0)
    assert torch.equal(a[7, 7], b[7, 7])
    assert not torch.equal(a[1, 1], b[1, 1])


def test_zero_query_gives_mean_of_values(gen):
    attn = randomized(WindowAttention(4, (2, 3), 2), gen)
    with torch.no_grad():
        attn.q.weight.zero_()
        attn.q.bias.zero_()
        attn.bias_table.zero_()
    x = torch.randn(3, 6, 4, generator=gen, dtype=DTYPE)
    out = attn(x)
    want = attn.proj(attn.v(x).mean(dim=1, keepdim=True)).expand_as(out)
    assert torch.allclose(out, want, atol=1e-13, rtol=0)


def test_bias_table_starts_at_zero():
    attn = WindowAttention(4, (2, 3), 2)
    assert bool((attn.bias_table == 0).all())
    assert attn.bias_table.shape == (3 * 5, 2)


def test_single_token_window(gen):
    attn = randomized(WindowAttention(4, (1, 1), 1), gen)
    x = torch.randn(5, 1, 4, generator=gen, dtype=DTYPE)
    assert torch.allclose(attn(x), attn.proj(attn.v(x)), atol=1e-14, rtol=0)


def test_head_config_error():
    with pytest.raises(AttentionConfigError):
        WindowAttention(6, (2, 2), heads=4)
    with pytest.raises(AttentionConfigError):
        WindowSpec((2, 2), (2, 0))


def test_residual_identity_with_zero_weights(gen):
    pair = randomized(SwinBlockPair(8, (4, 4), 2), gen)
    for block in (pair.regular, pair.shifted):
        zero_(block.attn)
        zero_(block.mlp)
    x = torch.randn(16, 20, 8, generator=gen, dtype=DTYPE)
    assert torch.equal(swin_block_pair(x, pair), x)


def test_output_shape():
    pair = SwinBlockPair(8, (16, 16), 2).double()
    assert pair(torch.zeros(16, 20, 8, dtype=DTYPE)).shape == (16, 20, 8)


def test_block_gradient(gen):
    pair = randomized(SwinBlockPair(4, (2, 3), 2), gen)
    rep = finite_difference_check(pair, [torch.randn(4, 6, 4, generator=gen, dtype=DTYPE)])
    assert rep.passed, rep.summary()


def test_3d_reduces_to_2d(gen):
    b2 = randomized(SwinBlock(4, (3, 4), 2, shifted=True), gen)
    b3 = SwinBlock(4, (1, 3, 4), 2, shifted=True).double()
    b3.load_state_dict(b2.state_dict())
    x = torch.randn(6, 8, 4, generator=gen, dtype=DTYPE)
    assert (b3(x.unsqueeze(0))[0] - b2(x)).abs().max().item() < 1e-12


def test_masked_softmax_rows_sum_to_one(gen):
    q = torch.randn(2, 3, 5, 4, generator=gen, dtype=DTYPE)
    mask = torch.zeros(2, 1, 5, 5, dtype=DTYPE)
    mask[:, :, :, 3:] = -1e9
    v = torch.eye(5, dtype=DTYPE).expand(2, 3, 5, 5)
    w = scaled_dot_attention(q, q, v, mask=mask)
    assert (w.sum(-1) - 1).abs().max().item() < 1e-10
    assert bool((w[..., 3:] == 0).all())
