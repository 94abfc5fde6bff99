import itertools

import numpy as np
import pytest
import torch
from scipy.special import erf

from helpers import backproject_oracle, camera_pair, project_oracle
from wtmvs.attention import zero_
from wtmvs.config import PipelineConfig
from wtmvs.geometry import ViewCamera
from wtmvs.numeric import DTYPE
from wtmvs.wet import (CrossWindowBlock, FeaturePathway, PathwayConfigError, WindowEpipolarTransformer,
                       build_window_map, inter_attention, reference_windows, warp_window_centers)


def randomized(module, gen, scale=0.4):
    module.double()
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=DTYPE) * scale)
    return module


def _cam(size=(8, 10), f=12.0, t=(0.0, 0.0, 0.0), R=None):
    K = np.array([[f, 0, (size[1] - 1) / 2], [0, f, (size[0] - 1) / 2], [0, 0, 1.0]])
    return ViewCamera(K, np.eye(3) if R is None else R, np.array(t, float), (1.0, 10.0))


def test_reference_windows_tile_grid():
    starts, centers = reference_windows((10, 13), (4, 5))
    cover = np.zeros((12, 15), int)
    for r, c in starts:
        cover[r:r + 4, c:c + 5] += 1
    assert (cover == 1).all()
    np.testing.assert_array_equal(centers[:, 0], starts[:, 1] + 2)
    np.testing.assert_array_equal(centers[:, 1], starts[:, 0] + 2)


def test_identical_cameras_map_centres_to_themselves(gen):
    cam = _cam((16, 20))
    depth = 2.0 + torch.rand(16, 20, generator=gen, dtype=DTYPE)
    sw = warp_window_centers(cam, cam, depth, (4, 5))
    _, centers = reference_windows((16, 20), (4, 5))
    np.testing.assert_allclose(sw.centers, centers, atol=1e-12)
    assert sw.in_bounds.all() and not sw.clamped.any()
    np.testing.assert_array_equal(sw.starts, reference_windows((16, 20), (4, 5))[0])


def test_translated_camera_matches_scalar_oracle(rng):
    size = (16, 20)
    ref = _cam(size)
    src = _cam(size, t=(-0.3, 0.1, 0.05))
    depth = torch.full(size, 3.0, dtype=DTYPE)  # fronto-parallel plane at z = 3
    sw = warp_window_centers(ref, src, depth, (4, 4))
    _, centers = reference_windows(size, (4, 4))
    for (x, y), got in zip(centers, sw.centers):
        want, _ = project_oracle(src, backproject_oracle(ref, (x, y), 3.0))
        np.testing.assert_allclose(got, want, atol=1e-10)


def test_out_of_bounds_centre_clamped_and_flagged():
    size = (8, 10)
    ref = _cam(size)
    src = _cam(size, t=(-5.0, 0.0, 0.0))  # everything lands far to the right
    depth = torch.full(size, 2.0, dtype=DTYPE)
    sw = warp_window_centers(ref, src, depth, (4, 5))
    assert not sw.in_bounds.any() and sw.clamped.all()
    assert (sw.starts[:, 0] >= 0).all() and (sw.starts[:, 1] + 5 <= 10).all()


def test_epipolar_line_meets_source_window(rng):
    """Exact cameras and depth: the warped centre lies on the centre's epipolar line, inside its window."""
    hits = 0
    for _ in range(100):
        ref, src = camera_pair(rng)
        p = np.array([rng.uniform(0, 60), rng.uniform(0, 45)])
        d = rng.uniform(2, 8)
        sw = warp_window_centers(ref, src, torch.full((48, 64), d, dtype=DTYPE), (8, 8), p[None])
        # oracle line through the projections of two points on the ray
        a, _ = project_oracle(src, backproject_oracle(ref, p, 1.5))
        b, _ = project_oracle(src, backproject_oracle(ref, p, 9.0))
        n = np.array([a[1] - b[1], b[0] - a[0]])
        dist = abs(n @ (sw.centers[0] - a)) / np.linalg.norm(n)
        assert dist <= 1e-6 * max(1.0, np.abs(sw.centers[0]).max())
        if sw.in_bounds[0] and not sw.clamped[0]:
            hits += 1
            r0, c0 = sw.starts[0]
            x, y = sw.centers[0]
            assert c0 - 0.5 <= x <= c0 + 8 - 0.5 and r0 - 0.5 <= y <= r0 + 8 - 0.5
    assert hits > 20


def _gelu(x):
    return 0.5 * x * (1 + erf(x / np.sqrt(2)))


def _ln(x, mod):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + mod.eps) * mod.weight.detach().numpy() + mod.bias.detach().numpy()


def _lin(x, mod):
    return x @ mod.weight.detach().numpy().T + mod.bias.detach().numpy()


def cross_block_oracle(src, ref, block: CrossWindowBlock, extents):
    """Dense numpy cross attention: queries from the source tokens, keys/values from the reference."""
    attn = block.attn
    q_in, kv_in = _ln(src, block.norm_q), _ln(ref, block.norm_kv)
    q, k, v = _lin(q_in, attn.q), _lin(kv_in, attn.k), _lin(kv_in, attn.v)
    coords = list(itertools.product(*[range(e) for e in extents]))
    table = attn.bias_table.detach().numpy()
    T, hd = len(coords), attn.head_dim
    out = np.zeros_like(src)
    for h in range(attn.heads):
        sl = slice(h * hd, (h + 1) * hd)
        logits = q[:, sl] @ k[:, sl].T / np.sqrt(hd)
        for i, j in itertools.product(range(T), range(T)):
            idx = (coords[i][0] - coords[j][0] + extents[0] - 1) * (2 * extents[1] - 1) \
                + coords[i][1] - coords[j][1] + extents[1] - 1
            logits[i, j] += table[idx, h]
        w = np.exp(logits - logits.max(1, keepdims=True))
        out[:, sl] = (w / w.sum(1, keepdims=True)) @ v[:, sl]
    x = src + _lin(out, attn.proj)
    hidden = _gelu(_lin(_ln(x, block.norm2), block.mlp[0]))
    return x + _lin(hidden, block.mlp[2])


def test_whole_grid_window_equals_dense_cross_attention(gen):
    C, size = 4, (5, 6)
    cam = _cam(size)
    wmap = build_window_map(cam, [cam], torch.full(size, 3.0, dtype=DTYPE), size)
    assert len(wmap.ref_starts) == 1 and wmap.sources[0].in_bounds.all()
    block = randomized(CrossWindowBlock(C, size, 2), gen)
    ref = torch.randn(C, *size, generator=gen, dtype=DTYPE)
    src = torch.randn(1, C, *size, generator=gen, dtype=DTYPE)
    out = inter_attention(ref, src, wmap, block)[0]
    tok = lambda f: f.reshape(C, -1).T.numpy()
    want = cross_block_oracle(tok(src[0]), tok(ref), block, size)
    assert np.abs(tok(out.detach()) - want).max() < 1e-10


def test_reference_untouched_and_oob_windows_skipped(gen):
    size = (8, 10)
    ref_cam = _cam(size)
    near = _cam(size, t=(-0.2, 0.0, 0.0))
    far = _cam(size, t=(-50.0, 0.0, 0.0))
    wmap = build_window_map(ref_cam, [near, far], torch.full(size, 3.0, dtype=DTYPE), (4, 5))
    assert wmap.sources[0].in_bounds.any() and not wmap.sources[1].in_bounds.any()
    block = randomized(CrossWindowBlock(4, (4, 5), 2), gen)
    ref = torch.randn(4, *size, generator=gen, dtype=DTYPE)
    src = torch.randn(2, 4, *size, generator=gen, dtype=DTYPE)
    ref_copy, src_copy = ref.clone(), src.clone()
    out = inter_attention(ref, src, wmap, block)
    assert torch.equal(ref, ref_copy) and torch.equal(src, src_copy)
    assert torch.equal(out[1], src[1])
    assert not torch.equal(out[0], src[0])


def test_zero_weights_leave_sources_unchanged(gen):
    size = (8, 10)
    cams = [_cam(size), _cam(size, t=(-0.2, 0.0, 0.0))]
    wmap = build_window_map(cams[0], cams[1:], torch.full(size, 3.0, dtype=DTYPE), (4, 5))
    block = zero_(CrossWindowBlock(4, (4, 5), 2).double())
    src = torch.randn(1, 4, *size, generator=gen, dtype=DTYPE)
    out = inter_attention(torch.randn(4, *size, generator=gen, dtype=DTYPE), src, wmap, block)
    assert torch.equal(out, src)


def test_transformer_keeps_reference_and_shape(gen):
    size = (8, 10)
    cams = [_cam(size), _cam(size, t=(-0.2, 0.0, 0.0)), _cam(size, t=(0.0, 0.2, 0.0))]
    wet = randomized(WindowEpipolarTransformer(4, (4, 5), heads=2), gen)
    feats = torch.randn(3, 4, *size, generator=gen, dtype=DTYPE)
    out, wmap = wet(feats, cams, torch.full(size, 3.0, dtype=DTYPE))
    assert out.shape == feats.shape
    assert torch.equal(out[0], wet.intra_attention(feats)[0])
    assert len(wmap.sources) == 2


def test_zero_intra_is_identity(gen):
    wet = zero_(WindowEpipolarTransformer(4, (4, 5), heads=2).double())
    feats = torch.randn(2, 4, 8, 10, generator=gen, dtype=DTYPE)
    assert torch.equal(wet.intra_attention(feats), feats)


def test_defaults():
    cfg = PipelineConfig()
    assert cfg.wet_blocks == 1 and tuple(cfg.wet_window) == (16, 16)


def test_pathway_shapes_and_offsets(gen):
    path = FeaturePathway(8, 6, 4).double()
    s2 = torch.randn(2, 6, 8, 10, generator=gen, dtype=DTYPE)
    s3 = torch.randn(2, 4, 16, 20, generator=gen, dtype=DTYPE)
    a2, a3 = path(torch.zeros(2, 8, 4, 5, dtype=DTYPE), s2, s3)
    assert torch.equal(a2, s2) and torch.equal(a3, s3)
    c = torch.randn(8, generator=gen, dtype=DTYPE)
    b2, b3 = path(c.view(1, 8, 1, 1).expand(2, 8, 4, 5), s2, s3)
    assert b2.shape == s2.shape and b3.shape == s3.shape
    want2 = path.to2.weight[:, :, 0, 0].detach() @ c
    want3 = path.to3.weight[:, :, 0, 0].detach() @ c
    np.testing.assert_allclose((b2 - s2).detach().numpy(), want2.view(1, 6, 1, 1).expand_as(s2).numpy(),
                               atol=1e-13)
    np.testing.assert_allclose((b3 - s3).detach().numpy(), want3.view(1, 4, 1, 1).expand_as(s3).numpy(),
                               atol=1e-13)


def test_pathway_without_projection_needs_equal_channels():
    with pytest.raises(PathwayConfigError):
        FeaturePathway(8, 6, 4, project=False)
    FeaturePathway(4, 4, 4, project=False)
