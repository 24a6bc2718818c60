import math

import numpy as np
import pytest
import torch

from rawmamba.errors import ContractError, DimensionError
from rawmamba.tensor import grad_check
from rawmamba.ume import (
    ConvEncoder,
    MetadataPair,
    SearchBlock,
    UnifiedMetadataEmbedding,
    channel_attention_map,
    fuse_embeddings,
    geb_affinity,
    geb_embed,
    leb_attend,
    sinusoidal_pe,
    warp_position_encoding,
    window_indices,
)

from conftest import randn

f64 = torch.float64


def test_encoder_stride_and_determinism():
    torch.manual_seed(0)
    enc = ConvEncoder(3, (8, 8)).double()
    x = torch.zeros(2, 3, 16, 20, dtype=f64)
    feats = enc(x)
    assert [f.shape[-2:] for f in feats] == [(8, 10), (4, 5)]
    assert torch.equal(enc(x)[-1], feats[-1])
    video = enc(torch.zeros(2, 3, 5, 16, 20, dtype=f64))
    assert video[-1].shape == (2, 8, 5, 4, 5)


def test_tied_encoders_give_identical_features_for_identical_frames():
    torch.manual_seed(0)
    ume = UnifiedMetadataEmbedding(8).double()
    main = ConvEncoder(3, (8, 8)).double()
    main.load_state_dict(ume.f_srgb_ref.state_dict())
    frame = torch.rand(1, 3, 16, 16, dtype=f64)
    clip = frame[:, :, None].expand(1, 3, 5, 16, 16)
    meta = MetadataPair(frame, torch.rand(1, 4, 16, 16, dtype=f64), "video")
    f_ref, _ = ume.encode_reference(meta)
    f_main = main(clip)[-1]
    for t in range(5):
        assert torch.equal(f_main[:, :, t], f_ref)


def test_geb_affinity_examples(gen):
    q = randn(1, 4, 3, gen=gen)
    assert torch.equal(geb_affinity(q, randn(1, 1, 3, gen=gen)), torch.ones(1, 4, 1, dtype=f64))
    refs = torch.eye(3, dtype=f64)[None] * 10
    a = geb_affinity(refs[:, 1:2], refs)
    assert float(a[0, 0, 1]) >= 0.99
    a = geb_affinity(randn(2, 7, 5, gen=gen), randn(2, 9, 5, gen=gen))
    assert float((a.sum(-1) - 1).abs().max()) < 1e-6
    assert bool((a >= 0).all())
    with pytest.raises(ContractError, match="metadata empty"):
        geb_affinity(q, torch.zeros(1, 0, 3, dtype=f64))


def test_geb_embed_examples(gen):
    raw = randn(1, 4, 3, gen=gen)
    onehot = torch.zeros(1, 2, 4, dtype=f64)
    onehot[0, 0, 2] = onehot[0, 1, 0] = 1
    assert torch.equal(geb_embed(onehot, raw), raw[:, [2, 0]])
    uniform = torch.full((1, 5, 4), 0.25, dtype=f64)
    assert torch.allclose(geb_embed(uniform, raw), raw.mean(1, keepdim=True).expand(1, 5, 3))
    a = torch.softmax(randn(1, 3, 4, gen=gen), -1)
    loop = torch.zeros(1, 3, 3, dtype=f64)
    for i in range(3):
        for j in range(4):
            loop[0, i] += a[0, i, j] * raw[0, j]
    assert torch.allclose(geb_embed(a, raw), loop, atol=1e-14)
    assert torch.allclose(geb_embed(a, 2.5 * raw), 2.5 * geb_embed(a, raw), atol=1e-14)
    with pytest.raises(DimensionError):
        geb_embed(a, randn(1, 5, 3, gen=gen))


def test_position_encoding_warp():
    pe = sinusoidal_pe(8, 5, 6, f64)
    assert pe.shape == (8, 5, 6)
    assert torch.equal(warp_position_encoding(pe, torch.zeros(2, 2, 5, 6, dtype=f64)), pe.expand(2, 8, 5, 6))
    flow = torch.zeros(1, 2, 5, 6, dtype=f64)
    flow[:, 0] = 1.0
    shifted = warp_position_encoding(pe, flow)[0]
    assert torch.allclose(shifted[:, :, :-1], pe[:, :, 1:], atol=1e-15)
    const = torch.full((4, 5, 6), 0.3, dtype=f64)
    assert torch.allclose(warp_position_encoding(const, torch.rand(2, 5, 6, dtype=f64) * 3), const)
    with pytest.raises(DimensionError):
        warp_position_encoding(pe, torch.zeros(3, 5, 6))


def test_window_indices_follow_flow():
    flow = np.zeros((1, 2, 5, 5))
    flow[0, 0] = 2.0  # content moved right by two cells
    idx, valid = window_indices(5, 5, flow, 1)
    assert idx[0, 2 * 5 + 3, 0] == 2 * 5 + 1
    assert valid.shape == idx.shape


def _leb_loop(q, k, v, scale, window_cells):
    """Explicit softmax-weighted sum for one frame: q, k, v are (hw, C)."""
    out = torch.zeros_like(q)
    for i in range(q.shape[0]):
        cells = window_cells(i)
        logits = torch.stack([q[i] @ k[j] * scale for j in cells])
        p = torch.exp(logits - logits.max())
        p = p / p.sum()
        out[i] = sum(p[m] * v[j] for m, j in enumerate(cells))
    return out


def test_leb_matches_explicit_loop_on_2x2(gen):
    C, h, w = 4, 2, 2
    fq, fr, fw = randn(1, C, 1, h, w, gen=gen), randn(1, C, h, w, gen=gen), randn(1, C, h, w, gen=gen)
    pe = sinusoidal_pe(C, h, w, f64)
    pew = pe.expand(1, 1, C, h, w)
    out = leb_attend(fq, fr, fw, pe, pew, window=3, temperature=2.0)
    q = (fq[0, :, 0] + pe).reshape(C, -1).T
    k = (fr[0] + pe).reshape(C, -1).T
    v = (fw[0] + pe).reshape(C, -1).T
    ref = _leb_loop(q, k, v, 0.5, lambda i: range(4))
    assert torch.allclose(out[0, :, 0].reshape(C, -1).T, ref, atol=1e-13)


def test_leb_degenerates_to_geb(gen):
    C, h, w = 4, 3, 3
    fq, fr, fw = randn(1, C, 1, h, w, gen=gen), randn(1, C, h, w, gen=gen), randn(1, C, h, w, gen=gen)
    zero_pe = torch.zeros(C, h, w, dtype=f64)
    out = leb_attend(fq, fr, fw, zero_pe, zero_pe.expand(1, 1, C, h, w), window=None, temperature=1.0)
    q = fq[0, :, 0].reshape(C, -1).T[None]
    r = fr[0].reshape(C, -1).T[None]
    v = fw[0].reshape(C, -1).T[None]
    assert torch.allclose(out[0, :, 0].reshape(C, -1).T[None], geb_embed(geb_affinity(q, r), v), atol=1e-13)


def test_leb_singleton_window_copies_reference(gen):
    C, h, w = 4, 3, 3
    fq, fr, fw = randn(1, C, 1, h, w, gen=gen), randn(1, C, h, w, gen=gen), randn(1, C, h, w, gen=gen)
    pe = sinusoidal_pe(C, h, w, f64)
    pew = pe.expand(1, 1, C, h, w)
    out = leb_attend(fq, fr, fw, pe, pew, window=1)
    assert torch.allclose(out[:, :, 0], fw + pe, atol=1e-14)


def test_leb_offset_bias_shifts_attention(gen):
    C, h, w = 4, 3, 3
    fq, fr, fw = randn(1, C, 1, h, w, gen=gen), randn(1, C, h, w, gen=gen), randn(1, C, h, w, gen=gen)
    pe = torch.zeros(C, h, w, dtype=f64)
    pew = pe.expand(1, 1, C, h, w)
    bias = torch.full((1, 1, h * w, 9), -1e4, dtype=f64)
    bias[..., 4] = 0.0  # centre slot only
    out = leb_attend(fq, fr, fw, pe, pew, window=3, offset_bias=bias)
    assert torch.allclose(out[:, :, 0], fw, atol=1e-12)


def test_leb_empty_window_falls_back(gen, caplog):
    C, h, w = 4, 2, 2
    fq, fr, fw = randn(1, C, 1, h, w, gen=gen), randn(1, C, h, w, gen=gen), randn(1, C, h, w, gen=gen)
    pe = torch.zeros(C, h, w, dtype=f64)
    flow = torch.full((1, 1, 2, h, w), 50.0, dtype=f64)
    out = leb_attend(fq, fr, fw, pe, pe.expand(1, 1, C, h, w), flow=flow, window=1)
    full = leb_attend(fq, fr, fw, pe, pe.expand(1, 1, C, h, w), window=None)
    assert "window empty" in caplog.text
    assert torch.allclose(out, full)


def test_fusion_examples(gen):
    g, l = randn(1, 4, 1, 2, 2, gen=gen), randn(1, 4, 1, 2, 2, gen=gen)
    assert torch.equal(fuse_embeddings(g, l, 0.7, 0.0), 0.7 * g)
    assert torch.equal(fuse_embeddings(g, g, 0.5, 0.5), g)
    wg = torch.tensor(0.5, dtype=f64, requires_grad=True)
    wl = torch.tensor(0.5, dtype=f64, requires_grad=True)
    rep = grad_check(lambda: fuse_embeddings(g, l, wg, wl).pow(2).sum(), [wg, wl])
    assert rep.passed
    grads = torch.autograd.grad(fuse_embeddings(g, l, wg, wl).pow(2).sum(), [wg, wl])
    assert all(float(x) != 0 for x in grads)
    with pytest.raises(DimensionError):
        fuse_embeddings(g, l[..., :1], 0.5, 0.5)


def test_channel_attention_hand_computed():
    q = torch.tensor([[[1.0, 0.0], [1.0, 1.0]]], dtype=f64)
    k = torch.tensor([[[0.0, 2.0], [3.0, 0.0]]], dtype=f64)
    att = channel_attention_map(q, k, 1.0)
    s = 1 / math.sqrt(2)
    logits = torch.tensor([[0.0, 1.0], [s, s]], dtype=f64)
    assert torch.allclose(att[0], torch.softmax(logits, -1), atol=1e-15)
    assert torch.allclose(att.sum(-1), torch.ones(1, 2, dtype=f64))


def test_search_block_identity_for_zero_embedding(gen):
    torch.manual_seed(0)
    blk = SearchBlock(4, 4).double()
    feat = randn(1, 4, 2, 4, 4, gen=gen)
    assert torch.equal(blk(feat, torch.zeros(1, 4, 2, 2, 2, dtype=f64)), feat)
    with torch.no_grad():
        for p in blk.parameters():
            p.normal_()
    out = blk(feat, randn(1, 4, 2, 2, 2, gen=gen))
    assert out.shape == feat.shape and not torch.equal(out, feat)


def _meta(kind, n=1, H=16, W=16, T=3):
    srgb = torch.rand(n, 3, H, W, dtype=f64)
    raw = torch.rand(n, 4, H, W, dtype=f64)
    if kind == "image":
        mask = torch.zeros(n, 1, H, W, dtype=f64)
        mask[..., ::5, ::5] = 1
        return MetadataPair(srgb * mask, raw * mask, "image", mask=mask)
    return MetadataPair(srgb, raw, "video", flow=torch.rand(n, T, 2, H, W, dtype=f64) * 3)


@pytest.mark.parametrize("kind,T", [("image", 1), ("video", 3)])
def test_ume_runs_both_kinds(kind, T):
    torch.manual_seed(0)
    ume = UnifiedMetadataEmbedding(8).double()
    f_query = torch.rand(1, 8, T, 4, 4, dtype=f64)
    emb = ume(f_query, _meta(kind, T=T))
    assert emb.e_global.shape == emb.e_local.shape == emb.e_fused.shape == f_query.shape
    assert torch.allclose(emb.e_fused, 0.5 * emb.e_global + 0.5 * emb.e_local)


def test_ume_zero_flow_matches_image_positional_path():
    torch.manual_seed(0)
    ume = UnifiedMetadataEmbedding(8).double()
    f_query = torch.rand(1, 8, 1, 4, 4, dtype=f64)
    meta = _meta("video", T=1)
    still = MetadataPair(meta.srgb_ref, meta.raw_ref, "video", flow=torch.zeros(1, 1, 2, 16, 16, dtype=f64))
    no_flow = MetadataPair(meta.srgb_ref, meta.raw_ref, "video")
    assert torch.equal(ume(f_query, still).e_local, ume(f_query, no_flow).e_local)


def test_ume_rejects_empty_mask_and_bad_kind():
    torch.manual_seed(0)
    ume = UnifiedMetadataEmbedding(8).double()
    z = torch.zeros(1, 1, 16, 16, dtype=f64)
    meta = MetadataPair(torch.zeros(1, 3, 16, 16, dtype=f64), torch.zeros(1, 4, 16, 16, dtype=f64), "image", mask=z)
    with pytest.raises(ContractError, match="metadata empty"):
        ume(torch.rand(1, 8, 1, 4, 4, dtype=f64), meta)
    with pytest.raises(ContractError):
        MetadataPair(z, z, "audio")


def test_ume_gradients_finite_differences():
    torch.manual_seed(0)
    ume = UnifiedMetadataEmbedding(4, window=3).double()
    with torch.no_grad():
        ume.offset_head.weight.normal_(0, 0.1)
    f_query = torch.rand(1, 4, 2, 2, 2, dtype=f64, requires_grad=True)
    meta = _meta("video", H=8, W=8, T=2)
    params = [f_query, ume.offset_head.weight, ume.w_global, ume.f_raw_ref.stages[0][0].bias]
    rep = grad_check(lambda: ume(f_query, meta).e_fused.sin().sum(), params)
    assert rep.passed, rep.errors


def test_search_block_gradients_finite_differences(gen):
    torch.manual_seed(0)
    blk = SearchBlock(4, 4).double()
    with torch.no_grad():
        blk.proj.weight.normal_(0, 0.5)
        blk.ffn_out.weight.normal_(0, 0.5)
    feat = randn(1, 4, 1, 4, 4, gen=gen, requires_grad=True)
    e = randn(1, 4, 1, 2, 2, gen=gen, requires_grad=True)
    rep = grad_check(lambda: blk(feat, e).pow(2).sum(), [feat, e, blk.temperature, blk.q.weight])
    assert rep.passed, rep.errors
