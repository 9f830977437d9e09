import math

import numpy as np
import pytest
import torch

from fdcheck import fd_check
from vlur.errors import ConfigError, ShapeError
from vlur.restorer import (
    PGCA,
    Downsample,
    GatedFFN,
    Restorer,
    RestorerConfig,
    Upsample,
    restore,
    restore_with_classifier,
)
from vlur.types import DegradationType

TINY = RestorerConfig(base_channels=4, blocks=(1, 1, 1, 1), heads=(1, 2, 2, 4), text_dim=16)


def test_config_validation():
    with pytest.raises(ConfigError):
        RestorerConfig(base_channels=6, heads=(4, 2, 4, 8))
    with pytest.raises(ConfigError):
        RestorerConfig(ffn_expansion=0)
    assert [RestorerConfig().channels(l) for l in range(4)] == [16, 32, 64, 128]


def test_down_up_shapes():
    x = torch.randn(2, 8, 16, 24)
    d = Downsample(8)(x)
    assert d.shape == (2, 16, 8, 12)
    assert Upsample(8)(d).shape == x.shape


def test_three_downsamples_reach_latent_shape():
    m = Restorer(RestorerConfig())
    skips, z = m.encode(torch.rand(1, 3, 32, 48), torch.randn(1, 512))
    assert [s.shape[1:] for s in skips] == [(16, 32, 48), (32, 16, 24), (64, 8, 12)]
    assert z.shape[1:] == (128, 4, 6)


@pytest.mark.parametrize("hw", [(8, 8), (16, 40), (24, 8)])
def test_output_shape(hw):
    m = Restorer(TINY).eval()
    x = torch.rand(2, 3, *hw)
    assert m(x, torch.randn(2, 16)).shape == x.shape


def test_bad_shape_names_multiple():
    with pytest.raises(ShapeError, match="8"):
        Restorer(TINY)(torch.rand(1, 3, 12, 16), torch.randn(1, 16))


def test_attention_rows_sum():
    blk = PGCA(8, 2, text_dim=16)
    a_img, a_txt, _ = blk.attention_maps(torch.randn(3, 8, 5, 7), torch.randn(3, 16))
    torch.testing.assert_close(a_img.sum(-1), torch.ones(3, 2, 4), atol=1e-6, rtol=0)
    torch.testing.assert_close(a_txt.sum(-1), torch.ones(3, 2, 4), atol=1e-6, rtol=0)
    torch.testing.assert_close((a_img + a_txt).sum(-1), torch.full((3, 2, 4), 2.0), atol=1e-6, rtol=0)


def test_pgca_zero_projection_is_identity():
    blk = PGCA(8, 2, text_dim=16)
    with torch.no_grad():
        blk.project_out.weight.zero_()
    x = torch.randn(2, 8, 4, 4)
    torch.testing.assert_close(blk(x, torch.randn(2, 16)), x, rtol=0, atol=0)


def _pgca_oracle(x, y, blk):
    """Scalar loops over Eq.-style definitions for one head, batch 1."""
    c, h, w = x.shape[1:]
    hw = h * w
    X = x[0].tolist()
    eps = blk.norm.eps
    g = blk.norm.weight.tolist()
    pix = [(i, j) for i in range(h) for j in range(w)]
    # bias-free channel layer norm
    ln = [[[0.0] * w for _ in range(h)] for _ in range(c)]
    for (i, j) in pix:
        vals = [X[ch][i][j] for ch in range(c)]
        mu = sum(vals) / c
        var = sum((v - mu) ** 2 for v in vals) / c
        for ch in range(c):
            ln[ch][i][j] = vals[ch] / math.sqrt(var + eps) * g[ch]
    W1 = blk.qkv.weight[:, :, 0, 0].tolist()
    pw = [[[sum(W1[o][ch] * ln[ch][i][j] for ch in range(c)) for j in range(w)] for i in range(h)]
          for o in range(3 * c)]
    D = blk.qkv_dw.weight[:, 0].tolist()
    dw = [[[0.0] * w for _ in range(h)] for _ in range(3 * c)]
    for o in range(3 * c):
        for (i, j) in pix:
            s = 0.0
            for di in range(3):
                for dj in range(3):
                    ii, jj = i + di - 1, j + dj - 1
                    if 0 <= ii < h and 0 <= jj < w:
                        s += D[o][di][dj] * pw[o][ii][jj]
            dw[o][i][j] = s
    flat = [[dw[o][i][j] for (i, j) in pix] for o in range(3 * c)]
    Q, K, V = flat[:c], flat[c:2 * c], flat[2 * c:]

    def l2(rows):
        return [[v / math.sqrt(sum(u * u for u in r)) for v in r] for r in rows]

    Q, K = l2(Q), l2(K)
    alpha = math.log1p(math.exp(blk.temperature_raw.item()))
    WT = blk.text_proj.weight.tolist()
    yt = y[0].tolist()
    qt = [sum(WT[ch][k] * yt[k] for k in range(len(yt))) for ch in range(c)]
    # text query broadcast over pixels, each row scaled to keep the norm of qt
    QT = [[qt[ch] / math.sqrt(hw)] * hw for ch in range(c)]

    def softmax_rows(M):
        out = []
        for r in M:
            m = max(r)
            e = [math.exp(v - m) for v in r]
            out.append([v / sum(e) for v in e])
        return out

    A_img = softmax_rows([[sum(K[a][p] * Q[b][p] for p in range(hw)) / alpha for b in range(c)] for a in range(c)])
    A_txt = softmax_rows([[sum(K[a][p] * QT[b][p] for p in range(hw)) / alpha for b in range(c)] for a in range(c)])
    O = [[sum((A_img[a][b] + A_txt[a][b]) * V[b][p] for b in range(c)) for p in range(hw)] for a in range(c)]
    P = blk.project_out.weight[:, :, 0, 0].tolist()
    out = np.zeros((c, h, w))
    for ch in range(c):
        for n, (i, j) in enumerate(pix):
            out[ch, i, j] = X[ch][i][j] + sum(P[ch][a] * O[a][n] for a in range(c))
    return out


@pytest.mark.parametrize("shape", [(2, 1, 2), (4, 3, 3)])
def test_pgca_matches_scalar_oracle(shape):
    torch.manual_seed(7)
    c = shape[0]
    blk = PGCA(c, 1, text_dim=5).double()
    with torch.no_grad():
        for p in blk.parameters():
            p.copy_(torch.randn_like(p) * 0.7)
        blk.temperature_raw.fill_(0.3)
    x = torch.randn(1, *shape, dtype=torch.float64)
    y = torch.randn(1, 5, dtype=torch.float64)
    np.testing.assert_allclose(blk(x, y)[0].detach().numpy(), _pgca_oracle(x, y, blk), rtol=1e-10, atol=1e-12)


def test_text_guidance_off_drops_text_map():
    torch.manual_seed(0)
    on = PGCA(8, 2, text_dim=16, text_guidance=True)
    off = PGCA(8, 2, text_dim=16, text_guidance=False)
    off.load_state_dict(on.state_dict())
    x = torch.randn(1, 8, 4, 4)
    a_img, a_txt, v = on.attention_maps(x, torch.randn(1, 16))
    expected = x + on.project_out((a_img @ v).reshape(1, 8, 4, 4))
    torch.testing.assert_close(off(x, torch.randn(1, 16)), expected)


def _ffn_oracle(x, ffn):
    var = x.var(dim=1, keepdim=True, unbiased=False)
    s1 = x / torch.sqrt(var + ffn.norm.eps) * ffn.norm.weight.view(1, -1, 1, 1)
    s2 = torch.einsum("oc,bchw->bohw", ffn.project_in.weight[:, :, 0, 0], s1)
    s3 = torch.nn.functional.conv2d(s2, ffn.dwconv.weight, padding=1, groups=s2.shape[1])
    half = s3.shape[1] // 2
    x1, x2 = s3[:, :half], s3[:, half:]
    gelu = 0.5 * x1 * (1 + torch.erf(x1 / math.sqrt(2)))
    s4 = gelu * x2
    return x + torch.einsum("oc,bchw->bohw", ffn.project_out.weight[:, :, 0, 0], s4)


def test_ffn_matches_stagewise_oracle():
    ffn = GatedFFN(4, 2.0).double()
    with torch.no_grad():
        for p in ffn.parameters():
            p.copy_(torch.randn_like(p))
    x = torch.randn(2, 4, 5, 6, dtype=torch.float64)
    torch.testing.assert_close(ffn(x), _ffn_oracle(x, ffn), rtol=1e-12, atol=1e-12)


def test_ffn_identities():
    ffn = GatedFFN(4, 2.0)
    x = torch.randn(1, 4, 3, 3)
    with torch.no_grad():
        ffn.project_in.weight[8:].zero_()  # x2 half is identically zero
    torch.testing.assert_close(ffn(x), x, rtol=0, atol=0)
    ffn = GatedFFN(4, 2.0)
    with torch.no_grad():
        ffn.project_out.weight.zero_()
    torch.testing.assert_close(ffn(x), x, rtol=0, atol=0)


def test_zero_output_conv_is_identity(rng):
    m = Restorer(RestorerConfig()).zero_output_()
    for _ in range(3):
        img = rng.random((16, 24, 3)).astype(np.float32)
        out = restore(m, img, rng.normal(size=512))
        np.testing.assert_array_equal(out, img)


def test_text_sensitivity_and_zeroed_text_projection():
    torch.manual_seed(1)
    m = Restorer(TINY).eval()
    with torch.no_grad():
        for mod in m.modules():
            if isinstance(mod, PGCA):
                mod.text_proj.weight.mul_(20)
    x = torch.rand(1, 3, 16, 16)
    y1, y2 = torch.randn(1, 16), torch.randn(1, 16)
    assert (m(x, y1, clamp=False) - m(x, y2, clamp=False)).abs().max() > 0
    with torch.no_grad():
        for mod in m.modules():
            if isinstance(mod, PGCA):
                mod.text_proj.weight.zero_()
    torch.testing.assert_close(m(x, y1), m(x, y2), rtol=0, atol=0)


def test_clamp_only_at_inference():
    m = Restorer(TINY)
    with torch.no_grad():
        m.output.weight.fill_(1.0)
    x = torch.rand(1, 3, 8, 8)
    y = torch.randn(1, 16)
    assert m.train()(x, y).max() > 1 or m.train()(x, y).min() < 0
    out = m.eval()(x, y)
    assert out.min() >= 0 and out.max() <= 1


def test_forward_deterministic():
    torch.manual_seed(3)
    m = Restorer(TINY).eval()
    x, y = torch.rand(2, 3, 16, 16), torch.randn(2, 16)
    torch.testing.assert_close(m(x, y), m(x, y), rtol=0, atol=0)


def test_restore_pad_handles_any_size(rng):
    m = Restorer(TINY)
    out = restore(m, rng.random((13, 21, 3)), rng.normal(size=16), pad=True)
    assert out.shape == (13, 21, 3)


def test_restore_with_classifier_override(stub_classifier, rng):
    m = Restorer(RestorerConfig()).zero_output_()
    img = rng.random((16, 16, 3)).astype(np.float32)
    out, used = restore_with_classifier(m, img, stub_classifier, override="haze+rain")
    assert used is DegradationType.HAZE_RAIN
    _, auto = restore_with_classifier(m, img, stub_classifier)
    assert auto is stub_classifier.classify(img)[0]


def test_pgca_gradients():
    torch.manual_seed(0)
    blk = PGCA(4, 2, text_dim=6).double()
    x = torch.randn(1, 4, 8, 8, dtype=torch.float64, requires_grad=True)
    y = torch.randn(1, 6, dtype=torch.float64, requires_grad=True)
    w = torch.randn(1, 4, 8, 8, dtype=torch.float64)
    err = fd_check(lambda: (blk(x, y) * w).sum(), [x, y, *blk.parameters()])
    assert err < 1e-3


def test_ffn_gradients():
    torch.manual_seed(0)
    ffn = GatedFFN(4, 2.0).double()
    x = torch.randn(1, 4, 8, 8, dtype=torch.float64, requires_grad=True)
    w = torch.randn(1, 4, 8, 8, dtype=torch.float64)
    assert fd_check(lambda: (ffn(x) * w).sum(), [x, *ffn.parameters()]) < 1e-3
