"""Text-guided encoder-decoder restorer.

Four levels of CTransAgg blocks (prompt-guided cross-attention followed by a
gated feed-forward network). Level ``l`` (0-based here) runs at
``H / 2**l`` x ``W / 2**l`` with ``2**l * C`` channels. The decoder fuses each
encoder skip by concatenation and a 1x1 conv, and a final 3x3 conv adds a
residual onto the degraded input.

Attention is over channels: every head builds ``c_h x c_h`` maps, which keeps
cost linear in the number of pixels.
"""
from __future__ import annotations

import dataclasses
import math

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ShapeError
from .types import DegradationType

MULTIPLE = 8  # three 2x downsamples


@dataclasses.dataclass
class RestorerConfig:
    base_channels: int = 16
    blocks: tuple[int, int, int, int] = (2, 2, 2, 2)
    heads: tuple[int, int, int, int] = (1, 2, 4, 8)
    ffn_expansion: float = 2.0
    text_dim: int = 512
    text_guidance: bool = True
    # L2-normalise Q/K along pixels before the channel attention
    attn_normalize: bool = True

    def __post_init__(self):
        self.blocks = tuple(int(b) for b in self.blocks)
        self.heads = tuple(int(h) for h in self.heads)
        if len(self.blocks) != 4 or len(self.heads) != 4:
            raise ConfigError("restorer needs exactly 4 entries in blocks and heads")
        if self.base_channels < 1 or self.ffn_expansion <= 0:
            raise ConfigError("base_channels must be >= 1 and ffn_expansion > 0")
        for lvl, h in enumerate(self.heads):
            c = self.base_channels * 2**lvl
            if h < 1 or c % h:
                raise ConfigError(f"heads[{lvl}]={h} does not divide {c} channels")

    def channels(self, level: int) -> int:
        return self.base_channels * 2**level

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["blocks"] = list(self.blocks)
        d["heads"] = list(self.heads)
        return d


def _softplus_inv(y: float) -> float:
    return math.log(math.expm1(y))


class ChannelLayerNorm(nn.Module):
    """Bias-free layer norm over the channel axis of an NCHW tensor."""

    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(dim))
        self.eps = eps

    def forward(self, x):
        var = x.var(dim=1, keepdim=True, unbiased=False)
        return x / torch.sqrt(var + self.eps) * self.weight.view(1, -1, 1, 1)


class PGCA(nn.Module):
    """Prompt-guided cross-attention.

    ``out = x + proj( (softmax(K Q_I^T / a) + softmax(K Q_T^T / a)) V )`` per
    head, where ``Q_T`` is the linearly mapped text feature broadcast over
    pixels. With ``text_guidance=False`` the text map is dropped.
    """

    def __init__(self, dim: int, heads: int, text_dim: int = 512, text_guidance: bool = True,
                 normalize: bool = True):
        super().__init__()
        if dim % heads:
            raise ConfigError(f"{heads} heads do not divide {dim} channels")
        self.dim, self.heads = dim, heads
        self.text_guidance = text_guidance
        self.normalize = normalize
        self.norm = ChannelLayerNorm(dim)
        self.qkv = nn.Conv2d(dim, dim * 3, 1, bias=False)
        self.qkv_dw = nn.Conv2d(dim * 3, dim * 3, 3, padding=1, groups=dim * 3, bias=False)
        self.text_proj = nn.Linear(text_dim, dim, bias=False)
        self.temperature_raw = nn.Parameter(torch.full((heads, 1, 1), _softplus_inv(1.0)))
        self.project_out = nn.Conv2d(dim, dim, 1, bias=False)

    @property
    def temperature(self):
        return F.softplus(self.temperature_raw)

    def attention_maps(self, x, y_t):
        """Return ``(a_img, a_txt, v)`` with shapes (b, heads, c_h, c_h) and (b, heads, c_h, hw)."""
        b, c, h, w = x.shape
        hw = h * w
        ch = c // self.heads
        q, k, v = self.qkv_dw(self.qkv(self.norm(x))).chunk(3, dim=1)
        q = q.reshape(b, self.heads, ch, hw)
        k = k.reshape(b, self.heads, ch, hw)
        v = v.reshape(b, self.heads, ch, hw)
        if self.normalize:
            q = F.normalize(q, dim=-1)
            k = F.normalize(k, dim=-1)
        alpha = self.temperature
        a_img = torch.softmax(k @ q.transpose(-2, -1) / alpha, dim=-1)
        if not self.text_guidance:
            return a_img, None, v
        qt = self.text_proj(y_t).reshape(b, self.heads, ch, 1)
        # K (c_h x hw) times the pixel-constant text query (hw x c_h) is the
        # pixel sum of K scaled by each text channel
        k_sum = k.sum(dim=-1, keepdim=True)
        if self.normalize:
            # the broadcast query has per-row L2 norm |qt| over pixels
            k_sum = k_sum / math.sqrt(hw)
        a_txt = torch.softmax(k_sum @ qt.transpose(-2, -1) / alpha, dim=-1)
        return a_img, a_txt, v

    def forward(self, x, y_t):
        b, c, h, w = x.shape
        a_img, a_txt, v = self.attention_maps(x, y_t)
        attn = a_img if a_txt is None else a_img + a_txt
        out = (attn @ v).reshape(b, c, h, w)
        return x + self.project_out(out)


class GatedFFN(nn.Module):
    """``x + Conv1x1(GELU(x1) * x2)`` with ``x1, x2 = chunk(DWConv3x3(Conv1x1(LN(x))))``."""

    def __init__(self, dim: int, expansion: float = 2.0):
        super().__init__()
        hidden = max(1, int(dim * expansion))
        self.norm = ChannelLayerNorm(dim)
        self.project_in = nn.Conv2d(dim, hidden * 2, 1, bias=False)
        self.dwconv = nn.Conv2d(hidden * 2, hidden * 2, 3, padding=1, groups=hidden * 2, bias=False)
        self.project_out = nn.Conv2d(hidden, dim, 1, bias=False)

    def forward(self, x):
        x1, x2 = self.dwconv(self.project_in(self.norm(x))).chunk(2, dim=1)
        return x + self.project_out(F.gelu(x1) * x2)


class CTransAgg(nn.Module):
    def __init__(self, dim, heads, expansion, text_dim, text_guidance, normalize):
        super().__init__()
        self.attn = PGCA(dim, heads, text_dim, text_guidance, normalize)
        self.ffn = GatedFFN(dim, expansion)

    def forward(self, x, y_t):
        return self.ffn(self.attn(x, y_t))


class Downsample(nn.Module):
    """Space-to-depth then 1x1 conv: (c, h, w) -> (2c, h/2, w/2)."""

    def __init__(self, dim):
        super().__init__()
        self.body = nn.Sequential(nn.PixelUnshuffle(2), nn.Conv2d(dim * 4, dim * 2, 1, bias=False))

    def forward(self, x):
        return self.body(x)


class Upsample(nn.Module):
    """1x1 conv then depth-to-space: (2c, h, w) -> (c, 2h, 2w)."""

    def __init__(self, dim):
        super().__init__()
        self.body = nn.Sequential(nn.Conv2d(dim * 2, dim * 4, 1, bias=False), nn.PixelShuffle(2))

    def forward(self, x):
        return self.body(x)


class Restorer(nn.Module):
    def __init__(self, cfg: RestorerConfig | None = None):
        super().__init__()
        cfg = cfg or RestorerConfig()
        self.cfg = cfg

        def level(lvl):
            return nn.ModuleList(
                CTransAgg(cfg.channels(lvl), cfg.heads[lvl], cfg.ffn_expansion, cfg.text_dim,
                          cfg.text_guidance, cfg.attn_normalize)
                for _ in range(cfg.blocks[lvl])
            )

        c = cfg.base_channels
        self.shallow = nn.Conv2d(3, c, 3, padding=1, bias=False)
        self.encoders = nn.ModuleList(level(lvl) for lvl in range(3))
        self.downs = nn.ModuleList(Downsample(cfg.channels(lvl)) for lvl in range(3))
        self.latent = level(3)
        self.ups = nn.ModuleList(Upsample(cfg.channels(lvl)) for lvl in range(3))
        self.fuses = nn.ModuleList(
            nn.Conv2d(2 * cfg.channels(lvl), cfg.channels(lvl), 1, bias=False) for lvl in range(3))
        self.decoders = nn.ModuleList(level(lvl) for lvl in range(3))
        self.output = nn.Conv2d(c, 3, 3, padding=1, bias=False)

    @staticmethod
    def _run(blocks, x, y_t):
        for blk in blocks:
            x = blk(x, y_t)
        return x

    def encode(self, x, y_t):
        """Return the skip features of levels 0-2 and the latent feature."""
        feats = []
        h = self.shallow(x)
        for lvl in range(3):
            h = self._run(self.encoders[lvl], h, y_t)
            feats.append(h)
            h = self.downs[lvl](h)
        return feats, self._run(self.latent, h, y_t)

    def forward(self, x, y_t, clamp: bool | None = None):
        if x.dim() != 4 or x.shape[1] != 3:
            raise ShapeError(f"expected an N x 3 x H x W batch, got {tuple(x.shape)}")
        h, w = x.shape[-2:]
        if h % MULTIPLE or w % MULTIPLE:
            raise ShapeError(f"height and width must be multiples of {MULTIPLE}, got {h}x{w}")
        if y_t.dim() == 1:
            y_t = y_t.unsqueeze(0)
        if y_t.shape[0] == 1 and x.shape[0] > 1:
            y_t = y_t.expand(x.shape[0], -1)
        skips, z = self.encode(x, y_t)
        for lvl in (2, 1, 0):
            z = self.ups[lvl](z)
            z = self.fuses[lvl](torch.cat([z, skips[lvl]], dim=1))
            z = self._run(self.decoders[lvl], z, y_t)
        out = self.output(z) + x
        if clamp is None:
            clamp = not self.training
        return out.clamp(0.0, 1.0) if clamp else out

    @torch.no_grad()
    def zero_output_(self) -> "Restorer":
        """Zero the reconstruction conv, making the network the identity map."""
        self.output.weight.zero_()
        return self


def to_tensor(img: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """H x W x 3 (or N x H x W x 3) array -> N x 3 x H x W tensor."""
    arr = np.asarray(img)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2))).to(dtype)


def to_image(t: torch.Tensor) -> np.ndarray:
    arr = t.detach().cpu().numpy().transpose(0, 2, 3, 1)
    return arr[0] if arr.shape[0] == 1 else arr


def restore(model: Restorer, img: np.ndarray, y_t, pad: bool = False) -> np.ndarray:
    """Inference on one H x W x 3 image; output clamped to [0, 1].

    With ``pad=True`` any size is accepted: the image is reflect-padded to a
    multiple of 8 and the result cropped back.
    """
    param = next(model.parameters())
    x = to_tensor(img, dtype=param.dtype)
    h, w = x.shape[-2:]
    if pad:
        ph, pw = (-h) % MULTIPLE, (-w) % MULTIPLE
        if ph or pw:
            x = F.pad(x, (0, pw, 0, ph), mode="reflect")
    y = torch.as_tensor(np.asarray(y_t), dtype=param.dtype)
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            out = model(x, y, clamp=True)
    finally:
        model.train(was_training)
    return to_image(out[..., :h, :w])


def restore_with_classifier(model: Restorer, img: np.ndarray, classifier,
                            override: DegradationType | str | None = None):
    """Guide restoration with a manual type, or with the classifier's prediction."""
    if override is not None:
        dtype = DegradationType.parse(override)
    else:
        dtype, _ = classifier.classify(img)
    return restore(model, img, classifier.text_feature_for_type(dtype)), dtype
