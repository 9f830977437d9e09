"""Training objective: Smooth-L1 + MS-SSIM + contrastive feature ratio."""
from __future__ import annotations

import dataclasses
import math
import os
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ShapeError

MSSSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
WINDOW_SIZE = 11
WINDOW_SIGMA = 1.5
CDRL_EPS = 1e-8


@dataclasses.dataclass
class LossWeights:
    gamma1: float = 0.6
    gamma2: float = 0.3
    gamma3: float = 0.1
    lambda1: float = 1.0
    lambda2: float = 1.0
    msssim_weights: tuple[float, ...] = MSSSIM_WEIGHTS
    msssim_scales: int = 5
    smooth_l1_beta: float = 1.0

    def __post_init__(self):
        self.msssim_weights = tuple(float(w) for w in self.msssim_weights)
        if min(self.gamma1, self.gamma2, self.gamma3) < 0:
            raise ConfigError("loss weights gamma1..3 must be non-negative")
        if self.lambda1 <= 0 or self.lambda2 <= 0:
            raise ConfigError("lambda1 and lambda2 must be positive")
        if abs(sum(self.msssim_weights) - 1.0) > 2e-4:
            raise ConfigError(f"MS-SSIM scale weights must sum to 1, got {sum(self.msssim_weights)}")
        if not 1 <= self.msssim_scales <= len(self.msssim_weights):
            raise ConfigError(f"msssim_scales must be in 1..{len(self.msssim_weights)}")

    def scale_weights(self) -> tuple[float, ...]:
        """Weights for the configured number of scales; fewer scales renormalise the leading ones."""
        w = self.msssim_weights[: self.msssim_scales]
        total = sum(w)
        return tuple(x / total for x in w)


def smooth_l1(restored, target, beta: float = 1.0):
    """Mean Huber-style penalty over every pixel-channel value."""
    if restored.shape != target.shape:
        raise ShapeError(f"smooth_l1 shape mismatch: {tuple(restored.shape)} vs {tuple(target.shape)}")
    d = (restored - target).abs()
    return torch.where(d < beta, 0.5 * d * d / beta, d - 0.5 * beta).mean()


# --------------------------------------------------------------------------
# SSIM family (NCHW tensors in [0, 1])


def gaussian_window(size: int = WINDOW_SIZE, sigma: float = WINDOW_SIGMA, dtype=torch.float64):
    coords = torch.arange(size, dtype=dtype) - (size - 1) / 2.0
    g = torch.exp(-(coords**2) / (2 * sigma**2))
    return g / g.sum()


def _filter(x, win):
    c = x.shape[1]
    k = len(win)
    x = F.conv2d(x, win.view(1, 1, 1, k).expand(c, 1, 1, k), groups=c)
    return F.conv2d(x, win.view(1, 1, k, 1).expand(c, 1, k, 1), groups=c)


def ssim_components(x, y, window_size: int = WINDOW_SIZE, sigma: float = WINDOW_SIGMA):
    """Per-(image, channel) mean SSIM and mean contrast-structure term, valid windows only."""
    win = gaussian_window(window_size, sigma, x.dtype).to(x.device)
    mu_x, mu_y = _filter(x, win), _filter(y, win)
    sxx = _filter(x * x, win) - mu_x * mu_x
    syy = _filter(y * y, win) - mu_y * mu_y
    sxy = _filter(x * y, win) - mu_x * mu_y
    cs_map = (2 * sxy + SSIM_C2) / (sxx + syy + SSIM_C2)
    lum_map = (2 * mu_x * mu_y + SSIM_C1) / (mu_x * mu_x + mu_y * mu_y + SSIM_C1)
    return (lum_map * cs_map).mean(dim=(2, 3)), cs_map.mean(dim=(2, 3))


def ms_ssim(x, y, weights: Sequence[float] = MSSSIM_WEIGHTS, window_size: int = WINDOW_SIZE,
            sigma: float = WINDOW_SIGMA):
    """Multi-scale SSIM: contrast-structure at every scale, luminance at the coarsest."""
    if x.shape != y.shape:
        raise ShapeError(f"ms_ssim shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
    levels = len(weights)
    need = window_size * 2 ** (levels - 1)
    if min(x.shape[-2:]) < need:
        raise ShapeError(f"{levels}-scale MS-SSIM with a {window_size}px window needs sides >= {need}, "
                         f"got {tuple(x.shape[-2:])}")
    w = torch.as_tensor(weights, dtype=x.dtype, device=x.device)
    cs_terms = []
    for i in range(levels):
        ssim_val, cs = ssim_components(x, y, window_size, sigma)
        if i < levels - 1:
            cs_terms.append(F.relu(cs))
            pad = [s % 2 for s in x.shape[2:]]
            x = F.avg_pool2d(x, 2, padding=pad)
            y = F.avg_pool2d(y, 2, padding=pad)
    stack = torch.stack(cs_terms + [F.relu(ssim_val)], dim=0)
    return torch.prod(stack ** w.view(-1, 1, 1), dim=0).mean()


def msssim_loss(restored, target, weights: Sequence[float] = MSSSIM_WEIGHTS,
                window_size: int = WINDOW_SIZE, sigma: float = WINDOW_SIGMA):
    return 1.0 - ms_ssim(restored, target, weights, window_size, sigma)


# --------------------------------------------------------------------------
# contrastive feature loss

_IMAGENET_MEAN = (0.485, 0.456, 0.406)
_IMAGENET_STD = (0.229, 0.224, 0.225)
# features[...] indices of the ReLUs after the 2nd, 4th and 7th convolutions
DEFAULT_TAPS = (3, 8, 15)


class VGGFeatures(nn.Module):
    """Frozen VGG-16 trunk returning activations at the requested ``features`` indices."""

    def __init__(self, taps: Sequence[int] = DEFAULT_TAPS, weights: str = "random", seed: int = 0):
        super().__init__()
        from torchvision.models import VGG16_Weights, vgg16

        self.taps = tuple(sorted(int(t) for t in taps))
        self.weights_kind = weights
        if weights == "pretrained":
            if os.environ.get("VLUR_CACHE"):
                os.environ.setdefault("TORCH_HOME", os.environ["VLUR_CACHE"])
            net = vgg16(weights=VGG16_Weights.IMAGENET1K_V1)
        elif weights == "random":
            with torch.random.fork_rng(devices=[]):
                torch.manual_seed(seed)
                net = vgg16(weights=None)
        else:
            raise ConfigError(f"vgg weights must be 'pretrained' or 'random', got {weights!r}")
        self.body = net.features[: self.taps[-1] + 1]
        self.register_buffer("mean", torch.tensor(_IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(_IMAGENET_STD).view(1, 3, 1, 1))
        self.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True):
        # always frozen
        return super().train(False)

    def forward(self, x):
        h = (x - self.mean.to(x.dtype)) / self.std.to(x.dtype)
        feats = []
        for i, layer in enumerate(self.body):
            h = layer(h)
            if i in self.taps:
                feats.append(h)
        return feats


def cdrl(restored, positive, inp, negatives, extractor, lambda1: float = 1.0, lambda2: float = 1.0):
    """Sum over taps of L1(rec, pos) / (lambda1 L1(rec, in) + lambda2 sum_j L1(rec, neg_j)).

    ``negatives`` is a list of tensors shaped like ``restored`` (one per
    negative slot), or a single tensor shaped (N, B, C, H, W).
    """
    negatives = list(negatives)
    if not negatives:
        raise ValueError("cdrl needs at least one negative sample")
    for t in [positive, inp, *negatives]:
        if t.shape != restored.shape:
            raise ShapeError(f"cdrl inputs must share shape {tuple(restored.shape)}, got {tuple(t.shape)}")
    n_neg = len(negatives)
    with torch.no_grad():
        fixed = extractor(torch.cat([positive, inp, *negatives], dim=0))
    rec = extractor(restored)
    b = restored.shape[0]
    total = restored.new_zeros(())
    for v_rec, v_fix in zip(rec, fixed):
        chunks = v_fix.split(b, dim=0)
        v_pos, v_in, v_negs = chunks[0], chunks[1], chunks[2:2 + n_neg]
        num = (v_rec - v_pos).abs().mean()
        den = lambda1 * (v_rec - v_in).abs().mean()
        for v_neg in v_negs:
            den = den + lambda2 * (v_rec - v_neg).abs().mean()
        total = total + num / den.clamp_min(CDRL_EPS)
    return total


def total_loss(restored, target, inp, negatives, weights: LossWeights | None = None, extractor=None):
    """Weighted sum and per-term breakdown; terms with zero weight are skipped (reported as None)."""
    w = weights or LossWeights()
    terms: dict[str, torch.Tensor | None] = {"l1": None, "msssim": None, "cdrl": None}
    total = restored.new_zeros(())
    if w.gamma1 > 0:
        terms["l1"] = smooth_l1(restored, target, w.smooth_l1_beta)
        total = total + w.gamma1 * terms["l1"]
    if w.gamma2 > 0:
        terms["msssim"] = msssim_loss(restored, target, w.scale_weights())
        total = total + w.gamma2 * terms["msssim"]
    if w.gamma3 > 0:
        if extractor is None:
            raise ConfigError("a feature extractor is required when gamma3 > 0")
        terms["cdrl"] = cdrl(restored, target, inp, negatives, extractor, w.lambda1, w.lambda2)
        total = total + w.gamma3 * terms["cdrl"]
    if not math.isfinite(float(total.detach())):
        bad = [k for k, v in terms.items() if v is not None and not torch.isfinite(v).all()]
        terms["nonfinite"] = bad  # type: ignore[assignment]
    return total, terms
