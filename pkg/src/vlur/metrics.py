"""Full-reference quality metrics on RGB and Table-style reporting."""
from __future__ import annotations

import dataclasses
import json
import math
from collections import OrderedDict

import numpy as np

from . import _kernels
from .errors import DataError, ShapeError
from .types import ALL_TYPES, DegradationType

PSNR_CAP = 100.0
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


def _prepare(a, b, quantize: bool):
    a = np.clip(np.asarray(a, dtype=np.float64), 0.0, 1.0)
    b = np.clip(np.asarray(b, dtype=np.float64), 0.0, 1.0)
    if a.shape != b.shape:
        raise ShapeError(f"metric inputs differ in shape: {a.shape} vs {b.shape}")
    if quantize:
        a = np.round(a * 255.0) / 255.0
        b = np.round(b * 255.0) / 255.0
    return a, b


def psnr(a, b, quantize: bool = False) -> float:
    """PSNR in dB over all pixel-channels of images in [0, 1]; zero error gives 100 dB."""
    a, b = _prepare(a, b, quantize)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def gaussian_kernel(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2.0 * sigma**2))
    return g / g.sum()


def ssim(a, b, quantize: bool = False, window_size: int = 11, sigma: float = 1.5) -> float:
    """Channel-averaged SSIM with a Gaussian window, over valid window positions only."""
    a, b = _prepare(a, b, quantize)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if min(a.shape[:2]) < window_size:
        raise ShapeError(f"SSIM needs both sides >= {window_size}, got {a.shape[:2]}")
    k = gaussian_kernel(window_size, sigma)
    filt = _kernels.gaussian_filter_valid
    vals = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        mx, my = filt(x, k), filt(y, k)
        sxx = filt(x * x, k) - mx * mx
        syy = filt(y * y, k) - my * my
        sxy = filt(x * y, k) - mx * my
        num = (2 * mx * my + SSIM_C1) * (2 * sxy + SSIM_C2)
        den = (mx * mx + my * my + SSIM_C1) * (sxx + syy + SSIM_C2)
        vals.append(float(np.mean(num / den)))
    return float(np.mean(vals))


@dataclasses.dataclass
class ImageScore:
    index: int
    type: DegradationType
    psnr: float
    ssim: float
    guided_by: DegradationType

    def to_dict(self) -> dict:
        return {"index": self.index, "type": self.type.value, "psnr": self.psnr, "ssim": self.ssim,
                "guided_by": self.guided_by.value}


@dataclasses.dataclass
class MetricReport:
    images: list[ImageScore]
    config: dict = dataclasses.field(default_factory=dict)
    per_type_mean: bool = False

    def rows(self) -> "OrderedDict[DegradationType, dict]":
        out = OrderedDict()
        for t in ALL_TYPES:
            scores = [s for s in self.images if s.type is t]
            if scores:
                out[t] = {
                    "psnr": float(np.mean([s.psnr for s in scores])),
                    "ssim": float(np.mean([s.ssim for s in scores])),
                    "count": len(scores),
                }
        return out

    def average(self) -> dict:
        if not self.images:
            raise DataError("no images in report")
        if self.per_type_mean:
            rows = list(self.rows().values())
            return {"psnr": float(np.mean([r["psnr"] for r in rows])),
                    "ssim": float(np.mean([r["ssim"] for r in rows])),
                    "count": len(self.images)}
        return {"psnr": float(np.mean([s.psnr for s in self.images])),
                "ssim": float(np.mean([s.ssim for s in self.images])),
                "count": len(self.images)}

    def to_dict(self) -> dict:
        rows = [{"type": t.value, "roman": t.roman_index, **r} for t, r in self.rows().items()]
        return {
            "rows": rows,
            "average": self.average(),
            "config": {**self.config, "per_type_mean": self.per_type_mean},
            "images": [s.to_dict() for s in self.images],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_table(self) -> str:
        lines = [f"{'':<5} {'type':<15} {'PSNR':>8} {'SSIM':>7} {'n':>5}"]
        for t, r in self.rows().items():
            lines.append(f"{t.roman_index:<5} {t.value:<15} {r['psnr']:8.2f} {r['ssim']:7.3f} {r['count']:5d}")
        avg = self.average()
        lines.append(f"{'Avg.':<5} {'':<15} {avg['psnr']:8.2f} {avg['ssim']:7.3f} {avg['count']:5d}")
        return "\n".join(lines) + "\n"


def evaluate_report(model, classifier, manifest, guidance: str = "oracle", quantize: bool = False,
                    per_type_mean: bool = False, config: dict | None = None) -> MetricReport:
    """Restore every pair of ``manifest`` and score it against its ground truth.

    ``guidance='oracle'`` feeds the true type's text feature; ``'predicted'``
    uses the classifier's argmax.
    """
    from .restorer import restore

    if guidance not in ("oracle", "predicted"):
        raise ValueError(f"guidance must be 'oracle' or 'predicted', got {guidance!r}")
    if len(manifest) == 0:
        raise DataError("evaluation split is empty")
    scores = []
    for i, (clean, degraded, dtype) in enumerate(manifest.iter_pairs()):
        guide = dtype if guidance == "oracle" else classifier.classify(degraded)[0]
        restored = restore(model, degraded, classifier.text_feature_for_type(guide), pad=True)
        scores.append(ImageScore(i, dtype, psnr(restored, clean, quantize), ssim(restored, clean, quantize), guide))
    cfg = {"guidance": guidance, "quantize": quantize, "split": manifest.split, **(config or {})}
    return MetricReport(scores, cfg, per_type_mean)
