"""Zero-shot degradation scene classifier.

Eleven prompts ``"The image has <type> degradation"`` are embedded once by a
frozen text encoder. An image embedding is compared to every prompt by cosine
similarity, scaled by a temperature and pushed through a softmax. A linear
adapter on the image side (identity at initialisation) is the only part that
is ever trained.
"""
from __future__ import annotations

import hashlib
import logging
import math
import os
from typing import Protocol, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import BackendError, ClassificationError, DataError
from .types import ALL_TYPES, NUM_TYPES, DegradationType

log = logging.getLogger(__name__)

EMBED_DIM = 512
PROMPT_TEMPLATE = "The image has {} degradation"
DEFAULT_TEMPERATURE = 100.0


def build_prompts() -> list[str]:
    return [PROMPT_TEMPLATE.format(t.prompt_text) for t in ALL_TYPES]


class EncoderBackend(Protocol):
    identifier: str
    embedding_dim: int

    def encode_text(self, prompts: Sequence[str]) -> torch.Tensor: ...

    def encode_image(self, images: torch.Tensor) -> torch.Tensor: ...


# --------------------------------------------------------------------------
# stub backend


def _token_vector(token: str, seed: int, dim: int) -> np.ndarray:
    digest = hashlib.sha256(f"{seed}:{token}".encode()).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    return rng.standard_normal(dim)


class StubBackend(nn.Module):
    """Deterministic stand-in for a pretrained vision-language encoder pair.

    Text: hashed bag of unigrams and bigrams. Image: 64 pooled photometric
    statistics (luminance, channel extrema, saturation, log-luminance and a
    white top-hat map) plus a fixed random conv stack, run on the
    contrast-normalised image and its top-hat, pooled by mean, std and two
    upper quantiles. Nothing in here is trained.
    """

    input_size = 64
    widths = (48, 32, 32)
    _quantiles = (0.02, 0.1, 0.25, 0.5, 0.75, 0.9, 0.98, 0.995)
    _pool_quantiles = (0.9, 0.98)

    def __init__(self, seed: int = 0):
        super().__init__()
        self.seed = seed
        self.embedding_dim = EMBED_DIM
        self.identifier = f"stub-conv-bow-v1-seed{seed}"
        gen = torch.Generator().manual_seed(seed)
        c_in = 6
        convs = []
        for i, c in enumerate(self.widths):
            w = torch.randn(c, c_in, 3, 3, generator=gen)
            w = w - w.mean(dim=(1, 2, 3), keepdim=True)
            conv = nn.Conv2d(c_in, c, 3, stride=1 if i == 0 else 2, padding=1, bias=False)
            with torch.no_grad():
                conv.weight.copy_(w / w.flatten(1).norm(dim=1).view(-1, 1, 1, 1))
            convs.append(conv)
            c_in = c
        self.convs = nn.ModuleList(convs)
        self.register_buffer("quantiles", torch.tensor(self._quantiles))
        self.register_buffer("pool_quantiles", torch.tensor(self._pool_quantiles))
        self.requires_grad_(False)
        self.eval()
        photometric = 5 * (len(self._quantiles) + 2) + len(self._quantiles) + 6
        assert photometric + (2 + len(self._pool_quantiles)) * sum(self.widths) == EMBED_DIM

    def encode_text(self, prompts):
        rows = []
        for p in prompts:
            words = p.lower().split()
            tokens = words + [f"{a} {b}" for a, b in zip(words, words[1:])]
            rows.append(sum(_token_vector(t, self.seed, EMBED_DIM) for t in tokens))
        return torch.as_tensor(np.stack(rows), dtype=torch.float32)

    def _summaries(self, v):
        return [torch.quantile(v, self.quantiles, dim=1).T, v.mean(1, keepdim=True), v.std(1, keepdim=True)]

    @torch.no_grad()
    def encode_image(self, images):
        x = images.float().clamp(0.0, 1.0)
        if x.shape[-2:] != (self.input_size, self.input_size):
            x = F.interpolate(x, size=(self.input_size, self.input_size), mode="bilinear",
                              antialias=True, align_corners=False)
        b = x.shape[0]
        lum = x.mean(1).flatten(1)
        hi = x.max(1)[0].flatten(1)
        lo = x.min(1)[0].flatten(1)
        sat = (hi - lo) / (hi + 1e-2)
        feats = []
        for v in (lum, lo, hi, sat, torch.log(lum + 1e-2)):
            feats += self._summaries(v)
        # white top-hat keeps bright structures narrower than 3 px (streaks, flakes)
        opened = F.max_pool2d(-F.max_pool2d(-x, 3, 1, 1), 3, 1, 1)
        scale = torch.quantile(x.reshape(b, -1), 0.99, dim=1).view(-1, 1, 1, 1) + 1e-2
        tophat = (x - opened) / scale
        feats += [torch.quantile(tophat.mean(1).flatten(1), self.quantiles, dim=1).T,
                  tophat.mean((2, 3)), tophat.std((2, 3))]
        mu = x.mean(dim=(1, 2, 3), keepdim=True)
        sd = x.std(dim=(1, 2, 3), keepdim=True)
        h = torch.cat([(x - mu) / (sd + 1e-2), 5.0 * tophat], dim=1)
        for conv in self.convs:
            h = F.relu(conv(h))
            flat = h.flatten(2)
            feats += [flat.mean(2), flat.std(2)]
            feats += list(torch.quantile(flat, self.pool_quantiles, dim=2))
        return torch.cat(feats, dim=1)


# --------------------------------------------------------------------------
# pretrained backend


class ClipBackend(nn.Module):
    """Hugging Face CLIP (512-d projection); weights cached under ``$VLUR_CACHE``."""

    _mean = (0.48145466, 0.4578275, 0.40821073)
    _std = (0.26862954, 0.26130258, 0.27577711)

    def __init__(self, model_name: str = "openai/clip-vit-base-patch32", cache_dir: str | None = None):
        super().__init__()
        try:
            from transformers import CLIPModel, CLIPTokenizer
        except ImportError as exc:  # pragma: no cover
            raise BackendError(f"transformers is required for the pretrained backend: {exc}") from exc
        cache_dir = cache_dir or os.environ.get("VLUR_CACHE")
        try:
            self.model = CLIPModel.from_pretrained(model_name, cache_dir=cache_dir)
            self.tokenizer = CLIPTokenizer.from_pretrained(model_name, cache_dir=cache_dir)
        except Exception as exc:  # network / cache failures surface here
            raise BackendError(f"[{model_name}] could not load pretrained weights: {exc}") from exc
        self.identifier = f"clip:{model_name}"
        self.embedding_dim = int(self.model.config.projection_dim)
        if self.embedding_dim != EMBED_DIM:
            raise BackendError(f"[{model_name}] embeds to {self.embedding_dim} dims, need {EMBED_DIM}")
        self.requires_grad_(False)
        self.eval()

    @torch.no_grad()
    def encode_text(self, prompts):
        tok = self.tokenizer(list(prompts), padding=True, return_tensors="pt")
        return self.model.get_text_features(**tok).float()

    @torch.no_grad()
    def encode_image(self, images):
        x = F.interpolate(images.float(), size=(224, 224), mode="bicubic", align_corners=False)
        mean = torch.tensor(self._mean).view(1, 3, 1, 1)
        std = torch.tensor(self._std).view(1, 3, 1, 1)
        return self.model.get_image_features(pixel_values=(x.clamp(0, 1) - mean) / std).float()


def make_backend(name: str, seed: int = 0):
    if name == "stub":
        return StubBackend(seed)
    if name == "pretrained":
        return ClipBackend()
    raise BackendError(f"unknown classifier backend {name!r} (expected 'stub' or 'pretrained')")


# --------------------------------------------------------------------------


def _normalize_rows(x: torch.Tensor, what: str) -> torch.Tensor:
    norms = x.norm(dim=-1, keepdim=True)
    if not torch.isfinite(x).all() or (norms <= 1e-12).any():
        raise ClassificationError(f"degenerate {what} embedding (zero norm or non-finite)")
    return x / norms


def encode_prompts(backend, prompts: Sequence[str] | None = None) -> torch.Tensor:
    prompts = build_prompts() if prompts is None else list(prompts)
    try:
        feats = backend.encode_text(prompts)
    except ClassificationError:
        raise
    except Exception as exc:
        raise BackendError(f"[{getattr(backend, 'identifier', backend)}] text encoding failed: {exc}") from exc
    return _normalize_rows(feats.double(), "text")


def similarity_probs(image_emb: torch.Tensor, text_matrix: torch.Tensor,
                     temperature: float = DEFAULT_TEMPERATURE) -> torch.Tensor:
    """Softmax over temperature-scaled cosine similarities; rows sum to one."""
    img = _normalize_rows(image_emb.double().reshape(-1, text_matrix.shape[1]), "image")
    txt = _normalize_rows(text_matrix.double(), "text")
    return torch.softmax(temperature * img @ txt.T, dim=-1)


def _as_batch(img) -> torch.Tensor:
    if isinstance(img, torch.Tensor):
        return img if img.dim() == 4 else img.unsqueeze(0)
    arr = np.asarray(img, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))


def classify(backend, text_matrix, img, temperature: float = DEFAULT_TEMPERATURE, adapter=None):
    """Predict the degradation of one image. Returns ``(type, probs)``."""
    emb = backend.encode_image(_as_batch(img)).double()
    if adapter is not None:
        emb = adapter(emb)
    probs = similarity_probs(emb, torch.as_tensor(text_matrix), temperature)[0].numpy()
    return DegradationType.from_index(int(np.argmax(probs))), probs


class SceneClassifier:
    """Backend + cached prompt embeddings + image-side adapter."""

    def __init__(self, backend, temperature: float = DEFAULT_TEMPERATURE):
        self.backend = backend
        self.temperature = float(temperature)
        self.adapter = nn.Linear(EMBED_DIM, EMBED_DIM).double()
        with torch.no_grad():
            self.adapter.weight.copy_(torch.eye(EMBED_DIM, dtype=torch.float64))
            self.adapter.bias.zero_()
        self._text = None
        self.frozen = False

    @property
    def identifier(self) -> str:
        return self.backend.identifier

    def text_matrix(self) -> torch.Tensor:
        if self._text is None:
            self._text = encode_prompts(self.backend)
        return self._text

    def text_feature_for_type(self, dtype) -> np.ndarray:
        row = self.text_matrix()[DegradationType.parse(dtype).index]
        return row.numpy().astype(np.float32)

    def text_features(self, types: Sequence[DegradationType]) -> torch.Tensor:
        idx = torch.tensor([DegradationType.parse(t).index for t in types])
        return self.text_matrix()[idx].float()

    def embed_raw(self, images: torch.Tensor, batch_size: int = 64) -> torch.Tensor:
        out = [self.backend.encode_image(images[i:i + batch_size]) for i in range(0, len(images), batch_size)]
        return torch.cat(out).double()

    def logits_from_raw(self, raw: torch.Tensor) -> torch.Tensor:
        img = self.adapter(raw)
        img = img / img.norm(dim=-1, keepdim=True).clamp_min(1e-12)
        return self.temperature * img @ self.text_matrix().T

    def probs(self, images) -> np.ndarray:
        with torch.no_grad():
            raw = self.embed_raw(_as_batch(images))
            emb = self.adapter(raw)
            return similarity_probs(emb, self.text_matrix(), self.temperature).numpy()

    def classify(self, img):
        p = self.probs(img)[0]
        return DegradationType.from_index(int(np.argmax(p))), p

    def predict(self, images) -> list[DegradationType]:
        return [DegradationType.from_index(int(i)) for i in np.argmax(self.probs(images), axis=1)]

    def freeze(self) -> "SceneClassifier":
        # checkpoints store float32; rounding here makes save/load exact
        with torch.no_grad():
            for p in self.adapter.parameters():
                p.copy_(p.float().double())
        self.adapter.requires_grad_(False)
        if isinstance(self.backend, nn.Module):
            self.backend.requires_grad_(False)
        self.frozen = True
        return self

    def checksum(self) -> str:
        h = hashlib.sha256(self.identifier.encode())
        modules = [self.adapter] + ([self.backend] if isinstance(self.backend, nn.Module) else [])
        for mod in modules:
            for name, t in sorted(mod.state_dict().items()):
                h.update(name.encode())
                h.update(t.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()

    def adapter_state(self) -> dict[str, np.ndarray]:
        return {k: v.detach().cpu().numpy() for k, v in self.adapter.state_dict().items()}

    def load_adapter_state(self, state: dict) -> None:
        with torch.no_grad():
            for k, v in state.items():
                getattr(self.adapter, k).copy_(torch.as_tensor(np.asarray(v), dtype=torch.float64))


def _load_images(manifest) -> tuple[torch.Tensor, torch.Tensor]:
    imgs, labels = [], []
    for i, e in enumerate(manifest.entries):
        from .data import read_image

        imgs.append(read_image(manifest.resolve(e.degraded)).astype(np.float32))
        labels.append(e.type.index)
    if not imgs:
        raise DataError("classifier training manifest is empty")
    shapes = {im.shape for im in imgs}
    if len(shapes) == 1:
        batch = _as_batch(np.stack(imgs))
    else:
        batch = None
    return batch if batch is not None else imgs, torch.tensor(labels)


def _embed_manifest(classifier: SceneClassifier, manifest):
    images, labels = _load_images(manifest)
    if isinstance(images, list):
        raw = torch.cat([classifier.embed_raw(_as_batch(im)) for im in images])
    else:
        raw = classifier.embed_raw(images)
    return raw, labels


def accuracy(classifier: SceneClassifier, manifest) -> float:
    raw, labels = _embed_manifest(classifier, manifest)
    with torch.no_grad():
        pred = classifier.logits_from_raw(raw).argmax(dim=1)
    return float((pred == labels).double().mean())


def finetune_classifier(classifier: SceneClassifier, train_manifest, epochs: int = 400,
                        lr: float = 3e-3, test_manifest=None, seed: int = 0,
                        weight_decay: float = 1e-2) -> dict:
    """Fit the image-side adapter with cross-entropy over the 11 prompts, then freeze.

    Backend and prompt embeddings are never updated. Training is full-batch
    Adam over precomputed backend features. The adapter ``A f + b`` is
    optimised as ``W z + c`` on standardised features ``z = (f - mu) / sd``
    and folded back afterwards; ``W = diag(sd), c = mu`` is exactly the
    identity adapter, so zero epochs change nothing.
    """
    if len(train_manifest) == 0:
        raise DataError("classifier training manifest is empty")
    if classifier.frozen:
        raise ClassificationError("classifier is frozen; fine-tune before freezing")
    torch.manual_seed(seed)
    raw, labels = _embed_manifest(classifier, train_manifest)
    losses = []
    if epochs > 0:
        mu = raw.mean(0)
        sd = raw.std(0).clamp_min(1e-6)
        z = (raw - mu) / sd
        adapter = classifier.adapter
        w = (adapter.weight.detach() * sd).clone().requires_grad_(True)
        c = (adapter.bias.detach() + adapter.weight.detach() @ mu).clone().requires_grad_(True)
        text = classifier.text_matrix()
        opt = torch.optim.Adam([w, c], lr=lr, weight_decay=weight_decay)
        # keep the lowest-loss iterate; decay can shrink w until the normalised
        # output turns unstable late in training
        best = (math.inf, w.detach().clone(), c.detach().clone())
        for _ in range(epochs):
            opt.zero_grad()
            out = F.normalize(z @ w.T + c, dim=-1)
            loss = F.cross_entropy(classifier.temperature * out @ text.T, labels)
            if loss.item() < best[0]:
                best = (loss.item(), w.detach().clone(), c.detach().clone())
            loss.backward()
            opt.step()
            losses.append(loss.item())
        with torch.no_grad():
            w, c = best[1], best[2]
            adapter.weight.copy_(w / sd)
            adapter.bias.copy_(c - (w / sd) @ mu)
    classifier.freeze()
    report = {
        "backend": classifier.identifier,
        "epochs": epochs,
        "lr": lr,
        "train_accuracy": accuracy(classifier, train_manifest),
        "final_loss": losses[-1] if losses else None,
        "best_loss": min(losses) if losses else None,
    }
    if test_manifest is not None:
        report["test_accuracy"] = accuracy(classifier, test_manifest)
    log.info("classifier fine-tune: %s", report)
    return report


__all__ = [
    "EMBED_DIM", "NUM_TYPES", "PROMPT_TEMPLATE", "ClipBackend", "SceneClassifier", "StubBackend",
    "accuracy", "build_prompts", "classify", "encode_prompts", "finetune_classifier", "make_backend",
    "similarity_probs",
]
