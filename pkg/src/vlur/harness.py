"""Two-phase training: fit and freeze the scene classifier, then train the restorer.

All randomness during restorer training (epoch order, crops, negatives) is
derived from ``(seed, epoch)`` or ``(seed, step)``, so a run resumed from a
checkpoint replays exactly the batches an uninterrupted run would have seen.
"""
from __future__ import annotations

import contextlib
import dataclasses
import hashlib
import json
import logging
import math
import time
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .classifier import SceneClassifier, finetune_classifier, make_backend
from .config import as_bool, loss_weights, restorer_config
from .data import DatasetManifest, derive_seed, sample_negative_indices
from .errors import CheckpointError, DataError, ProtocolError, TrainingDivergedError
from .losses import VGGFeatures, total_loss
from .metrics import evaluate_report
from .restorer import Restorer, RestorerConfig
from .types import NUM_TYPES

log = logging.getLogger(__name__)


@dataclasses.dataclass
class TrainConfig:
    epochs: int = 30
    max_steps: int | None = None
    batch_size: int = 8
    lr: float = 1e-3
    lr_min: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    crop: int = 64
    checkpoint_every: int = 0
    deterministic: bool = True
    seed: int = 0
    negatives: int = 2

    def __post_init__(self):
        if self.crop % 8:
            raise ValueError(f"crop size must be a multiple of 8, got {self.crop}")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")

    @classmethod
    def from_config(cls, cfg: dict) -> "TrainConfig":
        t = cfg["train"]
        return cls(
            epochs=int(t["epochs"]), max_steps=None if t["max_steps"] is None else int(t["max_steps"]),
            batch_size=int(t["batch_size"]), lr=float(t["lr"]), lr_min=float(t["lr_min"]),
            beta1=float(t["beta1"]), beta2=float(t["beta2"]), crop=int(t["crop"]),
            checkpoint_every=int(t["checkpoint_every"]), deterministic=as_bool(t["deterministic"]),
            seed=int(cfg["seed"]), negatives=int(cfg["loss"]["negatives"]),
        )


def cosine_lr(step: int, total: int, lr: float, lr_min: float) -> float:
    if total <= 1:
        return lr
    return lr_min + 0.5 * (lr - lr_min) * (1.0 + math.cos(math.pi * step / total))


def param_hash(model: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


@contextlib.contextmanager
def deterministic_mode(enabled: bool = True):
    prev = torch.are_deterministic_algorithms_enabled()
    torch.use_deterministic_algorithms(enabled)
    try:
        yield
    finally:
        torch.use_deterministic_algorithms(prev)


def build_restorer(rcfg: RestorerConfig, seed: int) -> Restorer:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return Restorer(rcfg)


def build_classifier(cfg: dict) -> SceneClassifier:
    c = cfg["classifier"]
    return SceneClassifier(make_backend(c["backend"], seed=int(cfg["seed"])), float(c["temperature"]))


# --------------------------------------------------------------------------
# phase 1


def train_sc(cfg: dict, manifest: DatasetManifest, test_manifest: DatasetManifest | None = None,
             classifier: SceneClassifier | None = None):
    """Fine-tune the classifier's adapter and freeze it. Returns ``(classifier, report)``."""
    classifier = classifier or build_classifier(cfg)
    c = cfg["classifier"]
    report = finetune_classifier(classifier, manifest, epochs=int(c["adapter_epochs"]), lr=float(c["adapter_lr"]),
                                 test_manifest=test_manifest, seed=int(cfg["seed"]),
                                 weight_decay=float(c["adapter_weight_decay"]))
    report["checksum"] = classifier.checksum()
    return classifier, report


# --------------------------------------------------------------------------
# phase 2


class PairCache:
    """All pairs of a manifest in memory as float32 arrays of identical size."""

    def __init__(self, manifest: DatasetManifest):
        self.manifest = manifest
        clean, degraded = [], []
        for c, d, _ in manifest.iter_pairs():
            clean.append(c.astype(np.float32))
            degraded.append(d.astype(np.float32))
        if not clean:
            raise DataError("training manifest is empty")
        if len({a.shape for a in clean}) != 1:
            raise DataError("training images must share one size; crop or resize them first")
        self.clean = np.stack(clean)
        self.degraded = np.stack(degraded)
        self.types = manifest.types()
        self.type_index = np.array([t.index for t in self.types])

    def __len__(self):
        return len(self.types)


def balanced_order(type_index: np.ndarray, seed: int, epoch: int) -> np.ndarray:
    """Shuffle within each type, then interleave types so every window of 11 covers all of them."""
    rng = np.random.default_rng(derive_seed(seed, 101, epoch))
    buckets = [rng.permutation(np.flatnonzero(type_index == t)) for t in range(NUM_TYPES)]
    order = []
    depth = max(len(b) for b in buckets)
    for d in range(depth):
        for t in rng.permutation(NUM_TYPES):
            if d < len(buckets[t]):
                order.append(int(buckets[t][d]))
    return np.array(order, dtype=np.int64)


@dataclasses.dataclass
class TrainState:
    model: Restorer
    optimizer: torch.optim.Optimizer
    step: int = 0


@dataclasses.dataclass
class TrainResult:
    model: Restorer
    history: list[dict]
    step: int
    checkpoint: Path | None
    classifier_checksum: str


def _make_optimizer(model, tc: TrainConfig):
    return torch.optim.Adam(model.parameters(), lr=tc.lr, betas=(tc.beta1, tc.beta2))


def _grad_norms(model) -> dict:
    return {n: float(p.grad.norm()) for n, p in model.named_parameters() if p.grad is not None}


def train_sr(cfg: dict, manifest: DatasetManifest, classifier: SceneClassifier, *,
             resume: str | Path | None = None, out_dir: str | Path | None = None,
             allow_stub_sc: bool = False, stop_at: int | None = None, model: Restorer | None = None,
             extractor=None) -> TrainResult:
    """Train the restorer with ground-truth text guidance and the composite loss.

    ``stop_at`` ends the run early at that global step (the schedule still
    uses the full length), which is how resume equivalence is exercised.
    Writes ``train_log.jsonl`` and ``checkpoint.vlur`` under ``out_dir`` when given.
    """
    if not classifier.frozen and not allow_stub_sc:
        raise ProtocolError("restorer training needs a frozen scene classifier (train phase 'sc' first, "
                            "or pass allow_stub_sc for CI)")
    sc_checksum = classifier.checksum()
    tc = TrainConfig.from_config(cfg)
    weights = loss_weights(cfg)
    data = PairCache(manifest)
    h, w = data.clean.shape[1:3]
    if h < tc.crop or w < tc.crop:
        raise DataError(f"images are {h}x{w}, smaller than the {tc.crop}px crop")
    if extractor is None and weights.gamma3 > 0:
        extractor = VGGFeatures(cfg["loss"]["vgg_taps"], cfg["loss"]["vgg_weights"], seed=tc.seed)

    steps_per_epoch = max(1, math.ceil(len(data) / tc.batch_size))
    total = tc.max_steps if tc.max_steps is not None else tc.epochs * steps_per_epoch
    end = total if stop_at is None else min(stop_at, total)

    if model is None:
        model = build_restorer(restorer_config(cfg), tc.seed)
    optimizer = _make_optimizer(model, tc)
    step = 0
    if resume is not None:
        step = restore_training_state(resume, model, optimizer, classifier)
    text_table = classifier.text_matrix().float()

    out_dir = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_fh = open(out_dir / "train_log.jsonl", "a" if resume is not None else "w")

    history = []
    order_cache: dict[int, np.ndarray] = {}
    model.train()
    t0 = time.perf_counter()
    try:
        with deterministic_mode(tc.deterministic):
            while step < end:
                epoch, pos = divmod(step, steps_per_epoch)
                if epoch not in order_cache:
                    order_cache = {epoch: balanced_order(data.type_index, tc.seed, epoch)}
                order = order_cache[epoch]
                idx = order[pos * tc.batch_size:(pos + 1) * tc.batch_size]
                rng = np.random.default_rng(derive_seed(tc.seed, 202, step))
                ys = rng.integers(0, h - tc.crop + 1, size=len(idx))
                xs = rng.integers(0, w - tc.crop + 1, size=len(idx))

                def crop(arr, i, k):
                    return arr[i, ys[k]:ys[k] + tc.crop, xs[k]:xs[k] + tc.crop]

                clean = np.stack([crop(data.clean, i, k) for k, i in enumerate(idx)])
                degraded = np.stack([crop(data.degraded, i, k) for k, i in enumerate(idx)])
                negs = []
                if weights.gamma3 > 0:
                    neg_seed = derive_seed(tc.seed, 303, epoch)
                    neg_idx = [sample_negative_indices(int(i), manifest, tc.negatives, neg_seed) for i in idx]
                    for j in range(tc.negatives):
                        negs.append(torch.from_numpy(np.stack(
                            [crop(data.degraded, n[j], k) for k, n in enumerate(neg_idx)]).transpose(0, 3, 1, 2)))
                x = torch.from_numpy(degraded.transpose(0, 3, 1, 2).copy())
                gt = torch.from_numpy(clean.transpose(0, 3, 1, 2).copy())
                y_t = text_table[torch.from_numpy(data.type_index[idx])]

                lr = cosine_lr(step, total, tc.lr, tc.lr_min)
                for group in optimizer.param_groups:
                    group["lr"] = lr
                optimizer.zero_grad(set_to_none=True)
                restored = model(x, y_t)
                loss, terms = total_loss(restored, gt, x, negs, weights, extractor)
                if not torch.isfinite(loss):
                    loss.backward()
                    raise TrainingDivergedError(
                        f"non-finite loss at step {step} (terms {terms.get('nonfinite')}); "
                        f"grad norms: {json.dumps(_grad_norms(model))}")
                loss.backward()
                optimizer.step()
                step += 1
                rec = {"step": step, "total": float(loss.detach()), "lr": lr}
                for k in ("l1", "msssim", "cdrl"):
                    rec[k] = None if terms[k] is None else float(terms[k].detach())
                history.append(rec)
                if log_fh is not None:
                    log_fh.write(json.dumps(rec, sort_keys=True) + "\n")
                if out_dir is not None and tc.checkpoint_every and step % tc.checkpoint_every == 0:
                    save_training_state(out_dir / "checkpoint.vlur", model, optimizer, classifier, cfg, step,
                                        steps_per_epoch)
    finally:
        if log_fh is not None:
            log_fh.close()
    log.info("trained %d steps in %.1fs", len(history), time.perf_counter() - t0)
    if classifier.checksum() != sc_checksum:
        raise ProtocolError("scene classifier parameters changed during restorer training")
    ckpt = None
    if out_dir is not None:
        ckpt = save_training_state(out_dir / "checkpoint.vlur", model, optimizer, classifier, cfg, step,
                                   steps_per_epoch)
    model.eval()
    return TrainResult(model, history, step, ckpt, sc_checksum)


# --------------------------------------------------------------------------
# checkpoint glue


def model_tensors(model: Restorer | None, classifier: SceneClassifier | None, optimizer=None) -> dict:
    tensors = {}
    if model is not None:
        for k, v in model.state_dict().items():
            tensors[f"restorer.{k}"] = v.detach().cpu().numpy()
    if classifier is not None:
        for k, v in classifier.adapter_state().items():
            tensors[f"scene_classifier.adapter.{k}"] = v
    if optimizer is not None and model is not None:
        names = {id(p): n for n, p in model.named_parameters()}
        for p, st in optimizer.state.items():
            for key in ("exp_avg", "exp_avg_sq"):
                tensors[f"optimizer.{names[id(p)]}.{key}"] = st[key].detach().cpu().numpy()
    return tensors


def checkpoint_meta(cfg: dict, classifier: SceneClassifier | None, model: Restorer | None = None,
                    optimizer=None, step: int = 0, steps_per_epoch: int = 1) -> dict:
    meta = {
        "code_version": __version__,
        "config": cfg,
        "step": step,
        "epoch": step // max(1, steps_per_epoch),
        "rng": {"seed": int(cfg.get("seed", 0)), "step": step},
    }
    if model is not None:
        meta["restorer_config"] = model.cfg.to_dict()
    if classifier is not None:
        meta["scene_classifier"] = {
            "backend": classifier.identifier,
            "temperature": classifier.temperature,
            "frozen": classifier.frozen,
            "checksum": classifier.checksum(),
        }
    if optimizer is not None:
        steps = {st["step"].item() if torch.is_tensor(st["step"]) else st["step"]
                 for st in optimizer.state.values()}
        meta["optimizer"] = {"kind": "adam", "state_step": int(max(steps)) if steps else 0,
                             "betas": list(optimizer.param_groups[0]["betas"])}
    return meta


def save_training_state(path, model, optimizer, classifier, cfg, step, steps_per_epoch=1) -> Path:
    return save_checkpoint(path, model_tensors(model, classifier, optimizer),
                           checkpoint_meta(cfg, classifier, model, optimizer, step, steps_per_epoch))


def restore_training_state(path, model: Restorer, optimizer, classifier: SceneClassifier | None = None) -> int:
    tensors, meta = load_checkpoint(path)
    load_restorer_weights(model, tensors)
    if classifier is not None and "scene_classifier" in meta:
        if meta["scene_classifier"]["checksum"] != classifier.checksum():
            raise ProtocolError("resume checkpoint was trained against a different scene classifier")
    if optimizer is not None and "optimizer" in meta:
        opt_step = meta["optimizer"]["state_step"]
        for name, p in model.named_parameters():
            a = tensors.get(f"optimizer.{name}.exp_avg")
            if a is None:
                continue
            optimizer.state[p] = {
                "step": torch.tensor(float(opt_step)),
                "exp_avg": torch.from_numpy(a.copy()),
                "exp_avg_sq": torch.from_numpy(tensors[f"optimizer.{name}.exp_avg_sq"].copy()),
            }
    return int(meta["step"])


def load_restorer_weights(model: Restorer, tensors: dict) -> None:
    state = {k[len("restorer."):]: torch.from_numpy(v.copy()) for k, v in tensors.items()
             if k.startswith("restorer.")}
    if not state:
        raise CheckpointError("checkpoint has no restorer section")
    missing, unexpected = model.load_state_dict(state, strict=False)
    if missing or unexpected:
        raise CheckpointError(f"restorer section mismatch: missing {missing}, unexpected {unexpected}")


def save_classifier(path, classifier: SceneClassifier, cfg: dict, report: dict | None = None) -> Path:
    meta = checkpoint_meta(cfg, classifier)
    if report is not None:
        meta["classifier_report"] = report
    return save_checkpoint(path, model_tensors(None, classifier), meta)


def load_pipeline(path, cfg: dict | None = None, need_restorer: bool = True):
    """Rebuild ``(model, classifier, manifest_meta)`` from a harness checkpoint."""
    tensors, meta = load_checkpoint(path)
    run_cfg = cfg or meta.get("config")
    if run_cfg is None:
        raise CheckpointError("checkpoint carries no config; pass one explicitly")
    classifier = build_classifier(run_cfg)
    adapter = {k.rsplit(".", 1)[1]: v for k, v in tensors.items() if k.startswith("scene_classifier.adapter.")}
    if adapter:
        classifier.load_adapter_state(adapter)
    if meta.get("scene_classifier", {}).get("frozen"):
        classifier.freeze()
    model = None
    if need_restorer or any(k.startswith("restorer.") for k in tensors):
        if "restorer_config" in meta:
            rcfg = RestorerConfig(**{k: tuple(v) if isinstance(v, list) else v
                                     for k, v in meta["restorer_config"].items()})
        else:
            rcfg = restorer_config(run_cfg)
        model = Restorer(rcfg)
        load_restorer_weights(model, tensors)
        model.eval()
    return model, classifier, meta


# --------------------------------------------------------------------------
# ablations

LOSS_SUBSETS = {
    "l1": (True, False, False),
    "l1+msssim": (True, True, False),
    "all": (True, True, True),
}


def default_variants(grid=("loss", "text")) -> list[dict]:
    texts = ("on", "off") if "text" in grid else ("on",)
    losses = tuple(LOSS_SUBSETS) if "loss" in grid else ("all",)
    return [{"name": f"text={t},loss={lo}", "text_guidance": t, "loss": lo} for t in texts for lo in losses]


def variant_config(cfg: dict, variant: dict) -> dict:
    import copy

    out = copy.deepcopy(cfg)
    out["restorer"]["text_guidance"] = variant.get("text_guidance", "on")
    use = LOSS_SUBSETS[variant.get("loss", "all")]
    for flag, key in zip(use, ("gamma1", "gamma2", "gamma3")):
        if not flag:
            out["loss"][key] = 0.0
    return out


def run_ablation(cfg: dict, manifest: DatasetManifest, test_manifest: DatasetManifest,
                 classifier: SceneClassifier, variants: list[dict] | None = None,
                 allow_stub_sc: bool = False) -> dict:
    """Train every variant from the same seed and data; report oracle-guided test metrics."""
    variants = variants or default_variants()
    rows = []
    for v in variants:
        vcfg = variant_config(cfg, v)
        result = train_sr(vcfg, manifest, classifier, allow_stub_sc=allow_stub_sc)
        report = evaluate_report(result.model, classifier, test_manifest, guidance="oracle")
        avg = report.average()
        rows.append({**v, "psnr": avg["psnr"], "ssim": avg["ssim"], "steps": result.step,
                     "final_loss": result.history[-1]["total"] if result.history else None})
        log.info("ablation %s: %.3f dB / %.4f", v["name"], avg["psnr"], avg["ssim"])
    return {"variants": rows, "config": cfg}
