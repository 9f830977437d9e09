"""Paired-image datasets: PNG I/O, manifests, synthetic generation and ingestion."""
from __future__ import annotations

import dataclasses
import json
import logging
import os
from pathlib import Path
from typing import Iterator

import numpy as np
from PIL import Image

from .degradation import compose_degradations, sample_params
from .errors import DataError
from .types import ALL_TYPES, DegradationType

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")
MANIFEST_VERSION = 1


def read_image(path) -> np.ndarray:
    """Decode an RGB image to float64 H x W x 3 in [0, 1]."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot decode image {path}: {exc}") from exc
    return arr / 255.0


def quantize(img) -> np.ndarray:
    return np.round(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def write_image(path, img) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(quantize(img), mode="RGB").save(path, format="PNG")


def list_images(directory) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"not a directory: {directory}")
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def derive_seed(*parts: int) -> int:
    """63-bit seed from a tuple of integers; distinct tuples give unrelated seeds."""
    state = np.random.SeedSequence([int(p) for p in parts]).generate_state(2, dtype=np.uint32)
    return (int(state[0]) << 31) ^ int(state[1])


@dataclasses.dataclass(frozen=True)
class ManifestEntry:
    clean: str
    degraded: str
    type: DegradationType
    params: dict | None = None

    def to_dict(self) -> dict:
        d = {"clean": self.clean, "degraded": self.degraded, "type": self.type.value}
        if self.params is not None:
            d["params"] = self.params
        return d


@dataclasses.dataclass
class DatasetManifest:
    root: str
    split: str
    entries: list[ManifestEntry]
    meta: dict = dataclasses.field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.entries)

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else Path(self.root) / p

    def types(self) -> list[DegradationType]:
        return [e.type for e in self.entries]

    def load_pair(self, i: int) -> tuple[np.ndarray, np.ndarray, DegradationType]:
        e = self.entries[i]
        clean = read_image(self.resolve(e.clean))
        degraded = read_image(self.resolve(e.degraded))
        if clean.shape != degraded.shape:
            raise DataError(
                f"shape mismatch in pair {e.degraded}: clean {clean.shape} vs degraded {degraded.shape}")
        return clean, degraded, e.type

    def iter_pairs(self) -> Iterator[tuple[np.ndarray, np.ndarray, DegradationType]]:
        for i in range(len(self.entries)):
            yield self.load_pair(i)

    def to_dict(self) -> dict:
        return {
            "version": MANIFEST_VERSION,
            "root": self.root,
            "split": self.split,
            "entries": [e.to_dict() for e in self.entries],
            "meta": self.meta,
        }

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))
        os.replace(tmp, path)
        return path

    @classmethod
    def from_dict(cls, d: dict, base: Path | None = None) -> "DatasetManifest":
        for key in ("root", "split", "entries"):
            if key not in d:
                raise DataError(f"manifest is missing key {key!r}")
        root = Path(d["root"])
        if not root.is_absolute() and base is not None:
            root = base / root
        entries = []
        for raw in d["entries"]:
            try:
                t = DegradationType.parse(raw["type"])
            except ValueError as exc:
                raise DataError(str(exc)) from None
            entries.append(ManifestEntry(raw["clean"], raw["degraded"], t, raw.get("params")))
        return cls(str(root), d["split"], entries, d.get("meta", {}))

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read manifest {path}: {exc}") from exc
        return cls.from_dict(raw, base=path.parent)

    def validate(self) -> None:
        for e in self.entries:
            for rel in (e.clean, e.degraded):
                if not self.resolve(rel).is_file():
                    raise DataError(f"manifest references missing file {rel}")


# --------------------------------------------------------------------------
# procedural clean scenes


def procedural_scene(rng: np.random.Generator, size: int = 64) -> np.ndarray:
    """A cheap outdoor-looking scene: sky gradient, ground, shapes and texture."""
    h = w = size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    yy /= h
    xx /= w
    top, horizon = rng.uniform(0.3, 0.9, 3), rng.uniform(0.4, 1.0, 3)
    img = top + (horizon - top) * yy[..., None]
    ground_y = rng.uniform(0.45, 0.75)
    ground = rng.uniform(0.25, 0.7, 3)
    mask = yy > ground_y + 0.05 * np.sin(2 * np.pi * (xx * rng.uniform(1, 3) + rng.uniform()))
    img[mask] = ground * (0.8 + 0.4 * yy[mask, None])
    for _ in range(rng.integers(3, 8)):
        color = rng.uniform(0.15, 1.0, 3)
        cx, cy = rng.uniform(0, 1, 2)
        rx, ry = rng.uniform(0.05, 0.25, 2)
        if rng.uniform() < 0.5:
            m = (np.abs(xx - cx) < rx) & (np.abs(yy - cy) < ry)
        else:
            m = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 < 1.0
        img[m] = color
    freq = rng.uniform(4, 16)
    phase = rng.uniform(0, 2 * np.pi)
    tex = 0.03 * np.sin(2 * np.pi * freq * (xx * rng.uniform(-1, 1) + yy) + phase)
    img = img + tex[..., None] + rng.normal(0, 0.01, img.shape)
    return np.clip(img, 0.0, 1.0)


def generate_clean_images(out_dir, n: int, size: int = 64, seed: int = 0) -> list[Path]:
    out_dir = Path(out_dir)
    paths = []
    for i in range(n):
        rng = np.random.default_rng(derive_seed(seed, i))
        p = out_dir / f"scene_{i:04d}.png"
        write_image(p, procedural_scene(rng, size))
        paths.append(p)
    return paths


# --------------------------------------------------------------------------
# synthetic pairs


def build_synthetic_dataset(clean_dir, out_dir, per_type_count: int, seed: int,
                            split: str = "train", clean_files: list | None = None) -> DatasetManifest:
    """Degrade clean images into all 11 types, ``per_type_count`` each.

    Writes ``clear/``, one folder per type label, and ``manifest_<split>.json``
    under ``out_dir``. Every entry gets its own seed.
    """
    files = list(clean_files) if clean_files is not None else list_images(clean_dir)
    cleans = []
    for f in files:
        try:
            cleans.append((Path(f), read_image(f)))
        except DataError:
            log.warning("skipping undecodable image %s", f)
    if not cleans:
        raise DataError(f"no decodable images in {clean_dir}")
    out_dir = Path(out_dir)
    entries = []
    written_clean: dict[str, str] = {}
    for ti, dtype in enumerate(ALL_TYPES):
        for i in range(per_type_count):
            src, clean = cleans[(i + ti) % len(cleans)]
            clean_rel = written_clean.get(str(src))
            if clean_rel is None:
                clean_rel = f"clear/{src.stem}.png"
                write_image(out_dir / clean_rel, clean)
                written_clean[str(src)] = clean_rel
            # degrade the quantized clean so the stored pair is self-consistent
            clean_q = quantize(clean) / 255.0
            entry_seed = derive_seed(seed, ti, i)
            params = sample_params(np.random.default_rng(entry_seed), entry_seed)
            degraded = compose_degradations(clean_q, dtype, params)
            deg_rel = f"{dtype.value}/{split}_{src.stem}_{i:05d}.png"
            write_image(out_dir / deg_rel, degraded)
            entries.append(ManifestEntry(clean_rel, deg_rel, dtype, params.to_dict()))
    manifest = DatasetManifest(".", split, entries, {"seed": int(seed), "per_type_count": per_type_count,
                                                     "generator": "synthetic"})
    manifest.save(out_dir / f"manifest_{split}.json")
    manifest.root = str(out_dir)
    return manifest


# --------------------------------------------------------------------------
# ingestion


def _type_from_folder(name: str) -> DegradationType | None:
    key = name.lower().replace("_", "+").replace("-", "+").replace(" ", "")
    key = key.replace("lowlight", "low")
    try:
        return DegradationType.parse(key)
    except ValueError:
        return None


def scan_cdd_layout(root, split: str = "test") -> DatasetManifest:
    """Pair ``<root>/<type>/<name>`` with ``<root>/clear/<name>`` by file stem.

    Type folders may use ``+``, ``_`` or ``-`` between primitives. Unknown
    folders are ignored.
    """
    root = Path(root)
    clear_dir = root / "clear"
    if not clear_dir.is_dir():
        raise DataError(f"{root} has no 'clear' folder of ground truths")
    clear = {p.stem: p for p in list_images(clear_dir)}
    entries = []
    for sub in sorted(p for p in root.iterdir() if p.is_dir() and p.name != "clear"):
        dtype = _type_from_folder(sub.name)
        if dtype is None:
            continue
        for p in list_images(sub):
            gt = clear.get(p.stem)
            if gt is None:
                raise DataError(f"no ground truth in clear/ for {p}")
            entries.append(ManifestEntry(str(gt.relative_to(root)), str(p.relative_to(root)), dtype))
    if not entries:
        raise DataError(f"no degraded images found under {root}")
    return DatasetManifest(str(root), split, entries, {"generator": "cdd-layout"})


def load_dataset(path) -> tuple[DatasetManifest, Iterator]:
    """Open a manifest JSON or a CDD-style directory; return it and a pair iterator."""
    path = Path(path)
    if path.is_dir():
        manifest_files = sorted(path.glob("manifest_*.json"))
        manifest = DatasetManifest.load(manifest_files[0]) if manifest_files else scan_cdd_layout(path)
    elif path.is_file():
        manifest = DatasetManifest.load(path)
    else:
        raise DataError(f"no manifest or dataset directory at {path}")
    manifest.validate()
    return manifest, manifest.iter_pairs()


def sample_negative_indices(entry_index: int, manifest: DatasetManifest, n: int, seed: int) -> list[int]:
    if n == 0:
        return []
    own = manifest.entries[entry_index].type
    pool = [i for i, e in enumerate(manifest.entries) if e.type != own]
    if len(pool) < n:
        raise DataError(f"need {n} negatives of a type other than {own.value}, manifest has {len(pool)}")
    rng = np.random.default_rng(derive_seed(seed, entry_index))
    return [pool[j] for j in rng.choice(len(pool), size=n, replace=False)]


def sample_negatives(entry_index: int, manifest: DatasetManifest, n: int, seed: int) -> list[np.ndarray]:
    """Degraded images of other types for the contrastive loss."""
    idx = sample_negative_indices(entry_index, manifest, n, seed)
    return [read_image(manifest.resolve(manifest.entries[i].degraded)) for i in idx]
