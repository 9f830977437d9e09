"""Command-line entry point: ``vlur <command> [options]``.

Every command is a thin shell over library calls. Failures print one line,
``ErrorClass: message``, to stderr and exit nonzero.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .checkpoint import file_hash
from .config import load_config, parse_value
from .data import build_synthetic_dataset, generate_clean_images, load_dataset, read_image, write_image
from .errors import ConfigError, ProtocolError, VLURError
from .types import ALL_TYPES, DegradationType

log = logging.getLogger("vlur")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file merged over the defaults")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted config override, e.g. train.max_steps=100 (repeatable)")
    p.add_argument("--seed", type=int, help="global seed (overrides config 'seed')")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vlur", description="Text-guided restoration of weather-degraded images.")
    parser.add_argument("--version", action="version", version=f"vlur {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synthesize", help="build a paired synthetic dataset")
    _common(p)
    p.add_argument("--clean-dir", help="folder of clean images (omit to generate procedural scenes)")
    p.add_argument("--generate", type=int, default=24, help="procedural scenes when --clean-dir is absent")
    p.add_argument("--size", type=int, default=64, help="procedural scene size in pixels")
    p.add_argument("--out", required=True)
    p.add_argument("--per-type", type=int, required=True)
    p.add_argument("--split", default="train")

    p = sub.add_parser("classify", help="predict the degradation type")
    _common(p)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--image", nargs="+")
    g.add_argument("--manifest")
    p.add_argument("--backend", choices=("stub", "pretrained"))
    p.add_argument("--checkpoint", help="classifier or full checkpoint holding a fine-tuned adapter")
    p.add_argument("--json", action="store_true")

    p = sub.add_parser("restore", help="restore images")
    _common(p)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--image", nargs="+")
    g.add_argument("--manifest")
    p.add_argument("--checkpoint", required=True)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--type", help="manual guidance text, e.g. 'haze+rain'")
    g.add_argument("--auto", action="store_true", help="guide with the classifier's prediction")
    p.add_argument("--out", required=True)
    p.add_argument("--grid", action="store_true", help="also write input|output side-by-side images")

    p = sub.add_parser("train", help="two-phase training")
    _common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--test-manifest")
    p.add_argument("--phase", choices=("sc", "sr", "all"), default="all")
    p.add_argument("--out", required=True)
    p.add_argument("--sc-checkpoint", help="frozen classifier for --phase sr (default: <out>/classifier.vlur)")
    p.add_argument("--resume", help="checkpoint to resume restorer training from")
    p.add_argument("--allow-stub-sc", action="store_true",
                   help="let restorer training run without a frozen classifier (CI only)")

    p = sub.add_parser("evaluate", help="PSNR/SSIM report per degradation type")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--guidance", choices=("oracle", "predicted"), default="predicted")
    fmt = p.add_mutually_exclusive_group()
    fmt.add_argument("--json", action="store_true")
    fmt.add_argument("--table", action="store_true")
    p.add_argument("--quantize", action="store_true", help="round to 8 bits before scoring")
    p.add_argument("--per-type-mean", action="store_true", help="average over types, not images")
    p.add_argument("--out", help="directory for report.json and provenance.json")

    p = sub.add_parser("ablate", help="train and compare a variant grid")
    _common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--test-manifest", required=True)
    p.add_argument("--grid", default="loss,text")
    p.add_argument("--sc-checkpoint")
    p.add_argument("--allow-stub-sc", action="store_true")
    p.add_argument("--out", required=True)

    p = sub.add_parser("benchmark", help="forward-pass latency")
    _common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--resolution", default="1920x1080", help="WIDTHxHEIGHT")
    p.add_argument("--runs", type=int, default=5)
    p.add_argument("--warmup", type=int, default=1)
    return parser


# --------------------------------------------------------------------------
# helpers


def _config(args) -> dict:
    overrides = {}
    for item in args.overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = parse_value(v)
    cfg = load_config(args.config, overrides)
    if args.seed is not None:
        cfg["seed"] = int(args.seed)
    return cfg


def write_provenance(out_dir, args, cfg: dict, checkpoint=None, extra: dict | None = None) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    prov = {
        "command": args.command,
        "argv": sys.argv[1:],
        "config": cfg,
        "seed": cfg.get("seed"),
        "checkpoint": str(checkpoint) if checkpoint else None,
        "checkpoint_hash": file_hash(checkpoint) if checkpoint else None,
        "code_version": __version__,
        **(extra or {}),
    }
    path = out_dir / "provenance.json"
    path.write_text(json.dumps(prov, indent=2, sort_keys=True, default=str) + "\n")
    return path


def _load_classifier(cfg, checkpoint=None, backend=None):
    from .harness import build_classifier, load_pipeline

    if checkpoint:
        _, classifier, _ = load_pipeline(checkpoint, need_restorer=False)
        return classifier
    if backend:
        cfg = {**cfg, "classifier": {**cfg["classifier"], "backend": backend}}
    return build_classifier(cfg)


def _inputs(args):
    """Yield (name, image, true_type | None)."""
    if args.image:
        for p in args.image:
            yield Path(p).stem, read_image(p), None
    else:
        manifest, _ = load_dataset(args.manifest)
        for e, (_, degraded, dtype) in zip(manifest.entries, manifest.iter_pairs()):
            yield Path(e.degraded).stem, degraded, dtype


# --------------------------------------------------------------------------
# commands


def cmd_synthesize(args, cfg):
    out = Path(args.out)
    clean_files = None
    if args.clean_dir is None:
        clean_files = generate_clean_images(out / "source", args.generate, args.size, seed=cfg["seed"])
    manifest = build_synthetic_dataset(args.clean_dir, out, args.per_type, seed=cfg["seed"], split=args.split,
                                       clean_files=clean_files)
    write_provenance(out, args, cfg, extra={"images": len(manifest)})
    print(out / f"manifest_{args.split}.json")


def cmd_classify(args, cfg):
    classifier = _load_classifier(cfg, args.checkpoint, args.backend)
    results = []
    for name, img, truth in _inputs(args):
        dtype, probs = classifier.classify(img)
        rec = {"image": name, "type": dtype.value,
               "probabilities": {t.value: float(p) for t, p in zip(ALL_TYPES, probs)}}
        if truth is not None:
            rec["true_type"] = truth.value
        results.append(rec)
    if args.json:
        print(json.dumps(results if len(results) > 1 else results[0], indent=2))
        return
    for rec in results:
        top = sorted(rec["probabilities"].items(), key=lambda kv: -kv[1])[:3]
        alts = "  ".join(f"{k}={v:.3f}" for k, v in top)
        print(f"{rec['image']}: {rec['type']}  ({alts})")
    if results and "true_type" in results[0]:
        acc = np.mean([r["type"] == r["true_type"] for r in results])
        print(f"accuracy {acc:.4f} over {len(results)} images")


def cmd_restore(args, cfg):
    from .harness import load_pipeline
    from .restorer import restore

    model, classifier, _ = load_pipeline(args.checkpoint)
    override = None if args.auto else DegradationType.parse(args.type)
    out = Path(args.out)
    guided = {}
    for name, img, _ in _inputs(args):
        dtype = override or classifier.classify(img)[0]
        restored = restore(model, img, classifier.text_feature_for_type(dtype), pad=True)
        write_image(out / f"{name}.png", restored)
        if args.grid:
            write_image(out / f"{name}_grid.png", np.concatenate([img, restored], axis=1))
        guided[name] = dtype.value
        print(f"{name}: guided by '{dtype.value}' -> {out / (name + '.png')}")
    write_provenance(out, args, cfg, args.checkpoint, {"guidance": guided})


def cmd_train(args, cfg):
    from .harness import load_pipeline, save_classifier, train_sc, train_sr

    torch.manual_seed(cfg["seed"])
    out = Path(args.out)
    manifest, _ = load_dataset(args.manifest)
    test_manifest = load_dataset(args.test_manifest)[0] if args.test_manifest else None
    classifier = None
    if args.phase in ("sc", "all"):
        classifier, report = train_sc(cfg, manifest, test_manifest)
        path = save_classifier(out / "classifier.vlur", classifier, cfg, report)
        (out / "sc_report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
        print(f"classifier: train acc {report['train_accuracy']:.4f}"
              + (f", test acc {report['test_accuracy']:.4f}" if report.get("test_accuracy") is not None else "")
              + f" -> {path}")
    if args.phase in ("sr", "all"):
        if classifier is None:
            sc_path = Path(args.sc_checkpoint) if args.sc_checkpoint else out / "classifier.vlur"
            if sc_path.exists():
                _, classifier, _ = load_pipeline(sc_path, need_restorer=False)
            elif args.allow_stub_sc:
                classifier = _load_classifier(cfg)
            else:
                raise ProtocolError(f"no frozen classifier checkpoint at {sc_path}; run --phase sc first "
                                    "or pass --allow-stub-sc")
        result = train_sr(cfg, manifest, classifier, resume=args.resume, out_dir=out,
                          allow_stub_sc=args.allow_stub_sc)
        last = result.history[-1]["total"] if result.history else float("nan")
        print(f"restorer: {result.step} steps, final loss {last:.5f} -> {result.checkpoint}")
    write_provenance(out, args, cfg, out / "checkpoint.vlur" if (out / "checkpoint.vlur").exists() else None)


def cmd_evaluate(args, cfg):
    from .harness import load_pipeline
    from .metrics import evaluate_report

    model, classifier, _ = load_pipeline(args.checkpoint)
    manifest, _ = load_dataset(args.manifest)
    report = evaluate_report(model, classifier, manifest, guidance=args.guidance, quantize=args.quantize,
                             per_type_mean=args.per_type_mean)
    text = report.to_table() if args.table or not args.json else report.to_json()
    sys.stdout.write(text)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "report.json").write_text(report.to_json())
        write_provenance(args.out, args, cfg, args.checkpoint)


def cmd_ablate(args, cfg):
    from .harness import default_variants, load_pipeline, run_ablation

    torch.manual_seed(cfg["seed"])
    manifest, _ = load_dataset(args.manifest)
    test_manifest, _ = load_dataset(args.test_manifest)
    if args.sc_checkpoint:
        _, classifier, _ = load_pipeline(args.sc_checkpoint, need_restorer=False)
    elif args.allow_stub_sc:
        classifier = _load_classifier(cfg)
    else:
        raise ProtocolError("ablation trains restorers; pass --sc-checkpoint or --allow-stub-sc")
    grid = tuple(s.strip() for s in args.grid.split(",") if s.strip())
    unknown = set(grid) - {"loss", "text"}
    if unknown:
        raise ConfigError(f"unknown ablation axes {sorted(unknown)}; use loss and/or text")
    report = run_ablation(cfg, manifest, test_manifest, classifier, default_variants(grid),
                          allow_stub_sc=args.allow_stub_sc)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    write_provenance(out, args, cfg, args.sc_checkpoint)
    print(f"{'variant':<28} {'PSNR':>8} {'SSIM':>7}")
    for row in report["variants"]:
        print(f"{row['name']:<28} {row['psnr']:8.2f} {row['ssim']:7.4f}")


def cmd_benchmark(args, cfg):
    from .config import restorer_config
    from .harness import build_restorer, load_pipeline

    try:
        w, h = (int(v) for v in args.resolution.lower().split("x"))
    except ValueError:
        raise ConfigError(f"--resolution expects WIDTHxHEIGHT, got {args.resolution!r}") from None
    if args.checkpoint:
        model, _, _ = load_pipeline(args.checkpoint)
    else:
        model = build_restorer(restorer_config(cfg), cfg["seed"])
    model.eval()
    gen = torch.Generator().manual_seed(cfg["seed"])
    x = torch.rand(1, 3, h, w, generator=gen)
    y = torch.randn(1, model.cfg.text_dim, generator=gen)
    times = []
    with torch.no_grad():
        for i in range(args.warmup + args.runs):
            t0 = time.perf_counter()
            model(x, y)
            if i >= args.warmup:
                times.append((time.perf_counter() - t0) * 1e3)
    ms = np.array(times)
    stats = {"resolution": f"{w}x{h}", "runs": len(ms), "mean_ms": float(ms.mean()),
             "median_ms": float(np.median(ms)), "min_ms": float(ms.min()), "std_ms": float(ms.std()),
             "threads": torch.get_num_threads(), "device": "cpu"}
    print(json.dumps(stats, indent=2))


COMMANDS = {
    "synthesize": cmd_synthesize,
    "classify": cmd_classify,
    "restore": cmd_restore,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "benchmark": cmd_benchmark,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        COMMANDS[args.command](args, cfg)
    except (VLURError, ValueError, OSError) as exc:
        msg = " ".join(str(exc).split())
        print(f"{type(exc).__name__}: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
