"""``mammovl`` command suite.

Exit codes: 0 success, 2 usage/config/validation error (including refusing
to overwrite existing outputs), 1 any other runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import shutil
import sys
from pathlib import Path

import numpy as np
import torch

from . import evaluation as ev
from .config import GlobalConfig, parse_override, write_config
from .data_model import dump_manifest, load_manifest
from .exceptions import ConfigError, ParseError, SingleClass, ValidationError
from .factor import load_mappers, localize, save_heatmap_npy, save_heatmap_png, save_mappers, train_factor, upsample
from .preprocessing import preprocess_image
from .pretraining import build_model, load_checkpoint, prepare_studies, save_checkpoint, train
from .reports import load_bank, synthesize_report, uncovered_pairs
from .synthetic import generate

log = logging.getLogger("mammovl")

USAGE_ERRORS = (ValidationError, ParseError, ConfigError, FileExistsError, FileNotFoundError)


# --- helpers -----------------------------------------------------------------


def _claim(paths, overwrite: bool) -> None:
    """Refuse to clobber declared outputs unless ``overwrite``; with it, remove them."""
    existing = [Path(p) for p in paths if Path(p).exists()]
    if existing and not overwrite:
        raise FileExistsError(f"{existing[0]} exists; pass --overwrite to replace it")
    for p in existing:
        shutil.rmtree(p) if p.is_dir() else p.unlink()


def _archive(path, default_name: str) -> Path:
    """A directory written by ``pretrain``/``train-factor`` stands for its final archive."""
    path = Path(path)
    return path / default_name if path.is_dir() else path


def _config(args, extra: dict | None = None) -> GlobalConfig:
    overrides = {}
    for item in args.set or []:
        key, value = parse_override(item)
        overrides[".".join(key)] = value
    for key, value in (extra or {}).items():
        if value is not None:
            overrides[key] = value
    cfg = GlobalConfig.resolve(args.config, overrides)
    cfg.log()
    return cfg


def _write_report(path, command: str, cfg: GlobalConfig, metrics: dict) -> None:
    report = {"command": command, "metrics": metrics, "config": json.loads(cfg.to_json())}
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    log.info("wrote %s", path)


def _texts(study):
    if not study.report:
        return None
    return study.report.get("IMPRESSION") or study.report.get("FINDINGS")


def _embed(model, studies, view: str, batch: int = 64):
    imgs = [s.images.get(view, next(iter(s.images.values()))) for s in studies]
    with torch.no_grad():
        return torch.cat([model.embed_images(imgs[i:i + batch]) for i in range(0, len(imgs), batch)])


# --- subcommands -------------------------------------------------------------


def cmd_generate_synthetic(args) -> int:
    extra = {}
    if args.spec:
        import yaml
        with open(args.spec) as fh:
            spec = yaml.safe_load(fh) or {}
        extra.update({f"synthetic.{k}": v for k, v in spec.items()})
    extra.update({"synthetic.seed": args.seed, "synthetic.n_studies": args.n_studies})
    cfg = _config(args, extra)
    out = Path(args.out)
    _claim([out / "images", out / "manifest.jsonl", out / "config.json"], args.overwrite)
    bank = load_bank(args.bank)
    manifest = generate(cfg.synthetic(), out, bank)
    write_config(cfg, out / "config.json")
    log.info("generated %d studies under %s", len(manifest), out)
    return 0


def cmd_synth_reports(args) -> int:
    _config(args)
    _claim([args.out], args.overwrite)
    manifest = load_manifest(args.manifest)
    bank = load_bank(args.bank)
    missing = uncovered_pairs(bank, manifest)
    if missing:
        raise ValidationError(f"prompt bank does not cover {sorted(missing)}")
    rng = np.random.default_rng(args.seed)
    entries, n = [], 0
    for e in manifest.entries:
        if e.attributes is not None and (args.replace or not e.report):
            report = {"IMPRESSION": synthesize_report(e.attributes, bank, rng),
                      "FINDINGS": synthesize_report(e.attributes, bank, rng)}
            e = dataclasses.replace(e, report=report)
            n += 1
        entries.append(e)
    out = dataclasses.replace(manifest, entries=tuple(entries))
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    dump_manifest(out, args.out)
    log.info("synthesized %d reports -> %s", n, args.out)
    return 0


def cmd_pretrain(args) -> int:
    cfg = _config(args, {"train.epochs": args.epochs, "train.seed": args.seed})
    out = Path(args.out)
    _claim([out], args.overwrite)
    out.mkdir(parents=True)
    write_config(cfg, out / "config.json")
    aug, tcfg = cfg.augmentation(), cfg.train()
    tcfg = dataclasses.replace(tcfg, checkpoint_dir=str(out))
    manifest = load_manifest(args.manifest)
    studies = prepare_studies(manifest, aug, "train", workers=args.workers)
    model = build_model(cfg.model(), seed=tcfg.seed, dtype=tcfg.dtype)
    result = train(studies, model, tcfg, aug, load_bank(args.bank))
    save_checkpoint(out / "final.json", model, result.optimizer, tcfg.epochs - 1, tcfg)
    log.info("final loss %.4f; checkpoint %s", result.epochs[-1]["loss"], out / "final.json")
    return 0


def cmd_train_factor(args) -> int:
    cfg = _config(args, {"factor.epochs": args.epochs, "factor.seed": args.seed})
    out = Path(args.out)
    _claim([out], args.overwrite)
    out.mkdir(parents=True)
    write_config(cfg, out / "config.json")
    model = load_checkpoint(_archive(args.checkpoint, "final.json"))
    studies = prepare_studies(load_manifest(args.manifest), cfg.augmentation(), "train", workers=args.workers)
    fm = train_factor(model, studies, load_bank(args.bank), cfg.factor())
    save_mappers(out / "mappers.json", fm)
    with open(out / "metrics.jsonl", "w") as fh:
        for rec in fm.history:
            fh.write(json.dumps(rec) + "\n")
    return 0


def cmd_eval_zs(args) -> int:
    cfg = _config(args, {"eval.split": args.split})
    ecfg = cfg.eval()
    _claim([args.out], args.overwrite)
    manifest = load_manifest(args.manifest)
    model = load_checkpoint(_archive(args.checkpoint, "final.json"))
    studies = prepare_studies(manifest, cfg.augmentation(), ecfg.split, workers=args.workers)
    if not studies:
        raise ValidationError(f"split {ecfg.split!r} is empty")
    z = _embed(model, studies, ecfg.view)
    findings = args.findings.split(",") if args.findings else list(manifest.vocabulary)
    metrics = {"n": len(studies), "zero_shot_auc": {}}
    for f in findings:
        labels = [s.attributes.value(f) for s in studies]
        try:
            metrics["zero_shot_auc"][f] = ev.auc(ev.zero_shot_scores(model, z, f), labels)
        except SingleClass:
            log.warning("%r has a single class in split %r; AUC skipped", f, ecfg.split)
    texts = [_texts(s) for s in studies]
    if all(texts):
        with torch.no_grad():
            zt = model.embed_texts(texts)
        keys = [s.attributes.values if s.attributes else None for s in studies]
        b = ecfg.retrieval_batch
        batches = [(i, min(i + b, len(studies))) for i in range(0, len(studies), b) if min(i + b, len(studies)) - i >= 2]
        metrics["retrieval_top1"] = float(np.mean([ev.retrieval_top1(z[i:j], zt[i:j], keys[i:j]) for i, j in batches]))
        metrics["retrieval_top1_exact"] = float(np.mean([ev.retrieval_top1(z[i:j], zt[i:j]) for i, j in batches]))
    _write_report(args.out, "eval-zs", cfg, metrics)
    return 0


def cmd_eval_lp(args) -> int:
    cfg = _config(args, {"eval.fraction": args.fraction, "eval.split": args.split})
    ecfg = cfg.eval()
    _claim([args.out], args.overwrite)
    manifest = load_manifest(args.manifest)
    model = load_checkpoint(_archive(args.checkpoint, "final.json"))
    aug = cfg.augmentation()
    train_s = prepare_studies(manifest, aug, "train", workers=args.workers)
    test_s = prepare_studies(manifest, aug, ecfg.split, workers=args.workers)
    ztr, zte = _embed(model, train_s, ecfg.view).numpy(), _embed(model, test_s, ecfg.view).numpy()
    metrics = {"fraction": ecfg.fraction, "probe": {}}
    for f in manifest.vocabulary:
        res = ev.linear_probe(ztr, [s.attributes.value(f) for s in train_s], zte,
                              [s.attributes.value(f) for s in test_s], ecfg.fraction, ecfg.seed)
        metrics["probe"][f] = {"metric": res.metric, "value": res.value, "n_train": res.n_train}
    _write_report(args.out, "eval-lp", cfg, metrics)
    return 0


def _iou_list(text):
    return [float(t) for t in text.split(",")] if text else None


def cmd_eval_factor_loc(args) -> int:
    cfg = _config(args, {"eval.quantile": args.quantile, "eval.iou_thresholds": _iou_list(args.iou),
                         "eval.split": args.split})
    ecfg = cfg.eval()
    _claim([args.out], args.overwrite)
    model = load_checkpoint(_archive(args.checkpoint, "final.json"))
    fm = load_mappers(_archive(args.mappers, "mappers.json"))
    studies = list(load_manifest(args.manifest).split(ecfg.split))
    res = localize(model, fm, studies, cfg.augmentation(), ecfg.quantile, ecfg.iou_thresholds,
                   ecfg.conf_threshold, ecfg.view, ecfg.seed)
    keyed = lambda d: {a: {str(t): v for t, v in per.items()} for a, per in d.items()}  # noqa: E731
    metrics = {"map": keyed(res.map), "detection_rate": keyed(res.detection_rate),
               "random_box_rate": keyed(res.random_rate), "n_gt": res.n_gt}
    _write_report(args.out, "eval-factor-loc", cfg, metrics)
    return 0


def cmd_export_heatmaps(args) -> int:
    cfg = _config(args, {"eval.split": args.split})
    ecfg = cfg.eval()
    out = Path(args.out)
    _claim([out], args.overwrite)
    out.mkdir(parents=True)
    model = load_checkpoint(_archive(args.checkpoint, "final.json"))
    fm = load_mappers(_archive(args.mappers, "mappers.json"))
    attrs = args.attribute.split(",") if args.attribute else fm.attributes
    aug = cfg.augmentation()
    manifest = load_manifest(args.manifest).split(ecfg.split)
    entries = manifest.entries[:args.limit] if args.limit else manifest.entries
    geometry = model.image_encoder.feature_geometry()
    for entry in entries:
        study = manifest.load_study(entry)
        view = ecfg.view if ecfg.view in study.images else next(iter(study.images))
        img, _ = preprocess_image(study.images[view], aug)
        with torch.no_grad():
            fmap = model.image_features([img])[0][0]
            for a in attrs:
                grid = fm.heatmap(fmap, a).numpy()
                save_heatmap_npy(grid, out / f"{entry.study_id}_{a}.npy")
                save_heatmap_png(upsample(grid, img.shape, geometry), out / f"{entry.study_id}_{a}.png")
    log.info("exported heatmaps for %d studies to %s", len(entries), out)
    return 0


# --- parser ------------------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML config file")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config value")
    p.add_argument("--overwrite", action="store_true", help="replace existing outputs")
    p.add_argument("--workers", type=int, default=1, help="data-loading threads")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mammovl", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("generate-synthetic", help="write a toy dataset with planted findings")
    p.add_argument("--spec", help="YAML file of synthetic-data fields")
    p.add_argument("--out", required=True)
    p.add_argument("--bank", help="prompt bank YAML (default: bundled)")
    p.add_argument("--seed", type=int)
    p.add_argument("--n-studies", type=int)
    p.set_defaults(func=cmd_generate_synthetic)

    p = sub.add_parser("synth-reports", help="fill reports from attribute records")
    p.add_argument("--manifest", required=True)
    p.add_argument("--bank")
    p.add_argument("--out", required=True, help="output manifest (.jsonl)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--replace", action="store_true", help="also replace existing reports")
    p.set_defaults(func=cmd_synth_reports)

    p = sub.add_parser("pretrain", help="contrastive pretraining")
    p.add_argument("--manifest", required=True)
    p.add_argument("--bank")
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train-factor", help="fit per-attribute channel mappers")
    p.add_argument("--checkpoint", required=True, help="checkpoint file or pretrain directory")
    p.add_argument("--manifest", required=True)
    p.add_argument("--bank")
    p.add_argument("--out", required=True, help="mapper directory")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train_factor)

    for name, func, help_ in (("eval-zs", cmd_eval_zs, "zero-shot AUC and retrieval"),
                              ("eval-lp", cmd_eval_lp, "linear probe on frozen embeddings")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--checkpoint", required=True, help="checkpoint file or pretrain directory")
        p.add_argument("--manifest", required=True)
        p.add_argument("--out", required=True, help="JSON report path")
        p.add_argument("--split")
        if name == "eval-zs":
            p.add_argument("--findings", help="comma-separated (default: manifest vocabulary)")
        else:
            p.add_argument("--fraction", type=float, choices=(0.1, 0.5, 1.0))
        p.set_defaults(func=func)

    p = sub.add_parser("eval-factor-loc", help="weak localization from attribute heatmaps")
    p.add_argument("--checkpoint", required=True, help="checkpoint file or pretrain directory")
    p.add_argument("--mappers", required=True, help="mapper file or train-factor directory")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="JSON report path")
    p.add_argument("--quantile", type=float)
    p.add_argument("--iou", help="comma-separated IoU thresholds, e.g. 0.25,0.5")
    p.add_argument("--split")
    p.set_defaults(func=cmd_eval_factor_loc)

    p = sub.add_parser("export-heatmaps", help="write heatmaps as PNG and .npy")
    p.add_argument("--checkpoint", required=True, help="checkpoint file or pretrain directory")
    p.add_argument("--mappers", required=True, help="mapper file or train-factor directory")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--attribute")
    p.add_argument("--split")
    p.add_argument("--limit", type=int)
    p.set_defaults(func=cmd_export_heatmaps)

    for p in sub.choices.values():
        _common(p)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # argparse: 0 for --help, 2 for usage errors
        return int(e.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except USAGE_ERRORS as e:
        log.error("%s", e)
        return 2
    except Exception:  # noqa: BLE001
        log.exception("%s failed", args.command)
        return 1


if __name__ == "__main__":
    sys.exit(main())
