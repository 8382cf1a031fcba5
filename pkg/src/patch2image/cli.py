"""Command-line pipeline driver.

One subcommand per pipeline step, each configured by an optional JSON
file plus flag overrides (flags win). Every run directory receives the
fully resolved configuration as ``config.resolved.json``.

Exit codes: 0 success, 2 configuration or usage problems, 3 data or
checkpoint problems, 4 numeric failures (NaN/Inf), 5 a failed
patch-to-image equivalence check.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_graph, restore_into, save_checkpoint
from .config import SCHEMAS, archive_config, parse_value, resolve_config, resolve_out
from .convert import (
    attach_top,
    convolutionalize_head,
    equivalence_check,
    heatmap_to_csv,
    heatmap_to_pngs,
)
from .datasets import (
    SOURCE_FRACTIONS,
    TARGET_FRACTIONS,
    PatchSet,
    compute_pixel_mean,
    load_image_set,
    sample_patches,
    split_patients,
)
from .errors import (
    CheckpointError,
    ConfigError,
    DataError,
    EquivalenceError,
    NumericError,
    Patch2ImageError,
    UsageError,
)
from .graph import PATCH_CLASSES, NetworkGraph, build_patch_net
from .metrics import augmented_predict, predict_probs, roc_auc
from .phantoms import PhantomSpec, generate_corpus, load_image, read_manifest, write_manifest
from .reports import (
    write_rows,
    augmented_csv,
    ensemble_csv,
    predictions_csv,
    roc_csv,
    summary_json,
    transfer_csv,
)
from .rng import substream
from .train import (
    IMAGE_SCHEDULE,
    PATCH_SCHEDULE,
    scale_schedule,
    train_patch_classifier,
    train_whole_image,
)
from .transfer import transfer_curve


def _read_split(splits_dir, subset: str):
    path = Path(splits_dir) / f"{subset}.csv"
    if not path.exists():
        have = sorted(p.stem for p in Path(splits_dir).glob("*.csv"))
        raise DataError(f"no {subset!r} manifest in {splits_dir} (found {have})")
    return read_manifest(path)


def _split_meta(splits_dir) -> dict:
    path = Path(splits_dir) / "meta.json"
    if not path.exists():
        raise DataError(f"{splits_dir} has no meta.json; run `split` first")
    return json.loads(path.read_text())


def _center(x: np.ndarray, mean: float, dtype) -> np.ndarray:
    return x.astype(dtype) - dtype.type(mean)


# -- subcommand bodies ---------------------------------------------------------


def _cmd_gen_data(cfg) -> None:
    out = resolve_out(cfg["out"])
    spec = PhantomSpec(domain=cfg["domain"], n_patients=cfg["patients"],
                       malignant_frac=cfg["malignant_frac"],
                       benign_frac=cfg["benign_frac"], seed=cfg["seed"])
    records = generate_corpus(out, spec)
    archive_config(cfg, out)
    lesions = sum(1 for r in records if r.lesion != "none")
    print(f"gen-data: {len(records)} images ({lesions} with findings) in {out}")


def _cmd_split(cfg) -> None:
    data = Path(cfg["data"])
    records = read_manifest(data / "manifest.csv")
    domain = records[0].domain
    fractions = SOURCE_FRACTIONS if domain == "source" else TARGET_FRACTIONS
    splits, excluded = split_patients(records, fractions, cfg["seed"])
    out = resolve_out(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    for name, recs in splits.items():
        write_manifest(out / f"{name}.csv", recs)
    mean = compute_pixel_mean(data, splits["train"])
    meta = {
        "domain": domain,
        "seed": cfg["seed"],
        "pixel_mean": mean,
        "data": str(data),
        "counts": {k: len(v) for k, v in splits.items()},
        "patients": {k: len({r.patient_id for r in v}) for k, v in splits.items()},
        "excluded_patients": excluded,
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    archive_config(cfg, out)
    parts = ", ".join(f"{k}={len(v)}" for k, v in splits.items())
    print(f"split: {parts}, excluded {len(excluded)} patient(s), "
          f"pixel mean {mean:.6f} -> {out}")


def _cmd_sample_patches(cfg) -> None:
    records = _read_split(cfg["splits"], cfg["subset"])
    ps = sample_patches(Path(cfg["data"]), records, per_roi=cfg["per_roi"],
                        patch_size=cfg["patch_size"], min_overlap=cfg["min_overlap"],
                        jitter=cfg["jitter"], max_tries=cfg["max_tries"],
                        seed=cfg["seed"])
    out = resolve_out(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    ps.save(out)
    archive_config(cfg, out.parent)
    counts = ", ".join(f"{k}={v}" for k, v in ps.class_counts().items() if v)
    print(f"sample-patches: {len(ps)} patches ({counts}) -> {out}")


def _cmd_train_patch(cfg) -> None:
    train_set = PatchSet.load(cfg["train_patches"])
    val_set = PatchSet.load(cfg["val_patches"])
    mean = _split_meta(cfg["splits"])["pixel_mean"]
    if cfg["dtype"] not in ("float32", "float64"):
        raise ConfigError(f"dtype must be float32 or float64, got {cfg['dtype']!r}")
    dtype = np.dtype(cfg["dtype"])
    net = build_patch_net(cfg["backbone"], stages=cfg["stages"],
                          stem_width=cfg["stem_width"],
                          patch_size=train_set.x.shape[-1],
                          rng=substream(cfg["seed"], "init"), dtype=dtype)
    schedule = scale_schedule(PATCH_SCHEDULE, cfg["schedule_scale"])
    out = resolve_out(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    archive_config(cfg, out)
    run = train_patch_classifier(net, train_set, val_set, pixel_mean=mean,
                                 schedule=schedule, seed=cfg["seed"],
                                 batch_size=cfg["batch_size"],
                                 checkpoint_path=out / "patch.ckpt",
                                 resume_from=cfg["resume"])
    run.to_csv(out / "train_log.csv")
    summary_json(out / "summary.json",
                 {"task": "train-patch", "backbone": cfg["backbone"],
                  "val_accuracy": run.last_val(), "epochs": len(run.rows),
                  "best_val_accuracy": run.best_val(),
                  "best_epoch": run.best_epoch(), "pixel_mean": mean})
    # one-row scoreboard: model, accuracy at the best epoch, which epoch
    write_rows(out / "model.csv", ["model", "accuracy", "best_epoch"],
                [[cfg["backbone"], run.best_val(), run.best_epoch()]])
    print(f"train-patch: {len(run.rows)} epochs, "
          f"val accuracy {run.last_val():.4f} "
          f"(best {run.best_val():.4f} at epoch {run.best_epoch()}) "
          f"-> {out / 'patch.ckpt'}")


def _widened_copy(net: NetworkGraph, ckpt) -> NetworkGraph:
    """float64 twin of a stored net; widening is exact, so the structural
    equivalence check is run free of single-precision roundoff."""
    topo = net.topology()
    topo["dtype"] = "float64"
    wide = NetworkGraph.from_topology(topo)
    restore_into(wide, ckpt, strict=True)
    return wide


def _cmd_convert(cfg) -> None:
    net, ckpt = load_graph(cfg["checkpoint"])
    if net.meta.get("kind") not in ("mini-resnet", "mini-vgg"):
        raise UsageError(f"{cfg['checkpoint']} is not a patch classifier "
                         f"(kind={net.meta.get('kind')!r})")
    out = resolve_out(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    archive_config(cfg, out)

    if cfg["check_size"]:
        if cfg["check_size"] < net.patch_size:
            raise ConfigError(f"check_size {cfg['check_size']} is smaller than "
                              f"the {net.patch_size} patch")
        wide = _widened_copy(net, ckpt)
        conv64 = convolutionalize_head(wide)
        x = substream(cfg["seed"], "eqcheck").normal(
            size=(2, 1, cfg["check_size"], cfg["check_size"]))
        report = equivalence_check(conv64, wide, x, tol=cfg["tol"],
                                   raise_on_fail=True)
        print(f"convert: equivalence {report}")

    converted = convolutionalize_head(net)
    save_checkpoint(out / "converted.ckpt", converted,
                    meta={"task": "convert", "variant": None})
    image_hw = None
    if cfg["image_size"] is not None:
        image_hw = (cfg["image_size"], cfg["image_size"])
    image_net = attach_top(converted, cfg["variant"], top_spec=cfg["top_spec"],
                           image_hw=image_hw, rng=substream(cfg["seed"], "top"))
    save_checkpoint(out / "image.ckpt", image_net,
                    meta={"task": "convert", "variant": cfg["variant"]})
    print(f"convert: variant {cfg['variant']} -> {out / 'image.ckpt'} "
          f"(+ converted.ckpt heatmap net)")


def _cmd_train_image(cfg) -> None:
    net, ckpt = load_graph(cfg["checkpoint"])
    variant = ckpt.meta.get("variant", "unknown")
    data = Path(cfg["data"])
    train_set = load_image_set(data, _read_split(cfg["splits"], cfg["subset_train"]))
    val_set = load_image_set(data, _read_split(cfg["splits"], cfg["subset_val"]))
    mean = _split_meta(cfg["splits"])["pixel_mean"]
    schedule = scale_schedule(IMAGE_SCHEDULE, cfg["schedule_scale"])
    out = resolve_out(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    archive_config(cfg, out)
    run = train_whole_image(net, train_set, val_set, pixel_mean=mean,
                            schedule=schedule, seed=cfg["seed"],
                            batch_size=cfg["batch_size"],
                            checkpoint_path=out / "image.ckpt",
                            resume_from=cfg["resume"])
    run.to_csv(out / "train_log.csv")
    summary_json(out / "summary.json",
                 {"task": "train-image", "variant": variant,
                  "val_auc": run.last_val(), "epochs": len(run.rows),
                  "best_val_auc": run.best_val(), "best_epoch": run.best_epoch(),
                  "pixel_mean": mean})
    write_rows(out / "model.csv", ["model", "val_auc", "best_epoch"],
                [[variant, run.best_val(), run.best_epoch()]])
    print(f"train-image: {variant}, {len(run.rows)} epochs, "
          f"val AUC {run.last_val():.4f} "
          f"(best {run.best_val():.4f} at epoch {run.best_epoch()}) "
          f"-> {out / 'image.ckpt'}")


def _cmd_eval(cfg) -> None:
    data = Path(cfg["data"])
    images = load_image_set(data, _read_split(cfg["splits"], cfg["subset"]))
    mean = _split_meta(cfg["splits"])["pixel_mean"]
    out = resolve_out(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    archive_config(cfg, out)

    member_names, single_probs, aug_probs, member_auc = [], [], [], {}
    for path in cfg["checkpoints"]:
        net, _ = load_graph(path)
        x = _center(images.x, mean, net.dtype)
        single = predict_probs(net, x, batch_size=cfg["batch_size"])
        if cfg["augment"]:
            probs, per_pass = augmented_predict(net, x, batch_size=cfg["batch_size"])
        else:
            probs, per_pass = single, None
        name = Path(path).parent.name or Path(path).stem
        if name in member_names:
            name = f"{name}#{len(member_names)}"
        member_names.append(name)
        single_probs.append(single)
        aug_probs.append(probs)
        member_auc[name] = {"single": roc_auc(single[:, 1], images.y).auc,
                            "augmented": roc_auc(probs[:, 1], images.y).auc}
        if per_pass is not None and len(aug_probs) == 1:
            augmented_csv(out / "augmented.csv", images.ids, images.y,
                          per_pass, probs[:, 1])

    combined = sum(aug_probs) / len(aug_probs)
    roc = roc_auc(combined[:, 1], images.y)
    predictions_csv(out / "predictions.csv", images.ids, images.patients,
                    images.y, combined[:, 1])
    roc_csv(out / "roc.csv", roc)
    if len(aug_probs) > 1:
        ensemble_csv(out / "ensemble.csv", images.y,
                     member_names, single_probs, aug_probs)
    summary_json(out / "summary.json",
                 {"task": "eval", "subset": cfg["subset"], "auc": roc.auc,
                  "members": member_auc, "n_images": len(images),
                  "augment": cfg["augment"]})
    label = "ensemble AUC" if len(aug_probs) > 1 else "AUC"
    print(f"eval: {label} {roc.auc:.4f} on {len(images)} {cfg['subset']} images -> {out}")


def _cmd_heatmap(cfg) -> None:
    net, _ = load_graph(cfg["checkpoint"])
    data = Path(cfg["data"])
    records = {r.image_id: r for r in read_manifest(data / "manifest.csv")}
    if cfg["image_id"] not in records:
        raise DataError(f"image id {cfg['image_id']!r} not in {data / 'manifest.csv'}")
    mean = _split_meta(cfg["splits"])["pixel_mean"]
    img = load_image(data, records[cfg["image_id"]])
    x = _center(img[None, None], mean, net.dtype)
    probs = net.forward(x, training=False)
    if probs.ndim != 4:
        raise UsageError("heatmap needs the converted (fully convolutional) "
                         f"checkpoint; this one outputs shape {probs.shape}")
    out = resolve_out(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    archive_config(cfg, out)
    heatmap_to_csv(probs[0], PATCH_CLASSES, out / f"{cfg['image_id']}.csv")
    heatmap_to_pngs(probs[0], PATCH_CLASSES, out, cfg["image_id"])
    gh, gw = probs.shape[2:]
    print(f"heatmap: {gh}x{gw} grid for {cfg['image_id']} -> {out}")


def _cmd_transfer(cfg) -> None:
    data = Path(cfg["data"])
    train_set = load_image_set(data, _read_split(cfg["splits"], "train"))
    val_set = load_image_set(data, _read_split(cfg["splits"], "val"))
    mean = _split_meta(cfg["splits"])["pixel_mean"]
    schedule = scale_schedule(IMAGE_SCHEDULE, cfg["schedule_scale"])
    out = resolve_out(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    archive_config(cfg, out)
    points, subsets = transfer_curve(cfg["checkpoint"], train_set, val_set,
                                     fractions=cfg["fractions"], schedule=schedule,
                                     pixel_mean=mean, seed=cfg["seed"],
                                     batch_size=cfg["batch_size"])
    transfer_csv(out / "transfer.csv", points)
    summary_json(out / "summary.json",
                 {"task": "transfer", "zero_shot_auc": points[0].auc,
                  "full_auc": points[-1].auc,
                  "subsets": {str(f): sorted(p) for f, p in subsets.items()}})
    for p in points:
        tag = "zero-shot" if p.fraction == 0.0 else f"{p.fraction:.0%} ({p.n_patients} patients)"
        print(f"transfer: {tag}: AUC {p.auc:.4f}")
    print(f"transfer: curve -> {out / 'transfer.csv'}")


def _cmd_report(cfg) -> None:
    rows = []
    keys = []
    for run in cfg["runs"]:
        path = Path(run) / "summary.json"
        if not path.exists():
            raise DataError(f"{run} has no summary.json")
        payload = json.loads(path.read_text())
        flat = {k: v for k, v in payload.items() if isinstance(v, (int, float, str, bool))}
        for k in flat:
            if k not in keys:
                keys.append(k)
        rows.append((Path(run).name, flat))
    out = resolve_out(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    archive_config(cfg, out)
    import csv as _csv

    with (out / "combined.csv").open("w", newline="") as fh:
        w = _csv.writer(fh)
        w.writerow(["run", *keys])
        for name, flat in rows:
            w.writerow([name, *[repr(flat[k]) if isinstance(flat.get(k), float)
                                else flat.get(k, "") for k in keys]])
    for name, flat in rows:
        gist = ", ".join(f"{k}={flat[k]}" for k in keys if k in flat)
        print(f"report: {name}: {gist}")
    print(f"report: combined table -> {out / 'combined.csv'}")


_HANDLERS = {
    "gen-data": _cmd_gen_data,
    "split": _cmd_split,
    "sample-patches": _cmd_sample_patches,
    "train-patch": _cmd_train_patch,
    "convert": _cmd_convert,
    "train-image": _cmd_train_image,
    "eval": _cmd_eval,
    "heatmap": _cmd_heatmap,
    "transfer": _cmd_transfer,
    "report": _cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="patch2image",
        description="Train a lesion patch classifier, convert it into a "
                    "whole-image network, and follow through to evaluation "
                    "and domain transfer.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", metavar="command")
    for name, schema in SCHEMAS.items():
        p = sub.add_parser(name, help=f"see options via `{name} --help`")
        p.add_argument("--config", default=None, metavar="FILE",
                       help="JSON config; flags below override its keys")
        for key, fld in schema.items():
            flag = "--" + key.replace("_", "-")
            shown = "required" if fld.required else f"default {fld.default!r}"
            p.add_argument(flag, dest=f"opt_{key}", default=None, metavar="V",
                           help=(fld.help + " " if fld.help else "") + f"({shown})")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help()
        return 2
    schema = SCHEMAS[args.command]
    try:
        overrides = {}
        for key, fld in schema.items():
            raw = getattr(args, f"opt_{key}")
            if raw is not None:
                overrides[key] = parse_value(fld, raw)
        cfg = resolve_config(args.command, args.config, overrides)
        _HANDLERS[args.command](cfg)
        return 0
    except EquivalenceError as e:
        print(f"error: equivalence check failed: {e}", file=sys.stderr)
        return 5
    except NumericError as e:
        print(f"error: numeric failure: {e}", file=sys.stderr)
        return 4
    except (DataError, CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except (ConfigError, UsageError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Patch2ImageError as e:  # anything else raised deliberately
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
