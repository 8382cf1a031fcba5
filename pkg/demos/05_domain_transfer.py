"""How much target-domain data does the transferred network need?

Run me:  python3 demos/05_domain_transfer.py

A network trained on the source domain is evaluated on the target domain
as-is (zero-shot), then fine-tuned on nested, stratified patient subsets
of the target training split: 25% of its patients, 50%, 100%. Each larger
cohort contains the smaller ones, so the curve isolates data volume from
cohort luck. The target domain renders the same anatomy through a
different tone curve, which is exactly the gap fine-tuning has to close.

Everything here is miniature (small corpora, a small backbone, shortened
schedules) so the whole script finishes in a few minutes; the real recipe
lives in configs/ and is what the acceptance suite runs.
"""

import json
import tempfile
from pathlib import Path

import numpy as np

from patch2image.checkpoint import save_checkpoint
from patch2image.cli import main
from patch2image.convert import attach_top, convolutionalize_head
from patch2image.datasets import PatchSet, load_image_set
from patch2image.graph import build_patch_net
from patch2image.phantoms import read_manifest
from patch2image.rng import substream
from patch2image.train import (Stage, train_patch_classifier,
                               train_whole_image)
from patch2image.transfer import nested_patient_subsets, transfer_curve

root = Path(tempfile.mkdtemp(prefix="p2i-demo5-"))

# -- a miniature source-domain training run (patches, then whole images) --
for argv in (
    ["gen-data", "--domain", "source", "--patients", "110",
     "--out", str(root / "src"), "--seed", "7"],
    ["split", "--data", str(root / "src"), "--out", str(root / "src-splits"),
     "--seed", "17"],
    ["sample-patches", "--data", str(root / "src"),
     "--splits", str(root / "src-splits"), "--subset", "train",
     "--out", str(root / "train.npz"), "--per-roi", "6", "--seed", "27"],
    ["sample-patches", "--data", str(root / "src"),
     "--splits", str(root / "src-splits"), "--subset", "val",
     "--out", str(root / "val.npz"), "--per-roi", "10", "--seed", "37"],
):
    assert main(argv) == 0

pixel_mean = json.loads((root / "src-splits/meta.json").read_text())["pixel_mean"]
patch_net = build_patch_net("mini-vgg", stages="8x1,12x1,16x1", stem_width=8,
                            rng=substream(0, "init"), dtype=np.float32)
run = train_patch_classifier(patch_net,
                             PatchSet.load(root / "train.npz"),
                             PatchSet.load(root / "val.npz"),
                             pixel_mean=pixel_mean,
                             schedule=(Stage(3e-3, ("head",), 3),
                                       Stage(3e-4, ("head", "top"), 8)),
                             seed=1, batch_size=32)
print(f"source patch net: val accuracy {run.best_val():.3f}")

image_net = attach_top(convolutionalize_head(patch_net), "allconv",
                       rng=substream(1, "top"))
src_train = load_image_set(root / "src",
                           read_manifest(root / "src-splits" / "train.csv"))
src_val = load_image_set(root / "src",
                         read_manifest(root / "src-splits" / "val.csv"))
run = train_whole_image(image_net, src_train, src_val,
                        pixel_mean=pixel_mean,
                        schedule=(Stage(1e-3, ("image-top",), 3),),
                        seed=2, batch_size=2)
print(f"source image net: val AUC {run.best_val():.3f}")
ckpt = root / "source.ckpt"
save_checkpoint(ckpt, image_net, meta={"task": "demo"})

# -- the other domain: same anatomy, different tone curve -----------------
assert main(["gen-data", "--domain", "target", "--patients", "44",
             "--out", str(root / "tgt"), "--seed", "8"]) == 0
assert main(["split", "--data", str(root / "tgt"),
             "--out", str(root / "tgt-splits"), "--seed", "9"]) == 0
tgt_train = load_image_set(root / "tgt",
                           read_manifest(root / "tgt-splits" / "train.csv"))
tgt_val = load_image_set(root / "tgt",
                         read_manifest(root / "tgt-splits" / "val.csv"))
print(f"target train: {len(tgt_train)} images, val: {len(tgt_val)} images")

# subsets nest: every smaller cohort is inside every larger one
pids = sorted(set(tgt_train.patients))
labels = [int(tgt_train.y[list(tgt_train.patients).index(p)]) for p in pids]
subsets = nested_patient_subsets(pids, labels, (0.25, 0.5, 1.0), seed=2)
for f in sorted(subsets):
    print(f"  {f:.0%}: {len(subsets[f])} patients")

# Much of the zero-shot gap closes with very little target data: the
# image top's batchnorm layers re-estimate their running statistics on
# target batches during fine-tuning, which absorbs most of the tone shift
# before the weights move far.
tgt_mean = json.loads((root / "tgt-splits/meta.json").read_text())["pixel_mean"]
points, _ = transfer_curve(ckpt, tgt_train, tgt_val,
                           fractions=(0.25, 0.5, 1.0),
                           schedule=(Stage(3e-4, ("image-top",), 3),),
                           pixel_mean=tgt_mean, seed=2, batch_size=2)
print("\nfraction  patients  images  AUC")
for p in points:
    tag = "zero-shot" if p.fraction == 0 else f"{p.fraction:.0%}"
    print(f"{tag:>9}  {p.n_patients:>8}  {p.n_images:>6}  {p.auc:.3f}")
