"""Sample lesion patches and train the 5-way patch classifier briefly.

Run me:  python3 demos/02_patch_training.py

The training loop is staged: first only the classifier head learns at a
high rate, then the last feature stage joins at a lower one, then the
whole network at a lower one still. Batches are class-balanced through
per-sample loss weights rather than by resampling.
"""

import json
import tempfile
from pathlib import Path

import numpy as np

from patch2image.cli import main
from patch2image.datasets import PatchSet
from patch2image.graph import build_patch_net
from patch2image.rng import substream
from patch2image.train import Stage, patch_accuracy, train_patch_classifier

root = Path(tempfile.mkdtemp(prefix="p2i-demo2-"))

for argv in (
    ["gen-data", "--domain", "source", "--patients", "100",
     "--out", str(root / "corpus"), "--seed", "3"],
    ["split", "--data", str(root / "corpus"), "--out", str(root / "splits"),
     "--seed", "4"],
    ["sample-patches", "--data", str(root / "corpus"),
     "--splits", str(root / "splits"), "--subset", "train",
     "--out", str(root / "train.npz"), "--per-roi", "6", "--seed", "5"],
    ["sample-patches", "--data", str(root / "corpus"),
     "--splits", str(root / "splits"), "--subset", "val",
     "--out", str(root / "val.npz"), "--per-roi", "10", "--seed", "6"],
):
    assert main(argv) == 0

train_set = PatchSet.load(root / "train.npz")
val_set = PatchSet.load(root / "val.npz")
print("train patches per class:", train_set.class_counts())

pixel_mean = json.loads((root / "splits/meta.json").read_text())["pixel_mean"]

# A shortened schedule keeps the demo quick; the stage structure is the
# same one the full runs use (head -> head+top -> everything), with rates
# rescaled for this miniature net and epoch budget.
net = build_patch_net("mini-vgg", stages="8x1,12x1,16x1", stem_width=8,
                      patch_size=64, rng=substream(0, "init"),
                      dtype=np.float32)
# Expect a dip when the last stage starts: frozen batchnorm layers run on
# their stored statistics, so unfreezing everything switches the lower
# layers to live batch statistics and the head needs a few epochs to
# re-calibrate. The full-size runs show the same shape, then keep climbing.
schedule = (Stage(3e-3, ("head",), 3),
            Stage(3e-4, ("head", "top"), 10),
            Stage(1e-4, "all", 14))
run = train_patch_classifier(net, train_set, val_set, pixel_mean=pixel_mean,
                             schedule=schedule, seed=1, batch_size=32)
print("\n stage  epoch  lr      groups        loss    val-acc")
for row in run.rows:
    print(f"   {row[0]}      {row[2]:>2}   {row[3]:.0e}  {row[4]:<12} "
          f"{row[5]:.4f}  {row[6]:.4f}")
print(f"\nfinal val accuracy {run.last_val():.3f}, "
      f"best {run.best_val():.3f} at epoch {run.best_epoch()} "
      f"(chance would be {max(np.bincount(val_set.y)) / len(val_set):.3f} "
      f"by always answering 'background')")
print(f"held-out accuracy via patch_accuracy(): "
      f"{patch_accuracy(net, val_set, pixel_mean):.3f}")
