"""Attach an image-level top, fine-tune on whole images, evaluate.

Run me:  python3 demos/04_image_training_and_eval.py

Four interchangeable tops exist. Three read the patch-probability grid
(fully convolutional stack, residual stack, or a fixed-size pooled MLP);
the fourth builds its residual stack on raw backbone features instead.
Evaluation averages four mirror passes per image, and separately trained
networks can be ensembled by a plain probability average.
"""

import tempfile
from pathlib import Path

import numpy as np

from patch2image.convert import ATTACH_VARIANTS, attach_top, convolutionalize_head
from patch2image.datasets import ImageSet
from patch2image.graph import build_patch_net
from patch2image.metrics import augmented_predict, ensemble_average, roc_auc
from patch2image.rng import substream
from patch2image.train import Stage, train_whole_image

SIZE = 128


def toy_images(n, seed):
    """Synthetic stand-ins so the demo stays fast; cancer images get a
    bright square somewhere. Real runs use the phantom corpus instead."""
    rng = np.random.default_rng(seed)
    y = (np.arange(n) % 2).astype(np.int64)
    x = rng.normal(size=(n, 1, SIZE, SIZE)).astype(np.float32) * 0.1 + 0.4
    for i in range(n):
        if y[i]:
            r, c = rng.integers(32, SIZE - 32, size=2)
            x[i, 0, r - 12:r + 12, c - 12:c + 12] += 0.5
    pids = np.array([f"p{i:03d}" for i in range(n)])
    return ImageSet(x=x, y=y, ids=pids, patients=pids)


def fresh_converted():
    """attach_top shares the backbone objects it is given, so each member
    gets its own copy (the CLI gets the same effect by reloading the patch
    checkpoint before every conversion)."""
    patch_net = build_patch_net("mini-vgg", stages="6x1,10x1", stem_width=6,
                                rng=substream(0, "init"), dtype=np.float32)
    return convolutionalize_head(patch_net)


print("image-top variants:", ", ".join(sorted(ATTACH_VARIANTS)))

train_set, val_set = toy_images(32, 1), toy_images(16, 2)
# Real runs follow the top-only stage with an everything-unfrozen stage;
# on this toy that second stage would be spent re-calibrating batchnorm
# statistics (see demo 02 for that effect), so we stop after the first.
schedule = (Stage(1e-3, ("image-top",), 3),)

nets = {}
for variant in ("allconv", "heatmap_fc"):
    kw = {"image_hw": (SIZE, SIZE)} if variant == "heatmap_fc" else {}
    net = attach_top(fresh_converted(), variant, rng=substream(3, variant), **kw)
    run = train_whole_image(net, train_set, val_set, pixel_mean=0.4,
                            schedule=schedule, seed=4, batch_size=4)
    nets[variant] = net
    print(f"{variant}: val AUC per epoch "
          f"{[round(r[6], 3) for r in run.rows]}")

# flip-averaged predictions, then a two-model ensemble
x = val_set.x.astype(np.float32) - np.float32(0.4)
members = []
for variant, net in nets.items():
    mean_probs, per_pass = augmented_predict(net, x, batch_size=4)
    members.append(mean_probs)
    auc = roc_auc(mean_probs[:, 1], val_set.y).auc
    print(f"{variant}: flip-averaged AUC {auc:.3f} "
          f"(passes: {', '.join(per_pass)})")
combined = ensemble_average(members)
print(f"ensemble of both: AUC {roc_auc(combined[:, 1], val_set.y).auc:.3f}")
