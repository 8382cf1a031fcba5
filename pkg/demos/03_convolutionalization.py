"""Turn a patch classifier into a sliding-window machine, exactly.

Run me:  python3 demos/03_convolutionalization.py

The pooled head (global average pool -> dense -> softmax) only ever sees
a 4x4 feature window, so it can be replayed at every grid position:
average pool with stride 1, the same dense weights applied positionwise,
softmax per position. Because all zero padding happens once at the input
and every convolution runs unpadded, the converted network agrees with a
literal crop-every-window loop to near machine precision, borders
included. That agreement is checked here against both backbones.
"""

import numpy as np

from patch2image.convert import (
    convolutionalize_head,
    equivalence_check,
    heatmap_grid,
    sliding_window_scores,
)
from patch2image.graph import build_patch_net
from patch2image.rng import substream

for kind in ("mini-resnet", "mini-vgg"):
    net = build_patch_net(kind, rng=substream(1, kind))
    rf = net.meta["backbone_rf"]
    print(f"\n== {kind}: backbone receptive field {rf}, "
          f"stride {net.meta['stride']}, input pad {net.input_pad} ==")
    conv = convolutionalize_head(net)

    for size in (96, 160):
        x = substream(2, f"{kind}/{size}").normal(size=(2, 1, size, size))
        grid = heatmap_grid((size, size), net.patch_size, net.meta["stride"])
        report = equivalence_check(conv, net, x)
        print(f"  {size}x{size} image -> {grid[0]}x{grid[1]} grid: {report}")

    # the grid really is per-patch classification: compare one cell by hand
    x = substream(3, kind).normal(size=(1, 1, 96, 96))
    full = conv.forward(x, training=False)
    windows = sliding_window_scores(net, x)
    cell = (1, 2)
    print(f"  cell {cell}: fullconv {full[0, :, cell[0], cell[1]].round(4)}")
    print(f"            window   {windows[0, :, cell[0], cell[1]].round(4)}")
