"""
Boxes, anchors and the synthetic corpora
========================================

Box geometry, the anchor grid and the two synthetic corpora the detector
is trained on.
"""

# %%
# IoU and the box-delta encoding. Two 10x10 squares offset by half a side
# overlap in a third of their union.
import math

import numpy as np

from kdetect.detector import build_grid
from kdetect.geometry import Box, decode_box, encode_box, iou, nms

print("IoU:", iou(Box(0, 0, 10, 10), Box(5, 0, 15, 10)))

anchor = Box.from_center(10, 10, 10, 10)
target = Box.from_center(12, 10, 20, 10)
delta = encode_box(anchor, target)
print("delta:", delta.as_tuple(), "ln 2 =", math.log(2))
print("decoded:", decode_box(anchor, delta).as_tuple())

# %%
# Greedy NMS keeps the higher-scoring of two heavily overlapping boxes.
kept = nms([(Box(0, 0, 10, 10), 0.9), (Box(1, 0, 11, 10), 0.8), (Box(40, 40, 50, 50), 0.7)], 0.5)
print("kept scores:", [s for _, s in kept])

# %%
# The anchor grid: 15 x 15 centres, three scales and three aspect ratios.
grid = build_grid()
print("anchors:", len(grid), "first:", grid.anchors[0])

# %%
# The corpora. The polyp proxy is single-class; the EDD proxy mixes three
# classes with per-split counts fixed by its manifest.
from kdetect.synthdata import generate_edd_proxy, generate_unseen_test

edd = generate_edd_proxy(1)
for split in edd:
    print(split.split, len(split), split.class_counts())

unseen = generate_unseen_test(2)
print("unseen:", len(unseen), unseen.class_counts())

sample = edd[0][0]
print("first image:", sample.image.shape, "boxes:", np.round(sample.boxes, 1).tolist())
