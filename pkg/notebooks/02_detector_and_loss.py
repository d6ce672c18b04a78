"""
Region descriptors, detection heads and the distillation penalty
================================================================

The detector scores a fixed anchor grid with linear heads over 38-d region
descriptors. The student's loss adds a class-aware Bhattacharyya penalty
that pulls each of its class columns towards the teacher's polyp column.
"""

# %%
import math

import numpy as np

from kdetect import distill as kd
from kdetect.detector import build_grid, describe_all, detect, init_model, softmax
from kdetect.synthdata import generate_unseen_test

image = generate_unseen_test(2)[0].image
grid = build_grid()
x = describe_all(image, grid)
print("descriptors:", x.shape, "range", x.min(), x.max())

# %%
# An untrained three-class model: near-uniform probabilities, so every
# anchor scores about 0.25 per class before NMS.
model = init_model(("ndbe", "neoplasia", "polyp"), np.random.default_rng(0))
found = detect(model, image)
print(len(found), "detections; top score", found[0].score if found else None)

# %%
# The Bhattacharyya distance between two normalised columns.
print("B(0.9/0.1, 0.1/0.9) =", kd.bhattacharyya_distance([0.9, 0.1], [0.1, 0.9]), "=", -math.log(0.6))
print("disjoint, clamped:", kd.bhattacharyya_distance([1, 0], [0, 1]))

# %%
# The class-aware penalty over a batch of anchors. The weights (0.165, 0.33,
# 0.33) are normalised away when all per-class distances agree.
rng = np.random.default_rng(1)
student = softmax(rng.normal(size=(8, 4)))
teacher = softmax(rng.normal(size=(8, 2)))
d, per_class = kd.kd_penalty(student, teacher)
print("D =", d, "per class:", per_class)

doubled = kd.KDConfig(0.33, 0.66, 0.66)
print("doubling every weight leaves D at", kd.kd_penalty(student, teacher, doubled)[0])
