"""
Average precision and the comparison tables
===========================================

All-point interpolated AP, its brute-force cross-check, and the k-fold
table aggregator.
"""

# %%
import numpy as np

from kdetect.evaluate import Pred, average_precision, build_report, match_detections, reference_ap_oracle
from kdetect.experiment import kfold_markdown, kfold_table

# %%
# Hand-checkable precision-recall cases.
print(average_precision([True], 1), average_precision([True, False], 2), average_precision([False, True], 1))

# %%
# Two detections of one object: the higher score matches, the other is a
# false positive. The brute-force oracle redoes the matching at every cut.
gt_boxes = [np.array([[0.0, 0, 10, 10]])]
gt_labels = [np.array([1])]
dets = [[Pred(0, 1, 0.9, (0.0, 0, 10, 10)), Pred(0, 1, 0.8, (1.0, 0, 11, 10))]]
flags, scores, n_gt = match_detections(dets, gt_boxes, gt_labels, 1, 0.5)
print("flags", flags.tolist(), "AP", average_precision(flags, n_gt),
      "oracle", reference_ap_oracle(dets, gt_boxes, gt_labels, 1, 0.5))

# %%
# A report over the full IoU sweep.
report = build_report(dets, gt_boxes, gt_labels, ("polyp",))
print(report.to_csv())

# %%
# The k-fold aggregator: per-fold scores and their arithmetic mean.
print(kfold_markdown(kfold_table({"geometric": [82.4, 85.5, 85.1]})))
