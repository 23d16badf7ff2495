"""Box geometry, the anchor grid, and greedy non-maximum suppression.

Shows the (x1, y1, x2, y2) conventions, the delta encoding the regression
heads learn, how the anchor grid tiles a feature map, and what NMS keeps.
"""

import numpy as np

from defectdet.anchors import AnchorGridConfig, generate_anchors
from defectdet.boxes import Box, decode, encode, iou
from defectdet.proposals import nms

a = Box(10, 10, 50, 40)
b = Box(30, 20, 70, 50)
print(f"iou({a}, {b}) = {iou(a, b):.4f}")

# encode() answers: what delta moves `a` onto `b`? decode() applies it back.
delta = encode(a, b)
print("delta (tx, ty, tw, th):", np.round(delta.as_array(), 4))
restored, _ = decode(a, delta)
print("decode(a, delta) ->", np.round(restored.as_array(), 10))

# A 3-scale x 3-ratio grid on a 4x5 feature map at stride 8: 4*5*9 anchors,
# row-major over locations, ratio-major then scale within each cell.
cfg = AnchorGridConfig(scales=(32.0, 64.0, 128.0), ratios=(0.5, 1.0, 2.0))
anchors = generate_anchors(cfg, 4, 5)
print("\nanchor grid:", anchors.shape)
cx = (anchors[:, 0] + anchors[:, 2]) / 2
cy = (anchors[:, 1] + anchors[:, 3]) / 2
print("first cell center:", (cx[0], cy[0]), " next column:", (cx[9], cy[9]))
w = anchors[:9, 2] - anchors[:9, 0]
h = anchors[:9, 3] - anchors[:9, 1]
print("cell 0 anchor sizes (w x h):")
for i in range(9):
    print(f"  ratio {cfg.ratios[i // 3]:.1f} scale {cfg.scales[i % 3]:5.0f}"
          f" -> {w[i]:7.2f} x {h[i]:7.2f}")

# NMS: three overlapping candidates and one off to the side. The best-scored
# box suppresses neighbors with IoU strictly above the threshold.
boxes = np.array([[0, 0, 20, 20], [2, 2, 22, 22], [4, 0, 24, 20],
                  [50, 50, 70, 70]], dtype=np.float64)
scores = np.array([0.9, 0.8, 0.7, 0.6])
keep = nms(boxes, scores, iou_threshold=0.5)
print("\nnms keeps indices:", keep.tolist(), "(of", len(boxes), "boxes)")
