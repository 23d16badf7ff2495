"""A tour of the float64 reverse-mode engine the detector is built on.

Every layer in this project is a plain numpy computation wrapped in a Tensor
graph; calling backward() on a scalar walks the recorded graph once and
accumulates gradients. This script builds a miniature conv -> relu -> pool
pipeline by hand and checks one gradient against finite differences.
"""

import numpy as np

from defectdet import autodiff as ad

rng = np.random.Generator(np.random.PCG64(0))

# A 1-channel 6x6 "image" and a single 3x3 filter, both tracked.
x = ad.Tensor(rng.normal(size=(1, 6, 6)), requires_grad=True, name="x")
w = ad.Tensor(rng.normal(size=(1, 1, 3, 3)) * 0.5, requires_grad=True, name="w")

feat = ad.relu(ad.conv2d(x, w, stride=1, pad=1))    # (1, 6, 6)
pooled = ad.max_pool(feat, window=2, stride=2)      # (1, 3, 3)
loss = ad.sum_all(pooled)

print("forward value:", round(loss.item(), 6))

ad.backward(loss)
print("dloss/dw shape:", w.grad.shape)
print("dloss/dx nonzeros:", int(np.count_nonzero(x.grad)),
      "of", x.grad.size, "(max-pool routes gradient to winners only)")

# Spot-check one filter coordinate against a central difference.
eps = 1e-6
probe = (0, 0, 1, 1)
w_plus = w.data.copy()
w_plus[probe] += eps
w_minus = w.data.copy()
w_minus[probe] -= eps


def forward(wval):
    f = ad.relu(ad.conv2d(ad.Tensor(x.data), ad.Tensor(wval), stride=1, pad=1))
    return ad.sum_all(ad.max_pool(f, window=2, stride=2)).item()


numeric = (forward(w_plus) - forward(w_minus)) / (2 * eps)
print(f"analytic {w.grad[probe]:.8f}  numeric {numeric:.8f}  "
      f"|diff| {abs(w.grad[probe] - numeric):.2e}")

# The graph refuses to propagate non-finite values anywhere.
try:
    ad.relu(ad.Tensor(np.array([1.0, np.nan])))
except Exception as e:
    print("non-finite input ->", type(e).__name__, "-", e)
