"""Reference SSIM/PSNR values from scikit-image for the metrics tests."""

import json
import os

import numpy as np
from skimage.metrics import peak_signal_noise_ratio, structural_similarity

OUT = os.path.join(os.path.dirname(__file__), "..", "crates", "core", "tests", "fixtures", "metric_reference.json")

rng = np.random.default_rng(8)
shapes = [(3, 16, 16), (1, 12, 20), (3, 32, 32), (1, 11, 11), (2, 14, 13)]
cases = []
for i in range(10):
    c, h, w = shapes[i % len(shapes)]
    a = rng.random((c, h, w))
    if i % 2 == 0:
        b = np.clip(a + rng.normal(0, 0.1 + 0.05 * i, a.shape), 0, 1)
    else:
        b = rng.random((c, h, w))
    a = a.astype(np.float32).astype(np.float64)
    b = b.astype(np.float32).astype(np.float64)
    s = structural_similarity(a, b, channel_axis=0, gaussian_weights=True, sigma=1.5,
                              use_sample_covariance=False, data_range=1.0)
    p = peak_signal_noise_ratio(a, b, data_range=1.0)
    cases.append({"shape": [c, h, w], "a": a.ravel().tolist(), "b": b.ravel().tolist(),
                  "ssim": float(s), "psnr": float(p)})
with open(OUT, "w") as f:
    json.dump(cases, f)
