"""Regenerates metric_oracles.json from scikit-image and SciPy.

    python3 gen_metric_oracles.py > metric_oracles.json
"""
import json

import numpy as np
from scipy.stats import spearmanr
from skimage.feature import hog
from skimage.metrics import structural_similarity

rng = np.random.default_rng(20240521)


def smooth(n):
    i, j = np.mgrid[0:n, 0:n] / n
    return np.sin(6 * i + 2 * j) * np.cos(5 * j - i * i * 3)


def descriptor(a, cell):
    return hog(a, orientations=9, pixels_per_cell=(cell, cell),
               cells_per_block=(1, 1), block_norm="L2", feature_vector=True)


cases = []
for name, n, cell, a, b in [
    ("noise28", 28, 7, rng.uniform(-1, 1, (28, 28)), rng.uniform(-1, 1, (28, 28))),
    ("smooth_vs_noisy28", 28, 7, smooth(28), smooth(28) + 0.3 * rng.standard_normal((28, 28))),
    ("smooth_vs_noise64", 64, 16, smooth(64), rng.standard_normal((64, 64))),
    ("related64", 64, 16, smooth(64), np.tanh(2 * smooth(64)) + 0.1 * rng.standard_normal((64, 64))),
]:
    a = a / np.abs(a).max()
    b = b / np.abs(b).max()
    da, db = descriptor(a, cell), descriptor(b, cell)
    cases.append({
        "name": name,
        "side": n,
        "cell": cell,
        "a": a.ravel().tolist(),
        "b": b.ravel().tolist(),
        "ssim": float(structural_similarity(a, b, win_size=5, data_range=2.0)),
        "hog_a": da.tolist(),
        "hog_pearson": float(np.corrcoef(da, db)[0, 1]),
        "spearman": float(spearmanr(a.ravel(), b.ravel()).statistic),
        "spearman_abs": float(spearmanr(np.abs(a).ravel(), np.abs(b).ravel()).statistic),
    })

# Heavy ties: values rounded to one decimal.
ta = np.round(rng.uniform(-1, 1, 200), 1)
tb = np.round(ta + rng.uniform(-0.5, 0.5, 200), 1)
ties = {
    "a": ta.tolist(),
    "b": tb.tolist(),
    "spearman": float(spearmanr(ta, tb).statistic),
    "spearman_abs": float(spearmanr(np.abs(ta), np.abs(tb)).statistic),
}

print(json.dumps({"images": cases, "ties": ties}, indent=1))
