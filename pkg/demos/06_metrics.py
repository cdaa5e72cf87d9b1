"""The evaluation metrics on inputs whose answers are known in advance."""

import numpy as np

from semadapt import ConfusionMatrix, frechet_distance, inception_score, miou

rng = np.random.default_rng(0)
truth = rng.integers(0, 3, size=(8, 8))
pred = truth.copy()
pred[:2] = (pred[:2] + 1) % 3  # corrupt the top two rows
cm = ConfusionMatrix(3)
cm.accumulate(truth, pred)
per_class, mean = miou(cm)
print("per-class IoU:", np.round(per_class, 3).tolist(), "mean:", round(float(mean), 3))

k = 5
print("IS of uniform predictions:", inception_score(np.full((10, k), 1.0 / k)))
print("IS of K distinct one-hots:", inception_score(np.eye(k)))

a = rng.normal(0.0, 1.0, size=(4000, 1))
b = a + 1.0  # same spread, mean moved by 1
print("FD identical sets:", round(frechet_distance(a, a), 9))
print("FD after a unit shift:", round(frechet_distance(a, b), 6))
