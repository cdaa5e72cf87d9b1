"""A short tour of the autodiff core.

Builds a tiny two-layer classifier from elementwise ops, runs backward, and compares the
result against central finite differences.  Run with ``python demos/01_autodiff_tour.py``.
"""

import numpy as np

from semadapt import Tensor, default_dtype, finite_diff_check
from semadapt import autodiff as ad

rng = np.random.default_rng(0)

with default_dtype(np.float64):
    x = Tensor(rng.normal(size=(4, 3)))
    w1 = Tensor(rng.normal(size=(3, 5)), requires_grad=True, name="w1")
    w2 = Tensor(rng.normal(size=(5, 2)), requires_grad=True, name="w2")

    def dense(a, w):
        # no matmul op: broadcast a [n,i,1] against w [1,i,o] and sum over i
        return (a.reshape(a.shape[0], -1, 1) * w.reshape(1, *w.shape)).sum(axis=1)

    def loss():
        h = ad.tanh(dense(x, w1))
        return -ad.log_softmax(dense(h, w2), 1)[:, 0].mean()

    out = loss()
    out.backward()
    print(f"loss {out.item():.5f}")
    print("dL/dw2 row 0:", np.round(w2.grad[0], 5))

    report = finite_diff_check(loss, [w1, w2], eps=1e-4)
    for name, err in report.errors.items():
        print(f"  {name}: relative error {err:.2e}")
    print("gradient check", "passed" if report.ok else "FAILED")

# float32 is the default; gradients never leak into a no_grad block
with ad.no_grad():
    y = Tensor(np.ones(3), requires_grad=True) * 2.0
print("recorded under no_grad:", y.requires_grad)
