"""Two layer properties worth seeing with your own eyes.

A SPADE layer whose γ head outputs exactly 1 and β head exactly 0 is plain
instance normalization, whatever the semantic map says.  A spectrally
normalized weight has largest singular value close to 1, and the estimate
sharpens as the persistent power-iteration vector is refined.
"""

import numpy as np

from semadapt import Tensor, default_dtype
from semadapt.layers import Spade, SpectralState, instance_norm, spectral_normalize

rng = np.random.default_rng(1)

with default_dtype(np.float64):
    layer = Spade(channels=4, sem_channels=5, hidden=8, rng=rng)
    for conv, bias in ((layer.gamma, 1.0), (layer.beta, 0.0)):
        conv.weight.data[:] = 0.0
        conv.bias.data[:] = bias
    x = Tensor(rng.normal(2.0, 3.0, size=(2, 4, 8, 8)))
    m = Tensor(rng.random(size=(2, 5, 8, 8)))
    diff = np.abs(layer(x, m).data - instance_norm(x).data).max()
    print(f"max |SPADE(gamma=1, beta=0) - IN| = {diff:.2e}")

    w = Tensor(rng.normal(size=(8, 8)) * 5.0)
    state = SpectralState.random(8, rng)
    for it in range(1, 21):
        w_sn = spectral_normalize(w, state)
        if it in (1, 2, 5, 20):
            sigma = np.linalg.svd(w_sn.data, compute_uv=False)[0]
            print(f"after {it:2d} power iterations: sigma_max = {sigma:.5f}")
