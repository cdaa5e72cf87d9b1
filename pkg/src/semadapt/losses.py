"""Objectives of the translation stage and the segmentation stage.

Expectations are means over batch, pixels and (for image discriminators)
scales.  Logs of probabilities are clamped at 1e-8.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

IGNORE_INDEX = -1


@dataclass
class TranslationLossWeights:
    recon: float = 10.0
    gan: float = 1.0
    cc_image: float = 10.0
    cc_latent: float = 1.0
    sce: float = 10.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"loss weight {f.name} must be non-negative")


@dataclass
class SegLossWeights:
    seg: float = 1.0
    ssl: float = 1.0
    adv: float = 1e-3

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"loss weight {f.name} must be non-negative")


def _same_shape(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def l1(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "l1")
    return ad.abs_(a - b).mean()


def loss_recon(x_rec: Tensor, x: Tensor) -> Tensor:
    _same_shape(x_rec, x, "loss_recon")
    return l1(x_rec, x)


def loss_cycle_image(x_cyc: Tensor, x: Tensor) -> Tensor:
    _same_shape(x_cyc, x, "loss_cycle_image")
    return l1(x_cyc, x)


def loss_cycle_latent(z_cyc: Tensor, z: Tensor) -> Tensor:
    _same_shape(z_cyc, z, "loss_cycle_latent")
    return l1(z_cyc, z)


def _as_list(scores):
    return list(scores) if isinstance(scores, (list, tuple)) else [scores]


def loss_lsgan_d(scores_real, scores_fake, conventional: bool = False) -> Tensor:
    """Least-squares discriminator loss averaged over scales.

    By default real images are pushed to 0 and translated ones to 1, the
    labelling the method uses; ``conventional=True`` swaps to real→1, fake→0.
    """
    real_t, fake_t = (1.0, 0.0) if conventional else (0.0, 1.0)
    real, fake = _as_list(scores_real), _as_list(scores_fake)
    total = None
    for r, f in zip(real, fake):
        term = 0.5 * ((r - real_t) ** 2).mean() + 0.5 * ((f - fake_t) ** 2).mean()
        total = term if total is None else total + term
    return total * (1.0 / len(real))


def loss_lsgan_g(scores_fake, conventional: bool = False) -> Tensor:
    """Generator side: pull scores of translated images to the real label."""
    target = 1.0 if conventional else 0.0
    fake = _as_list(scores_fake)
    total = None
    for f in fake:
        term = 0.5 * ((f - target) ** 2).mean()
        total = term if total is None else total + term
    return total * (1.0 / len(fake))


def loss_sce(logits_a: Tensor, logits_b: Tensor) -> Tensor:
    """Symmetric cross-entropy between the segmentations of an image and its translation.

    −mean_pixels Σ_k [ q_b,k · log q_a,k + q_a,k · log q_b,k ], with each factor
    playing the ground truth (q_b in the first term, q_a in the second) cut
    from the graph.  The two terms are accumulated in a fixed order so swapping
    the arguments gives a bitwise-identical value.
    """
    _same_shape(logits_a, logits_b, "loss_sce")
    q_a, q_b = ad.softmax(logits_a, 1), ad.softmax(logits_b, 1)
    log_a, log_b = ad.safe_log(q_a), ad.safe_log(q_b)
    t_ab = q_b.detach() * log_a
    t_ba = q_a.detach() * log_b
    # elementwise + is commutative in IEEE arithmetic, so the sum is order free
    per_class = t_ab + t_ba
    return -(per_class.sum(axis=1).mean())


def total_translation_loss(components: dict, w: TranslationLossWeights) -> Tensor:
    """Weighted sum of the five objectives, each already summed over both domains.

    ``components`` maps recon, gan, cc_image, cc_latent, sce to scalars; a
    missing key counts as zero.
    """
    total = ad.Tensor(0.0)
    for f in fields(w):
        comp = components.get(f.name)
        if comp is None:
            continue
        weight = getattr(w, f.name)
        if weight:
            total = total + comp * weight
    return total


def loss_seg_ce(logits: Tensor, labels: np.ndarray, return_flag: bool = False):
    """Pixel-wise cross-entropy ignoring label −1.

    When every pixel is ignored the loss is 0.  That case warns unless
    ``return_flag=True``, which returns ``(loss, all_ignored)`` instead.
    """
    labels = np.asarray(labels)
    b, k, h, w = logits.shape
    if labels.shape != (b, h, w):
        raise ValueError(f"loss_seg_ce: labels {labels.shape} do not match logits {logits.shape}")
    valid = labels != IGNORE_INDEX
    if np.any(valid & ((labels < 0) | (labels >= k))):
        raise ValueError(f"loss_seg_ce: labels must lie in 0..{k - 1} or be {IGNORE_INDEX}")
    n_valid = int(valid.sum())
    if n_valid == 0:
        if return_flag:
            return ad.Tensor(0.0), True
        warnings.warn("loss_seg_ce: every pixel is ignored; loss defined as 0", RuntimeWarning)
        return ad.Tensor(0.0)
    onehot = np.zeros((b, k, h, w), dtype=ad.get_default_dtype())
    bi, hi, wi = np.nonzero(valid)
    onehot[bi, labels[valid], hi, wi] = -1.0 / n_valid
    loss = (ad.log_softmax(logits, 1) * onehot).sum()
    return (loss, False) if return_flag else loss


def loss_outputspace_adv_d(p_target: Tensor, p_trans: Tensor, D_seg=None) -> Tensor:
    """Output-space discriminator loss: target maps → 1, translated-source maps → 0.

    With ``D_seg`` the inputs are softmax maps and are scored here; without it
    they are taken to be discriminator outputs already.
    """
    d_target = D_seg(p_target) if D_seg is not None else p_target
    d_trans = D_seg(p_trans) if D_seg is not None else p_trans
    return -ad.safe_log(d_target).mean() - ad.safe_log(1.0 - d_trans).mean()


def loss_outputspace_adv_m(p_target: Tensor, D_seg=None) -> Tensor:
    """Segmentation-network side: make target maps look like source ones (label 0)."""
    d_target = D_seg(p_target) if D_seg is not None else p_target
    return -ad.safe_log(1.0 - d_target).mean()


def total_seg_loss(components: dict, w: SegLossWeights) -> Tensor:
    total = ad.Tensor(0.0)
    for f in fields(w):
        comp = components.get(f.name)
        weight = getattr(w, f.name)
        if comp is not None and weight:
            total = total + comp * weight
    return total
