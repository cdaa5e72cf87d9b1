"""Optimization: Adam + poly decay, the two training stages and the bidirectional loop.

Stage one trains the translation networks (encoders, generators, image
discriminators) with the segmentation network frozen.  Stage two trains the
segmentation network on translated source images, on confidently
pseudo-labelled target images and against an output-space discriminator, with
the translation networks frozen.  The bidirectional loop alternates the two.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from . import losses as L
from .autodiff import Tensor
from .data import derive_rng
from .metrics import ConfusionMatrix, miou
from .models import ModelBundle, SegDiscriminator, SegNet

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    """A training stage produced a non-finite loss or gradient."""


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    """Every knob of a run.  Defaults are the desk-scale settings."""

    seed: int = 0
    image_size: int = 64
    crop_size: int = 0  # 0 = use whole frames
    batch_size: int = 1
    width: int = 16
    seg_width: int = 16
    n_classes: int = 5
    n_scales: int = 3
    spade: bool = True
    # translation stage
    trans_steps: int = 2000
    lr_g: float = 1e-4
    ttur_ratio: float = 4.0
    lr_power: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.99
    lambda_recon: float = 10.0
    lambda_gan: float = 1.0
    lambda_cc_image: float = 10.0
    lambda_cc_latent: float = 1.0
    lambda_sce: float = 10.0
    conventional_lsgan: bool = False
    # segmentation stage
    source_steps: int = 1500
    seg_steps: int = 2000
    lr_seg: float = 1e-3
    lr_dseg: float = 1e-4
    lambda_seg: float = 1.0
    lambda_ssl: float = 1.0
    lambda_adv: float = 1e-3
    th_ssl: float = 0.9
    # bidirectional loop
    rounds: int = 2
    patience: int = 3
    min_improvement: float = 0.2  # mIoU points
    eval_every: int = 100

    def __post_init__(self):
        if not 0 < self.th_ssl <= 1:
            raise ValueError(f"th_ssl must lie in (0, 1], got {self.th_ssl}")
        for name in ("trans_steps", "seg_steps", "rounds", "patience", "eval_every", "batch_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.source_steps < 0:
            raise ValueError("source_steps must be non-negative")
        self.translation_weights()
        self.seg_weights()

    def translation_weights(self) -> L.TranslationLossWeights:
        return L.TranslationLossWeights(self.lambda_recon, self.lambda_gan, self.lambda_cc_image,
                                        self.lambda_cc_latent, self.lambda_sce)

    def seg_weights(self) -> L.SegLossWeights:
        return L.SegLossWeights(self.lambda_seg, self.lambda_ssl, self.lambda_adv)

    def replace(self, **changes) -> "TrainConfig":
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        values.update(changes)
        return TrainConfig(**values)


# ---------------------------------------------------------------------------
# optimizer and schedule
# ---------------------------------------------------------------------------

@dataclass
class LrSchedule:
    lr0: float
    total_steps: int
    power: float = 0.9


def poly_lr(t: int, schedule: LrSchedule) -> float:
    """lr0 · (1 − t/T)^power, exactly 0 from t = T on."""
    if t >= schedule.total_steps:
        return 0.0
    return schedule.lr0 * (1.0 - t / schedule.total_steps) ** schedule.power


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params, beta1=0.9, beta2=0.99, eps=1e-8) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params],
                   0, beta1, beta2, eps)


def adam_step(params: list, grads: list, state: AdamState, lr: float, names=None) -> list:
    """Bias-corrected Adam update of ``params`` (numpy arrays) in place.

    A ``None`` gradient leaves that parameter and its moments untouched.
    """
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            name = names[i] if names else f"#{i}"
            raise TrainingError(f"non-finite gradient for parameter {name}")
        m, v = state.m[i], state.v[i]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
    return params


class Adam:
    """Adam over a list of named parameters."""

    def __init__(self, named_params, beta1: float = 0.9, beta2: float = 0.99, eps: float = 1e-8):
        named = list(named_params)
        self.names = [n for n, _ in named]
        self.params = [p for _, p in named]
        self.state = AdamState.for_params([p.data for p in self.params], beta1, beta2, eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float) -> None:
        adam_step([p.data for p in self.params], [p.grad for p in self.params],
                  self.state, lr, self.names)


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _check_finite(report: dict, stage: str) -> None:
    bad = {k: v for k, v in report.items() if not math.isfinite(v)}
    if bad:
        raise TrainingError(f"{stage}: non-finite losses {bad}")


def random_crop(images: np.ndarray, size: int, rng: np.random.Generator, labels=None):
    """Crop the same random ``size``×``size`` window from every image (and label map)."""
    h, w = images.shape[-2:]
    if size <= 0 or size >= min(h, w):
        return images if labels is None else (images, labels)
    y = int(rng.integers(0, h - size + 1))
    x = int(rng.integers(0, w - size + 1))
    out = images[..., y:y + size, x:x + size]
    if labels is None:
        return out
    return out, labels[..., y:y + size, x:x + size]


def snapshot(module) -> list:
    return [p.data.copy() for p in module.parameters()]


def restore(module, saved: list) -> None:
    for p, arr in zip(module.parameters(), saved):
        p.data[...] = arr


def predict_logits(M: SegNet, images: np.ndarray, batch: int = 25) -> np.ndarray:
    with ad.no_grad():
        return np.concatenate([M(Tensor(images[i:i + batch])).data
                               for i in range(0, len(images), batch)]) if len(images) else \
            np.zeros((0, M.n_classes) + images.shape[2:], np.float32)


def evaluate_miou(M: SegNet, images: np.ndarray, labels: np.ndarray, n_classes: int = None) -> tuple:
    """Per-class IoU and mean IoU (in points, 0-100) of M's argmax predictions."""
    n_classes = n_classes or M.n_classes
    cm = ConfusionMatrix(n_classes)
    logits = predict_logits(M, images)
    cm.accumulate(labels, logits.argmax(axis=1))
    iou, mean = miou(cm)
    return iou * 100.0, mean * 100.0, cm


def generate_pseudo_labels(M: SegNet, images: np.ndarray, th_ssl: float = 0.9) -> np.ndarray:
    """Argmax class where the top softmax probability is ≥ th_ssl, else −1."""
    logits = predict_logits(M, images)
    return pseudo_labels_from_probs(_softmax_np(logits), th_ssl)


def pseudo_labels_from_probs(probs: np.ndarray, th_ssl: float = 0.9) -> np.ndarray:
    """Pseudo-labels from softmax maps [N,K,H,W] (or [K] / [...,K] along axis 1)."""
    probs = np.asarray(probs)
    top = probs.max(axis=1)
    return np.where(top >= th_ssl, probs.argmax(axis=1), L.IGNORE_INDEX).astype(np.int64)


def _softmax_np(logits: np.ndarray) -> np.ndarray:
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def materialize_translations(bundle: ModelBundle, images: np.ndarray, batch: int = 20,
                             guidance: Optional[np.ndarray] = None) -> np.ndarray:
    """x_{S→T} = G_T(E_S(x), M(x)) for every source image, without recording a graph.

    Spectral vectors are left untouched so the result is a pure function of the
    checkpoint.
    """
    prev = [(net, net.training) for _, net in bundle.networks()]
    bundle.eval()
    out = []
    try:
        with ad.no_grad():
            for i in range(0, len(images), batch):
                x = Tensor(images[i:i + batch])
                g = Tensor(guidance[i:i + batch]) if guidance is not None else x
                m = bundle.M(g)
                out.append(bundle.G_T(bundle.E_S(x), m).data)
    finally:
        for net, mode in prev:
            net.train(mode)
    return np.concatenate(out) if out else images[:0].copy()


# ---------------------------------------------------------------------------
# translation stage
# ---------------------------------------------------------------------------

TRANSLATION_REPORT_KEYS = (
    "recon_S", "recon_T", "gan_S", "gan_T", "cc_image_S", "cc_image_T",
    "cc_latent_S", "cc_latent_T", "sce_S", "sce_T", "d_S", "d_T",
)


class TranslationTrainer:
    """Pixel-level alignment with M frozen.

    Each :meth:`step` first updates E_S, E_T, G_S, G_T on the weighted sum of
    reconstruction, adversarial, image/latent cycle and symmetric
    cross-entropy losses for both domains, then D_S and D_T on detached
    translations.  Discriminators run at ``ttur_ratio`` times the generator
    learning rate; both follow the poly schedule.
    """

    def __init__(self, bundle: ModelBundle, config: TrainConfig, total_steps: Optional[int] = None):
        self.bundle = bundle
        self.config = config
        self.weights = config.translation_weights()
        self.schedule = LrSchedule(config.lr_g, total_steps or config.trans_steps, config.lr_power)
        gen = [(f"{n}.{k}", p) for n in ("E_S", "E_T", "G_S", "G_T")
               for k, p in getattr(bundle, n).named_parameters()]
        disc = [(f"{n}.{k}", p) for n in ("D_S", "D_T")
                for k, p in getattr(bundle, n).named_parameters()]
        self.opt_g = Adam(gen, config.beta1, config.beta2)
        self.opt_d = Adam(disc, config.beta1, config.beta2)
        self.t = 0

    def step(self, x_s: np.ndarray, x_t: np.ndarray) -> dict:
        b, cfg = self.bundle, self.config
        lr_g = poly_lr(self.t, self.schedule)
        lr_d = cfg.ttur_ratio * lr_g
        for net in b.translation_nets() + [b.D_S, b.D_T]:
            net.train()
        b.M.eval().requires_grad_(False)
        b.D_S.requires_grad_(False)
        b.D_T.requires_grad_(False)
        for net in b.translation_nets():
            net.requires_grad_(True)

        xs, xt = Tensor(x_s), Tensor(x_t)
        total, parts, (x_st, x_ts) = translation_objective(b, xs, xt, self.weights,
                                                           cfg.conventional_lsgan)
        if not np.isfinite(total.item()):
            raise TrainingError(f"translation step {self.t}: non-finite total loss; parts "
                                f"{ {k: v.item() for k, v in parts.items()} }")
        self.opt_g.zero_grad()
        total.backward()
        self.opt_g.step(lr_g)

        b.D_S.requires_grad_(True)
        b.D_T.requires_grad_(True)
        d_s, d_t = discriminator_objective(b, xs, xt, x_st.detach(), x_ts.detach(),
                                           cfg.conventional_lsgan)
        self.opt_d.zero_grad()
        (d_s + d_t).backward()
        self.opt_d.step(lr_d)
        self.t += 1

        report = {k: v.item() for k, v in parts.items()}
        report.setdefault("sce_S", 0.0)
        report.setdefault("sce_T", 0.0)
        report["d_S"], report["d_T"] = d_s.item(), d_t.item()
        report = {k: report[k] for k in TRANSLATION_REPORT_KEYS}
        _check_finite(report, f"translation step {self.t}")
        return report


def _paired(net, a: Tensor, b: Tensor, *extra):
    """Run ``net`` once on a and b stacked along the batch axis; split the result.

    Every layer in these networks is per-sample, so this equals two separate
    calls apart from one spectral-norm power iteration instead of two.
    Outputs may be a tensor or a list of tensors (multi-scale discriminators).
    """
    n = a.shape[0]
    out = net(ad.concat([a, b], 0), *extra)
    if isinstance(out, list):
        return [o[:n] for o in out], [o[n:] for o in out]
    return out[:n], out[n:]


def _cat(a: Optional[Tensor], b: Optional[Tensor]) -> Optional[Tensor]:
    return None if a is None else ad.concat([a, b], 0)


def translation_objective(b: ModelBundle, xs: Tensor, xt: Tensor, w: L.TranslationLossWeights,
                          conventional: bool = False) -> tuple:
    """Weighted encoder/generator loss for one batch of each domain.

    Returns ``(total, parts, (x_st, x_ts))`` where ``parts`` holds every
    per-domain component.  M runs without a graph on the real images; on the
    translations it stays differentiable so SCE and the back-translation
    guidance reach the generators.
    """
    spade = b.G_S.spade
    need_m = spade or w.sce > 0
    guide = (lambda logits: logits) if spade else (lambda logits: None)
    with ad.no_grad():
        l_s, l_t = _paired(b.M, xs, xt) if need_m else (None, None)
        m_s, m_t = guide(l_s), guide(l_t)
    z_s, z_t = b.E_S(xs), b.E_T(xt)
    # each generator renders its own domain's reconstruction and the cross translation in one call
    x_ss, x_ts = _paired(b.G_S, z_s, z_t, _cat(m_s, m_t))
    x_tt, x_st = _paired(b.G_T, z_t, z_s, _cat(m_t, m_s))
    # segmentations of the translations: SCE partners and back-translation guidance
    l_st, l_ts = _paired(b.M, x_st, x_ts) if need_m else (None, None)
    z_st, z_ts = b.E_T(x_st), b.E_S(x_ts)
    x_sts, x_tst = b.G_S(z_st, guide(l_st)), b.G_T(z_ts, guide(l_ts))

    parts = {
        "recon_S": L.loss_recon(x_ss, xs), "recon_T": L.loss_recon(x_tt, xt),
        "gan_S": L.loss_lsgan_g(b.D_S(x_ts), conventional),
        "gan_T": L.loss_lsgan_g(b.D_T(x_st), conventional),
        "cc_image_S": L.loss_cycle_image(x_sts, xs), "cc_image_T": L.loss_cycle_image(x_tst, xt),
        "cc_latent_S": L.loss_cycle_latent(z_st, z_s), "cc_latent_T": L.loss_cycle_latent(z_ts, z_t),
    }
    if w.sce > 0:
        parts["sce_S"] = L.loss_sce(l_s, l_st)
        parts["sce_T"] = L.loss_sce(l_t, l_ts)
    components = {
        "recon": parts["recon_S"] + parts["recon_T"],
        "gan": parts["gan_S"] + parts["gan_T"],
        "cc_image": parts["cc_image_S"] + parts["cc_image_T"],
        "cc_latent": parts["cc_latent_S"] + parts["cc_latent_T"],
    }
    if w.sce > 0:
        components["sce"] = parts["sce_S"] + parts["sce_T"]
    return L.total_translation_loss(components, w), parts, (x_st, x_ts)


def discriminator_objective(b: ModelBundle, xs: Tensor, xt: Tensor, fake_st: Tensor,
                            fake_ts: Tensor, conventional: bool = False) -> tuple:
    """LSGAN losses of D_S (real source vs T→S) and D_T (real target vs S→T)."""
    d_s = L.loss_lsgan_d(*_paired(b.D_S, xs, fake_ts), conventional)
    d_t = L.loss_lsgan_d(*_paired(b.D_T, xt, fake_st), conventional)
    return d_s, d_t


def translation_train_step(trainer: TranslationTrainer, batch_S: np.ndarray, batch_T: np.ndarray) -> dict:
    return trainer.step(batch_S, batch_T)


def train_translation(bundle: ModelBundle, source: np.ndarray, target: np.ndarray,
                      config: TrainConfig, rng: np.random.Generator, steps: Optional[int] = None,
                      callback: Optional[Callable] = None) -> list:
    """Run ``steps`` translation steps on random unpaired (source, target) batches."""
    steps = steps or config.trans_steps
    trainer = TranslationTrainer(bundle, config, steps)
    history = []
    for t in range(steps):
        xs = source[rng.integers(0, len(source), config.batch_size)]
        xt = target[rng.integers(0, len(target), config.batch_size)]
        if config.crop_size:
            xs = random_crop(xs, config.crop_size, rng)
            xt = random_crop(xt, config.crop_size, rng)
        report = trainer.step(xs, xt)
        history.append(report)
        if callback:
            callback(t, report)
    return history


# ---------------------------------------------------------------------------
# segmentation stage
# ---------------------------------------------------------------------------

SEG_REPORT_KEYS = ("seg", "ssl", "adv", "d_seg")


class SegmentationTrainer:
    """Feature-level alignment with the translation networks frozen.

    M minimizes λ_seg·CE(translated source, source labels) + λ_SSL·CE(target,
    pseudo-labels) + λ_adv·(−log(1 − D_seg(softmax M(target)))).  D_seg then
    learns to call target maps 1 and translated-source maps 0.
    """

    def __init__(self, M: SegNet, D_seg: SegDiscriminator, config: TrainConfig,
                 total_steps: Optional[int] = None):
        self.M, self.D_seg = M, D_seg
        self.config = config
        self.weights = config.seg_weights()
        steps = total_steps or config.seg_steps
        self.schedule_m = LrSchedule(config.lr_seg, steps, config.lr_power)
        self.schedule_d = LrSchedule(config.lr_dseg, steps, config.lr_power)
        self.opt_m = Adam(M.named_parameters("M."), config.beta1, config.beta2)
        self.opt_d = Adam(D_seg.named_parameters("D_seg."), config.beta1, config.beta2)
        self.t = 0

    def step(self, x_src: np.ndarray, y_src: np.ndarray, x_tgt: Optional[np.ndarray] = None,
             y_tgt: Optional[np.ndarray] = None) -> dict:
        w = self.weights
        M, D = self.M, self.D_seg
        M.train().requires_grad_(True)
        D.requires_grad_(False)

        total, comps, (logits_s, p_t) = segmentation_objective(M, D, w, x_src, y_src, x_tgt, y_tgt)
        if not np.isfinite(total.item()):
            raise TrainingError(f"segmentation step {self.t}: non-finite loss")
        self.opt_m.zero_grad()
        total.backward()
        self.opt_m.step(poly_lr(self.t, self.schedule_m))

        d_loss = 0.0
        if "adv" in comps:
            D.requires_grad_(True)
            p_s = ad.softmax(logits_s, 1).detach()
            dl = L.loss_outputspace_adv_d(p_t.detach(), p_s, D)
            self.opt_d.zero_grad()
            dl.backward()
            self.opt_d.step(poly_lr(self.t, self.schedule_d))
            d_loss = dl.item()
        self.t += 1
        report = {"seg": comps["seg"].item(),
                  "ssl": comps["ssl"].item() if "ssl" in comps else 0.0,
                  "adv": comps["adv"].item() if "adv" in comps else 0.0,
                  "d_seg": d_loss}
        _check_finite(report, f"segmentation step {self.t}")
        return report


def segmentation_objective(M: SegNet, D_seg: SegDiscriminator, w: L.SegLossWeights,
                           x_src: np.ndarray, y_src: np.ndarray,
                           x_tgt: Optional[np.ndarray] = None,
                           y_tgt: Optional[np.ndarray] = None) -> tuple:
    """Weighted M loss; returns ``(total, components, (source logits, target softmax))``."""
    logits_s = M(Tensor(x_src))
    comps = {"seg": L.loss_seg_ce(logits_s, y_src)}
    use_target = x_tgt is not None and (w.ssl > 0 or w.adv > 0)
    logits_t = M(Tensor(x_tgt)) if use_target else None
    if use_target and w.ssl > 0 and y_tgt is not None:
        comps["ssl"], _ = L.loss_seg_ce(logits_t, y_tgt, return_flag=True)
    p_t = ad.softmax(logits_t, 1) if use_target else None
    if use_target and w.adv > 0:
        comps["adv"] = L.loss_outputspace_adv_m(p_t, D_seg)
    return L.total_seg_loss(comps, w), comps, (logits_s, p_t)


def segmentation_train_step(trainer: SegmentationTrainer, batch_SonT, batch_T) -> dict:
    """``batch_SonT`` = (translated images, source labels); ``batch_T`` = (target images, pseudo-labels)."""
    x_t, y_t = batch_T if batch_T is not None else (None, None)
    return trainer.step(batch_SonT[0], batch_SonT[1], x_t, y_t)


@dataclass
class PlateauResult:
    best_miou: float
    steps: int
    evaluations: list = field(default_factory=list)
    history: list = field(default_factory=list)


def train_segmentation(M: SegNet, D_seg: SegDiscriminator, config: TrainConfig,
                       src_images: np.ndarray, src_labels: np.ndarray,
                       rng: np.random.Generator,
                       tgt_images: Optional[np.ndarray] = None,
                       tgt_labels: Optional[np.ndarray] = None,
                       val: Optional[tuple] = None, steps: Optional[int] = None,
                       until_plateau: bool = True) -> PlateauResult:
    """Train M for at most ``steps`` steps, stopping once validation mIoU plateaus.

    Validation runs every ``eval_every`` steps; training stops after
    ``patience`` evaluations without an improvement larger than
    ``min_improvement`` points and M is reset to its best evaluated weights.
    Without ``val`` it simply runs all steps.
    """
    steps = steps or config.seg_steps
    weights = config.seg_weights()
    if tgt_images is None:
        weights = L.SegLossWeights(weights.seg, 0.0, 0.0)
    trainer = SegmentationTrainer(M, D_seg, config.replace(
        lambda_seg=weights.seg, lambda_ssl=weights.ssl, lambda_adv=weights.adv), steps)
    result = PlateauResult(best_miou=-np.inf, steps=0)
    best_params, stale = None, 0
    if val is not None:
        _, start, _ = evaluate_miou(M, *val)
        result.best_miou, best_params = start, snapshot(M)
        result.evaluations.append((0, start))
    bs = config.batch_size
    for t in range(steps):
        i = rng.integers(0, len(src_images), bs)
        xs, ys = src_images[i], src_labels[i]
        xt = yt = None
        if tgt_images is not None:
            j = rng.integers(0, len(tgt_images), bs)
            xt = tgt_images[j]
            yt = tgt_labels[j] if tgt_labels is not None else None
        if config.crop_size:
            xs, ys = random_crop(xs, config.crop_size, rng, ys)
            if xt is not None:
                if yt is not None:
                    xt, yt = random_crop(xt, config.crop_size, rng, yt)
                else:
                    xt = random_crop(xt, config.crop_size, rng)
        result.history.append(trainer.step(xs, ys, xt, yt))
        result.steps = t + 1
        if val is not None and (t + 1) % config.eval_every == 0:
            _, score, _ = evaluate_miou(M, *val)
            result.evaluations.append((t + 1, score))
            if score > result.best_miou + config.min_improvement:
                stale = 0
            else:
                stale += 1
            if score > result.best_miou:
                result.best_miou, best_params = score, snapshot(M)
            if until_plateau and stale >= config.patience:
                break
    if best_params is not None:
        restore(M, best_params)
    return result


# ---------------------------------------------------------------------------
# bidirectional learning
# ---------------------------------------------------------------------------

@dataclass
class ToyData:
    """In-memory splits; target-train labels are deliberately absent."""

    source_images: np.ndarray
    source_labels: np.ndarray
    target_images: np.ndarray
    val_images: np.ndarray
    val_labels: np.ndarray

    @classmethod
    def from_manifest(cls, manifest) -> "ToyData":
        from .data import load_split
        xs, ys = load_split(manifest, "source", with_labels=True)
        xt = load_split(manifest, "target")
        xv, yv = load_split(manifest, "val", with_labels=True)
        return cls(xs, ys, xt, xv, yv)

    @classmethod
    def synthesize(cls, seed: int = 0, n_source: int = 200, n_target: int = 200, n_val: int = 50,
                   size: int = 64) -> "ToyData":
        """Same pixels as :func:`write_dataset` followed by :meth:`from_manifest`, without disk."""
        from .data import synth_split
        xs, ys = synth_split(seed, "source", n_source, size)
        xt, _ = synth_split(seed, "target", n_target, size)
        xv, yv = synth_split(seed, "val", n_val, size)
        return cls(xs, ys, xt, xv, yv)

    @property
    def val(self) -> tuple:
        return self.val_images, self.val_labels


ROUND_KEYS = ("round", "miou", "pseudo_coverage", "seg_steps", "trans_recon", "trans_gan")


def pretrain_source_only(bundle: ModelBundle, data: ToyData, config: TrainConfig) -> PlateauResult:
    """Supervised training of M on raw source images (the lower bound)."""
    rng = derive_rng(config.seed, "source-only")
    return train_segmentation(bundle.M, bundle.D_seg, config, data.source_images,
                              data.source_labels, rng, val=data.val,
                              steps=config.source_steps, until_plateau=True)


def bidirectional_loop(config: TrainConfig, data: ToyData, bundle: Optional[ModelBundle] = None,
                       on_round: Optional[Callable] = None) -> tuple:
    """Alternate translation and segmentation training for ``config.rounds`` rounds.

    Each round: train translation guided by the current M; translate the whole
    source set; regenerate pseudo-labels on the target set; re-initialize
    D_seg; train M until validation mIoU plateaus.  When no bundle is passed
    a fresh one is created and M is first trained on source images only.
    Returns ``(bundle, rows)`` with one metrics row per round.
    """
    if bundle is None:
        bundle = ModelBundle.create(config.width, config.n_classes, config.spade, config.n_scales,
                                    config.seg_width, seed=int(derive_rng(config.seed, "init").integers(2 ** 31)))
        pretrain_source_only(bundle, data, config)
    rows = []
    for r in range(1, config.rounds + 1):
        try:
            rng = derive_rng(config.seed, "translation", r)
            hist = train_translation(bundle, data.source_images, data.target_images, config, rng)
            translated = materialize_translations(bundle, data.source_images)
            pseudo = generate_pseudo_labels(bundle.M, data.target_images, config.th_ssl)
            bundle.D_seg = SegDiscriminator(config.n_classes, config.width,
                                            derive_rng(config.seed, "dseg", r))
            res = train_segmentation(bundle.M, bundle.D_seg, config, translated,
                                     data.source_labels, derive_rng(config.seed, "segmentation", r),
                                     tgt_images=data.target_images, tgt_labels=pseudo,
                                     val=data.val, until_plateau=True)
        except Exception as exc:
            raise TrainingError(f"round {r}: {exc}") from exc
        tail = hist[-min(50, len(hist)):]
        row = {
            "round": r,
            "miou": res.best_miou,
            "pseudo_coverage": float((pseudo != L.IGNORE_INDEX).mean()),
            "seg_steps": res.steps,
            "trans_recon": float(np.mean([h["recon_S"] + h["recon_T"] for h in tail])),
            "trans_gan": float(np.mean([h["gan_S"] + h["gan_T"] for h in tail])),
        }
        log.info("round %d: mIoU %.2f (pseudo coverage %.3f)", r, row["miou"], row["pseudo_coverage"])
        rows.append(row)
        if on_round:
            on_round(r, row, bundle)
    return bundle, rows
