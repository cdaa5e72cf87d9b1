"""Encoders, semantically guided generators, discriminators and the segmentation network.

Widths are expressed through a single factor ``w`` (64 at full scale, 16 by
default here).  Every translation network uses spectral normalization on all
of its convolutions; the segmentation network and its output-space
discriminator do not.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Iterator, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import (Conv2d, InstanceNorm, LayerNorm, Module, ResidualBlock, avg_pool2x,
                     instance_norm, upsample_nearest2x)


class Encoder(Module):
    """7x7 stem, two 4x4 stride-2 downsamplers, four IN residual blocks.

    Maps a [b,3,H,W] image to a latent code [b,4w,H/4,W/4].
    """

    def __init__(self, width: int = 16, rng: Optional[np.random.Generator] = None,
                 spectral: bool = True):
        rng = rng or np.random.default_rng(0)
        w = width
        self.width = width
        self.down = [
            Conv2d(3, w, 7, 1, rng=rng, spectral=spectral),
            Conv2d(w, 2 * w, 4, 2, rng=rng, spectral=spectral),
            Conv2d(2 * w, 4 * w, 4, 2, rng=rng, spectral=spectral),
        ]
        self.blocks = [ResidualBlock(4 * w, "in", rng=rng, spectral=spectral) for _ in range(4)]

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ValueError(f"encoder expects [b,3,H,W] images, got {x.shape}")
        if x.shape[2] % 4 or x.shape[3] % 4:
            raise ValueError(f"encoder needs H and W divisible by 4, got {x.shape[2]}x{x.shape[3]}")
        h = x
        for conv in self.down:
            h = ad.relu(instance_norm(conv(h)))
        for block in self.blocks:
            h = block(h)
        return h


class Generator(Module):
    """Latent code plus semantic map to image.

    Four residual blocks at 4w (SPADE-normalized, or plain IN when ``spade`` is
    off), the last one followed by 2x upsampling; 5x5 conv to 2w with LN and 2x
    upsampling; 5x5 conv to w with LN; 7x7 conv to RGB with tanh.
    """

    def __init__(self, width: int = 16, sem_channels: int = 5, spade: bool = True,
                 hidden: Optional[int] = None, rng: Optional[np.random.Generator] = None,
                 spectral: bool = True):
        rng = rng or np.random.default_rng(0)
        w = width
        self.width = width
        self.spade = spade
        hidden = hidden or w  # 64 at full width 64
        norm = "spade" if spade else "in"
        self.blocks = [ResidualBlock(4 * w, norm, sem_channels, hidden, rng=rng, spectral=spectral)
                       for _ in range(4)]
        self.up1 = Conv2d(4 * w, 2 * w, 5, rng=rng, spectral=spectral)
        self.ln1 = LayerNorm(2 * w)
        self.up2 = Conv2d(2 * w, w, 5, rng=rng, spectral=spectral)
        self.ln2 = LayerNorm(w)
        self.to_rgb = Conv2d(w, 3, 7, rng=rng, spectral=spectral)

    def forward(self, z: Tensor, m: Optional[Tensor] = None) -> Tensor:
        h = z
        for block in self.blocks:
            h = block(h, m if self.spade else None)
        h = upsample_nearest2x(h)
        h = upsample_nearest2x(ad.relu(self.ln1(self.up1(h))))
        h = ad.relu(self.ln2(self.up2(h)))
        return ad.tanh(self.to_rgb(h))


class PatchDiscriminator(Module):
    """Four 4x4 stride-2 convs (w, 2w, 4w, 8w) with LReLU 0.2, then a 1x1 score head."""

    n_down = 4

    def __init__(self, width: int = 16, in_channels: int = 3,
                 rng: Optional[np.random.Generator] = None, spectral: bool = True):
        rng = rng or np.random.default_rng(0)
        w = width
        chans = [in_channels, w, 2 * w, 4 * w, 8 * w]
        self.convs = [Conv2d(chans[i], chans[i + 1], 4, 2, rng=rng, spectral=spectral)
                      for i in range(4)]
        self.head = Conv2d(8 * w, 1, 1, rng=rng, spectral=spectral)

    def forward(self, x: Tensor) -> Tensor:
        h = x
        for conv in self.convs:
            h = ad.leaky_relu(conv(h), 0.2)
        return self.head(h)


class MultiScaleDiscriminator(Module):
    """Patch discriminators applied to the input average-pooled by 1, 2, 4, ..."""

    def __init__(self, width: int = 16, n_scales: int = 3,
                 rng: Optional[np.random.Generator] = None, spectral: bool = True):
        rng = rng or np.random.default_rng(0)
        self.scales = [PatchDiscriminator(width, rng=rng, spectral=spectral) for _ in range(n_scales)]

    def forward(self, x: Tensor) -> list:
        need = 2 ** (PatchDiscriminator.n_down + len(self.scales) - 1)
        if min(x.shape[2:]) < need:
            raise ValueError(
                f"discriminator with {len(self.scales)} scales needs inputs of at least "
                f"{need}x{need}, got {x.shape[2]}x{x.shape[3]}")
        out = []
        h = x
        for i, disc in enumerate(self.scales):
            if i:
                h = avg_pool2x(h)
            out.append(disc(h))
        return out


class SegNet(Module):
    """Small encoder-decoder producing unnormalized class scores at input resolution.

    Three 3x3 stride-2 conv blocks, two residual blocks, three
    upsample-then-3x3-conv blocks and a 1x1 classifier.  No normalization
    layers: like a backbone with frozen batch statistics, its features stay
    sensitive to the input domain.
    """

    def __init__(self, n_classes: int = 5, width: int = 16,
                 rng: Optional[np.random.Generator] = None):
        rng = rng or np.random.default_rng(0)
        w = width
        self.n_classes = n_classes
        self.down = [Conv2d(3, w, 3, 2, rng=rng), Conv2d(w, 2 * w, 3, 2, rng=rng),
                     Conv2d(2 * w, 4 * w, 3, 2, rng=rng)]
        self.mid = [_PlainResBlock(4 * w, rng) for _ in range(2)]
        self.up = [Conv2d(4 * w, 2 * w, 3, rng=rng), Conv2d(2 * w, w, 3, rng=rng),
                   Conv2d(w, w, 3, rng=rng)]
        self.classifier = Conv2d(w, n_classes, 1, rng=rng)
        # He-style scale keeps activations alive through the un-normalized stack
        for conv in self.down + self.up:
            fan_in = conv.weight.shape[1] * conv.weight.shape[2] * conv.weight.shape[3]
            conv.weight.data *= np.sqrt(2.0 / fan_in) / 0.02

    def forward(self, x: Tensor) -> Tensor:
        h = x
        for conv in self.down:
            h = ad.leaky_relu(conv(h), 0.2)
        for block in self.mid:
            h = block(h)
        for conv in self.up:
            h = ad.leaky_relu(conv(upsample_nearest2x(h)), 0.2)
        return self.classifier(h)


class _PlainResBlock(Module):
    def __init__(self, channels: int, rng: np.random.Generator):
        self.conv1 = Conv2d(channels, channels, 3, rng=rng)
        self.conv2 = Conv2d(channels, channels, 3, rng=rng)
        self.conv1.weight.data *= np.sqrt(2.0 / (9 * channels)) / 0.02

    def forward(self, x: Tensor) -> Tensor:
        return x + self.conv2(ad.leaky_relu(self.conv1(x), 0.2))


class SegDiscriminator(Module):
    """Output-space discriminator: softmax map in, per-patch probability of 'target' out."""

    def __init__(self, n_classes: int = 5, width: int = 16,
                 rng: Optional[np.random.Generator] = None):
        rng = rng or np.random.default_rng(0)
        self.body = PatchDiscriminator(width, in_channels=n_classes, rng=rng, spectral=False)

    def forward(self, p: Tensor) -> Tensor:
        return ad.sigmoid(self.body(p))


@dataclass
class ModelBundle:
    """Every network of the method; the unit of checkpointing."""

    E_S: Encoder
    E_T: Encoder
    G_S: Generator
    G_T: Generator
    D_S: MultiScaleDiscriminator
    D_T: MultiScaleDiscriminator
    M: SegNet
    D_seg: SegDiscriminator

    @classmethod
    def create(cls, width: int = 16, n_classes: int = 5, spade: bool = True, n_scales: int = 3,
               seg_width: int = 16, seed: int = 0) -> "ModelBundle":
        ss = np.random.SeedSequence(seed)
        rngs = [np.random.default_rng(s) for s in ss.spawn(8)]
        return cls(
            E_S=Encoder(width, rngs[0]),
            E_T=Encoder(width, rngs[1]),
            G_S=Generator(width, n_classes, spade, rng=rngs[2]),
            G_T=Generator(width, n_classes, spade, rng=rngs[3]),
            D_S=MultiScaleDiscriminator(width, n_scales, rngs[4]),
            D_T=MultiScaleDiscriminator(width, n_scales, rngs[5]),
            M=SegNet(n_classes, seg_width, rngs[6]),
            D_seg=SegDiscriminator(n_classes, width, rngs[7]),
        )

    def networks(self) -> Iterator[tuple]:
        for f in fields(self):
            yield f.name, getattr(self, f.name)

    def named_parameters(self) -> Iterator[tuple]:
        for name, net in self.networks():
            yield from net.named_parameters(name + ".")

    def named_buffers(self) -> Iterator[tuple]:
        for name, net in self.networks():
            yield from net.named_buffers(name + ".")

    def translation_nets(self) -> list:
        return [self.E_S, self.E_T, self.G_S, self.G_T]

    def eval(self) -> "ModelBundle":
        for _, net in self.networks():
            net.eval()
        return self

    def train(self) -> "ModelBundle":
        for _, net in self.networks():
            net.train()
        return self


# ---------------------------------------------------------------------------
# functional surface
# ---------------------------------------------------------------------------

def encode(x: Tensor, E: Encoder) -> Tensor:
    return E(x)


def generate(z: Tensor, m: Optional[Tensor], G: Generator) -> Tensor:
    return G(z, m)


def segment(x: Tensor, M: SegNet) -> Tensor:
    """Unnormalized class scores [b,K,H,W]; apply softmax where probabilities are needed."""
    return M(x)


def semantic_map(x: Tensor, M: SegNet) -> Tensor:
    """Unnormalized class scores of M; the guidance fed to SPADE generators."""
    return M(x)


def translate(x: Tensor, E_A: Encoder, G_B: Generator, M: SegNet,
              guidance: Optional[Tensor] = None) -> Tensor:
    """x_{A→B} = G_B(E_A(x), M(x)).

    The semantic map comes from ``guidance`` instead of ``x`` when given; feeding
    the map of a different image is the fake-segmentation probe.  M's output is
    never differentiated here.
    """
    with ad.no_grad():
        m = semantic_map(guidance if guidance is not None else x, M)
    return G_B(E_A(x), m)


def discriminate_image(x: Tensor, D: MultiScaleDiscriminator) -> list:
    return D(x)


def discriminate_seg(p: Tensor, D_seg: SegDiscriminator) -> Tensor:
    return D_seg(p)
