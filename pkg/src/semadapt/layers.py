"""Convolutional building blocks for the translation and segmentation networks.

Convolutions, nearest-neighbour resampling, instance/layer normalization,
spatially adaptive denormalization (SPADE), spectral normalization and
pre-activation residual blocks, all on top of :mod:`semadapt.autodiff`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import autodiff as ad
from .autodiff import Tensor, record

INIT_STD = 0.02


class Parameter(Tensor):
    """A trainable leaf tensor."""

    __slots__ = ()

    def __init__(self, data, name: Optional[str] = None):
        super().__init__(data, requires_grad=True, name=name)


# ---------------------------------------------------------------------------
# functional ops
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel_size: int
    stride: int = 1

    def __post_init__(self):
        k, s = self.kernel_size, self.stride
        if s not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {s}")
        if k < 1 or (k % 2 == 0 and not (k == 4 and s == 2)):
            raise ValueError(f"kernel {k} with stride {s}: need an odd kernel or 4x4 stride 2")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be positive")

    @property
    def padding(self) -> int:
        return 1 if self.kernel_size == 4 else (self.kernel_size - 1) // 2

    def output_size(self, size: int) -> int:
        return (size + 2 * self.padding - self.kernel_size) // self.stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of ``x`` [b,c,h,w] with ``weight`` [o,c,k,k].

    Implemented as im2col followed by one matrix product.
    """
    b, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if c != ci:
        raise ValueError(f"conv2d: input has {c} channels, weight expects {ci}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    hp, wp = xp.shape[2:]
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d: input {h}x{w} too small for kernel {kh}x{kw}")
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # column matrix laid out (c, kh, kw) x (b, ho, wo): copies run along image rows
    cols = np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(c * kh * kw, b * ho * wo)
    wmat = weight.data.reshape(o, -1)
    out = wmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(o, b, ho, wo).transpose(1, 0, 2, 3)

    def bw(g):
        gmat = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(o, -1)
        gw = (gmat @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        gb = gmat.sum(axis=1) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad and stride == 1 and o <= c and kh == kw and 2 * padding == kh - 1:
            # same-size stride-1 conv: input gradient is a correlation of g with the
            # flipped kernel, cheaper than scattering c*k*k columns when o <= c
            gp = np.pad(g, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
            gwin = sliding_window_view(gp, (kh, kw), axis=(2, 3))
            gcol = np.ascontiguousarray(gwin.transpose(1, 4, 5, 0, 2, 3)).reshape(o * kh * kw, -1)
            wflip = np.ascontiguousarray(weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
            gx = (wflip.reshape(c, -1) @ gcol).reshape(c, b, h, w).transpose(1, 0, 2, 3)
        elif x.requires_grad:
            gcols = (wmat.T @ gmat).reshape(c, kh, kw, b, ho, wo)
            gxp = np.zeros((c, b) + xp.shape[2:], dtype=xp.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, i, j]
            gxp = gxp.transpose(1, 0, 2, 3)
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return record(np.ascontiguousarray(out), parents, bw)


def upsample_nearest2x(x: Tensor) -> Tensor:
    b, c, h, w = x.shape
    out = np.broadcast_to(x.data[:, :, :, None, :, None], (b, c, h, 2, w, 2)).reshape(b, c, 2 * h, 2 * w)
    return record(out, (x,), lambda g: (g.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5)),))


def avg_pool2x(x: Tensor) -> Tensor:
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"avg_pool2x: spatial size {h}x{w} must be even")
    out = x.data.reshape(b, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def bw(g):
        g4 = np.broadcast_to(g[:, :, :, None, :, None] * 0.25, (b, c, h // 2, 2, w // 2, 2))
        return (g4.reshape(b, c, h, w),)

    return record(out, (x,), bw)


def resize_nearest(x: Tensor, size: tuple) -> Tensor:
    """Nearest-neighbour resize of the two spatial axes to ``size``."""
    b, c, h, w = x.shape
    th, tw = size
    if (th, tw) == (h, w):
        return x
    rows = (np.arange(th) * h) // th
    cols = (np.arange(tw) * w) // tw
    out = x.data[:, :, rows[:, None], cols[None, :]]

    def bw(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        np.add.at(full, (slice(None), slice(None), rows[:, None], cols[None, :]), g)
        return (full,)

    return record(out, (x,), bw)


def _normalize(x: Tensor, axes: tuple, eps: float) -> Tensor:
    xd = x.data
    mu = xd.mean(axis=axes, keepdims=True)
    centered = xd - mu
    var = (centered * centered).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv

    def bw(g):
        gm = g.mean(axis=axes, keepdims=True)
        gxm = (g * xhat).mean(axis=axes, keepdims=True)
        return (inv * (g - gm - xhat * gxm),)

    return record(xhat.astype(xd.dtype, copy=False), (x,), bw)


def instance_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """(x − μ_bc) / sqrt(σ²_bc + eps) with biased per-(sample, channel) statistics."""
    if x.shape[2] * x.shape[3] < 2:
        raise ValueError(f"instance_norm needs at least 2 spatial positions, got {x.shape}")
    return _normalize(x, (2, 3), eps)


def layer_norm(x: Tensor, scale: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-sample normalization over (c, h, w) followed by a per-channel affine."""
    if x.shape[1] * x.shape[2] * x.shape[3] < 2:
        raise ValueError(f"layer_norm needs at least 2 elements per sample, got {x.shape}")
    c = x.shape[1]
    xhat = _normalize(x, (1, 2, 3), eps)
    return xhat * scale.reshape(1, c, 1, 1) + shift.reshape(1, c, 1, 1)


@dataclass
class SpectralState:
    """Persistent left singular vector estimate for one weight."""

    u: np.ndarray
    iterations: int = 1

    @classmethod
    def random(cls, out_features: int, rng: np.random.Generator, iterations: int = 1):
        u = rng.standard_normal(out_features)
        return cls((u / np.linalg.norm(u)).astype(np.float32), iterations)


def spectral_normalize(weight: Tensor, state: SpectralState, update: bool = True,
                       eps: float = 1e-12) -> Tensor:
    """Divide ``weight`` by a power-iteration estimate of its largest singular value.

    With the left vector ``u`` held fixed the estimate is σ̂ = ‖Wᵀu‖, whose
    gradient is exactly u vᵀ with v = Wᵀu / ‖Wᵀu‖.  ``update`` runs
    ``state.iterations`` power steps on ``u`` first.
    """
    o = weight.shape[0]
    wd = weight.data
    wmat = wd.reshape(o, -1).astype(np.float64)
    u = state.u.astype(np.float64)
    if update:
        for _ in range(state.iterations):
            v = wmat.T @ u
            nv = np.linalg.norm(v)
            if nv < eps:
                break
            u_new = wmat @ (v / nv)
            nu = np.linalg.norm(u_new)
            if nu < eps:
                break
            u = u_new / nu
        # kept in float32 so checkpoints round-trip it exactly
        state.u = u.astype(np.float32)
        u = state.u.astype(np.float64)
    v = wmat.T @ u
    sigma = float(np.linalg.norm(v))
    if sigma < eps:
        # zero matrix: nothing to scale
        sigma = eps
        v = np.zeros_like(v)
    else:
        v = v / sigma
    out = (wd / sigma).astype(wd.dtype)
    uv = np.outer(u, v).reshape(wd.shape).astype(wd.dtype)

    def bw(g):
        return ((g - (g * out).sum() * uv) / sigma,)

    return record(out, (weight,), bw)


# ---------------------------------------------------------------------------
# modules
# ---------------------------------------------------------------------------

class Module:
    """Minimal container: attributes that are Parameters or Modules are children."""

    training = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Parameter):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for val in vars(self).values():
            if isinstance(val, Module):
                yield from val.modules()
            elif isinstance(val, (list, tuple)):
                for item in val:
                    if isinstance(item, Module):
                        yield from item.modules()

    def named_buffers(self, prefix: str = "") -> Iterator[tuple]:
        """Non-trainable state that must survive checkpointing (spectral vectors)."""
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, SpectralState):
                yield name + ".u", val
            elif isinstance(val, Module):
                yield from val.named_buffers(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{name}.{i}.")

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def requires_grad_(self, flag: bool = True) -> "Module":
        for p in self.parameters():
            p.requires_grad = flag
        return self

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Conv2d(Module):
    """Convolution with zero padding chosen by :class:`ConvSpec`, optionally spectrally normalized."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, stride: int = 1,
                 rng: Optional[np.random.Generator] = None, spectral: bool = False,
                 bias_init: float = 0.0):
        rng = rng or np.random.default_rng(0)
        self.spec = ConvSpec(in_channels, out_channels, kernel_size, stride)
        k = kernel_size
        self.weight = Parameter(rng.normal(0.0, INIT_STD, (out_channels, in_channels, k, k)))
        self.bias = Parameter(np.full(out_channels, bias_init))
        self.sn = SpectralState.random(out_channels, rng) if spectral else None

    def effective_weight(self) -> Tensor:
        if self.sn is None:
            return self.weight
        return spectral_normalize(self.weight, self.sn, update=self.training)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.spec.in_channels:
            raise ValueError(f"{self!r}: got input with {x.shape[1]} channels")
        return conv2d(x, self.effective_weight(), self.bias, self.spec.stride, self.spec.padding)

    def __repr__(self) -> str:
        s = self.spec
        sn = ", sn" if self.sn is not None else ""
        return f"Conv2d({s.in_channels}->{s.out_channels}, k={s.kernel_size}, s={s.stride}{sn})"


class LayerNorm(Module):
    def __init__(self, channels: int, eps: float = 1e-5):
        self.scale = Parameter(np.ones(channels))
        self.shift = Parameter(np.zeros(channels))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.scale, self.shift, self.eps)


class InstanceNorm(Module):
    """Parameter-free instance normalization."""

    def __init__(self, eps: float = 1e-5):
        self.eps = eps

    def forward(self, x: Tensor, m: Optional[Tensor] = None) -> Tensor:
        return instance_norm(x, self.eps)


class Spade(Module):
    """Instance-normalize ``x`` then denormalize it per pixel with γ, β predicted from ``m``.

    y = γ(m) · (x − μ) / σ + β(m).  The γ head starts with bias 1 and the β head
    with bias 0, so an untrained layer is close to plain instance normalization.
    """

    def __init__(self, channels: int, sem_channels: int, hidden: int,
                 rng: Optional[np.random.Generator] = None, spectral: bool = False,
                 eps: float = 1e-5):
        rng = rng or np.random.default_rng(0)
        self.shared = Conv2d(sem_channels, hidden, 3, rng=rng, spectral=spectral)
        self.gamma = Conv2d(hidden, channels, 3, rng=rng, spectral=spectral, bias_init=1.0)
        self.beta = Conv2d(hidden, channels, 3, rng=rng, spectral=spectral)
        self.eps = eps

    def modulation(self, m: Tensor, size: tuple) -> tuple:
        actv = ad.relu(self.shared(resize_nearest(m, size)))
        return self.gamma(actv), self.beta(actv)

    def forward(self, x: Tensor, m: Tensor) -> Tensor:
        gamma, beta = self.modulation(m, x.shape[2:])
        return gamma * instance_norm(x, self.eps) + beta


def spade(x: Tensor, m: Tensor, params: Spade) -> Tensor:
    return params(x, m)


class ResidualBlock(Module):
    """out = x + conv(relu(norm(conv(relu(norm(x)))))), channel count preserved.

    ``norm`` is ``"in"`` for plain instance normalization or ``"spade"`` for the
    semantically guided variant, which then needs a semantic map on every call.
    """

    def __init__(self, channels: int, norm: str = "in", sem_channels: int = 0, hidden: int = 0,
                 rng: Optional[np.random.Generator] = None, spectral: bool = False):
        rng = rng or np.random.default_rng(0)
        if norm == "in":
            self.norm1, self.norm2 = InstanceNorm(), InstanceNorm()
        elif norm == "spade":
            if sem_channels < 1 or hidden < 1:
                raise ValueError("spade residual block needs sem_channels and hidden > 0")
            self.norm1 = Spade(channels, sem_channels, hidden, rng, spectral)
            self.norm2 = Spade(channels, sem_channels, hidden, rng, spectral)
        else:
            raise ValueError(f"unknown norm {norm!r}")
        self.norm = norm
        self.conv1 = Conv2d(channels, channels, 3, rng=rng, spectral=spectral)
        self.conv2 = Conv2d(channels, channels, 3, rng=rng, spectral=spectral)

    def forward(self, x: Tensor, m: Optional[Tensor] = None) -> Tensor:
        if self.norm == "spade" and m is None:
            raise ValueError("ResidualBlock with SPADE normalization needs a semantic map")
        h = self.conv1(ad.relu(self.norm1(x, m)))
        h = self.conv2(ad.relu(self.norm2(h, m)))
        return x + h


def residual_block(x: Tensor, params: ResidualBlock, m: Optional[Tensor] = None) -> Tensor:
    return params(x, m)
