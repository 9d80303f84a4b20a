"""The CCDN network: feature extraction, mask path, complex path, compensation.

Internal feature maps are laid out (batch, channels, frames, bins). The public
:meth:`CCDN.forward` accepts and returns spectrograms as (frames, bins, 2) or
(batch, frames, bins, 2).

Data flow::

    X ──► FEB ──► G ──► MaskBlock ──► mask ─────────┐
    │             └──► 1x1 proj ─┐                  ▼
    └──────────────────────────► ComEB ──► (R', I') ─► compensate ──► S
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import ComEBConfig, FebConfig, MaskBlockConfig, ModelConfig
from .layers import (LSTM, MHSA, BatchNorm, Conv, ConvSpec, LayerNorm, MHSAConfig, Module,
                     ModuleList, ShapeError, glu, same_padding)


def _freq_spec(cin: int, cout: int, kernel: int, stride: int) -> ConvSpec:
    return ConvSpec(2, cin, cout, (1, kernel), stride=(1, stride),
                    padding=(0, (kernel - stride + 1) // 2))


def _time_spec(cin: int, cout: int, kernel: int, dilation: int = 1) -> ConvSpec:
    return ConvSpec(2, cin, cout, (kernel, 1), dilation=(dilation, 1),
                    padding=(same_padding(kernel, dilation), 0))


def freq_chain(bins: int, kernel: int, stride: int, layers: int) -> list[int]:
    """Frequency sizes through a strided encoder, input size first."""
    sizes = [bins]
    for _ in range(layers):
        sizes.append(_freq_spec(1, 1, kernel, stride).out_size((1, sizes[-1]))[1])
    return sizes


# --- U-block / FEB ------------------------------------------------------------

class UBlock(Module):
    """Small U-Net over frequency with an LSTM across frames at the bottleneck.

    Encoder stages halve the frequency axis; decoder stages are the exact
    transposed inverses and receive additive skips from matching encoder
    outputs. Output shape equals input shape.
    """

    def __init__(self, channels: int, bins: int, cfg: FebConfig, rng):
        super().__init__()
        self.sizes = freq_chain(bins, cfg.u_kernel, cfg.u_stride, cfg.u_layers)
        self.down = ModuleList()
        self.up = ModuleList()
        ups = []
        for i in range(cfg.u_layers):
            spec = _freq_spec(channels, channels, cfg.u_kernel, cfg.u_stride)
            self.down.append(Conv(spec, rng))
            ups.append(Conv(spec.inverse((1, self.sizes[i])), rng))
        for m in reversed(ups):
            self.up.append(m)
        width = channels * self.sizes[-1]
        self.lstm = LSTM(width, width, rng)

    def forward(self, x):
        B, C, T, F = x.shape
        if F != self.sizes[0]:
            raise ShapeError(f"U-block built for {self.sizes[0]} bins, got {F}")
        skips = []
        h = x
        for conv in self.down:
            h = ad.elu(conv(h))
            skips.append(h)
        Fb = h.shape[3]
        seq = h.transpose(0, 2, 1, 3).reshape(B, T, C * Fb)
        h = self.lstm(seq).reshape(B, T, C, Fb).transpose(0, 2, 1, 3)
        n = len(self.up)
        for i, conv in enumerate(self.up):
            h = conv(h + skips[n - 1 - i])
            if i < n - 1:
                h = ad.elu(h)
        return h


class FEB(Module):
    """GLU front end with residual U-block stages: y = G + U(ELU(LN(G)))."""

    def __init__(self, cfg: FebConfig, bins: int, rng, in_channels: int = 2):
        super().__init__()
        k = cfg.glu_kernel
        self.glu_conv = Conv(ConvSpec(2, in_channels, 2 * cfg.channels, (k, k),
                                      padding=(k // 2, k // 2)), rng)
        self.norms = ModuleList(LayerNorm(cfg.channels, rng) for _ in range(cfg.u_blocks))
        self.ublocks = ModuleList(UBlock(cfg.channels, bins, cfg, rng) for _ in range(cfg.u_blocks))

    def gated(self, x):
        return glu(self.glu_conv(x), axis=1)

    def branch(self, i: int, y):
        return self.ublocks[i](ad.elu(self.norms[i](y)))

    def forward(self, x):
        y = self.gated(x)
        for i in range(len(self.ublocks)):
            y = y + self.branch(i, y)
        return y


# --- gated residual units -----------------------------------------------------

def _axis_attention(a, attn: MHSA, axis: str):
    B, C, T, F = a.shape
    if axis == "time":
        seq = a.transpose(0, 3, 2, 1).reshape(B * F, T, C)
        return attn(seq).reshape(B, F, T, C).transpose(0, 3, 2, 1)
    seq = a.transpose(0, 2, 3, 1).reshape(B * T, F, C)
    return attn(seq).reshape(B, T, F, C).transpose(0, 3, 1, 2)


class AttentionGRU(Module):
    """Gated residual unit with parallel time- and frequency-axis attention.

    out = x + right(MHSA_time(a) + MHSA_freq(a)),  a = GLU(left(x))
    """

    def __init__(self, channels: int, cfg: MaskBlockConfig, rng):
        super().__init__()
        self.left = Conv(_time_spec(channels, 2 * channels, cfg.left_kernel), rng)
        self.attn_time = MHSA(MHSAConfig(channels, cfg.heads, "time", cfg.attention_scale), rng)
        self.attn_freq = MHSA(MHSAConfig(channels, cfg.heads, "frequency", cfg.attention_scale), rng)
        self.right = Conv(ConvSpec(2, channels, channels, (1, 1)), rng)

    def gate(self, x):
        return glu(self.left(x), axis=1)

    def context(self, a):
        return _axis_attention(a, self.attn_time, "time") + _axis_attention(a, self.attn_freq, "frequency")

    def forward(self, x):
        return x + self.right(self.context(self.gate(x)))


class DilatedGRU(Module):
    """Gated residual unit whose context path is a dilated conv across frames."""

    def __init__(self, channels: int, cfg: ComEBConfig, dilation: int, rng):
        super().__init__()
        self.dilation = dilation
        self.left = Conv(_time_spec(channels, 2 * channels, cfg.left_kernel), rng)
        self.dilated = Conv(_time_spec(channels, channels, cfg.context_kernel, dilation), rng)
        self.right = Conv(ConvSpec(2, channels, channels, (1, 1)), rng)

    def gate(self, x):
        return glu(self.left(x), axis=1)

    def context(self, a):
        return ad.elu(self.dilated(a))

    def forward(self, x):
        return x + self.right(self.context(self.gate(x)))


# --- encoder / decoder paths --------------------------------------------------

class _EncDec(Module):
    """Strided conv encoder, residual middle stack, mirrored transposed decoder."""

    def _build_encdec(self, cin: int, channels: int, bins: int, kernel: int, stride: int,
                      layers: int, rng):
        self.sizes = freq_chain(bins, kernel, stride, layers)
        self.enc = ModuleList()
        self.enc_bn = ModuleList()
        self.dec = ModuleList()
        self.dec_bn = ModuleList()
        decs = []
        for i in range(layers):
            spec = _freq_spec(cin if i == 0 else channels, channels, kernel, stride)
            self.enc.append(Conv(spec, rng, bias=False))
            self.enc_bn.append(BatchNorm(channels, rng))
            inv = _freq_spec(channels, channels, kernel, stride).inverse((1, self.sizes[i]))
            decs.append(Conv(inv, rng, bias=False))
        for m in reversed(decs):
            self.dec.append(m)
            self.dec_bn.append(BatchNorm(channels, rng))

    def encode(self, x):
        skips = []
        h = x
        for conv, bn in zip(self.enc, self.enc_bn):
            h = ad.elu(bn(conv(h)))
            skips.append(h)
        return h, skips

    def decode(self, h, skips):
        n = len(self.dec)
        for i, (conv, bn) in enumerate(zip(self.dec, self.dec_bn)):
            h = ad.elu(bn(conv(h + skips[n - 1 - i])))
        return h


class MaskBlock(_EncDec):
    """Magnitude-mask path: features -> mask in (0, 1) of shape (B, T, F)."""

    def __init__(self, cfg: MaskBlockConfig, in_channels: int, bins: int, rng):
        super().__init__()
        self._build_encdec(in_channels, cfg.channels, bins, cfg.kernel, cfg.stride, cfg.layers, rng)
        self.units = ModuleList(AttentionGRU(cfg.channels, cfg, rng)
                                for _ in range(cfg.groups * cfg.units))
        self.out = Conv(ConvSpec(2, cfg.channels, 1, (1, 1)), rng)

    def forward(self, features):
        h, skips = self.encode(features)
        for unit in self.units:
            h = unit(h)
        h = self.decode(h, skips)
        logits = self.out(h)
        B, _, T, F = logits.shape
        return ad.sigmoid(logits.reshape(B, T, F))


class ComEB(_EncDec):
    """Complex path: noisy RI plus projected FEB features -> refined RI.

    The decoder predicts a correction added to the noisy RI input.
    """

    def __init__(self, cfg: ComEBConfig, feb_channels: int, bins: int, rng):
        super().__init__()
        self.proj = Conv(ConvSpec(2, feb_channels, cfg.feature_channels, (1, 1)), rng)
        self._build_encdec(2 + cfg.feature_channels, cfg.channels, bins, cfg.kernel,
                           cfg.stride, cfg.layers, rng)
        self.units = ModuleList(DilatedGRU(cfg.channels, cfg, d, rng)
                                for _ in range(cfg.groups) for d in cfg.dilations)
        self.out = Conv(ConvSpec(2, cfg.channels, 2, (1, 1)), rng)

    def forward(self, x, features):
        h, skips = self.encode(ad.concat([x, self.proj(features)], axis=1))
        for unit in self.units:
            h = unit(h)
        h = self.decode(h, skips)
        return x + self.out(h)


def comeb_receptive_field(cfg: ComEBConfig) -> int:
    """Frames of context on each side seen by the ComEB middle stack."""
    left = same_padding(cfg.left_kernel)
    return cfg.groups * sum(left + same_padding(cfg.context_kernel, d) for d in cfg.dilations)


# --- compensation -------------------------------------------------------------

@dataclass
class CompensationResult:
    mag: Tensor
    theta: Tensor
    smag: Tensor
    comp_r: Tensor
    comp_i: Tensor
    r_n: Tensor
    i_n: Tensor


def compensate(r_prev, i_prev, mask) -> CompensationResult:
    """Mask the magnitude of (r_prev, i_prev) and add it back along the same phase."""
    r_prev, i_prev, mask = (ad.as_tensor(t) for t in (r_prev, i_prev, mask))
    if not r_prev.shape == i_prev.shape == mask.shape:
        raise ShapeError(f"compensate: shapes {r_prev.shape}, {i_prev.shape}, {mask.shape}")
    mag = ad.hypot(r_prev, i_prev)
    theta = ad.atan2(i_prev, r_prev)
    smag = mag * mask
    # Smag cos(theta) = mask |X| R / |X| = mask R (0 at the origin, where theta = 0
    # and Smag = 0). The reduced form keeps mask = 0 and mask = 1 exact and has
    # no singular gradient at the origin.
    comp_r = mask * r_prev
    comp_i = mask * i_prev
    return CompensationResult(mag, theta, smag, comp_r, comp_i, r_prev + comp_r, i_prev + comp_i)


def cb_forward(ri_prev, mask) -> CompensationResult:
    """Compensation on a (..., 2) real/imag array with a matching (...) mask."""
    ri = ad.as_tensor(ri_prev)
    if ri.shape[-1] != 2:
        raise ShapeError("cb_forward expects a trailing real/imag axis of size 2")
    return compensate(ri[..., 0], ri[..., 1], mask)


# --- full model ---------------------------------------------------------------

class CCDN(Module):
    def __init__(self, cfg: ModelConfig = ModelConfig(), rng: np.random.Generator | None = None):
        super().__init__()
        self.cfg = cfg
        bins = cfg.stft.bins
        self.feb = FEB(cfg.feb, bins, rng)
        self.mb = MaskBlock(cfg.mb, cfg.feb.channels, bins, rng)
        self.comeb = ComEB(cfg.comeb, cfg.feb.channels, bins, rng)

    @staticmethod
    def to_maps(spec) -> Tensor:
        s = ad.as_tensor(spec)
        if s.ndim == 3:
            s = s.reshape((1,) + s.shape)
        if s.ndim != 4 or s.shape[-1] != 2:
            raise ShapeError(f"expected (T, F, 2) or (B, T, F, 2), got {s.shape}")
        return s.transpose(0, 3, 1, 2)

    def details(self, spec) -> dict:
        x = self.to_maps(spec)
        if x.shape[3] != self.cfg.stft.bins:
            raise ShapeError(f"model expects {self.cfg.stft.bins} bins, got {x.shape[3]}")
        g = self.feb(x)
        mask = self.mb(g)
        ri = self.comeb(x, g)
        cb = compensate(ri[:, 0], ri[:, 1], mask)
        B, T, F = mask.shape
        out = ad.concat([cb.r_n.reshape(B, T, F, 1), cb.i_n.reshape(B, T, F, 1)], axis=3)
        return {"features": g, "mask": mask, "complex": ri, "compensation": cb, "output": out}

    def forward(self, spec):
        out = self.details(spec)["output"]
        if ad.as_tensor(spec).ndim == 3:
            out = out.reshape(out.shape[1:])
        return out


def param_count(cfg: ModelConfig) -> int:
    """Number of trainable scalars, counted without allocating weights."""
    return sum(p.size for p in CCDN(cfg, rng=None).parameters())


def shape_table(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...], int]]:
    return [(n, p.shape, p.size) for n, p in CCDN(cfg, rng=None).named_parameters()]
