"""LMFCA-Net: encoder-decoder mask estimator with decoupled FC attention.

The attention math exists in two forms. fca_attention_dense evaluates the
fully-connected definition literally (per-position weight vectors summed
over a whole axis); it is a test oracle and never enters the deployable
graph. fca_attention_decoupled is the production form: two chained 1D
depthwise convolutions whose banded composition reproduces a dense weight
matrix at a fraction of the cost (linear in the kernel size instead of
quadratic in the axis length).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import ConfigError, ShapeError
from .params import ParameterStore
from .tensor import (
    Tensor,
    add,
    avg_pool2,
    concat_channels,
    depthwise_conv1d,
    depthwise_conv2d,
    max_pool2,
    mul,
    nearest_upsample2,
    pointwise_conv2d,
    prelu,
    sigmoid,
    transposed_conv2,
)


class FcaKind(Enum):
    TIME_AXIS = "time"
    FREQUENCY_AXIS = "freq"
    FREQ_THEN_TIME = "ft"

    @classmethod
    def parse(cls, name: str) -> "FcaKind":
        for k in cls:
            if k.value == name:
                return k
        raise ConfigError(f"unknown FCA kind {name!r}")


@dataclass
class ModelConfig:
    channels: tuple = (48, 96, 224, 480)
    mics: int = 6
    fca_kernel: int = 5
    dconv_kernel: int = 3
    enable_fca: bool = True
    sandglass: str = "sandglass"      # or "pconv" (ablation)
    ft_fca_everywhere: bool = False
    encoder_kinds: tuple = ("time", "freq", "time")
    trunk_style: str = "ghost"        # or "pconv_expand"
    init_seed: int = 0

    def validate(self):
        if len(self.channels) != 4 or any(c <= 0 or c % 2 for c in self.channels):
            raise ConfigError("channels must be four positive even integers")
        if self.mics < 1:
            raise ConfigError("mics must be >= 1")
        if self.fca_kernel % 2 == 0 or self.fca_kernel < 1:
            raise ConfigError("fca_kernel must be odd")
        if self.dconv_kernel % 2 == 0:
            raise ConfigError("dconv_kernel must be odd")
        if self.sandglass not in ("sandglass", "pconv"):
            raise ConfigError("sandglass must be 'sandglass' or 'pconv'")
        if self.trunk_style not in ("ghost", "pconv_expand"):
            raise ConfigError("trunk_style must be 'ghost' or 'pconv_expand'")
        if len(self.encoder_kinds) != 3 or any(k not in ("time", "freq") for k in self.encoder_kinds):
            raise ConfigError("encoder_kinds must be three entries from {'time','freq'}")
        return self

    @property
    def in_channels(self):
        return 2 * self.mics

    def stage_kinds(self):
        if self.ft_fca_everywhere:
            enc = [FcaKind.FREQ_THEN_TIME] * 3
        else:
            enc = [FcaKind.parse(k) for k in self.encoder_kinds]
        return enc, FcaKind.FREQ_THEN_TIME

    @classmethod
    def variant(cls, name: str, **kw) -> "ModelConfig":
        """The four ablation-table variants plus the mono mode, by name."""
        table = {
            "full": {},
            "no-fca": {"enable_fca": False},
            "pconv-sandglass": {"sandglass": "pconv"},
            "ft-everywhere": {"ft_fca_everywhere": True},
        }
        if name not in table:
            raise ConfigError(f"unknown variant {name!r} (choose from {sorted(table)})")
        return cls(**{**table[name], **kw}).validate()

    @classmethod
    def tiny(cls, **kw) -> "ModelConfig":
        """Desk-test scale: small widths, mono input."""
        return cls(channels=(4, 8, 12, 16), mics=1, **kw).validate()

    def to_dict(self) -> dict:
        return {
            "model.channels": ",".join(str(c) for c in self.channels),
            "model.mics": str(self.mics),
            "model.fca_kernel": str(self.fca_kernel),
            "model.dconv_kernel": str(self.dconv_kernel),
            "model.enable_fca": str(self.enable_fca).lower(),
            "model.sandglass": self.sandglass,
            "model.ft_fca_everywhere": str(self.ft_fca_everywhere).lower(),
            "model.encoder_kinds": ",".join(self.encoder_kinds),
            "model.trunk_style": self.trunk_style,
            "model.init_seed": str(self.init_seed),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        def get(key, default):
            return d.get(f"model.{key}", default)

        cfg = cls(
            channels=tuple(int(v) for v in get("channels", "48,96,224,480").split(",")),
            mics=int(get("mics", "6")),
            fca_kernel=int(get("fca_kernel", "5")),
            dconv_kernel=int(get("dconv_kernel", "3")),
            enable_fca=get("enable_fca", "true") == "true",
            sandglass=get("sandglass", "sandglass"),
            ft_fca_everywhere=get("ft_fca_everywhere", "false") == "true",
            encoder_kinds=tuple(get("encoder_kinds", "time,freq,time").split(",")),
            trunk_style=get("trunk_style", "ghost"),
            init_seed=int(get("init_seed", "0")),
        )
        return cfg.validate()


# ---------------------------------------------------------------------------
# attention math


def fca_attention_dense(z: np.ndarray, kind: FcaKind, weights) -> np.ndarray:
    """Literal fully-connected attention over a pooled map z (F x T x C).

    Weights carry one vector per output position:
      TIME_AXIS       W_t  of shape (T, T, F, C), summed over the input time axis
      FREQUENCY_AXIS  W_f  of shape (F, F, T, C), summed over the input frequency axis
      FREQ_THEN_TIME  (W_t, W_f), the time sum feeding the frequency sum
    Test oracle only; the deployable graph uses the decoupled form.
    """
    f, t, c = z.shape
    if kind == FcaKind.TIME_AXIS:
        w = weights
        if w.shape != (t, t, f, c):
            raise ShapeError(f"dense time weights must be (T,T,F,C), got {w.shape}")
        return np.einsum("tufc,fuc->ftc", w, z)
    if kind == FcaKind.FREQUENCY_AXIS:
        w = weights
        if w.shape != (f, f, t, c):
            raise ShapeError(f"dense frequency weights must be (F,F,T,C), got {w.shape}")
        return np.einsum("fgtc,gtc->ftc", w, z)
    w_t, w_f = weights
    inner = fca_attention_dense(z, FcaKind.TIME_AXIS, w_t)
    return fca_attention_dense(inner, FcaKind.FREQUENCY_AXIS, w_f)


def toeplitz_band(kernel: np.ndarray, n: int) -> np.ndarray:
    """Dense (n, n, C) band matrix of a zero-padded 1D depthwise convolution."""
    k, c = kernel.shape
    r = k // 2
    w = np.zeros((n, n, c))
    for off in range(-r, r + 1):
        for i in range(n):
            j = i + off
            if 0 <= j < n:
                w[i, j, :] = kernel[off + r, :]
    return w


def composed_band(d1: np.ndarray, d2: np.ndarray, n: int) -> np.ndarray:
    """Band matrix of d2 applied after d1 along the same axis.

    The intermediate result is clipped to [0, n) by the zero padding, so the
    composition is not a plain Toeplitz band near the edges; the clipping is
    reproduced exactly.
    """
    k, c = d1.shape
    r = k // 2
    w = np.zeros((n, n, c))
    for i in range(-r, r + 1):
        for j in range(-r, r + 1):
            for t in range(n):
                mid, src = t + i, t + i + j
                if 0 <= mid < n and 0 <= src < n:
                    w[t, src, :] += d2[i + r, :] * d1[j + r, :]
    return w


def dense_weights_from_kernels(d1: np.ndarray, d2: np.ndarray, kind: FcaKind, f: int, t: int):
    """Dense weights that replicate the decoupled implementation exactly."""
    if kind == FcaKind.TIME_AXIS:
        band = composed_band(d1, d2, t)  # (T, T, C)
        return np.broadcast_to(band[:, :, None, :], (t, t, f, band.shape[2])).copy()
    if kind == FcaKind.FREQUENCY_AXIS:
        band = composed_band(d1, d2, f)
        return np.broadcast_to(band[:, :, None, :], (f, f, t, band.shape[2])).copy()
    w_t = np.broadcast_to(toeplitz_band(d1, t)[:, :, None, :], (t, t, f, d1.shape[1])).copy()
    w_f = np.broadcast_to(toeplitz_band(d2, f)[:, :, None, :], (f, f, t, d2.shape[1])).copy()
    return w_t, w_f


def fca_attention_decoupled(z: Tensor, kind: FcaKind, d1: Tensor, d2: Tensor) -> Tensor:
    """Two chained 1D depthwise convolutions; axes chosen by the FCA kind."""
    if kind == FcaKind.TIME_AXIS:
        return depthwise_conv1d(depthwise_conv1d(z, d1, "time"), d2, "time")
    if kind == FcaKind.FREQUENCY_AXIS:
        return depthwise_conv1d(depthwise_conv1d(z, d1, "frequency"), d2, "frequency")
    return depthwise_conv1d(depthwise_conv1d(z, d1, "time"), d2, "frequency")


def fca_branch(x: Tensor, kind: FcaKind, d1: Tensor, d2: Tensor) -> Tensor:
    """Pooled attention map: avg-pool, decoupled attention, sigmoid, upsample."""
    att = fca_attention_decoupled(avg_pool2(x), kind, d1, d2)
    return nearest_upsample2(sigmoid(att))


# ---------------------------------------------------------------------------
# network modules


def _macs_row(name, op, f, t, cout, macs, elem=0):
    return {"name": name, "op": op, "f": f, "t": t, "c": cout, "macs": int(macs), "elem": int(elem)}


class FcaBlock:
    """Trunk (pointwise + depthwise feature mixer) gated by an attention map.

    The default trunk expands to the output width ghost-style: the first
    pointwise conv produces half the output channels and a 3x3 depthwise
    conv produces the other half, concatenated. trunk_style='pconv_expand'
    instead expands with a second pointwise conv. The attention branch
    projects the block input to the output width after pooling (pooling and
    a 1x1 conv commute, so projecting at pooled resolution changes nothing
    but the cost).
    """

    def __init__(self, store: ParameterStore, prefix: str, cin: int, cout: int,
                 kind: FcaKind, config: ModelConfig, rng):
        if cout % 2:
            raise ConfigError("block output width must be even")
        self.prefix = prefix
        self.cin = cin
        self.cout = cout
        self.kind = kind
        self.config = config
        half = cout // 2
        k = config.dconv_kernel
        self.pw1_w = store.create(f"{prefix}.trunk.pw1.weight", (cin, half), rng, fan_in=cin).tensor
        self.pw1_b = store.create(f"{prefix}.trunk.pw1.bias", (half,), rng, zero=True).tensor
        self.act1 = store.create_const(f"{prefix}.trunk.act1.slope", [0.25]).tensor
        self.dw_w = store.create(f"{prefix}.trunk.dw.weight", (k, k, half), rng, fan_in=k * k).tensor
        self.dw_b = store.create(f"{prefix}.trunk.dw.bias", (half,), rng, zero=True).tensor
        self.act2 = store.create_const(f"{prefix}.trunk.act2.slope", [0.25]).tensor
        if config.trunk_style == "pconv_expand":
            self.pw2_w = store.create(f"{prefix}.trunk.pw2.weight", (half, cout), rng, fan_in=half).tensor
            self.pw2_b = store.create(f"{prefix}.trunk.pw2.bias", (cout,), rng, zero=True).tensor
        # branch parameters exist for every variant so that disabling the
        # branch provably zeroes their gradients rather than deleting them
        kf = config.fca_kernel
        self.proj_w = store.create(f"{prefix}.fca.proj.weight", (cin, cout), rng, fan_in=cin).tensor
        self.proj_b = store.create(f"{prefix}.fca.proj.bias", (cout,), rng, zero=True).tensor
        self.d1 = store.create(f"{prefix}.fca.d1.weight", (kf, cout), rng, fan_in=kf).tensor
        self.d2 = store.create(f"{prefix}.fca.d2.weight", (kf, cout), rng, fan_in=kf).tensor

    def trunk(self, x: Tensor) -> Tensor:
        y1 = prelu(pointwise_conv2d(x, self.pw1_w, self.pw1_b), self.act1)
        y2 = prelu(depthwise_conv2d(y1, self.dw_w, self.dw_b), self.act2)
        if self.config.trunk_style == "ghost":
            return concat_channels([y1, y2])
        return pointwise_conv2d(y2, self.pw2_w, self.pw2_b)

    def attention_map(self, x: Tensor) -> Tensor:
        pooled = avg_pool2(x)
        proj = pointwise_conv2d(pooled, self.proj_w, self.proj_b)
        att = fca_attention_decoupled(proj, self.kind, self.d1, self.d2)
        return nearest_upsample2(sigmoid(att))

    def forward(self, x: Tensor) -> Tensor:
        out = self.trunk(x)
        if self.config.enable_fca:
            out = mul(out, self.attention_map(x))
        if self.cin == self.cout:
            out = add(out, x)
        return out

    def cost_rows(self, f, t):
        half = self.cout // 2
        k = self.config.dconv_kernel
        kf = self.config.fca_kernel
        p = self.prefix
        rows = [
            _macs_row(f"{p}.trunk.pw1", "pconv", f, t, half, f * t * self.cin * half, f * t * half * 2),
            _macs_row(f"{p}.trunk.dw", "dconv2d", f, t, half, f * t * half * k * k, f * t * half * 2),
        ]
        if self.config.trunk_style == "pconv_expand":
            rows.append(_macs_row(f"{p}.trunk.pw2", "pconv", f, t, self.cout,
                                  f * t * half * self.cout, f * t * self.cout))
        if self.config.enable_fca:
            fp, tp = f // 2, t // 2
            rows += [
                _macs_row(f"{p}.fca.pool", "avgpool", fp, tp, self.cin, 0, fp * tp * self.cin * 4),
                _macs_row(f"{p}.fca.proj", "pconv", fp, tp, self.cout,
                          fp * tp * self.cin * self.cout, fp * tp * self.cout),
                _macs_row(f"{p}.fca.d1", "dconv1d", fp, tp, self.cout, fp * tp * self.cout * kf),
                _macs_row(f"{p}.fca.d2", "dconv1d", fp, tp, self.cout, fp * tp * self.cout * kf),
                _macs_row(f"{p}.fca.gate", "sigmoid*mul", f, t, self.cout, 0,
                          fp * tp * self.cout + f * t * self.cout),
            ]
        if self.cin == self.cout:
            rows.append(_macs_row(f"{p}.residual", "add", f, t, self.cout, 0, f * t * self.cout))
        return rows


class SandglassUnit:
    """Depthwise convs around a squeezing/expanding pointwise pair, residual."""

    def __init__(self, store: ParameterStore, prefix: str, c: int, config: ModelConfig, rng):
        self.prefix = prefix
        self.c = c
        self.config = config
        k = config.dconv_kernel
        if config.sandglass == "pconv":
            self.pw_w = store.create(f"{prefix}.pw.weight", (c, c), rng, fan_in=c).tensor
            self.pw_b = store.create(f"{prefix}.pw.bias", (c,), rng, zero=True).tensor
            self.act = store.create_const(f"{prefix}.act.slope", [0.25]).tensor
            return
        half = c // 2
        self.dw1_w = store.create(f"{prefix}.dw1.weight", (k, k, c), rng, fan_in=k * k).tensor
        self.dw1_b = store.create(f"{prefix}.dw1.bias", (c,), rng, zero=True).tensor
        self.act1 = store.create_const(f"{prefix}.act1.slope", [0.25]).tensor
        self.pw1_w = store.create(f"{prefix}.pw1.weight", (c, half), rng, fan_in=c).tensor
        self.pw1_b = store.create(f"{prefix}.pw1.bias", (half,), rng, zero=True).tensor
        self.pw2_w = store.create(f"{prefix}.pw2.weight", (half, c), rng, fan_in=half).tensor
        self.pw2_b = store.create(f"{prefix}.pw2.bias", (c,), rng, zero=True).tensor
        self.act2 = store.create_const(f"{prefix}.act2.slope", [0.25]).tensor
        self.dw2_w = store.create(f"{prefix}.dw2.weight", (k, k, c), rng, fan_in=k * k).tensor
        self.dw2_b = store.create(f"{prefix}.dw2.bias", (c,), rng, zero=True).tensor

    def forward(self, x: Tensor) -> Tensor:
        if self.config.sandglass == "pconv":
            return prelu(pointwise_conv2d(x, self.pw_w, self.pw_b), self.act)
        y = prelu(depthwise_conv2d(x, self.dw1_w, self.dw1_b), self.act1)
        y = pointwise_conv2d(y, self.pw1_w, self.pw1_b)
        y = prelu(pointwise_conv2d(y, self.pw2_w, self.pw2_b), self.act2)
        y = depthwise_conv2d(y, self.dw2_w, self.dw2_b)
        return add(x, y)

    def cost_rows(self, f, t):
        c, p = self.c, self.prefix
        if self.config.sandglass == "pconv":
            return [_macs_row(f"{p}.pw", "pconv", f, t, c, f * t * c * c, f * t * c * 2)]
        k = self.config.dconv_kernel
        half = c // 2
        return [
            _macs_row(f"{p}.dw1", "dconv2d", f, t, c, f * t * c * k * k, f * t * c * 2),
            _macs_row(f"{p}.pw1", "pconv", f, t, half, f * t * c * half, f * t * half),
            _macs_row(f"{p}.pw2", "pconv", f, t, c, f * t * half * c, f * t * c * 2),
            _macs_row(f"{p}.dw2", "dconv2d", f, t, c, f * t * c * k * k, f * t * c * 2),
        ]


class Bottleneck:
    """Two consecutive Sandglass Units."""

    def __init__(self, store, prefix, c, config, rng):
        self.sg1 = SandglassUnit(store, f"{prefix}.sg1", c, config, rng)
        self.sg2 = SandglassUnit(store, f"{prefix}.sg2", c, config, rng)

    def forward(self, x):
        return self.sg2.forward(self.sg1.forward(x))

    def cost_rows(self, f, t):
        return self.sg1.cost_rows(f, t) + self.sg2.cost_rows(f, t)


class LmfcaNet:
    """The full encoder-decoder; forward maps F x T x 2M features to an
    F x T x 2 complex-mask estimate (linear output)."""

    def __init__(self, config: ModelConfig, seed: int | None = None):
        config.validate()
        self.config = config
        self.store = ParameterStore()
        rng = np.random.default_rng(config.init_seed if seed is None else seed)
        c1, c2, c3, c4 = config.channels
        cin = config.in_channels
        enc_kinds, dec_kind = config.stage_kinds()

        self.enc1 = FcaBlock(self.store, "enc1", cin, c1, enc_kinds[0], config, rng)
        self.enc2 = FcaBlock(self.store, "enc2", c1, c2, enc_kinds[1], config, rng)
        self.enc3 = FcaBlock(self.store, "enc3", c2, c3, enc_kinds[2], config, rng)

        self.entry_w = self.store.create("bott.entry.weight", (c3, c4), rng, fan_in=c3).tensor
        self.entry_b = self.store.create("bott.entry.bias", (c4,), rng, zero=True).tensor
        self.entry_act = self.store.create_const("bott.entry.act.slope", [0.25]).tensor
        self.bott = Bottleneck(self.store, "bott", c4, config, rng)

        self.up1_w = self.store.create("dec1.up.weight", (2, 2, c4, c3), rng, fan_in=c4).tensor
        self.up1_b = self.store.create("dec1.up.bias", (c3,), rng, zero=True).tensor
        self.dec1 = FcaBlock(self.store, "dec1.block", 2 * c3, c3, dec_kind, config, rng)
        self.up2_w = self.store.create("dec2.up.weight", (2, 2, c3, c2), rng, fan_in=c3).tensor
        self.up2_b = self.store.create("dec2.up.bias", (c2,), rng, zero=True).tensor
        self.dec2 = FcaBlock(self.store, "dec2.block", 2 * c2, c2, dec_kind, config, rng)
        self.up3_w = self.store.create("dec3.up.weight", (2, 2, c2, c1), rng, fan_in=c2).tensor
        self.up3_b = self.store.create("dec3.up.bias", (c1,), rng, zero=True).tensor
        self.dec3 = FcaBlock(self.store, "dec3.block", 2 * c1, c1, dec_kind, config, rng)

        self.out_bott = Bottleneck(self.store, "out_bott", c1, config, rng)
        self.head_w = self.store.create("head.weight", (c1, 2), rng, fan_in=c1).tensor
        self.head_b = self.store.create("head.bias", (2,), rng, zero=True).tensor

    def forward(self, x: Tensor) -> Tensor:
        f, t, c = x.data.shape
        if c != self.config.in_channels:
            raise ShapeError(f"expected {self.config.in_channels} input channels, got {c}")
        if f % 8 or t % 8:
            raise ShapeError(f"F and T must be divisible by 8, got {f}x{t}")

        s1 = self.enc1.forward(x)
        s2 = self.enc2.forward(max_pool2(s1))
        s3 = self.enc3.forward(max_pool2(s2))
        b = prelu(pointwise_conv2d(max_pool2(s3), self.entry_w, self.entry_b), self.entry_act)
        b = self.bott.forward(b)

        d = transposed_conv2(b, self.up1_w, self.up1_b)
        d = self.dec1.forward(concat_channels([d, s3]))
        d = transposed_conv2(d, self.up2_w, self.up2_b)
        d = self.dec2.forward(concat_channels([d, s2]))
        d = transposed_conv2(d, self.up3_w, self.up3_b)
        d = self.dec3.forward(concat_channels([d, s1]))

        d = self.out_bott.forward(d)
        return pointwise_conv2d(d, self.head_w, self.head_b)

    def cost_rows(self, f: int, t: int):
        """Per-layer MAC/elementwise counts for an F x T input (static)."""
        c1, c2, c3, c4 = self.config.channels
        cin = self.config.in_channels
        rows = self.enc1.cost_rows(f, t)
        rows.append(_macs_row("pool1", "maxpool", f // 2, t // 2, c1, 0, (f // 2) * (t // 2) * c1 * 3))
        rows += self.enc2.cost_rows(f // 2, t // 2)
        rows.append(_macs_row("pool2", "maxpool", f // 4, t // 4, c2, 0, (f // 4) * (t // 4) * c2 * 3))
        rows += self.enc3.cost_rows(f // 4, t // 4)
        rows.append(_macs_row("pool3", "maxpool", f // 8, t // 8, c3, 0, (f // 8) * (t // 8) * c3 * 3))
        f8, t8 = f // 8, t // 8
        rows.append(_macs_row("bott.entry", "pconv", f8, t8, c4, f8 * t8 * c3 * c4, f8 * t8 * c4 * 2))
        rows += self.bott.cost_rows(f8, t8)
        rows.append(_macs_row("dec1.up", "tconv2", f // 4, t // 4, c3,
                              (f // 4) * (t // 4) * c4 * c3, (f // 4) * (t // 4) * c3))
        rows += self.dec1.cost_rows(f // 4, t // 4)
        rows.append(_macs_row("dec2.up", "tconv2", f // 2, t // 2, c2,
                              (f // 2) * (t // 2) * c3 * c2, (f // 2) * (t // 2) * c2))
        rows += self.dec2.cost_rows(f // 2, t // 2)
        rows.append(_macs_row("dec3.up", "tconv2", f, t, c1, f * t * c2 * c1, f * t * c1))
        rows += self.dec3.cost_rows(f, t)
        rows += self.out_bott.cost_rows(f, t)
        rows.append(_macs_row("head", "pconv", f, t, 2, f * t * c1 * 2, f * t * 2))
        return rows
