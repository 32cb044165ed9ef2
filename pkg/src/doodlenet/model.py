"""Double encoder-decoder fusion network and its ablation variants.

Each modality has its own encoder and decoder. The decoders emit a coarse
segmentation at 1/4 scale; its per-pixel softmax peak gates the modality's
encoder features (confidence weighting), and the normalised correlation
between the two coarse predictions produces a spatial gate applied to the
fused features (correlation weighting). A shared decoder consumes the gated
features from two encoder depths.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np

from . import tensor as T
from .nn import Conv2d, ConvNormReLU, Module
from .tensor import Tensor

VARIANTS = ("rgb", "thermal", "stacked", "unweighted", "conf_only", "full")
FUSION_VARIANTS = ("unweighted", "conf_only", "full")
SINGLE_VARIANTS = ("rgb", "thermal", "stacked")
_IN_CHANNELS = {"color": 3, "thermal": 1, "stacked": 4}


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int = 5
    height: int = 64
    width: int = 64
    widths: tuple = (16, 32, 64, 128)
    aspp_rates: tuple = (1, 2, 4)
    decoder_width: int = 32
    skip_width: int = 16
    compression_width: int = 16
    norm_groups: int = 8
    aux_weight: float = 0.5
    variant: str = "full"
    softmax_correlation: bool = False
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        if self.height % 16 or self.width % 16:
            raise ValueError("input height and width must be divisible by 16")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.aux_weight < 0:
            raise ValueError("aux_weight must be >= 0")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if len(self.widths) != 4:
            raise ValueError("widths must list four encoder stages")
        if not self.aspp_rates:
            raise ValueError("aspp_rates must be non-empty")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    @property
    def corr_size(self) -> tuple[int, int]:
        return self.height // 4, self.width // 4

    def replace(self, **changes) -> "ModelConfig":
        return ModelConfig(**{**asdict(self), **changes})

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            key, _, raw = line.partition("=")
            if key not in kinds:
                continue
            default = getattr(cls(), key)
            if isinstance(default, tuple):
                kwargs[key] = tuple(int(x) for x in raw.split(",") if x)
            elif isinstance(default, bool):
                kwargs[key] = raw == "True"
            elif isinstance(default, int):
                kwargs[key] = int(raw)
            elif isinstance(default, float):
                kwargs[key] = float(raw)
            else:
                kwargs[key] = raw
        return cls(**kwargs)


@dataclass
class ForwardOutput:
    y_final: Tensor
    y_color: Optional[Tensor] = None
    y_thermal: Optional[Tensor] = None
    conf_color: Optional[Tensor] = None
    conf_thermal: Optional[Tensor] = None
    corr: Optional[Tensor] = None
    taps: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------

def _cnr(cin, cout, kernel, rng, cfg: ModelConfig, **kw) -> ConvNormReLU:
    return ConvNormReLU(cin, cout, kernel, rng, dtype=cfg.np_dtype, max_groups=cfg.norm_groups, **kw)


class Encoder(Module):
    """Four stride-2 stages; returns the 1/4 and 1/16 scale taps."""

    def __init__(self, cin: int, cfg: ModelConfig, rng):
        self.cin = cin
        stages = []
        prev = cin
        for w in cfg.widths:
            stages.append(_Stage(prev, w, rng, cfg))
            prev = w
        self.stages = stages

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        if x.ndim != 4 or x.shape[1] != self.cin:
            raise ValueError(f"encoder expects {self.cin} input channels, got shape {x.shape}")
        outs = []
        for stage in self.stages:
            x = stage(x)
            outs.append(x)
        return outs[1], outs[3]


class _Stage(Module):
    def __init__(self, cin, cout, rng, cfg):
        self.down = _cnr(cin, cout, 3, rng, cfg, stride=2)
        self.refine = _cnr(cout, cout, 3, rng, cfg)

    def forward(self, x):
        return self.refine(self.down(x))


class ASPP(Module):
    """1x1 branch, one 3x3 atrous branch per rate, and an image-pooling branch."""

    def __init__(self, cin: int, cout: int, rates, rng, cfg: ModelConfig):
        self.rates = tuple(rates)
        self.point = _cnr(cin, cout, 1, rng, cfg)
        self.atrous = [_cnr(cin, cout, 3, rng, cfg, dilation=r) for r in self.rates]
        self.pool = Conv2d(cin, cout, 1, rng, dtype=cfg.np_dtype)
        self.project = _cnr((len(self.rates) + 2) * cout, cout, 1, rng, cfg)

    def forward(self, x: Tensor) -> Tensor:
        h, w = x.shape[2:]
        branches = [self.point(x)] + [b(x) for b in self.atrous]
        pooled = T.relu(self.pool(T.mean(x, axis=(2, 3), keepdims=True)))
        branches.append(T.bilinear_resize(pooled, h, w))
        return self.project(T.concat(branches, axis=1))


class Decoder(Module):
    """DeepLabv3+-style head: ASPP on the deep tap, merged with the shallow tap."""

    def __init__(self, tap_a: int, tap_b: int, cfg: ModelConfig, rng):
        width = cfg.decoder_width
        self.aspp = ASPP(tap_b, width, cfg.aspp_rates, rng, cfg)
        self.skip = _cnr(tap_a, cfg.skip_width, 1, rng, cfg)
        self.fuse1 = _cnr(width + cfg.skip_width, width, 3, rng, cfg)
        self.fuse2 = _cnr(width, width, 3, rng, cfg)
        self.head = Conv2d(width, cfg.num_classes, 1, rng, dtype=cfg.np_dtype)

    def forward(self, tap_a: Tensor, tap_b: Tensor) -> Tensor:
        h, w = tap_a.shape[2:]
        deep = T.bilinear_resize(self.aspp(tap_b), h, w)
        x = T.concat([deep, self.skip(tap_a)], axis=1)
        return self.head(self.fuse2(self.fuse1(x)))


class Compression(Module):
    """Channel compression of the correlation volume into a (0, 1) gate."""

    def __init__(self, n: int, hidden: int, rng, dtype):
        self.reduce = Conv2d(n, hidden, 1, rng, dtype=dtype)
        self.out = Conv2d(hidden, 1, 1, rng, dtype=dtype)
        self.out.bias.data[:] = 2.0

    def forward(self, volume: Tensor) -> Tensor:
        return T.sigmoid(self.out(T.relu(self.reduce(volume))))


# ---------------------------------------------------------------------------
# weighting functions
# ---------------------------------------------------------------------------

def confidence_map(logits: Tensor) -> Tensor:
    """Per-pixel peak of the class softmax, shape B x 1 x h x w."""
    peak = T.max_along(T.softmax(logits, axis=1), axis=1)
    b, h, w = peak.shape
    return T.reshape(peak, (b, 1, h, w))


def _resize_to(gate: Tensor, like: Tensor) -> Tensor:
    return T.bilinear_resize(gate, like.shape[2], like.shape[3])


def confidence_weighted_fusion(f_color: Tensor, f_thermal: Tensor,
                               c_color: Tensor, c_thermal: Tensor) -> Tensor:
    """Gate each modality's features by its confidence, then stack color first."""
    if f_color.shape[2:] != f_thermal.shape[2:]:
        raise ValueError("color and thermal taps differ in spatial size")
    c_color = _resize_to(c_color, f_color)
    c_thermal = _resize_to(c_thermal, f_thermal)
    return T.concat([f_color * c_color, f_thermal * c_thermal], axis=1)


def correlation_volume(y_color: Tensor, y_thermal: Tensor) -> Tensor:
    """ReLU'd, L2-normalised match volume, shape B x N x h x w.

    Channel ``i`` holds the match of thermal position ``i`` against every
    colour position; normalisation runs over the channel axis.
    """
    if y_color.shape != y_thermal.shape:
        raise ValueError(f"prediction shapes differ: {y_color.shape} vs {y_thermal.shape}")
    b, k, h, w = y_color.shape
    n = h * w
    flat_c = T.reshape(y_color, (b, k, n))
    flat_t = T.reshape(y_thermal, (b, k, n))
    scores = T.matmul(T.transpose(flat_t, (0, 2, 1)), flat_c)
    volume = T.reshape(T.relu(scores), (b, n, h, w))
    return T.l2_normalize(volume, axis=1)


def correlation_reweight(features: Tensor, gate: Tensor) -> Tensor:
    return features * _resize_to(gate, features)


def upsample_logits(logits: Tensor, h: int, w: int) -> Tensor:
    return T.bilinear_resize(logits, h, w)


# ---------------------------------------------------------------------------
# the network
# ---------------------------------------------------------------------------

class DooDLeNet(Module):
    """All six variants; which sub-networks exist depends on ``config.variant``.

    Sub-networks are created in a fixed order (colour encoder, thermal
    encoder, colour decoder, thermal decoder, shared decoder, compression),
    so variants built from the same seed share identical values for the
    parameters they have in common.
    """

    def __init__(self, config: ModelConfig):
        self.config = config
        cfg = config
        rng = np.random.default_rng(cfg.seed)
        wa, wb = cfg.widths[1], cfg.widths[3]
        if cfg.variant in ("rgb", "stacked", "thermal"):
            path = {"rgb": "color", "thermal": "thermal", "stacked": "stacked"}[cfg.variant]
            self.path = path
            setattr(self, f"enc_{path}", Encoder(_IN_CHANNELS[path], cfg, rng))
            setattr(self, f"dec_{path}", Decoder(wa, wb, cfg, rng))
        else:
            self.path = None
            self.enc_color = Encoder(3, cfg, rng)
            self.enc_thermal = Encoder(1, cfg, rng)
            self.dec_color = Decoder(wa, wb, cfg, rng)
            self.dec_thermal = Decoder(wa, wb, cfg, rng)
            self.shared = Decoder(2 * wa, 2 * wb, cfg, rng)
            if cfg.variant == "full":
                h, w = cfg.corr_size
                self.compression = Compression(h * w, cfg.compression_width, rng, cfg.np_dtype)

    @property
    def variant(self) -> str:
        return self.config.variant

    def encode(self, image: Tensor, path: str) -> tuple[Tensor, Tensor]:
        return getattr(self, f"enc_{path}")(image)

    def decode(self, tap_a: Tensor, tap_b: Tensor, path: str) -> Tensor:
        return getattr(self, f"dec_{path}")(tap_a, tap_b)

    def correlation_map(self, y_color: Tensor, y_thermal: Tensor) -> Tensor:
        if y_color.shape[2:] != self.config.corr_size:
            raise ValueError(
                f"correlation expects {self.config.corr_size} predictions, got {y_color.shape[2:]}")
        if self.config.softmax_correlation:
            y_color, y_thermal = T.softmax(y_color, 1), T.softmax(y_thermal, 1)
        return self.compression(correlation_volume(y_color, y_thermal))

    def _as_input(self, x) -> Tensor:
        if isinstance(x, Tensor):
            return x
        return Tensor(np.asarray(x, dtype=self.config.np_dtype))

    def forward(self, color, thermal, unit_gates: bool = False,
                keep_taps: bool = False) -> ForwardOutput:
        """Run the configured variant.

        ``unit_gates`` replaces every confidence and correlation gate by ones
        (the unweighted limit). ``keep_taps`` stores the encoder taps.
        """
        cfg = self.config
        H, W = cfg.height, cfg.width
        if self.path is not None:
            if self.path == "color":
                image = self._as_input(color)
            elif self.path == "thermal":
                image = self._as_input(thermal)
            else:
                image = T.concat([self._as_input(color), self._as_input(thermal)], axis=1)
            tap_a, tap_b = self.encode(image, self.path)
            y = self.decode(tap_a, tap_b, self.path)
            taps = {(self.path, "a"): tap_a, (self.path, "b"): tap_b} if keep_taps else {}
            out = ForwardOutput(upsample_logits(y, H, W), taps=taps)
            if self.path == "color":
                out.y_color = y
            elif self.path == "thermal":
                out.y_thermal = y
            return out

        color, thermal = self._as_input(color), self._as_input(thermal)
        ca, cb = self.encode(color, "color")
        ta, tb = self.encode(thermal, "thermal")
        y_c = self.decode(ca, cb, "color")
        y_t = self.decode(ta, tb, "thermal")
        out = ForwardOutput(y_final=None, y_color=y_c, y_thermal=y_t)
        if keep_taps:
            out.taps = {("color", "a"): ca, ("color", "b"): cb,
                        ("thermal", "a"): ta, ("thermal", "b"): tb}

        if cfg.variant == "unweighted":
            fa = T.concat([ca, ta], axis=1)
            fb = T.concat([cb, tb], axis=1)
        else:
            c_c, c_t = confidence_map(y_c), confidence_map(y_t)
            out.conf_color, out.conf_thermal = c_c, c_t
            if unit_gates:
                c_c = Tensor(np.ones(c_c.shape, dtype=c_c.dtype))
                c_t = Tensor(np.ones(c_t.shape, dtype=c_t.dtype))
            fa = confidence_weighted_fusion(ca, ta, c_c, c_t)
            fb = confidence_weighted_fusion(cb, tb, c_c, c_t)
            if cfg.variant == "full":
                m = self.correlation_map(y_c, y_t)
                out.corr = m
                if unit_gates:
                    m = Tensor(np.ones(m.shape, dtype=m.dtype))
                fa = correlation_reweight(fa, m)
                fb = correlation_reweight(fb, m)
        out.y_final = upsample_logits(self.shared(fa, fb), H, W)
        return out


def segmentation_loss(out: ForwardOutput, labels: np.ndarray, aux_weight: float,
                      variant: str) -> tuple[Tensor, dict]:
    """Final cross entropy plus weighted auxiliary terms for fusion variants."""
    h, w = labels.shape[-2:]
    main = T.cross_entropy(out.y_final, labels)
    terms = {"final": main}
    total = main
    if variant in FUSION_VARIANTS and aux_weight > 0:
        aux_c = T.cross_entropy(upsample_logits(out.y_color, h, w), labels)
        aux_t = T.cross_entropy(upsample_logits(out.y_thermal, h, w), labels)
        terms["aux_color"] = aux_c
        terms["aux_thermal"] = aux_t
        total = total + (aux_c + aux_t) * aux_weight
    return total, terms
