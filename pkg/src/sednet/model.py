"""SEDNet: a shallow encoder-decoder with selective skip paths.

Layout for the default 128x128x1 input::

    enc1 (2x conv3x3 -> 32)  ──────────────────────────────┐ skip
    pool 3x3/2                                             │
    enc2 (2x conv3x3 -> 64)  ─────────────────────┐ skip   │
    pool 3x3/2                                    │        │
    enc3 (2x conv3x3 -> 128)                      │        │
    bottleneck (2x conv3x3 -> 256)                │        │
    up1: upsample2x, conv2x2 256->128, concat  <──┘        │
    dec1 (2x conv3x3 -> 64)                                │
    up2: upsample2x, conv2x2 64->32, concat    <───────────┘
    dec2 (2x conv3x3 -> 32)
    head: conv1x1 -> 3, sigmoid
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Parameter, ShapeError, Tensor

HEAD = "head"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    input_height: int = 128
    input_width: int = 128
    input_channels: int = 1
    output_channels: int = 3
    base_filters: int = 32
    encoder_depths: tuple[int, ...] | None = None
    bottleneck_depth: int | None = None
    decoder_depths: tuple[int, ...] | None = None
    pool_window: int = 3
    pool_stride: int = 2
    seed: int = 0

    def __post_init__(self):
        b = self.base_filters
        if self.encoder_depths is None:
            object.__setattr__(self, "encoder_depths", (b, 2 * b, 4 * b))
        if self.bottleneck_depth is None:
            object.__setattr__(self, "bottleneck_depth", 2 * self.encoder_depths[-1])
        if self.decoder_depths is None:
            object.__setattr__(self, "decoder_depths", (self.encoder_depths[1], self.encoder_depths[0]))
        object.__setattr__(self, "encoder_depths", tuple(self.encoder_depths))
        object.__setattr__(self, "decoder_depths", tuple(self.decoder_depths))
        self.validate()

    def validate(self) -> None:
        if self.input_height % 4 or self.input_width % 4:
            raise ConfigError(
                f"input size {self.input_height}x{self.input_width} must be divisible by 4"
            )
        if min(self.input_height, self.input_width, self.input_channels, self.output_channels) < 1:
            raise ConfigError("sizes and channel counts must be positive")
        enc = self.encoder_depths
        if len(enc) != 3 or any(d < 1 for d in enc):
            raise ConfigError(f"need three positive encoder depths, got {enc}")
        if any(b <= a for a, b in zip(enc, enc[1:])):
            raise ConfigError(f"encoder depths must strictly increase, got {enc}")
        if self.bottleneck_depth != 2 * enc[-1]:
            raise ConfigError(
                f"bottleneck depth {self.bottleneck_depth} must be twice the last encoder depth {enc[-1]}"
            )
        if len(self.decoder_depths) != 2 or any(d < 1 for d in self.decoder_depths):
            raise ConfigError(f"need two positive decoder depths, got {self.decoder_depths}")
        if self.bottleneck_depth < 2 or self.decoder_depths[0] < 2:
            raise ConfigError("up-convolutions halve channel depth; depths must be >= 2")
        if self.pool_window < 1 or self.pool_stride < 1:
            raise ConfigError("pool window and stride must be >= 1")
        h = self.input_height
        for _ in range(2):
            h = _pool_extent(h, self.pool_window, self.pool_stride)
        if h * 4 != self.input_height:
            raise ConfigError(
                f"pool window {self.pool_window}/stride {self.pool_stride} does not quarter "
                f"{self.input_height}"
            )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_depths"] = list(self.encoder_depths)
        d["decoder_depths"] = list(self.decoder_depths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        for k in ("encoder_depths", "decoder_depths"):
            if d.get(k) is not None:
                d[k] = tuple(d[k])
        return cls(**d)

    def fingerprint(self) -> str:
        """Hash of everything that determines parameter shapes (the seed is excluded)."""
        d = self.to_dict()
        d.pop("seed")
        blob = json.dumps(d, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _pool_pad(window: int) -> int:
    return (window - 1) // 2


def _pool_extent(n: int, window: int, stride: int) -> int:
    return (n + 2 * _pool_pad(window) - window) // stride + 1


@dataclass
class LayerSpec:
    name: str
    kind: str
    output_shape: tuple[int, int, int]
    params: int = 0
    inputs: tuple[str, ...] = ()


@dataclass
class Model:
    config: ModelConfig
    params: dict[str, Parameter]
    layers: list[LayerSpec] = field(default_factory=list)

    def parameters(self) -> Iterator[Parameter]:
        return iter(self.params.values())

    def trainable(self) -> list[Parameter]:
        return [p for p in self.params.values() if p.trainable]

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def astype(self, dtype) -> "Model":
        params = {
            k: Parameter(p.data.astype(dtype), trainable=p.trainable, name=k)
            for k, p in self.params.items()
        }
        return Model(self.config, params, list(self.layers))

    def skip_sources(self) -> list[str]:
        concat = [l for l in self.layers if l.kind == "concat"]
        return [l.inputs[1] for l in concat]

    def summary(self) -> str:
        rows = [f"{'layer':<20}{'kind':<12}{'output shape':<18}{'params':>10}"]
        rows.append("-" * 60)
        for l in self.layers:
            shape = "x".join(str(s) for s in l.output_shape)
            rows.append(f"{l.name:<20}{l.kind:<12}{shape:<18}{l.params:>10,}")
        rows.append("-" * 60)
        rows.append(f"{'total parameters':<50}{param_count(self):>10,}")
        rows.append(f"{'trainable':<50}{trainable_count(self):>10,}")
        return "\n".join(rows)

    def __call__(self, batch, capture: dict | None = None) -> Tensor:
        return forward(self, batch, capture)


def _he_uniform(rng: np.random.Generator, shape, dtype) -> np.ndarray:
    fan_in = shape[0] * shape[1] * shape[2]
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def _conv_blocks(cfg: ModelConfig):
    """(name, kernel, cin, cout) for every convolution, in forward order."""
    e1, e2, e3 = cfg.encoder_depths
    bn = cfg.bottleneck_depth
    d1, d2 = cfg.decoder_depths
    u1 = bn // 2
    u2 = d1 // 2
    return [
        ("enc1.conv1", 3, cfg.input_channels, e1), ("enc1.conv2", 3, e1, e1),
        ("enc2.conv1", 3, e1, e2), ("enc2.conv2", 3, e2, e2),
        ("enc3.conv1", 3, e2, e3), ("enc3.conv2", 3, e3, e3),
        ("bottleneck.conv1", 3, e3, bn), ("bottleneck.conv2", 3, bn, bn),
        ("up1.conv", 2, bn, u1),
        ("dec1.conv1", 3, u1 + e2, d1), ("dec1.conv2", 3, d1, d1),
        ("up2.conv", 2, d1, u2),
        ("dec2.conv1", 3, u2 + e1, d2), ("dec2.conv2", 3, d2, d2),
        (HEAD, 1, d2, cfg.output_channels),
    ]


def build(config: ModelConfig | None = None, dtype=np.float32) -> Model:
    cfg = config or ModelConfig()
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    params: dict[str, Parameter] = {}
    for name, k, cin, cout in _conv_blocks(cfg):
        shape = (k, k, cin, cout)
        params[f"{name}.weight"] = Parameter(_he_uniform(rng, shape, dtype), name=f"{name}.weight")
        params[f"{name}.bias"] = Parameter(np.zeros(cout, dtype=dtype), name=f"{name}.bias")
    model = Model(cfg, params)
    model.layers = _describe(model)
    return model


def _describe(model: Model) -> list[LayerSpec]:
    cfg = model.config
    h, w = cfg.input_height, cfg.input_width
    ph, pw = (_pool_extent(h, cfg.pool_window, cfg.pool_stride),
              _pool_extent(w, cfg.pool_window, cfg.pool_stride))
    qh, qw = (_pool_extent(ph, cfg.pool_window, cfg.pool_stride),
              _pool_extent(pw, cfg.pool_window, cfg.pool_stride))

    def n(name):
        return model.params[f"{name}.weight"].size + model.params[f"{name}.bias"].size

    convs = {name: cout for name, _, _, cout in _conv_blocks(cfg)}
    out: list[LayerSpec] = [LayerSpec("input", "input", (h, w, cfg.input_channels))]

    def conv(name, size, src):
        out.append(LayerSpec(name, "conv", (*size, convs[name]), n(name), (src,)))
        return name

    def block(prefix, size, src):
        return conv(f"{prefix}.conv2", size, conv(f"{prefix}.conv1", size, src))

    s = block("enc1", (h, w), "input")
    out.append(LayerSpec("pool1", "maxpool", (ph, pw, convs["enc1.conv2"]), 0, (s,)))
    s = block("enc2", (ph, pw), "pool1")
    out.append(LayerSpec("pool2", "maxpool", (qh, qw, convs["enc2.conv2"]), 0, (s,)))
    s = block("enc3", (qh, qw), "pool2")
    s = block("bottleneck", (qh, qw), s)
    out.append(LayerSpec("up1.upsample", "upsample", (ph, pw, convs["bottleneck.conv2"]), 0, (s,)))
    s = conv("up1.conv", (ph, pw), "up1.upsample")
    out.append(LayerSpec("up1.concat", "concat",
                         (ph, pw, convs["up1.conv"] + convs["enc2.conv2"]), 0, (s, "enc2.conv2")))
    s = block("dec1", (ph, pw), "up1.concat")
    out.append(LayerSpec("up2.upsample", "upsample", (h, w, convs["dec1.conv2"]), 0, (s,)))
    s = conv("up2.conv", (h, w), "up2.upsample")
    out.append(LayerSpec("up2.concat", "concat",
                         (h, w, convs["up2.conv"] + convs["enc1.conv2"]), 0, (s, "enc1.conv2")))
    s = block("dec2", (h, w), "up2.concat")
    conv(HEAD, (h, w), s)
    out.append(LayerSpec("output", "sigmoid", (h, w, cfg.output_channels), 0, (HEAD,)))
    return out


def forward(model: Model, batch, capture: dict | None = None) -> Tensor:
    """Per-pixel class probabilities, shape ``[B, H, W, output_channels]``.

    When ``capture`` is a dict, each named layer's activation is stored in it.
    """
    cfg = model.config
    x = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch, dtype=model.dtype))
    expected = (cfg.input_height, cfg.input_width, cfg.input_channels)
    if x.data.ndim != 4 or x.shape[1:] != expected:
        raise ShapeError(f"expected batch of shape [B, {expected[0]}, {expected[1]}, {expected[2]}], got {x.shape}")
    p = model.params
    pad = _pool_pad(cfg.pool_window)

    def conv(name, t, act=True):
        t = T.conv2d(t, p[f"{name}.weight"], p[f"{name}.bias"], padding="same")
        if act:
            t = T.relu(t)
        if capture is not None:
            capture[name] = t
        return t

    def block(prefix, t):
        return conv(f"{prefix}.conv2", conv(f"{prefix}.conv1", t))

    def pool(t):
        return T.maxpool2d(t, cfg.pool_window, cfg.pool_stride, padding=pad)

    s1 = block("enc1", x)
    s2 = block("enc2", pool(s1))
    t = block("enc3", pool(s2))
    t = block("bottleneck", t)
    t = conv("up1.conv", T.upsample2x(t))
    t = block("dec1", T.concat_channels(t, s2))
    t = conv("up2.conv", T.upsample2x(t))
    t = block("dec2", T.concat_channels(t, s1))
    out = T.sigmoid(conv(HEAD, t, act=False))
    if capture is not None:
        capture["output"] = out
    return out


def predict(model: Model, batch, chunk: int = 8) -> np.ndarray:
    """Inference without recording a tape, in chunks of ``chunk`` slices."""
    batch = np.asarray(batch, dtype=model.dtype)
    outs = []
    with T.no_grad():
        for i in range(0, len(batch), chunk):
            outs.append(forward(model, batch[i:i + chunk]).data)
    return np.concatenate(outs, axis=0)


def param_count(model: Model) -> int:
    return int(sum(p.size for p in model.params.values()))


def trainable_count(model: Model) -> int:
    return int(sum(p.size for p in model.params.values() if p.trainable))


def freeze_for_transfer(model: Model) -> Model:
    """Freeze everything except the 1x1 output convolution, in place."""
    for name, p in model.params.items():
        p.trainable = name.startswith(HEAD + ".")
    return model


def unfreeze(model: Model) -> Model:
    for p in model.params.values():
        p.trainable = True
    return model
