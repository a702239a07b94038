"""RetSeg network: PB/EBE encoder, retention bottleneck, bilinear decoder.

Parameters are a flat, ordered ``name -> Tensor`` map. Forward functions are
pure in ``(params, config, image)``; randomness enters only through the
dropout generator in training mode.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields, replace
from typing import Iterator, Mapping

import numpy as np

from .errors import ConfigError, ShapeError
from .retention import (
    PatchEmbedding,
    RetentionBlockParams,
    RetentionHeadParams,
    embed,
    head_gamma,
    patchify,
    retention_block,
    theta_frequencies,
    unpatchify,
)
from .tensor import (
    Tensor,
    bilinear_upsample_x2,
    concat,
    conv2d,
    dropout,
    layer_norm,
    matmul,
    relu,
    sigmoid,
)

GROUPS = 4
LN_EPS = 1e-5


@dataclass(frozen=True)
class RetSegConfig:
    input_channels: int = 3
    image_size: int = 224
    stages: int = 4
    stage_channels: tuple[int, ...] = (32, 64, 128, 256)
    patch_size: int = 1
    d_model: int = 256
    retention_blocks: int = 2
    heads: int = 4
    dropout_rate: float = 0.1
    feedforward_expansion: int = 4
    embed_bias: bool = True

    def __post_init__(self):
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in self.stage_channels))
        self.validate()

    def validate(self) -> None:
        bad = []
        if self.input_channels < 1:
            bad.append(f"input_channels must be >= 1 (got {self.input_channels})")
        if self.stages < 1:
            bad.append(f"stages must be >= 1 (got {self.stages})")
        elif self.image_size % (2 ** self.stages):
            bad.append(f"image_size mod 2^stages == 0 violated ({self.image_size} mod {2 ** self.stages})")
        if len(self.stage_channels) != self.stages:
            bad.append(f"stage_channels has {len(self.stage_channels)} entries for {self.stages} stages")
        for c in self.stage_channels:
            if c < GROUPS or c % GROUPS:
                bad.append(f"stage channel {c} must be a positive multiple of the group count {GROUPS}")
        if self.heads < 1 or self.d_model % self.heads:
            bad.append(f"d_model mod heads == 0 violated ({self.d_model} mod {self.heads})")
        elif (self.d_model // self.heads) % 4:
            bad.append(f"(d_model/heads) mod 4 == 0 violated (head dim {self.d_model // self.heads})")
        if self.patch_size < 1:
            bad.append(f"patch_size must be >= 1 (got {self.patch_size})")
        elif self.stages >= 1 and (self.image_size // 2 ** self.stages) % self.patch_size:
            bad.append(
                f"patch_size {self.patch_size} must divide the bottleneck size {self.image_size // 2 ** self.stages}"
            )
        if self.retention_blocks < 0:
            bad.append("retention_blocks must be >= 0")
        if not 0.0 <= self.dropout_rate < 1.0:
            bad.append(f"dropout_rate must be in [0, 1) (got {self.dropout_rate})")
        if self.feedforward_expansion < 0:
            bad.append("feedforward_expansion must be >= 0 (0 disables the feedforward)")
        if bad:
            raise ConfigError("invalid RetSegConfig: " + "; ".join(bad))

    @property
    def bottleneck_size(self) -> int:
        return self.image_size // 2 ** self.stages

    @property
    def head_dim(self) -> int:
        return self.d_model // self.heads

    def decoder_channels(self) -> list[tuple[int, int, int]]:
        """``(in, skip, out)`` channels per decoder stage, deepest first."""
        out = []
        cin = self.stage_channels[-1]
        for k in range(self.stages):
            if k < self.stages - 1:
                skip = cout = self.stage_channels[self.stages - 2 - k]
            else:
                skip, cout = 0, max(self.stage_channels[0] // 2, 1)
            out.append((cin, skip, cout))
            cin = cout
        return out

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(c) for c in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            else:
                v = repr(v) if isinstance(v, float) else str(v)
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "RetSegConfig":
        kv = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"expected key=value, got {raw!r}", lineno)
            k, v = (s.strip() for s in line.split("=", 1))
            kv[k] = (v, lineno)
        return cls.from_mapping(kv)

    @classmethod
    def from_mapping(cls, kv: Mapping[str, tuple[str, int | None]]) -> "RetSegConfig":
        types = {f.name: f.type for f in fields(cls)}
        args = {}
        for k, (v, lineno) in kv.items():
            if k not in types:
                raise ConfigError(f"unknown model config key {k!r}", lineno)
            args[k] = _parse_value(k, v, _DEFAULTS[k], lineno)
        return cls(**args)

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:12]

    def with_image_size(self, size: int) -> "RetSegConfig":
        return replace(self, image_size=size)


_DEFAULTS = {f.name: f.default for f in fields(RetSegConfig)}


def _parse_value(key, raw, default, lineno):
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0"):
                raise ValueError(raw)
            return low in ("true", "1")
        if isinstance(default, tuple):
            return tuple(int(c) for c in raw.split(",") if c.strip())
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}", lineno) from None


def tiny_config(image_size: int = 16, **overrides) -> RetSegConfig:
    """Desk-scale configuration used by tests and demos."""
    base = dict(
        image_size=image_size,
        stages=2,
        stage_channels=(4, 8),
        d_model=8,
        heads=2,
        retention_blocks=1,
        dropout_rate=0.0,
    )
    base.update(overrides)
    return RetSegConfig(**base)


# ---------------------------------------------------------------- parameters


class RetSegParams(dict):
    """Ordered ``name -> Tensor`` map; insertion order is the canonical order."""

    def sub(self, prefix: str) -> dict[str, Tensor]:
        n = len(prefix) + 1
        return {k[n:]: v for k, v in self.items() if k.startswith(prefix + ".")}

    def count(self) -> int:
        return sum(t.data.size for t in self.values())

    def copy(self) -> "RetSegParams":
        return RetSegParams((k, Tensor(v.data.copy(), requires_grad=v.requires_grad, name=k)) for k, v in self.items())


@dataclass
class _Spec:
    shape: tuple[int, ...]
    init: str  # kaiming | zeros | ones
    fan_in: int = 0


def _pb_specs(prefix: str, cin: int, cout: int) -> Iterator[tuple[str, _Spec]]:
    yield f"{prefix}.dw.w", _Spec((cin, 1, 3, 3), "kaiming", 9)
    yield f"{prefix}.dw.b", _Spec((cin,), "zeros")
    yield f"{prefix}.ln.g", _Spec((cin,), "ones")
    yield f"{prefix}.ln.b", _Spec((cin,), "zeros")
    yield f"{prefix}.pw.w", _Spec((cout, cin, 1, 1), "kaiming", cin)
    yield f"{prefix}.pw.b", _Spec((cout,), "zeros")
    yield f"{prefix}.res.w", _Spec((cout, cin, 1, 1), "kaiming", cin)
    yield f"{prefix}.res.b", _Spec((cout,), "zeros")


def _param_specs(cfg: RetSegConfig) -> Iterator[tuple[str, _Spec]]:
    cin = cfg.input_channels
    for s, cout in enumerate(cfg.stage_channels):
        yield from _pb_specs(f"enc.{s}.pb1", cin, cout)
        g_in = cout // GROUPS
        yield f"enc.{s}.gconv.w", _Spec((cout, g_in, 3, 3), "kaiming", g_in * 9)
        yield f"enc.{s}.gconv.b", _Spec((cout,), "zeros")
        yield f"enc.{s}.gln.g", _Spec((cout,), "ones")
        yield f"enc.{s}.gln.b", _Spec((cout,), "zeros")
        yield from _pb_specs(f"enc.{s}.pb2", cout, cout)
        cin = cout
    P, C, D = cfg.patch_size, cfg.stage_channels[-1], cfg.d_model
    F = P * P * C
    yield "bott.embed.E", _Spec((F, D), "kaiming", F)
    if cfg.embed_bias:
        yield "bott.embed.b", _Spec((D,), "zeros")
    dh = cfg.head_dim
    hidden = cfg.feedforward_expansion * D
    for k in range(cfg.retention_blocks):
        p = f"bott.block.{k}"
        yield f"{p}.ln1.g", _Spec((D,), "ones")
        yield f"{p}.ln1.b", _Spec((D,), "zeros")
        for h in range(cfg.heads):
            for w in ("wq", "wk", "wv"):
                yield f"{p}.head.{h}.{w}", _Spec((D, dh), "kaiming", D)
        yield f"{p}.wout", _Spec((D, D), "zeros")
        yield f"{p}.outln.g", _Spec((D,), "ones")
        yield f"{p}.outln.b", _Spec((D,), "zeros")
        if hidden:
            yield f"{p}.ln2.g", _Spec((D,), "ones")
            yield f"{p}.ln2.b", _Spec((D,), "zeros")
            yield f"{p}.ff1.w", _Spec((D, hidden), "kaiming", D)
            yield f"{p}.ff1.b", _Spec((hidden,), "zeros")
            yield f"{p}.ff2.w", _Spec((hidden, D), "zeros")
            yield f"{p}.ff2.b", _Spec((D,), "zeros")
    yield "bott.proj.w", _Spec((D, F), "kaiming", D)
    yield "bott.proj.b", _Spec((F,), "zeros")
    for k, (ci, cs, co) in enumerate(cfg.decoder_channels()):
        yield f"dec.{k}.conv1.w", _Spec((co, ci + cs, 3, 3), "kaiming", (ci + cs) * 9)
        yield f"dec.{k}.conv1.b", _Spec((co,), "zeros")
        yield f"dec.{k}.ln.g", _Spec((co,), "ones")
        yield f"dec.{k}.ln.b", _Spec((co,), "zeros")
        yield f"dec.{k}.conv2.w", _Spec((co, co, 3, 3), "kaiming", co * 9)
        yield f"dec.{k}.conv2.b", _Spec((co,), "zeros")
    last = cfg.decoder_channels()[-1][2]
    yield "head.w", _Spec((1, last, 1, 1), "kaiming", last)
    yield "head.b", _Spec((1,), "zeros")


def param_shapes(cfg: RetSegConfig) -> dict[str, tuple[int, ...]]:
    return {name: spec.shape for name, spec in _param_specs(cfg)}


def init_params(cfg: RetSegConfig, seed: int) -> RetSegParams:
    """Kaiming-uniform weights (bound sqrt(6/fan_in)), unit norm gains, zero biases.

    Retention output projections and the second feedforward layer start at
    zero so each retention block is the identity at initialisation.
    """
    cfg.validate()
    rng = np.random.default_rng(seed)
    params = RetSegParams()
    for name, spec in _param_specs(cfg):
        if spec.init == "kaiming":
            bound = np.sqrt(6.0 / spec.fan_in)
            data = rng.uniform(-bound, bound, size=spec.shape)
        elif spec.init == "ones":
            data = np.ones(spec.shape)
        else:
            data = np.zeros(spec.shape)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return params


def param_count(cfg: RetSegConfig) -> int:
    """Closed-form parameter count.

    PB(cin->cout):   dw 9cin + cin, ln 2cin, pw cin*cout + cout, res cin*cout + cout
    EBE(cin->cout):  PB(cin->cout) + gconv 9cout^2/4 + cout + ln 2cout + PB(cout->cout)
    bottleneck:      E F*D (+D bias), proj D*F + F, with F = P^2 C
    retention block: 2 ln 2D, heads 3D^2, W_out D^2, [ln2 2D, ff 2eD^2 + eD + D]
    decoder k:       9co(ci+cs) + co + 2co + 9co^2 + co
    head:            last + 1
    """

    def pb(ci, co):
        return 12 * ci + 2 * ci * co + 2 * co

    total, cin = 0, cfg.input_channels
    for co in cfg.stage_channels:
        total += pb(cin, co) + 9 * co * co // GROUPS + 3 * co + pb(co, co)
        cin = co
    D = cfg.d_model
    F = cfg.patch_size ** 2 * cfg.stage_channels[-1]
    total += F * D + (D if cfg.embed_bias else 0) + D * F + F
    e = cfg.feedforward_expansion
    per_block = 2 * D + 3 * D * D + D * D + 2 * D
    if e:
        per_block += 2 * D + 2 * e * D * D + e * D + D
    total += cfg.retention_blocks * per_block
    for ci, cs, co in cfg.decoder_channels():
        total += 9 * co * (ci + cs) + co + 2 * co + 9 * co * co + co
    last = cfg.decoder_channels()[-1][2]
    return total + last + 1


# ---------------------------------------------------------------- forward


def pb_forward(x: Tensor, p: Mapping[str, Tensor], stride: int) -> Tensor:
    """Depthwise 3x3 -> LN -> relu -> pointwise 1x1 -> relu, plus a 1x1 projected residual."""
    if stride not in (1, 2):
        raise ShapeError(f"pb_forward: stride must be 1 or 2, got {stride}")
    c = x.shape[1]
    if p["dw.w"].shape[0] != c:
        raise ShapeError(f"pb_forward: input channels (dim 1) = {c}, block expects {p['dw.w'].shape[0]}")
    h = conv2d(x, p["dw.w"], p["dw.b"], stride=stride, padding=1, groups=c)
    h = relu(layer_norm(h, p["ln.g"], p["ln.b"], LN_EPS))
    h = relu(conv2d(h, p["pw.w"], p["pw.b"]))
    return h + conv2d(x, p["res.w"], p["res.b"], stride=stride)


def ebe_forward(x: Tensor, p: Mapping[str, Tensor]) -> Tensor:
    """PB(stride 2) -> grouped 3x3 conv -> LN -> relu -> PB, fused with the first PB output."""
    cout = p["gconv.w"].shape[0]
    if cout % GROUPS:
        raise ShapeError(f"ebe_forward: channels {cout} not divisible by group count {GROUPS}")
    sub = lambda pre: {k[len(pre) + 1:]: v for k, v in p.items() if k.startswith(pre + ".")}
    first = pb_forward(x, sub("pb1"), stride=2)
    h = conv2d(first, p["gconv.w"], p["gconv.b"], padding=1, groups=GROUPS)
    h = relu(layer_norm(h, p["gln.g"], p["gln.b"], LN_EPS))
    return pb_forward(h, sub("pb2"), stride=1) + first


def encoder_forward(
    image: Tensor, params: RetSegParams, cfg: RetSegConfig, training: bool = False, rng=None
) -> tuple[Tensor, list[Tensor]]:
    _check_image(image, cfg)
    skips = []
    x = image
    for s in range(cfg.stages):
        x = ebe_forward(x, params.sub(f"enc.{s}"))
        skips.append(x)
        if s < cfg.stages - 1:
            x = dropout(x, cfg.dropout_rate, rng, training)
    return x, skips


def bottleneck_forward(feat: Tensor, params: RetSegParams, cfg: RetSegConfig) -> Tensor:
    """Patchify -> embed -> retention blocks -> per-token projection -> reassemble."""
    B, C, h, w = feat.shape
    P = cfg.patch_size
    if h % P or w % P:
        raise ShapeError(f"bottleneck_forward: patch size {P} does not divide {h}x{w}")
    grid = (h // P, w // P)
    patches, coords = patchify(feat, P)
    emb = PatchEmbedding(params["bott.embed.E"], P, params.get("bott.embed.b"))
    x = embed(patches, emb)
    for k in range(cfg.retention_blocks):
        x = retention_block(x, block_params(params, cfg, k), coords, grid)
    tokens = matmul(x, params["bott.proj.w"]) + params["bott.proj.b"]
    return unpatchify(tokens, P, C, grid)


def block_params(params: RetSegParams, cfg: RetSegConfig, k: int) -> RetentionBlockParams:
    p = params.sub(f"bott.block.{k}")
    freqs = theta_frequencies(cfg.head_dim)
    heads = [
        RetentionHeadParams(p[f"head.{h}.wq"], p[f"head.{h}.wk"], p[f"head.{h}.wv"], head_gamma(h), freqs)
        for h in range(cfg.heads)
    ]
    return RetentionBlockParams(
        ln1_gain=p["ln1.g"],
        ln1_bias=p["ln1.b"],
        heads=heads,
        w_out=p["wout"],
        out_gain=p["outln.g"],
        out_bias=p["outln.b"],
        ln2_gain=p.get("ln2.g"),
        ln2_bias=p.get("ln2.b"),
        ff1_w=p.get("ff1.w"),
        ff1_b=p.get("ff1.b"),
        ff2_w=p.get("ff2.w"),
        ff2_b=p.get("ff2.b"),
    )


def decoder_bottleneck_forward(x: Tensor, skip: Tensor | None, p: Mapping[str, Tensor]) -> Tensor:
    """Upsample x2 -> concat skip -> conv3x3 -> LN -> relu -> conv3x3 -> relu."""
    up = bilinear_upsample_x2(x)
    if skip is not None:
        if skip.shape[2:] != up.shape[2:]:
            raise ShapeError(f"decoder: upsampled {up.shape[2:]} does not match skip spatial dims {skip.shape[2:]}")
        up = concat([up, skip], axis=1)
    h = conv2d(up, p["conv1.w"], p["conv1.b"], padding=1)
    h = relu(layer_norm(h, p["ln.g"], p["ln.b"], LN_EPS))
    return relu(conv2d(h, p["conv2.w"], p["conv2.b"], padding=1))


def retseg_forward(
    image: Tensor, params: RetSegParams, cfg: RetSegConfig, training: bool = False, rng=None
) -> Tensor:
    """``[B, C, S, S]`` image -> ``[B, 1, S, S]`` foreground probabilities."""
    x, skips = encoder_forward(image, params, cfg, training, rng)
    x = bottleneck_forward(x, params, cfg)
    for k in range(cfg.stages):
        skip = skips[cfg.stages - 2 - k] if k < cfg.stages - 1 else None
        x = decoder_bottleneck_forward(x, skip, params.sub(f"dec.{k}"))
    return sigmoid(conv2d(x, params["head.w"], params["head.b"]))


def _check_image(image: Tensor, cfg: RetSegConfig) -> None:
    if image.ndim != 4:
        raise ShapeError(f"image must be [B,C,H,W], got shape {image.shape}")
    if image.shape[1] != cfg.input_channels:
        raise ShapeError(f"image channels (dim 1) = {image.shape[1]}, config expects {cfg.input_channels}")
    if image.shape[2] != cfg.image_size or image.shape[3] != cfg.image_size:
        raise ShapeError(
            f"image spatial size {image.shape[2]}x{image.shape[3]} != configured image_size {cfg.image_size}"
        )


@dataclass
class RetSegModel:
    config: RetSegConfig
    params: RetSegParams = field(repr=False)

    @classmethod
    def create(cls, config: RetSegConfig, seed: int = 0) -> "RetSegModel":
        return cls(config, init_params(config, seed))

    def __call__(self, images, training: bool = False, rng=None) -> Tensor:
        return retseg_forward(images if isinstance(images, Tensor) else Tensor(images), self.params, self.config, training, rng)

    def predict(self, images) -> np.ndarray:
        return self(images).data

    def at_size(self, size: int) -> "RetSegModel":
        """Same weights at another input resolution (weights are size-independent)."""
        return RetSegModel(self.config.with_image_size(size), self.params)
