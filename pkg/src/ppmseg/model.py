"""Encoder-decoder segmentation network with pyramid pooling in the deep skips.

Topology (default config, input 192x256)::

    enc1  1 conv   64ch 192x256 ──────────────────────────────┐ concat
    enc2  1 conv  128ch  96x128 ─────────────────────┐ concat  │
    enc3  2 conv  256ch  48x64  ── PPM ───────┐      │         │
    enc4  2 conv  512ch  24x32  ── PPM ──┐    │      │         │
    enc5  2 conv  512ch  12x16  ── PPM ─ up+dec1 ─ up+dec2 ─ up+dec3 ─ up+dec4 ─ 1x1 ─ sigmoid

Each encoder conv is 3x3/pad 1 followed by batch norm and ReLU, with a 2x2
max-pool between stages.  Each decoder step is a 2x2/stride 2 transposed
convolution, a channel concat with its skip, then a dilated 3x3 conv + BN +
ReLU.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError, ShapeError
from .layers import (
    BatchNormParams,
    Conv2dParams,
    adaptive_avg_pool2d,
    batch_norm2d,
    concat_channels,
    conv2d,
    conv_transpose2d,
    kaiming_uniform,
    max_pool2d,
    relu,
    sigmoid,
    upsample_bilinear,
)
from .tensor import Tensor, no_grad

VGG11_CONVS_PER_STAGE = (1, 1, 2, 2, 2)


@dataclass
class PPMConfig:
    bins: tuple[int, ...] = (1, 2, 3, 6)
    branch_channels: Optional[int] = None  # None -> input channels // 4
    fused: bool = True

    def validate(self) -> None:
        bins = list(self.bins)
        if not bins or any(b < 1 for b in bins) or any(a >= b for a, b in zip(bins, bins[1:])):
            raise ConfigError(f"ppm.bins must be strictly increasing and >= 1, got {bins}")
        if self.branch_channels is not None and self.branch_channels < 1:
            raise ConfigError("ppm.branch_channels must be >= 1")

    def branches_for(self, channels: int) -> int:
        return self.branch_channels if self.branch_channels is not None else max(1, channels // 4)

    def out_channels(self, channels: int) -> int:
        if self.fused:
            return channels
        return channels + len(self.bins) * self.branches_for(channels)


@dataclass
class ModelConfig:
    in_channels: int = 3
    input_size: tuple[int, int] = (192, 256)
    encoder_stage_channels: tuple[int, ...] = (64, 128, 256, 512, 512)
    decoder_channels: tuple[int, ...] = (256, 128, 64, 32)
    ppm: PPMConfig = field(default_factory=PPMConfig)
    decoder_dilation: int = 2
    seed: int = 0

    def validate(self) -> None:
        h, w = self.input_size
        if h < 16 or w < 16 or h % 16 or w % 16:
            raise ConfigError(f"input_size {self.input_size} must be divisible by 16 (four pooling stages)")
        if len(self.encoder_stage_channels) != 5:
            raise ConfigError("encoder_stage_channels needs exactly 5 stages")
        if len(self.decoder_channels) != 4:
            raise ConfigError("decoder_channels needs exactly 4 steps (one per skip)")
        if self.in_channels < 1 or min(self.encoder_stage_channels) < 1 or min(self.decoder_channels) < 1:
            raise ConfigError("channel counts must be >= 1")
        if self.decoder_dilation < 1:
            raise ConfigError("decoder_dilation must be >= 1")
        self.ppm.validate()
        if max(self.ppm.bins) > min(h // 16, w // 16):
            raise ConfigError(f"largest PPM bin {max(self.ppm.bins)} exceeds bottleneck size {h // 16}x{w // 16}")


class Model:
    """Parameter container plus topology metadata; call it to run ``forward``."""

    def __init__(self, config: ModelConfig):
        self.config = config
        self.convs: dict[str, Conv2dParams] = {}
        self.bns: dict[str, BatchNormParams] = {}
        self.upconvs: dict[str, tuple[Tensor, Tensor]] = {}
        self.training = True
        self.epoch = 0

    def parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, c in self.convs.items():
            out[f"{name}.weight"] = c.weight
            out[f"{name}.bias"] = c.bias
        for name, (w, b) in self.upconvs.items():
            out[f"{name}.weight"] = w
            out[f"{name}.bias"] = b
        for name, bn in self.bns.items():
            out[f"{name}.gamma"] = bn.gamma
            out[f"{name}.beta"] = bn.beta
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {k: v.data for k, v in self.parameters().items()}
        for name, bn in self.bns.items():
            state[f"{name}.running_mean"] = bn.running_mean
            state[f"{name}.running_var"] = bn.running_var
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        expected = set(params) | {f"{n}.{s}" for n in self.bns for s in ("running_mean", "running_var")}
        unknown = sorted(set(state) - expected)
        if unknown:
            raise KeyError(f"unknown tensor names: {', '.join(unknown)}")
        missing = sorted(expected - set(state))
        if missing:
            raise KeyError(f"missing tensor names: {', '.join(missing)}")
        for name, arr in state.items():
            target = params[name].data if name in params else self._buffer(name)
            if target.shape != arr.shape:
                raise ValueError(f"tensor '{name}' has shape {arr.shape}, model expects {target.shape}")
        for name, arr in state.items():
            arr = np.asarray(arr, dtype=np.float32).copy()
            if name in params:
                params[name].data = arr
            else:
                bn_name, _, kind = name.rpartition(".")
                setattr(self.bns[bn_name], kind, arr)

    def _buffer(self, name: str) -> np.ndarray:
        bn_name, _, kind = name.rpartition(".")
        return getattr(self.bns[bn_name], kind)

    def train(self) -> "Model":
        self.training = True
        for bn in self.bns.values():
            bn.training = True
        return self

    def eval(self) -> "Model":
        self.training = False
        for bn in self.bns.values():
            bn.training = False
        return self

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None

    def __call__(self, x: Tensor) -> Tensor:
        return forward(self, x)


class _Builder:
    def __init__(self, model: Model, seed: int):
        self.m = model
        self.rng = np.random.default_rng(seed)

    def conv(self, name: str, c_in: int, c_out: int, k: int, padding: int = 0, dilation: int = 1) -> None:
        w = kaiming_uniform(self.rng, (c_out, c_in, k, k), fan_in=c_in * k * k)
        self.m.convs[name] = Conv2dParams(
            Tensor(w, requires_grad=True),
            Tensor(np.zeros(c_out, np.float32), requires_grad=True),
            stride=1,
            padding=padding,
            dilation=dilation,
        )

    def cbr(self, name: str, c_in: int, c_out: int, k: int, padding: int = 0, dilation: int = 1) -> None:
        self.conv(f"{name}.conv", c_in, c_out, k, padding, dilation)
        self.m.bns[f"{name}.bn"] = BatchNormParams.fresh(c_out)

    def upconv(self, name: str, c_in: int, c_out: int) -> None:
        # each output pixel of a 2x2/stride-2 transposed conv sees c_in inputs
        w = kaiming_uniform(self.rng, (c_in, c_out, 2, 2), fan_in=c_in)
        self.m.upconvs[name] = (Tensor(w, requires_grad=True), Tensor(np.zeros(c_out, np.float32), requires_grad=True))

    def ppm(self, name: str, channels: int, cfg: PPMConfig) -> int:
        bc = cfg.branches_for(channels)
        for b in cfg.bins:
            self.cbr(f"{name}.branch{b}", channels, bc, 1)
        cat = channels + len(cfg.bins) * bc
        if cfg.fused:
            self.cbr(f"{name}.fuse", cat, channels, 1)
            return channels
        return cat


def build_model(cfg: ModelConfig) -> Model:
    cfg.validate()
    m = Model(cfg)
    b = _Builder(m, cfg.seed)
    enc = cfg.encoder_stage_channels
    c_prev = cfg.in_channels
    for s, (n_convs, c) in enumerate(zip(VGG11_CONVS_PER_STAGE, enc), start=1):
        for i in range(n_convs):
            b.cbr(f"enc{s}.{i}", c_prev, c, 3, padding=1)
            c_prev = c
    c_up = b.ppm("ppm_bottleneck", enc[4], cfg.ppm)
    skip_channels = [b.ppm("ppm_skip4", enc[3], cfg.ppm), b.ppm("ppm_skip3", enc[2], cfg.ppm), enc[1], enc[0]]
    d = cfg.decoder_dilation
    for i, (c_dec, c_skip) in enumerate(zip(cfg.decoder_channels, skip_channels), start=1):
        b.upconv(f"dec{i}.up", c_up, c_dec)
        b.cbr(f"dec{i}", c_dec + c_skip, c_dec, 3, padding=d, dilation=d)
        c_up = c_dec
    b.conv("head", cfg.decoder_channels[-1], 1, 1)
    return m


def _cbr(m: Model, name: str, x: Tensor) -> Tensor:
    return relu(batch_norm2d(conv2d(x, m.convs[f"{name}.conv"]), m.bns[f"{name}.bn"]))


def check_input(m: Model, x: Tensor) -> None:
    cfg = m.config
    if x.data.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise ShapeError(f"expected input (n, {cfg.in_channels}, h, w), got {x.shape}")
    h, w = x.shape[2:]
    if h % 16 or w % 16:
        raise ShapeError(f"input spatial size {h}x{w} must be divisible by 16")
    if max(cfg.ppm.bins) > min(h // 16, w // 16):
        raise ShapeError(f"input {h}x{w} too small for PPM bin {max(cfg.ppm.bins)}")


def encoder_forward(m: Model, x: Tensor) -> list[Tensor]:
    """Return the four pre-pool skip features followed by the deepest map."""
    check_input(m, x)
    outs = []
    for s, n_convs in enumerate(VGG11_CONVS_PER_STAGE, start=1):
        if s > 1:
            x = max_pool2d(x)
        for i in range(n_convs):
            x = _cbr(m, f"enc{s}.{i}", x)
        outs.append(x)
    return outs


def ppm_forward(m: Model, x: Tensor, site: str) -> Tensor:
    cfg = m.config.ppm
    h, w = x.shape[2:]
    if max(cfg.bins) > min(h, w):
        raise ShapeError(f"PPM bin {max(cfg.bins)} larger than feature map {h}x{w}")
    parts = [x]
    for b in cfg.bins:
        y = _cbr(m, f"{site}.branch{b}", adaptive_avg_pool2d(x, (b, b)))
        parts.append(upsample_bilinear(y, (h, w)))
    cat = concat_channels(parts)
    return _cbr(m, f"{site}.fuse", cat) if cfg.fused else cat


def forward(m: Model, x: Tensor) -> Tensor:
    f1, f2, f3, f4, deep = encoder_forward(m, x)
    y = ppm_forward(m, deep, "ppm_bottleneck")
    skips = [ppm_forward(m, f4, "ppm_skip4"), ppm_forward(m, f3, "ppm_skip3"), f2, f1]
    for i, skip in enumerate(skips, start=1):
        w, b = m.upconvs[f"dec{i}.up"]
        y = conv_transpose2d(y, w, b, stride=2)
        y = _cbr(m, f"dec{i}", concat_channels([y, skip]))
    return sigmoid(conv2d(y, m.convs["head"]))


def predict_proba(m: Model, images: np.ndarray, batch_size: int = 8) -> np.ndarray:
    """Inference-mode probabilities for an (n, c, h, w) float array."""
    was_training = m.training
    m.eval()
    try:
        with no_grad():
            chunks = [forward(m, Tensor(images[i : i + batch_size])).data for i in range(0, len(images), batch_size)]
    finally:
        if was_training:
            m.train()
    return np.concatenate(chunks, axis=0)


def parameter_count(m: Model) -> int:
    return sum(p.data.size for p in m.parameters().values())


def reduced_config(**overrides) -> ModelConfig:
    """Desk-scale variant used by the toy learning experiment."""
    kw = dict(
        input_size=(96, 128),
        encoder_stage_channels=(16, 32, 64, 128, 128),
        decoder_channels=(64, 32, 16, 8),
        ppm=PPMConfig(bins=(1, 2, 3)),
    )
    kw.update(overrides)
    return ModelConfig(**kw)

