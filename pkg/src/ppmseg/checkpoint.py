"""Binary checkpoint format.

Layout, all little-endian::

    magic      8 bytes  b"PPMSEG01"
    version    u32      1
    count      u32
    count x    u32 name length, UTF-8 name, u32 rank, rank x u32 dims, f32 data
    has_opt    u8
    [optimizer block in the same named-tensor encoding: u32 count, tensors...]
    epoch      u32

Architecture hyperparameters travel as small ``config.*`` tensors so that a
checkpoint alone is enough to rebuild the model.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigError, FormatError
from .model import Model, ModelConfig, PPMConfig, build_model

MAGIC = b"PPMSEG01"
VERSION = 1
CONFIG_PREFIX = "config."


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    optimizer: Optional[dict[str, np.ndarray]] = None
    epoch: int = 0


def config_tensors(cfg: ModelConfig) -> dict[str, np.ndarray]:
    def arr(*v):
        return np.asarray(v, dtype=np.float32)

    return {
        "config.in_channels": arr(cfg.in_channels),
        "config.input_size": arr(*cfg.input_size),
        "config.encoder_stage_channels": arr(*cfg.encoder_stage_channels),
        "config.decoder_channels": arr(*cfg.decoder_channels),
        "config.ppm_bins": arr(*cfg.ppm.bins),
        # 0 encodes "derive from input channels"
        "config.ppm_branch_channels": arr(cfg.ppm.branch_channels or 0),
        "config.ppm_fused": arr(int(cfg.ppm.fused)),
        "config.decoder_dilation": arr(cfg.decoder_dilation),
        "config.seed": arr(cfg.seed),
    }


def config_from_tensors(t: dict[str, np.ndarray]) -> ModelConfig:
    missing = [k for k in config_tensors(ModelConfig()) if k not in t]
    if missing:
        raise FormatError(f"checkpoint lacks architecture tensors: {', '.join(missing)}")

    def ints(name):
        return tuple(int(v) for v in t[name].reshape(-1))

    branch = ints("config.ppm_branch_channels")[0]
    return ModelConfig(
        in_channels=ints("config.in_channels")[0],
        input_size=ints("config.input_size"),
        encoder_stage_channels=ints("config.encoder_stage_channels"),
        decoder_channels=ints("config.decoder_channels"),
        ppm=PPMConfig(bins=ints("config.ppm_bins"), branch_channels=branch or None, fused=bool(ints("config.ppm_fused")[0])),
        decoder_dilation=ints("config.decoder_dilation")[0],
        seed=ints("config.seed")[0],
    )


def _pack_tensors(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f4")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes(order="C"))
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"file truncated while reading {what}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def tensors(self, block: str) -> dict[str, np.ndarray]:
        count = self.u32(f"{block} tensor count")
        out = {}
        for i in range(count):
            n = self.u32(f"{block} tensor[{i}] name length")
            try:
                name = self.take(n, f"{block} tensor[{i}] name").decode("utf-8")
            except UnicodeDecodeError as exc:
                raise FormatError(f"{block} tensor[{i}] name is not valid UTF-8") from exc
            rank = self.u32(f"tensor '{name}' rank")
            if rank > 8:
                raise FormatError(f"tensor '{name}' rank {rank} is implausible")
            dims = struct.unpack(f"<{rank}I", self.take(4 * rank, f"tensor '{name}' dims"))
            size = int(np.prod(dims)) if dims else 1
            data = self.take(4 * size, f"tensor '{name}' data")
            if name in out:
                raise FormatError(f"duplicate tensor name '{name}'")
            out[name] = np.frombuffer(data, dtype="<f4").astype(np.float32).reshape(dims)
        return out


def encode(ckpt: Checkpoint) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION), _pack_tensors(ckpt.tensors)]
    if ckpt.optimizer is None:
        parts.append(b"\x00")
    else:
        parts.append(b"\x01" + _pack_tensors(ckpt.optimizer))
    parts.append(struct.pack("<I", ckpt.epoch))
    return b"".join(parts)


def decode(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    magic = r.take(len(MAGIC), "magic")
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    version = r.u32("version")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    tensors = r.tensors("model")
    flag = r.take(1, "has-optimizer flag")[0]
    if flag not in (0, 1):
        raise FormatError(f"has-optimizer flag must be 0 or 1, got {flag}")
    optimizer = r.tensors("optimizer") if flag else None
    epoch = r.u32("epoch")
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes after epoch")
    return Checkpoint(tensors, optimizer, epoch)


def model_checkpoint(m: Model, optimizer: Optional[dict[str, np.ndarray]] = None) -> Checkpoint:
    tensors = config_tensors(m.config)
    tensors.update({k: v.copy() for k, v in m.state_dict().items()})
    return Checkpoint(tensors, optimizer, m.epoch)


def model_from_checkpoint(ckpt: Checkpoint) -> Model:
    cfg = config_from_tensors(ckpt.tensors)
    try:
        m = build_model(cfg)
    except ConfigError as exc:
        raise FormatError(f"architecture tensors describe an invalid model: {exc}") from exc
    state = {k: v for k, v in ckpt.tensors.items() if not k.startswith(CONFIG_PREFIX)}
    try:
        m.load_state_dict(state)
    except KeyError as exc:
        raise FormatError(exc.args[0]) from exc
    except ValueError as exc:
        raise FormatError(str(exc)) from exc
    m.epoch = ckpt.epoch
    m.eval()
    return m


def write_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(encode(ckpt))


def read_checkpoint(path) -> Checkpoint:
    return decode(Path(path).read_bytes())


def save_checkpoint(m: Model, path, optimizer: Optional[dict[str, np.ndarray]] = None) -> None:
    write_checkpoint(model_checkpoint(m, optimizer), path)


def load_checkpoint(path) -> Model:
    """Rebuild a model (in inference mode) from a checkpoint file."""
    return model_from_checkpoint(read_checkpoint(path))
