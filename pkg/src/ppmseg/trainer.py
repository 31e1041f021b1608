"""Adam with a stepped learning-rate schedule, the epoch loop and model selection."""
from __future__ import annotations

import io
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence, Union

import numpy as np

from .checkpoint import Checkpoint, model_checkpoint
from .data import NET_SIZE, AugmentConfig, NetSample, Sample, augment, resize_for_net, sample_seed
from .errors import ConfigError, ContractError, TrainingError
from .metrics import MetricsRecord, aggregate, gdl, image_metrics
from .model import Model, ModelConfig, build_model, forward, predict_proba
from .postprocess import postprocess_pipeline
from .tensor import Tensor, backward

logger = logging.getLogger(__name__)


@dataclass
class LRSchedule:
    base: float = 5e-5
    gamma: float = 0.1
    step_epochs: int = 30

    def validate(self) -> None:
        if self.base <= 0 or not 0 < self.gamma <= 1 or self.step_epochs < 1:
            raise ConfigError("schedule needs base > 0, 0 < gamma <= 1, step_epochs >= 1")


def lr_at_epoch(s: LRSchedule, e: int) -> float:
    if e < 0:
        raise ContractError("epoch index must be >= 0")
    return s.base * s.gamma ** (e // s.step_epochs)


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def to_tensors(self) -> dict[str, np.ndarray]:
        out = {"adam.t": np.asarray([self.t], np.float32)}
        for k in self.m:
            out[f"adam.m.{k}"] = self.m[k].copy()
            out[f"adam.v.{k}"] = self.v[k].copy()
        return out

    @classmethod
    def from_tensors(cls, t: Mapping[str, np.ndarray]) -> "AdamState":
        st = cls(t=int(t["adam.t"].reshape(-1)[0]))
        for k, arr in t.items():
            if k.startswith("adam.m."):
                st.m[k[len("adam.m.") :]] = arr.copy()
            elif k.startswith("adam.v."):
                st.v[k[len("adam.v.") :]] = arr.copy()
        return st


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update, in place.  Nothing changes if any gradient is non-finite."""
    if lr <= 0:
        raise ContractError("learning rate must be positive")
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ContractError(f"gradient for '{name}' has shape {g.shape}, parameter {params[name].shape}")
        if not np.isfinite(g).all():
            raise TrainingError(f"non-finite gradient for '{name}'; step aborted")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        step = (lr / c1) * m / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data - step).astype(p.data.dtype)


@dataclass
class TrainConfig:
    batch_size: int = 16
    max_epochs: int = 200
    seed: int = 0
    patience: int = 30
    schedule: LRSchedule = field(default_factory=LRSchedule)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    model: ModelConfig = field(default_factory=ModelConfig)

    def validate(self) -> None:
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ConfigError("batch_size, max_epochs and patience must all be >= 1")
        self.schedule.validate()
        self.augment.validate()
        self.model.validate()


HISTORY_COLUMNS = ("epoch", "lr", "train_loss", "val_ja", "val_dc", "val_sn", "val_sp")


@dataclass
class HistoryRow:
    epoch: int
    lr: float
    train_loss: float
    val_ja: float
    val_dc: float
    val_sn: float
    val_sp: float


@dataclass
class TrainHistory:
    rows: list[HistoryRow] = field(default_factory=list)
    best_epoch: Optional[int] = None

    def __len__(self) -> int:
        return len(self.rows)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(",".join(HISTORY_COLUMNS) + "\n")
        for r in self.rows:
            vals = [str(r.epoch)] + [repr(float(getattr(r, c))) for c in HISTORY_COLUMNS[1:]]
            buf.write(",".join(vals) + "\n")
        return buf.getvalue()


def _batch_arrays(batch: Sequence[NetSample], cfg: Optional[AugmentConfig], aug_seed: int, epoch: int):
    images, masks = [], []
    for s in batch:
        img, mask = s.image, s.mask
        if cfg is not None:
            img, mask = augment(img, mask, cfg, np.random.default_rng(sample_seed(aug_seed, s.id, epoch)))
        images.append(img)
        masks.append(mask)
    return np.stack(images), np.stack(masks)


def train_epoch(
    model: Model,
    samples: Sequence[NetSample],
    opt: AdamState,
    lr: float,
    rng: np.random.Generator,
    batch_size: int = 16,
    augment_cfg: Optional[AugmentConfig] = None,
    epoch: int = 0,
) -> float:
    """Run one pass over ``samples``; returns the sample-weighted mean GDL."""
    if not samples:
        raise ContractError("no training samples")
    model.train()
    order = rng.permutation(len(samples))
    aug_seed = int(rng.integers(2**31))
    params = model.parameters()
    total, seen = 0.0, 0
    for start in range(0, len(order), batch_size):
        batch = [samples[i] for i in order[start : start + batch_size]]
        x, y = _batch_arrays(batch, augment_cfg, aug_seed, epoch)
        loss = gdl(forward(model, Tensor(x)), y)
        backward(loss)
        grads = {k: p.grad for k, p in params.items() if p.grad is not None}
        try:
            adam_step(params, grads, opt, lr)
        finally:
            model.zero_grad()
        total += loss.item() * len(batch)
        seen += len(batch)
    return total / seen


Predictor = Union[Model, Callable[[np.ndarray], np.ndarray]]


def _as_net_samples(samples, size) -> list[NetSample]:
    return [resize_for_net(s, size) if isinstance(s, Sample) else s for s in samples]


def evaluate(model: Predictor, samples, batch_size: int = 8) -> MetricsRecord:
    """Score post-processed predictions at original resolution.

    ``model`` may also be any callable mapping an (n, 3, H, W) batch to
    (n, 1, H, W) probabilities, which keeps stub predictors easy to test.
    """
    if not samples:
        raise ContractError("no samples to evaluate")
    size = model.config.input_size if isinstance(model, Model) else NET_SIZE
    net = _as_net_samples(samples, size)
    for s in net:
        if s.original_mask is None:
            raise ContractError(f"sample '{s.id}' has no reference mask")
    records = []
    for start in range(0, len(net), batch_size):
        batch = net[start : start + batch_size]
        x = np.stack([s.image for s in batch])
        probs = predict_proba(model, x, batch_size) if isinstance(model, Model) else np.asarray(model(x))
        for s, p in zip(batch, probs):
            pred = postprocess_pipeline(p, s.original_size)
            records.append(image_metrics(pred, s.original_mask, id=s.id))
    return aggregate(records)


def fit(
    cfg: TrainConfig,
    train: Sequence,
    val: Sequence,
    on_epoch: Optional[Callable[[HistoryRow], None]] = None,
) -> tuple[Checkpoint, TrainHistory]:
    """Train from scratch, keeping the checkpoint with the best validation Jaccard."""
    if not train or not val:
        raise ContractError("training and validation sets must both be non-empty")
    cfg.validate()
    size = cfg.model.input_size
    train_ns = _as_net_samples(train, size)
    val_ns = _as_net_samples(val, size)

    model = build_model(cfg.model)
    opt = AdamState()
    rng = np.random.default_rng(cfg.seed)
    aug = cfg.augment if cfg.augment.enabled else None
    history = TrainHistory()
    best: Optional[Checkpoint] = None
    best_ja = -math.inf
    stale = 0
    for epoch in range(cfg.max_epochs):
        lr = lr_at_epoch(cfg.schedule, epoch)
        loss = train_epoch(model, train_ns, opt, lr, rng, cfg.batch_size, aug, epoch)
        model.epoch = epoch + 1
        rec = evaluate(model, val_ns)
        row = HistoryRow(epoch, lr, loss, rec.ja, rec.dc, rec.sn, rec.sp)
        history.rows.append(row)
        logger.info("epoch %d lr %.3g loss %.4f val JA %.4f", epoch, lr, loss, rec.ja)
        if on_epoch is not None:
            on_epoch(row)
        if rec.ja > best_ja:
            best_ja = rec.ja
            best = model_checkpoint(model, opt.to_tensors())
            history.best_epoch = epoch
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                logger.info("no validation improvement for %d epochs, stopping", stale)
                break
    model.train()
    return best, history
