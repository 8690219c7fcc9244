"""Two-phase training protocol, folds, augmentation and loss."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import metrics
from .model import BatchNorm, MobileUNet, save_checkpoint
from .tensor import Adam, Tape, Tensor, backward, ops

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 8
    phase_a_epochs: int = 10
    phase_a_lr: float = 1e-3
    phase_b_epochs: int = 100
    phase_b_lr: float = 1e-4
    plateau_factor: float = 0.1
    plateau_patience: int = 5
    min_lr: float = 1e-7
    early_stop_patience: int = 15
    augment_prob: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.phase_a_lr <= 0 or self.phase_b_lr <= 0 or self.min_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.plateau_patience < 1 or self.early_stop_patience < 1:
            raise ValueError("patience values must be >= 1")
        if not 0.0 <= self.augment_prob <= 1.0:
            raise ValueError("augment_prob must lie in [0, 1]")
        if self.phase_a_epochs < 0 or self.phase_b_epochs < 0:
            raise ValueError("epoch counts must be non-negative")

    @classmethod
    def from_dict(cls, obj: Dict) -> "TrainConfig":
        unknown = set(obj) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**obj)


@dataclass
class TrainHistory:
    records: List[Dict] = field(default_factory=list)
    best_epoch: Optional[int] = None
    best_loss: float = math.inf
    best_checkpoint: Optional[str] = None
    stop_reason: str = ""

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)

    def write(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_jsonl())


@dataclass
class FoldSplit:
    folds: List[List[str]]

    @property
    def k(self) -> int:
        return len(self.folds)

    def split(self, i: int) -> Tuple[List[str], List[str]]:
        """(train ids, test ids) for fold ``i``."""
        test = list(self.folds[i])
        train = [pid for j, f in enumerate(self.folds) if j != i for pid in f]
        if set(train) & set(test):
            raise AssertionError("patient appears in both train and test")
        return train, test


def make_folds(patient_ids: Sequence[str], k: int = 4, seed: int = 0) -> FoldSplit:
    """Seeded shuffle then round-robin assignment of patients to ``k`` folds."""
    ids = list(patient_ids)
    if len(set(ids)) != len(ids):
        raise ValueError("patient ids must be unique")
    if len(ids) < k:
        raise ValueError(f"need at least {k} patients for {k} folds, got {len(ids)}")
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    return FoldSplit([shuffled[i::k] for i in range(k)])


_TRANSFORMS = ("vflip", "hflip", "rot90", "rot180", "rot270")


def apply_transform(arr: np.ndarray, name: str) -> np.ndarray:
    if name == "vflip":
        return arr[..., ::-1, :]
    if name == "hflip":
        return arr[..., :, ::-1]
    k = {"rot90": 1, "rot180": 2, "rot270": 3}[name]
    return np.rot90(arr, k, axes=(-2, -1))


def augment(img: np.ndarray, mask: np.ndarray, rng: np.random.Generator, prob: float = 0.5):
    """With probability ``prob`` apply one flip/rotation, drawn uniformly, to both arrays."""
    if rng.random() >= prob:
        return img, mask
    name = _TRANSFORMS[rng.integers(len(_TRANSFORMS))]
    return (
        np.ascontiguousarray(apply_transform(img, name)),
        np.ascontiguousarray(apply_transform(mask, name)),
    )


def combined_loss(pred: Tensor, target) -> Tensor:
    """Equal-weight soft Dice + binary cross-entropy."""
    return ops.add(ops.scale(ops.soft_dice_loss(pred, target), 0.5), ops.scale(ops.bce_loss(pred, target), 0.5))


def freeze_encoder(model: MobileUNet, frozen: bool = True) -> None:
    names = [name for name, _ in model.named_parameters() if name.startswith("encoder.")]
    params = model.parameters()
    for name in names:
        params[name].requires_grad = not frozen
    if frozen:
        model.frozen.update(names)
    else:
        model.frozen.difference_update(names)


def _as_batch(x: np.ndarray, dtype) -> np.ndarray:
    x = np.asarray(x, dtype=dtype)
    return x[:, None] if x.ndim == 3 else x


def _batchnorm_layers(model: MobileUNet) -> List[BatchNorm]:
    return [m for m in model.modules() if isinstance(m, BatchNorm)]


def _start_collecting(layers: Sequence[BatchNorm]) -> None:
    for bn in layers:
        bn.collect = []


def _set_pooled_stats(layers: Sequence[BatchNorm]) -> None:
    """Running mean/var := exact pooled statistics of the batches seen since collection started."""
    for bn in layers:
        if not bn.collect:
            bn.collect = None
            continue
        means = np.stack([m for m, _, _ in bn.collect]).astype(np.float64)
        vars_ = np.stack([v for _, v, _ in bn.collect]).astype(np.float64)
        w = np.array([n for _, _, n in bn.collect], dtype=np.float64)[:, None]
        mean = (w * means).sum(0) / w.sum()
        var = (w * (vars_ + (means - mean) ** 2)).sum(0) / w.sum()
        bn.running_mean[...] = mean
        bn.running_var[...] = var
        bn.collect = None


def recalibrate_batchnorm(model: MobileUNet, images: np.ndarray, batch_size: int = 8) -> None:
    """Replace running statistics with pooled batch statistics over ``images``.

    One train-mode pass in fixed order, no parameter updates.
    """
    images = _as_batch(images, model.config.dtype)
    layers = _batchnorm_layers(model)
    was = model.training
    _start_collecting(layers)
    model.train()
    try:
        for s in range(0, len(images), batch_size):
            model(Tensor(images[s:s + batch_size]))
        _set_pooled_stats(layers)
    finally:
        for bn in layers:
            bn.collect = None
        model.train(was)


def evaluate(model: MobileUNet, images: np.ndarray, masks: np.ndarray, batch_size: int = 8) -> Tuple[float, float]:
    """Eval-mode (loss, mean per-image DSC in [0, 1]) over a dataset, no augmentation."""
    dtype = model.config.dtype
    images = _as_batch(images, dtype)
    masks = _as_batch(masks, dtype)
    was = model.training
    model.eval()
    total, dscs = 0.0, []
    try:
        for s in range(0, len(images), batch_size):
            xb, yb = images[s:s + batch_size], masks[s:s + batch_size]
            pred = model(Tensor(xb))
            total += float(combined_loss(pred, yb).data) * len(xb)
            hard = pred.data >= 0.5
            dscs.extend(metrics.dsc(metrics.confusion(p, t)) / 100.0 for p, t in zip(hard, yb))
    finally:
        model.train(was)
    return total / len(images), float(np.mean(dscs))


def _train_epoch(model, opt, images, masks, cfg: TrainConfig, lr: float, rng: np.random.Generator) -> None:
    model.train()
    order = rng.permutation(len(images))
    for s in range(0, len(order), cfg.batch_size):
        idx = order[s:s + cfg.batch_size]
        pairs = [augment(images[i], masks[i], rng, cfg.augment_prob) for i in idx]
        xb = np.stack([p[0] for p in pairs])
        yb = np.stack([p[1] for p in pairs])
        opt.zero_grad()
        with Tape() as tape:
            loss = combined_loss(model(Tensor(xb)), yb)
        backward(tape, loss)
        trainable = [n for n in opt.params if n not in model.frozen]
        opt.step(lr, trainable)


def fit(
    model: MobileUNet,
    images: np.ndarray,
    masks: np.ndarray,
    cfg: Optional[TrainConfig] = None,
    checkpoint_path=None,
    restore_best: bool = True,
) -> TrainHistory:
    """Phase A (encoder frozen) then phase B (all layers) with plateau decay and early stopping.

    After every epoch the model is scored on the un-augmented training set
    in eval mode; that loss drives checkpointing, LR decay and early
    stopping.  With ``restore_best`` the best weights are loaded back at the end.
    """
    cfg = cfg or TrainConfig()
    dtype = model.config.dtype
    images = _as_batch(images, dtype)
    masks = _as_batch(masks, dtype)
    if len(images) == 0:
        raise ValueError("empty training set")
    if len(images) != len(masks):
        raise ValueError("images and masks differ in length")

    hist = TrainHistory(best_checkpoint=str(checkpoint_path) if checkpoint_path else None)
    opt = Adam(model.parameters())
    best_state: Optional[Dict[str, np.ndarray]] = None
    epoch = 0

    def end_epoch(phase: str, lr: float) -> bool:
        nonlocal best_state
        recalibrate_batchnorm(model, images, cfg.batch_size)
        loss, dsc = evaluate(model, images, masks, cfg.batch_size)
        if not math.isfinite(loss):
            raise TrainingError(f"non-finite training loss at epoch {epoch}; best checkpoint kept")
        hist.records.append({"epoch": epoch, "phase": phase, "lr": lr, "loss": loss, "dsc": dsc})
        logger.info("epoch %d (%s) lr=%.1e loss=%.5f dsc=%.4f", epoch, phase, lr, loss, dsc)
        improved = loss < hist.best_loss
        if improved:
            hist.best_loss, hist.best_epoch = loss, epoch
            best_state = {k: v.copy() for k, v in model.state().items()}
            if checkpoint_path:
                save_checkpoint(model, checkpoint_path)
        return improved

    try:
        freeze_encoder(model, True)
        for _ in range(cfg.phase_a_epochs):
            epoch += 1
            rng = np.random.default_rng([cfg.seed, epoch])
            _train_epoch(model, opt, images, masks, cfg, cfg.phase_a_lr, rng)
            end_epoch("A", cfg.phase_a_lr)
        freeze_encoder(model, False)

        lr = cfg.phase_b_lr
        phase_best = math.inf
        wait = plateau_wait = 0
        hist.stop_reason = "max-epochs"
        for _ in range(cfg.phase_b_epochs):
            epoch += 1
            rng = np.random.default_rng([cfg.seed, epoch])
            _train_epoch(model, opt, images, masks, cfg, lr, rng)
            end_epoch("B", lr)
            loss = hist.records[-1]["loss"]
            if loss < phase_best:
                phase_best, wait, plateau_wait = loss, 0, 0
            else:
                wait += 1
                plateau_wait += 1
                if wait >= cfg.early_stop_patience:
                    hist.stop_reason = "early-stop"
                    break
                if plateau_wait >= cfg.plateau_patience:
                    lr = max(lr * cfg.plateau_factor, cfg.min_lr)
                    plateau_wait = 0
        if cfg.phase_b_epochs == 0:
            hist.stop_reason = "max-epochs"
    except FloatingPointError as exc:
        hist.stop_reason = "nan"
        raise TrainingError(f"training aborted at epoch {epoch}: {exc}") from exc
    finally:
        freeze_encoder(model, False)

    if restore_best and best_state is not None:
        params = model.parameters()
        buffers = dict(model.named_buffers())
        for k, v in best_state.items():
            (params[k].data if k in params else buffers[k])[...] = v
    return hist
