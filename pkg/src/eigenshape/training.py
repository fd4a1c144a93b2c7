"""Losses, schedules, dataset splitting, and the two training loops."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from .models import CNNModel, FNOModel, add_positional_encoding, build_cnn, build_fno
from .netcore import Adam


class EmptyBatch(Exception):
    """Loss of an empty batch is undefined."""


class ZeroTarget(Exception):
    """ARM2 needs nonzero target norms."""


class Divergence(Exception):
    """Training loss became non-finite."""


@dataclass
class TrainConfig:
    task: str = "eigenvalue"       # eigenvalue | eigenfunction
    eig_index: int = 1             # 1-based
    epochs: int = 100
    batch_size: int = 32
    lr0: float = 1e-3
    lr_decay: float = 0.5
    lr_interval: int = 10
    seed: int = 0
    split_ratio: float = 0.8
    deterministic: bool = True

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not 0 < self.split_ratio < 1:
            raise ValueError("split_ratio must be in (0, 1)")
        if self.lr0 <= 0 or not 0 < self.lr_decay <= 1:
            raise ValueError("bad learning-rate settings")


def cnn_config(**kw) -> TrainConfig:
    base = dict(task="eigenvalue", epochs=100, batch_size=32, lr_decay=0.5, lr_interval=10)
    base.update(kw)
    return TrainConfig(**base)


def fno_config(**kw) -> TrainConfig:
    base = dict(task="eigenfunction", epochs=50, batch_size=128, lr_decay=0.8, lr_interval=10)
    base.update(kw)
    return TrainConfig(**base)


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    test_loss: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)

    def rows(self) -> list[dict]:
        return [
            {"epoch": i, "train_loss": tl, "test_loss": vl, "lr": lr, "seconds": sec}
            for i, (tl, vl, lr, sec) in enumerate(
                zip(self.train_loss, self.test_loss, self.lr, self.seconds)
            )
        ]

    def write_jsonl(self, path) -> None:
        with open(path, "w") as f:
            for row in self.rows():
                f.write(json.dumps(row) + "\n")


def l1_loss(pred: np.ndarray, target: np.ndarray):
    """Mean absolute error and its (sub)gradient wrt pred; ties get 0."""
    if pred.size == 0:
        raise EmptyBatch("empty batch")
    diff = pred - target
    loss = float(np.abs(diff, dtype=np.float64).mean())
    grad = (np.sign(diff) / diff.shape[0]).astype(pred.dtype)
    return loss, grad.reshape(pred.shape)


def arm2_loss(pred: np.ndarray, target: np.ndarray, mask: np.ndarray):
    """Adaptive relative masked L2: per-sample sign-minimized, mask-restricted.

    pred, target, mask: (N, d, d). Gradient flows only through the chosen sign
    branch and only inside the mask; exact ties take the positive branch.
    """
    if pred.shape[0] == 0:
        raise EmptyBatch("empty batch")
    n = pred.shape[0]
    masked = pred * mask
    t_norm = np.sqrt((target.astype(np.float64) ** 2).sum(axis=(1, 2)))
    if np.any(t_norm == 0):
        raise ZeroTarget("a target raster has zero norm")
    pos = masked - target
    neg = masked + target  # ||-pred*mask - target||
    a = np.sqrt((pos.astype(np.float64) ** 2).sum(axis=(1, 2)))
    b = np.sqrt((neg.astype(np.float64) ** 2).sum(axis=(1, 2)))
    use_neg = b < a - 1e-12
    branch = np.where(use_neg, b, a)
    loss = float((branch / t_norm).mean())
    # d||v||/dpred = v * mask / ||v|| for the winning branch v
    denom = np.maximum(branch, 1e-300) * t_norm * n
    grad = np.where(use_neg[:, None, None], neg, pos) * mask / denom[:, None, None]
    return loss, grad.astype(pred.dtype)


def split_dataset(n: int, ratio: float, seed: int):
    """Deterministic shuffled split: first floor(ratio*n) train, rest test."""
    if not 0 < ratio < 1:
        raise ValueError("ratio must be in (0, 1)")
    perm = np.random.default_rng(seed).permutation(n)
    cut = int(np.floor(ratio * n))
    return perm[:cut], perm[cut:]


def lr_at(config: TrainConfig, epoch: int) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return config.lr0 * config.lr_decay ** (epoch // config.lr_interval)


def _epoch_batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def train_eigenvalue(config: TrainConfig, images: np.ndarray, targets: np.ndarray,
                     log_path=None, model: CNNModel | None = None,
                     progress: bool = False):
    """Train the CNN on (images (N,1,d,d) float32, targets (N,) eigenvalues).

    The split is drawn from config.seed; per-epoch batch order from
    config.seed + epoch + 1. Returns (model, history).
    """
    d = images.shape[-1]
    model = model or build_cnn(d, seed=config.seed)
    train_idx, test_idx = split_dataset(images.shape[0], config.split_ratio, config.seed)
    assert np.intersect1d(train_idx, test_idx).size == 0
    opt = Adam(model.params())
    history = TrainHistory()
    targets = targets.astype(np.float32)
    for epoch in range(config.epochs):
        t0 = time.time()
        lr = lr_at(config, epoch)
        rng = np.random.default_rng(config.seed + epoch + 1)
        losses = []
        for batch in _epoch_batches(train_idx.size, config.batch_size, rng):
            idx = train_idx[batch]
            pred = model.forward(images[idx], train=True)
            loss, grad = l1_loss(pred[:, 0], targets[idx])
            if not np.isfinite(loss):
                raise Divergence(f"train loss {loss} at epoch {epoch}")
            model.backward(grad[:, None])
            opt.step(lr)
            losses.append(loss)
        test_pred = predict_eigenvalues(model, images[test_idx])
        test_loss, _ = l1_loss(test_pred, targets[test_idx])
        history.train_loss.append(float(np.mean(losses)))
        history.test_loss.append(test_loss)
        history.lr.append(lr)
        history.seconds.append(time.time() - t0)
        if progress:
            print(f"[cnn] epoch {epoch + 1}/{config.epochs} "
                  f"train {history.train_loss[-1]:.4f} test {test_loss:.4f} lr {lr:g}",
                  flush=True)
    if log_path is not None:
        history.write_jsonl(log_path)
    return model, history


def train_eigenfunction(config: TrainConfig, images: np.ndarray, rasters: np.ndarray,
                        masks: np.ndarray, log_path=None, model: FNOModel | None = None,
                        progress: bool = False):
    """Train the FNO on (images (N,1,d,d), rasters (N,d,d), masks (N,d,d))."""
    d = images.shape[-1]
    model = model or build_fno(d, seed=config.seed)
    train_idx, test_idx = split_dataset(images.shape[0], config.split_ratio, config.seed)
    assert np.intersect1d(train_idx, test_idx).size == 0
    opt = Adam(model.params())
    history = TrainHistory()
    encoded = add_positional_encoding(images.astype(np.float32))
    rasters = rasters.astype(np.float32)
    masks = masks.astype(np.float32)
    for epoch in range(config.epochs):
        t0 = time.time()
        lr = lr_at(config, epoch)
        rng = np.random.default_rng(config.seed + epoch + 1)
        losses = []
        for batch in _epoch_batches(train_idx.size, config.batch_size, rng):
            idx = train_idx[batch]
            pred = model.forward(encoded[idx], train=True)
            loss, grad = arm2_loss(pred[:, 0], rasters[idx], masks[idx])
            if not np.isfinite(loss):
                raise Divergence(f"train loss {loss} at epoch {epoch}")
            model.backward(grad[:, None])
            opt.step(lr)
            losses.append(loss)
        test_pred = predict_eigenfunctions(model, images[test_idx])
        test_loss, _ = arm2_loss(test_pred, rasters[test_idx], masks[test_idx])
        history.train_loss.append(float(np.mean(losses)))
        history.test_loss.append(test_loss)
        history.lr.append(lr)
        history.seconds.append(time.time() - t0)
        if progress:
            print(f"[fno] epoch {epoch + 1}/{config.epochs} "
                  f"train {history.train_loss[-1]:.4f} test {test_loss:.4f} lr {lr:g}",
                  flush=True)
    if log_path is not None:
        history.write_jsonl(log_path)
    return model, history


def predict_eigenvalues(model: CNNModel, images: np.ndarray,
                        batch_size: int = 256) -> np.ndarray:
    out = []
    for start in range(0, images.shape[0], batch_size):
        out.append(model.forward(images[start:start + batch_size].astype(np.float32),
                                 train=False)[:, 0])
    return np.concatenate(out) if out else np.empty(0, dtype=np.float32)


def predict_eigenfunctions(model: FNOModel, images: np.ndarray,
                           batch_size: int = 128) -> np.ndarray:
    out = []
    encoded = add_positional_encoding(images.astype(np.float32))
    for start in range(0, encoded.shape[0], batch_size):
        out.append(model.forward(encoded[start:start + batch_size], train=False)[:, 0])
    if not out:
        return np.empty((0,) + images.shape[-2:], dtype=np.float32)
    return np.concatenate(out)
