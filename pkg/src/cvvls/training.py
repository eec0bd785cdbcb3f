"""Losses, AdamW, and the deterministic training loop."""

from __future__ import annotations

import dataclasses
import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .crate_net import CrateParams, backward, forward, save_checkpoint, sigmoid
from .errors import ContractError, NumericError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 4e-4
    weight_decay: float = 0.1
    momentum_beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 256
    epochs: int = 20
    mu: float = 0.1
    k: int = 4
    d_e: int = 6
    seed: int = 0
    cosine_schedule: bool = False

    def __post_init__(self):
        if self.k < 1 or self.batch_size < 1 or self.epochs < 0 or self.d_e < 0:
            raise ContractError(f"invalid training config {self}")

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


@dataclass(eq=False)
class Batch:
    inputs: np.ndarray   # [B, lanes, cells, 2k]
    targets: np.ndarray  # [B, lanes, cells, 2]

    def __post_init__(self):
        if len(self.inputs) != len(self.targets):
            raise ContractError("inputs and targets differ in length")

    def __len__(self):
        return len(self.inputs)


# --------------------------------------------------------------------------
# losses


def _frame_array(x) -> np.ndarray:
    return x.tensor if hasattr(x, "tensor") else np.asarray(x, dtype=np.float64)


def mse_loss(pred, target) -> tuple[float, np.ndarray]:
    """Mean squared error over all ``2 * lanes * cells`` entries of one frame."""
    pred, target = _frame_array(pred), _frame_array(target)
    if pred.shape != target.shape:
        raise ContractError(f"shape mismatch {pred.shape} vs {target.shape}")
    diff = pred - target
    m = diff.size
    return float(np.sum(diff ** 2) / m), 2.0 * diff / m


def _window_sum(x: np.ndarray, d: int) -> np.ndarray:
    """Sum over cells ``i-d .. i+d`` along the last axis, clipped at the lane ends."""
    n = x.shape[-1]
    c = np.concatenate([np.zeros(x.shape[:-1] + (1,)), np.cumsum(x, axis=-1)], axis=-1)
    idx = np.arange(n)
    hi = np.minimum(idx + d + 1, n)
    lo = np.maximum(idx - d, 0)
    return c[..., hi] - c[..., lo]


def nls(occ, i: int, l0: int, d_e: int) -> float:
    """Nearby vehicles' location sum around occupied cell ``i`` of lane ``l0``."""
    occ = np.asarray(occ, dtype=np.float64)
    if occ[l0, i] <= 0.5:
        raise ContractError(f"cell {i} of lane {l0} is not occupied")
    return float(occ[l0, max(0, i - d_e):i + d_e + 1].sum())


def safety_penalty(prob, d_e: int) -> tuple[float, np.ndarray]:
    """Sum over occupied cells of ``(NLS - 1)^2`` and its gradient w.r.t. ``prob``.

    Occupied means probability above 0.5; that membership is held fixed when
    differentiating, so the gradient flows through the window sums only.
    """
    prob = np.asarray(prob, dtype=np.float64)
    omega = prob > 0.5
    s = _window_sum(prob, d_e)
    r = np.where(omega, s - 1.0, 0.0)
    return float(np.sum(r ** 2)), _window_sum(2.0 * r, d_e)


def total_loss(raw, target, mu: float, d_e: int) -> tuple[float, np.ndarray]:
    """``L_M + mu L_p`` for raw output(s) ``[..., lanes, cells, 2]``, averaged over the batch.

    The occupancy channel is passed through a sigmoid before both terms.
    """
    raw = np.asarray(raw, dtype=np.float64)
    target = _frame_array(target)
    if raw.shape != target.shape:
        raise ContractError(f"shape mismatch {raw.shape} vs {target.shape}")
    batch_shape = raw.shape[:-3]
    n = int(np.prod(batch_shape)) if batch_shape else 1
    prob = sigmoid(raw[..., 0])
    pred = np.stack([prob, raw[..., 1]], axis=-1)
    diff = pred - target
    m = int(np.prod(raw.shape[-3:]))
    l_m = np.sum(diff ** 2) / (m * n)
    g_pred = 2.0 * diff / (m * n)
    omega = prob > 0.5
    s = _window_sum(prob, d_e)
    r = np.where(omega, s - 1.0, 0.0)
    l_p = np.sum(r ** 2) / n
    g_prob = g_pred[..., 0] + mu * _window_sum(2.0 * r, d_e) / n
    grad = np.empty_like(raw)
    grad[..., 0] = g_prob * prob * (1.0 - prob)
    grad[..., 1] = g_pred[..., 1]
    return float(l_m + mu * l_p), grad


# --------------------------------------------------------------------------
# optimizer


@dataclass(eq=False)
class AdamWState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, tensors: dict[str, np.ndarray]) -> "AdamWState":
        return cls({k: np.zeros_like(t) for k, t in tensors.items()},
                   {k: np.zeros_like(t) for k, t in tensors.items()})


def adamw_step(tensors: dict[str, np.ndarray], grads: dict[str, np.ndarray],
               state: AdamWState, cfg: TrainConfig, lr: Optional[float] = None) -> None:
    """In-place AdamW update with decoupled weight decay and bias correction."""
    lr = cfg.learning_rate if lr is None else lr
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name} at step {state.step + 1}")
    state.step += 1
    b1, b2 = cfg.momentum_beta1, cfg.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in tensors.items():
        g = grads[name]
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p *= 1.0 - lr * cfg.weight_decay
        p -= (lr / c1) * m / (np.sqrt(v / c2) + cfg.adam_eps)


# --------------------------------------------------------------------------
# loop


@dataclass(eq=False)
class TrainResult:
    params: CrateParams
    history: list[float]
    state: AdamWState
    checkpoints: list[Path] = field(default_factory=list)


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    """Shuffle for one epoch; depends only on (seed, epoch) so runs can resume."""
    return np.random.default_rng([seed, epoch]).permutation(n)


def fingerprint(*arrays: np.ndarray) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()[:16]


def _lr_at(cfg: TrainConfig, step: int, total: int) -> float:
    if not cfg.cosine_schedule or total <= 1:
        return cfg.learning_rate
    return 0.5 * cfg.learning_rate * (1.0 + np.cos(np.pi * step / total))


def train(dataset: Batch, cfg: TrainConfig, params: CrateParams,
          checkpoint_dir: Optional[Path] = None, state: Optional[AdamWState] = None,
          start_epoch: int = 0,
          on_epoch: Optional[Callable[[int, float], None]] = None) -> TrainResult:
    """Minimize the total loss with AdamW; returns trained params and per-epoch loss.

    ``params`` is not modified. Passing ``state`` and ``start_epoch`` resumes an
    interrupted run; the result matches an uninterrupted one exactly.
    """
    n = len(dataset)
    if n == 0:
        raise ContractError("empty dataset")
    params = params.copy()
    state = AdamWState.zeros_like(params.tensors) if state is None else state
    x_all = dataset.inputs
    y_all = dataset.targets
    steps_per_epoch = -(-n // cfg.batch_size)
    total_steps = steps_per_epoch * cfg.epochs
    history: list[float] = []
    written: list[Path] = []
    for epoch in range(start_epoch, cfg.epochs):
        order = epoch_order(n, cfg.seed, epoch)
        running = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            raw, cache = forward(x_all[idx], params)
            loss, grad = total_loss(raw, y_all[idx], cfg.mu, cfg.d_e)
            if not np.isfinite(loss):
                raise NumericError(f"loss became non-finite in epoch {epoch}")
            grads = backward(grad, cache, params)
            adamw_step(params.tensors, grads, state, cfg, _lr_at(cfg, state.step, total_steps))
            running += loss * len(idx)
        epoch_loss = running / n
        history.append(epoch_loss)
        log.info("epoch %d loss %.6f", epoch, epoch_loss)
        if on_epoch is not None:
            on_epoch(epoch, epoch_loss)
        if checkpoint_dir is not None:
            path = Path(checkpoint_dir) / f"epoch_{epoch:03d}.ckpt"
            save_training_checkpoint(path, params, state, epoch, cfg)
            written.append(path)
    return TrainResult(params, history, state, written)


def save_training_checkpoint(path, params: CrateParams, state: AdamWState, epoch: int,
                             cfg: TrainConfig) -> Path:
    extra = {f"adam.m.{k}": v for k, v in state.m.items()}
    extra.update({f"adam.v.{k}": v for k, v in state.v.items()})
    meta = {"epoch": epoch, "adam_step": state.step, "train_config": dataclasses.asdict(cfg)}
    return save_checkpoint(path, params, extra, meta)


def restore_state(params: CrateParams, extra: dict[str, np.ndarray], meta: dict) -> AdamWState:
    m = {k: extra[f"adam.m.{k}"] for k in params.tensors}
    v = {k: extra[f"adam.v.{k}"] for k in params.tensors}
    return AdamWState(m, v, int(meta["adam_step"]))
