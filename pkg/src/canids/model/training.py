"""Adam training with early stopping, reconstruction losses and gradient checks."""

from __future__ import annotations

import logging
import math

import numpy as np

from .network import Autoencoder, ModelConfig, TrainedModel

logger = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int):
        self.epoch = epoch
        super().__init__(f"loss became non-finite at epoch {epoch}")


def global_mse(windows: np.ndarray, recon: np.ndarray) -> float:
    """Mean squared error over every element of a window."""
    windows, recon = np.asarray(windows, dtype=np.float64), np.asarray(recon, dtype=np.float64)
    if windows.shape != recon.shape:
        raise ValueError(f"shape mismatch {windows.shape} vs {recon.shape}")
    diff = windows - recon
    return float(np.mean(diff * diff))


def signalwise_mse(windows: np.ndarray, recon: np.ndarray) -> np.ndarray:
    """Per-signal loss: mean over time steps (axis -2). Works on batches."""
    windows, recon = np.asarray(windows, dtype=np.float64), np.asarray(recon, dtype=np.float64)
    if windows.shape != recon.shape:
        raise ValueError(f"shape mismatch {windows.shape} vs {recon.shape}")
    diff = windows - recon
    return np.mean(diff * diff, axis=-2)


def signalwise_loss(model: TrainedModel, windows: np.ndarray) -> np.ndarray:
    return signalwise_mse(windows, model.reconstruct(windows))


class Adam:
    def __init__(self, lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, g in grads.items():
            m = self.m.setdefault(name, np.zeros_like(g))
            v = self.v.setdefault(name, np.zeros_like(g))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params[name] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _as_array(windows) -> np.ndarray:
    if isinstance(windows, np.ndarray):
        return windows
    return np.stack([getattr(win, "matrix", win) for win in windows])


def mean_reconstruction_error(net: Autoencoder, data: np.ndarray, chunk: int = 512) -> float:
    total = 0.0
    for i in range(0, len(data), chunk):
        batch = np.asarray(data[i:i + chunk], dtype=np.float64)
        diff = net.forward(batch) - batch
        total += float(np.sum(diff * diff))
    return total / (data.shape[0] * data.shape[1] * data.shape[2])


def train(features, val, cfg: ModelConfig, t_us: int = 0, selection_hash: str = "",
          callback=None) -> TrainedModel:
    """Fit an autoencoder on benign windows.

    Minimizes the global MSE with Adam, evaluates the validation MSE after
    every epoch, and stops after ``max_epochs`` or ``early_stop_patience``
    epochs without improvement. The returned model carries the weights of the
    best validation epoch.
    """
    X = _as_array(features)
    V = _as_array(val)
    if X.ndim != 3 or V.ndim != 3:
        raise ValueError("training and validation sets must be (n, w, x) arrays")
    if len(V) == 0 or len(X) == 0:
        raise ValueError("training and validation sets must be nonempty")
    if X.shape[1:] != V.shape[1:]:
        raise ValueError(f"training windows {X.shape[1:]} and validation windows {V.shape[1:]} differ")
    _, w, x = X.shape
    net = Autoencoder(cfg, w, x)
    opt = Adam(cfg.learning_rate)
    rng = np.random.default_rng(cfg.seed + 1)

    history = []
    best_val, best_epoch, best_params = math.inf, 0, None
    stale = 0
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(X))
        total = 0.0
        for i in range(0, len(X), cfg.batch_size_train):
            idx = np.sort(order[i:i + cfg.batch_size_train])
            batch = np.asarray(X[idx], dtype=np.float64)
            loss, grads = net.loss_and_grads(batch)
            if not math.isfinite(loss):
                raise TrainingDivergedError(epoch)
            opt.step(net.params, grads)
            total += loss * len(idx)
        train_mse = total / len(X)
        val_mse = mean_reconstruction_error(net, V)
        if not math.isfinite(val_mse):
            raise TrainingDivergedError(epoch)
        history.append((epoch, train_mse, val_mse))
        logger.info("epoch %d train %.3e val %.3e", epoch, train_mse, val_mse)
        if callback is not None:
            callback(epoch, train_mse, val_mse)
        if val_mse < best_val:
            best_val, best_epoch, stale = val_mse, epoch, 0
            best_params = {k: v.copy() for k, v in net.params.items()}
        else:
            stale += 1
            if stale >= cfg.early_stop_patience:
                break
    best_net = Autoencoder(cfg, w, x, params=best_params)
    return TrainedModel(cfg, best_net, t_us, selection_hash, history, best_epoch)


def gradient_check(model, windows: np.ndarray, n_params: int = 100, eps: float = 1e-5, seed: int = 0,
                   floor: float = 1e-8) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``model`` may be an :class:`Autoencoder` or a :class:`TrainedModel`.
    Relative error is ``|a - n| / max(|a|, |n|, floor)`` over ``n_params``
    randomly sampled scalar parameters.
    """
    net = getattr(model, "network", model)
    windows = np.asarray(windows, dtype=np.float64)
    if windows.ndim == 2:
        windows = windows[None]
    _, grads = net.loss_and_grads(windows)
    rng = np.random.default_rng(seed)
    names = sorted(net.params)
    sizes = np.array([net.params[n].size for n in names])
    picks = rng.choice(sizes.sum(), size=min(n_params, int(sizes.sum())), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    for flat in picks:
        k = int(np.searchsorted(offsets, flat, side="right") - 1)
        name, j = names[k], int(flat - offsets[k])
        p = net.params[name].reshape(-1)
        orig = p[j]
        p[j] = orig + eps
        up = float(np.mean((net.forward(windows) - windows) ** 2))
        p[j] = orig - eps
        down = float(np.mean((net.forward(windows) - windows) ** 2))
        p[j] = orig
        numeric = (up - down) / (2 * eps)
        analytic = float(grads[name].reshape(-1)[j])
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
        worst = max(worst, err)
    return worst
