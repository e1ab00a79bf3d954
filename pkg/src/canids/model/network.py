"""Autoencoder topologies and the trained-model container."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from ..container import read_container, write_container
from .layers import LSTM, Bidirectional, Dense, RepeatVector, Reshape

FAMILIES = ("dense", "lstm", "bilstm")


@dataclass(frozen=True)
class ModelConfig:
    layer_family: str = "dense"
    encoder_widths: tuple[int, ...] = (128,)
    latent_dim: int = 32
    decoder_widths: tuple[int, ...] = (128,)
    learning_rate: float = 1e-4
    max_epochs: int = 2000
    early_stop_patience: int = 50
    seed: int = 0
    batch_size_train: int = 64

    def __post_init__(self):
        if self.layer_family not in FAMILIES:
            raise ValueError(f"layer_family must be one of {FAMILIES}")
        object.__setattr__(self, "encoder_widths", tuple(int(v) for v in self.encoder_widths))
        object.__setattr__(self, "decoder_widths", tuple(int(v) for v in self.decoder_widths))

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_widths"] = list(self.encoder_widths)
        d["decoder_widths"] = list(self.decoder_widths)
        return d


def build_layers(cfg: ModelConfig, w: int, x: int) -> list:
    """Encoder -> latent -> decoder. Output layer is sigmoid (targets in [0, 1])."""
    if not cfg.latent_dim < w * x:
        raise ValueError(f"latent_dim {cfg.latent_dim} is not a bottleneck for a {w}x{x} input")
    if cfg.layer_family == "dense":
        layers: list = [Reshape((w * x,))]
        n = w * x
        for width in (*cfg.encoder_widths, cfg.latent_dim, *cfg.decoder_widths):
            layers.append(Dense(n, width, "relu"))
            n = width
        layers += [Dense(n, w * x, "sigmoid"), Reshape((w, x))]
        return layers

    def rnn(n_in, width, seq):
        if cfg.layer_family == "bilstm":
            return Bidirectional(n_in, width, seq)
        return LSTM(n_in, width, seq)

    layers, n = [], x
    for width in cfg.encoder_widths:
        layers.append(rnn(n, width, True))
        n = width
    layers += [rnn(n, cfg.latent_dim, False), RepeatVector(w)]
    n = cfg.latent_dim
    for width in cfg.decoder_widths:
        layers.append(rnn(n, width, True))
        n = width
    layers.append(Dense(n, x, "sigmoid"))  # time-distributed
    return layers


class Autoencoder:
    """Layer stack plus flat named parameters (``L<k>.<name>``)."""

    def __init__(self, cfg: ModelConfig, w: int, x: int, params: dict[str, np.ndarray] | None = None):
        self.cfg, self.w, self.x = cfg, w, x
        self.layers = build_layers(cfg, w, x)
        rng = np.random.default_rng(cfg.seed)
        fresh = {}
        for k, layer in enumerate(self.layers):
            fresh.update({f"L{k}.{n}": v for n, v in layer.init(rng).items()})
        if params is None:
            params = fresh
        else:
            for name, v in fresh.items():
                if name not in params or params[name].shape != v.shape:
                    raise ValueError(f"parameter {name} missing or misshapen for this topology")
            if set(params) != set(fresh):
                raise ValueError(f"unexpected parameters {sorted(set(params) - set(fresh))}")
        self.params = params
        self._slices = [{n.split(".", 1)[1]: n for n in params if n.startswith(f"L{k}.")}
                        for k in range(len(self.layers))]

    def _layer_params(self, k):
        return {short: self.params[full] for short, full in self._slices[k].items()}

    def forward(self, windows: np.ndarray, keep_cache: bool = False):
        y, caches = windows, []
        for k, layer in enumerate(self.layers):
            y, cache = layer.forward(self._layer_params(k), y)
            if keep_cache:
                caches.append(cache)
        return (y, caches) if keep_cache else y

    def backward(self, caches, dy) -> dict[str, np.ndarray]:
        grads = {}
        for k in range(len(self.layers) - 1, -1, -1):
            dy, g = self.layers[k].backward(self._layer_params(k), caches[k], dy)
            for short, v in g.items():
                grads[self._slices[k][short]] = v
        return grads

    def loss_and_grads(self, windows: np.ndarray) -> tuple[float, dict[str, np.ndarray]]:
        """Batch-mean global MSE and its gradient."""
        out, caches = self.forward(windows, keep_cache=True)
        diff = out - windows
        loss = float(np.mean(diff * diff))
        return loss, self.backward(caches, 2.0 * diff / diff.size)

    @property
    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())


@dataclass
class TrainedModel:
    config: ModelConfig
    network: Autoencoder
    t_us: int = 0
    selection_hash: str = ""
    history: list[tuple[int, float, float]] = field(default_factory=list)  # (epoch, train, val)
    best_epoch: int = 0

    @property
    def w(self) -> int:
        return self.network.w

    @property
    def x(self) -> int:
        return self.network.x

    def reconstruct(self, windows: np.ndarray) -> np.ndarray:
        """Reconstruction of one (w, x) window or a (B, w, x) batch."""
        windows = np.asarray(windows, dtype=np.float64)
        single = windows.ndim == 2
        batch = windows[None] if single else windows
        if batch.shape[1:] != (self.w, self.x):
            raise ValueError(f"expected windows of shape {(self.w, self.x)}, got {windows.shape}")
        out = self.network.forward(batch)
        return out[0] if single else out

    def save(self, path) -> None:
        meta = {"kind": "model", "config": self.config.to_dict(), "t_us": self.t_us, "w": self.w,
                "x": self.x, "selection_hash": self.selection_hash, "best_epoch": self.best_epoch,
                "history": [list(h) for h in self.history]}
        write_container(path, meta, self.network.params)

    @classmethod
    def load(cls, path) -> "TrainedModel":
        meta, tensors = read_container(path)
        if meta.get("kind") != "model":
            raise ValueError(f"{path}: container holds {meta.get('kind')!r}, not a model")
        cfg = ModelConfig.from_dict(meta["config"])
        net = Autoencoder(cfg, meta["w"], meta["x"], params=tensors)
        return cls(cfg, net, meta["t_us"], meta["selection_hash"],
                   [tuple(h) for h in meta["history"]], meta["best_epoch"])

    def history_csv(self) -> str:
        rows = ["epoch,train_mse,val_mse"]
        rows += [f"{e},{tr!r},{va!r}" for e, tr, va in self.history]
        return "\n".join(rows) + "\n"
