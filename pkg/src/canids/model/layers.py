"""Stateless layers with hand-written backward passes.

Each layer maps ``forward(params, x) -> (y, cache)`` and
``backward(params, cache, dy) -> (dx, grads)``. Parameters live outside the
layer so inference on a trained model is reentrant.
"""

from __future__ import annotations

import numpy as np


def sigmoid(z):
    # split by sign to avoid overflow in exp
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


_ACTIVATIONS = {
    "linear": (lambda z: z, lambda z, y: np.ones_like(y)),
    "relu": (lambda z: np.maximum(z, 0.0), lambda z, y: (z > 0).astype(z.dtype)),
    "tanh": (np.tanh, lambda z, y: 1.0 - y * y),
    "sigmoid": (sigmoid, lambda z, y: y * (1.0 - y)),
}


def _uniform(rng, shape, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Dense:
    """Affine map on the last axis followed by an activation."""

    def __init__(self, n_in: int, n_out: int, activation: str = "linear"):
        if activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.n_in, self.n_out, self.activation = n_in, n_out, activation

    def init(self, rng) -> dict[str, np.ndarray]:
        return {"W": _uniform(rng, (self.n_in, self.n_out), self.n_in, self.n_out),
                "b": np.zeros(self.n_out)}

    def forward(self, p, x):
        z = x @ p["W"] + p["b"]
        y = _ACTIVATIONS[self.activation][0](z)
        return y, (x, z, y)

    def backward(self, p, cache, dy):
        x, z, y = cache
        dz = dy * _ACTIVATIONS[self.activation][1](z, y)
        x2 = x.reshape(-1, self.n_in)
        dz2 = dz.reshape(-1, self.n_out)
        grads = {"W": x2.T @ dz2, "b": dz2.sum(axis=0)}
        return dz @ p["W"].T, grads


class Reshape:
    def __init__(self, shape: tuple[int, ...]):
        self.shape = tuple(shape)

    def init(self, rng):
        return {}

    def forward(self, p, x):
        return x.reshape((x.shape[0],) + self.shape), x.shape

    def backward(self, p, cache, dy):
        return dy.reshape(cache), {}


class RepeatVector:
    """(B, H) -> (B, T, H)."""

    def __init__(self, steps: int):
        self.steps = steps

    def init(self, rng):
        return {}

    def forward(self, p, x):
        return np.repeat(x[:, None, :], self.steps, axis=1), None

    def backward(self, p, cache, dy):
        return dy.sum(axis=1), {}


class LSTM:
    """Single-direction LSTM over (B, T, n_in); gate order i, f, g, o.

    ``reverse`` walks the sequence from the last step to the first while
    keeping outputs at their original time positions.
    """

    def __init__(self, n_in: int, hidden: int, return_sequences: bool = True, reverse: bool = False):
        self.n_in, self.hidden = n_in, hidden
        self.return_sequences, self.reverse = return_sequences, reverse

    def init(self, rng):
        H = self.hidden
        b = np.zeros(4 * H)
        b[H:2 * H] = 1.0  # forget-gate bias
        return {"W": _uniform(rng, (self.n_in, 4 * H), self.n_in, 4 * H),
                "U": _uniform(rng, (H, 4 * H), H, 4 * H),
                "b": b}

    def forward(self, p, x):
        B, T, _ = x.shape
        H = self.hidden
        xw = x @ p["W"] + p["b"]  # (B, T, 4H)
        h = np.zeros((B, H))
        c = np.zeros((B, H))
        hs = np.zeros((B, T, H))
        steps = []
        order = range(T - 1, -1, -1) if self.reverse else range(T)
        for t in order:
            z = xw[:, t] + h @ p["U"]
            i = sigmoid(z[:, :H])
            f = sigmoid(z[:, H:2 * H])
            g = np.tanh(z[:, 2 * H:3 * H])
            o = sigmoid(z[:, 3 * H:])
            c_prev, h_prev = c, h
            c = f * c_prev + i * g
            tc = np.tanh(c)
            h = o * tc
            hs[:, t] = h
            steps.append((t, i, f, g, o, c_prev, h_prev, tc))
        y = hs if self.return_sequences else h
        return y, (x, steps)

    def backward(self, p, cache, dy):
        x, steps = cache
        B, T, _ = x.shape
        H = self.hidden
        dW = np.zeros_like(p["W"])
        dU = np.zeros_like(p["U"])
        db = np.zeros_like(p["b"])
        dx = np.zeros_like(x)
        dh_next = np.zeros((B, H))
        dc_next = np.zeros((B, H))
        dz = np.empty((B, 4 * H))
        for k, (t, i, f, g, o, c_prev, h_prev, tc) in enumerate(reversed(steps)):
            dh = dh_next
            if self.return_sequences:
                dh = dh + dy[:, t]
            elif k == 0:
                dh = dh + dy
            dc = dc_next + dh * o * (1.0 - tc * tc)
            dz[:, :H] = dc * g * i * (1.0 - i)
            dz[:, H:2 * H] = dc * c_prev * f * (1.0 - f)
            dz[:, 2 * H:3 * H] = dc * i * (1.0 - g * g)
            dz[:, 3 * H:] = dh * tc * o * (1.0 - o)
            dW += x[:, t].T @ dz
            dU += h_prev.T @ dz
            db += dz.sum(axis=0)
            dx[:, t] = dz @ p["W"].T
            dh_next = dz @ p["U"].T
            dc_next = dc * f
        return dx, {"W": dW, "U": dU, "b": db}


class Bidirectional:
    """Forward and backward LSTMs of ``width // 2`` units each, concatenated."""

    def __init__(self, n_in: int, width: int, return_sequences: bool = True):
        if width % 2:
            raise ValueError("bidirectional width must be even")
        self.n_in, self.width, self.return_sequences = n_in, width, return_sequences
        self.fwd = LSTM(n_in, width // 2, return_sequences)
        self.bwd = LSTM(n_in, width // 2, return_sequences, reverse=True)

    def init(self, rng):
        params = {f"fwd.{k}": v for k, v in self.fwd.init(rng).items()}
        params.update({f"bwd.{k}": v for k, v in self.bwd.init(rng).items()})
        return params

    @staticmethod
    def _split(p, prefix):
        n = len(prefix)
        return {k[n:]: v for k, v in p.items() if k.startswith(prefix)}

    def forward(self, p, x):
        yf, cf = self.fwd.forward(self._split(p, "fwd."), x)
        yb, cb = self.bwd.forward(self._split(p, "bwd."), x)
        return np.concatenate([yf, yb], axis=-1), (cf, cb)

    def backward(self, p, cache, dy):
        half = self.width // 2
        dxf, gf = self.fwd.backward(self._split(p, "fwd."), cache[0], dy[..., :half])
        dxb, gb = self.bwd.backward(self._split(p, "bwd."), cache[1], dy[..., half:])
        grads = {f"fwd.{k}": v for k, v in gf.items()}
        grads.update({f"bwd.{k}": v for k, v in gb.items()})
        return dxf + dxb, grads


def param_count(layer) -> int:
    return sum(v.size for v in layer.init(np.random.default_rng(0)).values())
