"""Small dense feed-forward networks in numpy.

Forward pass, exact reverse-mode gradients of the mean squared error, and
mini-batch SGD with Polyak iterate averaging (averaged SGD).  Inputs and
targets are standardized with train-set statistics that travel with the
model, so :func:`predict` maps raw inputs to raw outputs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

ACTIVATIONS = ("relu", "identity")


@dataclass
class DenseLayer:
    weights: np.ndarray  # (out, in)
    bias: np.ndarray
    activation: str = "relu"

    def __post_init__(self):
        self.weights = np.atleast_2d(np.asarray(self.weights, dtype=float))
        self.bias = np.asarray(self.bias, dtype=float).reshape(-1)
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.bias.shape != (self.weights.shape[0],):
            raise ValueError("bias length must equal the layer's output dimension")
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.bias))):
            raise ValueError("layer parameters must be finite")

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]


@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, data: np.ndarray, eps: float = 1e-8) -> "Standardizer":
        data = np.asarray(data, dtype=float)
        return cls(data.mean(axis=0), np.maximum(data.std(axis=0), eps))

    @classmethod
    def identity(cls, dim: int) -> "Standardizer":
        return cls(np.zeros(dim), np.ones(dim))

    def transform(self, x):
        return (x - self.mean) / self.std

    def inverse(self, z):
        return z * self.std + self.mean


@dataclass
class Mlp:
    layers: list[DenseLayer]
    x_scale: Standardizer | None = None
    y_scale: Standardizer | None = None

    def __post_init__(self):
        if not self.layers:
            raise ValueError("an Mlp needs at least one layer")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.out_dim != b.in_dim:
                raise ValueError(f"layer dims do not chain: {a.out_dim} -> {b.in_dim}")
        if self.x_scale is None:
            self.x_scale = Standardizer.identity(self.in_dim)
        if self.y_scale is None:
            self.y_scale = Standardizer.identity(self.out_dim)

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def dims(self) -> list[int]:
        return [self.in_dim] + [layer.out_dim for layer in self.layers]

    def copy(self) -> "Mlp":
        return Mlp([DenseLayer(l.weights.copy(), l.bias.copy(), l.activation) for l in self.layers],
                   Standardizer(self.x_scale.mean.copy(), self.x_scale.std.copy()),
                   Standardizer(self.y_scale.mean.copy(), self.y_scale.std.copy()))

    def params(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out += [layer.weights, layer.bias]
        return out


def parameter_count(mlp: Mlp) -> int:
    return sum(p.size for p in mlp.params())


def build_mlp(dims, seed: int | np.random.Generator = 0, hidden: str = "relu",
              output: str = "identity") -> Mlp:
    """Layers ``dims[0] -> dims[1] -> ... -> dims[-1]``.

    He-uniform init for ReLU layers, Xavier-uniform for Identity layers,
    zero biases.
    """
    if len(dims) < 2:
        raise ValueError("need at least input and output dimensions")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    layers = []
    for k, (n_in, n_out) in enumerate(zip(dims[:-1], dims[1:])):
        act = output if k == len(dims) - 2 else hidden
        limit = np.sqrt(6.0 / n_in) if act == "relu" else np.sqrt(6.0 / (n_in + n_out))
        layers.append(DenseLayer(rng.uniform(-limit, limit, (n_out, n_in)), np.zeros(n_out), act))
    return Mlp(layers)


def _check_input(mlp: Mlp, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != mlp.in_dim:
        raise ValueError(f"input has dimension {x.shape[-1]}, network expects {mlp.in_dim}")
    return x


def _forward_trace(mlp: Mlp, x: np.ndarray):
    acts = [x]
    pres = []
    for layer in mlp.layers:
        z = acts[-1] @ layer.weights.T + layer.bias
        pres.append(z)
        acts.append(np.maximum(z, 0.0) if layer.activation == "relu" else z)
    return acts, pres


def forward(mlp: Mlp, x) -> np.ndarray:
    """Raw network output (no standardization) for one vector or a row batch."""
    x = _check_input(mlp, x)
    return _forward_trace(mlp, x)[0][-1]


def predict(mlp: Mlp, x) -> np.ndarray:
    """Network output in target units: standardize, forward, de-standardize."""
    x = _check_input(mlp, x)
    return mlp.y_scale.inverse(forward(mlp, mlp.x_scale.transform(x)))


def mse_loss(pred, target) -> float:
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    return float(np.mean((pred - target) ** 2))


def backward(mlp: Mlp, acts, pres, d_out: np.ndarray) -> list[np.ndarray]:
    """Parameter gradients given ``d loss / d output`` for a row batch."""
    grads: list[np.ndarray] = []
    delta = d_out
    for k in range(len(mlp.layers) - 1, -1, -1):
        layer = mlp.layers[k]
        if layer.activation == "relu":
            delta = delta * (pres[k] > 0)
        grads = [delta.T @ acts[k], delta.sum(axis=0)] + grads
        if k:
            delta = delta @ layer.weights
    return grads


def gradients(mlp: Mlp, x, target) -> list[np.ndarray]:
    """Exact gradient of the mean batch MSE w.r.t. ``[W1, b1, W2, b2, ...]``.

    The loss averages over samples and output components; the ReLU
    subgradient at zero is taken as 0.
    """
    x = np.atleast_2d(_check_input(mlp, x))
    target = np.atleast_2d(np.asarray(target, dtype=float))
    acts, pres = _forward_trace(mlp, x)
    return backward(mlp, acts, pres, 2.0 * (acts[-1] - target) / acts[-1].size)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.001
    epochs: int = 3000
    batch_size: int = 32
    seed: int = 0
    averaging_start: int | None = None  # defaults to epochs // 2
    standardize: bool = True

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    @property
    def average_from(self) -> int:
        return self.epochs // 2 if self.averaging_start is None else self.averaging_start


@dataclass
class History:
    train: list[float] = field(default_factory=list)
    val: list[float] = field(default_factory=list)

    def to_rows(self):
        return [(k, t, v) for k, (t, v) in enumerate(zip(self.train, self.val or [np.nan] * len(self.train)))]


@dataclass
class TrainResult:
    model: Mlp
    history: History


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int):
        super().__init__(f"training loss became non-finite; last finite epoch {epoch}")
        self.last_finite_epoch = epoch


# hook(pred_raw_batch, sample_indices) -> (loss, d loss / d pred_raw)
ExtraLoss = Callable[[np.ndarray, np.ndarray], tuple[float, np.ndarray]]


def train(mlp: Mlp, x_train, y_train, x_val=None, y_val=None, cfg: TrainConfig = TrainConfig(),
          extra_loss: ExtraLoss | None = None) -> TrainResult:
    """Mini-batch SGD on standardized data with Polyak averaging.

    From epoch ``cfg.average_from`` on, the running average of the iterates
    (updated after every step) is what gets evaluated and returned.  History
    losses are MSE in target units.
    """
    x_train = np.atleast_2d(np.asarray(x_train, dtype=float))
    y_train = np.atleast_2d(np.asarray(y_train, dtype=float))
    if len(x_train) == 0:
        raise ValueError("empty training set")
    if len(x_train) != len(y_train):
        raise ValueError("inputs and targets differ in length")
    model = mlp.copy()
    if cfg.standardize:
        model.x_scale = Standardizer.fit(x_train)
        model.y_scale = Standardizer.fit(y_train)
    xs = model.x_scale.transform(x_train)
    ys = model.y_scale.transform(y_train)
    has_val = x_val is not None and len(x_val) > 0
    rng = np.random.default_rng(cfg.seed)
    params = model.params()
    avg = None
    n_avg = 0
    history = History()
    n = len(xs)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            acts, pres = _forward_trace(model, xs[idx])
            out = acts[-1]
            d_out = 2.0 * (out - ys[idx]) / out.size
            if extra_loss is not None:
                _, d_raw = extra_loss(model.y_scale.inverse(out), idx)
                d_out = d_out + d_raw * model.y_scale.std
            for p, g in zip(params, backward(model, acts, pres, d_out)):
                p -= cfg.lr * g
            if epoch >= cfg.average_from:
                n_avg += 1
                if avg is None:
                    avg = [p.copy() for p in params]
                else:
                    for a, p in zip(avg, params):
                        a += (p - a) / n_avg
        current = _with_params(model, avg) if avg is not None else model
        loss = mse_loss(predict(current, x_train), y_train)
        if not np.isfinite(loss):
            raise TrainingDiverged(epoch - 1)
        history.train.append(loss)
        if has_val:
            history.val.append(mse_loss(predict(current, x_val), y_val))
    final = _with_params(model, avg) if avg is not None else model
    return TrainResult(final, history)


def _with_params(model: Mlp, values: list[np.ndarray]) -> Mlp:
    out = model.copy()
    for p, v in zip(out.params(), values):
        p[...] = v
    return out


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def mlp_to_dict(mlp: Mlp) -> dict:
    return {
        "dims": mlp.dims,
        "layers": [{"weights": l.weights.tolist(), "bias": l.bias.tolist(), "activation": l.activation}
                   for l in mlp.layers],
        "x_mean": mlp.x_scale.mean.tolist(), "x_std": mlp.x_scale.std.tolist(),
        "y_mean": mlp.y_scale.mean.tolist(), "y_std": mlp.y_scale.std.tolist(),
    }


def mlp_from_dict(d: dict) -> Mlp:
    layers = [DenseLayer(np.array(l["weights"], dtype=float).reshape(o, i), l["bias"], l["activation"])
              for l, i, o in zip(d["layers"], d["dims"][:-1], d["dims"][1:])]
    return Mlp(layers, Standardizer(np.array(d["x_mean"], dtype=float), np.array(d["x_std"], dtype=float)),
               Standardizer(np.array(d["y_mean"], dtype=float), np.array(d["y_std"], dtype=float)))


def save_mlp(mlp: Mlp, path) -> None:
    with open(path, "w") as fh:
        json.dump(mlp_to_dict(mlp), fh)


def load_mlp(path) -> Mlp:
    with open(path) as fh:
        return mlp_from_dict(json.load(fh))


def mlp_equal(a: Mlp, b: Mlp) -> bool:
    """Exact parameter and statistics equality."""
    if a.dims != b.dims or [l.activation for l in a.layers] != [l.activation for l in b.layers]:
        return False
    pairs = list(zip(a.params(), b.params())) + [
        (a.x_scale.mean, b.x_scale.mean), (a.x_scale.std, b.x_scale.std),
        (a.y_scale.mean, b.y_scale.mean), (a.y_scale.std, b.y_scale.std)]
    return all(np.array_equal(p, q) for p, q in pairs)
