"""Fully connected network trained with Adam, written directly in numpy.

Hidden layers are ``Linear -> BatchNorm -> ReLU``; the output layer is linear.
Inputs and targets are min/max scaled into [0, 1] and the loss is the mean
squared error on the scaled targets.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

FORMAT_VERSION = 1


class NonFiniteLoss(RuntimeError):
    def __init__(self, epoch: int):
        super().__init__(f"loss became non-finite in epoch {epoch}")
        self.epoch = epoch


@dataclass
class MinMaxScaler:
    low: np.ndarray
    high: np.ndarray

    @classmethod
    def fit(cls, data: np.ndarray) -> "MinMaxScaler":
        return cls(np.min(data, axis=0), np.max(data, axis=0))

    @property
    def span(self) -> np.ndarray:
        span = np.asarray(self.high) - np.asarray(self.low)
        return np.where(span > 0, span, 1.0)

    def transform(self, x):
        return (np.asarray(x, dtype=float) - self.low) / self.span

    def inverse(self, y):
        return np.asarray(y, dtype=float) * self.span + self.low


@dataclass
class TrainConfig:
    hidden_layers: int = 4
    width: int = 128
    batch: int = 256
    lr: float = 1e-3
    lr_decay: float = 0.97
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    target_loss: float = 1e-4
    max_epochs: int = 150
    batch_norm: bool = True
    seed: int = 0


@dataclass
class TrainResult:
    loss_curve: list[float]
    batch_losses: list[float] = field(repr=False, default_factory=list)
    epochs: int = 0
    reached_target: bool = False

    @property
    def final_loss(self) -> float:
        return self.loss_curve[-1]


class MlpModel:
    """Weights, batch-norm statistics and the two scalers of a trained network."""

    bn_momentum = 0.1
    bn_eps = 1e-5

    def __init__(self, sizes: list[int], batch_norm: bool = True, seed: int = 0,
                 in_scaler: MinMaxScaler | None = None, out_scaler: MinMaxScaler | None = None):
        if len(sizes) < 2:
            raise ValueError("need at least input and output sizes")
        self.sizes = [int(s) for s in sizes]
        self.batch_norm = bool(batch_norm)
        rng = np.random.default_rng(seed)
        self.weights, self.biases = [], []
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            limit = math.sqrt(6.0 / fan_in)
            self.weights.append(rng.uniform(-limit, limit, (fan_in, fan_out)))
            self.biases.append(np.zeros(fan_out))
        hidden = self.sizes[1:-1]
        self.gamma = [np.ones(h) for h in hidden]
        self.beta = [np.zeros(h) for h in hidden]
        self.running_mean = [np.zeros(h) for h in hidden]
        self.running_var = [np.ones(h) for h in hidden]
        self.in_scaler = in_scaler or MinMaxScaler(np.zeros(self.sizes[0]), np.ones(self.sizes[0]))
        self.out_scaler = out_scaler or MinMaxScaler(np.zeros(self.sizes[-1]), np.ones(self.sizes[-1]))

    @property
    def n_in(self) -> int:
        return self.sizes[0]

    @property
    def n_out(self) -> int:
        return self.sizes[-1]

    def parameters(self) -> list[np.ndarray]:
        params = []
        for k in range(len(self.weights)):
            params += [self.weights[k], self.biases[k]]
            if self.batch_norm and k < len(self.gamma):
                params += [self.gamma[k], self.beta[k]]
        return params

    # ------------------------------------------------------------ inference

    def forward_scaled(self, xn: np.ndarray) -> np.ndarray:
        h = xn
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if k == last:
                break
            if self.batch_norm:
                h = (h - self.running_mean[k]) / np.sqrt(self.running_var[k] + self.bn_eps)
                h = self.gamma[k] * h + self.beta[k]
            h = np.maximum(h, 0.0)
        return h

    def predict(self, x) -> np.ndarray:
        """Network output in physical units for raw inputs ``(..., n_in)``."""
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.n_in:
            raise ValueError(f"input has {x.shape[-1]} features, model expects {self.n_in}")
        flat = x.reshape(-1, self.n_in)
        out = self.out_scaler.inverse(self.forward_scaled(self.in_scaler.transform(flat)))
        return out.reshape(x.shape[:-1] + (self.n_out,))

    __call__ = predict

    # ------------------------------------------------------------- training

    def _train_forward(self, xn):
        cache = []
        h = xn
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w + b
            if k == last:
                cache.append((h, None))
                return z, cache
            if self.batch_norm:
                mu = z.mean(axis=0)
                var = z.var(axis=0)
                inv_std = 1.0 / np.sqrt(var + self.bn_eps)
                xhat = (z - mu) * inv_std
                y = self.gamma[k] * xhat + self.beta[k]
                bn = (xhat, inv_std, mu, var)
            else:
                y, bn = z, None
            cache.append((h, bn, y > 0))
            h = np.maximum(y, 0.0)
        raise AssertionError("unreachable")

    def loss_and_grads(self, xn, yn):
        """Training-mode MSE on scaled data and gradients aligned with :meth:`parameters`."""
        out, cache = self._train_forward(xn)
        diff = out - yn
        loss = float(np.mean(diff**2))
        grad = 2.0 * diff / diff.size
        grads_w, grads_b, grads_g, grads_be = [], [], [], []
        last = len(self.weights) - 1
        for k in range(last, -1, -1):
            h_in = cache[k][0]
            grads_w.append(h_in.T @ grad)
            grads_b.append(grad.sum(axis=0))
            if k == 0:
                break
            grad = grad @ self.weights[k].T
            _, bn, active = cache[k - 1]
            grad = grad * active
            if self.batch_norm:
                xhat, inv_std, _, _ = bn
                grads_g.append((grad * xhat).sum(axis=0))
                grads_be.append(grad.sum(axis=0))
                dxhat = grad * self.gamma[k - 1]
                m = dxhat.shape[0]
                grad = inv_std / m * (m * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
        grads_w.reverse()
        grads_b.reverse()
        grads_g.reverse()
        grads_be.reverse()
        grads = []
        for k in range(len(self.weights)):
            grads += [grads_w[k], grads_b[k]]
            if self.batch_norm and k < len(self.gamma):
                grads += [grads_g[k], grads_be[k]]
        return loss, grads, cache

    def _update_running(self, cache):
        if not self.batch_norm:
            return
        mom = self.bn_momentum
        for k, entry in enumerate(cache[:-1]):
            _, (_, _, mu, var), _ = entry
            m = entry[0].shape[0]
            unbiased = var * m / max(m - 1, 1)
            self.running_mean[k] = (1 - mom) * self.running_mean[k] + mom * mu
            self.running_var[k] = (1 - mom) * self.running_var[k] + mom * unbiased

    def calibrate(self, xn: np.ndarray, batch: int = 4096) -> None:
        """Replace running statistics by exact full-data statistics."""
        if not self.batch_norm:
            return
        h = xn
        for k in range(len(self.gamma)):
            z = h @ self.weights[k] + self.biases[k]
            self.running_mean[k] = z.mean(axis=0)
            self.running_var[k] = z.var(axis=0)
            y = (z - self.running_mean[k]) / np.sqrt(self.running_var[k] + self.bn_eps)
            h = np.maximum(self.gamma[k] * y + self.beta[k], 0.0)

    # ---------------------------------------------------------- persistence

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "sizes": self.sizes,
            "batch_norm": self.batch_norm,
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
            "gamma": [g.tolist() for g in self.gamma],
            "beta": [b.tolist() for b in self.beta],
            "running_mean": [m.tolist() for m in self.running_mean],
            "running_var": [v.tolist() for v in self.running_var],
            "input_range": [np.asarray(self.in_scaler.low).tolist(), np.asarray(self.in_scaler.high).tolist()],
            "output_range": [np.asarray(self.out_scaler.low).tolist(), np.asarray(self.out_scaler.high).tolist()],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlpModel":
        if d.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported model format {d.get('format_version')}")
        m = cls(d["sizes"], d["batch_norm"])
        arr = lambda xs: [np.asarray(x, dtype=float) for x in xs]
        m.weights, m.biases = arr(d["weights"]), arr(d["biases"])
        m.gamma, m.beta = arr(d["gamma"]), arr(d["beta"])
        m.running_mean, m.running_var = arr(d["running_mean"]), arr(d["running_var"])
        m.in_scaler = MinMaxScaler(*(np.asarray(v, dtype=float) for v in d["input_range"]))
        m.out_scaler = MinMaxScaler(*(np.asarray(v, dtype=float) for v in d["output_range"]))
        return m

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "MlpModel":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def train(inputs: np.ndarray, targets: np.ndarray, config: TrainConfig | None = None):
    """Fit a network to ``(inputs, targets)``; returns ``(model, TrainResult)``.

    Each epoch visits a seeded permutation of the data in minibatches; the
    epoch loss is the mean of the minibatch losses. Training stops once it
    falls to ``target_loss``.
    """
    config = config or TrainConfig()
    x = np.asarray(inputs, dtype=float)
    y = np.asarray(targets, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    if x.shape[0] == 0:
        raise ValueError("no training data")
    if x.shape[0] != y.shape[0]:
        raise ValueError("inputs and targets differ in length")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValueError("training data must be finite")
    in_scaler, out_scaler = MinMaxScaler.fit(x), MinMaxScaler.fit(y)
    sizes = [x.shape[1]] + [config.width] * config.hidden_layers + [y.shape[1]]
    model = MlpModel(sizes, config.batch_norm, config.seed, in_scaler, out_scaler)
    xn, yn = in_scaler.transform(x), out_scaler.transform(y)
    rng = np.random.default_rng([config.seed, 1])
    params = model.parameters()
    m1 = [np.zeros_like(p) for p in params]
    m2 = [np.zeros_like(p) for p in params]
    step = 0
    result = TrainResult([])
    n = x.shape[0]
    # a trailing batch of one would make batch-norm statistics degenerate
    min_batch = 2 if config.batch_norm else 1
    for epoch in range(1, config.max_epochs + 1):
        lr = config.lr * config.lr_decay ** (epoch - 1)
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, config.batch):
            idx = order[start:start + config.batch]
            if idx.size < min_batch:
                continue
            loss, grads, cache = model.loss_and_grads(xn[idx], yn[idx])
            if not math.isfinite(loss):
                raise NonFiniteLoss(epoch)
            losses.append(loss)
            model._update_running(cache)
            step += 1
            c1 = 1 - config.beta1**step
            c2 = 1 - config.beta2**step
            for p, g, a, b in zip(params, grads, m1, m2):
                a *= config.beta1
                a += (1 - config.beta1) * g
                b *= config.beta2
                b += (1 - config.beta2) * g * g
                p -= lr * (a / c1) / (np.sqrt(b / c2) + config.adam_eps)
        epoch_loss = float(np.mean(losses))
        result.loss_curve.append(epoch_loss)
        result.batch_losses.extend(losses)
        result.epochs = epoch
        if epoch_loss <= config.target_loss:
            result.reached_target = True
            break
    return model, result


def mse(model: MlpModel, inputs, targets) -> float:
    """Inference-mode MSE on scaled targets."""
    pred = model.forward_scaled(model.in_scaler.transform(np.asarray(inputs, dtype=float)))
    yn = model.out_scaler.transform(np.asarray(targets, dtype=float).reshape(pred.shape))
    return float(np.mean((pred - yn) ** 2))


def gradient_check(model: MlpModel, inputs, targets, epsilon: float = 1e-5) -> float:
    """Largest relative difference between backprop and central differences.

    Inputs and targets are taken as already scaled. The relative error of a
    parameter tensor is ``|g_a - g_n| / (|g_a| + |g_n|)`` in the Frobenius
    norm. The denominator is floored at ``1e-6`` so tensors whose true
    gradient vanishes (biases feeding a batch-norm layer) are not scored on
    round-off alone.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError("epsilon must lie in [1e-7, 1e-3]")
    xn = np.asarray(inputs, dtype=float)
    yn = np.asarray(targets, dtype=float)
    _, grads, _ = model.loss_and_grads(xn, yn)
    worst = 0.0
    for p, g in zip(model.parameters(), grads):
        num = np.zeros_like(p)
        flat, nflat = p.reshape(-1), num.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + epsilon
            lp = model.loss_and_grads(xn, yn)[0]
            flat[i] = old - epsilon
            lm = model.loss_and_grads(xn, yn)[0]
            flat[i] = old
            nflat[i] = (lp - lm) / (2 * epsilon)
        denom = max(np.linalg.norm(g) + np.linalg.norm(num), 1e-6)
        worst = max(worst, float(np.linalg.norm(g - num) / denom))
    return worst
