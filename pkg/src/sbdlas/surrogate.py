"""Residual-correction surrogate: coarse solver plus a fully connected network.

surrogate(theta) = G_coarse(theta) + destandardize(net(standardize(theta)))

The network is plain numpy with hand-written backprop and Adam, trained on
the fine-minus-coarse residual at design points.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .models import ForwardModel

ACTIVATIONS = ("sigmoid", "tanh", "relu", "leaky_relu", "linear")
LEAKY_SLOPE = 0.25


class DivergenceError(FloatingPointError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"training loss became non-finite ({loss}) at epoch {epoch}")
        self.epoch = epoch


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "sigmoid":
        return 0.5 * (1.0 + np.tanh(0.5 * z))
    if name == "tanh":
        return np.tanh(z)
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "leaky_relu":
        return np.where(z > 0, z, LEAKY_SLOPE * z)
    if name == "linear":
        return z
    raise ValueError(f"unknown activation {name!r}")


def _act_grad(name: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    if name == "sigmoid":
        return a * (1.0 - a)
    if name == "tanh":
        return 1.0 - a * a
    if name == "relu":
        return (z > 0).astype(z.dtype)
    if name == "leaky_relu":
        return np.where(z > 0, 1.0, LEAKY_SLOPE)
    return np.ones_like(z)


@dataclass
class NetConfig:
    input_dim: int
    output_dim: int
    hidden: tuple[int, ...] = (500, 500, 500)
    activation: str = "sigmoid"
    learning_rate: float = 1e-3
    epochs: int = 200
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if any(h <= 0 for h in self.hidden):
            raise ValueError("hidden widths must be positive")
        if not self.learning_rate > 0:
            raise ValueError("learning rate must be positive")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")

    @property
    def sizes(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden, self.output_dim)


class MLP:
    """Fully connected network; weights[i] has shape (fan_out, fan_in)."""

    def __init__(self, sizes, activation: str = "sigmoid", rng: np.random.Generator | None = None):
        self.sizes = tuple(int(s) for s in sizes)
        self.activation = activation
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            self.weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
            self.biases.append(rng.uniform(-bound, bound, size=fan_out))

    @property
    def params(self) -> list[np.ndarray]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def copy(self) -> "MLP":
        new = MLP.__new__(MLP)
        new.sizes = self.sizes
        new.activation = self.activation
        new.weights = [w.copy() for w in self.weights]
        new.biases = [b.copy() for b in self.biases]
        return new

    def forward(self, X: np.ndarray, keep: bool = False):
        a = X
        cache = [(None, X)]
        last = len(self.weights) - 1
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            z = a @ W.T + b
            a = z if i == last else _act(self.activation, z)
            if keep:
                cache.append((z, a))
        return (a, cache) if keep else a

    def backward(self, cache, d_out: np.ndarray) -> list[np.ndarray]:
        """Gradients in ``params`` order given dLoss/dOutput for the batch."""
        grads_w, grads_b = [], []
        delta = d_out
        for i in range(len(self.weights) - 1, -1, -1):
            a_prev = cache[i][1]
            grads_w.append(delta.T @ a_prev)
            grads_b.append(delta.sum(axis=0))
            if i > 0:
                z, a = cache[i]
                delta = (delta @ self.weights[i]) * _act_grad(self.activation, z, a)
        grads_w.reverse()
        grads_b.reverse()
        return [g for pair in zip(grads_w, grads_b) for g in pair]

    def loss_and_grads(self, X: np.ndarray, Y: np.ndarray) -> tuple[float, list[np.ndarray]]:
        out, cache = self.forward(X, keep=True)
        r = out - Y
        loss = float(np.mean(r * r))
        return loss, self.backward(cache, 2.0 * r / r.size)


@dataclass
class TrainingSet:
    """Design points with fine outputs and the residual the network learns."""

    thetas: np.ndarray
    fine: np.ndarray
    coarse: np.ndarray

    def __post_init__(self):
        self.thetas = np.atleast_2d(np.asarray(self.thetas, dtype=float))
        self.fine = np.atleast_2d(np.asarray(self.fine, dtype=float))
        self.coarse = np.atleast_2d(np.asarray(self.coarse, dtype=float))
        m = self.thetas.shape[0]
        if m < 1:
            raise ValueError("training set is empty")
        if self.fine.shape[0] != m or self.coarse.shape != self.fine.shape:
            raise ValueError("training arrays are not dimensionally consistent")
        if not (np.all(np.isfinite(self.fine)) and np.all(np.isfinite(self.coarse))):
            raise ValueError("training outputs contain non-finite values")

    @property
    def size(self) -> int:
        return self.thetas.shape[0]

    @property
    def residuals(self) -> np.ndarray:
        return self.fine - self.coarse

    @classmethod
    def collect(cls, thetas, fine: ForwardModel, coarse: ForwardModel, workers: int = 1) -> "TrainingSet":
        thetas = np.atleast_2d(thetas)
        return cls(thetas, fine.evaluate_many(thetas, workers), coarse.evaluate_many(thetas))


def _standardization(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    shift = x.mean(axis=0)
    scale = x.std(axis=0)
    scale = np.where(scale > 1e-12 * np.maximum(1.0, np.abs(shift)), scale, 1.0)
    return shift, scale


@dataclass
class TrainReport:
    losses: list[float] = field(default_factory=list)
    final_mse: float = float("nan")
    warm_start: bool = False


class SurrogateNet(ForwardModel):
    """G_coarse plus a standardized residual network."""

    name = "surrogate"

    def __init__(self, coarse: ForwardModel, cfg: NetConfig, mlp: MLP | None = None):
        super().__init__(cfg.input_dim, cfg.output_dim)
        if coarse.input_dim != cfg.input_dim or coarse.output_dim != cfg.output_dim:
            raise ValueError("coarse model and network dimensions disagree")
        self.coarse = coarse
        self.cfg = cfg
        self.mlp = mlp if mlp is not None else MLP(cfg.sizes, cfg.activation, np.random.default_rng(cfg.seed))
        self.in_shift = np.zeros(cfg.input_dim)
        self.in_scale = np.ones(cfg.input_dim)
        self.out_shift = np.zeros(cfg.output_dim)
        self.out_scale = np.ones(cfg.output_dim)

    def residual(self, theta) -> np.ndarray:
        """Destandardized network output, i.e. surrogate minus coarse."""
        x = (np.atleast_2d(theta) - self.in_shift) / self.in_scale
        out = self.out_shift + self.out_scale * self.mlp.forward(x)
        return out[0] if np.ndim(theta) == 1 else out

    def _evaluate(self, theta):
        return self.coarse(theta) + self.residual(theta)

    def copy(self) -> "SurrogateNet":
        new = SurrogateNet(self.coarse, self.cfg, self.mlp.copy())
        new.in_shift, new.in_scale = self.in_shift.copy(), self.in_scale.copy()
        new.out_shift, new.out_scale = self.out_shift.copy(), self.out_scale.copy()
        return new

    # checkpoint format, little-endian:
    #   b"SBDNET01" | u32 n_sizes | u32 sizes[n_sizes] | u32 len | activation (ascii)
    #   f64 in_shift[p] in_scale[p] out_shift[d] out_scale[d]
    #   then per layer: f64 W[fan_out, fan_in] (row-major), f64 b[fan_out]
    MAGIC = b"SBDNET01"

    def save(self, path) -> None:
        sizes = self.mlp.sizes
        act = self.mlp.activation.encode("ascii")
        with open(path, "wb") as fh:
            fh.write(self.MAGIC)
            fh.write(struct.pack(f"<I{len(sizes)}I", len(sizes), *sizes))
            fh.write(struct.pack("<I", len(act)) + act)
            for arr in (self.in_shift, self.in_scale, self.out_shift, self.out_scale, *self.mlp.params):
                fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path, coarse: ForwardModel, cfg: NetConfig | None = None) -> "SurrogateNet":
        data = Path(path).read_bytes()
        if data[:8] != cls.MAGIC:
            raise ValueError(f"{path}: not a surrogate checkpoint")
        off = 8
        (n,) = struct.unpack_from("<I", data, off)
        off += 4
        sizes = struct.unpack_from(f"<{n}I", data, off)
        off += 4 * n
        (alen,) = struct.unpack_from("<I", data, off)
        off += 4
        activation = data[off : off + alen].decode("ascii")
        off += alen
        values = np.frombuffer(data, dtype="<f8", offset=off).astype(float)

        def take(count, shape):
            nonlocal values
            chunk, values = values[:count], values[count:]
            return chunk.reshape(shape).copy()

        if cfg is None:
            cfg = NetConfig(sizes[0], sizes[-1], tuple(sizes[1:-1]), activation)
        net = cls(coarse, cfg, MLP(sizes, activation))
        p, d = sizes[0], sizes[-1]
        net.in_shift, net.in_scale = take(p, p), take(p, p)
        net.out_shift, net.out_scale = take(d, d), take(d, d)
        for i, (fi, fo) in enumerate(zip(sizes[:-1], sizes[1:])):
            net.mlp.weights[i] = take(fi * fo, (fo, fi))
            net.mlp.biases[i] = take(fo, fo)
        if values.size:
            raise ValueError(f"{path}: {values.size} trailing values")
        return net


def forward_pass(net: SurrogateNet, theta) -> np.ndarray:
    return net(theta)


def train(
    net: SurrogateNet,
    data: TrainingSet,
    cfg: NetConfig | None = None,
    warm_start: bool = True,
    seed: int | None = None,
) -> TrainReport:
    """Fit the residual network to ``data`` in place with mini-batch Adam.

    Standardization statistics are recomputed from ``data``. With
    ``warm_start`` false the weights are re-drawn from ``seed`` first.
    """
    cfg = cfg or net.cfg
    seed = cfg.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    if not warm_start:
        net.mlp = MLP(cfg.sizes, cfg.activation, rng)

    net.in_shift, net.in_scale = _standardization(data.thetas)
    net.out_shift, net.out_scale = _standardization(data.residuals)
    X = (data.thetas - net.in_shift) / net.in_scale
    Y = (data.residuals - net.out_shift) / net.out_scale

    params = net.mlp.params
    m1 = [np.zeros_like(p) for p in params]
    m2 = [np.zeros_like(p) for p in params]
    b1, b2, eps = 0.9, 0.999, 1e-8
    lr = cfg.learning_rate
    batch = max(1, min(cfg.batch_size, data.size))
    report = TrainReport(warm_start=warm_start)
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(data.size)
        total = 0.0
        for start in range(0, data.size, batch):
            idx = order[start : start + batch]
            loss, grads = net.mlp.loss_and_grads(X[idx], Y[idx])
            if not np.isfinite(loss):
                raise DivergenceError(epoch, loss)
            total += loss * idx.size
            step += 1
            c1 = 1.0 - b1**step
            c2 = 1.0 - b2**step
            for p, g, m, v in zip(params, grads, m1, m2):
                m *= b1
                m += (1 - b1) * g
                v *= b2
                v += (1 - b2) * g * g
                p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
        report.losses.append(total / data.size)
    out = net.mlp.forward(X)
    report.final_mse = float(np.mean((out - Y) ** 2))
    if not np.isfinite(report.final_mse):
        raise DivergenceError(cfg.epochs, report.final_mse)
    return report


def gradient_check(net: SurrogateNet | MLP, data: TrainingSet, step: float = 1e-5, floor: float = 1e-6) -> float:
    """Largest relative gap between backprop and central-difference gradients.

    The loss is the training MSE on standardized inputs and residuals, so
    this checks exactly what :func:`train` optimizes. ``floor`` keeps the
    ratio meaningful for gradients that are zero up to roundoff.
    """
    if isinstance(net, SurrogateNet):
        mlp = net.mlp
        in_shift, in_scale = _standardization(data.thetas)
        out_shift, out_scale = _standardization(data.residuals)
        X = (data.thetas - in_shift) / in_scale
        Y = (data.residuals - out_shift) / out_scale
    else:
        mlp, X, Y = net, data.thetas, data.residuals
    _, grads = mlp.loss_and_grads(X, Y)
    worst = 0.0
    for p, g in zip(mlp.params, grads):
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + step
            lp = float(np.mean((mlp.forward(X) - Y) ** 2))
            flat[k] = orig - step
            lm = float(np.mean((mlp.forward(X) - Y) ** 2))
            flat[k] = orig
            fd = (lp - lm) / (2 * step)
            dev = abs(fd - gflat[k]) / max(abs(fd), abs(gflat[k]), floor)
            worst = max(worst, dev)
    return worst
