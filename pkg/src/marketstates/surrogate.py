"""NumPy multilayer perceptron used as a surrogate for the k-means labels.

The default architecture is a deep dense stack (256 selu, 128 relu, 128 relu,
1024 leaky 0.05, 128 leaky 0.01, dropout 0.3, softmax output) trained for 100
epochs on a third of the data with categorical cross-entropy and Adam.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import PipelineError

logger = logging.getLogger(__name__)

SELU_ALPHA = 1.67326324
SELU_SCALE = 1.05070098
ACTIVATIONS = ("selu", "relu", "leaky", "softmax")


# --- activations -----------------------------------------------------------

def relu(z):
    return np.maximum(0.0, z)


def leaky_relu(z, alpha: float):
    return np.maximum(alpha * z, z)


def selu(z):
    z = np.asarray(z, dtype=float)
    return SELU_SCALE * np.where(z >= 0, z, SELU_ALPHA * np.expm1(np.minimum(z, 0.0)))


def activation(kind: str, parameter: float | None, z):
    if kind == "relu":
        return relu(z)
    if kind == "leaky":
        return leaky_relu(z, parameter)
    if kind == "selu":
        return selu(z)
    if kind == "softmax":
        return softmax(z)
    raise PipelineError("surrogate.activation", f"unknown activation {kind!r}")


def _activation_grad(kind: str, parameter: float | None, z: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return (z > 0).astype(float)
    if kind == "leaky":
        return np.where(z > 0, 1.0, parameter)
    if kind == "selu":
        return SELU_SCALE * np.where(z >= 0, 1.0, SELU_ALPHA * np.exp(np.minimum(z, 0.0)))
    raise PipelineError("surrogate.activation", f"no elementwise derivative for {kind!r}")


def softmax(logits):
    z = np.asarray(logits, dtype=float)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# --- network description ---------------------------------------------------

@dataclass(frozen=True)
class LayerSpec:
    kind: str  # "dense" or "dropout"
    units: int | None = None
    activation: str | None = None
    parameter: float | None = None  # leaky slope or dropout rate


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple[LayerSpec, ...]
    input_dim: int = 8
    output_dim: int = 8

    def __post_init__(self):
        op = "surrogate.NetworkSpec"
        if not self.layers:
            raise PipelineError(op, "network needs at least one layer")
        last = self.layers[-1]
        if last.kind != "dense" or last.activation != "softmax" or last.units != self.output_dim:
            raise PipelineError(op, f"final layer must be dense softmax with {self.output_dim} units")
        for i, layer in enumerate(self.layers):
            if layer.kind == "dropout":
                if layer.parameter is None or not 0 < layer.parameter < 1:
                    raise PipelineError(op, f"layer {i}: dropout rate must lie in (0, 1)")
            elif layer.kind == "dense":
                if layer.units is None or layer.units < 1 or layer.activation not in ACTIVATIONS:
                    raise PipelineError(op, f"layer {i}: bad dense layer {layer}")
                if layer.activation == "softmax" and i != len(self.layers) - 1:
                    raise PipelineError(op, f"layer {i}: softmax only allowed on the output layer")
                if layer.activation == "leaky" and layer.parameter is None:
                    raise PipelineError(op, f"layer {i}: leaky activation needs a slope")
            else:
                raise PipelineError(op, f"layer {i}: unknown kind {layer.kind!r}")

    def dense_shapes(self) -> list[tuple[int, int]]:
        shapes, fan_in = [], self.input_dim
        for layer in self.layers:
            if layer.kind == "dense":
                shapes.append((fan_in, layer.units))
                fan_in = layer.units
        return shapes

    def without_dropout(self) -> "NetworkSpec":
        return NetworkSpec(
            tuple(l for l in self.layers if l.kind != "dropout"), self.input_dim, self.output_dim
        )

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "output_dim": self.output_dim,
            "layers": [
                {"kind": l.kind, "units": l.units, "activation": l.activation, "parameter": l.parameter}
                for l in self.layers
            ],
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> "NetworkSpec":
        return cls(
            tuple(LayerSpec(**layer) for layer in doc["layers"]),
            int(doc["input_dim"]),
            int(doc["output_dim"]),
        )


def surrogate_spec(input_dim: int = 8, output_dim: int = 8, width_divisor: int = 1) -> NetworkSpec:
    """The surrogate architecture, optionally with every hidden width divided."""

    def w(units):
        return max(1, units // width_divisor)

    return NetworkSpec(
        (
            LayerSpec("dense", w(256), "selu"),
            LayerSpec("dense", w(128), "relu"),
            LayerSpec("dense", w(128), "relu"),
            LayerSpec("dense", w(1024), "leaky", 0.05),
            LayerSpec("dense", w(128), "leaky", 0.01),
            LayerSpec("dropout", parameter=0.3),
            LayerSpec("dense", output_dim, "softmax"),
        ),
        input_dim,
        output_dim,
    )


def softmax_regression_spec(input_dim: int = 8, output_dim: int = 8) -> NetworkSpec:
    return NetworkSpec((LayerSpec("dense", output_dim, "softmax"),), input_dim, output_dim)


@dataclass
class TrainedNetwork:
    spec: NetworkSpec
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    seed: int = 0
    epochs: int = 0
    loss_history: list[float] = field(default_factory=list)

    def check_finite(self):
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
                raise PipelineError("surrogate.train", f"non-finite parameters in dense layer {i}")


def init_network(spec: NetworkSpec, rng: np.random.Generator | int = 0) -> TrainedNetwork:
    """Uniform fan-in-scaled weights ``U(-sqrt(6/fan_in), +sqrt(6/fan_in))``, zero biases."""
    seed = rng if isinstance(rng, (int, np.integer)) else 0
    rng = np.random.default_rng(rng) if isinstance(rng, (int, np.integer)) else rng
    weights, biases = [], []
    for fan_in, fan_out in spec.dense_shapes():
        limit = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return TrainedNetwork(spec, weights, biases, seed=int(seed))


# --- forward / backward ----------------------------------------------------

def _forward(net: TrainedNetwork, X: np.ndarray, training: bool, rng, cache: list | None):
    a = X
    dense = 0
    for index, layer in enumerate(net.spec.layers):
        if layer.kind == "dropout":
            mask = None
            if training:
                keep = 1.0 - layer.parameter
                mask = (rng.random(a.shape) < keep) / keep
                a = a * mask
            if cache is not None:
                cache.append(mask)
            continue
        W, b = net.weights[dense], net.biases[dense]
        z = a @ W + b
        if cache is not None:
            cache.append((a, z))
        a = activation(layer.activation, layer.parameter, z)
        if not np.all(np.isfinite(a)):
            raise PipelineError("surrogate.forward", f"non-finite activations in layer {index}")
        dense += 1
    return a


def forward(net: TrainedNetwork, x, training_mode: bool = False, rng=None) -> np.ndarray:
    """Class probabilities for one input (``(d,)``) or a batch (``(n, d)``).

    Dropout is applied only with ``training_mode`` (inverted scaling, so the
    inference path needs no rescaling) and then requires ``rng``.
    """
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise PipelineError("surrogate.forward", "input contains non-finite values")
    if training_mode and rng is None:
        rng = np.random.default_rng()
    single = x.ndim == 1
    out = _forward(net, np.atleast_2d(x), training_mode, rng, None)
    return out[0] if single else out


def cross_entropy(probs: np.ndarray, labels: np.ndarray) -> float:
    picked = probs[np.arange(len(labels)), labels]
    return float(-np.mean(np.log(np.maximum(picked, np.finfo(float).tiny))))


def loss_and_grads(net: TrainedNetwork, X, labels, training: bool = False, rng=None):
    """Mean cross-entropy over the batch and its gradients per dense layer."""
    cache: list = []
    probs = _forward(net, X, training, rng, cache)
    loss = cross_entropy(probs, labels)
    delta = probs.copy()
    delta[np.arange(len(labels)), labels] -= 1.0
    delta /= len(labels)  # d loss / d logits
    grads_w: list = [None] * len(net.weights)
    grads_b: list = [None] * len(net.biases)
    dense = len(net.weights)
    grad_a = None
    for layer, entry in zip(reversed(net.spec.layers), reversed(cache)):
        if layer.kind == "dropout":
            if entry is not None:
                grad_a = grad_a * entry
            continue
        dense -= 1
        a_prev, z = entry
        if layer.activation == "softmax":
            dz = delta
        else:
            dz = grad_a * _activation_grad(layer.activation, layer.parameter, z)
        grads_w[dense] = a_prev.T @ dz
        grads_b[dense] = dz.sum(axis=0)
        grad_a = dz @ net.weights[dense].T
    return loss, grads_w, grads_b


def gradient_check(
    spec: NetworkSpec,
    x,
    label,
    seed: int = 0,
    step: float = 1e-5,
    floor: float = 1e-6,
    net: TrainedNetwork | None = None,
) -> float:
    """Largest relative gap between backprop and central finite differences.

    Dropout layers are skipped. Each parameter's error is
    ``|g - g_fd| / max(|g|, |g_fd|, floor)``; below ``floor`` the difference
    quotient is dominated by rounding (about ``eps * loss / step``), so tiny
    gradients are compared on an absolute scale instead.
    """
    spec = spec.without_dropout()
    X = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(label, dtype=int))
    if net is None:
        net = init_network(spec, seed)
    else:
        net = TrainedNetwork(spec, [w.copy() for w in net.weights], [b.copy() for b in net.biases])
    _, gw, gb = loss_and_grads(net, X, y)
    worst = 0.0
    for params, grads in ((net.weights, gw), (net.biases, gb)):
        for p, g in zip(params, grads):
            flat, gflat = p.reshape(-1), g.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                up = cross_entropy(_forward(net, X, False, None, None), y)
                flat[i] = orig - step
                down = cross_entropy(_forward(net, X, False, None, None), y)
                flat[i] = orig
                fd = (up - down) / (2 * step)
                denom = max(abs(gflat[i]), abs(fd), floor)
                worst = max(worst, abs(gflat[i] - fd) / denom)
    return worst


# --- training --------------------------------------------------------------

@dataclass(frozen=True)
class OptimizerConfig:
    name: str = "adam"  # or "sgd"
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int | None = 32  # None -> full batch


class _Adam:
    def __init__(self, params, cfg: OptimizerConfig):
        self.cfg = cfg
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads):
        c = self.cfg
        self.t += 1
        bc1 = 1 - c.beta1 ** self.t
        bc2 = 1 - c.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= c.beta1
            m += (1 - c.beta1) * g
            v *= c.beta2
            v += (1 - c.beta2) * g * g
            p -= c.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + c.epsilon)


class _SGD:
    def __init__(self, params, cfg: OptimizerConfig):
        self.cfg = cfg

    def step(self, params, grads):
        for p, g in zip(params, grads):
            p -= self.cfg.learning_rate * g


def split_thirds(n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Random partition of ``range(n)`` into train, test and validation thirds."""
    parts = np.array_split(rng.permutation(n), 3)
    if any(len(p) == 0 for p in parts):
        raise PipelineError("surrogate.train", f"{n} samples cannot fill three non-empty splits")
    return parts[0], parts[1], parts[2]


def accuracy(net: TrainedNetwork, X, labels) -> float:
    return float(np.mean(np.argmax(forward(net, X), axis=1) == np.asarray(labels)))


def train(
    spec: NetworkSpec,
    features,
    labels,
    seed: int = 0,
    epochs: int = 100,
    optimizer: OptimizerConfig = OptimizerConfig(),
) -> tuple[TrainedNetwork, float]:
    """Fit the network on a random third of the data and score it on another third.

    ``seed`` fixes the split, initial weights, mini-batch order and dropout masks.
    Returns the trained network and its accuracy on the test third; the
    validation third is left untouched.
    """
    op = "surrogate.train"
    X = np.asarray(features, dtype=float)
    y = np.asarray(labels, dtype=int)
    if X.ndim != 2 or X.shape[1] != spec.input_dim or len(y) != len(X):
        raise PipelineError(op, f"features must be (N, {spec.input_dim}) with one label per row")
    if len(X) < 24:
        raise PipelineError(op, f"need at least 24 samples, got {len(X)}")
    if y.min() < 0 or y.max() >= spec.output_dim:
        raise PipelineError(op, f"labels must lie in [0, {spec.output_dim})")
    split_ss, init_ss, order_ss, drop_ss = np.random.SeedSequence(seed).spawn(4)
    train_idx, test_idx, _ = split_thirds(len(X), np.random.default_rng(split_ss))
    net = init_network(spec, np.random.default_rng(init_ss))
    net.seed = seed
    order_rng = np.random.default_rng(order_ss)
    drop_rng = np.random.default_rng(drop_ss)
    params = net.weights + net.biases
    opt = (_Adam if optimizer.name == "adam" else _SGD)(params, optimizer)
    Xt, yt = X[train_idx], y[train_idx]
    batch = optimizer.batch_size or len(Xt)
    for epoch in range(epochs):
        order = order_rng.permutation(len(Xt)) if batch < len(Xt) else np.arange(len(Xt))
        total = 0.0
        for start in range(0, len(Xt), batch):
            rows = order[start:start + batch]
            try:
                loss, gw, gb = loss_and_grads(net, Xt[rows], yt[rows], training=True, rng=drop_rng)
            except PipelineError as exc:
                raise PipelineError(op, f"seed {seed}, epoch {epoch}: {exc.detail}") from None
            if not np.isfinite(loss):
                raise PipelineError(op, f"loss diverged at seed {seed}, epoch {epoch}")
            opt.step(params, gw + gb)
            total += loss * len(rows)
        net.loss_history.append(total / len(Xt))
        net.epochs = epoch + 1
    net.check_finite()
    return net, accuracy(net, X[test_idx], y[test_idx])


# --- selection comparison --------------------------------------------------

@dataclass(frozen=True)
class AccuracyReport:
    selection_method: str
    accuracies: np.ndarray
    seeds: tuple[int, ...]
    selections: tuple[tuple[int, ...], ...]

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def std(self) -> float:
        """Population standard deviation (0 for a single run)."""
        return float(np.std(self.accuracies))


def _train_job(args):
    spec, X, y, seed, epochs, optimizer = args
    return train(spec, X, y, seed=seed, epochs=epochs, optimizer=optimizer)[1]


def run_selection(
    method: str,
    features,
    labels,
    selections: Sequence[Sequence[int]],
    seeds: Sequence[int],
    spec: NetworkSpec | None = None,
    epochs: int = 100,
    optimizer: OptimizerConfig = OptimizerConfig(),
    jobs: int = 1,
) -> AccuracyReport:
    """Train one network per (selection, seed) pair on the selected columns."""
    X = np.asarray(features, dtype=float)
    y = np.asarray(labels, dtype=int)
    n_classes = spec.output_dim if spec else int(y.max()) + 1
    tasks = []
    for cols, seed in zip(selections, seeds):
        s = spec or surrogate_spec(len(cols), n_classes)
        tasks.append((s, X[:, list(cols)], y, int(seed), epochs, optimizer))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            accs = list(pool.map(_train_job, tasks))
    else:
        accs = [_train_job(t) for t in tasks]
    logger.info("%s: mean accuracy %.4f over %d runs", method, float(np.mean(accs)), len(accs))
    return AccuracyReport(
        method,
        np.asarray(accs, dtype=float),
        tuple(int(s) for s in seeds),
        tuple(tuple(int(c) for c in cols) for cols in selections),
    )


def random_pool(n_features: int, *excluded: Sequence[int]) -> list[int]:
    taken = set().union(*[set(int(i) for i in e) for e in excluded])
    return [i for i in range(n_features) if i not in taken]


def compare_selections(
    features_full,
    labels,
    mode_mode: Sequence[int],
    median: Sequence[int],
    runs: int = 100,
    spec: NetworkSpec | None = None,
    epochs: int = 100,
    optimizer: OptimizerConfig = OptimizerConfig(),
    jobs: int = 1,
    pool: Sequence[int] | None = None,
    seed_base: int = 0,
) -> dict[str, AccuracyReport]:
    """Accuracy of surrogates on mode-mode, median and random feature selections.

    Runs use seeds ``seed_base .. seed_base+runs-1`` in every group, so run ``i``
    of each group shares its data split. Each random run draws its own
    columns, without replacement, from ``pool`` (default: every feature in
    neither XAI selection).
    """
    X = np.asarray(features_full, dtype=float)
    width = len(mode_mode)
    if pool is None:
        pool = random_pool(X.shape[1], mode_mode, median)
    if len(pool) < width:
        raise PipelineError(
            "surrogate.compare_selections",
            f"leftover pool has {len(pool)} features, fewer than {width}",
        )
    seeds = list(range(seed_base, seed_base + runs))
    random_cols = [
        tuple(sorted(np.random.default_rng([s, 1]).choice(pool, size=width, replace=False)))
        for s in seeds
    ]
    common = dict(spec=spec, epochs=epochs, optimizer=optimizer, jobs=jobs)
    return {
        "mode-mode": run_selection("mode-mode", X, labels, [tuple(mode_mode)] * runs, seeds, **common),
        "median": run_selection("median", X, labels, [tuple(median)] * runs, seeds, **common),
        "random": run_selection("random", X, labels, random_cols, seeds, **common),
    }


def save_network(net: TrainedNetwork, path: str | Path) -> None:
    doc = {
        "spec": net.spec.to_dict(),
        "seed": net.seed,
        "epochs": net.epochs,
        "weights": [{"shape": list(w.shape), "values": w.ravel().tolist()} for w in net.weights],
        "biases": [b.tolist() for b in net.biases],
    }
    Path(path).write_text(json.dumps(doc) + "\n")


def load_network(path: str | Path) -> TrainedNetwork:
    doc = json.loads(Path(path).read_text())
    spec = NetworkSpec.from_dict(doc["spec"])
    weights = [np.asarray(w["values"], dtype=float).reshape(w["shape"]) for w in doc["weights"]]
    biases = [np.asarray(b, dtype=float) for b in doc["biases"]]
    return TrainedNetwork(spec, weights, biases, seed=doc["seed"], epochs=doc["epochs"])
