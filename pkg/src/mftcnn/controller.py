"""Multilayer perceptron controller written directly on numpy.

``g(z) = phi_n(... phi_1(phi_0(z)))`` with ``phi_j(a) = h_j(W_j a + b_j)``.
For the mean-field controller the input is ``z = (x, E[x], B)`` and the
output ``(u, E[u])``.
"""

from __future__ import annotations

import enum
import io
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted, check_X_y, check_array

from ._validation import check_positive
from .exceptions import ContractViolation, NonConvergence

logger = logging.getLogger(__name__)

FORMAT_HEADER = "mftcnn-controller"
FORMAT_VERSION = 1


class Activation(str, enum.Enum):
    LINEAR = "lin"
    TANH = "tanh"

    def apply(self, a: np.ndarray) -> np.ndarray:
        return a if self is Activation.LINEAR else np.tanh(a)

    def derivative(self, pre: np.ndarray, post: np.ndarray) -> np.ndarray:
        if self is Activation.LINEAR:
            return np.ones_like(pre)
        return 1.0 - post * post


@dataclass(frozen=True)
class LayerSpec:
    in_dim: int
    out_dim: int
    activation: Activation = Activation.LINEAR

    def __post_init__(self):
        if self.in_dim < 1 or self.out_dim < 1:
            raise ContractViolation(f"layer dims must be >= 1, got {self.in_dim}->{self.out_dim}")
        object.__setattr__(self, "activation", Activation(self.activation))


@dataclass
class Layer:
    W: np.ndarray      # (out, in)
    b: np.ndarray      # (out,)
    activation: Activation

    @property
    def spec(self) -> LayerSpec:
        return LayerSpec(self.W.shape[1], self.W.shape[0], self.activation)


@dataclass
class MlpParams:
    """Network weights plus an optional fixed affine input scaling."""

    layers: list
    input_shift: np.ndarray = None
    input_scale: np.ndarray = None

    def __post_init__(self):
        if not self.layers:
            raise ContractViolation("an MLP needs at least one layer")
        for j, (a, b) in enumerate(zip(self.layers, self.layers[1:])):
            if a.W.shape[0] != b.W.shape[1]:
                raise ContractViolation(f"layer {j} output {a.W.shape[0]} != layer {j + 1} input {b.W.shape[1]}")
        for j, layer in enumerate(self.layers):
            if layer.b.shape != (layer.W.shape[0],):
                raise ContractViolation(f"layer {j}: bias shape {layer.b.shape} != ({layer.W.shape[0]},)")
        d0 = self.input_dim
        if self.input_shift is None:
            self.input_shift = np.zeros(d0)
        if self.input_scale is None:
            self.input_scale = np.ones(d0)
        self.input_shift = np.asarray(self.input_shift, float).reshape(d0)
        self.input_scale = np.asarray(self.input_scale, float).reshape(d0)
        if np.any(self.input_scale <= 0):
            raise ContractViolation("input_scale entries must be positive")

    @classmethod
    def initialize(cls, dims: Sequence[int], activations: Sequence, seed: int = 0,
                   input_shift=None, input_scale=None) -> "MlpParams":
        """Glorot-uniform weights, zero biases. ``dims`` lists d_0 .. d_{n+1}."""
        if len(dims) != len(activations) + 1:
            raise ContractViolation("need one activation per layer (len(dims) - 1)")
        rng = np.random.default_rng(seed)
        layers = []
        for d_in, d_out, act in zip(dims[:-1], dims[1:], activations):
            spec = LayerSpec(int(d_in), int(d_out), act)
            lim = math.sqrt(6.0 / (d_in + d_out))
            layers.append(Layer(rng.uniform(-lim, lim, size=(d_out, d_in)), np.zeros(d_out),
                                spec.activation))
        return cls(layers, input_shift, input_scale)

    @property
    def input_dim(self) -> int:
        return self.layers[0].W.shape[1]

    @property
    def output_dim(self) -> int:
        return self.layers[-1].W.shape[0]

    @property
    def dims(self) -> list:
        return [self.input_dim] + [layer.W.shape[0] for layer in self.layers]

    @property
    def activations(self) -> list:
        return [layer.activation for layer in self.layers]

    @property
    def n_neurons(self) -> int:
        return sum(layer.W.shape[0] for layer in self.layers)

    @property
    def n_params(self) -> int:
        return sum(layer.W.size + layer.b.size for layer in self.layers)

    def copy(self) -> "MlpParams":
        return MlpParams([Layer(l.W.copy(), l.b.copy(), l.activation) for l in self.layers],
                         self.input_shift.copy(), self.input_scale.copy())

    def flat(self) -> np.ndarray:
        return np.concatenate([np.concatenate([l.W.ravel(), l.b]) for l in self.layers])

    def with_flat(self, theta: np.ndarray, share: bool = False) -> "MlpParams":
        """Same architecture with weights taken from ``theta``; ``share=True``
        makes the layers views into ``theta``."""
        out = self.copy()
        pos = 0
        for layer in out.layers:
            nw, nb = layer.W.size, layer.b.size
            W = theta[pos:pos + nw].reshape(layer.W.shape)
            b = theta[pos + nw:pos + nw + nb]
            layer.W, layer.b = (W, b) if share else (W.copy(), b.copy())
            pos += nw + nb
        return out


# Table I architectures (input (x, E[x], B), output (u, E[u])).
def table1_nn1(seed: int = 0, **kw) -> MlpParams:
    return MlpParams.initialize([3, 2, 2, 2], ["lin", "tanh", "lin"], seed, **kw)


def table1_nn2(seed: int = 0, **kw) -> MlpParams:
    return MlpParams.initialize([3, 2, 2, 50, 50, 2], ["lin", "tanh", "tanh", "tanh", "lin"], seed, **kw)


# --- evaluation ----------------------------------------------------------------

@dataclass
class ForwardCache:
    inputs: list      # activations entering each layer (first one is the scaled input)
    pre: list
    post: list


def forward_batch(params: MlpParams, Z: np.ndarray, keep: bool = False):
    """Evaluate on rows of ``Z`` (shape ``(B, d0)``); optionally keep a cache for :func:`backward`."""
    if Z.ndim != 2 or Z.shape[1] != params.input_dim:
        raise ContractViolation(f"input must have shape (B, {params.input_dim}), got {Z.shape}")
    a = (Z - params.input_shift) / params.input_scale
    cache = ForwardCache([], [], []) if keep else None
    for layer in params.layers:
        pre = a @ layer.W.T + layer.b
        post = layer.activation.apply(pre)
        if keep:
            cache.inputs.append(a)
            cache.pre.append(pre)
            cache.post.append(post)
        a = post
    return (a, cache) if keep else a


def forward(params: MlpParams, z) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    if z.shape != (params.input_dim,):
        raise ContractViolation(f"input must have length {params.input_dim}, got shape {z.shape}")
    return forward_batch(params, z[None, :])[0]


def backward(params: MlpParams, cache: ForwardCache, upstream: np.ndarray):
    """Reverse pass. Returns ``(grads, input_grad)``; ``grads`` is a list of
    ``(dW, db)`` summed over the batch, ``input_grad`` has one row per sample."""
    delta = np.asarray(upstream, dtype=float)
    grads = [None] * len(params.layers)
    for j in range(len(params.layers) - 1, -1, -1):
        layer = params.layers[j]
        delta = delta * layer.activation.derivative(cache.pre[j], cache.post[j])
        grads[j] = (delta.T @ cache.inputs[j], delta.sum(axis=0))
        delta = delta @ layer.W
    return grads, delta / params.input_scale


def flatten_grads(grads) -> np.ndarray:
    return np.concatenate([np.concatenate([dW.ravel(), db]) for dW, db in grads])


# --- supervised training -----------------------------------------------------------

def supervised_loss(params: MlpParams, Z, Y, squared: bool = True) -> float:
    """Mean over records of ``||g(z) - y||^2`` (or of ``||g(z) - y||`` when ``squared=False``)."""
    Z = np.asarray(Z, float)
    Y = np.asarray(Y, float)
    if len(Z) == 0:
        raise ContractViolation("empty dataset")
    r = forward_batch(params, Z) - Y
    sq = np.sum(r * r, axis=1)
    return float(np.mean(sq if squared else np.sqrt(sq)))


def _loss_and_grad(params, Z, Y, weights=None):
    out, cache = forward_batch(params, Z, keep=True)
    r = out - Y
    sq = np.sum(r * r, axis=1)
    if weights is None:
        weights = np.full(len(Z), 1.0 / len(Z))
    loss = float(np.dot(weights, sq))
    grads, _ = backward(params, cache, 2.0 * r * weights[:, None])
    return loss, flatten_grads(grads)


class Optimizer(str, enum.Enum):
    SGD = "sgd"
    ADAM = "adam"


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 128
    learning_rate: float = 1e-2
    shuffle_seed: int = 0
    optimizer: Optimizer = Optimizer.ADAM
    lr_decay: float = 1.0          # multiplicative per-epoch decay

    def __post_init__(self):
        check_positive(self.epochs, name="epochs")
        check_positive(self.batch_size, name="batch_size")
        check_positive(self.learning_rate, name="learning_rate")
        object.__setattr__(self, "optimizer", Optimizer(self.optimizer))


@dataclass
class TrainResult:
    params: MlpParams
    history: list = field(default_factory=list)   # full-dataset loss at the end of each epoch
    initial_loss: float = math.nan
    best_epoch: int = -1


def train(params: MlpParams, Z, Y, config: TrainConfig = TrainConfig(), weights=None) -> TrainResult:
    """Mini-batch training on the mean squared error.

    ``weights`` gives a per-record weight (default uniform). The returned
    parameters are the best seen at an epoch boundary, so the final loss
    never exceeds the initial one.
    """
    Z = np.asarray(Z, float)
    Y = np.asarray(Y, float)
    n = len(Z)
    if n == 0:
        raise ContractViolation("empty dataset")
    if Z.shape[1] != params.input_dim or Y.shape[1] != params.output_dim:
        raise ContractViolation(
            f"dataset shapes {Z.shape}/{Y.shape} do not match network {params.input_dim}->{params.output_dim}")
    if config.batch_size > n:
        raise ContractViolation(f"batch_size {config.batch_size} exceeds dataset size {n}")
    w = np.ones(n) if weights is None else np.asarray(weights, float)

    def full_loss(p):
        r = forward_batch(p, Z) - Y
        return float(np.dot(w, np.sum(r * r, axis=1)) / w.sum())

    rng = np.random.default_rng(config.shuffle_seed)
    theta = params.flat()
    current = params.with_flat(theta, share=True)
    best = params.copy()
    best_loss = initial = full_loss(params)
    best_epoch = 0
    m1 = np.zeros_like(theta)
    m2 = np.zeros_like(theta)
    t = 0
    lr = config.learning_rate
    history = []
    n_batches = n // config.batch_size
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        for bi in range(n_batches):
            idx = order[bi * config.batch_size:(bi + 1) * config.batch_size]
            bw = w[idx] / w[idx].sum()
            loss, grad = _loss_and_grad(current, Z[idx], Y[idx], bw)
            if not (math.isfinite(loss) and np.all(np.isfinite(grad))):
                raise NonConvergence(f"non-finite loss in epoch {epoch}, batch {bi}")
            t += 1
            if config.optimizer is Optimizer.ADAM:
                m1 = 0.9 * m1 + 0.1 * grad
                m2 = 0.999 * m2 + 0.001 * grad * grad
                theta -= lr * (m1 / (1 - 0.9**t)) / (np.sqrt(m2 / (1 - 0.999**t)) + 1e-8)
            else:
                theta -= lr * grad
        lr *= config.lr_decay
        ep_loss = full_loss(current)
        history.append(ep_loss)
        if not math.isfinite(ep_loss):
            raise NonConvergence(f"non-finite loss after epoch {epoch}")
        if ep_loss < best_loss:
            best_loss, best, best_epoch = ep_loss, current.copy(), epoch
    return TrainResult(best, history, initial, best_epoch)


# --- text format ---------------------------------------------------------------

def _fmt(values) -> str:
    return " ".join(format(float(v), ".17g") for v in np.ravel(values))


def dumps(params: MlpParams) -> str:
    out = io.StringIO()
    out.write(f"{FORMAT_HEADER} {FORMAT_VERSION}\n")
    out.write(f"input_dim {params.input_dim}\n")
    out.write(f"input_shift {_fmt(params.input_shift)}\n")
    out.write(f"input_scale {_fmt(params.input_scale)}\n")
    out.write(f"layers {len(params.layers)}\n")
    for j, layer in enumerate(params.layers):
        out.write(f"layer {j} {layer.W.shape[1]} {layer.W.shape[0]} {layer.activation.value}\n")
        for row in layer.W:
            out.write(f"W {_fmt(row)}\n")
        out.write(f"b {_fmt(layer.b)}\n")
    return out.getvalue()


def loads(text: str) -> MlpParams:
    lines = [ln.split() for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
    pos = 0

    def take(key):
        nonlocal pos
        if pos >= len(lines) or lines[pos][0] != key:
            got = lines[pos][0] if pos < len(lines) else "end of file"
            raise ContractViolation(f"controller file: expected '{key}', found '{got}' (record {pos + 1})")
        pos += 1
        return lines[pos - 1][1:]

    head = take(FORMAT_HEADER)
    if int(head[0]) != FORMAT_VERSION:
        raise ContractViolation(f"unsupported controller format version {head[0]}")
    d0 = int(take("input_dim")[0])
    shift = np.array(take("input_shift"), float)
    scale = np.array(take("input_scale"), float)
    n_layers = int(take("layers")[0])
    layers = []
    for j in range(n_layers):
        _, d_in, d_out, act = take("layer")
        d_in, d_out = int(d_in), int(d_out)
        W = np.array([take("W") for _ in range(d_out)], float).reshape(d_out, d_in)
        b = np.array(take("b"), float)
        layers.append(Layer(W, b, Activation(act)))
    params = MlpParams(layers, shift, scale)
    if params.input_dim != d0:
        raise ContractViolation("controller file: input_dim does not match first layer")
    return params


def save(params: MlpParams, path) -> None:
    with open(path, "w") as fh:
        fh.write(dumps(params))


def load(path) -> MlpParams:
    with open(path) as fh:
        return loads(fh.read())


# --- estimator wrapper -------------------------------------------------------------

class NeuralController(RegressorMixin, BaseEstimator):
    """Scikit-learn style regressor around :class:`MlpParams`.

    ``hidden`` lists hidden-layer widths; ``activations`` gives one entry per
    layer including the output layer. ``standardize`` fixes an affine input
    scaling from the training inputs at the first ``fit``.
    """

    def __init__(self, hidden=(2, 2), activations=("lin", "tanh", "lin"), epochs=200,
                 batch_size=128, learning_rate=1e-2, optimizer="adam", lr_decay=1.0,
                 standardize=False, random_state=0, warm_start=False):
        self.hidden = hidden
        self.activations = activations
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.optimizer = optimizer
        self.lr_decay = lr_decay
        self.standardize = standardize
        self.random_state = random_state
        self.warm_start = warm_start

    def _config(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size,
                           learning_rate=self.learning_rate, shuffle_seed=self.random_state,
                           optimizer=self.optimizer, lr_decay=self.lr_decay)

    def fit(self, X, y, sample_weight=None):
        X, y = check_X_y(X, y, multi_output=True, y_numeric=True)
        y2 = y.reshape(len(y), -1)
        if self.warm_start and hasattr(self, "params_"):
            params = self.params_
        else:
            dims = [X.shape[1], *self.hidden, y2.shape[1]]
            kw = {}
            if self.standardize:
                kw = dict(input_shift=X.mean(axis=0),
                          input_scale=np.where(X.std(axis=0) > 0, X.std(axis=0), 1.0))
            params = MlpParams.initialize(dims, list(self.activations), self.random_state, **kw)
        cfg = self._config()
        if cfg.batch_size > len(X):
            cfg = replace(cfg, batch_size=len(X))
        res = train(params, X, y2, cfg, weights=sample_weight)
        self.params_ = res.params
        self.loss_curve_ = res.history
        self.n_features_in_ = X.shape[1]
        self._y_1d = y.ndim == 1
        return self

    @classmethod
    def from_params(cls, params: MlpParams, **kw) -> "NeuralController":
        est = cls(hidden=tuple(params.dims[1:-1]),
                  activations=tuple(a.value for a in params.activations), **kw)
        est.params_ = params
        est.n_features_in_ = params.input_dim
        est._y_1d = False
        return est

    def predict(self, X):
        check_is_fitted(self, "params_")
        X = check_array(X)
        out = forward_batch(self.params_, X)
        return out[:, 0] if getattr(self, "_y_1d", False) else out
