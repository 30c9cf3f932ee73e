"""Tree convolutional performance predictor with hand-written gradients.

Architecture (dims configurable, topology fixed)::

    tree conv -> layer norm -> ReLU      (x len(conv_dims))
    dynamic max pooling over nodes
    linear -> layer norm -> ReLU         (x len(fc_dims) - 1)
    linear -> scalar

The network regresses ``log1p(performance)``; ``forward`` and
``predict`` map the raw output back with ``expm1``.

Trees are batched by concatenating their pre-order node arrays.  A child
index of ``-1`` points at a zero sentinel row, so absent or NULL children
contribute nothing to the parent's filter response.
"""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .plan import FlatTree, VectorTree

log = logging.getLogger(__name__)

LN_EPS = 1e-5
CHECKPOINT_MAGIC = b"TCNNCKPT"
CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 16
    max_epochs: int = 100
    convergence_window: int = 10
    convergence_threshold: float = 0.01
    learning_rate: float = 1e-3
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        self.adam_betas = tuple(self.adam_betas)
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be >= 1")
        if not 0.0 < self.convergence_threshold < 1.0:
            raise ValueError("convergence_threshold must lie in (0, 1)")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")


class TcnnModel:
    """Parameter container.  ``params`` maps names to float64 arrays."""

    def __init__(self, in_dim: int, conv_dims: Sequence[int] = (256, 128, 64),
                 fc_dims: Sequence[int] = (32, 1), seed: int = 0,
                 params: dict[str, np.ndarray] | None = None):
        if len(conv_dims) < 1 or len(fc_dims) < 1 or fc_dims[-1] != 1:
            raise ValueError("need >= 1 conv layer and fc dims ending in 1")
        self.in_dim = int(in_dim)
        self.conv_dims = tuple(int(d) for d in conv_dims)
        self.fc_dims = tuple(int(d) for d in fc_dims)
        self.seed = int(seed)
        if params is None:
            params = self._init_params(np.random.default_rng(seed))
        self.params = params
        for name, shape in self.param_shapes():
            if self.params[name].shape != shape:
                raise ValueError(f"{name}: shape {self.params[name].shape} != {shape}")

    @classmethod
    def zeros(cls, in_dim, conv_dims=(256, 128, 64), fc_dims=(32, 1)) -> TcnnModel:
        m = cls(in_dim, conv_dims, fc_dims)
        m.params = {k: np.zeros_like(v) for k, v in m.params.items()}
        return m

    def param_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        """Parameter names and shapes in checkpoint order."""
        shapes = []
        d_in = self.in_dim
        for i, d_out in enumerate(self.conv_dims):
            for part in ("w_self", "w_left", "w_right"):
                shapes.append((f"conv{i}.{part}", (d_out, d_in)))
            shapes += [(f"conv{i}.bias", (d_out,)),
                       (f"conv{i}.gain", (d_out,)), (f"conv{i}.shift", (d_out,))]
            d_in = d_out
        for j, d_out in enumerate(self.fc_dims):
            shapes += [(f"fc{j}.weight", (d_out, d_in)), (f"fc{j}.bias", (d_out,))]
            if j < len(self.fc_dims) - 1:
                shapes += [(f"fc{j}.gain", (d_out,)), (f"fc{j}.shift", (d_out,))]
            d_in = d_out
        return shapes

    def _init_params(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        params = {}
        for name, shape in self.param_shapes():
            kind = name.split(".")[1]
            if kind in ("w_self", "w_left", "w_right", "weight"):
                fan_in = shape[1] * (3 if kind != "weight" else 1)
                bound = np.sqrt(6.0 / fan_in)
                params[name] = rng.uniform(-bound, bound, size=shape)
            elif kind == "bias":
                fan_in = self._fan_in(name)
                bound = 1.0 / np.sqrt(fan_in)
                params[name] = rng.uniform(-bound, bound, size=shape)
            elif kind == "gain":
                params[name] = np.ones(shape)
            else:
                params[name] = np.zeros(shape)
        return params

    def _fan_in(self, bias_name: str) -> int:
        layer = bias_name.split(".")[0]
        if layer.startswith("conv"):
            return 3 * self.params_shape(f"{layer}.w_self")[1]
        return self.params_shape(f"{layer}.weight")[1]

    def params_shape(self, name):
        return dict(self.param_shapes())[name]

    def copy(self) -> TcnnModel:
        return TcnnModel(self.in_dim, self.conv_dims, self.fc_dims, self.seed,
                         params={k: v.copy() for k, v in self.params.items()})

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.params.values())

    def predict(self, trees: Sequence[VectorTree]) -> np.ndarray:
        """Predicted performance (original units) for each tree."""
        return np.expm1(predict_raw(self, trees))

    # -- checkpoints --------------------------------------------------------

    def save(self, path, train_config: TrainConfig | None = None) -> None:
        path = Path(path)
        header = struct.pack("<8sIII", CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
                             self.in_dim, len(self.conv_dims))
        header += struct.pack(f"<{len(self.conv_dims)}I", *self.conv_dims)
        header += struct.pack("<I", len(self.fc_dims))
        header += struct.pack(f"<{len(self.fc_dims)}I", *self.fc_dims)
        header += struct.pack("<Q", self.seed)
        with open(path, "wb") as f:
            f.write(header)
            for name, _ in self.param_shapes():
                f.write(np.ascontiguousarray(self.params[name], dtype="<f8").tobytes())
        if train_config is not None:
            sidecar = path.with_suffix(path.suffix + ".json")
            sidecar.write_text(json.dumps(asdict(train_config), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path) -> TcnnModel:
        data = Path(path).read_bytes()
        magic, version, in_dim, n_conv = struct.unpack_from("<8sIII", data, 0)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a model checkpoint")
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        off = 20
        conv_dims = struct.unpack_from(f"<{n_conv}I", data, off)
        off += 4 * n_conv
        (n_fc,) = struct.unpack_from("<I", data, off)
        off += 4
        fc_dims = struct.unpack_from(f"<{n_fc}I", data, off)
        off += 4 * n_fc
        (seed,) = struct.unpack_from("<Q", data, off)
        off += 8
        model = cls(in_dim, conv_dims, fc_dims, seed)
        for name, shape in model.param_shapes():
            n = int(np.prod(shape))
            arr = np.frombuffer(data, dtype="<f8", count=n, offset=off)
            model.params[name] = arr.reshape(shape).astype(np.float64)
            off += 8 * n
        if off != len(data):
            raise ValueError(f"{path}: trailing bytes in checkpoint")
        return model


# ---------------------------------------------------------------------------
# batching

@dataclass
class Batch:
    features: np.ndarray   # (N, D)
    left: np.ndarray       # (N,) index into features, N = zero sentinel
    right: np.ndarray
    gather: np.ndarray     # (T, max_nodes) node index per tree, N = padding
    n_nodes: int

    @property
    def n_trees(self) -> int:
        return self.gather.shape[0]


def make_batch(trees: Sequence[VectorTree | FlatTree]) -> Batch:
    flats = [t.flat if isinstance(t, VectorTree) else t for t in trees]
    if not flats:
        raise ValueError("empty batch")
    sizes = np.array([f.features.shape[0] for f in flats])
    offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    N = int(sizes.sum())
    feats = np.concatenate([f.features for f in flats], axis=0)
    left = np.concatenate([np.where(f.left >= 0, f.left + o, N) for f, o in zip(flats, offsets)])
    right = np.concatenate([np.where(f.right >= 0, f.right + o, N) for f, o in zip(flats, offsets)])
    M = int(sizes.max())
    cols = np.arange(M)
    gather = np.where(cols[None, :] < sizes[:, None], offsets[:, None] + cols[None, :], N)
    return Batch(feats, left, right, gather, N)


# ---------------------------------------------------------------------------
# layers

def tree_conv_layer(features: np.ndarray, left: np.ndarray, right: np.ndarray,
                    w_self: np.ndarray, w_left: np.ndarray, w_right: np.ndarray,
                    bias: np.ndarray) -> np.ndarray:
    """One binary tree-convolution filter bank over a batched node array.

    ``left``/``right`` index rows of ``features``; out-of-range indices
    (``len(features)``) select a zero vector.
    """
    if features.shape[1] != w_self.shape[1]:
        raise ValueError(f"width mismatch: nodes have {features.shape[1]}, "
                         f"layer expects {w_self.shape[1]}")
    padded = np.vstack([features, np.zeros((1, features.shape[1]))])
    return (features @ w_self.T + padded[left] @ w_left.T
            + padded[right] @ w_right.T + bias)


def conv_tree(tree: VectorTree, w_self, w_left, w_right, bias) -> np.ndarray:
    """Apply a tree convolution to a single tree; returns pre-order node outputs."""
    f = tree.flat
    n = f.features.shape[0]
    left = np.where(f.left >= 0, f.left, n)
    right = np.where(f.right >= 0, f.right, n)
    return tree_conv_layer(f.features, left, right, w_self, w_left, w_right, bias)


def dynamic_pool(node_vectors: np.ndarray) -> np.ndarray:
    """Elementwise max over the nodes (rows) of one tree."""
    node_vectors = np.asarray(node_vectors, dtype=np.float64)
    if node_vectors.ndim != 2 or node_vectors.shape[0] == 0:
        raise ValueError("dynamic_pool needs a nonempty (nodes, width) array")
    return node_vectors.max(axis=0)


def _layer_norm(z, gain, shift):
    mu = z.mean(axis=1, keepdims=True)
    var = z.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (z - mu) * inv
    return xhat * gain + shift, (xhat, inv)


def _layer_norm_backward(dy, cache, gain):
    xhat, inv = cache
    dgain = (dy * xhat).sum(axis=0)
    dshift = dy.sum(axis=0)
    dx = dy * gain
    dz = inv * (dx - dx.mean(axis=1, keepdims=True)
                - xhat * (dx * xhat).mean(axis=1, keepdims=True))
    return dz, dgain, dshift


# ---------------------------------------------------------------------------
# forward / backward

def _forward(model: TcnnModel, batch: Batch, keep: bool = False):
    p = model.params
    if batch.features.shape[1] != model.in_dim:
        raise ValueError(f"tree width {batch.features.shape[1]} != model input {model.in_dim}")
    caches = []
    h = batch.features
    for i in range(len(model.conv_dims)):
        z = tree_conv_layer(h, batch.left, batch.right, p[f"conv{i}.w_self"],
                            p[f"conv{i}.w_left"], p[f"conv{i}.w_right"], p[f"conv{i}.bias"])
        y, ln = _layer_norm(z, p[f"conv{i}.gain"], p[f"conv{i}.shift"])
        a = np.maximum(y, 0.0)
        if keep:
            caches.append((h, ln, y > 0))
        h = a
    padded = np.vstack([h, np.full((1, h.shape[1]), -np.inf)])
    stacked = padded[batch.gather]                      # (T, M, C)
    arg = stacked.argmax(axis=1)                        # (T, C)
    pooled = np.take_along_axis(stacked, arg[:, None, :], axis=1)[:, 0, :]
    pool_cache = (batch.gather[np.arange(batch.n_trees)[:, None], arg], h.shape)
    fc_caches = []
    x = pooled
    n_fc = len(model.fc_dims)
    for j in range(n_fc):
        z = x @ p[f"fc{j}.weight"].T + p[f"fc{j}.bias"]
        if j < n_fc - 1:
            y, ln = _layer_norm(z, p[f"fc{j}.gain"], p[f"fc{j}.shift"])
            if keep:
                fc_caches.append((x, ln, y > 0))
            x = np.maximum(y, 0.0)
        else:
            if keep:
                fc_caches.append((x, None, None))
            x = z
    out = x[:, 0]
    if keep:
        return out, (caches, pool_cache, fc_caches)
    return out


def _backward(model: TcnnModel, batch: Batch, dout: np.ndarray, state) -> dict[str, np.ndarray]:
    p = model.params
    caches, (pool_rows, h_shape), fc_caches = state
    grads: dict[str, np.ndarray] = {}
    dx = dout[:, None]
    for j in reversed(range(len(model.fc_dims))):
        x_in, ln, mask = fc_caches[j]
        if ln is not None:
            dy = dx * mask
            dz, grads[f"fc{j}.gain"], grads[f"fc{j}.shift"] = _layer_norm_backward(
                dy, ln, p[f"fc{j}.gain"])
        else:
            dz = dx
        grads[f"fc{j}.weight"] = dz.T @ x_in
        grads[f"fc{j}.bias"] = dz.sum(axis=0)
        dx = dz @ p[f"fc{j}.weight"]
    # un-pool: each (tree, channel) max came from exactly one node
    dh = np.zeros(h_shape)
    cols = np.broadcast_to(np.arange(h_shape[1]), pool_rows.shape)
    dh[pool_rows, cols] = dx
    n = batch.n_nodes
    lvalid = batch.left < n
    rvalid = batch.right < n
    for i in reversed(range(len(model.conv_dims))):
        h_in, ln, mask = caches[i]
        dy = dh * mask
        dz, grads[f"conv{i}.gain"], grads[f"conv{i}.shift"] = _layer_norm_backward(
            dy, ln, p[f"conv{i}.gain"])
        padded = np.vstack([h_in, np.zeros((1, h_in.shape[1]))])
        grads[f"conv{i}.w_self"] = dz.T @ h_in
        grads[f"conv{i}.w_left"] = dz.T @ padded[batch.left]
        grads[f"conv{i}.w_right"] = dz.T @ padded[batch.right]
        grads[f"conv{i}.bias"] = dz.sum(axis=0)
        if i == 0:
            break
        dh = dz @ p[f"conv{i}.w_self"]
        # every node has at most one parent, so these scatters never collide
        dh[batch.left[lvalid]] += dz[lvalid] @ p[f"conv{i}.w_left"]
        dh[batch.right[rvalid]] += dz[rvalid] @ p[f"conv{i}.w_right"]
    return grads


def predict_raw(model: TcnnModel, trees: Sequence[VectorTree]) -> np.ndarray:
    """Network output (log1p performance units) for each tree."""
    return _forward(model, make_batch(trees))


def forward(model: TcnnModel, tree: VectorTree) -> float:
    """Predicted performance of a single plan, in performance units."""
    if not model.is_finite():
        raise ValueError("model has non-finite parameters")
    return float(np.expm1(predict_raw(model, [tree])[0]))


def loss(predictions, targets) -> float:
    predictions = np.asarray(predictions, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if predictions.shape != targets.shape or predictions.size == 0:
        raise ValueError("predictions and targets need equal, nonzero length")
    return float(np.mean((predictions - targets) ** 2))


def loss_and_gradients(model: TcnnModel, batch: Batch, targets: np.ndarray):
    out, state = _forward(model, batch, keep=True)
    resid = out - targets
    value = float(np.mean(resid ** 2))
    grads = _backward(model, batch, 2.0 * resid / len(targets), state)
    return value, grads


def backward(model: TcnnModel, examples: Sequence[tuple[VectorTree, float]]) -> dict[str, np.ndarray]:
    """Gradients of the batch MSE w.r.t. every parameter.

    Targets are in the network's output space (no log transform here).
    """
    if not examples:
        raise ValueError("empty batch")
    trees, targets = zip(*examples)
    _, grads = loss_and_gradients(model, make_batch(trees), np.asarray(targets, dtype=np.float64))
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for {name}")
    return grads


# ---------------------------------------------------------------------------
# training

def converged(history: Sequence[float], window: int = 10, threshold: float = 0.01) -> bool:
    """True when the loss fell by less than ``threshold`` (relative) over
    the last ``window`` epochs."""
    if len(history) <= window:
        return False
    before, now = history[-1 - window], history[-1]
    if before <= 0:
        return True
    return (before - now) / before < threshold


def first_convergence_epoch(history: Sequence[float], window: int = 10,
                            threshold: float = 0.01) -> int | None:
    """Index of the first epoch at which ``converged`` fires, if any."""
    for e in range(len(history)):
        if converged(history[:e + 1], window, threshold):
            return e
    return None


class Adam:
    def __init__(self, params: dict[str, np.ndarray], lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.lr, (self.b1, self.b2), self.eps = lr, betas, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            params[k] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def train(model: TcnnModel, data: Sequence[tuple[VectorTree, float]],
          config: TrainConfig | None = None, rng: np.random.Generator | None = None):
    """Fit a copy of ``model`` to (tree, performance) pairs.

    Returns ``(trained_model, epoch_losses)``.  Loss is MSE on
    ``log1p(performance)``.
    """
    config = config or TrainConfig()
    if not data:
        raise ValueError("no training data")
    rng = rng if rng is not None else np.random.default_rng(model.seed)
    model = model.copy()
    flats = [t.flat for t, _ in data]
    targets = np.log1p(np.asarray([y for _, y in data], dtype=np.float64))
    opt = Adam(model.params, config.learning_rate, config.adam_betas, config.adam_eps)
    n = len(flats)
    history: list[float] = []
    for epoch in range(config.max_epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            batch = make_batch([flats[i] for i in idx])
            value, grads = loss_and_gradients(model, batch, targets[idx])
            if not np.isfinite(value):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch starting {start}")
            opt.step(model.params, grads)
            total += value * len(idx)
        history.append(total / n)
        if not model.is_finite():
            raise TrainingError(f"non-finite parameters after epoch {epoch}")
        if converged(history, config.convergence_window, config.convergence_threshold):
            log.debug("converged after %d epochs (loss %.4g)", epoch + 1, history[-1])
            break
    return model, history
