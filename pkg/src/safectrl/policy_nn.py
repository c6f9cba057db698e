"""Small feed-forward regressor for distilling the QP expert.

Plain numpy MLP: tanh hidden layers, linear output, mean-squared-error loss,
mini-batch Adam. Everything is seeded and single-threaded so training runs
are bit-reproducible. The feature map turns a raw state into network inputs;
"unicycle_sincos" encodes the heading as (sin, cos) so the network never
sees the 2*pi wrap discontinuity.

Inputs are standardized with statistics from the training split (stored on
the policy and in its JSON form, since inference needs them). Optional
output saturation is an inference-time clamp; training regresses the
pre-saturation output so gradients never die against the clamp.
"""

import json
import math
from dataclasses import dataclass

import numpy as np


class DimMismatch(ValueError):
    """Feature vector does not match the network input width."""


class DivergenceError(RuntimeError):
    """Training loss became non-finite."""


def featurize(feature_map: str, x) -> np.ndarray:
    """Map a raw state to network inputs."""
    x = np.asarray(x, dtype=float)
    if feature_map == "identity":
        return x
    if feature_map == "unicycle_sincos":
        return np.array([x[0], x[1], math.sin(x[2]), math.cos(x[2])])
    raise ValueError(f"unknown feature map {feature_map!r}")


def feature_dim(feature_map: str, n: int) -> int:
    if feature_map == "identity":
        return n
    if feature_map == "unicycle_sincos":
        return 4
    raise ValueError(f"unknown feature map {feature_map!r}")


class Dataset:
    """Aggregatable rows of (feature vector, expert control)."""

    def __init__(self, X=None, y=None):
        self.X = np.zeros((0, 0)) if X is None else np.asarray(X, dtype=float)
        self.y = np.zeros((0, 0)) if y is None else np.asarray(y, dtype=float)
        self._check()

    def _check(self):
        if len(self) and (np.isnan(self.X).any() or np.isnan(self.y).any()):
            raise ValueError("dataset contains NaN")
        if len(self) and self.X.shape[0] != self.y.shape[0]:
            raise ValueError("X and y row counts differ")

    def __len__(self) -> int:
        return self.X.shape[0]

    def extend(self, X_new, y_new) -> None:
        X_new = np.atleast_2d(np.asarray(X_new, dtype=float))
        y_new = np.atleast_2d(np.asarray(y_new, dtype=float))
        if len(self) == 0:
            self.X, self.y = X_new, y_new
        else:
            if X_new.shape[1] != self.X.shape[1]:
                raise DimMismatch(f"feature width {X_new.shape[1]} != {self.X.shape[1]}")
            self.X = np.vstack([self.X, X_new])
            self.y = np.vstack([self.y, y_new])
        self._check()

    def split(self, val_fraction: float = 0.1, seed: int = 0):
        """Deterministic (train_idx, val_idx) permutation split."""
        n = len(self)
        perm = np.random.default_rng([421, seed]).permutation(n)
        n_val = max(1, int(round(n * val_fraction))) if n > 1 else 0
        return perm[n_val:], perm[:n_val]

    def to_csv(self, path) -> None:
        """f1,...,fd,y1,...,ym rows with shortest-repr formatting."""
        import csv as _csv

        with open(path, "w", newline="") as fh:
            writer = _csv.writer(fh)
            writer.writerow([f"f{i + 1}" for i in range(self.X.shape[1])]
                            + [f"y{i + 1}" for i in range(self.y.shape[1])])
            for xi, yi in zip(self.X, self.y):
                writer.writerow([repr(float(v)) for v in xi]
                                + [repr(float(v)) for v in yi])


class MlpPolicy:
    """tanh MLP with linear output, optional input standardization and
    output saturation. layer_dims runs input to output, e.g. [4, 32, 32, 1]."""

    def __init__(self, layer_dims, weights, biases, feature_map="identity",
                 saturation=None, seed=None, input_offset=None, input_scale=None,
                 training_meta=None):
        self.layer_dims = [int(d) for d in layer_dims]
        if len(self.layer_dims) < 2:
            raise ValueError("need at least input and output dims")
        self.weights = [np.asarray(W, dtype=float) for W in weights]
        self.biases = [np.asarray(b, dtype=float) for b in biases]
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            want = (self.layer_dims[i], self.layer_dims[i + 1])
            if W.shape != want or b.shape != (want[1],):
                raise ValueError(f"layer {i}: got {W.shape}/{b.shape}, want {want}")
            if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {i}: non-finite parameters")
        self.feature_map = feature_map
        self.saturation = None
        if saturation is not None:
            lo, hi = saturation
            self.saturation = (np.atleast_1d(np.asarray(lo, dtype=float)),
                               np.atleast_1d(np.asarray(hi, dtype=float)))
        self.seed = seed
        self.input_offset = None if input_offset is None else np.asarray(input_offset, dtype=float)
        self.input_scale = None if input_scale is None else np.asarray(input_scale, dtype=float)
        self.training_meta = dict(training_meta or {})

    @classmethod
    def init(cls, layer_dims, seed: int = 0, feature_map: str = "identity",
             saturation=None) -> "MlpPolicy":
        """Symmetric uniform init scaled by 1/sqrt(fan_in), seeded."""
        rng = np.random.default_rng([77, seed])
        weights, biases = [], []
        for d_in, d_out in zip(layer_dims[:-1], layer_dims[1:]):
            bound = 1.0 / np.sqrt(d_in)
            weights.append(rng.uniform(-bound, bound, (d_in, d_out)))
            biases.append(np.zeros(d_out))
        return cls(layer_dims, weights, biases, feature_map=feature_map,
                   saturation=saturation, seed=seed)

    # -- evaluation -------------------------------------------------------

    def _normalize(self, X):
        if self.input_offset is None:
            return X
        return (X - self.input_offset) / self.input_scale

    def raw_batch(self, X: np.ndarray) -> np.ndarray:
        """Pre-saturation outputs for an (N, d) batch."""
        a = self._normalize(X)
        for W, b in zip(self.weights[:-1], self.biases[:-1]):
            a = np.tanh(a @ W + b)
        return a @ self.weights[-1] + self.biases[-1]

    def control(self, x) -> np.ndarray:
        """Policy output for a raw state: featurize, evaluate, saturate."""
        return forward(self, featurize(self.feature_map, x))


def forward(net: MlpPolicy, features) -> np.ndarray:
    """Network output for one feature vector, clamped when saturation is set."""
    z = np.atleast_1d(np.asarray(features, dtype=float))
    if z.shape != (net.layer_dims[0],):
        raise DimMismatch(f"features have shape {z.shape}, net expects ({net.layer_dims[0]},)")
    out = net.raw_batch(z[None, :])[0]
    if net.saturation is not None:
        out = np.clip(out, net.saturation[0], net.saturation[1])
    return out


def mse_gradients(net: MlpPolicy, X: np.ndarray, y: np.ndarray):
    """Loss and parameter gradients of mean((raw(X) - y)^2) over the batch.

    The mean runs over batch rows and output coordinates, matching the
    training loss exactly (saturation excluded by design).
    """
    acts = [net._normalize(X)]
    for W, b in zip(net.weights[:-1], net.biases[:-1]):
        acts.append(np.tanh(acts[-1] @ W + b))
    out = acts[-1] @ net.weights[-1] + net.biases[-1]
    diff = out - y
    loss = float(np.mean(diff * diff))

    grads_W = [None] * len(net.weights)
    grads_b = [None] * len(net.biases)
    dz = (2.0 / diff.size) * diff
    for layer in range(len(net.weights) - 1, -1, -1):
        grads_W[layer] = acts[layer].T @ dz
        grads_b[layer] = dz.sum(axis=0)
        if layer > 0:
            da = dz @ net.weights[layer].T
            dz = da * (1.0 - acts[layer] * acts[layer])
    return loss, grads_W, grads_b


def _flatten_params(net: MlpPolicy):
    """Rebind the network parameters as views into one contiguous buffer.

    A single fused Adam step on the flat buffer then updates every layer in
    place, instead of a python loop over small per-tensor updates.
    """
    tensors = net.weights + net.biases
    total = sum(t.size for t in tensors)
    flat = np.empty(total)
    views = []
    off = 0
    for t in tensors:
        view = flat[off:off + t.size].reshape(t.shape)
        view[...] = t
        views.append(view)
        off += t.size
    n_w = len(net.weights)
    net.weights = views[:n_w]
    net.biases = views[n_w:]
    return flat, views


def _gradients_into(net: MlpPolicy, X, y, g_views) -> float:
    """mse_gradients writing straight into the flat gradient buffer's views."""
    n_w = len(net.weights)
    acts = [net._normalize(X)]
    for W, b in zip(net.weights[:-1], net.biases[:-1]):
        acts.append(np.tanh(acts[-1] @ W + b))
    out = acts[-1] @ net.weights[-1] + net.biases[-1]
    diff = out - y
    loss = float(np.mean(diff * diff))
    dz = (2.0 / diff.size) * diff
    for layer in range(n_w - 1, -1, -1):
        np.matmul(acts[layer].T, dz, out=g_views[layer])
        np.sum(dz, axis=0, out=g_views[n_w + layer])
        if layer > 0:
            da = dz @ net.weights[layer].T
            dz = da * (1.0 - acts[layer] * acts[layer])
    return loss


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 500
    batch: int = 64
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    val_fraction: float = 0.1
    normalize: bool = True


def train(net: MlpPolicy, data: Dataset, cfg: TrainConfig = TrainConfig()) -> list:
    """Mini-batch Adam on MSE against the expert labels.

    Standardization statistics come from the training split and are stored
    on the network before the first update. Returns per-epoch
    (train_mse, val_mse) pairs; raises DivergenceError on non-finite loss.
    Deterministic given cfg.seed.
    """
    if len(data) == 0:
        raise ValueError("empty dataset")
    train_idx, val_idx = data.split(cfg.val_fraction, cfg.seed)
    if train_idx.size == 0:
        raise ValueError("empty train split")
    X_tr, y_tr = data.X[train_idx], data.y[train_idx]
    X_val, y_val = data.X[val_idx], data.y[val_idx]

    if cfg.normalize:
        net.input_offset = X_tr.mean(axis=0)
        scale = X_tr.std(axis=0)
        net.input_scale = np.where(scale < 1e-12, 1.0, scale)

    p_flat, _ = _flatten_params(net)
    g_flat = np.zeros_like(p_flat)
    g_views = []
    off = 0
    for t_ in net.weights + net.biases:
        g_views.append(g_flat[off:off + t_.size].reshape(t_.shape))
        off += t_.size
    m = np.zeros_like(p_flat)
    v = np.zeros_like(p_flat)
    rng = np.random.default_rng([990, cfg.seed])
    history = []
    t = 0
    # Divergence shows up as a non-finite loss; silence the upstream
    # overflow warnings so the raised error is the only signal.
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(cfg.epochs):
            order = rng.permutation(train_idx.size)
            Xs, ys = X_tr[order], y_tr[order]  # shuffle once, then slice views
            for start in range(0, order.size, cfg.batch):
                stop = start + cfg.batch
                loss = _gradients_into(net, Xs[start:stop], ys[start:stop], g_views)
                if not math.isfinite(loss):
                    raise DivergenceError(f"non-finite batch loss at update {t}")
                t += 1
                m *= cfg.beta1
                m += (1.0 - cfg.beta1) * g_flat
                v *= cfg.beta2
                v += (1.0 - cfg.beta2) * (g_flat * g_flat)
                bias1 = 1.0 - cfg.beta1 ** t
                bias2 = 1.0 - cfg.beta2 ** t
                p_flat -= cfg.lr * (m / bias1) / (np.sqrt(v / bias2) + cfg.eps)
            train_mse = _mse(net, X_tr, y_tr)
            val_mse = _mse(net, X_val, y_val) if val_idx.size else train_mse
            if not (math.isfinite(train_mse) and math.isfinite(val_mse)):
                raise DivergenceError("non-finite epoch loss")
            history.append((train_mse, val_mse))
    return history


def _mse(net: MlpPolicy, X, y) -> float:
    if X.shape[0] == 0:
        return 0.0
    d = net.raw_batch(X) - y
    return float(np.mean(d * d))


def evaluate_mse(net: MlpPolicy, data: Dataset, idx=None) -> float:
    """MSE of the pre-saturation output against labels (optionally a subset)."""
    if idx is None:
        return _mse(net, data.X, data.y)
    return _mse(net, data.X[idx], data.y[idx])


# -- serialization ---------------------------------------------------------

def to_json_dict(net: MlpPolicy) -> dict:
    return {
        "layer_dims": net.layer_dims,
        "activation": "tanh",
        "saturation": None if net.saturation is None else
            [net.saturation[0].tolist(), net.saturation[1].tolist()],
        "weights": [W.tolist() for W in net.weights],
        "biases": [b.tolist() for b in net.biases],
        "feature_map": net.feature_map,
        "seed": net.seed,
        "input_offset": None if net.input_offset is None else net.input_offset.tolist(),
        "input_scale": None if net.input_scale is None else net.input_scale.tolist(),
        "training_meta": net.training_meta,
    }


def from_json_dict(doc: dict) -> MlpPolicy:
    if doc.get("activation", "tanh") != "tanh":
        raise ValueError(f"unsupported activation {doc.get('activation')!r}")
    return MlpPolicy(
        layer_dims=doc["layer_dims"],
        weights=doc["weights"],
        biases=doc["biases"],
        feature_map=doc.get("feature_map", "identity"),
        saturation=doc.get("saturation"),
        seed=doc.get("seed"),
        input_offset=doc.get("input_offset"),
        input_scale=doc.get("input_scale"),
        training_meta=doc.get("training_meta"),
    )


def save_model(net: MlpPolicy, path) -> None:
    with open(path, "w") as fh:
        json.dump(to_json_dict(net), fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_model(path) -> MlpPolicy:
    with open(path) as fh:
        return from_json_dict(json.load(fh))
