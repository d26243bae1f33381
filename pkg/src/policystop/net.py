"""Small float64 feed-forward networks with hand-written backprop.

Everything trainable in this package (ensemble predictors, the coupling-flow
conditioners, the VAE and the windowed reconstructor) is built from the
layers here: dense, 1-D convolution (stride 1, zero 'same' padding), relu and
tanh. Parameters live in one flat vector per network so optimizers and
checkpoints can treat a model as a single array.

Inputs are batched: dense layers take (B, D), conv layers (B, C, L).
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class TrainingDiverged(RuntimeError):
    """A loss or parameter became non-finite during training."""


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

class Dense:
    kind = "dense"

    def __init__(self, in_dim: int, out_dim: int):
        self.in_dim = in_dim
        self.out_dim = out_dim

    @property
    def n_params(self) -> int:
        return self.in_dim * self.out_dim + self.out_dim

    def descriptor(self) -> dict:
        return {"kind": self.kind, "in_dim": self.in_dim, "out_dim": self.out_dim}

    def _unpack(self, p: np.ndarray):
        nw = self.in_dim * self.out_dim
        w = p[:nw].reshape(self.in_dim, self.out_dim)
        b = p[nw:]
        return w, b

    def init_params(self, p: np.ndarray, rng: np.random.Generator) -> None:
        bound = 1.0 / np.sqrt(self.in_dim)
        p[:] = rng.uniform(-bound, bound, size=self.n_params)

    def forward(self, p: np.ndarray, x: np.ndarray):
        w, b = self._unpack(p)
        return x @ w + b, x

    def backward(self, p: np.ndarray, dy: np.ndarray, cache):
        w, _ = self._unpack(p)
        x = cache
        dw = x.T @ dy
        db = dy.sum(axis=0)
        dx = dy @ w.T
        return dx, np.concatenate([dw.ravel(), db])


class Conv1d:
    """Cross-correlation over the last axis, stride 1, zero padding, odd kernel."""

    kind = "conv1d"

    def __init__(self, in_ch: int, out_ch: int, kernel: int = 3):
        if kernel % 2 != 1:
            raise ValueError(f"kernel width must be odd, got {kernel}")
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.kernel = kernel

    @property
    def n_params(self) -> int:
        return self.out_ch * self.in_ch * self.kernel + self.out_ch

    def descriptor(self) -> dict:
        return {
            "kind": self.kind,
            "in_ch": self.in_ch,
            "out_ch": self.out_ch,
            "kernel": self.kernel,
        }

    def _unpack(self, p: np.ndarray):
        nw = self.out_ch * self.in_ch * self.kernel
        w = p[:nw].reshape(self.out_ch, self.in_ch * self.kernel)
        b = p[nw:]
        return w, b

    def init_params(self, p: np.ndarray, rng: np.random.Generator) -> None:
        bound = 1.0 / np.sqrt(self.in_ch * self.kernel)
        p[:] = rng.uniform(-bound, bound, size=self.n_params)

    def _im2col(self, x: np.ndarray) -> np.ndarray:
        b, c, length = x.shape
        half = self.kernel // 2
        xpad = np.zeros((b, c, length + 2 * half), dtype=np.float64)
        xpad[:, :, half : half + length] = x
        # (B, C, L, k) windows, flattened to rows of C*k per output position
        win = np.lib.stride_tricks.sliding_window_view(xpad, self.kernel, axis=2)
        cols = win.transpose(0, 2, 1, 3).reshape(b * length, c * self.kernel)
        return np.ascontiguousarray(cols)

    def forward(self, p: np.ndarray, x: np.ndarray):
        if x.ndim != 3 or x.shape[1] != self.in_ch:
            raise ValueError(f"conv1d expects (B, {self.in_ch}, L), got {x.shape}")
        b, _, length = x.shape
        w, bias = self._unpack(p)
        cols = self._im2col(x)
        y = cols @ w.T + bias  # (B*L, out_ch)
        y = y.reshape(b, length, self.out_ch).transpose(0, 2, 1)
        return np.ascontiguousarray(y), (cols, x.shape)

    def backward(self, p: np.ndarray, dy: np.ndarray, cache):
        cols, x_shape = cache
        b, c, length = x_shape
        w, _ = self._unpack(p)
        dy2 = np.ascontiguousarray(dy.transpose(0, 2, 1)).reshape(b * length, self.out_ch)
        dw = dy2.T @ cols
        db = dy2.sum(axis=0)
        dcols = (dy2 @ w).reshape(b, length, c, self.kernel)
        half = self.kernel // 2
        dxpad = np.zeros((b, c, length + 2 * half), dtype=np.float64)
        for j in range(self.kernel):
            dxpad[:, :, j : j + length] += dcols[:, :, :, j].transpose(0, 2, 1)
        dx = dxpad[:, :, half : half + length]
        return np.ascontiguousarray(dx), np.concatenate([dw.ravel(), db])


class Relu:
    kind = "relu"
    n_params = 0

    def descriptor(self) -> dict:
        return {"kind": self.kind}

    def forward(self, p, x):
        return np.maximum(x, 0.0), x

    def backward(self, p, dy, cache):
        return dy * (cache > 0.0), _EMPTY


class Tanh:
    kind = "tanh"
    n_params = 0

    def descriptor(self) -> dict:
        return {"kind": self.kind}

    def forward(self, p, x):
        y = np.tanh(x)
        return y, y

    def backward(self, p, dy, cache):
        return dy * (1.0 - cache * cache), _EMPTY


class Flatten:
    kind = "flatten"
    n_params = 0

    def descriptor(self) -> dict:
        return {"kind": self.kind}

    def forward(self, p, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, p, dy, cache):
        return dy.reshape(cache), _EMPTY


class Reshape:
    """(B, prod(shape)) -> (B, *shape); used ahead of conv decoders."""

    kind = "reshape"
    n_params = 0

    def __init__(self, shape: tuple):
        self.shape = tuple(int(s) for s in shape)

    def descriptor(self) -> dict:
        return {"kind": self.kind, "shape": list(self.shape)}

    def forward(self, p, x):
        return x.reshape((x.shape[0],) + self.shape), x.shape

    def backward(self, p, dy, cache):
        return dy.reshape(cache), _EMPTY


_EMPTY = np.zeros(0, dtype=np.float64)

_LAYER_KINDS = {
    "dense": lambda d: Dense(d["in_dim"], d["out_dim"]),
    "conv1d": lambda d: Conv1d(d["in_ch"], d["out_ch"], d["kernel"]),
    "relu": lambda d: Relu(),
    "tanh": lambda d: Tanh(),
    "flatten": lambda d: Flatten(),
    "reshape": lambda d: Reshape(d["shape"]),
}

ACTIVATIONS = {"relu": Relu, "tanh": Tanh}


# ---------------------------------------------------------------------------
# Network
# ---------------------------------------------------------------------------

class Network:
    """An ordered layer stack over one flat float64 parameter vector.

    ``params`` may be an externally owned buffer (e.g. a slice of a larger
    vector shared by several networks); pass ``rng`` instead to allocate and
    initialize a fresh one.
    """

    def __init__(self, layers: Sequence, params: np.ndarray | None = None,
                 rng: np.random.Generator | None = None):
        self.layers = list(layers)
        sizes = [layer.n_params for layer in self.layers]
        self.n_params = int(sum(sizes))
        offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
        self._slices = [slice(offsets[i], offsets[i + 1]) for i in range(len(self.layers))]
        if params is None:
            if rng is None:
                raise ValueError("need either a params buffer or an rng to initialize")
            params = np.zeros(self.n_params, dtype=np.float64)
            for layer, sl in zip(self.layers, self._slices):
                if layer.n_params:
                    layer.init_params(params[sl], rng)
        else:
            if params.shape != (self.n_params,):
                raise ValueError(
                    f"params buffer has shape {params.shape}, need ({self.n_params},)"
                )
        self.params = params

    def layer_params(self, i: int) -> np.ndarray:
        return self.params[self._slices[i]]

    def forward(self, x: np.ndarray) -> np.ndarray:
        for i, layer in enumerate(self.layers):
            x, _ = layer.forward(self.layer_params(i), x)
        return x

    def forward_cached(self, x: np.ndarray):
        caches = []
        for i, layer in enumerate(self.layers):
            x, cache = layer.forward(self.layer_params(i), x)
            caches.append(cache)
        return x, caches

    def backward(self, dy: np.ndarray, caches) -> tuple[np.ndarray, np.ndarray]:
        """Propagate ``dy`` back through the stack; returns (dx, flat param grads)."""
        grad = np.zeros(self.n_params, dtype=np.float64)
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            dy, dp = layer.backward(self.layer_params(i), dy, caches[i])
            if layer.n_params:
                grad[self._slices[i]] = dp
        return dy, grad

    def descriptors(self) -> list[dict]:
        return [layer.descriptor() for layer in self.layers]

    def copy(self) -> "Network":
        return Network(self.layers, params=self.params.copy())


def network_from_descriptors(descriptors: Sequence[dict],
                             params: np.ndarray | None = None,
                             rng: np.random.Generator | None = None) -> Network:
    layers = []
    for d in descriptors:
        try:
            layers.append(_LAYER_KINDS[d["kind"]](d))
        except KeyError as e:
            raise ValueError(f"unknown layer kind in descriptor: {d!r}") from e
    return Network(layers, params=params, rng=rng)


def mlp(dims: Sequence[int], activation: str = "relu") -> list:
    """Dense stack with the given activation between layers (none after the last)."""
    act = ACTIVATIONS[activation]
    layers: list = []
    for i in range(len(dims) - 1):
        layers.append(Dense(dims[i], dims[i + 1]))
        if i < len(dims) - 2:
            layers.append(act())
    return layers


# ---------------------------------------------------------------------------
# Losses and gradient checking
# ---------------------------------------------------------------------------

def mse_loss_and_grad(net: Network, x: np.ndarray, target: np.ndarray,
                      sample_weight: float = 1.0):
    """Squared-error fit loss and its weighted parameter gradient.

    Loss per sample is the summed squared prediction error; the batch loss is
    the mean over samples. The returned gradient is d(weight * loss)/dparams;
    the loss value itself is returned unweighted.
    """
    if sample_weight <= 0:
        raise ValueError(f"sample_weight must be positive, got {sample_weight}")
    pred, caches = net.forward_cached(x)
    if pred.shape != target.shape:
        raise ValueError(f"prediction shape {pred.shape} != target shape {target.shape}")
    diff = pred - target
    batch = diff.shape[0]
    loss = float(np.sum(diff * diff) / batch)
    if not np.isfinite(loss):
        raise TrainingDiverged(f"non-finite loss {loss}")
    dy = (2.0 * sample_weight / batch) * diff
    _, grad = net.backward(dy, caches)
    return loss, grad


def finite_difference_grad(loss_fn: Callable[[], float], params: np.ndarray,
                           eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of ``loss_fn`` w.r.t. ``params`` (mutated in place)."""
    grad = np.zeros_like(params)
    for i in range(params.size):
        orig = params[i]
        params[i] = orig + eps
        lp = loss_fn()
        params[i] = orig - eps
        lm = loss_fn()
        params[i] = orig
        grad[i] = (lp - lm) / (2.0 * eps)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))


def gradient_check(net: Network, x: np.ndarray, target: np.ndarray,
                   eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference MSE gradients."""
    _, analytic = mse_loss_and_grad(net, x, target)
    numeric = finite_difference_grad(
        lambda: mse_loss_and_grad(net, x, target)[0], net.params, eps
    )
    return max_relative_error(analytic, numeric)
