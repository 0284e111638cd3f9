"""Small dense networks with low-rank adapters, AdamW and gradient utilities.

Weights are stored flat, layer by layer, as an ``(w_in, w_out)`` row-major
matrix followed by the ``w_out`` bias, so a layer computes ``h @ W + b``.
An adapter adds ``scale * B @ A.T`` to every weight matrix, with
``A: (w_out, r)`` and ``B: (w_in, r)``; biases are not adapted.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import TrainingDivergenceError

ACTIVATIONS = ("tanh", "relu", "silu")


def _act(name, z):
    if name == "tanh":
        return np.tanh(z)
    if name == "relu":
        return np.maximum(z, 0.0)
    return z / (1.0 + np.exp(-z))


def _act_grad(name, z, a):
    if name == "tanh":
        return 1.0 - a * a
    if name == "relu":
        return (z > 0).astype(z.dtype)
    s = 1.0 / (1.0 + np.exp(-z))
    return s * (1.0 + z * (1.0 - s))


class DenseNet:
    """Affine layers with an activation between them (none after the last)."""

    def __init__(self, layer_widths, activation="silu", params=None):
        widths = [int(w) for w in layer_widths]
        if len(widths) < 2 or min(widths) < 1:
            raise ValueError("need at least an input and an output width, all positive")
        if activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        self.layer_widths = widths
        self.activation = activation
        self.shapes = list(zip(widths[:-1], widths[1:]))
        self.n_params = sum(i * o + o for i, o in self.shapes)
        if params is None:
            params = np.zeros(self.n_params)
        params = np.asarray(params, dtype=np.float64)
        if params.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {params.shape}")
        if not np.all(np.isfinite(params)):
            raise ValueError("parameters must be finite")
        self.params = params

    @classmethod
    def init(cls, layer_widths, activation="silu", rng=None):
        """Glorot-style normal initialisation, zero biases."""
        rng = np.random.default_rng() if rng is None else rng
        net = cls(layer_widths, activation)
        for W, _ in net.layers():
            W[...] = rng.normal(0.0, np.sqrt(2.0 / sum(W.shape)), size=W.shape)
        return net

    def layers(self, params=None):
        """(W, b) views into the flat parameter vector."""
        params = self.params if params is None else params
        out, k = [], 0
        for i, o in self.shapes:
            W = params[k:k + i * o].reshape(i, o)
            k += i * o
            out.append((W, params[k:k + o]))
            k += o
        return out


class LowRankAdapter:
    """Trainable factors for every weight matrix of a :class:`DenseNet`."""

    def __init__(self, net: DenseNet, rank: int, scale: float = 1.0, params=None):
        if rank < 1:
            raise ValueError("rank must be positive")
        self.rank = int(rank)
        self.scale = float(scale)
        self.shapes = list(net.shapes)
        self.n_params = sum((i + o) * self.rank for i, o in self.shapes)
        if params is None:
            params = np.zeros(self.n_params)
        params = np.asarray(params, dtype=np.float64)
        if params.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} adapter parameters, got {params.shape}")
        self.params = params

    @classmethod
    def init(cls, net: DenseNet, rank: int, rng, scale: float = 1.0, std: float = 0.02):
        """A ~ N(0, std**2), B = 0, so the adapted net starts equal to the base."""
        ad = cls(net, rank, scale)
        for A, _ in ad.factors():
            A[...] = rng.normal(0.0, std, size=A.shape)
        return ad

    def factors(self, params=None):
        """(A, B) views per layer."""
        params = self.params if params is None else params
        out, k, r = [], 0, self.rank
        for i, o in self.shapes:
            A = params[k:k + o * r].reshape(o, r)
            k += o * r
            B = params[k:k + i * r].reshape(i, r)
            k += i * r
            out.append((A, B))
        return out


@dataclass
class ForwardCache:
    inputs: list
    pre: list
    post: list
    weights: list


def _effective_weights(net, adapter):
    layers = net.layers()
    if adapter is None:
        return [W for W, _ in layers]
    return [W + adapter.scale * (B @ A.T) for (W, _), (A, B) in zip(layers, adapter.factors())]


def forward(net: DenseNet, adapter: LowRankAdapter | None, x, return_cache: bool = False):
    """Network output for a single input vector or a batch of rows."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    h = x[None, :] if single else x
    if h.shape[-1] != net.layer_widths[0]:
        raise ValueError(f"input width {h.shape[-1]} != {net.layer_widths[0]}")
    weights = _effective_weights(net, adapter)
    biases = [b for _, b in net.layers()]
    cache = ForwardCache([], [], [], weights)
    last = len(weights) - 1
    for k, (W, b) in enumerate(zip(weights, biases)):
        cache.inputs.append(h)
        z = h @ W + b
        h = z if k == last else _act(net.activation, z)
        cache.pre.append(z)
        cache.post.append(h)
    out = h[0] if single else h
    return (out, cache) if return_cache else out


@dataclass
class NetGrad:
    """Gradient split into base and adapter slots; frozen slots are exact zeros."""

    base: np.ndarray
    adapter: np.ndarray | None = None
    input: np.ndarray | None = field(default=None, repr=False)


def backward(net: DenseNet, adapter: LowRankAdapter | None, cache: ForwardCache, grad_out) -> NetGrad:
    """Reverse-mode gradient of ``sum(grad_out * output)``.

    With an adapter the base is frozen: only adapter slots are populated.
    """
    g = np.asarray(grad_out, dtype=np.float64)
    if g.ndim == 1:
        g = g[None, :]
    if g.shape != cache.post[-1].shape:
        raise ValueError(f"upstream gradient shape {g.shape} != output shape {cache.post[-1].shape}")
    base = np.zeros(net.n_params)
    base_layers = net.layers(base)
    ad = None if adapter is None else np.zeros(adapter.n_params)
    ad_layers = None if adapter is None else adapter.factors(ad)
    factors = None if adapter is None else adapter.factors()
    last = len(cache.weights) - 1
    for k in range(last, -1, -1):
        if k != last:
            g = g * _act_grad(net.activation, cache.pre[k], cache.post[k])
        gW = cache.inputs[k].T @ g
        if adapter is None:
            base_layers[k][0][...] = gW
            base_layers[k][1][...] = g.sum(axis=0)
        else:
            A, B = factors[k]
            dA, dB = ad_layers[k]
            dA[...] = adapter.scale * (gW.T @ B)
            dB[...] = adapter.scale * (gW @ A)
        g = g @ cache.weights[k].T
    return NetGrad(base=base, adapter=ad, input=g)


def trainable_grad(grad: NetGrad) -> np.ndarray:
    return grad.base if grad.adapter is None else grad.adapter


@dataclass
class AdamWState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n, **kw):
        return cls(np.zeros(n), np.zeros(n), **kw)


def adamw_step(params, grads, state: AdamWState, lr: float, weight_decay: float = 0.0):
    """One AdamW update; returns ``(new_params, new_state)`` without mutating inputs."""
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or state.m.shape != params.shape:
        raise ValueError("params, grads and optimizer moments must have equal shapes")
    if not np.all(np.isfinite(grads)):
        raise TrainingDivergenceError("non-finite gradient", step=state.step)
    step = state.step + 1
    m = state.beta1 * state.m + (1 - state.beta1) * grads
    v = state.beta2 * state.v + (1 - state.beta2) * grads * grads
    m_hat = m / (1 - state.beta1**step)
    v_hat = v / (1 - state.beta2**step)
    new = params * (1 - lr * weight_decay) - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new, AdamWState(m, v, step, state.beta1, state.beta2, state.eps)


def clip_grad_norm(grads, max_norm: float):
    if not max_norm > 0:
        raise ValueError("max_norm must be positive")
    grads = np.asarray(grads, dtype=np.float64)
    norm = float(np.linalg.norm(grads))
    # the slack keeps repeated application an exact no-op
    if norm > max_norm + 1e-12:
        return grads * (max_norm / norm)
    return grads


@dataclass
class GradCheckReport:
    max_rel_error: float
    max_abs_error: float
    worst_index: int
    checked: np.ndarray
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error <= self.tolerance)


def grad_check(loss_fn, params, grad, step: float = 1e-6, tolerance: float = 1e-5,
               max_coords: int | None = 200, rng=None) -> GradCheckReport:
    """Central-difference check of ``grad`` against ``loss_fn`` at ``params``.

    The relative error of a coordinate is its absolute error divided by the
    largest gradient magnitude seen on either side; above ``max_coords``
    parameters a random subset of coordinates is checked.
    """
    params = np.array(params, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    n = params.size
    if max_coords is not None and n > max_coords:
        rng = np.random.default_rng(0) if rng is None else rng
        idx = np.sort(rng.choice(n, size=max_coords, replace=False))
    else:
        idx = np.arange(n)
    fd = np.empty(idx.size)
    for k, i in enumerate(idx):
        old = params[i]
        params[i] = old + step
        up = loss_fn(params)
        params[i] = old - step
        down = loss_fn(params)
        params[i] = old
        fd[k] = (up - down) / (2 * step)
    err = np.abs(fd - grad[idx])
    scale = max(float(np.abs(fd).max(initial=0.0)), float(np.abs(grad[idx]).max(initial=0.0)))
    rel = err / scale if scale > 0 else err
    worst = int(np.argmax(rel)) if rel.size else 0
    return GradCheckReport(float(rel.max(initial=0.0)), float(err.max(initial=0.0)),
                           int(idx[worst]) if idx.size else -1, idx, tolerance)
