"""Trainable feature chain: 1x1 channel-mixing encoder, average pool + linear
projector, and a two-layer graph convolution network. Each stage has an
explicit forward (returning a cache) and an exact backward.

Parameters are stored as float32; all arithmetic runs in float64.
"""

from dataclasses import dataclass, field

import numpy as np

from .core import load_named, save_named

PARAM_NAMES = ("encoder.W", "encoder.b", "projector.W", "projector.b", "gnn0.W", "gnn0.b", "gnn1.W", "gnn1.b")


@dataclass
class LinearLayer:
    W: np.ndarray  # out x in
    b: np.ndarray  # out

    def __post_init__(self):
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[0],):
            raise ValueError(f"inconsistent layer shapes W{self.W.shape} b{self.b.shape}")

    @property
    def n_in(self):
        return self.W.shape[1]

    @property
    def n_out(self):
        return self.W.shape[0]


GcnLayer = LinearLayer


@dataclass
class ModelParams:
    encoder: LinearLayer
    projector: LinearLayer
    gnn: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.gnn) != 2:
            raise ValueError("the message-passing network has exactly two layers")
        e, p, g0, g1 = self.encoder, self.projector, self.gnn[0], self.gnn[1]
        if e.n_in != e.n_out:
            raise ValueError("encoder must map D -> D")
        if e.n_out != p.n_in:
            raise ValueError("encoder.out must equal projector.in")
        F = p.n_out
        if g0.n_in != F or g0.n_out != F or g1.n_in != F or g1.n_out != F:
            raise ValueError("gnn layers must be F -> F")

    @property
    def D(self):
        return self.encoder.n_in

    @property
    def F(self):
        return self.projector.n_out

    def named(self):
        layers = {"encoder": self.encoder, "projector": self.projector, "gnn0": self.gnn[0], "gnn1": self.gnn[1]}
        out = {}
        for name, layer in layers.items():
            out[f"{name}.W"] = layer.W
            out[f"{name}.b"] = layer.b
        return out

    @classmethod
    def from_named(cls, t):
        missing = set(PARAM_NAMES) - set(t)
        if missing:
            raise KeyError(f"missing parameter tensors: {sorted(missing)}")

        def layer(name):
            return LinearLayer(np.asarray(t[f"{name}.W"]), np.asarray(t[f"{name}.b"]))

        return cls(layer("encoder"), layer("projector"), [layer("gnn0"), layer("gnn1")])

    def copy(self):
        return ModelParams.from_named({k: v.copy() for k, v in self.named().items()})


def init_params(rng, D, F, identity=False):
    """Gaussian fan-in init (zero biases); ``identity=True`` gives the identity stack."""
    if identity:
        eye = lambda o, i: np.eye(o, i, dtype=np.float32)  # noqa: E731
        mats = [eye(D, D), eye(F, D), eye(F, F), eye(F, F)]
    else:
        shapes = [(D, D), (F, D), (F, F), (F, F)]
        gains = [2.0, 1.0, 2.0, 1.0]
        mats = [(rng.standard_normal(s) * np.sqrt(g / s[1])).astype(np.float32) for s, g in zip(shapes, gains)]
    layers = [LinearLayer(m, np.zeros(m.shape[0], dtype=np.float32)) for m in mats]
    return ModelParams(layers[0], layers[1], layers[2:])


def _f64(a):
    return np.asarray(a, dtype=np.float64)


# --- encoder -----------------------------------------------------------------

def encoder_forward(x, layer):
    x = _f64(x)
    if x.ndim != 4 or x.shape[1] != layer.n_in:
        raise ValueError(f"encoder expects N x {layer.n_in} x R x S input, got {x.shape}")
    pre = np.einsum("oi,nirs->nors", _f64(layer.W), x) + _f64(layer.b)[None, :, None, None]
    y = np.maximum(pre, 0.0)
    return y, (x, pre, layer)


def encoder_backward(dy, cache):
    x, pre, layer = cache
    if dy.shape != pre.shape:
        raise ValueError(f"upstream shape {dy.shape} does not match output {pre.shape}")
    dpre = np.where(pre > 0, dy, 0.0)
    dW = np.einsum("nors,nirs->oi", dpre, x)
    db = dpre.sum(axis=(0, 2, 3))
    dx = np.einsum("oi,nors->nirs", _f64(layer.W), dpre)
    return dx, {"W": dW, "b": db}


# --- pooling + projector -----------------------------------------------------

def pool_project_forward(y, layer):
    y = _f64(y)
    if y.ndim != 4 or y.shape[1] != layer.n_in:
        raise ValueError(f"projector expects N x {layer.n_in} x R x S input, got {y.shape}")
    m = y.mean(axis=(2, 3))
    z = m @ _f64(layer.W).T + _f64(layer.b)
    return z, (y.shape, m, layer)


def pool_project_backward(dz, cache):
    shape, m, layer = cache
    if dz.shape != (shape[0], layer.n_out):
        raise ValueError(f"upstream shape {dz.shape} does not match output")
    dW = dz.T @ m
    db = dz.sum(axis=0)
    dm = dz @ _f64(layer.W)
    dy = np.broadcast_to(dm[:, :, None, None] / (shape[2] * shape[3]), shape).copy()
    return dy, {"W": dW, "b": db}


# --- graph convolution -------------------------------------------------------

def propagation_matrix(graph):
    """Row-normalised (A + I) with A the union-symmetrised kNN adjacency."""
    n = graph.n
    A = np.zeros((n, n))
    if len(graph.edges):
        A[graph.edges[:, 0], graph.edges[:, 1]] = 1.0
        A[graph.edges[:, 1], graph.edges[:, 0]] = 1.0
    A += np.eye(n)
    return A / A.sum(axis=1, keepdims=True)


def gnn_forward(graph, Z, layers):
    Z = _f64(Z)
    if Z.shape[0] != graph.n:
        raise ValueError(f"graph has {graph.n} nodes but Z has {Z.shape[0]} rows")
    P = propagation_matrix(graph)
    H = Z
    caches = []
    for li, layer in enumerate(layers):
        M = P @ H
        pre = M @ _f64(layer.W).T + _f64(layer.b)
        last = li == len(layers) - 1
        caches.append((M, pre, layer, last))
        H = pre if last else np.maximum(pre, 0.0)
    return H, (P, caches)


def gnn_backward(dH, cache):
    P, caches = cache
    grads = [None] * len(caches)
    for li in range(len(caches) - 1, -1, -1):
        M, pre, layer, last = caches[li]
        dpre = dH if last else np.where(pre > 0, dH, 0.0)
        grads[li] = {"W": dpre.T @ M, "b": dpre.sum(axis=0)}
        dM = dpre @ _f64(layer.W)
        dH = P.T @ dM
    return dH, grads


# --- checkpoints -------------------------------------------------------------

def save_checkpoint(directory, params, extra=None):
    save_named(directory, params.named(), extra)


def load_checkpoint(directory):
    tensors, _ = load_named(directory)
    return ModelParams.from_named(tensors)
