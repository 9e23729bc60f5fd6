"""Feed-forward embedding network with exact backpropagation.

Maps a flat feature vector (raw features or a flattened image scaled to
[0, 1], channels interleaved per pixel) to a fixed-dimension embedding,
128 by default.  Hidden layers are rectified, the output layer is linear;
an optional flag projects the output onto the unit sphere.  The output is
NOT normalized by default: the margin-1 losses act on raw embedding
distances.

Checkpoints are a documented binary layout (magic string, dims, row-major
64-bit little-endian parameters) written and read bit-exactly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .numeric import DimensionMismatch
from .rng import RngStream

CHECKPOINT_MAGIC = b"SIMREID1"
_NORM_FLOOR = 1e-30  # below this the output norm is treated as zero


@dataclass
class EmbeddingNet:
    """Parameters of the network; weights[i] has shape (dims[i+1], dims[i])."""

    layer_dims: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    l2_normalize_output: bool = False

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def embedding_dim(self) -> int:
        return self.layer_dims[-1]

    @property
    def num_layers(self) -> int:
        return len(self.weights)

    def copy(self) -> "EmbeddingNet":
        return EmbeddingNet(
            list(self.layer_dims),
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.l2_normalize_output,
        )

    def tag(self) -> str:
        """Short architecture label for result tables, e.g. 'mlp-16-64-128'."""
        return "mlp-" + "-".join(str(d) for d in self.layer_dims)


@dataclass
class ForwardTrace:
    """Per-layer values retained for backprop through one input."""

    x: np.ndarray
    pre_activations: list[np.ndarray]
    activations: list[np.ndarray]  # post-ReLU per hidden layer; last entry raw output
    embedding: np.ndarray
    output_norm: float  # ||raw output||, only meaningful when normalizing


@dataclass
class ParamGrads:
    """Gradients mirroring the shapes of an EmbeddingNet's parameters."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @classmethod
    def zeros_for(cls, net: EmbeddingNet) -> "ParamGrads":
        return cls(
            [np.zeros_like(w) for w in net.weights],
            [np.zeros_like(b) for b in net.biases],
        )

    def add_(self, other: "ParamGrads") -> None:
        for mine, theirs in zip(self.weights, other.weights):
            mine += theirs
        for mine, theirs in zip(self.biases, other.biases):
            mine += theirs

    def scale_(self, factor: float) -> None:
        for w in self.weights:
            w *= factor
        for b in self.biases:
            b *= factor

    def named(self):
        for i, w in enumerate(self.weights):
            yield f"weights[{i}]", w
        for i, b in enumerate(self.biases):
            yield f"biases[{i}]", b


def init(
    layer_dims: list[int], rng: RngStream, l2_normalize_output: bool = False
) -> EmbeddingNet:
    """He-scaled random weights (std = sqrt(2 / fan_in)), zero biases."""
    if len(layer_dims) < 2:
        raise ValueError(f"need at least input and output dims, got {layer_dims}")
    if any(d <= 0 for d in layer_dims):
        raise ValueError(f"layer dims must be positive, got {layer_dims}")
    weights = []
    biases = []
    for i in range(len(layer_dims) - 1):
        fan_in, fan_out = layer_dims[i], layer_dims[i + 1]
        std = np.sqrt(2.0 / fan_in)
        layer_rng = rng.derive(i)
        w = np.array(layer_rng.normals(fan_out * fan_in, std=std)).reshape(
            fan_out, fan_in
        )
        weights.append(w)
        biases.append(np.zeros(fan_out))
    return EmbeddingNet(list(layer_dims), weights, biases, l2_normalize_output)


def forward(net: EmbeddingNet, x) -> tuple[np.ndarray, ForwardTrace]:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (net.input_dim,):
        raise DimensionMismatch(
            f"input has dim {x.shape}, network expects ({net.input_dim},)"
        )
    pre = []
    act = []
    a = x
    last = net.num_layers - 1
    for i in range(net.num_layers):
        z = net.weights[i] @ a + net.biases[i]
        pre.append(z)
        a = z if i == last else np.maximum(z, 0.0)
        act.append(a)
    norm = float(np.sqrt(np.dot(a, a)))
    if net.l2_normalize_output and norm > _NORM_FLOOR:
        embedding = a / norm
    else:
        embedding = a.copy()
    return embedding, ForwardTrace(x, pre, act, embedding, norm)


def forward_many(net: EmbeddingNet, xs: np.ndarray) -> np.ndarray:
    """Batched forward without traces; rows of xs are inputs."""
    a = np.asarray(xs, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != net.input_dim:
        raise DimensionMismatch(
            f"inputs have shape {a.shape}, network expects (n, {net.input_dim})"
        )
    last = net.num_layers - 1
    for i in range(net.num_layers):
        a = a @ net.weights[i].T + net.biases[i]
        if i != last:
            np.maximum(a, 0.0, out=a)
    if net.l2_normalize_output:
        norms = np.linalg.norm(a, axis=1, keepdims=True)
        a = np.where(norms > _NORM_FLOOR, a / np.where(norms == 0, 1.0, norms), a)
    return a


def backward(
    net: EmbeddingNet, trace: ForwardTrace, grad_embedding
) -> ParamGrads:
    """Exact gradients of (grad_embedding . embedding) w.r.t. all parameters."""
    g = np.asarray(grad_embedding, dtype=np.float64)
    if g.shape != (net.embedding_dim,):
        raise DimensionMismatch(
            f"grad has shape {g.shape}, embedding dim is {net.embedding_dim}"
        )
    if net.l2_normalize_output and trace.output_norm > _NORM_FLOOR:
        # y = raw / ||raw||  =>  dL/draw = (g - (g.y) y) / ||raw||
        e = trace.embedding
        g = (g - np.dot(g, e) * e) / trace.output_norm
    grads = ParamGrads.zeros_for(net)
    delta = g
    for i in range(net.num_layers - 1, -1, -1):
        if i != net.num_layers - 1:
            delta = delta * (trace.pre_activations[i] > 0.0)
        a_prev = trace.x if i == 0 else trace.activations[i - 1]
        grads.weights[i][:] = np.outer(delta, a_prev)
        grads.biases[i][:] = delta
        if i > 0:
            delta = net.weights[i].T @ delta
    return grads


def net_to_bytes(net: EmbeddingNet) -> bytes:
    parts = [CHECKPOINT_MAGIC]
    flags = 1 if net.l2_normalize_output else 0
    parts.append(struct.pack("<BI", flags, len(net.layer_dims)))
    parts.append(struct.pack(f"<{len(net.layer_dims)}I", *net.layer_dims))
    for w, b in zip(net.weights, net.biases):
        parts.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    return b"".join(parts)


def net_from_bytes(blob: bytes) -> EmbeddingNet:
    if blob[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ValueError("not a model checkpoint: bad magic string")
    off = len(CHECKPOINT_MAGIC)
    flags, ndims = struct.unpack_from("<BI", blob, off)
    off += struct.calcsize("<BI")
    dims = list(struct.unpack_from(f"<{ndims}I", blob, off))
    off += 4 * ndims
    weights = []
    biases = []
    for i in range(len(dims) - 1):
        rows, cols = dims[i + 1], dims[i]
        w = np.frombuffer(blob, dtype="<f8", count=rows * cols, offset=off)
        off += 8 * rows * cols
        b = np.frombuffer(blob, dtype="<f8", count=rows, offset=off)
        off += 8 * rows
        weights.append(w.reshape(rows, cols).astype(np.float64))
        biases.append(b.astype(np.float64))
    if off != len(blob):
        raise ValueError("checkpoint has trailing bytes; file is corrupt")
    return EmbeddingNet(dims, weights, biases, bool(flags & 1))


def save_checkpoint(net: EmbeddingNet, path) -> None:
    with open(path, "wb") as fh:
        fh.write(net_to_bytes(net))


def load_checkpoint(path) -> EmbeddingNet:
    with open(path, "rb") as fh:
        return net_from_bytes(fh.read())
