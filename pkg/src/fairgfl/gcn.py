"""Two-layer graph convolutional network with manual forward/backward passes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .graph import ClientSubgraph, ValidationError


class NumericError(ArithmeticError):
    """Raised when a non-finite value appears during a forward pass."""


@dataclass(frozen=True)
class GcnModel:
    W1: np.ndarray  # (feature_dim, hidden_dim)
    W2: np.ndarray  # (hidden_dim, num_classes)

    @property
    def hidden_dim(self) -> int:
        return self.W1.shape[1]

    def copy(self) -> "GcnModel":
        return GcnModel(self.W1.copy(), self.W2.copy())


@dataclass(frozen=True)
class GradientSet:
    dW1: np.ndarray
    dW2: np.ndarray


@dataclass(frozen=True)
class NormalizedAdjacency:
    """Symmetric normalization with self-loops: D^-1/2 (A + I) D^-1/2."""

    matrix: sp.csr_matrix


def init_model(feature_dim: int, hidden_dim: int, num_classes: int, rng) -> GcnModel:
    """Glorot-uniform initialization from the given generator."""

    def glorot(fan_in, fan_out):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-limit, limit, size=(fan_in, fan_out))

    return GcnModel(glorot(feature_dim, hidden_dim), glorot(hidden_dim, num_classes))


def normalize_adjacency(sub) -> NormalizedAdjacency:
    """Build D^-1/2 (A + I) D^-1/2 from a subgraph or raw adjacency."""
    adj = sub.adjacency if isinstance(sub, ClientSubgraph) else sub
    n = adj.shape[0]
    a_tilde = (adj + sp.eye(n, format="csr")).tocsr()
    deg = np.asarray(a_tilde.sum(axis=1)).ravel()
    d_inv_sqrt = 1.0 / np.sqrt(deg)
    d_mat = sp.diags(d_inv_sqrt)
    return NormalizedAdjacency((d_mat @ a_tilde @ d_mat).tocsr())


def forward(model: GcnModel, a_hat: NormalizedAdjacency, x: np.ndarray):
    """logits = A_hat * relu(A_hat * X * W1) * W2, with cache for backward."""
    a = a_hat.matrix
    ax = a @ x
    z1 = ax @ model.W1
    h = np.maximum(z1, 0.0)
    ah = a @ h
    logits = ah @ model.W2
    if not np.isfinite(logits).all():
        raise NumericError("non-finite logits in forward pass")
    cache = {"ax": ax, "z1": z1, "ah": ah}
    return logits, cache


def _masked_softmax_ce(logits: np.ndarray, labels: np.ndarray, mask: np.ndarray):
    """Mean cross-entropy over masked rows; returns (loss, dlogits)."""
    ml = logits[mask]
    shifted = ml - ml.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=1, keepdims=True)
    idx = np.arange(len(ml))
    y = labels[mask]
    loss = -np.mean(shifted[idx, y] - np.log(exp.sum(axis=1)))
    dmasked = probs.copy()
    dmasked[idx, y] -= 1.0
    dmasked /= len(ml)
    dlogits = np.zeros_like(logits)
    dlogits[mask] = dmasked
    return loss, dlogits


def loss_and_grad(
    model: GcnModel,
    a_hat: NormalizedAdjacency,
    x: np.ndarray,
    labels: np.ndarray,
    mask: np.ndarray,
):
    """Masked mean cross-entropy and its exact gradient.

    mask is an index array or boolean mask of nodes contributing to the
    loss; all nodes still participate in propagation.
    """
    mask = np.asarray(mask)
    if mask.dtype == bool:
        mask = np.flatnonzero(mask)
    if len(mask) == 0:
        raise ValidationError("mask must select at least one node")

    a = a_hat.matrix
    logits, cache = forward(model, a_hat, x)
    loss, dlogits = _masked_softmax_ce(logits, labels, mask)

    dW2 = cache["ah"].T @ dlogits
    dh = (a @ dlogits) @ model.W2.T  # A_hat is symmetric
    dz1 = dh * (cache["z1"] > 0)
    dW1 = cache["ax"].T @ dz1
    return loss, GradientSet(dW1, dW2)


def masked_loss(model, a_hat, x, labels, mask) -> float:
    mask = np.asarray(mask)
    if mask.dtype == bool:
        mask = np.flatnonzero(mask)
    logits, _ = forward(model, a_hat, x)
    loss, _ = _masked_softmax_ce(logits, labels, mask)
    return float(loss)


def sgd_step(model: GcnModel, grads: GradientSet, lr: float) -> GcnModel:
    if lr <= 0:
        raise ValidationError("lr must be positive")
    return GcnModel(model.W1 - lr * grads.dW1, model.W2 - lr * grads.dW2)


def save_checkpoint(path, tensors: dict[str, np.ndarray]) -> None:
    """Write named tensors: ascii `name ndim d1..dn` headers + raw LE float64."""
    with open(path, "wb") as fh:
        for name, arr in tensors.items():
            arr = np.asarray(arr, dtype="<f8")
            header = f"{name} {arr.ndim} {' '.join(map(str, arr.shape))}\n"
            fh.write(header.encode("ascii"))
            fh.write(arr.tobytes(order="C"))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    tensors = {}
    with open(path, "rb") as fh:
        while True:
            line = b""
            while not line.endswith(b"\n"):
                ch = fh.read(1)
                if not ch:
                    return tensors
                line += ch
            parts = line.decode("ascii").split()
            name, ndim = parts[0], int(parts[1])
            shape = tuple(int(v) for v in parts[2 : 2 + ndim])
            count = int(np.prod(shape)) if shape else 1
            data = fh.read(8 * count)
            if len(data) != 8 * count:
                raise ValueError(f"truncated tensor data for {name!r}")
            tensors[name] = np.frombuffer(data, dtype="<f8").reshape(shape).copy()
    return tensors
