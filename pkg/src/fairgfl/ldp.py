"""Local differential privacy for mini-batch subgraphs.

Covers the feature encoder, the quantile-grid node mechanism, randomized
response on adjacency bits, the density-based sparsification correction,
and the permanent-response cache that neutralizes repeated queries.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .graph import ClientSubgraph, ValidationError
from .gcn import NumericError

# Nudge before flooring so grid points themselves do not flip buckets
# through floating-point representation error.
_FLOOR_EPS = 1e-12


@dataclass(frozen=True)
class LdpParams:
    """Privacy budgets and grid resolution for subgraph sanitization."""

    epsilon_a: float  # per-element node feature budget
    epsilon_b: float  # per-link budget
    quantiles: int    # grid has quantiles + 1 points {i/p}

    def __post_init__(self):
        if self.epsilon_a <= 0 or self.epsilon_b <= 0:
            raise ValidationError("privacy budgets must be positive")
        if self.quantiles < 1:
            raise ValidationError("quantiles must be >= 1")

    @property
    def flip_probability(self) -> float:
        """p_e = 1 / (1 + e^epsilon_b), always in (0, 1/2)."""
        return 1.0 / (1.0 + np.exp(self.epsilon_b))


@dataclass(frozen=True)
class Encoder:
    """Encode half of a single-hidden-layer autoencoder, with output clamp range."""

    W: np.ndarray   # (feature_dim, d1)
    b: np.ndarray   # (d1,)
    d1: int
    x_min: float
    x_max: float

    def encode(self, x: np.ndarray) -> np.ndarray:
        return np.tanh(np.atleast_2d(x) @ self.W + self.b)


@dataclass
class PermanentCache:
    """First-response cache: each node vector and link bit is perturbed once."""

    nodes: dict[int, np.ndarray] = field(default_factory=dict)
    links: dict[tuple[int, int], int] = field(default_factory=dict)


@dataclass(frozen=True)
class SanitizedBatch:
    """The only client data the server ever sees for one round."""

    client_id: int
    batch_size: int
    sanitized_nodes: np.ndarray       # (b, d1), entries on the grid {i/p}
    sanitized_adjacency: np.ndarray   # (b, b) binary, symmetric
    reported_n: int                   # client node count, public metadata
    node_ids: np.ndarray = None       # bookkeeping only; estimators must not read


def train_encoder(public_nodes: np.ndarray, d1: int, epochs: int, seed: int,
                  lr: float = 0.01, batch_size: int = 32) -> Encoder:
    """Train an autoencoder on public node features and return its encode half.

    The clamp range [x_min, x_max] is the min/max of encoder outputs over
    the public set, padded by 5% of the span.
    """
    x = np.asarray(public_nodes, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValidationError("public_nodes must be a non-empty matrix")
    feature_dim = x.shape[1]
    if d1 >= feature_dim:
        raise ValidationError("encoded dimension must be smaller than feature_dim")

    rng = np.random.default_rng(seed)
    scale1 = np.sqrt(6.0 / (feature_dim + d1))
    W1 = rng.uniform(-scale1, scale1, size=(feature_dim, d1))
    b1 = np.zeros(d1)
    W2 = rng.uniform(-scale1, scale1, size=(d1, feature_dim))
    b2 = np.zeros(feature_dim)

    n = x.shape[0]
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            xb = x[order[start : start + batch_size]]
            z = xb @ W1 + b1
            h = np.tanh(z)
            rec = h @ W2 + b2
            err = rec - xb
            m = len(xb)
            dW2 = h.T @ err * (2.0 / m)
            db2 = err.mean(axis=0) * 2.0
            dh = err @ W2.T * (2.0 / m)
            dz = dh * (1.0 - h**2)
            dW1 = xb.T @ dz
            db1 = dz.sum(axis=0)
            W1 -= lr * dW1
            b1 -= lr * db1
            W2 -= lr * dW2
            b2 -= lr * db2

    out = np.tanh(x @ W1 + b1)
    lo, hi = float(out.min()), float(out.max())
    pad = 0.05 * max(hi - lo, 1e-12)
    return Encoder(W=W1, b=b1, d1=d1, x_min=lo - pad, x_max=hi + pad)


def node_grid_probs(x_hat: float, epsilon_a: float, p: int) -> np.ndarray:
    """Output distribution of the node mechanism over the grid {i/p}.

    Probability of grid point i/p decays exponentially in the floored
    grid distance from the normalized input x_hat in [0, 1].
    """
    i = np.arange(p + 1)
    dist = np.floor(p * np.abs(x_hat - i / p) + _FLOOR_EPS)
    weights = np.exp(epsilon_a * (1.0 - dist / p))
    return weights / weights.sum()


def perturb_node(x: np.ndarray, params: LdpParams, rng,
                 x_min: float = 0.0, x_max: float = 1.0) -> np.ndarray:
    """Independently map each element of x to a grid point in {i/p}."""
    x = np.asarray(x, dtype=np.float64)
    if not np.isfinite(x).all():
        raise NumericError("perturb_node input must be finite")
    span = x_max - x_min
    if span <= 0:
        raise ValidationError("x_max must exceed x_min")
    x_hat = (np.clip(x, x_min, x_max) - x_min) / span
    p = params.quantiles
    out = np.empty_like(x_hat)
    flat = x_hat.ravel()
    out_flat = out.ravel()
    u = rng.random(flat.shape)
    for j, (xv, uv) in enumerate(zip(flat, u)):
        cum = np.cumsum(node_grid_probs(xv, params.epsilon_a, p))
        out_flat[j] = np.searchsorted(cum, uv, side="right") / p
    return out


def perturb_links(adj: np.ndarray, params: LdpParams, rng) -> np.ndarray:
    """Randomized response on each upper-triangle adjacency bit, mirrored."""
    adj = np.asarray(adj)
    b = adj.shape[0]
    if adj.shape != (b, b) or (adj != adj.T).any():
        raise ValidationError("adjacency must be square and symmetric")
    p_e = params.flip_probability
    flips = rng.random((b, b)) < p_e
    upper = np.triu(np.ones((b, b), dtype=bool), k=1)
    out = adj.astype(np.int64).copy()
    flip_mask = flips & upper
    out[flip_mask] = 1 - out[flip_mask]
    out = np.triu(out, k=1)
    return out + out.T


def expected_density(x: float, p_e: float) -> float:
    """Expected fraction of 1s after randomized response with flip rate p_e."""
    return x + p_e - 2.0 * x * p_e


def sparsify_correct(noised_adj: np.ndarray, sanitized_nodes: np.ndarray,
                     p_e: float) -> np.ndarray:
    """Drop flipped-in links, removing the 1s with the largest feature distance.

    The raw density is estimated by inverting the randomized-response
    expectation; the surplus 1s are zeroed in order of descending
    Euclidean distance between their endpoints' sanitized vectors
    (deterministic tiebreak by pair index). Uses only post-processed
    private data.
    """
    if abs(1.0 - 2.0 * p_e) < 1e-12:
        raise ValidationError("p_e = 1/2 leaves the raw density unidentifiable")
    adj = np.asarray(noised_adj).astype(np.int64)
    b = adj.shape[0]
    n_pairs = b * (b - 1) // 2
    if n_pairs == 0:
        return adj.copy()
    rows, cols = np.triu_indices(b, k=1)
    ones = adj[rows, cols] == 1
    p0 = ones.sum() / n_pairs
    x_hat = min(max((p0 - p_e) / (1.0 - 2.0 * p_e), 0.0), p0)
    n_remove = int(round((p0 - x_hat) * n_pairs))
    if n_remove <= 0:
        return adj.copy()

    one_idx = np.flatnonzero(ones)
    diffs = sanitized_nodes[rows[one_idx]] - sanitized_nodes[cols[one_idx]]
    dists = np.linalg.norm(diffs, axis=1)
    # descending distance, ties broken by ascending pair index
    order = np.lexsort((one_idx, -dists))
    drop = one_idx[order[:n_remove]]
    out = adj.copy()
    out[rows[drop], cols[drop]] = 0
    out[cols[drop], rows[drop]] = 0
    return out


def sanitize_batch(
    sub: ClientSubgraph,
    batch: np.ndarray,
    encoder: Encoder,
    params: LdpParams,
    cache: PermanentCache | None,
    rng,
) -> SanitizedBatch:
    """Sanitize one mini-batch: encode, clamp, perturb nodes, flip links, correct.

    With a cache, each node vector and link bit is perturbed at most once
    ever; later batches reuse the stored responses.
    """
    batch = np.asarray(batch, dtype=np.int64)
    local = {gid: idx for idx, gid in enumerate(sub.node_ids)}
    missing = [g for g in batch if g not in local]
    if missing:
        raise ValidationError(f"batch node {missing[0]} not on client {sub.client_id}")

    b = len(batch)
    vectors = np.empty((b, encoder.d1))
    for row, gid in enumerate(batch):
        if cache is not None and gid in cache.nodes:
            vectors[row] = cache.nodes[gid]
            continue
        encoded = encoder.encode(sub.features[local[gid]])[0]
        sanitized = perturb_node(encoded, params, rng, encoder.x_min, encoder.x_max)
        if cache is not None:
            cache.nodes[gid] = sanitized
        vectors[row] = sanitized

    adj_dense = np.asarray(sub.adjacency.todense())
    perturbed = np.zeros((b, b), dtype=np.int64)
    p_e = params.flip_probability
    for a_row in range(b):
        for b_row in range(a_row + 1, b):
            ga, gb = batch[a_row], batch[b_row]
            key = (min(ga, gb), max(ga, gb))
            if cache is not None and key in cache.links:
                bit = cache.links[key]
            else:
                raw = int(adj_dense[local[ga], local[gb]] != 0)
                bit = 1 - raw if rng.random() < p_e else raw
                if cache is not None:
                    cache.links[key] = bit
            perturbed[a_row, b_row] = perturbed[b_row, a_row] = bit

    corrected = sparsify_correct(perturbed, vectors, p_e)
    return SanitizedBatch(
        client_id=sub.client_id,
        batch_size=b,
        sanitized_nodes=vectors,
        sanitized_adjacency=corrected,
        reported_n=sub.num_nodes,
        node_ids=batch,
    )
