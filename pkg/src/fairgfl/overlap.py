"""Server-side overlap reconstruction from sanitized batches.

Matches sanitized node vectors across clients, turns batch-level match
counts into population overlap ratio estimates, and maintains the
accumulated per-pair overlap state that drives aggregation weights.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .graph import ValidationError
from .ldp import Encoder, LdpParams, SanitizedBatch, perturb_node

ESTIMATOR_MODES = ("corrected", "paper", "appendix")


@dataclass(frozen=True)
class MatchResult:
    """Greedy one-to-one matching between two sanitized batches."""

    pairs: tuple[tuple[int, int], ...]  # (index in batch a, index in batch b)
    n_tilde: float                      # matches / b_a
    t_tilde: float                      # shared observed links / links in batch a
    b_a: int
    b_b: int
    links_a: int


@dataclass(frozen=True)
class OverlapState:
    """Round, accumulated, and coupled overlap matrices for P clients."""

    N_round: np.ndarray
    T_round: np.ndarray
    N_acc: np.ndarray
    T_acc: np.ndarray
    O: np.ndarray
    alpha: float   # coupling weight between node and link ratios
    beta: float    # accumulation weight for new round estimates
    tau: float     # node-match distance threshold

    @classmethod
    def initial(cls, num_clients: int, alpha: float, beta: float, tau: float) -> "OverlapState":
        if not 0.0 <= alpha <= 1.0:
            raise ValidationError("alpha must be in [0, 1]")
        if not 0.0 < beta <= 1.0:
            raise ValidationError("beta must be in (0, 1]")
        z = np.zeros((num_clients, num_clients))
        return cls(z.copy(), z.copy(), z.copy(), z.copy(), z.copy(), alpha, beta, tau)

    @property
    def num_clients(self) -> int:
        return self.O.shape[0]


def match_nodes(a: SanitizedBatch, b: SanitizedBatch, tau: float) -> MatchResult:
    """Match nodes across batches by sanitized-vector distance below tau.

    Candidate cross pairs with Euclidean distance < tau are accepted in
    ascending-distance order, each endpoint at most once. tau = 0 matches
    only bitwise-equal vectors.
    """
    dists = np.linalg.norm(
        a.sanitized_nodes[:, None, :] - b.sanitized_nodes[None, :, :], axis=2
    )
    if tau > 0:
        cand = np.argwhere(dists < tau)
    else:
        cand = np.argwhere(dists == 0.0)
    order = np.lexsort((cand[:, 1], cand[:, 0], dists[cand[:, 0], cand[:, 1]]))
    used_a, used_b = set(), set()
    pairs = []
    for idx in order:
        ia, ib = int(cand[idx, 0]), int(cand[idx, 1])
        if ia in used_a or ib in used_b:
            continue
        used_a.add(ia)
        used_b.add(ib)
        pairs.append((ia, ib))

    n_tilde = len(pairs) / a.batch_size if a.batch_size else 0.0

    links_a = int(np.triu(a.sanitized_adjacency, k=1).sum())
    shared = 0
    for m in range(len(pairs)):
        for m2 in range(m + 1, len(pairs)):
            ia, ib = pairs[m]
            ja, jb = pairs[m2]
            if a.sanitized_adjacency[ia, ja] and b.sanitized_adjacency[ib, jb]:
                shared += 1
    t_tilde = shared / links_a if links_a else 0.0
    return MatchResult(
        pairs=tuple(pairs),
        n_tilde=n_tilde,
        t_tilde=t_tilde,
        b_a=a.batch_size,
        b_b=b.batch_size,
        links_a=links_a,
    )


def estimate_node_ratio(
    n_tilde: float, n_i: int, n_k: int, b_i: int, b_k: int, mode: str = "corrected"
) -> float:
    """Scale a batch match fraction up to a population node overlap ratio.

    corrected: n_tilde * n_k / b_k, the unbiased estimator of
    |Vi ∩ Vk| / n_i under uniform batch sampling. paper and appendix apply
    the alternative n_i / b_k and n_i^2 / (n_k b_k) scalings for
    comparison. All results are clamped to [0, 1].
    """
    if b_k <= 0 or b_i <= 0:
        raise ValidationError("batch sizes must be positive")
    if b_i > n_i or b_k > n_k:
        raise ValidationError("batch size cannot exceed client node count")
    if mode == "corrected":
        est = n_tilde * n_k / b_k
    elif mode == "paper":
        est = n_tilde * n_i / b_k
    elif mode == "appendix":
        est = n_tilde * n_i**2 / (n_k * b_k)
    else:
        raise ValidationError(f"unknown estimator mode {mode!r}; use one of {ESTIMATOR_MODES}")
    return min(max(est, 0.0), 1.0)


def estimate_link_ratio(
    t_tilde: float, n_k: int, b_i: int, b_k: int, mode: str = "corrected"
) -> float:
    """Scale a batch link agreement fraction up to a population link ratio.

    corrected uses (n_k / b_k)^2, matching the probability that both
    endpoints of a shared link land in client k's batch; paper uses
    n_k^2 / b_i^2. Clamped to [0, 1].
    """
    if b_i <= 0:
        raise ValidationError("b_i must be positive")
    if mode == "corrected":
        est = t_tilde * (n_k / b_k) ** 2
    elif mode in ("paper", "appendix"):
        est = t_tilde * n_k**2 / b_i**2
    else:
        raise ValidationError(f"unknown estimator mode {mode!r}; use one of {ESTIMATOR_MODES}")
    return min(max(est, 0.0), 1.0)


def update_state(
    state: OverlapState,
    round_estimates: dict[tuple[int, int], tuple[float, float]],
) -> OverlapState:
    """Fold this round's per-pair (node, link) estimates into the state.

    Pairs absent from round_estimates keep their accumulated values; the
    coupled matrix O is recomputed entrywise.
    """
    n_round = np.zeros_like(state.N_round)
    t_round = np.zeros_like(state.T_round)
    n_acc = state.N_acc.copy()
    t_acc = state.T_acc.copy()
    beta = state.beta
    for (i, k), (n_est, t_est) in round_estimates.items():
        n_round[i, k] = n_est
        t_round[i, k] = t_est
        n_acc[i, k] = beta * n_est + (1.0 - beta) * n_acc[i, k]
        t_acc[i, k] = beta * t_est + (1.0 - beta) * t_acc[i, k]
    o = state.alpha * n_acc + (1.0 - state.alpha) * t_acc
    return replace(state, N_round=n_round, T_round=t_round, N_acc=n_acc, T_acc=t_acc, O=o)


def client_overall_ratio(state: OverlapState, i: int) -> float:
    """Row sum of the coupled overlap matrix, diagonal excluded."""
    row = state.O[i]
    return float(row.sum() - row[i])


def calibrate_tau(
    encoder: Encoder,
    public_nodes: np.ndarray,
    params: LdpParams,
    rng,
    percentile: float = 95.0,
) -> float:
    """Distance threshold at the given percentile of sanitized self-distance.

    Each public node is perturbed twice; the distance between the two
    responses measures the noise scale a true re-encounter must tolerate.
    """
    encoded = encoder.encode(public_nodes)
    dists = []
    for row in encoded:
        a = perturb_node(row, params, rng, encoder.x_min, encoder.x_max)
        b = perturb_node(row, params, rng, encoder.x_min, encoder.x_max)
        dists.append(np.linalg.norm(a - b))
    return float(np.percentile(dists, percentile))
