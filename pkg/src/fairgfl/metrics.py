"""Fairness and utility metrics plus round-record CSV serialization."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import numpy as np

from .gcn import GcnModel, NormalizedAdjacency, forward
from .graph import ValidationError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RoundRecord:
    round_index: int
    algorithm: str
    test_loss: float
    test_acc: float
    loss_variance: float
    loss_entropy: float
    per_client_losses: tuple[float, ...]
    wall_time_ms: float = 0.0


def loss_variance(losses) -> float:
    """Population variance of per-client losses."""
    losses = np.asarray(losses, dtype=np.float64)
    if losses.size == 0:
        raise ValidationError("losses must be non-empty")
    return float(np.mean((losses - losses.mean()) ** 2))


def loss_entropy(losses) -> float:
    """Entropy (natural log) of losses normalized by their L1 mass.

    All-zero losses are the perfectly fair degenerate case; ln(P) is
    returned with a warning.
    """
    losses = np.asarray(losses, dtype=np.float64)
    if losses.size == 0:
        raise ValidationError("losses must be non-empty")
    if (losses < 0).any():
        raise ValidationError("losses must be non-negative")
    total = losses.sum()
    if total == 0:
        logger.warning("all-zero losses: entropy undefined, returning ln(P)")
        return float(np.log(len(losses)))
    shares = losses / total
    nz = shares[shares > 0]
    return float(-(nz * np.log(nz)).sum())


def evaluate_global(
    model: GcnModel,
    a_hat: NormalizedAdjacency,
    features: np.ndarray,
    labels: np.ndarray,
    test_mask,
) -> tuple[float, float]:
    """Masked cross-entropy loss and top-1 accuracy on the full graph."""
    mask = np.asarray(test_mask)
    if mask.dtype == bool:
        mask = np.flatnonzero(mask)
    if len(mask) == 0:
        raise ValidationError("test mask must be non-empty")
    logits, _ = forward(model, a_hat, features)
    ml = logits[mask]
    y = labels[mask]
    shifted = ml - ml.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(logz - shifted[np.arange(len(ml)), y]))
    acc = float(np.mean(ml.argmax(axis=1) == y))
    return loss, acc


_CSV_HEADER = ["round", "algorithm", "test_loss", "test_acc", "loss_var", "loss_entropy"]


def write_round_records(path, records: list[RoundRecord]) -> None:
    """Append-style CSV dump; per-client losses occupy the trailing columns."""
    num_clients = len(records[0].per_client_losses) if records else 0
    header = _CSV_HEADER + [f"client_{i}_loss" for i in range(num_clients)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for rec in records:
            writer.writerow(
                [rec.round_index, rec.algorithm]
                + [repr(v) for v in (rec.test_loss, rec.test_acc,
                                     rec.loss_variance, rec.loss_entropy)]
                + [repr(v) for v in rec.per_client_losses]
            )


def read_round_records(path) -> list[RoundRecord]:
    records = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        n_fixed = len(_CSV_HEADER)
        for row in reader:
            records.append(
                RoundRecord(
                    round_index=int(row[0]),
                    algorithm=row[1],
                    test_loss=float(row[2]),
                    test_acc=float(row[3]),
                    loss_variance=float(row[4]),
                    loss_entropy=float(row[5]),
                    per_client_losses=tuple(float(v) for v in row[n_fixed:]),
                )
            )
    return records
