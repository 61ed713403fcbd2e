"""Round-based federated orchestration: local training, uploads, aggregation."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import gcn, ldp, metrics, overlap
from .gcn import GcnModel, GradientSet, NormalizedAdjacency
from .graph import ClientSubgraph, GlobalGraph, PartitionSpec, ValidationError, partition

ALGORITHMS = ("fairgfl", "fedavg", "qfedavg")


class RoundError(RuntimeError):
    """A client or server step failed; carries round and client context."""

    def __init__(self, round_index: int, client_id: int | None, cause: Exception):
        super().__init__(f"round {round_index}, client {client_id}: {cause}")
        self.round_index = round_index
        self.client_id = client_id
        self.cause = cause


@dataclass(frozen=True)
class FedConfig:
    """Experiment hyperparameters shared by all algorithms."""

    num_clients: int = 10
    clients_per_round: int = 5
    local_iters: int = 2
    rounds: int = 100
    lr: float = 0.05
    batch_size: int = 20
    lam: float = 0.1             # max-loss regularizer weight
    alpha: float = 0.8           # node/link coupling weight
    beta: float = 0.5            # accumulation weight
    algorithm: str = "fairgfl"
    q: float = 1.0               # qfedavg exponent
    seed: int = 0
    hidden_dim: int = 16
    encoder_dim: int = 16
    encoder_epochs: int = 30
    test_fraction: float = 0.2
    public_fraction: float = 0.05
    tau_percentile: float = 95.0
    estimator_mode: str = "corrected"
    use_ldp: bool = True
    estimate_overlap: bool = True
    permanent_cache: bool = True
    literal_eq17: bool = False
    renormalize: bool = False

    def __post_init__(self):
        if not 1 <= self.clients_per_round <= self.num_clients:
            raise ValidationError("need 1 <= K <= P")
        if self.local_iters < 0:
            raise ValidationError("local_iters must be >= 0")
        if self.rounds < 0:
            raise ValidationError("rounds must be >= 0")
        if self.lam < 0 or self.q < 0:
            raise ValidationError("lam and q must be >= 0")
        if self.lr <= 0:
            raise ValidationError("lr must be positive")
        if self.algorithm not in ALGORITHMS:
            raise ValidationError(f"algorithm must be one of {ALGORITHMS}")
        if self.estimator_mode not in overlap.ESTIMATOR_MODES:
            raise ValidationError(f"estimator_mode must be one of {overlap.ESTIMATOR_MODES}")


@dataclass(frozen=True)
class ClientReport:
    client_id: int
    model: GcnModel
    train_loss: float
    batch: ldp.SanitizedBatch | None = None


@dataclass
class LdpContext:
    """Shared encoder plus per-client permanent caches."""

    encoder: ldp.Encoder
    params: ldp.LdpParams
    tau: float
    perturb: bool = True
    caches: dict[int, ldp.PermanentCache] = field(default_factory=dict)

    def cache_for(self, client_id: int, enabled: bool) -> ldp.PermanentCache | None:
        if not enabled:
            return None
        return self.caches.setdefault(client_id, ldp.PermanentCache())


def _client_rng(seed: int, round_index: int, client_id: int, stream: int):
    return np.random.default_rng(
        np.random.SeedSequence((seed, round_index, client_id, stream))
    )


def _sampling_rng(seed: int, round_index: int):
    return np.random.default_rng(np.random.SeedSequence((seed, round_index, 1 << 20)))


def sample_clients(seed: int, round_index: int, num_clients: int, k: int) -> np.ndarray:
    """Uniform without-replacement client sample, reproducible per round."""
    rng = _sampling_rng(seed, round_index)
    return np.sort(rng.choice(num_clients, size=k, replace=False))


def client_round(
    sub: ClientSubgraph,
    a_hat: NormalizedAdjacency,
    w_global: GcnModel,
    cfg: FedConfig,
    ldp_ctx: LdpContext | None,
    train_rng,
    ldp_rng,
) -> ClientReport:
    """E local SGD steps on masked mini-batches, then report model and loss.

    Propagation always uses the full local graph; only the mini-batch
    nodes contribute to each step's loss. The reported loss is evaluated
    on the full local graph after training.
    """
    n_i = sub.num_nodes
    b = min(cfg.batch_size, n_i)
    model = w_global
    for _ in range(cfg.local_iters):
        mask = train_rng.choice(n_i, size=b, replace=False)
        loss, grads = gcn.loss_and_grad(model, a_hat, sub.features, sub.labels, mask)
        if not np.isfinite(loss):
            raise gcn.NumericError(f"client {sub.client_id} diverged")
        model = gcn.sgd_step(model, grads, cfg.lr)

    full_loss = gcn.masked_loss(model, a_hat, sub.features, sub.labels, np.arange(n_i))

    batch = None
    if ldp_ctx is not None:
        batch_ids = ldp_rng.choice(sub.node_ids, size=b, replace=False)
        if ldp_ctx.perturb:
            batch = ldp.sanitize_batch(
                sub,
                batch_ids,
                ldp_ctx.encoder,
                ldp_ctx.params,
                ldp_ctx.cache_for(sub.client_id, cfg.permanent_cache),
                ldp_rng,
            )
        else:
            batch = _plain_batch(sub, batch_ids, ldp_ctx.encoder)
    return ClientReport(sub.client_id, model, float(full_loss), batch)


def _plain_batch(sub: ClientSubgraph, batch_ids, encoder) -> ldp.SanitizedBatch:
    """LDP bypass: encoded but unperturbed upload."""
    local = {gid: idx for idx, gid in enumerate(sub.node_ids)}
    rows = [local[g] for g in batch_ids]
    vectors = encoder.encode(sub.features[rows])
    adj = np.asarray(sub.adjacency.todense())[np.ix_(rows, rows)].astype(np.int64)
    return ldp.SanitizedBatch(
        client_id=sub.client_id,
        batch_size=len(rows),
        sanitized_nodes=vectors,
        sanitized_adjacency=adj,
        reported_n=sub.num_nodes,
        node_ids=np.asarray(batch_ids),
    )


def _combine(w_global: GcnModel, reports, coeffs, divisor) -> GcnModel:
    """w_global + sum(c_i * (w_i - w_global)) / divisor, per tensor."""
    acc1 = np.zeros_like(w_global.W1)
    acc2 = np.zeros_like(w_global.W2)
    for rep, c in zip(reports, coeffs):
        acc1 += c * (rep.model.W1 - w_global.W1)
        acc2 += c * (rep.model.W2 - w_global.W2)
    return GcnModel(w_global.W1 + acc1 / divisor, w_global.W2 + acc2 / divisor)


def _max_loss_report(reports):
    best = reports[0]
    for rep in reports[1:]:
        if rep.train_loss > best.train_loss:
            best = rep
    return best


def aggregate_fair(
    reports: list[ClientReport],
    w_global: GcnModel,
    state: overlap.OverlapState,
    lam: float,
    renormalize: bool = False,
    literal_eq17: bool = False,
) -> GcnModel:
    """Overlap-discounted update average plus the max-loss regularizer step.

    Each client's update is weighted by 1 / (1 + O_i); the client with the
    largest reported loss contributes an extra lam-scaled update.
    """
    if not reports:
        raise ValidationError("reports must be non-empty")
    coeffs = [1.0 / (1.0 + overlap.client_overall_ratio(state, r.client_id)) for r in reports]
    divisor = sum(coeffs) if renormalize else float(len(reports))

    if literal_eq17:
        k = float(len(reports))
        w1 = sum(c * r.model.W1 for c, r in zip(coeffs, reports)) / k
        w2 = sum(c * r.model.W2 for c, r in zip(coeffs, reports)) / k
        new = GcnModel(w1, w2)
    else:
        new = _combine(w_global, reports, coeffs, divisor)

    if lam > 0:
        top = _max_loss_report(reports)
        new = GcnModel(
            new.W1 + lam * (top.model.W1 - w_global.W1),
            new.W2 + lam * (top.model.W2 - w_global.W2),
        )
    return new


def aggregate_fedavg(reports: list[ClientReport], w_global: GcnModel) -> GcnModel:
    """Uniform average of client updates."""
    if not reports:
        raise ValidationError("reports must be non-empty")
    return _combine(w_global, reports, [1.0] * len(reports), float(len(reports)))


def aggregate_qfedavg(
    reports: list[ClientReport], w_global: GcnModel, q: float, lr: float
) -> GcnModel:
    """Loss-reweighted update with the q-FedAvg normalizer.

    Per client: Delta_i = (w_global - w_i) / lr, numerator weight F_i^q,
    normalizer sum of q F_i^(q-1) ||Delta_i||^2 + F_i^q / lr. Computed in
    update space with the common 1/lr factored out, so q = 0 collapses
    exactly to the uniform update average.
    """
    if not reports:
        raise ValidationError("reports must be non-empty")
    coeffs = []
    divisor = 0.0
    for rep in reports:
        f = rep.train_loss
        c = f**q
        coeffs.append(c)
        divisor += c
        if q > 0 and f > 0:
            sq = (
                np.sum((w_global.W1 - rep.model.W1) ** 2)
                + np.sum((w_global.W2 - rep.model.W2) ** 2)
            ) / lr**2
            divisor += q * f ** (q - 1.0) * sq * lr
    return _combine(w_global, reports, coeffs, divisor)


def fairness_weighted_loss(losses, overall_ratios) -> float:
    """Sum of per-client losses discounted by 1 / (1 + O_i)."""
    losses = np.asarray(losses, dtype=np.float64)
    ratios = np.asarray(overall_ratios, dtype=np.float64)
    return float(np.sum(losses / (1.0 + ratios)))


@dataclass
class ExperimentResult:
    records: list[metrics.RoundRecord]
    model: GcnModel
    state: overlap.OverlapState | None
    parts: list[ClientSubgraph]
    test_ids: np.ndarray
    overlap_history: list[dict[str, np.ndarray]]


def split_nodes(graph: GlobalGraph, cfg: FedConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(test, public, client-pool) node id split, driven by the config seed."""
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0, 0, 3)))
    ids = rng.permutation(graph.num_nodes)
    n_test = int(round(cfg.test_fraction * graph.num_nodes))
    n_public = int(round(cfg.public_fraction * graph.num_nodes))
    return ids[:n_test], ids[n_test : n_test + n_public], ids[n_test + n_public :]


def run_experiment(
    graph: GlobalGraph,
    part_spec: PartitionSpec,
    cfg: FedConfig,
    ldp_params: ldp.LdpParams | None = None,
    record_overlap: bool = False,
) -> ExperimentResult:
    """Run J federated rounds and return records plus the final model.

    Test and encoder-training ("public") nodes are held out before
    partitioning. For fairgfl, sampled clients upload sanitized batches
    each round; the server matches them pairwise, refreshes the overlap
    state, and aggregates with overlap-discounted weights.
    """
    test_ids, public_ids, pool_ids = split_nodes(graph, cfg)
    parts = partition(graph, part_spec, node_pool=pool_ids)
    a_hats = [gcn.normalize_adjacency(p) for p in parts]
    a_hat_global = gcn.normalize_adjacency(graph.adjacency)

    needs_batches = cfg.algorithm == "fairgfl" and cfg.estimate_overlap
    ldp_ctx = None
    if needs_batches:
        if ldp_params is None:
            ldp_params = ldp.LdpParams(epsilon_a=3.0, epsilon_b=1.0, quantiles=8)
        public_feats = graph.features[public_ids]
        encoder = ldp.train_encoder(
            public_feats, cfg.encoder_dim, cfg.encoder_epochs,
            seed=cfg.seed ^ 0x5EED,
        )
        if cfg.use_ldp:
            tau_rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0, 0, 4)))
            tau = overlap.calibrate_tau(
                encoder, public_feats, ldp_params, tau_rng, cfg.tau_percentile
            )
        else:
            tau = 1e-9
        ldp_ctx = LdpContext(encoder, ldp_params, tau, perturb=cfg.use_ldp)

    init_rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0, 0, 5)))
    model = gcn.init_model(graph.feature_dim, cfg.hidden_dim, graph.num_classes, init_rng)

    state = overlap.OverlapState.initial(
        cfg.num_clients, cfg.alpha, cfg.beta, ldp_ctx.tau if ldp_ctx else 0.0
    )
    records: list[metrics.RoundRecord] = []
    history: list[dict[str, np.ndarray]] = []

    for j in range(1, cfg.rounds + 1):
        t0 = time.perf_counter()
        sampled = sample_clients(cfg.seed, j, cfg.num_clients, cfg.clients_per_round)
        reports = []
        for cid in sampled:
            try:
                reports.append(
                    client_round(
                        parts[cid],
                        a_hats[cid],
                        model,
                        cfg,
                        ldp_ctx,
                        _client_rng(cfg.seed, j, cid, 0),
                        _client_rng(cfg.seed, j, cid, 1),
                    )
                )
            except Exception as exc:  # noqa: BLE001 - annotate and rethrow
                raise RoundError(j, int(cid), exc) from exc

        if cfg.algorithm == "fairgfl":
            if needs_batches:
                estimates = {}
                for rep_i in reports:
                    for rep_k in reports:
                        if rep_i.client_id == rep_k.client_id:
                            continue
                        match = overlap.match_nodes(rep_i.batch, rep_k.batch, ldp_ctx.tau)
                        n_est = overlap.estimate_node_ratio(
                            match.n_tilde,
                            rep_i.batch.reported_n,
                            rep_k.batch.reported_n,
                            rep_i.batch.batch_size,
                            rep_k.batch.batch_size,
                            cfg.estimator_mode,
                        )
                        t_est = overlap.estimate_link_ratio(
                            match.t_tilde,
                            rep_k.batch.reported_n,
                            rep_i.batch.batch_size,
                            rep_k.batch.batch_size,
                            cfg.estimator_mode,
                        )
                        estimates[(rep_i.client_id, rep_k.client_id)] = (n_est, t_est)
                state = overlap.update_state(state, estimates)
                if record_overlap:
                    history.append(
                        {
                            "N_round": state.N_round.copy(),
                            "T_round": state.T_round.copy(),
                            "N_acc": state.N_acc.copy(),
                            "T_acc": state.T_acc.copy(),
                            "O": state.O.copy(),
                        }
                    )
            model = aggregate_fair(
                reports, model, state, cfg.lam, cfg.renormalize, cfg.literal_eq17
            )
        elif cfg.algorithm == "fedavg":
            model = aggregate_fedavg(reports, model)
        else:
            model = aggregate_qfedavg(reports, model, cfg.q, cfg.lr)

        test_loss, test_acc = metrics.evaluate_global(
            model, a_hat_global, graph.features, graph.labels, test_ids
        )
        client_losses = tuple(
            gcn.masked_loss(model, a_hats[i], parts[i].features, parts[i].labels,
                            np.arange(parts[i].num_nodes))
            for i in range(cfg.num_clients)
        )
        records.append(
            metrics.RoundRecord(
                round_index=j,
                algorithm=cfg.algorithm,
                test_loss=test_loss,
                test_acc=test_acc,
                loss_variance=metrics.loss_variance(client_losses),
                loss_entropy=metrics.loss_entropy(client_losses),
                per_client_losses=client_losses,
                wall_time_ms=(time.perf_counter() - t0) * 1000.0,
            )
        )

    return ExperimentResult(
        records=records,
        model=model,
        state=state if cfg.algorithm == "fairgfl" else None,
        parts=parts,
        test_ids=test_ids,
        overlap_history=history,
    )
