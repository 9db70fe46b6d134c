"""Federated round state machines.

Implements the dual-channel protocol (shared low-rank channel trained with a
drift-correction term, private sparse channel fine-tuned against the global
view, truncated-SVD aggregation, quantized transfers, probabilistic
communication skipping, client sampling and dropout) plus weighted-average
and proximal-regularized baselines.

Clients and the server are mutable state records; round operations mutate
them in place and are deterministic given the states' RNG streams.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import compress, gnn, linalg
from .errors import DivergenceDetected, ShapeMismatch
from .gnn import ModelParams
from .graphdata import GraphDataset


@dataclass
class Sparsifier:
    """Sparsification rule for the private channel."""

    kind: str  # "threshold" or "topk"
    cut: float = 0.001
    beta: float = 0.1

    def __post_init__(self):
        if self.kind not in ("threshold", "topk"):
            raise ValueError(f"unknown sparsifier {self.kind!r}")
        if self.cut < 0 or not 0.0 <= self.beta <= 1.0:
            raise ValueError("cut must be >= 0 and beta within [0, 1]")


def apply_sparsifier(params: ModelParams, rule: Sparsifier) -> ModelParams:
    """Zero out entries per the rule; top-k is global across all matrices."""
    if rule.kind == "threshold":
        return {
            k: compress.sparsify_threshold(v, rule.cut).to_dense() for k, v in params.items()
        }
    total = sum(v.size for v in params.values())
    k = math.ceil(rule.beta * total)
    flat = np.concatenate([v.ravel() for v in params.values()])
    kept = compress.sparsify_topk(flat.reshape(1, -1), k).to_dense().ravel()
    out: ModelParams = {}
    offset = 0
    for name, v in params.items():
        out[name] = kept[offset : offset + v.size].reshape(v.shape)
        offset += v.size
    return out


@dataclass
class ClientConfig:
    eta: float = 0.01
    alpha: float = 0.6
    nu: float = 0.5
    sparsifier: Sparsifier = field(default_factory=lambda: Sparsifier("threshold"))
    local_epochs: int = 1
    finetune_epochs: int = 1
    batch_size: int = 0  # 0 means full batch
    use_correction: bool = True
    proxskip_h: bool = False
    mu_prox: float = 0.01
    quantize_mode: str = "deterministic"

    def __post_init__(self):
        if self.eta <= 0:
            raise ValueError("eta must be > 0")
        if self.alpha < 0 or self.nu < 0 or self.mu_prox < 0:
            raise ValueError("alpha, nu and mu_prox must be >= 0")
        if self.local_epochs < 0 or self.finetune_epochs < 0:
            raise ValueError("epoch counts must be >= 0")


@dataclass
class ClientState:
    """One client's channels, correction term, global view and data."""

    id: int
    w: ModelParams
    s: ModelParams
    h: ModelParams
    theta_view: ModelParams
    train: GraphDataset
    val: GraphDataset
    test: GraphDataset
    cfg: ClientConfig
    rng: np.random.Generator = field(default_factory=np.random.default_rng)

    def __post_init__(self):
        for other in (self.s, self.h, self.theta_view):
            gnn.check_congruent(self.w, other)


@dataclass
class ServerState:
    theta: ModelParams
    p: float = 0.5
    rho: float = 1.0
    tau_lowrank: float = 0.0001
    r_bits: int = 4
    eta: float = 0.01
    downlink_scheme: str = compress.SCHEME_LOWRANK
    dropout: Optional[Tuple[float, float]] = None  # Beta(a, b) drop-rate, or off
    bandwidth_bps: float = 100e6
    latency_s: float = 0.02
    t: int = 0
    coin_rng: np.random.Generator = field(default_factory=np.random.default_rng)
    sampling_rng: np.random.Generator = field(default_factory=np.random.default_rng)
    dropout_rng: np.random.Generator = field(default_factory=np.random.default_rng)

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ValueError("p must be within [0, 1]")
        if not 0.0 < self.rho <= 1.0:
            raise ValueError("rho must be within (0, 1]")


@dataclass
class RoundRecord:
    """Metrics for one round; bits are zero whenever communication is skipped."""

    t: int
    communicated: bool
    participants: List[int]
    dropped: List[int]
    uplink_bits: int
    downlink_bits: int
    train_loss: List[float]
    test_accuracy: List[float]
    wall_time: float
    sparsity_ratio: float
    lowrank_rank_ratio: Optional[float] = None
    lowrank_param_ratio: Optional[float] = None


# ---------------------------------------------------------------------------
# Parameter-update steps


def lowrank_channel_step(
    w: ModelParams,
    grads: ModelParams,
    h: ModelParams,
    theta: ModelParams,
    eta: float,
    alpha: float,
) -> ModelParams:
    """One shared-channel step: drift-corrected gradient plus global pull."""
    return {k: w[k] - eta * (grads[k] - h[k]) + eta * alpha * (theta[k] - w[k]) for k in w}


def fedprox_step(
    w: ModelParams, grads: ModelParams, theta: ModelParams, eta: float, mu_prox: float
) -> ModelParams:
    return {k: w[k] - eta * (grads[k] + mu_prox * (w[k] - theta[k])) for k in w}


def _batches(c: ClientState) -> List[List]:
    graphs = c.train.graphs
    if not graphs:  # data-less clients sit rounds out
        return []
    size = c.cfg.batch_size
    if size <= 0 or size >= len(graphs):
        return [graphs]
    order = c.rng.permutation(len(graphs))
    return [
        [graphs[i] for i in order[start : start + size]]
        for start in range(0, len(order), size)
    ]


def _check_finite(params: ModelParams, who: str) -> None:
    if not gnn.params_finite(params):
        raise DivergenceDetected(f"{who} produced non-finite parameters (lower eta)")


def local_train_round(c: ClientState) -> ClientState:
    """Run the configured local epochs on the shared channel."""
    for _ in range(c.cfg.local_epochs):
        for batch in _batches(c):
            _, grads = gnn.loss_and_grad(c.w, batch)
            c.w = lowrank_channel_step(
                c.w, grads, c.h, c.theta_view, c.cfg.eta, c.cfg.alpha
            )
        _check_finite(c.w, f"client {c.id} local training")
    return c


def finetune_sparse(c: ClientState) -> ClientState:
    """Fine-tune the private channel at (global view + private), then re-sparsify.

    The shared channel stays frozen; an L1 subgradient (elementwise sign,
    zero at zero) scaled by nu joins every step.
    """
    for _ in range(c.cfg.finetune_epochs):
        for batch in _batches(c):
            _, grads = gnn.loss_and_grad_at_sum(c.theta_view, c.s, batch)
            stepped = {
                k: c.s[k] - c.cfg.eta * (grads[k] + c.cfg.nu * np.sign(c.s[k]))
                for k in c.s
            }
            c.s = apply_sparsifier(stepped, c.cfg.sparsifier)
        _check_finite(c.s, f"client {c.id} fine-tuning")
    return c


def update_correction(c: ClientState) -> ClientState:
    """Accumulate (global view - new shared channel) / eta into the correction term."""
    c.h = {k: c.h[k] + (c.theta_view[k] - c.w[k]) / c.cfg.eta for k in c.h}
    return c


def client_uplink(c: ClientState, r_bits: int) -> compress.CompressedPayload:
    """Quantized payload of the shared channel and the correction term.

    The private channel never leaves the client.
    """
    tensors = {f"w.{k}": v for k, v in c.w.items()}
    tensors.update({f"h.{k}": v for k, v in c.h.items()})
    return compress.encode_payload(
        tensors,
        compress.SCHEME_QUANTIZED,
        r=r_bits,
        mode=c.cfg.quantize_mode,
        rng=c.rng,
    )


@dataclass
class _AggregateStats:
    rank_ratio: Optional[float]
    param_ratio: Optional[float]


def _aggregate(
    payloads: Sequence[compress.CompressedPayload],
    sample_sizes: Sequence[int],
    eta: float,
    tau_lowrank: float,
) -> Tuple[ModelParams, _AggregateStats]:
    if len(payloads) == 0:
        raise ValueError("need at least one payload to aggregate")
    if len(payloads) != len(sample_sizes):
        raise ValueError("payloads and sample_sizes must align")
    total = float(sum(sample_sizes))
    if total > 0:
        weights = [size / total for size in sample_sizes]
    else:  # every participant is data-less; fall back to a plain mean
        weights = [1.0 / len(payloads)] * len(payloads)
    decoded = [compress.decode_payload(p) for p in payloads]
    names = list(decoded[0])
    for d in decoded[1:]:
        if list(d) != names:
            raise ShapeMismatch("payloads carry different tensor sets")
    base = [n[len("w.") :] for n in names if n.startswith("w.")]

    theta: ModelParams = {}
    retained, full, kept_params, dense_params = 0, 0, 0, 0
    for key in base:
        w_sum = linalg.weighted_sum([(wt, d[f"w.{key}"]) for wt, d in zip(weights, decoded)])
        h_sum = linalg.weighted_sum([(wt, d[f"h.{key}"]) for wt, d in zip(weights, decoded)])
        merged = w_sum - eta * h_sum
        rows, cols = merged.shape
        if min(rows, cols) == 1:
            theta[key] = merged  # rank truncation is meaningless for bias rows
            continue
        approx, rank = linalg.lowrank_truncate(linalg.svd(merged), "relative", tau_lowrank)
        theta[key] = approx
        retained += rank
        full += min(rows, cols)
        kept_params += rank * (rows + cols)
        dense_params += rows * cols
    stats = _AggregateStats(
        rank_ratio=retained / full if full else None,
        param_ratio=kept_params / dense_params if dense_params else None,
    )
    return theta, stats


def server_aggregate(
    payloads: Sequence[compress.CompressedPayload],
    sample_sizes: Sequence[int],
    eta: float,
    tau_lowrank: float,
) -> ModelParams:
    """Sample-size-weighted merge of shared channels minus eta times the
    weighted correction terms, rank-truncated per weight matrix."""
    theta, _ = _aggregate(payloads, sample_sizes, eta, tau_lowrank)
    return theta


def dropout_filter(
    participants: Sequence[int], beta_a: float, beta_b: float, rng: np.random.Generator
) -> List[int]:
    """Drop each participant with one shared Beta(a, b) drop-rate draw per round."""
    if beta_a <= 0 or beta_b <= 0:
        raise ValueError("Beta parameters must be > 0")
    q = rng.beta(beta_a, beta_b)
    return [cid for cid in participants if rng.random() >= q]


def _sample_participants(server: ServerState, ids: Sequence[int]) -> List[int]:
    m = math.ceil(len(ids) * server.rho)
    picked = server.sampling_rng.choice(np.asarray(ids), size=m, replace=False)
    return sorted(int(i) for i in picked)


def _round_metrics(clients: Sequence[ClientState]) -> Tuple[List[float], List[float], float]:
    """Per-client loss on train data and accuracy on held-out data, both at
    the personalized model (global view + private channel).

    Tiny shards fall back from the test split to the train split; clients
    holding no data at all report zeros.
    """
    losses, accs, density = [], [], []
    for c in clients:
        personalized = gnn.combine(c.theta_view, c.s)
        held_out = c.test if len(c.test) else c.train
        train_loss = gnn.evaluate(personalized, c.train)[1] if len(c.train) else 0.0
        acc = gnn.evaluate(personalized, held_out)[0] if len(held_out) else 0.0
        losses.append(train_loss)
        accs.append(acc)
        total = sum(v.size for v in c.s.values())
        density.append(sum(int(np.count_nonzero(v)) for v in c.s.values()) / total)
    return losses, accs, float(np.mean(density))


def _wall_time(server: ServerState, bits: int, messages: int) -> float:
    return bits / server.bandwidth_bps + server.latency_s * messages


def run_round(server: ServerState, clients: Sequence[ClientState]) -> RoundRecord:
    """One full protocol round; mutates the server and client states.

    Coin first, then sampling, then dropout.  Survivors train both channels,
    update their correction terms and build quantized uplinks.  On a
    communicated round the server aggregates, re-compresses and broadcasts
    to every client (which adopt the decoded model as both global view and
    shared channel); on a skipped round each client's view becomes its own
    shared channel and nothing is billed.
    """
    clients = sorted(clients, key=lambda c: c.id)
    communicate = bool(server.coin_rng.random() < server.p)
    sampled = _sample_participants(server, [c.id for c in clients])
    if server.dropout is not None:
        survivors = dropout_filter(sampled, *server.dropout, rng=server.dropout_rng)
    else:
        survivors = list(sampled)
    dropped = sorted(set(sampled) - set(survivors))
    by_id = {c.id: c for c in clients}

    payloads: Dict[int, compress.CompressedPayload] = {}
    for cid in survivors:
        c = by_id[cid]
        if c.cfg.local_epochs > 0:
            local_train_round(c)
        if c.cfg.finetune_epochs > 0:
            finetune_sparse(c)
        if c.cfg.use_correction and not c.cfg.proxskip_h:
            update_correction(c)
        payloads[cid] = client_uplink(c, server.r_bits)

    stats = _AggregateStats(rank_ratio=None, param_ratio=None)
    if communicate:
        if payloads:
            sizes = [len(by_id[cid].train) for cid in survivors]
            server.theta, stats = _aggregate(
                [payloads[cid] for cid in survivors], sizes, server.eta, server.tau_lowrank
            )
        downlink = compress.encode_payload(
            server.theta,
            server.downlink_scheme,
            r=server.r_bits,
            tau_lowrank=server.tau_lowrank,
        )
        decoded = compress.decode_payload(downlink)
        uplink_bits = sum(compress.payload_bits(payloads[cid]) for cid in survivors)
        downlink_bits = len(clients) * compress.payload_bits(downlink)
        messages = len(survivors) + len(clients)
        for c in clients:
            if c.cfg.use_correction and c.cfg.proxskip_h and c.id in survivors:
                scale = server.p / c.cfg.eta
                c.h = {k: c.h[k] + scale * (decoded[k] - c.w[k]) for k in c.h}
            c.theta_view = gnn.clone_params(decoded)
            c.w = gnn.clone_params(decoded)
    else:
        # Unsent uplinks cost nothing; every client falls back to its own model.
        uplink_bits = downlink_bits = messages = 0
        for c in clients:
            c.theta_view = gnn.clone_params(c.w)

    losses, accs, density = _round_metrics(clients)
    record = RoundRecord(
        t=server.t,
        communicated=communicate,
        participants=list(survivors),
        dropped=dropped,
        uplink_bits=uplink_bits,
        downlink_bits=downlink_bits,
        train_loss=losses,
        test_accuracy=accs,
        wall_time=_wall_time(server, uplink_bits + downlink_bits, messages),
        sparsity_ratio=density,
        lowrank_rank_ratio=stats.rank_ratio,
        lowrank_param_ratio=stats.param_ratio,
    )
    server.t += 1
    return record


# ---------------------------------------------------------------------------
# Baselines


def fedprox_local_step(c: ClientState, theta: ModelParams, mu_prox: float) -> ClientState:
    """One proximal-regularized full-batch step on the shared channel."""
    _, grads = gnn.loss_and_grad(c.w, c.train.graphs)
    c.w = fedprox_step(c.w, grads, theta, c.cfg.eta, mu_prox)
    _check_finite(c.w, f"client {c.id} proximal step")
    return c


def _baseline_round(
    server: ServerState, clients: Sequence[ClientState], proximal: bool
) -> RoundRecord:
    clients = sorted(clients, key=lambda c: c.id)
    server.coin_rng.random()  # keep stream alignment; baselines always communicate
    sampled = _sample_participants(server, [c.id for c in clients])
    if server.dropout is not None:
        survivors = dropout_filter(sampled, *server.dropout, rng=server.dropout_rng)
    else:
        survivors = list(sampled)
    dropped = sorted(set(sampled) - set(survivors))
    by_id = {c.id: c for c in clients}

    payloads: Dict[int, compress.CompressedPayload] = {}
    for cid in survivors:
        c = by_id[cid]
        anchor = gnn.clone_params(c.theta_view)
        for _ in range(c.cfg.local_epochs):
            for batch in _batches(c):
                _, grads = gnn.loss_and_grad(c.w, batch)
                if proximal:
                    c.w = fedprox_step(c.w, grads, anchor, c.cfg.eta, c.cfg.mu_prox)
                else:
                    c.w = {k: c.w[k] - c.cfg.eta * grads[k] for k in c.w}
            _check_finite(c.w, f"client {c.id} local training")
        payloads[cid] = compress.encode_payload(c.w, compress.SCHEME_DENSE)

    if payloads:
        total = float(sum(len(by_id[cid].train) for cid in survivors))
        decoded_up = {cid: compress.decode_payload(payloads[cid]) for cid in survivors}
        server.theta = {
            key: linalg.weighted_sum(
                [(len(by_id[cid].train) / total, decoded_up[cid][key]) for cid in survivors]
            )
            for key in clients[0].w
        }
    downlink = compress.encode_payload(server.theta, compress.SCHEME_DENSE)
    decoded = compress.decode_payload(downlink)
    for c in clients:
        c.theta_view = gnn.clone_params(decoded)
        c.w = gnn.clone_params(decoded)

    uplink_bits = sum(compress.payload_bits(p) for p in payloads.values())
    downlink_bits = len(clients) * compress.payload_bits(downlink)
    losses, accs, density = _round_metrics(clients)
    record = RoundRecord(
        t=server.t,
        communicated=True,
        participants=list(survivors),
        dropped=dropped,
        uplink_bits=uplink_bits,
        downlink_bits=downlink_bits,
        train_loss=losses,
        test_accuracy=accs,
        wall_time=_wall_time(
            server, uplink_bits + downlink_bits, len(survivors) + len(clients)
        ),
        sparsity_ratio=density,
    )
    server.t += 1
    return record


def fedavg_round(server: ServerState, clients: Sequence[ClientState]) -> RoundRecord:
    """Plain weighted-average baseline: dense transfers every round."""
    return _baseline_round(server, clients, proximal=False)


def fedprox_round(server: ServerState, clients: Sequence[ClientState]) -> RoundRecord:
    """Proximal-regularized baseline: local steps are pulled toward the
    round-start global model."""
    return _baseline_round(server, clients, proximal=True)
