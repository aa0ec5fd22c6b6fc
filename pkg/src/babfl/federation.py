"""Simulated federated rounds: sample, broadcast, train locally, aggregate, evaluate."""
from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import seeding
from .barycenter import GAUSSIAN_RULES, AggregationError, AggregationMethod, aggregate_with, check_weights
from .bnn import HybridNet, PosteriorParams, TrainConfig, local_train, save_checkpoint
from .data import LabeledDataset, PartitionPlan
from .metrics import DEFAULT_BINS, DEFAULT_SAMPLES, evaluate

log = logging.getLogger(__name__)


class FederationError(ValueError):
    pass


@dataclass
class ClientState:
    id: int
    shard: LabeledDataset
    params: PosteriorParams | None = None
    seed_key: int | None = None  # training sub-stream key; defaults to ``id``

    @property
    def sample_count(self) -> int:
        return len(self.shard)


@dataclass
class ServerState:
    net: HybridNet  # holds the global posterior and the architecture
    method: AggregationMethod
    weights: np.ndarray  # full-population data-volume weights
    round_index: int = 0

    @property
    def global_params(self) -> PosteriorParams:
        return self.net.params


@dataclass
class RoundRecord:
    round_index: int
    participants: list
    method: str
    wall_seconds: float
    accuracy: float | None = None
    nll: float | None = None
    ece: float | None = None
    weights: list = field(default_factory=list)


@dataclass
class FederationConfig:
    rounds: int
    method: AggregationMethod | str = AggregationMethod.RKLB
    fraction: float = 1.0
    train: TrainConfig = field(default_factory=TrainConfig)
    eval_samples: int = DEFAULT_SAMPLES
    n_bins: int = DEFAULT_BINS
    seed: int = 0
    threads: int = 1
    checkpoint_every: int = 0
    checkpoint_dir: str | None = None

    def __post_init__(self):
        self.method = AggregationMethod.parse(self.method)
        if self.rounds < 0:
            raise FederationError("rounds must be nonnegative")
        if not 0 < self.fraction <= 1:
            raise FederationError("participation fraction must lie in (0, 1]")
        if self.threads < 1:
            raise FederationError("threads must be positive")


def compute_weights(clients) -> np.ndarray:
    counts = np.array([c.sample_count for c in clients], dtype=np.float64)
    total = math.fsum(counts)
    if total <= 0:
        raise FederationError("every client is empty")
    return counts / total


def build_clients(train: LabeledDataset, plan: PartitionPlan) -> list[ClientState]:
    plan.validate(len(train))
    return [ClientState(k, train.subset(idx)) for k, idx in enumerate(plan.assignments)]


def federated_train_config(cfg: TrainConfig, clients) -> TrainConfig:
    """Fill an unset KL weight with ``1 / |D|`` over the whole federation.

    Each client then minimizes ``mean_CE_k + KL / |D|``, and the data-volume
    weighted sum of these local objectives is the global per-example negative ELBO.
    """
    if cfg.kl_scale is not None:
        return cfg
    return replace(cfg, kl_scale=1.0 / sum(c.sample_count for c in clients))


def sample_clients(n_clients: int, fraction: float, seed: int, round_index: int) -> list[int]:
    m = math.ceil(fraction * n_clients - 1e-9)
    if m < 1:
        raise FederationError("participation fraction selects no client")
    chosen = seeding.rng(seed, "sampling", round_index).choice(n_clients, size=m, replace=False)
    return sorted(int(k) for k in chosen)


def _rule_for(method: AggregationMethod, net: HybridNet):
    if method is AggregationMethod.FEDAVG:
        if not net.deterministic:
            raise AggregationError("FEDAVG is defined only for models whose layers are all deterministic")
        return None
    return GAUSSIAN_RULES[method]


def run_round(
    server: ServerState,
    clients: list[ClientState],
    fraction: float,
    cfg: TrainConfig,
    seed: int,
    *,
    rule: Callable | None = None,
    threads: int = 1,
    test: LabeledDataset | None = None,
    eval_samples: int = DEFAULT_SAMPLES,
    n_bins: int = DEFAULT_BINS,
):
    """Run one round and return ``(new_server_state, record)``; ``server`` is not mutated.

    ``rule`` overrides the Gaussian aggregation rule implied by ``server.method``.
    """
    start = time.perf_counter()
    r = server.round_index + 1
    if len(server.weights) != len(clients):
        raise FederationError("server weights do not match the client population")
    if rule is None:
        rule = _rule_for(server.method, server.net)
    chosen = sample_clients(len(clients), fraction, seed, r)
    global_params = server.global_params

    def train(k):
        client = clients[k]
        key = client.id if client.seed_key is None else client.seed_key
        if client.params is not None and client.params.signature() != global_params.signature():
            raise AggregationError(f"client {client.id} does not match the global architecture")
        return local_train(
            server.net, client.shard.features, client.shard.labels, cfg, seeding.stream(seed, "train", r, key)
        )

    if threads > 1 and len(chosen) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            trained = list(pool.map(train, chosen))
    else:
        trained = [train(k) for k in chosen]

    used, params = [], []
    for k, p in zip(chosen, trained):
        if p is None:
            log.info("round %d: client %d has no data, skipped", r, clients[k].id)
            continue
        clients[k].params = p
        used.append(k)
        params.append(p)
    if not params:
        raise FederationError(f"round {r}: no sampled client produced an update")
    sub = server.weights[used]
    w = check_weights(sub / math.fsum(sub), len(used))
    new_net = server.net.with_params(aggregate_with(rule, params, w))
    new_server = replace(server, net=new_net, round_index=r)

    record = RoundRecord(r, [clients[k].id for k in used], server.method.value, 0.0, weights=w.tolist())
    if test is not None:
        rep = evaluate(new_net, test, eval_samples, n_bins, seeding.stream(seed, "eval", r))
        record.accuracy, record.nll, record.ece = rep.accuracy, rep.nll, rep.ece
    record.wall_seconds = time.perf_counter() - start
    return new_server, record


def run(
    config: FederationConfig,
    net: HybridNet,
    clients: list[ClientState],
    test: LabeledDataset | None = None,
    *,
    rule: Callable | None = None,
    on_round: Callable[[ServerState, RoundRecord], None] | None = None,
):
    """Execute ``config.rounds`` rounds from the initial global model ``net``.

    Returns ``(records, final_server_state)``.
    """
    server = ServerState(net, config.method, compute_weights(clients))
    if rule is None:
        _rule_for(config.method, net)
    train_cfg = federated_train_config(config.train, clients)
    records = []
    for _ in range(config.rounds):
        server, record = run_round(
            server,
            clients,
            config.fraction,
            train_cfg,
            config.seed,
            rule=rule,
            threads=config.threads,
            test=test,
            eval_samples=config.eval_samples,
            n_bins=config.n_bins,
        )
        records.append(record)
        if on_round is not None:
            on_round(server, record)
        if config.checkpoint_every and config.checkpoint_dir and record.round_index % config.checkpoint_every == 0:
            path = Path(config.checkpoint_dir) / f"global_r{record.round_index:04d}.ckpt"
            save_checkpoint(path, server.net, {"round": record.round_index, "method": config.method.value})
    return records, server
