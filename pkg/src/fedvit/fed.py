"""Federated rounds with per-head personalization and mutual consistency loss."""
from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .data import ClientShard
from .metrics import auc, ensemble_scores, positive_scores
from .partition import (ParamRole, ParamStore, PartitionSpec, assign_roles, checkpoint_bytes, extract, merge,
                        parse_checkpoint)
from .tensor import GradTape, Tensor
from .vit import SubnetMode, ViTConfig, ViTModel, init_params

log = logging.getLogger(__name__)


class TrainingAbort(RuntimeError):
    def __init__(self, round_idx: int, client_id: int, detail: str):
        super().__init__(f"round {round_idx}, client {client_id}: {detail}")
        self.round = round_idx
        self.client_id = client_id


class AggregationError(ValueError):
    pass


@dataclass
class FedConfig:
    num_clients: int = 6
    rounds: int = 50
    local_epochs: int = 3
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 32
    lam: float = 1.0
    temperature: float = 4.0
    ratio: float = 0.6
    seed: int = 0

    def __post_init__(self):
        for f in ("num_clients", "rounds", "local_epochs", "batch_size"):
            if int(getattr(self, f)) <= 0:
                raise ValueError(f"{f} must be positive, got {getattr(self, f)}")
        if self.lr < 0 or self.weight_decay < 0 or not 0 <= self.momentum < 1:
            raise ValueError("lr and weight_decay must be >= 0, momentum in [0, 1)")
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if not self.temperature > 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        if not 0 <= self.ratio <= 1:
            raise ValueError(f"personalization ratio must be in [0, 1], got {self.ratio}")


class NesterovSGD:
    """SGD with Nesterov momentum and coupled L2 weight decay.

    v' = mu * v + (g + wd * w);  w' = w - lr * (g + mu * v').  The decay term
    enters the velocity only; the look-ahead step uses the raw gradient.
    """

    def __init__(self, params: Sequence[Tensor], lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        for p, buf in zip(self.params, self.buffers):
            if p.grad is None:
                continue
            dt = p.data.dtype.type
            buf *= dt(self.momentum)
            buf += p.grad + dt(self.weight_decay) * p.data
            p.data -= dt(self.lr) * (p.grad + dt(self.momentum) * buf)


@dataclass
class ClientState:
    client_id: int
    shard: ClientShard
    store: ParamStore
    model: ViTModel
    optimizer: NesterovSGD

    @property
    def n_samples(self) -> int:
        return self.shard.n_train


@dataclass
class RoundReport:
    round: int
    ce_loss: list[float]
    con_loss: list[float]
    local_auc: list[float]
    new_auc: float
    wall_time: float = 0.0

    @property
    def mean_local_auc(self) -> float:
        return float(np.mean(self.local_auc))

    @property
    def mean_con_loss(self) -> float:
        return float(np.mean(self.con_loss))


_warned_empty = False


def consistency_loss(model: ViTModel, images, temperature: float) -> Tensor:
    """Symmetric KL between the temperature-softened shared and personalized subnets."""
    global _warned_empty
    if not temperature > 0:
        raise T.ParameterError(f"temperature must be > 0, got {temperature}")
    if model.personalized_heads == 0:
        if not _warned_empty:
            log.warning("no personalized heads; consistency loss is defined as 0")
            _warned_empty = True
        return Tensor(np.zeros((), dtype=model["head.b"].data.dtype))
    pg = T.softmax(model(images, SubnetMode.SHARED), temperature)
    pp = T.softmax(model(images, SubnetMode.PERSONALIZED), temperature)
    return T.add(T.kl_div(pg, pp), T.kl_div(pp, pg))


def local_objective(model: ViTModel, images, labels, lam: float, temperature: float):
    """Returns (total, ce, con). With lam == 0 the total is the CE tensor itself."""
    ce = T.cross_entropy(model(images, SubnetMode.FULL), labels)
    if lam == 0:
        return ce, ce, None
    con = consistency_loss(model, images, temperature)
    return T.add(ce, T.scale(con, lam)), ce, con


def epoch_orders(n: int, epochs: int, seed: int, round_idx: int, client_id: int) -> list[np.ndarray]:
    rng = np.random.default_rng([seed, round_idx, client_id])
    return [rng.permutation(n) for _ in range(epochs)]


def sgd_step(model: ViTModel, opt: NesterovSGD, x, y, lam: float, temperature: float):
    opt.zero_grad()
    with GradTape() as tape:
        loss, ce, con = local_objective(model, x, y, lam, temperature)
        tape.backward(loss, opt.params)
    opt.step()
    return float(loss.data), float(ce.data), con


def local_train(client: ClientState, cfg: FedConfig, round_idx: int) -> tuple[float, float]:
    """E epochs of Nesterov SGD on every parameter; returns mean (L_ce, L_con).

    When lam == 0 the consistency loss is still measured (outside the tape)
    so both arms report it.
    """
    x, y = client.shard.train_x, client.shard.train_y
    ce_sum = con_sum = 0.0
    steps = 0
    for order in epoch_orders(len(y), cfg.local_epochs, cfg.seed, round_idx, client.client_id):
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            loss, ce, con = sgd_step(client.model, client.optimizer, x[idx], y[idx], cfg.lam, cfg.temperature)
            if not np.isfinite(loss):
                raise TrainingAbort(round_idx, client.client_id, f"non-finite loss {loss} at step {steps}")
            if con is None:
                con = consistency_loss(client.model, x[idx], cfg.temperature)
            ce_sum += ce
            con_sum += float(con.data)
            steps += 1
    return ce_sum / max(steps, 1), con_sum / max(steps, 1)


def fedavg_aggregate(updates: Sequence[tuple[Sequence[tuple[str, Tensor]], int]]) -> list[tuple[str, Tensor]]:
    """Sample-count weighted mean, accumulated in the given (canonical) order."""
    if not updates:
        raise AggregationError("no client updates")
    names = [n for n, _ in updates[0][0]]
    total = sum(n for _, n in updates)
    if total <= 0:
        raise AggregationError("total sample count must be positive")
    for j, (params, _) in enumerate(updates):
        if [n for n, _ in params] != names:
            raise AggregationError(f"client {j} reports a different parameter set")
    out = []
    for i, name in enumerate(names):
        shape = updates[0][0][i][1].shape
        acc = np.zeros(shape, dtype=updates[0][0][i][1].data.dtype)
        for params, n in updates:
            t = params[i][1]
            if t.shape != shape:
                raise AggregationError(f"{name}: shape {t.shape} vs {shape}")
            acc += acc.dtype.type(n / total) * t.data
        out.append((name, Tensor(acc, name=name)))
    return out


# the client<->server boundary carries FVT1 bytes


def encode_upload(store: ParamStore) -> bytes:
    shared = extract(store, ParamRole.SHARED)
    return checkpoint_bytes(ParamStore(shared, {n: ParamRole.SHARED for n, _ in shared}))


def decode_upload(buf: bytes) -> list[tuple[str, Tensor]]:
    st = parse_checkpoint(buf)
    if st.checksum_failures:
        raise AggregationError(f"corrupted upload tensors: {st.checksum_failures}")
    return [(n, t) for n, t, _ in st.items()]


WireLog = Callable[[str, int, int, bytes], None]


def make_client(client_id: int, shard: ClientShard, model_cfg: ViTConfig, init: dict[str, Tensor],
                spec: PartitionSpec, cfg: FedConfig) -> ClientState:
    params = {n: Tensor(t.data.copy(), requires_grad=True, name=n) for n, t in init.items()}
    store = assign_roles(ParamStore(params), spec)
    model = ViTModel(model_cfg, store.tensors(), spec.personalized(0))
    opt = NesterovSGD(list(store.tensors().values()), cfg.lr, cfg.momentum, cfg.weight_decay)
    return ClientState(client_id, shard, store, model, opt)


@dataclass
class FederationResult:
    reports: list[RoundReport]
    clients: list[ClientState]
    server: list[tuple[str, Tensor]] = field(default_factory=list)


def evaluate(clients: Sequence[ClientState], holdout_x, holdout_y) -> tuple[list[float], float]:
    local = [auc(positive_scores(c.model, c.shard.test_x), c.shard.test_y) for c in clients]
    new = auc(ensemble_scores([c.model for c in clients], holdout_x), holdout_y) if len(holdout_y) else float("nan")
    return local, new


def run_federation(cfg: FedConfig, shards: Sequence[ClientShard], model_cfg: ViTConfig,
                   holdout: tuple[np.ndarray, np.ndarray] | None = None,
                   wire_log: Optional[WireLog] = None, parallel_clients: int = 1,
                   on_round: Optional[Callable[[RoundReport], None]] = None) -> FederationResult:
    """Full-participation FedAvg over the shared set; personalized heads stay on the client."""
    if len(shards) != cfg.num_clients:
        raise ValueError(f"expected {cfg.num_clients} shards, got {len(shards)}")
    spec = PartitionSpec.from_ratio(cfg.ratio, model_cfg.num_heads, model_cfg.num_layers)
    init = init_params(model_cfg, cfg.seed)
    clients = [make_client(j, s, model_cfg, init, spec, cfg) for j, s in enumerate(shards)]
    hx, hy = holdout if holdout is not None else (np.zeros((0,)), np.zeros((0,), dtype=np.int64))
    server = extract(clients[0].store, ParamRole.SHARED)
    reports = []
    pool = ThreadPoolExecutor(parallel_clients) if parallel_clients > 1 else None
    try:
        for r in range(cfg.rounds):
            t0 = time.perf_counter()
            down = encode_upload(ParamStore(server, {n: ParamRole.SHARED for n, _ in server}))
            for c in clients:
                if wire_log:
                    wire_log("down", r, c.client_id, down)
                merge(c.store, decode_upload(down), ParamRole.SHARED)

            def train(c: ClientState):
                return local_train(c, cfg, r)

            losses = list(pool.map(train, clients)) if pool else [train(c) for c in clients]
            updates = []
            for c in clients:
                up = encode_upload(c.store)
                if wire_log:
                    wire_log("up", r, c.client_id, up)
                updates.append((decode_upload(up), c.n_samples))
            server = fedavg_aggregate(updates)
            for c in clients:
                merge(c.store, server, ParamRole.SHARED)
            local, new = evaluate(clients, hx, hy)
            rep = RoundReport(r, [l[0] for l in losses], [l[1] for l in losses], local, new,
                              time.perf_counter() - t0)
            log.info("round %d: mean local AUC %.4f, new AUC %.4f, ce %.4f, con %.4f",
                     r, rep.mean_local_auc, new, float(np.mean(rep.ce_loss)), rep.mean_con_loss)
            reports.append(rep)
            if on_round:
                on_round(rep)
    finally:
        if pool:
            pool.shutdown()
    return FederationResult(reports, clients, server)
