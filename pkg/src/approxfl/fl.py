"""Synchronous federated averaging with per-device energy accounting."""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .accel import EnergyLedger, EnergyTable, trace_energy
from .baselines import Aggregator, LocalPlan, Strategy, StrategyKind, apply_strategy, extract_submodel
from .config import RunConfig
from .datasets import Dataset, ingest_dataset, normalize
from .metrics import MetricsReport, evaluate
from .models import build_model
from .nn import Context, EmptyShard, Model, Proximal, local_train
from .partition import GroupAssignment, PartitionSpec, assign_groups, group_class_counts, partition

log = logging.getLogger(__name__)


def select_clients(devices, count: int, rng: np.random.Generator) -> list[int]:
    """Uniform sample without replacement, returned in ascending order."""
    devices = list(devices)
    if count > len(devices):
        raise ValueError(f"cannot select {count} of {len(devices)} devices")
    if count == len(devices):
        return sorted(devices)
    return sorted(int(d) for d in rng.choice(devices, size=count, replace=False))


def aggregate(local_models) -> dict | None:
    """Weighted average of (state, |D_c|) pairs; None when there are no clients."""
    local_models = list(local_models)
    if not local_models:
        log.warning("no client updates this round; keeping the server model")
        return None
    template = local_models[0][0]
    agg = Aggregator({k: np.asarray(v) for k, v in template.items()})
    for state, n in local_models:
        agg.add(state, n)
    return agg.result()


def client_rng(seed: int, round_index: int, device: int) -> np.random.Generator:
    return np.random.default_rng([seed, 2, round_index, device])


@dataclass
class DeviceRound:
    device: int
    group: str
    strategy: str
    accelerator: str
    samples: int
    batches: int
    loss: float
    ledger: EnergyLedger
    cumulative_energy: float


@dataclass
class RoundRecord:
    round: int
    lr: float
    devices: list
    loss: float
    metrics: MetricsReport | None = None


@dataclass
class ServerState:
    model: Model
    round: int = 0
    history: list = field(default_factory=list)


def load_data(cfg: RunConfig):
    train = ingest_dataset(cfg.resolve(cfg.train_path), cfg.data_format, cfg.input_shape)
    test = ingest_dataset(cfg.resolve(cfg.test_path), cfg.data_format, train.shape)
    train, stats = normalize(train)
    test, _ = normalize(test, stats)
    return train, test


class Federation:
    """One seed of one configuration."""

    def __init__(self, cfg: RunConfig, seed: int, train: Dataset, test: Dataset,
                 table: EnergyTable | None = None):
        self.cfg = cfg
        self.seed = seed
        self.train = train
        self.test = test
        self.table = table or cfg.load_energy_table()
        self.num_classes = cfg.num_classes or max(train.num_classes, test.num_classes)
        self.groups: GroupAssignment = assign_groups(cfg.devices, [(g.label, g.fraction) for g in cfg.groups])
        self.strategies = [g.strategy for g in cfg.groups]
        kind = cfg.partition
        spec = PartitionSpec(kind, cfg.devices, seed, cfg.alpha, len(cfg.groups))
        self.shards = partition(train.y, spec, self.groups if kind == "rc" else None)
        self.group_counts = group_class_counts(train.y, self.shards, self.groups, self.num_classes)
        model = build_model(cfg.model, train.shape, self.num_classes, width=cfg.model_width, seed=seed)
        self.state = ServerState(model)
        self.select_rng = np.random.default_rng([seed, 1])
        self.cumulative = np.zeros(cfg.devices)

    def strategy_of(self, device: int) -> Strategy:
        return self.strategies[self.groups.device_group[device]]

    def eligible(self) -> list[int]:
        return [d for d in range(self.cfg.devices) if self.strategy_of(d).kind is not StrategyKind.DROP]

    def _train_client(self, device: int, plan: LocalPlan, r: int, lr: float):
        server = self.state.model
        local = extract_submodel(server, plan.mask) if plan.mask is not None else server.copy()
        idx = self.shards[device]
        prox = Proximal(plan.mu, {k: v.copy() for k, v in local.params().items()}) if plan.mu > 0 else None
        res = local_train(local, self.train.x[idx], self.train.y[idx], epochs=self.cfg.local_epochs,
                          batch_size=self.cfg.batch_size, spec=plan.accelerator.multiplier, lr=lr,
                          rng=client_rng(self.seed, r, device), proximal=prox,
                          batch_fraction=plan.batch_fraction, flip=self.cfg.flip, crop=self.cfg.crop)
        ledger = trace_energy(res.trace, plan.accelerator, self.table)
        return local.state_copy(), res, ledger

    def step(self) -> RoundRecord:
        cfg = self.cfg
        r = self.state.round + 1
        lr = cfg.lr_at(r)
        pool = self.eligible()
        chosen = select_clients(pool, min(cfg.clients_per_round, len(pool)), self.select_rng)
        plans = {d: apply_strategy(d, self.strategy_of(d), self.state.model, r - 1) for d in chosen}
        active = [d for d in chosen if plans[d].participate and len(self.shards[d])]

        def work(d):
            try:
                return self._train_client(d, plans[d], r, lr)
            except EmptyShard:
                return None
            except Exception as e:
                raise RuntimeError(f"round {r}, device {d}: {e}") from e

        if cfg.threads > 1 and len(active) > 1:
            with ThreadPoolExecutor(max_workers=cfg.threads) as ex:
                results = list(ex.map(work, active))
        else:
            results = [work(d) for d in active]

        server_state = self.state.model.state()
        agg = Aggregator({k: v.copy() for k, v in server_state.items()})
        spaces = self.state.model.spaces()
        rows = []
        losses, weights = [], []
        for d, out in zip(active, results):
            if out is None:
                continue
            st, res, ledger = out
            n = len(self.shards[d])
            agg.add(st, n, plans[d].mask, spaces if plans[d].mask is not None else None)
            self.cumulative[d] += ledger.total
            s = self.strategy_of(d)
            rows.append(DeviceRound(d, self.groups.labels[self.groups.device_group[d]], s.label,
                                    plans[d].accelerator.name, n, res.batches, res.loss, ledger,
                                    float(self.cumulative[d])))
            losses.append(res.loss)
            weights.append(n)
        if agg.clients:
            self.state.model.load_state(agg.result())
        else:
            log.warning("round %d: no client updates; server model unchanged", r)
        self.state.round = r
        loss = float(np.average(losses, weights=weights)) if losses else float("nan")
        rec = RoundRecord(r, lr, rows, loss, self.evaluate())
        self.state.history.append(rec)
        return rec

    def evaluate(self) -> MetricsReport:
        pred = self.state.model.predict(self.test.x, Context())
        return evaluate(pred, self.test.y, self.num_classes, self.group_counts, self.cfg.accuracy_mode)

    def run(self, rounds: int | None = None) -> list[RoundRecord]:
        for _ in range(rounds or self.cfg.rounds):
            rec = self.step()
            log.info("seed %d round %d: loss %.4f top1 %.4f", self.seed, rec.round, rec.loss, rec.metrics.top1)
        return self.state.history


def run(cfg: RunConfig, seed: int | None = None) -> list[RoundRecord]:
    train, test = load_data(cfg)
    return Federation(cfg, cfg.seeds[0] if seed is None else seed, train, test).run()
