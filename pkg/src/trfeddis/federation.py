"""Round-based federated training: broadcast, local SGD, partial averaging.

Which parameters travel to the server is decided purely by partition tags:

=========  ==============================================
SingleSet  nothing
FedAvg     every tag
FedBN      everything except ``LocalBN``
TrFedDis   ``SharedEncoder`` and ``SharedGlobalHead`` only
=========  ==============================================

All randomness comes from streams keyed by ``(seed, purpose, client_id)``
and aggregation sums clients in ``client_id`` order, so results do not
depend on how client training is scheduled across worker processes.
"""
from __future__ import annotations

import logging
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import ExperimentConfig
from .data import Dataset, batches, make_synthetic, read_idx
from .data import DomainSpec
from .losses import AnnealSchedule, LossBreakdown, LossConfig, one_hot, total_loss
from .metrics import EvalResult, evaluate_outputs, model_outputs
from .model import ALL_TAGS, Model, ParamSet, PartitionTag, forward, init_model, partition_view
from .persist import checkpoint_write, write_csv
from .specfun import RngStream

__all__ = [
    "ClientState",
    "ClientUpdate",
    "ExperimentResult",
    "METRICS_HEADER",
    "RoundReport",
    "ServerState",
    "Strategy",
    "TagMismatchError",
    "TrainSettings",
    "VARIANTS",
    "aggregate",
    "build_clients",
    "load_datasets",
    "local_train",
    "run_experiment",
    "run_round",
]

log = logging.getLogger(__name__)


class TagMismatchError(ValueError):
    """The broadcast parameter set does not match the strategy's shared tags."""


@dataclass(frozen=True)
class Strategy:
    name: str = "TrFedDis"
    enable_dis: bool = True
    enable_un: bool = True
    enable_ce: bool = True

    def __post_init__(self):
        if self.name not in ("SingleSet", "FedAvg", "FedBN", "TrFedDis"):
            raise ValueError(f"unknown strategy {self.name!r}")

    @property
    def aggregated_tags(self) -> frozenset:
        if self.name == "SingleSet":
            return frozenset()
        if self.name == "FedAvg":
            return ALL_TAGS
        if self.name == "FedBN":
            return ALL_TAGS - {PartitionTag.LOCAL_BN}
        return frozenset({PartitionTag.SHARED_ENCODER, PartitionTag.SHARED_GLOBAL_HEAD})

    @property
    def dual_head(self) -> bool:
        return self.name == "TrFedDis"

    @property
    def decision(self) -> str:
        if not self.dual_head:
            return "single"
        return "fusion" if self.enable_un else "sum"


# Ablation rows: FedBN backbone; + disentangling with summed logits; + evidential
# fusion; + per-head CE (the full method).
VARIANTS = {
    "backbone": Strategy("FedBN"),
    "dis": Strategy("TrFedDis", enable_dis=True, enable_un=False, enable_ce=False),
    "dis+un": Strategy("TrFedDis", enable_dis=True, enable_un=True, enable_ce=False),
    "full": Strategy("TrFedDis"),
}


@dataclass
class TrainSettings:
    lr: float = 1e-2
    batch_size: int = 32
    local_epochs: int = 1
    eval_batch_size: int = 500


@dataclass
class ClientState:
    client_id: int
    model: Model
    rng: RngStream
    dataset: Dataset
    loss_config: LossConfig
    strategy: Strategy
    step: int = 0


@dataclass
class ClientUpdate:
    client_id: int
    params: ParamSet
    num_samples: int
    train: dict = field(default_factory=dict)


@dataclass
class ServerState:
    strategy: Strategy
    shared: ParamSet | None
    weights: dict
    round: int = 0


@dataclass
class RoundReport:
    round: int
    clients: list  # one dict per client, see _client_record


def _check_shared(client: ClientState, shared):
    tags = client.strategy.aggregated_tags
    expected = [n for n, t in client.model.params.tags.items() if t in tags]
    got = list(shared) if shared else []
    if sorted(got) != sorted(expected):
        raise TagMismatchError(
            f"client {client.client_id}: broadcast has {len(got)} tensors, strategy {client.strategy.name} shares {len(expected)}"
        )
    if shared and any(shared.tags.get(n, client.model.params.tags[n]) not in tags for n in got):
        raise TagMismatchError(f"client {client.client_id}: broadcast carries a tag the strategy keeps local")


def local_train(client: ClientState, shared: ParamSet | None, epochs: int, settings: TrainSettings):
    """Load the broadcast, run ``epochs`` of plain SGD, return ``(update, client)``.

    The update holds copies of the shared-tagged parameters only; private
    parameters never leave the client.
    """
    _check_shared(client, shared)
    model = client.model
    if shared:
        model.load(shared)
    leaves = {n: T.Tensor(model.params[n], requires_grad=True) for n in model.trainable}
    lr = np.float32(settings.lr)
    k = model.config.num_classes
    train = client.dataset.train
    sums = dict.fromkeys(LossBreakdown.FIELDS, 0.0)
    acc = {"acc_fused": 0.0, "acc_global": 0.0, "acc_local": 0.0, "mean_u": 0.0}
    nb = 0
    for _ in range(epochs):
        for x, y in batches(train, settings.batch_size, client.rng, shuffle=True, mode="train"):
            for leaf in leaves.values():
                leaf.grad = None
            _, g, l = forward(model, x, "train", leaves)
            parts = total_loss(g, l, one_hot(y, k), client.step, client.loss_config)
            T.backward(parts.total)
            if lr != 0:
                for name, leaf in leaves.items():
                    if leaf.grad is not None:
                        model.params[name] -= lr * leaf.grad
            client.step += 1
            nb += 1
            for key, v in parts.as_dict().items():
                sums[key] += v
            res = evaluate_outputs(g.data, None if l is None else l.data, y, client.strategy.decision)
            for key in acc:
                acc[key] += getattr(res, key)
    stats = {key: (v / nb if nb else float("nan")) for key, v in {**acc, **sums}.items()}
    tags = client.strategy.aggregated_tags
    params = partition_view(model, tags) if tags else ParamSet()
    return ClientUpdate(client.client_id, params, len(train), stats), client


def aggregate(updates, weights) -> ParamSet:
    """Weighted per-parameter average, summed in ascending ``client_id`` order.

    ``weights`` maps client_id to weight and must sum to 1. Accumulation is
    in float64.
    """
    if not updates:
        raise ValueError("no updates to aggregate")
    updates = sorted(updates, key=lambda u: u.client_id)
    total = float(np.sum([weights[u.client_id] for u in updates], dtype=np.float64))
    if abs(total - 1.0) > 1e-9:
        raise ValueError(f"aggregation weights sum to {total}, expected 1")
    first = updates[0].params
    for u in updates[1:]:
        if list(u.params) != list(first) or any(u.params[n].shape != first[n].shape for n in first):
            raise ValueError(f"update from client {u.client_id} has mismatched names or shapes")
    out = ParamSet(tags=first.tags)
    for name in first:
        acc = np.zeros(first[name].shape, dtype=np.float64)
        for u in updates:
            acc += weights[u.client_id] * u.params[name].astype(np.float64)
        out[name] = acc.astype(first[name].dtype)
    return out


def _train_job(args):
    client, shared, epochs, settings = args
    return local_train(client, shared, epochs, settings)


def _eval_client(client: ClientState, settings: TrainSettings):
    test = client.dataset.test
    _, g, l = model_outputs(client.model, test.inputs, settings.eval_batch_size)
    res = evaluate_outputs(g, l, test.labels, client.strategy.decision)
    with T.no_grad():
        parts = total_loss(T.Tensor(g), None if l is None else T.Tensor(l), one_hot(test.labels, client.model.config.num_classes), client.step, client.loss_config)
    return res, parts.as_dict()


def run_round(server: ServerState, clients: list, settings: TrainSettings, executor=None):
    """Broadcast, train every client, aggregate, re-broadcast, evaluate.

    SingleSet skips broadcast and aggregation, leaving ``server`` untouched
    apart from the round counter.
    """
    strategy = server.strategy
    if any(c.strategy != strategy for c in clients):
        raise ValueError("all clients must use the server's strategy")
    shared = server.shared if strategy.aggregated_tags else None
    jobs = [(c, shared, settings.local_epochs, settings) for c in clients]
    results = list(executor.map(_train_job, jobs)) if executor else [_train_job(j) for j in jobs]
    updates = [u for u, _ in results]
    clients = [c for _, c in results]
    if strategy.aggregated_tags:
        server.shared = aggregate(updates, server.weights)
        for c in clients:
            c.model.load(server.shared)
    server.round += 1
    records = []
    for u, c in zip(updates, clients):
        res, test_losses = _eval_client(c, settings)
        records.append(_client_record(c.client_id, u.train, res, test_losses, c.step))
    return server, clients, RoundReport(server.round, records)


def _client_record(client_id, train_stats, res: EvalResult, test_losses, step):
    return {
        "client": client_id,
        "step": step,
        "train": dict(train_stats),
        "test": res.as_dict() | test_losses,
    }


# ----------------------------------------------------------------- experiments

METRICS_HEADER = (
    "seed",
    "round",
    "client",
    "split",
    "accuracy",
    "acc_global",
    "acc_local",
    "mean_u",
) + LossBreakdown.FIELDS


def load_datasets(config: ExperimentConfig, seed: int) -> list[Dataset]:
    """Client datasets for ``config``; synthetic data is keyed by ``data.seed``
    when set, otherwise by the run seed."""
    dc = config.data
    if dc.source == "idx":
        out = []
        for i, c in enumerate(dc.clients):
            x = read_idx(c["images"]).data
            y = read_idx(c["labels"], scale=False).data.astype(np.int64)
            if x.ndim == 3:
                x = x[:, None]
            out.append(Dataset(x, y, int(c["n_train"]), dc.num_classes, f"client{i}"))
    else:
        specs = None
        if dc.domains is not None:
            specs = [DomainSpec(**d) for d in dc.domains]
        out = make_synthetic(
            dc.seed if dc.seed is not None else seed,
            dc.num_clients,
            dc.per_client_n,
            dc.num_classes,
            dc.image_size,
            channels=dc.channels,
            test_fraction=dc.test_fraction,
            domain_specs=specs,
            jitter=dc.jitter,
        )
    if config.model.arch == "mlp":
        out = [d.with_inputs(d.inputs.reshape(len(d), -1)) for d in out]
    return out


def strategy_of(config: ExperimentConfig) -> Strategy:
    a = config.ablation
    if config.strategy != "TrFedDis":
        return Strategy(config.strategy)
    return Strategy("TrFedDis", a.enable_dis, a.enable_un, a.enable_ce)


def build_clients(config: ExperimentConfig, seed: int, datasets=None):
    """Fresh ``(server, clients)`` for one seed; every client starts from the same initial model."""
    strategy = strategy_of(config)
    datasets = datasets if datasets is not None else load_datasets(config, seed)
    ds0 = datasets[0]
    mcfg = config.model.build(ds0.inputs.shape[1:], ds0.num_classes, strategy.dual_head)
    init = init_model(mcfg, RngStream.keyed(seed, "init"))
    s = config.schedules
    clients = []
    for cid, ds in enumerate(datasets):
        steps_per_epoch = ds.n_train // config.batch_size
        ramp = int(round(s.ramp_fraction * config.rounds * config.local_epochs * steps_per_epoch))
        loss_cfg = LossConfig(
            lambda_u=AnnealSchedule(s.lambda_u, ramp),
            lambda_d=AnnealSchedule(s.lambda_d, ramp),
            enable_dis=strategy.enable_dis,
            enable_un=strategy.enable_un,
            enable_ce=strategy.enable_ce,
            un_weights=tuple(config.un_weights),
        )
        clients.append(ClientState(cid, init.copy(), RngStream.keyed(seed, "shuffle", cid), ds, loss_cfg, strategy))
    if config.aggregation_weights == "uniform":
        weights = {c.client_id: 1.0 / len(clients) for c in clients}
    else:
        n = float(sum(c.dataset.n_train for c in clients))
        weights = {c.client_id: c.dataset.n_train / n for c in clients}
    tags = strategy.aggregated_tags
    server = ServerState(strategy, partition_view(init, tags) if tags else None, weights)
    return server, clients


def report_rows(seed: int, report: RoundReport) -> list[dict]:
    rows = []
    for rec in report.clients:
        for split in ("train", "test"):
            m = rec[split]
            row = {"seed": seed, "round": report.round, "client": rec["client"], "split": split}
            row["accuracy"] = m["acc_fused"]
            for key in METRICS_HEADER[5:]:
                row[key] = m[key]
            rows.append(row)
    return rows


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    reports: dict  # seed -> list[RoundReport]
    clients: dict  # seed -> list[ClientState]
    rows: list
    summary: dict

    def final_accuracy(self, seed=None, key="acc_fused") -> float:
        """Mean over clients of the last round's test metric (averaged over seeds if ``seed`` is None)."""
        seeds = [seed] if seed is not None else list(self.reports)
        vals = []
        for s in seeds:
            last = self.reports[s][-1]
            vals.append(float(np.mean([r["test"][key] for r in last.clients])))
        return float(np.mean(vals))


def _summarize(reports):
    per_seed = {}
    for s, reps in reports.items():
        if not reps:
            continue
        last = reps[-1]
        per_seed[s] = {
            key: float(np.mean([r["test"][key] for r in last.clients])) for key in ("acc_fused", "acc_global", "acc_local", "mean_u")
        }
    summary = {}
    if per_seed:
        for key in next(iter(per_seed.values())):
            vals = [v[key] for v in per_seed.values()]
            summary[key] = (statistics.fmean(vals), statistics.pstdev(vals) if len(vals) > 1 else 0.0)
    return per_seed, summary


def run_experiment(config: ExperimentConfig, seeds=None, out_dir=None, workers=None, progress=None) -> ExperimentResult:
    """Run every seed for ``config.rounds`` rounds.

    With ``out_dir`` set, writes ``metrics.csv``, ``summary.csv`` and one
    checkpoint per client under ``seed<N>/``.
    """
    seeds = [int(s) for s in (seeds if seeds is not None else config.seeds)]
    workers = workers or config.workers
    settings = TrainSettings(config.lr, config.batch_size, config.local_epochs, config.eval_batch_size)
    reports, finals, rows = {}, {}, []
    executor = ProcessPoolExecutor(workers) if workers > 1 else None
    try:
        for seed in seeds:
            server, clients = build_clients(config, seed)
            reports[seed] = []
            for r in range(config.rounds):
                server, clients, rep = run_round(server, clients, settings, executor)
                reports[seed].append(rep)
                rows.extend(report_rows(seed, rep))
                if progress:
                    progress(seed, rep)
            finals[seed] = clients
    finally:
        if executor:
            executor.shutdown()
    per_seed, summary = _summarize(reports)
    result = ExperimentResult(config, reports, finals, rows, {"per_seed": per_seed, "mean_std": summary})
    if out_dir is not None:
        write_outputs(result, out_dir)
    return result


def write_outputs(result: ExperimentResult, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "metrics.csv", METRICS_HEADER, result.rows)
    per_seed, summary = result.summary["per_seed"], result.summary["mean_std"]
    srows = [{"seed": s, **v} for s, v in per_seed.items()]
    if summary:
        srows.append({"seed": "mean", **{k: m for k, (m, _) in summary.items()}})
        srows.append({"seed": "std", **{k: sd for k, (_, sd) in summary.items()}})
    write_csv(out / "summary.csv", ("seed", "acc_fused", "acc_global", "acc_local", "mean_u"), srows)
    cfg = result.config.to_dict()
    for seed, clients in result.clients.items():
        for c in clients:
            meta = {"seed": seed, "client_id": c.client_id, "strategy": c.strategy.__dict__, "step": c.step, "config": cfg}
            checkpoint_write(c.model, out / f"seed{seed}" / f"client{c.client_id}.ckpt", meta)
    return out
