"""Federated round loop: broadcast, local bilevel updates, weighted aggregation.

Each round every selected client downloads the global (weights, logits) pair,
runs E local epochs -- a weight pass over its train shard with sampled gates,
then a logits pass over its validation shard with Adam on the mixture loss --
and the server averages both parameter sets with data-size weights. Clients
derive all randomness from (global seed, client id, round), so sequential and
threaded execution produce identical results.
"""

from __future__ import annotations

import csv
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericsError
from .losses import accuracy, cross_entropy
from .optim import AdamState, SgdMomentumState, adam_step, cosine_lr, sgd_momentum_step
from .supernet import (
    ArchParams,
    GateSample,
    NormalNet,
    ParamSet,
    SuperNetModel,
    alpha_gradient,
    expected_latency,
    sample_gates,
)

METRICS_COLUMNS = ("round", "train_loss", "val_loss", "fed_acc", "mean_local_acc",
                   "expected_latency_ms", "wall_clock_s")


@dataclass
class ClientState:
    client_id: int
    train_idx: np.ndarray
    val_idx: np.ndarray
    test_idx: np.ndarray
    tag: str = ""
    hardware: str = ""

    @property
    def data_size(self) -> int:
        return len(self.train_idx) + len(self.val_idx)


@dataclass
class TrainHyper:
    local_epochs: int = 5
    batch_size: int = 32
    lr_w: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 3e-4
    alpha_lr: float = 3e-3
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    participation: float = 1.0


@dataclass
class ClientStats:
    client_id: int
    n_data: int
    train_loss: float = float("nan")
    val_loss: float = float("nan")
    update_counts: dict = field(default_factory=dict)
    # mutation tracking (filled when track_mutations=True): which keys changed
    # during the train pass and during the validation pass
    train_pass_w_mutated: set | None = None
    train_pass_alpha_mutated: set | None = None
    val_pass_w_mutated: set | None = None
    val_pass_alpha_mutated: set | None = None


@dataclass
class RunStats:
    """Bilevel-separation instrumentation accumulated over a whole run."""

    w_updates_from_train: int = 0
    w_updates_from_val: int = 0
    alpha_updates_from_train: int = 0
    alpha_updates_from_val: int = 0

    def absorb(self, counts: dict) -> None:
        self.w_updates_from_train += counts.get(("w", "train"), 0)
        self.w_updates_from_val += counts.get(("w", "val"), 0)
        self.alpha_updates_from_train += counts.get(("alpha", "train"), 0)
        self.alpha_updates_from_val += counts.get(("alpha", "val"), 0)


@dataclass
class MetricsRecord:
    round: int
    train_loss: float = float("nan")
    val_loss: float = float("nan")
    fed_acc: float = float("nan")
    mean_local_acc: float = float("nan")
    expected_latency_ms: float = float("nan")
    wall_clock_s: float = 0.0

    def row(self):
        return [self.round, self.train_loss, self.val_loss, self.fed_acc,
                self.mean_local_acc, self.expected_latency_ms, self.wall_clock_s]


def clients_from_plan(plan, tags=None, hardware=None) -> list[ClientState]:
    out = []
    for k in range(plan.num_clients):
        out.append(ClientState(
            client_id=k,
            train_idx=np.asarray(plan.train[k]),
            val_idx=np.asarray(plan.val[k]),
            test_idx=np.asarray(plan.test[k]),
            tag=(tags[k] if tags else ""),
            hardware=(hardware[k] if hardware else ""),
        ))
    return out


def _batches(indices: np.ndarray, batch_size: int):
    for start in range(0, len(indices), batch_size):
        yield indices[start:start + batch_size]


def client_update(model: SuperNetModel, global_params: ParamSet, global_arch: ArchParams,
                  client: ClientState, dataset, hyper: TrainHyper, lr_w: float,
                  global_seed: int, round_index: int, table=None, lam: float = 0.0,
                  track_mutations: bool = False):
    """One client's local update starting from the downloaded globals.

    Returns (params, arch, stats). With local_epochs == 0 the globals come
    back unchanged.
    """
    params = global_params.copy()
    arch = global_arch.copy()
    stats = ClientStats(client_id=client.client_id, n_data=client.data_size,
                        update_counts={})
    if hyper.local_epochs == 0:
        return params, arch, stats
    if len(client.train_idx) == 0 or len(client.val_idx) == 0:
        raise ValueError(f"client {client.client_id} has an empty shard")

    rng = np.random.default_rng([int(global_seed), int(client.client_id), int(round_index)])
    sgd = SgdMomentumState(momentum=hyper.momentum, weight_decay=hyper.weight_decay)
    adam = AdamState(betas=tuple(hyper.adam_betas), eps=hyper.adam_eps)
    alpha_d = arch.as_dict()
    counts = stats.update_counts
    train_loss_sum = train_n = 0.0
    val_loss_sum = val_n = 0.0
    tp_w: set = set()
    tp_a: set = set()
    vp_w: set = set()
    vp_a: set = set()

    for _ in range(hyper.local_epochs):
        # weight pass: sampled single-path forward on the train shard
        if track_mutations:
            before = dict(params.arrays)
            alpha_before = dict(alpha_d)
        order = client.train_idx[rng.permutation(len(client.train_idx))]
        for batch_idx in _batches(order, hyper.batch_size):
            gates = sample_gates(arch, int(rng.integers(2 ** 63)))
            x = dataset.examples[batch_idx]
            y = dataset.labels[batch_idx]
            logits, caches = model.forward_sampled(params, gates, x)
            loss, glogits = cross_entropy(logits, y)
            grads = model.backward_sampled(caches, glogits)
            sgd_momentum_step(params.arrays, grads, sgd, lr_w)
            counts[("w", "train")] = counts.get(("w", "train"), 0) + 1
            train_loss_sum += loss * len(batch_idx)
            train_n += len(batch_idx)
        if track_mutations:
            tp_w |= {k for k in params.arrays if params.arrays[k] is not before[k]}
            tp_a |= {k for k in alpha_d if alpha_d[k] is not alpha_before[k]}

        # architecture pass: exact mixture gradient on the validation shard
        if track_mutations:
            before = dict(params.arrays)
            alpha_before = dict(alpha_d)
        order = client.val_idx[rng.permutation(len(client.val_idx))]
        for batch_idx in _batches(order, hyper.batch_size):
            x = dataset.examples[batch_idx]
            y = dataset.labels[batch_idx]
            agrads, info = alpha_gradient(model, params, arch, x, y, table=table, lam=lam)
            adam_step(alpha_d, {f"alpha{i}": g for i, g in enumerate(agrads)},
                      adam, hyper.alpha_lr)
            arch = ArchParams([alpha_d[f"alpha{i}"] for i in range(model.num_layers)])
            counts[("alpha", "val")] = counts.get(("alpha", "val"), 0) + 1
            val_loss_sum += info["loss"] * len(batch_idx)
            val_n += len(batch_idx)
        if track_mutations:
            vp_a |= {k for k in alpha_d if alpha_d[k] is not alpha_before[k]}
            vp_w |= {k for k in params.arrays if params.arrays[k] is not before[k]}

    stats.train_loss = train_loss_sum / train_n if train_n else float("nan")
    stats.val_loss = val_loss_sum / val_n if val_n else float("nan")
    if track_mutations:
        stats.train_pass_w_mutated = tp_w
        stats.train_pass_alpha_mutated = tp_a
        stats.val_pass_w_mutated = vp_w
        stats.val_pass_alpha_mutated = vp_a
    return params, arch, stats


def aggregate(updates: list[dict], sizes, total=None) -> dict:
    """Data-size-weighted elementwise average of named parameter dicts."""
    if not updates:
        raise ValueError("nothing to aggregate")
    sizes = [float(s) for s in sizes]
    if len(sizes) != len(updates):
        raise ValueError("sizes/updates length mismatch")
    if any(s <= 0 for s in sizes):
        raise ValueError("all client data sizes must be positive")
    denom = float(total) if total is not None else sum(sizes)
    if denom <= 0:
        raise ValueError("aggregation denominator must be positive")
    keys = list(updates[0].keys())
    for u in updates[1:]:
        if list(u.keys()) != keys:
            raise ValueError("updates disagree on parameter registry")
    out = {}
    for key in keys:
        ref_shape = updates[0][key].shape
        acc = np.zeros(ref_shape)
        for u, s in zip(updates, sizes):
            if u[key].shape != ref_shape:
                raise ValueError(f"shape mismatch for {key}")
            acc += (s / denom) * u[key]
        out[key] = acc
    return out


def aggregate_states(results, sizes, total=None):
    """Apply `aggregate` to (ParamSet, ArchParams) pairs jointly."""
    w = aggregate([r[0].arrays for r in results], sizes, total)
    n_layers = len(results[0][1])
    a = aggregate([r[1].as_dict() for r in results], sizes, total)
    return ParamSet(w), ArchParams([a[f"alpha{i}"] for i in range(n_layers)])


@dataclass
class SearchResult:
    params: ParamSet
    arch: ArchParams
    metrics: list[MetricsRecord]
    stats: RunStats


def _argmax_gates(arch: ArchParams) -> GateSample:
    return GateSample(indices=tuple(int(np.argmax(a)) for a in arch.logits), seed=-1)


def _supernet_accuracy(model, params, arch, dataset, indices, batch_size=256) -> float:
    if len(indices) == 0:
        raise ValueError("empty test shard")
    gates = _argmax_gates(arch)
    hits = 0
    for batch_idx in _batches(np.asarray(indices), batch_size):
        logits, _ = model.forward_sampled(params, gates, dataset.examples[batch_idx])
        hits += int((logits.argmax(axis=1) == dataset.labels[batch_idx]).sum())
    return hits / len(indices)


def run_search(model: SuperNetModel, clients: list[ClientState], dataset, hyper: TrainHyper,
               rounds: int, seed: int, init_params: ParamSet | None = None,
               init_arch: ArchParams | None = None, table=None, lam: float = 0.0,
               agg_total=None, threads: int = 1, eval_every: int = 0,
               track_mutations: bool = False) -> SearchResult:
    """The full search loop over `rounds` communication rounds."""
    if not clients:
        raise ValueError("need at least one client")
    params = init_params.copy() if init_params is not None else model.init_params(seed)
    arch = init_arch.copy() if init_arch is not None else model.init_arch()
    metrics: list[MetricsRecord] = []
    stats = RunStats()
    t0 = time.perf_counter()

    for t in range(rounds):
        lr_w = cosine_lr(t, rounds, hyper.lr_w)
        selected = clients
        if hyper.participation < 1.0:
            rng = np.random.default_rng([int(seed), 0xF0, t])
            n_sel = max(1, int(round(hyper.participation * len(clients))))
            pick = sorted(rng.choice(len(clients), size=n_sel, replace=False))
            selected = [clients[i] for i in pick]

        def job(client):
            return client_update(model, params, arch, client, dataset, hyper, lr_w,
                                 seed, t, table=table, lam=lam,
                                 track_mutations=track_mutations)

        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                results = list(pool.map(job, selected))
        else:
            results = [job(c) for c in selected]

        sizes = [c.data_size for c in selected]
        params, arch = aggregate_states([(p, a) for p, a, _ in results], sizes, agg_total)
        for arr in params.arrays.values():
            if not np.all(np.isfinite(arr)):
                raise NumericsError(f"non-finite global parameters after round {t}")
        for _, _, cs in results:
            stats.absorb(cs.update_counts)

        rec = MetricsRecord(
            round=t,
            train_loss=float(np.mean([cs.train_loss for _, _, cs in results])),
            val_loss=float(np.mean([cs.val_loss for _, _, cs in results])),
            wall_clock_s=time.perf_counter() - t0,
        )
        if table is not None:
            rec.expected_latency_ms = expected_latency(arch, table)[0]
        if eval_every and (t + 1) % eval_every == 0:
            pooled = np.concatenate([c.test_idx for c in clients])
            rec.fed_acc = _supernet_accuracy(model, params, arch, dataset, pooled)
            rec.mean_local_acc = float(np.mean([
                _supernet_accuracy(model, params, arch, dataset, c.test_idx)
                for c in clients]))
        metrics.append(rec)

    return SearchResult(params=params, arch=arch, metrics=metrics, stats=stats)


# ---------------------------------------------------------------------------
# plain FedAvg retraining of a derived net

def _normal_local_epochs(net: NormalNet, params: ParamSet, idx, dataset, hyper,
                         lr: float, rng, epochs: int) -> float:
    sgd = SgdMomentumState(momentum=hyper.momentum, weight_decay=hyper.weight_decay)
    loss_sum = n = 0.0
    for _ in range(epochs):
        order = idx[rng.permutation(len(idx))]
        for batch_idx in _batches(order, hyper.batch_size):
            x = dataset.examples[batch_idx]
            y = dataset.labels[batch_idx]
            logits, caches = net.forward(params, x)
            loss, glogits = cross_entropy(logits, y)
            grads = net.backward(caches, glogits)
            sgd_momentum_step(params.arrays, grads, sgd, lr)
            loss_sum += loss * len(batch_idx)
            n += len(batch_idx)
    return loss_sum / n if n else float("nan")


def retrain_fedavg(net: NormalNet, clients: list[ClientState], dataset, hyper: TrainHyper,
                   rounds: int, seed: int, threads: int = 1,
                   include_val: bool = True) -> tuple[ParamSet, list[MetricsRecord]]:
    """Scratch FedAvg on the derived net's weights only (no gates, no logits).

    Local training uses the client's train shard, plus its validation shard by
    default since no architecture update consumes it anymore.
    """
    params = net.init_params(seed)
    metrics: list[MetricsRecord] = []
    t0 = time.perf_counter()
    for t in range(rounds):
        lr = cosine_lr(t, rounds, hyper.lr_w)

        def job(client):
            local = params.copy()
            idx = client.train_idx
            if include_val:
                idx = np.concatenate([client.train_idx, client.val_idx])
            rng = np.random.default_rng([int(seed), int(client.client_id), t, 0x7E])
            loss = _normal_local_epochs(net, local, idx, dataset, hyper, lr, rng,
                                        hyper.local_epochs)
            return local, loss

        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                results = list(pool.map(job, clients))
        else:
            results = [job(c) for c in clients]
        sizes = [c.data_size for c in clients]
        agg = aggregate([p.arrays for p, _ in results], sizes)
        params = ParamSet(agg)
        metrics.append(MetricsRecord(
            round=t,
            train_loss=float(np.mean([loss for _, loss in results])),
            wall_clock_s=time.perf_counter() - t0,
        ))
    return params, metrics


@dataclass
class EvalResult:
    fed_acc: float
    mean_local_acc: float
    per_client: list[float]


def evaluate(net: NormalNet, params: ParamSet, clients: list[ClientState], dataset,
             local_epochs: int, hyper: TrainHyper, seed: int = 0) -> EvalResult:
    """Pooled-test accuracy of the global model plus the mean local accuracy
    after `local_epochs` of client-side fine-tuning on a copy."""
    for c in clients:
        if len(c.test_idx) == 0:
            raise ValueError(f"client {c.client_id} has an empty test shard")
    pooled = np.concatenate([c.test_idx for c in clients])
    hits = 0
    for batch_idx in _batches(pooled, 256):
        logits = net.predict_logits(params, dataset.examples[batch_idx])
        hits += int((logits.argmax(axis=1) == dataset.labels[batch_idx]).sum())
    fed_acc = hits / len(pooled)

    per_client = []
    for c in clients:
        local = params.copy()
        if local_epochs > 0:
            rng = np.random.default_rng([int(seed), int(c.client_id), 0xE7A1])
            _normal_local_epochs(net, local, c.train_idx, dataset, hyper,
                                 hyper.lr_w, rng, local_epochs)
        logits = net.predict_logits(local, dataset.examples[c.test_idx])
        per_client.append(accuracy(logits, dataset.labels[c.test_idx]))
    return EvalResult(fed_acc=fed_acc, mean_local_acc=float(np.mean(per_client)),
                      per_client=per_client)


def write_metrics_csv(path, records: list[MetricsRecord]) -> None:
    # column order is frozen; downstream plotting depends on it
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_COLUMNS)
        for rec in records:
            writer.writerow(rec.row())
