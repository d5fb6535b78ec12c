"""Cluster-wise supernet refinement.

After a full federated search converges, clients are grouped by a volunteered
data tag (or by hardware profile). Each group inherits the global checkpoint
and re-runs the search loop among its own members only, optionally with a
group-specific latency table in the architecture loss, then derives its own
discrete net. The from-scratch variant of the same loop exists as the
baseline that quantifies what inheritance buys.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .federation import ClientState, SearchResult, TrainHyper, run_search
from .supernet import ArchParams, NormalNet, ParamSet, SuperNetModel, derive_normal_net


@dataclass
class ClusterSpec:
    """A partition of client ids into named groups."""

    groups: list[list[int]]
    labels: list[str]
    hardware: list[str] = field(default_factory=list)

    def validate(self, client_ids) -> None:
        flat = [k for g in self.groups for k in g]
        if sorted(flat) != sorted(client_ids):
            raise ConfigError("cluster groups must form a disjoint cover of the clients")
        if any(not g for g in self.groups):
            raise ConfigError("cluster groups must be non-empty")


@dataclass
class GroupResult:
    group_id: int
    label: str
    params: ParamSet
    arch: ArchParams
    net: NormalNet
    net_params: ParamSet
    choices: list[int]
    metrics: list


def split_clusters(clients: list[ClientState], key: str = "tag") -> ClusterSpec:
    """Group clients by their tag or hardware profile. Groups are ordered by
    smallest member id; members are sorted."""
    if key not in ("tag", "hardware"):
        raise ConfigError(f"cluster key must be 'tag' or 'hardware', got {key!r}")
    by_value: dict[str, list[int]] = {}
    for c in clients:
        value = getattr(c, key)
        if not value:
            raise ConfigError(f"client {c.client_id} is missing a {key}")
        by_value.setdefault(value, []).append(c.client_id)
    items = sorted(by_value.items(), key=lambda kv: min(kv[1]))
    groups = [sorted(members) for _, members in items]
    labels = [value for value, _ in items]
    hardware = []
    if key == "hardware":
        hardware = list(labels)
    else:
        for _, members in items:
            profiles = {c.hardware for c in clients if c.client_id in members}
            hardware.append(profiles.pop() if len(profiles) == 1 else "")
    return ClusterSpec(groups=groups, labels=labels, hardware=hardware)


def _run_groups(model: SuperNetModel, spec: ClusterSpec, clients, dataset,
                hyper: TrainHyper, rounds: int, seed: int, tables=None,
                lam: float = 0.0, init_params=None, init_arch=None,
                strict_total=None, threads: int = 1) -> list[GroupResult]:
    spec.validate([c.client_id for c in clients])
    by_id = {c.client_id: c for c in clients}
    out = []
    for gid, (members, label) in enumerate(zip(spec.groups, spec.labels)):
        group_clients = [by_id[k] for k in members]
        table = None
        if tables:
            profile = spec.hardware[gid] if gid < len(spec.hardware) and spec.hardware[gid] else label
            if profile not in tables:
                raise ConfigError(f"no latency table for profile {profile!r} (group {label!r})")
            table = tables[profile]
        agg_total = None
        if strict_total is not None:
            # alternative weighting: within-group updates divided by the
            # all-clients data total instead of the group total (shrinks the
            # average; kept behind a flag for comparison)
            agg_total = strict_total
        if rounds > 0:
            result: SearchResult = run_search(
                model, group_clients, dataset, hyper, rounds,
                seed=int(np.random.default_rng([seed, 0xC1, gid]).integers(2 ** 31)),
                init_params=init_params, init_arch=init_arch,
                table=table, lam=lam, agg_total=agg_total, threads=threads)
            params, arch, metrics = result.params, result.arch, result.metrics
        else:
            params = init_params.copy() if init_params is not None else model.init_params(seed)
            arch = init_arch.copy() if init_arch is not None else model.init_arch()
            metrics = []
        net, net_params, choices = derive_normal_net(model, params, arch)
        out.append(GroupResult(group_id=gid, label=label, params=params, arch=arch,
                               net=net, net_params=net_params, choices=choices,
                               metrics=metrics))
    return out


def run_cluster_refinement(model: SuperNetModel, checkpoint_params: ParamSet,
                           checkpoint_arch: ArchParams, spec: ClusterSpec,
                           clients, dataset, hyper: TrainHyper, rounds: int,
                           seed: int, tables=None, lam: float = 0.0,
                           strict_global_weighting: bool = False,
                           threads: int = 1) -> list[GroupResult]:
    """Refine each group's supernet starting from the inherited checkpoint."""
    strict_total = None
    if strict_global_weighting:
        strict_total = sum(c.data_size for c in clients)
    return _run_groups(model, spec, clients, dataset, hyper, rounds, seed,
                       tables=tables, lam=lam, init_params=checkpoint_params,
                       init_arch=checkpoint_arch, strict_total=strict_total,
                       threads=threads)


def naive_group_search(model: SuperNetModel, spec: ClusterSpec, clients, dataset,
                       hyper: TrainHyper, rounds: int, seed: int, tables=None,
                       lam: float = 0.0, threads: int = 1) -> list[GroupResult]:
    """Same per-group loop but from fresh initialization (no inheritance)."""
    return _run_groups(model, spec, clients, dataset, hyper, rounds, seed,
                       tables=tables, lam=lam, init_params=None, init_arch=None,
                       threads=threads)


# ---------------------------------------------------------------------------
# cluster spec file: CSV mapping client_id -> (tag, hardware)

def load_client_labels(path) -> dict[int, tuple[str, str]]:
    out = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        expected = {"client_id", "tag", "hardware"}
        if reader.fieldnames is None or not expected.issubset(reader.fieldnames):
            raise ConfigError(f"cluster spec {path} must have columns {sorted(expected)}")
        for row in reader:
            out[int(row["client_id"])] = (row["tag"], row["hardware"])
    if not out:
        raise ConfigError(f"cluster spec {path} is empty")
    return out


def save_client_labels(path, labels: dict[int, tuple[str, str]]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["client_id", "tag", "hardware"])
        for cid in sorted(labels):
            tag, hw = labels[cid]
            writer.writerow([cid, tag, hw])
