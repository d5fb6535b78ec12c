"""Command-line front door.

Subcommands: search, cluster, derive, retrain, eval, selftest. Exit codes:
0 success, 1 configuration error, 2 runtime divergence, 3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import selftest as selftest_mod
from .checkpoint import (
    Checkpoint,
    file_digest,
    load_checkpoint,
    load_normal_net,
    save_checkpoint,
    save_normal_net,
)
from .clustering import load_client_labels, run_cluster_refinement, split_clusters
from .config import ExperimentConfig
from .data import (
    generate_synthetic,
    iid_partition,
    load_dataset,
    partition_noniid,
    three_group_scheme,
)
from .errors import CheckpointError, ConfigError, NumericsError
from .federation import (
    clients_from_plan,
    evaluate,
    retrain_fedavg,
    run_search,
    write_metrics_csv,
)
from .latency import load_latency_tables
from .supernet import count_flops_params, derive_normal_net


def _build_dataset(cfg: ExperimentConfig):
    if cfg.dataset_path:
        return load_dataset(cfg.dataset_path)
    return generate_synthetic(cfg.num_classes, cfg.input_shape, cfg.per_class,
                              cfg.difficulty, cfg.seed)


def _build_clients(cfg: ExperimentConfig, dataset, labels=None):
    if cfg.partition == "iid":
        plan = iid_partition(dataset, cfg.num_clients, cfg.seed, cfg.test_fraction)
    else:
        scheme = cfg.scheme or three_group_scheme(dataset.num_classes, cfg.num_clients)
        scheme = [(list(c), list(k)) for c, k in scheme]
        plan = partition_noniid(dataset, cfg.num_clients, scheme, cfg.seed, cfg.test_fraction)
    tags = hardware = None
    if labels:
        tags = [labels.get(k, ("", ""))[0] for k in range(cfg.num_clients)]
        hardware = [labels.get(k, ("", ""))[1] for k in range(cfg.num_clients)]
    return clients_from_plan(plan, tags=tags, hardware=hardware)


def _load_tables(cfg: ExperimentConfig, model):
    if cfg.latency_weight <= 0:
        return None, None
    if not Path(cfg.latency_table_path).exists():
        raise ConfigError(f"latency table file not found: {cfg.latency_table_path}")
    tables = load_latency_tables(cfg.latency_table_path)
    profile = cfg.latency_profile or sorted(tables)[0]
    if profile not in tables:
        raise ConfigError(f"latency profile {profile!r} not present in {cfg.latency_table_path}")
    tables[profile].validate_for(model)
    return tables, tables[profile]


def _write_summary(out_dir: Path, cfg: ExperimentConfig, extra: dict):
    summary = {"config_hash": cfg.config_hash(), "seed": cfg.seed}
    summary.update(extra)
    with open(out_dir / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)


def _derive_report(model_like, net, net_params, choices=None):
    flops, params = count_flops_params(net)
    report = {"flops_mac": int(flops), "params": int(params),
              "layers": [op.label if op is not None else None for op in net.ops]}
    if choices is not None:
        report["choices"] = list(choices)
    return report


def cmd_search(args) -> int:
    cfg = _apply_overrides(ExperimentConfig.from_json(args.config), args)
    dataset = _build_dataset(cfg)
    clients = _build_clients(cfg, dataset)
    model = cfg.build_model()
    _, table = _load_tables(cfg, model)
    result = run_search(model, clients, dataset, cfg.hyper(), cfg.rounds, cfg.seed,
                        table=table, lam=cfg.latency_weight, threads=cfg.threads,
                        eval_every=cfg.eval_every)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = out_dir / "checkpoint.bin"
    save_checkpoint(ckpt_path, Checkpoint(model=model, params=result.params,
                                          arch=result.arch, round=cfg.rounds,
                                          seed=cfg.seed, config_hash=cfg.config_hash()))
    write_metrics_csv(out_dir / "metrics.csv", result.metrics)
    net, net_params, choices = derive_normal_net(model, result.params, result.arch)
    final = result.metrics[-1] if result.metrics else None
    _write_summary(out_dir, cfg, {
        "rounds": cfg.rounds,
        "checkpoint": ckpt_path.name,
        "checkpoint_sha256": file_digest(ckpt_path),
        "final_train_loss": final.train_loss if final else None,
        "final_val_loss": final.val_loss if final else None,
        "derived": _derive_report(model, net, net_params, choices),
    })
    print(f"search: wrote {ckpt_path} (sha256 {file_digest(ckpt_path)[:12]})")
    return 0


def cmd_cluster(args) -> int:
    cfg = _apply_overrides(ExperimentConfig.from_json(args.config), args)
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.model
    cfg_model = cfg.build_model()
    if model.to_dict() != cfg_model.to_dict():
        raise CheckpointError("checkpoint topology does not match the config")
    if not cfg.cluster_spec_path:
        raise ConfigError("config field 'cluster_spec_path' is required for clustering")
    labels = load_client_labels(cfg.cluster_spec_path)
    dataset = _build_dataset(cfg)
    clients = _build_clients(cfg, dataset, labels=labels)
    spec = split_clusters(clients, key=cfg.cluster_key)
    tables = None
    if cfg.latency_weight > 0:
        tables, _ = _load_tables(cfg, model)
    results = run_cluster_refinement(
        model, ckpt.params, ckpt.arch, spec, clients, dataset, cfg.hyper(),
        cfg.cluster_rounds, cfg.seed, tables=tables, lam=cfg.latency_weight,
        strict_global_weighting=args.strict_global_weighting, threads=cfg.threads)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for res in results:
        gdir = out_dir / f"group_{res.label}"
        gdir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(gdir / "checkpoint.bin",
                        Checkpoint(model=model, params=res.params, arch=res.arch,
                                   round=cfg.cluster_rounds, seed=cfg.seed,
                                   config_hash=cfg.config_hash()))
        save_normal_net(gdir / "normal_net.bin", res.net, res.net_params,
                        seed=cfg.seed, config_hash=cfg.config_hash())
        (gdir / "normal_net.txt").write_text(res.net.describe() + "\n")
        write_metrics_csv(gdir / "metrics.csv", res.metrics)
        with open(gdir / "report.json", "w") as fh:
            json.dump(_derive_report(model, res.net, res.net_params, res.choices),
                      fh, indent=2, sort_keys=True)
        print(f"cluster: group {res.label!r} -> {gdir}")
    return 0


def cmd_derive(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    net, net_params, choices = derive_normal_net(ckpt.model, ckpt.params, ckpt.arch)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_normal_net(out_dir / "normal_net.bin", net, net_params,
                    seed=ckpt.seed, config_hash=ckpt.config_hash)
    (out_dir / "normal_net.txt").write_text(net.describe() + "\n")
    report = _derive_report(ckpt.model, net, net_params, choices)
    with open(out_dir / "report.json", "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    print(f"derive: {report['flops_mac']} MACs, {report['params']} params -> "
          f"{out_dir / 'normal_net.bin'}")
    return 0


def cmd_retrain(args) -> int:
    cfg = _apply_overrides(ExperimentConfig.from_json(args.config), args)
    net, _, _ = load_normal_net(args.net)
    dataset = _build_dataset(cfg)
    clients = _build_clients(cfg, dataset)
    params, metrics = retrain_fedavg(net, clients, dataset, cfg.retrain_hyper(),
                                     cfg.retrain_rounds, cfg.seed, threads=cfg.threads)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_normal_net(out_dir / "retrained.bin", net, params, seed=cfg.seed,
                    config_hash=cfg.config_hash())
    write_metrics_csv(out_dir / "metrics.csv", metrics)
    result = evaluate(net, params, clients, dataset, cfg.eval_local_epochs,
                      cfg.retrain_hyper(), seed=cfg.seed)
    _write_summary(out_dir, cfg, {
        "rounds": cfg.retrain_rounds,
        "fed_acc": result.fed_acc,
        "mean_local_acc": result.mean_local_acc,
    })
    print(f"retrain: fed_acc={result.fed_acc:.4f} mean_local_acc={result.mean_local_acc:.4f}")
    return 0


def cmd_eval(args) -> int:
    cfg = _apply_overrides(ExperimentConfig.from_json(args.config), args)
    net, params, _ = load_normal_net(args.net)
    dataset = _build_dataset(cfg)
    clients = _build_clients(cfg, dataset)
    result = evaluate(net, params, clients, dataset, cfg.eval_local_epochs,
                      cfg.hyper(), seed=cfg.seed)
    print(f"federated averaged accuracy: {result.fed_acc:.4f}")
    print(f"mean local accuracy:         {result.mean_local_acc:.4f}")
    print("client  local_acc")
    for c, acc in zip(clients, result.per_client):
        print(f"{c.client_id:>6}  {acc:.4f}")
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "eval.json", "w") as fh:
        json.dump({"config_hash": cfg.config_hash(), "fed_acc": result.fed_acc,
                   "mean_local_acc": result.mean_local_acc,
                   "per_client": result.per_client}, fh, indent=2, sort_keys=True)
    return 0


def cmd_selftest(args) -> int:
    return selftest_mod.run(verbose=True)


def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "out_dir", None):
        cfg.out_dir = args.out_dir
    if getattr(args, "threads", None):
        cfg.threads = args.threads
    cfg.validate()
    return cfg


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fednas",
                                     description="Federated architecture search simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, config=True, checkpoint=False, net=False):
        if config:
            p.add_argument("--config", required=True, help="experiment config (JSON)")
        if checkpoint:
            p.add_argument("--checkpoint", required=True, help="supernet checkpoint file")
        if net:
            p.add_argument("--net", required=True, help="derived-net file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out-dir", default=None)
        p.add_argument("--threads", type=int, default=None)

    p = sub.add_parser("search", help="run the federated architecture search")
    add_common(p)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("cluster", help="refine per client cluster from a checkpoint")
    add_common(p, checkpoint=True)
    p.add_argument("--strict-global-weighting", action="store_true",
                   help="normalize group aggregation by the all-clients data total")
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("derive", help="extract the discrete net from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out-dir", default="runs/derive")
    p.set_defaults(func=cmd_derive)

    p = sub.add_parser("retrain", help="FedAvg scratch retraining of a derived net")
    add_common(p, net=True)
    p.set_defaults(func=cmd_retrain)

    p = sub.add_parser("eval", help="evaluate a derived net on the federation")
    add_common(p, net=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("selftest", help="run fast built-in sanity checks")
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except NumericsError as exc:
        print(f"numerical divergence: {exc}", file=sys.stderr)
        return 2
    except (CheckpointError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
