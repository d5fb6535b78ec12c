"""Fast built-in sanity checks (a light subset of the pytest suite)."""

from __future__ import annotations

import math
import tempfile
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, file_digest, load_checkpoint, save_checkpoint
from .config import ExperimentConfig
from .data import generate_synthetic, iid_partition
from .federation import aggregate, clients_from_plan, run_search
from .losses import cross_entropy
from .ops import OpKind, init_op_params, op_backward, op_forward
from .supernet import ArchParams, sample_gates, softmax_probs


def _check_op_gradient() -> bool:
    rng = np.random.default_rng(7)
    op = OpKind("dwsep", kernel=3, channels=3, expansion=2)
    x = rng.normal(size=(2, 3, 4, 4))
    params = init_op_params(op, (3, 4, 4), rng)
    y, cache = op_forward(op, params, x)
    gy = rng.normal(size=y.shape)
    gx, _ = op_backward(op, cache, gy)
    eps = 1e-5
    flat = x.ravel()
    for i in rng.choice(flat.size, size=8, replace=False):
        orig = flat[i]
        flat[i] = orig + eps
        yp, _ = op_forward(op, params, x)
        flat[i] = orig - eps
        ym, _ = op_forward(op, params, x)
        flat[i] = orig
        fd = float(np.sum((yp - ym) * gy)) / (2 * eps)
        if abs(fd - gx.ravel()[i]) > 1e-4 * max(1.0, abs(fd)):
            return False
    return True


def _check_cross_entropy() -> bool:
    logits = np.zeros((3, 10))
    loss, grad = cross_entropy(logits, np.array([0, 5, 9]))
    return abs(loss - math.log(10)) < 1e-12 and np.allclose(grad.sum(axis=1), 0, atol=1e-12)


def _check_aggregation() -> bool:
    u = [{"p": np.array([0.0])}, {"p": np.array([4.0])}]
    got = aggregate(u, [1, 3])["p"][0]
    return abs(got - 3.0) < 1e-12


def _check_gate_stats() -> bool:
    arch = ArchParams([np.zeros(4)])
    counts = np.zeros(4)
    for s in range(10000):
        counts[sample_gates(arch, s).indices[0]] += 1
    l1 = float(np.abs(counts / 10000 - softmax_probs(np.zeros(4))).sum())
    return l1 < 0.04


def _check_determinism() -> bool:
    cfg = ExperimentConfig(num_classes=3, input_shape=(1, 6, 6), per_class=12,
                           num_clients=2, rounds=1, local_epochs=1, batch_size=8,
                           num_layers=2, stem_channels=4, partition="iid",
                           candidates=["zero", "identity", "dwsep_k3_e1"])
    dataset = generate_synthetic(cfg.num_classes, cfg.input_shape, cfg.per_class, 0.3, 0)
    clients = clients_from_plan(iid_partition(dataset, cfg.num_clients, 0))
    model = cfg.build_model()
    digests = []
    for _ in range(2):
        result = run_search(model, clients, dataset, cfg.hyper(), rounds=1, seed=3)
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "ck.bin"
            save_checkpoint(path, Checkpoint(model=model, params=result.params,
                                             arch=result.arch, round=1, seed=3))
            loaded = load_checkpoint(path)
            save_checkpoint(Path(tmp) / "ck2.bin",
                            Checkpoint(model=loaded.model, params=loaded.params,
                                       arch=loaded.arch, round=1, seed=3))
            if file_digest(path) != file_digest(Path(tmp) / "ck2.bin"):
                return False
            digests.append(file_digest(path))
    return digests[0] == digests[1]


CHECKS = [
    ("candidate-op gradient vs finite differences", _check_op_gradient),
    ("cross-entropy analytic values", _check_cross_entropy),
    ("weighted aggregation arithmetic", _check_aggregation),
    ("gate sampling statistics", _check_gate_stats),
    ("run determinism and checkpoint round-trip", _check_determinism),
]


def run(verbose: bool = True) -> int:
    failed = 0
    for name, fn in CHECKS:
        ok = fn()
        failed += not ok
        if verbose:
            print(f"[{'PASS' if ok else 'FAIL'}] {name}")
    if verbose:
        print("selftest:", "all checks passed" if not failed else f"{failed} check(s) failed")
    return 0 if failed == 0 else 2
