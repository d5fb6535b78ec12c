"""Shared test utilities: finite-difference oracles and tiny model builders.

Gradient checks use central differences. Draws whose forward pass puts a
pre-activation within `KINK_MARGIN` of a ReLU kink are re-drawn (the analytic
gradient is one-sided there and no finite-difference step is trustworthy);
the replacement seed is deterministic.
"""

import numpy as np

from fednas.losses import cross_entropy
from fednas.ops import OpKind, init_op_params, op_backward, op_forward
from fednas.supernet import SuperNetModel, kink_margin

KINK_MARGIN = 1e-3

ALL_CANDIDATE_KINDS = [
    OpKind("identity"),
    OpKind("zero"),
    OpKind("avgpool", kernel=3),
    OpKind("conv", kernel=3, channels=3),
    OpKind("conv", kernel=5, channels=3),
    OpKind("dwsep", kernel=3, channels=3, expansion=1),
    OpKind("dwsep", kernel=3, channels=3, expansion=3),
    OpKind("dwsep", kernel=5, channels=3, expansion=3),
]


def rel_err(analytic: np.ndarray, fd: np.ndarray) -> float:
    analytic = np.asarray(analytic, dtype=float).ravel()
    fd = np.asarray(fd, dtype=float).ravel()
    denom = max(np.linalg.norm(fd), np.linalg.norm(analytic), 1e-12)
    return float(np.linalg.norm(analytic - fd) / denom)


def directional_fd(loss_fn, arr: np.ndarray, direction: np.ndarray, eps: float = 1e-4) -> float:
    """Central-difference derivative of loss_fn along `direction` in `arr`
    (arr is temporarily modified in place)."""
    orig = arr.copy()
    arr += eps * direction
    lp = loss_fn()
    arr[...] = orig - eps * direction
    lm = loss_fn()
    arr[...] = orig
    return (lp - lm) / (2 * eps)


def _op_kink_margin(op: OpKind, cache) -> float:
    if op.kind != "dwsep":
        return np.inf
    return min(float(np.min(np.abs(cache["h1"]))), float(np.min(np.abs(cache["h2"]))))


def check_op_gradient(op: OpKind, seed: int, in_shape=(3, 5, 5), batch=2,
                      n_directions=3, eps=1e-4):
    """Compare op_backward against directional central differences.

    Returns the worst relative error over input and all parameter tensors,
    or None when the draw sits on a ReLU kink and was skipped.
    """
    rng = np.random.default_rng([seed, 0xF0D])
    if op.kind == "dense":
        x = rng.normal(size=(batch, in_shape[0]))
        shape = (in_shape[0],)
    else:
        x = rng.normal(size=(batch,) + in_shape)
        shape = in_shape
    params = init_op_params(op, shape, rng)
    for k in params:
        if k.endswith("b"):
            params[k] = rng.normal(0.0, 0.1, params[k].shape)
    y, cache = op_forward(op, params, x)
    if _op_kink_margin(op, cache) < KINK_MARGIN:
        return None
    gy = rng.normal(size=y.shape)
    gx, gparams = op_backward(op, cache, gy)

    def loss():
        out, _ = op_forward(op, params, x)
        return float(np.sum(gy * out))

    worst = 0.0
    tensors = [("<input>", x, gx)] + [(k, params[k], gparams[k]) for k in gparams]
    for _, arr, grad in tensors:
        for _ in range(n_directions):
            d = rng.normal(size=arr.shape)
            d /= max(np.linalg.norm(d), 1e-12)
            fd = directional_fd(loss, arr, d, eps)
            ana = float(np.sum(grad * d))
            worst = max(worst, rel_err(np.array([ana]), np.array([fd])))
    return worst


def check_cross_entropy_gradient(seed: int, batch=4, classes=5, eps=1e-5):
    rng = np.random.default_rng([seed, 0xCE])
    logits = rng.normal(size=(batch, classes))
    labels = rng.integers(0, classes, size=batch)
    _, grad = cross_entropy(logits, labels)
    worst = 0.0
    for _ in range(3):
        d = rng.normal(size=logits.shape)
        d /= np.linalg.norm(d)

        def loss():
            return cross_entropy(logits, labels)[0]

        fd = directional_fd(loss, logits, d, eps)
        ana = float(np.sum(grad * d))
        worst = max(worst, rel_err(np.array([ana]), np.array([fd])))
    return worst


def tiny_supernet(num_layers=2, channels=3, hw=4, num_classes=3, candidates=None):
    cands = candidates or [
        OpKind("zero"),
        OpKind("identity"),
        OpKind("dwsep", kernel=3, channels=channels, expansion=1),
    ]
    return SuperNetModel(
        in_shape=(1, hw, hw), num_classes=num_classes,
        layer_candidates=[list(cands) for _ in range(num_layers)],
        stem_channels=channels)


def mixture_kink_margin(model, params, arch, x):
    _, caches = model.forward_mixture(params, arch, x)
    return kink_margin(caches)


def small_federation(num_clients=2, num_classes=3, per_class=24, difficulty=0.3,
                     hw=6, num_layers=2, channels=4, seed=0, tags=None, hardware=None):
    """A tiny iid federation everything federated is tested on."""
    from fednas.data import generate_synthetic, iid_partition
    from fednas.federation import TrainHyper, clients_from_plan

    dataset = generate_synthetic(num_classes, (1, hw, hw), per_class, difficulty, seed)
    plan = iid_partition(dataset, num_clients, seed)
    clients = clients_from_plan(plan, tags=tags, hardware=hardware)
    cands = [
        OpKind("zero"),
        OpKind("identity"),
        OpKind("dwsep", kernel=3, channels=channels, expansion=1),
    ]
    model = SuperNetModel(in_shape=(1, hw, hw), num_classes=num_classes,
                          layer_candidates=[list(cands) for _ in range(num_layers)],
                          stem_channels=channels)
    hyper = TrainHyper(local_epochs=1, batch_size=8, lr_w=0.05, alpha_lr=3e-3)
    return model, dataset, clients, hyper
