"""Binary-gated over-parameterized network.

A SuperNetModel is a chain: fixed conv stem -> L searchable layers (each a
set of candidate ops over the same feature shape) -> global average pool ->
dense classifier. Weight training samples one gate per layer; architecture
training uses the full probability mixture so the logits gradient is exact.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CheckpointError
from .losses import cross_entropy
from .ops import (
    OpKind,
    check_finite,
    conv2d,
    conv2d_backward,
    init_op_params,
    op_backward,
    op_flops,
    op_forward,
    op_param_count,
    param_shapes,
    relu,
)


class ParamSet:
    """Named float64 arrays with a stable registry order."""

    def __init__(self, arrays: dict[str, np.ndarray] | None = None):
        self.arrays: dict[str, np.ndarray] = dict(arrays or {})

    def copy(self) -> "ParamSet":
        return ParamSet({k: v.copy() for k, v in self.arrays.items()})

    def __getitem__(self, key):
        return self.arrays[key]

    def __setitem__(self, key, value):
        self.arrays[key] = value

    def __contains__(self, key):
        return key in self.arrays

    def keys(self):
        return self.arrays.keys()

    def items(self):
        return self.arrays.items()

    def total_count(self) -> int:
        return sum(int(v.size) for v in self.arrays.values())

    def subset(self, prefix: str) -> dict[str, np.ndarray]:
        plen = len(prefix)
        return {k[plen:]: v for k, v in self.arrays.items() if k.startswith(prefix)}


class ArchParams:
    """Per-layer architecture logits."""

    def __init__(self, logits: list[np.ndarray]):
        self.logits = [np.asarray(a, dtype=float) for a in logits]

    def copy(self) -> "ArchParams":
        return ArchParams([a.copy() for a in self.logits])

    def __len__(self):
        return len(self.logits)

    def __getitem__(self, i):
        return self.logits[i]

    def as_dict(self) -> dict[str, np.ndarray]:
        return {f"alpha{i}": a for i, a in enumerate(self.logits)}

    @staticmethod
    def from_dict(d: dict[str, np.ndarray]) -> "ArchParams":
        return ArchParams([d[f"alpha{i}"] for i in range(len(d))])


@dataclass(frozen=True)
class GateSample:
    """One-hot candidate choice per layer plus the seed that generated it."""

    indices: tuple[int, ...]
    seed: int


def softmax_probs(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=float)
    check_finite(logits, "architecture logits")
    shifted = logits - logits.max()
    e = np.exp(shifted)
    return e / e.sum()


def _softmax_vjp(p: np.ndarray, gp: np.ndarray) -> np.ndarray:
    # dp_j/da_i = p_j (delta_ij - p_i)
    return p * (gp - float(p @ gp))


def sample_gates(arch: ArchParams, seed: int) -> GateSample:
    rng = np.random.default_rng(seed)
    idx = []
    for logits in arch.logits:
        p = softmax_probs(logits)
        u = rng.random()
        i = int(np.searchsorted(np.cumsum(p), u, side="right"))
        idx.append(min(i, len(p) - 1))
    return GateSample(indices=tuple(idx), seed=seed)


def _downsample(x):
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"downsample needs even spatial extent, got {h}x{w}")
    return x.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))


def _downsample_backward(gy, in_shape):
    n, c, h, w = in_shape
    g = np.repeat(np.repeat(gy, 2, axis=2), 2, axis=3) / 4.0
    return g[:, :, :h, :w]


class SuperNetModel:
    """Chain supernet; owns topology and parameter registry, not the values."""

    def __init__(self, in_shape, num_classes, layer_candidates, stem_channels=8,
                 downsample_after=()):
        self.in_shape = tuple(int(v) for v in in_shape)
        self.num_classes = int(num_classes)
        self.stem_channels = int(stem_channels)
        self.downsample_after = tuple(sorted(int(i) for i in downsample_after))
        self.layer_candidates: list[list[OpKind]] = [list(c) for c in layer_candidates]
        if any(len(c) < 2 for c in self.layer_candidates):
            raise ValueError("each searchable layer needs >= 2 candidates")
        for cands in self.layer_candidates:
            for op in cands:
                if op.kind in ("conv", "dwsep") and op.channels != self.stem_channels:
                    raise ValueError(
                        f"candidate {op.label} has {op.channels} channels, stem has {self.stem_channels}")
        c, h, w = self.in_shape
        self.layer_in_shapes: list[tuple] = []
        cur = (self.stem_channels, h, w)
        for i in range(len(self.layer_candidates)):
            self.layer_in_shapes.append(cur)
            if i in self.downsample_after:
                cur = (cur[0], cur[1] // 2, cur[2] // 2)
        self.final_shape = cur

    @property
    def num_layers(self) -> int:
        return len(self.layer_candidates)

    # -- registry ----------------------------------------------------------

    def param_registry(self) -> dict[str, tuple]:
        c_in = self.in_shape[0]
        reg: dict[str, tuple] = {
            "stem.w": (self.stem_channels, c_in, 3, 3),
            "stem.b": (self.stem_channels,),
        }
        for i, cands in enumerate(self.layer_candidates):
            for j, op in enumerate(cands):
                for name, shape in param_shapes(op, self.layer_in_shapes[i]).items():
                    reg[f"layer{i}.cand{j}.{name}"] = shape
        reg["classifier.w"] = (self.stem_channels, self.num_classes)
        reg["classifier.b"] = (self.num_classes,)
        return reg

    def init_params(self, seed: int) -> ParamSet:
        rng = np.random.default_rng([int(seed), 0x5EED])
        ps = ParamSet()
        c_in = self.in_shape[0]
        ps["stem.w"] = rng.normal(0.0, np.sqrt(2.0 / (9 * c_in)), (self.stem_channels, c_in, 3, 3))
        ps["stem.b"] = np.zeros(self.stem_channels)
        for i, cands in enumerate(self.layer_candidates):
            for j, op in enumerate(cands):
                for name, arr in init_op_params(op, self.layer_in_shapes[i], rng).items():
                    ps[f"layer{i}.cand{j}.{name}"] = arr
        ps["classifier.w"] = rng.normal(0.0, np.sqrt(2.0 / self.stem_channels),
                                        (self.stem_channels, self.num_classes))
        ps["classifier.b"] = np.zeros(self.num_classes)
        return ps

    def init_arch(self) -> ArchParams:
        return ArchParams([np.zeros(len(c)) for c in self.layer_candidates])

    def w_registry_keys(self) -> set[str]:
        return set(self.param_registry().keys())

    # -- shared stem / head ------------------------------------------------

    def _stem_forward(self, params: ParamSet, x):
        pre, win = conv2d(x, params["stem.w"], params["stem.b"])
        return relu(pre), {"pre": pre, "win": win, "x_shape": x.shape, "w": params["stem.w"]}

    def _stem_backward(self, cache, gy):
        gpre = gy * (cache["pre"] > 0)
        gx, gw, gb = conv2d_backward(cache["win"], cache["w"], cache["x_shape"], gpre)
        return gx, {"stem.w": gw, "stem.b": gb}

    def _head_forward(self, params: ParamSet, feat):
        pooled = feat.mean(axis=(2, 3))
        logits = pooled @ params["classifier.w"] + params["classifier.b"]
        return logits, {"pooled": pooled, "feat_shape": feat.shape, "w": params["classifier.w"]}

    def _head_backward(self, cache, glogits):
        gw = cache["pooled"].T @ glogits
        gb = glogits.sum(axis=0)
        gpooled = glogits @ cache["w"].T
        n, c, h, w = cache["feat_shape"]
        gfeat = np.broadcast_to(gpooled[:, :, None, None] / (h * w), (n, c, h, w)).copy()
        return gfeat, {"classifier.w": gw, "classifier.b": gb}

    # -- sampled path (weight training) -------------------------------------

    def forward_sampled(self, params: ParamSet, gates: GateSample, x):
        if len(gates.indices) != self.num_layers:
            raise ValueError("gate sample does not match layer count")
        feat, stem_cache = self._stem_forward(params, x)
        layer_caches = []
        for i, n in enumerate(gates.indices):
            op = self.layer_candidates[i][n]
            y, cache = op_forward(op, params.subset(f"layer{i}.cand{n}."), feat)
            ds_shape = None
            if i in self.downsample_after:
                ds_shape = y.shape
                y = _downsample(y)
            layer_caches.append({"op": op, "index": n, "cache": cache, "ds_shape": ds_shape})
            feat = y
        logits, head_cache = self._head_forward(params, feat)
        return logits, {"stem": stem_cache, "layers": layer_caches, "head": head_cache}

    def backward_sampled(self, caches, grad_logits) -> dict[str, np.ndarray]:
        gfeat, grads = self._head_backward(caches["head"], grad_logits)
        for i in reversed(range(self.num_layers)):
            lc = caches["layers"][i]
            if lc["ds_shape"] is not None:
                gfeat = _downsample_backward(gfeat, lc["ds_shape"])
            gfeat, gp = op_backward(lc["op"], lc["cache"], gfeat)
            n = lc["index"]
            for name, g in gp.items():
                grads[f"layer{i}.cand{n}.{name}"] = g
        _, stem_grads = self._stem_backward(caches["stem"], gfeat)
        grads.update(stem_grads)
        return grads

    # -- mixture (architecture training) -------------------------------------

    def forward_mixture(self, params: ParamSet, arch: ArchParams, x):
        if len(arch) != self.num_layers:
            raise ValueError("arch params do not match layer count")
        feat, stem_cache = self._stem_forward(params, x)
        layer_caches = []
        for i, cands in enumerate(self.layer_candidates):
            p = softmax_probs(arch[i])
            outs, op_caches = [], []
            for j, op in enumerate(cands):
                y, cache = op_forward(op, params.subset(f"layer{i}.cand{j}."), feat)
                outs.append(y)
                op_caches.append(cache)
            mixed = np.zeros_like(outs[0])
            for pj, yj in zip(p, outs):
                mixed += pj * yj
            ds_shape = None
            if i in self.downsample_after:
                ds_shape = mixed.shape
                mixed = _downsample(mixed)
            layer_caches.append({
                "p": p, "outs": outs, "op_caches": op_caches, "ds_shape": ds_shape,
            })
            feat = mixed
        logits, head_cache = self._head_forward(params, feat)
        return logits, {"stem": stem_cache, "layers": layer_caches, "head": head_cache}

    def backward_mixture(self, caches, grad_logits):
        """Returns (alpha_grads per layer, param grads dict)."""
        gfeat, grads = self._head_backward(caches["head"], grad_logits)
        alpha_grads: list[np.ndarray | None] = [None] * self.num_layers
        for i in reversed(range(self.num_layers)):
            lc = caches["layers"][i]
            if lc["ds_shape"] is not None:
                gfeat = _downsample_backward(gfeat, lc["ds_shape"])
            p = lc["p"]
            gp = np.array([float(np.sum(gfeat * yj)) for yj in lc["outs"]])
            alpha_grads[i] = _softmax_vjp(p, gp)
            gx_total = None
            for j, op in enumerate(self.layer_candidates[i]):
                gx, gpar = op_backward(op, lc["op_caches"][j], gfeat)
                contrib = p[j] * gx
                gx_total = contrib if gx_total is None else gx_total + contrib
                for name, g in gpar.items():
                    grads[f"layer{i}.cand{j}.{name}"] = p[j] * g
            gfeat = gx_total
        _, stem_grads = self._stem_backward(caches["stem"], gfeat)
        grads.update(stem_grads)
        return alpha_grads, grads

    def to_dict(self) -> dict:
        return {
            "type": "supernet",
            "in_shape": list(self.in_shape),
            "num_classes": self.num_classes,
            "stem_channels": self.stem_channels,
            "downsample_after": list(self.downsample_after),
            "layers": [[op.to_dict() for op in cands] for cands in self.layer_candidates],
        }

    @staticmethod
    def from_dict(d: dict) -> "SuperNetModel":
        if d.get("type") != "supernet":
            raise CheckpointError("not a supernet description")
        return SuperNetModel(
            in_shape=d["in_shape"],
            num_classes=d["num_classes"],
            layer_candidates=[[OpKind.from_dict(o) for o in cands] for cands in d["layers"]],
            stem_channels=d["stem_channels"],
            downsample_after=d["downsample_after"],
        )


# ---------------------------------------------------------------------------
# latency loss

def expected_latency(arch: ArchParams, table) -> tuple[float, list[np.ndarray]]:
    """Probability-weighted latency in ms and its gradient w.r.t. the logits."""
    total = 0.0
    grads = []
    for i, logits in enumerate(arch.logits):
        p = softmax_probs(logits)
        lat = np.array([table.get(i, j) for j in range(len(p))])
        total += float(p @ lat)
        grads.append(_softmax_vjp(p, lat))
    return total, grads


def alpha_gradient(model: SuperNetModel, params: ParamSet, arch: ArchParams,
                   batch, labels, table=None, lam: float = 0.0):
    """Gradient of [CE(mixture) + lam * expected latency] w.r.t. the logits."""
    logits, caches = model.forward_mixture(params, arch, batch)
    ce, glogits = cross_entropy(logits, labels)
    alpha_grads, _ = model.backward_mixture(caches, glogits)
    info = {"ce": ce, "latency_ms": 0.0, "loss": ce}
    if lam != 0.0:
        if table is None:
            raise ValueError("latency weight > 0 requires a latency table")
        lat, glat = expected_latency(arch, table)
        info["latency_ms"] = lat
        info["loss"] = ce + lam * lat
        alpha_grads = [g + lam * gl for g, gl in zip(alpha_grads, glat)]
    for g in alpha_grads:
        check_finite(g, "alpha gradient")
    return alpha_grads, info


# ---------------------------------------------------------------------------
# derived (normal) network

class NormalNet:
    """Discrete architecture: one op per kept layer; zero-op layers removed."""

    def __init__(self, in_shape, num_classes, ops, stem_channels=8, downsample_after=()):
        self.in_shape = tuple(int(v) for v in in_shape)
        self.num_classes = int(num_classes)
        self.stem_channels = int(stem_channels)
        self.downsample_after = tuple(sorted(int(i) for i in downsample_after))
        # ops[i] is None where the supernet chose the zero op (layer removed)
        self.ops: list[OpKind | None] = list(ops)
        c, h, w = self.in_shape
        self.layer_in_shapes = []
        cur = (self.stem_channels, h, w)
        for i in range(len(self.ops)):
            self.layer_in_shapes.append(cur)
            if i in self.downsample_after:
                cur = (cur[0], cur[1] // 2, cur[2] // 2)

    @property
    def num_layers(self) -> int:
        return sum(1 for op in self.ops if op is not None)

    def param_registry(self) -> dict[str, tuple]:
        c_in = self.in_shape[0]
        reg = {"stem.w": (self.stem_channels, c_in, 3, 3), "stem.b": (self.stem_channels,)}
        for i, op in enumerate(self.ops):
            if op is None:
                continue
            for name, shape in param_shapes(op, self.layer_in_shapes[i]).items():
                reg[f"layer{i}.{name}"] = shape
        reg["classifier.w"] = (self.stem_channels, self.num_classes)
        reg["classifier.b"] = (self.num_classes,)
        return reg

    def init_params(self, seed: int) -> ParamSet:
        rng = np.random.default_rng([int(seed), 0x5EED])
        ps = ParamSet()
        c_in = self.in_shape[0]
        ps["stem.w"] = rng.normal(0.0, np.sqrt(2.0 / (9 * c_in)), (self.stem_channels, c_in, 3, 3))
        ps["stem.b"] = np.zeros(self.stem_channels)
        for i, op in enumerate(self.ops):
            if op is None:
                continue
            for name, arr in init_op_params(op, self.layer_in_shapes[i], rng).items():
                ps[f"layer{i}.{name}"] = arr
        ps["classifier.w"] = rng.normal(0.0, np.sqrt(2.0 / self.stem_channels),
                                        (self.stem_channels, self.num_classes))
        ps["classifier.b"] = np.zeros(self.num_classes)
        return ps

    # stem/head arithmetic is shared with SuperNetModel so a fixed gate path
    # and the derived net stay bit-identical
    def forward(self, params: ParamSet, x):
        feat, stem_cache = SuperNetModel._stem_forward(self, params, x)
        layer_caches = []
        for i, op in enumerate(self.ops):
            if op is not None:
                y, cache = op_forward(op, params.subset(f"layer{i}."), feat)
            else:
                y, cache = feat, None
            ds_shape = None
            if i in self.downsample_after:
                ds_shape = y.shape
                y = _downsample(y)
            layer_caches.append({"op": op, "cache": cache, "ds_shape": ds_shape})
            feat = y
        logits, head_cache = SuperNetModel._head_forward(self, params, feat)
        return logits, {"stem": stem_cache, "layers": layer_caches, "head": head_cache}

    def backward(self, caches, grad_logits) -> dict[str, np.ndarray]:
        gfeat, grads = SuperNetModel._head_backward(self, caches["head"], grad_logits)
        for i in reversed(range(len(self.ops))):
            lc = caches["layers"][i]
            if lc["ds_shape"] is not None:
                gfeat = _downsample_backward(gfeat, lc["ds_shape"])
            if lc["op"] is not None:
                gfeat, gp = op_backward(lc["op"], lc["cache"], gfeat)
                for name, g in gp.items():
                    grads[f"layer{i}.{name}"] = g
        _, stem_grads = SuperNetModel._stem_backward(self, caches["stem"], gfeat)
        grads.update(stem_grads)
        return grads

    def predict_logits(self, params: ParamSet, x):
        logits, _ = self.forward(params, x)
        return logits

    def to_dict(self) -> dict:
        return {
            "type": "normalnet",
            "in_shape": list(self.in_shape),
            "num_classes": self.num_classes,
            "stem_channels": self.stem_channels,
            "downsample_after": list(self.downsample_after),
            "ops": [op.to_dict() if op is not None else None for op in self.ops],
        }

    @staticmethod
    def from_dict(d: dict) -> "NormalNet":
        if d.get("type") != "normalnet":
            raise CheckpointError("not a normal-net description")
        return NormalNet(
            in_shape=d["in_shape"],
            num_classes=d["num_classes"],
            ops=[OpKind.from_dict(o) if o is not None else None for o in d["ops"]],
            stem_channels=d["stem_channels"],
            downsample_after=d["downsample_after"],
        )

    def describe(self) -> str:
        lines = [f"stem: conv_k3 ({self.in_shape[0]} -> {self.stem_channels} ch)"]
        for i, op in enumerate(self.ops):
            lines.append(f"layer {i}: {op.label if op is not None else '(removed)'}")
            if i in self.downsample_after:
                lines.append(f"  downsample 2x2 after layer {i}")
        lines.append(f"classifier: dense ({self.stem_channels} -> {self.num_classes})")
        return "\n".join(lines)


def derive_normal_net(model: SuperNetModel, params: ParamSet, arch: ArchParams):
    """Per-layer argmax over logits (ties -> lowest index); zero-op layers are
    dropped; chosen candidates' weights are copied verbatim.

    Returns (net, net_params, choices).
    """
    choices = [int(np.argmax(a)) for a in arch.logits]
    ops: list[OpKind | None] = []
    for i, n in enumerate(choices):
        op = model.layer_candidates[i][n]
        ops.append(None if op.kind == "zero" else op)
    net = NormalNet(model.in_shape, model.num_classes, ops,
                    stem_channels=model.stem_channels,
                    downsample_after=model.downsample_after)
    ps = ParamSet()
    ps["stem.w"] = params["stem.w"].copy()
    ps["stem.b"] = params["stem.b"].copy()
    for i, (n, op) in enumerate(zip(choices, ops)):
        if op is None:
            continue
        for name, arr in params.subset(f"layer{i}.cand{n}.").items():
            ps[f"layer{i}.{name}"] = arr.copy()
    ps["classifier.w"] = params["classifier.w"].copy()
    ps["classifier.b"] = params["classifier.b"].copy()
    return net, ps, choices


def count_flops_params(net, gates: GateSample | None = None, include_fixed: bool = True):
    """Analytic multiply-add and parameter counts.

    `net` is a NormalNet, or a SuperNetModel together with a gate sample
    (counts the sampled path only).
    """
    if isinstance(net, SuperNetModel):
        if gates is None:
            raise ValueError("supernet counting needs a gate sample")
        ops = [net.layer_candidates[i][n] for i, n in enumerate(gates.indices)]
        shapes = net.layer_in_shapes
    else:
        ops = net.ops
        shapes = net.layer_in_shapes
    flops = 0
    params = 0
    for op, shape in zip(ops, shapes):
        if op is None or op.kind == "zero":
            continue
        flops += op_flops(op, shape)
        params += op_param_count(op, shape)
    if include_fixed:
        c_in, h, w = net.in_shape
        flops += 9 * c_in * net.stem_channels * h * w
        params += 9 * c_in * net.stem_channels + net.stem_channels
        flops += net.stem_channels * net.num_classes
        params += net.stem_channels * net.num_classes + net.num_classes
    return flops, params


def kink_margin(caches) -> float:
    """Smallest |pre-activation| in a forward cache; used by gradient checks
    to skip draws that sit on a ReLU kink."""
    vals = [float(np.min(np.abs(caches["stem"]["pre"])))]
    for lc in caches["layers"]:
        op_caches = lc.get("op_caches")
        if op_caches is None:
            op_caches = [lc.get("cache")] if lc.get("cache") is not None else []
        for c in op_caches:
            for key in ("h1", "h2"):
                if c is not None and key in c:
                    vals.append(float(np.min(np.abs(c[key]))))
    return min(vals)
