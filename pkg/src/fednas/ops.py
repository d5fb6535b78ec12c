"""Candidate operations with analytic forward/backward passes.

Every op maps a feature map of shape (N, C, H, W) -- or a flat (N, F) batch
for dense layers -- to an output of the same spatial extent (stride 1, zero
padding), so candidates sharing a layer are interchangeable. All arithmetic
is float64 and accumulation order is fixed, which keeps replays bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NumericsError

_VALID_KINDS = ("identity", "zero", "dense", "conv", "dwsep", "avgpool")


@dataclass(frozen=True)
class OpKind:
    """A candidate operation descriptor.

    kind: one of identity | zero | dense | conv | dwsep | avgpool
    kernel: spatial kernel size (conv/dwsep: 3 or 5; avgpool: 3)
    channels: output channels for conv/dwsep (must equal input channels
        inside a searchable layer)
    expansion: hidden-width multiplier of the separable block (1 or 3)
    out_features: dense output width
    """

    kind: str
    kernel: int = 0
    channels: int = 0
    expansion: int = 1
    out_features: int = 0

    def __post_init__(self):
        if self.kind not in _VALID_KINDS:
            raise ValueError(f"unknown op kind {self.kind!r}")
        if self.kind in ("conv", "dwsep") and self.kernel not in (3, 5):
            raise ValueError(f"{self.kind} kernel must be 3 or 5, got {self.kernel}")
        if self.kind == "avgpool" and self.kernel != 3:
            raise ValueError("avgpool kernel must be 3")
        if self.kind == "dense" and self.out_features < 1:
            raise ValueError("dense needs out_features >= 1")

    @property
    def label(self) -> str:
        if self.kind == "conv":
            return f"conv_k{self.kernel}"
        if self.kind == "dwsep":
            return f"dwsep_k{self.kernel}_e{self.expansion}"
        if self.kind == "dense":
            return f"dense_{self.out_features}"
        if self.kind == "avgpool":
            return "avgpool_k3"
        return self.kind

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "kernel": self.kernel,
            "channels": self.channels,
            "expansion": self.expansion,
            "out_features": self.out_features,
        }

    @staticmethod
    def from_dict(d: dict) -> "OpKind":
        return OpKind(
            kind=d["kind"],
            kernel=d.get("kernel", 0),
            channels=d.get("channels", 0),
            expansion=d.get("expansion", 1),
            out_features=d.get("out_features", 0),
        )


def check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericsError(f"non-finite values in {what}")


def param_shapes(op: OpKind, in_shape: tuple) -> dict[str, tuple]:
    """Parameter shapes for an op applied to an input of shape `in_shape`
    (per-example shape, batch dimension excluded)."""
    if op.kind in ("identity", "zero", "avgpool"):
        return {}
    if op.kind == "dense":
        (fin,) = in_shape
        return {"w": (fin, op.out_features), "b": (op.out_features,)}
    cin = in_shape[0]
    if op.kind == "conv":
        return {"w": (op.channels, cin, op.kernel, op.kernel), "b": (op.channels,)}
    if op.kind == "dwsep":
        hidden = cin * op.expansion
        return {
            "pw1_w": (hidden, cin),
            "pw1_b": (hidden,),
            "dw_w": (hidden, op.kernel, op.kernel),
            "dw_b": (hidden,),
            "pw2_w": (op.channels, hidden),
            "pw2_b": (op.channels,),
        }
    raise AssertionError(op.kind)


def init_op_params(op: OpKind, in_shape: tuple, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """He-normal weights, zero biases."""
    out = {}
    for name, shape in param_shapes(op, in_shape).items():
        if name.endswith("_b") or name == "b":
            out[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else shape[0]
            out[name] = rng.normal(0.0, np.sqrt(2.0 / max(fan_in, 1)), shape)
    return out


# ---------------------------------------------------------------------------
# low-level kernels (stride 1, zero padding)

def _pad2d(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _windows(x: np.ndarray, k: int) -> np.ndarray:
    # (N, C, H, W) -> (N, C, H, W, k, k) sliding windows over the padded map
    return sliding_window_view(_pad2d(x, k // 2), (k, k), axis=(2, 3))


def _scatter_windows(t: np.ndarray, in_shape: tuple, k: int) -> np.ndarray:
    """Adjoint of _windows: accumulate per-window gradients back to the input."""
    n, c, h, w = in_shape
    p = k // 2
    gxp = np.zeros((n, c, h + 2 * p, w + 2 * p))
    for i in range(k):
        for j in range(k):
            gxp[:, :, i:i + h, j:j + w] += t[..., i, j]
    return gxp[:, :, p:p + h, p:p + w]


def conv2d(x, w, b):
    win = _windows(x, w.shape[-1])
    y = np.einsum("nchwij,ocij->nohw", win, w, optimize=True) + b[None, :, None, None]
    return y, win


def conv2d_backward(win, w, x_shape, gy):
    gw = np.einsum("nchwij,nohw->ocij", win, gy, optimize=True)
    gb = gy.sum(axis=(0, 2, 3))
    t = np.einsum("nohw,ocij->nchwij", gy, w, optimize=True)
    gx = _scatter_windows(t, x_shape, w.shape[-1])
    return gx, gw, gb


def depthwise2d(x, w, b):
    win = _windows(x, w.shape[-1])
    y = np.einsum("nchwij,cij->nchw", win, w, optimize=True) + b[None, :, None, None]
    return y, win


def depthwise2d_backward(win, w, x_shape, gy):
    gw = np.einsum("nchwij,nchw->cij", win, gy, optimize=True)
    gb = gy.sum(axis=(0, 2, 3))
    t = np.einsum("nchw,cij->nchwij", gy, w, optimize=True)
    gx = _scatter_windows(t, x_shape, w.shape[-1])
    return gx, gw, gb


def pointwise(x, w, b):
    # 1x1 convolution; w has shape (C_out, C_in)
    return np.einsum("nchw,oc->nohw", x, w, optimize=True) + b[None, :, None, None]


def pointwise_backward(x, w, gy):
    gw = np.einsum("nohw,nchw->oc", gy, x, optimize=True)
    gb = gy.sum(axis=(0, 2, 3))
    gx = np.einsum("nohw,oc->nchw", gy, w, optimize=True)
    return gx, gw, gb


def relu(x):
    return np.maximum(x, 0.0)


# ---------------------------------------------------------------------------
# op dispatch

def op_forward(op: OpKind, params: dict[str, np.ndarray], x: np.ndarray):
    """Apply a candidate op. Returns (output, cache) where the cache carries
    exactly what op_backward needs."""
    check_finite(x, f"input of {op.label}")
    if op.kind == "identity":
        return x, {"op": op}
    if op.kind == "zero":
        return np.zeros_like(x), {"op": op, "shape": x.shape}
    if op.kind == "dense":
        if x.ndim != 2 or x.shape[1] != params["w"].shape[0]:
            raise ValueError(f"dense input shape {x.shape} incompatible with weight {params['w'].shape}")
        y = x @ params["w"] + params["b"]
        return y, {"op": op, "x": x, "w": params["w"]}
    if x.ndim != 4:
        raise ValueError(f"{op.label} expects (N, C, H, W), got shape {x.shape}")
    if op.kind == "avgpool":
        k = op.kernel
        win = _windows(x, k)
        y = win.mean(axis=(-1, -2))
        return y, {"op": op, "shape": x.shape}
    if op.kind == "conv":
        if x.shape[1] != params["w"].shape[1]:
            raise ValueError(f"conv channel mismatch: input {x.shape[1]}, weight {params['w'].shape[1]}")
        y, win = conv2d(x, params["w"], params["b"])
        return y, {"op": op, "win": win, "shape": x.shape, "w": params["w"]}
    if op.kind == "dwsep":
        if x.shape[1] != params["pw1_w"].shape[1]:
            raise ValueError(f"dwsep channel mismatch: input {x.shape[1]}, weight {params['pw1_w'].shape[1]}")
        h1 = pointwise(x, params["pw1_w"], params["pw1_b"])
        a1 = relu(h1)
        h2, win2 = depthwise2d(a1, params["dw_w"], params["dw_b"])
        a2 = relu(h2)
        y = pointwise(a2, params["pw2_w"], params["pw2_b"])
        cache = {
            "op": op, "x": x, "h1": h1, "a1": a1, "h2": h2, "a2": a2,
            "win2": win2,
            "pw1_w": params["pw1_w"], "dw_w": params["dw_w"], "pw2_w": params["pw2_w"],
        }
        return y, cache
    raise AssertionError(op.kind)


def op_backward(op: OpKind, cache: dict, gy: np.ndarray):
    """Reverse-mode rule for a candidate op. Returns (grad_input, grad_params)."""
    if cache.get("op") != op:
        raise ValueError("cache does not match op")
    if op.kind == "identity":
        return gy, {}
    if op.kind == "zero":
        return np.zeros(cache["shape"]), {}
    if op.kind == "dense":
        x = cache["x"]
        gw = x.T @ gy
        gb = gy.sum(axis=0)
        gx = gy @ cache["w"].T
        return gx, {"w": gw, "b": gb}
    if op.kind == "avgpool":
        k = op.kernel
        t = np.broadcast_to(gy[..., None, None] / (k * k), gy.shape + (k, k))
        gx = _scatter_windows(t, cache["shape"], k)
        return gx, {}
    if op.kind == "conv":
        gx, gw, gb = conv2d_backward(cache["win"], cache["w"], cache["shape"], gy)
        return gx, {"w": gw, "b": gb}
    if op.kind == "dwsep":
        ga2, g_pw2_w, g_pw2_b = pointwise_backward(cache["a2"], cache["pw2_w"], gy)
        gh2 = ga2 * (cache["h2"] > 0)
        ga1, g_dw_w, g_dw_b = depthwise2d_backward(cache["win2"], cache["dw_w"], cache["a1"].shape, gh2)
        gh1 = ga1 * (cache["h1"] > 0)
        gx, g_pw1_w, g_pw1_b = pointwise_backward(cache["x"], cache["pw1_w"], gh1)
        return gx, {
            "pw1_w": g_pw1_w, "pw1_b": g_pw1_b,
            "dw_w": g_dw_w, "dw_b": g_dw_b,
            "pw2_w": g_pw2_w, "pw2_b": g_pw2_b,
        }
    raise AssertionError(op.kind)


def op_flops(op: OpKind, in_shape: tuple) -> int:
    """Multiply-add count for one example."""
    if op.kind in ("identity", "zero", "avgpool"):
        return 0
    if op.kind == "dense":
        (fin,) = in_shape
        return fin * op.out_features
    c, h, w = in_shape
    if op.kind == "conv":
        return op.kernel * op.kernel * c * op.channels * h * w
    if op.kind == "dwsep":
        hidden = c * op.expansion
        pw1 = c * hidden * h * w
        dw = op.kernel * op.kernel * hidden * h * w
        pw2 = hidden * op.channels * h * w
        return pw1 + dw + pw2
    raise AssertionError(op.kind)


def op_param_count(op: OpKind, in_shape: tuple) -> int:
    return sum(int(np.prod(s)) for s in param_shapes(op, in_shape).values())
