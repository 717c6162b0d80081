"""Dense layers with explicit forward/backward passes, AdamW, and checkpoint I/O.

Everything here is plain numpy. Forward passes return ``(output, cache)`` and
backward passes consume the cache, so layer parameters are never mutated while
gradients are computed. Arrays keep whatever float dtype they arrive in: the
training path runs in float32, the gradient checker feeds float64 copies.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import CorruptionError, DimensionError, FormatError, ValidationError

LEAKY_SLOPE = 0.2


# --------------------------------------------------------------------------
# Parameter containers


@dataclass
class LinearLayer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)

    def __post_init__(self):
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise DimensionError(
                f"weight {self.weight.shape} and bias {self.bias.shape} are inconsistent"
            )

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    @classmethod
    def init(cls, in_dim: int, out_dim: int, rng: np.random.Generator, dtype=np.float32, gain: float = 1.0):
        w = rng.standard_normal((out_dim, in_dim)) * (gain / np.sqrt(in_dim))
        return cls(w.astype(dtype), np.zeros(out_dim, dtype=dtype))


@dataclass
class LayerNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    epsilon: float = 1e-5

    def __post_init__(self):
        if self.gamma.shape != self.beta.shape or self.gamma.ndim != 1:
            raise DimensionError(
                f"gamma {self.gamma.shape} and beta {self.beta.shape} must be equal-length vectors"
            )

    @property
    def dim(self) -> int:
        return self.gamma.shape[0]

    @classmethod
    def init(cls, dim: int, dtype=np.float32, epsilon: float = 1e-5):
        return cls(np.ones(dim, dtype=dtype), np.zeros(dim, dtype=dtype), epsilon)


# --------------------------------------------------------------------------
# Linear


def _check_2d(x, cols, what):
    if x.ndim != 2 or x.shape[1] != cols:
        raise DimensionError(f"{what}: input shape {x.shape} does not match expected (batch, {cols})")


def linear_forward(layer: LinearLayer, x: np.ndarray) -> np.ndarray:
    """y = x @ W.T + b, applied row by row."""
    if x.ndim != 2 or x.shape[1] != layer.in_dim:
        raise DimensionError(
            f"input shape {x.shape} incompatible with weight shape {layer.weight.shape}"
        )
    return x @ layer.weight.T + layer.bias


def linear_backward(layer: LinearLayer, x: np.ndarray, grad_out: np.ndarray):
    """Return ``(grad_x, grad_W, grad_b)`` for ``linear_forward(layer, x)``."""
    if x.ndim != 2 or x.shape[1] != layer.in_dim:
        raise DimensionError(
            f"input shape {x.shape} incompatible with weight shape {layer.weight.shape}"
        )
    if grad_out.shape != (x.shape[0], layer.out_dim):
        raise DimensionError(
            f"grad_out shape {grad_out.shape} does not match output shape {(x.shape[0], layer.out_dim)}"
        )
    grad_x = grad_out @ layer.weight
    grad_w = grad_out.T @ x
    grad_b = grad_out.sum(axis=0)
    return grad_x, grad_w, grad_b


# --------------------------------------------------------------------------
# Leaky ReLU


def leaky_relu(x, slope: float = LEAKY_SLOPE):
    x = np.asarray(x)
    return np.where(x >= 0, x, slope * x).astype(x.dtype, copy=False)


def leaky_relu_backward(x, grad_out, slope: float = LEAKY_SLOPE):
    x = np.asarray(x)
    return np.where(x >= 0, grad_out, slope * grad_out).astype(np.result_type(grad_out), copy=False)


# --------------------------------------------------------------------------
# Layer norm


def layer_norm_forward(params: LayerNormParams, x: np.ndarray):
    """Per-row normalisation with population variance; returns ``(y, cache)``."""
    _check_2d(x, params.dim, "layer_norm")
    # statistics accumulate in float64 regardless of the working dtype
    mean = x.mean(axis=1, keepdims=True, dtype=np.float64)
    centered = x.astype(np.float64) - mean
    var = np.mean(centered * centered, axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + params.epsilon)
    x_hat = (centered * inv_std).astype(x.dtype)
    y = params.gamma * x_hat + params.beta
    return y, (x_hat, inv_std.astype(x.dtype))


def layer_norm_backward(params: LayerNormParams, cache, grad_out: np.ndarray):
    """Return ``(grad_x, grad_gamma, grad_beta)``."""
    x_hat, inv_std = cache
    if grad_out.shape != x_hat.shape:
        raise DimensionError(f"grad_out shape {grad_out.shape} != forward shape {x_hat.shape}")
    d = x_hat.shape[1]
    grad_gamma = (grad_out * x_hat).sum(axis=0)
    grad_beta = grad_out.sum(axis=0)
    g = grad_out * params.gamma
    grad_x = inv_std * (
        g - g.mean(axis=1, keepdims=True) - x_hat * (g * x_hat).sum(axis=1, keepdims=True) / d
    )
    return grad_x, grad_gamma, grad_beta


# --------------------------------------------------------------------------
# Row normalisation (used by projection heads)


def l2_normalize_forward(u: np.ndarray, eps: float = 1e-12):
    norm = np.sqrt(np.sum(u.astype(np.float64) ** 2, axis=1, keepdims=True))
    norm = np.maximum(norm, eps).astype(u.dtype)
    y = u / norm
    return y, (y, norm)


def l2_normalize_backward(cache, grad_out):
    y, norm = cache
    return (grad_out - y * np.sum(grad_out * y, axis=1, keepdims=True)) / norm


# --------------------------------------------------------------------------
# Multi-layer perceptron


@dataclass
class MLP:
    """A stack of linear layers with leaky-ReLU between them.

    ``norms`` optionally holds a LayerNormParams for every hidden boundary
    (``len(layers) - 1`` entries); when present the hidden activation path is
    linear -> layer norm -> leaky ReLU. No activation follows the last layer.
    """

    layers: list
    norms: list | None = None
    slope: float = LEAKY_SLOPE

    def __post_init__(self):
        for a, b in zip(self.layers, self.layers[1:]):
            if a.out_dim != b.in_dim:
                raise DimensionError(f"layer widths {a.out_dim} -> {b.in_dim} do not chain")
        if self.norms is not None:
            if len(self.norms) != len(self.layers) - 1:
                raise DimensionError("need one layer norm per hidden boundary")
            for lay, ln in zip(self.layers, self.norms):
                if ln.dim != lay.out_dim:
                    raise DimensionError(f"layer norm dim {ln.dim} != layer width {lay.out_dim}")

    @classmethod
    def init(cls, widths, rng, *, layer_norm=False, dtype=np.float32, slope=LEAKY_SLOPE, gain=1.0):
        layers = [LinearLayer.init(a, b, rng, dtype, gain) for a, b in zip(widths, widths[1:])]
        norms = [LayerNormParams.init(w, dtype) for w in widths[1:-1]] if layer_norm else None
        return cls(layers, norms, slope)

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def widths(self) -> list[int]:
        return [self.layers[0].in_dim] + [lay.out_dim for lay in self.layers]

    def forward(self, x: np.ndarray):
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise DimensionError(f"input shape {x.shape} does not match network input dim {self.in_dim}")
        cache = []
        h = x
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            pre = linear_forward(layer, h)
            if i == last:
                cache.append((h, None, None))
                h = pre
                break
            ln_cache = None
            if self.norms is not None:
                pre, ln_cache = layer_norm_forward(self.norms[i], pre)
            cache.append((h, ln_cache, pre))
            h = leaky_relu(pre, self.slope)
        return h, cache

    def backward(self, cache, grad_out: np.ndarray):
        """Return ``(grad_x, grads)`` with ``grads`` keyed like :meth:`params`."""
        grads = {}
        g = grad_out
        for i in range(len(self.layers) - 1, -1, -1):
            h, ln_cache, pre = cache[i]
            if pre is not None:
                g = leaky_relu_backward(pre, g, self.slope)
                if ln_cache is not None:
                    g, gg, gb = layer_norm_backward(self.norms[i], ln_cache, g)
                    grads[f"ln{i}.gamma"] = gg
                    grads[f"ln{i}.beta"] = gb
            g, gw, gbias = linear_backward(self.layers[i], h, g)
            grads[f"fc{i}.weight"] = gw
            grads[f"fc{i}.bias"] = gbias
        return g, grads

    def __call__(self, x):
        return self.forward(x)[0]

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            out[f"fc{i}.weight"] = layer.weight
            out[f"fc{i}.bias"] = layer.bias
            if self.norms is not None and i < len(self.norms):
                out[f"ln{i}.gamma"] = self.norms[i].gamma
                out[f"ln{i}.beta"] = self.norms[i].beta
        return out

    def load_params(self, params: dict[str, np.ndarray]):
        for i, layer in enumerate(self.layers):
            layer.weight = _assign(layer.weight, params[f"fc{i}.weight"], f"fc{i}.weight")
            layer.bias = _assign(layer.bias, params[f"fc{i}.bias"], f"fc{i}.bias")
            if self.norms is not None and i < len(self.norms):
                self.norms[i].gamma = _assign(self.norms[i].gamma, params[f"ln{i}.gamma"], f"ln{i}.gamma")
                self.norms[i].beta = _assign(self.norms[i].beta, params[f"ln{i}.beta"], f"ln{i}.beta")

    def astype(self, dtype) -> "MLP":
        layers = [LinearLayer(l.weight.astype(dtype), l.bias.astype(dtype)) for l in self.layers]
        norms = None
        if self.norms is not None:
            norms = [LayerNormParams(n.gamma.astype(dtype), n.beta.astype(dtype), n.epsilon) for n in self.norms]
        return MLP(layers, norms, self.slope)


def _assign(old, new, name):
    new = np.asarray(new)
    if new.shape != old.shape:
        raise DimensionError(f"{name}: shape {new.shape} does not match {old.shape}")
    return new.astype(old.dtype, copy=False)


# --------------------------------------------------------------------------
# AdamW


@dataclass
class AdamWState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    epsilon: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    no_decay: frozenset = frozenset()
    lr_scale: dict = field(default_factory=dict)


def adamw_step(state: AdamWState, params: dict, grads: dict):
    """One decoupled-weight-decay Adam step, updating ``params`` in place.

    Decay is applied first (``p -= lr * wd * p``), then the bias-corrected
    Adam update. Names listed in ``state.no_decay`` skip the decay term.
    Returns ``(params, state)``.
    """
    if set(params) != set(grads):
        raise DimensionError(f"parameter/gradient keys differ: {sorted(set(params) ^ set(grads))}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise DimensionError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if state.weight_decay and name not in state.no_decay:
            p *= 1.0 - state.lr * state.weight_decay
        denom = np.sqrt(v / c2)
        denom += state.epsilon
        p -= (state.lr * state.lr_scale.get(name, 1.0) / c1) * m / denom
    return params, state


# --------------------------------------------------------------------------
# Parameter vectors and gradient checking


def flatten_params(params: dict, keys=None) -> np.ndarray:
    keys = list(params) if keys is None else keys
    return np.concatenate([np.asarray(params[k], dtype=np.float64).ravel() for k in keys])


def unflatten_params(vec: np.ndarray, like: dict, keys=None) -> dict:
    keys = list(like) if keys is None else keys
    out, pos = {}, 0
    for k in keys:
        n = like[k].size
        out[k] = vec[pos:pos + n].reshape(like[k].shape)
        pos += n
    if pos != vec.size:
        raise DimensionError(f"vector length {vec.size} != total parameter count {pos}")
    return out


def grad_check(loss_fn, params, step: float = 1e-3, indices=None) -> float:
    """Compare analytic gradients against central differences.

    ``loss_fn(p)`` must return ``(loss, grad)`` for a float64 parameter vector
    ``p``. Only ``indices`` are perturbed when given. Returns the maximum of
    ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    p = np.array(params, dtype=np.float64).ravel()
    loss, grad = loss_fn(p.copy())
    if not np.isfinite(loss):
        raise ValidationError(f"loss is not finite at the check point: {loss}")
    grad = np.asarray(grad, dtype=np.float64).ravel()
    idx = range(p.size) if indices is None else indices
    worst = 0.0
    for i in idx:
        orig = p[i]
        p[i] = orig + step
        lp, _ = loss_fn(p.copy())
        p[i] = orig - step
        lm, _ = loss_fn(p.copy())
        p[i] = orig
        if not (np.isfinite(lp) and np.isfinite(lm)):
            raise ValidationError(f"loss became non-finite while perturbing parameter {i}")
        num = (lp - lm) / (2.0 * step)
        err = abs(grad[i] - num) / max(abs(grad[i]), abs(num), 1e-8)
        worst = max(worst, err)
    return worst


# --------------------------------------------------------------------------
# Checkpoints
#
# magic "AVCK" | u32 version | u32 header_len | header JSON (utf-8) | payload
# The header holds the caller's architecture dict, the step count and an
# offset table; each tensor is a little-endian float32 block at its offset
# (relative to the start of the payload).

CKPT_MAGIC = b"AVCK"
CKPT_VERSION = 1


def save_checkpoint(path, arch: dict, params: dict, step: int = 0):
    table, blobs, offset = [], [], 0
    for name, arr in params.items():
        arr = np.asarray(arr)
        if not np.all(np.isfinite(arr)):
            raise ValidationError(f"parameter {name} contains non-finite values")
        blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        table.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"arch": arch, "step": int(step), "tensors": table}, sort_keys=True).encode()
    try:
        with open(path, "wb") as fh:
            fh.write(CKPT_MAGIC)
            fh.write(struct.pack("<II", CKPT_VERSION, len(header)))
            fh.write(header)
            for blob in blobs:
                fh.write(blob)
    except OSError as exc:
        raise OSError(f"could not write checkpoint {path}: {exc}") from exc


def load_checkpoint(path):
    """Return ``(arch, params, step)``."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic {raw[:4]!r}")
    if len(raw) < 12:
        raise CorruptionError(f"{path}: truncated checkpoint header")
    version, hlen = struct.unpack_from("<II", raw, 4)
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    if len(raw) < 12 + hlen:
        raise CorruptionError(f"{path}: truncated checkpoint header")
    try:
        header = json.loads(raw[12:12 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptionError(f"{path}: unreadable checkpoint header") from exc
    base = 12 + hlen
    params = {}
    for entry in header["tensors"]:
        start = base + entry["offset"]
        end = start + entry["nbytes"]
        if end > len(raw):
            raise CorruptionError(f"{path}: tensor {entry['name']} extends past end of file")
        arr = np.frombuffer(raw[start:end], dtype="<f4").astype(np.float32)
        params[entry["name"]] = arr.reshape(entry["shape"])
    return header["arch"], params, header["step"]
