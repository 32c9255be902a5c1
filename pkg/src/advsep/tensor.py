"""Small fully-connected networks with exact reverse-mode gradients.

Arrays are plain ``float64`` numpy arrays. Every function accepts either a
single example of shape ``(d,)`` or a batch of shape ``(n, d)``; batch losses
are sums over rows, so the input gradient of a batch is the stack of the
per-example input gradients.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

ACTIVATIONS = ("relu", "linear")
CHECKPOINT_FORMAT = "advsep-mlp"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


@dataclass
class Layer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "relu"

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(f"bad layer shapes {self.weight.shape} / {self.bias.shape}")
        if self.activation not in ACTIVATIONS:
            # new activations need a forward rule here and a derivative in _backward
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def fan_in(self) -> int:
        return self.weight.shape[1]

    @property
    def fan_out(self) -> int:
        return self.weight.shape[0]


@dataclass
class MlpModel:
    """Representation network H plus an optional linear classifier head W (k x m)."""

    layers: list[Layer]
    head: np.ndarray | None = None

    def __post_init__(self):
        if not self.layers:
            raise ShapeError("model needs at least one layer")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.fan_out != b.fan_in:
                raise ShapeError(f"layer dims do not chain: {a.fan_out} -> {b.fan_in}")
        if self.head is not None:
            self.head = np.asarray(self.head, dtype=np.float64)
            if self.head.ndim != 2 or self.head.shape[1] != self.rep_dim:
                raise ShapeError(f"head shape {self.head.shape} does not match representation dim {self.rep_dim}")

    @property
    def input_dim(self) -> int:
        return self.layers[0].fan_in

    @property
    def rep_dim(self) -> int:
        return self.layers[-1].fan_out

    @property
    def num_classes(self) -> int | None:
        return None if self.head is None else self.head.shape[0]

    def params(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out += [layer.weight, layer.bias]
        if self.head is not None:
            out.append(self.head)
        return out

    def copy(self) -> MlpModel:
        return MlpModel(
            [Layer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers],
            None if self.head is None else self.head.copy(),
        )


@dataclass
class GradPair:
    param_grads: list[np.ndarray]  # mirrors MlpModel.params()
    input_grad: np.ndarray


def init_mlp(widths, *, num_classes=None, seed=0, final_activation="linear") -> MlpModel:
    """Glorot-uniform MLP. ``widths = [d, h1, ..., m]``; hidden layers use relu."""
    if len(widths) < 2:
        raise ValueError("widths needs an input and an output size")
    rng = np.random.default_rng(seed)
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(widths, widths[1:])):
        s = np.sqrt(6.0 / (fan_in + fan_out))
        act = final_activation if i == len(widths) - 2 else "relu"
        layers.append(Layer(rng.uniform(-s, s, size=(fan_out, fan_in)), np.zeros(fan_out), act))
    head = None
    if num_classes is not None:
        m = widths[-1]
        s = np.sqrt(6.0 / (m + num_classes))
        head = rng.uniform(-s, s, size=(num_classes, m))
    return MlpModel(layers, head)


def _check_input(model: MlpModel, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x2 = x[None, :] if single else x
    if x2.ndim != 2 or x2.shape[1] != model.input_dim:
        raise ShapeError(f"input shape {x.shape} does not match model input dim {model.input_dim}")
    return x2, single


def _forward_cache(model: MlpModel, x2: np.ndarray):
    acts = [x2]
    pre = []
    a = x2
    for layer in model.layers:
        s = a @ layer.weight.T + layer.bias
        pre.append(s)
        a = np.maximum(s, 0.0) if layer.activation == "relu" else s
        acts.append(a)
    return acts, pre


def forward(model: MlpModel, x) -> np.ndarray:
    """Last-layer representation H(x)."""
    x2, single = _check_input(model, x)
    z = _forward_cache(model, x2)[0][-1]
    _ensure_finite(z, "forward")
    return z[0] if single else z


def logits(model: MlpModel, x) -> np.ndarray:
    if model.head is None:
        raise ShapeError("model has no classifier head")
    z = forward(model, x)
    return z @ model.head.T


def softmax(g) -> np.ndarray:
    g = np.asarray(g, dtype=np.float64)
    e = np.exp(g - g.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(g) -> np.ndarray:
    g = np.asarray(g, dtype=np.float64)
    s = g - g.max(axis=-1, keepdims=True)
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def _ensure_finite(a, where):
    if not np.all(np.isfinite(a)):
        raise NonFiniteError(f"non-finite values in {where}")


def _backward(model, acts, pre, dz, need_params=True):
    grads = []
    delta = dz
    for li in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[li]
        if layer.activation == "relu":
            delta = delta * (pre[li] > 0.0)
        if need_params:
            grads.append(delta.sum(axis=0))
            grads.append(delta.T @ acts[li])
        delta = delta @ layer.weight
    grads.reverse()  # now [W0, b0, W1, b1, ...]
    return grads, delta


def evaluate(model: MlpModel, x, loss_fn, need_params=True):
    """Per-example losses, parameter gradients of their (weighted) sum, and input gradients."""
    x2, single = _check_input(model, x)
    acts, pre = _forward_cache(model, x2)
    z = acts[-1]
    g = z @ model.head.T if model.head is not None else None
    if loss_fn.needs_head and g is None:
        raise ShapeError(f"{type(loss_fn).__name__} needs a classifier head")
    values, dz, dg = loss_fn.evaluate(z, g)
    head_grad = None
    if dg is not None:
        head_grad = dg.T @ z
        dz = dg @ model.head if dz is None else dz + dg @ model.head
    if dz is None:
        dz = np.zeros_like(z)
    pgrads, gx = _backward(model, acts, pre, dz, need_params)
    if need_params and model.head is not None:
        pgrads.append(head_grad if head_grad is not None else np.zeros_like(model.head))
    _ensure_finite(values, "loss")
    _ensure_finite(gx, "input gradient")
    if single:
        gx = gx[0]
    return values, pgrads, gx


def grad(model: MlpModel, x, loss_fn) -> tuple[float, GradPair]:
    values, pgrads, gx = evaluate(model, x, loss_fn)
    return float(loss_fn.total(values)), GradPair(pgrads, gx)


def input_grad(model: MlpModel, x, loss_fn) -> tuple[np.ndarray, np.ndarray]:
    """Per-example loss values and the input gradient; skips parameter gradients."""
    values, _, gx = evaluate(model, x, loss_fn, need_params=False)
    return values, gx


def loss_values(model: MlpModel, x, loss_fn) -> np.ndarray:
    x2, _ = _check_input(model, x)
    z = _forward_cache(model, x2)[0][-1]
    g = z @ model.head.T if model.head is not None else None
    return loss_fn.evaluate(z, g)[0]


def _set_params(model: MlpModel, new: list[np.ndarray]) -> MlpModel:
    layers = [
        Layer(new[2 * i], new[2 * i + 1], layer.activation) for i, layer in enumerate(model.layers)
    ]
    head = new[-1] if model.head is not None else None
    return MlpModel(layers, head)


def sgd_step(model: MlpModel, grads: GradPair, lr: float) -> MlpModel:
    if lr <= 0:
        raise ValueError("lr must be positive")
    return _set_params(model, [p - lr * g for p, g in zip(model.params(), grads.param_grads)])


@dataclass
class SGD:
    """SGD with heavy-ball momentum; ``momentum=0`` reduces to :func:`sgd_step`."""

    lr: float
    momentum: float = 0.0
    _velocity: list | None = field(default=None, repr=False)

    def step(self, model: MlpModel, grads: GradPair) -> MlpModel:
        if self.momentum == 0.0:
            return sgd_step(model, grads, self.lr)
        if self._velocity is None:
            self._velocity = [np.zeros_like(p) for p in model.params()]
        self._velocity = [self.momentum * v + g for v, g in zip(self._velocity, grads.param_grads)]
        return _set_params(model, [p - self.lr * v for p, v in zip(model.params(), self._velocity)])


def finite_diff_check(model: MlpModel, x, loss_fn, h: float = 1e-6) -> float:
    """Max relative error between analytic and central-difference gradients.

    The error of each tensor (every weight, bias, the head and the input) is
    ``max|analytic - numeric| / max(max|analytic|, max|numeric|)``; the worst
    tensor is returned. Tensors whose gradients are all below 1e-12 count as 0.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    x = np.asarray(x, dtype=np.float64)
    _, gp = grad(model, x, loss_fn)

    def total(m, xx):
        return loss_fn.total(loss_values(m, xx, loss_fn))

    worst = 0.0
    params = model.params()
    for pi, p in enumerate(params):
        num = np.empty_like(p)
        for idx in np.ndindex(p.shape):
            work = [q.copy() for q in params]
            work[pi][idx] += h
            up = total(_set_params(model, work), x)
            work[pi][idx] -= 2 * h
            down = total(_set_params(model, work), x)
            num[idx] = (up - down) / (2 * h)
        worst = max(worst, _rel_err(gp.param_grads[pi], num))
    num = np.empty_like(x)
    for idx in np.ndindex(x.shape):
        xp = x.copy()
        xp[idx] += h
        xm = x.copy()
        xm[idx] -= h
        num[idx] = (total(model, xp) - total(model, xm)) / (2 * h)
    return max(worst, _rel_err(gp.input_grad, num))


def _rel_err(a, b):
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0))
    if scale < 1e-12:
        return 0.0
    return float(np.abs(a - b).max() / scale)


# ---------------------------------------------------------------- checkpoints


def model_arrays(model: MlpModel, prefix: str = "") -> dict[str, np.ndarray]:
    arrays = {}
    for i, layer in enumerate(model.layers):
        arrays[f"{prefix}layer{i}.weight"] = layer.weight
        arrays[f"{prefix}layer{i}.bias"] = layer.bias
    if model.head is not None:
        arrays[f"{prefix}head"] = model.head
    meta = {"activations": [l.activation for l in model.layers], "has_head": model.head is not None}
    arrays[f"{prefix}meta"] = np.array(json.dumps(meta))
    return arrays


def model_from_arrays(arrays, prefix: str = "") -> MlpModel:
    meta = json.loads(str(arrays[f"{prefix}meta"]))
    layers = [
        Layer(arrays[f"{prefix}layer{i}.weight"], arrays[f"{prefix}layer{i}.bias"], act)
        for i, act in enumerate(meta["activations"])
    ]
    head = arrays[f"{prefix}head"] if meta["has_head"] else None
    return MlpModel(layers, head)


def save_model(path, model: MlpModel, extra: dict | None = None) -> None:
    arrays = {"format": np.array(CHECKPOINT_FORMAT), "version": np.array(CHECKPOINT_VERSION)}
    arrays.update(model_arrays(model, "model."))
    for k, v in (extra or {}).items():
        arrays[k] = np.asarray(v)
    write_npz(path, arrays)


def write_npz(path, arrays: dict) -> None:
    """``np.savez`` with fixed member timestamps so identical arrays give identical bytes."""
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, value in arrays.items():
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asarray(value), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0)), buf.getvalue())


def load_model(path) -> tuple[MlpModel, dict]:
    with np.load(Path(path), allow_pickle=False) as f:
        arrays = {k: f[k] for k in f.files}
    if str(arrays.get("format")) != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not an advsep checkpoint")
    if int(arrays["version"]) != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {int(arrays['version'])}")
    model = model_from_arrays(arrays, "model.")
    extra = {k: v for k, v in arrays.items() if not k.startswith("model.") and k not in ("format", "version")}
    return model, extra
