"""Desk-scale classifiers: an MLP and a two-block conv net.

A :class:`Model` is a spec plus an ordered dict of numpy parameter arrays. The
same functions serve the noise-generating source model and the victims.
"""
import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import DimensionError, FormatError, LabelError, SpecError

ARCHES = ("mlp", "smallconv")
DEFAULT_WIDTHS = {"mlp": (256, 128), "smallconv": (16, 32)}

_MAGIC = b"UMDL"
_VERSION = 1


@dataclass(frozen=True)
class ModelSpec:
    arch: str
    input_shape: tuple
    num_classes: int
    widths: tuple = None

    def __post_init__(self):
        if self.arch not in ARCHES:
            raise SpecError(f"unknown architecture {self.arch!r}; expected one of {ARCHES}")
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        widths = DEFAULT_WIDTHS[self.arch] if self.widths is None else self.widths
        object.__setattr__(self, "widths", tuple(int(w) for w in widths))
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise SpecError(f"input_shape must be (C, H, W) with positive sizes, got {self.input_shape}")
        if self.num_classes < 1:
            raise SpecError("num_classes must be positive")
        if any(w < 1 for w in self.widths):
            raise SpecError(f"layer widths must be positive, got {self.widths}")
        if self.arch == "smallconv":
            if len(self.widths) != 2:
                raise SpecError("smallconv takes exactly two channel counts")
            _, h, w = self.input_shape
            if h < 4 or w < 4:
                raise SpecError(f"smallconv needs H, W >= 4 for two 2x2 pools, got {h}x{w}")

    def param_layout(self):
        """``[(name, shape), ...]`` in serialization order.

        An MLP with ``widths=()`` is a single linear layer.
        """
        c, h, w = self.input_shape
        k = self.num_classes
        if self.arch == "mlp":
            sizes = [c * h * w, *self.widths, k]
            layout = []
            for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:]), start=1):
                layout += [(f"fc{i}.weight", (fan_out, fan_in)), (f"fc{i}.bias", (fan_out,))]
            return layout
        c1, c2 = self.widths
        flat = c2 * (h // 2 // 2) * (w // 2 // 2)
        return [
            ("conv1.weight", (c1, c, 3, 3)), ("conv1.bias", (c1,)),
            ("conv2.weight", (c2, c1, 3, 3)), ("conv2.bias", (c2,)),
            ("fc.weight", (k, flat)), ("fc.bias", (k,)),
        ]

    def to_dict(self):
        return {"arch": self.arch, "input_shape": list(self.input_shape),
                "num_classes": self.num_classes, "widths": list(self.widths)}

    @classmethod
    def from_dict(cls, d):
        return cls(d["arch"], tuple(d["input_shape"]), int(d["num_classes"]),
                   tuple(d["widths"]) if d.get("widths") is not None else None)


@dataclass
class Model:
    spec: ModelSpec
    params: dict = field(default_factory=dict)

    def copy(self):
        return Model(self.spec, {k: v.copy() for k, v in self.params.items()})

    def checksum(self):
        h = hashlib.sha256()
        for v in self.params.values():
            h.update(v.tobytes())
        return h.hexdigest()


def init_model(spec, seed):
    """He-normal weights (gain sqrt(2) before relu, 1 for the head), zero biases."""
    rng = np.random.default_rng(seed)
    layout = spec.param_layout()
    head = layout[-2][0]
    params = {}
    for name, shape in layout:
        if name.endswith(".bias"):
            params[name] = np.zeros(shape)
            continue
        fan_in = int(np.prod(shape[1:]))
        gain = 1.0 if name == head else 2.0
        params[name] = rng.normal(0.0, np.sqrt(gain / fan_in), size=shape)
    return Model(spec, params)


def _as_batch(spec, x):
    data = x.data if isinstance(x, T.Tensor) else np.asarray(x, dtype=np.float64)
    if data.shape[1:] != spec.input_shape:
        raise DimensionError(f"model expects inputs of shape (N, {spec.input_shape}), got {data.shape}")
    return x if isinstance(x, T.Tensor) else T.Tensor(data)


def forward(model, x, params=None):
    """Logits for a batch ``x`` of shape (N, C, H, W).

    ``params`` maps names to Tensors; by default the model's arrays are
    wrapped without gradient tracking.
    """
    spec = model.spec
    x = _as_batch(spec, x)
    p = params if params is not None else {k: T.Tensor(v) for k, v in model.params.items()}
    if spec.arch == "mlp":
        h = T.flatten(x)
        n_layers = len(spec.widths) + 1
        for i in range(1, n_layers + 1):
            h = T.linear(h, p[f"fc{i}.weight"], p[f"fc{i}.bias"])
            if i < n_layers:
                h = T.relu(h)
        return h
    h = T.maxpool2d(T.relu(T.conv2d(x, p["conv1.weight"], p["conv1.bias"], padding=1)), 2)
    h = T.maxpool2d(T.relu(T.conv2d(h, p["conv2.weight"], p["conv2.bias"], padding=1)), 2)
    return T.linear(T.flatten(h), p["fc.weight"], p["fc.bias"])


def _check_labels(y, k):
    y = np.asarray(y)
    if y.ndim == 1 and y.size and (y.min() < 0 or y.max() >= k):
        raise LabelError(f"labels must lie in [0, {k})")
    return y


def loss_grad_params(model, batch_x, batch_y):
    """Mean cross-entropy and its gradient for every parameter (dict of arrays)."""
    y = _check_labels(batch_y, model.spec.num_classes)
    params = {k: T.Tensor(v, requires_grad=True) for k, v in model.params.items()}
    loss = T.softmax_cross_entropy(forward(model, batch_x, params), y)
    T.backward(loss, list(params.values()))
    return loss.item(), {k: t.grad for k, t in params.items()}


def loss_grad_input(model, x, y):
    """Mean cross-entropy and its gradient with respect to the input batch."""
    y = _check_labels(y, model.spec.num_classes)
    data = x.data if isinstance(x, T.Tensor) else np.asarray(x, dtype=np.float64)
    xt = T.Tensor(data, requires_grad=True)
    loss = T.softmax_cross_entropy(forward(model, xt), y)
    T.backward(loss, [xt])
    return loss.item(), xt.grad


def logits(model, x, batch_size=1024):
    data = np.asarray(x.data if isinstance(x, T.Tensor) else x, dtype=np.float64)
    _as_batch(model.spec, data[:1])
    out = [forward(model, data[i:i + batch_size]).data for i in range(0, len(data), batch_size)]
    if not out:
        return np.zeros((0, model.spec.num_classes))
    return np.concatenate(out)


def predict(model, x, batch_size=1024):
    """Argmax class per row; ties go to the lowest class index."""
    return logits(model, x, batch_size).argmax(axis=1)


def mean_loss(model, x, y, batch_size=1024):
    data = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    total = 0.0
    for i in range(0, len(data), batch_size):
        loss = T.softmax_cross_entropy(forward(model, data[i:i + batch_size]), y[i:i + batch_size])
        total += loss.item() * len(data[i:i + batch_size])
    return total / max(1, len(data))


# ---------------------------------------------------------------- checkpoint

def save_model(model, path):
    spec_json = json.dumps(model.spec.to_dict(), sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC + bytes([_VERSION]))
        fh.write(struct.pack("<I", len(spec_json)) + spec_json)
        for name, shape in model.spec.param_layout():
            values = np.ascontiguousarray(model.params[name], dtype="<f8").reshape(-1)
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)) + raw)
            fh.write(struct.pack("<Q", values.size) + values.tobytes())


def load_model(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _MAGIC or len(blob) < 9 or blob[4] != _VERSION:
        raise FormatError(f"{path}: not a version-{_VERSION} UMDL checkpoint")
    pos = 5

    def take(n):
        nonlocal pos
        if pos + n > len(blob):
            raise FormatError(f"{path}: truncated checkpoint")
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    (spec_len,) = struct.unpack("<I", take(4))
    spec = ModelSpec.from_dict(json.loads(take(spec_len).decode("utf-8")))
    params = {}
    for name, shape in spec.param_layout():
        (name_len,) = struct.unpack("<H", take(2))
        got = take(name_len).decode("utf-8")
        if got != name:
            raise FormatError(f"{path}: expected parameter {name!r}, found {got!r}")
        (count,) = struct.unpack("<Q", take(8))
        if count != int(np.prod(shape)):
            raise FormatError(f"{path}: {name} has {count} values, spec needs {int(np.prod(shape))}")
        params[name] = np.frombuffer(take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)
    return Model(spec, params)
