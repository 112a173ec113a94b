"""Small feed-forward classifiers, confidence margins and checkpoints."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from gaeguide.autodiff import Tensor, as_tensor, backward, cross_entropy, relu, softmax

CHECKPOINT_MAGIC = b"GAECKPT1"


@dataclass(frozen=True)
class ModelSpec:
    input_dim: int
    num_classes: int
    hidden: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        widths = (self.input_dim, *self.hidden, self.num_classes)
        if any(w <= 0 for w in widths):
            raise ValueError(f"layer widths must be positive, got {widths}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden, self.num_classes)

    @property
    def param_shapes(self) -> list[tuple[int, ...]]:
        shapes = []
        for fan_in, fan_out in zip(self.widths[:-1], self.widths[1:]):
            shapes += [(fan_in, fan_out), (fan_out,)]
        return shapes

    @property
    def param_count(self) -> int:
        return sum(math.prod(s) for s in self.param_shapes)


@dataclass
class Model:
    """ReLU MLP: alternating weight (in, out) and bias (out,) parameters."""

    spec: ModelSpec
    params: list[Tensor] = field(default_factory=list)

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes

    @property
    def input_dim(self) -> int:
        return self.spec.input_dim

    @classmethod
    def logistic(cls, w, b: float = 0.0) -> Model:
        """Binary logistic model p(class 0) = sigmoid(w.x + b) as a two-logit linear layer."""
        w = np.asarray(w, dtype=np.float64).reshape(-1)
        weight = np.zeros((w.size, 2))
        weight[:, 0] = w
        bias = np.array([b, 0.0])
        return cls(ModelSpec(w.size, 2), [Tensor(weight, requires_grad=True), Tensor(bias, requires_grad=True)])

    def logits(self, x, frozen: bool = False) -> Tensor:
        x = as_tensor(x)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ValueError(f"expected input of shape (B, {self.input_dim}), got {x.shape}")
        params = self.params
        if frozen:
            params = [Tensor(p.data) for p in params]
        h = x
        n_layers = len(params) // 2
        for i in range(n_layers):
            h = h @ params[2 * i] + params[2 * i + 1]
            if i < n_layers - 1:
                h = relu(h)
        return h

    def __call__(self, x) -> Tensor:
        return softmax(self.logits(x))

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def state(self) -> list[np.ndarray]:
        return [p.data.copy() for p in self.params]

    def copy(self) -> Model:
        return Model(self.spec, [Tensor(p.data.copy(), requires_grad=True) for p in self.params])


def init_model(spec: ModelSpec, seed: int) -> Model:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every weight and bias."""
    rng = np.random.default_rng(seed)
    params = []
    for fan_in, fan_out in zip(spec.widths[:-1], spec.widths[1:]):
        bound = 1.0 / math.sqrt(fan_in)
        params.append(Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)), requires_grad=True))
        params.append(Tensor(rng.uniform(-bound, bound, size=fan_out), requires_grad=True))
    return Model(spec, params)


def predict(model: Model, x) -> Tensor:
    """Softmax class probabilities, one row per input."""
    return softmax(model.logits(x, frozen=True))


@dataclass(frozen=True)
class MarginView:
    true_conf: float
    top_other_conf: float
    predicted_class: int
    margin: float


def margins(model: Model, x, y) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised ``f_t - f_m`` on softmax confidences, plus predicted classes."""
    probs = predict(model, x).data
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    rows = np.arange(len(y))
    true_conf = probs[rows, y]
    others = probs.copy()
    others[rows, y] = -np.inf
    return true_conf - others.max(axis=1), probs.argmax(axis=1)


def margin(model: Model, x, y_true: int) -> MarginView:
    if not 0 <= y_true < model.num_classes:
        raise ValueError(f"label {y_true} out of range [0, {model.num_classes})")
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    probs = predict(model, x).data[0]
    others = probs.copy()
    others[y_true] = -np.inf
    top_other = float(others.max())
    return MarginView(
        true_conf=float(probs[y_true]),
        top_other_conf=top_other,
        predicted_class=int(probs.argmax()),
        margin=float(probs[y_true]) - top_other,
    )


def input_gradient(model: Model, x, y, reduction: str = "mean") -> Tensor:
    """d L_CE(h(x), y) / dx with the parameters held fixed.

    ``reduction="sum"`` gives each row the gradient of its own loss, which is
    what the per-sample attacks want.
    """
    xt = Tensor(np.array(as_tensor(x).data, copy=True), requires_grad=True)
    loss = cross_entropy(model.logits(xt, frozen=True), y, reduction=reduction)
    backward(loss)
    return Tensor(xt.grad)


def save_checkpoint(model: Model, path) -> None:
    """Binary checkpoint: magic, u32 header length, JSON header, little-endian float64 arrays."""
    header = json.dumps(
        {"spec": asdict(model.spec), "shapes": [list(p.shape) for p in model.params]},
        sort_keys=True,
    ).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for p in model.params:
            fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def load_checkpoint(path) -> Model:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a model checkpoint")
    (hlen,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12 : 12 + hlen])
    spec = ModelSpec(**header["spec"])
    offset = 12 + hlen
    params = []
    for shape in header["shapes"]:
        n = math.prod(shape)
        arr = np.frombuffer(raw, dtype="<f8", count=n, offset=offset).astype(np.float64).reshape(shape)
        params.append(Tensor(arr, requires_grad=True))
        offset += 8 * n
    if offset != len(raw):
        raise ValueError(f"{path}: trailing or missing parameter bytes")
    if [tuple(s) for s in header["shapes"]] != spec.param_shapes:
        raise ValueError(f"{path}: parameter shapes do not match the model spec")
    return Model(spec, params)
