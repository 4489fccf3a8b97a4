"""MLP classifiers and the gradient-update container shared by all modules."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor


class GradientUpdate:
    """Ordered per-parameter gradient tensors, in the model's parameter layout."""

    __slots__ = ("names", "arrays")

    def __init__(self, layers: Sequence[tuple[str, np.ndarray]]):
        self.names: list[str] = [name for name, _ in layers]
        self.arrays: list[np.ndarray] = [np.asarray(a, dtype=np.float64) for _, a in layers]

    @classmethod
    def like(cls, template: "GradientUpdate", arrays: Sequence[np.ndarray]) -> "GradientUpdate":
        if len(arrays) != len(template.arrays):
            raise ValueError(f"expected {len(template.arrays)} layers, got {len(arrays)}")
        for name, ref, a in zip(template.names, template.arrays, arrays):
            if np.shape(a) != ref.shape:
                raise ValueError(f"layer {name}: shape {np.shape(a)} does not match {ref.shape}")
        return cls(list(zip(template.names, arrays)))

    def __iter__(self) -> Iterator[tuple[str, np.ndarray]]:
        return iter(zip(self.names, self.arrays))

    def __len__(self) -> int:
        return len(self.arrays)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[self.names.index(name)]

    def __repr__(self) -> str:
        inner = ", ".join(f"{n}{a.shape}" for n, a in self)
        return f"GradientUpdate({inner})"

    @property
    def layout(self) -> list[tuple[str, tuple[int, ...]]]:
        return [(n, a.shape) for n, a in self]

    def check_layout(self, other: "GradientUpdate") -> None:
        if self.layout != other.layout:
            raise ValueError(f"layout mismatch: {self.layout} vs {other.layout}")

    def flat(self) -> np.ndarray:
        return np.concatenate([a.reshape(-1) for a in self.arrays]) if self.arrays else np.zeros(0)

    def map(self, fn) -> "GradientUpdate":
        return GradientUpdate([(n, fn(a)) for n, a in self])

    def scaled(self, factor: float) -> "GradientUpdate":
        return self.map(lambda a: a * factor)

    def __add__(self, other: "GradientUpdate") -> "GradientUpdate":
        self.check_layout(other)
        return GradientUpdate([(n, a + b) for (n, a), b in zip(self, other.arrays)])

    def identical(self, other: "GradientUpdate") -> bool:
        """Bitwise equality of layout and every entry."""
        return self.layout == other.layout and all(
            np.array_equal(a, b) for a, b in zip(self.arrays, other.arrays)
        )

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays)

    def to_dict(self) -> dict:
        return {"names": self.names, "arrays": [a.tolist() for a in self.arrays]}

    @classmethod
    def from_dict(cls, d: dict) -> "GradientUpdate":
        return cls([(n, np.asarray(a, dtype=np.float64)) for n, a in zip(d["names"], d["arrays"])])


@dataclass
class Model:
    """Fully-connected relu network; the last layer is the classifier.

    Weights follow the ``(out_features, in_features)`` layout so that row
    ``i`` of the final weight gradient belongs to class ``i``.
    """

    input_dim: int
    hidden_dims: tuple[int, ...]
    num_classes: int
    params: list[np.ndarray]

    @property
    def layer_names(self) -> list[str]:
        return [f"fc{i + 1}" for i in range(len(self.hidden_dims) + 1)]

    @property
    def param_names(self) -> list[str]:
        return [f"{layer}.{kind}" for layer in self.layer_names for kind in ("weight", "bias")]

    @property
    def final_layer(self) -> str:
        return self.layer_names[-1]

    @property
    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params))

    def with_params(self, params: Sequence[np.ndarray]) -> "Model":
        if [np.shape(p) for p in params] != [p.shape for p in self.params]:
            raise ValueError("parameter shapes do not match the model layout")
        return Model(self.input_dim, self.hidden_dims, self.num_classes,
                     [np.asarray(p, dtype=np.float64) for p in params])

    def apply_update(self, update: GradientUpdate, lr: float) -> "Model":
        """Parameters ``theta - lr * update``."""
        self.check_update(update)
        return self.with_params([p - lr * g for p, g in zip(self.params, update.arrays)])

    def check_update(self, update: GradientUpdate) -> None:
        layout = [(n, p.shape) for n, p in zip(self.param_names, self.params)]
        if update.layout != layout:
            raise ValueError(f"update layout {update.layout} does not match model {layout}")

    def zero_update(self) -> GradientUpdate:
        return GradientUpdate([(n, np.zeros_like(p)) for n, p in zip(self.param_names, self.params)])

    def flat_params(self) -> np.ndarray:
        return np.concatenate([p.reshape(-1) for p in self.params])


def build_mlp(input_dim: int, hidden_dims: Sequence[int], num_classes: int, seed: int) -> Model:
    """Gaussian init with std ``1/sqrt(fan_in)`` for weights and biases."""
    dims = [input_dim, *hidden_dims, num_classes]
    if any(int(d) <= 0 for d in dims):
        raise ValueError(f"all dimensions must be positive, got {dims}")
    rng = np.random.default_rng(seed)
    params: list[np.ndarray] = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        scale = 1.0 / np.sqrt(fan_in)
        params.append(rng.normal(0.0, scale, size=(fan_out, fan_in)))
        params.append(rng.normal(0.0, scale, size=(fan_out,)))
    return Model(int(input_dim), tuple(int(h) for h in hidden_dims), int(num_classes), params)


def forward(params: Sequence[Tensor], x: Tensor, return_hidden: bool = False):
    """Logits for a batch ``x`` of shape (N, input_dim) under tensor parameters."""
    h = x
    hidden = []
    n_layers = len(params) // 2
    for i in range(n_layers):
        w, b = params[2 * i], params[2 * i + 1]
        if h.shape[-1] != w.shape[1]:
            raise ad.ShapeError(f"layer fc{i + 1}: input shape {h.shape} and weight shape {w.shape}")
        h = ad.add(ad.matmul(h, ad.transpose(w)), b)
        if i < n_layers - 1:
            h = ad.relu(h)
            hidden.append(h)
    return (h, hidden) if return_hidden else h


def as_batch(batch, input_dim: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Normalize a batch to ``(X (N, D), y (N,))`` arrays.

    Accepts a pair of arrays or a sequence of objects with ``image`` and
    ``label`` attributes.
    """
    if isinstance(batch, tuple) and len(batch) == 2 and not hasattr(batch[0], "label"):
        x, y = batch
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64).reshape(-1)
        x = x.reshape(len(y), -1) if x.ndim != 2 or x.shape[0] != len(y) else x
    else:
        examples = list(batch)
        if not examples:
            raise ValueError("batch is empty")
        x = np.stack([np.asarray(e.image, dtype=np.float64).reshape(-1) for e in examples])
        y = np.array([e.label for e in examples], dtype=np.int64)
    if len(y) == 0:
        raise ValueError("batch is empty")
    if input_dim is not None and x.shape[1] != input_dim:
        raise ad.ShapeError(f"batch input shape {x.shape} does not match model input ({input_dim},)")
    return x, y


def predict_logits(model: Model, x: np.ndarray) -> np.ndarray:
    params = [Tensor._wrap(p) for p in model.params]
    return forward(params, Tensor(np.atleast_2d(x))).data


def hidden_activations(model: Model, x: np.ndarray) -> list[np.ndarray]:
    params = [Tensor._wrap(p) for p in model.params]
    _, hidden = forward(params, Tensor(np.atleast_2d(x)), return_hidden=True)
    return [h.data for h in hidden]


def layer_inputs(model: Model, x: np.ndarray) -> dict[str, np.ndarray]:
    """Input activations feeding each FC layer, keyed by layer name."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    acts = [x, *hidden_activations(model, x)]
    return dict(zip(model.layer_names, acts))


def batch_loss(model: Model, batch, params: Sequence[np.ndarray] | None = None) -> float:
    """Mean cross-entropy over the batch, without recording."""
    x, y = as_batch(batch, model.input_dim)
    ps = [Tensor._wrap(p) for p in (model.params if params is None else params)]
    return ad.softmax_cross_entropy(forward(ps, Tensor._wrap(x)), y, reduction="mean").item()


def loss_and_grad(model: Model, batch) -> tuple[float, GradientUpdate]:
    """Mean loss and the summed per-example gradient over ``batch``."""
    x, y = as_batch(batch, model.input_dim)
    params = [Tensor(p) for p in model.params]
    with Tape() as tape:
        tape.watch(*params)
        loss_sum = ad.softmax_cross_entropy(forward(params, Tensor._wrap(x)), y, reduction="sum")
    grads = tape.gradient(loss_sum, params)
    update = GradientUpdate([(n, g.data.copy()) for n, g in zip(model.param_names, grads)])
    return loss_sum.item() / len(y), update
