"""Gradient-inversion adversaries.

* :func:`infer_label` reads the class off the sign pattern of the final-layer
  weight gradient.
* :func:`invert_gradient` optimizes a dummy input so that its gradient matches
  the observed one; the update direction is a second derivative, obtained by
  differentiating through a recorded backward pass.
* :func:`eot_estimate` averages repeated runs of a randomized defense.
* :func:`train_toy_generator` / :func:`latent_invert` search the latent space
  of a small decoder instead of pixel space.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Literal, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .data import LabeledExample, stack
from .models import GradientUpdate, Model, forward

Distance = Literal["neg-cosine", "l2"]


@dataclass
class AttackConfig:
    iterations: int = 2000
    step_size: float = 0.1
    distance: Distance = "neg-cosine"
    restarts: int = 4
    infer_label: bool = True
    eot_samples: int = 0
    tv_weight: float = 1e-4
    signed: bool = True
    lr_decay: bool = True
    latent_weight: float = 1e-3
    second_order: Literal["exact", "finite-difference"] = "exact"
    fd_step: float = 1e-5
    workers: int = 1

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if self.distance not in ("neg-cosine", "l2"):
            raise ValueError(f"unknown distance {self.distance!r}")
        if self.eot_samples < 0 or self.tv_weight < 0 or self.latent_weight < 0:
            raise ValueError("eot_samples, tv_weight and latent_weight must be non-negative")
        if self.second_order not in ("exact", "finite-difference"):
            raise ValueError(f"unknown second_order mode {self.second_order!r}")


@dataclass
class InversionResult:
    reconstruction: np.ndarray
    inferred_label: int | None
    final_distance: float
    per_restart_distances: list[float] = field(default_factory=list)
    aborted_restarts: list[int] = field(default_factory=list)


# --------------------------------------------------------------------------
# label inference


def infer_label(g: GradientUpdate, model: Model) -> int:
    """Class whose final-layer weight-gradient row sums to a negative value.

    With relu features and cross-entropy only the true class row is
    negative for a single example. If no row, or several rows, are
    negative, the most negative row wins.
    """
    w = g[f"{model.final_layer}.weight"]
    sums = w.sum(axis=1)
    negative = np.flatnonzero(sums < 0)
    if negative.size == 1:
        return int(negative[0])
    return int(np.argmin(sums))


# --------------------------------------------------------------------------
# gradient matching


def _image_side(dim: int) -> int | None:
    side = math.isqrt(dim)
    return side if side * side == dim else None


def total_variation(x: Tensor, side: int) -> Tensor:
    """Mean absolute difference between vertically and horizontally adjacent pixels."""
    img = ad.reshape(x, (x.shape[0], side, side))
    dv = ad.absolute(ad.sub(img[:, 1:, :], img[:, :-1, :]))
    dh = ad.absolute(ad.sub(img[:, :, 1:], img[:, :, :-1]))
    return ad.add(ad.div(ad.sum_all(dv), float(dv.size)), ad.div(ad.sum_all(dh), float(dh.size)))


def _update_distance(grads: Sequence[Tensor], target: Sequence[np.ndarray], distance: str) -> Tensor:
    if distance == "l2":
        total = None
        for g, t in zip(grads, target):
            d = ad.sub(g, Tensor._wrap(t))
            s = ad.sum_all(ad.mul(d, d))
            total = s if total is None else ad.add(total, s)
        return total
    dot = None
    sq = None
    for g, t in zip(grads, target):
        d = ad.sum_all(ad.mul(g, Tensor._wrap(t)))
        s = ad.sum_all(ad.mul(g, g))
        dot = d if dot is None else ad.add(dot, d)
        sq = s if sq is None else ad.add(sq, s)
    tnorm = math.sqrt(sum(float(np.dot(t.ravel(), t.ravel())) for t in target))
    if tnorm == 0.0 or sq.item() == 0.0:
        # Cosine is undefined against a zero vector; report maximal distance.
        return ad.add(ad.mul(dot, 0.0), 1.0)
    return ad.sub(1.0, ad.div(dot, ad.mul(ad.sqrt(sq), tnorm)))


def _labels_target(labels):
    if isinstance(labels, Tensor):
        return labels
    return np.atleast_1d(np.asarray(labels, dtype=np.int64))


def matching_objective(
    model: Model,
    x: Tensor,
    labels,
    g_target: GradientUpdate,
    distance: str,
    tv_weight: float,
) -> Tensor:
    """Tensor-valued objective; call inside an active tape watching ``x``.

    ``labels`` is an int array or a Tensor of soft targets (N, C).
    """
    params = [Tensor._wrap(p) for p in model.params]
    with Tape() as inner:
        inner.watch(*params)
        loss = ad.softmax_cross_entropy(forward(params, x), _labels_target(labels), reduction="sum")
    grads = inner.gradient(loss, params)
    obj = _update_distance(grads, g_target.arrays, distance)
    side = _image_side(x.shape[1])
    if tv_weight and side is not None and side > 1:
        obj = ad.add(obj, ad.mul(tv_weight, total_variation(x, side)))
    return obj


def gradient_matching_loss(
    model: Model,
    x_dummy,
    y_dummy,
    g_target: GradientUpdate,
    distance: str = "neg-cosine",
    tv_weight: float = 0.0,
) -> float:
    """Distance between the dummy batch's gradient and ``g_target``, plus TV."""
    model.check_update(g_target)
    x = Tensor(np.asarray(x_dummy, dtype=np.float64).reshape(-1, model.input_dim))
    return matching_objective(model, x, y_dummy, g_target, distance, tv_weight).item()


def matching_loss_and_input_grad(
    model: Model, x_dummy, y_dummy, g_target: GradientUpdate, distance: str, tv_weight: float
) -> tuple[float, np.ndarray]:
    """Objective value and its exact derivative with respect to the dummy input."""
    x = Tensor(np.asarray(x_dummy, dtype=np.float64).reshape(-1, model.input_dim))
    with Tape() as outer:
        outer.watch(x)
        obj = matching_objective(model, x, y_dummy, g_target, distance, tv_weight)
    dx = ad.grad_of_grad(outer, obj, x)
    return obj.item(), dx.data.reshape(np.shape(x_dummy))


# --------------------------------------------------------------------------
# optimizer


class Adam:
    """Adam over a list of arrays, with an optional sign transform on gradients."""

    def __init__(self, shapes, lr: float, betas=(0.9, 0.999), eps: float = 1e-8, signed: bool = False):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.signed = signed
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.t = 0

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> list[np.ndarray]:
        self.t += 1
        out = []
        for i, (p, g) in enumerate(zip(params, grads)):
            if self.signed:
                g = np.sign(g)
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g * g
            mhat = self.m[i] / (1 - self.b1**self.t)
            vhat = self.v[i] / (1 - self.b2**self.t)
            out.append(p - self.lr * mhat / (np.sqrt(vhat) + self.eps))
        return out


def _lr_at(config: AttackConfig, it: int) -> float:
    if not config.lr_decay or config.iterations == 0:
        return config.step_size
    n = config.iterations
    drops = sum(it >= m for m in (3 * n // 8, 5 * n // 8, 7 * n // 8))
    return config.step_size * 0.1**drops


def _restart_stream(rng, r: int) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        raise TypeError("pass an integer seed or seed tuple so restarts get independent streams")
    key = (int(rng),) if isinstance(rng, (int, np.integer)) else tuple(int(v) for v in rng)
    return np.random.default_rng([*key, r])


def _fd_input_grad(fn: Callable[[np.ndarray], float], x: np.ndarray, h: float) -> np.ndarray:
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += h
        xm[i] -= h
        gf[i] = (fn(xp.reshape(x.shape)) - fn(xm.reshape(x.shape))) / (2 * h)
    return g


def _objective_and_grads(model, x, label_logits, label, g_obs, config):
    """Returns (value, dx, dlabel_logits or None)."""
    if config.second_order == "finite-difference":
        target = label if label_logits is None else ad.softmax(Tensor(label_logits[None, :]))

        def fn(xv):
            return gradient_matching_loss(model, xv, target, g_obs, config.distance, config.tv_weight)

        value = fn(x)
        dx = _fd_input_grad(fn, x, config.fd_step)
        dl = None
        if label_logits is not None:
            def fl(lv):
                return gradient_matching_loss(model, x, ad.softmax(Tensor(lv[None, :])), g_obs,
                                              config.distance, config.tv_weight)
            dl = _fd_input_grad(fl, label_logits, config.fd_step)
        return value, dx, dl

    xt = Tensor(x)
    with Tape() as outer:
        outer.watch(xt)
        if label_logits is None:
            target = label
        else:
            lt = Tensor(label_logits[None, :])
            outer.watch(lt)
            target = ad.softmax(lt)
        obj = matching_objective(model, xt, target, g_obs, config.distance, config.tv_weight)
    sources = [xt] if label_logits is None else [xt, lt]
    grads = outer.gradient(obj, sources)
    dl = None if label_logits is None else grads[1].data.reshape(-1)
    return obj.item(), grads[0].data, dl


def _run_restart(model: Model, g_obs: GradientUpdate, config: AttackConfig, gen: np.random.Generator,
                 label: int | None):
    x = np.clip(gen.standard_normal((1, model.input_dim)), 0.0, 1.0)
    label_logits = None if label is not None else gen.standard_normal(model.num_classes)
    label_arr = None if label is None else np.array([label])
    shapes = [x.shape] + ([label_logits.shape] if label_logits is not None else [])
    opt = Adam(shapes, config.step_size, signed=config.signed)
    best_val, best_x, best_label = math.inf, x.copy(), label
    for it in range(config.iterations + 1):
        value, dx, dl = _objective_and_grads(model, x, label_logits, label_arr, g_obs, config)
        if not math.isfinite(value):
            return None
        if value < best_val:
            best_val = value
            best_x = x.copy()
            best_label = label if label_logits is None else int(np.argmax(label_logits))
        if it == config.iterations:
            break
        opt.lr = _lr_at(config, it)
        params = [x] + ([label_logits] if label_logits is not None else [])
        grads = [dx] + ([dl] if dl is not None else [])
        stepped = opt.step(params, grads)
        x = np.clip(stepped[0], 0.0, 1.0)
        if label_logits is not None:
            label_logits = stepped[1]
    return best_val, best_x, best_label


def invert_gradient(
    model: Model,
    g_observed: GradientUpdate,
    config: AttackConfig,
    rng,
    image_shape: tuple[int, ...] | None = None,
) -> InversionResult:
    """Reconstruct a single input from its (possibly defended) gradient.

    Each restart starts from clamped N(0, 1) noise and runs Adam on the
    gradient-matching objective, clamping pixels to [0, 1] after every
    step. The restart with the lowest matching distance is reported; ground
    truth is never consulted. ``rng`` is an int or seed tuple; restart ``r``
    uses the stream ``(*rng, r)``.
    """
    model.check_update(g_observed)
    label = infer_label(g_observed, model) if config.infer_label else None

    def run(r):
        return _run_restart(model, g_observed, config, _restart_stream(rng, r), label)

    if config.workers > 1 and config.restarts > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            outcomes = list(pool.map(run, range(config.restarts)))
    else:
        outcomes = [run(r) for r in range(config.restarts)]

    distances, aborted = [], []
    best = None
    for r, out in enumerate(outcomes):
        if out is None:
            distances.append(math.inf)
            aborted.append(r)
            continue
        distances.append(out[0])
        if best is None or out[0] < best[0]:
            best = out
    shape = image_shape or _default_shape(model.input_dim)
    if best is None:
        return InversionResult(np.zeros(shape), label, math.inf, distances, aborted)
    return InversionResult(best[1].reshape(shape), best[2], best[0], distances, aborted)


def _default_shape(dim: int) -> tuple[int, ...]:
    side = _image_side(dim)
    return (side, side) if side else (dim,)


# --------------------------------------------------------------------------
# expectation over transformation


def eot_estimate(defense_sampler: Callable[[int], GradientUpdate], samples: int) -> GradientUpdate:
    """Elementwise mean of ``samples`` defended gradients, summed in draw order."""
    if samples < 1:
        raise ValueError("samples must be >= 1")
    first = defense_sampler(0)
    acc = [a.copy() for a in first.arrays]
    for i in range(1, samples):
        g = defense_sampler(i)
        first.check_layout(g)
        for a, b in zip(acc, g.arrays):
            a += b
    return GradientUpdate.like(first, [a / samples for a in acc])


# --------------------------------------------------------------------------
# latent-space inversion with a toy decoder


@dataclass
class Generator:
    """Two-layer decoder: latent -> relu hidden -> sigmoid pixels."""

    latent_dim: int
    output_dim: int
    params: list[np.ndarray]

    def decode_tensor(self, z: Tensor) -> Tensor:
        w1, b1, w2, b2 = (Tensor._wrap(p) for p in self.params)
        h = ad.relu(ad.add(ad.matmul(z, ad.transpose(w1)), b1))
        return ad.sigmoid(ad.add(ad.matmul(h, ad.transpose(w2)), b2))

    def decode(self, z) -> np.ndarray:
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        return self.decode_tensor(Tensor(z)).data


def train_toy_generator(
    public_examples: Sequence[LabeledExample],
    latent_dim: int,
    steps: int,
    seed: int,
    hidden: int = 64,
    lr: float = 1e-2,
    latent_penalty: float = 1e-3,
) -> Generator:
    """Fit an autoencoder on public images by reconstruction loss; keep the decoder.

    A small penalty on code norms keeps the codes near the origin, which is
    where the latent search starts and what its regularizer favors.
    """
    x, _ = stack(public_examples)
    if x.size == 0:
        raise ValueError("public_examples is empty")
    d = x.shape[1]
    rng = np.random.default_rng(seed)

    def init(o, i):
        return rng.normal(0.0, 1.0 / math.sqrt(i), size=(o, i))

    enc = [init(hidden, d), np.zeros(hidden), init(latent_dim, hidden), np.zeros(latent_dim)]
    dec = [init(hidden, latent_dim), np.zeros(hidden), init(d, hidden), np.zeros(d)]
    opt = Adam([p.shape for p in enc + dec], lr)
    xt = Tensor(x)
    for _ in range(steps):
        ps = [Tensor(p) for p in enc + dec]
        with Tape() as tape:
            tape.watch(*ps)
            h = ad.relu(ad.add(ad.matmul(xt, ad.transpose(ps[0])), ps[1]))
            z = ad.add(ad.matmul(h, ad.transpose(ps[2])), ps[3])
            hd = ad.relu(ad.add(ad.matmul(z, ad.transpose(ps[4])), ps[5]))
            out = ad.sigmoid(ad.add(ad.matmul(hd, ad.transpose(ps[6])), ps[7]))
            diff = ad.sub(out, xt)
            loss = ad.div(ad.add(ad.sum_all(ad.mul(diff, diff)),
                                 ad.mul(latent_penalty, ad.sum_all(ad.mul(z, z)))), float(len(x)))
        grads = [g.data for g in tape.gradient(loss, ps)]
        new = opt.step([p.data for p in ps], grads)
        enc, dec = new[:4], new[4:]
    return Generator(latent_dim, d, [np.array(p) for p in dec])


def latent_invert(
    model: Model,
    g_observed: GradientUpdate,
    generator: Generator,
    config: AttackConfig,
    rng=0,
) -> InversionResult:
    """Search the decoder's latent space for an image whose gradient matches.

    Minimizes ``D(F(G(z)), g) + latent_weight * |z|^2`` with Adam from
    N(0, 1) latent starts, best restart by objective value.
    """
    model.check_update(g_observed)
    if generator.output_dim != model.input_dim:
        raise ValueError("generator output does not match the model input")
    label = infer_label(g_observed, model) if config.infer_label else None
    shape = _default_shape(model.input_dim)

    def objective(z: np.ndarray, label_logits):
        zt = Tensor(z)
        with Tape() as outer:
            outer.watch(zt)
            if label_logits is None:
                target = np.array([label])
                sources = [zt]
            else:
                lt = Tensor(label_logits[None, :])
                outer.watch(lt)
                target = ad.softmax(lt)
                sources = [zt, lt]
            img = generator.decode_tensor(zt)
            obj = matching_objective(model, img, target, g_observed, config.distance, config.tv_weight)
            if config.latent_weight:
                obj = ad.add(obj, ad.mul(config.latent_weight, ad.sum_all(ad.mul(zt, zt))))
        grads = outer.gradient(obj, sources)
        return obj.item(), [g.data.reshape(s.shape) for g, s in zip(grads, sources)]

    def run(r):
        gen = _restart_stream(rng, r)
        z = gen.standard_normal((1, generator.latent_dim))
        label_logits = None if label is not None else gen.standard_normal(model.num_classes)
        params = [z] + ([label_logits] if label_logits is not None else [])
        opt = Adam([p.shape for p in params], config.step_size, signed=config.signed)
        best = (math.inf, z.copy(), label)
        for it in range(config.iterations + 1):
            value, grads = objective(params[0], params[1] if len(params) > 1 else None)
            if not math.isfinite(value):
                return None
            if value < best[0]:
                lab = label if len(params) == 1 else int(np.argmax(params[1]))
                best = (value, params[0].copy(), lab)
            if it == config.iterations:
                break
            opt.lr = _lr_at(config, it)
            params = opt.step(params, [g.reshape(p.shape) for g, p in zip(grads, params)])
        return best

    outcomes = [run(r) for r in range(config.restarts)]
    distances, aborted, best = [], [], None
    for r, out in enumerate(outcomes):
        if out is None:
            distances.append(math.inf)
            aborted.append(r)
            continue
        distances.append(out[0])
        if best is None or out[0] < best[0]:
            best = out
    if best is None:
        return InversionResult(np.zeros(shape), label, math.inf, distances, aborted)
    img = generator.decode(best[1]).reshape(shape)
    return InversionResult(img, best[2], best[0], distances, aborted)
