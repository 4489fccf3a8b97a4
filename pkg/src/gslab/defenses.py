"""Gradient defenses: orthogonal-subspace sampling (CENSOR) and four baselines.

Every defense maps an original :class:`GradientUpdate` to a protected one with
the same layout. Randomness comes from an explicit generator or a seed key;
CENSOR trial ``t`` draws from the stream ``(*key, t)`` so trials can run in
any order, or concurrently, and still give the same result.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Literal, Sequence, Union

import numpy as np

from . import kernels
from .data import LabeledExample
from .models import GradientUpdate, Model, as_batch, batch_loss, layer_inputs, loss_and_grad

RngLike = Union[np.random.Generator, Sequence[int], int]

FallbackMode = Literal["paper-faithful", "strict-privacy"]
SamplingSource = Literal["gaussian", "decoy"]
LossReference = Literal["initial", "gradient-step"]


@dataclass
class CensorConfig:
    """Knobs for the orthogonal-subspace defense.

    ``loss_reference`` picks the loss a candidate must beat: the loss at the
    broadcast parameters (``"initial"``, as in the original pseudocode) or
    the loss after a plain step along the true gradient (``"gradient-step"``).
    """

    trials: int = 20
    temperature: float = 0.0
    perturbation_scale: float = 1.0
    fallback_mode: FallbackMode = "paper-faithful"
    sampling_source: SamplingSource = "gaussian"
    decoys: list[LabeledExample] = field(default_factory=list)
    loss_reference: LossReference = "initial"
    workers: int = 1

    def __post_init__(self):
        if int(self.trials) < 1:
            raise ValueError(f"trials must be >= 1, got {self.trials}")
        if self.temperature < 0:
            raise ValueError(f"temperature must be >= 0, got {self.temperature}")
        if self.perturbation_scale <= 0:
            raise ValueError("perturbation_scale must be positive")
        if self.fallback_mode not in ("paper-faithful", "strict-privacy"):
            raise ValueError(f"unknown fallback_mode {self.fallback_mode!r}")
        if self.sampling_source not in ("gaussian", "decoy"):
            raise ValueError(f"unknown sampling_source {self.sampling_source!r}")
        if self.sampling_source == "decoy" and not self.decoys:
            raise ValueError("sampling_source='decoy' needs a non-empty decoy set")
        if self.loss_reference not in ("initial", "gradient-step"):
            raise ValueError(f"unknown loss_reference {self.loss_reference!r}")


@dataclass
class CensorSelection:
    update: GradientUpdate
    original: GradientUpdate
    best_loss: float
    reference_loss: float
    chosen_trial: int | None
    fallback: bool
    trial_losses: list[float]


def _key(rng: RngLike) -> tuple[int, ...]:
    if isinstance(rng, np.random.Generator):
        return (int(rng.integers(0, 2**63 - 1)),)
    if isinstance(rng, (int, np.integer)):
        return (int(rng),)
    return tuple(int(v) for v in rng)


def _generator(rng: RngLike) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(list(_key(rng)))


# --------------------------------------------------------------------------
# CENSOR building blocks


def orthogonal_grad(
    original: GradientUpdate,
    rng: RngLike,
    scale: float = 1.0,
    samples: GradientUpdate | None = None,
) -> GradientUpdate:
    """Project a random direction off each layer of ``original``.

    ``samples`` supplies the raw directions (one per layer); otherwise they
    are drawn from N(0, scale^2). A zero layer gradient leaves the direction
    unchanged.
    """
    if samples is None:
        gen = _generator(rng)
        samples = original.map(lambda a: gen.normal(0.0, scale, size=a.shape))
    else:
        original.check_layout(samples)
    return GradientUpdate(
        [(n, kernels.project_out(g_r, g_l)) for (n, g_l), g_r in zip(original, samples.arrays)]
    )


def normalize_grad(orth: GradientUpdate, original: GradientUpdate) -> GradientUpdate:
    """Rescale each layer of ``orth`` to the norm of the matching original layer."""
    orth.check_layout(original)
    return GradientUpdate(
        [(n, kernels.rescale_to(g_o, g_l)) for (n, g_o), g_l in zip(orth, original.arrays)]
    )


def layer_cosines(a: GradientUpdate, b: GradientUpdate) -> list[float]:
    """Per-layer normalized inner products; 0.0 where either layer is zero."""
    a.check_layout(b)
    out = []
    for x, y in zip(a.arrays, b.arrays):
        nx, ny = math.sqrt(kernels.sq_norm(x)), math.sqrt(kernels.sq_norm(y))
        out.append(0.0 if nx == 0.0 or ny == 0.0 else kernels.dot(x, y) / (nx * ny))
    return out


def sample_cold_index(losses: Sequence[float], temperature: float, rng: RngLike) -> int:
    """Index drawn with probability proportional to ``exp(-loss / temperature)``.

    Temperature 0 returns the first minimal-loss index.
    """
    losses = np.asarray(losses, dtype=np.float64)
    if losses.size == 0:
        raise ValueError("no candidates")
    if temperature < 0:
        raise ValueError("temperature must be >= 0")
    if temperature == 0 or not np.all(np.isfinite(losses)):
        return int(np.argmin(np.where(np.isfinite(losses), losses, np.inf)))
    logits = -(losses - losses.min()) / temperature
    p = np.exp(logits)
    p /= p.sum()
    return int(_generator(rng).choice(len(p), p=p))


def mh_accept_probability(
    loss_current: float,
    loss_proposed: float,
    prior_current: float,
    prior_proposed: float,
    M: float,
) -> float:
    """Acceptance probability of a proposal under the tempered posterior.

    Losses are negative log-likelihoods and priors are log-densities, so the
    ratio is ``exp(M * (loss_current - loss_proposed) + prior_proposed - prior_current)``.
    """
    if not M > 0:
        raise ValueError(f"temperature M must be positive, got {M}")
    if not (math.isfinite(loss_current) and math.isfinite(loss_proposed)):
        raise ValueError("losses must be finite")
    log_ratio = M * (loss_current - loss_proposed) + prior_proposed - prior_current
    return 1.0 if log_ratio >= 0 else math.exp(log_ratio)


def isotropic_log_prior(params: Sequence[np.ndarray], std: float = 1.0) -> float:
    """Log-density of an isotropic Gaussian N(0, std^2 I) over all parameters."""
    flat = np.concatenate([np.ravel(p) for p in params])
    return float(-0.5 * np.dot(flat, flat) / std**2 - flat.size * (math.log(std) + 0.5 * math.log(2 * math.pi)))


def metropolis_reference_update(
    model: Model,
    batch,
    M: float,
    epsilon: float,
    rng: RngLike,
    max_proposals: int = 1000,
    prior_std: float = 1.0,
) -> tuple[GradientUpdate, int]:
    """Accept/reject sampler for a parameter perturbation ``G ~ N(0, epsilon I)``.

    Proposals are redrawn until one is accepted. Returns the accepted
    perturbation expressed as an update (``theta + G == theta - 1 * update``)
    and the number of proposals used. Reference implementation only.
    """
    gen = _generator(rng)
    loss_cur = batch_loss(model, batch) * len(as_batch(batch)[1])
    prior_cur = isotropic_log_prior(model.params, prior_std)
    for attempt in range(1, max_proposals + 1):
        pert = [gen.normal(0.0, math.sqrt(epsilon), size=p.shape) for p in model.params]
        proposed = [p + d for p, d in zip(model.params, pert)]
        loss_prop = batch_loss(model, batch, proposed) * len(as_batch(batch)[1])
        prior_prop = isotropic_log_prior(proposed, prior_std)
        if gen.random() < mh_accept_probability(loss_cur, loss_prop, prior_cur, prior_prop, M):
            return GradientUpdate(list(zip(model.param_names, [-d for d in pert]))), attempt
    raise RuntimeError(f"no proposal accepted after {max_proposals} attempts")


def _decoy_direction(model: Model, decoys: Sequence[LabeledExample], gen: np.random.Generator) -> GradientUpdate:
    example = decoys[int(gen.integers(len(decoys)))]
    return loss_and_grad(model, [example])[1]


def _trial(model: Model, batch, original: GradientUpdate, config: CensorConfig,
           key: tuple[int, ...], t: int, lr: float) -> tuple[GradientUpdate, float]:
    gen = np.random.default_rng([*key, t])
    samples = None
    if config.sampling_source == "decoy":
        samples = _decoy_direction(model, config.decoys, gen)
    orth = orthogonal_grad(original, gen, config.perturbation_scale, samples)
    cand = normalize_grad(orth, original)
    trial_params = [p - lr * g for p, g in zip(model.params, cand.arrays)]
    return cand, batch_loss(model, batch, trial_params)


def censor_select(
    model: Model,
    client_data,
    config: CensorConfig,
    rng: RngLike,
    learning_rate: float,
) -> CensorSelection:
    """Run the trial loop and report the selected update with diagnostics."""
    x, y = as_batch(client_data, model.input_dim)
    batch = (x, y)
    _, original = loss_and_grad(model, batch)
    if config.loss_reference == "initial":
        reference = batch_loss(model, batch)
    else:
        reference = batch_loss(model, batch, [p - learning_rate * g for p, g in zip(model.params, original.arrays)])
    key = _key(rng)

    def run(t):
        return _trial(model, batch, original, config, key, t, learning_rate)

    if config.workers > 1 and config.trials > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            results = list(pool.map(run, range(config.trials)))
    else:
        results = [run(t) for t in range(config.trials)]
    losses = [loss for _, loss in results]
    finite = [math.isfinite(v) for v in losses]

    if config.temperature > 0 and any(finite):
        chosen = sample_cold_index(losses, config.temperature, [*key, config.trials])
    else:
        chosen = sample_cold_index(losses, 0.0, key)
    chosen_loss = losses[chosen]
    improves = math.isfinite(chosen_loss) and chosen_loss < reference
    if improves or (config.fallback_mode == "strict-privacy" and math.isfinite(chosen_loss)):
        return CensorSelection(results[chosen][0], original, chosen_loss, reference, chosen, False, losses)
    if config.fallback_mode == "strict-privacy":
        # Every candidate diverged; an all-zero update still leaks nothing.
        return CensorSelection(model.zero_update(), original, reference, reference, None, False, losses)
    return CensorSelection(original, original, reference, reference, None, True, losses)


def censor_local_update(
    model: Model,
    client_data,
    config: CensorConfig,
    rng: RngLike,
    learning_rate: float = 0.1,
) -> GradientUpdate:
    """Protected local update: the best of ``config.trials`` orthogonal candidates.

    ``model`` carries the broadcast parameters. In ``paper-faithful`` mode the
    raw gradient comes back when no candidate lowers the loss below the
    reference; ``strict-privacy`` returns the best candidate regardless.
    """
    return censor_select(model, client_data, config, rng, learning_rate).update


# --------------------------------------------------------------------------
# baselines


def noise_defense(g: GradientUpdate, sigma: float, rng: RngLike) -> GradientUpdate:
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0:
        return g.map(np.copy)
    gen = _generator(rng)
    return g.map(lambda a: a + gen.normal(0.0, sigma, size=a.shape))


def clip_defense(g: GradientUpdate, b: float) -> GradientUpdate:
    """Per-layer norm clipping: ``g_l * min(1, b / |g_l|)``."""
    if b <= 0:
        raise ValueError("clipping bound must be positive")
    return g.map(lambda a: kernels.clip_to_norm(a, b))


def _top_count(ratio: float, n: int) -> int:
    # The small slack absorbs float error in ratio * n, e.g. (1/3) * 3.
    return min(n, max(0, math.ceil(ratio * n - 1e-9)))


def _keep_top(values: np.ndarray, scores: np.ndarray, k: int) -> np.ndarray:
    """Mask keeping the k highest scores, lowest index first among ties."""
    order = np.argsort(-scores, kind="stable")
    mask = np.zeros(values.size, dtype=bool)
    mask[order[:k]] = True
    return mask


def topk_defense(g: GradientUpdate, keep_ratio: float, per_layer: bool = False) -> GradientUpdate:
    """Keep the ``ceil(keep_ratio * n)`` largest-magnitude entries, zero the rest.

    ``n`` counts the whole flattened update unless ``per_layer`` is set.
    """
    if not 0.0 < keep_ratio <= 1.0:
        raise ValueError(f"keep_ratio must lie in (0, 1], got {keep_ratio}")
    if per_layer:
        def prune(a):
            flat = a.reshape(-1)
            mask = _keep_top(flat, np.abs(flat), _top_count(keep_ratio, flat.size))
            return np.where(mask, flat, 0.0).reshape(a.shape)
        return g.map(prune)
    flat = g.flat()
    mask = _keep_top(flat, np.abs(flat), _top_count(keep_ratio, flat.size))
    kept = np.where(mask, flat, 0.0)
    arrays, start = [], 0
    for a in g.arrays:
        arrays.append(kept[start:start + a.size].reshape(a.shape))
        start += a.size
    return GradientUpdate.like(g, arrays)


def soteria_leakage_scores(weight_grad: np.ndarray, inputs: np.ndarray) -> np.ndarray:
    """|gradient entry| times mean |input activation| of its input unit."""
    act = np.mean(np.abs(np.atleast_2d(inputs)), axis=0)
    return np.abs(weight_grad) * act[None, :]


def soteria_mask_defense(
    g: GradientUpdate, model: Model, batch, prune_ratio: float, defended_layer: str
) -> GradientUpdate:
    """Zero the most leaky ``ceil(prune_ratio * n)`` weight-gradient entries of one FC layer.

    This is a deterministic score-based mask, not the full representation
    optimization of the original Soteria defense.
    """
    if not 0.0 <= prune_ratio < 1.0:
        raise ValueError(f"prune_ratio must lie in [0, 1), got {prune_ratio}")
    if defended_layer not in model.layer_names:
        raise ValueError(f"{defended_layer!r} is not an FC layer of the model ({model.layer_names})")
    x, _ = as_batch(batch, model.input_dim)
    name = f"{defended_layer}.weight"
    w = g[name]
    scores = soteria_leakage_scores(w, layer_inputs(model, x)[defended_layer]).reshape(-1)
    prune = _keep_top(scores, scores, _top_count(prune_ratio, scores.size))
    masked = np.where(prune, 0.0, w.reshape(-1)).reshape(w.shape)
    return GradientUpdate([(n, masked if n == name else a.copy()) for n, a in g])


# --------------------------------------------------------------------------
# uniform entry point


@dataclass
class DefenseSpec:
    """Named defense with its parameters; ``name`` is one of
    none, censor, noise, clip, topk, soteria."""

    name: str = "none"
    censor: CensorConfig = field(default_factory=CensorConfig)
    sigma: float = 0.1
    clip_bound: float = 1.0
    keep_ratio: float = 0.1
    per_layer_topk: bool = False
    prune_ratio: float = 0.5
    defended_layer: str | None = None

    def __post_init__(self):
        if self.name not in DEFENSES:
            raise ValueError(f"unknown defense {self.name!r}; choose from {sorted(DEFENSES)}")


DEFENSES = ("none", "censor", "noise", "clip", "topk", "soteria")


def defended_update(
    model: Model, batch, spec: DefenseSpec, rng: RngLike, learning_rate: float = 0.1
) -> GradientUpdate:
    """Apply ``spec`` to the client's gradient on ``batch``."""
    if spec.name == "censor":
        return censor_local_update(model, batch, spec.censor, rng, learning_rate)
    _, g = loss_and_grad(model, batch)
    if spec.name == "none":
        return g
    if spec.name == "noise":
        return noise_defense(g, spec.sigma, rng)
    if spec.name == "clip":
        return clip_defense(g, spec.clip_bound)
    if spec.name == "topk":
        return topk_defense(g, spec.keep_ratio, spec.per_layer_topk)
    return soteria_mask_defense(g, model, batch, spec.prune_ratio, spec.defended_layer or model.final_layer)
