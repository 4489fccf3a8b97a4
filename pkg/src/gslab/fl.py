"""Federated training loop: client sampling, local updates, mean aggregation."""

from __future__ import annotations

import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .data import ClientDataset, LabeledExample, dirichlet_partition, stack
from .defenses import CensorConfig, DefenseSpec, censor_select, defended_update
from .models import GradientUpdate, Model, as_batch, build_mlp, loss_and_grad, predict_logits
from . import autodiff as ad
from .autodiff import Tensor


@dataclass
class FLConfig:
    num_clients: int = 100
    clients_per_round: int = 10
    rounds: int = 200
    learning_rate: float = 0.1
    batch_size: int = 64
    alpha: float = 0.5
    hidden_dims: tuple[int, ...] = (128,)
    defense: DefenseSpec = field(default_factory=DefenseSpec)
    seed: int = 0
    victim_client: int | None = None
    victim_batch_size: int = 1
    capture_rounds: tuple[int, ...] = (0,)
    workers: int = 1

    def __post_init__(self):
        if self.clients_per_round > self.num_clients:
            raise ValueError("clients_per_round cannot exceed num_clients")
        if self.clients_per_round < 1 or self.num_clients < 1:
            raise ValueError("need at least one client")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.rounds < 0 or self.batch_size < 1:
            raise ValueError("rounds must be >= 0 and batch_size >= 1")
        if self.victim_client is not None and not 0 <= self.victim_client < self.num_clients:
            raise ValueError("victim_client out of range")

    def snapshot(self) -> dict:
        d = asdict(self)
        d["defense"]["censor"].pop("decoys", None)
        d["hidden_dims"] = list(self.hidden_dims)
        d["capture_rounds"] = list(self.capture_rounds)
        return d


@dataclass
class ServerState:
    model: Model
    round: int = 0


@dataclass
class RoundMetrics:
    round: int
    accuracy: float
    loss: float
    elapsed_ms: float
    fallbacks: int = 0


@dataclass
class Capture:
    """Victim gradient exported at a given round, with the model it was computed on."""

    round: int
    client_id: int
    update: GradientUpdate
    original: GradientUpdate
    examples: list[LabeledExample]
    model: Model


@dataclass
class RunRecord:
    config: dict
    seed: int
    rounds: list[RoundMetrics] = field(default_factory=list)
    attacks: list[dict] = field(default_factory=list)
    captures: list[Capture] = field(default_factory=list)
    final_params: list[np.ndarray] = field(default_factory=list)

    def append_round(self, m: RoundMetrics) -> None:
        self.rounds.append(m)

    def numerics(self) -> dict:
        """Every reproducible number, excluding wall-clock timings."""
        return {
            "rounds": [(r.round, r.accuracy, r.loss, r.fallbacks) for r in self.rounds],
            "attacks": [{k: v for k, v in a.items() if k != "elapsed_ms"} for a in self.attacks],
            "final_params": [p.tolist() for p in self.final_params],
        }

    def to_json(self) -> str:
        def clean(v):
            if isinstance(v, float) and math.isinf(v):
                return "inf" if v > 0 else "-inf"
            if isinstance(v, float) and math.isnan(v):
                return "nan"
            if isinstance(v, dict):
                return {k: clean(x) for k, x in v.items()}
            if isinstance(v, (list, tuple)):
                return [clean(x) for x in v]
            return v

        doc = {
            "seed": self.seed,
            "config": self.config,
            "rounds": [asdict(r) for r in self.rounds],
            "attacks": self.attacks,
            "final_params": [p.tolist() for p in self.final_params],
        }
        return json.dumps(clean(doc), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunRecord":
        def revive(v):
            if v in ("inf", "-inf", "nan"):
                return float(v)
            if isinstance(v, dict):
                return {k: revive(x) for k, x in v.items()}
            if isinstance(v, list):
                return [revive(x) for x in v]
            return v

        doc = json.loads(text)
        return cls(
            config=doc["config"],
            seed=doc["seed"],
            rounds=[RoundMetrics(**r) for r in doc["rounds"]],
            attacks=revive(doc["attacks"]),
            final_params=[np.asarray(p, dtype=np.float64) for p in doc.get("final_params", [])],
        )


def evaluate_model(model: Model, test_split) -> tuple[float, float]:
    """Accuracy and mean cross-entropy on a labeled split."""
    if isinstance(test_split, tuple):
        x, y = as_batch(test_split, model.input_dim)
    else:
        if len(test_split) == 0:
            raise ValueError("test split is empty")
        x, y = stack(test_split)
    if len(y) == 0:
        raise ValueError("test split is empty")
    logits = predict_logits(model, x)
    acc = float(np.mean(np.argmax(logits, axis=1) == y))
    loss = ad.softmax_cross_entropy(Tensor._wrap(logits), y, reduction="mean").item()
    return acc, loss


def aggregate(updates: Sequence[GradientUpdate]) -> GradientUpdate:
    """Mean of client updates, summed in the given order."""
    if not updates:
        raise ValueError("no updates to aggregate")
    acc = [a.copy() for a in updates[0].arrays]
    for u in updates[1:]:
        updates[0].check_layout(u)
        for a, b in zip(acc, u.arrays):
            a += b
    return GradientUpdate.like(updates[0], [a / len(updates) for a in acc])


def _client_batch(client: ClientDataset, size: int, gen: np.random.Generator) -> list[LabeledExample]:
    n = len(client.examples)
    if n == 0:
        raise ValueError(f"client {client.client_id} holds no data")
    if size >= n:
        return list(client.examples)
    idx = np.sort(gen.choice(n, size, replace=False))
    return [client.examples[i] for i in idx]


def local_update(model: Model, client: ClientDataset, config: FLConfig, rnd: int,
                 batch_size: int | None = None):
    """One client's (defended) update; returns (update, original-or-None, batch, fell_back)."""
    key = (config.seed, rnd, client.client_id)
    gen = np.random.default_rng([*key, 0xBA7C])
    batch = _client_batch(client, batch_size or config.batch_size, gen)
    spec = config.defense
    if spec.name == "censor":
        sel = censor_select(model, batch, spec.censor, key, config.learning_rate)
        return sel.update, sel.original, batch, sel.fallback
    upd = defended_update(model, batch, spec, key, config.learning_rate)
    return upd, None, batch, False


def run_round(
    state: ServerState,
    selected_clients: Sequence[ClientDataset],
    config: FLConfig,
    workers: int | None = None,
) -> ServerState:
    """Broadcast, collect local updates, apply ``theta - lr * mean(updates)``."""
    new_state, _ = _run_round(state, selected_clients, config, workers)
    return new_state


def _run_round(state, selected_clients, config, workers=None, victim=None):
    clients = sorted(selected_clients, key=lambda c: c.client_id)
    workers = workers or config.workers

    def work(c):
        size = config.victim_batch_size if victim is not None and c.client_id == victim else None
        return local_update(state.model, c, config, state.round, size)

    if workers > 1 and len(clients) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(work, clients))
    else:
        results = [work(c) for c in clients]
    agg = aggregate([r[0] for r in results])
    model = state.model.apply_update(agg, config.learning_rate)
    return ServerState(model, state.round + 1), dict(zip((c.client_id for c in clients), results))


def run_training(
    config: FLConfig,
    dataset: Sequence[LabeledExample],
    test_split: Sequence[LabeledExample],
    model: Model | None = None,
) -> RunRecord:
    """Partition, then run ``config.rounds`` rounds of sampled-client training.

    When ``victim_client`` is set that client always participates, trains on
    ``victim_batch_size`` examples, and its transmitted update is exported at
    each round listed in ``capture_rounds``.
    """
    shards = dirichlet_partition(dataset, config.num_clients, config.alpha, config.seed)
    if model is None:
        x0 = dataset[0].image.size
        num_classes = int(max(e.label for e in dataset)) + 1
        model = build_mlp(x0, config.hidden_dims, num_classes, config.seed)
    state = ServerState(model, 0)
    record = RunRecord(config=config.snapshot(), seed=config.seed)
    sampler = np.random.default_rng([config.seed, 0x5E1EC7])
    victim = config.victim_client
    t0 = time.perf_counter()
    for rnd in range(config.rounds):
        chosen = sampler.choice(config.num_clients, config.clients_per_round, replace=False)
        if victim is not None and victim not in chosen:
            chosen[-1] = victim
        selected = [shards[int(k)] for k in chosen]
        start_model = state.model
        state, results = _run_round(state, selected, config, victim=victim)
        if victim is not None and rnd in config.capture_rounds:
            upd, orig, batch, _ = results[victim]
            if orig is None:
                orig = loss_and_grad(start_model, batch)[1]
            record.captures.append(Capture(rnd, victim, upd, orig, batch, start_model))
        acc, loss = evaluate_model(state.model, test_split)
        fallbacks = sum(int(r[3]) for r in results.values())
        elapsed = (time.perf_counter() - t0) * 1000.0
        record.append_round(RoundMetrics(rnd, acc, loss, elapsed, fallbacks))
    record.final_params = [p.copy() for p in state.model.params]
    return record


def centralized_sgd_step(model: Model, batch, learning_rate: float) -> Model:
    """Plain SGD step on the summed batch gradient (reference for single-client rounds)."""
    return model.apply_update(loss_and_grad(model, batch)[1], learning_rate)


def default_censor_spec(trials: int = 20, **kw) -> DefenseSpec:
    return DefenseSpec(name="censor", censor=CensorConfig(trials=trials, **kw))
