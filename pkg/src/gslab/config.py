"""Experiment configuration schema (TOML files, unknown keys rejected)."""

from __future__ import annotations

import os
import sys
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .attacks import AttackConfig
from .data import LabeledExample, load_dataset_file, synth_dataset, train_test_split
from .defenses import CensorConfig, DefenseSpec
from .fl import FLConfig


class ConfigError(ValueError):
    """Invalid experiment configuration; ``str()`` names the offending field path."""


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DataSection(_Section):
    source: Literal["synthetic", "idx", "csv"] = "synthetic"
    path: Optional[str] = None
    labels_path: Optional[str] = None
    num_classes: int = Field(10, ge=1)
    examples_per_class: int = Field(100, ge=1)
    side: int = Field(8, ge=4)
    test_fraction: float = Field(0.2, ge=0.0, lt=1.0)

    @model_validator(mode="after")
    def _needs_path(self):
        if self.source != "synthetic" and not self.path:
            raise ValueError(f"source={self.source!r} needs a path")
        return self


class ModelSection(_Section):
    hidden_dims: list[int] = Field(default_factory=lambda: [128])


class FLSection(_Section):
    num_clients: int = Field(100, ge=1)
    clients_per_round: int = Field(10, ge=1)
    rounds: int = Field(200, ge=0)
    learning_rate: float = Field(0.1, gt=0)
    batch_size: int = Field(64, ge=1)
    alpha: float = Field(0.5, gt=0)
    victim_client: Optional[int] = Field(None, ge=0)
    victim_batch_size: int = Field(1, ge=1)
    capture_rounds: list[int] = Field(default_factory=lambda: [0])

    @model_validator(mode="after")
    def _ranges(self):
        if self.clients_per_round > self.num_clients:
            raise ValueError("clients_per_round cannot exceed num_clients")
        return self


DefenseName = Literal["none", "censor", "noise", "clip", "topk", "soteria"]


class DefenseSection(_Section):
    name: DefenseName = "none"
    trials: int = Field(20, ge=1)
    temperature: float = Field(0.0, ge=0)
    perturbation_scale: float = Field(1.0, gt=0)
    fallback_mode: Literal["paper-faithful", "strict-privacy"] = "paper-faithful"
    sampling_source: Literal["gaussian", "decoy"] = "gaussian"
    decoy_path: Optional[str] = None
    decoy_labels_path: Optional[str] = None
    loss_reference: Literal["initial", "gradient-step"] = "initial"
    sigma: float = Field(0.1, ge=0)
    clip_bound: float = Field(1.0, gt=0)
    keep_ratio: float = Field(0.1, gt=0, le=1)
    per_layer_topk: bool = False
    prune_ratio: float = Field(0.5, ge=0, lt=1)
    defended_layer: Optional[str] = None

    @model_validator(mode="after")
    def _decoys(self):
        if self.sampling_source == "decoy" and not self.decoy_path:
            raise ValueError("sampling_source='decoy' needs decoy_path")
        return self

    def build(self, workers: int = 1) -> DefenseSpec:
        decoys: list[LabeledExample] = []
        if self.sampling_source == "decoy":
            decoys = load_dataset_file(self.decoy_path, self.decoy_labels_path)
        censor = CensorConfig(
            trials=self.trials,
            temperature=self.temperature,
            perturbation_scale=self.perturbation_scale,
            fallback_mode=self.fallback_mode,
            sampling_source=self.sampling_source,
            decoys=decoys,
            loss_reference=self.loss_reference,
            workers=workers,
        )
        return DefenseSpec(
            name=self.name, censor=censor, sigma=self.sigma, clip_bound=self.clip_bound,
            keep_ratio=self.keep_ratio, per_layer_topk=self.per_layer_topk,
            prune_ratio=self.prune_ratio, defended_layer=self.defended_layer,
        )


AttackName = Literal["inversion", "eot", "latent"]


class AttackSection(_Section):
    name: AttackName = "inversion"
    iterations: int = Field(2000, ge=0)
    step_size: float = Field(0.1, gt=0)
    distance: Literal["neg-cosine", "l2"] = "neg-cosine"
    restarts: int = Field(4, ge=1)
    infer_label: bool = True
    eot_samples: int = Field(100, ge=0)
    tv_weight: float = Field(1e-4, ge=0)
    signed: bool = True
    lr_decay: bool = True
    latent_weight: float = Field(1e-3, ge=0)
    latent_dim: int = Field(8, ge=1)
    generator_steps: int = Field(500, ge=0)
    second_order: Literal["exact", "finite-difference"] = "exact"
    num_images: int = Field(10, ge=1)

    def build(self, workers: int = 1) -> AttackConfig:
        return AttackConfig(
            iterations=self.iterations, step_size=self.step_size, distance=self.distance,
            restarts=self.restarts, infer_label=self.infer_label,
            eot_samples=self.eot_samples if self.name == "eot" else 0,
            tv_weight=self.tv_weight, signed=self.signed, lr_decay=self.lr_decay,
            latent_weight=self.latent_weight, second_order=self.second_order, workers=workers,
        )


class DefendEvalSection(_Section):
    defenses: list[DefenseSection] = Field(default_factory=lambda: [DefenseSection(name="censor")])
    attacks: list[AttackName] = Field(default_factory=lambda: ["inversion"])


class BenchSection(_Section):
    repetitions: int = Field(30, ge=1)
    trials: list[int] = Field(default_factory=lambda: [20, 40])
    batch_size: int = Field(64, ge=1)


class ExperimentConfig(_Section):
    seed: int = 0
    workers: Optional[int] = Field(None, ge=1)
    out: Optional[str] = None
    data: DataSection = Field(default_factory=DataSection)
    model: ModelSection = Field(default_factory=ModelSection)
    fl: FLSection = Field(default_factory=FLSection)
    defense: DefenseSection = Field(default_factory=DefenseSection)
    attack: AttackSection = Field(default_factory=AttackSection)
    defend_eval: DefendEvalSection = Field(default_factory=DefendEvalSection)
    bench: BenchSection = Field(default_factory=BenchSection)

    @property
    def worker_count(self) -> int:
        return self.workers or os.cpu_count() or 1

    def fl_config(self, defense: DefenseSpec | None = None) -> FLConfig:
        f = self.fl
        return FLConfig(
            num_clients=f.num_clients, clients_per_round=f.clients_per_round, rounds=f.rounds,
            learning_rate=f.learning_rate, batch_size=f.batch_size, alpha=f.alpha,
            hidden_dims=tuple(self.model.hidden_dims),
            defense=defense if defense is not None else self.defense.build(),
            seed=self.seed, victim_client=f.victim_client, victim_batch_size=f.victim_batch_size,
            capture_rounds=tuple(f.capture_rounds), workers=self.worker_count,
        )

    def load_data(self) -> tuple[list[LabeledExample], list[LabeledExample]]:
        d = self.data
        if d.source == "synthetic":
            examples = synth_dataset(d.num_classes, d.examples_per_class, d.side, self.seed)
        else:
            examples = load_dataset_file(d.path, d.labels_path)
        if not examples:
            raise ConfigError("data: dataset is empty")
        return train_test_split(examples, d.test_fraction, self.seed)


def _format_error(exc: ValidationError) -> str:
    parts = []
    for err in exc.errors():
        path = ".".join(str(p) for p in err["loc"]) or "<root>"
        parts.append(f"{path}: {err['msg']}")
    return "; ".join(parts)


def parse_config(doc: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(doc)
    except ValidationError as exc:
        raise ConfigError(_format_error(exc)) from None


def load_config(path: str | os.PathLike | None, overrides: dict | None = None) -> ExperimentConfig:
    """Read a TOML config, then apply env (GSL_SEED, GSL_WORKERS) and explicit overrides."""
    doc: dict = {}
    if path is not None:
        try:
            doc = tomllib.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    for env, key in (("GSL_SEED", "seed"), ("GSL_WORKERS", "workers")):
        if os.environ.get(env):
            try:
                doc[key] = int(os.environ[env])
            except ValueError:
                raise ConfigError(f"{key}: environment variable {env} must be an integer") from None
    for key, value in (overrides or {}).items():
        if value is not None:
            doc[key] = value
    return parse_config(doc)
