"""Command-line runner: ``gslab {train,attack,defend-eval,bench}``.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import statistics
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from .attacks import (
    AttackConfig,
    eot_estimate,
    invert_gradient,
    latent_invert,
    train_toy_generator,
)
from .config import ConfigError, DefenseSection, ExperimentConfig, load_config
from .defenses import DefenseSpec, censor_select, defended_update
from .fl import RunRecord, run_training
from .metrics import compare
from .models import build_mlp, loss_and_grad
from .report import ATTACK_COLUMNS, fmt, report_emit, write_csv, write_json, write_pgm

log = logging.getLogger("gslab")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

ATTACK_ROW_COLUMNS = ["round", *ATTACK_COLUMNS]


class NumericalFailure(RuntimeError):
    pass


def _out_dir(cfg: ExperimentConfig, command: str) -> Path:
    out = Path(cfg.out or f"runs/{command}-seed{cfg.seed}")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _base_model(cfg: ExperimentConfig, train):
    num_classes = max(e.label for e in train) + 1
    return build_mlp(train[0].image.size, cfg.model.hidden_dims, num_classes, cfg.seed)


def _check_finite(record: RunRecord) -> None:
    for r in record.rounds:
        if not math.isfinite(r.loss):
            raise NumericalFailure(f"round {r.round}: test loss is {r.loss}")


# --------------------------------------------------------------------------
# train


def cmd_train(cfg: ExperimentConfig) -> Path:
    train, test = cfg.load_data()
    fl_cfg = cfg.fl_config(cfg.defense.build(cfg.worker_count))
    record = run_training(fl_cfg, train, test, _base_model(cfg, train))
    _check_finite(record)
    out = _out_dir(cfg, "train")
    report_emit(record, out)
    log.info("train: %d rounds, final accuracy %.4f", len(record.rounds),
             record.rounds[-1].accuracy if record.rounds else float("nan"))
    return out


# --------------------------------------------------------------------------
# attack


def _model_at_round(cfg: ExperimentConfig, train, test, rnd: int, defense: DefenseSpec):
    model = _base_model(cfg, train)
    if rnd == 0:
        return model
    fl_cfg = replace(cfg.fl_config(defense), rounds=rnd, victim_client=None)
    record = run_training(fl_cfg, train, test, model)
    _check_finite(record)
    return model.with_params(record.final_params)


def attack_one(model, example, index: int, rnd: int, defense: DefenseSpec, attack: str,
               attack_cfg: AttackConfig, seed: int, lr: float, generator=None):
    """Defend one victim gradient, attack it, score the reconstruction."""
    batch = [example]
    g = defended_update(model, batch, defense, (seed, rnd, index), lr)
    if attack == "eot" and attack_cfg.eot_samples > 0:
        g = eot_estimate(
            lambda s: defended_update(model, batch, defense, (seed, rnd, index, 0xE07, s), lr),
            attack_cfg.eot_samples,
        )
    if attack == "latent":
        res = latent_invert(model, g, generator, attack_cfg, (seed, index))
    else:
        res = invert_gradient(model, g, attack_cfg, (seed, index), example.image.shape)
    m = compare(res.reconstruction, example.image)
    row = {
        "round": rnd, "image": index, "defense": defense.name, "attack": attack,
        "true_label": example.label, "inferred_label": res.inferred_label,
        "mse": m.mse, "psnr": m.psnr, "ssim": m.ssim, "lpips": None,
        "final_distance": res.final_distance,
    }
    return row, res.reconstruction


def _mean_row(rows, **fixed) -> dict:
    def mean(key):
        vals = [r[key] for r in rows]
        return float(np.mean(vals)) if all(math.isfinite(v) for v in vals) else float(
            np.mean([v for v in vals if math.isfinite(v)] or [math.inf]))

    row = {"image": "mean", "mse": mean("mse"), "ssim": mean("ssim"), "lpips": None,
           "final_distance": mean("final_distance")}
    # Mean PSNR from mean MSE stays finite unless every image was recovered exactly.
    row["psnr"] = math.inf if row["mse"] == 0 else 10 * math.log10(1.0 / row["mse"])
    row.update(fixed)
    return row


def run_attack_sweep(cfg: ExperimentConfig, train, test, defense: DefenseSpec, attack: str,
                     rnd: int, workers: int, model=None, generator=None):
    attack_cfg = replace(cfg.attack.build(1), eot_samples=cfg.attack.eot_samples if attack == "eot" else 0)
    if model is None:
        model = _model_at_round(cfg, train, test, rnd, defense)
    if attack == "latent" and generator is None:
        generator = train_toy_generator(test, cfg.attack.latent_dim, cfg.attack.generator_steps, cfg.seed)
    victims = train[: cfg.attack.num_images]

    def work(i):
        return attack_one(model, victims[i], i, rnd, defense, attack, attack_cfg, cfg.seed,
                          cfg.fl.learning_rate, generator)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(work, range(len(victims))))
    else:
        results = [work(i) for i in range(len(victims))]
    rows = [r for r, _ in results]
    images = {f"r{rnd}_{defense.name}_{attack}_img{i}": rec for i, (_, rec) in enumerate(results)}
    for i, ex in enumerate(victims):
        images[f"r{rnd}_truth_img{i}"] = ex.image
    return rows, images


def cmd_attack(cfg: ExperimentConfig) -> Path:
    train, test = cfg.load_data()
    defense = cfg.defense.build(1)
    out = _out_dir(cfg, "attack")
    all_rows, all_images = [], {}
    for rnd in cfg.fl.capture_rounds:
        rows, images = run_attack_sweep(cfg, train, test, defense, cfg.attack.name, rnd, cfg.worker_count)
        all_rows += rows
        all_rows.append(_mean_row(rows, round=rnd, defense=defense.name, attack=cfg.attack.name))
        all_images.update(images)
    write_csv(out / "attacks.csv", ATTACK_ROW_COLUMNS, all_rows)
    for name, img in all_images.items():
        write_pgm(out / f"{name}.pgm", img)
    record = RunRecord(config=cfg.model_dump(), seed=cfg.seed, attacks=all_rows)
    (out / "run_record.json").write_text(record.to_json())
    means = [r for r in all_rows if r["image"] == "mean"]
    write_json(out / "summary.json", {"seed": cfg.seed, "means": means})
    return out


# --------------------------------------------------------------------------
# defend-eval


MATRIX_COLUMNS = ["defense", "attack", "mse", "psnr", "ssim", "lpips"]


def cmd_defend_eval(cfg: ExperimentConfig) -> Path:
    train, test = cfg.load_data()
    sections = list(cfg.defend_eval.defenses)
    if not any(s.name == "none" for s in sections):
        sections.insert(0, DefenseSection(name="none"))
    rnd = cfg.fl.capture_rounds[0]
    model = _base_model(cfg, train)
    generator = None
    if "latent" in cfg.defend_eval.attacks:
        generator = train_toy_generator(test, cfg.attack.latent_dim, cfg.attack.generator_steps, cfg.seed)
    cells, raw = [], []
    for section in sections:
        defense = section.build(1)
        m = model if rnd == 0 else _model_at_round(cfg, train, test, rnd, defense)
        for attack in cfg.defend_eval.attacks:
            rows, _ = run_attack_sweep(cfg, train, test, defense, attack, rnd, cfg.worker_count,
                                       model=m, generator=generator)
            raw += rows
            mean = _mean_row(rows, defense=defense.name, attack=attack)
            cells.append({k: mean.get(k) for k in MATRIX_COLUMNS})
    out = _out_dir(cfg, "defend-eval")
    write_csv(out / "matrix.csv", MATRIX_COLUMNS, cells)
    write_csv(out / "cells_detail.csv", ATTACK_ROW_COLUMNS, raw)
    write_json(out / "summary.json", {"seed": cfg.seed, "cells": cells})
    return out


# --------------------------------------------------------------------------
# bench


def overhead_percentage(time_with: float, time_without: float) -> float:
    """((time with defense - time without) / time without) * 100."""
    if time_without <= 0:
        raise ValueError("baseline time must be positive")
    return (time_with - time_without) / time_without * 100.0


def cmd_bench(cfg: ExperimentConfig) -> Path:
    train, _ = cfg.load_data()
    model = _base_model(cfg, train)
    batch = train[: cfg.bench.batch_size]
    reps = cfg.bench.repetitions
    lr = cfg.fl.learning_rate
    variants = [("none", None)] + [(f"censor-T{t}", t) for t in cfg.bench.trials]
    times: dict[str, list[float]] = {name: [] for name, _ in variants}
    base = cfg.defense.build(1).censor
    for rep in range(reps):
        for name, trials in variants:
            t0 = time.perf_counter()
            if trials is None:
                loss_and_grad(model, batch)
            else:
                censor_select(model, batch, replace(base, trials=trials), (cfg.seed, rep), lr)
            times[name].append((time.perf_counter() - t0) * 1000.0)
    medians = {k: statistics.median(v) for k, v in times.items()}
    overhead = {k: overhead_percentage(medians[k], medians["none"]) for k in medians}
    out = _out_dir(cfg, "bench")
    rows = [{"variant": k, "rep": i, "elapsed_ms": v} for k, vs in times.items() for i, v in enumerate(vs)]
    write_csv(out / "bench_times.csv", ["variant", "rep", "elapsed_ms"], rows)
    write_json(out / "bench.json", {
        "repetitions": reps,
        "median_ms": medians,
        "overhead_percent": overhead,
        "formula": "((time_with - time_without) / time_without) * 100",
    })
    return out


COMMANDS = {
    "train": cmd_train,
    "attack": cmd_attack,
    "defend-eval": cmd_defend_eval,
    "bench": cmd_bench,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gslab", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", type=str, default=None, help="TOML experiment config")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--workers", type=int, default=None)
        sp.add_argument("--out", type=str, default=None)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, {"seed": args.seed, "workers": args.workers, "out": args.out})
        out = COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(json.dumps({"error": "config", "command": args.command, "detail": str(exc)}), file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalFailure, FloatingPointError) as exc:
        print(json.dumps({"error": "numerical", "command": args.command, "detail": str(exc)}), file=sys.stderr)
        return EXIT_NUMERIC
    print(fmt(str(out)))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
