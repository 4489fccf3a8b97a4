"""Writers for run outputs: CSV, JSON summary, plot-data TSV and PGM images."""

from __future__ import annotations

import csv
import json
import math
import os
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

ROUND_COLUMNS = ["round", "accuracy", "loss", "elapsed_ms"]
ATTACK_COLUMNS = ["image", "defense", "attack", "true_label", "inferred_label",
                  "mse", "psnr", "ssim", "lpips", "final_distance"]


def fmt(v) -> str:
    """Text form used in every table: +inf PSNR becomes ``inf``, ``None`` is empty."""
    if v is None:
        return ""
    if isinstance(v, float):
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    return str(v)


def write_csv(path: str | os.PathLike, columns: Sequence[str], rows: Iterable[dict]) -> int:
    n = 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, quoting=csv.QUOTE_MINIMAL, lineterminator="\r\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([fmt(row.get(c)) for c in columns])
            n += 1
    return n


def write_tsv(path: str | os.PathLike, xs: Sequence, ys: Sequence, header=("x", "y")) -> None:
    with open(path, "w") as fh:
        fh.write("\t".join(header) + "\n")
        for x, y in zip(xs, ys):
            fh.write(f"{fmt(x)}\t{fmt(y)}\n")


def write_pgm(path: str | os.PathLike, image) -> None:
    """Binary PGM (P5, maxval 255) from an image with values in [0, 1]."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 1:
        img = img.reshape(1, -1)
    if img.ndim != 2:
        raise ValueError(f"PGM needs a 2-D image, got shape {img.shape}")
    data = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos].decode("ascii"))
    if tokens[0] != "P5":
        raise ValueError(f"{path}: not a P5 file")
    w, h, maxval = (int(t) for t in tokens[1:])
    body = raw[pos + 1:pos + 1 + w * h]
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).astype(np.float64) / maxval


def _json_safe(v):
    if isinstance(v, float) and (math.isinf(v) or math.isnan(v)):
        return fmt(v) if math.isinf(v) else "nan"
    if isinstance(v, dict):
        return {k: _json_safe(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_json_safe(x) for x in v]
    if isinstance(v, np.generic):
        return v.item()
    return v


def write_json(path: str | os.PathLike, doc) -> None:
    Path(path).write_text(json.dumps(_json_safe(doc), indent=2, sort_keys=True))


def report_emit(run_record, out_dir: str | os.PathLike, images: dict | None = None) -> list[Path]:
    """Write everything a run produced under ``out_dir``.

    Files: ``metrics.csv`` (one row per round), ``run_record.json``,
    ``summary.json``, ``accuracy.tsv`` and ``loss.tsv`` plot data, and when
    attacks were evaluated ``attacks.csv`` plus PGM images from ``images``
    (name -> array).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    rows = [{"round": r.round, "accuracy": r.accuracy, "loss": r.loss, "elapsed_ms": r.elapsed_ms}
            for r in run_record.rounds]
    write_csv(out / "metrics.csv", ROUND_COLUMNS, rows)
    written.append(out / "metrics.csv")

    (out / "run_record.json").write_text(run_record.to_json())
    written.append(out / "run_record.json")

    rounds = [r.round for r in run_record.rounds]
    write_tsv(out / "accuracy.tsv", rounds, [r.accuracy for r in run_record.rounds], ("round", "accuracy"))
    write_tsv(out / "loss.tsv", rounds, [r.loss for r in run_record.rounds], ("round", "loss"))
    written += [out / "accuracy.tsv", out / "loss.tsv"]

    summary = {
        "seed": run_record.seed,
        "rounds": len(run_record.rounds),
        "final_accuracy": run_record.rounds[-1].accuracy if run_record.rounds else None,
        "final_loss": run_record.rounds[-1].loss if run_record.rounds else None,
        "total_fallbacks": sum(r.fallbacks for r in run_record.rounds),
        "attacks": len(run_record.attacks),
    }
    if run_record.attacks:
        write_csv(out / "attacks.csv", ATTACK_COLUMNS, run_record.attacks)
        written.append(out / "attacks.csv")
        for key in ("mse", "psnr", "ssim"):
            vals = [a[key] for a in run_record.attacks if isinstance(a.get(key), (int, float))]
            summary[f"mean_{key}"] = float(np.mean(vals)) if vals else None
    write_json(out / "summary.json", summary)
    written.append(out / "summary.json")

    for name, img in (images or {}).items():
        path = out / f"{name}.pgm"
        write_pgm(path, img)
        written.append(path)
    return written
