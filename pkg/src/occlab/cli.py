"""Command-line entry point: ``occlab <command> [options]``.

Commands
    simulate-pp     Monte-Carlo runs of the Cox masking process with text dumps
    train-teacher   train the full-depth tracker (optionally with the masked-template invariance)
    train-student   distill a shallower tracker from a teacher checkpoint
    eval            one-pass evaluation on the synthetic occlusion benchmark
    ablate          2x2 grid over {invariance loss} x {adaptive distillation}

Every command writes into ``<out>/<command>-<config hash>-s<seed>/`` and
echoes the resolved configuration there.  Exit codes: 0 success, 2 invalid
configuration or inputs, 3 runtime failure.  Failures print one JSON object
to stderr.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import pointproc as pp
from .checkpoint import CheckpointError
from .config import ConfigError, ExperimentConfig, apply_overrides, load_config
from .evaluate import frames_csv, metrics_json, run_ope
from .model import Tracker
from .synth import SceneConfig, benchmark_configs
from .train import (
    calibrate_batchnorm,
    heldout_pred_loss,
    heldout_samples,
    load_model,
    save_model,
    train_student,
    train_teacher,
)

log = logging.getLogger("occlab")

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3

ABLATION_COLUMNS = (
    "variant", "orr", "afkd", "precision", "success", "occ_precision", "occ_success", "heldout_pred_loss",
)


class CliError(Exception):
    def __init__(self, code: str, message: str, exit_code: int):
        super().__init__(message)
        self.code = code
        self.exit_code = exit_code


# ----------------------------------------------------------------------------
# helpers


def _file_digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()[:12]


def _require_file(path: Optional[str], what: str) -> Path:
    if path is None:
        raise CliError("missing_file", f"{what} path is required", EXIT_VALIDATION)
    p = Path(path)
    if not p.is_file():
        raise CliError("missing_file", f"{what} not found: {p}", EXIT_VALIDATION)
    return p


def run_dir(out: str, command: str, cfg: ExperimentConfig, inputs: Dict[str, Path] = None) -> Path:
    """Content-addressed run directory; the address covers the config and any input files."""
    key = cfg.digest()
    if inputs:
        h = hashlib.sha256(key.encode())
        for name in sorted(inputs):
            h.update(f"{name}={_file_digest(inputs[name])}".encode())
        key = h.hexdigest()[:12]
    path = Path(out) / f"{command}-{key}-s{cfg.seed}"
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError("unwritable_output", f"cannot create run directory {path}: {exc}", EXIT_RUNTIME) from None
    return path


def _write(path: Path, text: str) -> None:
    try:
        path.write_text(text)
    except OSError as exc:
        raise CliError("unwritable_output", f"cannot write {path}: {exc}", EXIT_RUNTIME) from None


def _echo_config(rdir: Path, cfg: ExperimentConfig, command: str, inputs: Dict[str, Path] = None) -> None:
    _write(rdir / "resolved_config.json", cfg.to_json())
    prov = {"command": command, "config_digest": cfg.digest(), "seed": cfg.seed}
    if inputs:
        prov["inputs"] = {k: {"path": str(v), "sha256_12": _file_digest(v)} for k, v in sorted(inputs.items())}
    _write(rdir / "run.json", json.dumps(prov, indent=2, sort_keys=True) + "\n")


def _benchmark(cfg: ExperimentConfig) -> List[SceneConfig]:
    return benchmark_configs(cfg.eval.sequences, cfg.eval.seed, cfg.eval.length)


def metrics_csv(metrics: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["subset", "frames", "precision", "success"])
    for subset in ("overall", "occlusion"):
        m = metrics[subset]
        w.writerow([subset, m["frames"], repr(m["precision"]), repr(m["success"])])
    return buf.getvalue()


def _evaluate_into(rdir: Path, model: Tracker, cfg: ExperimentConfig) -> dict:
    results, metrics = run_ope(model, _benchmark(cfg), crop=cfg.crop_config())
    _write(rdir / "metrics.json", metrics_json(metrics) + "\n")
    _write(rdir / "metrics.csv", metrics_csv(metrics))
    _write(rdir / "frames.csv", frames_csv(results))
    return metrics


# ----------------------------------------------------------------------------
# commands


def cmd_simulate_pp(cfg: ExperimentConfig, out: str) -> dict:
    grid = cfg.grid_spec()
    mode = cfg.intensity.coordinate_mode
    if cfg.intensity.varsigma is not None:
        varsigma = float(cfg.intensity.varsigma)
    else:
        varsigma = float(pp.cox_varsigma(cfg.mask.sigma, grid, cfg.mask.polarity))
    rdir = run_dir(out, "simulate-pp", cfg)
    _echo_config(rdir, cfg, "simulate-pp")
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 30]))
    dom = grid.domain(mode)
    n = cfg.simulate.simulations
    counts = np.zeros(n, dtype=np.int64)
    hits = np.zeros((grid.rows, grid.cols))
    points_per_cell = np.zeros((grid.rows, grid.cols))
    if cfg.simulate.dumps:
        (rdir / "points").mkdir(exist_ok=True)
        (rdir / "masks").mkdir(exist_ok=True)
    for i in range(n):
        pattern = pp.simulate_cox(varsigma, dom, rng, mode, cfg.intensity.bandwidth)
        counts[i] = len(pattern)
        rows, cols = pp.pattern_to_cells(pattern, grid, dom)
        np.add.at(points_per_cell, (rows, cols), 1)
        mask = pp.pattern_to_mask(pattern, grid, cfg.mask.polarity, mode)
        occupied = np.zeros_like(hits, dtype=bool)
        occupied[rows, cols] = True
        hits += occupied
        if i < cfg.simulate.dumps:
            _write(rdir / "points" / f"points_{i:04d}.csv", pp.pattern_to_csv(pattern))
            _write(rdir / "masks" / f"mask_{i:04d}.pgm", pp.mask_to_pgm(mask))
    # expected points per cell; the Cox mean equals the intensity with total mass varsigma
    unit = pp.expected_counts(pp.IntensitySpec(1, mode, cfg.intensity.bandwidth), grid)
    expected = varsigma * unit
    std = float(counts.std()) if n > 1 else 0.0
    summary = {
        "varsigma": varsigma,
        "simulations": n,
        "mean_count": float(counts.mean()),
        "std_count": std,
        "standard_error": std / math.sqrt(n),
        "grid": [grid.rows, grid.cols],
        "coordinate_mode": mode,
        "polarity": cfg.mask.polarity,
        "hit_frequency": (hits / n).tolist(),
        "mean_points_per_cell": (points_per_cell / n).tolist(),
        "expected_points_per_cell": expected.tolist(),
    }
    _write(rdir / "summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["row", "col", "hit_frequency", "mean_points", "expected_points"])
    for r in range(grid.rows):
        for c in range(grid.cols):
            w.writerow([r, c, repr(hits[r, c] / n), repr(points_per_cell[r, c] / n), repr(float(expected[r, c]))])
    _write(rdir / "cells.csv", buf.getvalue())
    return {"run_dir": str(rdir), "mean_count": summary["mean_count"], "varsigma": varsigma}


def cmd_train_teacher(cfg: ExperimentConfig, out: str) -> dict:
    tcfg = cfg.train_config()
    rdir = run_dir(out, "train-teacher", cfg)
    _echo_config(rdir, cfg, "train-teacher")
    result = train_teacher(tcfg)
    save_model(rdir / "teacher.ckpt", result.model, {"role": "teacher", "config_digest": cfg.digest()})
    _write(rdir / "log.csv", result.log_csv())
    held = heldout_pred_loss(result.model, heldout_samples(tcfg), tcfg.loss)
    _write(rdir / "heldout.json", json.dumps({"heldout_pred_loss": held}, indent=2) + "\n")
    return {"run_dir": str(rdir), "checkpoint": str(rdir / "teacher.ckpt"), "heldout_pred_loss": held}


def cmd_train_student(cfg: ExperimentConfig, out: str, teacher_path: Optional[str]) -> dict:
    tpath = _require_file(teacher_path, "teacher checkpoint")
    teacher = load_model(tpath)
    tcfg = cfg.train_config()
    if teacher.config.embed_dim != tcfg.backbone.embed_dim:
        raise CliError(
            "dim_mismatch",
            f"teacher width {teacher.config.embed_dim} differs from configured width {tcfg.backbone.embed_dim}",
            EXIT_VALIDATION,
        )
    inputs = {"teacher": tpath}
    rdir = run_dir(out, "train-student", cfg, inputs)
    _echo_config(rdir, cfg, "train-student", inputs)
    result = train_student(teacher, tcfg)
    save_model(rdir / "student.ckpt", result.model, {"role": "student", "config_digest": cfg.digest()})
    _write(rdir / "log.csv", result.log_csv())
    held = heldout_pred_loss(result.model, heldout_samples(tcfg), tcfg.loss)
    _write(rdir / "heldout.json", json.dumps({"heldout_pred_loss": held}, indent=2) + "\n")
    return {"run_dir": str(rdir), "checkpoint": str(rdir / "student.ckpt"), "heldout_pred_loss": held}


def cmd_eval(cfg: ExperimentConfig, out: str, checkpoint: Optional[str]) -> dict:
    if checkpoint is not None:
        cpath = _require_file(checkpoint, "checkpoint")
        model = load_model(cpath)
        inputs = {"checkpoint": cpath}
    else:
        # untrained reference model: random weights, head statistics from held-out pairs
        model = Tracker(cfg.vit_config())
        calibrate_batchnorm(model, heldout_samples(cfg.train_config()))
        inputs = None
    rdir = run_dir(out, "eval", cfg, inputs)
    _echo_config(rdir, cfg, "eval", inputs)
    metrics = _evaluate_into(rdir, model, cfg)
    return {"run_dir": str(rdir), "metrics": metrics}


def ablation_rows(cfg: ExperimentConfig) -> List[dict]:
    """Train and evaluate the four variants with shared seeds.

    The evaluated tracker is always the student-depth network:
    baseline (prediction loss only), +ORR (plus the masked-template
    invariance), +AFKD (distilled from a teacher trained without the
    invariance) and +ORR+AFKD (distilled from a teacher trained with it).
    """
    tcfg = cfg.train_config()
    held = heldout_samples(tcfg)
    bench = _benchmark(cfg)
    crop = cfg.crop_config()
    plain_teacher = train_teacher(replace(tcfg, use_orr=False)).model
    orr_teacher = train_teacher(replace(tcfg, use_orr=True)).model
    variants = [
        ("baseline", False, False, plain_teacher, "none", False),
        ("orr", True, False, plain_teacher, "none", True),
        ("afkd", False, True, plain_teacher, "afkd", False),
        ("orr+afkd", True, True, orr_teacher, "afkd", False),
    ]
    rows = []
    for name, orr, afkd, teacher, kd_mode, student_orr in variants:
        model = train_student(teacher, replace(tcfg, kd_mode=kd_mode), use_orr=student_orr).model
        _, m = run_ope(model, bench, crop=crop)
        rows.append(
            {
                "variant": name,
                "orr": int(orr),
                "afkd": int(afkd),
                "precision": m["overall"]["precision"],
                "success": m["overall"]["success"],
                "occ_precision": m["occlusion"]["precision"],
                "occ_success": m["occlusion"]["success"],
                "heldout_pred_loss": heldout_pred_loss(model, held, tcfg.loss),
            }
        )
    return rows


def ablation_csv(rows: List[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ABLATION_COLUMNS)
    for r in rows:
        w.writerow([r[c] if isinstance(r[c], (str, int)) else repr(float(r[c])) for c in ABLATION_COLUMNS])
    return buf.getvalue()


def cmd_ablate(cfg: ExperimentConfig, out: str) -> dict:
    rdir = run_dir(out, "ablate", cfg)
    _echo_config(rdir, cfg, "ablate")
    rows = ablation_rows(cfg)
    _write(rdir / "ablation.csv", ablation_csv(rows))
    base = rows[0]
    orr = rows[1]
    report = {
        "rows": rows,
        "orr_occlusion_precision_not_below_baseline": orr["occ_precision"] >= base["occ_precision"],
    }
    _write(rdir / "report.json", json.dumps(report, indent=2, sort_keys=True) + "\n")
    if not report["orr_occlusion_precision_not_below_baseline"]:
        log.warning(
            "invariance variant occlusion precision %.4f is below baseline %.4f",
            orr["occ_precision"], base["occ_precision"],
        )
    return {"run_dir": str(rdir), "rows": rows}


# ----------------------------------------------------------------------------
# argument parsing


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="experiment config JSON (defaults apply to missing fields)")
    p.add_argument("--seed", type=int, help="run seed (unsigned 64-bit)")
    p.add_argument("--out", default="runs", help="parent directory for run directories (default: runs)")
    p.add_argument("--sigma", type=float, help="masking ratio in [0, 1]")
    p.add_argument("--alpha", type=float, help="distillation base weight")
    p.add_argument("--beta", type=float, help="distillation slope on the GIoU-loss deviation")
    p.add_argument("--gamma", type=float, help="weight of the masked-template invariance loss")
    p.add_argument("--steps", type=int, help="training steps")
    p.add_argument("--polarity", choices=(pp.POINTS_KEEP, pp.POINTS_MASK), help="meaning of cells hit by points")
    p.add_argument("--coord", choices=(pp.NORMALIZED, pp.RAW), help="coordinate frame of the intensity")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("bad_arguments", message, EXIT_VALIDATION)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="occlab", description="Occlusion-robust tracking laboratory.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True
    for name, help_text in (
        ("simulate-pp", "simulate Cox masks and write point/mask dumps plus summary statistics"),
        ("train-teacher", "train the teacher tracker"),
        ("train-student", "train a student tracker against a teacher checkpoint"),
        ("eval", "one-pass evaluation on the synthetic benchmark"),
        ("ablate", "run the 2x2 invariance/distillation ablation"),
    ):
        p = sub.add_parser(name, help=help_text)
        _add_common(p)
        if name == "train-student":
            p.add_argument("--teacher", help="teacher checkpoint file")
        if name == "eval":
            p.add_argument("--checkpoint", help="model checkpoint (omit to score an untrained model)")
    return parser


def _resolve(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    overrides = {k: getattr(args, k) for k in ("seed", "sigma", "alpha", "beta", "gamma", "steps", "polarity", "coord")}
    return apply_overrides(cfg, overrides).validate()


def _fail(code: str, message: str, exit_code: int) -> int:
    sys.stderr.write(json.dumps({"error": code, "message": message, "exit_code": exit_code}, sort_keys=True) + "\n")
    return exit_code


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
        cfg = _resolve(args)
        if args.command == "simulate-pp":
            result = cmd_simulate_pp(cfg, args.out)
        elif args.command == "train-teacher":
            result = cmd_train_teacher(cfg, args.out)
        elif args.command == "train-student":
            result = cmd_train_student(cfg, args.out, args.teacher)
        elif args.command == "eval":
            result = cmd_eval(cfg, args.out, args.checkpoint)
        else:
            result = cmd_ablate(cfg, args.out)
    except CliError as exc:
        return _fail(exc.code, str(exc), exc.exit_code)
    except ConfigError as exc:
        return _fail("invalid_config", str(exc), EXIT_VALIDATION)
    except CheckpointError as exc:
        return _fail(exc.code, str(exc), EXIT_RUNTIME)
    except (FloatingPointError, ValueError, OSError, KeyError) as exc:
        return _fail("runtime_error", f"{type(exc).__name__}: {exc}", EXIT_RUNTIME)
    sys.stdout.write(json.dumps(result, indent=2, sort_keys=True, default=str) + "\n")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
