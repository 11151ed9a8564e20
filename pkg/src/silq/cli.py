"""``silq`` command line: pretrain, calibrate, train, eval, export, analyze-rotation.

Every command reads one JSON config, fills in defaults, prints the resolved
config (which is itself a valid config) and writes its outputs atomically.
Relative paths are resolved against the config file's directory.

Exit codes: 0 success, 2 input/config/IO error, 3 divergence, 4 export
equivalence-check failure.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import math
import sys
from pathlib import Path

from . import checkpoint as ckpt
from .data import Corpus, CorpusSpec, MixtureSampler
from .distill import DivergenceError, TrainConfig, train_lm, train_qat
from .export import (ExportParityError, export_model, load_model, model_checkpoint,
                     random_prompts)
from .model import (ModelConfig, PrecisionPlan, build_quantized_model, calibrate_activations,
                    eval_loss, init_weights, linear_weight_names)
from .rotation import analyze

log = logging.getLogger("silq")

EXIT_OK, EXIT_INPUT, EXIT_DIVERGED, EXIT_PARITY = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "seed": 0,
    "model": ModelConfig().to_dict(),
    "plan": "A8s-C8-W4",
    "data": {
        "pretrain": {"source": "synthetic:markov-chain", "size": 200_000, "seed": 0},
        "sft": {"source": "synthetic:template-dialogue", "size": 200_000, "seed": 0},
        "eval_pretrain": {"source": "synthetic:markov-chain", "size": 20_000, "seed": 99},
        "eval_sft": {"source": "synthetic:template-dialogue", "size": 20_000, "seed": 99},
        "mixture_ratio": 0.25,
    },
    "pretrain": {"base_lr": 3e-3, "steps": 1500, "batch_size": 16, "seq_len": 64, "weight_decay": 0.0},
    "calib": {"batches": 5, "batch_size": 128, "seq_len": 64, "method": "percentile",
              "weight_method": "mse", "clip_range": True},
    "train": {},
    "eval": {"batches": 8, "batch_size": 16, "seq_len": 64},
    "export": {"prompts": 16, "tol": 1e-5},
    "rotation": {"reflections": False, "exclude_doubly_rotated": False},
    "paths": {"teacher": "teacher", "calibrated": "calibrated", "trained": "trained",
              "export": "export", "metrics": "metrics.jsonl", "eval_report": "eval.json",
              "rotation_report": "rotation.tsv", "before": None, "after": None, "checkpoint": None},
}


def _merge(base: dict, over: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in base and where not in ("train", "model", "data"):
            raise ConfigError(f"unknown config key {where + '.' if where else ''}{k}")
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            out[k] = _merge(base[k], v, k)
        else:
            out[k] = v
    return out


def resolve_config(raw: dict, base_dir: Path, args: argparse.Namespace) -> dict:
    """Defaults + file + command-line overrides, with absolute paths and a full TrainConfig."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    cfg = _merge(DEFAULTS, raw)
    if args.seed is not None:
        cfg["seed"] = args.seed
    train = dict(cfg["train"])
    train.pop("peak_lr", None)
    if args.steps is not None:
        train["steps"] = args.steps
    if args.auto_lr:
        train["auto_lr"] = True
    train["seed"] = cfg["seed"]
    try:
        tc = TrainConfig(**train)
        ModelConfig(**cfg["model"])
        PrecisionPlan.parse(cfg["plan"])
        TrainConfig(**cfg["pretrain"])
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e
    cfg["train"] = tc.to_dict()
    for k, v in cfg["paths"].items():
        if v is not None:
            cfg["paths"][k] = str((base_dir / v).resolve())
    for k in ("pretrain", "sft", "eval_pretrain", "eval_sft"):
        spec = cfg["data"].get(k)
        if spec and not str(spec.get("source", "")).startswith("synthetic:"):
            spec["source"] = str((base_dir / spec["source"]).resolve())
    return cfg


def load_config(args: argparse.Namespace) -> dict:
    path = Path(args.config)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise FileNotFoundError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from e
    return resolve_config(raw, path.parent, args)


def echo(cfg: dict, command: str) -> None:
    print(json.dumps({"command": command, "config": cfg}, sort_keys=True))


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _corpus(spec: dict | None) -> Corpus | None:
    if spec is None:
        return None
    return CorpusSpec(**spec).load()


def train_sampler(cfg: dict, seed: int) -> MixtureSampler:
    d = cfg["data"]
    ratio = d["mixture_ratio"]
    pre = _corpus(d["pretrain"]) if ratio > 0 else None
    sft = _corpus(d["sft"]) if ratio < 1 else None
    return MixtureSampler(pre, sft, ratio, seed=seed)


def eval_batches(cfg: dict) -> list:
    d, e = cfg["data"], cfg["eval"]
    ratio = d["mixture_ratio"]
    pre = _corpus(d["eval_pretrain"]) if ratio > 0 else None
    sft = _corpus(d["eval_sft"]) if ratio < 1 else None
    if e["batches"] <= 0:
        raise ConfigError("eval.batches must be positive")
    s = MixtureSampler(pre, sft, ratio, seed=cfg["seed"] + 3)
    return s.batches(e["batches"], e["batch_size"], e["seq_len"] + 1)


def _require(cfg: dict, key: str) -> Path:
    p = cfg["paths"].get(key)
    if not p:
        raise ConfigError(f"paths.{key} is required for this command")
    return Path(p)


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    ckpt.atomic_write(path, text.encode())


def _meta(cfg: dict, **extra) -> dict:
    return {"seed": cfg["seed"], **extra}


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_pretrain(cfg: dict) -> int:
    """Train the full-precision teacher from scratch."""
    mc = ModelConfig(**cfg["model"])
    model = build_quantized_model(mc, None, init_weights(mc, cfg["seed"]))
    tc = TrainConfig(**{**cfg["pretrain"], "seed": cfg["seed"]})
    metrics = train_lm(model, train_sampler(cfg, cfg["seed"] + 10), tc)
    out = _require(cfg, "teacher")
    ckpt.save(out, model_checkpoint(model, **_meta(cfg, role="teacher")))
    final = metrics.records[-1]["loss"] if metrics.records else float("nan")
    print(json.dumps({"teacher": str(out), "steps": tc.steps, "final_loss": final}))
    return EXIT_OK


def cmd_calibrate(cfg: dict) -> int:
    c = cfg["calib"]
    teacher = ckpt.load(_require(cfg, "teacher"))
    mc = ModelConfig(**teacher.meta["model"])
    plan = PrecisionPlan.parse(cfg["plan"])
    model = build_quantized_model(mc, plan, teacher.arrays(), weight_calib=c["weight_method"],
                                  act_lr_multiplier=cfg["train"]["act_lr_multiplier"])
    if c["batches"] <= 0 or c["batch_size"] <= 0:
        raise ConfigError("calib.batches and calib.batch_size must be positive")
    log.info("calibration batches: %dx%d", c["batches"], c["batch_size"])
    sampler = train_sampler(cfg, cfg["seed"] + 1)
    batches = [sampler.sample(c["batch_size"], c["seq_len"])[0] for _ in range(c["batches"])]
    steps = calibrate_activations(model, batches, c["method"], c["clip_range"])
    out = _require(cfg, "calibrated")
    ckpt.save(out, model_checkpoint(model, **_meta(cfg, role="calibrated",
                                                   calib=f"{c['batches']}x{c['batch_size']}")))
    print(json.dumps({"calibrated": str(out), "batches": f"{c['batches']}x{c['batch_size']}",
                      "steps": steps}, sort_keys=True))
    return EXIT_OK


def cmd_train(cfg: dict) -> int:
    tc = TrainConfig.from_dict(cfg["train"])
    teacher = load_model(_require(cfg, "teacher"), plan=None)
    student = load_model(_require(cfg, "calibrated"), act_lr_multiplier=tc.act_lr_multiplier)
    metrics_path = _require(cfg, "metrics")
    try:
        metrics = train_qat(student, teacher, train_sampler(cfg, cfg["seed"] + 2), tc)
    except DivergenceError as e:
        snap = metrics_path.with_suffix(".divergence.json")
        _write_text(snap, json.dumps(e.snapshot, sort_keys=True, indent=1))
        log.error("%s (snapshot written to %s)", e, snap)
        return EXIT_DIVERGED
    out = _require(cfg, "trained")
    ckpt.save(out, model_checkpoint(student, **_meta(cfg, role="trained", steps=tc.steps)))
    _write_text(metrics_path, metrics.to_lines())
    print(json.dumps({"trained": str(out), "metrics": str(metrics_path), "steps": tc.steps,
                      "peak_lr": tc.peak_lr,
                      "final_loss": metrics.records[-1]["loss"] if metrics.records else None}))
    return EXIT_OK


def cmd_eval(cfg: dict) -> int:
    path = cfg["paths"].get("checkpoint") or cfg["paths"]["trained"]
    model = load_model(path)
    loss = eval_loss(model, eval_batches(cfg))
    report = {"checkpoint": str(path), "loss": loss, "ppl": math.exp(loss)}
    _write_text(_require(cfg, "eval_report"), json.dumps(report, sort_keys=True) + "\n")
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


def cmd_export(cfg: dict) -> int:
    src = cfg["paths"].get("checkpoint") or cfg["paths"]["trained"]
    model = load_model(src)
    model.plan.check_deployment()
    e = cfg["export"]
    prompts = random_prompts(model.config, e["prompts"], cfg["seed"])
    out = _require(cfg, "export")
    diff = export_model(model, out, prompts, e["tol"], **_meta(cfg, source=str(src)))
    size = ckpt.total_bytes(out)
    print(json.dumps({"export": str(out), "max_abs_logit_diff": diff, "bytes": size}))
    return EXIT_OK


def cmd_analyze_rotation(cfg: dict) -> int:
    r = cfg["rotation"]
    before = ckpt.load(cfg["paths"].get("before") or cfg["paths"]["teacher"])
    after = ckpt.load(cfg["paths"].get("after") or cfg["paths"]["trained"])
    mc = ModelConfig(**before.meta["model"])
    report = analyze(before.dequantized(), after.dequantized(), linear_weight_names(mc),
                     reflections=r["reflections"], exclude_doubly_rotated=r["exclude_doubly_rotated"])
    out = _require(cfg, "rotation_report")
    _write_text(out, report.to_tsv())
    _write_text(out.with_suffix(".averages.tsv"), report.averages_tsv())
    sys.stdout.write(report.averages_tsv())
    return EXIT_OK


COMMANDS = {
    "pretrain": cmd_pretrain,
    "calibrate": cmd_calibrate,
    "train": cmd_train,
    "eval": cmd_eval,
    "export": cmd_export,
    "analyze-rotation": cmd_analyze_rotation,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="silq", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=list(COMMANDS))
    p.add_argument("--config", required=True, help="JSON config file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--steps", type=int, default=None, help="override train.steps")
    p.add_argument("--auto-lr", action="store_true",
                   help="rescale the LR by sqrt(base_steps / steps)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args)
        echo(cfg, args.command)
        return COMMANDS[args.command](cfg)
    except DivergenceError as e:
        log.error("%s", e)
        return EXIT_DIVERGED
    except ExportParityError as e:
        log.error("%s", e)
        return EXIT_PARITY
    except (OSError, ValueError, KeyError, TypeError) as e:
        log.error("%s: %s", type(e).__name__, e)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
