"""Command-line entry points: simulate, train, separate, evaluate, gradcheck.

Configuration is a JSON object with optional sections ``model``, ``loss``,
``train`` and ``data`` plus a top-level ``seed``; ``--set section.key=value``
overrides single fields.  Exit codes: 0 success, 1 runtime or numeric
failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .model import ConfigError, ModelConfig, separate
from .sim import SAMPLE_RATE, DatasetConfig, SceneError, gen_dataset, load_items, load_manifest, read_wav, write_wav
from .tensor import DimensionError, NumericError

logger = logging.getLogger("sagrnn")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
SECTIONS = ("model", "loss", "train", "data")
MODEL_EXTRA_KEYS = ("preset", "variant")


class UsageError(Exception):
    """Bad invocation or configuration; maps to exit code 2."""


@dataclass
class RunConfig:
    seed: int = 0
    model: dict = field(default_factory=dict)
    loss: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    data: dict = field(default_factory=dict)

    def model_config(self) -> ModelConfig:
        d = dict(self.model)
        preset = d.pop("preset", "default")
        variant = d.pop("variant", "full")
        if preset == "tiny":
            base = asdict(ModelConfig.tiny())
        elif preset == "default":
            base = asdict(ModelConfig())
        else:
            raise ConfigError(f"unknown model preset {preset!r} (tiny or default)")
        unknown = set(d) - set(base)
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        base.update(d)
        return ModelConfig.ablation(variant, **base)

    def loss_config(self, model: ModelConfig):
        from .training import LossConfig

        d = {"multiscale": model.multiscale, **self.loss}
        return LossConfig(**_known(LossConfig, d, "loss"))

    def train_config(self):
        from .training import TrainConfig

        return TrainConfig(**_known(TrainConfig, self.train, "train"))

    def dataset_config(self) -> DatasetConfig:
        d = {"seed": self.seed, **self.data}
        return DatasetConfig.from_dict(d)

    def effective(self, command: str) -> dict:
        """Fully resolved configuration for the command, for the log."""
        out: dict = {"seed": self.seed}
        if command in ("train", "evaluate"):
            m = self.model_config()
            out["model"] = m.to_dict()
            if command == "train":
                out["loss"] = asdict(self.loss_config(m))
                out["train"] = asdict(self.train_config())
        if command == "simulate":
            d = asdict(self.dataset_config())
            d["scenes"] = [dict(s) for s in d["scenes"]]
            out["data"] = d
        return out


def _known(cls, d: dict, section: str) -> dict:
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown {section} config keys: {sorted(unknown)}")
    return dict(d)


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_run_config(path: Optional[str], overrides: list[str], seed: Optional[int] = None) -> RunConfig:
    raw: dict = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise UsageError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config root must be an object")
    unknown = set(raw) - set(SECTIONS) - {"seed"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    for sec in SECTIONS:
        if not isinstance(raw.get(sec, {}), dict):
            raise ConfigError(f"config section {sec!r} must be an object")
    cfg = RunConfig(seed=raw.get("seed", 0), **{s: dict(raw.get(s, {})) for s in SECTIONS})
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {item!r}")
        if key == "seed":
            cfg.seed = _parse_value(value)
            continue
        section, dot, name = key.partition(".")
        if not dot or section not in SECTIONS or not name:
            raise ConfigError(f"unknown override key {key!r} (use section.field or seed)")
        getattr(cfg, section)[name] = _parse_value(value)
    if seed is not None:
        cfg.seed = seed
        cfg.data.pop("seed", None)
    if not isinstance(cfg.seed, int) or isinstance(cfg.seed, bool):
        raise ConfigError("seed must be an integer")
    return cfg


def _log_effective(cfg: RunConfig, command: str) -> None:
    logger.info("effective config: %s", json.dumps(cfg.effective(command), sort_keys=True))


def _manifest(path) -> dict:
    p = Path(path)
    if not (p / "manifest.json").is_file() and not p.is_file():
        raise UsageError(f"no manifest found at {path}")
    return load_manifest(p)


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(args) -> int:
    cfg = load_run_config(args.config, args.set, args.seed)
    data_cfg = cfg.dataset_config()
    _log_effective(cfg, "simulate")
    gen_dataset(data_cfg, args.out, n_jobs=args.jobs)
    print(Path(args.out) / "manifest.json")
    return EXIT_OK


def cmd_train(args) -> int:
    from .training import fit, format_step

    cfg = load_run_config(args.config, args.set, args.seed)
    model_cfg = cfg.model_config()
    loss_cfg, train_cfg = cfg.loss_config(model_cfg), cfg.train_config()
    _log_effective(cfg, "train")
    manifest = _manifest(args.data)
    train_items = [(m, r) for m, r, _ in load_items(manifest, "train")]
    valid_items = [(m, r) for m, r, _ in load_items(manifest, "valid")]
    if not train_items:
        raise UsageError("dataset has no training scenes")
    log_path = Path(args.log) if args.log else Path(str(args.ckpt_out) + ".log")
    with open(log_path, "w") as log:
        result = fit(model_cfg, train_items, train_cfg, loss_cfg, cfg.seed, valid_items, log_stream=log)
    params = result.params
    if result.best_params is not None:
        named = params.named()
        for k, v in result.best_params.items():
            named[k].data = v
    extra = {"seed": cfg.seed, "steps": len(result.log), "best_valid_delta_snr": result.best_valid if result.best_params else None}
    save_checkpoint(params, model_cfg, result.state, args.ckpt_out, extra)
    if result.log:
        logger.info("last step: %s", format_step(result.log[-1]))
    print(args.ckpt_out)
    return EXIT_OK


def _read_stereo(path) -> np.ndarray:
    try:
        rate, data = read_wav(path)
    except FileNotFoundError as exc:
        raise UsageError(f"input not found: {path}") from exc
    except ValueError as exc:
        raise UsageError(f"cannot read {path} as WAV: {exc}") from exc
    if data.ndim != 2 or data.shape[0] != 2:
        raise UsageError(f"{path}: expected a two-channel (binaural) WAV")
    if rate != SAMPLE_RATE:
        raise UsageError(f"{path}: sample rate {rate} Hz, expected {SAMPLE_RATE}")
    return data


def cmd_separate(args) -> int:
    mix = _read_stereo(args.input)
    params, model_cfg, _, _ = load_checkpoint(args.ckpt)
    est = separate(mix, params, model_cfg)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.input).stem
    for j in range(est.shape[0]):
        path = out / f"{stem}_s{j}.wav"
        write_wav(path, est[j])
        print(path)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .evaluation import evaluate_model, has_undefined

    params, model_cfg, _, _ = load_checkpoint(args.ckpt)
    cfg = RunConfig(seed=0, model=model_cfg.to_dict())
    _log_effective(cfg, "evaluate")
    manifest = _manifest(args.data)
    items = load_items(manifest, args.split)
    if not items:
        raise UsageError(f"dataset has no {args.split!r} scenes")
    report = evaluate_model(params, model_cfg, items, jobs=args.jobs)
    report.update({"checkpoint": str(args.ckpt), "data": str(args.data), "split": args.split})
    Path(args.report).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    for kind, s in report["summary"].items():
        logger.info("%s: %s", kind, json.dumps(s, sort_keys=True))
    print(args.report)
    if has_undefined(report):
        logger.error("undefined cues in %d rows (excluded from means)", sum("error" in r for r in report["rows"]))
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from . import gradcheck as G

    checks = G.layer_checks()
    if not args.skip_model:
        checks += [G.model_check("MIMO"), G.model_check("SISO")]
    if args.only:
        checks = [c for c in checks if args.only in c[0]]
    results = G.run_suite(checks, tolerance=args.tolerance)
    print(G.format_table(results))
    failed = [r.name for r in results if not r.passed]
    if failed:
        logger.error("gradient check failed: %s", ", ".join(failed))
        return EXIT_RUNTIME
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sagrnn", description="Binaural multi-speaker separation toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=False):
        sp.add_argument("--config", required=config_required, help="JSON run configuration")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config field")
        sp.add_argument("--seed", type=int, help="override the master seed")

    s = sub.add_parser("simulate", help="render a synthetic binaural dataset")
    common(s)
    s.add_argument("--out", required=True)
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("train", help="train a separator on a rendered dataset")
    common(s)
    s.add_argument("--data", required=True, help="dataset directory or manifest")
    s.add_argument("--ckpt-out", required=True)
    s.add_argument("--log", help="step log path (default: <ckpt-out>.log)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("separate", help="separate one binaural mixture")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_separate)

    s = sub.add_parser("evaluate", help="score a checkpoint on a dataset split")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--report", required=True)
    s.add_argument("--split", default="test", choices=("train", "valid", "test"))
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    s.add_argument("--tolerance", type=float, default=1e-4)
    s.add_argument("--only", help="run checks whose name contains this text")
    s.add_argument("--skip-model", action="store_true", help="skip the full-model checks")
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse reports usage errors with status 2
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    if getattr(args, "jobs", 1) < 1:
        logger.error("--jobs must be >= 1")
        return EXIT_USAGE
    try:
        return args.func(args)
    except (UsageError, ConfigError, SceneError, TypeError) as exc:
        logger.error("%s", exc)
        return EXIT_USAGE
    except (NumericError, CheckpointError, DimensionError, OSError, ValueError) as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
