"""Command-line front end: calibrate, train, sweep and audit.

Each run reads one YAML config (plus ``--set section.key=value`` overrides),
validates it completely, and only then creates the output directory. The
directory comes from ``--output-dir``, else ``$DPSGD_OUTPUT_DIR``, else
``dpsgd-runs/<command>-<config hash prefix>``.

Exit codes: 0 success, 1 privacy violation (audit bound above the nominal
epsilon, or a training run that overspent), 2 configuration or other error.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import itertools
import json
import math
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import yaml

from dpsgd import __version__, accountant, auditor, trainer
from dpsgd.accountant import PrivacyBudget
from dpsgd.config import RunConfig, load_config
from dpsgd.data import AugmentSpec, Dataset, load_idx, standardize, synth_blobs, train_valid_split
from dpsgd.errors import CalibrationError, ConfigurationError, DomainError
from dpsgd.nn import ModelSpec, save_checkpoint
from dpsgd.privatizer import PrivatizationConfig
from dpsgd.rng import substream

OUTPUT_ENV = "DPSGD_OUTPUT_DIR"

EXIT_OK = 0
EXIT_VIOLATION = 1
EXIT_ERROR = 2


# --- manifest ------------------------------------------------------------------


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


@dataclass
class RunManifest:
    command: str
    config_hash: str
    resolved_config: dict
    library_version: str = __version__
    started_at: str = field(default_factory=_now)
    finished_at: Optional[str] = None
    status: str = "running"
    exit_code: Optional[int] = None
    outputs: List[dict] = field(default_factory=list)

    def write(self, directory: Path) -> None:
        (directory / "manifest.json").write_text(_dumps(self.__dict__), encoding="utf-8")

    def finalize(self, directory: Path, files: List[str], status: str, exit_code: int) -> None:
        self.outputs = [
            {"path": name, "bytes": (directory / name).stat().st_size, "sha256": _sha256(directory / name)}
            for name in files
        ]
        self.finished_at, self.status, self.exit_code = _now(), status, exit_code
        self.write(directory)


def _json_safe(x):
    if isinstance(x, float) and not math.isfinite(x):
        return "nan" if math.isnan(x) else ("inf" if x > 0 else "-inf")
    if isinstance(x, dict):
        return {k: _json_safe(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_json_safe(v) for v in x]
    if isinstance(x, np.generic):
        return _json_safe(x.item())
    return x


def _dumps(obj) -> str:
    return json.dumps(_json_safe(obj), indent=2, sort_keys=True, allow_nan=False) + "\n"


class Run:
    """Output directory bookkeeping for one command."""

    def __init__(self, command: str, config: RunConfig, directory: Optional[str]):
        self.config = config
        digest = config.digest()
        self.dir = Path(directory or os.environ.get(OUTPUT_ENV) or f"dpsgd-runs/{command}-{digest[:12]}")
        self.files: List[str] = []
        self.manifest = RunManifest(command, digest, config.resolved())

    def __enter__(self) -> "Run":
        self.dir.mkdir(parents=True, exist_ok=True)
        self.manifest.write(self.dir)
        self.write_text("resolved_config.yaml", yaml.safe_dump(self.config.resolved(), sort_keys=True))
        return self

    def write_text(self, name: str, text: str) -> None:
        (self.dir / name).write_text(text, encoding="utf-8")
        self.files.append(name)

    def write_checkpoint(self, name: str, params) -> None:
        save_checkpoint(self.dir / name, params)
        self.files.append(name)

    def finish(self, exit_code: int, status: str) -> int:
        self.manifest.finalize(self.dir, self.files, status, exit_code)
        return exit_code

    def __exit__(self, exc_type, exc, tb):
        if exc is not None:
            self.finish(EXIT_ERROR, f"failed: {type(exc).__name__}: {exc}")
        return False


# --- building blocks ------------------------------------------------------------


def build_datasets(cfg: RunConfig) -> Tuple[Dataset, Dataset]:
    """(train, eval) datasets described by the data section."""
    d = cfg.data
    if d.source == "blobs":
        train = synth_blobs(d.n, d.classes, d.dim, d.separation, cfg.seed, "train")
        test = synth_blobs(d.test_n, d.classes, d.dim, d.separation, cfg.seed, "test")
    else:
        if not (d.train_images and d.train_labels):
            raise ConfigurationError("data.source=idx needs data.train_images and data.train_labels")
        train = load_idx(d.train_images, d.train_labels)
        if d.test_images and d.test_labels:
            test = load_idx(d.test_images, d.test_labels, train.num_classes, "test")
        else:
            test = None
    if d.valid_fraction is not None:
        train, test = train_valid_split(train, d.valid_fraction, cfg.seed)
    if test is None:
        raise ConfigurationError("no evaluation split: give test files or data.valid_fraction")
    if d.source == "idx" and d.standardize:
        train, test = standardize(train, test)
    return train, test


def build_model_spec(cfg: RunConfig, dataset: Dataset) -> ModelSpec:
    m = cfg.model
    return ModelSpec(
        architecture=m.architecture,
        input_shape=dataset.example_shape,
        num_classes=dataset.num_classes,
        hidden=tuple(m.hidden),
        channels=tuple(m.channels),
        group_count=m.group_count,
        use_weight_standardization=m.weight_standardization,
    )


def build_augment(cfg: RunConfig, dataset: Dataset) -> Optional[AugmentSpec]:
    a = cfg.data.augment
    if a is None:
        if cfg.train.augmult > 1:
            raise ConfigurationError("train.augmult > 1 needs a data.augment section")
        return None
    if not dataset.is_image:
        raise ConfigurationError("data.augment applies to image datasets only")
    return AugmentSpec(a.pad_pixels, a.crop_size, a.horizontal_flip, cfg.train.augmult)


def build_privatization(cfg: RunConfig, sigma: float) -> PrivatizationConfig:
    t = cfg.train
    per_step, rem = divmod(t.batch_size, t.accumulation_steps)
    if rem or per_step % t.devices:
        raise ConfigurationError(
            f"batch size {t.batch_size} does not split over {t.accumulation_steps} accumulation "
            f"steps and {t.devices} devices"
        )
    return PrivatizationConfig(
        clip_norm=cfg.privacy.clip_norm,
        noise_multiplier=sigma,
        total_batch=t.batch_size,
        local_batch=per_step // t.devices,
        accumulation_steps=t.accumulation_steps,
        devices=t.devices,
        augmult=t.augmult,
    )


def resolve_privacy(cfg: RunConfig, n: int, batch_size: int) -> Tuple[float, int, Optional[PrivacyBudget]]:
    """(sigma, steps, budget) for a training run on ``n`` examples.

    At most one of epsilon, sigma and steps may be missing, and steps must be
    given whenever sigma is zero (a non-private run). A missing epsilon with
    sigma > 0 becomes the epsilon actually spent.
    """
    p = cfg.privacy
    if batch_size > n:
        raise ConfigurationError(f"batch size {batch_size} exceeds dataset size {n}")
    q = batch_size / n
    delta = p.delta if p.delta is not None else 1.0 / n
    eps, sigma, steps = p.epsilon, p.noise_multiplier, p.steps
    missing = [name for name, v in (("epsilon", eps), ("noise_multiplier", sigma), ("steps", steps)) if v is None]
    if len(missing) > 1:
        raise ConfigurationError(f"privacy section leaves {missing} unspecified; give all but one")
    if eps is not None and math.isinf(eps):
        if steps is None:
            raise ConfigurationError("epsilon=inf needs privacy.steps")
        return (0.0 if sigma is None else sigma), steps, None if not sigma else PrivacyBudget(eps, delta)
    if sigma == 0:
        if eps is not None:
            raise ConfigurationError("noise_multiplier=0 gives no finite epsilon; set epsilon: .inf")
        return 0.0, steps, None
    if steps is None:
        steps = accountant.calibrate_steps(PrivacyBudget(eps, delta), q, sigma, conversion=p.conversion)
        if steps == 0:
            raise ConfigurationError(f"not even one step with sigma={sigma} fits epsilon={eps}")
    elif sigma is None:
        if steps == 0:
            raise ConfigurationError("steps=0 leaves sigma undetermined")
        sigma = accountant.calibrate_sigma(PrivacyBudget(eps, delta), q, steps, conversion=p.conversion)
    elif eps is None:
        spent = accountant.epsilon_of(accountant.SamplingSpec(q, sigma, steps), delta, conversion=p.conversion)[0]
        eps = max(spent, 1e-300)
    return sigma, steps, PrivacyBudget(eps, delta)


def build_train_config(cfg: RunConfig, dataset: Dataset) -> trainer.TrainConfig:
    sigma, steps, budget = resolve_privacy(cfg, len(dataset), cfg.train.batch_size)
    t = cfg.train
    config = trainer.TrainConfig(
        learning_rate=t.learning_rate,
        privatization=build_privatization(cfg, sigma),
        steps=steps,
        budget=budget,
        eval_cadence=t.eval_cadence or steps,
        seed=cfg.seed,
        ema_decay=t.ema_decay,
        augment=build_augment(cfg, dataset),
        conversion=cfg.privacy.conversion,
    )
    config.check_budget(len(dataset))
    return config


def _emit(lines: List[str]) -> None:
    print("\n".join(lines))


# --- calibrate --------------------------------------------------------------------


def cmd_calibrate(cfg: RunConfig, output_dir: Optional[str] = None) -> int:
    p = cfg.privacy
    n = p.dataset_size or (cfg.data.n if cfg.data.source == "blobs" else None)
    if n is None:
        raise ConfigurationError("calibrate needs privacy.dataset_size for non-synthetic data")
    b = p.batch_size or cfg.train.batch_size
    if b > n:
        raise ConfigurationError(f"batch size {b} exceeds dataset size {n}")
    q = b / n
    delta = p.delta if p.delta is not None else 1.0 / n
    eps, sigma, steps = p.epsilon, p.noise_multiplier, p.steps
    missing = [name for name, v in (("epsilon", eps), ("noise_multiplier", sigma), ("steps", steps)) if v is None]
    if len(missing) != 1:
        raise ConfigurationError(
            f"calibrate needs exactly one of epsilon, noise_multiplier, steps unspecified; missing: {missing}"
        )
    if sigma is not None and sigma <= 0:
        raise ConfigurationError("calibrate needs noise_multiplier > 0")
    if eps is not None and not math.isfinite(eps):
        raise ConfigurationError("calibrate needs a finite epsilon")
    if missing == ["steps"]:
        steps = accountant.calibrate_steps(PrivacyBudget(eps, delta), q, sigma, conversion=p.conversion)
    elif missing == ["noise_multiplier"]:
        if steps == 0:
            raise ConfigurationError("steps=0 leaves sigma undetermined")
        sigma = accountant.calibrate_sigma(PrivacyBudget(eps, delta), q, steps, conversion=p.conversion)
    curve = accountant.rdp_curve(q, sigma)
    spent, order = accountant.epsilon_from_curve(curve, steps, delta, p.conversion)
    summary = {
        "epsilon": spent,
        "epsilon_budget": eps,
        "delta": delta,
        "noise_multiplier": sigma,
        "steps": steps,
        "sampling_ratio": q,
        "batch_size": b,
        "dataset_size": n,
        "best_order": order,
        "conversion": p.conversion,
        "calibrated": missing[0],
        "note": accountant.SAMPLING_NOTE,
    }
    curve_csv = curve.to_csv(steps)
    with Run("calibrate", cfg, output_dir) as run:
        run.write_text("calibration.json", _dumps(summary))
        run.write_text("rdp_curve.csv", curve_csv)
        _emit([f"{k}: {summary[k]}" for k in summary] + [""])
        sys.stdout.write(curve_csv)
        return run.finish(EXIT_OK, "completed")


# --- train ----------------------------------------------------------------------


def cmd_train(cfg: RunConfig, output_dir: Optional[str] = None) -> int:
    train_set, eval_set = build_datasets(cfg)
    spec = build_model_spec(cfg, train_set)
    config = build_train_config(cfg, train_set)
    with Run("train", cfg, output_dir) as run:
        result = trainer.train(spec, train_set, config, eval_set)
        run.write_text("metrics.csv", trainer.metrics_csv(result.metrics))
        run.write_checkpoint("final.ckpt", result.params)
        run.write_checkpoint("ema.ckpt", result.ema_params)
        spent = max([r.epsilon_spent for r in result.metrics] + [result.epsilon])
        overspent = config.budget is not None and spent > config.budget.epsilon
        last = result.metrics[-1] if result.metrics else None
        _emit(
            [
                f"steps: {config.steps}",
                f"noise_multiplier: {config.privatization.noise_multiplier}",
                f"epsilon: {result.epsilon}",
                f"eval_accuracy: {last.eval_accuracy if last else 'n/a'}",
                f"ema_eval_accuracy: {last.ema_eval_accuracy if last else 'n/a'}",
                f"note: {accountant.SAMPLING_NOTE}",
                f"output_dir: {run.dir}",
            ]
        )
        if overspent:
            return run.finish(EXIT_VIOLATION, f"budget exceeded: epsilon {spent}")
        return run.finish(EXIT_OK, "completed")


# --- sweep ------------------------------------------------------------------------


def cmd_sweep(cfg: RunConfig, output_dir: Optional[str] = None) -> int:
    if cfg.sweep is None:
        raise ConfigurationError("sweep needs a sweep section")
    grid = cfg.sweep.grid()
    trainer.grid_points(grid)
    p = cfg.privacy
    if p.epsilon is None or not math.isfinite(p.epsilon):
        raise ConfigurationError("sweep needs a finite privacy.epsilon")
    train_set, eval_set = build_datasets(cfg)
    spec = build_model_spec(cfg, train_set)
    if "noise_multiplier" not in grid and "steps" not in grid and not p.noise_multiplier:
        raise ConfigurationError("sweep needs a noise_multiplier or steps axis, or privacy.noise_multiplier > 0")
    budget = PrivacyBudget(p.epsilon, p.delta if p.delta is not None else 1.0 / len(train_set))
    base = trainer.TrainConfig(
        learning_rate=cfg.train.learning_rate,
        privatization=build_privatization(cfg, p.noise_multiplier or 0.0),
        steps=0,
        seed=cfg.seed,
        ema_decay=cfg.train.ema_decay,
        augment=build_augment(cfg, train_set),
        conversion=p.conversion,
    )
    with Run("sweep", cfg, output_dir) as run:
        rows = trainer.sweep(grid, spec, train_set, budget, base, eval_set)
        run.write_text("sweep.csv", trainer.sweep_csv(rows))
        best = trainer.best_row(rows)
        _emit(
            [
                f"points: {len(rows)}",
                f"skipped: {sum(r.skipped for r in rows)}",
                "best: " + (",".join(best.csv_fields()) if best else "none"),
                f"output_dir: {run.dir}",
            ]
        )
        return run.finish(EXIT_OK, "completed")


# --- audit ------------------------------------------------------------------------


def build_canary(kind: str, label: int, base: Dataset, cfg: RunConfig) -> Tuple[np.ndarray, int]:
    shape = base.example_shape
    if label >= base.num_classes:
        raise ConfigurationError(f"canary label {label} is not one of {base.num_classes} classes")
    if kind in ("blank", "none"):
        return np.zeros(shape), label
    if kind == "noise":
        return substream(cfg.seed, "canary").standard_normal(shape), label
    # mislabel: an unseen in-distribution example with a shifted label
    d = cfg.data
    if d.source == "blobs":
        fresh = synth_blobs(d.classes, d.classes, d.dim, d.separation, cfg.seed, "valid")
    else:
        fresh, _ = build_datasets(cfg)
        fresh = fresh.subset([cfg.audit.dataset_size])
    return fresh.inputs[0], int(fresh.labels[0] + 1) % base.num_classes


def build_audit_config(cfg: RunConfig) -> auditor.AuditConfig:
    a = cfg.audit
    if a is None:
        raise ConfigurationError("audit needs an audit section")
    d = cfg.data
    if d.source == "blobs":
        if a.dataset_size < d.classes:
            raise ConfigurationError(f"audit.dataset_size {a.dataset_size} is smaller than {d.classes} classes")
        base = synth_blobs(a.dataset_size, d.classes, d.dim, d.separation, cfg.seed, "train")
    else:
        full, _ = build_datasets(cfg)
        if a.dataset_size >= len(full):
            raise ConfigurationError(f"audit.dataset_size {a.dataset_size} needs more than {len(full)} examples")
        base = full.subset(np.arange(a.dataset_size))
    eps = cfg.privacy.epsilon
    if eps is None:
        raise ConfigurationError("audit needs privacy.epsilon (use .inf for no noise)")
    delta = cfg.privacy.delta if cfg.privacy.delta is not None else 1.0 / a.dataset_size
    canary, label = build_canary(a.canary, a.canary_label, base, cfg)
    config = auditor.AuditConfig(
        base_dataset=base,
        canary_input=canary,
        canary_label=label,
        budget=PrivacyBudget(eps, delta),
        model_spec=build_model_spec(cfg, base),
        learning_rate=a.learning_rate,
        clip_norm=a.clip_norm,
        steps=a.steps,
        models_per_arm=a.models_per_arm,
        holdout_fraction=a.holdout_fraction,
        confidence=a.confidence,
        insert_canary=a.canary != "none",
        noise_multiplier=cfg.privacy.noise_multiplier,
        seed=cfg.seed,
    )
    config.split()
    config.resolved_noise_multiplier()
    return config


def phase1_variants(cfg: RunConfig, config: auditor.AuditConfig) -> List[Tuple[dict, auditor.AuditConfig]]:
    ph = cfg.audit.phase1
    axes = {
        "learning_rate": ph.learning_rate or [config.learning_rate],
        "clip_norm": ph.clip_norm or [config.clip_norm],
        "steps": ph.steps or [config.steps],
        "canary": ph.canary or [cfg.audit.canary],
    }
    variants = []
    for values in itertools.product(*axes.values()):
        point = dict(zip(axes, values))
        canary, label = build_canary(point["canary"], cfg.audit.canary_label, config.base_dataset, cfg)
        variant = auditor.with_overrides(
            config,
            learning_rate=point["learning_rate"],
            clip_norm=point["clip_norm"],
            steps=point["steps"],
            canary_input=canary,
            canary_label=label,
            insert_canary=point["canary"] != "none",
        )
        variant.resolved_noise_multiplier()
        variants.append((point, variant))
    return variants


def cmd_audit(cfg: RunConfig, output_dir: Optional[str] = None) -> int:
    config = build_audit_config(cfg)
    variants = phase1_variants(cfg, config) if cfg.audit.phase1 is not None else None
    with Run("audit", cfg, output_dir) as run:
        chosen = {"learning_rate": config.learning_rate, "clip_norm": config.clip_norm,
                  "steps": config.steps, "canary": cfg.audit.canary}
        if variants:
            ranked = auditor.phase1_distinguishability(
                [v for _, v in variants], cfg.audit.phase1.models_per_arm
            )
            lines = ["rank,variant,learning_rate,clip_norm,steps,canary,tv_distance,degenerate"]
            for rank, r in enumerate(ranked):
                pt = variants[r.index][0]
                lines.append(
                    f"{rank},{r.index},{pt['learning_rate']!r},{pt['clip_norm']!r},{pt['steps']},"
                    f"{pt['canary']},{r.tv_distance!r},{r.degenerate}"
                )
            run.write_text("phase1.csv", "\n".join(lines) + "\n")
            chosen, config = variants[ranked[0].index]
        outcome = auditor.run_audit(config)
        holdout, _ = config.split()
        report = outcome.to_dict()
        report["audit"] = dict(chosen, dataset_size=len(config.base_dataset), models_per_arm=config.models_per_arm)
        run.write_text("audit_report.json", _dumps(report))
        run.write_text("canary_losses.csv", outcome.losses.to_csv(holdout))
        _emit(
            [
                f"nominal_epsilon: {outcome.nominal_epsilon}",
                f"noise_multiplier: {outcome.noise_multiplier}",
                f"epsilon_lower_bound: {outcome.epsilon_lower_bound}",
                f"membership_auc: {outcome.membership_auc}",
                f"membership_advantage: {outcome.membership_advantage}",
                f"advantage_upper_bound: {outcome.advantage_upper_bound}",
                f"violation: {outcome.violation}",
                f"output_dir: {run.dir}",
            ]
        )
        if outcome.violation:
            return run.finish(EXIT_VIOLATION, "violation: lower bound exceeds nominal epsilon")
        return run.finish(EXIT_OK, "completed")


# --- entry point ------------------------------------------------------------------

COMMANDS: Dict[str, Callable[[RunConfig, Optional[str]], int]] = {
    "calibrate": cmd_calibrate,
    "train": cmd_train,
    "sweep": cmd_sweep,
    "audit": cmd_audit,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dpsgd", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("config", help="YAML run config")
        p.add_argument(
            "--set",
            dest="overrides",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="override a config field, e.g. --set privacy.epsilon=8",
        )
        p.add_argument("--output-dir", default=None, help=f"output directory (default: ${OUTPUT_ENV})")
    return parser


def _fail(exc: Exception) -> int:
    sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc)}) + "\n")
    return EXIT_ERROR


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_ERROR
    try:
        cfg = load_config(args.config, args.overrides)
        return COMMANDS[args.command](cfg, args.output_dir)
    except (ConfigurationError, DomainError, CalibrationError, ValueError, OSError) as exc:
        return _fail(exc)
    except Exception as exc:  # any other module failure still gets a structured message
        return _fail(exc)


if __name__ == "__main__":
    sys.exit(main())
