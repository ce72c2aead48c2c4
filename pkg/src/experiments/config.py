"""
Experiment configuration.

Config files are flat ``key = value`` text with dotted section prefixes,
read with python-dotenv (comments, quoting and ``${VAR}`` interpolation
included). Every key has a default in ``settings.SROOD_DEFAULTS``; the
resolved set is written next to every run's outputs.
"""

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

from django.conf import settings
from django.core.exceptions import ValidationError
from dotenv import dotenv_values

from erosion.services import VARIANTS
from metrics.networks import PhiConfig
from metrics.services import SCORE_FUNCTIONS, LossWeights
from repairer.networks import RepairerConfig
from scoring.services import ThresholdSpec
from training.services import TrainConfig

logger = logging.getLogger(__name__)

RESOLVED_CONFIG_FILE = "resolved_config.txt"


def _parse(key: str, raw: str, cast):
    try:
        return cast(raw.strip())
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"invalid value for {key}: {raw!r} ({exc})", code="invalid_value")


def _bool(raw: str) -> bool:
    lowered = raw.lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError("expected true or false")


def _ints(raw: str) -> Tuple[int, ...]:
    return tuple(int(part) for part in raw.split(",") if part.strip())


def _resolution(raw: str) -> Tuple[int, int]:
    rows, _, cols = raw.lower().partition("x")
    return (int(rows), int(cols or rows))


@dataclass(frozen=True)
class ExperimentConfig:
    values: Dict[str, str]
    base_dir: Path = field(default_factory=Path.cwd)

    def get(self, key: str, cast=str):
        return _parse(key, self.values[key], cast)

    @property
    def manifest(self) -> Path:
        path = Path(self.get("experiment.manifest"))
        return path if path.is_absolute() else self.base_dir / path

    @property
    def out_dir(self) -> Path:
        return Path(self.get("experiment.out_dir"))

    @property
    def variant(self) -> str:
        return self.get("experiment.variant")

    @property
    def seed(self) -> int:
        return self.get("experiment.seed", int)

    @property
    def seeds(self) -> Tuple[int, ...]:
        return self.get("experiment.seeds", _ints)

    @property
    def resolution(self) -> Tuple[int, int]:
        return self.get("repairer.resolution", _resolution)

    @property
    def channels(self) -> int:
        return self.get("repairer.channels", int)

    @property
    def repairer(self) -> RepairerConfig:
        return RepairerConfig(
            resolution=self.resolution,
            channels=self.channels,
            latent_dim=self.get("repairer.latent_dim", int),
            encoder_widths=self.get("repairer.encoder_widths", _ints),
            decoder_widths=self.get("repairer.decoder_widths", _ints),
            mix_alpha=self.get("repairer.mix_alpha", float),
        )

    @property
    def phi(self) -> PhiConfig:
        return PhiConfig(
            resolution=self.resolution,
            channels=self.channels,
            mode=self.get("phi.mode"),
            widths=self.get("phi.widths", _ints),
            tap_layers=self.get("phi.tap_layers", _ints),
            n_iter=self.get("phi.n_iter", int),
            batch_size=self.get("phi.batch_size", int),
            learning_rate=self.get("phi.learning_rate", float),
        )

    @property
    def loss(self) -> LossWeights:
        return LossWeights(self.get("loss.lambda1", float), self.get("loss.lambda2", float))

    @property
    def train(self) -> TrainConfig:
        return TrainConfig(
            n_iter=self.get("train.n_iter", int),
            batch_size=self.get("train.batch_size", int),
            learning_rate=self.get("train.learning_rate", float),
            seed=self.seed,
            optimizer=self.get("train.optimizer"),
            checkpoint_every=self.get("train.checkpoint_every", int),
            log_every=self.get("train.log_every", int),
        )

    @property
    def threshold(self) -> ThresholdSpec:
        return ThresholdSpec(
            method=self.get("threshold.method"),
            epsilon=self.get("threshold.epsilon", float),
            quantile=self.get("threshold.quantile", float),
        )

    @property
    def score_fn(self) -> str:
        return self.get("scoring.score_fn")

    def validate(self) -> "ExperimentConfig":
        """Build every typed section once so bad values fail before any work starts."""
        if self.variant not in VARIANTS:
            raise ValidationError(f"unknown variant: {self.variant}", code="invalid_value")
        if self.score_fn not in SCORE_FUNCTIONS:
            raise ValidationError(f"unknown score function: {self.score_fn}", code="invalid_value")
        if not self.seeds:
            raise ValidationError("experiment.seeds must name at least one seed", code="invalid_value")
        for section in ("repairer", "phi", "loss", "train", "threshold"):
            getattr(self, section)
        for key in ("scoring.label_free_selection", "scoring.baselines"):
            self.get(key, _bool)
        for key in ("scoring.batch_size", "baseline.n_iter", "report.grid_samples",
                    "report.histogram_bins", "diagnose.refine_steps",
                    "diagnose.samples"):
            if self.get(key, int) < 0:
                raise ValidationError(f"{key} must be nonnegative", code="invalid_value")
        if self.get("diagnose.n_probes", int) < 1:
            raise ValidationError("diagnose.n_probes must be at least 1", code="invalid_value")
        self.get("baseline.learning_rate", float)
        return self

    def flag(self, key: str) -> bool:
        return self.get(key, _bool)

    def resolved_text(self) -> str:
        return "".join(f"{key} = {self.values[key]}\n" for key in sorted(self.values))

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(self.resolved_text().encode("utf-8")).hexdigest()[:16]

    def with_values(self, **overrides: str) -> "ExperimentConfig":
        """Copy with dotted keys replaced (pass them as ``experiment__seed="3"``)."""
        values = dict(self.values)
        for key, value in overrides.items():
            dotted = key.replace("__", ".")
            if dotted not in values:
                raise ValidationError(f"unknown config key: {dotted}", code="unknown_key")
            values[dotted] = str(value)
        return ExperimentConfig(values, self.base_dir).validate()

    def write_resolved(self, out_dir: Optional[Union[str, Path]] = None) -> Path:
        out_dir = Path(out_dir or self.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / RESOLVED_CONFIG_FILE
        path.write_text(self.resolved_text(), encoding="utf-8")
        return path


def load_experiment_config(
    path: Optional[Union[str, Path]] = None,
    seed: Optional[int] = None,
    out: Optional[Union[str, Path]] = None,
) -> ExperimentConfig:
    """Defaults, then the config file, then the ``--seed`` / ``--out`` overrides."""
    values = dict(settings.SROOD_DEFAULTS)
    base_dir = Path.cwd()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ValidationError(f"config file not found: {path}", code="config_error")
        parsed = dotenv_values(path)
        unknown = sorted(set(parsed) - set(values))
        if unknown:
            raise ValidationError(f"unknown config keys in {path}: {', '.join(unknown)}", code="unknown_key")
        empty = sorted(key for key, value in parsed.items() if value is None)
        if empty:
            raise ValidationError(f"config keys without a value in {path}: {', '.join(empty)}", code="config_error")
        values.update(parsed)
        base_dir = path.resolve().parent
    if seed is not None:
        values["experiment.seed"] = str(seed)
    if out is not None:
        values["experiment.out_dir"] = str(out)
    config = ExperimentConfig(values, base_dir).validate()
    logger.debug(f"Resolved experiment config {config.config_hash}")
    return config
