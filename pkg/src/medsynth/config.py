"""Experiment configuration: a line-oriented `key = value` file with dotted
keys. Unknown keys are rejected; values are typed by their defaults. A config
round-trips exactly through text, and its canonical text is hashed into the
run digest."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError

MODELS = ("msdm-scratch", "base-lora")


@dataclass
class ExperimentConfig:
    seed: int = 0
    model: str = "msdm-scratch"
    out_dir: str = "runs/default"

    dataset_n_images: int = 200
    dataset_image_size: int = 32
    dataset_n_prompts: int = 50
    dataset_holdout_fraction: float = 0.1
    dataset_domain: str = "endo"
    dataset_augment: str = "add"           # none|add|substitute|replace
    dataset_paraphrase_k: int = 3
    dataset_substitute_fraction: float = 0.5

    schedule_kind: str = "linear"
    schedule_T: int = 100
    schedule_beta_start: float = 0.001
    schedule_beta_end: float = 0.2

    train_steps: int = 2000
    train_vae_steps: int = 800
    train_batch_size: int = 16
    train_lr: float = 1e-4
    train_kl_weight: float = 1e-3
    train_weight_decay: float = 0.0

    lora_rank: int = 4
    lora_alpha: float | None = None        # None -> alpha = rank
    lora_steps: int = 300
    lora_pretrain_steps: int = 1500

    sample_guidance_scale: float = 2.0
    sample_drop_probability: float = 0.1
    sample_images_per_prompt: int = 10
    sample_eval_prompts: int = 6

    run_count: int = 5
    embedder: str = "random-projection"

    def __post_init__(self):
        if self.model not in MODELS:
            raise ConfigError(f"model must be one of {MODELS}, got {self.model!r}")
        if self.dataset_augment not in ("none", "add", "substitute", "replace"):
            raise ConfigError(f"bad dataset.augment {self.dataset_augment!r}")
        if self.run_count < 2:
            raise ConfigError("run.count must be >= 2")


_KEY_FOR_FIELD = {f.name: f.name.replace("_", ".", 1) for f in fields(ExperimentConfig)}
_KEY_FOR_FIELD.update({"seed": "seed", "model": "model", "out_dir": "out_dir",
                       "run_count": "run.count", "embedder": "embedder"})
_FIELD_FOR_KEY = {v: k for k, v in _KEY_FOR_FIELD.items()}


def _parse_value(field_name: str, raw: str):
    raw = raw.strip()
    if field_name == "lora_alpha":
        return None if raw.lower() in ("", "none") else float(raw)
    default = getattr(ExperimentConfig, field_name)
    if isinstance(default, bool):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"bad boolean for {field_name}: {raw!r}")
    if isinstance(default, int):
        try:
            return int(raw)
        except ValueError as e:
            raise ConfigError(f"bad integer for {field_name}: {raw!r}") from e
    if isinstance(default, float):
        try:
            return float(raw)
        except ValueError as e:
            raise ConfigError(f"bad float for {field_name}: {raw!r}") from e
    return raw


def parse_config(text: str) -> ExperimentConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in stripped.split("=", 1))
        if key not in _FIELD_FOR_KEY:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        field_name = _FIELD_FOR_KEY[key]
        values[field_name] = _parse_value(field_name, raw)
    return ExperimentConfig(**values)


def load_config(path: str | Path) -> ExperimentConfig:
    return parse_config(Path(path).read_text())


def config_text(cfg: ExperimentConfig) -> str:
    lines = []
    for f in fields(ExperimentConfig):
        val = getattr(cfg, f.name)
        out = "none" if val is None else (repr(val) if isinstance(val, float) else str(val))
        lines.append(f"{_KEY_FOR_FIELD[f.name]} = {out}")
    return "\n".join(sorted(lines)) + "\n"


def save_config(cfg: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(config_text(cfg))


def config_digest(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(config_text(cfg).encode("utf-8")).hexdigest()[:16]


def apply_overrides(cfg: ExperimentConfig, pairs: list[str]) -> ExperimentConfig:
    """Apply CLI overrides of the form key=value."""
    text = config_text(cfg)
    merged = dict(line.split(" = ", 1) for line in text.strip().splitlines())
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} is not key=value")
        k, v = (s.strip() for s in pair.split("=", 1))
        if k not in _FIELD_FOR_KEY:
            raise ConfigError(f"unknown key {k!r}")
        merged[k] = v
    return parse_config("\n".join(f"{k} = {v}" for k, v in merged.items()))
