"""Run configuration: every knob of the pipeline in one flat, validated record."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class HyperParams:
    gamma1: float = 5.0
    gamma2: float = 5.0
    gamma3: float = 10.0
    batch_damsm: int = 50  # M
    lambda_damsm: float = 5.0
    stages: int = 2  # m
    word_dim: int = 32  # D
    hidden_dim: int = 32  # D-hat
    z_dim: int = 16

    def validate(self) -> None:
        for name in ("gamma1", "gamma2", "gamma3"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.batch_damsm < 2:
            raise ConfigError("batch_damsm (M) must be at least 2")
        if self.stages not in (2, 3):
            raise ConfigError("stages must be 2 or 3")
        if self.lambda_damsm < 0:
            raise ConfigError("lambda_damsm must be non-negative")
        if self.word_dim <= 0 or self.word_dim % 2:
            raise ConfigError("word_dim must be positive and even")
        if self.hidden_dim <= 0 or self.z_dim <= 0:
            raise ConfigError("hidden_dim and z_dim must be positive")


@dataclass
class RunConfig(HyperParams):
    seed: int = 0
    data_dir: str = "data"
    out_dir: str = "run"
    # data
    image_side: int = 32
    n_train: int = 500
    n_test: int = 100
    # text encoder
    embed_dim: int = 16
    max_len: int = 16
    # image encoder
    grid_side: int = 4
    freeze_backbone: bool = False
    # generator
    c_dim: int = 16
    ca_kl_weight: float = 0.0
    # discriminator
    disc_width: int = 16
    mismatch_real: bool = False
    # optimisation
    damsm_lr: float = 2e-3
    damsm_betas: tuple = (0.9, 0.999)
    damsm_epochs: int = 30
    g_lr: float = 2e-4
    d_lr: float = 2e-4
    gan_betas: tuple = (0.5, 0.999)
    gan_epochs: int = 40
    gan_batch: int = 20
    damsm_reduction: str = "mean"  # "sum" keeps the batch-summed matching loss in the G objective
    checkpoint_every: int = 0  # epochs; 0 = only at the end
    # evaluation
    eval_candidates: int = 10
    eval_R: int = 1
    eval_queries: int = 300
    # visualisation
    viz_sigma: float = 0.0  # 0 -> image_side / 16
    viz_topk: int = 5

    def validate(self) -> None:
        super().validate()
        if self.image_side < 16 or self.image_side & (self.image_side - 1):
            raise ConfigError("image_side must be a power of two >= 16")
        base = self.image_side >> (self.stages - 1)
        if base < 4:
            raise ConfigError(f"image_side {self.image_side} too small for {self.stages} stages")
        if self.n_train < 1 or self.n_test < 1:
            raise ConfigError("n_train and n_test must be >= 1")
        if self.gan_batch < 2:
            raise ConfigError("gan_batch must be >= 2")
        if self.damsm_reduction not in ("mean", "sum"):
            raise ConfigError("damsm_reduction must be 'mean' or 'sum'")
        if not 1 <= self.eval_R <= self.eval_candidates:
            raise ConfigError("need 1 <= eval_R <= eval_candidates")
        for name in ("damsm_lr", "g_lr", "d_lr"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("damsm_betas", "gan_betas"):
            b = getattr(self, name)
            if len(b) != 2 or not all(0 <= x < 1 for x in b):
                raise ConfigError(f"{name} must be two numbers in [0, 1)")

    @property
    def stage_sides(self) -> list[int]:
        base = self.image_side >> (self.stages - 1)
        return [base << i for i in range(self.stages)]

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _coerce(name: str, value):
    default = getattr(RunConfig, name, None)
    if isinstance(default, bool):
        if isinstance(value, str):
            low = value.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ConfigError(f"{name}: expected a boolean, got {value!r}")
        return bool(value)
    if isinstance(default, int):
        if isinstance(value, float) and not value.is_integer():
            raise ConfigError(f"{name}: expected an integer, got {value!r}")
        return int(value)
    if isinstance(default, float):
        return float(value)
    if isinstance(default, tuple):
        return tuple(float(x) for x in value)
    return str(value)


def make_config(values: dict | None = None) -> RunConfig:
    """Build and validate a config; unknown keys are rejected."""
    values = dict(values or {})
    unknown = sorted(set(values) - set(_FIELDS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    try:
        cfg = RunConfig(**{k: _coerce(k, v) for k, v in values.items()})
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None
    cfg.validate()
    return cfg


def parse_override(text: str) -> tuple[str, object]:
    if "=" not in text:
        raise ConfigError(f"override must look like key=value, got {text!r}")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def load_config(path: str | None, overrides=()) -> RunConfig:
    values = {}
    if path:
        try:
            values = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(values, dict):
            raise ConfigError(f"{path}: top level must be an object")
    for item in overrides:
        k, v = parse_override(item)
        values[k] = v
    return make_config(values)
