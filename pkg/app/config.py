import os
from pathlib import Path
from typing import List, Optional

from pydantic import BaseModel, Field, ValidationError, model_validator

from app.errors import ConfigError
from app.models import AttackFamily, RefineMode


class Settings:
    def __init__(self):
        # Priority: Env Var > <out_dir>/ledger.db (resolved by the pipeline)
        self.LEDGER_URL: Optional[str] = os.getenv("VIT_LEDGER_URL")
        self.LOG_LEVEL: str = os.getenv("VIT_LOG_LEVEL", "INFO").upper()
        self.WORKERS: int = int(os.getenv("VIT_WORKERS", max(1, (os.cpu_count() or 2) // 2)))


settings = Settings()


class ViTConfig(BaseModel):
    image_side: int = Field(default=32, gt=0)
    channels: int = Field(default=3, gt=0)
    patch_side: int = Field(default=8, gt=0)
    depth: int = Field(default=4, gt=0)
    heads: int = Field(default=4, gt=0)
    embed_dim: int = Field(default=64, gt=0)
    mlp_hidden_dim: int = Field(default=128, gt=0)
    num_classes: int = Field(default=10, gt=1)

    @model_validator(mode="after")
    def _check_divisibility(self):
        if self.image_side % self.patch_side:
            raise ValueError(f"image_side {self.image_side} is not divisible by patch_side {self.patch_side}")
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} is not divisible by heads {self.heads}")
        return self

    @property
    def grid_side(self) -> int:
        return self.image_side // self.patch_side

    @property
    def num_patches(self) -> int:
        return self.grid_side ** 2

    @property
    def tokens(self) -> int:
        return self.num_patches + 1

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_side ** 2


class AttackSpec(BaseModel):
    family: AttackFamily
    epsilon: float = Field(default=0.0, ge=0)
    alpha: float = Field(default=0.025, gt=0)
    iterations: int = Field(default=40, ge=1)
    c: float = Field(default=1e-4, ge=0)
    kappa: float = Field(default=0.0, ge=0)
    cw_steps: int = Field(default=100, ge=1)
    cw_lr: float = Field(default=1e-2, gt=0)

    @property
    def tag(self) -> str:
        if self.family == AttackFamily.CW:
            return f"cw_c{self.c:g}"
        return f"{self.family.value}_eps{self.epsilon:g}"

    @property
    def budget(self) -> float:
        """Perturbation budget used to order specs within a family."""
        return self.c if self.family == AttackFamily.CW else self.epsilon

    def hyperparameters(self) -> str:
        if self.family == AttackFamily.FGSM:
            return f"eps={self.epsilon:g}"
        if self.family == AttackFamily.PGD:
            return f"eps={self.epsilon:g};alpha={self.alpha:g};steps={self.iterations}"
        return f"c={self.c:g};kappa={self.kappa:g};steps={self.cw_steps};lr={self.cw_lr:g}"


class TrainConfig(BaseModel):
    epochs: int = Field(default=50, ge=1)
    batch_size: int = Field(default=32, ge=1)
    learning_rate: float = Field(default=0.05, ge=0)
    momentum: float = Field(default=0.9, ge=0, lt=1)
    target_accuracy: float = Field(default=0.9, ge=0, le=1)


DEFAULT_ATTACKS = "fgsm:0.031;fgsm:0.062;pgd:0.001;pgd:0.003;pgd:0.005;pgd:0.01;cw:0.0001"


class RunConfig(BaseModel):
    seed: int = 7
    out_dir: Path = Path("runs/default")
    dataset: str = "synthetic"
    samples_per_class: int = Field(default=50, ge=1)
    eval_samples: int = Field(default=500, ge=1)
    vit: ViTConfig = Field(default_factory=ViTConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    attacks: List[AttackSpec] = Field(default_factory=list)
    phi: Optional[int] = None
    cka_batch: int = Field(default=4, ge=2)
    refine_mode: RefineMode = RefineMode.CHERRY_PICK
    histogram_bins: int = Field(default=100, ge=1)

    @model_validator(mode="after")
    def _check_phi(self):
        if self.phi is not None and not 0 < self.phi <= 2 * (self.vit.image_side - 1):
            raise ValueError(f"phi must lie in (0, {2 * (self.vit.image_side - 1)}], got {self.phi}")
        return self

    @property
    def frequency_threshold(self) -> int:
        return self.phi if self.phi is not None else self.vit.image_side


_VIT_KEYS = set(ViTConfig.model_fields)
_TRAIN_KEYS = set(TrainConfig.model_fields)
_RUN_KEYS = {"seed", "out_dir", "dataset", "samples_per_class", "eval_samples", "phi",
             "cka_batch", "refine_mode", "histogram_bins"}
_ATTACK_KEYS = {"attacks", "pgd_alpha", "pgd_steps", "cw_kappa", "cw_steps", "cw_lr"}


def parse_attack_grid(text: str, pgd_alpha: float = 0.025, pgd_steps: int = 40,
                      cw_kappa: float = 0.0, cw_steps: int = 100, cw_lr: float = 1e-2) -> List[AttackSpec]:
    """Parse `fgsm:0.031;pgd:0.01;cw:0.0001` into AttackSpecs (value is eps, or c for cw)."""
    specs = []
    for entry in filter(None, (part.strip() for part in text.split(";"))):
        family_name, _, value = entry.partition(":")
        try:
            family = AttackFamily(family_name.strip().lower())
            amount = float(value)
        except ValueError:
            raise ConfigError(f"Malformed attack entry {entry!r}; expected family:value")
        try:
            if family == AttackFamily.CW:
                specs.append(AttackSpec(family=family, c=amount, kappa=cw_kappa, cw_steps=cw_steps, cw_lr=cw_lr))
            else:
                specs.append(AttackSpec(family=family, epsilon=amount, alpha=pgd_alpha, iterations=pgd_steps))
        except ValidationError as exc:
            raise ConfigError(f"Invalid attack entry {entry!r}: {exc}") from exc
    return specs


def parse_config_text(text: str) -> dict:
    values = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"Line {number}: expected key = value, got {raw.strip()!r}")
        values[key.strip()] = value.strip()
    return values


def build_run_config(values: dict) -> RunConfig:
    unknown = set(values) - _VIT_KEYS - _TRAIN_KEYS - _RUN_KEYS - _ATTACK_KEYS
    if unknown:
        raise ConfigError(f"Unknown config keys: {', '.join(sorted(unknown))}")

    try:
        attack_options = {
            "pgd_alpha": float(values.get("pgd_alpha", 0.025)),
            "pgd_steps": int(values.get("pgd_steps", 40)),
            "cw_kappa": float(values.get("cw_kappa", 0.0)),
            "cw_steps": int(values.get("cw_steps", 100)),
            "cw_lr": float(values.get("cw_lr", 1e-2)),
        }
    except ValueError as exc:
        raise ConfigError(f"Invalid attack option: {exc}") from exc
    attacks = parse_attack_grid(values.get("attacks", DEFAULT_ATTACKS), **attack_options)

    run_values = {key: values[key] for key in _RUN_KEYS if key in values}
    if run_values.get("phi") == "":
        run_values.pop("phi")
    try:
        return RunConfig(
            vit=ViTConfig(**{key: values[key] for key in _VIT_KEYS if key in values}),
            train=TrainConfig(**{key: values[key] for key in _TRAIN_KEYS if key in values}),
            attacks=attacks,
            **run_values,
        )
    except ValidationError as exc:
        raise ConfigError(f"Invalid configuration: {exc}") from exc


def load_run_config(path: Optional[Path] = None, seed: Optional[int] = None, out_dir: Optional[Path] = None) -> RunConfig:
    values = {}
    if path is not None:
        try:
            values = parse_config_text(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"Cannot read config file {path}: {exc}") from exc
    if seed is not None:
        values["seed"] = str(seed)
    if out_dir is not None:
        values["out_dir"] = str(out_dir)
    return build_run_config(values)
