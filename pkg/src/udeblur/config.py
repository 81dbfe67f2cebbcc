"""Training configuration: flat key=value files, presets and the learning-rate schedule."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields, replace

from .losses import TASK_PRESETS, LossInputError, LossWeights
from .networks import ConfigError, NetworkConfig


@dataclass(frozen=True)
class Ablation:
    blur_branch: bool
    blur_encoder: bool
    use_kl: bool
    use_perceptual: bool


# Components are enabled cumulatively, one row of the ablation table each.
ABLATIONS = {
    "deblur_only": Ablation(blur_branch=False, blur_encoder=False, use_kl=False, use_perceptual=False),
    "blur_branch": Ablation(blur_branch=True, blur_encoder=False, use_kl=False, use_perceptual=False),
    "disentangle": Ablation(blur_branch=True, blur_encoder=True, use_kl=False, use_perceptual=False),
    "kl": Ablation(blur_branch=True, blur_encoder=True, use_kl=True, use_perceptual=False),
    "full": Ablation(blur_branch=True, blur_encoder=True, use_kl=True, use_perceptual=True),
}
ABLATION_LABELS = {
    "deblur_only": "Only deblurring branch",
    "blur_branch": "Add blurring branch",
    "disentangle": "Add disentanglement",
    "kl": "Add KL divergence loss",
    "full": "Add perceptual loss",
}
LAMBDA_P_SWEEP = (1.0, 0.1, 0.01)
EXTRACTORS = ("surrogate", "vgg19")


@dataclass(frozen=True)
class TrainConfig:
    lambda_adv: float = 1.0
    lambda_kl: float = 0.01
    lambda_cc: float = 10.0
    lambda_p: float = 0.1
    image_channels: int = 3
    base_width: int = 64
    latent_dim: int = 8
    disc_scales: int = 2
    crop_size: int = 128
    res_blocks: int = 4
    batch_size: int = 16
    epochs_flat: int = 40
    epochs_decay: int = 40
    iters_per_epoch: int = 0  # 0: one pass over the larger manifest
    lr0: float = 2e-4
    lr_decay_target: float = 0.01  # final-epoch lr as a fraction of lr0
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    d_steps_per_g: int = 2
    grad_clip: float = 0.0  # max global grad norm per update; 0 disables
    task_preset: str = "generic"
    ablation_preset: str = "full"
    extractor: str = "surrogate"
    extractor_weights: str = ""
    master_seed: int = 0
    log_every: int = 1

    @property
    def weights(self):
        return LossWeights(self.lambda_adv, self.lambda_kl, self.lambda_cc, self.lambda_p)

    @property
    def net(self):
        return NetworkConfig(
            image_channels=self.image_channels,
            base_width=self.base_width,
            latent_dim=self.latent_dim,
            disc_scales=self.disc_scales,
            crop_size=self.crop_size,
            res_blocks=self.res_blocks,
        )

    @property
    def ablation(self):
        return ABLATIONS[self.ablation_preset]

    @property
    def total_epochs(self):
        return self.epochs_flat + self.epochs_decay

    def effective_weights(self):
        """Loss weights after switching off the terms the ablation preset omits."""
        w, a = self.weights, self.ablation
        if not a.use_kl:
            w = replace(w, lambda_kl=0.0)
        if not a.use_perceptual:
            w = replace(w, lambda_p=0.0)
        return w

    def validate(self):
        try:
            self.weights.validate()
        except LossInputError as exc:
            raise ConfigError(str(exc)) from None
        self.net.validate()
        for name in ("batch_size", "d_steps_per_g", "log_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        for name in ("epochs_flat", "epochs_decay", "iters_per_epoch"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")
        if self.total_epochs < 1:
            raise ConfigError("epochs_flat + epochs_decay must be at least 1")
        if not self.lr0 > 0 or not 0 < self.lr_decay_target <= 1:
            raise ConfigError("lr0 must be positive and lr_decay_target in (0, 1]")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)")
        if self.grad_clip < 0:
            raise ConfigError("grad_clip must be nonnegative")
        if self.task_preset not in TASK_PRESETS:
            raise ConfigError(f"task_preset must be one of {TASK_PRESETS}")
        if self.ablation_preset not in ABLATIONS:
            raise ConfigError(f"ablation_preset must be one of {tuple(ABLATIONS)}")
        if self.extractor not in EXTRACTORS:
            raise ConfigError(f"extractor must be one of {EXTRACTORS}")
        return self

    def echo(self):
        """Fully resolved ``key=value`` text; parsing it gives back this config."""
        return "".join(f"{f.name}={getattr(self, f.name)}\n" for f in fields(self))

    def digest(self):
        return hashlib.sha256(self.echo().encode()).hexdigest()


def _coerce(name, kind, raw):
    try:
        if kind is int or kind == "int":
            return int(raw)
        if kind is float or kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {kind}") from None
    return raw


def config_from_dict(values: dict, base: TrainConfig = TrainConfig()) -> TrainConfig:
    kinds = {f.name: f.type for f in fields(TrainConfig)}
    unknown = sorted(set(values) - set(kinds))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    parsed = {k: _coerce(k, kinds[k], v) if isinstance(v, str) else v for k, v in values.items()}
    return replace(base, **parsed).validate()


def parse_config(text: str, base: TrainConfig = TrainConfig()) -> TrainConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = value
    return config_from_dict(values, base)


def load_config(path) -> TrainConfig:
    with open(path) as fh:
        return parse_config(fh.read())


def lr_at(epoch: int, config: TrainConfig) -> float:
    """Flat at lr0, then exponential decay reaching lr0 * lr_decay_target at the last epoch."""
    if not 0 <= epoch < config.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {config.total_epochs})")
    if epoch < config.epochs_flat:
        return config.lr0
    gamma = config.lr_decay_target ** (1.0 / config.epochs_decay)
    return config.lr0 * gamma ** (epoch - config.epochs_flat + 1)
