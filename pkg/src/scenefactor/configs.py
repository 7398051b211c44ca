"""Configuration dataclasses, presets, and the sectioned key-value config file format."""

import dataclasses
import typing
from dataclasses import dataclass, field


class ConfigError(ValueError):
    """Raised for invalid or unknown configuration values."""


def _is_perfect_square(n: int) -> bool:
    r = int(round(n ** 0.5))
    return r * r == n


@dataclass
class ModelConfig:
    """Shape and architecture hyperparameters for the full model.

    Defaults are the desk-scale configuration (trains in minutes on a CPU).
    ``full_model_config()`` returns the large reference preset.
    """

    num_slots: int = 4          # K, object slots
    latent_dim: int = 16        # per-latent dimensionality
    frames: int = 8             # T, input sequence length
    height: int = 32
    width: int = 32
    cnn_channels: int = 64      # C
    cnn_kernel: int = 4
    cnn_stride: int = 2
    cnn_layers: int = 2
    tr_layers: int = 2
    tr_heads: int = 4
    tr_value_size: int = 32
    tr_mlp_hidden: int = 256
    agg_mlp_hidden: int = 256
    decoder_layers: int = 4
    decoder_channels: int = 128
    vs_mode: bool = False       # view-supervised: condition on pose, no frame latents
    pose_dim: int = 2
    pose_mlp_hidden: int = 64
    pose_embed_dim: int = 16    # width of the pose embedding fed to encoder/decoder

    @property
    def grid_rows(self) -> int:
        """I: post-CNN spatial rows."""
        return self.height // self.cnn_stride ** self.cnn_layers

    @property
    def grid_cols(self) -> int:
        """J: post-CNN spatial cols."""
        return self.width // self.cnn_stride ** self.cnn_layers

    @property
    def embed_dim(self) -> int:
        """Transformer embedding width = heads * value size."""
        return self.tr_heads * self.tr_value_size

    @property
    def pooled_side(self) -> int:
        """Side length of the slot grid after spatial pooling (sqrt(K))."""
        return int(round(self.num_slots ** 0.5))

    def validate(self) -> None:
        if self.height % self.cnn_stride ** self.cnn_layers != 0:
            raise ConfigError(
                f"height {self.height} not divisible by stride^layers "
                f"({self.cnn_stride}^{self.cnn_layers})")
        if self.width % self.cnn_stride ** self.cnn_layers != 0:
            raise ConfigError(
                f"width {self.width} not divisible by stride^layers "
                f"({self.cnn_stride}^{self.cnn_layers})")
        i, j, k = self.grid_rows, self.grid_cols, self.num_slots
        if i * j < k:
            raise ConfigError(f"spatial grid {i}x{j} smaller than num_slots {k}")
        if i * j > k:
            if not _is_perfect_square(k):
                raise ConfigError(
                    f"num_slots {k} must be a perfect square when the {i}x{j} grid is pooled")
            side = self.pooled_side
            if i % side != 0 or j % side != 0:
                raise ConfigError(
                    f"pool kernel [{i}/{side}, {j}/{side}] does not tile the grid evenly")
        for name in ("num_slots", "latent_dim", "frames", "cnn_channels", "tr_layers",
                     "tr_heads", "tr_value_size", "tr_mlp_hidden", "agg_mlp_hidden",
                     "decoder_layers", "decoder_channels"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")


@dataclass
class LossConfig:
    """Weights and scales of the training objective.

    ``beta_o`` may be annealed geometrically to ``beta_o_final`` over
    ``beta_o_anneal_steps`` steps and is constant thereafter; ``beta_f`` is
    never annealed.
    """

    alpha: float = 0.2          # likelihood scale
    sigma_x: float = 0.08       # pixel likelihood std
    beta_o: float = 1e-5        # object-latent KL weight (anneal start if annealed)
    beta_f: float = 1e-4        # frame-latent KL weight
    beta_o_final: typing.Optional[float] = None
    beta_o_anneal_steps: int = 0

    def validate(self) -> None:
        for name in ("alpha", "sigma_x", "beta_o", "beta_f"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.beta_o_final is not None:
            if self.beta_o_final <= 0:
                raise ConfigError("beta_o_final must be positive")
            if self.beta_o_anneal_steps <= 0:
                raise ConfigError("beta_o_anneal_steps must be positive when annealing")

    def beta_o_at(self, step: int) -> float:
        """Geometric interpolation start->final over the window, constant after."""
        if self.beta_o_final is None or self.beta_o_anneal_steps <= 0:
            return self.beta_o
        frac = min(max(step, 0) / self.beta_o_anneal_steps, 1.0)
        return self.beta_o * (self.beta_o_final / self.beta_o) ** frac


@dataclass
class DecodeConfig:
    """How many frames and pixels are decoded per training step."""

    frames_decoded: int = 4     # T_d
    height_decoded: int = 16    # H_d
    width_decoded: int = 16     # W_d

    def validate_against(self, model: ModelConfig) -> None:
        if not 0 < self.frames_decoded <= model.frames:
            raise ConfigError(f"frames_decoded {self.frames_decoded} outside [1, {model.frames}]")
        for dec, full, name in ((self.height_decoded, model.height, "height_decoded"),
                                (self.width_decoded, model.width, "width_decoded")):
            if not 0 < dec <= full:
                raise ConfigError(f"{name} {dec} outside [1, {full}]")
            if full % dec != 0:
                raise ConfigError(f"{name} {dec} does not stride-divide {full}")


@dataclass
class OptimizerConfig:
    name: str = "adam"
    learning_rate: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def validate(self) -> None:
        if self.name != "adam":
            raise ConfigError(f"unsupported optimizer '{self.name}'")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    batch_size: int = 16
    steps: int = 5000
    seed: int = 0
    precision: str = "float32"  # float32 | float64
    checkpoint_every: int = 1000
    eval_every: int = 0         # 0 disables the held-out loss probe
    eval_scenes: int = 8
    data_path: str = ""
    out_dir: str = ""

    def validate(self) -> None:
        self.model.validate()
        self.loss.validate()
        self.decode.validate_against(self.model)
        self.optimizer.validate()
        if self.batch_size <= 0:
            raise ConfigError("batch_size must be positive")
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"precision '{self.precision}' not in (float32, float64)")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be >= 0 (0 = final only)")


def full_model_config() -> ModelConfig:
    """Large reference preset (64x64 inputs, 16 slots, 3-layer CNN, 4-layer transformers)."""
    return ModelConfig(
        num_slots=16, latent_dim=32, frames=16, height=64, width=64,
        cnn_channels=128, cnn_layers=3,
        tr_layers=4, tr_heads=5, tr_value_size=64, tr_mlp_hidden=1024,
        agg_mlp_hidden=1024, decoder_layers=6, decoder_channels=512)


def desk_train_config() -> TrainConfig:
    """Desk-scale default: trains on a single CPU core in tens of minutes."""
    return TrainConfig()


def full_train_config() -> TrainConfig:
    """Reference-scale preset (learning rate 20e-5, decode [8, 32, 32])."""
    return TrainConfig(
        model=full_model_config(),
        loss=LossConfig(alpha=0.2, sigma_x=0.08, beta_o=1e-5, beta_f=1e-4),
        decode=DecodeConfig(frames_decoded=8, height_decoded=32, width_decoded=32),
        optimizer=OptimizerConfig(learning_rate=20e-5),
        steps=500_000)


PRESETS = {"desk": desk_train_config, "full": full_train_config}

_SECTIONS = {
    "model": ("model", ModelConfig),
    "loss": ("loss", LossConfig),
    "decode": ("decode", DecodeConfig),
    "optimizer": ("optimizer", OptimizerConfig),
    "train": (None, TrainConfig),
}


def _coerce(raw: str, target_type) -> object:
    origin = typing.get_origin(target_type)
    if origin is typing.Union:  # Optional[float]
        args = [a for a in typing.get_args(target_type) if a is not type(None)]
        if raw.strip().lower() in ("none", ""):
            return None
        return _coerce(raw, args[0])
    if target_type is bool:
        low = raw.strip().lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(f"cannot parse boolean from '{raw}'")
    if target_type is int:
        return int(raw)
    if target_type is float:
        return float(raw)
    return raw


def _apply_section(obj, section: str, items) -> None:
    hints = typing.get_type_hints(type(obj))
    known = {f.name for f in dataclasses.fields(obj)}
    for key, raw in items:
        if key not in known or key in ("model", "loss", "decode", "optimizer"):
            raise ConfigError(f"unknown key '{key}' in section [{section}]")
        try:
            value = _coerce(raw, hints[key])
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"bad value for '{key}' in [{section}]: {exc}") from exc
        setattr(obj, key, value)


def load_train_config(path: str, base: typing.Optional[TrainConfig] = None) -> TrainConfig:
    """Parse a sectioned key-value config file into a TrainConfig.

    Unknown sections or keys are errors. ``base`` supplies defaults for keys
    the file omits (defaults to the desk preset).
    """
    import configparser

    parser = configparser.ConfigParser()
    parser.optionxform = str  # case-sensitive keys
    read = parser.read(path)
    if not read:
        raise ConfigError(f"config file not found: {path}")
    config = base if base is not None else desk_train_config()
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        attr, _ = _SECTIONS[section]
        target = config if attr is None else getattr(config, attr)
        _apply_section(target, section, parser.items(section))
    config.validate()
    return config


def save_train_config(config: TrainConfig, path: str) -> None:
    """Write a TrainConfig as a sectioned key-value file (inverse of load)."""
    lines = []
    for section, (attr, _) in _SECTIONS.items():
        target = config if attr is None else getattr(config, attr)
        lines.append(f"[{section}]")
        for f in dataclasses.fields(target):
            if f.name in ("model", "loss", "decode", "optimizer"):
                continue
            value = getattr(target, f.name)
            lines.append(f"{f.name} = {value if value is not None else 'none'}")
        lines.append("")
    with open(path, "w") as fh:
        fh.write("\n".join(lines))


def train_config_to_dict(config: TrainConfig) -> dict:
    return dataclasses.asdict(config)


def train_config_from_dict(data: dict) -> TrainConfig:
    data = dict(data)
    parts = {}
    for key, (attr, cls) in _SECTIONS.items():
        if attr is not None and attr in data:
            parts[attr] = cls(**data.pop(attr))
    return TrainConfig(**parts, **data)
