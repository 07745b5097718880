"""Training configuration: nested dataclasses, YAML round-trip, named presets."""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .model import ModelConfig
from .synthgen import DataConfig, MisalignmentSpec, ModalityAppearance, PhantomSpec


class ConfigValidationError(ValueError):
    pass


@dataclass
class AblationFlags:
    modality_specific_encoder: bool = True
    cmc_strategy: bool = True
    ccl_module: bool = True


# cumulative rows, in the order the ablation table reports them
ABLATION_ROWS = {
    "baseline": AblationFlags(False, False, False),
    "encoder": AblationFlags(True, False, False),
    "cmc": AblationFlags(True, True, False),
    "full": AblationFlags(True, True, True),
}


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    epochs: int = 100
    batch_size_labeled: int = 2
    batch_size_unlabeled: int = 2
    learning_rate: float = 1e-3
    seed: int = 0
    labeled_fraction: float = 0.1
    ablation: AblationFlags = field(default_factory=AblationFlags)
    supervised_mode: str = "symmetric"
    contrastive_denominator: str = "literal"
    csc_on_unlabeled: bool = True
    eval_every: int = 10
    checkpoint_every: int = 0
    deterministic: bool = True

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ConfigValidationError("learning_rate must be >= 0")
        if self.batch_size_labeled < 1 or self.batch_size_unlabeled < 1:
            raise ConfigValidationError("batch sizes must be >= 1")
        if self.epochs < 1:
            raise ConfigValidationError("epochs must be >= 1")
        if not 0 < self.labeled_fraction <= 1:
            raise ConfigValidationError("labeled_fraction must be in (0, 1]")
        if self.supervised_mode not in ("symmetric", "literal"):
            raise ConfigValidationError(f"supervised_mode must be symmetric|literal, got {self.supervised_mode!r}")
        if self.contrastive_denominator not in ("literal", "full"):
            raise ConfigValidationError(
                f"contrastive_denominator must be literal|full, got {self.contrastive_denominator!r}")
        k = self.model.num_classes
        if self.data.phantom.num_classes != k:
            raise ConfigValidationError(
                f"data.phantom.num_classes ({self.data.phantom.num_classes}) != model.num_classes ({k})")
        if tuple(self.data.phantom.grid_shape) != tuple(self.model.input_shape):
            raise ConfigValidationError(
                f"data.phantom.grid_shape {tuple(self.data.phantom.grid_shape)} != model.input_shape "
                f"{tuple(self.model.input_shape)}")
        for name in ("appearance_a", "appearance_b"):
            if len(getattr(self.data, name).class_intensity) < k:
                raise ConfigValidationError(f"data.{name}.class_intensity needs {k} entries")

    def effective_model_config(self) -> ModelConfig:
        """Model config with the ablation flags applied."""
        return dataclasses.replace(
            self.model,
            modality_specific_encoder=self.ablation.modality_specific_encoder,
            mia_enabled=self.ablation.cmc_strategy,
        )

    def with_ablation(self, name: str) -> "TrainConfig":
        return dataclasses.replace(self, ablation=dataclasses.replace(ABLATION_ROWS[name]))

    def to_dict(self) -> dict:
        return _to_plain(self)


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_to_plain(v) for v in obj]
    return obj


def from_dict(cls, data, path: str = ""):
    """Build dataclass ``cls`` from nested plain data, naming the offending key path on error."""
    if not isinstance(data, dict):
        raise ConfigValidationError(f"{path or '<root>'}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = set(data) - names
    if unknown:
        raise ConfigValidationError(f"{path or '<root>'}: unknown key(s) {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        key = f"{path}.{name}" if path else name
        kwargs[name] = _coerce(hints[name], value, key)
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigValidationError(f"{path or '<root>'}: {exc}") from None


def _coerce(tp, value, key):
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        return from_dict(tp, value, key)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigValidationError(f"{key}: expected a list, got {value!r}")
        args = typing.get_args(tp)
        inner = args[0] if args else object
        if len(args) > 1 and args[1] is not Ellipsis:
            if len(value) != len(args):
                raise ConfigValidationError(f"{key}: expected {len(args)} entries, got {len(value)}")
            return tuple(_coerce(a, v, f"{key}[{i}]") for i, (a, v) in enumerate(zip(args, value)))
        return tuple(_coerce(inner, v, f"{key}[{i}]") for i, v in enumerate(value))
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigValidationError(f"{key}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigValidationError(f"{key}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigValidationError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigValidationError(f"{key}: expected a string, got {value!r}")
        return value
    return value


def load_config(path_or_preset) -> TrainConfig:
    """A YAML file path, or the name of a built-in preset."""
    if str(path_or_preset) in PRESETS:
        return PRESETS[str(path_or_preset)]()
    path = Path(path_or_preset)
    if not path.exists():
        raise ConfigValidationError(f"{path}: no such config file or preset (presets: {sorted(PRESETS)})")
    try:
        raw = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigValidationError(f"{path}: {exc}") from None
    base = raw.pop("preset", None)
    if base is not None:
        if base not in PRESETS:
            raise ConfigValidationError(f"{path}: unknown preset {base!r}")
        merged = _deep_merge(PRESETS[base]().to_dict(), raw)
        return from_dict(TrainConfig, merged)
    return from_dict(TrainConfig, raw)


def _deep_merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = v
    return out


def dump_config(cfg: TrainConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))


# -- presets ----------------------------------------------------------------

def paired_preset() -> TrainConfig:
    """40 train pairs (4 labeled / 36 unlabeled at 10%), 5 val, 5 test, shared anatomy."""
    return TrainConfig(epochs=100, eval_every=10)


def unpaired_preset() -> TrainConfig:
    cfg = paired_preset()
    cfg.data.paired = False
    return cfg


def misaligned_preset() -> TrainConfig:
    cfg = paired_preset()
    cfg.data.misalignment = MisalignmentSpec(max_rotation_deg=10.0, max_translation_vox=3.0, enabled=True)
    return cfg


def smoke_preset() -> TrainConfig:
    cfg = TrainConfig(epochs=2, eval_every=1, labeled_fraction=0.25)
    cfg.data = DataConfig(n_samples=12, n_val=2, n_test=2)
    return cfg


def overfit_preset() -> TrainConfig:
    cfg = TrainConfig(epochs=300, eval_every=300, labeled_fraction=1.0)
    cfg.data = DataConfig(n_samples=2, n_val=0, n_test=0)
    return cfg


def fullscale_preset() -> TrainConfig:
    """Reference scale: 96^3 input, 16^3 patches, batch 4, Adam at 1e-5. Not CPU-trainable."""
    model = ModelConfig(patch_size=16, embed_dim=384, num_blocks=12, num_heads=6, adapter_dim=64,
                        num_classes=5, input_shape=(96, 96, 96), decoder_channels=(192, 96, 48, 24))
    data = DataConfig(phantom=PhantomSpec(grid_shape=(96, 96, 96), num_classes=5, size_range=(8.0, 20.0)),
                      appearance_a=ModalityAppearance((0.1, 0.9, 0.5, 0.7, 0.3), 0.15, 0.2, 1.0),
                      appearance_b=ModalityAppearance((0.8, 0.3, 0.1, 0.5, 0.6), 0.15, 0.2, 1.5))
    return TrainConfig(model=model, data=data, batch_size_labeled=4, batch_size_unlabeled=4,
                       learning_rate=1e-5, deterministic=False)


PRESETS = {
    "smoke": smoke_preset,
    "overfit": overfit_preset,
    "paired": paired_preset,
    "unpaired": unpaired_preset,
    "misaligned": misaligned_preset,
    "fullscale": fullscale_preset,
}
