"""
PipelineConfig: every tunable of the three-stage pipeline.

Config files are JSON documents with top-level scalars and one object per
section (`tile`, `backbone`, `schedule`, `stage1`, `stage2`,
`segmentation`, `augment`). They are flattened to `<section>_<key>` names,
merged with command-line overrides, validated by `PipelineConfigForm` and
rebuilt into the frozen dataclasses below.
"""
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
import json
import logging

from .adversarial import AdvWeights, SegTrainConfig, TrainSchedule
from .backbone import BackboneConfig
from .classification import Stage1Config
from .exceptions import InvalidConfig
from .labeling import AugmentConfig, LabelingConfig
from .scorers import ARCHITECTURES, ClassifierConfig
from .tiling import TileSpec

logger = logging.getLogger(__name__)

SCALAR_KEYS = ('R', 'tau', 'T', 'epsilon', 'S', 'key_threshold', 'alpha_e', 'alpha_d', 'alpha_m',
               'seed', 'seg_samples')


@dataclass(frozen=True)
class Stage2Config:
    """Ensemble members share every setting except their architecture."""
    archs: tuple = ARCHITECTURES
    holdout: float = 0.2
    input_size: int = 64
    width: int = 16
    epochs: int = 6
    lr: float = 0.01
    batch_size: int = 16
    samples: int = 400
    augment: bool = True

    def __post_init__(self):
        if not self.archs:
            raise InvalidConfig("stage2 needs at least one ensemble architecture")
        unknown = [a for a in self.archs if a not in ARCHITECTURES]
        if unknown:
            raise InvalidConfig(f"unknown stage2 architectures {unknown}; choose from {ARCHITECTURES}")
        if not 0 <= self.holdout < 1:
            raise InvalidConfig(f"stage2 holdout must be in [0, 1), got {self.holdout}")
        for arch in self.archs:
            self.classifier(arch)

    def classifier(self, arch) -> ClassifierConfig:
        return ClassifierConfig(
            arch=arch,
            input_size=self.input_size,
            width=self.width,
            epochs=self.epochs,
            lr=self.lr,
            batch_size=self.batch_size,
            samples=self.samples,
            augment=self.augment,
        )


@dataclass(frozen=True)
class PipelineConfig:
    R: float = 30.0
    tau: float = 0.1
    T: float = 0.1
    epsilon: float = 0.1
    S: float = 0.05
    key_threshold: float = 0.5
    alpha_e: float = 0.01
    alpha_d: float = 0.001
    alpha_m: float = 0.001
    seed: int = 0
    seg_samples: int = 64
    tile: TileSpec = field(default_factory=TileSpec)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    schedule: TrainSchedule = field(default_factory=TrainSchedule)
    stage1: ClassifierConfig = field(default_factory=ClassifierConfig)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    segmentation: SegTrainConfig = field(default_factory=SegTrainConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if self.R < 0:
            raise InvalidConfig(f"R must be >= 0, got {self.R}")
        if not 0 <= self.key_threshold <= 1:
            raise InvalidConfig(f"key_threshold must be in [0, 1], got {self.key_threshold}")
        if self.seg_samples < 2:
            raise InvalidConfig(f"seg_samples must be >= 2, got {self.seg_samples}")
        Stage1Config(tau=self.tau, T=self.T)
        AdvWeights(self.alpha_e, self.alpha_d, self.alpha_m)
        LabelingConfig(S=self.S, epsilon=self.epsilon)

    @property
    def stage1_config(self) -> Stage1Config:
        return Stage1Config(tau=self.tau, T=self.T)

    @property
    def adv_weights(self) -> AdvWeights:
        return AdvWeights(self.alpha_e, self.alpha_d, self.alpha_m)

    def labeling_config(self, a1_max: int) -> LabelingConfig:
        return LabelingConfig(S=self.S, epsilon=self.epsilon, a1_max=a1_max)

    def replace(self, **changes):
        data = self.to_dict()
        for key, value in changes.items():
            if key in SECTIONS:
                data[key] = {**data[key], **value}
            else:
                data[key] = value
        return PipelineConfig.from_dict(data)

    def to_dict(self) -> dict:
        data = {key: getattr(self, key) for key in SCALAR_KEYS}
        for name in SECTIONS:
            data[name] = _jsonable(asdict(getattr(self, name)))
        return data

    @classmethod
    def from_dict(cls, data: dict) -> 'PipelineConfig':
        data = dict(data)
        unknown = set(data) - set(SCALAR_KEYS) - set(SECTIONS)
        if unknown:
            raise InvalidConfig(f"unknown config keys: {sorted(unknown)}")
        kwargs = {key: data[key] for key in SCALAR_KEYS if key in data}
        for name, section_cls in SECTIONS.items():
            if name in data:
                kwargs[name] = _build_section(name, section_cls, data[name])
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise InvalidConfig(str(exc)) from exc


SECTIONS = {
    'tile': TileSpec,
    'backbone': BackboneConfig,
    'schedule': TrainSchedule,
    'stage1': ClassifierConfig,
    'stage2': Stage2Config,
    'segmentation': SegTrainConfig,
    'augment': AugmentConfig,
}


def _jsonable(value):
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (tuple, list)):
        return [_jsonable(v) for v in value]
    return value


def _build_section(name, section_cls, values):
    if not isinstance(values, dict):
        raise InvalidConfig(f"config section {name!r} must be an object")
    known = {f.name for f in fields(section_cls)}
    unknown = set(values) - known
    if unknown:
        raise InvalidConfig(f"unknown keys in section {name!r}: {sorted(unknown)}")
    values = {k: tuple(v) if isinstance(v, list) else v for k, v in values.items()}
    return section_cls(**values)


def flatten(data: dict) -> dict:
    """{'tile': {'stride': 8}} -> {'tile_stride': 8}"""
    flat = {}
    for key, value in data.items():
        if key in SECTIONS and isinstance(value, dict):
            for sub_key, sub_value in value.items():
                flat[f"{key}_{sub_key}"] = sub_value
        else:
            flat[key] = value
    return flat


def unflatten(flat: dict) -> dict:
    data = {}
    for key, value in flat.items():
        section = next((name for name in SECTIONS if key.startswith(f"{name}_")), None)
        if section is None:
            data[key] = value
        else:
            data.setdefault(section, {})[key[len(section) + 1:]] = value
    return data


def read_config_file(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise InvalidConfig(f"config file {path} not found")
    try:
        with open(path) as handle:
            data = json.load(handle)
    except json.JSONDecodeError as exc:
        raise InvalidConfig(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise InvalidConfig(f"config file {path} must hold a JSON object")
    return data


def load_pipeline_config(path=None, overrides=None) -> PipelineConfig:
    """
    Defaults, then the config file, then flat `<section>_<key>` overrides;
    the merged values are validated by PipelineConfigForm.
    """
    from .forms import PipelineConfigForm

    merged = flatten(PipelineConfig().to_dict())
    if path:
        file_values = flatten(read_config_file(path))
        unknown = set(file_values) - set(merged)
        if unknown:
            raise InvalidConfig(f"unknown config keys in {path}: {sorted(unknown)}")
        merged.update(file_values)
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in merged:
            raise InvalidConfig(f"unknown config override {key!r}")
        merged[key] = value

    form = PipelineConfigForm(data=merged)
    if not form.is_valid():
        problems = '; '.join(
            f"{name}: {' '.join(str(m) for m in messages)}" for name, messages in form.errors.items()
        )
        raise InvalidConfig(f"invalid configuration ({problems})")
    cfg = PipelineConfig.from_dict(unflatten(form.cleaned_data))
    logger.debug(f"Loaded pipeline config: {cfg.to_dict()}")
    return cfg
