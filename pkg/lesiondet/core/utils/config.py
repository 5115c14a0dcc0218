import dataclasses
from dataclasses import dataclass, field

from lesiondet.core.errors import InvalidArgumentError
from lesiondet.core.io import txt


"""
    config.py

    Run configuration. The training, preprocessing and evaluation
    defaults are the full-size detector settings. The u-net defaults to the
    desk-scale depth 3, base 8 network; batch size and epoch budget default
    to 4 and 50. A JSON document may override any subset of fields,
    section by section.
"""


@dataclass
class UnetSection:
    depth: int = 3
    base_filters: int = 8


@dataclass
class TrainingSection:
    learning_rate: float = 0.005
    momentum: float = 0.9
    negative_weight: float = 0.25
    patience: int = 5
    lr_factor: float = 0.5
    plateau_threshold: float = 1e-6
    batch_size: int = 4
    max_epochs: int = 50
    patch_px: int = 344
    augment: bool = True


@dataclass
class PreprocessingSection:
    target_spacing_mm: float = 0.2
    band_sigmas_mm: tuple = (0.4, 0.8, 1.6, 3.2)


@dataclass
class CandidateSection:
    base_threshold: float = 0.5
    cluster_radius_mm: float = 15.0


@dataclass
class FrocSection:
    hit_radius_mm: float = 15.0


@dataclass
class PhantomSection:
    height: int = 512
    width: int = 512
    spacing_mm: float = 0.2
    diameter_mm: tuple = (6.0, 40.0)
    aspect: tuple = (1.0, 1.2)
    contrast: tuple = (0.15, 0.3)
    lesions_per_exam: tuple = (1, 3)
    texture_sigma_mm: float = 1.5
    texture_amplitude: float = 0.04
    gradient: float = 0.2
    breast_extent: tuple = (0.46, 0.8)


@dataclass
class RunConfig:
    seed: int = 0
    threads: int = 1
    unet: UnetSection = field(default_factory=UnetSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    preprocessing: PreprocessingSection = field(default_factory=PreprocessingSection)
    candidates: CandidateSection = field(default_factory=CandidateSection)
    froc: FrocSection = field(default_factory=FrocSection)
    phantom: PhantomSection = field(default_factory=PhantomSection)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        """ Raises an InvalidArgumentError for values no stage can run with. """
        self._check_types()

        t = self.training
        checks = [
            (self.unet.depth >= 1, f"unet.depth must be at least 1, got {self.unet.depth}"),
            (self.unet.base_filters >= 1, f"unet.base_filters must be positive, got {self.unet.base_filters}"),
            (t.learning_rate > 0, f"training.learning_rate must be positive, got {t.learning_rate}"),
            (0 <= t.momentum < 1, f"training.momentum must lie in [0, 1), got {t.momentum}"),
            (t.negative_weight >= 0, f"training.negative_weight must be non-negative, got {t.negative_weight}"),
            (t.patience >= 1, f"training.patience must be positive, got {t.patience}"),
            (0 < t.lr_factor < 1, f"training.lr_factor must lie in (0, 1), got {t.lr_factor}"),
            (t.batch_size >= 1, f"training.batch_size must be positive, got {t.batch_size}"),
            (t.max_epochs >= 1, f"training.max_epochs must be positive, got {t.max_epochs}"),
            (t.patch_px >= 1, f"training.patch_px must be positive, got {t.patch_px}"),
            (self.preprocessing.target_spacing_mm > 0,
             f"preprocessing.target_spacing_mm must be positive, got {self.preprocessing.target_spacing_mm}"),
            (0 <= self.candidates.base_threshold <= 1,
             f"candidates.base_threshold must lie in [0, 1], got {self.candidates.base_threshold}"),
            (self.candidates.cluster_radius_mm > 0,
             f"candidates.cluster_radius_mm must be positive, got {self.candidates.cluster_radius_mm}"),
            (self.froc.hit_radius_mm > 0, f"froc.hit_radius_mm must be positive, got {self.froc.hit_radius_mm}"),
            (self.threads >= 1, f"threads must be positive, got {self.threads}"),
        ]

        for ok, message in checks:
            if not ok:
                raise InvalidArgumentError(message + '.')

    def _check_types(self) -> None:
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            section_type = _section_type(f)

            if section_type is None:
                _check_type(f.name, value, f.type)
                continue

            if not isinstance(value, section_type):
                raise InvalidArgumentError(f"Configuration section '{f.name}' must be a {section_type.__name__}.")

            for sf in dataclasses.fields(section_type):
                _check_type(f'{f.name}.{sf.name}', getattr(value, sf.name), sf.type)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> 'RunConfig':
        """ Builds a configuration from a possibly partial document.

        :param values: nested dictionary; missing fields keep their defaults
        :return: RunConfig
        """
        sections = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}

        for key, value in values.items():
            if key not in sections:
                raise InvalidArgumentError(f"Unknown configuration key '{key}'.")

            section_type = _section_type(sections[key])
            if section_type is None:
                kwargs[key] = value
                continue

            if not isinstance(value, dict):
                raise InvalidArgumentError(f"Configuration section '{key}' must be an object.")

            known = {f.name: f for f in dataclasses.fields(section_type)}
            unknown = sorted(set(value) - set(known))
            if unknown:
                raise InvalidArgumentError(f"Unknown configuration key(s) {unknown} in section '{key}'.")

            # JSON has no tuples.
            kwargs[key] = section_type(**{k: tuple(v) if isinstance(v, list) else v for k, v in value.items()})

        return cls(**kwargs)


def _is_number(value) -> bool:
    # bool is an int subclass but never a valid number here.
    return isinstance(value, (int, float)) and not isinstance(value, bool)


_TYPE_CHECKS = {
    bool: ('a boolean', lambda v: isinstance(v, bool)),
    int: ('an integer', lambda v: isinstance(v, int) and not isinstance(v, bool)),
    float: ('a number', _is_number),
    tuple: ('a list of numbers', lambda v: isinstance(v, (tuple, list)) and all(_is_number(x) for x in v)),
}


def _check_type(key: str, value, expected: type) -> None:
    if expected not in _TYPE_CHECKS:
        return

    description, accepts = _TYPE_CHECKS[expected]
    if not accepts(value):
        raise InvalidArgumentError(f"Configuration key '{key}' must be {description}, got {value!r}.")


def _section_type(f: dataclasses.Field):
    factory = f.default_factory
    return factory if dataclasses.is_dataclass(factory) else None


def load_config(path: str = None) -> RunConfig:
    """ Reads a JSON configuration file, or returns the defaults when no
    path is given.
    """
    if path is None:
        return RunConfig()

    try:
        values = txt.read_json(path)
    except ValueError as exc:
        raise InvalidArgumentError(f"Configuration file {path} is not valid JSON: {exc}") from exc

    if not isinstance(values, dict):
        raise InvalidArgumentError(f"Configuration file {path} must hold a JSON object.")

    return RunConfig.from_dict(values)
