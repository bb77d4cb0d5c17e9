"""Experiment configuration: INI files with one section per concern.

Every key has a default, so a config file only lists what it changes.
``ExperimentConfig.to_ini()`` writes every resolved value and
``ExperimentConfig.from_ini()`` reads it back to an equal object.

Sections and keys
-----------------
``[experiment]`` kind, output_dir, master_seed, ablation, ablation_values
``[dataset]`` source (synthetic|manifest), path, n_molecules, holdout, atoms_min,
atoms_max, motif, bond_length, jitter, elements, min_distance (0 = off), orientation
``[grid]`` edge_voxels, resolution, channels, gaussian_width
``[network]`` model_size, widths (empty = from model_size), head_hidden, dropout
``[train]`` epochs, batch_size, learning_rate, augment_rotations, rotation_kind,
noise_sigma, recon_weight, checkpoint_dir
``[denoiser]`` kind, checkpoint, base, group, reference_size
``[rotation]`` noise_convention, axes, angles, cosine_angles, decomposition_molecules
``[sampler]`` gamma, u, dt, steps, save_every, sigma, chains, n_seeds, matched_noise
``[property]`` name, modes, shuffle_control
"""

from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field
from pathlib import Path

from ..errors import SpecError

EXPERIMENTS = ("reconstruction", "generation", "property")
ABLATIONS = ("none", "augmentation", "random_init", "model_size", "train_fraction", "epochs")
MODEL_SIZES = {"tiny": (4, 8), "small": (8, 16), "medium": (16, 32)}
DENOISER_KINDS = ("neural", "empirical_bayes", "group_averaged", "identity")


class ConfigError(SpecError):
    pass


@dataclass
class ExperimentSection:
    kind: str = "reconstruction"
    output_dir: str = "runs/default"
    master_seed: int = 0
    ablation: str = "augmentation"
    ablation_values: tuple = ("on", "off", "random_init")


@dataclass
class DatasetSection:
    source: str = "synthetic"
    path: str = ""
    n_molecules: int = 200
    holdout: int = 50
    atoms_min: int = 3
    atoms_max: int = 5
    motif: str = "chain"
    bond_length: float = 1.54
    jitter: float = 0.1
    elements: tuple = ("C", "N", "O")
    min_distance: float = 0.0
    orientation: str = "principal"


@dataclass
class GridSection:
    edge_voxels: int = 32
    resolution: float = 0.25
    channels: tuple = ("C", "N", "O")
    gaussian_width: float = 0.5


@dataclass
class NetworkSection:
    model_size: str = "small"
    widths: tuple = ()
    head_hidden: int = 32
    dropout: float = 0.1


@dataclass
class TrainSection:
    epochs: int = 10
    batch_size: int = 8
    learning_rate: float = 2e-3
    augment_rotations: bool = True
    rotation_kind: str = "haar"
    noise_sigma: float = 0.9
    recon_weight: float = 1.0
    checkpoint_dir: str = ""


@dataclass
class DenoiserSection:
    kind: str = "neural"
    checkpoint: str = ""
    base: str = "empirical_bayes"
    group: str = "cyclic_z"
    reference_size: int = 64


@dataclass
class RotationSection:
    noise_convention: str = "matched_rotated"
    axes: tuple = ("x", "y", "z")
    angles: tuple = (0.0, 30.0, 45.0, 60.0, 90.0, 180.0, 270.0, 360.0)
    cosine_angles: tuple = (0.0, 90.0, 180.0, 270.0, 360.0)
    decomposition_molecules: int = 20


@dataclass
class SamplerSection:
    gamma: float = 1.0
    u: float = 1.0
    dt: float = 0.25
    steps: int = 100
    save_every: int = 10
    sigma: float = 0.9
    chains: int = 5
    n_seeds: int = 10
    matched_noise: bool = True


@dataclass
class PropertySection:
    name: str = "asphericity"
    modes: tuple = ("encoder_only", "enc_dec_denoise")
    shuffle_control: bool = True


SECTIONS = {
    "experiment": ExperimentSection, "dataset": DatasetSection, "grid": GridSection,
    "network": NetworkSection, "train": TrainSection, "denoiser": DenoiserSection,
    "rotation": RotationSection, "sampler": SamplerSection, "property": PropertySection,
}


@dataclass
class ExperimentConfig:
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    dataset: DatasetSection = field(default_factory=DatasetSection)
    grid: GridSection = field(default_factory=GridSection)
    network: NetworkSection = field(default_factory=NetworkSection)
    train: TrainSection = field(default_factory=TrainSection)
    denoiser: DenoiserSection = field(default_factory=DenoiserSection)
    rotation: RotationSection = field(default_factory=RotationSection)
    sampler: SamplerSection = field(default_factory=SamplerSection)
    property: PropertySection = field(default_factory=PropertySection)

    def validate(self) -> "ExperimentConfig":
        e = self.experiment
        if e.kind not in EXPERIMENTS:
            raise ConfigError(f"experiment.kind must be one of {EXPERIMENTS}, got {e.kind!r}")
        if e.ablation not in ABLATIONS:
            raise ConfigError(f"experiment.ablation must be one of {ABLATIONS}, got {e.ablation!r}")
        if self.network.model_size not in MODEL_SIZES and not self.network.widths:
            raise ConfigError(f"network.model_size must be one of {tuple(MODEL_SIZES)}")
        if self.denoiser.kind not in DENOISER_KINDS:
            raise ConfigError(f"denoiser.kind must be one of {DENOISER_KINDS}")
        if self.denoiser.checkpoint and not Path(self.denoiser.checkpoint).exists():
            raise ConfigError(f"denoiser.checkpoint {self.denoiser.checkpoint!r} does not exist")
        if self.dataset.source == "manifest" and not Path(self.dataset.path).exists():
            raise ConfigError(f"dataset.path {self.dataset.path!r} does not exist")
        if self.dataset.source not in ("synthetic", "manifest"):
            raise ConfigError("dataset.source must be synthetic or manifest")
        if self.rotation.noise_convention not in ("matched_rotated", "fresh"):
            raise ConfigError("rotation.noise_convention must be matched_rotated or fresh")
        if self.dataset.holdout >= self.dataset.n_molecules and self.dataset.source == "synthetic":
            raise ConfigError("dataset.holdout must be smaller than n_molecules")
        return self

    def widths(self, ablation_value=None) -> tuple:
        size = self.network.model_size
        if self.experiment.ablation == "model_size" and ablation_value is not None:
            size = ablation_value
        if self.network.widths and ablation_value is None:
            body = tuple(self.network.widths)
        elif size in MODEL_SIZES:
            body = MODEL_SIZES[size]
        else:
            raise ConfigError(f"unknown model size {size!r}")
        return (len(self.grid.channels),) + tuple(int(w) for w in body)

    # ------------------------------------------------------------ INI I/O

    def to_dict(self) -> dict:
        return {name: dataclasses.asdict(getattr(self, name)) for name in SECTIONS}

    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        for name in SECTIONS:
            section = getattr(self, name)
            cp[name] = {f.name: _format(getattr(section, f.name)) for f in dataclasses.fields(section)}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def write(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_ini())
        return path

    @classmethod
    def from_ini(cls, text: str, overrides=()) -> "ExperimentConfig":
        cp = configparser.ConfigParser(interpolation=None)
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"malformed config: {exc}") from exc
        for item in overrides:
            key, sep, value = item.partition("=")
            sect, dot, opt = key.strip().partition(".")
            if not sep or not dot:
                raise ConfigError(f"override {item!r} must look like section.key=value")
            if not cp.has_section(sect):
                cp.add_section(sect)
            cp.set(sect, opt, value.strip())
        unknown = set(cp.sections()) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        parts = {}
        for name, klass in SECTIONS.items():
            default = klass()
            values = {}
            known = {f.name for f in dataclasses.fields(klass)}
            if cp.has_section(name):
                extra = set(cp[name]) - known
                if extra:
                    raise ConfigError(f"unknown keys in [{name}]: {sorted(extra)}")
                for key in cp[name]:
                    values[key] = _parse(cp[name][key], getattr(default, key), f"{name}.{key}")
            parts[name] = klass(**values)
        return cls(**parts).validate()

    @classmethod
    def read(cls, path, overrides=()) -> "ExperimentConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_ini(text, overrides)


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    return str(value)


def _parse(raw: str, default, where: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [t.strip() for t in raw.split(",") if t.strip()]
            kind = type(default[0]) if default else _guess
            return tuple(kind(t) for t in items)
        return raw
    except ValueError as exc:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {type(default).__name__}") from exc


def _guess(token: str):
    try:
        return int(token)
    except ValueError:
        return token
