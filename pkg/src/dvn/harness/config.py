"""Experiment configuration: an INI-style ``key = value`` file with one level of sections.

Example::

    [experiment]
    seed = 0
    output_dir = runs/gmm
    k = 100
    target_tpr = 0.95

    [id_dataset]
    kind = synthetic
    num_classes = 3
    dim = 2
    n = 3000
    separation = 8

    [ood.uniform]
    kind = uniform
    n = 1000

    [attack.bim]
    method = bim
    epsilon = 0.1

    [classifier]
    arch = mlp

    [verifier]
    epochs = 30
    lam = 1.0

    [ablation]
    disable_mi = false

Sections named ``ood.<name>`` and ``attack.<name>`` may repeat with distinct names.
"""

from __future__ import annotations

import configparser
import copy
import hashlib
from dataclasses import dataclass, field, fields
from pathlib import Path

from ..attacks import AttackConfig
from ..classifier import ClassifierConfig
from ..trainer import TrainConfig


class ConfigError(ValueError):
    pass


def _floats(text: str) -> list[float]:
    return [float(t) for t in text.replace(",", " ").split()]


def _ints(text: str) -> list[int]:
    return [int(t) for t in text.replace(",", " ").split()]


def _coerce(value: str, like):
    if isinstance(like, bool):
        low = value.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    if isinstance(like, (tuple, list)):
        return tuple(_ints(value))
    return value.strip()


def _fill(cls, section, defaults=None):
    obj = defaults if defaults is not None else cls()
    kwargs = {}
    names = {f.name for f in fields(cls)}
    for key, raw in section.items():
        if key not in names:
            raise ConfigError(f"[{section.name}] unknown key {key!r}")
        try:
            kwargs[key] = _coerce(raw, getattr(obj, key))
        except ValueError as exc:
            raise ConfigError(f"[{section.name}] {key}: {exc}") from exc
    try:
        return cls(**{**{f.name: getattr(obj, f.name) for f in fields(cls)}, **kwargs})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section.name}] {exc}") from exc


@dataclass
class DataSpec:
    """A dataset recipe.

    ``kind`` is one of ``synthetic`` (Gaussian mixture), ``digits`` (8x8
    handwritten digits), ``oracle`` (linear-Gaussian), ``file`` (text format)
    for ID data, or ``uniform``, ``gaussian``, ``shifted``, ``wrong_label``, ``file``
    for negative sets. ``wrong_label`` pairs the ID test inputs with random
    incorrect labels instead of classifier predictions.
    """

    name: str = "id"
    kind: str = "synthetic"
    num_classes: int = 3
    dim: int = 2
    n: int = 3000
    separation: float = 8.0
    std: float = 1.0
    latent_dim: int = 2
    loading_scale: float = 1.0
    path: str = ""
    split: tuple = (0.6, 0.2, 0.2)


@dataclass
class AttackSpec:
    name: str
    method: str
    config: AttackConfig


@dataclass
class ClassifierSpec:
    arch: str = "mlp"
    hidden: tuple = (64, 64)
    channels: tuple = (16, 32)
    conv_hidden: int = 64
    train: ClassifierConfig = field(default_factory=ClassifierConfig)
    checkpoint: str = ""


@dataclass
class Ablation:
    disable_mi: bool = False
    disable_prior_correction: bool = False
    encoder_cond_y: bool = False


@dataclass
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    k: int = 100
    target_tpr: float = 0.95
    successful_only: bool = True
    score_chunk: int = 256
    id_dataset: DataSpec = field(default_factory=DataSpec)
    ood: list = field(default_factory=list)
    attacks: list = field(default_factory=list)
    classifier: ClassifierSpec = field(default_factory=ClassifierSpec)
    verifier: TrainConfig = field(default_factory=TrainConfig)
    verifier_checkpoint: str = ""
    ablation: Ablation = field(default_factory=Ablation)
    source_text: str = ""

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(self.source_text.encode("utf-8")).hexdigest()

    def effective_verifier(self) -> TrainConfig:
        """Verifier training config after ablation flags and the run seed are applied."""
        v = copy.copy(self.verifier)
        v.seed = self.seed + 3
        if self.ablation.disable_mi:
            v.lam = 0.0
        if self.ablation.encoder_cond_y:
            v.encoder_conditioning = "x_and_y"
        return v

    @property
    def scoring_prior(self) -> str:
        return "standard" if self.ablation.disable_prior_correction else "corrected"

    def with_ablation(self, **flags) -> "ExperimentConfig":
        other = copy.deepcopy(self)
        for key, val in flags.items():
            setattr(other.ablation, key, val)
        return other


def _data_spec(section, name: str) -> DataSpec:
    spec = DataSpec(name=name)
    for key, raw in section.items():
        if not hasattr(spec, key) or key == "name":
            raise ConfigError(f"[{section.name}] unknown key {key!r}")
        try:
            if key == "split":
                setattr(spec, key, tuple(_floats(raw)))
            else:
                setattr(spec, key, _coerce(raw, getattr(spec, key)))
        except ValueError as exc:
            raise ConfigError(f"[{section.name}] {key}: {exc}") from exc
    return spec


def parse_config(text: str, seed: int | None = None, output_dir: str | None = None) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc

    cfg = ExperimentConfig(source_text=text)
    known = {"experiment", "id_dataset", "classifier", "verifier", "ablation"}
    for name in parser.sections():
        if name not in known and not name.startswith(("ood.", "attack.")):
            raise ConfigError(f"unknown section [{name}]")

    if parser.has_section("experiment"):
        sec = parser["experiment"]
        for key, raw in sec.items():
            if key == "verifier_checkpoint":
                cfg.verifier_checkpoint = raw.strip()
                continue
            if key not in ("seed", "output_dir", "k", "target_tpr", "successful_only", "score_chunk"):
                raise ConfigError(f"[experiment] unknown key {key!r}")
            try:
                setattr(cfg, key, _coerce(raw, getattr(cfg, key)))
            except ValueError as exc:
                raise ConfigError(f"[experiment] {key}: {exc}") from exc
    if parser.has_section("id_dataset"):
        cfg.id_dataset = _data_spec(parser["id_dataset"], "id")
    for name in parser.sections():
        if name.startswith("ood."):
            cfg.ood.append(_data_spec(parser[name], name[4:]))
        elif name.startswith("attack."):
            sec = dict(parser[name])
            method = sec.pop("method", name[7:]).strip()
            fake = configparser.ConfigParser()
            fake.read_dict({name: sec})
            cfg.attacks.append(AttackSpec(name[7:], method, _fill(AttackConfig, fake[name])))
    if parser.has_section("classifier"):
        sec = dict(parser["classifier"])
        spec = ClassifierSpec()
        for key in ("arch", "checkpoint"):
            if key in sec:
                setattr(spec, key, sec.pop(key).strip())
        for key in ("hidden", "channels"):
            if key in sec:
                setattr(spec, key, tuple(_ints(sec.pop(key))))
        if "conv_hidden" in sec:
            spec.conv_hidden = int(sec.pop("conv_hidden"))
        fake = configparser.ConfigParser()
        fake.read_dict({"classifier": sec})
        spec.train = _fill(ClassifierConfig, fake["classifier"])
        cfg.classifier = spec
    if parser.has_section("verifier"):
        cfg.verifier = _fill(TrainConfig, parser["verifier"])
    if parser.has_section("ablation"):
        cfg.ablation = _fill(Ablation, parser["ablation"])

    if seed is not None:
        cfg.seed = seed
    if output_dir is not None:
        cfg.output_dir = output_dir
    if cfg.k < 1:
        raise ConfigError("[experiment] k must be >= 1")
    if not 0 < cfg.target_tpr < 1:
        raise ConfigError("[experiment] target_tpr must lie in (0, 1)")
    if cfg.id_dataset.kind not in ("synthetic", "digits", "oracle", "file"):
        raise ConfigError(f"[id_dataset] unknown kind {cfg.id_dataset.kind!r}")
    for spec in cfg.ood:
        if spec.kind not in ("uniform", "gaussian", "shifted", "wrong_label", "file"):
            raise ConfigError(f"[ood.{spec.name}] unknown kind {spec.kind!r}")
    for spec in cfg.attacks:
        if spec.method not in ("fgsm", "bim"):
            raise ConfigError(f"[attack.{spec.name}] unknown method {spec.method!r}")
    return cfg


def load_config(path, seed: int | None = None, output_dir: str | None = None) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, seed=seed, output_dir=output_dir)
