"""Flat ``section.key = value`` experiment configuration with strict validation."""

from __future__ import annotations

import dataclasses
import hashlib
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .images import PixelOperator
from .models import OBJECTIVES, TrainConfig
from .operators import KINDS


@dataclass
class DataSection:
    root: str = "corpus"
    resolution: int = 32
    seed: int = 0
    fractions: tuple[float, ...] = (0.5, 0.3, 0.1, 0.1)
    split_file: str = ""
    val_fraction: float = 0.1


@dataclass
class TrainSection:
    epochs: int = 40
    batch_size: int = 10
    lr: float = 3e-4
    max_lr: float = 1e-3
    schedule: str = "cyclic"
    cycle_length: int = 4000
    beta1: float = 0.9
    beta2: float = 0.999
    limit: int = 0

    def train_config(self, seed: int, objective: str | None = None, **extra) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size, beta1=self.beta1,
                           beta2=self.beta2, base_lr=self.lr, schedule=self.schedule,
                           max_lr=self.max_lr, cycle_length=self.cycle_length, seed=seed,
                           objective=objective, **extra)


@dataclass
class EncoderSection(TrainSection):
    objective: str = "masked-recon"
    patch_size: int = 4
    dim: int = 64
    depth: int = 4
    heads: int = 4
    mask_ratio: float = 0.6
    temperature: float = 0.1


@dataclass
class ReconstructorSection(TrainSection):
    depth: int = 4
    heads: int = 4
    min_channels: int = 16


@dataclass
class OperatorSection:
    pixel_op: str = "swap_rb"
    channel: int = 2
    alpha: float = 0.9
    kind: str = "orthogonal-self-conjugate"
    ridge: float = 1e-6
    renormalize: bool = True
    normalized: bool = True
    reverse: bool = False
    n_images: int = 0
    spectrum_tol: float = 0.05

    def pixel_operator(self) -> PixelOperator:
        return PixelOperator(self.pixel_op, self.channel, self.alpha)


@dataclass
class EditSection:
    power: int = 1
    n_images: int = 0
    grid_rows: int = 8


@dataclass
class CompareSection:
    encoder_a: list[str] = field(default_factory=list)
    reconstructor_a: list[str] = field(default_factory=list)
    encoder_b: list[str] = field(default_factory=list)
    reconstructor_b: list[str] = field(default_factory=list)
    bootstrap_b: int = 100_000
    n_images: int = 0


@dataclass
class JudgeSection:
    checkpoints: list[str] = field(default_factory=list)


@dataclass
class OutputSection:
    dir: str = "runs/out"


@dataclass
class ExperimentConfig:
    seed: int = 0
    data: DataSection = field(default_factory=DataSection)
    encoder: EncoderSection = field(default_factory=EncoderSection)
    reconstructor: ReconstructorSection = field(default_factory=ReconstructorSection)
    operator: OperatorSection = field(default_factory=OperatorSection)
    edit: EditSection = field(default_factory=EditSection)
    compare: CompareSection = field(default_factory=CompareSection)
    judge: JudgeSection = field(default_factory=JudgeSection)
    output: OutputSection = field(default_factory=OutputSection)

    def encoder_train_config(self) -> TrainConfig:
        e = self.encoder
        return e.train_config(self.seed, e.objective, mask_ratio=e.mask_ratio,
                              temperature=e.temperature)

    def reconstructor_train_config(self) -> TrainConfig:
        return self.reconstructor.train_config(self.seed)

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in flatten(self))

    def digest(self) -> str:
        """Hash of every setting except the output directory.

        Paths resolved by :func:`load_config` are hashed relative to the config
        file's directory, so a self-contained experiment folder can be moved.
        """
        cfg = self
        base = getattr(self, "_base_dir", None)
        if base is not None:
            cfg = dataclasses.replace(self, **{
                sec: dataclasses.replace(getattr(self, sec)) for sec, _ in PATH_KEYS})
            _map_paths(cfg, lambda p: os.path.relpath(p, base))
        text = "".join(f"{k} = {v}\n" for k, v in flatten(cfg) if k != "output.dir")
        return hashlib.sha256(text.encode()).hexdigest()

    def validate(self) -> "ExperimentConfig":
        d, e = self.data, self.encoder
        if d.resolution < 1 or e.patch_size < 1:
            raise ConfigError("resolution and patch_size must be positive")
        if d.resolution % e.patch_size:
            raise ConfigError(f"data.resolution {d.resolution} is not divisible by "
                              f"encoder.patch_size {e.patch_size}")
        if e.patch_size & (e.patch_size - 1):
            raise ConfigError("encoder.patch_size must be a power of two")
        if e.dim % e.heads:
            raise ConfigError("encoder.dim must be divisible by encoder.heads")
        if e.dim % self.reconstructor.heads:
            raise ConfigError("encoder.dim must be divisible by reconstructor.heads")
        if len(d.fractions) != 4 or any(f < 0 for f in d.fractions) \
                or abs(sum(d.fractions) - 1.0) > 1e-9:
            raise ConfigError(f"data.fractions must be four nonnegative numbers summing to 1, "
                              f"got {list(d.fractions)}")
        if not 0.0 <= d.val_fraction < 1.0:
            raise ConfigError("data.val_fraction must lie in [0, 1)")
        if e.objective not in OBJECTIVES:
            raise ConfigError(f"encoder.objective must be one of {OBJECTIVES}")
        if self.operator.kind not in KINDS:
            raise ConfigError(f"operator.kind must be one of {KINDS}")
        if self.operator.ridge < 0:
            raise ConfigError("operator.ridge must be nonnegative")
        if self.edit.power < 1:
            raise ConfigError("edit.power must be >= 1")
        if self.compare.bootstrap_b < 1000:
            raise ConfigError("compare.bootstrap_b must be >= 1000")
        for name in ("encoder", "reconstructor"):
            s = getattr(self, name)
            if s.schedule not in ("constant", "cyclic"):
                raise ConfigError(f"{name}.schedule must be constant or cyclic")
            if s.lr <= 0 or s.max_lr <= 0 or s.cycle_length < 2:
                raise ConfigError(f"{name}: learning rates must be positive, cycle_length >= 2")
        try:
            self.operator.pixel_operator()
            self.encoder_train_config()
            self.reconstructor_train_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self


PATH_KEYS = (("data", "root"), ("data", "split_file"), ("compare", "encoder_a"),
             ("compare", "reconstructor_a"), ("compare", "encoder_b"),
             ("compare", "reconstructor_b"), ("judge", "checkpoints"))


def _map_paths(cfg: ExperimentConfig, fn) -> None:
    """Apply ``fn`` in place to every non-empty path-valued setting."""
    for section, name in PATH_KEYS:
        sec = getattr(cfg, section)
        value = getattr(sec, name)
        if isinstance(value, list):
            setattr(sec, name, [fn(p) for p in value])
        elif value:
            setattr(sec, name, fn(value))


def flatten(cfg: ExperimentConfig) -> list[tuple[str, str]]:
    out = []
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if dataclasses.is_dataclass(value):
            for sub in dataclasses.fields(value):
                out.append((f"{f.name}.{sub.name}", _format(getattr(value, sub.name))))
        else:
            out.append((f.name, _format(value)))
    return out


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return ", ".join(_format(v) for v in value)
    return str(value)


def _convert(raw: str, tp, key: str):
    origin = typing.get_origin(tp)
    try:
        if tp is bool:
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if tp is int:
            return int(raw)
        if tp is float:
            return float(raw)
        if tp is str:
            return raw
        if origin in (list, tuple):
            inner = typing.get_args(tp)[0]
            items = [s.strip() for s in raw.split(",") if s.strip()]
            seq = [_convert(s, inner, key) for s in items]
            return tuple(seq) if origin is tuple else seq
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {getattr(tp, '__name__', tp)}") from None
    raise ConfigError(f"{key}: unsupported field type {tp}")


def _hints(obj) -> dict:
    return typing.get_type_hints(type(obj))


def set_value(cfg: ExperimentConfig, key: str, raw: str) -> None:
    """Assign one dotted key from its string form; unknown keys are errors."""
    parts = key.split(".")
    target = cfg
    for part in parts[:-1]:
        sub = getattr(target, part, None)
        if not dataclasses.is_dataclass(sub):
            raise ConfigError(f"unknown config section {part!r} in key {key!r}")
        target = sub
    name = parts[-1]
    hints = _hints(target)
    if name not in hints or dataclasses.is_dataclass(getattr(target, name, None)):
        raise ConfigError(f"unknown config key {key!r}")
    setattr(target, name, _convert(raw.strip(), hints[name], key))


def parse_config(text: str, source: str = "<string>") -> ExperimentConfig:
    cfg = ExperimentConfig()
    seen = set()
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in stripped.split("=", 1))
        if key in seen:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        seen.add(key)
        try:
            set_value(cfg, key, raw)
        except ConfigError as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}") from None
    return cfg


def load_config(path, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} not found")
    cfg = parse_config(path.read_text(), str(path))
    for k, v in (overrides or {}).items():
        set_value(cfg, k, v)
    base = path.parent.resolve()
    _map_paths(cfg, lambda p: str((base / p).resolve()))
    cfg._base_dir = str(base)
    return cfg.validate()
