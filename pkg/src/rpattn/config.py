"""Run configuration: a JSON file mirroring ``RunConfig``."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError

PHASES = ("synth", "textenc", "bbox", "gan", "eval")
VARIANTS = ("basic", "full", "phrase")


@dataclass
class DataConfig:
    train_size: int = 500
    val_size: int = 100
    image_size: int = 64
    k_max: int = 4
    train_seed: int = 0
    val_seed: int = 1


@dataclass
class ModelConfig:
    dim: int = 32
    emb_dim: int = 32
    enc_channels: list = field(default_factory=lambda: [16, 32, 32])
    roi_size: int = 4
    z_dim: int = 16
    cond_dim: int = 16
    gen_channels: list = field(default_factory=lambda: [32, 16, 16])
    base: int = 4
    disc_width: int = 8
    phrase_mode: str = "lstm"

    @property
    def resolutions(self):
        return [self.base * 4 * 2 ** n for n in range(len(self.gen_channels))]


@dataclass
class OptimConfig:
    lr: float = 2e-4
    betas: list = field(default_factory=lambda: [0.5, 0.999])


@dataclass
class IterationConfig:
    textenc: int = 2000
    bbox: int = 2000
    gan: int = 5000


@dataclass
class BboxConfig:
    depths: list = field(default_factory=lambda: [1, 4])
    hidden: int = 64
    keep_depth: int = 4


@dataclass
class EvalConfig:
    R: list = field(default_factory=lambda: [20, 100])
    folds: int = 10
    splits: int = 10


@dataclass
class PathConfig:
    data: str = "data"
    out: str = "runs"
    textenc: str | None = None
    bbox: str | None = None
    gan: str | None = None


@dataclass
class RunConfig:
    phase: str = "textenc"
    seed: int = 0
    variant: str = "full"
    gammas: list = field(default_factory=lambda: [10.0, 5.0, 5.0])
    lam: float = 5.0
    batch_size: int = 16
    gan_batch_size: int = 8
    eval_every: int = 100
    sample_every: int = 50
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    iterations: IterationConfig = field(default_factory=IterationConfig)
    bbox: BboxConfig = field(default_factory=BboxConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    paths: PathConfig = field(default_factory=PathConfig)
    base_dir: Path = field(default=Path("."), repr=False, compare=False)

    # resolved paths; relative entries are taken against the config file's directory
    def resolve(self, p):
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    @property
    def data_dir(self):
        return self.resolve(self.paths.data)

    @property
    def out_dir(self):
        return self.resolve(self.paths.out)

    def checkpoint(self, name):
        explicit = getattr(self.paths, name)
        if explicit:
            return self.resolve(explicit)
        return self.out_dir / name / f"{name}.ndta"

    def to_dict(self):
        d = dataclasses.asdict(self)
        d.pop("base_dir")
        return d

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def validate(self, check_paths=True):
        if self.phase not in PHASES:
            raise ConfigError(f"phase must be one of {PHASES}, got {self.phase!r}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if len(self.gammas) != 3 or min(self.gammas) <= 0:
            raise ConfigError("gammas must be three positive numbers")
        if self.batch_size < 2 or self.gan_batch_size < 2:
            raise ConfigError("batch sizes must be at least 2 for the batch posterior")
        if self.eval_every < 1 or self.sample_every < 1:
            raise ConfigError("eval_every and sample_every must be positive")
        for name in ("textenc", "bbox", "gan"):
            if getattr(self.iterations, name) < 0:
                raise ConfigError(f"iterations.{name} must be non-negative")
        if self.optim.lr < 0 or len(self.optim.betas) != 2 or not all(0 <= b < 1 for b in self.optim.betas):
            raise ConfigError("optim needs lr >= 0 and two betas in [0, 1)")
        m = self.model
        if m.dim % 2:
            raise ConfigError("model.dim must be even")
        if m.resolutions[-1] != self.data.image_size:
            raise ConfigError(f"generator ends at {m.resolutions[-1]}px but data.image_size is {self.data.image_size}")
        if self.data.train_size < self.batch_size:
            raise ConfigError("data.train_size is smaller than batch_size")
        if self.bbox.keep_depth not in self.bbox.depths:
            raise ConfigError("bbox.keep_depth must be one of bbox.depths")
        if check_paths:
            self.check_paths()
        return self

    def check_paths(self):
        needs = {"synth": (), "textenc": ("data",), "bbox": ("data", "textenc"),
                 "gan": ("data", "textenc"), "eval": ("data", "textenc", "bbox", "gan")}[self.phase]
        for name in needs:
            path = self.data_dir / "train" / "annotations.json" if name == "data" else self.checkpoint(name)
            if not path.exists():
                hint = "run the synth phase first" if name == "data" else f"run the {name} phase first"
                raise ConfigError(f"{self.phase}: missing {path} ({hint})")


def _build(cls, raw, where):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls) if f.name != "base_dir"}
    unknown = set(raw) - set(fields)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, value in raw.items():
        sub = fields[name].default_factory if fields[name].default_factory is not dataclasses.MISSING else None
        if sub is not None and dataclasses.is_dataclass(sub):
            kwargs[name] = _build(sub, value, f"{where}.{name}")
        else:
            kwargs[name] = value
    return cls(**kwargs)


def from_dict(raw, base_dir=".") -> RunConfig:
    cfg = _build(RunConfig, raw, "config")
    cfg.base_dir = Path(base_dir)
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: malformed JSON at line {exc.lineno}: {exc.msg}") from exc
    return from_dict(raw, path.parent)
