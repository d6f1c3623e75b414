"""One JSON document drives every command; ``--set section.key=value`` overrides single keys."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .errors import InvalidArgument
from .evaluation import VARIANTS
from .inference import GenerateConfig
from .model import ModelConfig
from .sequence import SequenceLayout
from .training import TrainConfig
from .vocab import Vocab


class ConfigError(InvalidArgument):
    pass


@dataclass
class TokenizerSection:
    K: int = 64
    patch: int = 4
    image_size: int = 32
    codebook_seed: int = 0


@dataclass
class LayoutSection:
    m: int = 2
    M: int = 30
    itd: bool = True


@dataclass
class ModelSection:
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    distill_dim: int = 32
    dtype: str = "float32"
    use_index_embedding: bool = True


@dataclass
class TrainingSection:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.05
    lambda_distill: float = 0.5
    batch_size: int = 8
    steps: int = 1000
    seed: int = 0
    instruct_mode: str = "joint"
    teacher_seed: int = 1234
    checkpoint_every: int = 0


@dataclass
class DatagenSection:
    count: int = 1000
    delta: float = 0.8
    seed: int = 0
    max_jitter: float = 0.25


@dataclass
class GenerateSection:
    mode: str = "greedy"
    temperature: float = 1.0
    top_k: int | None = None
    seed: int = 0


@dataclass
class AblationSection:
    variants: list = field(default_factory=lambda: list(VARIANTS))
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    train_count: int = 400
    eval_count: int = 100


@dataclass
class PathsSection:
    dataset: str | None = None
    out: str | None = None
    checkpoint: str | None = None


SECTIONS = {
    "tokenizer": TokenizerSection,
    "layout": LayoutSection,
    "model": ModelSection,
    "training": TrainingSection,
    "datagen": DatagenSection,
    "generate": GenerateSection,
    "ablation": AblationSection,
    "paths": PathsSection,
}


@dataclass
class RunConfig:
    tokenizer: TokenizerSection = field(default_factory=TokenizerSection)
    layout: LayoutSection = field(default_factory=LayoutSection)
    model: ModelSection = field(default_factory=ModelSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    datagen: DatagenSection = field(default_factory=DatagenSection)
    generate: GenerateSection = field(default_factory=GenerateSection)
    ablation: AblationSection = field(default_factory=AblationSection)
    paths: PathsSection = field(default_factory=PathsSection)

    # -- derived views ---------------------------------------------------------

    @property
    def grid_side(self) -> int:
        return self.tokenizer.image_size // self.tokenizer.patch

    @property
    def n(self) -> int:
        return self.grid_side**2

    def sequence_layout(self) -> SequenceLayout:
        return SequenceLayout(m=self.layout.m, n=self.n, M=self.layout.M, itd_enabled=self.layout.itd)

    def train_config(self) -> TrainConfig:
        t = self.training
        return TrainConfig(
            lr=t.lr, beta1=t.beta1, beta2=t.beta2, eps=t.eps, weight_decay=t.weight_decay,
            lambda_distill=t.lambda_distill, batch_size=t.batch_size, steps=t.steps, seed=t.seed,
            itd_enabled=self.layout.itd, instruct_enabled=self.layout.M > 0, n_instruct=self.layout.M,
            instruct_mode=t.instruct_mode, teacher_seed=t.teacher_seed, checkpoint_every=t.checkpoint_every,
        )

    def model_config(self, n_instruct: int | None = None, use_index: bool | None = None) -> ModelConfig:
        M = self.layout.M if n_instruct is None else n_instruct
        longest = SequenceLayout(m=self.layout.m, n=self.n, M=M, itd_enabled=True).total_len
        return ModelConfig(
            vocab_size=Vocab(self.tokenizer.K).size,
            n_image_tokens=self.tokenizer.K,
            d_model=self.model.d_model,
            n_layers=self.model.n_layers,
            n_heads=self.model.n_heads,
            max_seq_len=longest,
            n_instruct=M,
            distill_dim=self.model.distill_dim,
            dtype=self.model.dtype,
            use_index_embedding=self.model.use_index_embedding if use_index is None else use_index,
        )

    def model_kwargs(self) -> dict:
        """Architecture keys shared by every ablation variant."""
        return {
            "d_model": self.model.d_model, "n_layers": self.model.n_layers, "n_heads": self.model.n_heads,
            "distill_dim": self.model.distill_dim, "dtype": self.model.dtype,
            "max_seq_len": SequenceLayout(m=self.layout.m, n=self.n, M=self.layout.M).total_len,
        }

    def generate_config(self) -> GenerateConfig:
        g = self.generate
        return GenerateConfig(mode=g.mode, temperature=g.temperature, top_k=g.top_k, seed=g.seed)

    # -- validation and IO -----------------------------------------------------

    def validate(self) -> "RunConfig":
        tk = self.tokenizer
        if tk.patch < 1 or tk.image_size % tk.patch:
            raise ConfigError(f"image_size {tk.image_size} must be a multiple of patch {tk.patch}")
        if self.datagen.count < 0:
            raise ConfigError("datagen.count must be >= 0")
        if self.layout.m != 2:
            raise ConfigError("the scene generator produces exactly two subjects; layout.m must be 2")
        ab = self.ablation
        unknown = [v for v in ab.variants if v not in VARIANTS]
        if unknown or not ab.variants:
            raise ConfigError(f"ablation.variants must be a non-empty subset of {list(VARIANTS)}, got {ab.variants}")
        if not ab.seeds or ab.train_count < 1 or ab.eval_count < 1:
            raise ConfigError("ablation needs seeds and positive train/eval counts")
        try:
            self.sequence_layout()
            self.train_config()
            self.model_config()
            self.generate_config()
        except InvalidArgument as exc:
            raise ConfigError(str(exc)) from exc
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config document must be a JSON object")
        cfg = cls()
        for section, values in doc.items():
            if section not in SECTIONS:
                raise ConfigError(f"unknown config section {section!r}; expected one of {sorted(SECTIONS)}")
            if not isinstance(values, dict):
                raise ConfigError(f"config section {section!r} must be an object")
            for key, value in values.items():
                cfg.set(f"{section}.{key}", value)
        return cfg

    @classmethod
    def load(cls, path: str | Path | None, overrides: list[str] = ()) -> "RunConfig":
        doc = {}
        if path is not None:
            try:
                doc = json.loads(Path(path).read_text())
            except FileNotFoundError as exc:
                raise ConfigError(f"config file not found: {path}") from exc
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        cfg = cls.from_dict(doc)
        for item in overrides:
            key, sep, raw = item.partition("=")
            if not sep:
                raise ConfigError(f"override {item!r} is not of the form section.key=value")
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw
            cfg.set(key.strip(), value)
        return cfg.validate()

    def set(self, dotted: str, value) -> None:
        section, _, key = dotted.partition(".")
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section {section!r}")
        obj = getattr(self, section)
        names = {f.name: f for f in fields(obj)}
        if key not in names:
            raise ConfigError(f"unknown key {key!r} in section {section!r}; expected one of {sorted(names)}")
        setattr(obj, key, _coerce(dotted, getattr(obj, key), value))


def _coerce(name: str, current, value):
    """Match the type of the default; ints may widen to floats, None stays open."""
    if current is None or value is None:
        return value
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{name} expects true/false, got {value!r}")
        return value
    if isinstance(current, int) and not isinstance(current, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{name} expects an integer, got {value!r}")
        return value
    if isinstance(current, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name} expects a number, got {value!r}")
        return float(value)
    if isinstance(current, list):
        if not isinstance(value, list):
            raise ConfigError(f"{name} expects a list, got {value!r}")
        return value
    if isinstance(current, str):
        if not isinstance(value, str):
            raise ConfigError(f"{name} expects a string, got {value!r}")
        return value
    return value
