"""Named run profiles: data generator, encoder size and training hyperparameters.

``mog-paper`` and ``embedding`` keep the full-scale settings; ``mog-desk``
and ``mog-tiny`` are reduced versions sized for a single CPU core.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from .datagen import CRPConfig, DiscriminationSource, MoGSource, load_embeddings
from .model import EncoderConfig
from .trainer import TrainConfig, coerce_fields


@dataclass
class DataSpec:
    kind: str = "mog"          # mog | embedding
    alpha: float = 6.0
    n_min: int = 30
    n_max: int = 80
    fixed_k: int = 0           # 0 means unconstrained
    sigma: float = 10.0
    d_x: int = 2
    test_n: int = 60
    test_sets: int = 200
    train_count: int = 0       # episodes written by gen-data; 0 generates on the fly
    aug_std: float = 0.05
    embeddings: str = ""

    def crp(self, n_min: int | None = None, n_max: int | None = None) -> CRPConfig:
        return CRPConfig(self.alpha, self.n_min if n_min is None else n_min,
                         self.n_max if n_max is None else n_max, self.fixed_k or None)

    def train_source(self):
        if self.kind == "mog":
            return MoGSource(self.crp(), self.sigma, self.d_x)
        if self.kind == "embedding":
            return DiscriminationSource(self._store(), self.crp(), self.aug_std)
        raise ValueError(f"unknown data kind {self.kind!r}")

    def test_source(self):
        n = self.test_n
        if self.kind == "mog":
            return MoGSource(self.crp(n, n), self.sigma, self.d_x)
        return DiscriminationSource(self._store(), self.crp(n, n), self.aug_std)

    def _store(self):
        if not self.embeddings:
            raise ValueError("embedding profile needs an embeddings file")
        return load_embeddings(self.embeddings)


@dataclass
class ModelSpec:
    width: int = 32            # 0 selects the full-size encoder
    online_mode: bool = False
    input_scale: float = 1.0

    def encoder(self, d_x: int) -> EncoderConfig:
        if self.width:
            return EncoderConfig.small(d_x=d_x, width=self.width, online_mode=self.online_mode,
                                       input_scale=self.input_scale)
        return EncoderConfig(d_x=d_x, online_mode=self.online_mode, input_scale=self.input_scale)


@dataclass
class Profile:
    name: str
    data: DataSpec = field(default_factory=DataSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    train: TrainConfig = field(default_factory=TrainConfig)

    def resolved(self) -> dict:
        return {"profile": self.name, "data": dataclasses.asdict(self.data),
                "model": dataclasses.asdict(self.model), "train": self.train.to_dict()}

    def override(self, values: dict) -> "Profile":
        """Apply flat ``key: value`` overrides; each key must name a field of one section."""
        data, model, train = {}, {}, {}
        fields = [(DataSpec, data), (ModelSpec, model), (TrainConfig, train)]
        for k, v in values.items():
            for cls, bucket in fields:
                if k in {f.name for f in dataclasses.fields(cls)}:
                    bucket[k] = v
                    break
            else:
                raise ValueError(f"unknown setting {k!r}")
        return Profile(self.name,
                       dataclasses.replace(self.data, **coerce_fields(DataSpec, data)),
                       dataclasses.replace(self.model, **coerce_fields(ModelSpec, model)),
                       TrainConfig(**{**self.train.to_dict(), **coerce_fields(TrainConfig, train)}))


def _profiles() -> dict[str, Profile]:
    return {
        "mog-desk": Profile(
            "mog-desk",
            DataSpec(kind="mog", alpha=6.0, n_min=30, n_max=80, sigma=10.0, test_n=60, test_sets=200),
            ModelSpec(width=48, input_scale=0.1),
            TrainConfig(iterations=2000, batch_size=32, beta=0.999, lr_init=5e-4, lr_min=1e-6)),
        "mog-tiny": Profile(
            "mog-tiny",
            DataSpec(kind="mog", alpha=1.0, n_min=6, n_max=6, sigma=10.0, test_n=6, test_sets=50),
            ModelSpec(width=48, input_scale=0.1),
            TrainConfig(iterations=20000, batch_size=32, beta=0.999, lr_init=5e-4, lr_min=1e-6)),
        "mog-paper": Profile(
            "mog-paper",
            DataSpec(kind="mog", alpha=6.0, n_min=100, n_max=1000, sigma=10.0, test_n=300, test_sets=200),
            ModelSpec(width=0, input_scale=0.1),
            TrainConfig(iterations=5000, batch_size=64, beta=0.999, lr_init=5e-4, lr_min=1e-6)),
        "embedding": Profile(
            "embedding",
            DataSpec(kind="embedding", alpha=1.0, n_min=100, n_max=1000, test_n=300, test_sets=200,
                     aug_std=0.05),
            ModelSpec(width=0),
            TrainConfig(iterations=5000, batch_size=64, beta=0.999, lr_init=5e-4, lr_min=1e-6)),
    }


PROFILE_NAMES = tuple(_profiles())


def get_profile(name: str) -> Profile:
    profiles = _profiles()
    if name not in profiles:
        raise ValueError(f"unknown profile {name!r}; choose from {', '.join(profiles)}")
    return profiles[name]
