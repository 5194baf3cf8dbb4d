"""Episode generation: CRP partitions, 2-D mixtures of Gaussians, instance discrimination.

Per-episode seeds are derived from a run seed with :func:`episode_rng`
(``SeedSequence(run_seed, spawn_key=(index,))``), so any worker can
regenerate episode ``i`` independently.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .model import canonicalize, check_canonical


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class CRPConfig:
    alpha: float = 1.0
    n_min: int = 100
    n_max: int = 1000
    fixed_k: int | None = None
    max_rejections: int = 10_000

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be > 0")
        if not 1 <= self.n_min <= self.n_max:
            raise ValueError("need 1 <= n_min <= n_max")
        if self.fixed_k is not None and not 1 <= self.fixed_k <= self.n_min:
            raise ValueError("fixed_k must lie in 1..n_min")


@dataclass
class Episode:
    points: np.ndarray
    labels: np.ndarray
    provenance: str = "mog"
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.labels = check_canonical(self.labels)
        if self.points.ndim != 2 or len(self.points) != len(self.labels):
            raise DataError("episode points must be an N x d matrix matching the labels")

    @property
    def N(self) -> int:
        return len(self.labels)

    @property
    def K(self) -> int:
        return int(self.labels.max()) + 1


def episode_rng(run_seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(run_seed, spawn_key=(index,)))


def crp_sample(cfg: CRPConfig, N: int, rng: np.random.Generator) -> np.ndarray:
    """Canonical CRP labels for N customers (rejection-conditioned on ``fixed_k`` when set)."""
    if N < 1:
        raise ValueError("N must be >= 1")
    if cfg.fixed_k is not None and cfg.fixed_k > N:
        raise DataError(f"fixed_k={cfg.fixed_k} is unreachable with N={N}")
    for _ in range(cfg.max_rejections if cfg.fixed_k is not None else 1):
        labels = _crp_once(cfg.alpha, N, rng)
        if cfg.fixed_k is None or labels.max() + 1 == cfg.fixed_k:
            return labels
    raise DataError(f"fixed_k={cfg.fixed_k} not reached within max_rejections={cfg.max_rejections}")


def _crp_once(alpha: float, N: int, rng: np.random.Generator) -> np.ndarray:
    labels = np.zeros(N, dtype=np.int64)
    counts = [1]
    u = rng.random(N)
    for n in range(1, N):
        # join k w.p. n_k / (n + alpha), new w.p. alpha / (n + alpha)
        target = u[n] * (n + alpha)
        acc = 0.0
        k = len(counts)
        for j, cnt in enumerate(counts):
            acc += cnt
            if target < acc:
                k = j
                break
        if k == len(counts):
            counts.append(1)
        else:
            counts[k] += 1
        labels[n] = k
    return labels


def crp_log_prob(labels: Sequence[int], alpha: float) -> float:
    """Exchangeable partition probability of the partition induced by ``labels``."""
    from math import lgamma, log
    c = canonicalize(labels)
    counts = np.bincount(c)
    N = len(c)
    return (len(counts) * log(alpha) + sum(lgamma(n) for n in counts)
            + lgamma(alpha) - lgamma(alpha + N))


def _draw_size(cfg: CRPConfig, rng: np.random.Generator) -> int:
    return int(rng.integers(cfg.n_min, cfg.n_max + 1))


def mog_episode(cfg: CRPConfig, sigma: float, rng: np.random.Generator, N: int | None = None,
                d_x: int = 2) -> Episode:
    """Points of a CRP mixture with centroids ~ N(0, sigma^2 I) and unit-variance clusters."""
    if sigma <= 0:
        raise ValueError("sigma must be > 0")
    N = _draw_size(cfg, rng) if N is None else int(N)
    labels = crp_sample(cfg, N, rng)
    K = labels.max() + 1
    mu = sigma * rng.standard_normal((K, d_x))
    points = mu[labels] + rng.standard_normal((N, d_x))
    # store in a random order so the stored order carries no arrival information
    perm = rng.permutation(N)
    return Episode(points[perm], canonicalize(labels[perm]), "mog", meta={"centroids": mu})


# ---------------------------------------------------------------------------
# embeddings

@dataclass
class EmbeddingStore:
    ids: list[str]
    vectors: np.ndarray
    tags: list[str | None]

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2 or len(self.ids) != len(self.vectors) or len(self.tags) != len(self.ids):
            raise DataError("store needs one vector and tag per id")
        if len(set(self.ids)) != len(self.ids):
            raise DataError("embedding ids must be unique")

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self):
        return len(self.ids)

    def by_tag(self) -> dict[str, np.ndarray]:
        out: dict[str, list[int]] = {}
        for i, t in enumerate(self.tags):
            if t is not None:
                out.setdefault(t, []).append(i)
        return {t: np.array(v) for t, v in out.items()}


def save_embeddings(path, store: EmbeddingStore) -> None:
    lines = [f"#dim={store.dim}"]
    for i, tag, v in zip(store.ids, store.tags, store.vectors):
        lines.append(f"{i}\t{tag or ''}\t" + ",".join(repr(float(x)) for x in v))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_embeddings(path, expected_dim: int | None = None) -> EmbeddingStore:
    """Read ``id<TAB>tag<TAB>v1,...,vd`` rows under a ``#dim=<d>`` header."""
    text = Path(path).read_text(encoding="utf-8").splitlines()
    dim = None
    ids, tags, vecs = [], [], []
    for lineno, line in enumerate(text, start=1):
        if not line.strip():
            continue
        if line.startswith("#"):
            if line.startswith("#dim="):
                try:
                    dim = int(line[5:])
                except ValueError:
                    raise DataError(f"line {lineno}: bad dim header {line!r}") from None
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise DataError(f"line {lineno}: expected 3 tab-separated fields, got {len(parts)}")
        try:
            v = [float(x) for x in parts[2].split(",")]
        except ValueError:
            raise DataError(f"line {lineno}: malformed vector") from None
        if dim is not None and len(v) != dim:
            raise DataError(f"line {lineno}: vector has {len(v)} entries, header says {dim}")
        if vecs and len(v) != len(vecs[0]):
            raise DataError(f"line {lineno}: inconsistent vector length {len(v)}")
        ids.append(parts[0])
        tags.append(parts[1] or None)
        vecs.append(v)
    if not ids:
        raise DataError(f"{path}: empty embedding store")
    store = EmbeddingStore(ids, np.array(vecs), tags)
    if expected_dim is not None and store.dim != expected_dim:
        raise DataError(f"{path}: dimension {store.dim} != expected {expected_dim}")
    return store


def discrimination_episode(store: EmbeddingStore, cfg: CRPConfig, aug_std: float, rng: np.random.Generator,
                           N: int | None = None) -> Episode:
    """Each cluster is one anchor item plus noisy copies of it (no class tags used)."""
    if len(store) == 0:
        raise DataError("empty store")
    if aug_std < 0:
        raise ValueError("aug_std must be >= 0")
    N = _draw_size(cfg, rng) if N is None else int(N)
    labels = crp_sample(cfg, N, rng)
    K = int(labels.max()) + 1
    if K > len(store):
        raise DataError(f"store holds {len(store)} items, episode needs {K} anchors")
    anchors = rng.choice(len(store), size=K, replace=False)
    points = store.vectors[anchors[labels]].copy()
    first = np.zeros(N, dtype=bool)
    first[np.unique(labels, return_index=True)[1]] = True
    noise = rng.standard_normal(points.shape) * aug_std
    points[~first] += noise[~first]
    return Episode(points, labels, "embedding-discrimination", meta={"anchors": anchors})


def class_episode(store: EmbeddingStore, cfg: CRPConfig, rng: np.random.Generator, N: int | None = None) -> Episode:
    """Test episode from original items: cluster k draws distinct items of one class tag."""
    groups = store.by_tag()
    if not groups:
        raise DataError("class episodes need tagged items")
    N = _draw_size(cfg, rng) if N is None else int(N)
    for _ in range(cfg.max_rejections):
        labels = crp_sample(cfg, N, rng)
        counts = np.bincount(labels)
        tags = sorted(groups)
        if len(counts) > len(tags):
            continue
        chosen = rng.choice(len(tags), size=len(counts), replace=False)
        if all(len(groups[tags[t]]) >= n for t, n in zip(chosen, counts)):
            break
    else:
        raise DataError("could not fit a CRP draw into the available classes")
    idx = np.empty(N, dtype=np.int64)
    for k, (t, n) in enumerate(zip(chosen, counts)):
        idx[labels == k] = rng.choice(groups[tags[t]], size=n, replace=False)
    return Episode(store.vectors[idx], labels, "embedding-class", meta={"items": idx})


# ---------------------------------------------------------------------------
# sources and dumps

class MoGSource:
    def __init__(self, cfg: CRPConfig, sigma: float = 10.0, d_x: int = 2):
        self.cfg, self.sigma, self.d_x = cfg, sigma, d_x

    def sample(self, rng: np.random.Generator) -> Episode:
        return mog_episode(self.cfg, self.sigma, rng, d_x=self.d_x)


class DiscriminationSource:
    def __init__(self, store: EmbeddingStore, cfg: CRPConfig, aug_std: float = 0.05):
        self.store, self.cfg, self.aug_std = store, cfg, aug_std

    def sample(self, rng: np.random.Generator) -> Episode:
        return discrimination_episode(self.store, self.cfg, self.aug_std, rng)


class EpisodeListSource:
    """Draws uniformly (with replacement) from a fixed list of episodes."""

    def __init__(self, episodes: Sequence[Episode]):
        if not episodes:
            raise DataError("no episodes")
        self.episodes = list(episodes)

    def sample(self, rng: np.random.Generator) -> Episode:
        return self.episodes[int(rng.integers(len(self.episodes)))]


def generate(source, count: int, run_seed: int, start: int = 0) -> list[Episode]:
    out = []
    for i in range(start, start + count):
        ep = source.sample(episode_rng(run_seed, i))
        ep.seed = i
        out.append(ep)
    return out


def dump_episodes(path, episodes: Iterable[Episode], seed: int, config: dict) -> None:
    doc = {
        "format": "gfncp-episodes/1",
        "seed": seed,
        "config": config,
        "episodes": [
            {"index": ep.seed, "provenance": ep.provenance, "labels": ep.labels.tolist(),
             "points": ep.points.tolist()}
            for ep in episodes
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def load_episodes(path) -> tuple[list[Episode], dict]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != "gfncp-episodes/1":
        raise DataError(f"{path}: not an episode dump")
    eps = [Episode(np.array(e["points"], dtype=np.float64), np.array(e["labels"]), e["provenance"], e["index"])
           for e in doc["episodes"]]
    return eps, doc


def crp_config_dict(cfg: CRPConfig) -> dict:
    return asdict(cfg)
