"""Training loop: Bernoulli(beta) branch mixing, Adam, cosine learning-rate decay, checkpoints."""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .losses import DATA, EXPLORE, batch_objective, batch_terms
from .model import EncoderConfig, ModelParams, TrajectoryBatch

log = logging.getLogger(__name__)

MAGIC = b"GFNCPCK\x00"
FORMAT_VERSION = 1
OBJECTIVES = ("gfncp", "ncp-baseline")
TRAIN_STREAM = 0x7472


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    iterations: int = 5000
    batch_size: int = 64
    beta: float = 0.999
    delta: float = 0.01
    lam: float = 1.0
    lr_init: float = 5e-4
    lr_min: float = 1e-6
    seed: int = 0
    objective: str = "gfncp"
    eval_every: int = 0
    checkpoint_path: str = ""
    checkpoint_every: int = 0
    patience: int = 0
    select_key: str = "total"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError("beta must lie in [0, 1]")
        if self.lr_min > self.lr_init:
            raise ValueError("lr_min must not exceed lr_init")
        if self.iterations < 1 or self.batch_size < 1:
            raise ValueError("iterations and batch_size must be >= 1")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}")
        if self.select_key not in ("total", "mc"):
            raise ValueError("select_key must be 'total' or 'mc'")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name: f for f in dataclasses.fields(cls)}
        unknown = set(d) - set(names)
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)


def coerce_fields(cls, raw: dict) -> dict:
    """Convert string values (from config files or flags) to the dataclass field types."""
    out = {}
    types = {f.name: f.type for f in dataclasses.fields(cls)}
    for k, v in raw.items():
        if k not in types:
            raise ValueError(f"unknown key {k!r}")
        t = str(types[k])
        if not isinstance(v, str):
            out[k] = v
        elif "bool" in t:
            out[k] = v.strip().lower() in ("1", "true", "yes", "on")
        elif t.startswith("int"):
            out[k] = int(v)
        elif t.startswith("float"):
            out[k] = float(v)
        else:
            out[k] = v.strip()
    return out


def read_config_file(path) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        k, v = line.split("=", 1)
        out[k.strip().replace("-", "_")] = v.strip()
    return out


# ---------------------------------------------------------------------------
# optimisation

def cosine_lr(t: int, T: int, lr_init: float, lr_min: float) -> float:
    if t >= T:
        return lr_min
    return lr_min + 0.5 * (lr_init - lr_min) * (1.0 + math.cos(math.pi * t / T))


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros(cls, params: ModelParams) -> "AdamState":
        return cls({k: np.zeros_like(a) for k, a in params.arrays.items()},
                   {k: np.zeros_like(a) for k, a in params.arrays.items()})


def adam_step(params: ModelParams, grads: dict[str, np.ndarray], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam update, in place."""
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for {k}")
        if state.m[k].shape != g.shape:
            raise TrainingError(f"moment buffer for {k} has shape {state.m[k].shape}, gradient {g.shape}")
    state.step += 1
    c1 = 1.0 - beta1 ** state.step
    c2 = 1.0 - beta2 ** state.step
    for k, g in grads.items():
        m = state.m[k] = beta1 * state.m[k] + (1.0 - beta1) * g
        v = state.v[k] = beta2 * state.v[k] + (1.0 - beta2) * g * g
        params.arrays[k] = params.arrays[k] - lr * (m / c1) / (np.sqrt(v / c2) + eps)


# ---------------------------------------------------------------------------
# checkpoints

@dataclass
class Checkpoint:
    params: ModelParams
    adam: AdamState
    iteration: int
    rng_state: dict
    train_config: dict
    extra: dict = field(default_factory=dict)


def _meta(ck: Checkpoint) -> dict:
    return {
        "encoder": ck.params.config.to_dict(),
        "names": ck.params.names(),
        "shapes": [list(s) for _, s in ck.params.config.param_shapes()],
        "iteration": ck.iteration,
        "adam_step": ck.adam.step,
        "rng_state": ck.rng_state,
        "train_config": ck.train_config,
        "extra": ck.extra,
    }


def save_checkpoint(path, ck: Checkpoint) -> None:
    meta = json.dumps(_meta(ck), sort_keys=True, separators=(",", ":")).encode("utf-8")
    names = ck.params.names()
    payload = b"".join(
        np.ascontiguousarray(src[n], dtype="<f8").tobytes()
        for src in (ck.params.arrays, ck.adam.m, ck.adam.v) for n in names)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(meta)))
        fh.write(meta)
        fh.write(payload)


def load_checkpoint(path, expected: EncoderConfig | None = None) -> Checkpoint:
    data = Path(path).read_bytes()
    if len(data) < 20 or data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack("<I", data[8:12])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    (mlen,) = struct.unpack("<Q", data[12:20])
    try:
        meta = json.loads(data[20:20 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt metadata ({e})") from None
    cfg = EncoderConfig.from_dict(meta["encoder"])
    if expected is not None and cfg != expected:
        raise CheckpointError(f"{path}: encoder config {cfg} does not match {expected}")
    shapes = cfg.param_shapes()
    if meta["names"] != [n for n, _ in shapes] or meta["shapes"] != [list(s) for _, s in shapes]:
        raise CheckpointError(f"{path}: parameter names/shapes disagree with the encoder config")
    total = sum(int(np.prod(s)) for _, s in shapes)
    body = data[20 + mlen:]
    if len(body) != 3 * total * 8:
        raise CheckpointError(f"{path}: payload holds {len(body)} bytes, expected {3 * total * 8}")
    flat = np.frombuffer(body, dtype="<f8").astype(np.float64)
    blocks = []
    for j in range(3):
        part, i = {}, j * total
        for n, s in shapes:
            size = int(np.prod(s))
            part[n] = flat[i:i + size].reshape(s).copy()
            i += size
        blocks.append(part)
    return Checkpoint(ModelParams(cfg, blocks[0]), AdamState(blocks[1], blocks[2], meta["adam_step"]),
                      meta["iteration"], meta["rng_state"], meta["train_config"], meta.get("extra", {}))


# ---------------------------------------------------------------------------
# training

HISTORY_COLUMNS = ("iteration", "lr", "mc", "cd", "reg", "total", "branch_fraction")


@dataclass
class TrainResult:
    params: ModelParams
    best_params: ModelParams
    history: list[dict]
    evals: list[dict]
    checkpoint: Checkpoint


def make_rngs(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    """Independent streams for data generation and for the model's own sampling.

    The extra entropy word keeps these apart from per-episode streams
    (``SeedSequence(seed, spawn_key=(i,))``) built from the same seed.
    """
    data_ss, model_ss = np.random.SeedSequence([seed, TRAIN_STREAM]).spawn(2)
    return np.random.default_rng(data_ss), np.random.default_rng(model_ss)


def evaluate_objective(params: ModelParams, episodes: Sequence, delta: float) -> dict[str, float]:
    """Deterministic held-out losses (points taken in their stored order)."""
    p = params.weights()
    batch = TrajectoryBatch([(ep.points, ep.labels) for ep in episodes])
    terms = batch_terms(p, batch)
    from .model import terminal_energies
    e = terminal_energies(p, batch, terms.hx).data
    mc = float(terms.mc.data.mean())
    return {"mc": mc, "reg": float((e ** 2).mean()), "nll": float(terms.nll.data.mean()),
            "total": mc + delta * float((e ** 2).mean())}


def train(cfg: TrainConfig, source, params: ModelParams, eval_episodes: Sequence | None = None,
          resume: Checkpoint | None = None, stop_at: int | None = None) -> TrainResult:
    """Run the training loop from scratch or from ``resume`` up to ``stop_at`` (default: all iterations)."""
    params = params.copy()
    params.check_shapes()
    data_rng, model_rng = make_rngs(cfg.seed)
    adam = AdamState.zeros(params)
    start = 0
    if resume is not None:
        if resume.params.config != params.config:
            raise CheckpointError("checkpoint encoder config does not match the model")
        params = resume.params.copy()
        adam = AdamState({k: v.copy() for k, v in resume.adam.m.items()},
                         {k: v.copy() for k, v in resume.adam.v.items()}, resume.adam.step)
        start = resume.iteration
        data_rng.bit_generator.state = resume.rng_state["data"]
        model_rng.bit_generator.state = resume.rng_state["model"]
    end = cfg.iterations if stop_at is None else min(stop_at, cfg.iterations)
    objective = "ncp" if cfg.objective == "ncp-baseline" else "gfncp"
    history: list[dict] = []
    evals: list[dict] = []
    best_params, best_val, since_best = params.copy(), math.inf, 0

    def checkpoint(it):
        return Checkpoint(params.copy(), adam, it,
                          {"data": data_rng.bit_generator.state, "model": model_rng.bit_generator.state},
                          cfg.to_dict())

    for it in range(start, end):
        lr = cosine_lr(it, cfg.iterations, cfg.lr_init, cfg.lr_min)
        branches, episodes = [], []
        for _ in range(cfg.batch_size):
            is_data = data_rng.random() < cfg.beta
            episodes.append(source.sample(data_rng))
            branches.append(DATA if (is_data or objective == "ncp") else EXPLORE)
        tape = ad.Tape()
        w = params.bind(tape)
        try:
            lb = batch_objective(params, episodes, branches, cfg.delta, cfg.lam, model_rng,
                                 objective=objective, weights=w)
        except ad.NumericalOverflowError as e:
            raise TrainingError(f"iteration {it}: non-finite loss on branch {_branch_label(branches)} ({e})") from e
        if not np.isfinite(lb.total.item()):
            raise TrainingError(f"iteration {it}: non-finite loss on branch {_branch_label(branches)}")
        ad.backward(tape, lb.total)
        adam_step(params, w.grads(), adam, lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
        vals = lb.values()
        tape.release()
        row = {"iteration": it + 1, "lr": lr, **vals,
               "branch_fraction": branches.count(DATA) / len(branches)}
        if objective == "ncp":
            row["cd"] = float("nan")
            row["reg"] = float("nan")
        history.append(row)
        done = it + 1
        if eval_episodes and cfg.eval_every and (done % cfg.eval_every == 0 or done == cfg.iterations):
            ev = {"iteration": done, **evaluate_objective(params, eval_episodes, cfg.delta)}
            evals.append(ev)
            key = ev["nll"] if objective == "ncp" else ev[cfg.select_key]
            if key < best_val:
                best_val, best_params, since_best = key, params.copy(), 0
            else:
                since_best += 1
            log.info("iter %d  train total %.4f  eval %s", done, vals["total"], ev)
            if cfg.patience and since_best >= cfg.patience:
                log.info("early stop at iteration %d", done)
                end = done
                break
        if cfg.checkpoint_path and cfg.checkpoint_every and done % cfg.checkpoint_every == 0:
            save_checkpoint(cfg.checkpoint_path, checkpoint(done))
    ck = checkpoint(end if history or resume is None else start)
    if history:
        ck.iteration = history[-1]["iteration"]
    if cfg.checkpoint_path:
        save_checkpoint(cfg.checkpoint_path, ck)
    if not evals:
        best_params = params.copy()
    return TrainResult(params, best_params, history, evals, ck)


def _branch_label(branches) -> str:
    kinds = set(branches)
    return kinds.pop() if len(kinds) == 1 else "mixed"


def write_history(path, history: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=HISTORY_COLUMNS, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for row in history:
            w.writerow({k: (repr(float(row[k])) if k != "iteration" else row[k]) for k in HISTORY_COLUMNS})
