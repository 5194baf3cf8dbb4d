"""Permutation-invariant energy network E[c_{1:n}, x_{1:N}] = f(G, U).

Points assigned so far are pooled per cluster through ``h`` (H_k), the
clusters are pooled through ``g`` (G), and the unassigned points are pooled
through ``u`` (U).  ``f`` maps the concatenation to a scalar energy.

Labels are 0-based and canonical throughout: ``labels[0] == 0`` and
``labels[m] <= max(labels[:m]) + 1``.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .autodiff import Tape, Tensor

NETS = ("h", "u", "g", "f")


class LabelError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    d_x: int = 2
    d_h: int = 128
    d_g: int = 256
    d_u: int = 128
    h_hidden: tuple[int, ...] = (128, 128)
    u_hidden: tuple[int, ...] = (128, 128)
    g_hidden: tuple[int, ...] = (128, 128)
    f_hidden: tuple[int, ...] = (128, 128)
    activation: str = "relu"
    online_mode: bool = False
    input_scale: float = 1.0    # points are multiplied by this before h and u

    def __post_init__(self):
        for name in ("d_x", "d_h", "d_g", "d_u"):
            if getattr(self, name) < 1:
                raise ValueError(f"EncoderConfig.{name} must be >= 1")
        for name in ("h_hidden", "u_hidden", "g_hidden", "f_hidden"):
            sizes = tuple(int(s) for s in getattr(self, name))
            if any(s < 1 for s in sizes):
                raise ValueError(f"EncoderConfig.{name} sizes must be >= 1")
            object.__setattr__(self, name, sizes)
        if not self.input_scale > 0:
            raise ValueError("EncoderConfig.input_scale must be positive")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")

    def net_dims(self, net: str) -> list[int]:
        return {
            "h": [self.d_x, *self.h_hidden, self.d_h],
            "u": [self.d_x, *self.u_hidden, self.d_u],
            "g": [self.d_h, *self.g_hidden, self.d_g],
            "f": [self.d_g + self.d_u, *self.f_hidden, 1],
        }[net]

    def param_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        out = []
        for net in NETS:
            dims = self.net_dims(net)
            for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
                out.append((f"{net}.{i}.W", (a, b)))
                out.append((f"{net}.{i}.b", (b,)))
        return out

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})

    @classmethod
    def small(cls, d_x: int = 2, width: int = 32, online_mode: bool = False,
              input_scale: float = 1.0) -> "EncoderConfig":
        """Uniform-width configuration used by desk-scale profiles."""
        return cls(d_x=d_x, d_h=width, d_g=2 * width, d_u=width,
                   h_hidden=(width, width), u_hidden=(width, width),
                   g_hidden=(width, width), f_hidden=(width, width),
                   online_mode=online_mode, input_scale=input_scale)


class Weights:
    """Name -> tensor view of the parameters for one forward pass."""

    def __init__(self, config: EncoderConfig, w: dict[str, Tensor]):
        self.config = config
        self.w = w

    def __getitem__(self, name: str) -> Tensor:
        return self.w[name]

    def grads(self) -> dict[str, np.ndarray]:
        return {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in self.w.items()}


@dataclass
class ModelParams:
    config: EncoderConfig
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def init(cls, config: EncoderConfig, seed: int = 0) -> "ModelParams":
        """Fan-in scaled uniform initialisation (bound 1/sqrt(fan_in) for weights and biases)."""
        rng = np.random.default_rng(seed)
        arrays = {}
        for name, shape in config.param_shapes():
            fan_in = shape[0] if name.endswith(".W") else arrays[name[:-1] + "W"].shape[0]
            bound = 1.0 / np.sqrt(fan_in)
            arrays[name] = rng.uniform(-bound, bound, size=shape)
        return cls(config, arrays)

    def names(self) -> list[str]:
        return [n for n, _ in self.config.param_shapes()]

    def num_params(self) -> int:
        return int(np.sum([a.size for a in self.arrays.values()]))

    def check_shapes(self):
        for name, shape in self.config.param_shapes():
            if name not in self.arrays or self.arrays[name].shape != shape:
                raise ValueError(f"parameter {name} missing or not of shape {shape}")
        if len(self.arrays) != len(self.config.param_shapes()):
            raise ValueError("unexpected extra parameters")

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.arrays.items()})

    def weights(self) -> Weights:
        return Weights(self.config, {k: Tensor(v) for k, v in self.arrays.items()})

    def bind(self, tape: Tape) -> Weights:
        return Weights(self.config, {k: tape.leaf(v) for k, v in self.arrays.items()})

    def flat(self) -> np.ndarray:
        return np.concatenate([self.arrays[n].reshape(-1) for n in self.names()])

    def from_flat(self, vec: np.ndarray) -> "ModelParams":
        out, i = {}, 0
        for name, shape in self.config.param_shapes():
            size = int(np.prod(shape))
            out[name] = np.array(vec[i:i + size]).reshape(shape)
            i += size
        return ModelParams(self.config, out)

    def weights_from_flat(self, x: Tensor) -> Weights:
        """Slice a flat parameter tensor into named views (used for gradient checks)."""
        w, i = {}, 0
        for name, shape in self.config.param_shapes():
            size = int(np.prod(shape))
            w[name] = ad.reshape(x[i:i + size], shape)
            i += size
        return Weights(self.config, w)


def as_weights(params) -> Weights:
    return params.weights() if isinstance(params, ModelParams) else params


def mlp(p: Weights, net: str, x, start: int = 0, stop: int | None = None) -> Tensor:
    """Apply layers ``start`` to ``stop - 1`` of ``net``.

    ``start=1`` takes first-layer pre-activations; ``stop=depth-1`` returns the
    last hidden activation.
    """
    depth = len(p.config.net_dims(net)) - 1
    stop = depth if stop is None else stop
    if start:
        x = ad.relu(x)
    for i in range(start, stop):
        x = ad.affine(x, p[f"{net}.{i}.W"], p[f"{net}.{i}.b"])
        if i < depth - 1:
            x = ad.relu(x)
    return x


def mlp_np(arrays: dict[str, np.ndarray], net: str, x: np.ndarray, start: int = 0,
           stop: int | None = None) -> np.ndarray:
    i = start
    if start:
        x = np.maximum(x, 0.0)
    while f"{net}.{i}.W" in arrays and (stop is None or i < stop):
        x = x @ arrays[f"{net}.{i}.W"] + arrays[f"{net}.{i}.b"]
        i += 1
        if f"{net}.{i}.W" in arrays:
            x = np.maximum(x, 0.0)
    return x


# ---------------------------------------------------------------------------
# labels

def check_canonical(labels: Sequence[int]) -> np.ndarray:
    c = np.asarray(labels, dtype=np.int64)
    if c.ndim != 1:
        raise LabelError("labels must be one-dimensional")
    if c.size == 0:
        return c
    if c[0] != 0:
        raise LabelError(f"first label must be 0, got {c[0]}")
    running = np.maximum.accumulate(c)
    if np.any(c[1:] > running[:-1] + 1) or np.any(c < 0):
        bad = int(np.argmax((c[1:] > running[:-1] + 1) | (c[1:] < 0))) + 1
        raise LabelError(f"label {c[bad]} at position {bad} is outside the canonical range 0..{running[bad - 1] + 1}")
    return c


def canonicalize(labels: Sequence) -> np.ndarray:
    """Relabel by order of first appearance."""
    mapping: dict = {}
    out = np.empty(len(labels), dtype=np.int64)
    for i, lab in enumerate(labels):
        key = lab.item() if hasattr(lab, "item") else lab
        if key not in mapping:
            mapping[key] = len(mapping)
        out[i] = mapping[key]
    return out


def permute_episode(labels: np.ndarray, order: np.ndarray) -> np.ndarray:
    """Canonical labels of the points taken in ``order``."""
    return canonicalize(np.asarray(labels)[np.asarray(order)])


# ---------------------------------------------------------------------------
# per-state reference path

@dataclass
class ClusterState:
    """Prefix assignment of ``points[order[:n]]`` with cached per-cluster sums."""

    order: np.ndarray
    labels: list[int]
    H: np.ndarray            # (K, d_h) sums of h over each cluster
    unassigned_u: np.ndarray  # (d_u,) sum of u over order[n:]
    h_cache: np.ndarray       # (N, d_h) h of every point, indexed by original point id
    u_cache: np.ndarray       # (N, d_u)

    @property
    def n(self) -> int:
        return len(self.labels)

    @property
    def K(self) -> int:
        return self.H.shape[0]

    @property
    def N(self) -> int:
        return len(self.order)

    @classmethod
    def empty(cls, params: ModelParams, points: np.ndarray, order=None) -> "ClusterState":
        points = np.asarray(points, dtype=np.float64)
        N = points.shape[0]
        order = np.arange(N) if order is None else np.asarray(order, dtype=np.int64)
        if sorted(order.tolist()) != list(range(N)):
            raise ValueError("order must be a permutation of the point indices")
        xs = points * params.config.input_scale
        hc = mlp_np(params.arrays, "h", xs)
        uc = mlp_np(params.arrays, "u", xs)
        return cls(order, [], np.zeros((0, params.config.d_h)), uc.sum(axis=0), hc, uc)

    @classmethod
    def from_labels(cls, params: ModelParams, points, labels, order=None) -> "ClusterState":
        """Build the state from scratch (no incremental updates)."""
        st = cls.empty(params, points, order)
        c = check_canonical(labels)
        if c.size > st.N:
            raise LabelError("more labels than points")
        K = int(c.max()) + 1 if c.size else 0
        ids = st.order[:c.size]
        H = np.zeros((K, params.config.d_h))
        np.add.at(H, c, st.h_cache[ids])
        rest = st.order[c.size:]
        U = st.u_cache[rest].sum(axis=0) if rest.size else np.zeros(params.config.d_u)
        return cls(st.order, c.tolist(), H, U, st.h_cache, st.u_cache)

    def assigned_count(self) -> int:
        return self.n

    def unassigned_count(self) -> int:
        return self.N - self.n


def incremental_assign(state: ClusterState, next_label: int) -> ClusterState:
    """Assign the next point in the order to ``next_label`` (0..K)."""
    if state.n >= state.N:
        raise LabelError("all points are already assigned")
    K = state.K
    if state.n == 0 and next_label != 0:
        raise LabelError("first point must go to cluster 0")
    if not 0 <= next_label <= K:
        raise LabelError(f"label {next_label} outside canonical range 0..{K}")
    pid = state.order[state.n]
    H = state.H
    if next_label == K:
        H = np.vstack([H, np.zeros((1, H.shape[1]))])
    else:
        H = H.copy()
    H[next_label] += state.h_cache[pid]
    return ClusterState(state.order, state.labels + [int(next_label)], H,
                        state.unassigned_u - state.u_cache[pid], state.h_cache, state.u_cache)


def encode_state(params, points, state: ClusterState) -> tuple[Tensor, Tensor]:
    """G = sum_k g(H_k) and U = sum of u over unassigned points, from scratch."""
    p = as_weights(params)
    cfg = p.config
    c = check_canonical(state.labels)
    if c.size < 1:
        raise LabelError("encode_state needs at least one assigned point")
    points = np.asarray(points, dtype=np.float64)
    if points.shape[0] != state.N:
        raise ValueError("state does not match the point set")
    K = int(c.max()) + 1
    ids = state.order[:c.size]
    hx = mlp(p, "h", points[ids] * cfg.input_scale)
    onehot = sp.csr_matrix((np.ones(c.size), (c, np.arange(c.size))), shape=(K, c.size))
    H = ad.spmm(onehot, hx)
    G = ad.sum(mlp(p, "g", H), axis=0)
    rest = state.order[c.size:]
    if cfg.online_mode or rest.size == 0:
        U = Tensor(np.zeros(cfg.d_u))
    else:
        U = ad.sum(mlp(p, "u", points[rest] * cfg.input_scale), axis=0)
    return G, U


def energy(params, points, state: ClusterState) -> Tensor:
    G, U = encode_state(params, points, state)
    p = as_weights(params)
    z = ad.reshape(ad.concat([G, U], axis=0), (1, -1))
    return ad.reshape(mlp(p, "f", z), ())


# ---------------------------------------------------------------------------
# batched path: all candidate energies along given trajectories

def _coo(rows, cols, shape) -> sp.csr_matrix:
    rows = np.concatenate(rows) if isinstance(rows, list) else rows
    cols = np.concatenate(cols) if isinstance(cols, list) else cols
    return sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=shape)


class TrajectoryBatch:
    """Index structure for evaluating every K+1-way candidate along a batch of trajectories.

    Each episode is ``(points_in_order, canonical_labels)``.  Step ``s`` of
    episode ``b`` assigns point ``n >= 1`` given the prefix ``labels[:n]``.
    """

    def __init__(self, episodes: Sequence[tuple[np.ndarray, np.ndarray]]):
        self.points = np.concatenate([np.asarray(x, dtype=np.float64) for x, _ in episodes], axis=0)
        self.labels = [check_canonical(c) for _, c in episodes]
        self.sizes = np.array([len(c) for c in self.labels], dtype=np.int64)
        for (x, _), c in zip(episodes, self.labels):
            if len(x) != len(c):
                raise LabelError("points and labels differ in length")
            if len(c) == 0:
                raise LabelError("empty episode")
        self.B = len(self.labels)
        self.T = int(self.sizes.sum())
        self.offsets = np.concatenate([[0], np.cumsum(self.sizes)[:-1]])

        state_r, state_c, last_c, join_c, new_c = [], [], [], [], []
        suf_r, suf_c = [], []
        step_of_p, kp_all, episode_of_step, n_of_step, chosen = [], [], [], [], []
        S = P = 0
        for b, c in enumerate(self.labels):
            N, o = len(c), self.offsets[b]
            # running cluster sums: state i = sum of h over points j <= i in the cluster of i
            j, i = np.triu_indices(N, 0)
            same = c[j] == c[i]
            state_r.append(o + i[same])
            state_c.append(o + j[same])
            if N < 2:
                continue
            cm = np.maximum.accumulate(c)
            kp = cm[:-1] + 1                      # clusters before steps n = 1..N-1
            K = int(cm[-1]) + 1
            # last[n, k]: latest point before n in cluster k
            marks = np.where(c[:, None] == np.arange(K)[None, :], np.arange(N)[:, None], -1)
            last = np.maximum.accumulate(marks, axis=0)
            steps = np.arange(S, S + N - 1)
            sp_ = np.repeat(steps, kp)
            n_p = np.repeat(np.arange(1, N), kp)
            k_p = np.arange(int(kp.sum())) - np.repeat(np.concatenate([[0], np.cumsum(kp)[:-1]]), kp)
            last_c.append(o + last[n_p - 1, k_p])
            join_c.append(o + n_p)
            new_c.append(o + np.arange(1, N))
            i, n = np.triu_indices(N, 1)
            keep = i >= 1                         # step of point i sees points n > i as unassigned
            suf_r.append(S + i[keep] - 1)
            suf_c.append(o + n[keep])
            step_of_p.append(sp_)
            kp_all.append(kp)
            episode_of_step.append(np.full(N - 1, b))
            n_of_step.append(np.arange(1, N))
            chosen.append(c[1:])
            S += N - 1
            P += int(kp.sum())
        self.S, self.P = S, P
        cat = (lambda xs, dt=np.int64: np.concatenate(xs).astype(dt) if xs else np.zeros(0, dt))
        self.kp = cat(kp_all)
        self.step_of_p = cat(step_of_p)
        self.episode_of_step = cat(episode_of_step)
        self.n_of_step = cat(n_of_step)
        self.chosen = cat(chosen)
        T = self.T
        self.A_state = _coo(state_r, state_c, (T, T))
        if S == 0:
            self.W = 1
            return
        self.Last = _coo(np.arange(P), last_c, (P, T))
        self.Join = _coo(np.arange(P), join_c, (P, T))
        self.New = _coo(np.arange(S), new_c, (S, T))
        bsum = _coo(self.step_of_p, np.arange(P), (S, P))
        self.BaseSel = (bsum @ self.Last).tocsr()
        self.RepP = bsum.T.tocsr()
        self.Usuf = _coo(suf_r, suf_c, (S, T))
        cand_step = np.concatenate([self.step_of_p, np.arange(S)])
        self.RepC = _coo(np.arange(P + S), cand_step, (P + S, S))
        # padded (S, W) layout of the P + S candidates
        self.W = int(self.kp.max()) + 1
        k_of_p = np.arange(P) - np.repeat(np.concatenate([[0], np.cumsum(self.kp)[:-1]]), self.kp)
        pad_pos = np.concatenate([self.step_of_p * self.W + k_of_p, np.arange(S) * self.W + self.kp])
        self.Pad = _coo(pad_pos, np.arange(P + S), (S * self.W, P + S))
        self.mask = np.zeros((S, self.W), dtype=bool)
        self.mask.reshape(-1)[pad_pos] = True
        self.is_last = self.n_of_step == self.sizes[self.episode_of_step] - 1
        self.Chosen = _coo(np.arange(S), np.arange(S) * self.W + self.chosen, (S, S * self.W))
        has_parent = self.n_of_step >= 2
        s_idx = np.arange(S)[has_parent]
        self.Prev = _coo(s_idx, s_idx - 1, (S, S))
        self.Seg = _coo(self.episode_of_step, np.arange(S), (self.B, S))

    def terminal_index(self, label_sets: Sequence[np.ndarray] | None = None,
                       episode_ids: Sequence[int] | None = None):
        """Sparse maps for full-assignment energies.

        ``label_sets[j]`` labels the points of episode ``episode_ids[j]``
        (default: the batch's own labels, one per episode).
        """
        label_sets = self.labels if label_sets is None else [check_canonical(c) for c in label_sets]
        episode_ids = range(len(label_sets)) if episode_ids is None else episode_ids
        rows, cols, seg = [], [], []
        R = 0
        for j, (b, c) in enumerate(zip(episode_ids, label_sets)):
            if len(c) != self.sizes[b]:
                raise LabelError("label set does not match episode size")
            K = int(c.max()) + 1
            rows.append(R + c)
            cols.append(self.offsets[b] + np.arange(len(c)))
            seg.append(np.full(K, j))
            R += K
        a_full = _coo(rows, cols, (R, self.T))
        seg_k = _coo(np.concatenate(seg), np.arange(R), (len(label_sets), R))
        return a_full, seg_k


def point_encodings(p: Weights, batch: TrajectoryBatch) -> tuple[Tensor, Tensor | None]:
    xs = batch.points * p.config.input_scale
    hx = mlp(p, "h", xs)
    ux = None if p.config.online_mode else mlp(p, "u", xs)
    return hx, ux


def step_energies(p: Weights, batch: TrajectoryBatch, hx: Tensor, ux: Tensor | None) -> Tensor:
    """Energies of all candidates, shape (S, W); entries outside ``batch.mask`` are 0.

    The first layer of g is linear in the pooled input, so it is applied to
    each point once and the pooling is done on the projections.  The last
    layer of g and the G part of f's first layer are linear too, and the P
    join rows go through their product directly.
    """
    cfg = p.config
    L = len(cfg.g_hidden)
    if L == 0:
        return _step_energies_plain(p, batch, hx, ux)
    T = batch.T
    q = ad.matmul(hx, p["g.0.W"])
    q_state = ad.spmm(batch.A_state, q)
    q_join = ad.spmm(batch.Last, q_state) + ad.spmm(batch.Join, q)
    z0 = ad.add(ad.concat([q_state, q, q_join], axis=0), p["g.0.b"])
    a = mlp(p, "g", z0, start=1, stop=L)
    Wg, bg = p[f"g.{L}.W"], p[f"g.{L}.b"]
    Wf = ad.index(p["f.0.W"], slice(0, cfg.d_g))
    bf = p["f.0.b"]
    z_state = ad.matmul(ad.affine(a[:T], Wg, bg), Wf)
    z_solo = ad.affine(ad.affine(a[T:2 * T], Wg, bg), Wf, bf)
    c = ad.reshape(ad.matmul(ad.reshape(bg, (1, -1)), Wf), (-1,)) + bf
    z_base = ad.spmm(batch.BaseSel, z_state)
    z_join = (ad.spmm(batch.RepP, z_base) - ad.spmm(batch.Last, z_state)
              + ad.affine(a[2 * T:], ad.matmul(Wg, Wf), c))
    z_new = z_base + ad.spmm(batch.New, z_solo)
    z = ad.concat([z_join, z_new], axis=0)
    if ux is not None:
        zu = ad.matmul(ad.spmm(batch.Usuf, ux), ad.index(p["f.0.W"], slice(cfg.d_g, None)))
        z = z + ad.spmm(batch.RepC, zu)
    return ad.reshape(ad.spmm(batch.Pad, mlp(p, "f", z, start=1)), (batch.S, batch.W))


def _step_energies_plain(p: Weights, batch: TrajectoryBatch, hx: Tensor, ux: Tensor | None) -> Tensor:
    S, T = batch.S, batch.T
    h_state = ad.spmm(batch.A_state, hx)
    h_join = ad.spmm(batch.Last, h_state) + ad.spmm(batch.Join, hx)
    g_all = mlp(p, "g", ad.concat([h_state, hx, h_join], axis=0))
    g_state = g_all[:T]
    g_solo = g_all[T:2 * T]
    g_join = g_all[2 * T:]
    g_base = ad.spmm(batch.BaseSel, g_state)
    G_join = ad.spmm(batch.RepP, g_base) - ad.spmm(batch.Last, g_state) + g_join
    G_new = g_base + ad.spmm(batch.New, g_solo)
    G = ad.concat([G_join, G_new], axis=0)
    return ad.reshape(ad.spmm(batch.Pad, _f_energy(p, G, None if ux is None else ad.spmm(batch.Usuf, ux),
                                                      batch.RepC)), (S, batch.W))


def _f_energy(p: Weights, G: Tensor, U: Tensor | None, rep=None) -> Tensor:
    """f([G, U]) with the first layer split, so U (one row per step) is projected before ``rep`` copies it."""
    d_g = p.config.d_g
    W0 = p["f.0.W"]
    z = ad.affine(G, ad.index(W0, slice(0, d_g)), p["f.0.b"])
    if U is not None:
        zu = ad.matmul(U, ad.index(W0, slice(d_g, None)))
        z = z + (zu if rep is None else ad.spmm(rep, zu))
    return mlp(p, "f", z, start=1)


def terminal_energies(p: Weights, batch: TrajectoryBatch, hx: Tensor,
                      label_sets: Sequence[np.ndarray] | None = None,
                      episode_ids: Sequence[int] | None = None) -> Tensor:
    """E[c_{1:N}] (with U = 0) for each label set, shape (len(label_sets),)."""
    a_full, seg_k = batch.terminal_index(label_sets, episode_ids)
    G = ad.spmm(seg_k, mlp(p, "g", ad.spmm(a_full, hx)))
    return ad.reshape(_f_energy(p, G, None), (-1,))
