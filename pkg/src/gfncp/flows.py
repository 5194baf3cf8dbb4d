"""GFlowNet view of sequential clustering.

States are ``(order, labels[:n])``.  Edge and state flows share one
parametrisation, ``F = exp(-E_hat)``, where the shifted energy ``E_hat``
subtracts the minimum over the K+1 sibling candidates at intermediate levels,
is 0 for the first point and is the raw energy at the terminal level.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import (ClusterState, LabelError, ModelParams, TrajectoryBatch, as_weights,
                    check_canonical, energy, mlp_np, point_encodings, step_energies)


@dataclass
class Trajectory:
    order: np.ndarray
    labels: np.ndarray             # canonical, in ``order``
    step_logprobs: np.ndarray      # log P_F of steps n = 2..N
    logprob: float
    include_order_factor: bool = False

    @property
    def num_clusters(self) -> int:
        return int(self.labels.max()) + 1

    def labels_by_point(self) -> np.ndarray:
        """Cluster of every point indexed by its original position."""
        out = np.empty_like(self.labels)
        out[self.order] = self.labels
        return out


def _order(points, order) -> np.ndarray:
    N = len(points)
    order = np.arange(N) if order is None else np.asarray(order, dtype=np.int64)
    if order.shape != (N,) or not np.array_equal(np.sort(order), np.arange(N)):
        raise ValueError("order must be a permutation of the point indices")
    return order


def candidate_energies(params: ModelParams, points, prefix: Sequence[int], order=None) -> list[Tensor]:
    """Energies of the K+1 one-step extensions of ``prefix``."""
    order = _order(points, order)
    c = check_canonical(prefix)
    if c.size == 0 or c.size >= len(points):
        raise LabelError("prefix must have between 1 and N-1 labels")
    K = int(c.max()) + 1
    return [energy(params, points, ClusterState.from_labels(params, points, list(c) + [j], order))
            for j in range(K + 1)]


def shifted_energy(params: ModelParams, points, prefix: Sequence[int], order=None) -> Tensor:
    order = _order(points, order)
    c = check_canonical(prefix)
    N, n = len(points), c.size
    if not 1 <= n <= N:
        raise LabelError(f"prefix length {n} outside 1..{N}")
    if n == 1:
        return Tensor(0.0)
    e = energy(params, points, ClusterState.from_labels(params, points, c, order))
    if n == N:
        return e
    sib = candidate_energies(params, points, c[:-1], order)
    return e - ad.min(ad.concat([ad.reshape(s, (1,)) for s in sib]), axis=0)


def forward_distribution(params: ModelParams, points, prefix: Sequence[int], order=None) -> np.ndarray:
    """P_F over the K+1 choices for the next point given ``prefix`` (may be empty)."""
    c = check_canonical(prefix)
    if c.size == 0:
        return np.array([1.0])
    e = np.array([t.item() for t in candidate_energies(params, points, c, order)])
    logits = -(e - e.min())
    w = np.exp(logits - logits.max())
    return w / w.sum()


def reward_log(params: ModelParams, points, labels) -> float:
    """log R = -E[c_{1:N}]; labels indexed by original point position."""
    c = check_canonical(labels)
    if c.size != len(points):
        raise LabelError("reward needs a full assignment")
    return -energy(params, points, ClusterState.from_labels(params, points, c)).item()


def log_order_factor(N: int) -> float:
    return -math.lgamma(N + 1)


def trajectory_logprobs(params: ModelParams, episodes: Sequence[tuple[np.ndarray, np.ndarray]],
                        include_order_factor: bool = False, chunk: int = 256) -> np.ndarray:
    """log P(tau) for each ``(points_in_order, labels)`` pair, evaluated in batches."""
    out = []
    p = as_weights(params)
    for start in range(0, len(episodes), chunk):
        part = episodes[start:start + chunk]
        batch = TrajectoryBatch(part)
        vals = np.zeros(batch.B)
        if batch.S:
            hx, ux = point_encodings(p, batch)
            e = step_energies(p, batch, hx, ux).data
            logits = np.where(batch.mask, -e, -np.inf)
            m = logits.max(axis=1, keepdims=True)
            lse = (m + np.log(np.exp(logits - m).sum(axis=1, keepdims=True)))[:, 0]
            step = -e[np.arange(batch.S), batch.chosen] - lse
            vals = batch.Seg @ step
        if include_order_factor:
            vals = vals + np.array([log_order_factor(n) for n in batch.sizes])
        out.append(vals)
    return np.concatenate(out) if out else np.zeros(0)


def trajectory_logprob(params: ModelParams, points, labels, order=None,
                       include_order_factor: bool = False) -> float:
    """log P(tau) for the trajectory visiting ``points[order]`` with canonical ``labels``."""
    order = _order(points, order)
    c = check_canonical(labels)
    pts = np.asarray(points, dtype=np.float64)[order]
    return float(trajectory_logprobs(params, [(pts, c)], include_order_factor)[0])


# ---------------------------------------------------------------------------
# sequential decoding

def decode_many(params: ModelParams, point_sets: Sequence[np.ndarray], orders: Sequence[np.ndarray] | None = None,
                greedy: bool = True, rng: np.random.Generator | None = None,
                include_order_factor: bool = False) -> list[Trajectory]:
    """Greedy or ancestral decoding of several point sets in lockstep."""
    if not greedy and rng is None:
        raise ValueError("sampling needs an rng")
    cfg = params.config
    A = params.arrays
    R = len(point_sets)
    if R == 0:
        return []
    orders = [_order(x, None if orders is None else orders[r]) for r, x in enumerate(point_sets)]
    Ns = np.array([len(x) for x in point_sets])
    Nmax = int(Ns.max())
    hx = np.zeros((R, Nmax, cfg.d_h))
    usuf = np.zeros((R, Nmax, cfg.d_u))
    for r, x in enumerate(point_sets):
        pts = np.asarray(x, dtype=np.float64)[orders[r]] * cfg.input_scale
        hx[r, :Ns[r]] = mlp_np(A, "h", pts)
        if not cfg.online_mode:
            u = mlp_np(A, "u", pts)
            # usuf[n] = sum of u over points after n
            usuf[r, :Ns[r]] = np.cumsum(u[::-1], axis=0)[::-1] - u
    # per-cluster state is kept in projected form: qH = H @ g.0.W and zH = g(H) @ f.0.W[:d_g]
    L = len(cfg.g_hidden)
    Wf = A["f.0.W"][:cfg.d_g]
    qx = hx @ A["g.0.W"]
    if L:
        M = A[f"g.{L}.W"] @ Wf
        c = A[f"g.{L}.b"] @ Wf
    labels = np.zeros((R, Nmax), dtype=np.int64)
    logps = np.zeros((R, max(Nmax - 1, 0)))
    qH = np.zeros((R, Nmax + 1, qx.shape[2]))
    zH = np.zeros((R, Nmax + 1, Wf.shape[1]))
    qH[:, 0] = qx[:, 0]
    zH[:, 0] = mlp_np(A, "g", hx[:, 0]) @ Wf
    K = np.ones(R, dtype=np.int64)
    for n in range(1, Nmax):
        act = np.nonzero(Ns > n)[0]
        a = act.size
        kc = int(K[act].max()) + 1
        slots = np.arange(kc)
        Ka = K[act]
        valid = slots[None, :] <= Ka[:, None]
        # only the Ka + 1 real candidates of each row are evaluated; slots >= K hold zeros
        ri, si = np.nonzero(valid)
        start = np.concatenate([[0], np.cumsum(Ka + 1)[:-1]])
        z0 = qH[act[ri], si] + qx[act[ri], n] + A["g.0.b"]
        zj = mlp_np(A, "g", z0, start=1, stop=L) @ M + c if L else z0 @ Wf
        z = zH[act, :kc].sum(axis=1)[ri] - zH[act[ri], si] + zj + A["f.0.b"]
        if not cfg.online_mode:
            z += (usuf[act, n] @ A["f.0.W"][cfg.d_g:])[ri]
        e = np.zeros((a, kc))
        e[ri, si] = mlp_np(A, "f", z, start=1)[:, 0]
        logits = np.where(valid, -e, -np.inf)
        m = logits.max(axis=1, keepdims=True)
        lp = logits - (m + np.log(np.exp(logits - m).sum(axis=1, keepdims=True)))
        if greedy:
            choice = lp.argmax(axis=1)
        else:
            cdf = np.cumsum(np.exp(lp), axis=1)
            u = rng.random(a)
            choice = np.minimum((cdf < (u * cdf[:, -1])[:, None]).sum(axis=1), Ka)
        rows = np.arange(a)
        labels[act, n] = choice
        logps[act, n - 1] = lp[rows, choice]
        qH[act, choice] += qx[act, n]
        zH[act, choice] = zj[start + choice]
        K[act] += (choice == Ka)
    out = []
    for r in range(R):
        N = int(Ns[r])
        steps = logps[r, :N - 1].copy()
        total = float(steps.sum()) + (log_order_factor(N) if include_order_factor else 0.0)
        out.append(Trajectory(orders[r], labels[r, :N].copy(), steps, total, include_order_factor))
    return out


def greedy_decode(params: ModelParams, points, order=None) -> Trajectory:
    return decode_many(params, [np.asarray(points)], [order] if order is not None else None, greedy=True)[0]


def sample_trajectory(params: ModelParams, points, rng: np.random.Generator, order=None) -> Trajectory:
    """Ancestral sample from the forward policy; ``order`` is drawn uniformly when omitted."""
    if order is None:
        order = rng.permutation(len(points))
    return decode_many(params, [np.asarray(points)], [order], greedy=False, rng=rng)[0]
