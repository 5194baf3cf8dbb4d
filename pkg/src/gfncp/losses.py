"""Marginal-consistency, contrastive-divergence and regularisation losses, plus the NCP likelihood."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .flows import decode_many
from .model import (ModelParams, TrajectoryBatch, Weights, as_weights, canonicalize, check_canonical,
                    point_encodings, step_energies, terminal_energies)

DATA, EXPLORE = "data", "exploration"


@dataclass
class LossBreakdown:
    mc: Tensor
    cd: Tensor
    reg: Tensor
    total: Tensor
    residuals: np.ndarray = field(default_factory=lambda: np.zeros(0))
    branch: str = DATA

    def values(self) -> dict[str, float]:
        return {"mc": self.mc.item(), "cd": self.cd.item(), "reg": self.reg.item(), "total": self.total.item()}


# ---------------------------------------------------------------------------
# flow quantities on a padded (steps x candidates) energy matrix

def shift_energies(e_pad: Tensor, batch: TrajectoryBatch) -> Tensor:
    """E_hat: subtract the sibling minimum at every step except the terminal one."""
    m = ad.min(e_pad, axis=1, mask=batch.mask)
    shift = ad.mul(m, (~batch.is_last).astype(np.float64))
    return e_pad - ad.reshape(shift, (batch.S, 1))


def flow_terms(hat: Tensor, batch: TrajectoryBatch) -> tuple[Tensor, Tensor]:
    """(E_hat of the chosen child, log sum_j exp(-E_hat_j)) for every step."""
    S, W = batch.S, batch.W
    lse = ad.logsumexp(-hat, axis=1, mask=batch.mask)
    chosen = ad.reshape(ad.spmm(batch.Chosen, ad.reshape(hat, (S * W, 1))), (S,))
    return chosen, lse


def mc_residuals(chosen: Tensor, lse: Tensor, batch: TrajectoryBatch) -> Tensor:
    """log F(parent) - log sum of child flows; the parent of step n=2 is the first point (E_hat = 0)."""
    parent = ad.reshape(ad.spmm(batch.Prev, ad.reshape(chosen, (batch.S, 1))), (batch.S,))
    return parent + lse


def per_episode(batch: TrajectoryBatch, step_values: Tensor) -> Tensor:
    return ad.reshape(ad.spmm(batch.Seg, ad.reshape(step_values, (batch.S, 1))), (batch.B,))


@dataclass
class BatchTerms:
    mc: Tensor          # (B,)
    nll: Tensor         # (B,)
    residuals: np.ndarray
    hx: Tensor | None = None


def batch_terms(p: Weights, batch: TrajectoryBatch, hx=None, ux=None) -> BatchTerms:
    if hx is None:
        hx, ux = point_encodings(p, batch)
    if batch.S == 0:
        z = Tensor(np.zeros(batch.B))
        return BatchTerms(z, z, np.zeros(0), hx)
    e = step_energies(p, batch, hx, ux)
    hat = shift_energies(e, batch)
    chosen, lse = flow_terms(hat, batch)
    resid = mc_residuals(chosen, lse, batch)
    mc = per_episode(batch, ad.square(resid))
    nll = per_episode(batch, chosen + lse)
    return BatchTerms(mc, nll, resid.data.copy(), hx)


def _single(points, labels, order):
    points = np.asarray(points, dtype=np.float64)
    order = np.arange(len(points)) if order is None else np.asarray(order)
    return points[order], check_canonical(labels)


# ---------------------------------------------------------------------------
# per-episode losses

def mc_loss(params, points, labels, order=None) -> Tensor:
    """Sum over steps of (E_hat[parent] + log sum_children exp(-E_hat[child]))^2.

    ``labels`` are canonical in ``order`` (the labels of ``points[order]``).
    """
    p = as_weights(params)
    batch = TrajectoryBatch([_single(points, labels, order)])
    return ad.reshape(batch_terms(p, batch).mc, ())


def ncp_nll(params, points, labels, order=None) -> Tensor:
    """Negative sequential log-likelihood -sum_n log P(c_n | c_{<n}) with raw energies."""
    p = as_weights(params)
    batch = TrajectoryBatch([_single(points, labels, order)])
    return ad.reshape(batch_terms(p, batch).nll, ())


def full_energy(params, points, labels) -> Tensor:
    p = as_weights(params)
    batch = TrajectoryBatch([(np.asarray(points, dtype=np.float64), check_canonical(labels))])
    hx = point_encodings(p, batch)[0]
    return ad.reshape(terminal_energies(p, batch, hx), ())


def reg_loss(params, points, labels) -> Tensor:
    """(E[c_{1:N}])^2."""
    return ad.square(full_energy(params, points, labels))


def cd_loss(params, points, labels, neg_labels) -> Tensor:
    """E[c] - E[c_neg] with the negative assignment held fixed."""
    p = as_weights(params)
    batch = TrajectoryBatch([(np.asarray(points, dtype=np.float64), check_canonical(labels))])
    hx = point_encodings(p, batch)[0]
    e = terminal_energies(p, batch, hx, [check_canonical(labels), check_canonical(neg_labels)], [0, 0])
    return e[0] - e[1]


def cd_loss_step(params: ModelParams, points, labels, rng: np.random.Generator, order=None,
                 weights: Weights | None = None) -> tuple[Tensor, np.ndarray]:
    """Contrastive-divergence term with one negative drawn from the current policy.

    ``labels`` index the points by position; the returned negative does too.
    """
    points = np.asarray(points, dtype=np.float64)
    order = rng.permutation(len(points)) if order is None else np.asarray(order)
    traj = decode_many(params, [points], [order], greedy=False, rng=rng)[0]
    neg = canonicalize(traj.labels_by_point())
    return cd_loss(weights if weights is not None else params, points, canonicalize(labels), neg), neg


def sample_uniform_labels(N: int, rng: np.random.Generator) -> np.ndarray:
    """Sequential-uniform canonical labels: each step picks uniformly among the K+1 options."""
    c = np.zeros(N, dtype=np.int64)
    K = 1
    for n in range(1, N):
        c[n] = rng.integers(K + 1)
        K += c[n] == K
    return c


def combined_step_loss(params: ModelParams, episode, branch: str, delta: float, lam: float,
                       rng: np.random.Generator) -> LossBreakdown:
    """Loss of one episode under the data-policy or exploration branch, with a fresh uniform order."""
    return batch_objective(params, [episode], [branch], delta, lam, rng)


# ---------------------------------------------------------------------------
# batched training objective

def batch_objective(params: ModelParams, episodes: Sequence, branches: Sequence[str], delta: float, lam: float,
                    rng: np.random.Generator, objective: str = "gfncp", weights: Weights | None = None
                    ) -> LossBreakdown:
    """Mean loss over a batch of episodes.

    Every episode gets a fresh uniform order.  Data-branch episodes use their
    own labels and one policy sample as the negative; exploration episodes get
    sequential-uniform labels and no contrastive term.  With
    ``objective="ncp"`` the total is the mean sequential NLL of the labels.
    """
    p = weights if weights is not None else params.weights()
    items, neg_ids, neg_orders, neg_points = [], [], [], []
    for b, (ep, branch) in enumerate(zip(episodes, branches)):
        points = np.asarray(ep.points, dtype=np.float64)
        N = len(points)
        order = rng.permutation(N)
        if branch == DATA:
            labels = canonicalize(np.asarray(ep.labels)[order])
            if objective == "gfncp" and lam != 0.0:
                neg_ids.append(b)
                neg_orders.append(order)
                neg_points.append(points)
        elif branch == EXPLORE:
            labels = sample_uniform_labels(N, rng)
        else:
            raise ValueError(f"unknown branch {branch!r}")
        items.append((points[order], labels))
    batch = TrajectoryBatch(items)
    terms = batch_terms(p, batch)
    B = batch.B
    if objective == "ncp":
        total = ad.mean(terms.nll)
        zero = Tensor(0.0)
        return LossBreakdown(ad.mean(terms.mc), zero, zero, total, terms.residuals)
    if objective != "gfncp":
        raise ValueError(f"unknown objective {objective!r}")
    neg_labels = []
    if neg_ids:
        trajs = decode_many(params, neg_points, neg_orders, greedy=False, rng=rng)
        # decoded labels are already canonical in the episode's order
        neg_labels = [t.labels for t in trajs]
    e = terminal_energies(p, batch, terms.hx, list(batch.labels) + neg_labels, list(range(B)) + neg_ids)
    e_pos = e[:B]
    reg = ad.square(e_pos)
    is_data = np.array([br == DATA for br in branches], dtype=np.float64)
    per = terms.mc + delta * reg
    cd_mean = Tensor(0.0)
    if neg_ids:
        e_neg = e[B:]
        sel = np.zeros((B, len(neg_ids)))
        sel[neg_ids, np.arange(len(neg_ids))] = 1.0
        cd = ad.mul(e_pos, is_data) - ad.reshape(ad.spmm(sel, ad.reshape(e_neg, (-1, 1))), (B,))
        per = per + lam * cd
        cd_mean = ad.mean(cd)
    total = ad.mean(per)
    branch = DATA if all(br == DATA for br in branches) else (EXPLORE if not any(is_data) else "mixed")
    return LossBreakdown(ad.mean(terms.mc), cd_mean, ad.mean(reg), total, terms.residuals, branch)
