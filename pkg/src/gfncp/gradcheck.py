"""Finite-difference checks of the loss gradients with respect to the network parameters."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .datagen import CRPConfig, mog_episode
from .losses import batch_terms, sample_uniform_labels
from .model import EncoderConfig, ModelParams, TrajectoryBatch, canonicalize, point_encodings, terminal_energies

LOSSES = ("mc", "cd", "reg", "nll")


def tiny_config(online_mode: bool = False) -> EncoderConfig:
    return EncoderConfig.small(d_x=2, width=3, online_mode=online_mode)


def episode_losses(points, labels, neg_labels, order):
    """Scalar loss functions of a weight view for one episode; index structures are built once.

    ``labels`` and ``neg_labels`` index points by position; mc and nll follow ``order``.
    """
    seq = TrajectoryBatch([(points[order], canonicalize(np.asarray(labels)[order]))])
    full = TrajectoryBatch([(points, canonicalize(labels))])
    neg = canonicalize(neg_labels)

    def mc(w):
        return ad.reshape(batch_terms(w, seq).mc, ())

    def nll(w):
        return ad.reshape(batch_terms(w, seq).nll, ())

    def energies(w):
        hx = point_encodings(w, full)[0]
        return terminal_energies(w, full, hx, [full.labels[0], neg], [0, 0])

    def cd(w):
        e = energies(w)
        return e[0] - e[1]

    def reg(w):
        return ad.square(energies(w)[0])

    return {"mc": mc, "cd": cd, "reg": reg, "nll": nll}


def loss_grad_errors(episodes: int = 20, n: int = 5, seed: int = 0, step: float = 1e-5) -> list[dict]:
    """Worst relative gradient error of each loss over all parameters, per random ``n``-point episode."""
    rows = []
    for e, child in enumerate(np.random.SeedSequence(seed).spawn(episodes)):
        rng = np.random.default_rng(child)
        params = ModelParams.init(tiny_config(), int(rng.integers(2**31)))
        ep = mog_episode(CRPConfig(alpha=1.5, n_min=n, n_max=n), 2.0, rng)
        fns = episode_losses(ep.points, ep.labels, sample_uniform_labels(n, rng), rng.permutation(n))
        point = params.flat()
        row = {"episode": e}
        for k, f in fns.items():
            row[k] = ad.grad_check(lambda x, f=f: f(params.weights_from_flat(x)), point, step=step)
        rows.append(row)
    return rows
