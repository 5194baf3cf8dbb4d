"""Clustering metrics, order-consistency metrics, exact posteriors and the exact-flow verifier."""
from __future__ import annotations

import csv
import hashlib
import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from . import autodiff as ad
from .autodiff import Tensor
from .flows import decode_many, trajectory_logprobs
from .losses import batch_terms, flow_terms, mc_residuals, per_episode
from .model import ModelParams, TrajectoryBatch, as_weights, canonicalize

MAX_ENUM_N = 10
MAX_VERIFY_N = 8


class EvalError(ValueError):
    pass


# ---------------------------------------------------------------------------
# clustering metrics

def _contingency(a, b) -> np.ndarray:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape or a.ndim != 1:
        raise EvalError(f"label arrays differ in shape: {a.shape} vs {b.shape}")
    ia = np.unique(a, return_inverse=True)[1]
    ib = np.unique(b, return_inverse=True)[1]
    table = np.zeros((ia.max() + 1, ib.max() + 1))
    np.add.at(table, (ia, ib), 1.0)
    return table


def _entropy(counts: np.ndarray, n: float) -> float:
    p = counts[counts > 0] / n
    return float(-(p * np.log(p)).sum())


def nmi(labels_a, labels_b) -> float:
    """Mutual information over the arithmetic mean of the two entropies."""
    if len(labels_a) < 1:
        raise EvalError("nmi needs at least one label")
    t = _contingency(labels_a, labels_b)
    n = t.sum()
    ha, hb = _entropy(t.sum(axis=1), n), _entropy(t.sum(axis=0), n)
    if ha == 0.0 and hb == 0.0:
        return 1.0
    if ha == 0.0 or hb == 0.0:
        return 0.0
    pa, pb = t.sum(axis=1) / n, t.sum(axis=0) / n
    nz = t > 0
    pij = t[nz] / n
    mi = float((pij * np.log(pij / np.outer(pa, pb)[nz])).sum())
    return min(1.0, max(0.0, mi / (0.5 * (ha + hb))))


def ari(labels_a, labels_b) -> float:
    if len(labels_a) < 2:
        raise EvalError("ari needs at least two labels")
    t = _contingency(labels_a, labels_b)
    comb = lambda x: x * (x - 1) / 2.0
    n = t.sum()
    index = comb(t).sum()
    sa, sb = comb(t.sum(axis=1)).sum(), comb(t.sum(axis=0)).sum()
    expected = sa * sb / comb(n)
    top = 0.5 * (sa + sb)
    if top == expected:
        return 1.0
    return float((index - expected) / (top - expected))


# ---------------------------------------------------------------------------
# consistency metrics

def mc_metric(params, episodes: Sequence, chunk: int = 64) -> float:
    """Mean marginal-consistency loss over episodes, taking points in their stored order."""
    if not episodes:
        raise EvalError("mc_metric needs at least one episode")
    p = as_weights(params)
    vals = []
    for s in range(0, len(episodes), chunk):
        batch = TrajectoryBatch([(ep.points, ep.labels) for ep in episodes[s:s + chunk]])
        vals.append(batch_terms(p, batch).mc.data)
    return float(np.concatenate(vals).mean())


def sdpp_from_logprobs(logps) -> float:
    """Population SD over mean of exp(logps), evaluated on max-shifted logs."""
    lp = np.asarray(logps, dtype=np.float64)
    if lp.size < 2:
        raise EvalError("sdpp needs at least two permutations")
    if not np.all(np.isfinite(lp)):
        raise EvalError("trajectory probabilities underflow or are undefined")
    w = np.exp(lp - lp.max())
    return float(w.std() / w.mean())


def sdpp(params: ModelParams, episode, num_perms: int = 500, rng: np.random.Generator | None = None) -> float:
    """Relative spread of p(c_rho | x_rho) over uniformly sampled orders (with replacement)."""
    if num_perms < 2:
        raise EvalError("num_perms must be >= 2")
    rng = np.random.default_rng() if rng is None else rng
    pts = np.asarray(episode.points, dtype=np.float64)
    lab = np.asarray(episode.labels)
    items = []
    for _ in range(num_perms):
        o = rng.permutation(len(pts))
        items.append((pts[o], canonicalize(lab[o])))
    return sdpp_from_logprobs(trajectory_logprobs(params, items))


# ---------------------------------------------------------------------------
# partitions and posteriors

def partitions(N: int) -> np.ndarray:
    """All restricted-growth strings of length N in lexicographic order, shape (Bell(N), N)."""
    if N < 1:
        raise EvalError("N must be >= 1")
    rows = [[0]]
    for _ in range(1, N):
        rows = [r + [j] for r in rows for j in range(max(r) + 2)]
    return np.array(rows, dtype=np.int64)


def bell(N: int) -> int:
    row = [1]
    for _ in range(N):
        nxt = [row[-1]]
        for x in row:
            nxt.append(nxt[-1] + x)
        row = nxt
    return row[0]


def _log_marginal(x: np.ndarray, sigma: float) -> float:
    """log p(x) for one cluster: mu ~ N(0, sigma^2 I), x_i ~ N(mu, I)."""
    n, d = x.shape
    s2 = sigma * sigma
    tot = x.sum(axis=0)
    quad = (x * x).sum() - s2 * (tot @ tot) / (1.0 + n * s2)
    return -0.5 * n * d * math.log(2 * math.pi) - 0.5 * d * math.log1p(n * s2) - 0.5 * quad


def exact_posterior(points, alpha: float, sigma: float) -> tuple[np.ndarray, np.ndarray]:
    """(partitions, posterior probabilities) under the CRP mixture with Normal-Normal clusters."""
    x = np.asarray(points, dtype=np.float64)
    N = len(x)
    if N > MAX_ENUM_N:
        raise EvalError(f"enumeration limited to N <= {MAX_ENUM_N}")
    if alpha <= 0 or sigma <= 0:
        raise EvalError("alpha and sigma must be positive")
    parts = partitions(N)
    logw = np.empty(len(parts))
    for i, c in enumerate(parts):
        K = int(c.max()) + 1
        lw = K * math.log(alpha)
        for k in range(K):
            members = x[c == k]
            lw += math.lgamma(len(members)) + _log_marginal(members, sigma)
        logw[i] = lw
    return parts, np.exp(logw - logsumexp(logw))


@dataclass
class PartitionTable:
    partitions: np.ndarray
    exact: np.ndarray | None
    model_raw: np.ndarray
    model: np.ndarray

    def tv(self) -> float:
        if self.exact is None:
            raise EvalError("no exact column")
        return 0.5 * float(np.abs(self.exact - self.model_raw).sum())


def model_posterior_enum(params, points, order=None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(partitions, raw model probabilities, renormalized) for the fixed order (identity by default).

    Partitions are indexed by point; the model scores each through its
    canonical label sequence along ``order``.
    """
    x = np.asarray(points, dtype=np.float64)
    N = len(x)
    if N > MAX_ENUM_N:
        raise EvalError(f"enumeration limited to N <= {MAX_ENUM_N}")
    order = np.arange(N) if order is None else np.asarray(order)
    parts = partitions(N)
    items = [(x[order], canonicalize(c[order])) for c in parts]
    raw = np.exp(trajectory_logprobs(params, items))
    return parts, raw, raw / raw.sum()


def partition_table(params, points, alpha: float, sigma: float) -> PartitionTable:
    parts, exact = exact_posterior(points, alpha, sigma)
    _, raw, norm = model_posterior_enum(params, points)
    return PartitionTable(parts, exact, raw, norm)


# ---------------------------------------------------------------------------
# exact-flow verifier

@dataclass
class VerifierReport:
    N: int
    mc_max: float
    order_spread: float
    reach_error: float
    sdpp: float
    tol: float
    orders_checked: int

    @property
    def passed(self) -> bool:
        return self.mc_max <= self.tol and self.order_spread <= self.tol and self.reach_error <= self.tol


def _prefix_groups(rgs: np.ndarray) -> list[np.ndarray]:
    """groups[n][i]: id of the length-(n+1) prefix of row i."""
    out = []
    for n in range(rgs.shape[1]):
        _, gid = np.unique(rgs[:, :n + 1], axis=0, return_inverse=True)
        out.append(gid.reshape(-1))
    return out


def flow_table(parts: np.ndarray, reward: np.ndarray, groups: list[np.ndarray], row: int) -> np.ndarray:
    """E_hat = -log F of the candidates along trajectory ``parts[row]``, shape (N-1, N).

    F is the backward dynamic-programming flow (a state's flow is the sum of
    its children's, terminal flow is the reward), scaled so the one-point
    state has flow 1.  Unused candidate slots are 0.
    """
    N = parts.shape[1]
    Z = reward.sum()
    out = np.zeros((N - 1, N))
    for n in range(1, N):
        sib = groups[n - 1] == groups[n - 1][row]
        f = np.bincount(parts[sib, n], weights=reward[sib], minlength=N) / Z
        kp = int(parts[row, :n].max()) + 1
        out[n - 1, :kp + 1] = -np.log(f[:kp + 1])
    return out


def _hat_tensor(tables: np.ndarray, batch: TrajectoryBatch) -> Tensor:
    hat = tables.reshape(-1, tables.shape[-1])[:, :batch.W]
    return Tensor(np.where(batch.mask, hat, 0.0))


_ORDER_CACHE: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def _order_relabel(N: int) -> tuple[np.ndarray, np.ndarray]:
    """(orders, idx) with idx[o, i] = partition whose labels read along orders[o] give row i."""
    if N not in _ORDER_CACHE:
        parts = partitions(N)
        index = {tuple(c): i for i, c in enumerate(parts)}
        orders = np.array(list(itertools.permutations(range(N))), dtype=np.int64)
        idx = np.empty((len(orders), len(parts)), dtype=np.int64)
        by_point = np.empty(N, dtype=np.int64)
        for a, o in enumerate(orders):
            for i, c in enumerate(parts):
                by_point[o] = c
                idx[a, i] = index[tuple(canonicalize(by_point))]
        _ORDER_CACHE[N] = (orders, idx)
    return _ORDER_CACHE[N]


def exact_flow_verifier(N: int, reward, rng: np.random.Generator, tol: float = 1e-10) -> VerifierReport:
    """Check the exact-flow construction: zero MC loss, order-free trajectory probability, reach ∝ reward.

    ``reward`` is either a callable on point-indexed canonical labels or an
    array aligned with :func:`partitions` ``(N)``.
    """
    if not 1 <= N <= MAX_VERIFY_N:
        raise EvalError(f"verifier supports 1 <= N <= {MAX_VERIFY_N}")
    parts = partitions(N)
    if callable(reward):
        r = np.array([float(reward(c)) for c in parts])
    else:
        r = np.asarray(reward, dtype=np.float64)
        if r.shape != (len(parts),):
            raise EvalError(f"reward must have {len(parts)} entries")
    if not np.all(np.isfinite(r)) or np.any(r <= 0):
        raise EvalError("reward must be positive and finite")
    if N == 1:
        return VerifierReport(1, 0.0, 0.0, 0.0, 0.0, tol, 1)
    groups = _prefix_groups(parts)
    dummy = np.zeros((N, 1))

    # (a) and (c): identity order, each partition reached by exactly one trajectory
    batch = TrajectoryBatch([(dummy, c) for c in parts])
    tables = np.stack([flow_table(parts, r, groups, i) for i in range(len(parts))])
    chosen, lse = flow_terms(_hat_tensor(tables, batch), batch)
    mc = per_episode(batch, ad.square(mc_residuals(chosen, lse, batch))).data
    logp = -per_episode(batch, chosen + lse).data
    reach_err = float(np.abs(np.exp(logp) - r / r.sum()).max())

    # (b): a random partition of the points, scored along every order
    target = int(rng.integers(len(parts)))
    orders, idx = _order_relabel(N)
    rows, tabs = [], []
    for a, o in enumerate(orders):
        r_o = r[idx[a]]
        row = int(np.nonzero(idx[a] == target)[0][0])
        rows.append(parts[row])
        tabs.append(flow_table(parts, r_o, groups, row))
    ob = TrajectoryBatch([(dummy, c) for c in rows])
    ch, ls = flow_terms(_hat_tensor(np.stack(tabs), ob), ob)
    order_logps = -per_episode(ob, ch + ls).data
    probs = np.exp(order_logps)
    return VerifierReport(N, float(mc.max()), float(probs.max() - probs.min()), reach_err,
                          sdpp_from_logprobs(order_logps), tol, len(orders))


# ---------------------------------------------------------------------------
# decoding-based evaluation and reports

def greedy_scores(params: ModelParams, episodes: Sequence, chunk: int = 64) -> list[tuple[float, float]]:
    """(NMI, ARI) of greedy decoding in each episode's stored order."""
    out = []
    for s in range(0, len(episodes), chunk):
        part = episodes[s:s + chunk]
        trajs = decode_many(params, [ep.points for ep in part], greedy=True)
        for ep, t in zip(part, trajs):
            pred = t.labels_by_point()
            out.append((nmi(ep.labels, pred), ari(ep.labels, pred)))
    return out


def avg_score_eval(params: ModelParams, episode, num_samples: int = 500, top_k: int = 100,
                   rng: np.random.Generator | None = None) -> tuple[float, float]:
    """Mean (NMI, ARI) over the ``top_k`` most probable distinct sampled assignments.

    Samples share the stored order, the one greedy decoding uses.  When fewer
    than ``top_k`` distinct assignments are drawn, all of them are averaged.
    """
    if not num_samples >= top_k >= 1:
        raise EvalError("need num_samples >= top_k >= 1")
    rng = np.random.default_rng() if rng is None else rng
    pts = np.asarray(episode.points, dtype=np.float64)
    trajs = decode_many(params, [pts] * num_samples, greedy=False, rng=rng)
    ranked = sorted(range(num_samples), key=lambda i: -trajs[i].logprob)
    seen, picked = set(), []
    for i in ranked:
        key = tuple(trajs[i].labels)
        if key not in seen:
            seen.add(key)
            picked.append(trajs[i].labels_by_point())
            if len(picked) == top_k:
                break
    scores = np.array([(nmi(episode.labels, c), ari(episode.labels, c)) for c in picked])
    return float(scores[:, 0].mean()), float(scores[:, 1].mean())


REPORT_COLUMNS = ("set_id", "nmi", "ari", "mc", "sdpp")


@dataclass
class MetricsReport:
    rows: list[dict]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for r in self.rows:
            for k, lo, hi in (("nmi", 0.0, 1.0), ("ari", -1.0, 1.0), ("mc", 0.0, math.inf), ("sdpp", 0.0, math.inf)):
                v = r.get(k)
                if v is not None and not (lo - 1e-12 <= v <= hi + 1e-12):
                    raise EvalError(f"set {r.get('set_id')}: {k}={v} outside [{lo}, {hi}]")

    def column(self, key: str) -> np.ndarray:
        return np.array([r[key] for r in self.rows if r.get(key) is not None], dtype=np.float64)

    def aggregates(self) -> dict:
        out = {}
        for k in REPORT_COLUMNS[1:]:
            col = self.column(k)
            if col.size:
                out[k] = {"mean": float(col.mean()), "std": float(col.std()), "median": float(np.median(col)),
                          "count": int(col.size)}
        return out

    def to_json(self, path) -> None:
        doc = {"aggregates": self.aggregates(), "meta": self.meta}
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(REPORT_COLUMNS)
            for r in self.rows:
                w.writerow([r["set_id"]] + ["" if r.get(k) is None else repr(float(r[k])) for k in REPORT_COLUMNS[1:]])


def _sdpp_task(args) -> list[float]:
    params, episodes, ids, seed, num_perms = args
    return [sdpp(params, ep, num_perms, np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(i,))))
            for ep, i in zip(episodes, ids)]


def evaluate_sets(params: ModelParams, episodes: Sequence, seed: int = 0, num_perms: int = 0,
                  greedy: bool = True, workers: int = 1) -> MetricsReport:
    """Per-set greedy NMI/ARI, MC loss and (when ``num_perms`` >= 2) SDPP.

    Set ``i`` draws its permutations from ``SeedSequence(seed, spawn_key=(i,))``,
    so results do not depend on ``workers``.
    """
    rows = [{"set_id": i} for i in range(len(episodes))]
    if greedy:
        for r, (a, b) in zip(rows, greedy_scores(params, episodes)):
            r["nmi"], r["ari"] = a, b
    p = as_weights(params)
    for s in range(0, len(episodes), 64):
        batch = TrajectoryBatch([(ep.points, ep.labels) for ep in episodes[s:s + 64]])
        for j, v in enumerate(batch_terms(p, batch).mc.data):
            rows[s + j]["mc"] = float(v)
    if num_perms >= 2:
        ids = list(range(len(episodes)))
        if workers > 1 and len(episodes) > 1:
            from concurrent.futures import ProcessPoolExecutor
            parts = [ids[k::workers] for k in range(workers)]
            with ProcessPoolExecutor(max_workers=workers) as pool:
                results = pool.map(_sdpp_task, [(params, [episodes[i] for i in part], part, seed, num_perms)
                                                for part in parts])
                for part, vals in zip(parts, results):
                    for i, v in zip(part, vals):
                        rows[i]["sdpp"] = v
        else:
            for i, v in zip(ids, _sdpp_task((params, episodes, ids, seed, num_perms))):
                rows[i]["sdpp"] = v
    return MetricsReport(rows, {"seed": seed, "num_sets": len(episodes), "num_perms": num_perms})


def write_ecdf(path, values) -> None:
    """Sorted values with their empirical cumulative fractions."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("value", "ecdf"))
        for i, x in enumerate(v, start=1):
            w.writerow((repr(float(x)), repr(i / len(v))))


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]
