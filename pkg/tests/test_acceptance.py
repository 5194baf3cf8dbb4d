"""Acceptance criteria 1-10, each reported as one PASS/FAIL line in the terminal summary.

Trained desk models are shared between criteria within a session.  Set
``GFNCP_ACCEPT_CACHE`` to a directory to keep them across sessions too.
"""
import dataclasses
import os
import pickle
import time
from pathlib import Path

import numpy as np
import pytest

from gfncp.datagen import (CRPConfig, EmbeddingStore, crp_sample, generate, load_embeddings,
                           save_embeddings)
from gfncp.evaluation import (avg_score_eval, bell, evaluate_sets, exact_flow_verifier, greedy_scores,
                              mc_metric, partition_table)
from gfncp.gradcheck import loss_grad_errors
from gfncp.model import ClusterState, ModelParams, canonicalize, energy
from gfncp.profiles import get_profile
from gfncp.trainer import load_checkpoint, save_checkpoint, train

pytestmark = pytest.mark.acceptance

TEST_SEED = 1000      # test sets are shared by every run
HELD_OUT = 50         # sets tracked during training for the mc curve
SEEDS = (0, 1, 2)
_RUNS: dict = {}


def desk_tests():
    prof = get_profile("mog-desk")
    if "tests" not in _RUNS:
        _RUNS["tests"] = generate(prof.data.test_source(), prof.data.test_sets, TEST_SEED)
    return _RUNS["tests"]


def desk_run(seed: int, objective: str = "gfncp", online: bool = False) -> dict:
    """Train (or fetch) one desk-profile model: final params, eval curve, CPU seconds."""
    key = (seed, objective, online)
    if key in _RUNS:
        return _RUNS[key]
    cache = os.environ.get("GFNCP_ACCEPT_CACHE")
    path = Path(cache) / f"desk-{seed}-{objective}-{int(online)}.pkl" if cache else None
    if path is not None and path.exists():
        run = pickle.loads(path.read_bytes())
    else:
        prof = get_profile("mog-desk").override(
            {"seed": seed, "objective": objective, "online_mode": online, "eval_every": 50})
        params = ModelParams.init(prof.model.encoder(prof.data.d_x), seed)
        t0 = time.process_time()
        res = train(prof.train, prof.data.train_source(), params, eval_episodes=desk_tests()[:HELD_OUT])
        run = {"params": res.params, "evals": res.evals, "cpu": time.process_time() - t0}
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_bytes(pickle.dumps(run))
    _RUNS[key] = run
    return run


def greedy_means(params, episodes) -> tuple[float, float]:
    s = np.array(greedy_scores(params, episodes))
    return float(s[:, 0].mean()), float(s[:, 1].mean())


def cached_scores(seed: int, objective: str = "gfncp", online: bool = False):
    key = ("scores", seed, objective, online)
    if key not in _RUNS:
        params = desk_run(seed, objective, online)["params"]
        t0 = time.process_time()
        _RUNS[key] = (*greedy_means(params, desk_tests()), time.process_time() - t0)
    return _RUNS[key]


# ---------------------------------------------------------------------------

def test_c01_gradient_fidelity(criterion):
    t0 = time.perf_counter()
    rows = loss_grad_errors(episodes=20, n=5, seed=0)
    elapsed = time.perf_counter() - t0
    worst = {k: max(r[k] for r in rows) for k in ("mc", "cd", "reg", "nll")}
    ok = len(rows) == 20 and all(v <= 1e-4 for v in worst.values()) and elapsed < 60
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    assert criterion(1, ok, f"worst relative gradient error {detail} (tol 1e-4); {elapsed:.1f}s"), worst


def _energy(params, x, labels, order):
    return energy(params, x, ClusterState.from_labels(params, x, labels, order)).item()


def test_c02_energy_symmetry(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    params = ModelParams.init(get_profile("mog-desk").model.encoder(2), 11)
    worst = 0.0
    for case in range(200):
        N = int(rng.integers(4, 30))
        x = rng.normal(size=(N, 2)) * 10
        n = int(rng.integers(2, N + 1))
        order = rng.permutation(N)
        labels = canonicalize(rng.integers(0, max(1, n // 2), size=n))
        base = _energy(params, x, labels, order)
        kind = case % 3
        if kind == 0:
            # shuffle the assigned points; labels travel with their points
            p = rng.permutation(n)
            o2 = np.concatenate([order[:n][p], order[n:]])
            l2 = canonicalize(labels[p])
        elif kind == 1:
            # visit clusters in a random order, which renames them
            rank = rng.permutation(labels.max() + 1)
            p = np.argsort(rank[labels], kind="stable")
            o2 = np.concatenate([order[:n][p], order[n:]])
            l2 = canonicalize(labels[p])
        else:
            o2 = np.concatenate([order[:n], rng.permutation(order[n:])])
            l2 = labels
        worst = max(worst, abs(_energy(params, x, l2, o2) - base))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-9 and elapsed < 60
    assert criterion(2, ok, f"200 permutation cases, max |dE| {worst:.1e} (tol 1e-9); {elapsed:.1f}s"), worst


def test_c03_exact_flow_verifier(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    worst = {"mc": 0.0, "orders": 0.0, "reach": 0.0}
    ok = True
    for N in range(2, 7):
        for _ in range(20):
            reward = np.exp(rng.normal(0.0, 2.0, bell(N)))
            rep = exact_flow_verifier(N, reward, rng, tol=1e-10)
            ok &= rep.passed
            worst["mc"] = max(worst["mc"], rep.mc_max)
            worst["orders"] = max(worst["orders"], rep.order_spread)
            worst["reach"] = max(worst["reach"], rep.reach_error)
    elapsed = time.perf_counter() - t0
    ok = ok and max(worst.values()) <= 1e-10 and elapsed < 300
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    assert criterion(3, ok, f"N=2..6 x 20 rewards, worst {detail} (tol 1e-10); {elapsed:.1f}s"), worst


def test_c04_desk_training(criterion):
    nmis, aris, cpu = [], [], 0.0
    for s in SEEDS:
        a, b, t_eval = cached_scores(s)
        nmis.append(a)
        aris.append(b)
        cpu += desk_run(s)["cpu"] + t_eval
    nmi, ari = float(np.mean(nmis)), float(np.mean(aris))
    ok = nmi >= 0.85 and ari >= 0.80 and cpu < 1800
    per_seed = " ".join(f"[{a:.3f}/{b:.3f}]" for a, b in zip(nmis, aris))
    assert criterion(4, ok, f"NMI {nmi:.4f} (>=0.85) ARI {ari:.4f} (>=0.80) over 200 sets x 3 seeds "
                            f"{per_seed}; {cpu / 60:.1f} CPU min"), (nmis, aris)


def test_c05_consistency_vs_baseline(criterion):
    gf, ncp = desk_run(0), desk_run(0, "ncp-baseline")
    sets = desk_tests()[:100]
    t0 = time.process_time()
    med = {}
    for name, run in (("gfncp", gf), ("ncp", ncp)):
        rep = evaluate_sets(run["params"], sets, seed=5, num_perms=100, greedy=False)
        med[name] = float(np.median(rep.column("sdpp")))
    cpu = gf["cpu"] + ncp["cpu"] + time.process_time() - t0
    first, last = gf["evals"][0], gf["evals"][-1]
    final_mc = mc_metric(gf["params"], desk_tests()[:HELD_OUT])
    ratio = final_mc / first["mc"]
    ok = (first["iteration"] == 50 and np.isclose(final_mc, last["mc"], rtol=1e-9)
          and med["gfncp"] < med["ncp"] and ratio < 0.10 and cpu < 3600)
    assert criterion(5, ok, f"median SDPP gfncp {med['gfncp']:.4g} vs ncp {med['ncp']:.4g}; mc_metric "
                            f"{first['mc']:.2f} -> {final_mc:.2f} (ratio {ratio:.3f}, <0.10); "
                            f"{cpu / 60:.1f} CPU min"), (med, ratio)


def test_c06_oracle_agreement(criterion):
    prof = get_profile("mog-tiny").override({"seed": 0})
    t0 = time.process_time()
    res = train(prof.train, prof.data.train_source(), ModelParams.init(prof.model.encoder(2), 0))
    tests = generate(prof.data.test_source(), 50, TEST_SEED)
    tvs, sum_err = [], 0.0
    for ep in tests:
        tab = partition_table(res.params, ep.points, prof.data.alpha, prof.data.sigma)
        tvs.append(tab.tv())
        sum_err = max(sum_err, abs(tab.exact.sum() - 1), abs(tab.model_raw.sum() - 1))
    cpu = time.process_time() - t0
    tv = float(np.mean(tvs))
    ok = len(tests) == 50 and tests[0].N == 6 and tv <= 0.25 and sum_err <= 1e-10 and cpu < 1200
    assert criterion(6, ok, f"mean TV {tv:.4f} (<=0.25) over 50 sets; column sum error {sum_err:.1e}; "
                            f"{cpu / 60:.1f} CPU min"), tv


def test_c07_crp_statistics(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    cfg = CRPConfig(alpha=1.0, n_min=50, n_max=50)
    ks = np.array([crp_sample(cfg, 50, rng).max() + 1 for _ in range(100_000)])
    h50 = float(np.sum(1.0 / np.arange(1, 51)))
    rel = abs(ks.mean() - h50) / h50
    fixed = CRPConfig(alpha=1.0, n_min=50, n_max=50, fixed_k=6)
    fk = {int(crp_sample(fixed, 50, rng).max() + 1) for _ in range(1000)}
    elapsed = time.perf_counter() - t0
    ok = rel <= 0.02 and fk == {6} and elapsed < 60
    assert criterion(7, ok, f"E[K] {ks.mean():.4f} vs H_50 {h50:.4f} (rel {rel:.2%}, <=2%); fixed-K draws "
                            f"{sorted(fk)}; {elapsed:.1f}s"), (rel, fk)


def test_c08_online_mode(criterion):
    rng = np.random.default_rng(8)
    cfg = get_profile("mog-desk").model.encoder(2)
    params = ModelParams.init(dataclasses.replace(cfg, online_mode=True), 4)
    exact = True
    for _ in range(20):
        N = int(rng.integers(3, 25))
        x = rng.normal(size=(N, 2)) * 10
        full = canonicalize(rng.integers(0, 4, size=N))
        for n in range(1, N):
            moved = x.copy()
            moved[n:] += rng.normal(size=(N - n, 2)) * 50
            lab = canonicalize(full[:n])
            exact &= _energy(params, x, lab, None) == _energy(params, moved, lab, None)
    primary, _, _ = cached_scores(0)
    online, _, _ = cached_scores(0, online=True)
    ok = bool(exact) and primary - online <= 0.05
    assert criterion(8, ok, f"prefix energies invariant to unassigned points: {bool(exact)}; NMI online "
                            f"{online:.4f} vs primary {primary:.4f} (gap {primary - online:+.4f}, <=0.05)"), \
        (exact, primary, online)


def test_c09_determinism_and_persistence(criterion, tmp_path):
    prof = get_profile("mog-desk").override({"seed": 9, "iterations": 12, "batch_size": 8})
    src = prof.data.train_source()

    def fresh():
        return ModelParams.init(prof.model.encoder(2), 9)

    def same(a, b):
        return all(np.array_equal(a.arrays[k], b.arrays[k]) for k in a.names())

    a, b = train(prof.train, src, fresh()), train(prof.train, src, fresh())
    repro = same(a.params, b.params) and a.history == b.history
    half = train(prof.train, src, fresh(), stop_at=5)
    save_checkpoint(tmp_path / "half.bin", half.checkpoint)
    rest = train(prof.train, src, fresh(), resume=load_checkpoint(tmp_path / "half.bin", fresh().config))
    resumed = same(rest.params, a.params) and half.history + rest.history == a.history

    rng = np.random.default_rng(9)
    store = EmbeddingStore([f"img{i}" for i in range(40)], rng.normal(size=(40, 16)) * 10 ** rng.uniform(-8, 8),
                           [None if i % 7 == 0 else f"c{i % 3}" for i in range(40)])
    save_embeddings(tmp_path / "emb.tsv", store)
    back = load_embeddings(tmp_path / "emb.tsv")
    lossless = (back.ids == store.ids and back.tags == store.tags
                and np.array_equal(back.vectors, store.vectors))
    ok = repro and resumed and lossless
    assert criterion(9, ok, f"seeded reruns bit-exact: {repro}; resume bit-exact: {resumed}; "
                            f"embedding round trip lossless: {lossless}"), (repro, resumed, lossless)


def test_c10_average_score(criterion):
    params = desk_run(0)["params"]
    sets = desk_tests()[:50]
    greedy, _ = greedy_means(params, sets)
    avg = [avg_score_eval(params, ep, 500, 100, np.random.default_rng(np.random.SeedSequence(10, spawn_key=(i,))))[0]
           for i, ep in enumerate(sets)]
    avg_nmi = float(np.mean(avg))
    ok = abs(avg_nmi - greedy) <= 0.05
    assert criterion(10, ok, f"top-100-of-500 NMI {avg_nmi:.4f} vs greedy {greedy:.4f} "
                             f"(gap {avg_nmi - greedy:+.4f}, |gap|<=0.05) on 50 sets"), (avg_nmi, greedy)
