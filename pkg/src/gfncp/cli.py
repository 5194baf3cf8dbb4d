"""Command-line entry point: ``gfncp <subcommand> [--flags]``.

Exit codes: 0 on success, 1 on a validation or runtime failure, 2 on a usage
error.  Every subcommand writes ``manifest.json`` into ``--out``.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .datagen import DataError, EpisodeListSource, dump_episodes, generate, load_episodes
from .evaluation import (EvalError, avg_score_eval, bell, evaluate_sets, exact_flow_verifier, partition_table,
                         write_ecdf)
from .flows import decode_many
from .model import ModelParams
from .profiles import PROFILE_NAMES, Profile, get_profile
from .trainer import (CheckpointError, TrainingError, load_checkpoint, read_config_file, train,
                      write_history)

TRAIN_KEYS = ("iterations", "batch_size", "beta", "delta", "lam", "lr_init", "lr_min", "objective",
              "eval_every", "patience", "select_key")


# ---------------------------------------------------------------------------
# shared plumbing

def _hash_inputs(paths) -> str:
    h = hashlib.sha256()
    for p in sorted(str(x) for x in paths if x):
        h.update(p.encode())
        fp = Path(p)
        if fp.is_file():
            h.update(fp.read_bytes())
        elif fp.is_dir():
            for f in sorted(fp.iterdir()):
                if f.is_file() and f.name != "manifest.json":
                    h.update(f.name.encode())
                    h.update(f.read_bytes())
    return h.hexdigest()


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n", encoding="utf-8")


def _jsonable(x):
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating,)):
        return float(x)
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(f"cannot serialise {type(x).__name__}")


def _resolve(args) -> Profile:
    """Profile defaults, then config file, then explicit flags."""
    prof = get_profile(args.profile)
    values = {}
    if getattr(args, "config", None):
        values.update(read_config_file(args.config))
        if "profile" in values:
            prof = get_profile(values.pop("profile"))
    for k in TRAIN_KEYS + ("width", "online_mode", "input_scale", "embeddings"):
        v = getattr(args, k, None)
        if v is not None:
            values[k] = v
    values["seed"] = args.seed
    return prof.override(values)


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _manifest(out: Path, args, prof: Profile | None, inputs, outputs, timings, extra=None) -> None:
    doc = {
        "command": args.command,
        "argv": args.argv,
        "seed": args.seed,
        "config": prof.resolved() if prof else None,
        "input_hash": _hash_inputs(inputs),
        "outputs": sorted(outputs),
        "timings": timings,
        "version": __version__,
    }
    if extra:
        doc.update(extra)
    _write_json(out / "manifest.json", doc)


def _test_episodes(args, prof: Profile):
    if getattr(args, "data", None):
        path = Path(args.data)
        path = path / "test.json" if path.is_dir() else path
        return load_episodes(path)[0], [path]
    return generate(prof.data.test_source(), prof.data.test_sets, args.seed), []


def _load_params(args) -> ModelParams:
    return load_checkpoint(args.checkpoint).params


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen_data(args) -> int:
    prof = _resolve(args)
    out = _out(args)
    t0 = time.perf_counter()
    tests = generate(prof.data.test_source(), prof.data.test_sets, args.seed)
    dump_episodes(out / "test.json", tests, args.seed, {"split": "test", **prof.resolved()["data"]})
    outputs = ["test.json", "manifest.json"]
    if prof.data.train_count:
        # training episodes continue the same per-index stream after the test block
        train_eps = generate(prof.data.train_source(), prof.data.train_count, args.seed, start=len(tests))
        dump_episodes(out / "train.json", train_eps, args.seed, {"split": "train", **prof.resolved()["data"]})
        outputs.append("train.json")
    _manifest(out, args, prof, [args.config], outputs, {"total_s": time.perf_counter() - t0})
    print(f"wrote {len(tests)} test episodes" + (f" and {prof.data.train_count} training episodes"
                                                   if prof.data.train_count else "") + f" to {out}")
    return 0


def cmd_train(args) -> int:
    prof = _resolve(args)
    out = _out(args)
    cfg = prof.train
    cfg.checkpoint_path = str(out / "checkpoint.bin")
    inputs = [args.config, args.data, args.resume]
    if args.data and (Path(args.data) / "train.json").exists():
        source = EpisodeListSource(load_episodes(Path(args.data) / "train.json")[0])
    else:
        source = prof.data.train_source()
    tests, _ = _test_episodes(args, prof)
    d_x = tests[0].points.shape[1]
    params = ModelParams.init(prof.model.encoder(d_x), args.seed)
    resume = load_checkpoint(args.resume, params.config) if args.resume else None
    t0 = time.perf_counter()
    held_out = tests[:min(len(tests), 20)]
    res = train(cfg, source, params, eval_episodes=held_out if cfg.eval_every else None, resume=resume)
    t_train = time.perf_counter() - t0
    write_history(out / "history.csv", res.history)
    rep = evaluate_sets(res.params, tests, seed=args.seed)
    rep.meta.update({"profile": prof.name, "objective": cfg.objective})
    rep.to_json(out / "metrics.json")
    rep.to_csv(out / "metrics.csv")
    if res.evals:
        _write_json(out / "evals.json", res.evals)
    _manifest(out, args, prof, inputs,
              ["checkpoint.bin", "history.csv", "metrics.json", "metrics.csv", "manifest.json"],
              {"train_s": t_train, "total_s": time.perf_counter() - t0})
    agg = rep.aggregates()
    print(f"trained {len(res.history)} iterations in {t_train:.1f}s; "
          f"test NMI {agg['nmi']['mean']:.4f} ARI {agg['ari']['mean']:.4f} MC {agg['mc']['mean']:.4f}")
    return 0


def cmd_eval(args) -> int:
    prof = _resolve(args)
    out = _out(args)
    params = _load_params(args)
    tests, inputs = _test_episodes(args, prof)
    t0 = time.perf_counter()
    rep = evaluate_sets(params, tests, seed=args.seed, num_perms=args.num_perms, workers=args.workers)
    if args.avg_samples:
        for i, ep in enumerate(tests):
            rng = np.random.default_rng(np.random.SeedSequence(args.seed, spawn_key=(i,)))
            a, b = avg_score_eval(params, ep, args.avg_samples, args.avg_top, rng)
            rep.rows[i]["avg_nmi"], rep.rows[i]["avg_ari"] = a, b
        rep.meta["avg_score"] = {"num_samples": args.avg_samples, "top_k": args.avg_top,
                                 "nmi": float(np.mean([r["avg_nmi"] for r in rep.rows])),
                                 "ari": float(np.mean([r["avg_ari"] for r in rep.rows]))}
    rep.to_json(out / "metrics.json")
    rep.to_csv(out / "metrics.csv")
    _manifest(out, args, prof, inputs + [args.checkpoint], ["metrics.json", "metrics.csv", "manifest.json"],
              {"total_s": time.perf_counter() - t0})
    agg = rep.aggregates()
    print(f"NMI {agg['nmi']['mean']:.4f} ± {agg['nmi']['std']:.4f}  ARI {agg['ari']['mean']:.4f} ± "
          f"{agg['ari']['std']:.4f}  MC {agg['mc']['mean']:.4f}")
    return 0


def cmd_sample(args) -> int:
    prof = _resolve(args)
    out = _out(args)
    params = _load_params(args)
    tests, inputs = _test_episodes(args, prof)
    tests = tests[:args.count]
    rng = np.random.default_rng(args.seed)
    rows = []
    for i, ep in enumerate(tests):
        if args.samples:
            trajs = decode_many(params, [ep.points] * args.samples, greedy=False, rng=rng)
        else:
            trajs = decode_many(params, [ep.points], greedy=True)
        rows.append({"set_id": i, "assignments": [t.labels_by_point().tolist() for t in trajs],
                     "logprobs": [t.logprob for t in trajs]})
    _write_json(out / "samples.json", rows)
    _manifest(out, args, prof, inputs + [args.checkpoint], ["samples.json", "manifest.json"], {})
    print(f"wrote assignments for {len(rows)} sets to {out / 'samples.json'}")
    return 0


def cmd_consistency(args) -> int:
    prof = _resolve(args)
    out = _out(args)
    params = _load_params(args)
    tests, inputs = _test_episodes(args, prof)
    tests = tests[:args.sets] if args.sets else tests
    t0 = time.perf_counter()
    rep = evaluate_sets(params, tests, seed=args.seed, num_perms=args.num_perms, greedy=False,
                        workers=args.workers)
    rep.to_json(out / "metrics.json")
    rep.to_csv(out / "metrics.csv")
    write_ecdf(out / "ecdf.csv", rep.column("sdpp"))
    _manifest(out, args, prof, inputs + [args.checkpoint],
              ["metrics.json", "metrics.csv", "ecdf.csv", "manifest.json"], {"total_s": time.perf_counter() - t0})
    agg = rep.aggregates()
    print(f"SDPP median {agg['sdpp']['median']:.4g} mean {agg['sdpp']['mean']:.4g}; MC mean {agg['mc']['mean']:.4g}")
    return 0


def cmd_oracle_compare(args) -> int:
    prof = _resolve(args)
    out = _out(args)
    params = _load_params(args)
    tests, inputs = _test_episodes(args, prof)
    if any(ep.N > 10 for ep in tests):
        raise EvalError("oracle comparison needs point sets with N <= 10")
    tvs, rows = [], []
    for i, ep in enumerate(tests):
        tab = partition_table(params, ep.points, prof.data.alpha, prof.data.sigma)
        tvs.append(tab.tv())
        rows.append({"set_id": i, "tv": tab.tv(), "exact_sum": float(tab.exact.sum()),
                     "model_sum": float(tab.model_raw.sum())})
    _write_json(out / "metrics.json", {"mean_tv": float(np.mean(tvs)), "sets": rows})
    _manifest(out, args, prof, inputs + [args.checkpoint], ["metrics.json", "manifest.json"], {})
    print(f"mean total variation {np.mean(tvs):.4f} over {len(tvs)} sets")
    return 0


def cmd_verify(args) -> int:
    out = _out(args)
    rng = np.random.default_rng(args.seed)
    t0 = time.perf_counter()
    sizes = [args.n] if args.n else list(range(2, 7))
    results, ok = [], True
    for N in sizes:
        for k in range(args.rewards):
            r = np.exp(rng.normal(0.0, 2.0, bell(N)))
            rep = exact_flow_verifier(N, r, rng, tol=args.tol)
            ok &= rep.passed
            results.append({"N": N, "reward": k, "mc_max": rep.mc_max, "order_spread": rep.order_spread,
                            "reach_error": rep.reach_error, "sdpp": rep.sdpp, "passed": rep.passed})
    _write_json(out / "metrics.json", {"passed": ok, "tol": args.tol, "cases": results})
    _manifest(out, args, None, [], ["metrics.json", "manifest.json"], {"total_s": time.perf_counter() - t0})
    worst = max(max(r["mc_max"], r["order_spread"], r["reach_error"]) for r in results)
    print(f"{'PASS' if ok else 'FAIL'}: {len(results)} cases, worst deviation {worst:.3g} (tol {args.tol:g})")
    return 0 if ok else 1


def cmd_grad_check(args) -> int:
    from .gradcheck import loss_grad_errors
    out = _out(args)
    t0 = time.perf_counter()
    rows = loss_grad_errors(args.episodes, args.n, args.seed)
    worst = {k: max(r[k] for r in rows) for k in rows[0] if k != "episode"}
    ok = all(v <= args.tol for v in worst.values())
    _write_json(out / "metrics.json", {"passed": ok, "tol": args.tol, "worst": worst, "episodes": rows})
    _manifest(out, args, None, [], ["metrics.json", "manifest.json"], {"total_s": time.perf_counter() - t0})
    for k, v in worst.items():
        print(f"{k:10s} worst relative error {v:.3g}")
    print("PASS" if ok else "FAIL")
    return 0 if ok else 1


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gfncp", description="Amortized clustering with order-consistent flows.")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, profile=True, workers=False):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", default="out")
        p.add_argument("-v", "--verbose", action="store_true")
        if profile:
            p.add_argument("--profile", default="mog-desk", choices=PROFILE_NAMES)
            p.add_argument("--config", help="key = value settings file; flags override it")
            p.add_argument("--embeddings", help="embedding file for the embedding profile")
        if workers:
            p.add_argument("--workers", type=int, default=os.cpu_count() or 1)

    p = sub.add_parser("gen-data", help="write test (and optionally training) episodes")
    common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model")
    common(p)
    p.add_argument("--data", help="directory from gen-data (train.json / test.json)")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--iterations", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--beta", type=float)
    p.add_argument("--delta", type=float)
    p.add_argument("--lam", type=float)
    p.add_argument("--lr-init", dest="lr_init", type=float)
    p.add_argument("--lr-min", dest="lr_min", type=float)
    p.add_argument("--objective", choices=("gfncp", "ncp-baseline"))
    p.add_argument("--eval-every", dest="eval_every", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--select-key", dest="select_key", choices=("total", "mc"))
    p.add_argument("--width", type=int, help="hidden width of the reduced encoder (0 = full size)")
    p.add_argument("--online-mode", dest="online_mode", action="store_const", const=True)
    p.add_argument("--input-scale", dest="input_scale", type=float, help="factor applied to points before encoding")
    p.set_defaults(func=cmd_train)

    for name, func, helptext in (("eval", cmd_eval, "greedy NMI/ARI and MC on test sets"),
                                 ("sample", cmd_sample, "decode assignments"),
                                 ("consistency", cmd_consistency, "SDPP and MC sweep with ECDF export"),
                                 ("oracle-compare", cmd_oracle_compare, "total variation to the exact posterior")):
        p = sub.add_parser(name, help=helptext)
        common(p, workers=name in ("eval", "consistency"))
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--data", help="test.json or a gen-data directory")
        p.set_defaults(func=func)
        if name == "eval":
            p.add_argument("--num-perms", dest="num_perms", type=int, default=0)
            p.add_argument("--avg-samples", dest="avg_samples", type=int, default=0)
            p.add_argument("--avg-top", dest="avg_top", type=int, default=100)
        elif name == "sample":
            p.add_argument("--count", type=int, default=10)
            p.add_argument("--samples", type=int, default=0, help="stochastic samples per set (0 = greedy)")
        elif name == "consistency":
            p.add_argument("--num-perms", dest="num_perms", type=int, default=100)
            p.add_argument("--sets", type=int, default=100)

    p = sub.add_parser("verify", help="exact-flow verifier suite")
    common(p, profile=False)
    p.add_argument("--n", type=int, default=0, help="set size (default: 2..6)")
    p.add_argument("--rewards", type=int, default=20)
    p.add_argument("--tol", type=float, default=1e-10)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("grad-check", help="finite-difference check of every loss gradient")
    common(p, profile=False)
    p.add_argument("--episodes", type=int, default=20)
    p.add_argument("--n", type=int, default=5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_grad_check)
    return ap


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, DataError, EvalError, CheckpointError, TrainingError, OSError, KeyError) as e:
        print(f"gfncp {args.command}: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
