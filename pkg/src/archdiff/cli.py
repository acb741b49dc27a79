"""archdiff command-line entry point.

Exit codes: 0 success, 2 usage or config error, 3 numeric failure,
4 capacity error. The seed comes from ``--seed``, then the config file,
then ``ARCHDIFF_SEED``, then 0.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from archdiff import archspace, oracle
from archdiff import predictor as pred_mod
from archdiff import scorenet as score_mod
from archdiff.archspace import Architecture, discretize, enumerate_space, get_space, random_arch, sample_metrics
from archdiff.bo import BoContext, bo_loop
from archdiff.config import RunConfig
from archdiff.errors import ArchDiffError, UsageError
from archdiff.numerics import Rng
from archdiff.sampler import guided_sample_batch, sample_batch
from archdiff.sde import VeSde

log = logging.getLogger("archdiff")

# stream ids keep the subcommands' random draws apart
STREAM_DATA, STREAM_TRAIN, STREAM_SAMPLE, STREAM_BO = 1, 2, 3, 4


def _out_dir(path: str) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _run_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config)
    cfg.apply_sets(args.set)
    if getattr(args, "space", None):
        cfg.space = args.space
    if args.seed is not None:
        cfg.seed = args.seed
    if args.threads is not None:
        cfg.update({"threads": args.threads})
    if args.preset is not None:
        cfg.update({"preset": args.preset})
    cfg.resolve_seed()
    return cfg


def _require_space(cfg: RunConfig):
    if not cfg.space:
        raise UsageError("no search space given (use --space or set 'space' in the config)")
    return get_space(cfg.space)


def _fmt(x: float) -> str:
    return repr(float(x))


def _read_keys(path: str | None) -> set[str] | None:
    """Keys from a file of canonical keys or of architecture JSONL records."""
    if path is None:
        return None
    p = Path(path)
    if not p.exists():
        raise UsageError(f"train-keys file not found: {p}")
    keys = set()
    for line in p.read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        keys.add(archspace.from_json(line).key if line.startswith("{") else line)
    return keys


def _write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _load_table(path: str | None, space) -> oracle.BenchmarkTable:
    if path is None:
        return oracle.build_table(space)
    table = oracle.BenchmarkTable.load(path)
    if table.space != space.name:
        raise UsageError(f"table is for space {table.space}, not {space.name}")
    return table


def _training_archs(space, args, rng: Rng) -> list[Architecture]:
    if args.archs:
        archs = archspace.read_jsonl(args.archs)
        if any(a.space.name != space.name for a in archs):
            raise UsageError("architecture file belongs to a different space")
    elif space.is_template:
        archs = list(enumerate_space(space))
    else:
        archs = [random_arch(space, rng.child(0, i)) for i in range(args.n_archs)]
    archs = [a for a in archs if archspace.is_valid(a)]
    if not 0 < args.fraction <= 1:
        raise UsageError("--fraction must lie in (0, 1]")
    if args.fraction < 1:
        n = max(1, round(args.fraction * len(archs)))
        idx = sorted(rng.child(1).permutation(len(archs))[:n].tolist())
        archs = [archs[i] for i in idx]
    if not archs:
        raise UsageError("no valid training architectures")
    return archs


# subcommands -----------------------------------------------------------------

def cmd_train_score(args) -> int:
    if args.steps is not None:
        args.set = (args.set or []) + [f"scorenet.steps={args.steps}"]
    if args.no_pos_emb:
        args.set = (args.set or []) + ["scorenet.use_pos_emb=false"]
    cfg = _run_config(args)
    space = _require_space(cfg)
    out = _out_dir(args.out)
    rng = Rng(cfg.seed, STREAM_DATA)
    archs = _training_archs(space, args, rng)
    sn_cfg = cfg.section("scorenet")
    sde = VeSde(cfg.section("sde"))
    res = score_mod.train(space, archs, sn_cfg, sde, Rng(cfg.seed, STREAM_TRAIN))
    score_mod.save(out / "score.ckpt", res.model)
    _write_csv(out / "loss.csv", ["step", "loss"], ((i + 1, _fmt(l)) for i, l in enumerate(res.losses)))
    archspace.write_jsonl(out / "train_archs.jsonl", archs)
    cfg.write_resolved(out)
    print(f"trained on {len(archs)} architectures for {len(res.losses)} steps; "
          f"final loss {res.losses[-1]:.4f}; {res.skipped_steps} skipped steps")
    return 0


def _population(args, space, cfg) -> list[tuple[Architecture, float]]:
    if args.population:
        pop = []
        for line in Path(args.population).read_text().splitlines():
            if line.strip():
                d = json.loads(line)
                pop.append((archspace.from_dict(d["arch"]), float(d["y"])))
        if any(a.space.name != space.name for a, _ in pop):
            raise UsageError("population belongs to a different space")
        return pop
    table = _load_table(args.table, space)
    pop = [(a, table.acc(a.key)) for a in enumerate_space(space)]
    if args.fraction < 1:
        n = max(2, round(args.fraction * len(pop)))
        idx = sorted(Rng(cfg.seed, STREAM_DATA).permutation(len(pop))[:n].tolist())
        pop = [pop[i] for i in idx]
    return pop


def cmd_train_predictor(args) -> int:
    if args.steps is not None:
        args.set = (args.set or []) + [f"predictor.steps={args.steps}"]
    cfg = _run_config(args)
    space = _require_space(cfg)
    out = _out_dir(args.out)
    pop = _population(args, space, cfg)
    p_cfg = cfg.section("predictor")
    sde = VeSde(cfg.section("sde"))
    model = pred_mod.train_predictor(pop, p_cfg, space, args.noise_aware, sde, Rng(cfg.seed, STREAM_TRAIN),
                                     gaussian=args.gaussian)
    pred_mod.save(out / "predictor.ckpt", model)
    y = np.array([v for _, v in pop])
    y_hat = model.predict_archs([a for a, _ in pop])
    report = {"population": len(pop), "train_mse": float(np.mean((y - y_hat) ** 2)),
              "noise_aware": args.noise_aware, "sigma": model.sigma}
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    cfg.write_resolved(out)
    print(f"trained predictor on {len(pop)} architectures; train mse {report['train_mse']:.3g}")
    return 0


def cmd_generate(args) -> int:
    sets = list(args.set or [])
    if args.k is not None:
        sets.append(f"guidance.k={args.k}")
    if args.mode is not None:
        sets.append(f"guidance.mode={args.mode}")
    if args.target is not None:
        sets.append(f"guidance.target={args.target}")
    if args.sigma is not None:
        sets.append(f"guidance.sigma={args.sigma}")
    if args.steps is not None:
        sets.append(f"sampler.num_steps={args.steps}")
    if args.corrector:
        sets.append("sampler.corrector=true")
    args.set = sets
    net = score_mod.load(args.ckpt)
    cfg = _run_config(args)
    if cfg.space and cfg.space != net.space.name:
        raise UsageError(f"checkpoint is for space {net.space.name}, not {cfg.space}")
    cfg.space = net.space.name
    space = net.space
    out = _out_dir(args.out)
    guides = [pred_mod.load(p) for p in args.guide or ()]
    for g in guides:
        if g.space.name != space.name:
            raise UsageError(f"guide predictor is for space {g.space.name}, checkpoint for {space.name}")
    s_cfg = cfg.section("sampler")
    g_cfg = cfg.section("guidance")
    rng = Rng(cfg.seed, STREAM_SAMPLE)
    if guides:
        samples = guided_sample_batch(net, guides, g_cfg, space, s_cfg, rng, n_samples=args.n)
    else:
        samples = sample_batch(net, space, s_cfg, rng, n_samples=args.n)
    archs = [discretize(s, space, args.discretize) for s in samples]
    pred_y = guides[0].predict_archs(archs) if guides else None

    with open(out / "samples.jsonl", "w") as fh:
        for a in archs:
            fh.write(archspace.to_json(a) + "\n")
    with open(out / "continuous.jsonl", "w") as fh:
        for i, s in enumerate(samples):
            fh.write(json.dumps({"chain": i, "t": s.t, "v": s.v.tolist(), "e": s.e.tolist()}) + "\n")
    k = g_cfg.k if guides else 0.0
    with open(out / "samples.meta.jsonl", "w") as fh:
        for i in range(len(archs)):
            fh.write(json.dumps({"chain": i, "k": k, "pred_y": None if pred_y is None else float(pred_y[i])}) + "\n")

    report = {"n": len(archs), "discretize": args.discretize, "guided": bool(guides), "k": k,
              "metrics": sample_metrics(archs, _read_keys(args.train_keys))}
    if args.table:
        table = _load_table(args.table, space)
        top = set(oracle.top_quantile(table, 0.1))
        accs = [table.acc(a.key) for a in archs if a.key in table]
        report["oracle"] = {
            "mean_acc": float(np.mean(accs)) if accs else None,
            "max_acc": float(np.max(accs)) if accs else None,
            "top_decile_fraction": sum(a.key in top for a in archs) / len(archs),
        }
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    cfg.write_resolved(out)
    m = report["metrics"]
    print(f"{m['total']} samples, validity {m['validity']:.2f}%")
    return 0


def _parse_seeds(text: str) -> list[int]:
    seeds: list[int] = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part[1:]:
            lo, hi = part.split("-", 1)
            seeds.extend(range(int(lo), int(hi) + 1))
        else:
            seeds.append(int(part))
    if not seeds:
        raise UsageError("--seeds is empty")
    return seeds


def cmd_bo(args) -> int:
    sets = list(args.set or [])
    for flag, key in (("strategy", "strategy"), ("acq", "acq"), ("budget", "budget"), ("n0", "n0"),
                      ("candidates", "candidates"), ("ensemble_size", "ensemble_size")):
        val = getattr(args, flag)
        if val is not None:
            sets.append(f"bo.{key}={val}")
    args.set = sets
    try:
        seeds = _parse_seeds(args.seeds)
    except ValueError:
        raise UsageError(f"cannot parse --seeds {args.seeds!r}") from None
    cfg = _run_config(args)
    net = score_mod.load(args.ckpt) if args.ckpt else None
    if net is not None:
        if cfg.space and cfg.space != net.space.name:
            raise UsageError(f"checkpoint is for space {net.space.name}, not {cfg.space}")
        cfg.space = net.space.name
    space = _require_space(cfg)
    b_cfg = cfg.section("bo")
    if b_cfg.strategy == "guided" and net is None:
        raise UsageError("the guided strategy needs --ckpt with a trained score network")
    table = _load_table(args.table, space)
    out = _out_dir(args.out)
    opt_key = oracle.argmax_key(table)
    sde = net.sde if net is not None else VeSde(cfg.section("sde"))
    ctx = BoContext(space, cfg.section("predictor"), sde, net)

    def h(a: Architecture) -> float:
        if a.key not in table:
            raise UsageError(f"architecture {a.key} is not in the table")
        return table.acc(a.key)

    curves = []
    per_seed = []
    for seed in seeds:
        res = bo_loop(space, h, b_cfg, Rng(seed, STREAM_BO), ctx)
        _write_csv(out / f"history_seed{seed}.csv", ["iteration", "chosen_key", "y", "best_so_far", "wallclock_ms"],
                   ((r.iteration, r.chosen_key, _fmt(r.y), _fmt(r.best_so_far), f"{r.wallclock_ms:.1f}")
                    for r in res.history))
        curves.append([r.best_so_far for r in res.history])
        per_seed.append({"seed": seed, "best_key": res.best.key, "best_y": res.best_y,
                         "evaluations_to_optimum": res.evaluations_to(opt_key)})
        hit = per_seed[-1]["evaluations_to_optimum"]
        print(f"seed {seed}: best {res.best_y:.6f}, optimum " + (f"found at evaluation {hit}" if hit else "not found"))
    med = np.median(np.array(curves), axis=0)
    _write_csv(out / "summary.csv", ["iteration", "median_best_so_far"],
               ((i + 1, _fmt(m)) for i, m in enumerate(med)))
    found = [s["evaluations_to_optimum"] for s in per_seed]
    summary = {"strategy": b_cfg.strategy, "acq": b_cfg.acq, "optimum_key": opt_key,
               "optimum_acc": table.acc(opt_key), "seeds": per_seed,
               "found": sum(f is not None for f in found),
               # seeds that miss count as budget + 1
               "median_evaluations_to_optimum": float(np.median([f or b_cfg.budget + 1 for f in found]))}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    cfg.write_resolved(out)
    return 0


def cmd_oracle(args) -> int:
    if args.action != "build-table":
        raise UsageError(f"unknown oracle action {args.action!r}")
    cfg = _run_config(args)
    space = _require_space(cfg)
    table = oracle.build_table(space)
    path = Path(args.out or f"{space.name}.table.jsonl")
    path.parent.mkdir(parents=True, exist_ok=True)
    table.save(path)
    print(f"{len(table)} entries")
    return 0


def cmd_eval_metrics(args) -> int:
    archs = archspace.read_jsonl(args.samples)
    if not archs:
        raise UsageError("sample file is empty")
    report = {"metrics": sample_metrics(archs, _read_keys(args.train_keys))}
    if args.table:
        table = _load_table(args.table, archs[0].space)
        accs = [table.acc(a.key) for a in archs if a.key in table]
        report["oracle"] = {"mean_acc": float(np.mean(accs)) if accs else None, "evaluated": len(accs)}
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return 0


# parser ----------------------------------------------------------------------

def _common(p: argparse.ArgumentParser, space: bool = True) -> None:
    p.add_argument("--config", help="JSON run config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
    p.add_argument("--seed", type=int, help="root seed (fallback: config, then $ARCHDIFF_SEED, then 0)")
    p.add_argument("--threads", type=int, help="worker threads; outputs do not depend on it")
    p.add_argument("--preset", choices=("desk", "full"), help="model size preset (default desk)")
    if space:
        p.add_argument("--space", help="search space name")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="archdiff", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-score", help="train a score network")
    _common(p)
    p.add_argument("--steps", type=int)
    p.add_argument("--fraction", type=float, default=1.0, help="train on this share of the space")
    p.add_argument("--archs", help="JSONL architectures (default: enumerate the space)")
    p.add_argument("--n-archs", type=int, default=2000, help="random architectures for free spaces")
    p.add_argument("--no-pos-emb", action="store_true", help="ablate the positional embedding")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_score)

    p = sub.add_parser("train-predictor", help="train a property predictor")
    _common(p)
    p.add_argument("--population", help='JSONL of {"arch": {...}, "y": float}')
    p.add_argument("--table", help="benchmark table (used when no population is given)")
    p.add_argument("--fraction", type=float, default=1.0)
    p.add_argument("--noise-aware", action="store_true")
    p.add_argument("--gaussian", action="store_true", help="also fit an observation variance")
    p.add_argument("--steps", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_predictor)

    p = sub.add_parser("generate", help="sample architectures")
    _common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--n", type=int, default=256)
    p.add_argument("--guide", action="append", help="predictor checkpoint (repeatable)")
    p.add_argument("--k", type=float)
    p.add_argument("--mode", choices=("log_prob", "value", "gaussian"))
    p.add_argument("--target", type=float)
    p.add_argument("--sigma", type=float)
    p.add_argument("--steps", type=int, help="reverse-time steps")
    p.add_argument("--corrector", action="store_true")
    p.add_argument("--discretize", choices=("threshold", "snap"), default="threshold")
    p.add_argument("--table")
    p.add_argument("--train-keys")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("bo", help="Bayesian optimisation runs")
    _common(p)
    p.add_argument("--strategy", choices=("random", "mutation", "mutation+random", "guided"))
    p.add_argument("--acq", choices=("PI", "EI", "ITS", "UCB"))
    p.add_argument("--budget", type=int)
    p.add_argument("--n0", type=int)
    p.add_argument("--candidates", type=int)
    p.add_argument("--ensemble-size", dest="ensemble_size", type=int)
    p.add_argument("--seeds", default="0", help="e.g. 0-9 or 0,3,5")
    p.add_argument("--ckpt", help="score network checkpoint (guided strategy)")
    p.add_argument("--table")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bo)

    p = sub.add_parser("oracle", help="synthetic benchmark tools")
    p.add_argument("action", choices=("build-table",))
    _common(p)
    p.add_argument("--out", help="table path (default <space>.table.jsonl)")
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("eval-metrics", help="validity, uniqueness and novelty of a sample file")
    _common(p, space=False)
    p.add_argument("--samples", required=True)
    p.add_argument("--train-keys")
    p.add_argument("--table")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval_metrics)
    return ap


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ArchDiffError as exc:
        print(f"archdiff: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        print(f"archdiff: error: {exc}", file=sys.stderr)
        return UsageError.exit_code


if __name__ == "__main__":
    sys.exit(main())
