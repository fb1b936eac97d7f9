"""Command-line entry point: ``sslmtpp {generate,split,train,evaluate,ablate-lambda}``.

Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.

Output files (all under ``--out``):

* generate: the pool file itself is ``--out``
* split: ``split_<protocol>.json`` per budget and ``split_test.json``
* train: ``checkpoint_<protocol>_<mode>_seed<k>.json`` and ``history_<protocol>_<mode>_seed<k>.csv``
* evaluate: ``report.csv`` (median and IQR per protocol and mode), ``report.json`` (per checkpoint)
* ablate-lambda: ``ablation.csv``
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import (
    DEFAULT_BUDGETS,
    DEFAULT_TEST_EVENTS,
    DataFormatError,
    GeneratorConfig,
    InsufficientPoolError,
    ProtocolSplit,
    generate_synthetic,
    load_manifest,
    load_pool,
    make_protocol_splits,
    save_manifest,
    save_pool,
)
from .metrics import EvalReport, evaluate
from .training import (
    CheckpointError,
    TrainConfig,
    TrainingDivergedError,
    load_checkpoint,
    load_config,
    save_checkpoint,
    train,
    write_history_csv,
)

logger = logging.getLogger("sslmtpp")

DEFAULT_LAMBDAS = (0.001, 0.01, 0.1, 1.0, 10.0)
REPORT_COLUMNS = ("protocol", "labeled_events", "model", "seeds",
                  "avg_precision", "avg_precision_iqr", "macro_f1", "macro_f1_iqr",
                  "micro_f1", "micro_f1_iqr", "avg_precision_pr")


class UsageError(Exception):
    """Invalid flags or inputs; maps to exit code 2."""


def _csv_floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _csv_ints(text: str) -> list[int]:
    try:
        return [int(float(x)) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _test_size(text: str) -> int | float:
    value = float(text)
    return value if 0 < value < 1 else int(value)


# ---------------------------------------------------------------------------
# experiment manifest


@dataclass
class ExperimentManifest:
    pool: str
    split: str
    config: TrainConfig
    mode: str = "ssl"
    out: str = "."
    seeds: list[int] = field(default_factory=lambda: [0])

    def check(self) -> None:
        for label, path in (("pool", self.pool), ("split", self.split)):
            if not os.path.exists(path):
                raise UsageError(f"{label} file not found: {path}")
        if not self.seeds:
            raise UsageError("seed list is empty")
        if self.mode not in ("ssl", "baseline"):
            raise UsageError(f"mode must be ssl or baseline, got {self.mode!r}")


_FLAG_KEYS = ("epochs", "lr", "batch_size", "lam", "hidden_dim", "encoder_dim", "num_layers", "head_dim", "dropout")


def _manifest_from_args(args) -> ExperimentManifest:
    """Resolve manifest file, then config file, then explicit flags (last one wins)."""
    doc: dict = {}
    base = Path(".")
    if args.manifest:
        if not os.path.exists(args.manifest):
            raise UsageError(f"manifest not found: {args.manifest}")
        with open(args.manifest, encoding="utf-8") as fh:
            doc = json.load(fh)
        base = Path(args.manifest).parent
    cfg = TrainConfig()
    if isinstance(doc.get("config"), dict):
        cfg = TrainConfig.from_dict(doc["config"])
    elif isinstance(doc.get("config"), str):
        cfg = load_config(base / doc["config"])
    if args.config:
        if not os.path.exists(args.config):
            raise UsageError(f"config file not found: {args.config}")
        cfg = load_config(args.config)
    cfg = replace(cfg, **{k: getattr(args, k) for k in _FLAG_KEYS if getattr(args, k) is not None})

    pool = args.pool or (str(base / doc["pool"]) if "pool" in doc else None)
    split = args.split or (str(base / doc["split"]) if "split" in doc else None)
    if pool is None or split is None:
        raise UsageError("need --pool and --split (or a --manifest naming them)")
    mode = args.mode or doc.get("mode", "ssl")
    seeds = args.seeds or ([args.seed] if args.seed is not None else doc.get("seeds", [cfg.seed]))
    out = args.out or doc.get("out", ".")
    cfg = replace(cfg, baseline=(mode == "baseline"))
    cfg.validate()
    manifest = ExperimentManifest(pool, split, cfg, mode, out, list(seeds))
    manifest.check()
    return manifest


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args) -> int:
    priors = tuple(args.priors) if args.priors else None
    classes = args.classes if args.classes else (len(priors) if priors else 3)
    if priors is None:
        priors = (0.506, 0.45, 0.044) if classes == 3 else tuple([1.0 / classes] * classes)
    cfg = GeneratorConfig(n_sequences=args.sequences, num_classes=classes, priors=priors,
                          base_intensity=args.base_intensity, alpha=args.alpha, beta=args.beta,
                          mean_length=args.mean_length, coupling=args.coupling,
                          coupling_window=args.coupling_window, total_events=args.total_events)
    try:
        cfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    pool = generate_synthetic(cfg, args.seed)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_pool(pool, args.out)
    s = pool.summary()
    shares = ", ".join(f"{100 * x:.2f}%" for x in s["class_shares"])
    print(f"sequences={s['sequences']} events={s['events']} mean_length={s['mean_length']:.2f} class_shares=[{shares}]")
    return 0


def cmd_split(args) -> int:
    pool = load_pool(args.pool)
    budgets = args.budgets or list(DEFAULT_BUDGETS)
    names = args.names.split(",") if args.names else None
    try:
        splits = make_protocol_splits(pool, budgets, args.test_events, args.seed, names)
    except InsufficientPoolError as exc:
        raise UsageError(str(exc)) from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    test = ProtocolSplit("test", 0, [], [], splits[0].test, args.seed)
    save_manifest(test, out / "split_test.json")
    print(f"{'Protocol':<10}{'Labeled':>12}{'Unlabeled':>12}")
    for sp in splits:
        save_manifest(sp, out / f"split_{sp.name}.json")
        n_lab, n_unl = pool.total_events(sp.labeled), pool.total_events(sp.unlabeled)
        if not sp.unlabeled:
            print(f"warning: {sp.name} labels the whole training pool; unlabeled set is empty", file=sys.stderr)
        print(f"{sp.name:<10}{n_lab:>12}{n_unl:>12}")
    print(f"{'test':<10}{pool.total_events(test.test):>12}")
    return 0


def _run_one(pool_path: str, split_path: str, cfg: TrainConfig, mode: str, seed: int, out: str) -> tuple[str, str]:
    pool = load_pool(pool_path)
    split = load_manifest(split_path)
    split.check(pool)
    cfg = replace(cfg, seed=seed, baseline=(mode == "baseline"))
    labeled = pool.subset(split.labeled)
    unlabeled = [s.without_markers() for s in pool.subset(split.unlabeled)]
    result = train(labeled, unlabeled, cfg)
    stem = f"{split.name}_{mode}_seed{seed}"
    ckpt = os.path.join(out, f"checkpoint_{stem}.json")
    hist = os.path.join(out, f"history_{stem}.csv")
    meta = {"protocol": split.name, "mode": mode, "seed": seed,
            "labeled_events": pool.total_events(split.labeled),
            "unlabeled_events": pool.total_events(split.unlabeled)}
    save_checkpoint(result.model, cfg, result.scaler, ckpt, meta)
    write_history_csv(result.history, hist)
    return ckpt, hist


def _fan_out(jobs: list[tuple], workers: int) -> list:
    if workers <= 1 or len(jobs) <= 1:
        return [_run_one(*job) for job in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_one, *zip(*jobs)))


def cmd_train(args) -> int:
    m = _manifest_from_args(args)
    Path(m.out).mkdir(parents=True, exist_ok=True)
    jobs = [(m.pool, m.split, m.config, m.mode, seed, m.out) for seed in m.seeds]
    for ckpt, hist in _fan_out(jobs, args.workers):
        print(f"wrote {ckpt} {hist}")
    return 0


def _evaluate_checkpoint(path: str, test_seqs) -> tuple[dict, EvalReport]:
    ck = load_checkpoint(path)
    return ck.meta, evaluate(ck.model, test_seqs, ck.scaler)


def _quartiles(values: list[float]) -> tuple[float, float]:
    q1, med, q3 = np.percentile(values, [25, 50, 75])
    return float(med), float(q3 - q1)


def aggregate_rows(results: list[tuple[dict, EvalReport]]) -> list[dict]:
    """Median and interquartile range per (protocol, mode); SSL rows after baseline rows."""
    groups: dict[tuple, list] = {}
    for meta, rep in results:
        key = (meta.get("protocol", "?"), meta.get("mode", "?"))
        groups.setdefault(key, []).append((meta, rep))
    rows = []
    order = {"baseline": 0, "ssl": 1}
    for (protocol, mode) in sorted(groups, key=lambda k: (k[0], order.get(k[1], 2), k[1])):
        items = groups[(protocol, mode)]
        row = {"protocol": protocol, "labeled_events": items[0][0].get("labeled_events", ""),
               "model": "Native Supervised MTPP" if mode == "baseline" else "Semi-Supervised MTPP",
               "seeds": ";".join(str(m.get("seed", "")) for m, _ in items)}
        for metric in ("avg_precision", "macro_f1", "micro_f1"):
            med, iqr = _quartiles([getattr(r, metric) for _, r in items])
            row[metric] = med
            row[f"{metric}_iqr"] = iqr
        row["avg_precision_pr"] = _quartiles([r.avg_precision_pr for _, r in items])[0]
        rows.append(row)
    return rows


def _fmt(value) -> str:
    return f"{value:.4f}" if isinstance(value, float) else str(value)


def cmd_evaluate(args) -> int:
    pool = load_pool(args.pool)
    split = load_manifest(args.split)
    split.check(pool)
    if not split.test:
        raise UsageError(f"{args.split} lists no test sequences")
    test_seqs = pool.subset(split.test)
    results = []
    for path in args.checkpoints:
        if not os.path.exists(path):
            raise UsageError(f"checkpoint not found: {path}")
        results.append(_evaluate_checkpoint(path, test_seqs))
    rows = aggregate_rows(results)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "report.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    per_ckpt = [{"checkpoint": os.path.basename(p), "meta": meta, "report": rep.to_dict()}
                for p, (meta, rep) in zip(args.checkpoints, results)]
    with open(out / "report.json", "w", encoding="utf-8") as fh:
        json.dump(per_ckpt, fh, sort_keys=True)
        fh.write("\n")
    header = f"{'Protocol':<9}{'Labeled':>9}  {'Model':<24}{'AvgPrec%':>10}{'MacroF1%':>10}{'MicroF1%':>10}{'PR-AP%':>9}"
    print(header)
    for row in rows:
        print(f"{row['protocol']:<9}{row['labeled_events']!s:>9}  {row['model']:<24}"
              f"{row['avg_precision']:>10.2f}{row['macro_f1']:>10.2f}{row['micro_f1']:>10.2f}{row['avg_precision_pr']:>9.2f}")
    return 0


def _ablate_one(pool_path, split_path, cfg, lam, seed):
    pool = load_pool(pool_path)
    split = load_manifest(split_path)
    split.check(pool)
    cfg = replace(cfg, lam=lam, seed=seed, baseline=False)
    result = train(pool.subset(split.labeled), [s.without_markers() for s in pool.subset(split.unlabeled)], cfg)
    rep = evaluate(result.model, pool.subset(split.test), result.scaler)
    return {"lambda": lam, "seed": seed, "avg_precision": rep.avg_precision,
            "macro_f1": rep.macro_f1, "micro_f1": rep.micro_f1}


def cmd_ablate_lambda(args) -> int:
    m = _manifest_from_args(args)
    lambdas = args.lambdas or list(DEFAULT_LAMBDAS)
    if any(lam < 0 for lam in lambdas):
        raise UsageError("lambda values must be non-negative")
    jobs = [(m.pool, m.split, m.config, lam, seed) for lam in lambdas for seed in m.seeds]
    if args.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as ex:
            rows = list(ex.map(_ablate_one, *zip(*jobs)))
    else:
        rows = [_ablate_one(*job) for job in jobs]
    rows.sort(key=lambda r: (r["lambda"], r["seed"]))
    out = Path(m.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "ablation.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["lambda", "seed", "avg_precision", "macro_f1", "micro_f1"],
                                lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    print(f"{'lambda':>10}{'median AvgPrec%':>18}")
    for lam in sorted(set(lambdas)):
        med = float(np.median([r["avg_precision"] for r in rows if r["lambda"] == lam]))
        print(f"{lam:>10g}{med:>18.2f}")
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_training_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--manifest", help="experiment manifest JSON (pool, split, config, mode, out, seeds)")
    p.add_argument("--pool", help="sequence file (JSON lines)")
    p.add_argument("--split", help="split manifest JSON")
    p.add_argument("--config", help="flat JSON config; flags override its values")
    p.add_argument("--mode", choices=("ssl", "baseline"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--hidden-dim", dest="hidden_dim", type=int)
    p.add_argument("--encoder-dim", dest="encoder_dim", type=int)
    p.add_argument("--num-layers", dest="num_layers", type=int)
    p.add_argument("--head-dim", dest="head_dim", type=int)
    p.add_argument("--dropout", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--seeds", type=_csv_ints, help="comma-separated seed list")
    p.add_argument("--out", help="output directory")
    p.add_argument("--workers", type=int, default=1, help="parallel processes over seeds")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sslmtpp", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic marked sequence pool")
    g.add_argument("--sequences", type=int, default=1000)
    g.add_argument("--classes", type=int)
    g.add_argument("--priors", type=_csv_floats)
    g.add_argument("--mean-length", dest="mean_length", type=float, default=209.0)
    g.add_argument("--alpha", type=float, default=GeneratorConfig.alpha)
    g.add_argument("--beta", type=float, default=GeneratorConfig.beta)
    g.add_argument("--base-intensity", dest="base_intensity", type=float, default=GeneratorConfig.base_intensity)
    g.add_argument("--coupling", type=float, default=GeneratorConfig.coupling)
    g.add_argument("--coupling-window", dest="coupling_window", type=int, default=GeneratorConfig.coupling_window)
    g.add_argument("--total-events", dest="total_events", type=int)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True, help="output pool file")
    g.set_defaults(func=cmd_generate)

    s = sub.add_parser("split", help="hold out a test set and write protocol manifests")
    s.add_argument("--pool", required=True)
    s.add_argument("--budgets", type=_csv_ints, help=f"labeled-event budgets (default {','.join(map(str, DEFAULT_BUDGETS))})")
    s.add_argument("--names", help="comma-separated protocol names (default P-1, P-2, ...)")
    s.add_argument("--test-events", dest="test_events", type=_test_size, default=DEFAULT_TEST_EVENTS,
                   help="test events (integer) or fraction of the pool (0-1)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_split)

    t = sub.add_parser("train", help="train one model per seed")
    _add_training_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="score checkpoints on a test manifest")
    e.add_argument("--pool", required=True)
    e.add_argument("--split", required=True, help="manifest whose test ids are scored")
    e.add_argument("--checkpoints", nargs="+", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("ablate-lambda", help="train and score one model per (lambda, seed)")
    _add_training_flags(a)
    a.add_argument("--lambdas", type=_csv_floats)
    a.set_defaults(func=cmd_ablate_lambda)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, DataFormatError, CheckpointError, FileNotFoundError, ValueError) as exc:
        print(f"sslmtpp {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except TrainingDivergedError as exc:
        print(f"sslmtpp {args.command}: training diverged: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - last-resort mapping to exit code 1
        logger.debug("unhandled", exc_info=True)
        print(f"sslmtpp {args.command}: failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
