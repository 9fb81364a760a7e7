"""Command-line entry point: ``mrl <command> [flags]``.

Commands: gen-data, import-csv, train, eval, cascade, retrieve, bench.
Every command writes its outputs plus a ``manifest.json`` echoing the fully
resolved configuration to ``--out``.  Wall-clock measurements go to
``timing.json``; everything else is byte-identical across reruns.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import datetime as _dt
import io
import json
import os
import sys
import time
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from . import cascade as cascade_mod
from . import classify, hnsw
from .dataio import (
    PRESETS,
    EmbeddingStore,
    SyntheticSpec,
    generate_synthetic,
    read_csv_store,
    read_store,
    read_superclass_map,
    write_store,
    write_superclass_map,
)
from .mrl import (
    Encoder,
    NestingSpec,
    TrainConfig,
    encode_store,
    fit_probe,
    load_checkpoint,
    save_checkpoint,
    train,
    train_ff_baselines,
)
from .numerics import Rng
from .retrieval import (
    MAP_DENOMINATORS,
    CostLedger,
    FunnelSpec,
    PrefixIndexFlat,
    adaptive_cost,
    adaptive_retrieve,
    funnel_cost,
    funnel_retrieve,
    metrics,
    search_flat,
    shortlist_sweep,
)


class UsageError(ValueError):
    pass


@dataclasses.dataclass
class RunConfig:
    command: str
    values: dict

    def manifest(self) -> dict:
        return {
            "command": self.command,
            "config": self.values,
            "version": __version__,
            "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(),
        }


def _ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


# -- io helpers --------------------------------------------------------------


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_csv(path: Path, rows: list[dict]) -> None:
    if not rows:
        path.write_text("")
        return
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0].keys()), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    path.write_text(buf.getvalue())


def _out_dir(args) -> Path | None:
    if getattr(args, "out", None) is None:
        return None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _stores(args, need_train: bool = True, need_test: bool = True):
    train_path = getattr(args, "train", None) or getattr(args, "db", None)
    test_path = getattr(args, "test", None) or getattr(args, "queries", None)
    if args.data:
        train_path = train_path or Path(args.data) / "train.mrem"
        test_path = test_path or Path(args.data) / "test.mrem"
    if need_train and not train_path:
        raise UsageError("no training/database store given (use --data or --train/--db)")
    if need_test and not test_path:
        raise UsageError("no test/query store given (use --data or --test/--queries)")
    tr = read_store(train_path) if need_train else None
    te = read_store(test_path) if need_test else None
    return tr, te


def _maybe_encode(args, *stores):
    if not getattr(args, "checkpoint", None):
        return stores
    encoder, _ = load_checkpoint(args.checkpoint)
    return tuple(encode_store(encoder, s) for s in stores)


# -- commands ----------------------------------------------------------------


def cmd_gen_data(args) -> dict:
    base = PRESETS[args.preset]
    overrides = {
        "seed": args.seed,
        "n_train": args.n_train,
        "n_test": args.n_test,
        "d": args.d,
        "noise_sigma": args.noise_sigma,
        "num_superclasses": args.superclasses,
        "classes_per_superclass": args.classes_per_superclass,
        "superclass_separation": args.superclass_separation,
        "class_separation": args.class_separation,
    }
    spec = dataclasses.replace(base, **{k: v for k, v in overrides.items() if v is not None})
    train_store, test_store, smap = generate_synthetic(spec)
    out = _out_dir(args)
    write_store(train_store, out / "train.mrem")
    write_store(test_store, out / "test.mrem")
    write_superclass_map(smap, out / "superclasses.tsv")
    return {"synthetic_spec": dataclasses.asdict(spec)}


def cmd_import_csv(args) -> dict:
    store = read_csv_store(args.csv, args.num_classes)
    out = _out_dir(args)
    write_store(store, out / args.name)
    return {"n": store.n, "d": store.d, "num_classes": store.num_classes}


def _train_config(args) -> TrainConfig:
    return TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        lr=args.lr,
        momentum=args.momentum,
        weight_decay=args.weight_decay,
        lr_schedule=args.lr_schedule,
        seed=args.seed,
        normalize_per_granularity=args.normalize,
        bias=not args.no_bias,
        hidden=args.hidden,
    )


def _trace_csv(path: Path, dims, trace) -> None:
    lines = ["epoch,loss," + ",".join(f"acc@{m}" for m in dims)]
    lines += [f"{s.epoch},{s.loss!r}," + ",".join(repr(a) for a in s.acc) for s in trace]
    path.write_text("\n".join(lines) + "\n")


def cmd_train(args) -> dict:
    tr, _ = _stores(args, need_test=False)
    dims = args.dims or list(NestingSpec.halving(tr.d if args.encoder == "frozen" else args.rep_dim or tr.d).dims)
    cfg = _train_config(args)
    out = _out_dir(args)
    if args.variant == "ff":
        for m, res in train_ff_baselines(tr, dims, cfg, args.encoder):
            save_checkpoint(out / f"ff-{m}.mrlh", res.encoder, res.head)
            _trace_csv(out / f"trace-ff-{m}.csv", [m], res.trace)
        return {"dims": dims, "train_config": dataclasses.asdict(cfg)}
    spec = NestingSpec(tuple(dims), tuple(args.weights or ()))
    res = train(tr, spec, args.variant, args.encoder, cfg)
    save_checkpoint(out / "checkpoint.mrlh", res.encoder, res.head)
    _trace_csv(out / "trace.csv", spec.dims, res.trace)
    return {"nesting": dataclasses.asdict(spec), "train_config": dataclasses.asdict(cfg)}


def _eval_record(args, encoder, head, tr, te):
    """Prediction record over the requested dims; untied heads get probes at
    untrained sizes."""
    dims = args.dims or list(head.spec.dims)
    if head.tied or all(m in head.spec.dims for m in dims):
        return classify.eval_linear(head, encoder, te, dims)[1]
    Z_te = encoder(te.vectors)
    logits = []
    cfg = _train_config(args)
    for m in dims:
        if m in head.spec.dims:
            logits.append(head.logits_at(Z_te, m))
        else:
            probe = fit_probe(encoder, tr, m, cfg)
            logits.append(probe.logits_at(Z_te[:, :m], m))
    return classify.record_from_logits(dims, logits, te.labels)


def cmd_eval(args) -> dict:
    tr, te = _stores(args)
    encoder, head = load_checkpoint(args.checkpoint)
    tables = args.table
    out = _out_dir(args)
    report: dict = {}
    need_record = {"1", "15", "16", "superclass", "trends"} & set(tables)
    record = _eval_record(args, encoder, head, tr, te) if need_record else None
    if "1" in tables:
        tab = classify.table_from_record(record)
        report["table1_linear"] = tab.as_dict()
        (out / "table1.csv").write_text(tab.to_csv())
    dims = args.dims or list(head.spec.dims)
    if "2" in tables or "9" in tables:
        rep_tr, rep_te = encode_store(encoder, tr), encode_store(encoder, te)
    if "2" in tables:
        rows = [{"m": m, "top1": classify.eval_1nn(rep_tr, rep_te, m)} for m in dims]
        report["table2_1nn"] = rows
        _write_csv(out / "table2.csv", rows)
    if "9" in tables:
        rows = []
        for shots in args.shots:
            for m in dims:
                mean, std = classify.eval_ncm(rep_tr, rep_te, m, shots, args.ways, args.trials, args.seed)
                rows.append({"shots": shots, "ways": args.ways, "m": m, "mean": mean, "std": std})
        report["table9_ncm"] = rows
        _write_csv(out / "table9.csv", rows)
    if "15" in tables or "16" in tables:
        orc = classify.oracle_accuracy(record)
        if "15" in tables:
            report["table15_first_correct"] = orc.as_row()
            _write_csv(out / "table15.csv", [orc.as_row()])
        if "16" in tables:
            row = {"oracle_top1": orc.oracle_top1, "best_single_top1": float(record.correct.mean(axis=0).max())}
            report["table16_oracle"] = row
            _write_csv(out / "table16.csv", [row])
    if "superclass" in tables:
        smap_path = args.superclass_map or (Path(args.data) / "superclasses.tsv" if args.data else None)
        if smap_path is None:
            raise UsageError("superclass table needs --superclass-map or --data with superclasses.tsv")
        tab = classify.eval_superclass(record, read_superclass_map(smap_path))
        report["superclass"] = tab.as_dict()
        (out / "superclass.csv").write_text(tab.to_csv())
    if "trends" in tables:
        report["trends"] = classify.disagreement(record, args.tolerance)
        _write_csv(out / "trends.csv", [report["trends"]])
    _write_json(out / "report.json", report)
    return {}


def cmd_cascade(args) -> dict:
    _, te = _stores(args, need_train=False)
    encoder, head = load_checkpoint(args.checkpoint)
    _, record = classify.eval_linear(head, encoder, te)
    rng = Rng(args.seed)
    n_hold = int(round(args.holdout_frac * record.n))
    if not 0 < n_hold < record.n:
        raise UsageError("holdout fraction leaves an empty holdout or test split")
    splits = []
    policy = None
    for _ in range(args.splits):
        perm = rng.permutation(record.n)
        hold, test = record.subset(perm[:n_hold]), record.subset(perm[n_hold:])
        pol = cascade_mod.fit_thresholds(hold, args.grid, args.fit_mode)
        policy = policy or pol
        rep = cascade_mod.run_cascade(test, pol)
        row = rep.as_dict()
        row["full_dim_accuracy"] = float(test.correct[:, -1].mean())
        row["thresholds"] = list(pol.thresholds)
        splits.append(row)
    summary = {}
    for key in ("accuracy", "expected_rep_size_final", "expected_rep_size_cumulative", "full_dim_accuracy"):
        vals = np.array([s[key] for s in splits])
        summary[key] = {"mean": float(vals.mean()), "std": float(vals.std())}
    out = _out_dir(args)
    (out / "policy.json").write_text(policy.to_json() + "\n")
    _write_json(out / "cascade_report.json", {"summary": summary, "splits": splits})
    return {}


def _metric_row(config: str, d_s, d_r, ledger, res=None, counts=None, ks=(), denom="min-k-r") -> dict:
    row = {
        "config": config,
        "D_s": d_s,
        "D_r": d_r if d_r is not None else "",
        "MFLOPs": round(ledger.mflops, 2),
        "MFLOPs_shortlist": round(ledger.stage_flops("shortlist") / 1e6, 2),
        "flops_per_query": ledger.flops_per_query,
    }
    if res is not None:
        for t in (1, 5, 10):
            if t <= res.k:
                row[f"Top-{t}"] = float(res.relevant[:, :t].any(axis=1).mean())
        usable = [k for k in ks if k <= res.k]
        m = metrics(res, counts, usable, denom) if usable else {}
        for k in usable:
            row[f"mAP@{k}"] = m[f"mAP@{k}"]
        for k in usable:
            row[f"P@{k}"] = m[f"P@{k}"]
    return row


def cmd_retrieve(args) -> dict:
    mode = args.mode
    ks = args.ks
    funnel = None
    if mode == "funnel":
        if not args.cascade or not args.shortlists:
            raise UsageError("funnel mode needs --cascade and --shortlists")
        funnel = FunnelSpec(args.ds, tuple(args.cascade), tuple(args.shortlists))
    if mode in ("adaptive", "sweep") and (args.ds is None or args.dr is None):
        raise UsageError(f"{mode} mode needs --ds and --dr")
    rows: list[dict] = []
    results = None
    if args.cost_only:
        if args.n_override is None:
            raise UsageError("--cost-only needs --n-override")
        n = args.n_override
        if mode == "single":
            for m in args.dims or []:
                led = CostLedger()
                led.add(f"shortlist@{m}", m * n, n)
                rows.append(_metric_row("single", m, None, led))
        elif mode == "adaptive":
            rows.append(_metric_row("adaptive", args.ds, args.dr, adaptive_cost(n, args.ds, args.dr, args.k)))
        elif mode == "funnel":
            rows.append(_metric_row("funnel", args.ds, "->".join(map(str, args.cascade)), funnel_cost(n, funnel)))
        else:
            for k in args.sweep_k:
                rows.append(_metric_row(f"sweep k={k}", args.ds, args.dr, adaptive_cost(n, args.ds, args.dr, k)))
    else:
        db, q = _stores(args)
        db, q = _maybe_encode(args, db, q)
        index = PrefixIndexFlat(db)
        counts = db.label_counts()
        kmax = max(ks + [10])
        if mode == "single":
            for m in args.dims or [db.d]:
                res, led = search_flat(index, q, m, max(args.k, kmax))
                rows.append(_metric_row("single", m, None, led, res, counts, ks, args.map_denominator))
                results = res
        elif mode == "adaptive":
            if args.hnsw:
                idx, _ = hnsw.build(db, args.ds, hnsw.HnswParams(args.M, args.ef_construction, args.ef_search), args.seed)
                res, led = hnsw.adaptive_retrieve_hnsw(idx, index, q, args.dr, args.k, min(args.k, kmax), args.ef_search)
            else:
                res, led = adaptive_retrieve(index, q, args.ds, args.dr, args.k, min(args.k, kmax))
            rows.append(_metric_row("adaptive-hnsw" if args.hnsw else "adaptive", args.ds, args.dr, led, res, counts, ks, args.map_denominator))
            results = res
        elif mode == "funnel":
            res, led = funnel_retrieve(index, q, funnel)
            rows.append(_metric_row("funnel", args.ds, "->".join(map(str, args.cascade)), led, res, counts, ks, args.map_denominator))
            results = res
        else:
            for r in shortlist_sweep(index, q, args.ds, args.dr, args.sweep_k, ks, map_denominator=args.map_denominator):
                rows.append({"config": f"sweep k={r.pop('k')}", "D_s": args.ds, "D_r": args.dr, **r})
    out = _out_dir(args)
    if out is not None:
        _write_csv(out / "metrics.csv", rows)
        _write_json(out / "metrics.json", rows)
        if results is not None and args.write_results:
            (out / "results.jsonl").write_text(results.to_jsonl())
    if args.cost_only or out is None:
        for row in rows:
            print(json.dumps(row, sort_keys=True))
    return {}


def cmd_bench(args) -> dict:
    db, q = _stores(args)
    db, q = _maybe_encode(args, db, q)
    m = args.m or db.d
    params = hnsw.HnswParams(args.M, args.ef_construction, max(args.ef_search))
    index, stats = hnsw.build(db, m, params, args.seed)
    problems = index.check_invariants()
    flat = PrefixIndexFlat(db)
    t0 = time.perf_counter()
    exact, _ = search_flat(flat, q, m, args.k)
    flat_time = time.perf_counter() - t0
    rows, timing = [], {"build_time_s": stats.build_time, "exact_search_s": flat_time}
    for ef in args.ef_search:
        t0 = time.perf_counter()
        res, _, evals = hnsw.search_batch(index, q, args.k, ef)
        timing[f"hnsw_search_s@ef{ef}"] = time.perf_counter() - t0
        rows.append(
            {
                "ef_search": ef,
                f"recall@{args.k}": hnsw.recall_at_k(res.ids, exact.ids),
                "mean_distance_evals": float(evals.mean()),
                "evals_fraction_of_N": float(evals.mean()) / db.n,
                "top1": float(res.relevant[:, 0].mean()),
                "exact_top1": float(exact.relevant[:, 0].mean()),
            }
        )
    stats.mean_distance_evals = rows[-1]["mean_distance_evals"]
    exact_bytes = flat.view(m).nbytes
    size = {
        "rep_size": m,
        "exact_index_size_mb": exact_bytes / 2**20,
        "hnsw_index_size_mb": stats.bytes / 2**20,
        "nodes": stats.nodes,
        "edges": stats.edges,
        "max_level": index.max_level,
        "invariant_violations": problems,
    }
    out = _out_dir(args)
    _write_csv(out / "bench.csv", rows)
    _write_json(out / "index_stats.json", size)
    _write_json(out / "timing.json", timing)
    if args.save_index:
        Path(args.save_index).write_bytes(index.to_bytes())
    return {}


# -- parser ------------------------------------------------------------------


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--epochs", type=int, default=60)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--weight-decay", type=float, default=1e-4)
    p.add_argument("--lr-schedule", choices=("constant", "cosine"), default="cosine")
    p.add_argument("--normalize", action="store_true", help="unit-normalize each prefix before its classifier")
    p.add_argument("--no-bias", action="store_true")
    p.add_argument("--hidden", type=int, default=128, help="hidden width of the mlp2 encoder")


def _add_data_flags(p: argparse.ArgumentParser, names=("train", "test")) -> None:
    p.add_argument("--data", help="directory produced by gen-data")
    for name in names:
        p.add_argument(f"--{name}", help=f"{name} store (.mrem)")


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=None, help="worker cap (env MRL_THREADS)")
    common.add_argument("--config", help="key=value file; explicit flags take precedence")
    common.add_argument("--out", help="output directory")

    parser = argparse.ArgumentParser(prog="mrl", description="Matryoshka representation toolkit")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    subs = {}

    p = sub.add_parser("gen-data", parents=[common], help="generate the synthetic hierarchical dataset")
    p.add_argument("--preset", choices=sorted(PRESETS), default="default")
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-test", type=int)
    p.add_argument("--d", type=int)
    p.add_argument("--noise-sigma", type=float)
    p.add_argument("--superclasses", type=int)
    p.add_argument("--classes-per-superclass", type=int)
    p.add_argument("--superclass-separation", type=float)
    p.add_argument("--class-separation", type=float)
    p.set_defaults(func=cmd_gen_data, needs_out=True)
    subs["gen-data"] = p

    p = sub.add_parser("import-csv", parents=[common], help="convert label,f0,... CSV to a store")
    p.add_argument("--csv", required=True)
    p.add_argument("--num-classes", type=int)
    p.add_argument("--name", default="store.mrem")
    p.set_defaults(func=cmd_import_csv, needs_out=True)
    subs["import-csv"] = p

    p = sub.add_parser("train", parents=[common], help="train nested heads (and encoder)")
    _add_data_flags(p, ("train",))
    p.add_argument("--variant", choices=("mrl", "mrl-e", "ff"), default="mrl")
    p.add_argument("--dims", type=_ints, help="nesting granularities, e.g. 4,8,16,32,64")
    p.add_argument("--weights", type=_floats, help="relative importance per granularity")
    p.add_argument("--encoder", choices=("frozen", "linear", "mlp2"), default="linear")
    p.add_argument("--rep-dim", type=int, help="representation size for trainable encoders")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train, needs_out=True)
    subs["train"] = p

    p = sub.add_parser("eval", parents=[common], help="classification evaluation tables")
    _add_data_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--table", type=lambda s: s.split(","), default=["1"],
                   help="comma list of 1,2,9,15,16,superclass,trends")
    p.add_argument("--dims", type=_ints, help="granularities to evaluate (untrained sizes allowed)")
    p.add_argument("--superclass-map")
    p.add_argument("--shots", type=_ints, default=[1, 5])
    p.add_argument("--ways", type=int, default=5)
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--tolerance", type=int, default=1, help="misclassifications ignored by the trend taxonomy")
    _add_train_flags(p)
    p.set_defaults(func=cmd_eval, needs_out=True)
    subs["eval"] = p

    p = sub.add_parser("cascade", parents=[common], help="fit and run the adaptive classification cascade")
    _add_data_flags(p, ("test",))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--holdout-frac", type=float, default=0.2)
    p.add_argument("--grid", type=int, default=100)
    p.add_argument("--splits", type=int, default=1)
    p.add_argument("--fit-mode", choices=cascade_mod.FIT_MODES, default="escalate-to-final")
    p.set_defaults(func=cmd_cascade, needs_out=True)
    subs["cascade"] = p

    p = sub.add_parser("retrieve", parents=[common], help="single-shot, adaptive and funnel retrieval")
    _add_data_flags(p, ("db", "queries"))
    p.add_argument("--checkpoint", help="encode stores with this checkpoint's encoder first")
    p.add_argument("--mode", choices=("single", "adaptive", "funnel", "sweep"), default="single")
    p.add_argument("--dims", type=_ints, help="granularities for single-shot mode")
    p.add_argument("--ds", type=int)
    p.add_argument("--dr", type=int)
    p.add_argument("--k", type=int, default=200, help="shortlist length")
    p.add_argument("--ks", type=_ints, default=[10, 25, 50, 100])
    p.add_argument("--cascade", type=_ints)
    p.add_argument("--shortlists", type=_ints)
    p.add_argument("--sweep-k", type=_ints, default=[25, 50, 100, 200, 400, 800])
    p.add_argument("--n-override", type=int, help="database size for --cost-only")
    p.add_argument("--cost-only", action="store_true", help="cost ledger only, no data")
    p.add_argument("--hnsw", action="store_true", help="shortlist with HNSW (adaptive mode)")
    p.add_argument("--M", type=int, default=32)
    p.add_argument("--ef-construction", type=int, default=200)
    p.add_argument("--ef-search", type=int, default=50)
    p.add_argument("--map-denominator", choices=MAP_DENOMINATORS, default="min-k-r")
    p.add_argument("--write-results", action="store_true")
    p.set_defaults(func=cmd_retrieve, needs_out=False)
    subs["retrieve"] = p

    p = sub.add_parser("bench", parents=[common], help="HNSW vs exact search benchmark")
    _add_data_flags(p, ("db", "queries"))
    p.add_argument("--checkpoint")
    p.add_argument("--m", type=int, help="granularity to index (default: full)")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--M", type=int, default=32)
    p.add_argument("--ef-construction", type=int, default=200)
    p.add_argument("--ef-search", type=_ints, default=[50])
    p.add_argument("--save-index")
    p.set_defaults(func=cmd_bench, needs_out=True)
    subs["bench"] = p
    return parser, subs


def read_config(path) -> dict[str, str]:
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        key, val = (s.strip() for s in line.split("=", 1))
        values[key.replace("-", "_")] = val
    return values


def _apply_config(sub: argparse.ArgumentParser, values: dict[str, str]) -> None:
    actions = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, raw in values.items():
        action = actions.get(key)
        if action is None or key in ("config", "help"):
            raise UsageError(f"unknown config key {key!r}")
        if isinstance(action, argparse._StoreTrueAction):
            defaults[key] = raw.lower() in ("1", "true", "yes", "on")
        elif action.type is not None:
            defaults[key] = action.type(raw)
        else:
            defaults[key] = raw
    sub.set_defaults(**defaults)


def parse_args(argv=None) -> argparse.Namespace:
    parser, subs = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        _apply_config(subs[args.command], read_config(args.config))
        args = parser.parse_args(argv)
    if args.threads is None and os.environ.get("MRL_THREADS"):
        args.threads = int(os.environ["MRL_THREADS"])
    if args.needs_out and not args.out:
        raise UsageError(f"{args.command} needs --out")
    return args


def run(args: argparse.Namespace) -> None:
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=args.threads), warnings.catch_warnings():
        warnings.simplefilter("ignore")
        extra = args.func(args)
    out = _out_dir(args)
    if out is not None:
        values = {k: v for k, v in vars(args).items() if k not in ("func", "needs_out")}
        manifest = RunConfig(args.command, values).manifest()
        manifest["resolved"] = extra
        _write_json(out / "manifest.json", manifest)


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
        run(args)
    except SystemExit as exc:  # argparse already printed usage
        return int(exc.code or 0)
    except Exception as exc:  # noqa: BLE001 - surface every failure as one line
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
