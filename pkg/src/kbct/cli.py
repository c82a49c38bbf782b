"""Command-line surface for the training, evaluation, and diagnostic paths.

Every command writes a ``manifest.json`` recording the resolved
configuration, sha256 digests of the input files, the artifact paths,
and per-seed metrics with their aggregates.  Timestamps live in their
own manifest field so rerunning an identical command yields an
identical manifest otherwise.  Artifact paths are printed to stdout,
one per line; informational lines start with ``#``.

Exit codes: 0 success, 2 usage problems (bad flags, missing files,
schema violations), 1 runtime failures.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import figures, synth
from .checkpoint import load_checkpoint
from .data import load_kb
from .diagnostics import (
    CONSISTENCY_HEADER,
    DEDUCTIVE_ROW_ORDER,
    ConsistencyStats,
    deductive_protocol,
    load_doge,
    pair_twins,
    rank_instances,
    stereotype_report,
)
from .encoders import load_word_vectors
from .evaluation import RankingReport, evaluate, zero_shot_evaluate
from .models import MODEL_KINDS
from .training import TrainConfig, build_run, grid_search, train

EVAL_HEADER = "split\tMR\tMRR\tH@1\tH@10\tn_queries"


class UsageError(Exception):
    """Bad invocation: wrong flags, missing files, schema violations."""


def _now():
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _require_file(path, what):
    if path is None:
        raise UsageError(f"{what} is required")
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {p}")
    return p


def _kb_paths(args):
    """--kb DIR shorthand or explicit --train/--valid/--test flags."""
    if getattr(args, "kb", None):
        root = Path(args.kb)
        if not root.is_dir():
            raise UsageError(f"--kb directory not found: {root}")
        paths = {s: root / f"{s}.tsv" for s in ("train", "valid", "test")}
        for s, p in paths.items():
            if not p.is_file():
                raise UsageError(f"--kb directory lacks {s}.tsv: {p}")
    else:
        paths = {s: _require_file(getattr(args, s, None), f"--{s}")
                 for s in ("train", "valid", "test")}
    if getattr(args, "clusters", None):
        paths["clusters"] = _require_file(args.clusters, "--clusters")
    return paths


def _load_kb_from(paths):
    return load_kb(paths["train"], paths["valid"], paths["test"],
                   cluster_path=paths.get("clusters"))


# -- config resolution --------------------------------------------------------

_CONFIG_KEYS = tuple(TrainConfig().to_dict())


def _resolve_config(args, mode, base=None) -> TrainConfig:
    """defaults (or ``base``) < --config file < explicit flags."""
    d = dict((base or TrainConfig(mode=mode)).to_dict())
    d["mode"] = mode
    if getattr(args, "config", None):
        p = _require_file(args.config, "--config")
        try:
            file_cfg = json.loads(p.read_text())
        except json.JSONDecodeError as e:
            raise UsageError(f"--config is not valid JSON: {e}")
        unknown = sorted(set(file_cfg) - set(_CONFIG_KEYS))
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        d.update(file_cfg)
    for key in _CONFIG_KEYS:
        val = getattr(args, key, None)
        if val is not None:
            d[key] = val
    if getattr(args, "freeze_words", False):
        d["train_word_embeddings"] = False
    try:
        config = TrainConfig.from_dict(d)
    except (TypeError, ValueError) as e:
        raise UsageError(str(e))
    _check_config(config)
    return config


def _check_config(c: TrainConfig):
    if c.model not in MODEL_KINDS:
        raise UsageError(f"unknown model {c.model!r}; "
                         f"choose from {', '.join(sorted(MODEL_KINDS))}")
    if c.encoder not in ("table", "gru"):
        raise UsageError(f"unknown encoder {c.encoder!r}; "
                         "choose table or gru")
    for name in ("dim", "batch_size", "epochs", "validate_every", "word_dim"):
        if getattr(c, name) < 1:
            raise UsageError(f"{name} must be a positive integer")
    if c.learning_rate <= 0:
        raise UsageError("learning_rate must be positive")
    if not 0.0 <= c.dropout < 1.0:
        raise UsageError("dropout must lie in [0, 1)")
    if c.n3_weight < 0:
        raise UsageError("n3_weight must be nonnegative")


def _seed_list(args):
    n = getattr(args, "seeds", None) or 5
    if n < 1:
        raise UsageError("--seeds must be at least 1")
    return list(range(1, n + 1))


# -- manifest and aggregation -------------------------------------------------


def _digest_inputs(inputs):
    return {k: {"path": str(p), "sha256": _sha256_file(p)}
            for k, p in sorted(inputs.items()) if p is not None}


def _flatten(d, prefix=""):
    out = {}
    for k in sorted(d):
        v = d[k]
        if isinstance(v, dict):
            out.update(_flatten(v, f"{prefix}{k}."))
        elif isinstance(v, bool):
            continue
        elif isinstance(v, (int, float)):
            out[f"{prefix}{k}"] = float(v)
    return out


def aggregate_metrics(metric_dicts):
    """Per-metric mean and sample (n-1) stdev; single runs report 0."""
    if not metric_dicts:
        raise UsageError("nothing to aggregate")
    flats = [_flatten(d) for d in metric_dicts]
    keys = set(flats[0])
    for f in flats[1:]:
        if set(f) != keys:
            raise UsageError("metric files do not share one schema")
    out = {}
    for k in sorted(keys):
        vals = np.array([f[k] for f in flats], dtype=np.float64)
        stdev = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
        out[k] = {"mean": float(vals.mean()), "stdev": stdev, "n": len(vals)}
    return out


def aggregate_table(agg):
    lines = ["# sample stdev (n-1 normalization); n=1 rows report stdev 0",
             "metric\tmean\tstdev\tn"]
    for k, row in agg.items():
        lines.append(f"{k}\t{row['mean']:.6g}\t{row['stdev']:.6g}\t{row['n']}")
    return "\n".join(lines) + "\n"


def _write_manifest(out_dir, command, config, seeds, inputs, outputs,
                    per_seed=None, aggregate=None, results=None,
                    started=None):
    man = {
        "command": command,
        "config": config,
        "seeds": seeds,
        "inputs": _digest_inputs(inputs),
        "outputs": {k: str(v) for k, v in sorted(outputs.items())},
        "per_seed": per_seed or {},
        "aggregate": aggregate or {},
        "results": results or {},
        "timestamps": {"started": started or _now(), "finished": _now()},
    }
    path = Path(out_dir) / "manifest.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(man, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def _emit(out, *paths):
    for p in paths:
        print(p)
        out.append(Path(p))


# -- training commands --------------------------------------------------------


def _train_one_seed(payload):
    config = TrainConfig.from_dict(payload["config"])
    kb = load_kb(payload["paths"]["train"], payload["paths"]["valid"],
                 payload["paths"]["test"],
                 cluster_path=payload["paths"].get("clusters"))
    init = (load_checkpoint(payload["init"])
            if payload.get("init") else None)
    wv = (load_word_vectors(payload["word_vectors"])
          if payload.get("word_vectors") else None)
    model, encoder = build_run(config, kb, word_vectors=wv)
    result = train(config, kb, model, encoder, init=init, word_vectors=wv)

    seed_dir = Path(payload["out_dir"]) / f"seed-{config.seed}"
    seed_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = seed_dir / "model.ckpt"
    result.checkpoint.save(ckpt_path)
    conv_path = seed_dir / "convergence.tsv"
    with open(conv_path, "w", encoding="utf-8") as f:
        f.write("epoch\tvalid_MRR\n")
        for epoch, metrics in result.history:
            f.write(f"{epoch}\t{metrics['MRR']:.6f}\n")

    best_model = result.checkpoint.make_model()
    best_encoder = result.checkpoint.make_encoder()
    metrics = {
        "valid": evaluate(best_model, best_encoder, kb, "valid").as_dict(),
        "test": evaluate(best_model, best_encoder, kb, "test").as_dict(),
    }
    metrics_path = seed_dir / "metrics.json"
    with open(metrics_path, "w", encoding="utf-8") as f:
        json.dump(metrics, f, indent=2, sort_keys=True)
        f.write("\n")
    return {"seed": config.seed,
            "checkpoint": str(ckpt_path),
            "convergence": str(conv_path),
            "metrics_file": str(metrics_path),
            "metrics": metrics,
            "history": [(e, m["MRR"]) for e, m in result.history]}


def _cmd_train(args, mode):
    started = _now()
    paths = _kb_paths(args)
    config = _resolve_config(args, mode)
    seeds = _seed_list(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    init_path = None
    if getattr(args, "init", None):
        init_path = _require_file(args.init, "--init")
    wv_path = None
    if getattr(args, "word_vectors", None):
        wv_path = _require_file(args.word_vectors, "--word-vectors")

    payloads = []
    for seed in seeds:
        d = config.to_dict()
        d["seed"] = seed
        payloads.append({"config": d,
                         "paths": {k: str(v) for k, v in paths.items()},
                         "init": str(init_path) if init_path else None,
                         "word_vectors": str(wv_path) if wv_path else None,
                         "out_dir": str(out_dir)})
    workers = int(os.environ.get("KBCT_WORKERS", "1") or "1")
    if workers > 1 and len(payloads) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            runs = list(pool.map(_train_one_seed, payloads))
    else:
        runs = [_train_one_seed(p) for p in payloads]
    runs.sort(key=lambda r: r["seed"])

    per_seed = {str(r["seed"]): r["metrics"] for r in runs}
    agg = aggregate_metrics([r["metrics"] for r in runs])
    report_path = out_dir / "report.tsv"
    with open(report_path, "w", encoding="utf-8") as f:
        f.write("seed\t" + EVAL_HEADER + "\n")
        for r in runs:
            for split in ("valid", "test"):
                m = r["metrics"][split]
                f.write(f"{r['seed']}\t{split}\t{m['MR']:.4f}\t{m['MRR']:.6f}"
                        f"\t{m['H@1']:.6f}\t{m['H@10']:.6f}"
                        f"\t{m['n_queries']}\n")
    agg_path = out_dir / "aggregate.tsv"
    agg_path.write_text(aggregate_table(agg), encoding="utf-8")

    conv_png = figures.convergence_curve(
        {f"seed {r['seed']}": r["history"] for r in runs},
        out_dir / "convergence.png")
    bars_png = figures.metric_bars(
        [(f"seed {r['seed']}", r["metrics"]["test"]) for r in runs],
        out_dir / "metrics.png")

    inputs = dict(paths)
    if init_path:
        inputs["init"] = init_path
    if wv_path:
        inputs["word_vectors"] = wv_path
    if getattr(args, "config", None):
        inputs["config_file"] = Path(args.config)
    cfg = config.to_dict()
    cfg.pop("seed")
    manifest = _write_manifest(
        out_dir, mode, cfg, seeds, inputs,
        outputs={"report": report_path, "aggregate": agg_path,
                 "convergence_figure": conv_png, "metrics_figure": bars_png,
                 **{f"checkpoint_seed_{r['seed']}": r["checkpoint"]
                    for r in runs},
                 **{f"convergence_seed_{r['seed']}": r["convergence"]
                    for r in runs},
                 **{f"metrics_seed_{r['seed']}": r["metrics_file"]
                    for r in runs}},
        per_seed=per_seed, aggregate=agg, started=started)

    mrr = agg["test.MRR"]
    print(f"# {mode}: {len(seeds)} seed(s), test MRR "
          f"{mrr['mean']:.4f} ± {mrr['stdev']:.4f}")
    artifacts = []
    for r in runs:
        _emit(artifacts, r["checkpoint"], r["convergence"], r["metrics_file"])
    _emit(artifacts, report_path, agg_path, conv_png, bars_png, manifest)
    return 0


# -- evaluation commands ------------------------------------------------------


def _cmd_eval(args):
    started = _now()
    ckpt_path = _require_file(args.ckpt, "--ckpt")
    paths = _kb_paths(args)
    kb = _load_kb_from(paths)
    ckpt = load_checkpoint(ckpt_path)
    model = ckpt.make_model()
    encoder = ckpt.make_encoder()
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    results = {}
    rows = [EVAL_HEADER]
    for split in args.splits:
        rep = evaluate(model, encoder, kb, split,
                       use_clusters=not args.no_clusters)
        results[split] = rep.as_dict()
        rows.append(rep.tsv_row(split))
    report_path = out_dir / "report.tsv"
    report_path.write_text("\n".join(rows) + "\n", encoding="utf-8")
    bars_png = figures.metric_bars(
        [(split, results[split]) for split in args.splits],
        out_dir / "metrics.png")
    manifest = _write_manifest(
        out_dir, "eval", ckpt.config, [], {**paths, "ckpt": ckpt_path},
        outputs={"report": report_path, "metrics_figure": bars_png},
        results=results, started=started)
    for split in args.splits:
        m = results[split]
        print(f"# {split}: MR {m['MR']:.2f}  MRR {m['MRR']:.4f}  "
              f"H@1 {m['H@1']:.4f}  H@10 {m['H@10']:.4f}  "
              f"({m['n_queries']} queries)")
    artifacts = []
    _emit(artifacts, report_path, bars_png, manifest)
    return 0


def _cmd_zeroshot(args):
    started = _now()
    ckpt_path = _require_file(args.ckpt, "--ckpt")
    paths = _kb_paths(args)
    kb = _load_kb_from(paths)
    ckpt = load_checkpoint(ckpt_path)
    model = ckpt.make_model()
    encoder = ckpt.make_encoder()
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    results = {}
    rows = [EVAL_HEADER]
    for split in args.splits:
        rep = zero_shot_evaluate(model, encoder, kb, split,
                                 use_clusters=not args.no_clusters)
        results[split] = rep.as_dict()
        rows.append(rep.tsv_row(split))
    baseline = (kb.num_entities + 1) / 2.0
    results["random_baseline_MR"] = baseline
    report_path = out_dir / "zeroshot.tsv"
    report_path.write_text("\n".join(rows) + "\n", encoding="utf-8")
    bars_png = figures.metric_bars(
        [(split, results[split]) for split in args.splits],
        out_dir / "metrics.png")
    manifest = _write_manifest(
        out_dir, "zeroshot", ckpt.config, [], {**paths, "ckpt": ckpt_path},
        outputs={"report": report_path, "metrics_figure": bars_png},
        results=results, started=started)
    for split in args.splits:
        m = results[split]
        print(f"# {split}: MR {m['MR']:.2f} vs random {baseline:.2f}  "
              f"MRR {m['MRR']:.4f}  ({m['n_queries']} queries)")
    artifacts = []
    _emit(artifacts, report_path, bars_png, manifest)
    return 0


# -- diagnostics --------------------------------------------------------------


def _protocol_config(args, ckpt):
    """Fine-tune config: checkpoint structure, fresh schedule, flag wins."""
    base = dict(TrainConfig(mode="finetune").to_dict())
    for key in ("model", "encoder", "dim", "word_dim", "dropout",
                "n3_weight", "learning_rate", "train_word_embeddings"):
        if key in ckpt.config:
            base[key] = ckpt.config[key]
    base["mode"] = "finetune"
    return _resolve_config(args, "finetune", base=TrainConfig.from_dict(base))


def _cmd_diagnose(args):
    started = _now()
    ckpt_path = _require_file(args.ckpt, "--ckpt")
    doge_path = _require_file(args.doge, "--doge")
    ckpt = load_checkpoint(ckpt_path)
    instances = load_doge(doge_path)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    inputs = {"ckpt": ckpt_path, "doge": doge_path}
    kb = None
    if getattr(args, "kb", None) or getattr(args, "train", None):
        paths = _kb_paths(args)
        kb = _load_kb_from(paths)
        inputs.update(paths)

    outputs = {}
    results = {}
    artifacts = []

    if args.suite == "ranks":
        model, encoder = ckpt.make_model(), ckpt.make_encoder()
        ranks = rank_instances(model, encoder, instances, kb=kb)
        rank_path = out_dir / "ranks.tsv"
        with open(rank_path, "w", encoding="utf-8") as f:
            f.write("id\tkind\tgroup\trank\n")
            for inst, r in zip(instances, ranks):
                f.write(f"{inst.id}\t{inst.kind}\t{inst.group or '-'}"
                        f"\t{r:.1f}\n")
        by_kind = {}
        for inst, r in zip(instances, ranks):
            by_kind.setdefault(inst.kind, []).append(r)
        summary_path = out_dir / "summary.tsv"
        rows = ["kind\tMR\tMRR\tH@1\tn_queries"]
        bar_rows = []
        for kind in sorted(by_kind):
            rep = RankingReport(np.array(by_kind[kind]), hits_at=(1,))
            m = rep.as_dict()
            rows.append(f"{kind}\t{m['MR']:.4f}\t{m['MRR']:.6f}"
                        f"\t{m['H@1']:.6f}\t{m['n_queries']}")
            results[kind] = m
            bar_rows.append((kind, m))
        summary_path.write_text("\n".join(rows) + "\n", encoding="utf-8")
        png = figures.metric_bars(bar_rows, out_dir / "ranks.png",
                                  keys=("MRR", "H@1"))
        outputs = {"ranks": rank_path, "summary": summary_path, "figure": png}
        print(f"# ranked {len(instances)} instances over "
              f"{len(by_kind)} kinds")
        _emit(artifacts, rank_path, summary_path, png)

    elif args.suite == "consistency":
        model, encoder = ckpt.make_model(), ckpt.make_encoder()
        pairs = pair_twins(instances)
        if not pairs:
            raise ValueError("no twin pairs in the instance file")
        scored = {}
        for a, b in pairs:
            for inst in (a, b):
                scored.setdefault(inst.id, inst)
        insts = list(scored.values())
        ranks = rank_instances(model, encoder, insts, kb=kb)
        rank_of = {inst.id: r for inst, r in zip(insts, ranks)}
        by_kind = {}
        all_diffs = []
        for a, b in pairs:
            d = rank_of[a.id] - rank_of[b.id]
            by_kind.setdefault(b.kind, []).append(d)
            all_diffs.append(d)
        rows = [CONSISTENCY_HEADER]
        for kind in sorted(by_kind):
            diffs = np.array(by_kind[kind])
            stats = ConsistencyStats(float(diffs.mean()), float(diffs.std()),
                                     len(diffs))
            rows.append(stats.tsv_row(kind))
            results[kind] = {"mean": stats.mean, "stdev": stats.stdev,
                             "n_pairs": stats.n_pairs}
        alld = np.array(all_diffs)
        rows.append(ConsistencyStats(float(alld.mean()), float(alld.std()),
                                     len(alld)).tsv_row("all"))
        report_path = out_dir / "consistency.tsv"
        report_path.write_text("\n".join(rows) + "\n", encoding="utf-8")
        png = figures.rank_diff_histogram(alld, out_dir / "consistency.png")
        outputs = {"report": report_path, "figure": png}
        print(f"# {len(pairs)} twin pairs; mean rank shift "
              f"{alld.mean():+.3f} (population stdev {alld.std():.3f})")
        _emit(artifacts, report_path, png)

    elif args.suite == "deductive":
        at = _require_file(args.added_train, "--added-train")
        av = _require_file(args.added_valid, "--added-valid")
        inputs.update({"added_train": at, "added_valid": av})
        config = _protocol_config(args, ckpt)
        reports = deductive_protocol(ckpt, instances, at, av, config)
        rows = ["condition\tMR\tMRR\tH@1\tH@10\tn_queries"]
        bar_rows = []
        for cond in DEDUCTIVE_ROW_ORDER:
            rep = reports[cond]
            rows.append(rep.tsv_row(cond))
            results[cond] = rep.as_dict()
            bar_rows.append((cond, rep.as_dict()))
        report_path = out_dir / "deductive.tsv"
        report_path.write_text("\n".join(rows) + "\n", encoding="utf-8")
        png = figures.metric_bars(bar_rows, out_dir / "deductive.png",
                                  keys=("MRR", "H@1"))
        outputs = {"report": report_path, "figure": png}
        h1 = {c: results[c]["H@1"] for c in DEDUCTIVE_ROW_ORDER}
        print("# H@1 background {background:.3f} / no-added {no_added:.3f} "
              "/ with-added {with_added:.3f}".format(**h1))
        _emit(artifacts, report_path, png)

    elif args.suite == "stereotype":
        at = _require_file(args.added_train, "--added-train")
        av = _require_file(args.added_valid, "--added-valid")
        inputs.update({"added_train": at, "added_valid": av})
        config = _protocol_config(args, ckpt)
        report = stereotype_report(ckpt, instances, at, av, config)
        report_path = out_dir / "stereotype.tsv"
        report_path.write_text(report.tsv(), encoding="utf-8")
        tests_path = out_dir / "wilcoxon.json"
        with open(tests_path, "w", encoding="utf-8") as f:
            json.dump(report.tests, f, indent=2, sort_keys=True)
            f.write("\n")
        png = figures.grouped_condition_bars(report.rows,
                                             out_dir / "stereotype.png")
        outputs = {"report": report_path, "tests": tests_path, "figure": png}
        results = report.summary()
        for cond, res in report.tests.items():
            if "p" in res:
                print(f"# {cond}: Wilcoxon W={res['W']:.1f} p={res['p']:.4f} "
                      f"over {res['n_pairs']} name-swap pairs")
            else:
                print(f"# {cond}: {res['note']} "
                      f"({res['n_pairs']} name-swap pairs)")
        _emit(artifacts, report_path, tests_path, png)

    manifest = _write_manifest(
        out_dir, f"diagnose:{args.suite}", ckpt.config, [], inputs,
        outputs=outputs, results=results, started=started)
    _emit(artifacts, manifest)
    return 0


# -- grid search, generation, aggregation -------------------------------------


def _cmd_gridsearch(args):
    started = _now()
    paths = _kb_paths(args)
    kb = _load_kb_from(paths)
    grid_path = _require_file(args.grid, "--grid")
    try:
        grid = json.loads(grid_path.read_text())
    except json.JSONDecodeError as e:
        raise UsageError(f"--grid is not valid JSON: {e}")
    if not isinstance(grid, dict) or not grid:
        raise UsageError("--grid must be a JSON object of field: [values]")
    unknown = sorted(set(grid) - set(_CONFIG_KEYS))
    if unknown:
        raise UsageError(f"unknown grid keys: {', '.join(unknown)}")
    for k, v in grid.items():
        if not isinstance(v, list) or not v:
            raise UsageError(f"grid key {k!r} must map to a nonempty list")
    config = _resolve_config(args, args.mode)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    result = grid_search(config, grid, kb)
    table_path = out_dir / "grid.tsv"
    table_path.write_text("cell\tconfig\tMR\tMRR\tH@10\n"
                          + result.table_text(), encoding="utf-8")
    ckpt_path = out_dir / "best.ckpt"
    result.best.checkpoint.save(ckpt_path)
    cfg = config.to_dict()
    cfg.pop("seed")
    manifest = _write_manifest(
        out_dir, "gridsearch", cfg, [config.seed],
        {**paths, "grid": grid_path},
        outputs={"table": table_path, "best_checkpoint": ckpt_path},
        results={"best_config": result.best_config.to_dict(),
                 "best_valid": result.best.best_valid,
                 "grid": grid}, started=started)
    best_mrr = result.best.best_valid.get("MRR", float("nan"))
    print(f"# {len(result.table)} cells; best valid MRR {best_mrr:.4f}")
    artifacts = []
    _emit(artifacts, table_path, ckpt_path, manifest)
    return 0


def _cmd_gen_diagnostics(args):
    out_dir = Path(args.out)
    manifest = synth.generate_synthetic_diagnostics(out_dir, seed=args.seed,
                                                    size=args.size)
    print(f"# {manifest['n_corpus_facts']} corpus facts, "
          f"{manifest['n_instances']} instances, "
          f"{manifest['n_added_train']} added facts")
    artifacts = []
    _emit(artifacts, *sorted(manifest["paths"].values()))
    _emit(artifacts, out_dir / "manifest.json")
    return 0


def _cmd_aggregate(args):
    dicts = []
    for fname in args.files:
        p = _require_file(fname, "metrics file")
        try:
            d = json.loads(p.read_text())
        except json.JSONDecodeError as e:
            raise UsageError(f"{p}: not valid JSON: {e}")
        if not isinstance(d, dict):
            raise UsageError(f"{p}: expected a JSON object of metrics")
        dicts.append(d)
    agg = aggregate_metrics(dicts)
    text = aggregate_table(agg)
    sys.stdout.write(text)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text, encoding="utf-8")
        print(out)
    return 0


# -- parser -------------------------------------------------------------------


def _add_kb_flags(p):
    p.add_argument("--kb", help="directory holding train/valid/test.tsv")
    p.add_argument("--train", help="training triples (TSV)")
    p.add_argument("--valid", help="validation triples (TSV)")
    p.add_argument("--test", help="test triples (TSV)")
    p.add_argument("--clusters", help="entity cluster file (TSV)")


def _add_config_flags(p):
    p.add_argument("--config", help="JSON config file (flags override it)")
    p.add_argument("--model", choices=sorted(MODEL_KINDS))
    p.add_argument("--encoder", choices=["table", "gru"])
    p.add_argument("--dim", type=int)
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--validate-every", dest="validate_every", type=int)
    p.add_argument("--dropout", type=float)
    p.add_argument("--n3-weight", dest="n3_weight", type=float)
    p.add_argument("--word-dim", dest="word_dim", type=int)
    p.add_argument("--word-vectors", dest="word_vectors",
                   help="pre-trained word vectors (text format)")
    p.add_argument("--freeze-words", action="store_true",
                   help="do not update word embeddings during training")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="kbct",
        description="Train, transfer, and diagnose KB-completion models.")
    sub = parser.add_subparsers(dest="command", required=True)

    for mode in ("pretrain", "finetune"):
        p = sub.add_parser(mode, help=f"{mode} a model")
        _add_kb_flags(p)
        _add_config_flags(p)
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seeds", type=int,
                       help="number of seeds (runs seeds 1..N; default 5)")
        if mode == "finetune":
            p.add_argument("--init", help="checkpoint to initialize from")

    p = sub.add_parser("eval", help="filtered ranking evaluation")
    p.add_argument("--ckpt", required=True)
    _add_kb_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--splits", nargs="+", default=["valid", "test"],
                   choices=["train", "valid", "test"])
    p.add_argument("--no-clusters", action="store_true",
                   help="score exact gold entities only")

    p = sub.add_parser("zeroshot", help="evaluate on a new KB by names only")
    p.add_argument("--ckpt", required=True)
    _add_kb_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--splits", nargs="+", default=["test"],
                   choices=["train", "valid", "test"])
    p.add_argument("--no-clusters", action="store_true")

    p = sub.add_parser("diagnose", help="run a diagnostic suite")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--doge", required=True, help="instance file (JSON lines)")
    p.add_argument("--suite", required=True,
                   choices=["ranks", "consistency", "deductive", "stereotype"])
    p.add_argument("--out", required=True)
    _add_kb_flags(p)
    p.add_argument("--added-train", dest="added_train",
                   help="new facts for the fine-tuned condition")
    p.add_argument("--added-valid", dest="added_valid",
                   help="validation slice of the new facts")
    _add_config_flags(p)

    p = sub.add_parser("gridsearch", help="train every config in a lattice")
    _add_kb_flags(p)
    _add_config_flags(p)
    p.add_argument("--grid", required=True,
                   help="JSON object: config field -> list of values")
    p.add_argument("--mode", choices=["pretrain", "finetune"],
                   default="finetune")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", dest="seed", type=int)

    p = sub.add_parser("gen-diagnostics",
                       help="generate the synthetic diagnostic world")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=1)

    p = sub.add_parser("aggregate", help="mean/stdev over metric files")
    p.add_argument("files", nargs="+")
    p.add_argument("--out", help="also write the table here")
    return parser


_DISPATCH = {
    "pretrain": lambda a: _cmd_train(a, "pretrain"),
    "finetune": lambda a: _cmd_train(a, "finetune"),
    "eval": _cmd_eval,
    "zeroshot": _cmd_zeroshot,
    "diagnose": _cmd_diagnose,
    "gridsearch": _cmd_gridsearch,
    "gen-diagnostics": _cmd_gen_diagnostics,
    "aggregate": _cmd_aggregate,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _DISPATCH[args.command](args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # runtime failures keep their category visible
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
