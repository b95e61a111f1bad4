"""Command-line pipeline: synth -> fit -> embed -> classify -> eval.

Subcommands: synth, fit, embed, classify, roc, match, eval-table1. A JSON
config file (``--config``) supplies defaults; any flag overrides it. All
randomness flows from ``--seed``. Exit codes: 0 success, 1 usage/config error,
2 data error, 3 numerical failure. Output files are written atomically and
every command leaves a manifest (no timestamps, so reruns are byte-identical).
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import classify as cls
from . import embedding as emb
from . import matcher, model, synth
from .graphs import GraphDataset, GraphError, load_jsonl, save_jsonl
from .matcher import AnnealSchedule, MatchError
from .model import ModelError
from .synth import SynthError

EVAL_LEVELS = (0.05, 0.10, 0.15, 0.20)


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _write_json(path, obj) -> None:
    atomic_write_text(path, json.dumps(obj, sort_keys=True, indent=1) + "\n")


def _write_manifest(out_dir, command, config, inputs, outputs, counters=None,
                    diagnostics=None, name="manifest.json") -> None:
    manifest = {
        "command": command,
        "config": config,
        "inputs": {str(p): _sha256(p) for p in inputs},
        "outputs": sorted(str(p) for p in outputs),
        "counters": counters or {},
        "diagnostics": diagnostics or {},
    }
    _write_json(Path(out_dir) / name, manifest)


def _schedule_from_args(args) -> AnnealSchedule:
    kw = {}
    overrides = dict(args.schedule or {})
    mapping = {"beta_initial": args.beta_initial, "beta_rate": args.beta_rate,
               "beta_final": args.beta_final, "sinkhorn_iters": args.sinkhorn_iters,
               "assignment_iters_per_beta": args.assign_iters}
    for key, flag in mapping.items():
        if flag is not None:
            kw[key] = flag
        elif key in overrides:
            kw[key] = overrides[key]
    try:
        return AnnealSchedule(**{k: (int(v) if "iters" in k else float(v))
                                 for k, v in kw.items()})
    except MatchError as exc:
        raise UsageError(str(exc)) from exc


def _parse_schedule_kv(text: str) -> dict:
    out = {}
    for item in text.split(","):
        if not item:
            continue
        if "=" not in item:
            raise UsageError(f"bad schedule item {item!r}, expected key=value")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _add_schedule_flags(p) -> None:
    p.add_argument("--schedule", type=_parse_schedule_kv, default=None,
                   help="comma-separated schedule overrides, e.g. beta_rate=1.1")
    p.add_argument("--beta-initial", type=float, default=None)
    p.add_argument("--beta-rate", type=float, default=None)
    p.add_argument("--beta-final", type=float, default=None)
    p.add_argument("--sinkhorn-iters", type=int, default=None)
    p.add_argument("--assign-iters", type=int, default=None)


def _add_model_flags(p) -> None:
    p.add_argument("--sigma0", type=float, default=1.0,
                   help="initial attribute covariance scale")
    p.add_argument("--cov-floor", type=float, default=1e-4,
                   help="covariance eigenvalue floor")
    p.add_argument("--epsilon-outlier", type=float, default=1e-6,
                   help="density floor charged per unmatched outcome element")
    p.add_argument("--p-min", type=float, default=1e-6,
                   help="occurrence probability clamp before logarithms")


def _synth_spec(args) -> synth.DistortionSpec:
    try:
        return synth.DistortionSpec(
            level=args.level, base_nodes=args.base_nodes,
            edge_density=args.edge_density, node_dim=args.node_dim,
            edge_dim=args.edge_dim, attr_noise_sigma=args.attr_noise_sigma,
            seed=args.seed)
    except SynthError as exc:
        raise UsageError(str(exc)) from exc


def _add_synth_flags(p) -> None:
    p.add_argument("--level", type=float, required=False, default=0.05)
    p.add_argument("--per-class", type=int, default=50)
    p.add_argument("--base-nodes", type=int, default=10)
    p.add_argument("--edge-density", type=float, default=0.4)
    p.add_argument("--node-dim", type=int, default=2)
    p.add_argument("--edge-dim", type=int, default=1)
    p.add_argument("--attr-noise-sigma", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)


def _save_dataset_atomic(dataset, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    save_jsonl(dataset, tmp)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# Subcommands

def cmd_synth(args) -> int:
    spec = _synth_spec(args)
    train, test = synth.make_dataset(spec, args.per_class)
    _save_dataset_atomic(train, args.out)
    _save_dataset_atomic(test, args.out_test)
    out_dir = Path(args.out).parent
    _write_manifest(out_dir, "synth", vars_config(args), [],
                    [args.out, args.out_test],
                    name=Path(args.out).name + ".manifest.json")
    return 0


def vars_config(args) -> dict:
    skip = {"func", "config"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


def cmd_fit(args) -> int:
    dataset = load_jsonl(args.data)
    schedule = _schedule_from_args(args)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = []
    counters = {}
    diagnostics = {}
    for category in dataset.categories:
        graphs = dataset.class_slice(category)
        matcher.reset_match_counter()
        fitted = model.fit(graphs, category, dataset.node_dim, dataset.edge_dim,
                           schedule=schedule, sigma0=args.sigma0,
                           epsilon_outlier=args.epsilon_outlier,
                           p_min=args.p_min, cov_floor=args.cov_floor)
        counters[f"fit_matches_{category}"] = matcher.match_call_count()
        diagnostics[f"training_cost_{category}"] = model.dataset_cost(
            fitted, graphs, schedule)
        path = out_dir / f"model_{category}.json"
        atomic_write_text(path, json.dumps(model.model_to_obj(fitted),
                                           sort_keys=True, indent=1) + "\n")
        outputs.append(path)
    matcher.reset_match_counter()
    _write_manifest(out_dir, "fit", vars_config(args), [args.data], outputs,
                    counters, diagnostics)
    return 0


def _load_models(models_dir, categories=None):
    models_dir = Path(models_dir)
    paths = sorted(models_dir.glob("model_*.json"))
    if not paths:
        raise GraphError(f"no model_*.json files in {models_dir}")
    models = [model.load_model(p) for p in paths]
    if categories is not None:
        by_cat = {m.category: m for m in models}
        missing = [c for c in categories if c not in by_cat]
        if missing:
            raise GraphError(f"missing models for categories {missing}")
        models = [by_cat[c] for c in categories]
    return models


def cmd_embed(args) -> int:
    dataset = load_jsonl(args.data)
    models = _load_models(args.models_dir, dataset.categories)
    schedule = _schedule_from_args(args)
    matcher.reset_match_counter()
    embeddings = emb.embed_dataset(models, dataset, schedule)
    n_matches = matcher.reset_match_counter()
    if args.stats:
        stats = emb.read_stats_json(args.stats)
    else:
        stats = (emb.standardization_stats(embeddings) if embeddings
                 else {"mean": [0.0] * len(models), "std": [1.0] * len(models)})
    prefix = Path(args.out)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    raw_path = prefix.with_name(prefix.name + ".csv")
    std_path = prefix.with_name(prefix.name + ".std.csv")
    stats_path = prefix.with_name(prefix.name + ".std.json")
    tmp = raw_path.with_name(raw_path.name + ".tmp")
    emb.write_embeddings_csv(tmp, embeddings, n_features=len(models))
    os.replace(tmp, raw_path)
    tmp = std_path.with_name(std_path.name + ".tmp")
    emb.write_embeddings_csv(tmp, emb.apply_standardization(embeddings, stats),
                             n_features=len(models))
    os.replace(tmp, std_path)
    _write_json(stats_path, stats)
    inputs = [args.data] + [str(p) for p in sorted(Path(args.models_dir).glob("model_*.json"))]
    _write_manifest(prefix.parent, "embed", vars_config(args), inputs,
                    [raw_path, std_path, stats_path],
                    {"embed_matches": n_matches},
                    name=prefix.name + ".manifest.json")
    return 0


def _parse_grid(args):
    if args.grid:
        specs = []
        for item in json.loads(Path(args.grid).read_text(encoding="utf-8")):
            specs.append(cls.KernelSpec(**item))
        return specs
    return cls.default_kernel_grid()


def _classify_core(train_emb_raw, test_emb_raw, categories, args, out_dir,
                   datasets=None, models=None, schedule=None):
    """Shared by cmd_classify and eval-table1. Returns (metrics, outputs)."""
    outputs = []
    metrics = {}
    stats = emb.standardization_stats(train_emb_raw)
    train_std = emb.apply_standardization(train_emb_raw, stats)
    test_std = emb.apply_standardization(test_emb_raw, stats)
    grid = _parse_grid(args)
    chosen = cls.model_select(train_std, grid, folds=args.folds)
    state = cls.svm_train(train_std, chosen, categories)
    lf_preds = cls.svm_predict(state, test_std)
    metrics["kernel"] = {"kind": chosen.kind, "degree": chosen.degree,
                         "gamma": chosen.gamma, "C": chosen.C}
    metrics["lf"] = _pred_metrics(lf_preds)
    path = out_dir / "predictions_lf.csv"
    cls.write_predictions_csv(path, lf_preds)
    outputs.append(path)

    baselines = set((args.baselines or "").split(",")) - {""}
    preds_by_name = {"lf": lf_preds}
    if "ml" in baselines:
        ml_preds = cls.rag_ml_classify(test_emb_raw, categories)
        metrics["ml"] = _pred_metrics(ml_preds)
        path = out_dir / "predictions_ml.csv"
        cls.write_predictions_csv(path, ml_preds)
        outputs.append(path)
        preds_by_name["ml"] = ml_preds
        p_value, significant = cls.significance_test(lf_preds, ml_preds, args.alpha)
        metrics["significance_lf_vs_ml"] = {"p_value": p_value,
                                            "significant": significant,
                                            "alpha": args.alpha}
    if "knn" in baselines:
        if datasets is None:
            raise UsageError("kNN baseline needs --train-data and --test-data")
        train_ds, test_ds = datasets
        train_dist = cls.pairwise_distance_matrix(train_ds.graphs, schedule)
        k = args.k or cls.knn_select_k(train_ds, (1, 3, 5), schedule, train_dist)
        test_dist = cls.graph_distance_matrix(test_ds.graphs, train_ds.graphs,
                                              schedule)
        knn_preds = cls.knn_graph_classify(train_ds, test_ds, k, schedule,
                                           distances=test_dist)
        metrics["knn"] = _pred_metrics(knn_preds)
        metrics["knn"]["k"] = k
        path = out_dir / "predictions_knn.csv"
        cls.write_predictions_csv(path, knn_preds)
        outputs.append(path)
        preds_by_name["knn"] = knn_preds
    return metrics, outputs, preds_by_name


def _pred_metrics(preds: cls.PredictionSet) -> dict:
    out = {
        "accuracy": preds.accuracy(),
        "per_class_accuracy": preds.per_class_accuracy(),
        "confusion": preds.confusion(),
    }
    if len(preds.categories) == 2:
        try:
            out["auc"] = cls.roc_auc(preds)
        except cls.ClassifyError:
            out["auc"] = None
    return out


def cmd_classify(args) -> int:
    train_emb_raw = emb.read_embeddings_csv(args.train_emb)
    test_emb_raw = emb.read_embeddings_csv(args.test_emb)
    schedule = _schedule_from_args(args)
    datasets = None
    if args.train_data and args.test_data:
        datasets = (load_jsonl(args.train_data), load_jsonl(args.test_data))
        categories = tuple(datasets[0].categories)
    else:
        categories = tuple(sorted({e.label for e in train_emb_raw if e.label}))
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics, outputs, _ = _classify_core(train_emb_raw, test_emb_raw, categories,
                                         args, out_dir, datasets=datasets,
                                         schedule=schedule)
    metrics_path = out_dir / "metrics.json"
    _write_json(metrics_path, metrics)
    outputs.append(metrics_path)
    inputs = [args.train_emb, args.test_emb]
    if datasets:
        inputs += [args.train_data, args.test_data]
    _write_manifest(out_dir, "classify", vars_config(args), inputs, outputs)
    return 0


def cmd_roc(args) -> int:
    categories = args.categories.split(",") if args.categories else None
    if categories is None:
        labels = []
        preds = cls.read_predictions_csv(args.predictions, ())
        labels = sorted({r.true_label for r in preds.records if r.true_label})
        categories = labels
    preds = cls.read_predictions_csv(args.predictions, categories)
    if len(categories) != 2:
        raise GraphError("roc requires exactly two categories")
    points = cls.roc_points(preds, positive=args.positive)
    auc = cls.roc_auc(preds, positive=args.positive)
    lines = ["fpr,tpr"] + [f"{fpr!r},{tpr!r}" for fpr, tpr in points]
    atomic_write_text(args.out, "\n".join(lines) + "\n")
    out_dir = Path(args.out).parent
    _write_manifest(out_dir, "roc", vars_config(args), [args.predictions],
                    [args.out], diagnostics={"auc": auc},
                    name=Path(args.out).name + ".manifest.json")
    print(f"auc {auc!r}")
    return 0


def cmd_match(args) -> int:
    dataset = load_jsonl(args.data)
    by_id = {g.graph_id: g for g in dataset.graphs}
    for gid in (args.source, args.target):
        if gid not in by_id:
            raise GraphError(f"graph id {gid!r} not found in {args.data}")
    source, target = by_id[args.source], by_id[args.target]
    schedule = _schedule_from_args(args)
    morphism, _, score = matcher.match(
        source, target, matcher.attribute_compatibility(args.bandwidth), schedule)
    node_map = {source.node_ids[a]: (None if t is None else target.node_ids[t])
                for a, t in enumerate(morphism.node_map)}
    edge_map = {}
    for e, te in enumerate(morphism.edge_map):
        u, v = source.edges[e]
        key = f"{source.node_ids[u]}--{source.node_ids[v]}"
        if te is None:
            edge_map[key] = None
        else:
            tu, tv = target.edges[te]
            edge_map[key] = f"{target.node_ids[tu]}--{target.node_ids[tv]}"
    result = {"source": args.source, "target": args.target,
              "node_map": node_map, "edge_map": edge_map, "score": score}
    text = json.dumps(result, sort_keys=True, indent=1)
    if args.out:
        atomic_write_text(args.out, text + "\n")
    else:
        print(text)
    return 0


def cmd_eval_table1(args) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    levels = ([float(x) for x in args.levels.split(",")] if args.levels
              else list(EVAL_LEVELS))
    schedule = _schedule_from_args(args)
    table = {"levels": levels, "per_class": args.per_class, "seed": args.seed,
             "results": {}}
    all_outputs = []
    counters = {}
    for level in levels:
        tag = f"{level:.2f}"
        level_dir = out_dir / f"level_{tag}"
        level_dir.mkdir(parents=True, exist_ok=True)
        spec = synth.DistortionSpec(
            level=level, base_nodes=args.base_nodes, edge_density=args.edge_density,
            node_dim=args.node_dim, edge_dim=args.edge_dim,
            attr_noise_sigma=args.attr_noise_sigma, seed=args.seed)
        train, test = synth.make_dataset(spec, args.per_class)
        _save_dataset_atomic(train, level_dir / "train.jsonl")
        _save_dataset_atomic(test, level_dir / "test.jsonl")

        models = []
        for category in train.categories:
            matcher.reset_match_counter()
            fitted = model.fit(train.class_slice(category), category,
                               train.node_dim, train.edge_dim, schedule=schedule,
                               sigma0=args.sigma0,
                               epsilon_outlier=args.epsilon_outlier,
                               p_min=args.p_min, cov_floor=args.cov_floor)
            counters[f"{tag}_fit_matches_{category}"] = matcher.match_call_count()
            models.append(fitted)
            atomic_write_text(level_dir / f"model_{category}.json",
                              json.dumps(model.model_to_obj(fitted),
                                         sort_keys=True, indent=1) + "\n")

        matcher.reset_match_counter()
        train_emb = emb.embed_dataset(models, train, schedule)
        test_emb = emb.embed_dataset(models, test, schedule)
        counters[f"{tag}_embed_matches"] = matcher.reset_match_counter()

        metrics, outputs, preds = _classify_core(
            train_emb, test_emb, train.categories, args, level_dir,
            datasets=(train, test), schedule=schedule)
        metrics_path = level_dir / "metrics.json"
        _write_json(metrics_path, metrics)
        all_outputs += outputs + [metrics_path]
        table["results"][tag] = {
            "rag_lf": metrics["lf"]["accuracy"],
            "rag_ml": metrics.get("ml", {}).get("accuracy"),
            "knn": metrics.get("knn", {}).get("accuracy"),
            "lf_auc": metrics["lf"].get("auc"),
            "knn_auc": metrics.get("knn", {}).get("auc"),
            "significance_lf_vs_ml": metrics.get("significance_lf_vs_ml"),
        }
    table_path = out_dir / "table1.json"
    _write_json(table_path, table)
    rows = ["level,rag_lf,rag_ml,knn"]
    for level in levels:
        r = table["results"][f"{level:.2f}"]
        rows.append(f"{level},{r['rag_lf']},{r['rag_ml']},{r['knn']}")
    atomic_write_text(out_dir / "table1.csv", "\n".join(rows) + "\n")
    _write_manifest(out_dir, "eval-table1", vars_config(args), [],
                    all_outputs + [table_path, out_dir / "table1.csv"], counters)
    return 0


# ---------------------------------------------------------------------------
# Parser

def build_parser() -> _Parser:
    parser = _Parser(prog="ragkit", description=__doc__)
    parser.add_argument("--config", type=str, default=None,
                        help="JSON config file; flags override its values")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic two-class dataset")
    _add_synth_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--out-test", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fit", help="fit one prototype model per category")
    p.add_argument("data", help="training dataset (JSON-Lines)")
    p.add_argument("--out-dir", required=True)
    _add_model_flags(p)
    _add_schedule_flags(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("embed", help="embed a dataset into likelihood space")
    p.add_argument("--models-dir", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output prefix")
    p.add_argument("--stats", default=None,
                   help="standardization stats JSON (from the training split)")
    _add_schedule_flags(p)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("classify", help="train/evaluate classifiers on embeddings")
    p.add_argument("--train-emb", required=True)
    p.add_argument("--test-emb", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--baselines", default="", help="comma list from {knn,ml}")
    p.add_argument("--train-data", default=None)
    p.add_argument("--test-data", default=None)
    p.add_argument("--k", type=int, default=0, help="kNN k (0: select by CV)")
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--grid", default=None, help="kernel grid JSON file")
    _add_schedule_flags(p)
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("roc", help="ROC curve points for 2-class predictions")
    p.add_argument("--predictions", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--positive", default=None)
    p.add_argument("--categories", default=None, help="comma list, order fixed")
    p.set_defaults(func=cmd_roc)

    p = sub.add_parser("match", help="match two graphs from a dataset file")
    p.add_argument("data")
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--bandwidth", type=float, default=1.0)
    p.add_argument("--out", default=None)
    _add_schedule_flags(p)
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("eval-table1", help="distortion sweep reproduction")
    _add_synth_flags(p)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--levels", default=None, help="comma list, default sweep")
    p.add_argument("--baselines", default="knn,ml")
    p.add_argument("--k", type=int, default=0, help="kNN k (0: select by CV)")
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--grid", default=None)
    _add_model_flags(p)
    _add_schedule_flags(p)
    p.set_defaults(func=cmd_eval_table1)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args, remaining = parser.parse_known_args(argv)
        if args.config:
            cfg = json.loads(Path(args.config).read_text(encoding="utf-8"))
            parser.set_defaults(**cfg)
            args = parser.parse_args(argv)
        elif remaining:
            raise UsageError(f"unrecognized arguments: {' '.join(remaining)}")
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (GraphError, MatchError, ModelError, SynthError, cls.ClassifyError,
            emb.EmbeddingError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except (np.linalg.LinAlgError, FloatingPointError, OverflowError,
            ZeroDivisionError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
