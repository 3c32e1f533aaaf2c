"""Command-line surface: synth, score, correlate, cluster, search, prune,
report, plus a toy-trainer helper.

Every command writes a run manifest next to its outputs with the resolved
flags, seed, snapshot hash, and timestamps, so any run can be replayed from
the manifest alone. Exit codes are a stable contract: 0 success, 2 usage
error, 3 evaluator failure, 4 snapshot validation failure.
"""

from __future__ import annotations

import argparse
import datetime
import json
import os
import sys

import numpy as np

from . import __version__
from .blend import blend_scores, make_mask, prune_plan
from .clustering import cluster_all, search_space_size
from .criteria import ALL_CRITERIA, CriterionId, CriterionUnavailableError, score_all
from .evolution import EAConfig, Gene, finalize, search
from .fitness import EvaluatorError, ExternalEvaluator, ExternalPool, OracleEvaluator
from .rankstats import correlation_matrices
from .snapshot import (
    NetworkSnapshot,
    PruneConfig,
    SnapshotError,
    SynthSpec,
    load_planted,
    load_snapshot,
    save_planted,
    save_snapshot,
    snapshot_digest,
    synth_generate,
)
from .toynet import PRETRAIN_EPOCHS, ToyEvaluator, toy_build, toy_pretrain

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_EVALUATOR = 3
EXIT_SNAPSHOT = 4

PLANTED_SIDECAR = "planted_importance.json"

PROFILES = {
    "cifar": dict(population=20, iterations=50, drop_ratio=0.08, finetune_epochs=3),
    "imagenet": dict(population=10, iterations=30, drop_ratio=0.1, finetune_epochs=1),
}


class UsageError(Exception):
    pass


def _utcnow() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


def _write_json(path: str, obj) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")
    os.replace(tmp, path)


def _write_manifest(out_dir: str, command: str, flags: dict, seed,
                    snapshot_hash: str | None, outputs: list[str], started: str) -> None:
    manifest = {
        "command": command,
        "flags": {k: v for k, v in flags.items() if k not in ("func", "command")},
        "seed": seed,
        "engine_version": __version__,
        "snapshot_sha256": snapshot_hash,
        "started_at": started,
        "finished_at": _utcnow(),
        "outputs": sorted(outputs),
    }
    _write_json(os.path.join(out_dir, "run_manifest.json"), manifest)


def _load_snapshot_dir(path: str) -> NetworkSnapshot:
    if not os.path.isdir(path):
        raise UsageError(f"snapshot directory not found: {path}")
    return load_snapshot(path)


def _resolve_evaluator(spec: str, snapshot: NetworkSnapshot, snapshot_dir: str,
                       timeout: float, workers: int, seed: int):
    if spec == "oracle":
        sidecar = os.path.join(snapshot_dir, PLANTED_SIDECAR)
        if not os.path.exists(sidecar):
            raise UsageError(f"oracle evaluator needs {sidecar}")
        return OracleEvaluator(load_planted(sidecar))
    if spec == "toy":
        return ToyEvaluator.from_snapshot(snapshot, seed=seed)
    if spec.startswith("external:"):
        command = spec[len("external:"):]
        if not command:
            raise UsageError("external evaluator command is empty")
        ev = ExternalEvaluator(command, snapshot_digest(snapshot_dir), timeout)
        if workers > 1:
            return ExternalPool(ev, workers)
        return ev
    raise UsageError(f"unknown evaluator {spec!r} (expected oracle, toy, or external:<cmd>)")


def _parse_filters(text: str):
    parts = [p.strip() for p in text.split(",") if p.strip()]
    if not parts:
        raise UsageError("--filters must name at least one layer width")
    values = tuple(int(p) for p in parts)
    return values[0] if len(values) == 1 else values


def _scored(snapshot: NetworkSnapshot, available_only: bool):
    return score_all(snapshot, available_only=available_only)


# -- commands ----------------------------------------------------------------


def cmd_synth(args) -> int:
    started = _utcnow()
    spec = SynthSpec(
        num_layers=args.layers,
        filters_per_layer=_parse_filters(args.filters),
        fan_in=args.fan_in,
        seed=args.seed,
        hist_bins=args.bins,
        sample_total=args.samples,
    )
    snapshot, planted = synth_generate(spec)
    os.makedirs(args.out, exist_ok=True)
    save_snapshot(snapshot, args.out)
    sidecar = os.path.join(args.out, PLANTED_SIDECAR)
    save_planted(planted, sidecar)
    outputs = [os.path.join(args.out, "manifest.json"),
               os.path.join(args.out, "tensors.bin"), sidecar]
    _write_manifest(args.out, "synth", vars(args), args.seed,
                    snapshot_digest(args.out), outputs, started)
    print(f"wrote snapshot with {snapshot.num_layers} layers to {args.out}")
    return EXIT_OK


def cmd_score(args) -> int:
    started = _utcnow()
    snapshot = _load_snapshot_dir(args.snapshot)
    scored = _scored(snapshot, args.available_only)
    os.makedirs(args.out, exist_ok=True)
    payload = {"layers": []}
    for rec, layer_scores in zip(snapshot.layers, scored):
        payload["layers"].append({
            "layer": rec.name,
            "num_filters": rec.num_filters,
            "criteria": [
                {
                    "code": int(s.criterion),
                    "label": s.criterion.label,
                    "raw": [float(v) for v in s.raw],
                    "normalized": [float(v) for v in s.normalized],
                }
                for s in layer_scores
            ],
        })
    path = os.path.join(args.out, "scores.json")
    _write_json(path, payload)
    _write_manifest(args.out, "score", vars(args), args.seed,
                    snapshot_digest(args.snapshot), [path], started)
    print(f"scored {len(scored[0])} criteria over {snapshot.num_layers} layers")
    return EXIT_OK


def cmd_correlate(args) -> int:
    started = _utcnow()
    snapshot = _load_snapshot_dir(args.snapshot)
    scored = _scored(snapshot, args.available_only)
    matrices = correlation_matrices(scored)
    os.makedirs(args.out, exist_ok=True)
    outputs = []
    payload = {"layers": []}
    for li, (rec, mat) in enumerate(zip(snapshot.layers, matrices)):
        payload["layers"].append({
            "layer": rec.name,
            "criteria_codes": [int(c) for c in mat.criteria],
            "criteria": [c.label for c in mat.criteria],
            "matrix": [[float(v) for v in row] for row in mat.matrix],
        })
        csv_path = os.path.join(args.out, f"correlation_layer{li}.csv")
        np.savetxt(csv_path, mat.matrix, delimiter=",", fmt="%.17g")
        outputs.append(csv_path)
    json_path = os.path.join(args.out, "correlations.json")
    _write_json(json_path, payload)
    outputs.append(json_path)
    _write_manifest(args.out, "correlate", vars(args), args.seed,
                    snapshot_digest(args.snapshot), outputs, started)
    print(f"wrote {len(matrices)} correlation matrices to {args.out}")
    return EXIT_OK


def cmd_cluster(args) -> int:
    started = _utcnow()
    snapshot = _load_snapshot_dir(args.snapshot)
    scored = _scored(snapshot, args.available_only)
    matrices = correlation_matrices(scored)
    clusterings = cluster_all(matrices, k=args.clusters, seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    payload = {"layers": []}
    for rec, cl in zip(snapshot.layers, clusterings):
        payload["layers"].append({
            "layer": rec.name,
            "K": cl.k,
            "clusters": [[int(c) for c in group] for group in cl.clusters()],
            "cluster_labels": [[c.label for c in group] for group in cl.clusters()],
            "inertia": cl.inertia,
        })
    n_criteria = len(matrices[0].criteria)
    blended, exhaustive = search_space_size(n_criteria, args.clusters, snapshot.num_layers)
    payload["search_space"] = {
        "criteria": n_criteria,
        "clusters": args.clusters,
        "layers": snapshot.num_layers,
        "blended": str(blended),
        "exhaustive": str(exhaustive),
    }
    path = os.path.join(args.out, "clusters.json")
    _write_json(path, payload)
    _write_manifest(args.out, "cluster", vars(args), args.seed,
                    snapshot_digest(args.snapshot), [path], started)
    print(f"clustered {n_criteria} criteria into {args.clusters} groups per layer")
    return EXIT_OK


def _write_masks(out_dir: str, snapshot: NetworkSnapshot, masks: dict) -> list[str]:
    json_path = os.path.join(out_dir, "masks.json")
    _write_json(json_path, {name: [int(b) for b in mask] for name, mask in masks.items()})
    bin_path = os.path.join(out_dir, "masks.bin")
    tmp = bin_path + ".tmp"
    with open(tmp, "wb") as f:
        for rec in snapshot.layers:
            f.write(np.asarray(masks[rec.name], dtype=np.uint8).tobytes())
    os.replace(tmp, bin_path)
    return [json_path, bin_path]


def _calibration_report(snapshot, clusterings, gene) -> dict:
    layers = []
    for rec, cl, lg in zip(snapshot.layers, clusterings, gene.layers):
        entries = []
        for j, (factor, criterion) in enumerate(zip(lg.factors, lg.selections)):
            entries.append({
                "cluster": j,
                "factor": float(factor),
                "criterion_code": int(criterion),
                "criterion": criterion.label,
                "cluster_members": [c.label for c in cl.clusters()[j]],
            })
        layers.append({"layer": rec.name, "clusters": entries})
    return {"layers": layers}


def cmd_search(args) -> int:
    started = _utcnow()
    snapshot = _load_snapshot_dir(args.snapshot)
    profile = PROFILES[args.profile]
    population = args.population if args.population is not None else profile["population"]
    iterations = args.iterations if args.iterations is not None else profile["iterations"]
    drop_ratio = args.drop_ratio if args.drop_ratio is not None else profile["drop_ratio"]
    epochs = (args.finetune_epochs if args.finetune_epochs is not None
              else profile["finetune_epochs"])
    config = EAConfig(
        population_size=population,
        iterations=iterations,
        mutation_prob=args.mutation,
        crossover_prob=args.crossover,
        drop_ratio=drop_ratio,
        finetune_epochs=epochs,
        resample_prob=args.resample,
        topk=args.topk,
        seed=args.seed,
        workers=args.workers,
    )
    scored = _scored(snapshot, args.available_only)
    matrices = correlation_matrices(scored)
    clusterings = cluster_all(matrices, k=args.clusters, seed=args.seed)
    evaluator = _resolve_evaluator(args.evaluator, snapshot, args.snapshot,
                                   args.timeout, args.workers, args.seed)
    prune_config = PruneConfig(default_keep_ratio=args.keep_ratio)
    try:
        result = search(snapshot, clusterings, scored, config, evaluator, prune_config)
        final_epochs = args.final_epochs if args.final_epochs is not None else epochs
        final_gene, final_masks = finalize(result.topk_genes, evaluator, snapshot,
                                           scored, prune_config, final_epochs)
    finally:
        closer = getattr(evaluator, "close", None)
        if closer is not None:
            closer()
    os.makedirs(args.out, exist_ok=True)
    result_path = os.path.join(args.out, "search_result.json")
    doc = result.to_dict()
    doc["final"] = {"gene": final_gene.to_dict(), "fitness": final_gene.fitness}
    _write_json(result_path, doc)
    outputs = [result_path]
    outputs += _write_masks(args.out, snapshot, final_masks)
    report_path = os.path.join(args.out, "calibration_report.json")
    _write_json(report_path, _calibration_report(snapshot, clusterings, final_gene))
    outputs.append(report_path)
    _write_manifest(args.out, "search", vars(args), args.seed,
                    snapshot_digest(args.snapshot), outputs, started)
    print(f"best fitness {final_gene.fitness:.6f} after {result.evaluations} evaluations")
    return EXIT_OK


def cmd_prune(args) -> int:
    started = _utcnow()
    snapshot = _load_snapshot_dir(args.snapshot)
    result_path = os.path.join(args.search, "search_result.json")
    if not os.path.exists(result_path):
        raise UsageError(f"missing search output: {result_path}")
    with open(result_path, encoding="utf-8") as f:
        doc = json.load(f)
    gene = Gene.from_dict(doc["final"]["gene"] if "final" in doc else doc["best_gene"])
    overrides = {}
    for item in args.keep_ratio_override or []:
        name, _, value = item.partition("=")
        if not value:
            raise UsageError(f"bad --keep-ratio-override {item!r}, expected layer=ratio")
        overrides[name] = float(value)
    config = PruneConfig(default_keep_ratio=args.keep_ratio, overrides=overrides)
    scored = _scored(snapshot, args.available_only)
    plan = prune_plan(snapshot, scored, gene.layers, config)
    os.makedirs(args.out, exist_ok=True)
    outputs = _write_masks(args.out, snapshot, plan.masks())
    summary = {
        "layers": [
            {
                "layer": lp.name,
                "kept": int(lp.mask.sum()),
                "total": int(lp.mask.size),
                "blended": [float(v) for v in lp.blended],
            }
            for lp in plan.layers
        ]
    }
    summary_path = os.path.join(args.out, "prune_report.json")
    _write_json(summary_path, summary)
    outputs.append(summary_path)
    _write_manifest(args.out, "prune", vars(args), args.seed,
                    snapshot_digest(args.snapshot), outputs, started)
    print(f"kept {plan.total_kept()}/{plan.total_filters()} filters")
    return EXIT_OK


def cmd_report(args) -> int:
    result_path = os.path.join(args.search, "search_result.json")
    report_path = os.path.join(args.search, "calibration_report.json")
    masks_path = os.path.join(args.search, "masks.json")
    for p in (result_path, report_path, masks_path):
        if not os.path.exists(p):
            raise UsageError(f"missing search output: {p}")
    with open(result_path, encoding="utf-8") as f:
        result = json.load(f)
    with open(report_path, encoding="utf-8") as f:
        calibration = json.load(f)
    with open(masks_path, encoding="utf-8") as f:
        masks = json.load(f)
    fitness = result.get("final", {}).get("fitness", result["best_gene"]["fitness"])
    print(f"best fitness: {fitness:.6f}  evaluations: {result['evaluations']}")
    for layer in calibration["layers"]:
        mask = masks[layer["layer"]]
        print(f"layer {layer['layer']}: kept {sum(mask)}/{len(mask)}")
        for entry in layer["clusters"]:
            members = ", ".join(entry["cluster_members"])
            print(f"  cluster {entry['cluster']}: factor {entry['factor']:.4f}"
                  f"  criterion {entry['criterion']} ({entry['criterion_code']})"
                  f"  [members: {members}]")
    return EXIT_OK


def cmd_toy(args) -> int:
    started = _utcnow()
    model = toy_build(args.model_seed)
    model, snapshot = toy_pretrain(model, args.data_seed, args.epochs)
    os.makedirs(args.out, exist_ok=True)
    save_snapshot(snapshot, args.out)
    outputs = [os.path.join(args.out, "manifest.json"),
               os.path.join(args.out, "tensors.bin")]
    _write_manifest(args.out, "toy", vars(args), args.model_seed,
                    snapshot_digest(args.out), outputs, started)
    ev = ToyEvaluator.from_snapshot(snapshot)
    acc = ev.pretrained.accuracy(ev.dataset.X_val, ev.dataset.y_val)
    print(f"pretrained toy model: validation accuracy {acc:.4f}, snapshot in {args.out}")
    return EXIT_OK


# -- parser ------------------------------------------------------------------


def _add_snapshot_arg(p):
    p.add_argument("--snapshot", required=True, help="snapshot directory")
    p.add_argument("--available-only", action="store_true",
                   help="skip criteria whose evidence is absent")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pruneblend",
                                     description="criteria-blending filter pruning engine")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic snapshot with planted importance")
    p.add_argument("--layers", type=int, default=3)
    p.add_argument("--filters", default="16", help="filters per layer, int or comma list")
    p.add_argument("--fan-in", type=int, default=8)
    p.add_argument("--bins", type=int, default=32)
    p.add_argument("--samples", type=int, default=4096)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("score", help="score all criteria for every layer")
    _add_snapshot_arg(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("correlate", help="per-layer criteria rank-correlation matrices")
    _add_snapshot_arg(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_correlate)

    p = sub.add_parser("cluster", help="cluster criteria by correlation profile")
    _add_snapshot_arg(p)
    p.add_argument("--clusters", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("search", help="evolutionary search for the best blend")
    _add_snapshot_arg(p)
    p.add_argument("--profile", choices=sorted(PROFILES), default="cifar")
    p.add_argument("--clusters", type=int, default=3)
    p.add_argument("--population", type=int, default=None)
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--mutation", type=float, default=0.1)
    p.add_argument("--crossover", type=float, default=0.8)
    p.add_argument("--drop-ratio", type=float, default=None)
    p.add_argument("--resample", type=float, default=0.2)
    p.add_argument("--finetune-epochs", type=int, default=None)
    p.add_argument("--final-epochs", type=int, default=None,
                   help="finetune epochs for the finalize pass (default: same)")
    p.add_argument("--topk", type=int, default=5)
    p.add_argument("--keep-ratio", type=float, default=0.5)
    p.add_argument("--evaluator", default="oracle",
                   help="oracle | toy | external:<command>")
    p.add_argument("--timeout", type=float, default=60.0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("prune", help="emit masks from a finished search")
    _add_snapshot_arg(p)
    p.add_argument("--search", required=True, help="directory written by search")
    p.add_argument("--keep-ratio", type=float, default=0.5)
    p.add_argument("--keep-ratio-override", action="append",
                   help="layer=ratio, may repeat")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("report", help="human-readable summary of a search")
    p.add_argument("--search", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("toy", help="pretrain the built-in toy model and export its snapshot")
    p.add_argument("--model-seed", type=int, default=0)
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=PRETRAIN_EPOCHS)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_toy)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except CriterionUnavailableError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except EvaluatorError as e:
        print(f"evaluator error: {e}", file=sys.stderr)
        return EXIT_EVALUATOR
    except SnapshotError as e:
        print(f"snapshot error: {e}", file=sys.stderr)
        return EXIT_SNAPSHOT


if __name__ == "__main__":
    sys.exit(main())
