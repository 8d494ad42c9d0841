"""Command-line entry point: ``stcl <subcommand> [options]``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .analysis import attention_distance, delta_log_amplitude, retrieve_topk
from .encoder import TrainConfig, train_contrastive
from .evaluation import (
    DegenerateTargetError,
    ProbeTask,
    RegressionTask,
    VprTask,
    aggregate_by_area,
    cross_validate,
    evaluate_vpr,
    train_linear_probe,
)
from .experiment import HYPOTHESIS_CITY
from .formats import (
    EmbeddingSet,
    FormatError,
    dump_json,
    load_areas,
    load_embeddings,
    load_manifest,
    load_metadata,
    load_tensor,
    save_areas,
    save_checkpoint,
    save_embeddings,
    save_manifest,
    save_metadata,
    write_csv,
)
from .geo import assign_area, build_grid_index
from .losses import LossConfig
from .pairs import audit_manifest, mine_self_pairs, mine_spatial_pairs, mine_temporal_pairs, subsample_pairs
from .synth import SynthConfig, generate_city

logger = logging.getLogger("stcl")


def _int_list(text: str) -> List[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _config(args: argparse.Namespace) -> dict:
    return {"stcl_version": __version__, "args": {k: v for k, v in vars(args).items() if k != "func"}}


def _emit(report: dict, out: Optional[str], args: argparse.Namespace) -> None:
    report = dict(report, config=_config(args))
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _echo(args: argparse.Namespace, path: Path) -> None:
    dump_json(_config(args), path)


def _out_dir(path: str) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _echo_path(out: str) -> Path:
    return Path(out).with_name(Path(out).stem + ".config.json")


# --------------------------------------------------------------------------
# Subcommands
# --------------------------------------------------------------------------


def cmd_synth(args) -> None:
    base = dict(HYPOTHESIS_CITY) if args.preset == "hypothesis" else {}
    for name in ("n_areas", "locations_per_area", "captures_per_location", "area_scale", "dyn_scale", "noise_std"):
        if getattr(args, name) is not None:
            base[name] = getattr(args, name)
    city = generate_city(SynthConfig(seed=args.seed, **base))
    out = _out_dir(args.out)
    save_metadata(city.records, out / "metadata.csv")
    save_areas(city.areas, out / "areas.json")
    save_embeddings(EmbeddingSet(city.ids, city.observation_matrix()), out / "observations.emb")
    dump_json(city.truth_dict(), out / "truth.json")
    write_csv(out / "targets.csv", ["area_id", "label", "value"], [(a, "indicator", repr(v)) for a, v in sorted(city.y_area.items())])
    write_csv(out / "labels.csv", ["id", "score"], [(i, repr(city.perception[i])) for i in city.ids])
    _echo(args, out / "config.json")


def cmd_mine(args) -> None:
    records = load_metadata(args.metadata)
    name = Path(args.metadata).name
    if args.kind == "temporal":
        manifest = mine_temporal_pairs(
            records, build_grid_index(records), args.max_dist_m, args.pairs_per_location, args.seed, args.heading_tolerance, name
        )
        audited = records
    elif args.kind == "spatial":
        areas = load_areas(args.areas) if args.areas else None
        manifest = mine_spatial_pairs(records, areas, args.pairs_per_area, args.max_year_gap, args.seed, name)
        audited = assign_area(records, areas) if areas else records
    else:
        count = len(records) if args.count is None else args.count
        manifest = mine_self_pairs(records, count, args.seed, name)
        audited = records
    if args.target_count is not None:
        manifest = subsample_pairs(manifest, args.target_count, args.seed)
    problems = audit_manifest(manifest, audited, args.max_dist_m, args.heading_tolerance)
    if problems:
        raise RuntimeError(f"manifest audit failed: {problems[0]} ({len(problems)} violations)")
    save_manifest(manifest, args.out, {"pair_type": args.kind, "audit": {"pairs_checked": len(manifest), "violations": 0}, "config": _config(args)})


def cmd_train(args) -> None:
    manifest = load_manifest(args.manifest)
    obs = load_embeddings(args.observations, normalize=False)
    observations = dict(zip(obs.ids, obs.matrix))
    overrides = dict(
        batch_size=args.batch_size,
        base_lr=args.lr,
        weight_decay=args.weight_decay,
        epochs=args.epochs,
        warmup_epochs=args.warmup_epochs,
        hidden=tuple(args.hidden) if args.hidden else None,
        embed_dim=args.embed_dim,
    )
    overrides = {k: v for k, v in overrides.items() if v is not None}
    cfg = TrainConfig.full_scale(seed=args.seed, **overrides) if args.profile == "full" else TrainConfig(seed=args.seed, **overrides)
    loss_cfg = LossConfig(args.temperature, not args.no_symmetrize)
    result = train_contrastive(manifest, observations, cfg, loss_cfg)
    out = _out_dir(args.out)
    save_checkpoint(result.encoder, out / "checkpoint.bin", args.seed, {"train": cfg.to_dict(), "loss": asdict(loss_cfg)})
    write_csv(out / "loss_curve.csv", ["epoch", "mean_loss"], [(e + 1, repr(v)) for e, v in enumerate(result.epoch_loss)])
    save_embeddings(EmbeddingSet(obs.ids, result.encoder.forward(obs.matrix)), out / "embeddings.emb")
    _echo(args, out / "config.json")


def _positions(meta_path, ids: Sequence[str]):
    by_id = {r.id: r.pos for r in load_metadata(meta_path)}
    missing = [i for i in ids if i not in by_id]
    if missing:
        raise ValueError(f"{len(missing)} embedding ids missing from {meta_path}, e.g. {missing[0]!r}")
    return [by_id[i] for i in ids]


def cmd_eval_vpr(args) -> None:
    task_cfg = {}
    if args.task:
        task_cfg = json.loads(Path(args.task).read_text(encoding="utf-8"))
        root = Path(args.task).parent
        for key in ("queries", "query_metadata", "database", "database_metadata", "matches"):
            if key in task_cfg and isinstance(task_cfg[key], str):
                task_cfg[key] = str(root / task_cfg[key])
    q_path = args.queries or task_cfg.get("queries")
    qm_path = args.query_metadata or task_cfg.get("query_metadata")
    d_path = args.database or task_cfg.get("database")
    dm_path = args.database_metadata or task_cfg.get("database_metadata")
    if not all((q_path, qm_path, d_path, dm_path)):
        raise ValueError("eval-vpr needs queries, query metadata, database and database metadata")
    threshold = args.threshold_m if args.threshold_m is not None else float(task_cfg.get("match_threshold_m", 25.0))
    matches = task_cfg.get("matches")
    if isinstance(matches, str):
        matches = json.loads(Path(matches).read_text(encoding="utf-8"))
    queries, database = load_embeddings(q_path), load_embeddings(d_path)
    task = VprTask(queries, _positions(qm_path, queries.ids), database, _positions(dm_path, database.ids), threshold, matches)
    _emit(evaluate_vpr(task, args.k), args.out, args)


def cmd_eval_socio(args) -> None:
    emb = load_embeddings(args.embeddings)
    records = load_metadata(args.metadata)
    if args.areas:
        records = assign_area(records, load_areas(args.areas))
    areas, feats = aggregate_by_area(emb, records)
    targets = {}
    with open(args.targets, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            targets.setdefault(row["label"], {})[row["area_id"]] = float(row["value"])
    report = {"labels": {}, "seed": args.seed}
    r2s = []
    for label in sorted(targets):
        keep = [n for n, a in enumerate(areas) if a in targets[label]]
        y = np.array([targets[label][areas[n]] for n in keep])
        try:
            res = cross_validate(RegressionTask(feats[keep], y), seed=args.seed)
        except DegenerateTargetError as exc:
            report["labels"][label] = {"degenerate_target": True, "detail": str(exc), "n_areas": len(keep)}
            continue
        report["labels"][label] = dict(res.to_dict(), n_areas=len(keep))
        r2s.append(res.test_r2)
    report["Overall Total"] = float(np.mean(r2s)) if r2s else None
    _emit(report, args.out, args)


def cmd_eval_safety(args) -> None:
    emb = load_embeddings(args.embeddings)
    scores = {}
    with open(args.labels, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            scores[row["id"]] = float(row["score"])
    ids = [i for i in emb.ids if i in scores]
    sub = emb.subset(ids)
    task = ProbeTask(sub.matrix, np.array([scores[i] for i in ids]), args.low, args.high, epochs=args.epochs)
    res = train_linear_probe(task, lr=args.lr, seed=args.seed)
    report = {k: v for k, v in res.metrics.items()}
    report.update(n_train_pool=int(len(task.labelled()[0])), n_test=int(len(res.test_labels)), epochs=args.epochs, seed=args.seed)
    _emit(report, args.out, args)


def cmd_analyze_attn(args) -> None:
    header, attn = load_tensor(args.tensor)
    if header.get("kind") != "attention":
        raise FormatError(f"{args.tensor}: expected an attention tensor, found {header.get('kind')!r}")
    dist = attention_distance(attn, header["rows"], header["cols"], header["patch_size"], header["class_token"])
    rows = []
    for layer in range(dist.shape[0]):
        rows += [(layer, head, repr(float(dist[layer, head]))) for head in range(dist.shape[1])]
        rows.append((layer, "mean", repr(float(dist[layer].mean()))))
    write_csv(args.out, ["layer", "head", "value"], rows)
    _echo(args, _echo_path(args.out))


def cmd_analyze_freq(args) -> None:
    header, fmap = load_tensor(args.tensor)
    if header.get("kind") != "features":
        raise FormatError(f"{args.tensor}: expected a feature tensor, found {header.get('kind')!r}")
    delta = delta_log_amplitude(fmap, header["rows"], header["cols"], header["class_token"], log_base=args.log_base)
    write_csv(args.out, ["layer", "value"], [(n, repr(float(v))) for n, v in enumerate(delta)])
    _echo(args, _echo_path(args.out))


def cmd_retrieve(args) -> None:
    emb = load_embeddings(args.embeddings)
    res = retrieve_topk(args.query, emb, load_metadata(args.metadata), args.k)
    _emit(res.to_dict(), args.out, args)


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stcl", description="Spatiotemporal contrastive learning toolkit.")
    parser.add_argument("--version", action="version", version=f"stcl {__version__}")
    parser.add_argument("--threads", type=int, default=None, help="cap on numeric worker threads (default: all cores)")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="SUBCOMMAND")

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.set_defaults(func=func)
        p.add_argument("--seed", type=int, default=0, help="seed for every random choice (default 0)")
        return p

    p = add("synth", cmd_synth, "Generate a synthetic city with ground-truth latents.")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--preset", choices=["default", "hypothesis"], default="default", help="base configuration")
    p.add_argument("--n-areas", type=int)
    p.add_argument("--locations-per-area", type=int)
    p.add_argument("--captures-per-location", type=int)
    p.add_argument("--area-scale", type=float)
    p.add_argument("--dyn-scale", type=float)
    p.add_argument("--noise-std", type=float)

    p = add("mine", cmd_mine, "Mine a positive-pair manifest.")
    p.add_argument("kind", choices=["temporal", "spatial", "self"])
    p.add_argument("--metadata", required=True, help="metadata CSV")
    p.add_argument("--out", required=True, help="manifest CSV; a .json sidecar is written next to it")
    p.add_argument("--areas", help="area JSON (polygons or buffer_m); spatial only")
    p.add_argument("--max-dist-m", type=float, default=5.0, help="temporal distance limit in meters (default 5)")
    p.add_argument("--heading-tolerance", type=float, default=0.0, help="heading tolerance in degrees (default 0)")
    p.add_argument("--pairs-per-location", type=int, default=1)
    p.add_argument("--pairs-per-area", type=int, default=1)
    p.add_argument("--max-year-gap", type=int, default=None, help="optional spatial-pair year gap limit")
    p.add_argument("--count", type=int, default=None, help="self pairs to draw (default: every record)")
    p.add_argument("--target-count", type=int, default=None, help="subsample the manifest to this many pairs")

    p = add("train", cmd_train, "Train the toy encoder on a manifest.")
    p.add_argument("--manifest", required=True)
    p.add_argument("--observations", required=True, help="observation vectors in the embedding format")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--profile", choices=["desk", "full"], default="desk", help="default hyperparameter profile")
    p.add_argument("--epochs", type=int)
    p.add_argument("--warmup-epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--hidden", type=_int_list, help="hidden widths, e.g. 256,128")
    p.add_argument("--embed-dim", type=int)
    p.add_argument("--temperature", type=float, default=0.2)
    p.add_argument("--no-symmetrize", action="store_true", help="use the one-directional loss")

    p = add("eval-vpr", cmd_eval_vpr, "Recall@K place recognition.")
    p.add_argument("--task", help="task JSON with queries/database paths")
    p.add_argument("--queries")
    p.add_argument("--query-metadata")
    p.add_argument("--database")
    p.add_argument("--database-metadata")
    p.add_argument("--threshold-m", type=float, default=None, help="match radius in meters (default 25)")
    p.add_argument("--k", type=_int_list, default=[1, 5, 10, 15, 20, 25], help="K values, e.g. 1,5,10")
    p.add_argument("--out", help="report JSON (default stdout)")

    p = add("eval-socio", cmd_eval_socio, "Area-level LASSO regression with cross-validation.")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--metadata", required=True)
    p.add_argument("--areas", help="assign areas from this file instead of the metadata column")
    p.add_argument("--targets", required=True, help="CSV area_id,label,value")
    p.add_argument("--out")

    p = add("eval-safety", cmd_eval_safety, "Linear-probe binary perception classification.")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--labels", required=True, help="CSV id,score")
    p.add_argument("--low", type=float, default=3.5)
    p.add_argument("--high", type=float, default=6.5)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--out")

    p = add("analyze-attn", cmd_analyze_attn, "Attention distance per layer and head.")
    p.add_argument("--tensor", required=True)
    p.add_argument("--out", required=True, help="CSV layer,head,value")

    p = add("analyze-freq", cmd_analyze_freq, "Fourier high/low log-amplitude difference per layer.")
    p.add_argument("--tensor", required=True)
    p.add_argument("--log-base", type=float, default=None, help="log base (default e)")
    p.add_argument("--out", required=True, help="CSV layer,value")

    p = add("retrieve", cmd_retrieve, "Top-k cosine retrieval with metadata.")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--metadata", required=True)
    p.add_argument("--query", required=True)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--out")
    return parser


def run_cli(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr, format="%(name)s: %(message)s")
    try:
        with threadpool_limits(limits=args.threads):
            args.func(args)
    except Exception as exc:  # reported as one parseable line
        msg = " ".join(str(exc).split())
        sys.stderr.write(f"error: {args.command}: {type(exc).__name__}: {msg}\n")
        return 1
    return 0


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
