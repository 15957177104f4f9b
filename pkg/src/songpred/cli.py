"""Batch command-line interface.

Subcommands: ingest, score, split, train, grid, eval, battles, synth.
Exit codes: 0 success, 1 validation error, 2 runtime error. All file
outputs are written atomically and every run logs its resolved
configuration and seed to stderr.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import datamodel, preference, scores, synth, trainer
from .errors import (ConfigError, DimensionError, EmbeddingFormatError,
                     ManifestError, SongpredError, UndefinedMetricError)
from .ioutil import atomic_write_text
from .network import load_checkpoint, save_checkpoint

log = logging.getLogger("songpred")

_VALIDATION_ERRORS = (ConfigError, ManifestError, EmbeddingFormatError,
                      DimensionError, UndefinedMetricError, ValueError,
                      FileNotFoundError, NotADirectoryError, IsADirectoryError)


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage on stderr, exit 1 (not argparse's 2)
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(1)


def build_parser() -> _Parser:
    parser = _Parser(prog="songpred", description=__doc__)
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("ingest", help="validate a manifest and its embedding store")
    p.add_argument("--manifest", required=True)
    p.add_argument("--embeddings", required=True)

    p = sub.add_parser("score", help="augment a manifest with streams/likes scores")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("split", help="stratified train/test/val split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--fractions", default="0.85,0.10,0.05")
    p.add_argument("--strata", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="train one model configuration")
    p.add_argument("--manifest", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--split", default=None, help="reuse a split JSON file")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")

    p = sub.add_parser("grid", help="run the experimental grid")
    p.add_argument("--manifest", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default=None)
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a scored manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=trainer.INPUT_MODES, default="song")

    p = sub.add_parser("battles", help="pairwise preference cross-validation")
    p.add_argument("--battles", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--folds", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--features", choices=("all", "popularity"), default="all")

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n-songs", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--signal", choices=synth.SIGNALS, default="linear")
    p.add_argument("--min-segments", type=int, default=1)
    p.add_argument("--max-segments", type=int, default=3)
    return parser


# ---------------------------------------------------------------------------
# Shared pipeline helpers
# ---------------------------------------------------------------------------

def _records_by_id(records):
    return {r.song_id: r for r in records}


def _load_split(path) -> datamodel.DatasetSplit:
    with open(path, "r", encoding="utf-8") as fh:
        obj = json.load(fh)
    return datamodel.DatasetSplit(
        train_ids=frozenset(obj["train_ids"]),
        test_ids=frozenset(obj["test_ids"]),
        val_ids=frozenset(obj["val_ids"]),
        fractions=tuple(obj["fractions"]),
    )


def _split_to_json(split: datamodel.DatasetSplit) -> str:
    return json.dumps({
        "train_ids": sorted(split.train_ids),
        "test_ids": sorted(split.test_ids),
        "val_ids": sorted(split.val_ids),
        "fractions": list(split.fractions),
    }, indent=2) + "\n"


def _build_label_map(records, split: datamodel.DatasetSplit) -> dict[str, scores.LabelVector]:
    """Labels for every record; percentiles are anchored to the train split."""
    by_id = _records_by_id(records)
    train_records = [by_id[i] for i in sorted(split.train_ids)]
    ref_streams = [r.streams for r in train_records]
    ref_likes = [r.likes for r in train_records]
    all_streams_p = scores.percentile_against([r.streams for r in records], ref_streams)
    all_likes_p = scores.percentile_against([r.likes for r in records], ref_likes)
    return {r.song_id: scores.build_labels(r, sp, lp)
            for r, sp, lp in zip(records, all_streams_p, all_likes_p)}


def _prepare_datasets(manifest, embeddings, split_path, tasks: str, seed: int):
    records = datamodel.load_manifest(manifest)
    if split_path:
        split = _load_split(split_path)
    else:
        split = datamodel.stratified_split(records, seed=seed)
    labels = _build_label_map(records, split)
    by_id = _records_by_id(records)
    sets = []
    for ids in (split.train_ids, split.val_ids, split.test_ids):
        subset = [by_id[i] for i in sorted(ids)]
        sets.append(trainer.assemble_samples(subset, embeddings, labels, tasks))
    return sets[0], sets[1], sets[2], split


def _report_files(out_dir: Path, report: trainer.TrainReport, stem: str = "report"):
    atomic_write_text(out_dir / f"{stem}.json", json.dumps(report.to_dict(), indent=2) + "\n")
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["epoch", "train_loss", "val_loss"])
    for i, (tl, vl) in enumerate(zip(report.train_losses, report.val_losses)):
        writer.writerow([i, repr(tl), repr(vl)])
    atomic_write_text(out_dir / f"{stem}_epochs.csv", buf.getvalue())


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_ingest(args) -> int:
    records = datamodel.load_manifest(args.manifest)
    n_segments = 0
    for r in records:
        emb = datamodel.load_embeddings(args.embeddings, r.embedding_ref or r.song_id)
        n_segments += emb.n_segments
    with_aes = sum(1 for r in records if r.aesthetic_labels is not None)
    log.info("ingest ok: %d records, %d segments, %d with aesthetics",
             len(records), n_segments, with_aes)
    print(f"ok: {len(records)} records, {n_segments} segments, "
          f"{with_aes} with aesthetic labels")
    return 0


def cmd_score(args) -> int:
    records = datamodel.load_manifest(args.manifest)
    streams_p = scores.percentile_ranks([r.streams for r in records])
    likes_p = scores.percentile_ranks([r.likes for r in records])
    cfg = scores.ScoreTransformConfig()
    scored = [
        replace(r,
                streams_score=scores.power_transform(sp, cfg),
                likes_score=scores.power_transform(lp, cfg))
        for r, sp, lp in zip(records, streams_p, likes_p)
    ]
    datamodel.save_manifest(scored, args.out)
    log.info("scored %d records -> %s", len(scored), args.out)
    return 0


def cmd_split(args) -> int:
    records = datamodel.load_manifest(args.manifest)
    fractions = tuple(float(f) for f in args.fractions.split(","))
    if len(fractions) != 3:
        raise ConfigError("--fractions needs 3 comma-separated values")
    split = datamodel.stratified_split(records, fractions=fractions,
                                       n_strata=args.strata, seed=args.seed)
    atomic_write_text(args.out, _split_to_json(split))
    log.info("split %d/%d/%d -> %s", len(split.train_ids), len(split.test_ids),
             len(split.val_ids), args.out)
    return 0


def cmd_train(args) -> int:
    config = trainer.load_train_config(args.config)
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    log.info("train config: %s", json.dumps(config.to_dict()))
    train_set, val_set, test_set, _ = _prepare_datasets(
        args.manifest, args.embeddings, args.split, config.tasks, config.seed)
    params, report = trainer.train(train_set, val_set, config, test_set)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(params, out_dir / "checkpoint.mdl")
    _report_files(out_dir, report)
    log.info("best epoch %d, stopping: %s", report.best_epoch, report.stopping_reason)
    return 0


def _load_grid_config(path) -> tuple[trainer.GridAxes, trainer.TrainConfig]:
    with open(path, "r", encoding="utf-8") as fh:
        obj = json.load(fh)
    unknown = set(obj) - {"axes", "base"}
    if unknown:
        raise ConfigError(f"unknown grid config key {sorted(unknown)[0]!r}")
    axes_obj = obj.get("axes", {})
    unknown = set(axes_obj) - {"loss_strategies", "depths", "modes", "tasks"}
    if unknown:
        raise ConfigError(f"unknown grid axis {sorted(unknown)[0]!r}")
    axes = trainer.GridAxes(**{k: tuple(v) for k, v in axes_obj.items()})
    base_obj = dict(obj.get("base", {}))
    unknown = set(base_obj) - set(trainer._CONFIG_KEYS)
    if unknown:
        raise ConfigError(f"unknown grid base key {sorted(unknown)[0]!r}")
    return axes, trainer.TrainConfig(**base_obj)


def cmd_grid(args) -> int:
    axes, base = _load_grid_config(args.config)
    log.info("grid axes: %s, base seed %d", axes, base.seed)
    tasks = "full" if "full" in axes.tasks else "popularity"
    train_set, val_set, test_set, _ = _prepare_datasets(
        args.manifest, args.embeddings, args.split, tasks, base.seed)
    results = trainer.run_grid(train_set, val_set, test_set, axes, base,
                               workers=args.workers)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out_dir / "grid_results.json",
                      json.dumps([r.to_dict() for r in results], indent=2) + "\n")
    n_failed = sum(1 for r in results if r.error)
    log.info("grid done: %d cells, %d failed", len(results), n_failed)
    print(f"{len(results)} cells, {n_failed} failed -> {out_dir / 'grid_results.json'}")
    return 0


def cmd_eval(args) -> int:
    params = load_checkpoint(args.checkpoint)
    records = datamodel.load_manifest(args.manifest)
    missing = [r.song_id for r in records if r.streams_score is None or r.likes_score is None]
    if missing:
        raise ManifestError(
            f"{len(missing)} records lack score columns (run `songpred score` first), "
            f"e.g. {missing[0]}")
    tasks = params.arch.task_mode
    labels = {
        r.song_id: scores.LabelVector(streams_score=r.streams_score,
                                      likes_score=r.likes_score,
                                      aesthetics=r.aesthetic_labels)
        for r in records
    }
    samples = trainer.assemble_samples(records, args.embeddings, labels, tasks)
    report = trainer.evaluate(params, samples, args.mode)
    atomic_write_text(args.out, json.dumps(report, indent=2) + "\n")
    log.info("eval on %d songs -> %s", len(samples), args.out)
    return 0


def cmd_battles(args) -> int:
    battles = preference.load_battles(args.battles)
    dims = (preference.ALL_DIMENSIONS if args.features == "all"
            else preference.POPULARITY_DIMENSIONS)
    report = preference.cross_validate(battles, k=args.folds, seed=args.seed,
                                       dimensions=dims)
    atomic_write_text(args.out, json.dumps(report, indent=2) + "\n")
    log.info("battles: %d instances, mean AUC %.3f -> %s",
             report["n_battles"], report["logreg"]["mean_auc"], args.out)
    return 0


def cmd_synth(args) -> int:
    dataset = synth.generate(args.n_songs, args.seed, args.signal,
                             segments_range=(args.min_segments, args.max_segments))
    manifest, store = synth.write(dataset, args.out)
    log.info("synth: %d songs (signal=%s, seed=%d) -> %s",
             args.n_songs, args.signal, args.seed, args.out)
    print(f"wrote {manifest} and {store}")
    return 0


_COMMANDS = {
    "ingest": cmd_ingest,
    "score": cmd_score,
    "split": cmd_split,
    "train": cmd_train,
    "grid": cmd_grid,
    "eval": cmd_eval,
    "battles": cmd_battles,
    "synth": cmd_synth,
}


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv:
        parser.print_usage(sys.stderr)
        return 1
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 1
    seed = getattr(args, "seed", None)
    log.info("command=%s seed=%s args=%s", args.command, seed,
             {k: v for k, v in vars(args).items() if k != "command"})
    try:
        return _COMMANDS[args.command](args)
    except _VALIDATION_ERRORS as exc:
        log.error("%s", exc)
        sys.stderr.write(f"error: {exc}\n")
        return 1
    except SongpredError as exc:
        log.error("%s", exc)
        sys.stderr.write(f"error: {exc}\n")
        return 2
    except Exception as exc:  # noqa: BLE001 - runtime failures map to exit 2
        log.exception("unhandled error")
        sys.stderr.write(f"error: {type(exc).__name__}: {exc}\n")
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
