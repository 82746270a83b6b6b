"""Command-line entry point: build-data, train, eval, explain, run-seeds.

Exit codes: 0 success, 2 configuration error, 3 data or parse error,
4 training failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
import tempfile
from pathlib import Path

from .config import ConfigError, RunConfig
from .data import ManifestError, Split, load_manifest, manifest_checksum, save_manifest
from .dataset import (
    FileMediaStore,
    InsufficientDataError,
    SubstitutionError,
    build_split,
    generate_toy_corpus,
    load_clips,
    materialize,
    read_corpus_table,
)
from .model import explain as explain_outputs
from .model import load_checkpoint, save_checkpoint, state_digest
from .report import (
    accuracy_rows,
    export_embeddings,
    model_label,
    score_histograms,
    write_accuracy_table,
    write_decisions,
    write_text_report,
)
from .train import TrainingError, build_model, evaluate, fit, predict, run_seeds, seed_everything

log = logging.getLogger("msoc")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_TRAIN = 0, 2, 3, 4


class DataError(RuntimeError):
    pass


def _overrides(args) -> dict:
    out: dict = {}
    if getattr(args, "seed", None) is not None:
        out["seed"] = args.seed
    if getattr(args, "out_dir", None) is not None:
        out["out_dir"] = args.out_dir
    model = {}
    if getattr(args, "mode", None) is not None:
        model["mode"] = args.mode
    if getattr(args, "visual_encoder", None) is not None:
        model["visual_encoder"] = args.visual_encoder
    if getattr(args, "no_oc", False):
        model["use_oc"] = False
    if model:
        out["model"] = model
    return out


def _load_config(args) -> RunConfig:
    return RunConfig.load(args.config, _overrides(args))


def _media_store(cfg: RunConfig, manifest_path: Path):
    root = cfg.raw["data"]["media_root"]
    root = Path(root) if root else manifest_path.parent / "media"
    if not root.is_dir():
        raise DataError(f"media directory not found: {root}")
    return FileMediaStore(root, cfg.frontend())


def _manifest(args):
    if not args.manifest:
        raise DataError("--manifest is required")
    path = Path(args.manifest)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    return path, load_manifest(path)


def _out_dir(cfg: RunConfig) -> Path:
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------- verbs


def cmd_build_data(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(cfg)
    fe = cfg.frontend()
    if cfg.is_toy:
        store, records = generate_toy_corpus(cfg.toy_spec(), fe)
    else:
        corpus = cfg.raw["data"]["corpus"]
        if not corpus or "table" not in corpus:
            raise ConfigError("data.corpus.table is required when data.toy is false")
        records = read_corpus_table(corpus["table"], corpus.get("columns"))
        store = FileMediaStore(corpus.get("root", Path(corpus["table"]).parent), fe)
    manifest = build_split(records, cfg.split_spec())
    # Stage everything, then move into place so a failure leaves no partial outputs.
    staging = Path(tempfile.mkdtemp(prefix=".build-", dir=out))
    try:
        written = materialize(manifest, store, staging / "media")
        save_manifest(written, staging / "manifest.tsv")
        cfg.write_resolved(staging)
        for name in ("media", "manifest.tsv", "resolved_config.yaml"):
            target = out / name
            if target.is_dir():
                shutil.rmtree(target)
            elif target.exists():
                target.unlink()
            (staging / name).rename(target)
    finally:
        shutil.rmtree(staging, ignore_errors=True)
    counts = {s.value: len(written.by_split(s)) for s in Split}
    print(f"manifest\t{out / 'manifest.tsv'}")
    print(f"checksum\t{manifest_checksum(written)}")
    for split, n in counts.items():
        print(f"{split}\t{n}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args)
    path, manifest = _manifest(args)
    store = _media_store(cfg, path)
    out = _out_dir(cfg)
    tc = cfg.train_config()
    seed_everything(cfg.seed)
    model = build_model(cfg.audio_spec(), cfg.visual_spec(), cfg.mode, cfg.use_oc, tc.oc_params, cfg.seed)
    train_clips = load_clips(manifest.by_split(Split.TRAIN), store)
    val_clips = load_clips(manifest.by_split(Split.VAL), store)
    with open(out / "train_log.jsonl", "w") as fh:
        result = fit(model, train_clips, val_clips, tc, seed=cfg.seed,
                     log_fn=lambda rec: fh.write(json.dumps(rec, sort_keys=True) + "\n"))
    ckpt = Path(args.checkpoint) if args.checkpoint else out / "checkpoint"
    save_checkpoint(result.model, ckpt, extra={"seed": cfg.seed, "best_epoch": result.best_epoch,
                                               "val_auc": result.val_aucs[result.best_epoch - 1],
                                               "manifest_checksum": manifest_checksum(manifest)})
    cfg.write_resolved(out)
    print(f"checkpoint\t{ckpt}")
    print(f"best_epoch\t{result.best_epoch}")
    print(f"val_auc\t{result.val_aucs[result.best_epoch - 1]:.6f}")
    print(f"state_digest\t{state_digest(result.model)}")
    return EXIT_OK


def _checkpoint(args, cfg):
    ckpt = Path(args.checkpoint) if args.checkpoint else cfg.out_dir / "checkpoint"
    try:
        return load_checkpoint(ckpt)
    except FileNotFoundError as exc:
        raise DataError(str(exc)) from None


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    path, manifest = _manifest(args)
    store = _media_store(cfg, path)
    out = _out_dir(cfg)
    model = _checkpoint(args, cfg)
    report = evaluate(manifest, model, store)
    name = model_label(model.mode, model.visual_spec.kind, model.use_oc)
    rows = [accuracy_rows(name, {cfg.seed: report.accuracy})]
    if model.mode == "msoc":
        rows.append(accuracy_rows(model_label("avoc", model.visual_spec.kind, model.use_oc) + " [AV only]",
                                  {cfg.seed: report.avoc_accuracy}))
    write_accuracy_table(rows, out)
    score_histograms(report.outputs, report.records, out / "histograms")
    export_embeddings(report.outputs, report.records, out)
    write_decisions(report, out)
    (out / "branch_auc.json").write_text(json.dumps(report.branch_auc, indent=2, sort_keys=True))
    write_text_report(out / "report.txt", f"Evaluation of {name}", rows, report.branch_auc)
    for cat, acc in report.accuracy.items():
        print(f"{cat}\t{acc:.2f}")
    for branch, value in report.branch_auc.items():
        print(f"auc_{branch}\t{value:.4f}")
    return EXIT_OK


def cmd_explain(args) -> int:
    cfg = _load_config(args)
    path, manifest = _manifest(args)
    store = _media_store(cfg, path)
    model = _checkpoint(args, cfg)
    if args.sample:
        try:
            records = [manifest.get(s) for s in args.sample]
        except KeyError as exc:
            raise DataError(str(exc.args[0])) from None
    else:
        records = manifest.by_split(Split.TEST)
    clips = load_clips(records, store)
    rows = explain_outputs(predict(model, clips))
    header = ["sample_id", "category", "av_real_prob"] + (["audio", "visual"] if model.mode == "msoc" else [])
    print("\t".join(header))
    for r, row in zip(records, rows):
        cells = [r.sample_id, r.category.value, f"{row['av']:.4f}"]
        if "audio" in row:
            cells += [row["audio"], row["visual"]]
        print("\t".join(cells))
    return EXIT_OK


def cmd_run_seeds(args) -> int:
    cfg = _load_config(args)
    path, manifest = _manifest(args)
    store = _media_store(cfg, path)
    out = _out_dir(cfg)
    tc = cfg.train_config()
    audio, visual = cfg.audio_spec(), cfg.visual_spec()
    seeds = cfg.train_config().seeds

    def factory(seed):
        return build_model(audio, visual, cfg.mode, cfg.use_oc, tc.oc_params, seed)

    report = run_seeds(manifest, tc, store, factory)
    name = model_label(cfg.mode, visual.kind, cfg.use_oc)
    rows = [accuracy_rows(name, {s: report.per_seed[s].accuracy for s in seeds})]
    if cfg.mode == "msoc":
        rows.append(accuracy_rows(model_label("avoc", visual.kind, cfg.use_oc) + " [AV only]",
                                  {s: report.per_seed[s].avoc_accuracy for s in seeds}))
    write_accuracy_table(rows, out, stem="accuracy_seeds")
    write_text_report(out / "report_seeds.txt", f"{name} over seeds {list(seeds)}", rows)
    cfg.write_resolved(out)
    for cat in report.mean:
        print(f"{cat}\t{report.mean[cat]:.2f}\t{report.std[cat]:.2f}")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="msoc", description="Multi-modal one-class deepfake detection.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, manifest=True, checkpoint=False, model=False):
        p.add_argument("--config", help="YAML run configuration")
        p.add_argument("--seed", type=int)
        p.add_argument("--out-dir")
        if manifest:
            p.add_argument("--manifest", help="benchmark manifest (manifest.tsv)")
        if checkpoint:
            p.add_argument("--checkpoint", help="checkpoint directory (default <out-dir>/checkpoint)")
        if model:
            p.add_argument("--mode", choices=("msoc", "avoc"))
            p.add_argument("--visual-encoder", choices=("resnet", "scnet_stil"))
            p.add_argument("--no-oc", action="store_true", help="cross-entropy heads instead of OC-Softmax")
        return p

    p = common(sub.add_parser("build-data", help="generate splits and materialize media"), manifest=False)
    p.set_defaults(func=cmd_build_data)
    p = common(sub.add_parser("train", help="train all branches on the shared schedule"),
               checkpoint=True, model=True)
    p.set_defaults(func=cmd_train)
    p = common(sub.add_parser("eval", help="evaluate a checkpoint on the test split"), checkpoint=True)
    p.set_defaults(func=cmd_eval)
    p = common(sub.add_parser("explain", help="per-sample modality attribution"), checkpoint=True)
    p.add_argument("--sample", action="append", help="sample_id to explain (repeatable)")
    p.set_defaults(func=cmd_explain)
    p = common(sub.add_parser("run-seeds", help="train and evaluate over the configured seeds"), model=True)
    p.set_defaults(func=cmd_run_seeds)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ManifestError, InsufficientDataError, SubstitutionError, ValueError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingError as exc:
        print(f"training error: {exc}", file=sys.stderr)
        return EXIT_TRAIN


if __name__ == "__main__":
    sys.exit(main())
