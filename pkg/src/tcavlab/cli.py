"""Command line entry point: ``tcavlab <verb> [--config FILE] [--seed N] [--out DIR]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import concepts as C
from .cav import activation_matrix
from .config import ConfigError, PipelineConfig, load_config
from .diffmodel import ModelError, predict_batch, reference_model, train_classifier, stack_pixels
from .formats import ActivationDump, FormatError, atomic_write, load_model, save_cavs, save_dump, save_model
from .report import (
    ResultsError,
    charts_by_class,
    read_results,
    results_table,
    results_to_csv,
    write_results,
)
from .stats import classification_metrics
from .tcav import ExperimentConfig, run_experiment

log = logging.getLogger("tcavlab")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class DataError(RuntimeError):
    pass


def _output_dir(cfg: PipelineConfig, out: Optional[str]) -> Path:
    return Path(out) if out else cfg.path("output_dir")


def _clean_pngs(directory: Path) -> None:
    if directory.is_dir():
        for p in directory.glob("*.png"):
            p.unlink()


# --------------------------------------------------------------------------
# generate-concepts


def build_concept_set(cfg: PipelineConfig, spec) -> C.ConceptSet:
    seed = cfg.effective(spec.seed)
    if spec.kind == "color":
        return C.generate_color_concept(spec.name, spec.count, spec.size, seed)
    if spec.kind == "texture":
        return C.generate_texture_concept(spec.name, spec.count, spec.size, seed)
    return C.generate_disease_pattern_concept(spec.count, spec.size, seed, name=spec.name)


def build_pool(cfg: PipelineConfig, spec) -> C.NegativePool:
    seed = cfg.effective(spec.seed)
    if spec.kind == "grayscale_leaves":
        return C.grayscale_leaf_pool(spec.count, spec.size, seed)
    return C.healthy_leaf_pool(spec.count, spec.size, seed)


def cmd_generate_concepts(cfg: PipelineConfig, out: Optional[str] = None) -> dict:
    concepts_dir = Path(out) / "concepts" if out else cfg.path("concepts_dir")
    negatives_dir = Path(out) / "negatives" if out else cfg.path("negatives_dir")
    written = {}
    try:
        for spec in cfg.concepts:
            cs = build_concept_set(cfg, spec)
            _clean_pngs(concepts_dir / spec.name)
            C.export_concept_set(cs, concepts_dir)
            written[spec.name] = len(cs)
        for spec in cfg.negatives:
            pool = build_pool(cfg, spec)
            _clean_pngs(negatives_dir / spec.name)
            C.export_images(pool.images, negatives_dir / spec.name)
            written[f"negatives/{spec.name}"] = len(pool)
        if cfg.dataset.generate:
            ds = C.generate_leaf_dataset(cfg.dataset.count_per_class, cfg.dataset.size, cfg.effective(cfg.dataset.seed))
            data_dir = Path(out) / "data" if out else cfg.path("data_dir")
            for label, name in enumerate(ds.class_names):
                _clean_pngs(data_dir / name)
                C.export_images([s for s in ds if s.label == label], data_dir / name)
            written["dataset"] = len(ds)
    except OSError as exc:
        raise DataError(f"cannot write output: {exc}") from exc
    for name, n in written.items():
        print(f"{name}: {n} images")
    return written


# --------------------------------------------------------------------------
# train


def load_splits(cfg: PipelineConfig):
    try:
        ds = C.load_image_directory(cfg.path("data_dir"), labeled=True)
    except C.DatasetError as exc:
        raise DataError(str(exc)) from exc
    ratios = C.SplitRatios(cfg.split.train, cfg.split.val, cfg.split.test)
    try:
        return ds, C.split_dataset(ds, ratios, cfg.effective(cfg.split.seed))
    except C.DatasetError as exc:
        raise DataError(str(exc)) from exc


def cmd_train(cfg: PipelineConfig, out: Optional[str] = None) -> dict:
    ds, (train, val, test) = load_splits(cfg)
    input_shape = train[0].shape
    model = reference_model(
        len(ds.class_names), input_shape, seed=cfg.effective(cfg.model.seed), zero_head=cfg.model.zero_head
    )
    train_cfg = cfg.train
    train_cfg = type(train_cfg)(**{**train_cfg.__dict__, "seed": cfg.effective(train_cfg.seed)})
    model, trace = train_classifier(model, train.samples, val.samples, train_cfg)
    for e in trace:
        log.info("epoch %d loss %.4f train_acc %.3f val_acc %s", e.epoch, e.train_loss, e.train_accuracy, e.val_accuracy)
    pred = predict_batch(model, test.samples)
    report = classification_metrics(pred, test.labels, len(ds.class_names))
    checkpoint = Path(out) / "model.cvkm" if out else cfg.path("checkpoint")
    save_model(checkpoint, model)
    out_dir = _output_dir(cfg, out)
    metrics = {
        **report.as_dict(),
        "confusion_matrix": report.confusion_matrix.tolist(),
        "class_names": ds.class_names,
        "test_size": len(test),
        "trace": [e.__dict__ for e in trace],
    }
    atomic_write(out_dir / "metrics.json", (json.dumps(metrics, indent=2, sort_keys=True) + "\n").encode())
    print(f"checkpoint: {checkpoint}")
    for key in ("accuracy", "precision", "recall", "f1"):
        print(f"{key:<10} {metrics[key]:.4f}")
    return metrics


# --------------------------------------------------------------------------
# dump-activations


def _source_images(cfg: PipelineConfig, source: str):
    if source == "dataset":
        try:
            return C.load_image_directory(cfg.path("data_dir"), labeled=True).samples
        except C.DatasetError as exc:
            raise DataError(str(exc)) from exc
    kind, _, name = source.partition(":")
    base = {"concept": cfg.path("concepts_dir"), "negatives": cfg.path("negatives_dir")}.get(kind)
    if base is None or not name:
        raise ConfigError(f"unknown source {source!r}; use dataset, concept:NAME or negatives:NAME")
    try:
        return C.load_image_directory(base / name, labeled=False).samples
    except C.DatasetError as exc:
        raise DataError(str(exc)) from exc


def _load_checkpoint(cfg: PipelineConfig):
    path = cfg.path("checkpoint")
    try:
        return load_model(path)
    except FileNotFoundError:
        raise DataError(f"checkpoint {path} not found") from None
    except FormatError as exc:
        raise DataError(f"checkpoint {path}: {exc}") from exc


def cmd_dump_activations(
    cfg: PipelineConfig, layers: Sequence[str], out: Optional[str] = None, source: str = "dataset",
    gradients: bool = False,
) -> list[Path]:
    model = _load_checkpoint(cfg)
    unknown = [l for l in layers if l not in model.layer_names]
    if unknown:
        raise ConfigError(f"unknown layers: {', '.join(unknown)} (model has {', '.join(model.layer_names)})")
    images = _source_images(cfg, source)
    out_dir = Path(out) if out else cfg.path("output_dir") / "activations"
    x = stack_pixels(images)
    written = []
    for layer in layers:
        acts = activation_matrix(model, images, layer)
        grads = {}
        if gradients:
            for k in range(model.class_count):
                grads[k] = np.concatenate(
                    [model.logit_gradients(x[i : i + 128], layer, k) for i in range(0, len(x), 128)]
                )
        path = out_dir / f"{layer}.actv"
        save_dump(path, ActivationDump(layer, acts, grads))
        written.append(path)
        print(f"{path}: {acts.shape[0]} x {acts.shape[1]}")
    return written


# --------------------------------------------------------------------------
# run-tcav


def _class_inputs(cfg: PipelineConfig, ds, splits, class_k: int):
    which = cfg.experiment.inputs
    pool = ds.samples if which == "all" else dict(zip(("train", "val", "test"), splits))[which].samples
    inputs = [s for s in pool if s.label == class_k]
    if not inputs:
        raise DataError(f"no {which} images of class {ds.class_names[class_k]!r}")
    return inputs


def _load_concepts(cfg: PipelineConfig, names):
    sets, pools, pool_cache = [], {}, {}
    for spec in cfg.concepts:
        if spec.name not in names:
            continue
        try:
            images = C.load_image_directory(cfg.path("concepts_dir") / spec.name, labeled=False).samples
            if spec.negatives not in pool_cache:
                pspec = cfg.pool_spec(spec.negatives)
                pimgs = C.load_image_directory(cfg.path("negatives_dir") / spec.negatives, labeled=False).samples
                tags = {"grayscale_leaves": set(C.COLOR_REFERENCES),
                        "healthy_leaves": set(C.TEXTURE_KINDS) | {"late_blight"}}[pspec.kind]
                pool_cache[spec.negatives] = C.NegativePool(pimgs, frozenset(tags))
        except C.DatasetError as exc:
            raise DataError(f"{exc} (run generate-concepts first?)") from exc
        provenance = {"color": "synthetic_color"}.get(spec.kind, "synthetic_texture")
        sets.append(C.ConceptSet(spec.name, images, provenance))
        pools[spec.name] = pool_cache[spec.negatives]
    return sets, pools


def cmd_run_tcav(cfg: PipelineConfig, out: Optional[str] = None) -> list:
    model = _load_checkpoint(cfg)
    ds, splits = load_splits(cfg)
    exp = cfg.experiment
    names = list(exp.concepts) or [c.name for c in cfg.concepts]
    unknown = [l for l in exp.layers if l not in model.layer_names]
    if unknown:
        raise ConfigError(f"unknown layers: {', '.join(unknown)} (model has {', '.join(model.layer_names)})")
    class_names = list(exp.classes) or [ds.class_names[-1]]
    bad = [c for c in class_names if c not in ds.class_names]
    if bad:
        raise ConfigError(f"unknown classes {bad}; dataset has {ds.class_names}")
    concept_sets, pools = _load_concepts(cfg, names)
    cav_cfg = type(cfg.cav)(**{**cfg.cav.__dict__, "seed": cfg.effective(cfg.cav.seed)})

    out_dir = _output_dir(cfg, out)
    results_path = out_dir / "results.json"
    results, cavs = [], []
    try:
        for cname in class_names:
            k = ds.class_names.index(cname)
            inputs = _class_inputs(cfg, ds, splits, k)
            for layer in sorted(exp.layers, key=model.layer_index):
                ecfg = ExperimentConfig(
                    layers=[layer], concepts=names, class_k=k, n_runs=exp.n_runs,
                    negatives_per_run=exp.negatives_per_run, alpha=exp.alpha, m=exp.m,
                    seed=cfg.effective(exp.seed), test=exp.test,
                )
                results.extend(run_experiment(model, ecfg, concept_sets, pools, inputs, cav_cfg, cav_sink=cavs))
                write_results(results_path, results, complete=False, class_names=ds.class_names)
    except Exception:
        if results:
            log.error("run interrupted; partial results in %s (complete = false)", results_path)
        raise
    write_results(results_path, results, complete=True, class_names=ds.class_names)
    save_cavs(out_dir / "cavs.cvkc", cavs)
    if cfg.report.emit_csv:
        atomic_write(out_dir / "results.csv", results_to_csv(results, ds.class_names).encode())
    if cfg.report.emit_svg:
        for label, svg in charts_by_class(results, ds.class_names).items():
            atomic_write(out_dir / f"tcav_{label}.svg", svg.encode())
    print(results_table(results, ds.class_names), end="")
    return results


# --------------------------------------------------------------------------
# report


def cmd_report(results_file, out: Optional[str] = None) -> str:
    try:
        results, meta = read_results(results_file)
    except ResultsError as exc:
        raise DataError(str(exc)) from exc
    class_names = meta.get("class_names") or []
    table = results_table(results, class_names)
    if not results:
        print(f"warning: results file {results_file} contains no results", file=sys.stderr)
    if not meta.get("complete", True):
        print(f"warning: results file {results_file} is marked incomplete", file=sys.stderr)
    out_dir = Path(out) if out else Path(results_file).parent
    for label, svg in charts_by_class(results, class_names).items():
        atomic_write(out_dir / f"report_{label}.svg", svg.encode())
    print(table, end="")
    return table


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML pipeline config")
    common.add_argument("--seed", type=int, help="override the top-level seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="tcavlab", description="Concept activation vector testing pipeline")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("generate-concepts", parents=[common], help="write concept, negative and dataset images")
    sub.add_parser("train", parents=[common], help="train the reference classifier")
    dump = sub.add_parser("dump-activations", parents=[common], help="write ACTV1 activation dumps")
    dump.add_argument("--layers", required=True, help="comma-separated layer names")
    dump.add_argument("--source", default="dataset", help="dataset, concept:NAME or negatives:NAME")
    dump.add_argument("--gradients", action="store_true", help="append per-class logit gradient blocks")
    sub.add_parser("run-tcav", parents=[common], help="run the TCAV experiment")
    rep = sub.add_parser("report", parents=[common], help="render a results file")
    rep.add_argument("results", help="results.json written by run-tcav")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "report":
            cmd_report(args.results, args.out)
            return EXIT_OK
        cfg = load_config(args.config, args.seed)
        if args.command == "generate-concepts":
            cmd_generate_concepts(cfg, args.out)
        elif args.command == "train":
            cmd_train(cfg, args.out)
        elif args.command == "dump-activations":
            layers = [l.strip() for l in args.layers.split(",") if l.strip()]
            cmd_dump_activations(cfg, layers, args.out, args.source, args.gradients)
        elif args.command == "run-tcav":
            cmd_run_tcav(cfg, args.out)
    except (ConfigError, ModelError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, C.DatasetError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ArithmeticError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
