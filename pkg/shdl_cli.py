#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
SHDL command line
Verbs: train, eval, sweep, extract-features, inspect-model, cv-curves
"""

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

os.environ.setdefault('PYTHONIOENCODING', 'utf-8')

from rich.table import Table

from errors import ShdlError
from logging_config import console, setup_logging

logger = logging.getLogger('shdl_cli')

ENV_FILE = Path(__file__).parent.absolute() / '.env'


def load_env_file(env_file: Path) -> None:
    """KEY=VALUE lines from a .env file; variables already set in the environment win"""
    if not env_file.exists():
        return
    logger.debug(f"Loading environment variables from {env_file}")
    with open(env_file, 'r', encoding='utf-8') as f:
        for line in f:
            line = line.strip()
            if line and not line.startswith('#') and '=' in line:
                key, value = line.split('=', 1)
                os.environ.setdefault(key.strip(), value.strip())


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='shdl', description="Scattering + PCA + OLS/SVM image classifier")
    parser.add_argument('--config', help="Preset name (desk, cifar_full, caltech) or config file path")
    parser.add_argument('--seed', type=int, help="Run seed (mandatory unless set in the config)")
    parser.add_argument('--threads', type=int, help="Worker pool size; 0 uses every core")
    parser.add_argument('--out', help="Output path (model file, report prefix or directory)")
    parser.add_argument('--set', dest='overrides', action='append', default=[], metavar='KEY=VALUE',
                        help="Override one config key, e.g. --set pca.k_l3=40")
    parser.add_argument('--log-level', default=os.environ.get('SHDL_LOG_LEVEL', 'INFO'),
                        choices=['DEBUG', 'INFO', 'WARNING', 'ERROR'])
    parser.add_argument('--log-dir', default='logs')

    verbs = parser.add_subparsers(dest='verb', required=True)

    train = verbs.add_parser('train', help="Train a model and save it")
    train.add_argument('--cifar-dir')
    train.add_argument('--image-dir')

    evaluate = verbs.add_parser('eval', help="Evaluate a saved model on the test split")
    evaluate.add_argument('--model', required=True)
    evaluate.add_argument('--cifar-dir')
    evaluate.add_argument('--image-dir')

    sweep = verbs.add_parser('sweep', help="Accuracy versus training-set size")
    sweep.add_argument('--sizes', type=int, nargs='+')
    sweep.add_argument('--seeds', type=int, nargs='+')
    sweep.add_argument('--cifar-dir')
    sweep.add_argument('--image-dir')

    extract = verbs.add_parser('extract-features', help="Dump raw features with a column header")
    extract.add_argument('--model', help="Trained model; without it only scattering features are written")
    extract.add_argument('--split', choices=['train', 'test'], default='test')
    extract.add_argument('--cifar-dir')
    extract.add_argument('--image-dir')

    inspect = verbs.add_parser('inspect-model', help="Print the manifest of a saved model")
    inspect.add_argument('--model', required=True)

    curves = verbs.add_parser('cv-curves', help="Write the recorded cross-validation curves as CSV")
    curves.add_argument('--model', required=True)
    curves.add_argument('--ablation', action='store_true', help="Also print the layer ablation report")
    return parser


def _config(args: argparse.Namespace):
    from settings import load_config
    from workers import set_default_threads

    overrides: List[str] = list(args.overrides)
    if getattr(args, 'cifar_dir', None):
        overrides.append(f"data.cifar_dir={args.cifar_dir}")
    if getattr(args, 'image_dir', None):
        overrides.append(f"data.image_dir={args.image_dir}")

    config = load_config(args.config, overrides, seed=args.seed, threads=args.threads)
    set_default_threads(config.threads)
    return config


def _model_data_config(model_config, args: argparse.Namespace):
    """The model's own config with data paths from the command line or SHDL_CIFAR_DIR"""
    data = {}
    if args.cifar_dir:
        data = {'cifar_dir': args.cifar_dir, 'image_dir': None}
    elif args.image_dir:
        data = {'cifar_dir': None, 'image_dir': args.image_dir}
    elif not (model_config.data.cifar_dir or model_config.data.image_dir) and os.environ.get('SHDL_CIFAR_DIR'):
        data = {'cifar_dir': os.environ['SHDL_CIFAR_DIR']}
    return model_config.model_copy(update={'data': model_config.data.model_copy(update=data)})


def cmd_train(args: argparse.Namespace) -> int:
    from model_store import save_model
    from ols import write_selection_report
    from pipeline import feature_descriptors, load_datasets, train_pipeline, write_timings
    from settings import dump_config

    config = _config(args)
    train_set, _ = load_datasets(config)
    timings = []
    model = train_pipeline(config, train_set, timings=timings)
    out = Path(args.out or 'shdl_model.bin')
    save_model(model, out)
    write_timings(timings, out)
    Path(f"{out}.conf").write_text(dump_config(model.config), encoding='utf-8')
    descriptors = feature_descriptors(model.config, tuple(model.manifest.image_shape), model.pca_stacks)
    write_selection_report(model.selection, f"{out}.selection.tsv", descriptors)
    total = sum(t.seconds for t in timings)
    logger.info(f"✓ Training finished in {total:.1f}s, model at {out}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    from model_store import load_model
    from pipeline import evaluate, load_datasets, write_metrics

    model = load_model(args.model)
    _, test_set = load_datasets(_model_data_config(model.config, args))
    report = evaluate(model, test_set)
    json_path, csv_path = write_metrics(report, args.out or 'metrics')
    logger.info(f"✓ Metrics written to {json_path} and {csv_path}")
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    from pipeline import load_datasets, sweep_sizes, write_sweep_csv

    config = _config(args)
    full = config.model_copy(update={'data': config.data.model_copy(update={'train_per_class': None})})
    train_set, test_set = load_datasets(full)
    report = sweep_sizes(config, train_set, test_set, args.sizes, args.seeds)
    path = write_sweep_csv(report, args.out or 'sweep.csv')

    table = Table(title="Accuracy by training-set size")
    table.add_column("size", justify="right")
    table.add_column("mean accuracy", justify="right")
    for size, mean in report.mean_accuracy_by_size.items():
        table.add_row(str(size), f"{mean:.4f}")
    console.print(table)
    if report.failed_rows():
        logger.warning(f"{len(report.failed_rows())} sweep cells failed")
    logger.info(f"✓ Sweep written to {path}")
    return 0


def cmd_extract(args: argparse.Namespace) -> int:
    from model_store import load_model
    from pipeline import extract_features, load_datasets

    model = load_model(args.model) if args.model else None
    config = _model_data_config(model.config, args) if model is not None else _config(args)
    train_set, test_set = load_datasets(config)
    dataset = train_set if args.split == 'train' else test_set
    extract_features(dataset.images, config, args.out or f"features_{args.split}", model)
    return 0


def cmd_inspect(args: argparse.Namespace) -> int:
    from model_store import load_model

    model = load_model(args.model)
    manifest = model.manifest

    summary = Table(title="Model")
    summary.add_column("field")
    summary.add_column("value")
    summary.add_row("version", str(model.version))
    summary.add_row("seed", str(manifest.seed))
    summary.add_row("training images", str(manifest.n_train))
    summary.add_row("dataset sha256", manifest.dataset_hash[:16] + "…")
    summary.add_row("classes", ", ".join(manifest.class_names))
    summary.add_row("SVM C / gamma", f"{model.svm.c:g} / {model.svm.gamma:.3e}")
    summary.add_row("deviations", ", ".join(manifest.deviation_flags))
    console.print(summary)

    chain = Table(title="Dimension chain")
    for column in ("stage", "input", "output"):
        chain.add_column(column, justify="right" if column != "stage" else "left")
    for record in manifest.dimension_chain:
        chain.add_row(record.stage, str(record.input_dim), str(record.output_dim))
    console.print(chain)

    layers = Table(title="PCA layers")
    for column in ("s", "stream", "layer", "K", "K chosen", "k", "rank deficient"):
        layers.add_column(column)
    for stack in model.pca_stacks:
        for stream in stack.streams:
            for name, layer in (('L3', stack.layer3[stream]), ('L4', stack.layer4[stream])):
                layers.add_row(str(stack.filter_size), stream, name, str(layer.capacity),
                               str(layer.optimal_count), f"{layer.log_param:g}", str(layer.rank_deficient))
    console.print(layers)

    k_table = Table(title="Scattering log parameters")
    k_table.add_column("scale")
    k_table.add_column("k L1")
    k_table.add_column("k L2")
    k_table.add_column("|mean - median| raw", justify="right")
    k_table.add_column("|mean - median| log", justify="right")
    scatter = model.config.scatter
    gaps = manifest.symmetry_gaps
    for j in sorted(set(scatter.log_params_l1) | set(scatter.log_params_l2)):
        raw_gap, log_gap = gaps.get(j, (float('nan'), float('nan')))
        k_table.add_row(str(j), f"{scatter.log_params_l1.get(j, float('nan')):.3f}",
                        f"{scatter.log_params_l2.get(j, float('nan')):.3f}",
                        f"{raw_gap:.4g}", f"{log_gap:.4g}")
    console.print(k_table)

    svm = Table(title="SVM")
    svm.add_column("class")
    svm.add_column("support vectors", justify="right")
    svm.add_column("selected features", justify="right")
    for cls, binary in zip(model.svm.classes, model.svm.binaries):
        svm.add_row(manifest.class_names[cls], str(len(binary.dual_coef)),
                    str(len(model.selection.per_class.get(cls, []))))
    console.print(svm)
    return 0


def cmd_curves(args: argparse.Namespace) -> int:
    from model_store import load_model
    from pipeline import write_cv_curves

    model = load_model(args.model)
    paths = write_cv_curves(model.manifest.cv_curves, args.out or 'cv_curves')
    logger.info(f"✓ Wrote {len(paths)} curve files")

    if args.ablation:
        if not model.manifest.ablation:
            logger.warning("Model was trained without ablation; retrain with --set ablation=true")
        else:
            table = Table(title="Layer ablation (5-CV accuracy)")
            table.add_column("features")
            table.add_column("accuracy", justify="right")
            for name, score in model.manifest.ablation.items():
                table.add_row(name, f"{score:.4f}")
            console.print(table)
            if not model.manifest.ablation_monotonic:
                logger.warning("Accuracy does not grow with every added layer")
    return 0


COMMANDS = {
    'train': cmd_train,
    'eval': cmd_eval,
    'sweep': cmd_sweep,
    'extract-features': cmd_extract,
    'inspect-model': cmd_inspect,
    'cv-curves': cmd_curves,
}


def main(argv: Optional[List[str]] = None) -> int:
    load_env_file(ENV_FILE)
    args = build_parser().parse_args(argv)
    setup_logging(log_level=getattr(logging, args.log_level), log_dir=args.log_dir)

    from workers import set_default_threads
    set_default_threads(args.threads if args.threads is not None else 1)

    try:
        return COMMANDS[args.verb](args)
    except ShdlError as e:
        logger.error(f"❌ {type(e).__name__}: {e}")
        return e.exit_code
    except KeyboardInterrupt:
        logger.error("Interrupted")
        return 130
    except Exception as e:
        logger.exception(f"❌ Unexpected failure: {e}")
        return 4


if __name__ == "__main__":
    sys.exit(main())
