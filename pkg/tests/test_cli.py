#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Command line tests: every verb on a small image folder, plus exit codes
"""

import json
import logging
import os
import sys
import tempfile
from pathlib import Path
from unittest.mock import patch

import numpy as np
from PIL import Image

from _support import collect, run_tests, synthetic_dataset

from shdl_cli import build_parser, main

TINY = [
    'scatter.resolution_factors=2.0, 1.5', 'scatter.scales=3, 3', 'scatter.pooling_scale=8',
    'scatter.select_k=false',
    'pca.s=3', 'pca.k_l3=4', 'pca.k_l4=4', 'pca.candidate_step=2', 'pca.log_grid=1.0, 2.0',
    'pca.max_patches_per_image=20', 'pca.feature_pool=2',
    'ols.budget=8', 'cv.folds=3',
    'data.target_size=16', 'data.train_per_class=6', 'data.val_per_class=1',
]


def _image_folder(root: Path) -> Path:
    data = synthetic_dataset(n_per_class=10, num_classes=3, size=16, channels=3)
    for index, (image, label) in enumerate(zip(data.images, data.labels)):
        folder = root / 'images' / data.class_names[label]
        folder.mkdir(parents=True, exist_ok=True)
        Image.fromarray((image * 255).round().astype(np.uint8)).save(folder / f"{index:03d}.png")
    return root / 'images'


def _run(tmp: Path, *argv: str) -> int:
    clean = {k: v for k, v in os.environ.items() if not k.startswith('SHDL_')}
    with patch.dict(os.environ, clean, clear=True):
        return main(['--log-dir', str(tmp / 'logs'), '--log-level', 'WARNING', *argv])


def _with_tiny(*argv: str) -> list:
    return [item for override in TINY for item in ('--set', override)] + list(argv)


def test_parser_verbs():
    parser = build_parser()
    args = parser.parse_args(['--seed', '3', '--set', 'svm.c=5', 'train', '--cifar-dir', '/data'])
    assert (args.verb, args.seed, args.overrides, args.cifar_dir) == ('train', 3, ['svm.c=5'], '/data')
    args = parser.parse_args(['sweep', '--sizes', '500', '2000', '--seeds', '0', '1'])
    assert args.sizes == [500, 2000] and args.seeds == [0, 1]
    args = parser.parse_args(['cv-curves', '--model', 'm.bin', '--ablation'])
    assert args.ablation and args.model == 'm.bin'


def test_exit_codes():
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        images = _image_folder(tmp)
        # no seed anywhere
        assert _run(tmp, *_with_tiny('train', '--image-dir', str(images))) == 2
        assert _run(tmp, '--seed', '0', '--set', 'svm.c', 'train', '--image-dir', str(images)) == 2
        assert _run(tmp, '--seed', '0', 'train') == 2
        assert _run(tmp, '--seed', '0', 'train', '--image-dir', str(tmp / 'missing')) == 3
        assert _run(tmp, 'inspect-model', '--model', str(tmp / 'missing.bin')) == 3
        (tmp / 'junk.bin').write_bytes(b'junk')
        assert _run(tmp, 'eval', '--model', str(tmp / 'junk.bin')) == 3
        with patch('svm.kkt_violation', return_value=0.5):
            assert _run(tmp, '--seed', '0', '--out', str(tmp / 'kkt.bin'),
                        *_with_tiny('train', '--image-dir', str(images))) == 4
        assert not (tmp / 'kkt.bin').exists()


def test_train_eval_inspect_curves_extract():
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        images = _image_folder(tmp)
        model_path = tmp / 'out' / 'model.bin'

        assert _run(tmp, '--seed', '0', '--out', str(model_path),
                    *_with_tiny('train', '--image-dir', str(images))) == 0
        assert model_path.exists()
        assert Path(f"{model_path}.timings.json").exists()
        assert 'seed = 0' in Path(f"{model_path}.conf").read_text(encoding='utf-8')
        selection = Path(f"{model_path}.selection.tsv").read_text(encoding='utf-8').splitlines()
        assert selection[0] == 'class\tstep\tcolumn\terr\tdescriptor'
        assert len(selection) > 1
        assert all(line.split('\t')[4] for line in selection[1:])

        assert _run(tmp, '--out', str(tmp / 'metrics'), 'eval', '--model', str(model_path)) == 0
        metrics = json.loads((tmp / 'metrics.json').read_text(encoding='utf-8'))
        assert metrics['n_samples'] == 9
        assert 0.0 <= metrics['accuracy'] <= 1.0

        assert _run(tmp, 'inspect-model', '--model', str(model_path)) == 0
        assert _run(tmp, '--out', str(tmp / 'curves'), 'cv-curves', '--model', str(model_path), '--ablation') == 0
        assert len(list((tmp / 'curves').glob('*.csv'))) == 16

        assert _run(tmp, '--out', str(tmp / 'features'), 'extract-features', '--model', str(model_path)) == 0
        assert (tmp / 'logs').is_dir()


def test_env_file_is_read_before_arguments():
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        env_file = tmp / '.env'
        env_file.write_text("SHDL_LOG_LEVEL=DEBUG\n", encoding='utf-8')
        clean = {k: v for k, v in os.environ.items() if not k.startswith('SHDL_')}
        with patch.dict(os.environ, clean, clear=True), \
                patch('shdl_cli.ENV_FILE', env_file), \
                patch('shdl_cli.setup_logging') as setup:
            assert main(['inspect-model', '--model', str(tmp / 'missing.bin')]) == 3
        assert setup.call_args.kwargs['log_level'] == logging.DEBUG


def main_tests():
    return run_tests("CLI TESTS", collect(globals()))


if __name__ == "__main__":
    sys.exit(main_tests())
