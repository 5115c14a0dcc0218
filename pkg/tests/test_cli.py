import copy
import json
import os
import shutil

import numpy as np
import pandas as pd
import pytest

from lesiondet.core.io import txt
from lesiondet.core.io.images import read_f32i
from lesiondet.dataset.manifest import read_manifest
from lesiondet.dataset.split import TEST, SplitAssignment
from lesiondet.detection.froc import read_froc_csv, sensitivity_at_fp
from lesiondet.scripts.cli import EXIT_ARGUMENT, EXIT_DATA, EXIT_IO, EXIT_OK, INDEX_NAME, MANIFEST_NAME, main


def write_config(path, values: dict) -> str:
    path = str(path)
    with open(path, 'w') as f:
        json.dump(values, f)
    return path


def train_args(config: str, manifest: str, out_model: str, *extra) -> list:
    return ['--config', config, 'train', '--manifest', manifest, '--out-model', out_model, *extra]


def run_pipeline(root, config: str, n_exams: int = 12, malignant_fraction: float = 0.5, threads: int = 2) -> dict:
    """ synth, preprocess, train, infer and froc into one directory. """
    root = str(root)
    paths = {
        'data': os.path.join(root, 'data'),
        'prep': os.path.join(root, 'prep'),
        'model': os.path.join(root, 'model', 'unet.ckpt'),
        'maps': os.path.join(root, 'maps'),
        'prefix': os.path.join(root, 'eval', 'run'),
    }
    paths['manifest'] = os.path.join(paths['prep'], MANIFEST_NAME)
    common = ['--config', config, '--threads', str(threads)]

    assert main(common + ['synth', '--n-exams', str(n_exams), '--malignant-fraction', str(malignant_fraction),
                          '--out-dir', paths['data']]) == EXIT_OK
    assert main(common + ['preprocess', '--manifest', os.path.join(paths['data'], MANIFEST_NAME),
                          '--out-dir', paths['prep']]) == EXIT_OK
    assert main(common + ['train', '--manifest', paths['manifest'], '--out-model', paths['model']]) == EXIT_OK
    assert main(common + ['infer', '--model', paths['model'], '--manifest', paths['manifest'],
                          '--out-dir', paths['maps']]) == EXIT_OK
    assert main(common + ['froc', '--maps-dir', paths['maps'], '--manifest', paths['manifest'],
                          '--out-prefix', paths['prefix']]) == EXIT_OK
    return paths


@pytest.fixture(scope='module')
def config_path(tmp_path_factory, tiny_config_dict):
    return write_config(tmp_path_factory.mktemp('config') / 'tiny.json', tiny_config_dict)


@pytest.fixture(scope='module')
def pipeline(tmp_path_factory, config_path):
    return run_pipeline(tmp_path_factory.mktemp('pipeline'), config_path)


def test_pipeline_outputs(pipeline):
    for suffix in ('_candidates.csv', '_froc.csv', '_froc.svg'):
        assert os.path.exists(pipeline['prefix'] + suffix)

    for suffix in ('', '.last', '.json', '.last.json', '.log.csv', '.split.json'):
        assert os.path.exists(pipeline['model'] + suffix), suffix

    log = pd.read_csv(pipeline['model'] + '.log.csv')
    assert list(log.columns) == ['epoch', 'train_loss', 'val_loss', 'lr']
    assert list(log['epoch']) == [1, 2, 3]

    curves = read_froc_csv(pipeline['prefix'] + '_froc.csv')
    assert [c.kind for c in curves] == ['image', 'exam']
    assert curves[0].points[-1].threshold == np.inf


def test_preprocessed_manifest(pipeline):
    records = read_manifest(pipeline['manifest'])

    assert all(record.preprocessed for record in records)
    assert all(os.path.exists(record.mask_path) for record in records)
    assert all(record.spacing_mm == 1.0 for record in records)


def test_infer_writes_test_split_maps(pipeline):
    index = txt.read_json(os.path.join(pipeline['maps'], INDEX_NAME))
    split = SplitAssignment.load(pipeline['model'] + '.split.json')
    records = {r.image_id: r for r in read_manifest(pipeline['manifest'])}

    assert index['split'] == TEST
    assert index['image_ids']
    for image_id in index['image_ids']:
        assert split.split_of(records[image_id].exam_id) == TEST

        prob_map = read_f32i(os.path.join(pipeline['maps'], f'{image_id}.f32i'))
        assert prob_map.shape == (64, 64)
        assert prob_map.spacing_mm == 1.0
        assert 0.0 <= prob_map.pixels.min() and prob_map.pixels.max() <= 1.0


def test_infer_all_split(pipeline, config_path, tmp_path):
    assert main(['--config', config_path, 'infer', '--model', pipeline['model'], '--manifest', pipeline['manifest'],
                 '--split', 'all', '--out-dir', str(tmp_path)]) == EXIT_OK

    index = txt.read_json(str(tmp_path / INDEX_NAME))
    assert index['image_ids'] == [r.image_id for r in read_manifest(pipeline['manifest'])]


def test_infer_rejects_other_preprocessing(pipeline, tiny_config_dict, tmp_path):
    values = copy.deepcopy(tiny_config_dict)
    values['preprocessing']['band_sigmas_mm'] = [2.0, 4.0]
    config = write_config(tmp_path / 'bands.json', values)

    assert main(['--config', config, 'infer', '--model', pipeline['model'], '--manifest', pipeline['manifest'],
                 '--out-dir', str(tmp_path / 'maps')]) == EXIT_DATA


def test_froc_prints_summary(pipeline, config_path, tmp_path, capsys):
    assert main(['--config', config_path, 'froc', '--maps-dir', pipeline['maps'], '--manifest', pipeline['manifest'],
                 '--out-prefix', str(tmp_path / 'again'), '--log-x']) == EXIT_OK

    out = capsys.readouterr().out
    assert 'image-based: max sensitivity' in out
    assert 'exam-based: max sensitivity' in out
    assert (tmp_path / 'again_froc.csv').read_bytes() == open(pipeline['prefix'] + '_froc.csv', 'rb').read()


def test_plot_command(pipeline, tmp_path):
    out = tmp_path / 'replot.svg'
    assert main(['plot', '--froc-csv', pipeline['prefix'] + '_froc.csv', '--out', str(out)]) == EXIT_OK
    assert out.exists()


def test_pipeline_is_deterministic(pipeline, config_path, tmp_path):
    again = run_pipeline(tmp_path, config_path, threads=1)

    for suffix in ('_froc.csv', '_candidates.csv'):
        with open(pipeline['prefix'] + suffix, 'rb') as first, open(again['prefix'] + suffix, 'rb') as second:
            assert first.read() == second.read(), suffix


def test_resume_replays_uninterrupted_run(pipeline, tiny_config_dict, tmp_path):
    short = copy.deepcopy(tiny_config_dict)
    short['training']['max_epochs'] = 2
    short_path = write_config(tmp_path / 'short.json', short)
    full_path = write_config(tmp_path / 'full.json', tiny_config_dict)

    out_model = str(tmp_path / 'unet.ckpt')
    assert main(train_args(short_path, pipeline['manifest'], out_model)) == EXIT_OK
    assert len(pd.read_csv(out_model + '.log.csv')) == 2

    assert main(train_args(full_path, pipeline['manifest'], out_model, '--resume')) == EXIT_OK

    for suffix in ('.log.csv', '.last', '.last.json'):
        with open(pipeline['model'] + suffix, 'rb') as uninterrupted, open(out_model + suffix, 'rb') as resumed:
            assert uninterrupted.read() == resumed.read(), suffix


def test_learning_rate_halves_after_plateau(pipeline, tiny_config_dict, tmp_path):
    values = copy.deepcopy(tiny_config_dict)
    # Only the first epoch can count as an improvement.
    values['training'].update({'patience': 1, 'plateau_threshold': 1e3})
    config = write_config(tmp_path / 'plateau.json', values)

    out_model = str(tmp_path / 'unet.ckpt')
    assert main(train_args(config, pipeline['manifest'], out_model)) == EXIT_OK

    assert list(pd.read_csv(out_model + '.log.csv')['lr']) == [0.01, 0.01, 0.005]


def test_resume_without_checkpoint(pipeline, config_path, tmp_path):
    out_model = str(tmp_path / 'none.ckpt')
    assert main(train_args(config_path, pipeline['manifest'], out_model, '--resume')) == EXIT_ARGUMENT


def test_exit_codes(pipeline, config_path, tmp_path):
    assert main(['synth', '--n-exams', '2', '--out-dir', str(tmp_path / 'few')]) == EXIT_ARGUMENT

    broken = tmp_path / 'broken.json'
    broken.write_text('{"seed": ')
    assert main(['--config', str(broken), 'synth', '--out-dir', str(tmp_path / 'x')]) == EXIT_ARGUMENT

    unknown = write_config(tmp_path / 'unknown.json', {'unet': {'layers': 3}})
    assert main(['--config', unknown, 'synth', '--out-dir', str(tmp_path / 'y')]) == EXIT_ARGUMENT

    wrong_type = write_config(tmp_path / 'wrong_type.json', {'unet': {'depth': '3'}})
    assert main(['--config', wrong_type, 'synth', '--out-dir', str(tmp_path / 'w')]) == EXIT_ARGUMENT

    assert main(['--config', config_path, 'froc', '--maps-dir', pipeline['maps'],
                 '--manifest', str(tmp_path / 'missing.jsonl'), '--out-prefix', str(tmp_path / 'z')]) == EXIT_IO

    assert main(['--config', config_path, 'infer', '--model', str(tmp_path / 'missing.ckpt'),
                 '--manifest', pipeline['manifest'], '--out-dir', str(tmp_path / 'maps')]) == EXIT_IO


def test_missing_map_is_a_data_error(pipeline, config_path, tmp_path):
    maps = tmp_path / 'maps'
    shutil.copytree(pipeline['maps'], str(maps))

    image_id = txt.read_json(str(maps / INDEX_NAME))['image_ids'][0]
    os.remove(str(maps / f'{image_id}.f32i'))

    assert main(['--config', config_path, 'froc', '--maps-dir', str(maps), '--manifest', pipeline['manifest'],
                 '--out-prefix', str(tmp_path / 'eval')]) == EXIT_DATA


@pytest.mark.slow
def test_synthetic_detection_quality(tmp_path):
    config = write_config(tmp_path / 'desk.json', {'seed': 3, 'unet': {'depth': 3, 'base_filters': 8},
                                                    'training': {'max_epochs': 50}})
    paths = run_pipeline(tmp_path, config, n_exams=60, malignant_fraction=0.42, threads=4)

    image_curve, exam_curve = read_froc_csv(paths['prefix'] + '_froc.csv')

    assert sensitivity_at_fp(image_curve, 2.0) >= 0.85
    assert sensitivity_at_fp(exam_curve, 2.0) >= 0.95
