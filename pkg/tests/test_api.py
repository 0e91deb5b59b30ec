"""
HTTP 接口：统一返回结构、参数校验、解释/评估/基准流程与静态产物
"""
import os

import numpy as np
import pytest

from core.checkpoint import save_checkpoint
from core.interpretability import write_ppm
from core.model_zoo import build_model, micro_config

TRAIN_CONFIG = {'data': {'kind': 'synthetic', 'num_classes': 4, 'train_size': 32, 'val_size': 16}}


@pytest.fixture
def micro_run(testing_config):
    """运行目录中放一个小模型检查点与一张样例图像"""
    runs = testing_config.RUNS_DIR
    model = build_model(micro_config('filter'), seed=0)
    save_checkpoint(os.path.join(runs, 'micro', 'best.ckpt'), model, epoch=1,
                    extra={'train_config': TRAIN_CONFIG})
    write_ppm(os.path.join(runs, 'samples', 'synthetic_0.ppm'), np.random.default_rng(0).random((3, 16, 16)))
    return runs


def _static_path(app, url):
    prefix = app.config['SERVER_URL']
    assert url.startswith(prefix + app.config['STATIC_URL_PREFIX'] + '/')
    return url[len(prefix):]


def test_index_and_health(client):
    assert client.get('/').get_json()['service'] == 'FilterViT Experiment Backend'
    assert client.get('/health').get_json()['status'] == 'healthy'


def test_every_configured_directory_is_created(app):
    dirs = {k: v for k, v in app.config.items() if k.endswith('_DIR')}
    assert set(dirs) == {'DATA_DIR', 'RUNS_DIR', 'LOG_DIR', 'STATIC_FILES_DIR'}
    for path in dirs.values():
        assert os.path.isdir(path)


def test_test_endpoint_lists_models(client):
    body = client.get('/api/experiments/test').get_json()
    assert body['code'] == 200
    assert 'filtervit_micro' in body['data']['models']
    assert body['data']['dtype'] == 'float64'


def test_unknown_route_uses_envelope(client):
    response = client.get('/api/nothing')
    assert response.status_code == 404
    assert response.get_json() == {'code': 404, 'message': '请求的资源不存在', 'data': None}


def test_wrong_method(client):
    response = client.get('/api/explanations')
    assert response.status_code == 405
    assert response.get_json()['code'] == 405


def test_non_json_body_is_rejected(client):
    response = client.post('/api/explanations', data='checkpoint=x', content_type='text/plain')
    assert response.status_code == 400
    assert response.get_json()['data'] is None


@pytest.mark.parametrize('endpoint, payload, missing', [
    ('/api/explanations', {'checkpoint': 'micro/best.ckpt'}, 'image'),
    ('/api/evaluations', {'data': 'synthetic'}, 'checkpoint'),
    ('/api/benchmarks', {}, 'grid'),
])
def test_missing_fields(client, endpoint, payload, missing):
    response = client.post(endpoint, json=payload)
    assert response.status_code == 400
    assert missing in response.get_json()['message']


def test_invalid_parameter_types(client):
    response = client.post('/api/explanations', json={'checkpoint': 'a', 'image': 'b', 'alpha': 'high'})
    assert response.status_code == 400
    response = client.post('/api/evaluations', json={'checkpoint': 'a', 'batch_size': 0})
    assert response.status_code == 400
    response = client.post('/api/benchmarks', json={'grid': [8, 16]})
    assert response.status_code == 400


def test_missing_checkpoint_is_404(client):
    response = client.post('/api/evaluations', json={'checkpoint': 'absent/best.ckpt'})
    assert response.status_code == 404
    assert response.get_json()['code'] == 404


@pytest.mark.parametrize('checkpoint', ['../outside/best.ckpt', '/etc/passwd', 'micro/../../../escape.ckpt'])
def test_paths_outside_served_directories_are_rejected(client, micro_run, checkpoint):
    response = client.post('/api/evaluations', json={'checkpoint': checkpoint})
    assert response.status_code == 400
    response = client.post('/api/explanations', json={'checkpoint': 'micro/best.ckpt', 'image': checkpoint})
    assert response.status_code == 400


def test_absolute_path_inside_runs_dir_is_accepted(client, micro_run):
    response = client.post('/api/evaluations', json={'checkpoint': os.path.join(micro_run, 'micro', 'best.ckpt')})
    assert response.status_code == 200


def test_explanations_return_fetchable_overlays(app, client, micro_run):
    response = client.post('/api/explanations', json={
        'checkpoint': 'micro/best.ckpt', 'image': 'samples/synthetic_0.ppm', 'alpha': 0.5, 'layer': 'all',
    })
    assert response.status_code == 200
    data = response.get_json()['data']
    assert len(data['overlay_urls']) == 2
    assert [s['k'] for s in data['stats']] == [16, 4]
    assert 0 <= data['prediction'] < 4

    overlay = client.get(_static_path(app, data['overlay_urls'][0]))
    assert overlay.status_code == 200
    assert overlay.data.startswith(b'P6\n16 16\n255\n')
    coverage = client.get(_static_path(app, data['coverage_url']))
    assert coverage.get_json()['prediction'] == data['prediction']


def test_explanations_reject_bad_layer(client, micro_run):
    response = client.post('/api/explanations', json={
        'checkpoint': 'micro/best.ckpt', 'image': 'samples/synthetic_0.ppm', 'layer': 7,
    })
    assert response.status_code == 400


def test_evaluations_on_stored_synthetic_split(client, micro_run):
    response = client.post('/api/evaluations', json={'checkpoint': 'micro/best.ckpt', 'batch_size': 8})
    assert response.status_code == 200
    data = response.get_json()['data']
    assert data['samples'] == 16
    assert data['epoch'] == 1
    assert 0.0 <= data['accuracy'] <= 1.0
    assert data['loss'] > 0


def test_benchmarks_write_static_report(app, client):
    grid = {'resolutions': [4], 'channels': [4], 'k_fractions': [0.25, 1.0], 'variants': ['dense', 'filter']}
    response = client.post('/api/benchmarks', json={'grid': grid})
    assert response.status_code == 200
    data = response.get_json()['data']
    assert {row['variant'] for row in data['rows']} == {'dense', 'filter'}
    csv = client.get(_static_path(app, data['csv_url']))
    assert csv.status_code == 200
    assert csv.data.decode('utf-8').splitlines()[0] == 'res,channels,variant,K,macs,median_ms,speedup_vs_dense'


def test_benchmarks_reject_invalid_grid(client):
    response = client.post('/api/benchmarks', json={'grid': {'resolutions': [4], 'repetitions': 3}})
    assert response.status_code == 400
