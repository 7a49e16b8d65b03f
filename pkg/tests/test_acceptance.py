""" Desk-scale reproductions on the default (3, 16, 16) synthetic task. Run with `pytest -m slow`. """
import numpy as np
import pytest

from utilities.attack_utilities import AttackConfig
from utilities.ensemble_attacks import ABLATIONS
from utilities.evaluation import (
    CampaignSpec, emit_report, generate_synthetic, run_campaign, select_sample, split_dataset,
    weight_sweep_experiment,
)
from utilities.models import ARCHITECTURES, accuracy, build_zoo, gradient_check, train_zoo
from utilities.numerics import channel_cosine_map, relative_error

pytestmark = pytest.mark.slow

ZOO = ['SmallConv', 'TinyAttention', 'Mlp', 'Linear', 'SmallConv:smallconv_reseed',
       'TinyAttention:tinyattention_reseed']
SURROGATES = ['smallconv', 'tinyattention']
TARGETS = ['mlp', 'linear', 'smallconv_reseed', 'tinyattention_reseed']


@pytest.fixture(scope='module')
def task():
    train, evaluation = split_dataset(generate_synthetic(1280, 4, seed=0), 0.2, seed=0)
    zoo = train_zoo(build_zoo(ZOO, 0), train, epochs=30, seed=0)
    return {m.model_name: m for m in zoo}, evaluation


def test_gradient_oracle():
    rng = np.random.default_rng(0)
    for model in build_zoo(ARCHITECTURES, 1):
        for _ in range(20):
            x = rng.uniform(size=model.input_shape)
            y = int(rng.integers(model.num_classes))
            analytic, numeric, mask = gradient_check(model, x, y)
            assert relative_error(analytic, numeric, mask, floor=1e-8) < 1e-4, model.model_name


def test_zoo_is_accurate(task):
    zoo, evaluation = task
    for name, model in zoo.items():
        assert accuracy(model, evaluation) >= 0.9, name


def test_white_box_potency(task):
    zoo, evaluation = task
    for name in SURROGATES:
        spec = CampaignSpec([name], [name], attacks=['Ens'], bases=['ifgsm'], cfg=AttackConfig(), samples=256)
        row = run_campaign(spec, zoo, evaluation).rows[0]
        assert row['white_box']
        assert row['asr'] >= 0.95, name
        assert row['adv_acc'] <= row['clean_acc']


def test_directional_transfer(task):
    zoo, evaluation = task
    averages = {variant: [] for variant in ABLATIONS}
    for seed in range(3):
        spec = CampaignSpec(SURROGATES, TARGETS, attacks=list(ABLATIONS), cfg=AttackConfig(seed=seed), samples=256,
                            seed=seed)
        report = run_campaign(spec, zoo, evaluation)
        for variant in ABLATIONS:
            averages[variant].append(report.black_box_average(variant))
    mean = {variant: np.mean(values) for variant, values in averages.items()}
    assert mean['AdaEA'] >= mean['Ens'] - 0.02
    assert mean['AdaEA'] >= max(mean['+AGM'], mean['+DRF']) - 0.03


def test_weight_sweep_shape(task):
    zoo, evaluation = task
    table, _ = weight_sweep_experiment([zoo[name] for name in SURROGATES], [zoo[name] for name in TARGETS],
                                       evaluation, AttackConfig(), grid_size=11, samples=64)
    sweep = table[table['w1'].notna()]
    assert len(sweep) == 11
    np.testing.assert_allclose(sweep['w1'], np.arange(11) / 10)
    equal_weight = sweep.loc[np.isclose(sweep['w1'], 0.5), 'black_box_asr'].iloc[0]
    assert sweep['black_box_asr'].max() >= equal_weight


def test_architectural_diversity(task):
    zoo, evaluation = task
    cosines = []
    for index in select_sample(evaluation, 32, seed=0):
        x, y = evaluation.images[index], evaluation.labels[index]
        cos_map = channel_cosine_map(zoo['smallconv'].input_gradient(x, y), zoo['tinyattention'].input_gradient(x, y))
        cosines.append(cos_map.mean())
    assert np.mean(cosines) < 0.9


def _seeded_campaign_csv(path):
    shape, classes, seed = (3, 8, 8), 4, 7
    data = generate_synthetic(96, classes, shape, seed=seed)
    zoo = train_zoo(build_zoo(['Linear', 'Mlp', 'TinyAttention'], seed, shape, classes), data, epochs=3, seed=seed)
    names = [m.model_name for m in zoo]
    spec = CampaignSpec(names[:2], names, attacks=list(ABLATIONS), bases=['fgsm', 'ifgsm', 'mifgsm', 'di2fgsm'],
                        cfg=AttackConfig(iterations=4, seed=seed), samples=6, seed=seed)
    emit_report(run_campaign(spec, zoo, data), path, include_timing=False)
    return path.read_bytes()


def test_seeded_campaign_is_byte_identical(tmp_path):
    assert _seeded_campaign_csv(tmp_path / 'first.csv') == _seeded_campaign_csv(tmp_path / 'second.csv')
