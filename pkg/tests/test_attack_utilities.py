import numpy as np
import pytest

from utilities.attack_utilities import (
    AttackConfig, AttackState, apply_input_map, base_step, diverse_input_transform, fgsm_attack, iter_step,
    iterative_attack, make_rng, momentum_update, sample_diverse_input_map, scatter_input_gradient,
)
from utilities.evaluation import generate_synthetic
from utilities.models import create_model
from utilities.numerics import cross_entropy

from tests.conftest import NUM_CLASSES, SMALL_SHAPE

EPS = 8 / 255


class TestAttackConfig:

    def test_defaults(self):
        cfg = AttackConfig().validate()
        assert (cfg.epsilon, cfg.alpha, cfg.iterations, cfg.beta, cfg.eta) == (8 / 255, 2 / 255, 20, 10.0, -0.3)
        assert (cfg.mu, cfg.di_probability, cfg.di_max_enlarge, cfg.gamma, cfg.seed) == (1.0, 0.5, 1.1, 1e-12, 0)

    @pytest.mark.parametrize('changes, field', [
        ({'alpha': 0.1}, 'alpha'),
        ({'eta': 1.5}, 'eta'),
        ({'epsilon': 1.0, 'alpha': 0.5}, 'epsilon'),
        ({'iterations': 0}, 'iterations'),
        ({'mu': -1.0}, 'mu'),
        ({'di_probability': 1.2}, 'di_probability'),
        ({'di_max_enlarge': 0.9}, 'di_max_enlarge'),
        ({'gamma': 0.0}, 'gamma'),
    ])
    def test_invalid_fields(self, changes, field):
        cfg = AttackConfig().replace(**changes)
        assert field in [name for name, _ in cfg.problems()]
        with pytest.raises(ValueError):
            cfg.validate()

    def test_to_dict_is_the_public_field_listing(self):
        cfg = AttackConfig(seed=3)
        assert list(cfg.to_dict()) == ['epsilon', 'alpha', 'iterations', 'beta', 'eta', 'mu', 'di_probability',
                                       'di_max_enlarge', 'gamma', 'seed']
        assert cfg.to_dict()['seed'] == 3
        assert not hasattr(AttackConfig, 'field_names')

    def test_step_schedule(self):
        cfg = AttackConfig()
        assert cfg.step_schedule('fgsm') == (1, cfg.epsilon)
        assert cfg.step_schedule('mifgsm') == (20, cfg.alpha)
        with pytest.raises(ValueError):
            cfg.step_schedule('pgd')


class TestIterStep:

    def test_zero_gradient(self, rng):
        state = AttackState.initial(rng.uniform(size=SMALL_SHAPE))
        assert state.t == 1 and not state.momentum.any()
        stepped = iter_step(state, np.zeros(SMALL_SHAPE), AttackConfig())
        np.testing.assert_array_equal(stepped.x_adv, state.x_adv)
        assert stepped.t == 2

    def test_saturates_after_four_steps(self):
        cfg = AttackConfig()
        state = AttackState.initial(np.full(SMALL_SHAPE, 0.5))
        g = np.ones(SMALL_SHAPE)
        bound = 0.5 + EPS
        for step in range(1, cfg.iterations + 1):
            state = iter_step(state, g, cfg)
            if step == 3:
                assert np.all(bound - state.x_adv > 1e-3)
            if step == 4:
                np.testing.assert_allclose(state.x_adv, bound, atol=1e-12)
        np.testing.assert_array_equal(state.x_adv, np.full(SMALL_SHAPE, bound))

    def test_budget_invariant(self, rng):
        cfg = AttackConfig()
        state = AttackState.initial(rng.uniform(size=SMALL_SHAPE))
        for _ in range(30):
            state = iter_step(state, rng.normal(size=SMALL_SHAPE), cfg)
            assert np.max(np.abs(state.x_adv - state.x0)) <= EPS + 1e-12
            assert state.x_adv.min() >= 0.0 and state.x_adv.max() <= 1.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            iter_step(AttackState.initial(np.zeros(SMALL_SHAPE)), np.zeros((3, 4, 4)), AttackConfig())


class TestMomentumUpdate:

    def test_zero_decay_normalises(self, rng):
        g = rng.normal(size=SMALL_SHAPE)
        state = AttackState.initial(np.zeros(SMALL_SHAPE))
        state = base_step(state, rng.normal(size=SMALL_SHAPE), AttackConfig(), 'mifgsm')
        np.testing.assert_array_equal(momentum_update(state, g, AttackConfig(mu=0.0)), g / np.abs(g).sum())

    def test_zero_gradient_decays(self, rng):
        m = rng.normal(size=SMALL_SHAPE)
        state = AttackState(np.zeros(SMALL_SHAPE), np.zeros(SMALL_SHAPE), 3, m)
        np.testing.assert_array_equal(momentum_update(state, np.zeros(SMALL_SHAPE), AttackConfig(mu=0.7)), 0.7 * m)

    def test_linear_accumulation(self, rng):
        g = rng.normal(size=SMALL_SHAPE)
        cfg = AttackConfig(mu=1.0)
        state = AttackState.initial(np.zeros(SMALL_SHAPE))
        first = momentum_update(state, g, cfg)
        second = momentum_update(AttackState(state.x0, state.x_adv, 2, first), g, cfg)
        np.testing.assert_array_equal(second, 2.0 * (g / np.abs(g).sum()))


class TestFgsm:

    def test_zero_gradient_is_identity(self, rng):
        model = create_model('Linear', SMALL_SHAPE, NUM_CLASSES)
        model.params['W'] = np.zeros_like(model.params['W'])
        x = rng.uniform(size=SMALL_SHAPE)
        np.testing.assert_array_equal(fgsm_attack(model, x, 0, AttackConfig()), x)

    def test_budget_and_equivalence_with_one_step_ifgsm(self, mlp, rng):
        cfg = AttackConfig()
        for _ in range(5):
            x = rng.uniform(size=SMALL_SHAPE)
            y = int(rng.integers(NUM_CLASSES))
            out = fgsm_attack(mlp, x, y, cfg)
            assert np.max(np.abs(out - x)) <= EPS + 1e-15
            np.testing.assert_array_equal(out, iterative_attack(mlp, x, y, cfg, 'fgsm'))
            np.testing.assert_array_equal(out, iterative_attack(mlp, x, y, cfg.replace(iterations=1, alpha=EPS)))

    def test_increases_loss_on_trained_linear_model(self, trained_small_zoo):
        model = next(m for m in trained_small_zoo if m.architecture_id == 'Linear')
        held_out = generate_synthetic(200, NUM_CLASSES, SMALL_SHAPE, signal=0.05, noise=0.1, seed=9)
        cfg = AttackConfig()
        increased = [cross_entropy(model.forward(fgsm_attack(model, x, y, cfg)), y) > cross_entropy(model.forward(x), y)
                     for x, y in zip(held_out.images, held_out.labels)]
        assert np.mean(increased) >= 0.95


class TestIterativeAttack:

    @pytest.mark.parametrize('base_attack', ['ifgsm', 'mifgsm', 'di2fgsm'])
    def test_budget(self, base_attack, mlp, rng):
        x = rng.uniform(size=SMALL_SHAPE)
        out = iterative_attack(mlp, x, 1, AttackConfig(iterations=10), base_attack)
        assert np.max(np.abs(out - x)) <= EPS + 1e-12
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_zero_momentum_matches_ifgsm(self, mlp, rng):
        cfg = AttackConfig(mu=0.0, iterations=10)
        for _ in range(3):
            x = rng.uniform(size=SMALL_SHAPE)
            np.testing.assert_array_equal(iterative_attack(mlp, x, 2, cfg, 'mifgsm'),
                                          iterative_attack(mlp, x, 2, cfg, 'ifgsm'))

    def test_increases_white_box_loss(self, mlp, rng):
        x = rng.uniform(size=SMALL_SHAPE)
        out = iterative_attack(mlp, x, 0, AttackConfig(iterations=10))
        assert cross_entropy(mlp.forward(out), 0) > cross_entropy(mlp.forward(x), 0)

    def test_di_reproducible_per_stream(self, mlp, rng):
        x = rng.uniform(size=SMALL_SHAPE)
        cfg = AttackConfig(iterations=6, di_probability=1.0, di_max_enlarge=1.5)
        first = iterative_attack(mlp, x, 0, cfg, 'di2fgsm', stream=3)
        np.testing.assert_array_equal(first, iterative_attack(mlp, x, 0, cfg, 'di2fgsm', stream=3))

    def test_unknown_base(self, mlp):
        with pytest.raises(ValueError):
            iterative_attack(mlp, np.zeros(SMALL_SHAPE), 0, AttackConfig(), 'pgd')


class TestDiverseInputTransform:

    def test_zero_probability_is_identity(self, rng):
        x = rng.uniform(size=(3, 16, 16))
        out = diverse_input_transform(x, AttackConfig(di_probability=0.0), make_rng(0))
        np.testing.assert_array_equal(out, x)

    def test_no_enlargement_is_identity(self, rng):
        x = rng.uniform(size=(3, 16, 16))
        cfg = AttackConfig(di_probability=1.0, di_max_enlarge=1.0)
        for seed in range(5):
            np.testing.assert_array_equal(diverse_input_transform(x, cfg, make_rng(seed)), x)

    def test_shape_and_pixels_preserved(self, rng):
        x = rng.uniform(0.1, 1.0, size=(3, 16, 16))
        cfg = AttackConfig(di_probability=1.0, di_max_enlarge=1.5)
        generator = make_rng(1)
        for _ in range(20):
            out = diverse_input_transform(x, cfg, generator)
            assert out.shape == x.shape
            for c in range(3):
                values = out[c][out[c] != 0.0]
                assert np.isin(values, x[c]).all()

    def test_reproducible(self, rng):
        x = rng.uniform(size=(3, 16, 16))
        cfg = AttackConfig(di_probability=1.0, di_max_enlarge=1.3)
        np.testing.assert_array_equal(diverse_input_transform(x, cfg, make_rng(4, 2)),
                                      diverse_input_transform(x, cfg, make_rng(4, 2)))

    def test_scatter_is_adjoint_of_gather(self, rng):
        cfg = AttackConfig(di_probability=1.0, di_max_enlarge=1.4)
        generator = make_rng(2)
        for _ in range(10):
            source = sample_diverse_input_map((3, 16, 16), cfg, generator)
            x = rng.normal(size=(3, 16, 16))
            g = rng.normal(size=(3, 16, 16))
            lhs = np.sum(apply_input_map(x, source) * g)
            rhs = np.sum(x * scatter_input_gradient(g, source))
            assert lhs == pytest.approx(rhs, rel=1e-12, abs=1e-12)


def test_streams_are_independent():
    assert make_rng(0, 0).random() != make_rng(0, 1).random()
    assert make_rng(0, 5).random() == make_rng(0, 5).random()
