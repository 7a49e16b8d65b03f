""" Fast invariant suite run by `run_adaea.py --command selftest`.

Every check builds its own small (3, 8, 8) models and data, so the suite is independent of any trained
zoo on disk.

"""
import numpy as np

from utilities.attack_utilities import AttackConfig, iterative_attack
from utilities.ensemble_attacks import (
    ABLATIONS, adaea_attack, adversarial_ratio, agm_weights, binary_filter, disparity_map,
)
from utilities.evaluation import CampaignSpec, attack_success_rate, generate_synthetic, run_campaign
from utilities.models import ARCHITECTURES, build_zoo, create_model, gradient_check, train_zoo
from utilities.numerics import (
    channel_cosine, clip_to_ball, cross_entropy, one_hot, relative_error, softmax, softmax_rows,
)

SELFTEST_SHAPE = (3, 8, 8)
SELFTEST_CLASSES = 4
# gradient entries at or below this magnitude are left out of the relative error
GRADIENT_FLOOR = 1e-8


def _require(condition, message):
    if not condition:
        raise AssertionError(message)


def _random_images(rng, count):
    return rng.uniform(0.0, 1.0, size=(count,) + SELFTEST_SHAPE)


def check_gradients(seed):
    rng = np.random.default_rng(seed)
    for architecture in ARCHITECTURES:
        model = create_model(architecture, SELFTEST_SHAPE, SELFTEST_CLASSES, seed=seed)
        for x in _random_images(rng, 3):
            y = int(rng.integers(SELFTEST_CLASSES))
            analytic, numeric, mask = gradient_check(model, x, y)
            error = relative_error(analytic, numeric, mask, floor=GRADIENT_FLOOR)
            _require(error < 1e-4, f"{architecture}: relative gradient error {error:.2e}")


def check_simplex(seed):
    rng = np.random.default_rng(seed)
    for _ in range(200):
        rho = rng.normal(0.0, 10.0, size=int(rng.integers(1, 8)))
        w = agm_weights(rho)
        _require(np.all(w >= 0.0) and abs(w.sum() - 1.0) <= 1e-12, "weights left the simplex")
        _require(np.max(np.abs(agm_weights(rho + rng.normal()) - w)) < 1e-12, "weights not shift invariant")
    np.testing.assert_allclose(softmax([1.0, 2.0, 3.0]), [0.09003057, 0.24472847, 0.66524096], atol=1e-8)


def check_hand_cases(seed):
    np.testing.assert_array_equal(adversarial_ratio([[1.0, 2.0], [1.0, 1.0]], 10.0), [10.0, 20.0])
    np.testing.assert_allclose(adversarial_ratio(np.full((3, 3), 0.7), 10.0), [10.0] * 3, atol=1e-12)
    _require(abs(cross_entropy([0.0, 0.0], 0) - np.log(2.0)) < 1e-12, "cross-entropy of uniform logits is not log 2")
    _require(abs(attack_success_rate(0.9, 0.45) - 0.5) < 1e-9, "attack success rate of 0.9 -> 0.45 is not 0.5")

    g = np.random.default_rng(seed).normal(size=SELFTEST_SHAPE) + 1e-3
    _require(np.all(disparity_map(np.stack([g, g])) > 1.0 - 1e-12), "identical gradients are not fully aligned")
    _require(np.all(binary_filter(disparity_map(np.stack([g, g])), -0.3) == 1.0), "identical gradients were filtered")
    _require(np.all(disparity_map(np.stack([g, -g])) < -1.0 + 1e-12), "opposite gradients are not fully opposed")
    _require(np.all(binary_filter(disparity_map(np.stack([g, -g])), -0.3) == 0.0),
             "opposite gradients passed the filter")

    a = np.zeros((2, 1, 1))
    a[0] = 1.0
    b = np.zeros((2, 1, 1))
    b[1] = 1.0
    _require(abs(disparity_map(np.stack([a, a, b]))[0, 0] - 1.0 / 3.0) < 1e-12, "disparity of (a, a, b) is not 1/3")
    _require(channel_cosine(a, b, 0, 0) == 0.0, "cosine of orthogonal channel vectors is not 0")

    x0 = np.full(SELFTEST_SHAPE, 0.5)
    _require(abs(clip_to_ball(x0, x0 + 0.4, 8 / 255)[0, 0, 0] - (0.5 + 8 / 255)) < 1e-15,
             "ball projection missed x0 + epsilon")


def check_filter_monotone(seed):
    grads = np.random.default_rng(seed).normal(size=(3,) + SELFTEST_SHAPE)
    d = disparity_map(grads)
    zeros = [int(np.sum(binary_filter(d, eta) == 0)) for eta in (-1.0, -0.5, -0.3, 0.0, 0.5, 1.0)]
    _require(zeros == sorted(zeros), f"filter zero counts not monotone: {zeros}")


def check_degeneracy(seed):
    rng = np.random.default_rng(seed)
    model = create_model('Mlp', SELFTEST_SHAPE, SELFTEST_CLASSES, seed=seed)
    twin = model.copy()
    cfg = AttackConfig(iterations=5, seed=seed)
    for index, x in enumerate(_random_images(rng, 3)):
        y = int(rng.integers(SELFTEST_CLASSES))
        for base_attack in ('fgsm', 'ifgsm', 'mifgsm', 'di2fgsm'):
            reference = iterative_attack(model, x, y, cfg, base_attack, stream=index)
            single = adaea_attack([model], x, y, cfg, base_attack, stream=index)
            pair = adaea_attack([model, twin], x, y, cfg, base_attack, stream=index)
            _require(np.array_equal(single, reference), f"K=1 {base_attack} differs from the single-model attack")
            _require(np.array_equal(pair, reference),
                     f"identical pair {base_attack} differs from the single-model attack")


def _straight_line_ens(models, x, y, cfg):
    x_adv = x.copy()
    for _ in range(cfg.iterations):
        logits = sum((1.0 / len(models)) * m.forward(x_adv) for m in models)
        probs = softmax_rows(logits[None])[0]
        grad = sum(m.backward(x_adv, (1.0 / len(models)) * (probs - one_hot(y, len(logits)))) for m in models)
        x_adv = np.clip(np.clip(x_adv + cfg.alpha * np.sign(grad), x - cfg.epsilon, x + cfg.epsilon), 0.0, 1.0)
    return x_adv


def check_ens_equivalence(seed):
    rng = np.random.default_rng(seed)
    models = build_zoo(['Mlp', 'TinyAttention'], seed, SELFTEST_SHAPE, SELFTEST_CLASSES)
    cfg = AttackConfig(iterations=5, seed=seed)
    for x in _random_images(rng, 3):
        y = int(rng.integers(SELFTEST_CLASSES))
        ens = adaea_attack(models, x, y, cfg, 'ifgsm', use_agm=False, use_drf=False)
        reference = _straight_line_ens(models, x, y, cfg)
        _require(np.array_equal(ens, reference), "Ens differs from the equal-weight reference loop")


def check_campaign_budget(seed):
    data = generate_synthetic(96, SELFTEST_CLASSES, SELFTEST_SHAPE, seed=seed)
    zoo = train_zoo(build_zoo(['Linear', 'Mlp', 'TinyAttention'], seed, SELFTEST_SHAPE, SELFTEST_CLASSES), data,
                    epochs=3, seed=seed)
    names = [m.model_name for m in zoo]
    spec = CampaignSpec(names[:2], names, attacks=list(ABLATIONS), bases=['fgsm', 'ifgsm', 'mifgsm', 'di2fgsm'],
                        cfg=AttackConfig(iterations=4, seed=seed), samples=6, seed=seed)
    report = run_campaign(spec, zoo, data)
    _require(len(report) == len(ABLATIONS) * 4 * len(names), f"campaign produced {len(report)} rows")
    frame = report.to_frame()
    _require(frame['asr'].between(0.0, 1.0).all(), "attack success rate left [0, 1]")
    _require((frame['white_box'] == frame['target'].isin(names[:2])).all(),
             "white-box flags do not match the surrogates")


SELFTEST_CHECKS = {
    'gradient oracle': check_gradients,
    'weight simplex': check_simplex,
    'hand-evaluated cases': check_hand_cases,
    'filter monotonicity': check_filter_monotone,
    'single-model degeneracy': check_degeneracy,
    'equal-weight ensemble': check_ens_equivalence,
    'campaign budget': check_campaign_budget,
}


def run_selftest(seed=0, verbose=False):
    """Runs every check and prints 'passed=<n> failed=<m>'.

    Returns:
        passed (int), failed (int), failures (dict): check name -> error message.
    """
    failures = {}
    for name, check in SELFTEST_CHECKS.items():
        try:
            check(seed)
        except Exception as e:
            failures[name] = f"{type(e).__name__}: {e}"
        if verbose:
            print(f"| {name}: {'FAILED ' + failures[name] if name in failures else 'ok'}")
    passed = len(SELFTEST_CHECKS) - len(failures)
    print(f"passed={passed} failed={len(failures)}")
    return passed, len(failures), failures
