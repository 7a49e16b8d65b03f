""" Adaptive model-ensemble attack.

Each iteration follows the same order:
    1. per-model input gradients g_i (on the diverse input when the base attack is di2fgsm)
    2. adaptive weights: one-step probe losses s[k][i] -> adversarial ratios -> softmax
    3. disparity filter: mean pairwise channel cosine of the g_i per pixel, thresholded at eta
    4. gradient of the cross-entropy of the weighted logit fusion, masked by the filter
    5. base-attack update and projection onto the epsilon ball

Switching steps 2 and 3 off gives the plain equal-weight ensemble ("Ens").

"""
from dataclasses import dataclass, field

import numpy as np

from utilities.attack_utilities import (
    AttackState, apply_input_map, base_step, check_base_attack, make_rng, model_gradient, sample_diverse_input_map,
    scatter_input_gradient,
)
from utilities.numerics import (
    as_tensor, channel_cosine_map, clip_to_unit, cross_entropy, one_hot, sign_tensor, softmax, softmax_rows,
)

# Denominator guard of the adversarial ratio
RATIO_GUARD = 1e-12

# name -> (use_agm, use_drf)
ABLATIONS = {
    'Ens': (False, False),
    '+AGM': (True, False),
    '+DRF': (False, True),
    'AdaEA': (True, True),
}


def ablation_modes():
    """The four named ablation switches in reporting order."""
    return dict(ABLATIONS)


@dataclass
class GradientStack:
    """Input gradients of K surrogate models at one point, stacked as (K, C, H, W)."""
    grads: np.ndarray
    model_names: list

    def __post_init__(self):
        self.grads = np.asarray(self.grads, dtype=np.float64)
        if self.grads.ndim != 4 or len(self.grads) < 1:
            raise ValueError(f"gradient stack must be shaped (K, C, H, W) with K >= 1, got {self.grads.shape}")
        if len(self.model_names) != len(self.grads):
            raise ValueError(f"{len(self.grads)} gradients but {len(self.model_names)} model names")

    def __len__(self):
        return len(self.grads)


@dataclass
class AttackTrace:
    """Per-iteration intermediates of one ensemble attack run."""
    weights: list = field(default_factory=list)
    filter_zero_fraction: list = field(default_factory=list)
    gradient_stack: GradientStack = None
    ensemble_gradient: np.ndarray = None
    disparity: np.ndarray = None


def compute_gradient_stack(models, x, y, source=None):
    """Input gradient of every model at x (on the diverse input when a DI map is given)."""
    grads = [model_gradient(model, x, y, source) for model in models]
    return GradientStack(np.stack(grads), [model.model_name for model in models])


def probe_loss(models, x_adv, y, grads, alpha):
    """One-step lookahead losses.

    Returns:
        s: (K, K) matrix with s[k][i] the loss of models[k] on clip(x_adv + alpha * sign(g_i), 0, 1).
    """
    if not isinstance(grads, GradientStack):
        grads = GradientStack(grads, [m.model_name for m in models])
    if len(models) != len(grads):
        raise ValueError(f"{len(models)} models but {len(grads)} gradients")
    if grads.grads.shape[1:] != np.shape(x_adv):
        raise ValueError(f"gradient shape {grads.grads.shape[1:]} does not match image shape {np.shape(x_adv)}")
    probes = np.stack([clip_to_unit(x_adv + alpha * sign_tensor(g)) for g in grads.grads])
    s = np.empty((len(models), len(models)))
    for k, model in enumerate(models):
        logits = model.forward(probes)
        s[k] = [cross_entropy(z, y) for z in logits]
    return s


def adversarial_ratio(s, beta, guard=RATIO_GUARD):
    """rho_i = beta / (K - 1) * sum_{k != i} s[k][i] / max(s[k][k], guard). K = 1 gives [beta]."""
    s = as_tensor(s, 'probe matrix')
    if s.ndim != 2 or s.shape[0] != s.shape[1] or s.shape[0] < 1:
        raise ValueError(f"probe matrix must be square, got shape {s.shape}")
    if np.any(s < 0):
        raise ValueError("probe losses must be non-negative")
    K = len(s)
    if K == 1:
        return np.array([float(beta)])
    ratios = s / np.maximum(np.diag(s), guard)[:, None]
    off_diagonal = ratios.sum(axis=0) - np.diag(ratios)
    return (beta / (K - 1)) * off_diagonal


def agm_weights(rho):
    """Ensemble weights softmax(rho)."""
    return softmax(rho)


def disparity_map(grads):
    """Per-pixel agreement of the surrogate gradients.

    d_i[p, q] averages the channel cosine between g_i and every other g_k at (p, q); the returned map
    averages d_i over all models. Entries lie in [-1, 1].
    """
    stack = grads.grads if isinstance(grads, GradientStack) else np.asarray(grads, dtype=np.float64)
    K = len(stack)
    if K < 2:
        raise ValueError(f"a disparity map needs at least 2 gradients, got {K}")
    pair_cos = np.zeros((K, K) + stack.shape[2:])
    for i in range(K):
        for k in range(i + 1, K):
            pair_cos[i, k] = pair_cos[k, i] = channel_cosine_map(stack[i], stack[k])
    per_model = pair_cos.sum(axis=1) / (K - 1)
    return np.clip(per_model.mean(axis=0), -1.0, 1.0)


def binary_filter(d, eta):
    """1 where d > eta, 0 elsewhere."""
    if not -1.0 <= eta <= 1.0:
        raise ValueError(f"eta must lie in [-1, 1], got {eta}")
    return (np.asarray(d) > eta).astype(np.float64)


def ensemble_gradient(models, x_adv, y, weights, filter_map, source=None):
    """Gradient of cross_entropy(sum_k w_k * logits_k(x_adv), y) masked by the spatial filter.

    Args:
        models: K classifiers.
        x_adv: Current (C, H, W) iterate.
        y: Ground-truth label.
        weights: (K,) ensemble weights.
        filter_map: (H, W) binary filter, broadcast across channels.
        source: Optional diverse-input index map; the fused loss is then evaluated on the
            transformed image and its gradient is scattered back onto x_adv.
    """
    x_adv = np.asarray(x_adv, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    filter_map = np.asarray(filter_map, dtype=np.float64)
    if len(weights) != len(models):
        raise ValueError(f"{len(models)} models but {len(weights)} weights")
    if filter_map.shape != x_adv.shape[1:]:
        raise ValueError(f"filter shape {filter_map.shape} does not match image plane {x_adv.shape[1:]}")

    x_in = x_adv if source is None else apply_input_map(x_adv, source)
    fused = sum(w * model.forward(x_in) for w, model in zip(weights, models))
    dlogits = softmax_rows(fused[None])[0] - one_hot(int(y), len(fused))
    grad = sum(model.backward(x_in, w * dlogits) for w, model in zip(weights, models))
    if source is not None:
        grad = scatter_input_gradient(grad, source)
    return grad * filter_map[None]


def ensemble_cosine_maps(grads, ensemble_grad):
    """Per-model (H, W) cosine map between each surrogate gradient and the ensemble gradient."""
    stack = grads.grads if isinstance(grads, GradientStack) else np.asarray(grads, dtype=np.float64)
    return np.stack([channel_cosine_map(g, ensemble_grad) for g in stack])


def adaea_attack(models, x, y, cfg, base_attack='ifgsm', use_agm=True, use_drf=True, weights=None, stream=0,
                 return_trace=False):
    """Runs the adaptive ensemble attack (or one of its ablations) on a single image.

    Args:
        models: Surrogate classifiers (K >= 1).
        x: Clean (C, H, W) image.
        y: Ground-truth label.
        cfg: AttackConfig.
        base_attack (str): Update rule, one of fgsm/ifgsm/mifgsm/di2fgsm.
        use_agm (bool): Adaptive weights instead of uniform 1/K.
        use_drf (bool): Disparity filter instead of the all-ones mask.
        weights: Fixed ensemble weights; overrides use_agm when given.
        stream (int): Random stream index (the image index in a campaign).
        return_trace (bool): Also return an AttackTrace.

    Returns:
        x_adv, or (x_adv, trace) when return_trace is True.
    """
    models = list(models)
    if not models:
        raise ValueError("adaea_attack needs at least one surrogate model")
    check_base_attack(base_attack)
    K = len(models)
    steps, step_size = cfg.step_schedule(base_attack)
    fixed_weights = None
    if weights is not None:
        fixed_weights = np.asarray(weights, dtype=np.float64)
        if fixed_weights.shape != (K,):
            raise ValueError(f"expected {K} fixed weights, got shape {fixed_weights.shape}")
    uniform = np.full(K, 1.0 / K)

    rng = make_rng(cfg.seed, stream)
    state = AttackState.initial(x)
    trace = AttackTrace()
    ones = np.ones(state.x_adv.shape[1:])
    for _ in range(steps):
        source = sample_diverse_input_map(state.x_adv.shape, cfg, rng) if base_attack == 'di2fgsm' else None
        w, filter_map, stack, d = uniform, ones, None, None
        if K > 1 and (use_agm or use_drf or return_trace):
            stack = compute_gradient_stack(models, state.x_adv, y, source)
        if fixed_weights is not None:
            w = fixed_weights
        elif K > 1 and use_agm:
            s = probe_loss(models, state.x_adv, y, stack, step_size)
            w = agm_weights(adversarial_ratio(s, cfg.beta))
        if K > 1 and (use_drf or return_trace):
            d = disparity_map(stack)
            if use_drf:
                filter_map = binary_filter(d, cfg.eta)

        g = ensemble_gradient(models, state.x_adv, y, w, filter_map, source)
        if return_trace:
            trace.weights.append(np.array(w))
            trace.filter_zero_fraction.append(float(np.mean(filter_map == 0)))
            trace.gradient_stack, trace.ensemble_gradient, trace.disparity = stack, g, d
        state = base_step(state, g, cfg, base_attack)

    if return_trace:
        return state.x_adv, trace
    return state.x_adv


def weight_sweep_attack(models, x, y, cfg, w1, base_attack='ifgsm', stream=0):
    """Equal-ensemble attack on exactly two models with fixed weights (w1, 1 - w1)."""
    models = list(models)
    if len(models) != 2:
        raise ValueError(f"weight sweep needs exactly 2 surrogate models, got {len(models)}")
    if not 0.0 <= w1 <= 1.0:
        raise ValueError(f"w1 must lie in [0, 1], got {w1}")
    return adaea_attack(models, x, y, cfg, base_attack, use_agm=False, use_drf=False, weights=[w1, 1.0 - w1],
                        stream=stream)
